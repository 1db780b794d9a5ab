import dataclasses
import math

import networkx as nx
import numpy as np
import pytest

from conftest import graph_from, random_connected_graph, read_hex_fixture
from tandem.geometry import RigidTransform, RobotState
from tandem.planning.graph import ExplorationGraph, Path
from tandem.planning.hierarchy import FrontierRegistry, FrontierStatus
from tandem.protocol import action, codec, message
from tandem.protocol.action import ActionExchange, ActionState
from tandem.protocol.codec import Kind, MalformedFrame, Packet, ResultCode
from tandem.protocol.message import ContractViolation, ScanMetadata, UnifiedGraphMessage
from tandem.protocol.transport import QueueTransport

TF = RigidTransform.from_yaw(0.3, (1.0, -2.0, 0.5))
SCAN = ScanMetadata(1200, 0xDEADBEEF)


def _candidate(n=5):
    return graph_from([(float(i), 0.0, 0.3) for i in range(n)], [(i, i + 1) for i in range(n - 1)],
                      level='candidate', frontiers={n - 1})


def _message(registry=None):
    graph = _candidate()
    path = Path(tuple(graph.node_ids()), 4.0, confidence=0.2, penalized=True)
    return message.build_unified_graph(graph, path, registry or FrontierRegistry(), TF, scan=SCAN)


def _started(msg):
    return ResultCode.EXPLORATION_STARTED


class TestUnifiedGraph:

    def test_registry_frontier_added(self):
        registry = FrontierRegistry(2.0)
        entry = registry.add(RobotState(-6.0, 3.0, 0.3), 1.6)
        msg = _message(registry)
        assert len(msg.graph) == 6
        assert msg.frontier_ids == (4, 5)
        assert msg.graph.neighbors(5) == []
        assert entry.status == FrontierStatus.SHARED

    def test_empty_registry(self):
        msg = _message()
        assert len(msg.graph) == 5
        assert msg.graph.level == 'unified'
        assert msg.target_id == 4

    def test_registry_frontier_merged_with_graph_frontier(self):
        registry = FrontierRegistry(2.0)
        entry = registry.add(RobotState(4.5, 0.0, 0.3), 1.6)
        assert len(_message(registry).graph) == 5
        assert entry.status == FrontierStatus.SHARED

    def test_target_must_be_frontier(self):
        graph = _candidate()
        with pytest.raises(ContractViolation):
            message.build_unified_graph(graph, Path((0, 1, 2), 2.0), FrontierRegistry(), TF)

    def test_ids_are_renumbered(self):
        graph = graph_from([(0, 0, 0), (1, 0, 0), (2, 0, 0)], [(0, 1), (1, 2)], frontiers={2})
        sub = graph.induced([0, 2], 'candidate', extra_edges=())
        sub.add_edge(0, 2)
        msg = message.build_unified_graph(sub, Path((0, 2), 2.0), None, TF)
        assert msg.graph.node_ids() == [0, 1]
        assert msg.candidate_path.node_ids == (0, 1)

    def test_renumbering_preserves_structure(self, rng):
        for _ in range(100):
            dense = random_connected_graph(rng, int(rng.integers(3, 25)))
            labels = dict(zip(dense.node_ids(), sorted(rng.choice(1000, len(dense), replace=False).tolist())))
            sparse = ExplorationGraph('candidate')
            for node in dense.sorted_nodes():
                frontier = node.is_frontier or node.id == 0
                sparse.add_node(dataclasses.replace(node, id=labels[node.id], is_frontier=frontier))
            for a, b, length in dense.sorted_edges():
                sparse.add_edge(labels[a], labels[b], length)
            target = labels[0]
            root = labels[dense.node_ids()[-1]]
            route = tuple(nx.shortest_path(sparse.nx_graph, root, target, weight='length'))
            msg = message.build_unified_graph(sparse, Path(route, sparse.path_length(route)), None, TF)
            assert msg.graph.node_ids() == list(range(len(dense)))
            assert nx.is_isomorphic(
                sparse.nx_graph, msg.graph.nx_graph,
                node_match=lambda a, b: a['node'].gain == b['node'].gain and a['node'].is_frontier == b['node'].is_frontier,
                edge_match=lambda a, b: a['length'] == b['length'],
            )
            renumbered = msg.candidate_path.node_ids
            assert len(renumbered) == len(route)
            assert msg.graph.node(renumbered[-1]).is_frontier
            assert msg.graph.path_length(renumbered) == pytest.approx(sparse.path_length(route))

    def test_validate_catches_wrong_edge_length(self):
        msg = _message()
        msg.graph.nx_graph.edges[0, 1]['length'] = 3.0
        with pytest.raises(ContractViolation):
            message.validate(msg)

    def test_scan_metadata(self):
        points = np.arange(30, dtype=float).reshape(10, 3)
        meta = ScanMetadata.from_points(points)
        assert meta.point_count == 10
        assert meta == ScanMetadata.from_points(points.copy())


class TestCodec:

    def test_round_trip(self):
        msg = _message()
        assert codec.decode(codec.encode(msg)) == msg

    def test_deterministic_encoding(self):
        assert codec.encode(_message()) == codec.encode(_message())

    def test_absent_confidence_round_trips(self):
        msg = _message()
        msg = dataclasses.replace(msg, candidate_path=Path(msg.candidate_path.node_ids, 4.0))
        assert codec.decode(codec.encode(msg)).candidate_path.confidence is None

    def test_accepted_golden_frame(self):
        frame = read_hex_fixture('accepted_tandem.hex')
        assert codec.encode_packet(Packet(Kind.ACCEPTED, 'tandem')) == frame
        assert codec.decode_packet(frame) == Packet(Kind.ACCEPTED, 'tandem')

    def test_result_golden_frame(self):
        frame = read_hex_fixture('result_reached.hex')
        packet = codec.decode_packet(frame)
        assert packet.kind == Kind.RESULT
        assert packet.code == ResultCode.FIRST_FRONTIER_REACHED

    def test_truncated_frame(self):
        with pytest.raises(MalformedFrame):
            codec.decode_packet(read_hex_fixture('accepted_truncated.hex'))

    def test_corrupted_length_prefix(self):
        frame = bytearray(codec.encode(_message()))
        frame[0] ^= 0x01
        with pytest.raises(MalformedFrame):
            codec.decode(bytes(frame))

    def test_truncated_body_with_matching_prefix(self):
        payload = codec.split_frame(codec.encode(_message()))[:-3]
        frame = codec.wire_formats['u32'].pack(len(payload)) + payload
        with pytest.raises(MalformedFrame):
            codec.decode(frame)

    def test_unsupported_version(self):
        frame = bytearray(read_hex_fixture('accepted_tandem.hex'))
        frame[4] = 9
        with pytest.raises(codec.UnsupportedVersion):
            codec.decode_packet(bytes(frame))

    def test_unknown_kind(self):
        frame = bytearray(read_hex_fixture('accepted_tandem.hex'))
        frame[6] = 42
        with pytest.raises(codec.InvalidMessage):
            codec.decode_packet(bytes(frame))

    def test_decode_expects_request(self):
        with pytest.raises(codec.InvalidMessage):
            codec.decode(read_hex_fixture('accepted_tandem.hex'))

    def test_bad_path_is_invalid(self):
        msg = _message()
        broken = dataclasses.replace(msg, candidate_path=Path((0, 1, 9), 4.0))
        with pytest.raises(codec.InvalidMessage):
            codec.decode(codec.encode(broken))

    def test_message_is_much_smaller_than_a_map(self):
        frame = codec.encode(_message())
        assert len(frame) < 1024


class TestStaticTransform:

    def test_applies_to_pose(self):
        msg = _message()
        pose = message.apply_static_transform(msg, RobotState(0.0, 0.0, 0.0, 0.1))
        assert (pose.x, pose.y, pose.z) == pytest.approx((1.0, -2.0, 0.5))
        assert pose.psi == pytest.approx(0.4)

    def test_round_trip_between_frames(self, rng):
        msg = _message()
        for _ in range(50):
            pose = RobotState(*rng.uniform(-5, 5, 3), rng.uniform(-math.pi, math.pi))
            back = message.apply_static_transform(msg, message.to_aerial_frame(msg, pose))
            assert back.as_array() == pytest.approx(pose.as_array(), abs=1e-9)
            assert math.cos(back.psi - pose.psi) == pytest.approx(1.0)


class TestActionExchange:

    def test_state_order(self):
        exchange = ActionExchange(clock=action.TickClock())
        for state in (ActionState.REQUEST_SENT, ActionState.ACCEPTED, ActionState.FEEDBACK_DEPLOY_ACK,
                      ActionState.EXPLORING_RESULT, ActionState.DONE):
            exchange.advance(state)
        assert [s for s, _ in exchange.history][-1] == ActionState.DONE

    def test_illegal_transition(self):
        exchange = ActionExchange()
        with pytest.raises(ValueError):
            exchange.advance(ActionState.ACCEPTED)

    def test_terminal_cannot_be_rejected(self):
        exchange = ActionExchange()
        exchange.reject('first')
        with pytest.raises(ValueError):
            exchange.advance(ActionState.REJECTED)


class TestLockstep:

    def test_happy_path(self):
        acks = []
        client, server = action.exchange_lockstep(_message(), _started, on_deploy_ack=lambda: acks.append(1))
        assert client.state == ActionState.DONE
        assert server.state == ActionState.DONE
        assert client.result_code == ResultCode.EXPLORATION_STARTED
        assert acks == [1]
        assert [s for s, _ in client.history] == [
            ActionState.IDLE, ActionState.REQUEST_SENT, ActionState.ACCEPTED, ActionState.FEEDBACK_DEPLOY_ACK,
            ActionState.EXPLORING_RESULT, ActionState.DONE,
        ]

    def test_history_timestamps_do_not_decrease(self):
        client, server = action.exchange_lockstep(_message(), _started)
        for exchange in (client, server):
            stamps = [t for _, t in exchange.history]
            assert stamps == sorted(stamps)

    def test_missing_node_rejected(self):
        msg = _message()
        broken = dataclasses.replace(msg, candidate_path=Path((0, 1, 9), 4.0))
        client, server = action.exchange_lockstep(broken, _started)
        assert client.state == ActionState.REJECTED
        assert server.state == ActionState.REJECTED
        assert 'InvalidMessage' in server.reason

    def test_handler_refusal(self):
        def refuse(msg):
            raise ValueError('empty graph')
        client, server = action.exchange_lockstep(_message(), refuse)
        assert client.state == ActionState.REJECTED
        assert 'empty graph' in client.reason

    def test_missing_scan_metadata(self):
        msg = dataclasses.replace(_message(), scan=ScanMetadata())
        client, server = action.exchange_lockstep(msg, _started)
        assert client.state == server.state == ActionState.REJECTED


class TestBlocking:

    def test_silent_server_times_out(self):
        client_end, _ = QueueTransport.pair()
        exchange = action.run_action_client(client_end, _message(), timeout=0.2)
        assert exchange.state == ActionState.REJECTED
        assert 'timed out' in exchange.reason

    def test_server_without_request(self):
        _, server_end = QueueTransport.pair()
        exchange = action.run_action_server(server_end, _started, timeout=0.1)
        assert exchange.state == ActionState.REJECTED

    def test_threaded_interleavings(self, rng):
        for _ in range(5):
            delays = rng.uniform(0.0, 0.02, 2)
            client, server = action.exchange_threaded(_message(), _started, timeout=5.0,
                                                      client_delay=delays[0], server_delay=delays[1])
            assert client.state == ActionState.DONE
            assert server.state == ActionState.DONE

    def test_slow_server_rejects_both_ends(self):
        client, server = action.exchange_threaded(_message(), _started, timeout=0.05, server_delay=0.15)
        assert client.state == ActionState.REJECTED
        assert server.state == ActionState.REJECTED
        assert 'timed out' in client.reason


class TestDelayedLockstep:

    TIMEOUT = 3

    def test_late_acceptance_rejects_both_ends(self):
        client, server = action.exchange_lockstep(_message(), _started, max_rounds=32, timeout=self.TIMEOUT,
                                                  server_delays=(2 * self.TIMEOUT,))
        assert client.state == server.state == ActionState.REJECTED
        assert client.reason == 'timed out in RequestSent'
        assert server.reason == client.reason

    def test_late_echo_still_completes(self):
        client, server = action.exchange_lockstep(_message(), _started, max_rounds=32, timeout=self.TIMEOUT,
                                                  client_delays=(0, 4 * self.TIMEOUT))
        assert client.state == server.state == ActionState.DONE

    def test_randomized_interleavings_agree(self, rng):
        outcomes = {ActionState.DONE: 0, ActionState.REJECTED: 0}
        for _ in range(200):
            client_delays = rng.integers(0, 2 * self.TIMEOUT + 1, 4).tolist()
            server_delays = rng.integers(0, 2 * self.TIMEOUT + 1, 4).tolist()
            client, server = action.exchange_lockstep(_message(), _started, max_rounds=64, timeout=self.TIMEOUT,
                                                      client_delays=client_delays, server_delays=server_delays)
            assert client.state == server.state, (client_delays, server_delays, client.reason, server.reason)
            assert 'did not settle' not in client.reason
            outcomes[client.state] += 1
        assert outcomes[ActionState.DONE] > 0
        assert outcomes[ActionState.REJECTED] > 0
