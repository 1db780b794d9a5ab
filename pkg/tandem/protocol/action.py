"""
    Action request/feedback/result exchange between the ground agent
    (client) and the aerial agent (server).

    Both endpoints are step machines fed one frame at a time, so the same
    logic runs lock-step in a single thread, blocking over a transport, or
    as two threads.
    Usage:
    ```
    from tandem.protocol import action
    client_end, server_end = QueueTransport.pair()
    exchange = action.run_action_client(client_end, msg, timeout=5.0)
    # or, deterministic and single threaded
    client, server = action.exchange_lockstep(msg, handler)
    client.state, server.state
    ```
"""
import enum
import logging
import math
import time
import typing
from concurrent.futures import ThreadPoolExecutor, as_completed

from . import codec
from .codec import Kind, Packet, ProtocolError, ResultCode
from .message import UnifiedGraphMessage
from .transport import QueueTransport, TickTransport


class ActionState(enum.Enum):
    IDLE = 'Idle'
    REQUEST_SENT = 'RequestSent'
    ACCEPTED = 'Accepted'
    FEEDBACK_DEPLOY_ACK = 'FeedbackDeployAck'
    EXPLORING_RESULT = 'ExploringResult'
    DONE = 'Done'
    REJECTED = 'Rejected'


transitions = {
    ActionState.IDLE: ActionState.REQUEST_SENT,
    ActionState.REQUEST_SENT: ActionState.ACCEPTED,
    ActionState.ACCEPTED: ActionState.FEEDBACK_DEPLOY_ACK,
    ActionState.FEEDBACK_DEPLOY_ACK: ActionState.EXPLORING_RESULT,
    ActionState.EXPLORING_RESULT: ActionState.DONE,
}

TERMINAL = (ActionState.DONE, ActionState.REJECTED)


class ActionExchange:
    """State of one endpoint with the time of every transition"""

    def __init__(self, clock=time.monotonic):
        self.clock = clock
        self.state = ActionState.IDLE
        self.history = [(ActionState.IDLE, clock())]
        self.reason = ''
        self.result_code = None

    def __repr__(self):
        return f'{self.__class__.__name__}:{self.state.value}'

    @property
    def terminal(self):
        return self.state in TERMINAL

    @property
    def entered_at(self):
        return self.history[-1][1]

    def advance(self, target: ActionState):
        if target == ActionState.REJECTED:
            if self.terminal:
                raise ValueError(f"Can't reject an exchange already {self.state.value}")
        elif transitions.get(self.state) != target:
            raise ValueError(f"Illegal transition {self.state.value} -> {target.value}")
        self.state = target
        self.history.append((target, self.clock()))

    def reject(self, reason):
        if not self.terminal:
            self.reason = reason
            self.advance(ActionState.REJECTED)


class _Endpoint:

    def __init__(self, transport, mission_id, timeout=5.0, clock=time.monotonic):
        self.transport = transport
        self.mission_id = mission_id
        self.timeout = timeout
        self.exchange = ActionExchange(clock)

    @property
    def state(self):
        return self.exchange.state

    def _send(self, kind, **fields):
        self.transport.send(codec.encode_packet(Packet(kind, self.mission_id, **fields)))

    def _fail(self, reason, notify=True):
        if self.exchange.terminal:
            return
        logging.warning(f'{self.__class__.__name__} rejecting: {reason}')
        if notify:
            self._send(Kind.REJECT, reason=reason)
        self.exchange.reject(reason)

    def _decode(self, frame):
        try:
            return codec.decode_packet(frame)
        except ProtocolError as _e:
            self._fail(f'{type(_e).__name__}: {_e}')
            return None

    def state_timeout(self):
        return self.timeout

    def check_timeout(self):
        """Reject when the current state has waited longer than its timeout"""
        if self.exchange.terminal or self.exchange.state == ActionState.IDLE:
            return
        if self.exchange.clock() - self.exchange.entered_at > self.state_timeout():
            self._fail(f'timed out in {self.exchange.state.value}')


class ActionClient(_Endpoint):

    def __init__(self, transport, msg: UnifiedGraphMessage, timeout=5.0, clock=time.monotonic,
                 on_deploy_ack=None):
        super().__init__(transport, msg.mission_id, timeout, clock)
        self.msg = msg
        self.on_deploy_ack = on_deploy_ack

    def start(self):
        self.transport.send(codec.encode(self.msg))
        self.exchange.advance(ActionState.REQUEST_SENT)
        logging.info(f'Hand-over requested for frontier {self.msg.target_id}')

    def handle(self, frame):
        packet = self._decode(frame)
        if packet is None or self.exchange.terminal:
            return
        if packet.kind == Kind.REJECT:
            self._fail(packet.reason, notify=False)
            return
        expected = {
            ActionState.REQUEST_SENT: Kind.ACCEPTED,
            ActionState.ACCEPTED: Kind.FEEDBACK,
            ActionState.FEEDBACK_DEPLOY_ACK: Kind.RESULT,
        }.get(self.state)
        if packet.kind != expected:
            self._fail(f'unexpected {packet.kind.name} in {self.state.value}')
            return
        if packet.kind == Kind.ACCEPTED:
            self.exchange.advance(ActionState.ACCEPTED)
        elif packet.kind == Kind.FEEDBACK:
            self.exchange.advance(ActionState.FEEDBACK_DEPLOY_ACK)
            if self.on_deploy_ack is not None:
                self.on_deploy_ack()
        else:
            self.exchange.result_code = ResultCode(packet.code)
            self.exchange.advance(ActionState.EXPLORING_RESULT)
            # echo the result so the server can finish too
            self._send(Kind.RESULT, code=packet.code)
            self.exchange.advance(ActionState.DONE)
            logging.info(f'Hand-over done: {self.exchange.result_code.name.lower()}')


class ActionServer(_Endpoint):
    """handler(msg) starts the aerial exploration and returns a ResultCode;
    raising ValueError rejects the request. ack_timeout bounds the wait for
    the client's echo of the result and defaults to timeout"""

    def __init__(self, transport, handler, timeout=5.0, clock=time.monotonic, mission_id='',
                 ack_timeout=None):
        super().__init__(transport, mission_id, timeout, clock)
        self.handler = handler
        self.ack_timeout = timeout if ack_timeout is None else ack_timeout
        self.msg = None

    def state_timeout(self):
        if self.state == ActionState.EXPLORING_RESULT:
            return self.ack_timeout
        return self.timeout

    def handle(self, frame):
        packet = self._decode(frame)
        if packet is None or self.exchange.terminal:
            return
        if packet.kind == Kind.REJECT:
            self._fail(packet.reason, notify=False)
            return
        if self.state == ActionState.IDLE and packet.kind == Kind.REQUEST:
            self.mission_id = packet.mission_id
            self.exchange.advance(ActionState.REQUEST_SENT)
            self._serve(packet.message)
        elif self.state == ActionState.EXPLORING_RESULT and packet.kind == Kind.RESULT:
            self.exchange.advance(ActionState.DONE)
        else:
            self._fail(f'unexpected {packet.kind.name} in {self.state.value}')

    def _serve(self, msg: UnifiedGraphMessage):
        if msg.scan.point_count <= 0:
            self._fail('request carries no scan metadata')
            return
        self.msg = msg
        self._send(Kind.ACCEPTED)
        self.exchange.advance(ActionState.ACCEPTED)
        self._send(Kind.FEEDBACK, code=int(codec.FeedbackCode.DEPLOY_ACK))
        self.exchange.advance(ActionState.FEEDBACK_DEPLOY_ACK)
        try:
            code = ResultCode(self.handler(msg))
        except ValueError as _e:
            self._fail(f'handler refused the graph: {_e}')
            return
        self.exchange.result_code = code
        self._send(Kind.RESULT, code=int(code))
        self.exchange.advance(ActionState.EXPLORING_RESULT)


def _drive(endpoint: _Endpoint, poll=0.05):
    while not endpoint.exchange.terminal:
        wait = endpoint.state_timeout() - (endpoint.exchange.clock() - endpoint.exchange.entered_at)
        frame = endpoint.transport.receive(timeout=max(min(wait, poll), 0.0))
        if frame is not None:
            endpoint.handle(frame)
        else:
            endpoint.check_timeout()
    return endpoint.exchange


def run_action_client(transport, msg: UnifiedGraphMessage, timeout=5.0, clock=time.monotonic,
                      on_deploy_ack=None) -> ActionExchange:
    client = ActionClient(transport, msg, timeout, clock, on_deploy_ack)
    client.start()
    return _drive(client)


def run_action_server(transport, handler, timeout=5.0, clock=time.monotonic) -> ActionExchange:
    server = ActionServer(transport, handler, timeout, clock)
    # the server waits for a request without a deadline only while idle
    while server.state == ActionState.IDLE:
        frame = transport.receive(timeout=timeout)
        if frame is None:
            server.exchange.reject('no request received')
            return server.exchange
        server.handle(frame)
    return _drive(server)


class TickClock:
    """Deterministic clock advanced by the lock-step scheduler"""

    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def tick(self, step=1.0):
        self.now += step


def exchange_lockstep(msg: UnifiedGraphMessage, handler, max_rounds=16, on_deploy_ack=None, timeout=None,
                      client_delays=(), server_delays=()):
    """Single-threaded exchange over an in-process channel; timestamps
    count scheduler rounds. Each side's frames are held back by its delays
    (in rounds, one per frame sent) and a state that waits longer than
    timeout rounds (default max_rounds) is rejected"""
    clock = TickClock()
    timeout = max_rounds if timeout is None else timeout
    client_end, server_end = TickTransport.pair(clock, client_delays, server_delays)
    client = ActionClient(client_end, msg, timeout=timeout, clock=clock, on_deploy_ack=on_deploy_ack)
    # frames are never lost here, so the client's echo or reject always arrives
    server = ActionServer(server_end, handler, timeout=timeout, clock=clock, ack_timeout=math.inf)
    client.start()
    for _ in range(max_rounds):
        for endpoint in (server, client):
            frame = endpoint.transport.receive(timeout=0)
            while frame is not None:
                endpoint.handle(frame)
                frame = endpoint.transport.receive(timeout=0)
            endpoint.check_timeout()
        if client.exchange.terminal and server.exchange.terminal:
            break
        clock.tick()
    for endpoint in (client, server):
        if not endpoint.exchange.terminal:
            endpoint.exchange.reject('exchange did not settle')
    return client.exchange, server.exchange


def exchange_threaded(msg: UnifiedGraphMessage, handler, timeout=5.0, client_delay=0.0,
                      server_delay=0.0) -> typing.Tuple[ActionExchange, ActionExchange]:
    """Client and server on two threads talking only through the transport"""
    client_end, server_end = QueueTransport.pair(client_delay, server_delay)
    with ThreadPoolExecutor(max_workers=2) as executor:
        futures = {
            executor.submit(run_action_client, client_end, msg, timeout): 'client',
            executor.submit(run_action_server, server_end, handler, timeout): 'server',
        }
        results = {}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return results['client'], results['server']
