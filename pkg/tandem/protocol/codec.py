"""
    Canonical wire codec for the hand-over exchange.

    frame   = u32 payload length | payload
    payload = u16 version | u8 kind | body
    All numerics are little-endian. Strings are u16 byte length + UTF-8.
    Optional values are a u8 presence flag followed by an f64 (0.0 when absent).

    Request body:
        string mission_id
        f64 x 9 rotation (row major), f64 x 3 translation
        u32 scan point count, u32 scan CRC-32
        u8 graph level
        u32 node count, then per node in ascending id:
            u32 id, f64 x, f64 y, f64 z, f64 psi, f64 gain, u8 frontier, optional confidence
        u32 edge count, then per edge in ascending (a, b) with a < b:
            u32 a, u32 b, f64 length
        u32 path node count, u32 ids, f64 length, optional confidence, u8 penalized
        u32 frontier count, u32 ids ascending
    Accepted body:  string mission_id
    Feedback body:  string mission_id, u8 code (0 deploy acknowledged)
    Result body:    string mission_id, u8 code (0 exploration started, 1 first frontier reached)
    Reject body:    string mission_id, string reason
"""
import dataclasses
import enum
import struct
import typing

from ..geometry import RigidTransform, RobotState
from ..planning.graph import LEVELS, ExplorationGraph, GraphNode, Path
from .message import PROTOCOL_VERSION, ContractViolation, ScanMetadata, UnifiedGraphMessage, validate

wire_formats = {
    'u8': struct.Struct('<B'),
    'u16': struct.Struct('<H'),
    'u32': struct.Struct('<I'),
    'f64': struct.Struct('<d'),
}


class ProtocolError(ValueError):
    """Base of every wire-level failure"""


class UnsupportedVersion(ProtocolError):
    pass


class MalformedFrame(ProtocolError):
    pass


class InvalidMessage(ProtocolError):
    pass


class Kind(enum.IntEnum):
    REQUEST = 0
    ACCEPTED = 1
    FEEDBACK = 2
    RESULT = 3
    REJECT = 4


class FeedbackCode(enum.IntEnum):
    DEPLOY_ACK = 0


class ResultCode(enum.IntEnum):
    EXPLORATION_STARTED = 0
    FIRST_FRONTIER_REACHED = 1


@dataclasses.dataclass(frozen=True)
class Packet:
    kind: Kind
    mission_id: str
    message: typing.Optional[UnifiedGraphMessage] = None
    code: int = 0
    reason: str = ''


class _Writer:

    def __init__(self):
        self.buffer = bytearray()

    def put(self, fmt, value):
        self.buffer += wire_formats[fmt].pack(value)

    def put_string(self, text):
        data = text.encode('utf-8')
        if len(data) > 0xFFFF:
            raise ValueError(f"String of {len(data)} bytes does not fit a u16 length")
        self.put('u16', len(data))
        self.buffer += data

    def put_optional(self, value):
        self.put('u8', 0 if value is None else 1)
        self.put('f64', 0.0 if value is None else float(value))


class _Reader:

    def __init__(self, data):
        self.data = memoryview(data)
        self.offset = 0

    def take(self, fmt):
        codec = wire_formats[fmt]
        if self.offset + codec.size > len(self.data):
            raise MalformedFrame(f"Payload ends inside a {fmt} at offset {self.offset}")
        value = codec.unpack_from(self.data, self.offset)[0]
        self.offset += codec.size
        return value

    def take_string(self):
        size = self.take('u16')
        if self.offset + size > len(self.data):
            raise MalformedFrame(f"Payload ends inside a string at offset {self.offset}")
        raw = bytes(self.data[self.offset:self.offset + size])
        self.offset += size
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError as _e:
            raise InvalidMessage(f"String at offset {self.offset - size} is not UTF-8") from _e

    def take_optional(self):
        present = self.take('u8')
        value = self.take('f64')
        if present not in (0, 1):
            raise InvalidMessage(f"Bad presence flag {present}")
        return value if present else None

    def take_flag(self):
        flag = self.take('u8')
        if flag not in (0, 1):
            raise InvalidMessage(f"Bad boolean flag {flag}")
        return bool(flag)

    def finish(self):
        if self.offset != len(self.data):
            raise MalformedFrame(f"{len(self.data) - self.offset} trailing bytes after the body")


def _write_message(out: _Writer, msg: UnifiedGraphMessage):
    tf = msg.static_transform
    for value in list(tf.rotation.ravel()) + list(tf.translation):
        out.put('f64', float(value))
    out.put('u32', msg.scan.point_count)
    out.put('u32', msg.scan.checksum)
    out.put('u8', LEVELS.index(msg.graph.level))
    nodes = msg.graph.sorted_nodes()
    out.put('u32', len(nodes))
    for node in nodes:
        out.put('u32', node.id)
        for value in (node.pose.x, node.pose.y, node.pose.z, node.pose.psi, node.gain):
            out.put('f64', float(value))
        out.put('u8', int(node.is_frontier))
        out.put_optional(node.confidence)
    edges = msg.graph.sorted_edges()
    out.put('u32', len(edges))
    for a, b, length in edges:
        out.put('u32', a)
        out.put('u32', b)
        out.put('f64', float(length))
    path = msg.candidate_path
    out.put('u32', len(path.node_ids))
    for node_id in path.node_ids:
        out.put('u32', node_id)
    out.put('f64', float(path.length))
    out.put_optional(path.confidence)
    out.put('u8', int(path.penalized))
    out.put('u32', len(msg.frontier_ids))
    for node_id in msg.frontier_ids:
        out.put('u32', node_id)


def _read_message(reader: _Reader, mission_id) -> UnifiedGraphMessage:
    values = [reader.take('f64') for _ in range(12)]
    scan = ScanMetadata(reader.take('u32'), reader.take('u32'))
    level = reader.take('u8')
    if level >= len(LEVELS):
        raise InvalidMessage(f"Unknown graph level {level}")
    try:
        tf = RigidTransform(values[:9], values[9:])
        graph = ExplorationGraph(LEVELS[level])
        previous = -1
        for _ in range(reader.take('u32')):
            node_id = reader.take('u32')
            x, y, z, psi, gain = (reader.take('f64') for _ in range(5))
            frontier = reader.take_flag()
            confidence = reader.take_optional()
            if node_id <= previous:
                raise InvalidMessage(f"Node ids are not strictly ascending at {node_id}")
            previous = node_id
            graph.add_node(GraphNode(node_id, RobotState(x, y, z, psi), gain, frontier, confidence))
        previous = (-1, -1)
        for _ in range(reader.take('u32')):
            a, b, length = reader.take('u32'), reader.take('u32'), reader.take('f64')
            if not (a < b and (a, b) > previous):
                raise InvalidMessage(f"Edge ({a}, {b}) is out of canonical order")
            previous = (a, b)
            graph.add_edge(a, b, length)
        ids = tuple(reader.take('u32') for _ in range(reader.take('u32')))
        length = reader.take('f64')
        path = Path(ids, length, reader.take_optional(), reader.take_flag())
        frontier_ids = [reader.take('u32') for _ in range(reader.take('u32'))]
        if frontier_ids != sorted(set(frontier_ids)):
            raise InvalidMessage("Frontier ids are not strictly ascending")
        return validate(UnifiedGraphMessage(mission_id, tf, graph, path, frontier_ids, scan))
    except (ContractViolation, ValueError) as _e:
        if isinstance(_e, ProtocolError):
            raise
        raise InvalidMessage(str(_e)) from _e


def encode_packet(packet: Packet) -> bytes:
    out = _Writer()
    out.put('u16', PROTOCOL_VERSION)
    out.put('u8', int(packet.kind))
    out.put_string(packet.mission_id)
    if packet.kind == Kind.REQUEST:
        _write_message(out, packet.message)
    elif packet.kind in (Kind.FEEDBACK, Kind.RESULT):
        out.put('u8', int(packet.code))
    elif packet.kind == Kind.REJECT:
        out.put_string(packet.reason)
    return wire_formats['u32'].pack(len(out.buffer)) + bytes(out.buffer)


def split_frame(data: bytes) -> bytes:
    """Payload of a single length-prefixed frame"""
    prefix = wire_formats['u32']
    if len(data) < prefix.size:
        raise MalformedFrame(f"Frame of {len(data)} bytes has no length prefix")
    length = prefix.unpack_from(data)[0]
    if length != len(data) - prefix.size:
        raise MalformedFrame(f"Length prefix says {length} bytes, frame carries {len(data) - prefix.size}")
    return bytes(data[prefix.size:])


def decode_payload(payload: bytes) -> Packet:
    reader = _Reader(payload)
    version = reader.take('u16')
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"Protocol version {version}, expected {PROTOCOL_VERSION}")
    raw_kind = reader.take('u8')
    try:
        kind = Kind(raw_kind)
    except ValueError as _e:
        raise InvalidMessage(f"Unknown message kind {raw_kind}") from _e
    mission_id = reader.take_string()
    packet = Packet(kind, mission_id)
    if kind == Kind.REQUEST:
        packet = dataclasses.replace(packet, message=_read_message(reader, mission_id))
    elif kind == Kind.FEEDBACK:
        packet = dataclasses.replace(packet, code=int(_checked(FeedbackCode, reader.take('u8'))))
    elif kind == Kind.RESULT:
        packet = dataclasses.replace(packet, code=int(_checked(ResultCode, reader.take('u8'))))
    elif kind == Kind.REJECT:
        packet = dataclasses.replace(packet, reason=reader.take_string())
    reader.finish()
    return packet


def _checked(codes, value):
    try:
        return codes(value)
    except ValueError as _e:
        raise InvalidMessage(f"Unknown {codes.__name__} {value}") from _e


def decode_packet(data: bytes) -> Packet:
    return decode_payload(split_frame(data))


def encode(msg: UnifiedGraphMessage) -> bytes:
    """Request frame carrying the message"""
    return encode_packet(Packet(Kind.REQUEST, msg.mission_id, msg))


def decode(data: bytes) -> UnifiedGraphMessage:
    packet = decode_packet(data)
    if packet.kind != Kind.REQUEST:
        raise InvalidMessage(f"Expected a Request frame, got {packet.kind.name}")
    return packet.message
