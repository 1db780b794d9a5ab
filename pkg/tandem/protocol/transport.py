"""
    Ordered, reliable byte-frame channels for the action exchange.

    Frames are whole codec frames (u32 length prefix + payload). receive()
    returns None when nothing arrives within the timeout.
    Usage:
    ```
    from tandem.protocol.transport import QueueTransport, TcpListener, TcpTransport, TickTransport
    client_end, server_end = QueueTransport.pair()
    listener = TcpListener()
    client = TcpTransport.connect('127.0.0.1', listener.port)
    server = listener.accept(timeout=5.0)
    ```
"""
import collections
import logging
import queue
import socket
import struct
import time

FRAME_PREFIX = struct.Struct('<I')


class QueueTransport:
    """In-process endpoint; one queue per direction"""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, delay=0.0):
        self.inbox = inbox
        self.outbox = outbox
        self.delay = delay

    @classmethod
    def pair(cls, client_delay=0.0, server_delay=0.0):
        to_server, to_client = queue.Queue(), queue.Queue()
        return cls(to_client, to_server, client_delay), cls(to_server, to_client, server_delay)

    def send(self, frame: bytes):
        if self.delay:
            time.sleep(self.delay)
        self.outbox.put(bytes(frame))

    def receive(self, timeout=None):
        try:
            if timeout == 0:
                return self.inbox.get_nowait()
            return self.inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self):
        pass


class TickTransport:
    """In-process endpoint for the lock-step scheduler; each sent frame is
    held back for the next delay of `delays` (in clock ticks, 0 once they
    run out) and frames stay in send order"""

    def __init__(self, inbox: collections.deque, outbox: collections.deque, clock, delays=()):
        self.inbox = inbox
        self.outbox = outbox
        self.clock = clock
        self.delays = iter(delays)

    @classmethod
    def pair(cls, clock, client_delays=(), server_delays=()):
        to_server, to_client = collections.deque(), collections.deque()
        return (cls(to_client, to_server, clock, client_delays),
                cls(to_server, to_client, clock, server_delays))

    def send(self, frame: bytes):
        self.outbox.append((self.clock() + next(self.delays, 0), bytes(frame)))

    def receive(self, timeout=None):
        if self.inbox and self.inbox[0][0] <= self.clock():
            return self.inbox.popleft()[1]
        return None

    def close(self):
        pass


class TcpTransport:
    """Stream socket carrying length-prefixed frames"""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.pending = bytearray()

    @classmethod
    def connect(cls, host, port, timeout=5.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, frame: bytes):
        self.sock.sendall(frame)

    def _frame_ready(self):
        if len(self.pending) < FRAME_PREFIX.size:
            return False
        length = FRAME_PREFIX.unpack_from(self.pending)[0]
        return len(self.pending) >= FRAME_PREFIX.size + length

    def receive(self, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._frame_ready():
            remaining = None if deadline is None else max(deadline - time.monotonic(), 0.0)
            if remaining == 0.0:
                return None
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return None
            if not chunk:
                if self.pending:
                    logging.warning(f'Peer closed with {len(self.pending)} bytes of a partial frame')
                return None
            self.pending += chunk
        size = FRAME_PREFIX.size + FRAME_PREFIX.unpack_from(self.pending)[0]
        frame = bytes(self.pending[:size])
        del self.pending[:size]
        return frame

    def close(self):
        self.sock.close()


class TcpListener:

    def __init__(self, host='127.0.0.1', port=0):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(1)

    @property
    def port(self):
        return self.sock.getsockname()[1]

    def accept(self, timeout=5.0) -> TcpTransport:
        self.sock.settimeout(timeout)
        conn, peer = self.sock.accept()
        logging.info(f'Accepted hand-over connection from {peer[0]}:{peer[1]}')
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return TcpTransport(conn)

    def close(self):
        self.sock.close()
