"""Two interchangeable client <-> executor channels.

LocalChannel is the co-located case: control messages go through an
in-process queue while payloads live in a preallocated per-client shared
buffer, so no payload bytes are copied beyond the buffer writes themselves.
RemoteChannel frames the same envelopes over a reliable byte stream (TCP);
ExecutorServer is the listening side.  A job produces identical results
over either channel.
"""

from __future__ import annotations

import itertools
import queue
import socket
import threading

import numpy as np

from .errors import ProtocolError, TransportError
from .protocol import (PASS_ACK, PASS_DEREGISTER, PASS_ERROR, PASS_REGISTER,
                       Envelope, control_envelope, encode, error_message,
                       try_decode)

REQUEST_TIMEOUT_S = 60.0


class SharedBuffer:
    """Preallocated per-client float32 exchange tensor.

    Initial capacity is batch * sequence * max(d_in, d_out) floats; it grows
    (never shrinks) to exactly the required size when a request exceeds it.
    """

    def __init__(self, capacity_floats: int):
        self.buf = np.empty(max(1, int(capacity_floats)), dtype=np.float32)
        self.resizes = 0

    @property
    def capacity(self) -> int:
        return self.buf.shape[0]

    def ensure(self, floats: int) -> None:
        if floats > self.capacity:
            self.buf = np.empty(int(floats), dtype=np.float32)
            self.resizes += 1

    def view(self, rows: int, cols: int) -> np.ndarray:
        return self.buf[:rows * cols].reshape(rows, cols)


class LocalChannel:
    """In-process channel sharing one buffer between client and executor."""

    reply_is_view = True

    def __init__(self, executor, client_id: int, batch_size: int,
                 seq_len: int, max_width: int):
        self.executor = executor
        self.client_id = client_id
        self.max_width = max_width
        self.buffer = SharedBuffer(batch_size * seq_len * max_width)
        self.extra_payload_copies = 0  # beyond the shared-buffer writes
        self._replies: queue.Queue = queue.Queue()
        self._ids = itertools.count(1)

    def register(self, sends_backward: bool = False) -> None:
        self.executor.register(self.client_id, sends_backward)

    def deregister(self) -> None:
        self.executor.deregister(self.client_id)

    def request(self, block: int, role: int, pass_kind: int,
                payload: np.ndarray) -> np.ndarray:
        rows, cols = payload.shape
        self.buffer.ensure(rows * self.max_width)
        sent = self.buffer.view(rows, cols)
        np.copyto(sent, payload)  # the shared-buffer write (request side)
        env = Envelope(self.client_id, next(self._ids), block, role,
                       pass_kind, sent)
        self.executor.submit(env, self._deliver)
        try:
            kind, value = self._replies.get(timeout=REQUEST_TIMEOUT_S)
        except queue.Empty:
            raise TransportError("timed out waiting for executor reply") from None
        if kind == "error":
            raise ProtocolError(value)
        out_rows, out_cols = value
        return self.buffer.view(out_rows, out_cols)

    def _deliver(self, reply: Envelope) -> None:
        if reply.pass_kind == PASS_ERROR:
            self._replies.put(("error", error_message(reply)))
            return
        rows, cols = reply.payload.shape
        out = self.buffer.view(rows, cols)
        np.copyto(out, reply.payload)  # the shared-buffer write (reply side)
        self._replies.put(("ok", (rows, cols)))

    def close(self) -> None:
        pass


class RemoteChannel:
    """Byte-stream channel: one TCP connection owned by one client stream."""

    reply_is_view = False

    def __init__(self, host: str, port: int, client_id: int,
                 timeout: float = REQUEST_TIMEOUT_S):
        self.client_id = client_id
        self.extra_payload_copies = 0
        self._ids = itertools.count(1)
        self._rx = bytearray()
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"connect to {host}:{port} failed: {exc}") from exc

    def register(self, sends_backward: bool = False) -> None:
        env = control_envelope(self.client_id, next(self._ids), PASS_REGISTER,
                               flag=1 if sends_backward else 0)
        reply = self._roundtrip(env)
        if reply.pass_kind != PASS_ACK:
            raise ProtocolError(f"register not acknowledged (pass {reply.pass_kind})")

    def deregister(self) -> None:
        env = control_envelope(self.client_id, next(self._ids), PASS_DEREGISTER)
        self._roundtrip(env)

    def request(self, block: int, role: int, pass_kind: int,
                payload: np.ndarray) -> np.ndarray:
        env = Envelope(self.client_id, next(self._ids), block, role,
                       pass_kind, payload)
        reply = self._roundtrip(env)
        if reply.pass_kind == PASS_ERROR:
            raise ProtocolError(error_message(reply))
        if reply.request_id != env.request_id:
            raise ProtocolError(
                f"reply id {reply.request_id} does not match request {env.request_id}")
        return reply.payload

    def _roundtrip(self, env: Envelope) -> Envelope:
        data = encode(env)
        self.extra_payload_copies += 1  # serialization copy
        try:
            self._sock.sendall(data)
            while True:
                got = try_decode(self._rx)
                if got is not None:
                    reply, consumed = got
                    del self._rx[:consumed]
                    self.extra_payload_copies += 1  # deserialization copy
                    return reply
                chunk = self._sock.recv(1 << 16)
                if not chunk:
                    raise TransportError("executor closed the connection")
                self._rx.extend(chunk)
        except OSError as exc:
            raise TransportError(f"transport failure: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class ExecutorServer:
    """Accepts many byte-stream connections and multiplexes them onto one
    executor.  A client disconnect fails only that client; the executor and
    other connections are unaffected."""

    def __init__(self, executor, host: str = "127.0.0.1", port: int = 0):
        self.executor = executor
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        self.host, self.port = self._listener.getsockname()
        self._threads: list[threading.Thread] = []
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._running = False

    def start(self) -> "ExecutorServer":
        self._running = True
        t = threading.Thread(target=self._accept_loop, daemon=True,
                             name="executor-server-accept")
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self._conns.append(conn)
            t = threading.Thread(target=self._serve_conn, args=(conn,),
                                 daemon=True, name="executor-server-conn")
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        send_lock = threading.Lock()
        seen_clients: set[int] = set()

        def send(reply: Envelope) -> None:
            data = encode(reply)
            with send_lock:
                try:
                    conn.sendall(data)
                except OSError:
                    pass  # client went away; nothing else to do

        rx = bytearray()
        try:
            while True:
                try:
                    got = try_decode(rx)
                except ProtocolError:
                    break  # corrupt stream: connection-level rejection
                if got is None:
                    chunk = conn.recv(1 << 16)
                    if not chunk:
                        break
                    rx.extend(chunk)
                    continue
                env, consumed = got
                del rx[:consumed]
                if env.pass_kind == PASS_REGISTER:
                    seen_clients.add(env.client_id)
                    self.executor.register(env.client_id,
                                           sends_backward=bool(env.role))
                    send(control_envelope(env.client_id, env.request_id, PASS_ACK))
                elif env.pass_kind == PASS_DEREGISTER:
                    self.executor.deregister(env.client_id)
                    send(control_envelope(env.client_id, env.request_id, PASS_ACK))
                else:
                    self.executor.submit(env, send)
        finally:
            for cid in seen_clients:
                self.executor.deregister(cid)
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._conns:
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                try:
                    conn.close()
                except OSError:
                    pass
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
