"""Client side of the maple-backend/1 wire protocol.

Frames are UTF-8 JSON objects, one per line, over a stream transport: either
the stdin/stdout pipes of a child process or a TCP connection. The backend
speaks first with a handshake frame ``{"protocol": "maple-backend/1",
"name": ...}``; after that the client sends request frames ``{"id", "stage",
"prompt", "n"}`` and the backend answers each id once, in any order, with
``{"id", "candidates": [{"text", "score"}, ...]}`` or ``{"id", "error"}``.
The full protocol is documented in docs/formats.md.

The client multiplexes any number of in-flight requests over one connection
and is safe to call from several threads: whichever waiter is idle reads the
next frame and parks frames addressed to other waiters.
"""

from __future__ import annotations

import json
import math
import os
import selectors
import shlex
import socket
import subprocess
import threading
import time
from typing import NoReturn, Sequence

from maple.backend import Candidate, GenerationRequest

__all__ = [
    "BackendFrameError",
    "ExternalClient",
    "PROTOCOL_NAME",
    "ProtocolError",
    "TransportError",
    "decode_frame",
    "encode_frame",
]

PROTOCOL_NAME = "maple-backend/1"
DEFAULT_TIMEOUT = 30.0


class TransportError(Exception):
    """Connection-level failure (unreachable, closed, or timed out).

    Retriable: the request may be reissued on a fresh connection.
    """


class ProtocolError(Exception):
    """The peer violated the framing rules; carries the offending frame."""

    def __init__(self, message: str, frame: bytes | str | None = None):
        self.frame = frame
        if frame is not None:
            message = f"{message}; frame: {frame!r}"
        super().__init__(message)


class BackendFrameError(Exception):
    """The backend answered a request with an error frame."""

    def __init__(self, request_id: int, message: str):
        self.request_id = request_id
        super().__init__(f"backend error for request {request_id}: {message}")


def encode_frame(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def decode_frame(line: bytes) -> dict:
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable frame ({exc})", line) from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame is not a JSON object", line)
    return obj


class _LineReader:
    """Buffered line reading with a deadline over a chunk-read callable."""

    def __init__(self, read_chunk):
        self._read_chunk = read_chunk
        self._buffer = bytearray()

    def readline(self, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        while True:
            newline = self._buffer.find(b"\n")
            if newline >= 0:
                line = bytes(self._buffer[: newline + 1])
                del self._buffer[: newline + 1]
                return line
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportError(f"timed out after {timeout:.1f}s waiting for a frame")
            chunk = self._read_chunk(remaining)
            if not chunk:
                raise TransportError("backend closed the connection")
            self._buffer.extend(chunk)


class PipeChannel:
    """Child process speaking the protocol on its stdin/stdout."""

    def __init__(self, process: subprocess.Popen):
        self.process = process
        self._selector = selectors.DefaultSelector()
        self._selector.register(process.stdout, selectors.EVENT_READ)
        self.reader = _LineReader(self._read_chunk)

    def _read_chunk(self, timeout: float) -> bytes:
        if not self._selector.select(timeout):
            raise TransportError(f"timed out after {timeout:.1f}s waiting for a frame")
        return os.read(self.process.stdout.fileno(), 65536)

    def readline(self, timeout: float) -> bytes:
        return self.reader.readline(timeout)

    def write(self, data: bytes) -> None:
        try:
            self.process.stdin.write(data)
            self.process.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise TransportError(f"backend pipe closed: {exc}") from exc

    def close(self) -> None:
        self._selector.close()
        for stream in (self.process.stdin, self.process.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.process.terminate()
        try:
            self.process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.process.kill()
            self.process.wait()


class TcpChannel:
    """TCP connection speaking the protocol."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.reader = _LineReader(self._read_chunk)

    def _read_chunk(self, timeout: float) -> bytes:
        self.sock.settimeout(timeout)
        try:
            return self.sock.recv(65536)
        except socket.timeout as exc:
            raise TransportError(f"timed out after {timeout:.1f}s waiting for a frame") from exc
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc

    def readline(self, timeout: float) -> bytes:
        return self.reader.readline(timeout)

    def write(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"socket error: {exc}") from exc

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ExternalClient:
    """Predictor that forwards requests to a protocol-speaking backend.

    Responses may arrive out of order; they are matched to waiters by id.
    A response for an id that was never sent is a protocol error, except
    ids abandoned by a timed-out waiter, which are dropped silently.
    """

    def __init__(self, channel, timeout: float = DEFAULT_TIMEOUT):
        self.channel = channel
        self.timeout = timeout
        self.backend_name: str | None = None
        self._write_lock = threading.Lock()
        self._state = threading.Condition()
        self._inflight: set[int] = set()
        self._abandoned: set[int] = set()
        self._parked: dict[int, dict] = {}
        self._reading = False
        self._failure: Exception | None = None
        self._handshake()

    # -- construction ----------------------------------------------------

    @classmethod
    def spawn(
        cls,
        command: str | Sequence[str],
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = 2,
    ) -> "ExternalClient":
        """Start a child-process backend, retrying a failed startup."""
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        last: Exception | None = None
        for _ in range(max(1, retries)):
            process = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=None,  # backend logging passes through
            )
            try:
                return cls(PipeChannel(process), timeout)
            except (TransportError, ProtocolError) as exc:
                last = exc
                process.kill()
                process.wait()
        raise TransportError(f"backend {argv!r} failed to start: {last}")

    @classmethod
    def connect(
        cls,
        host: str,
        port: int,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = 2,
        retry_delay: float = 0.2,
    ) -> "ExternalClient":
        """Connect to a TCP backend, retrying a refused connection."""
        last: Exception | None = None
        for attempt in range(max(1, retries)):
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                return cls(TcpChannel(sock), timeout)
            except OSError as exc:
                last = exc
                if attempt + 1 < max(1, retries):
                    time.sleep(retry_delay)
        raise TransportError(f"cannot reach backend at {host}:{port}: {last}")

    def _handshake(self) -> None:
        line = self.channel.readline(self.timeout)
        frame = decode_frame(line)
        if frame.get("protocol") != PROTOCOL_NAME:
            raise ProtocolError(
                f"expected handshake for {PROTOCOL_NAME!r}", line
            )
        name = frame.get("name")
        self.backend_name = name if isinstance(name, str) else None

    # -- request/response ------------------------------------------------

    def generate(self, request: GenerationRequest) -> list[Candidate]:
        return self.round_trip(request)

    def round_trip(self, request: GenerationRequest) -> list[Candidate]:
        """Send one request and block until its response arrives."""
        rid = request.request_id
        with self._state:
            if rid in self._inflight:
                raise ProtocolError(f"request id {rid} already in flight")
            self._inflight.add(rid)
        frame = {
            "id": rid,
            "stage": request.stage,
            "prompt": request.prompt,
            "n": request.num_candidates,
        }
        try:
            with self._write_lock:
                self.channel.write(encode_frame(frame))
            return self._decode_response(rid, self._await_frame(rid))
        finally:
            with self._state:
                self._inflight.discard(rid)

    def _await_frame(self, rid: int) -> dict:
        deadline = time.monotonic() + self.timeout
        while True:
            with self._state:
                while True:
                    if self._failure is not None:
                        raise type(self._failure)(*self._failure.args)
                    if rid in self._parked:
                        return self._parked.pop(rid)
                    if not self._reading:
                        self._reading = True
                        break
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._state.wait(remaining):
                        self._abandoned.add(rid)
                        raise TransportError(
                            f"timed out after {self.timeout:.1f}s waiting for response {rid}"
                        )
            # This thread is now the reader; read outside the lock.
            try:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TransportError(
                        f"timed out after {self.timeout:.1f}s waiting for response {rid}"
                    )
                line = self.channel.readline(remaining)
                frame = decode_frame(line)
            except TransportError:
                # Timeouts and closed connections fail this waiter only;
                # other waiters will surface their own error when they read.
                with self._state:
                    self._reading = False
                    self._abandoned.add(rid)
                    self._state.notify_all()
                raise
            except ProtocolError as exc:
                self._fail(exc)
            with self._state:
                self._reading = False
                frame_id = frame.get("id")
                if not isinstance(frame_id, int) or isinstance(frame_id, bool):
                    self._fail(ProtocolError("frame has no integer id", json.dumps(frame)))
                if frame_id == rid:
                    self._state.notify_all()
                    return frame
                if frame_id in self._abandoned:
                    self._abandoned.discard(frame_id)
                elif frame_id in self._inflight:
                    self._parked[frame_id] = frame
                    self._state.notify_all()
                else:
                    self._fail(
                        ProtocolError(
                            f"response for unknown request id {frame_id}", json.dumps(frame)
                        )
                    )

    def _fail(self, exc: Exception) -> NoReturn:
        with self._state:
            self._reading = False
            self._failure = exc
            self._state.notify_all()
        raise exc

    def _decode_response(self, rid: int, frame: dict) -> list[Candidate]:
        if "error" in frame:
            message = frame["error"]
            raise BackendFrameError(rid, str(message))
        raw = frame.get("candidates")
        if not isinstance(raw, list):
            raise ProtocolError("response frame has no candidate list", json.dumps(frame))
        candidates = []
        for item in raw:
            if (
                not isinstance(item, dict)
                or not isinstance(item.get("text"), str)
                or not isinstance(item.get("score"), (int, float))
                or isinstance(item.get("score"), bool)
                or not math.isfinite(item["score"])
            ):
                raise ProtocolError("malformed candidate", json.dumps(frame))
            candidates.append(Candidate(item["text"], float(item["score"])))
        return candidates

    # -- lifecycle ---------------------------------------------------------

    def close(self) -> None:
        self.channel.close()

    def __enter__(self) -> "ExternalClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
