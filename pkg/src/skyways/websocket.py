"""Minimal WebSocket (RFC 6455) endpoints over plain sockets.

Server-side upgrade, client-side connect, UTF-8 text messages, and the
control frames (ping/pong/close) the protocol requires. No extensions,
no compression, no TLS: just enough for line-of-JSON message streams.
"""

from __future__ import annotations

import base64
import hashlib
import os
import select
import socket
import struct
import threading
import time

_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_MAX_MESSAGE = 16 * 1024 * 1024

_OP_CONT = 0x0
_OP_TEXT = 0x1
_OP_BINARY = 0x2
_OP_CLOSE = 0x8
_OP_PING = 0x9
_OP_PONG = 0xA


class WsError(ConnectionError):
    """Protocol violation or transport failure on a websocket."""


def accept_for(key: str) -> str:
    """The Sec-WebSocket-Accept value answering a handshake key."""
    digest = hashlib.sha1((key + _GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes, mask: bool, fin: bool = True) -> bytes:
    head = bytearray()
    head.append((0x80 if fin else 0x00) | (opcode & 0x0F))
    n = len(payload)
    mask_bit = 0x80 if mask else 0x00
    if n < 126:
        head.append(mask_bit | n)
    elif n < 65536:
        head.append(mask_bit | 126)
        head += struct.pack(">H", n)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        head += key
        payload = _xor_mask(payload, key)
    return bytes(head) + payload


def _xor_mask(data: bytes, key: bytes) -> bytes:
    if not data:
        return data
    # stretch the 4-byte key and xor in one shot
    reps = (len(data) + 3) // 4
    stretched = (key * reps)[: len(data)]
    return (int.from_bytes(data, "big") ^ int.from_bytes(stretched, "big")) \
        .to_bytes(len(data), "big")


class WsSocket:
    """One endpoint of an established websocket connection.

    ``mask`` says whether outgoing frames are masked: clients mask,
    servers never do, and each side requires the opposite of its peer.
    send_text is thread-safe; recv_text must stay on a single thread.
    """

    def __init__(self, sock: socket.socket, rfile=None, *, mask: bool):
        self._sock = sock
        self._rfile = rfile if rfile is not None else sock.makefile("rb")
        self._mask = mask
        self._wlock = threading.Lock()
        self._closed = False

    # ------------------------------------------------------------- sending
    def send_text(self, text: str) -> None:
        self._send(_OP_TEXT, text.encode("utf-8"))

    def _send(self, opcode: int, payload: bytes) -> None:
        if self._closed:
            raise WsError("websocket is closed")
        frame = encode_frame(opcode, payload, self._mask)
        try:
            with self._wlock:
                self._sock.sendall(frame)
        except OSError as exc:
            self._closed = True
            raise WsError(f"send failed: {exc}") from exc

    # ----------------------------------------------------------- receiving
    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining > 0:
            piece = self._rfile.read(remaining)
            if not piece:
                raise WsError("connection closed mid-frame")
            chunks.append(piece)
            remaining -= len(piece)
        return b"".join(chunks)

    def _read_frame(self) -> tuple[int, bytes, bool]:
        hdr = self._read_exact(2)
        b0, b1 = hdr[0], hdr[1]
        if b0 & 0x70:
            raise WsError("reserved bits set without an extension")
        fin = bool(b0 & 0x80)
        opcode = b0 & 0x0F
        masked = bool(b1 & 0x80)
        if masked == self._mask:
            # peer must mask exactly when we do not
            raise WsError("peer used the wrong masking mode")
        n = b1 & 0x7F
        if n == 126:
            n = struct.unpack(">H", self._read_exact(2))[0]
        elif n == 127:
            n = struct.unpack(">Q", self._read_exact(8))[0]
        if n > _MAX_MESSAGE:
            raise WsError(f"frame of {n} bytes exceeds the message limit")
        if opcode >= _OP_CLOSE and (n > 125 or not fin):
            raise WsError("oversized or fragmented control frame")
        key = self._read_exact(4) if masked else b""
        data = self._read_exact(n) if n else b""
        if masked:
            data = _xor_mask(data, key)
        return opcode, data, fin

    def _wait_readable(self, timeout: float) -> bool:
        """True once bytes are available (buffered or on the wire)."""
        try:
            self._sock.setblocking(False)
            try:
                if self._rfile.peek(1):
                    return True
            finally:
                self._sock.setblocking(True)
        except (BlockingIOError, OSError, ValueError):
            try:
                self._sock.setblocking(True)
            except OSError:
                pass
        try:
            ready, _, _ = select.select([self._sock], [], [], max(0.0, timeout))
        except (OSError, ValueError):
            return True  # let the read surface the real failure
        return bool(ready)

    def recv_text(self, timeout: float | None = None) -> str | None:
        """Next text message, or None once the peer has closed.

        Raises TimeoutError when ``timeout`` seconds pass without a
        complete message, WsError on protocol or transport failure.
        A timed receive briefly probes the socket in non-blocking mode,
        so do not send from another thread while using timeouts.
        """
        if self._closed:
            return None
        deadline = None if timeout is None else time.monotonic() + timeout
        parts: list[bytes] = []
        while True:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._wait_readable(remaining):
                    raise TimeoutError("websocket receive timed out")
            try:
                opcode, data, fin = self._read_frame()
            except OSError as exc:
                self._closed = True
                raise WsError(f"receive failed: {exc}") from exc
            if opcode in (_OP_TEXT, _OP_BINARY):
                if parts:
                    raise WsError("new message interleaved with fragments")
                parts.append(data)
            elif opcode == _OP_CONT:
                if not parts:
                    raise WsError("continuation frame without a start")
                parts.append(data)
            elif opcode == _OP_CLOSE:
                try:
                    self._send(_OP_CLOSE, data[:2])
                except WsError:
                    pass
                self._closed = True
                return None
            elif opcode == _OP_PING:
                self._send(_OP_PONG, data)
                continue
            elif opcode == _OP_PONG:
                continue
            else:
                raise WsError(f"unknown opcode {opcode}")
            if fin:
                if sum(len(p) for p in parts) > _MAX_MESSAGE:
                    raise WsError("message exceeds the size limit")
                try:
                    return b"".join(parts).decode("utf-8")
                except UnicodeDecodeError as exc:
                    raise WsError("message is not valid UTF-8") from exc

    # -------------------------------------------------------------- close
    def close(self, code: int = 1000) -> None:
        if not self._closed:
            try:
                self._send(_OP_CLOSE, struct.pack(">H", code))
            except WsError:
                pass
            self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass

    @property
    def closed(self) -> bool:
        return self._closed


# ------------------------------------------------------------------ client


def connect(host: str, port: int, path: str = "/ws",
            timeout: float = 10.0) -> WsSocket:
    """Open and upgrade a client connection; returns a masking WsSocket."""
    sock = socket.create_connection((host, port), timeout=timeout)
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}:{port}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n"
        "\r\n"
    )
    try:
        sock.sendall(request.encode("ascii"))
        rfile = sock.makefile("rb")
        status = rfile.readline().decode("latin-1").strip()
        if " 101 " not in status + " ":
            parts = status.split(" ", 2)
            raise WsError(f"upgrade refused: {parts[1] if len(parts) > 1 else status}")
        headers: dict[str, str] = {}
        while True:
            line = rfile.readline().decode("latin-1")
            if line in ("\r\n", "\n", ""):
                break
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        if headers.get("sec-websocket-accept") != accept_for(key):
            raise WsError("handshake accept key mismatch")
    except (OSError, WsError):
        sock.close()
        raise
    sock.settimeout(None)
    return WsSocket(sock, rfile, mask=True)
