"""Minimal WebSocket (RFC 6455) plumbing for the browser stream bridge.

Implements just what the viewer link needs: the HTTP upgrade handshake,
unfragmented text/binary frames in both directions, ping/pong and close.
Server-to-client frames are unmasked, client-to-server frames are masked,
as the RFC requires.  Plain (non-upgrade) GET requests receive a static
HTML page so the same port can hand out the viewer.

No extensions, no compression, no TLS.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct
import threading

import numpy as np

_GUID = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_CONT = 0x0
OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

# Commands and replies are short lines; anything huge is hostile input.
MAX_MESSAGE = 1 << 20

_PLACEHOLDER_PAGE = (b"<!doctype html><title>stream bridge</title>"
                     b"<p>WebSocket stream bridge. Connect a viewer to this "
                     b"port with ws://, or configure a static page.")


def _recv_exact(sock: socket.socket, count: int) -> bytes | None:
    chunks = []
    while count:
        try:
            piece = sock.recv(count)
        except OSError:
            return None
        if not piece:
            return None
        chunks.append(piece)
        count -= len(piece)
    return b"".join(chunks)


def _apply_mask(payload: bytes, key: bytes) -> bytes:
    data = np.frombuffer(payload, dtype=np.uint8)
    mask = np.frombuffer((key * (len(payload) // 4 + 1))[:len(payload)],
                         dtype=np.uint8)
    return (data ^ mask).tobytes()


def encode_frame(opcode: int, payload: bytes, masked: bool = False) -> bytes:
    head = bytearray([0x80 | opcode])
    mask_bit = 0x80 if masked else 0
    length = len(payload)
    if length < 126:
        head.append(mask_bit | length)
    elif length < 1 << 16:
        head.append(mask_bit | 126)
        head += struct.pack(">H", length)
    else:
        head.append(mask_bit | 127)
        head += struct.pack(">Q", length)
    if masked:
        key = os.urandom(4)
        return bytes(head) + key + _apply_mask(payload, key)
    return bytes(head) + payload


def read_frame(sock: socket.socket):
    """Read one raw frame: (fin, opcode, payload), or None on EOF."""
    head = _recv_exact(sock, 2)
    if head is None:
        return None
    fin = bool(head[0] & 0x80)
    opcode = head[0] & 0x0F
    masked = bool(head[1] & 0x80)
    length = head[1] & 0x7F
    if length == 126:
        ext = _recv_exact(sock, 2)
        if ext is None:
            return None
        (length,) = struct.unpack(">H", ext)
    elif length == 127:
        ext = _recv_exact(sock, 8)
        if ext is None:
            return None
        (length,) = struct.unpack(">Q", ext)
    if length > MAX_MESSAGE:
        return None
    key = None
    if masked:
        key = _recv_exact(sock, 4)
        if key is None:
            return None
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        return None
    if key is not None:
        payload = _apply_mask(payload, key)
    return fin, opcode, payload


class WsSocket:
    """One established WebSocket endpoint (either side).

    Sends are serialized by a lock so multiple threads may fan out to the
    same client.  recv_message() reassembles continuation frames and
    answers pings transparently; it returns (opcode, payload) for text and
    binary messages and None once the connection is finished.
    """

    def __init__(self, sock: socket.socket, masked: bool):
        self._sock = sock
        self._masked = masked
        self._send_lock = threading.Lock()
        self._open = True

    def send_text(self, text: str) -> None:
        self._send(OP_TEXT, text.encode("utf-8"))

    def send_binary(self, payload: bytes) -> None:
        self._send(OP_BINARY, payload)

    def _send(self, opcode: int, payload: bytes) -> None:
        frame = encode_frame(opcode, payload, masked=self._masked)
        with self._send_lock:
            self._sock.sendall(frame)

    def recv_message(self):
        buffer = b""
        opcode = None
        while True:
            frame = read_frame(self._sock)
            if frame is None:
                return None
            fin, code, payload = frame
            if code == OP_PING:
                try:
                    self._send(OP_PONG, payload)
                except OSError:
                    return None
                continue
            if code == OP_PONG:
                continue
            if code == OP_CLOSE:
                try:
                    self._send(OP_CLOSE, b"")
                except OSError:
                    pass
                return None
            if code in (OP_TEXT, OP_BINARY):
                opcode = code
                buffer = payload
            elif code == OP_CONT and opcode is not None:
                buffer += payload
            else:
                return None
            if len(buffer) > MAX_MESSAGE:
                return None
            if fin:
                return opcode, buffer

    def close(self) -> None:
        if not self._open:
            return
        self._open = False
        try:
            with self._send_lock:
                self._sock.sendall(encode_frame(OP_CLOSE, b"",
                                                masked=self._masked))
        except OSError:
            pass
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def accept_upgrade(conn: socket.socket, static_page: bytes | None = None):
    """Answer one HTTP request: upgrade to WebSocket or serve the page.

    Returns a server-side WsSocket on upgrade, else None (the connection
    was answered with HTML or an error and closed).
    """
    request = b""
    while b"\r\n\r\n" not in request:
        piece = conn.recv(4096)
        if not piece or len(request) > 1 << 14:
            conn.close()
            return None
        request += piece
    head = request.split(b"\r\n\r\n", 1)[0].decode("latin-1")
    lines = head.split("\r\n")
    headers = {}
    for line in lines[1:]:
        name, _, value = line.partition(":")
        headers[name.strip().lower()] = value.strip()
    if ("websocket" in headers.get("upgrade", "").lower()
            and "sec-websocket-key" in headers):
        key = headers["sec-websocket-key"].encode("latin-1")
        accept = base64.b64encode(hashlib.sha1(key + _GUID).digest())
        conn.sendall(b"HTTP/1.1 101 Switching Protocols\r\n"
                     b"Upgrade: websocket\r\n"
                     b"Connection: Upgrade\r\n"
                     b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n")
        return WsSocket(conn, masked=False)
    page = static_page if static_page is not None else _PLACEHOLDER_PAGE
    conn.sendall(b"HTTP/1.1 200 OK\r\n"
                 b"Content-Type: text/html; charset=utf-8\r\n"
                 b"Content-Length: " + str(len(page)).encode() + b"\r\n"
                 b"Connection: close\r\n\r\n" + page)
    conn.close()
    return None


def connect(host: str, port: int, timeout_s: float = 5.0) -> WsSocket:
    """Client-side connect + upgrade handshake (used by tests and tools)."""
    sock = socket.create_connection((host, port), timeout=timeout_s)
    sock.settimeout(timeout_s)
    key = base64.b64encode(os.urandom(16))
    sock.sendall(b"GET / HTTP/1.1\r\n"
                 b"Host: " + f"{host}:{port}".encode() + b"\r\n"
                 b"Upgrade: websocket\r\n"
                 b"Connection: Upgrade\r\n"
                 b"Sec-WebSocket-Key: " + key + b"\r\n"
                 b"Sec-WebSocket-Version: 13\r\n\r\n")
    response = b""
    while b"\r\n\r\n" not in response:
        piece = sock.recv(4096)
        if not piece:
            raise OSError("connection closed during handshake")
        response += piece
    status = response.split(b"\r\n", 1)[0]
    if b"101" not in status:
        raise OSError(f"upgrade refused: {status.decode('latin-1')}")
    expected = base64.b64encode(hashlib.sha1(key + _GUID).digest())
    if expected not in response:
        raise OSError("bad Sec-WebSocket-Accept")
    sock.settimeout(None)
    return WsSocket(sock, masked=True)
