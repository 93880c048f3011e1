"""Real-socket carriers for the role dispatchers.

The in-process fabric and these servers speak to the same ``dispatch``
methods, so a node tested hermetically runs unchanged over HTTP/1.1 and
plain TCP.  HTTP handles the cache, exit and peer surfaces; the key
directory speaks its one-JSON-object-per-line protocol over a bare TCP
connection.
"""

from __future__ import annotations

import http.client
import socket
import socketserver
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .transport import Response, TransportError

_OCDN_HEADERS = ("X-OCDN", "X-OCDN-Route", "X-OCDN-Req", "X-OCDN-Origin", "X-OCDN-Sig")


class HttpNodeServer:
    """Serve one dispatcher (cache node, exit proxy or client node)."""

    def __init__(self, node, host: str = "127.0.0.1", port: int = 0):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _relay(self, verb: str):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                headers = {}
                for name in _OCDN_HEADERS:
                    value = self.headers.get(name)
                    if value is not None:
                        headers[name] = value
                peer = self.client_address[0]
                status, resp_headers, resp_body = outer.node.dispatch(
                    verb, self.path, headers, body, peer
                )
                self.send_response(status)
                for k, v in resp_headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(resp_body)))
                self.end_headers()
                if resp_body:
                    self.wfile.write(resp_body)

            def do_GET(self):
                self._relay("GET")

            def do_PUT(self):
                self._relay("PUT")

            def do_POST(self):
                self._relay("POST")

            def log_message(self, *args):
                pass

        self.node = node
        self.server = ThreadingHTTPServer((host, port), Handler)
        self.server.daemon_threads = True
        self.host, self.port = self.server.server_address[:2]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "HttpNodeServer":
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()


class LineServer:
    """One-line-in, one-line-out TCP server for the key directory."""

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0):
        handle_line = handler

        class LineHandler(socketserver.StreamRequestHandler):
            def handle(self):
                line = self.rfile.readline()
                if not line:
                    return
                reply = handle_line(line.decode().strip())
                self.wfile.write(reply.encode() + b"\n")

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self.server = Server((host, port), LineHandler)
        self.host, self.port = self.server.server_address[:2]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "LineServer":
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()


class SocketTransport:
    """Outgoing side: real HTTP requests and TCP line queries."""

    def __init__(self, timeout_s: float = 10.0):
        self.timeout_s = timeout_s

    def request(self, dst: str, verb: str, path: str, headers=None, body: bytes = b"",
                src: str = "local") -> Response:
        host, _, port = dst.rpartition(":")
        try:
            conn = http.client.HTTPConnection(host, int(port), timeout=self.timeout_s)
            conn.request(verb, path, body=body, headers=dict(headers or {}))
            resp = conn.getresponse()
            data = resp.read()
            out = Response(resp.status, dict(resp.getheaders()), data)
            conn.close()
            return out
        except (OSError, http.client.HTTPException) as exc:
            raise TransportError(f"{verb} {dst}{path}: {exc}") from exc

    def query_line(self, dst: str, line: str, src: str = "local") -> str:
        host, _, port = dst.rpartition(":")
        try:
            with socket.create_connection((host, int(port)), timeout=self.timeout_s) as sock:
                sock.sendall(line.encode() + b"\n")
                buf = b""
                while not buf.endswith(b"\n"):
                    chunk = sock.recv(65536)
                    if not chunk:
                        break
                    buf += chunk
                return buf.decode().strip()
        except OSError as exc:
            raise TransportError(f"key query to {dst}: {exc}") from exc
