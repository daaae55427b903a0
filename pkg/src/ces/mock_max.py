"""In-process stand-in for the MAX Image Caption Generator predict endpoint.

Used by the conformance tests and handy for offline demos::

    with MockMaxServer(captions=["a man riding a wave"]) as srv:
        caption_http("img.png", srv.endpoint)
"""

from __future__ import annotations

import json
import threading
import time
from email.parser import BytesParser
from email.policy import default as default_policy
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class MockMaxServer:
    """Behaviour knobs:

    captions      predictions returned (top-1 first)
    mode          "ok" | "error" | "empty" | "garbage"
    delay         seconds to sleep before answering
    slow_requests only the first N requests sleep ``delay`` (None: all)
    """

    def __init__(self, captions=("a man riding a wave on top of a surfboard",), mode="ok", delay=0.0, slow_requests=None):
        self.captions = list(captions)
        self.mode = mode
        self.delay = delay
        self.slow_requests = slow_requests
        self.requests = 0
        self.bad_requests = 0
        self._lock = threading.Lock()
        self._httpd: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockMaxServer":
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                with server._lock:
                    server.requests += 1
                    n = server.requests
                if server.delay and (server.slow_requests is None or n <= server.slow_requests):
                    time.sleep(server.delay)
                if self.path != "/model/predict":
                    return self._reply(404, {"status": "error", "message": "not found"})
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if not _has_image_field(self.headers.get("Content-Type", ""), raw):
                    with server._lock:
                        server.bad_requests += 1
                    return self._reply(400, {"status": "error", "message": "missing multipart field 'image'"})
                if server.mode == "error":
                    return self._reply(200, {"status": "error", "message": "model failed"})
                if server.mode == "garbage":
                    body = b"<html>not json</html>"
                    self.send_response(200)
                    self.send_header("Content-Type", "text/html")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                    return
                preds = [] if server.mode == "empty" else [
                    {"index": str(i), "caption": c, "probability": round(0.7 / (i + 1), 6)}
                    for i, c in enumerate(server.captions)
                ]
                return self._reply(200, {"status": "ok", "predictions": preds})

            def _reply(self, code, obj):
                body = json.dumps(obj).encode()
                try:
                    self.send_response(code)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                except (BrokenPipeError, ConnectionResetError):
                    pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def _has_image_field(content_type: str, raw: bytes) -> bool:
    if not content_type.startswith("multipart/form-data"):
        return False
    msg = BytesParser(policy=default_policy).parsebytes(
        b"Content-Type: " + content_type.encode() + b"\r\n\r\n" + raw
    )
    for part in msg.iter_parts():
        if part.get_param("name", header="content-disposition") == "image":
            return True
    return False
