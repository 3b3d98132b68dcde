"""Local chat-completion server replaying recorded or computed responses."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence, Union

Responder = Union[Sequence[str], Callable[[dict], Union[str, tuple[int, str]]]]


class MockChatServer:
    """Serve ``POST /chat/completions`` on an ephemeral localhost port.

    ``responder`` is either a list of texts (served in order; the last one
    repeats) or a callable receiving the request JSON and returning a text
    or a ``(status, raw_body)`` pair for error injection. Every request body
    is kept in ``requests``.
    """

    def __init__(self, responder: Responder):
        self.responder = responder
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "MockChatServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()

    def _respond(self, body: dict) -> tuple[int, str]:
        with self._lock:
            index = len(self.requests)
            self.requests.append(body)
        if callable(self.responder):
            out = self.responder(body)
        else:
            out = self.responder[min(index, len(self.responder) - 1)]
        if isinstance(out, tuple):
            return out
        payload = {"object": "chat.completion", "model": body.get("model"),
                   "choices": [{"index": 0, "message": {"role": "assistant", "content": out},
                                "finish_reason": "stop"}]}
        return 200, json.dumps(payload)

    def _handler(self):
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if self.path.rstrip("/") != "/chat/completions":
                    status, text = 404, "not found"
                else:
                    try:
                        body = json.loads(raw)
                    except json.JSONDecodeError:
                        status, text = 400, "bad json"
                    else:
                        body["_headers"] = {k.lower(): v for k, v in self.headers.items()}
                        status, text = mock._respond(body)
                data = text.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        return Handler
