"""A local stand-in for the language-model endpoint, for tests and demos.

Responses are canned per role. Where a fixed answer cannot be valid (the
actor's next step, a command for a given cell) the stub echoes the default
the client put in its request. ``malformed`` makes the next N responses
unparseable so the client's retry path can be exercised.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable


def canned_plan(width: int, height: int) -> dict:
    cx, cy = width // 2, height // 2
    return {
        "subgoals": [
            {
                "kind": "explore",
                "target": [cx, cy],
                "region": [0, 0, width - 1, height - 1],
                "suggested_strategy": "sweep the middle of the map",
                "anchors": [[cx, cy]],
            }
        ],
        "rationale": "canned",
    }


def canned_response(role: str, inputs: dict, width: int, height: int) -> dict:
    if role == "describer":
        return {"text": str(inputs.get("input", ""))}
    if role == "summarizer":
        words = str(inputs.get("notes", "")).split()
        return {"text": " ".join(words[: int(inputs.get("max_tokens", 64))])}
    if role == "planner":
        return canned_plan(width, height)
    if role == "deployer_subtask":
        return {"strategy": "cover the assigned cells"}
    if role == "deployer_subcommand":
        x, y = inputs["position"]
        return {"steps": [{"kind": "MoveTo", "args": [x, y]}, {"kind": "Scan", "args": []}, {"kind": "ReportMap", "args": []}]}
    if role in ("critic_manager", "critic_conductor"):
        return {"verdict": "accept", "reasons": "canned"}
    if role == "actor":
        return {"step": inputs["next_step"]}
    if role == "curriculum":
        return {"task": "free explore"}
    raise KeyError(role)


@dataclass
class StubState:
    width: int = 64
    height: int = 64
    malformed: int = 0
    requests: list[dict] = field(default_factory=list)
    responder: Callable[[str, dict, int, int], Any] = canned_response
    lock: threading.Lock = field(default_factory=threading.Lock)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self) -> None:  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        stub = self.server.stub  # type: ignore[attr-defined]
        with stub.lock:
            stub.requests.append(body)
            bad = stub.malformed > 0
            if bad:
                stub.malformed -= 1
        if bad:
            payload = b"{not json"
        else:
            reply = stub.responder(body.get("role", ""), body.get("inputs", {}), stub.width, stub.height)
            payload = json.dumps(reply).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format: str, *args: Any) -> None:
        pass


class StubServer:
    """Context manager running the stub on a free localhost port."""

    def __init__(self, width: int = 64, height: int = 64, malformed: int = 0, port: int = 0) -> None:
        self.state = StubState(width, height, malformed)
        self._server = ThreadingHTTPServer(("127.0.0.1", port), _Handler)
        self._server.stub = self.state  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/"

    def start(self) -> StubServer:
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> StubServer:
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()
