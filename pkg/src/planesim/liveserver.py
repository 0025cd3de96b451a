"""A scenario served over HTTP, with a clock that only moves on demand.

The server is single threaded and never consults wall time; the simulation
advances when a request needs an answer (a completion call runs the engine
until that request settles) or when a client posts to /sim/advance. That
keeps every interaction deterministic and makes the server usable from
tests without sleeps.

Endpoints:

    POST   /v1/completions     {api_key, model, prompt_tokens, max_tokens}
                               200 {request_id, ttft_ms, e2el_ms, output_tokens}
                               401 | 402 | 403 | 429 on admission failure
                               503 when the request can never dispatch
    GET    /v1/usage?project=  200 usage roll-up | 404
    POST   /bridge/jobs        {recipe, project} -> 201 {job_id}
    GET    /bridge/jobs/{id}   200 {job_id, state, progress} | 404
    DELETE /bridge/jobs/{id}   200 {job_id, state, progress} | 404
    POST   /sim/advance        {ms} -> 200 {clock, events}
"""

from __future__ import annotations

import json
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .errors import UnknownBaseModel, UnknownJob
from .gateway import OK, STATUS_HTTP, GatewayRequest
from .runner import SimRun
from .scenario import Scenario, load_scenario


class LiveSim:
    """Wraps a wired run and exposes it as request/response operations."""

    def __init__(self, scenario: Scenario):
        self.run = SimRun(scenario)
        self.rng = self.run.engine.rng_stream("live-output")
        self._count = 0

    def _pump(self, to: int | None = None) -> int:
        engine = self.run.engine
        target = engine.clock if to is None else to
        records = engine.run_until(target)
        self.run.records.extend(records)
        return len(records)

    def completion(self, body: dict) -> tuple[int, dict]:
        api_key = body.get("api_key")
        model = body.get("model")
        prompt = body.get("prompt_tokens")
        max_tokens = body.get("max_tokens")
        if (
            not isinstance(api_key, str)
            or not isinstance(model, str)
            or not isinstance(prompt, int) or isinstance(prompt, bool)
            or not isinstance(max_tokens, int) or isinstance(max_tokens, bool)
            or prompt < 0
            or max_tokens < 1
        ):
            return 400, {"error": "bad-request"}
        self._count += 1
        req = GatewayRequest(
            id=f"live-{self._count:06d}",
            api_key=api_key,
            model=model,
            prompt_tokens=prompt,
            max_output_tokens=max_tokens,
            output_tokens=self.rng.randint(1, max_tokens),
        )
        engine = self.run.engine
        self.run.gateway.submit(req)
        self._pump()  # land the arrival, and the admission verdict with it
        while req.status == OK and not req.settled:
            nxt = engine.next_time()
            if nxt is None:
                return 503, {"error": "no-capacity", "request_id": req.id}
            self._pump(nxt)
        if req.status != OK:
            return STATUS_HTTP[req.status], {"error": req.status, "request_id": req.id}
        return 200, {
            "request_id": req.id,
            "ttft_ms": req.ttft_ms,
            "e2el_ms": req.e2el_ms,
            "output_tokens": req.output_tokens,
        }

    def usage(self, project: str | None) -> tuple[int, dict]:
        if project is None or project not in self.run.gateway.budgets:
            return 404, {"error": "unknown-project"}
        return 200, self.run.gateway.usage(project)

    def submit_job(self, body: dict) -> tuple[int, dict]:
        recipe = body.get("recipe")
        project = body.get("project")
        if not isinstance(recipe, str) or not isinstance(project, str):
            return 400, {"error": "bad-request"}
        try:
            job_id = self.run.bridge.submit(recipe, project)
        except UnknownBaseModel as exc:
            return 400, {"error": str(exc)}
        self._pump()  # land the submit so the job can start queueing now
        return 201, {"job_id": job_id}

    def job_status(self, job_id: str) -> tuple[int, dict]:
        try:
            return 200, self.run.bridge.status(job_id)
        except UnknownJob:
            return 404, {"error": "unknown-job"}

    def cancel_job(self, job_id: str) -> tuple[int, dict]:
        try:
            self.run.bridge.cancel(job_id)
        except UnknownJob:
            return 404, {"error": "unknown-job"}
        return 200, self.run.bridge.status(job_id)

    def advance(self, body: dict) -> tuple[int, dict]:
        ms = body.get("ms")
        if not isinstance(ms, int) or isinstance(ms, bool) or ms < 0:
            return 400, {"error": "bad-request"}
        events = self._pump(self.run.engine.clock + ms)
        return 200, {"clock": self.run.engine.clock, "events": events}


class _Handler(BaseHTTPRequestHandler):
    sim: LiveSim

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass

    def _send(self, status: int, obj: dict) -> None:
        data = json.dumps(obj, sort_keys=True).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _body(self) -> dict | None:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            body = json.loads(raw)
        except json.JSONDecodeError:
            return None
        return body if isinstance(body, dict) else None

    def do_POST(self):
        body = self._body()
        if body is None:
            return self._send(400, {"error": "invalid-json"})
        path = urlparse(self.path).path
        if path == "/v1/completions":
            status, obj = self.sim.completion(body)
        elif path == "/bridge/jobs":
            status, obj = self.sim.submit_job(body)
        elif path == "/sim/advance":
            status, obj = self.sim.advance(body)
        else:
            status, obj = 404, {"error": "not-found"}
        self._send(status, obj)

    def do_GET(self):
        parsed = urlparse(self.path)
        if parsed.path == "/v1/usage":
            project = parse_qs(parsed.query).get("project", [None])[0]
            status, obj = self.sim.usage(project)
        elif parsed.path.startswith("/bridge/jobs/"):
            job_id = parsed.path[len("/bridge/jobs/"):]
            status, obj = self.sim.job_status(job_id)
        else:
            status, obj = 404, {"error": "not-found"}
        self._send(status, obj)

    def do_DELETE(self):
        path = urlparse(self.path).path
        if path.startswith("/bridge/jobs/"):
            job_id = path[len("/bridge/jobs/"):]
            status, obj = self.sim.cancel_job(job_id)
        else:
            status, obj = 404, {"error": "not-found"}
        self._send(status, obj)


def make_server(scenario: Scenario, host: str = "127.0.0.1", port: int = 0) -> HTTPServer:
    sim = LiveSim(scenario)
    handler = type("_BoundHandler", (_Handler,), {"sim": sim})
    server = HTTPServer((host, port), handler)
    server.sim = sim
    return server


def serve(
    path: str | Path,
    host: str = "127.0.0.1",
    port: int = 8080,
    seed: int | None = None,
) -> None:
    scenario = load_scenario(path, seed=seed)
    server = make_server(scenario, host=host, port=port)
    print(f"serving {scenario.name} on http://{host}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
