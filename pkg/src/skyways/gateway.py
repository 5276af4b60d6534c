"""Service gateway: the wire API in front of one simulation engine.

Request/response verbs travel as JSON over plain HTTP POST or as
line-of-JSON messages on a websocket; the same websocket carries the
outbound stream frames (telemetry, events, stats, airspace) and the
synchronous handshakes of attached external subsystems. All engine
mutations funnel through the engine's live queues, consumed at tick
boundaries, so concurrent clients can never tear a tick.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .authority import ApprovalDecision
from .engine import EngineAbort, SimEngine
from .scenario import load_scenario, validate_scenario
from .websocket import WsError, WsSocket, accept_for
from .world import ValidationError

TOKEN_ENV_VAR = "SKYWAYS_TOKEN"

STREAM_KINDS = frozenset({"telemetry", "event", "stats", "airspace"})
EXTERNAL_ROLES = frozenset({"authority", "traffic-management"})

_LOGGED_BODY_VERBS = frozenset({
    "anomaly.inject", "airspace.control", "plan.submit", "uav.command"})


class _Err(Exception):
    """A verb failure that becomes an error response."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _compact(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


class _Client:
    """One stream connection and its outbound frame queue.

    The engine thread appends frames; a dedicated writer thread drains
    them, so a stalled socket can never stall the tick loop. Exceeding
    the buffer limit marks the client dead and the writer hangs up.
    """

    def __init__(self, ws: WsSocket):
        self.ws = ws
        self.kinds: set[str] | None = None  # None until subscribed
        self.queue: deque[str] = deque()
        self.cond = threading.Condition()
        self.dead = False
        self.bridges: list[_Bridge] = []

    def offer(self, message: str, limit: int) -> None:
        with self.cond:
            if self.dead:
                return
            if len(self.queue) >= limit:
                self.dead = True  # too slow; writer will disconnect it
            else:
                self.queue.append(message)
            self.cond.notify()

    def kill(self) -> None:
        with self.cond:
            self.dead = True
            self.cond.notify()
        for bridge in self.bridges:
            bridge.fail()

    def writer_loop(self) -> None:
        while True:
            with self.cond:
                while not self.queue and not self.dead:
                    self.cond.wait()
                if self.dead:
                    break
                batch = list(self.queue)
                self.queue.clear()
            try:
                for message in batch:
                    self.ws.send_text(message)
            except WsError:
                break
        self.kill()
        self.ws.close()


class _Bridge:
    """Synchronous per-tick handshake channel to an external subsystem.

    The engine thread sends one handshake message and blocks until the
    peer echoes its sequence number back (or the wall-clock timeout
    expires, which the engine turns into an aborted run).
    """

    def __init__(self, client: _Client, role: str, timeout: float):
        self.client = client
        self.role = role
        self.timeout = timeout
        self._seq = 0
        self._reply: dict | None = None
        self._event = threading.Event()
        self._dead = False

    @property
    def alive(self) -> bool:
        return not self._dead and not self.client.dead

    def fail(self) -> None:
        self._dead = True
        self._event.set()

    def request(self, body: dict) -> dict:
        if not self.alive:
            raise TimeoutError("external connection lost")
        self._seq += 1
        self._reply = None
        self._event.clear()
        message = {"handshake": self._seq, "role": self.role, **body}
        try:
            self.client.ws.send_text(_compact(message))
        except WsError:
            raise TimeoutError("external connection lost") from None
        if not self._event.wait(self.timeout):
            raise TimeoutError("external handshake timed out")
        reply = self._reply
        if reply is None or self._dead:
            raise TimeoutError("external connection lost")
        return reply

    def on_reply(self, obj: dict) -> None:
        if obj.get("handshake") == self._seq:
            self._reply = obj
            self._event.set()

    # ------------------------------------------------- engine-facing hooks
    def decider(self):
        def decide(submissions, now):
            reply = self.request({
                "tick": now,
                "submissions": [s.to_payload() for s in submissions]})
            decisions = reply.get("decisions")
            if not isinstance(decisions, list):
                raise TimeoutError("external reply carried no decisions")
            try:
                return [ApprovalDecision.from_payload(d) for d in decisions]
            except (ValidationError, KeyError, TypeError, ValueError):
                raise TimeoutError("external decisions malformed") from None
        return decide

    def commander(self):
        def command(now, setpoints):
            reply = self.request({"tick": now, "setpoints": setpoints})
            return reply.get("setpoints")
        return command


class Gateway:
    """Serve one engine over HTTP POST /api and websocket /ws."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, *,
                 token: str, out_dir: str | Path | None = None,
                 buffer_limit: int = 4096, engine_factory=None):
        self.host = host
        self.port = port
        self.token = token
        self.buffer_limit = buffer_limit
        self._engine_factory = engine_factory or self._default_factory
        self._out_root = Path(out_dir) if out_dir is not None else None

        self._lock = threading.RLock()
        self._state = "idle"
        self._engine: SimEngine | None = None
        self._scenario = None
        self._doc: dict | None = None
        self._report = None
        self._error: str | None = None
        self._run_id = 0
        self._accepted_plans: set[str] = set()
        self._external_roles: set[str] = set()
        self._external_timeout = 5.0
        self._bridges: dict[str, _Bridge] = {}

        self._run_thread: threading.Thread | None = None
        self._run_cond = threading.Condition()
        self._pause_flag = False
        self._stop_flag = False

        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()

        self._httpd: ThreadingHTTPServer | None = None
        self._http_thread: threading.Thread | None = None
        self._log_file = None
        self._log_lock = threading.Lock()
        self._log_seq = 0

        self._verbs = {
            "scenario.load": self._v_scenario_load,
            "sim.start": self._v_sim_start,
            "sim.pause": self._v_sim_pause,
            "sim.resume": self._v_sim_resume,
            "sim.stop": self._v_sim_stop,
            "sim.status": self._v_sim_status,
            "network.get": self._v_network_get,
            "plan.submit": self._v_plan_submit,
            "plan.query": self._v_plan_query,
            "uav.command": self._v_uav_command,
            "uav.telemetry.subscribe": self._v_subscribe,
            "anomaly.inject": self._v_anomaly_inject,
            "airspace.control": self._v_airspace_control,
            "stats.get": self._v_stats_get,
            "external.attach": self._v_external_attach,
        }

    @staticmethod
    def _default_factory(scenario, out_dir, frame_sink):
        return SimEngine(scenario, out_dir, frame_sink=frame_sink)

    # ----------------------------------------------------------- lifecycle
    def start(self) -> None:
        gateway = self
        handler = type("_BoundHandler", (_Handler,), {"gateway": gateway})
        self._httpd = ThreadingHTTPServer((self.host, self.port), handler)
        self.port = self._httpd.server_address[1]
        self._http_thread = threading.Thread(
            target=self._httpd.serve_forever, name="skyways-http", daemon=True)
        self._http_thread.start()

    def stop(self) -> None:
        with self._lock:
            running = self._state in ("running", "paused")
            thread = self._run_thread
        if running:
            with self._run_cond:
                self._stop_flag = True
                self._pause_flag = False
                self._run_cond.notify_all()
            if thread is not None:
                thread.join(timeout=60)
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        with self._clients_lock:
            clients = list(self._clients)
            self._clients.clear()
        for client in clients:
            client.kill()
            client.ws.close()
        with self._log_lock:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port

    # ------------------------------------------------------------ requests
    def handle(self, req: dict, client: _Client | None = None) -> dict:
        rid = req.get("id") if isinstance(req, dict) else None
        verb = req.get("verb") if isinstance(req, dict) else None
        try:
            if not isinstance(req, dict):
                raise _Err("protocol", "request must be a JSON object")
            if not isinstance(verb, str):
                raise _Err("protocol", "request needs a string verb")
            body = req.get("body", {})
            if body is None:
                body = {}
            if not isinstance(body, dict):
                raise _Err("protocol", "body must be an object")
            if verb != "sim.status":
                self._check_token(req)
            fn = self._verbs.get(verb)
            if fn is None:
                raise _Err("protocol", f"unknown verb {verb!r}")
            result = fn(body, client)
            self._log_request(verb, rid, body, ok=True)
            return {"id": rid, "status": "ok", "body": result}
        except _Err as exc:
            self._log_request(verb, rid, None, ok=False, code=exc.code)
            return {"id": rid, "status": "error",
                    "error": {"code": exc.code, "message": exc.message}}
        except Exception as exc:  # total: a bug must still answer
            self._log_request(verb, rid, None, ok=False, code="internal")
            return {"id": rid, "status": "error",
                    "error": {"code": "internal", "message": repr(exc)}}

    def _check_token(self, req: dict) -> None:
        supplied = req.get("token")
        if not isinstance(supplied, str) or not secrets.compare_digest(
                supplied, self.token):
            raise _Err("auth", "missing or invalid token")

    def _log_request(self, verb, rid, body, *, ok: bool, code=None) -> None:
        if self._out_root is None:
            return
        entry = {"verb": verb, "id": rid, "ok": ok, "run": self._run_id,
                 "tick": self._engine.clock.tick if self._engine else None}
        if code is not None:
            entry["code"] = code
        if ok and verb in _LOGGED_BODY_VERBS:
            entry["body"] = body
        with self._log_lock:
            if self._log_file is None:
                self._out_root.mkdir(parents=True, exist_ok=True)
                self._log_file = open(self._out_root / "gateway.jsonl", "a")
            entry["seq"] = self._log_seq
            self._log_seq += 1
            self._log_file.write(_compact(entry) + "\n")
            self._log_file.flush()

    # --------------------------------------------------------------- verbs
    def _v_scenario_load(self, body: dict, client) -> dict:
        doc = body.get("scenario")
        if not isinstance(doc, dict):
            raise _Err("bad-request", "body.scenario must be the document object")
        roles = body.get("external", [])
        if not isinstance(roles, list) or not set(roles) <= EXTERNAL_ROLES:
            raise _Err("bad-request",
                       f"external roles must be a subset of {sorted(EXTERNAL_ROLES)}")
        try:
            timeout = float(body.get("external_timeout", 5.0))
        except (TypeError, ValueError):
            raise _Err("bad-request", "external_timeout must be a number")
        if timeout <= 0:
            raise _Err("bad-request", "external_timeout must be positive")
        violations = validate_scenario(doc)
        if violations:
            raise _Err("bad-request", "invalid scenario: " + "; ".join(violations))
        with self._lock:
            if self._state in ("running", "paused"):
                raise _Err("state", "a run is in progress; stop it first")
            scenario = load_scenario(doc)
            self._run_id += 1
            out = None
            if self._out_root is not None:
                out = self._out_root / f"run-{self._run_id:03d}"
            self._engine = self._engine_factory(scenario, out, self._fan_out)
            self._scenario = scenario
            self._doc = doc
            self._report = None
            self._error = None
            self._accepted_plans = set()
            self._external_roles = set(roles)
            self._external_timeout = timeout
            self._bridges = {}
            self._state = "loaded"
            return {"state": "loaded", "map": scenario.map_name,
                    "seed": scenario.seed, "fleet": len(scenario.fleet),
                    "demands": len(scenario.demands),
                    "external": sorted(self._external_roles)}

    def _v_sim_start(self, body: dict, client) -> dict:
        until = body.get("until")
        if until is not None and (not isinstance(until, int) or until < 0):
            raise _Err("bad-request", "until must be a non-negative tick count")
        rate = body.get("rate", "realtime")
        if rate not in ("realtime", "fast"):
            raise _Err("bad-request", "rate must be 'realtime' or 'fast'")
        with self._lock:
            if self._state != "loaded":
                if self._state == "idle":
                    raise _Err("state", "no scenario loaded")
                if self._state in ("running", "paused"):
                    raise _Err("state", "run already in progress")
                raise _Err("state",
                           f"run already {self._state}; load a scenario to restart")
            for role in sorted(self._external_roles):
                bridge = self._bridges.get(role)
                if bridge is None or not bridge.alive:
                    raise _Err("state", f"external role {role!r} is not attached")
            self._pause_flag = False
            self._stop_flag = False
            self._state = "running"
            self._run_thread = threading.Thread(
                target=self._run_loop, args=(until, rate == "realtime"),
                name="skyways-run", daemon=True)
            self._run_thread.start()
            return {"state": "running", "until": until, "rate": rate}

    def _v_sim_pause(self, body: dict, client) -> dict:
        with self._lock:
            if self._state != "running":
                raise _Err("state", f"cannot pause while {self._state}")
            with self._run_cond:
                self._pause_flag = True
                self._run_cond.notify_all()
            self._state = "paused"
            return {"state": "paused", "tick": self._engine.clock.tick}

    def _v_sim_resume(self, body: dict, client) -> dict:
        with self._lock:
            if self._state != "paused":
                raise _Err("state", f"cannot resume while {self._state}")
            with self._run_cond:
                self._pause_flag = False
                self._run_cond.notify_all()
            self._state = "running"
            return {"state": "running", "tick": self._engine.clock.tick}

    def _v_sim_stop(self, body: dict, client) -> dict:
        with self._lock:
            if self._state not in ("running", "paused"):
                raise _Err("state", f"no run in progress (state {self._state})")
            thread = self._run_thread
        with self._run_cond:
            self._stop_flag = True
            self._pause_flag = False
            self._run_cond.notify_all()
        if thread is not None:
            thread.join(timeout=60)
            if thread.is_alive():
                raise _Err("internal", "run loop did not stop in time")
        with self._lock:
            return {"state": self._state,
                    "report": self._report.to_payload()
                    if self._report is not None else None}

    def _v_sim_status(self, body: dict, client) -> dict:
        with self._lock:
            status = {
                "state": self._state,
                "tick": self._engine.clock.tick if self._engine else 0,
                "scenario": (self._scenario.map_name
                             if self._scenario is not None else None),
                "error": self._error,
            }
            if self._report is not None:
                status["report"] = self._report.to_payload()
            return status

    def _v_network_get(self, body: dict, client) -> dict:
        scenario = self._require_scenario()
        net = scenario.network
        from .anomaly import obstacle_to_payload, zone_to_payload
        return {
            "map": scenario.map_name,
            "nodes": [{"id": n.id, "position": [n.position.east,
                                                n.position.north,
                                                n.position.up]}
                      for n in net.nodes.values()],
            "airports": [{"id": a.id,
                          "position": [a.ground_position.east,
                                       a.ground_position.north,
                                       a.ground_position.up],
                          "linked_node": a.linked_node, "pads": a.pads}
                         for a in net.airports.values()],
            "airways": [{"id": w.id, "a": w.a, "b": w.b,
                         "corridor_radius": w.corridor_radius,
                         "bidirectional": w.bidirectional,
                         "capacity": w.capacity}
                        for w in net.airways.values()],
            "obstacles": [obstacle_to_payload(o) for o in scenario.obstacles],
            "zones": [zone_to_payload(z) for z in scenario.zones],
        }

    def _v_plan_submit(self, body: dict, client) -> dict:
        engine = self._require_live_engine()
        demand_id = body.get("id")
        origin = body.get("origin")
        destination = body.get("destination")
        for name, value in (("id", demand_id), ("origin", origin),
                            ("destination", destination)):
            if not isinstance(value, str) or not value:
                raise _Err("bad-request", f"{name} must be a non-empty string")
        departure = body.get("departure", 0)
        if not isinstance(departure, int) or departure < 0:
            raise _Err("bad-request", "departure must be a non-negative tick")
        plan_id = f"P-{demand_id}"
        with self._lock:
            if plan_id in self._accepted_plans or plan_id in engine.traffic.plans:
                raise _Err("bad-request", f"duplicate demand id {demand_id!r}")
            self._accepted_plans.add(plan_id)
        engine.submit_demand_live({
            "id": demand_id, "origin": origin, "destination": destination,
            "requested_departure": departure})
        return {"plan_id": plan_id, "queued_at": engine.clock.tick}

    def _v_plan_query(self, body: dict, client) -> dict:
        engine = self._require_engine()
        plan_id = body.get("plan_id")
        if not isinstance(plan_id, str):
            raise _Err("bad-request", "plan_id must be a string")
        plan = self._plan_snapshot(engine, plan_id)
        if plan is None:
            if plan_id in self._accepted_plans:
                return {"plan_id": plan_id, "state": "pending"}
            raise _Err("bad-request", f"unknown plan {plan_id!r}")
        return plan

    def _plan_snapshot(self, engine: SimEngine, plan_id: str) -> dict | None:
        for _ in range(3):  # the engine thread may grow the dict mid-read
            try:
                plan = engine.traffic.plans.get(plan_id)
                if plan is None:
                    return None
                return {
                    "plan_id": plan.id,
                    "demand_id": plan.demand_id,
                    "uav_id": plan.uav_id,
                    "origin": plan.origin,
                    "destination": plan.destination,
                    "state": plan.state.value,
                    "reason": plan.abort_reason,
                    "progress": plan.progress,
                    "requested_departure": plan.requested_departure,
                    "assigned_departure": plan.assigned_departure,
                    "route": ({"nodes": list(plan.route.nodes),
                               "airways": list(plan.route.airways)}
                              if plan.route is not None else None),
                    "history": [[t, s, d] for t, s, d in plan.history],
                }
            except RuntimeError:
                continue
        raise _Err("internal", "plan table unstable; retry")

    def _v_uav_command(self, body: dict, client) -> dict:
        engine = self._require_live_engine()
        uav_id = body.get("uav_id")
        setpoint = body.get("setpoint")
        if not isinstance(uav_id, str) or uav_id not in engine.params:
            raise _Err("bad-request", f"unknown uav {uav_id!r}")
        if not isinstance(setpoint, dict):
            raise _Err("bad-request", "setpoint must be an object")
        engine.command_uav_live(uav_id, setpoint)
        return {"queued_at": engine.clock.tick}

    def _v_anomaly_inject(self, body: dict, client) -> dict:
        engine = self._require_live_engine()
        for name in ("id", "category", "kind"):
            if not isinstance(body.get(name), str) or not body[name]:
                raise _Err("bad-request", f"anomaly needs a string {name}")
        engine.inject_anomaly_live(body)
        return {"anomaly_id": body["id"], "queued_at": engine.clock.tick}

    def _v_airspace_control(self, body: dict, client) -> dict:
        engine = self._require_live_engine()
        if not isinstance(body.get("kind"), str):
            raise _Err("bad-request", "order needs a string kind")
        engine.submit_order_live(body)
        return {"queued_at": engine.clock.tick}

    def _v_stats_get(self, body: dict, client) -> dict:
        engine = self._require_engine()
        return {"tick": engine.clock.tick, **engine.stats.snapshot(),
                "bus": engine.bus.stats()}

    def _v_subscribe(self, body: dict, client) -> dict:
        if client is None:
            raise _Err("protocol",
                       "stream subscription requires a stream connection")
        kinds = body.get("kinds")
        if kinds is None:
            chosen = set(STREAM_KINDS)
        else:
            if (not isinstance(kinds, list)
                    or not set(kinds) <= STREAM_KINDS or not kinds):
                raise _Err("bad-request",
                           f"kinds must be a non-empty subset of {sorted(STREAM_KINDS)}")
            chosen = set(kinds)
        client.kinds = chosen
        return {"kinds": sorted(chosen)}

    def _v_external_attach(self, body: dict, client) -> dict:
        if client is None:
            raise _Err("protocol",
                       "external.attach requires a stream connection")
        role = body.get("role")
        if role not in EXTERNAL_ROLES:
            raise _Err("bad-request",
                       f"role must be one of {sorted(EXTERNAL_ROLES)}")
        with self._lock:
            if self._state != "loaded":
                raise _Err("state",
                           f"attach requires a loaded, unstarted run (state {self._state})")
            if role not in self._external_roles:
                raise _Err("state",
                           f"scenario.load did not declare {role!r} external")
            existing = self._bridges.get(role)
            if existing is not None and existing.alive:
                raise _Err("state", f"role {role!r} already attached")
            bridge = _Bridge(client, role, self._external_timeout)
            self._bridges[role] = bridge
            client.bridges.append(bridge)
            if role == "authority":
                self._engine.external_decider = bridge.decider()
            else:
                self._engine.external_commander = bridge.commander()
            return {"attached": role, "timeout_seconds": self._external_timeout}

    # ------------------------------------------------------------- helpers
    def _require_scenario(self):
        with self._lock:
            if self._scenario is None:
                raise _Err("state", "no scenario loaded")
            return self._scenario

    def _require_engine(self) -> SimEngine:
        with self._lock:
            if self._engine is None:
                raise _Err("state", "no scenario loaded")
            return self._engine

    def _require_live_engine(self) -> SimEngine:
        with self._lock:
            if self._engine is None:
                raise _Err("state", "no scenario loaded")
            if self._state in ("done", "stopped", "aborted"):
                raise _Err("state", f"run already {self._state}")
            return self._engine

    # ------------------------------------------------------------ run loop
    def _run_loop(self, until: int | None, pace: bool) -> None:
        engine = self._engine
        started = time.perf_counter()
        error = None
        next_due = started
        try:
            while True:
                with self._run_cond:
                    while self._pause_flag and not self._stop_flag:
                        self._run_cond.wait(0.25)
                        next_due = time.perf_counter()
                    if self._stop_flag:
                        break
                if engine.done():
                    break
                if until is not None and engine.clock.tick >= until:
                    break
                engine.step()
                if pace:
                    next_due += engine.clock.tick_duration
                    delay = next_due - time.perf_counter()
                    if delay > 0:
                        time.sleep(delay)
                    else:
                        next_due = time.perf_counter()  # never bank debt
        except EngineAbort as exc:
            error = str(exc)
        except Exception as exc:  # keep the gateway alive past engine bugs
            error = f"engine failure: {exc!r}"
        wall = time.perf_counter() - started
        report = engine.finalize(wall, error)
        with self._lock:
            self._report = report
            self._error = error
            if error is not None:
                self._state = "aborted"
            elif self._stop_flag:
                self._state = "stopped"
            else:
                self._state = "done"

    # ------------------------------------------------------------- streams
    def _fan_out(self, kind: str, payload: dict) -> None:
        with self._clients_lock:
            clients = tuple(self._clients)
        message = None
        for client in clients:
            kinds = client.kinds
            if kinds is None or kind not in kinds:
                continue
            if message is None:
                message = _compact({"frame": kind, "tick": payload.get("tick"),
                                    "payload": payload})
            client.offer(message, self.buffer_limit)

    def _ws_session(self, ws: WsSocket) -> None:
        client = _Client(ws)
        writer = threading.Thread(target=client.writer_loop,
                                  name="skyways-stream", daemon=True)
        writer.start()
        with self._clients_lock:
            self._clients.append(client)
        try:
            while True:
                try:
                    text = ws.recv_text()
                except WsError:
                    break
                if text is None:
                    break
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError:
                    ws.send_text(_compact({
                        "id": None, "status": "error",
                        "error": {"code": "protocol",
                                  "message": "message is not valid JSON"}}))
                    continue
                if isinstance(obj, dict) and "handshake" in obj \
                        and "verb" not in obj:
                    for bridge in client.bridges:
                        bridge.on_reply(obj)
                    continue
                response = self.handle(obj if isinstance(obj, dict) else {},
                                       client)
                try:
                    ws.send_text(_compact(response))
                except WsError:
                    break
        finally:
            with self._clients_lock:
                if client in self._clients:
                    self._clients.remove(client)
            client.kill()
            ws.close()


# --------------------------------------------------------------- transport


class _Handler(BaseHTTPRequestHandler):
    gateway: Gateway  # bound by Gateway.start via subclassing
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet; the gateway keeps its own log
        pass

    def _send_json(self, payload: dict, status: int = 200) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(data)

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers",
                         "Content-Type, Authorization")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_POST(self):
        if self.path != "/api":
            self._send_json({"id": None, "status": "error",
                             "error": {"code": "protocol",
                                       "message": "POST /api only"}}, 404)
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
        except ValueError:
            length = 0
        raw = self.rfile.read(length) if length else b""
        try:
            req = json.loads(raw)
        except json.JSONDecodeError:
            self._send_json({"id": None, "status": "error",
                             "error": {"code": "protocol",
                                       "message": "request is not valid JSON"}})
            return
        auth = self.headers.get("Authorization", "")
        if isinstance(req, dict) and auth.startswith("Bearer "):
            req.setdefault("token", auth[len("Bearer "):])
        self._send_json(self.gateway.handle(req, None))

    def do_GET(self):
        if self.path.split("?", 1)[0] != "/ws":
            self._send_json({"id": None, "status": "error",
                             "error": {"code": "protocol",
                                       "message": "stream endpoint is /ws"}}, 404)
            return
        key = self.headers.get("Sec-WebSocket-Key")
        upgrade = (self.headers.get("Upgrade") or "").lower()
        if upgrade != "websocket" or not key:
            self._send_json({"id": None, "status": "error",
                             "error": {"code": "protocol",
                                       "message": "websocket upgrade required"}}, 400)
            return
        response = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept_for(key)}\r\n"
            "\r\n"
        )
        self.wfile.write(response.encode("ascii"))
        self.wfile.flush()
        self.close_connection = True
        ws = WsSocket(self.connection, self.rfile, mask=False)
        self.gateway._ws_session(ws)


def token_from_env() -> str | None:
    value = os.environ.get(TOKEN_ENV_VAR)
    return value if value else None
