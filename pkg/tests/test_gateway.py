"""Gateway tests: verbs over real HTTP and websocket connections against
a live server, auth and error taxonomy, stream frame guarantees, and the
external subsystem bridge compared against in-process runs."""

import json
import time
import urllib.request

import pytest

from skyways import websocket
from skyways.engine import SimEngine
from skyways.extstub import EchoStub
from skyways.gateway import Gateway
from skyways.scenario import load_scenario


def _doc(demands, *, seed=11, length=200.0, alt=30.0):
    return {
        "datum": {"lat": 31.0, "lon": 121.0, "alt": 0.0},
        "map": {"name": "mini", "obstacles": [], "zones": []},
        "network": {
            "nodes": [
                {"id": "N0", "position": [0, 0, alt]},
                {"id": "N1", "position": [length, 0, alt]},
            ],
            "airports": [
                {"id": "A0", "position": [0, 0, 0], "linked_node": "N0"},
                {"id": "A1", "position": [length, 0, 0], "linked_node": "N1"},
            ],
            "airways": [{"id": "W01", "a": "N0", "b": "N1"}],
        },
        "fleet": [
            {"id": "U1", "home": "A0"},
            {"id": "U2", "home": "A1"},
        ],
        "demands": demands,
        "anomalies": [],
        "seed": seed,
        "clock": {},
        "wind": [0.0, 0.0, 0.0],
    }


def _detour_doc(seed=5):
    """Two-hop direct path plus a longer bypass through N2."""
    alt = 30.0
    return {
        "datum": {"lat": 31.0, "lon": 121.0, "alt": 0.0},
        "map": {"name": "detour", "obstacles": [], "zones": []},
        "network": {
            "nodes": [
                {"id": "N0", "position": [0, 0, alt]},
                {"id": "NM", "position": [100, 0, alt]},
                {"id": "N1", "position": [200, 0, alt]},
                {"id": "N2", "position": [100, 125, alt]},
            ],
            "airports": [
                {"id": "A0", "position": [0, 0, 0], "linked_node": "N0"},
                {"id": "A1", "position": [200, 0, 0], "linked_node": "N1"},
            ],
            "airways": [
                {"id": "D1", "a": "N0", "b": "NM"},
                {"id": "D2", "a": "NM", "b": "N1"},
                {"id": "U", "a": "N0", "b": "N2"},
                {"id": "V", "a": "N2", "b": "N1"},
            ],
        },
        "fleet": [{"id": "U1", "home": "A0"}],
        "demands": [{"id": "DM1", "origin": "A0", "destination": "A1",
                     "departure": 10}],
        "anomalies": [],
        "seed": seed,
        "clock": {},
        "wind": [0.0, 0.0, 0.0],
    }


TOKEN = "test-token"

ALL_VERBS = [
    "scenario.load", "sim.start", "sim.pause", "sim.resume", "sim.stop",
    "network.get", "plan.submit", "plan.query", "uav.command",
    "uav.telemetry.subscribe", "anomaly.inject", "airspace.control",
    "stats.get", "external.attach",
]


@pytest.fixture
def gw(tmp_path):
    gateway = Gateway(token=TOKEN, out_dir=tmp_path / "out")
    gateway.start()
    yield gateway
    gateway.stop()


def _post(gw, verb, body=None, token=TOKEN, rid="r1"):
    req = {"id": rid, "verb": verb, "body": body or {}}
    if token is not None:
        req["token"] = token
    data = json.dumps(req).encode()
    request = urllib.request.Request(
        f"http://{gw.host}:{gw.port}/api", data,
        {"Content-Type": "application/json"})
    with urllib.request.urlopen(request, timeout=30) as response:
        return json.loads(response.read())


def _ok(gw, verb, body=None, **kw):
    resp = _post(gw, verb, body, **kw)
    assert resp["status"] == "ok", resp
    return resp["body"]


def _err(gw, verb, body=None, **kw):
    resp = _post(gw, verb, body, **kw)
    assert resp["status"] == "error", resp
    return resp["error"]


def _wait_state(gw, states, deadline=120.0):
    limit = time.time() + deadline
    while time.time() < limit:
        status = _ok(gw, "sim.status", token=None)
        if status["state"] in states:
            return status
        time.sleep(0.05)
    raise AssertionError(f"state never reached {states}: {status}")


def _ws_request(ws, verb, body=None, rid="w1", token=TOKEN):
    ws.send_text(json.dumps(
        {"id": rid, "verb": verb, "token": token, "body": body or {}}))
    limit = time.time() + 30
    while time.time() < limit:
        obj = json.loads(ws.recv_text(timeout=30))
        if "frame" not in obj and obj.get("id") == rid:
            return obj
    raise AssertionError("no response to request")


def _collect_frames(ws, seconds, limit=100000):
    frames = []
    deadline = time.time() + seconds
    while time.time() < deadline and len(frames) < limit:
        try:
            text = ws.recv_text(timeout=max(0.05, deadline - time.time()))
        except TimeoutError:
            break
        if text is None:
            break
        obj = json.loads(text)
        if "frame" in obj:
            frames.append(obj)
    return frames


# ---------------------------------------------------------------------------
# auth and protocol basics


def test_status_before_load_is_idle_and_needs_no_token(gw):
    status = _ok(gw, "sim.status", token=None)
    assert status["state"] == "idle"
    assert status["tick"] == 0
    assert status["scenario"] is None


def test_every_verb_except_status_rejects_missing_and_wrong_token(gw):
    for verb in ALL_VERBS:
        assert _err(gw, verb, token=None)["code"] == "auth", verb
        assert _err(gw, verb, token="wrong")["code"] == "auth", verb


def test_http_bearer_header_carries_the_token(gw):
    req = urllib.request.Request(
        f"http://{gw.host}:{gw.port}/api",
        json.dumps({"id": 1, "verb": "stats.get", "body": {}}).encode(),
        {"Content-Type": "application/json",
         "Authorization": f"Bearer {TOKEN}"})
    with urllib.request.urlopen(req, timeout=30) as response:
        obj = json.loads(response.read())
    # auth passed; the failure is the state machine, not the token
    assert obj["error"]["code"] == "state"


def test_unknown_verb_is_a_protocol_error(gw):
    assert _err(gw, "zz.bogus")["code"] == "protocol"


def test_every_request_gets_exactly_one_response_with_its_id(gw):
    ws = websocket.connect(gw.host, gw.port)
    sent = []
    for i in range(5):
        rid = f"burst-{i}"
        sent.append(rid)
        ws.send_text(json.dumps({
            "id": rid,
            "verb": "sim.status" if i % 2 == 0 else "no.such.verb",
            "token": TOKEN, "body": {}}))
    ws.send_text("this is not json")
    ws.send_text(json.dumps({"id": "no-verb", "token": TOKEN}))
    got = [json.loads(ws.recv_text(timeout=30)) for _ in range(7)]
    ids = [g["id"] for g in got]
    assert ids == sent + [None, "no-verb"]
    assert [g["status"] for g in got[:5]] == \
        ["ok", "error", "ok", "error", "ok"]
    assert got[5]["error"]["code"] == "protocol"
    assert got[6]["error"]["code"] == "protocol"
    ws.close()


def test_state_errors_before_and_after_runs(gw):
    assert _err(gw, "sim.start")["code"] == "state"
    assert _err(gw, "network.get")["code"] == "state"
    assert _err(gw, "stats.get")["code"] == "state"
    assert _err(gw, "sim.pause")["code"] == "state"
    _ok(gw, "scenario.load", {"scenario": _doc([])})
    assert _err(gw, "sim.resume")["code"] == "state"
    assert _err(gw, "sim.stop")["code"] == "state"


def test_invalid_scenario_rejected_with_violations(gw):
    bad = _doc([])
    del bad["seed"]
    error = _err(gw, "scenario.load", {"scenario": bad})
    assert error["code"] == "bad-request"
    assert "seed" in error["message"]


# ---------------------------------------------------------------------------
# runs through the wire


def test_load_start_complete_and_report(gw, tmp_path):
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30}])
    loaded = _ok(gw, "scenario.load", {"scenario": doc})
    assert loaded == {"state": "loaded", "map": "mini", "seed": 11,
                      "fleet": 2, "demands": 1, "external": []}
    _ok(gw, "sim.start", {"rate": "fast"})
    status = _wait_state(gw, {"done", "aborted"})
    assert status["state"] == "done"
    assert status["error"] is None
    report = status["report"]
    assert report["counts"]["completed"] == 1
    assert report["collisions"] == []

    run_dir = tmp_path / "out" / "run-001"
    assert (run_dir / "telemetry.jsonl").exists()
    assert (run_dir / "events.jsonl").exists()
    assert (run_dir / "report.json").exists()

    # a finished run cannot be restarted without a fresh load
    assert _err(gw, "sim.start")["code"] == "state"
    assert _err(gw, "plan.submit", {"id": "X", "origin": "A0",
                                    "destination": "A1"})["code"] == "state"


def test_gateway_requests_are_logged(gw, tmp_path):
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30}])
    _ok(gw, "scenario.load", {"scenario": doc})
    _ok(gw, "sim.start", {"rate": "fast"})
    _ok(gw, "anomaly.inject", {"id": "W9", "category": "environment",
                               "kind": "wind_gust",
                               "params": {"vector": [1.0, 0.0, 0.0]},
                               "duration": 30})
    _wait_state(gw, {"done"})
    lines = [json.loads(line) for line in
             (tmp_path / "out" / "gateway.jsonl").read_text().splitlines()]
    injected = [e for e in lines if e["verb"] == "anomaly.inject" and e["ok"]]
    assert len(injected) == 1
    assert injected[0]["body"]["id"] == "W9"


def test_network_get_serializes_the_loaded_world(gw):
    _ok(gw, "scenario.load", {"scenario": _detour_doc()})
    net = _ok(gw, "network.get")
    assert net["map"] == "detour"
    assert {n["id"] for n in net["nodes"]} == {"N0", "NM", "N1", "N2"}
    assert {a["id"] for a in net["airports"]} == {"A0", "A1"}
    assert {w["id"] for w in net["airways"]} == {"D1", "D2", "U", "V"}
    airway = next(w for w in net["airways"] if w["id"] == "D1")
    assert airway["bidirectional"] is True
    assert airway["corridor_radius"] == 10.0


def test_plan_submit_then_query_reaches_a_decision(gw):
    # the far-future demand keeps the run alive while D7 goes through
    keep = {"id": "KEEP", "origin": "A1", "destination": "A0",
            "departure": 5500}
    _ok(gw, "scenario.load", {"scenario": _doc([keep])})
    _ok(gw, "sim.start", {"rate": "fast", "until": 6000})
    assert _err(gw, "scenario.load",
                {"scenario": _doc([])})["code"] == "state"  # busy
    submitted = _ok(gw, "plan.submit",
                    {"id": "D7", "origin": "A0", "destination": "A1",
                     "departure": 40})
    assert submitted["plan_id"] == "P-D7"

    limit = time.time() + 60
    plan = None
    while time.time() < limit:
        plan = _ok(gw, "plan.query", {"plan_id": "P-D7"})
        if plan.get("state") not in ("pending", "draft", "submitted"):
            break
        time.sleep(0.05)
    assert plan["state"] in ("approved", "taking-off", "enroute", "landing",
                             "completed")
    assert plan["assigned_departure"] is not None
    assert plan["route"] == {"nodes": ["N0", "N1"], "airways": ["W01"]}
    assert any(state == "approved" for _, state, _ in plan["history"])

    assert _err(gw, "plan.submit",
                {"id": "D7", "origin": "A0",
                 "destination": "A1"})["code"] == "bad-request"
    assert _err(gw, "plan.query",
                {"plan_id": "P-nope"})["code"] == "bad-request"
    _ok(gw, "sim.stop")


def test_uav_command_validates_target(gw):
    _ok(gw, "scenario.load", {"scenario": _doc([])})
    assert _err(gw, "uav.command",
                {"uav_id": "UX", "setpoint": {}})["code"] == "bad-request"
    queued = _ok(gw, "uav.command",
                 {"uav_id": "U1",
                  "setpoint": {"mode": "waypoint", "target": [0, 0, 20]}})
    assert queued["queued_at"] == 0


def test_anomaly_applied_frame_within_two_ticks(gw):
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30},
                {"id": "D2", "origin": "A1", "destination": "A0",
                 "departure": 4000}])
    _ok(gw, "scenario.load", {"scenario": doc})
    ws = websocket.connect(gw.host, gw.port)
    assert _ws_request(ws, "uav.telemetry.subscribe",
                       {"kinds": ["event"]})["status"] == "ok"
    _ok(gw, "sim.start", {"rate": "fast"})

    queued = _ok(gw, "anomaly.inject",
                 {"id": "GUST", "category": "environment",
                  "kind": "wind_gust", "params": {"vector": [2.0, 0.0, 0.0]},
                  "duration": 60})
    applied_tick = None
    limit = time.time() + 60
    while time.time() < limit and applied_tick is None:
        text = ws.recv_text(timeout=60)
        if text is None:
            break
        obj = json.loads(text)
        if obj.get("frame") == "event" \
                and obj["payload"].get("kind") == "anomaly-applied":
            applied_tick = obj["tick"]
    assert applied_tick is not None
    assert 0 <= applied_tick - queued["queued_at"] <= 2
    ws.close()
    _ok(gw, "sim.stop")


def test_subscribe_requires_a_stream_connection(gw):
    assert _err(gw, "uav.telemetry.subscribe")["code"] == "protocol"


def test_frames_are_tick_ordered_per_kind_and_pause_stops_them(gw):
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30},
                {"id": "D2", "origin": "A1", "destination": "A0",
                 "departure": 9000}])
    _ok(gw, "scenario.load", {"scenario": doc})
    ws = websocket.connect(gw.host, gw.port)
    _ws_request(ws, "uav.telemetry.subscribe", {})
    _ok(gw, "sim.start", {})  # realtime pacing

    frames = _collect_frames(ws, seconds=2.5)
    assert frames, "no frames during a realtime run"
    last_by_kind = {}
    last_by_uav = {}
    for frame in frames:
        kind = frame["frame"]
        assert frame["tick"] >= last_by_kind.get(kind, -1)
        last_by_kind[kind] = frame["tick"]
        if kind == "telemetry":
            uav = frame["payload"]["uav_id"]
            assert frame["tick"] > last_by_uav.get(uav, -1)
            last_by_uav[uav] = frame["tick"]
    assert last_by_uav, "no telemetry while a vehicle was flying"

    paused = _ok(gw, "sim.pause")
    tail = _collect_frames(ws, seconds=1.0)
    late = [f for f in tail if f["tick"] > paused["tick"] + 2]
    assert late == []
    assert _collect_frames(ws, seconds=0.7) == []

    resumed = _ok(gw, "sim.resume")
    moving = _collect_frames(ws, seconds=1.5)
    assert moving
    assert all(f["tick"] >= resumed["tick"] for f in moving)
    ws.close()
    _ok(gw, "sim.stop")


def test_stalled_stream_client_never_stalls_the_run(tmp_path):
    gateway = Gateway(token=TOKEN, buffer_limit=16)
    gateway.start()
    try:
        doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                     "departure": 30}])
        _ok(gateway, "scenario.load", {"scenario": doc})
        ws = websocket.connect(gateway.host, gateway.port)
        _ws_request(ws, "uav.telemetry.subscribe", {})
        _ok(gateway, "sim.start", {"rate": "fast"})
        # never read a frame: the run must still finish on time
        status = _wait_state(gateway, {"done", "aborted"})
        assert status["state"] == "done"
        ws.close()
    finally:
        gateway.stop()


def test_client_past_buffer_limit_is_disconnected(tmp_path):
    gateway = Gateway(token=TOKEN, buffer_limit=8)
    gateway.start()
    try:
        ws = websocket.connect(gateway.host, gateway.port)
        _ws_request(ws, "uav.telemetry.subscribe", {"kinds": ["stats"]})
        # frames big enough to defeat socket buffering; the unread client
        # backs up, trips the limit, and must be hung up on, while offers
        # from the producer side always return without blocking
        blob = "x" * 65536
        for i in range(2000):
            gateway._fan_out("stats", {"tick": i, "blob": blob})
        closed = False
        deadline = time.time() + 60
        while time.time() < deadline:
            try:
                if ws.recv_text(timeout=60) is None:
                    closed = True
                    break
            except (websocket.WsError, TimeoutError):
                closed = True
                break
        assert closed
    finally:
        gateway.stop()


def test_airspace_control_forces_a_detour(gw):
    _ok(gw, "scenario.load", {"scenario": _detour_doc()})
    # orders queue before the run starts and drain on the first tick, so
    # the direct D1-D2 path is gone before the plan can be approved
    _ok(gw, "airspace.control", {"kind": "close_airway", "target": "D2"})
    _ok(gw, "sim.start", {"rate": "fast", "until": 30000})
    status = _wait_state(gw, {"done", "aborted"})
    assert status["state"] == "done"
    plan = _ok(gw, "plan.query", {"plan_id": "P-DM1"})
    assert plan["state"] == "completed"
    assert plan["route"]["airways"] == ["U", "V"]


def test_stats_get_tracks_completed_missions(gw):
    doc = _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                 "departure": 30}])
    _ok(gw, "scenario.load", {"scenario": doc})
    _ok(gw, "sim.start", {"rate": "fast"})
    _wait_state(gw, {"done"})
    stats = _ok(gw, "stats.get")
    assert stats["completed_missions"] == 1
    assert stats["airways"]["W01"]["transits"] == 1
    assert stats["collisions"] == 0


# ---------------------------------------------------------------------------
# external subsystem bridge


def _swap_doc():
    return _doc([{"id": "D1", "origin": "A0", "destination": "A1",
                  "departure": 30},
                 {"id": "D2", "origin": "A1", "destination": "A0",
                  "departure": 400}], seed=3)


def test_attach_requires_declared_role_and_loaded_state(gw):
    ws = websocket.connect(gw.host, gw.port)
    error = _ws_request(ws, "external.attach", {"role": "authority"})
    assert error["error"]["code"] == "state"  # nothing loaded yet
    _ok(gw, "scenario.load", {"scenario": _swap_doc()})
    error = _ws_request(ws, "external.attach", {"role": "authority"})
    assert error["error"]["code"] == "state"  # not declared external
    error = _ws_request(ws, "external.attach", {"role": "refuelling"})
    assert error["error"]["code"] == "bad-request"
    ws.close()


def test_start_without_attached_external_role_is_refused(gw):
    _ok(gw, "scenario.load",
        {"scenario": _swap_doc(), "external": ["authority"]})
    error = _err(gw, "sim.start", {"rate": "fast"})
    assert error["code"] == "state"
    assert "authority" in error["message"]


def _deterministic(report_payload: dict) -> dict:
    trimmed = {k: v for k, v in report_payload.items()
               if k not in ("wall_seconds", "ticks_per_second", "log_dir")}
    return json.loads(json.dumps(trimmed))  # normalize tuples vs lists


def test_echo_authority_stub_reproduces_builtin_run(gw):
    builtin = SimEngine(load_scenario(_swap_doc())).run(until=20000)
    _ok(gw, "scenario.load",
        {"scenario": _swap_doc(), "external": ["authority"]})
    stub = EchoStub(gw.host, gw.port, TOKEN, ("authority",))
    stub.start()
    try:
        _ok(gw, "sim.start", {"rate": "fast", "until": 20000})
        status = _wait_state(gw, {"done", "aborted"})
        assert status["state"] == "done"
        assert stub.handshakes >= 1  # submissions batch per tick
        assert _deterministic(status["report"]) == \
            _deterministic(builtin.to_payload())
    finally:
        stub.stop()


def test_both_roles_attached_still_reproduces_builtin_run(gw):
    builtin = SimEngine(load_scenario(_swap_doc())).run(until=20000)
    _ok(gw, "scenario.load",
        {"scenario": _swap_doc(),
         "external": ["authority", "traffic-management"]})
    stub = EchoStub(gw.host, gw.port, TOKEN,
                    ("authority", "traffic-management"))
    stub.start()
    try:
        _ok(gw, "sim.start", {"rate": "fast", "until": 20000})
        status = _wait_state(gw, {"done", "aborted"}, deadline=240.0)
        assert status["state"] == "done"
        # the command channel handshakes every tick, approvals only on
        # submission ticks
        assert stub.handshakes >= status["tick"]
        assert _deterministic(status["report"]) == \
            _deterministic(builtin.to_payload())
    finally:
        stub.stop()


def test_silent_external_subsystem_aborts_with_external_timeout(gw):
    _ok(gw, "scenario.load",
        {"scenario": _swap_doc(), "external": ["authority"],
         "external_timeout": 0.4})
    ws = websocket.connect(gw.host, gw.port)
    attached = _ws_request(ws, "external.attach", {"role": "authority"})
    assert attached["status"] == "ok"
    assert attached["body"]["timeout_seconds"] == 0.4
    _ok(gw, "sim.start", {"rate": "fast"})
    status = _wait_state(gw, {"done", "aborted"})
    assert status["state"] == "aborted"
    assert status["error"] == "external timeout"
    ws.close()


def test_disconnecting_external_subsystem_aborts_the_run(gw):
    _ok(gw, "scenario.load",
        {"scenario": _swap_doc(), "external": ["authority"],
         "external_timeout": 2.0})
    stub = EchoStub(gw.host, gw.port, TOKEN, ("authority",))
    stub.start()
    _ok(gw, "sim.start", {"rate": "fast"})
    limit = time.time() + 60
    while time.time() < limit:  # let the opening approvals finish
        plan = _ok(gw, "plan.query", {"plan_id": "P-D1"})
        if plan.get("state") not in ("pending", "draft", "submitted"):
            break
        time.sleep(0.01)
    _ok(gw, "sim.pause")
    stub.stop()  # drop the bridge mid-run
    # a new submission now needs an approval handshake nobody will answer
    _ok(gw, "plan.submit", {"id": "D9", "origin": "A0",
                            "destination": "A1", "departure": 900})
    _ok(gw, "sim.resume")
    status = _wait_state(gw, {"done", "aborted"})
    assert status["state"] == "aborted"
    assert status["error"] == "external timeout"
