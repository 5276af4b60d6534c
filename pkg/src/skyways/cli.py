"""Command-line front end: validate, run headless, benchmark, or serve.

Exit codes: 0 clean completion, 1 run error (engine abort or interrupt),
2 unreadable or invalid scenario / bad arguments.
"""

from __future__ import annotations

import argparse
import json
import secrets
import sys
import time
from pathlib import Path

from .engine import EngineAbort, SimEngine
from .gateway import TOKEN_ENV_VAR, Gateway, token_from_env
from .scenario import ScenarioError, load_scenario, validate_scenario


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skyways",
        description="Deterministic low-altitude UAV traffic simulator.")
    parser.add_argument("scenario", nargs="?", help="scenario JSON file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario's seed")
    parser.add_argument("--until", type=int, default=None,
                        help="stop after this many ticks")
    parser.add_argument("--headless", action="store_true",
                        help="run to completion without a gateway (default)")
    parser.add_argument("--serve", metavar="ADDR", default=None,
                        help="serve the gateway on HOST:PORT (or :PORT)")
    parser.add_argument("--bench", action="store_true",
                        help="performance mode: run and print ticks/sec")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="write telemetry/event/report logs to DIR")
    parser.add_argument("--validate", action="store_true",
                        help="validate the scenario and exit")
    return parser


def _read_doc(path: str) -> dict:
    """Scenario file as a raw document; raises ScenarioError on any problem."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError([f"cannot read {path}: {exc}"]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path} is not valid JSON: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ScenarioError([f"{path} must contain a JSON object"])
    return doc


def _fail_invalid(violations: list[str]) -> int:
    for violation in violations:
        print(f"scenario: {violation}", file=sys.stderr)
    return 2


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"serve address must be HOST:PORT or :PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _serve(args, doc: dict | None) -> int:
    try:
        host, port = _parse_addr(args.serve)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    token = token_from_env()
    if token is None:
        token = secrets.token_urlsafe(16)
        print(f"{TOKEN_ENV_VAR} not set; generated auth token: {token}",
              file=sys.stderr)
    gateway = Gateway(host, port, token=token, out_dir=args.out)
    gateway.start()
    if doc is not None:
        response = gateway.handle({"id": "cli-load", "verb": "scenario.load",
                                   "token": token, "body": {"scenario": doc}})
        if response["status"] != "ok":
            print(response["error"]["message"], file=sys.stderr)
            gateway.stop()
            return 2
        loaded = response["body"]
        print(f"loaded {loaded['map']} (seed {loaded['seed']}, "
              f"{loaded['demands']} demands)")
    print(f"gateway listening on {gateway.host}:{gateway.port}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
    finally:
        gateway.stop()
    return 0


def _run_bench(engine: SimEngine, until: int | None, fleet_size: int) -> int:
    """Throughput measurement in fixed tick windows.

    The whole-run average flatters the quiet spin-up and wind-down phases,
    so the busiest window (most vehicles alive at once) is reported
    separately; that is the number that matters for capacity planning.
    """
    window = 300
    samples: list[tuple[int, int, float]] = []  # (peak active, ticks, secs)
    started = time.perf_counter()
    error = None
    try:
        while not engine.done():
            if until is not None and engine.clock.tick >= until:
                break
            peak = len(engine.states)
            n = 0
            w0 = time.perf_counter()
            while n < window and not engine.done():
                if until is not None and engine.clock.tick >= until:
                    break
                engine.step()
                if len(engine.states) > peak:
                    peak = len(engine.states)
                n += 1
            if n:
                samples.append((peak, n, time.perf_counter() - w0))
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except EngineAbort as exc:
        error = str(exc)
    report = engine.finalize(time.perf_counter() - started, error)
    print(f"ticks/sec: {report.ticks_per_second:.1f}")
    if samples:
        top = max(peak for peak, _, _ in samples)
        ticks = sum(n for peak, n, _ in samples if peak == top)
        secs = sum(s for peak, _, s in samples if peak == top)
        rate = ticks / secs if secs > 0.0 else float("inf")
        print(f"busiest window: {top} active, {rate:.1f} ticks/sec "
              f"over {ticks} ticks")
    print(f"ticks={report.ticks} wall={report.wall_seconds:.2f}s "
          f"uavs={fleet_size}")
    if report.error is not None:
        print(f"error: {report.error}", file=sys.stderr)
        return 1
    return 0


def _run(args, doc: dict) -> int:
    try:
        scenario = load_scenario(doc)
    except ScenarioError as exc:
        return _fail_invalid(exc.violations)
    engine = SimEngine(scenario, out_dir=args.out)
    if args.bench:
        return _run_bench(engine, args.until, len(scenario.fleet))
    try:
        report = engine.run(until=args.until)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    counts = report.counts
    print(f"ticks={report.ticks} completed={counts['completed']}/"
          f"{counts['total']} aborted={counts['aborted']} "
          f"active={counts['active']} collisions={len(report.collisions)} "
          f"wall={report.wall_seconds:.2f}s")
    if report.log_dir is not None:
        print(f"logs: {report.log_dir}")
    if report.error is not None:
        print(f"error: {report.error}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.scenario is None and not args.serve:
        parser.error("a scenario file is required unless --serve is given")

    doc = None
    if args.scenario is not None:
        try:
            doc = _read_doc(args.scenario)
        except ScenarioError as exc:
            return _fail_invalid(exc.violations)
        if args.seed is not None:
            doc = {**doc, "seed": args.seed}
        violations = validate_scenario(doc)
        if violations:
            return _fail_invalid(violations)

    if args.validate:
        return 0

    if args.serve:
        return _serve(args, doc)

    return _run(args, doc)


if __name__ == "__main__":
    raise SystemExit(main())
