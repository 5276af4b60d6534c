"""Reference external subsystems speaking the gateway bridge protocol.

The echo stub attaches over a websocket and answers every per-tick
handshake instantly: plan submissions are approved at their requested
departure (never earlier than the next tick) and command handshakes
return the planned setpoints untouched. Attached in place of a built-in
subsystem it must leave run results byte-identical, which makes it both
the conformance reference for real external systems and the oracle for
the bridge itself.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import threading

from . import websocket
from .gateway import TOKEN_ENV_VAR


def answer_handshake(obj: dict) -> dict:
    """The echo reply for one handshake message."""
    role = obj.get("role")
    if role == "authority":
        tick = int(obj.get("tick", 0))
        decisions = [
            {"plan_id": s["plan_id"], "verdict": "approved", "reason": None,
             "assigned_departure": max(int(s["requested_departure"]), tick + 1),
             "retry_tick": None}
            for s in obj.get("submissions", [])
        ]
        return {"handshake": obj["handshake"], "decisions": decisions}
    if role == "traffic-management":
        return {"handshake": obj["handshake"],
                "setpoints": obj.get("setpoints", {})}
    raise ValueError(f"handshake for unknown role {role!r}")


class EchoStub:
    """Connects, attaches the given roles, then echoes handshakes.

    ``start`` returns only after every attach is acknowledged, so a
    caller can start the run knowing the bridge is in place.
    """

    def __init__(self, host: str, port: int, token: str,
                 roles: tuple[str, ...] = ("authority",), path: str = "/ws"):
        self.host = host
        self.port = port
        self.token = token
        self.roles = tuple(roles)
        self.path = path
        self.handshakes = 0
        self._ws: websocket.WsSocket | None = None
        self._thread: threading.Thread | None = None
        self._stop = False

    def start(self) -> None:
        ws = websocket.connect(self.host, self.port, self.path)
        self._ws = ws
        pending = set()
        for role in self.roles:
            rid = f"attach-{role}"
            pending.add(rid)
            ws.send_text(json.dumps({
                "id": rid, "verb": "external.attach", "token": self.token,
                "body": {"role": role}}))
        while pending:
            text = ws.recv_text(timeout=10.0)
            if text is None:
                raise RuntimeError("gateway closed during attach")
            obj = json.loads(text)
            rid = obj.get("id")
            if rid in pending:
                if obj.get("status") != "ok":
                    raise RuntimeError(f"attach refused: {obj.get('error')}")
                pending.discard(rid)
        self._thread = threading.Thread(target=self._loop,
                                        name="skyways-echo", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        ws = self._ws
        while not self._stop:
            try:
                text = ws.recv_text(timeout=0.5)
            except TimeoutError:
                continue
            except websocket.WsError:
                return
            if text is None:
                return
            try:
                obj = json.loads(text)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict) and "handshake" in obj:
                try:
                    reply = answer_handshake(obj)
                except (KeyError, TypeError, ValueError):
                    continue
                self.handshakes += 1
                try:
                    ws.send_text(json.dumps(reply))
                except websocket.WsError:
                    return

    def stop(self) -> None:
        self._stop = True
        if self._ws is not None:
            self._ws.close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="skyways-extstub",
        description="Attach echo external subsystems to a running gateway.")
    parser.add_argument("--connect", required=True, metavar="HOST:PORT",
                        help="gateway address")
    parser.add_argument("--role", action="append", default=None,
                        choices=["authority", "traffic-management"],
                        help="role to attach (repeatable; default authority)")
    parser.add_argument("--token", default=None,
                        help=f"auth token (default ${TOKEN_ENV_VAR})")
    args = parser.parse_args(argv)

    host, _, port = args.connect.rpartition(":")
    if not host or not port.isdigit():
        print("--connect must look like HOST:PORT", file=sys.stderr)
        return 2
    token = args.token if args.token is not None else os.environ.get(TOKEN_ENV_VAR)
    if not token:
        print(f"no token: pass --token or set {TOKEN_ENV_VAR}", file=sys.stderr)
        return 2
    roles = tuple(args.role) if args.role else ("authority",)

    stub = EchoStub(host, int(port), token, roles)
    try:
        stub.start()
    except (OSError, RuntimeError, websocket.WsError) as exc:
        print(f"attach failed: {exc}", file=sys.stderr)
        return 1
    print(f"attached {', '.join(roles)} to {args.connect}; echoing")
    try:
        while stub._thread.is_alive():
            stub._thread.join(timeout=1.0)
    except KeyboardInterrupt:
        pass
    finally:
        stub.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
