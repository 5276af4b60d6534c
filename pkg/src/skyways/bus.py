"""Topic pub-sub message bus with a simulated lossy network.

Every inter-module message in a run travels through one in-process bus.
Each top-level topic prefix owns a link model (delay, jitter, loss,
bounded queue); the default link is lossless with zero delay, and the
anomaly machinery swaps degraded links in at runtime. All randomness
comes from the stream handed to the bus, so runs replay exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .world import RandomStream, ValidationError

__all__ = [
    "Fate",
    "Envelope",
    "LinkModel",
    "Subscription",
    "MessageBus",
    "topic_matches",
]


class Fate(Enum):
    DELIVERED = "delivered"
    DROPPED_LOSS = "dropped_loss"
    DROPPED_OVERFLOW = "dropped_overflow"


def _check_segments(name: str, allow_wildcard: bool) -> list[str]:
    if not isinstance(name, str) or not name:
        raise ValidationError(f"empty topic: {name!r}")
    parts = name.split("/")
    for i, seg in enumerate(parts):
        if not seg or any(c.isspace() for c in seg):
            raise ValidationError(f"malformed topic segment in {name!r}")
        if "*" in seg:
            if not allow_wildcard or seg != "*" or i != len(parts) - 1:
                raise ValidationError(f"wildcard only allowed as trailing segment: {name!r}")
    return parts


def topic_matches(pattern: str, topic: str) -> bool:
    """Exact per-segment match; a trailing ``*`` matches the whole subtree."""
    pparts = pattern.split("/")
    tparts = topic.split("/")
    if pparts[-1] == "*":
        head = pparts[:-1]
        # subtree match needs at least one segment under the prefix
        return len(tparts) > len(head) and tparts[: len(head)] == head
    return pparts == tparts


@dataclass(frozen=True)
class Envelope:
    """One published message and what the network did with it."""

    topic: str
    payload: object
    publish_tick: int
    deliver_tick: int
    fate: Fate
    sequence: int

    def __post_init__(self):
        if self.deliver_tick < self.publish_tick:
            raise ValidationError("deliver_tick before publish_tick")


@dataclass(frozen=True)
class LinkModel:
    """Network parameters for one topic prefix.

    base_delay and jitter are integer ticks; jitter draws are uniform in
    [0, jitter]. The queue holds messages awaiting service; service_rate
    messages drain per tick and a full queue drops on arrival.
    """

    base_delay: int = 0
    jitter: int = 0
    loss_prob: float = 0.0
    queue_capacity: int = 256
    service_rate: int = 32

    def __post_init__(self):
        if self.base_delay < 0 or self.jitter < 0:
            raise ValidationError("delays must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValidationError("loss_prob outside [0, 1]")
        if self.queue_capacity < 1 or self.service_rate < 1:
            raise ValidationError("queue_capacity and service_rate must be >= 1")


class Subscription:
    """Receives a copy of every delivered envelope matching its pattern."""

    def __init__(self, pattern: str):
        _check_segments(pattern, allow_wildcard=True)
        self.pattern = pattern
        self._inbox: list[Envelope] = []

    def matches(self, topic: str) -> bool:
        return topic_matches(self.pattern, topic)

    def drain(self) -> list[Envelope]:
        """Return envelopes received since the last drain, oldest first."""
        out = self._inbox
        self._inbox = []
        return out

    def __len__(self) -> int:
        return len(self._inbox)


@dataclass
class _LinkState:
    model: LinkModel = field(default_factory=LinkModel)
    # departure ticks of queued messages; entries with depart < now are gone
    departs: list[int] = field(default_factory=list)


class MessageBus:
    """Serialized pub-sub hub; deliveries happen only inside deliver_due.

    Delivery order is total and deterministic: (deliver_tick, topic,
    sequence). Dropped envelopes are recorded in ``drops`` rather than
    vanishing, so loss behaviour is observable in logs and tests.
    """

    def __init__(self, rng: RandomStream | None = None):
        self._rng = rng if rng is not None else RandomStream(0, "bus")
        self._links: dict[str, _LinkState] = {}
        self._pending: list[Envelope] = []
        self._subs: list[Subscription] = []
        self._sequences: dict[str, int] = {}
        self.drops: list[Envelope] = []
        self.published_count = 0
        self.delivered_count = 0

    # -- link management -------------------------------------------------
    def set_link(self, prefix: str, model: LinkModel) -> None:
        _check_segments(prefix, allow_wildcard=False)
        if "/" in prefix:
            raise ValidationError("link prefix is a single top-level segment")
        self._link_state(prefix).model = model

    def get_link(self, prefix: str) -> LinkModel:
        return self._link_state(prefix).model

    def _link_state(self, prefix: str) -> _LinkState:
        st = self._links.get(prefix)
        if st is None:
            st = self._links[prefix] = _LinkState()
        return st

    # -- publish ----------------------------------------------------------
    def publish(self, topic: str, payload, now: int,
                link: LinkModel | None = None,
                rng: RandomStream | None = None) -> Envelope:
        """Run one message through the topic's link; returns its envelope.

        ``link`` and ``rng`` default to the per-prefix link and the bus
        stream; passing them explicitly keeps the operation testable in
        isolation.
        """
        _check_segments(topic, allow_wildcard=False)
        now = int(now)
        state = self._link_state(topic.split("/", 1)[0])
        if link is None:
            link = state.model
        if rng is None:
            rng = self._rng

        seq = self._sequences.get(topic, 0)
        self._sequences[topic] = seq + 1
        self.published_count += 1

        if link.loss_prob > 0.0 and rng.uniform() < link.loss_prob:
            env = Envelope(topic, payload, now, now, Fate.DROPPED_LOSS, seq)
            self.drops.append(env)
            return env

        # queue occupancy: messages not yet past their departure tick
        departs = [t for t in state.departs if t >= now]
        if len(departs) >= link.queue_capacity:
            state.departs = departs
            env = Envelope(topic, payload, now, now, Fate.DROPPED_OVERFLOW, seq)
            self.drops.append(env)
            return env

        wait = math.ceil(len(departs) / link.service_rate)
        jitter = int(rng.integers(0, link.jitter)) if link.jitter > 0 else 0
        departs.append(now + wait)
        state.departs = departs

        env = Envelope(topic, payload, now, now + wait + link.base_delay + jitter,
                       Fate.DELIVERED, seq)
        self._pending.append(env)
        return env

    # -- delivery ---------------------------------------------------------
    def deliver_due(self, now: int) -> list[Envelope]:
        """Deliver every envelope due by ``now``, exactly once, in order."""
        now = int(now)
        due = [e for e in self._pending if e.deliver_tick <= now]
        if not due:
            return []
        self._pending = [e for e in self._pending if e.deliver_tick > now]
        due.sort(key=lambda e: (e.deliver_tick, e.topic, e.sequence))
        for env in due:
            for sub in self._subs:
                if sub.matches(env.topic):
                    sub._inbox.append(env)
        self.delivered_count += len(due)
        return due

    # -- subscriptions ----------------------------------------------------
    def subscribe(self, pattern: str) -> Subscription:
        sub = Subscription(pattern)
        self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        if sub in self._subs:
            self._subs.remove(sub)

    # -- observability ----------------------------------------------------
    def stats(self) -> dict:
        n_loss = sum(1 for e in self.drops if e.fate is Fate.DROPPED_LOSS)
        return {
            "published": self.published_count,
            "delivered": self.delivered_count,
            "pending": len(self._pending),
            "dropped_loss": n_loss,
            "dropped_overflow": len(self.drops) - n_loss,
        }
