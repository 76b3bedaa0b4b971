"""Deterministic discrete-event simulator of the ad-hoc communication network.

Pairwise link initiation is range-gated and rate-limited; every event draws its
outcome (two-sided success, one-sided delivery, or failure) once at initiation
from a seeded stream consumed in pair-sorted order, so a seed plus a position
stream reproduces the event log exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_GENERALS_RATE = 0.05


@dataclass
class NetworkConfig:
    rc: float = 1.0  # initiation rate, events per step per in-range pair
    dc: float = 30.0  # max range, meters
    pc: float = 0.9  # success probability
    bc: int = 0  # completion delay, steps
    two_generals_rate: float = TWO_GENERALS_RATE
    seed: int = 0
    multi_parallel: bool = False  # allow one in-flight comm per pair instead of per robot

    def __post_init__(self):
        if min(self.rc, self.dc, self.bc) < 0:
            raise ValueError("rates, ranges and delays must be nonnegative")
        if not (0.0 <= self.pc <= 1.0 and 0.0 <= self.two_generals_rate <= 1.0):
            raise ValueError("probabilities must be in [0, 1]")

    @classmethod
    def parse(cls, text, **overrides):
        """Parse 'rc=1,dc=30,pc=0.9' style strings."""
        kw = dict(overrides)
        if text:
            for part in text.split(","):
                key, val = part.split("=")
                key = key.strip()
                if key in ("bc", "seed"):
                    kw[key] = int(val)
                elif key == "multi_parallel":
                    kw[key] = val.strip().lower() in ("1", "true", "yes")
                else:
                    kw[key] = float(val)
        return cls(**kw)


@dataclass
class CommEvent:
    pair: tuple  # (i, j) with i < j
    t_init: int
    t_done: int
    outcome: str  # 'success' | 'fail' | 'one_sided'
    receiver: int | None = None  # delivery side for one_sided
    payload_bytes: int = 0

    def delivered_to(self):
        if self.outcome == "success":
            return self.pair
        if self.outcome == "one_sided":
            return (self.receiver,)
        return ()


class NetworkSim:
    """Owns the event clock; step() initiates, completed() delivers."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.in_flight = []
        self.log = []

    def _busy_parties(self):
        busy = set()
        for ev in self.in_flight:
            busy.update(ev.pair)
        return busy

    def _busy_pairs(self):
        return {ev.pair for ev in self.in_flight}

    def step(self, t, positions) -> list:
        """Initiate events at step t given per-robot positions (dict id -> xy[z]).

        Draws consume the seeded stream in pair-sorted order for determinism.
        """
        cfg = self.config
        started = []
        busy_parties = self._busy_parties()
        busy_pairs = self._busy_pairs()
        p_init = min(cfg.rc, 1.0)
        ids = sorted(positions)
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                if np.linalg.norm(np.asarray(positions[i]) - np.asarray(positions[j])) > cfg.dc:
                    continue
                if cfg.multi_parallel:
                    if (i, j) in busy_pairs:
                        continue
                elif i in busy_parties or j in busy_parties:
                    continue
                if self.rng.random() >= p_init:
                    continue
                if self.rng.random() < cfg.pc:
                    if self.rng.random() < cfg.two_generals_rate:
                        receiver = i if self.rng.random() < 0.5 else j
                        ev = CommEvent((i, j), t, t + cfg.bc, "one_sided", receiver)
                    else:
                        ev = CommEvent((i, j), t, t + cfg.bc, "success")
                else:
                    ev = CommEvent((i, j), t, t + cfg.bc, "fail")
                self.in_flight.append(ev)
                busy_parties.update(ev.pair)
                busy_pairs.add(ev.pair)
                started.append(ev)
        return started

    def completed(self, t) -> list:
        """Events due at step t, removed from flight and appended to the log."""
        due = [ev for ev in self.in_flight if ev.t_done <= t]
        self.in_flight = [ev for ev in self.in_flight if ev.t_done > t]
        due.sort(key=lambda ev: (ev.t_init, ev.pair))
        self.log.extend(due)
        return due

    def log_lines(self):
        """Tab-separated event log: step_init, step_done, i, j, outcome, payload_bytes."""
        out = []
        for ev in self.log:
            outcome = ev.outcome if ev.outcome != "one_sided" else f"one_sided:{ev.receiver}"
            out.append(
                f"{ev.t_init}\t{ev.t_done}\t{ev.pair[0]}\t{ev.pair[1]}\t{outcome}\t{ev.payload_bytes}"
            )
        return out
