import hashlib

import numpy as np
import pytest

from cslam.netsim import TWO_GENERALS_RATE, CommEvent, NetworkConfig, NetworkSim


def run_sim(cfg, steps, positions_fn, n_robots=2):
    sim = NetworkSim(cfg)
    for t in range(steps):
        pos = positions_fn(t)
        sim.step(t, pos)
        sim.completed(t)
    return sim


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert cfg.rc == 1.0 and cfg.dc == 30.0 and cfg.pc == 0.9
        assert cfg.two_generals_rate == TWO_GENERALS_RATE == 0.05

    def test_parse(self):
        cfg = NetworkConfig.parse("rc=1,dc=30,pc=0.9", seed=7)
        assert (cfg.rc, cfg.dc, cfg.pc, cfg.seed) == (1.0, 30.0, 0.9, 7)

    def test_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(pc=1.5)
        with pytest.raises(ValueError):
            NetworkConfig(dc=-1)


class TestGating:
    def test_out_of_range_no_event(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=1.0, seed=0)
        sim = NetworkSim(cfg)
        started = sim.step(0, {0: np.array([0.0, 0.0]), 1: np.array([40.0, 0.0])})
        assert started == []

    def test_immediate_two_sided_when_perfect(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=1.0, bc=0, two_generals_rate=0.0, seed=0)
        sim = NetworkSim(cfg)
        started = sim.step(0, {0: np.zeros(2), 1: np.array([5.0, 0.0])})
        assert len(started) == 1
        done = sim.completed(0)
        assert len(done) == 1 and done[0].outcome == "success"
        assert done[0].delivered_to() == (0, 1)

    def test_single_in_flight_per_robot(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=1.0, bc=5, seed=0)
        sim = NetworkSim(cfg)
        pos = {i: np.array([float(i), 0.0]) for i in range(3)}
        started = sim.step(0, pos)
        busy = set()
        for ev in started:
            assert not busy & set(ev.pair)
            busy.update(ev.pair)
        # while in flight, busy robots cannot start another
        started2 = sim.step(1, pos)
        for ev in started2:
            assert not busy & set(ev.pair)

    def test_multi_parallel_allows_per_pair(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=1.0, bc=5, seed=0, multi_parallel=True)
        sim = NetworkSim(cfg)
        pos = {i: np.array([float(i), 0.0]) for i in range(4)}
        started = sim.step(0, pos)
        assert len(started) == 6  # all pairs
        assert len(sim.step(1, pos)) == 0  # each pair still busy
        sim.completed(5)
        assert len(sim.step(6, pos)) == 6

    def test_no_overlapping_events_per_pair(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=0.8, bc=3, seed=3, multi_parallel=True)
        sim = NetworkSim(cfg)
        pos = {i: np.array([float(i), 0.0]) for i in range(4)}
        for t in range(200):
            sim.step(t, pos)
            in_flight_pairs = [ev.pair for ev in sim.in_flight]
            assert len(in_flight_pairs) == len(set(in_flight_pairs))
            sim.completed(t)

    def test_delayed_completion(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=1.0, bc=2, two_generals_rate=0.0, seed=0)
        sim = NetworkSim(cfg)
        sim.step(0, {0: np.zeros(2), 1: np.ones(2)})
        assert sim.completed(0) == [] and sim.completed(1) == []
        done = sim.completed(2)
        assert len(done) == 1 and done[0].t_init == 0 and done[0].t_done == 2


class TestOutcomes:
    def test_frequencies(self):
        # two-sided ~ pc*0.95, one-sided ~ pc*0.05, failed ~ 1-pc, each +/- 2 pts
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=0.9, bc=0, seed=42)
        sim = NetworkSim(cfg)
        pos = {0: np.zeros(2), 1: np.ones(2)}
        n = 20_000
        for t in range(n):
            sim.step(t, pos)
            sim.completed(t)
        counts = {"success": 0, "one_sided": 0, "fail": 0}
        for ev in sim.log:
            counts[ev.outcome] += 1
        total = len(sim.log)
        assert total > 10_000
        assert abs(counts["success"] / total - 0.9 * 0.95) < 0.02
        assert abs(counts["one_sided"] / total - 0.9 * 0.05) < 0.02
        assert abs(counts["fail"] / total - 0.1) < 0.02

    def test_one_sided_receiver_fair(self):
        cfg = NetworkConfig(rc=1.0, dc=30.0, pc=1.0, bc=0, two_generals_rate=1.0, seed=1)
        sim = NetworkSim(cfg)
        pos = {0: np.zeros(2), 1: np.ones(2)}
        for t in range(4000):
            sim.step(t, pos)
            sim.completed(t)
        recv0 = sum(1 for ev in sim.log if ev.receiver == 0)
        assert 0.45 < recv0 / len(sim.log) < 0.55
        for ev in sim.log:
            assert ev.delivered_to() in ((0,), (1,))

    def test_fail_delivers_nobody(self):
        ev = CommEvent((0, 1), 0, 0, "fail")
        assert ev.delivered_to() == ()


class TestDeterminism:
    def positions(self, t):
        rng = np.random.default_rng(1000 + t)
        return {i: rng.uniform(0, 40, size=2) for i in range(4)}

    def test_identical_seed_identical_log(self):
        cfg = NetworkConfig(rc=0.7, dc=30.0, pc=0.8, bc=1, seed=9)
        sims = [run_sim(cfg, 300, self.positions) for _ in range(2)]
        logs = ["\n".join(s.log_lines()) for s in sims]
        assert logs[0] == logs[1]
        h = [hashlib.sha256(l.encode()).hexdigest() for l in logs]
        assert h[0] == h[1]

    def test_different_seed_differs(self):
        a = run_sim(NetworkConfig(rc=0.7, pc=0.8, seed=1), 200, self.positions)
        b = run_sim(NetworkConfig(rc=0.7, pc=0.8, seed=2), 200, self.positions)
        assert "\n".join(a.log_lines()) != "\n".join(b.log_lines())
