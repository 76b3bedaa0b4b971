"""Experiment orchestration: drives methods and baselines over datasets with a
simulated network, records per-step estimates and classifications, and emits
metric reports.

Methods: rimesa (graduated kernels + robust consensus), kimesa (fixed
Geman-McClure kernels in place of graduated ones), imesa (kernel-free consensus
with oracle outlier filtering), independent (local-only), mesa_plus (batch
consensus at the end of the run), centralized_oracle (joint batch solves with
oracle outlier filtering), centralized_gnc (joint continuation solves).
"""
from __future__ import annotations

import queue
import threading
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import factors as fa
from . import manifold as mf
from .agent import Agent, AgentConfig, exchange, initial_estimate_for
from .consensus import BETA_INIT, BETA_UNINIT, DUAL_DECAY, MesaPlus, round_robin
from .data import Dataset, ScenarioConfig, generate, load
from .factors import (
    between_factor,
    bearing_range_factor,
    chi2_threshold,
    landmark_factor,
    pose_key,
    prior_factor,
    range_factor,
)
from .metrics import MetricReport, SolutionHistory, summarize
from .netsim import NetworkConfig, NetworkSim
from .solver import FactorGraph, SolverConfig, Values, optimize_batch, optimize_gnc

METHODS = (
    "rimesa", "kimesa", "imesa", "mesa_plus",
    "independent", "centralized_oracle", "centralized_gnc",
)

ANCHOR_SIGMA = 1e-4
INDEPENDENT_GM_C = 3.0
KIMESA_GM_C = 6.0


@dataclass
class MethodSpec:
    name: str
    gm_c: float = 0.0  # 0 -> per-method default
    decay: float = DUAL_DECAY
    beta_uninit: float = BETA_UNINIT
    beta_init: float = BETA_INIT
    alpha: float = 1.0  # penalty scaling (batch consensus only)
    mesa_iterations: int = 300
    mesa_tol: float = 1e-4
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; choose from {METHODS}")
        if self.gm_c == 0.0:
            self.gm_c = KIMESA_GM_C if self.name == "kimesa" else INDEPENDENT_GM_C

    @property
    def oracle_filtered(self):
        return self.name in ("imesa", "mesa_plus", "centralized_oracle")

    @property
    def uses_network(self):
        return self.name in ("rimesa", "kimesa", "imesa")

    def measurement_kernel(self, dim):
        """Robust kernel applied to outlier-candidate measurements."""
        if self.name in ("rimesa", "centralized_gnc"):
            return fa.graduated(1.0, fa.graduated_shape(dim))
        if self.name in ("kimesa", "independent"):
            return fa.geman_mcclure(self.gm_c)
        return fa.NONE_KERNEL

    def classification_rule(self):
        if self.oracle_filtered:
            return "oracle"
        if self.name == "rimesa":
            return "influence"
        return "chi2"

    def agent_config(self):
        rwbp = {"rimesa": "graduated", "kimesa": "geman_mcclure"}.get(self.name, "none")
        return AgentConfig(
            beta_uninit=self.beta_uninit, beta_init=self.beta_init,
            dual_decay=self.decay, rwbp_kernel=rwbp, gm_c=self.gm_c,
            solver=self.solver,
        )


@dataclass
class RunConfig:
    dataset: object  # path, ScenarioConfig, or Dataset
    methods: list
    net: NetworkConfig = field(default_factory=NetworkConfig)
    out_dir: str | None = None
    record_history: bool = True
    history_every: int = 1
    seed: int = 0
    threaded: bool = False


def method_seed(base, name):
    return (int(base) * 65536 + zlib.crc32(name.encode())) % (2**63)


def measurement_factor(m, dim, spec: MethodSpec):
    """Dataset measurement -> factor with the method's kernel policy."""
    kern = spec.measurement_kernel
    if m.kind == "odom":
        return between_factor(m.key_a, m.key_b, m.payload, m.sigmas, dim=dim)
    if m.kind in ("intra", "indirect", "direct_pose"):
        return between_factor(
            m.key_a, m.key_b, m.payload, m.sigmas, dim=dim,
            kernel=kern(mf.tangent_dim(dim)), outlier_candidate=True,
        )
    if m.kind == "direct_range":
        return range_factor(
            m.key_a, m.key_b, m.payload[0], m.sigmas[0], dim=dim,
            kernel=kern(1), outlier_candidate=True,
        )
    if m.kind == "direct_br":
        return bearing_range_factor(
            m.key_a, m.key_b, m.payload[0], m.payload[1], m.sigmas, dim=dim,
            kernel=kern(2), outlier_candidate=True,
        )
    if m.kind == "landmark":
        return landmark_factor(
            m.key_a, m.key_b, m.payload, m.sigmas, dim=dim,
            kernel=kern(dim), outlier_candidate=True,
        )
    raise ValueError(f"unknown measurement kind {m.kind!r}")


def _anchor(dataset, robot):
    p = mf.tangent_dim(dataset.dim)
    return prior_factor(
        pose_key(robot, 0), dataset.gt_pose(robot, 0), [ANCHOR_SIGMA] * p, dim=dataset.dim
    )


def _heading(raw, dim):
    if dim == 2:
        return float(raw[0])
    return None


class MethodFailure(RuntimeError):
    pass


class BaseRunner:
    uses_network = False
    provides_incremental = True  # has a meaningful estimate at every step

    def __init__(self, spec: MethodSpec, dataset: Dataset):
        self.spec = spec
        self.dataset = dataset
        self.dim = dataset.dim
        self.fed = []  # (uid, locator) for classification
        self.labels = {}

    def update(self, robot, measurements):
        raise NotImplementedError

    def end_step(self, t):
        pass

    def finalize(self):
        pass

    def classifications(self):
        raise NotImplementedError


class DistributedRunner(BaseRunner):
    """One Agent per robot; communication via snapshot exchange."""

    def __init__(self, spec, dataset):
        super().__init__(spec, dataset)
        self.uses_network = spec.uses_network
        self.agents = {}
        for r in dataset.robots:
            agent = Agent(r, dataset.dim, spec.agent_config())
            agent.update([_anchor(dataset, r)], {pose_key(r, 0): dataset.gt_pose(r, 0)})
            self.agents[r] = agent

    def _skip(self, m):
        if not m.inlier and self.spec.oracle_filtered:
            return "oracle_drop"
        if self.spec.name == "independent" and m.key_b is not None:
            if m.key_b.owner not in (m.robot, fa.ENV_OWNER):
                return "no_collaboration"
        return None

    def update(self, robot, measurements):
        agent = self.agents[robot]
        factors, inits = [], {}
        for m in measurements:
            skip = self._skip(m)
            if skip == "oracle_drop":
                continue  # classification handled by the oracle rule
            if skip == "no_collaboration":
                continue  # independent never ingests inter-robot information
            f = measurement_factor(m, self.dim, self.spec)
            view = dict(inits)
            for k in agent.values:
                view[k] = agent.values[k]
            new = initial_estimate_for(f, view, self.dim)
            inits.update(new)
            factors.append(f)
            if m.is_loop:
                self.fed.append((m.uid, robot, f))
        agent.update(factors, inits)

    def snapshot(self, i, j):
        return self.snapshot_one(i, j), self.snapshot_one(j, i)

    def snapshot_one(self, owner, other):
        return self.agents[owner].begin_communication(other)

    def incorporate(self, result):
        self.agents[result.agent_id].incorporate(result)

    def estimates(self):
        trans, rots = {}, {}
        for r, agent in self.agents.items():
            for k in agent.values:
                if k.kind == "p" and k.owner == r:
                    raw = agent.values[k]
                    trans[k] = (raw[1:3] if self.dim == 2 else raw[4:7]).copy()
                    h = _heading(raw, self.dim)
                    if h is not None:
                        rots[k] = h
        return trans, rots

    def classifications(self):
        rule = self.spec.classification_rule()
        if rule == "oracle":
            return dict(self.labels)
        out = {}
        for uid, robot, f in self.fed:
            agent = self.agents[robot]
            r = fa.residual(f, agent.values)
            s = float(r @ r)
            if rule == "influence":
                out[uid] = fa.kernel_influence(f.kernel, s, mu=1.0) >= 0.5
            else:
                out[uid] = s < chi2_threshold(len(r), 0.95)
        return out


class CentralizedRunner(BaseRunner):
    """Single joint graph; batch (or continuation) re-solve on loop arrivals,
    warm-started from the previous solution; odometry steps are appended
    without re-optimization."""

    def __init__(self, spec, dataset):
        super().__init__(spec, dataset)
        self.graph = FactorGraph()
        self.values = Values(dataset.dim)
        self.pending_solve = False
        self.fed_idx = []
        for r in dataset.robots:
            self.graph.add(_anchor(dataset, r))
            self.values[pose_key(r, 0)] = dataset.gt_pose(r, 0)

    def update(self, robot, measurements):
        for m in measurements:
            if not m.inlier and self.spec.oracle_filtered:
                continue
            f = measurement_factor(m, self.dim, self.spec)
            for k, v in initial_estimate_for(f, self.values, self.dim).items():
                self.values[k] = v
            idx = self.graph.add(f)
            if m.is_loop:
                self.pending_solve = True
                self.fed_idx.append((m.uid, idx))

    def end_step(self, t):
        if not self.pending_solve:
            return
        self.pending_solve = False
        if self.spec.name == "centralized_gnc":
            self.values, _ = optimize_gnc(self.graph, self.values, self.spec.solver)
        else:
            self.values = optimize_batch(self.graph, self.values, self.spec.solver)

    def estimates(self):
        trans, rots = {}, {}
        for k in self.values:
            if k.kind == "p":
                raw = self.values[k]
                trans[k] = (raw[1:3] if self.dim == 2 else raw[4:7]).copy()
                h = _heading(raw, self.dim)
                if h is not None:
                    rots[k] = h
        return trans, rots

    def classifications(self):
        if self.spec.classification_rule() == "oracle":
            return dict(self.labels)
        out = {}
        for uid, idx in self.fed_idx:
            f = self.graph.factors[idx]
            r = fa.residual(f, self.values)
            s = float(r @ r)
            out[uid] = s < chi2_threshold(len(r), 0.95)
        return out


class MesaPlusRunner(BaseRunner):
    """Accumulates per-robot graphs during the run and solves once at the end
    with the batch pairwise-consensus algorithm."""

    provides_incremental = False

    def __init__(self, spec, dataset):
        super().__init__(spec, dataset)
        self.graphs = {r: FactorGraph() for r in dataset.robots}
        self.inits = {r: Values(dataset.dim) for r in dataset.robots}
        self.session = None
        for r in dataset.robots:
            self.graphs[r].add(_anchor(dataset, r))
            self.inits[r][pose_key(r, 0)] = dataset.gt_pose(r, 0)

    def update(self, robot, measurements):
        for m in measurements:
            if not m.inlier and self.spec.oracle_filtered:
                continue
            f = measurement_factor(m, self.dim, self.spec)
            for k, v in initial_estimate_for(f, self.inits[robot], self.dim).items():
                self.inits[robot][k] = v
            self.graphs[robot].add(f)

    def finalize(self):
        problems = {r: (self.graphs[r], self.inits[r]) for r in self.dataset.robots}
        self.session = MesaPlus(
            problems, alpha=self.spec.alpha, beta0=self.spec.beta_init,
            tol=self.spec.mesa_tol, solver_config=self.spec.solver,
        )
        schedule = round_robin(self.session.pairs(), self.spec.mesa_iterations)
        self.session.run(schedule)

    def estimates(self):
        trans, rots = {}, {}
        for r in self.dataset.robots:
            vals = self.session.values[r] if self.session else self.inits[r]
            for k in vals:
                if k.kind == "p" and k.owner == r:
                    raw = vals[k]
                    trans[k] = (raw[1:3] if self.dim == 2 else raw[4:7]).copy()
                    h = _heading(raw, self.dim)
                    if h is not None:
                        rots[k] = h
        return trans, rots

    def classifications(self):
        return dict(self.labels)


def make_runner(spec: MethodSpec, dataset: Dataset) -> BaseRunner:
    if spec.name in ("rimesa", "kimesa", "imesa", "independent"):
        return DistributedRunner(spec, dataset)
    if spec.name in ("centralized_oracle", "centralized_gnc"):
        return CentralizedRunner(spec, dataset)
    return MesaPlusRunner(spec, dataset)


def dataset_labels(dataset: Dataset):
    return {m.uid: m.inlier for m in dataset.loop_measurements()}


class _RobotWorker:
    """Serializes all operations of one robot on a dedicated thread."""

    def __init__(self):
        self.q = queue.Queue()
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self):
        while True:
            item = self.q.get()
            if item is None:
                return
            fn, done, box = item
            try:
                box.append(fn())
            except BaseException as exc:  # surfaced at join
                box.append(exc)
            done.set()

    def submit(self, fn):
        done = threading.Event()
        box = []
        self.q.put((fn, done, box))
        return done, box

    def stop(self):
        self.q.put(None)
        self.thread.join(timeout=5)


def _join(handles):
    for done, box in handles:
        done.wait()
        if box and isinstance(box[0], BaseException):
            raise box[0]


def run_method(spec: MethodSpec, dataset: Dataset, net_cfg: NetworkConfig,
               record_history=True, history_every=1, seed=0,
               threaded=False, net_hook=None) -> tuple:
    """Run one method over a dataset; returns (MetricReport, NetworkSim|None).

    `net_hook(event)` may rewrite event outcomes (directed failure tests).
    """
    runner = make_runner(spec, dataset)
    runner.labels = dataset_labels(dataset)
    net = None
    if runner.uses_network:
        net = NetworkSim(replace(net_cfg, seed=method_seed(seed, spec.name)))
    hist = SolutionHistory()
    pending = {}
    length = dataset.length
    workers = {}
    handler_pool = None
    if threaded:
        workers = {r: _RobotWorker() for r in dataset.robots}
        import concurrent.futures

        handler_pool = concurrent.futures.ThreadPoolExecutor(max_workers=4)
    update_ms_all = []
    update_ms_series = []
    try:
        for t in range(length):
            step_ms = []
            if threaded:
                handles = []
                for r in sorted(dataset.robots):
                    ms = dataset.measurements_at(r, t)

                    def task(r=r, ms=ms):
                        t0 = time.perf_counter()
                        runner.update(r, ms)
                        return (time.perf_counter() - t0) * 1e3
                    handles.append(workers[r].submit(task))
                _join(handles)
                step_ms = [box[0] for _, box in handles]
            else:
                for r in sorted(dataset.robots):
                    t0 = time.perf_counter()
                    runner.update(r, dataset.measurements_at(r, t))
                    step_ms.append((time.perf_counter() - t0) * 1e3)
            runner.end_step(t)
            if net is not None:
                for ev in net.step(t, dataset.gt_positions(t)):
                    if net_hook is not None:
                        net_hook(ev)
                    i, j = ev.pair
                    if threaded:
                        hi, _ = workers[i].submit(lambda i=i, j=j: self_snap(runner, i, j))
                        # snapshots must come from each robot's serialized thread
                        hj, _ = None, None
                    pending[(ev.pair, ev.t_init)] = runner.snapshot(i, j)
                for ev in net.completed(t):
                    snaps = pending.pop((ev.pair, ev.t_init))
                    if ev.outcome == "fail":
                        continue
                    res_i, res_j = (
                        handler_pool.submit(exchange, *snaps).result()
                        if handler_pool is not None
                        else exchange(*snaps)
                    )
                    ev.payload_bytes = res_i.payload_bytes
                    deliver = ev.delivered_to()
                    for res in (res_i, res_j):
                        if res.agent_id in deliver:
                            if threaded:
                                _join([workers[res.agent_id].submit(
                                    lambda res=res: runner.incorporate(res))])
                            else:
                                runner.incorporate(res)
            update_ms_all.extend(step_ms)
            update_ms_series.append(float(np.mean(step_ms)) if step_ms else 0.0)
            step = t + 1
            if record_history and (step % history_every == 0 or step == length):
                trans, rots = runner.estimates()
                hist.record(step, trans, rots, runner.classifications())
        runner.finalize()
        if not record_history:
            trans, rots = runner.estimates()
            hist.record(length, trans, rots, runner.classifications())
        elif isinstance(runner, MesaPlusRunner):
            trans, rots = runner.estimates()
            hist.record(length + 1, trans, rots, runner.classifications())
    finally:
        for w in workers.values():
            w.stop()
        if handler_pool is not None:
            handler_pool.shutdown(wait=False)

    gt_trans, gt_rots = {}, {}
    for r in dataset.robots:
        for i, raw in enumerate(dataset.gt[r]):
            k = pose_key(r, i)
            gt_trans[k] = raw[1:3] if dataset.dim == 2 else raw[4:7]
            h = _heading(raw, dataset.dim)
            if h is not None:
                gt_rots[k] = h
    report = summarize(
        hist, gt_trans, gt_rots, runner.labels,
        method=spec.name, dataset=dataset.meta.get("scenario", "?"), seed=seed,
    )
    report.update_ms_all = update_ms_all
    report.update_ms_series = update_ms_series
    return report, net


def self_snap(runner, i, j):  # pragma: no cover - threaded helper stub
    return runner.snapshot(i, j)


def run(cfg: RunConfig):
    """Run every method of the config; per-method failures are recorded, not
    raised. Returns (reports, nets)."""
    if isinstance(cfg.dataset, Dataset):
        dataset = cfg.dataset
    elif isinstance(cfg.dataset, ScenarioConfig):
        dataset = generate(cfg.dataset)
    else:
        dataset = load(cfg.dataset)
    reports, nets = [], {}
    for spec in cfg.methods:
        try:
            rep, net = run_method(
                spec, dataset, cfg.net, record_history=cfg.record_history,
                history_every=cfg.history_every, seed=cfg.seed, threaded=cfg.threaded,
            )
        except Exception as exc:
            rep = MetricReport(
                method=spec.name, dataset=dataset.meta.get("scenario", "?"),
                seed=cfg.seed, failed=True, failure=f"{type(exc).__name__}: {exc}",
            )
            net = None
        reports.append(rep)
        nets[spec.name] = net
    return reports, nets


# ---------------------------------------------------------------------------
# History file round trip (external interface for the metrics subcommand)
# ---------------------------------------------------------------------------


def save_history(hist: SolutionHistory, path):
    lines = ["HISTORY 1"]
    for step, est, rots, cls in zip(hist.steps, hist.estimates, hist.rotations,
                                    hist.classifications):
        lines.append(f"STEP {step}")
        for k in sorted(est):
            vals = " ".join(f"{v:.17g}" for v in est[k])
            rot = f" {rots[k]:.17g}" if k in rots else ""
            lines.append(f"EST {k} {vals}{rot}")
        for uid in sorted(cls):
            lines.append(f"CLS {uid[0]} {uid[1]} {1 if cls[uid] else 0}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_history(path) -> SolutionHistory:
    hist = SolutionHistory()
    step, est, rots, cls = None, {}, {}, {}
    def flush():
        if step is not None:
            hist.record(step, est, rots, cls)
    with open(path) as fh:
        header = fh.readline().split()
        if header[:2] != ["HISTORY", "1"]:
            raise ValueError("not a history file")
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "STEP":
                flush()
                step, est, rots, cls = int(parts[1]), {}, {}, {}
            elif parts[0] == "EST":
                key = fa.VariableKey.parse(parts[1])
                vals = [float(v) for v in parts[2:]]
                if len(vals) == 3:  # x y theta
                    est[key] = np.array(vals[:2])
                    rots[key] = vals[2]
                else:
                    est[key] = np.array(vals[:3])
            elif parts[0] == "CLS":
                cls[(int(parts[1]), int(parts[2]))] = parts[3] == "1"
    flush()
    return hist
