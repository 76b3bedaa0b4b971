"""Local nonlinear least-squares engine.

Levenberg-Marquardt with gain-ratio step acceptance (a trust-region-equivalent
substitute for dogleg: accepted steps never increase the robust cost), a
graduated non-convexity continuation over the kernel control schedule, and an
incremental warm-started interface that re-solves only an active subset of
variables, growing it along the factor adjacency as estimates move.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels as K
from . import factors as fa
from . import manifold as mf

log = logging.getLogger(__name__)

DEFAULT_MU_SCHEDULE = (0.0, 0.5, 0.9, 0.95, 1.0)
INLIER_CONFIDENCE = 0.95
_DENSE_LIMIT = 320


class GaugeError(RuntimeError):
    """The (sub)problem has a connected component with no anchoring factor."""


class DuplicateVariableError(ValueError):
    """A variable was initialized twice."""


class Values:
    """Mapping VariableKey -> packed state array for one spatial dimension."""

    __slots__ = ("dim", "_data")

    def __init__(self, dim):
        self.dim = int(dim)
        self._data = {}

    def __getitem__(self, key):
        return self._data[key]

    def __setitem__(self, key, value):
        self._data[key] = np.asarray(value, dtype=np.float64)

    def __contains__(self, key):
        return key in self._data

    def __len__(self):
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def copy(self):
        out = Values(self.dim)
        out._data = {k: v.copy() for k, v in self._data.items()}
        return out

    def pose(self, key) -> mf.Pose:
        return mf.Pose.from_raw(self.dim, self._data[key])

    def set_pose(self, key, pose: mf.Pose):
        self._data[key] = pose.raw()


class _Overlay:
    """Read view of Values with a small set of local updates (trial points)."""

    __slots__ = ("base", "local")

    def __init__(self, base, local):
        self.base = base
        self.local = local

    def __getitem__(self, key):
        v = self.local.get(key)
        return self.base[key] if v is None else v

    def __contains__(self, key):
        return key in self.local or key in self.base


class FactorGraph:
    """Ordered factor collection with a variable -> factor-index adjacency."""

    def __init__(self):
        self.factors = []
        self._adjacency = {}

    def add(self, factor) -> int:
        idx = len(self.factors)
        self.factors.append(factor)
        for k in factor.keys:
            self._adjacency.setdefault(k, []).append(idx)
        return idx

    def extend(self, factors):
        return [self.add(f) for f in factors]

    def __len__(self):
        return len(self.factors)

    def variables(self):
        return self._adjacency.keys()

    def factors_touching(self, keys):
        out = set()
        for k in keys:
            out.update(self._adjacency.get(k, ()))
        return out

    def check_adjacency(self):
        ref = {}
        for i, f in enumerate(self.factors):
            for k in f.keys:
                ref.setdefault(k, []).append(i)
        return ref == self._adjacency


@dataclass
class SolverConfig:
    max_iterations: int = 100
    initial_trust_radius: float = 1.0
    rel_decrease_tol: float = 1e-6
    grad_tol: float = 1e-8
    mu_schedule: tuple = DEFAULT_MU_SCHEDULE
    # wavefront growth: variables adjacent to any variable that moved more
    # than this (cumulative tangent norm) join the active set. Frozen-boundary
    # factors reflect a few threshold-widths of staleness back into the active
    # interior, so this sits well below the 1e-3 incremental-vs-batch contract.
    active_threshold: float = 1e-4

    def __post_init__(self):
        if self.rel_decrease_tol <= 0 or self.grad_tol <= 0 or self.initial_trust_radius <= 0:
            raise ValueError("tolerances must be positive")
        s = self.mu_schedule
        if any(b < a for a, b in zip(s, s[1:])) or s[-1] != 1.0:
            raise ValueError("mu schedule must be nondecreasing and end at 1.0")


@dataclass
class RobustState:
    """Per outlier-candidate factor: continuation stage and chi-square inlier flag."""

    stages: dict = field(default_factory=dict)
    inlier: dict = field(default_factory=dict)


@dataclass
class SolveStats:
    converged: bool = False
    iterations: int = 0
    initial_cost: float = 0.0
    cost: float = 0.0
    singular: bool = False


# ---------------------------------------------------------------------------
# Linearization / assembly
# ---------------------------------------------------------------------------


def _kernel_arrays(factor_list, mu_of, idx_list):
    """Per-factor (variant_code, c2, mu): 0 none, 1 geman_mcclure, 2 graduated."""
    n = len(factor_list)
    code = np.zeros(n, dtype=np.int8)
    c2 = np.ones(n)
    mu = np.ones(n)
    for j, (i, f) in enumerate(zip(idx_list, factor_list)):
        k = f.kernel
        if k.variant == "geman_mcclure":
            code[j] = 1
            c2[j] = k.c * k.c
        elif k.variant == "graduated":
            code[j] = 2
            c2[j] = k.c * k.c
            ov = mu_of(i) if mu_of is not None else None
            mu[j] = k.mu if ov is None else ov
    return code, c2, mu


def _robust_weights(s, code, c2, mu):
    """Robust cost contributions and IRLS weights for squared norms s."""
    cost = s.copy()
    w = np.ones_like(s)
    m = code == 1
    if np.any(m):
        denom = c2[m] + s[m]
        cost[m] = c2[m] * s[m] / denom
        w[m] = (c2[m] / denom) ** 2
    m = code == 2
    if np.any(m):
        denom = c2[m] + mu[m] * s[m]
        cost[m] = c2[m] * s[m] / denom
        w[m] = (c2[m] / denom) ** 2
    return cost, w


class _Linearizer:
    """Evaluates cost / assembles the weighted sparse system over active variables.

    Groups SE(2) unary (prior and biased-prior) and between factors for
    vectorized kernel calls; everything else goes through the generic
    per-factor path.
    """

    def __init__(self, graph, factor_idx, values, offsets, total_dim, mu_of):
        self.graph = graph
        self.values = values
        self.offsets = offsets  # key -> column offset, or absent if fixed
        self.total_dim = total_dim
        self.mu_of = mu_of
        dim = values.dim if isinstance(values, Values) else values.base.dim
        self.dim = dim
        self.g_unary, self.g_between, self.g_other = [], [], []
        for i in sorted(factor_idx):
            f = graph.factors[i]
            kind = getattr(f, "kind", None)
            if dim == 2 and kind == "prior_pose" and f.noise.sigmas is not None:
                self.g_unary.append((i, f))
            elif dim == 2 and kind == "biased_prior" and f.batchable(values):
                self.g_unary.append((i, f))
            elif dim == 2 and kind == "between_pose" and f.noise.sigmas is not None:
                self.g_between.append((i, f))
            else:
                self.g_other.append((i, f))
        self._prep_unary()
        self._prep_between()

    def _prep_unary(self):
        n = len(self.g_unary)
        self.u_keys = [f.keys[0] for _, f in self.g_unary]
        self.u_ref = np.empty((n, 3))
        self.u_bias = np.zeros((n, 3))
        self.u_scale = np.empty((n, 3))
        idx = [i for i, _ in self.g_unary]
        for j, (_, f) in enumerate(self.g_unary):
            if f.kind == "prior_pose":
                self.u_ref[j] = f.measurement
                self.u_scale[j] = 1.0 / f.noise.sigmas
            else:
                ref, bias, scale = f.geo2_terms(self.values)
                self.u_ref[j] = ref
                self.u_bias[j] = bias
                self.u_scale[j] = scale
        self.u_code, self.u_c2, self.u_mu = _kernel_arrays(
            [f for _, f in self.g_unary], self.mu_of, idx
        )
        self.u_cols = np.array(
            [self.offsets.get(k, -1) for k in self.u_keys], dtype=np.int64
        )

    def _prep_between(self):
        n = len(self.g_between)
        self.b_keys_a = [f.keys[0] for _, f in self.g_between]
        self.b_keys_b = [f.keys[1] for _, f in self.g_between]
        self.b_meas = np.empty((n, 3))
        self.b_scale = np.empty((n, 3))
        idx = [i for i, _ in self.g_between]
        for j, (_, f) in enumerate(self.g_between):
            self.b_meas[j] = f.measurement
            self.b_scale[j] = 1.0 / f.noise.sigmas
        self.b_code, self.b_c2, self.b_mu = _kernel_arrays(
            [f for _, f in self.g_between], self.mu_of, idx
        )
        self.b_cols_a = np.array(
            [self.offsets.get(k, -1) for k in self.b_keys_a], dtype=np.int64
        )
        self.b_cols_b = np.array(
            [self.offsets.get(k, -1) for k in self.b_keys_b], dtype=np.int64
        )

    def _gather(self, keys, values):
        return np.array([values[k] for k in keys]) if keys else np.zeros((0, 3))

    def evaluate(self, values, want_jac):
        """Returns (cost, J, r) with J, r None when want_jac is False."""
        cost = 0.0
        rows, cols, data = [], [], []
        rvec = []
        row_ptr = 0

        # SE(2) unary group
        if self.g_unary:
            th = self._gather(self.u_keys, values)
            if want_jac:
                q, jac = K.se2_prior_rj(th, self.u_ref, True)
            else:
                q, jac = K.se2_prior_rj(th, self.u_ref, False)
            r = (q + self.u_bias) * self.u_scale
            s = np.sum(r * r, axis=1)
            cvals, w = _robust_weights(s, self.u_code, self.u_c2, self.u_mu)
            cost += float(np.sum(cvals))
            if want_jac:
                sw = np.sqrt(w)
                rw = r * sw[:, None]
                jw = jac * (self.u_scale * sw[:, None])[:, :, None]
                rvec.append(rw.ravel())
                base = row_ptr + 3 * np.arange(len(self.g_unary))
                act = self.u_cols >= 0
                if np.any(act):
                    rr = (base[act, None, None] + np.arange(3)[None, :, None])
                    cc = (self.u_cols[act, None, None] + np.arange(3)[None, None, :])
                    rows.append(np.broadcast_to(rr, (act.sum(), 3, 3)).ravel())
                    cols.append(np.broadcast_to(cc, (act.sum(), 3, 3)).ravel())
                    data.append(jw[act].ravel())
                row_ptr += 3 * len(self.g_unary)

        # SE(2) between group
        if self.g_between:
            a = self._gather(self.b_keys_a, values)
            b = self._gather(self.b_keys_b, values)
            if want_jac:
                q, ja, jb = K.se2_between_rj(a, b, self.b_meas, True)
            else:
                q, ja, jb = K.se2_between_rj(a, b, self.b_meas, False)
            r = q * self.b_scale
            s = np.sum(r * r, axis=1)
            cvals, w = _robust_weights(s, self.b_code, self.b_c2, self.b_mu)
            cost += float(np.sum(cvals))
            if want_jac:
                sw = np.sqrt(w)
                rw = r * sw[:, None]
                scale = (self.b_scale * sw[:, None])[:, :, None]
                rvec.append(rw.ravel())
                base = row_ptr + 3 * np.arange(len(self.g_between))
                for jmat, col in ((ja * scale, self.b_cols_a), (jb * scale, self.b_cols_b)):
                    act = col >= 0
                    if np.any(act):
                        rr = (base[act, None, None] + np.arange(3)[None, :, None])
                        cc = (col[act, None, None] + np.arange(3)[None, None, :])
                        rows.append(np.broadcast_to(rr, (act.sum(), 3, 3)).ravel())
                        cols.append(np.broadcast_to(cc, (act.sum(), 3, 3)).ravel())
                        data.append(jmat[act].ravel())
                row_ptr += 3 * len(self.g_between)

        # generic path
        for i, f in self.g_other:
            r = f.evaluate_residual(values) if hasattr(f, "evaluate_residual") else fa.residual(f, values)
            s = float(r @ r)
            ov = self.mu_of(i) if self.mu_of is not None else None
            cost += float(fa.kernel_value(f.kernel, s, mu=ov))
            if want_jac:
                w = float(fa.kernel_influence(f.kernel, s, mu=ov))
                sw = np.sqrt(w)
                jac = (
                    f.evaluate_jacobian(values)
                    if hasattr(f, "evaluate_jacobian")
                    else fa.jacobian(f, values)
                )
                nd = r.shape[0]
                rvec.append(sw * r)
                for k in f.keys:
                    off = self.offsets.get(k, -1)
                    if off < 0:
                        continue
                    jm = sw * jac[k]
                    rr, cc = np.meshgrid(
                        row_ptr + np.arange(nd), off + np.arange(jm.shape[1]), indexing="ij"
                    )
                    rows.append(rr.ravel())
                    cols.append(cc.ravel())
                    data.append(jm.ravel())
                row_ptr += nd

        if not want_jac:
            return cost, None, None
        r_all = np.concatenate(rvec) if rvec else np.zeros(0)
        if rows:
            j_coo = sp.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(row_ptr, self.total_dim),
            )
        else:
            j_coo = sp.coo_matrix((row_ptr, self.total_dim))
        return cost, j_coo.tocsr(), r_all


# ---------------------------------------------------------------------------
# Core LM loop
# ---------------------------------------------------------------------------


def _var_size(values, key):
    if key.kind == "p":
        return mf.tangent_dim(values.dim)
    return len(np.atleast_1d(values[key]))


def _layout(values, active_keys):
    keys = sorted(active_keys)
    offsets, total = {}, 0
    for k in keys:
        offsets[k] = total
        total += _var_size(values, k)
    return keys, offsets, total


def _check_gauge(graph, factor_idx, active_keys):
    """Every connected component of active variables needs an anchor: a unary
    factor or an included factor touching a fixed variable."""
    parent = {k: k for k in active_keys}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    anchored = set()
    for i in factor_idx:
        f = graph.factors[i]
        ks = [k for k in f.keys if k in parent]
        for a, b in zip(ks, ks[1:]):
            union(a, b)
        if len(ks) == 1 and len(f.keys) == 1:
            anchored.add(ks[0])
        elif len(ks) < len(f.keys) and ks:
            anchored.update(ks)  # touches a fixed variable
    roots_anchored = {find(k) for k in anchored}
    for k in active_keys:
        if find(k) not in roots_anchored:
            raise GaugeError(f"unconstrained gauge: no anchor for component of {k}")


def _retract_active(values, keys, offsets, delta, dim):
    out = {}
    pose_keys = [k for k in keys if k.kind == "p"]
    if pose_keys:
        xs = np.array([values[k] for k in pose_keys])
        ds = np.array([delta[offsets[k]: offsets[k] + mf.tangent_dim(dim)] for k in pose_keys])
        fn = K.se2_retract if dim == 2 else K.se3_retract
        news = fn(xs, ds)
        for k, v in zip(pose_keys, news):
            out[k] = v
    for k in keys:
        if k.kind != "p":
            n = len(np.atleast_1d(values[k]))
            out[k] = np.atleast_1d(values[k]) + delta[offsets[k]: offsets[k] + n]
    return out


def _solve_damped(h_csr, diag, g, lam, total_dim):
    d = np.maximum(diag, max(1e-10 * diag.max(initial=0.0), 1e-12))
    a = h_csr + sp.diags(lam * d)
    if total_dim <= _DENSE_LIMIT:
        return np.linalg.solve(a.toarray(), -g)
    return spla.spsolve(a.tocsc(), -g)


def _lm(graph, values, active_keys, factor_idx, config, mu_of=None, expand=None,
        grad_probe=None):
    """Minimize the robust cost over `active_keys`, all other variables fixed.

    Mutates `values` in place on accepted steps. `expand(moved_keys)` may
    return newly active keys (wavefront growth); the system is then rebuilt.
    Returns SolveStats.
    """
    dim = values.dim
    # callers may pass a set they want to observe wavefront growth through
    active = active_keys if isinstance(active_keys, set) else set(active_keys)
    stats = SolveStats()
    if not active:
        stats.converged = True
        return stats

    keys, offsets, total = _layout(values, active)
    _check_gauge(graph, factor_idx, active)
    lin = _Linearizer(graph, factor_idx, values, offsets, total, mu_of)
    cost, j, r = lin.evaluate(values, True)
    stats.initial_cost = stats.cost = cost

    lam = 1e-4 / config.initial_trust_radius
    nu = 2.0
    it = 0
    small_drops = 0  # consecutive accepted steps below the relative tolerance
    polish = 0  # steps taken past float-resolution of the cost
    accum = {}  # per-variable displacement accumulated over accepted steps
    while it < config.max_iterations:
        it += 1
        h = (j.T @ j).tocsr()
        g2 = j.T @ r
        if grad_probe is not None:
            grad_probe(2.0 * g2, offsets)
        if np.max(np.abs(g2), initial=0.0) * 2.0 <= config.grad_tol:
            stats.converged = True
            break
        diag = h.diagonal()
        try:
            delta = _solve_damped(h, diag, g2, lam, total)
        except Exception:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            log.warning("singular normal equations; returning best-so-far")
            stats.singular = True
            break
        upd = _retract_active(values, keys, offsets, delta, dim)
        trial = _Overlay(values, upd)
        cost_new, _, _ = lin.evaluate(trial, False)
        d = np.maximum(diag, max(1e-10 * diag.max(initial=0.0), 1e-12))
        pred = float(lam * (delta * d) @ delta - delta @ g2)
        gain = (cost - cost_new) / pred if pred > 0 else -1.0
        if log.isEnabledFor(logging.DEBUG):
            log.debug(
                "lm it=%d cost=%.17g new=%.17g pred=%.3e gain=%.3f lam=%.3e |d|=%.3e",
                it, cost, cost_new, pred, gain, lam, float(np.linalg.norm(delta)),
            )
        if np.isfinite(cost_new) and gain > 0:
            # accepted steps never increase the robust cost
            assert cost_new <= cost + 1e-9 * (1.0 + abs(cost))
            for k, v in upd.items():
                values[k] = v
            for k in keys:
                step_norm = np.linalg.norm(
                    delta[offsets[k]: offsets[k] + _var_size(values, k)]
                )
                accum[k] = accum.get(k, 0.0) + step_norm
            moved = {k for k in keys if accum.get(k, 0.0) > config.active_threshold}
            grew = False
            if expand is not None and moved:
                new_keys = set(expand(moved)) - active
                if new_keys:
                    active |= new_keys
                    keys, offsets, total = _layout(values, active)
                    factor_idx = graph.factors_touching(active)
                    _check_gauge(graph, factor_idx, active)
                    lin = _Linearizer(graph, factor_idx, values, offsets, total, mu_of)
                    grew = True
            rel_drop = (cost - cost_new) / max(cost, 1e-300)
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0) ** 3)
            nu = 2.0
            cost, j, r = lin.evaluate(values, True)
            stats.cost = cost
            # a single sub-tolerance drop can be an artifact of inflated
            # damping; require two in a row (damping shrinks in between)
            small_drops = small_drops + 1 if (not grew and rel_drop < config.rel_decrease_tol) else 0
            if small_drops >= 2:
                stats.converged = True
                break
        else:
            floor = 64.0 * np.finfo(float).eps * max(abs(cost), 1.0)
            if (
                pred <= floor
                and np.isfinite(cost_new)
                and cost_new <= cost + floor
            ):
                # the quadratic model predicts less improvement than float64
                # can resolve: take a few damped-Newton polish steps (each
                # contracts the remaining error), then call it converged
                if polish < 3:
                    polish += 1
                    for k, v in upd.items():
                        values[k] = v
                    cost, j, r = lin.evaluate(values, True)
                    stats.cost = min(stats.cost, cost)
                    continue
                stats.converged = True
                break
            lam *= nu
            nu *= 2.0
            if lam > 1e32:
                stats.singular = True
                log.warning("damping overflow; returning best-so-far")
                break
    stats.iterations = it
    return stats


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def optimize_batch(graph, init: Values, config: SolverConfig | None = None, *,
                   mu_of=None, stats_out=None) -> Values:
    """Batch solve of the whole graph from `init` (which must cover it)."""
    config = config or SolverConfig()
    for k in graph.variables():
        if k not in init:
            raise KeyError(f"init missing variable {k}")
    values = init.copy()
    stats = _lm(
        graph, values, set(graph.variables()), set(range(len(graph.factors))), config,
        mu_of=mu_of,
    )
    if stats_out is not None:
        stats_out.update(stats.__dict__)
    if not stats.converged and not stats.singular and stats.iterations >= config.max_iterations:
        log.info("optimize_batch hit max iterations (%d)", stats.iterations)
    return values


def candidate_indices(graph):
    return [i for i, f in enumerate(graph.factors) if getattr(f, "outlier_candidate", False)]


def classify_candidates(graph, values, idxs=None):
    """Chi-square(0.95) inlier test on the whitened residuals at `values`."""
    idxs = candidate_indices(graph) if idxs is None else idxs
    out = {}
    for i in idxs:
        f = graph.factors[i]
        r = f.evaluate_residual(values) if hasattr(f, "evaluate_residual") else fa.residual(f, values)
        out[i] = float(r @ r) < fa.chi2_threshold(r.shape[0], INLIER_CONFIDENCE)
    return out


def optimize_gnc(graph, init: Values, config: SolverConfig | None = None):
    """Graduated non-convexity continuation: anneal all graduated kernels over
    the mu schedule, warm-starting each stage, then classify candidates."""
    config = config or SolverConfig()
    values = init.copy()
    graduated_idx = [
        i
        for i, f in enumerate(graph.factors)
        if getattr(f, "kernel", None) is not None and f.kernel.variant == "graduated"
    ]
    all_factors = set(range(len(graph.factors)))
    all_vars = set(graph.variables())
    if not graduated_idx:
        _lm(graph, values, all_vars, all_factors, config)
    else:
        gset = set(graduated_idx)
        for mu in config.mu_schedule:
            _lm(graph, values, all_vars, all_factors, config,
                mu_of=lambda i, m=mu: m if i in gset else None)
    robust = RobustState()
    last = len(config.mu_schedule) - 1
    for i in candidate_indices(graph):
        robust.stages[i] = last
    robust.inlier = classify_candidates(graph, values)
    return values, robust


class IncrementalSolver:
    """Warm-started incremental interface over a growing factor graph.

    update() appends factors, re-convexifies candidate factors touching `cvx`,
    seeds the active set with `reelim` plus the new factors' variables, grows
    it along adjacency as estimates move, and runs a GNC-scheduled solve
    restricted to the active set.
    """

    def __init__(self, dim, config: SolverConfig | None = None):
        self.graph = FactorGraph()
        self.values = Values(dim)
        self.config = config or SolverConfig()
        self.robust = RobustState()

    def _entry_stage(self, i):
        return self.robust.stages.get(i, len(self.config.mu_schedule) - 1)

    def update(self, new_factors=(), new_inits=None, reelim=(), cvx=()) -> Values:
        new_factors = list(new_factors)
        new_inits = new_inits or {}
        reelim = set(reelim)
        cvx = set(cvx)
        for k, v in new_inits.items():
            if k in self.values:
                raise DuplicateVariableError(f"variable {k} already initialized")
            self.values[k] = v
        new_idx = self.graph.extend(new_factors)
        for i, f in zip(new_idx, new_factors):
            for k in f.keys:
                if k not in self.values:
                    raise KeyError(f"no initial estimate for {k}")
            if f.outlier_candidate and f.kernel.variant == "graduated":
                self.robust.stages[i] = 0
        if cvx:
            for i in self.graph.factors_touching(cvx):
                f = self.graph.factors[i]
                if f.outlier_candidate and f.kernel.variant == "graduated":
                    self.robust.stages[i] = 0

        seeds = reelim | {k for f in new_factors for k in f.keys}
        missing = [k for k in seeds if k not in self.values]
        if missing:
            raise KeyError(f"active-set seeds not in values: {missing}")
        if not seeds:
            return self.values
        self._solve_active(seeds)
        return self.values

    def _solve_active(self, seeds):
        schedule = self.config.mu_schedule
        last = len(schedule) - 1
        active = set(seeds)
        factor_idx = self.graph.factors_touching(active)

        def expand(moved):
            adj = self.graph.factors_touching(moved)
            out = set()
            for i in adj:
                out.update(self.graph.factors[i].keys)
            return out

        entry = {}
        for i in factor_idx:
            f = self.graph.factors[i]
            if f.outlier_candidate and f.kernel.variant == "graduated":
                entry[i] = self._entry_stage(i)
        start = min(entry.values(), default=last)

        touched = set(active)
        for stage in range(start, last + 1):
            def mu_of(i, stage=stage):
                e = entry.get(i)
                if e is None:
                    f = self.graph.factors[i]
                    if f.outlier_candidate and f.kernel.variant == "graduated":
                        e = self._entry_stage(i)
                        entry[i] = e
                    else:
                        return None
                return schedule[max(stage, e)]

            _lm(self.graph, self.values, active, factor_idx, self.config,
                mu_of=mu_of, expand=expand)
            # _lm may have grown the active set; refresh for the next stage
            factor_idx = self.graph.factors_touching(active)
            touched |= active
        for i in entry:
            self.robust.stages[i] = last
        cand = [
            i for i in self.graph.factors_touching(touched)
            if getattr(self.graph.factors[i], "outlier_candidate", False)
        ]
        self.robust.inlier.update(classify_candidates(self.graph, self.values, cand))
