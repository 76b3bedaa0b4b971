"""Consensus-ADMM layer.

Constraint functions over pose/vector variables, the edge/dual/penalty stores,
robust weighted biased priors (the Augmented Lagrangian's dual+penalty terms
folded into a unary factor), closed-form edge updates, dual updates with decay,
and the batch pairwise-communication algorithm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import factors as fa
from . import manifold as mf
from .solver import SolverConfig, Values, optimize_batch

CONSTRAINT_VARIANTS = ("geodesic", "apx_geodesic", "split", "chordal", "linear")

# Biased-prior weighting (rotation block / translation block) and riMESA
# penalty levels.
SIGMA_R = 0.1
SIGMA_T = 1.0
BETA_UNINIT = 1e-4
BETA_INIT = 1.0
DUAL_DECAY = 0.9


@dataclass(frozen=True)
class ConstraintFunction:
    variant: str = "geodesic"

    def __post_init__(self):
        if self.variant not in CONSTRAINT_VARIANTS:
            raise ValueError(f"unknown constraint variant {self.variant!r}")


def _is_vector(key_kind):
    return key_kind != "p"


def _pose_ops(dim):
    if dim == 2:
        return K.se2_compose, K.se2_inverse, K.se2_log
    return K.se3_compose, K.se3_inverse, K.se3_log


def residual_dim(cf: ConstraintFunction, dim, key_kind="p", state_len=None):
    if _is_vector(key_kind) or cf.variant == "linear":
        return state_len if state_len is not None else dim
    if cf.variant == "chordal":
        return dim * dim + dim
    return mf.tangent_dim(dim)


def constraint_residual(cf: ConstraintFunction, theta, z, dim=2, key_kind="p"):
    """q(theta, z): zero iff theta and z agree on the variant's domain."""
    theta = np.asarray(theta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if _is_vector(key_kind) or cf.variant == "linear":
        if theta.shape != z.shape:
            raise ValueError("constraint domain mismatch")
        return theta - z
    comp, inv, logm = _pose_ops(dim)
    if cf.variant == "geodesic":
        if z.shape != theta.shape:
            raise ValueError("geodesic edge variable must be a pose")
        return logm(comp(inv(z[None, :]), theta[None, :]))[0]
    if cf.variant == "apx_geodesic":
        return logm(theta[None, :])[0] - z
    if cf.variant == "split":
        p_theta = mf.Pose.from_raw(dim, theta)
        p_z = mf.Pose.from_raw(dim, z)
        rot = p_z.rotation.inverse().compose(p_theta.rotation).log_map()
        return np.concatenate([rot, p_theta.translation - p_z.translation])
    # chordal
    return mf.chordal_vec(mf.Pose.from_raw(dim, theta)) - z


def z_init(cf: ConstraintFunction, theta, dim=2, key_kind="p"):
    """Initial edge-variable value representing the estimate `theta`."""
    theta = np.asarray(theta, dtype=np.float64)
    if _is_vector(key_kind) or cf.variant in ("geodesic", "split"):
        return theta.copy()
    if cf.variant == "apx_geodesic":
        _, _, logm = _pose_ops(dim)
        return logm(theta[None, :])[0]
    return mf.chordal_vec(mf.Pose.from_raw(dim, theta))


def edge_update(cf: ConstraintFunction, theta_i, theta_j, dim=2, key_kind="p"):
    """Closed-form (or lambda=0 approximate) minimizer of the two-term penalty."""
    theta_i = np.asarray(theta_i, dtype=np.float64)
    theta_j = np.asarray(theta_j, dtype=np.float64)
    if _is_vector(key_kind) or cf.variant == "linear":
        return 0.5 * (theta_i + theta_j)
    if cf.variant in ("geodesic", "split"):
        pi = mf.Pose.from_raw(dim, theta_i)
        pj = mf.Pose.from_raw(dim, theta_j)
        return mf.split_interpolate(pi, pj, 0.5).raw()
    if cf.variant == "apx_geodesic":
        _, _, logm = _pose_ops(dim)
        return 0.5 * (logm(theta_i[None, :])[0] + logm(theta_j[None, :])[0])
    return 0.5 * (
        mf.chordal_vec(mf.Pose.from_raw(dim, theta_i))
        + mf.chordal_vec(mf.Pose.from_raw(dim, theta_j))
    )


def dual_update(lam, beta, q_residual, decay=1.0):
    """lambda' = decay * lambda + beta * q."""
    lam = np.asarray(lam, dtype=np.float64)
    q = np.asarray(q_residual, dtype=np.float64)
    if lam.shape != q.shape:
        raise ValueError("dual/residual dimension mismatch")
    return decay * lam + beta * q


@dataclass
class ConsensusStores:
    """Edge (z), dual (lambda) and penalty (beta) entries keyed (neighbor, key)."""

    edge: dict = field(default_factory=dict)
    dual: dict = field(default_factory=dict)
    penalty: dict = field(default_factory=dict)

    def register(self, neighbor, key, z0, beta0, dual_dim):
        sk = (neighbor, key)
        if sk in self.edge:
            raise KeyError(f"store entry {sk} already registered")
        self.edge[sk] = np.asarray(z0, dtype=np.float64)
        self.dual[sk] = np.zeros(dual_dim)
        self.penalty[sk] = float(beta0)

    def consistent(self):
        return set(self.edge) == set(self.dual) == set(self.penalty)


def biased_prior_sigmas(cf: ConstraintFunction, dim, key_kind="p", state_len=None,
                        sigma_r=SIGMA_R, sigma_t=SIGMA_T):
    """Per-component weights: rotation components sigma_r, translation sigma_t."""
    n = residual_dim(cf, dim, key_kind, state_len)
    if _is_vector(key_kind) or cf.variant == "linear":
        return np.full(n, sigma_t)
    if cf.variant == "chordal":
        return np.concatenate([np.full(dim * dim, sigma_r), np.full(dim, sigma_t)])
    rot = 1 if dim == 2 else 3
    return np.concatenate([np.full(rot, sigma_r), np.full(n - rot, sigma_t)])


class BiasedPriorFactor:
    """Unary consensus factor: sqrt(beta/2) * Sigma_s^-1/2 * (q(theta, z) + lambda/beta).

    Reads z, lambda, beta from the owning agent's stores at evaluation time
    (live references, not copies), so store updates take effect at the next
    linearization.
    """

    kind = "biased_prior"

    def __init__(self, key, neighbor, stores: ConsensusStores, cf: ConstraintFunction,
                 dim, kernel=fa.NONE_KERNEL, sigma_r=SIGMA_R, sigma_t=SIGMA_T,
                 state_len=None):
        self.keys = (key,)
        self.key = key
        self.neighbor = neighbor
        self.stores = stores
        self.cf = cf
        self.dim = dim
        self.kernel = kernel
        self.sigmas = biased_prior_sigmas(cf, dim, key.kind, state_len, sigma_r, sigma_t)

    @property
    def outlier_candidate(self):
        return self.kernel.is_robust

    @property
    def store_key(self):
        return (self.neighbor, self.key)

    def residual_dim(self):
        return len(self.sigmas)

    def _entries(self):
        sk = self.store_key
        try:
            return self.stores.edge[sk], self.stores.dual[sk], self.stores.penalty[sk]
        except KeyError as exc:
            raise KeyError(f"missing consensus store entry {sk}") from exc

    def evaluate_residual(self, values):
        z, lam, beta = self._entries()
        q = constraint_residual(self.cf, values[self.key], z, self.dim, self.key.kind)
        return np.sqrt(0.5 * beta) * (q + lam / beta) / self.sigmas

    def evaluate_jacobian(self, values, step=1e-6):
        if self.key.kind != "p" or self.cf.variant == "linear":
            _, _, beta = self._entries()
            n = len(self.sigmas)
            return {self.key: np.diag(np.sqrt(0.5 * beta) / self.sigmas)[:n, :n]}
        if self.batchable(values):
            z, lam, beta = self._entries()
            th = np.asarray(values[self.key])[None, :]
            _, j = K.se2_prior_rj(th, z[None, :], True)
            scale = np.sqrt(0.5 * beta) / self.sigmas
            return {self.key: j[0] * scale[:, None]}
        base = np.asarray(values[self.key], dtype=np.float64)
        n = mf.tangent_dim(self.dim) if self.key.kind == "p" else len(base)
        cols = []
        for i in range(n):
            d = np.zeros(n)
            d[i] = step
            vp = {self.key: fa.retract_state(self.key, base, d, self.dim)}
            rp = self.evaluate_residual(vp)
            vp = {self.key: fa.retract_state(self.key, base, -d, self.dim)}
            rm = self.evaluate_residual(vp)
            cols.append((rp - rm) / (2 * step))
        return {self.key: np.stack(cols, axis=1)}

    def batchable(self, values):
        return self.dim == 2 and self.key.kind == "p" and self.cf.variant == "geodesic"

    def geo2_terms(self, values):
        """(reference z, bias lambda/beta, row scale) for the batched SE(2) path."""
        z, lam, beta = self._entries()
        return z, lam / beta, np.sqrt(0.5 * beta) / self.sigmas


def disagreement(theta_i, theta_j, dim=2, key_kind="p"):
    """Tangent-norm distance used for convergence checks."""
    ti = np.asarray(theta_i, dtype=np.float64)
    tj = np.asarray(theta_j, dtype=np.float64)
    if _is_vector(key_kind):
        return float(np.linalg.norm(ti - tj))
    _, _, logm = _pose_ops(dim)
    comp, inv, _ = _pose_ops(dim)
    return float(np.linalg.norm(logm(comp(inv(ti[None, :]), tj[None, :]))[0]))


class MesaPlus:
    """Batch consensus solver: asynchronous pairwise C-ADMM over local graphs.

    Each scheduled pair locally re-optimizes (warm-started), exchanges shared
    estimates, applies the closed-form edge update and the dual update, and
    scales its penalty by alpha. Stops when the largest cross-robot
    disagreement falls below `tol`.
    """

    def __init__(self, problems, cf=None, alpha=1.0, beta0=BETA_INIT, tol=1e-4,
                 decay=1.0, kernel=fa.NONE_KERNEL, sigma_r=SIGMA_R, sigma_t=SIGMA_T,
                 solver_config=None):
        self.cf = cf or ConstraintFunction("geodesic")
        self.alpha = float(alpha)
        self.tol = float(tol)
        self.decay = float(decay)
        self.graphs = {}
        self.values = {}
        self.stores = {}
        self.dims = {}
        self.solver_config = solver_config or SolverConfig()
        for rid, (graph, init) in problems.items():
            self.graphs[rid] = graph
            self.values[rid] = init.copy()
            self.stores[rid] = ConsensusStores()
            self.dims[rid] = init.dim

        # shared variables: any key present in more than one robot's graph,
        # constrained pairwise between every pair that uses it
        users = {}
        for rid, g in self.graphs.items():
            for k in g.variables():
                users.setdefault(k, []).append(rid)
        self.shared = {}  # (i, j) with i < j -> sorted list of keys
        for k, rids in sorted(users.items()):
            rids = sorted(rids)
            for a in range(len(rids)):
                for b in range(a + 1, len(rids)):
                    self.shared.setdefault((rids[a], rids[b]), []).append(k)

        for (i, j), keys in self.shared.items():
            for s in keys:
                for mine, other in ((i, j), (j, i)):
                    dim = self.dims[mine]
                    state_len = len(self.values[mine][s])
                    z0 = z_init(self.cf, self.values[mine][s], dim, s.kind)
                    d = residual_dim(self.cf, dim, s.kind, state_len if s.kind != "p" else None)
                    self.stores[mine].register(other, s, z0, beta0, d)
                    self.graphs[mine].add(
                        BiasedPriorFactor(
                            s, other, self.stores[mine], self.cf, dim,
                            kernel=kernel, sigma_r=sigma_r, sigma_t=sigma_t,
                            state_len=state_len,
                        )
                    )
        self.pair_iterations = 0

    def pairs(self):
        return sorted(self.shared.keys())

    def iterate(self, pair):
        """One pair-iteration: local solves, exchange, edge/dual/penalty updates."""
        i, j = min(pair), max(pair)
        keys = self.shared.get((i, j), [])
        for rid in (i, j):
            self.values[rid] = optimize_batch(
                self.graphs[rid], self.values[rid], self.solver_config
            )
        for s in keys:
            kind = s.kind
            ti = np.asarray(self.values[i][s])
            tj = np.asarray(self.values[j][s])
            z = edge_update(self.cf, ti, tj, self.dims[i], kind)
            for mine, theirs, th in ((i, j, ti), (j, i, tj)):
                st = self.stores[mine]
                sk = (theirs, s)
                st.edge[sk] = z.copy()
                q = constraint_residual(self.cf, th, z, self.dims[mine], kind)
                st.dual[sk] = dual_update(st.dual[sk], st.penalty[sk], q, self.decay)
        for mine, theirs in ((i, j), (j, i)):
            st = self.stores[mine]
            for s in keys:
                st.penalty[(theirs, s)] *= self.alpha
        self.pair_iterations += 1

    def max_disagreement(self):
        worst = 0.0
        for (i, j), keys in self.shared.items():
            for s in keys:
                worst = max(
                    worst,
                    disagreement(self.values[i][s], self.values[j][s], self.dims[i], s.kind),
                )
        return worst

    def run(self, schedule):
        """Iterate the schedule until converged or exhausted; returns Values map."""
        for rid in sorted(self.graphs):
            self.values[rid] = optimize_batch(
                self.graphs[rid], self.values[rid], self.solver_config
            )
        for pair in schedule:
            self.iterate(pair)
            if self.max_disagreement() < self.tol:
                break
        return self.values


def round_robin(pairs, iterations):
    """Cyclic schedule over the given pairs."""
    pairs = sorted(pairs)
    if not pairs:
        return []
    return [pairs[k % len(pairs)] for k in range(iterations)]


def mesa_plus(problems, schedule, alpha=1.0, cf=None, **kwargs):
    """Run batch consensus over an explicit schedule of communicating pairs."""
    if not schedule:
        raise ValueError("schedule must be nonempty")
    session = MesaPlus(problems, cf=cf, alpha=alpha, **kwargs)
    return session.run(schedule)
