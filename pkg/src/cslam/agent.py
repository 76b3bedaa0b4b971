"""Per-robot distributed back-end state machine.

Each agent owns a local incremental solver plus the consensus bookkeeping:
shared-variable registries per neighbor, pending-initialization sets,
environment-variable descriptors, edge/dual/penalty stores, cached biased
priors awaiting insertion, and the re-elimination / re-convexification caches.
Communication is two-stage (set metadata, then estimates for the joint shared
set) against immutable snapshots, so in-flight exchanges never see concurrent
measurement updates and a failed exchange is simply discarded.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factors as fa
from . import manifold as mf
from .consensus import (
    BETA_INIT,
    BETA_UNINIT,
    DUAL_DECAY,
    SIGMA_R,
    SIGMA_T,
    BiasedPriorFactor,
    ConsensusStores,
    ConstraintFunction,
    constraint_residual,
    dual_update,
    edge_update,
    residual_dim,
    z_init,
)
from .factors import ENV_OWNER
from .solver import IncrementalSolver, SolverConfig

FLOAT_BYTES = 8
KEY_BYTES = 12


@dataclass(frozen=True)
class ObservabilityMask:
    """Which blocks of a variable's state a local measurement observes."""

    rotation: bool = False
    translation: bool = False

    def any(self):
        return self.rotation or self.translation


FULL_MASK = ObservabilityMask(True, True)
TRANSLATION_MASK = ObservabilityMask(False, True)
EMPTY_MASK = ObservabilityMask(False, False)

# how each measurement kind observes the non-own variable it touches
KIND_MASKS = {
    "between_pose": FULL_MASK,
    "range": EMPTY_MASK,
    "bearing_range": TRANSLATION_MASK,
    "landmark_obs": TRANSLATION_MASK,
    "point_between": TRANSLATION_MASK,
}


@dataclass
class AgentConfig:
    beta_uninit: float = BETA_UNINIT
    beta_init: float = BETA_INIT
    dual_decay: float = DUAL_DECAY
    sigma_r: float = SIGMA_R
    sigma_t: float = SIGMA_T
    constraint: str = "geodesic"
    rwbp_kernel: str = "graduated"  # 'graduated' | 'geman_mcclure' | 'none'
    gm_c: float = 6.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def make_kernel(self, residual_dim):
        if self.rwbp_kernel == "graduated":
            return fa.graduated(1.0, fa.graduated_shape(residual_dim))
        if self.rwbp_kernel == "geman_mcclure":
            return fa.geman_mcclure(self.gm_c)
        return fa.NONE_KERNEL


@dataclass(frozen=True)
class CommSnapshot:
    """Frozen copy of the communicating state toward one neighbor."""

    agent_id: int
    neighbor: int
    shared: frozenset  # S_j at snapshot time
    env: tuple  # sorted (key, descriptor) pairs
    pending: frozenset  # Y_j at snapshot time
    masks: tuple  # sorted (key, ObservabilityMask) for pending keys
    estimates: dict  # key -> raw array copy, potentially-shared cover

    def stage1_bytes(self):
        return KEY_BYTES * (len(self.shared) + len(self.env) + len(self.pending))


@dataclass
class CommResult:
    """Everything sent and received across both stages, addressed to one side."""

    agent_id: int
    neighbor: int
    joint: tuple  # the jointly known shared set, sorted
    my_shared: frozenset
    my_pending: frozenset
    my_masks: dict
    my_env: tuple
    their_shared: frozenset
    their_pending: frozenset
    their_masks: dict
    their_env: tuple
    my_estimates: dict  # my transmitted values for the joint set
    their_estimates: dict  # neighbor's transmitted values for the joint set
    payload_bytes: int = 0


def robust_init(local_raw, owner_raw, mask: ObservabilityMask, dim, kind="p"):
    """Component-wise select: locally observed blocks keep the local value,
    unobserved blocks take the owner's value."""
    local_raw = np.asarray(local_raw, dtype=np.float64)
    owner_raw = np.asarray(owner_raw, dtype=np.float64)
    if kind != "p":
        return local_raw.copy() if mask.translation else owner_raw.copy()
    rot_n = 1 if dim == 2 else 4
    out = np.empty_like(owner_raw)
    out[:rot_n] = local_raw[:rot_n] if mask.rotation else owner_raw[:rot_n]
    out[rot_n:] = local_raw[rot_n:] if mask.translation else owner_raw[rot_n:]
    return out


def default_estimate(dim, kind="p"):
    """Identity rotation / zero translation defaults for unobserved components."""
    if kind != "p":
        return np.zeros(dim)
    return mf.Pose.identity(dim).raw()


class Agent:
    """One robot's complete back-end state (solver estimate plus consensus
    registries); see the class docstring of this module for the field roles."""

    def __init__(self, robot_id, dim, config: AgentConfig | None = None):
        self.id = int(robot_id)
        self.dim = int(dim)
        self.config = config or AgentConfig()
        self.cf = ConstraintFunction(self.config.constraint)
        self.solver = IncrementalSolver(dim, self.config.solver)
        self.S = {}  # neighbor -> set of shared keys
        self.Y = {}  # neighbor -> keys awaiting initialization from the owner
        self.E = {}  # environment key -> opaque descriptor (bytes)
        self.stores = ConsensusStores()
        self.C = []  # biased priors cached for the next solver update
        self.K = set()  # variables touched by communication since last update
        self.W = set()  # variables marked for re-convexification
        self.Q = {}  # shared key -> locally connected keys
        self.A = {}  # shared key -> local ObservabilityMask

    # -- bookkeeping ---------------------------------------------------------

    @property
    def values(self):
        return self.solver.values

    def _register_shared(self, key, neighbor, init_value, mask, locally_observed):
        if key in self.S.setdefault(neighbor, set()):
            raise KeyError(f"{key} already registered as shared with {neighbor}")
        self.S[neighbor].add(key)
        if key.owner == neighbor:
            self.Y.setdefault(neighbor, set()).add(key)
        state_len = None if key.kind == "p" else len(np.atleast_1d(init_value))
        d = residual_dim(self.cf, self.dim, key.kind, state_len)
        self.stores.register(
            neighbor, key, z_init(self.cf, init_value, self.dim, key.kind),
            self.config.beta_uninit, d,
        )
        self.C.append(
            BiasedPriorFactor(
                key, neighbor, self.stores, self.cf, self.dim,
                kernel=self.config.make_kernel(d),
                sigma_r=self.config.sigma_r, sigma_t=self.config.sigma_t,
                state_len=state_len,
            )
        )
        conns = set()
        for fi in self.solver.graph.factors_touching([key]):
            conns.update(k for k in self.solver.graph.factors[fi].keys if k != key)
        self.Q.setdefault(key, set()).update(conns)
        if locally_observed and mask is not None and mask.any():
            if key not in self.A:
                self.A[key] = mask

    def bookkeep(self, env_new, shared_new, inits, locally_observed):
        """Register new environment and shared variables (one registration per
        (neighbor, key); re-registering raises and leaves state unchanged).

        env_new: {env key: descriptor}; shared_new: [(key, neighbor, mask)];
        inits must provide a value for every new shared key.
        """
        for key, descr in sorted(env_new.items()):
            self.E.setdefault(key, descr)
        for key, neighbor, mask in shared_new:
            if key not in inits:
                raise KeyError(f"no initial estimate for new shared variable {key}")
            self._register_shared(key, neighbor, inits[key], mask, locally_observed)

    # -- measurement update --------------------------------------------------

    def update(self, new_factors=(), new_inits=None):
        """Classify and bookkeep new variables, then run the local incremental
        solve with the cached biased priors, re-elimination and
        re-convexification sets; caches clear only on success."""
        new_factors = list(new_factors)
        new_inits = dict(new_inits or {})
        env_new = {}
        shared_new = {}
        for f in new_factors:
            mask = KIND_MASKS.get(f.kind, FULL_MASK)
            for k in f.keys:
                if k.owner == ENV_OWNER:
                    if k not in self.E:
                        env_new[k] = str(k).encode()
                    if k not in new_inits and k not in self.values:
                        raise KeyError(f"no initial estimate for {k}")
                elif k.owner != self.id and k not in self.S.get(k.owner, ()):
                    prev = shared_new.get(k)
                    m = mask if k.kind == "p" else TRANSLATION_MASK
                    if prev is not None:
                        m = ObservabilityMask(
                            prev.rotation or m.rotation, prev.translation or m.translation
                        )
                    shared_new[k] = m
        init_source = dict(new_inits)
        for k in list(shared_new):
            if k not in init_source and k in self.values:
                init_source[k] = self.values[k]
        self.bookkeep(
            env_new,
            [(k, k.owner, shared_new[k]) for k in sorted(shared_new)],
            init_source,
            locally_observed=True,
        )
        known = set()
        for s in self.S.values():
            known |= s
        for f in new_factors:
            touched = [k for k in f.keys if k in known]
            for s in touched:
                self.Q.setdefault(s, set()).update(k for k in f.keys if k != s)
        values = self.solver.update(
            new_factors + self.C, new_inits, reelim=self.K & set(self.values.keys()),
            cvx=self.W,
        )
        self.C = []
        self.K = set()
        self.W = set()
        return values

    # -- communication -------------------------------------------------------

    def _potentially_shared(self):
        keys = {k for k in self.values if k.kind == "p" and k.owner == self.id}
        for s in self.S.values():
            keys |= s
        keys |= set(self.E)
        return keys

    def begin_communication(self, neighbor) -> CommSnapshot:
        """Deep snapshot; later updates do not alter it (handler isolation)."""
        pending = frozenset(self.Y.get(neighbor, set()))
        return CommSnapshot(
            agent_id=self.id,
            neighbor=neighbor,
            shared=frozenset(self.S.get(neighbor, set())),
            env=tuple(sorted(self.E.items())),
            pending=pending,
            masks=tuple(sorted((k, self.A.get(k, EMPTY_MASK)) for k in pending)),
            estimates={k: np.array(self.values[k]) for k in self._potentially_shared()},
        )

    def incorporate(self, result: CommResult):
        """Fold a completed communication into the live state: bookkeep novel
        shared keys, run robust initialization for pending keys on both sides'
        cached copies, recompute edge variables from the transmitted values,
        update duals with decay, promote penalties, and mark the affected
        variables for re-elimination / re-convexification."""
        if result.agent_id != self.id:
            raise ValueError(f"result addressed to {result.agent_id}, not {self.id}")
        neighbor = result.neighbor
        joint = list(result.joint)
        s_new = [s for s in joint if s not in self.S.get(neighbor, set())]
        self.bookkeep(
            {},
            [(s, neighbor, None) for s in s_new],
            {s: self.values[s] for s in s_new},
            locally_observed=False,
        )
        my_est = result.my_estimates
        their_est = result.their_estimates
        for s in sorted(result.my_pending):
            mask = result.my_masks.get(s, EMPTY_MASK)
            val = robust_init(my_est[s], their_est[s], mask, self.dim, s.kind)
            self.values[s] = val.copy()
            my_est[s] = val
        for s in sorted(result.their_pending):
            mask = result.their_masks.get(s, EMPTY_MASK)
            their_est[s] = robust_init(their_est[s], my_est[s], mask, self.dim, s.kind)
        if neighbor in self.Y:
            self.Y[neighbor] -= result.my_pending
        for s in joint:
            lo, hi = (my_est, their_est) if self.id < neighbor else (their_est, my_est)
            z = edge_update(self.cf, lo[s], hi[s], self.dim, s.kind)
            sk = (neighbor, s)
            self.stores.edge[sk] = z
            q = constraint_residual(self.cf, my_est[s], z, self.dim, s.kind)
            self.stores.dual[sk] = dual_update(
                self.stores.dual[sk], self.stores.penalty[sk], q, self.config.dual_decay
            )
            if self.stores.penalty[sk] == self.config.beta_uninit:
                self.stores.penalty[sk] = self.config.beta_init
        self.K |= set(joint)
        if result.my_pending:
            grow = set(joint)
            for s in joint:
                grow |= self.Q.get(s, set())
            self.W |= grow

    # -- introspection helpers ------------------------------------------------

    def registration_counts(self):
        total = sum(len(s) for s in self.S.values())
        return total, len(self.stores.edge), len(self.stores.dual), len(self.stores.penalty)


def measurement_mask(kind):
    return KIND_MASKS.get(kind, FULL_MASK)


def exchange(snap_i: CommSnapshot, snap_j: CommSnapshot):
    """Pure two-stage exchange over two snapshots.

    Stage 1 swaps the set metadata; stage 2 swaps estimates for the joint set
    S_i | S_j | (E_i & E_j). Returns one CommResult per side carrying identical
    transmitted values. Delivery (both, one, or neither side) is the caller's
    business - a result only exists if stage 2 completed.
    """
    if snap_i.neighbor != snap_j.agent_id or snap_j.neighbor != snap_i.agent_id:
        raise ValueError("snapshots are not addressed to each other")
    env_i = dict(snap_i.env)
    env_j = dict(snap_j.env)
    env_common = {
        k for k in env_i.keys() & env_j.keys() if env_i[k] == env_j[k]
    }
    joint = tuple(sorted(snap_i.shared | snap_j.shared | env_common))
    est_i, est_j = {}, {}
    for s in joint:
        if s not in snap_i.estimates or s not in snap_j.estimates:
            raise KeyError(f"snapshot missing estimate for joint shared variable {s}")
        est_i[s] = np.array(snap_i.estimates[s])
        est_j[s] = np.array(snap_j.estimates[s])
    payload = (
        snap_i.stage1_bytes()
        + snap_j.stage1_bytes()
        + FLOAT_BYTES * sum(len(v) for v in est_i.values())
        + FLOAT_BYTES * sum(len(v) for v in est_j.values())
        + KEY_BYTES * 2 * len(joint)
    )
    masks_i = dict(snap_i.masks)
    masks_j = dict(snap_j.masks)
    res_i = CommResult(
        agent_id=snap_i.agent_id, neighbor=snap_j.agent_id, joint=joint,
        my_shared=snap_i.shared, my_pending=snap_i.pending, my_masks=masks_i,
        my_env=snap_i.env, their_shared=snap_j.shared, their_pending=snap_j.pending,
        their_masks=masks_j, their_env=snap_j.env,
        my_estimates={k: v.copy() for k, v in est_i.items()},
        their_estimates={k: v.copy() for k, v in est_j.items()},
        payload_bytes=payload,
    )
    res_j = CommResult(
        agent_id=snap_j.agent_id, neighbor=snap_i.agent_id, joint=joint,
        my_shared=snap_j.shared, my_pending=snap_j.pending, my_masks=masks_j,
        my_env=snap_j.env, their_shared=snap_i.shared, their_pending=snap_i.pending,
        their_masks=masks_i, their_env=snap_i.env,
        my_estimates={k: v.copy() for k, v in est_j.items()},
        their_estimates={k: v.copy() for k, v in est_i.items()},
        payload_bytes=payload,
    )
    return res_i, res_j


def initial_estimate_for(factor, own_values, dim):
    """Local-information initialization for a factor's non-own variables.

    Observed components come from the own estimate composed with the
    measurement; unobserved components take the defaults (identity rotation,
    zero translation).
    """
    out = {}
    own_key = factor.keys[0]
    base = mf.Pose.from_raw(dim, own_values[own_key])
    for k in factor.keys[1:]:
        if k in own_values:
            continue
        if factor.kind == "between_pose":
            out[k] = mf.compose(base, mf.Pose.from_raw(dim, factor.measurement)).raw()
        elif factor.kind == "landmark_obs":
            out[k] = base.rotation.apply(factor.measurement) + base.translation
        elif factor.kind == "bearing_range":
            b, d = factor.measurement
            offset = base.rotation.apply(np.array([d * np.cos(b), d * np.sin(b)]))
            est = default_estimate(dim, k.kind)
            if k.kind == "p":
                est[1:3] = base.translation + offset
            else:
                est = base.translation + offset
            out[k] = est
        elif factor.kind == "range":
            # component-blind, but distance-0 initialization would sit on the
            # range factor's singularity: place at measured distance along the
            # observer's heading (the mask stays empty, so the owner's value
            # overwrites this at the first communication)
            d = float(factor.measurement[0])
            offset = base.rotation.apply(np.array([d] + [0.0] * (dim - 1)))
            est = default_estimate(dim, k.kind)
            if k.kind == "p":
                if dim == 2:
                    est[1:3] = base.translation + offset
                else:
                    est[4:7] = base.translation + offset
            else:
                est = base.translation + offset
            out[k] = est
        else:
            out[k] = default_estimate(dim, k.kind)
    return out
