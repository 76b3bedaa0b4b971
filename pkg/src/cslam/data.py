"""Synthetic multi-robot dataset generation and the line-oriented text format.

Trajectories are categorical random walks (1 m forward or +/-90 degree turns);
loop-closure measurements of each enabled type are injected probabilistically
within an observation range, and a controlled fraction of them is replaced by
uniformly random wrong values (perceptual-aliasing style outliers).

File records: META key value / ROBOT id / GT_POSE robot idx pose / GT_LM id xy[z]
/ ODOM robot from to pose sigmas / LOOP type keyA keyB payload sigmas inlier.
Poses are serialized x y theta (planar) or x y z qw qx qy qz; angles in radians;
floats carry 17 significant digits so a save/load round trip is bit-exact.
A measurement's availability step is keyA's pose index (keyB's for odometry).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .factors import ENV_OWNER, VariableKey, landmark_key, pose_key

OUTLIER_FRACTION_BOUNDS = (0.10, 0.25)

SCENARIOS = {
    # measurement toggles: intra, direct (None|pose|range|bearing_range), indirect, landmarks
    "cpgo": dict(intra_loop=True, direct_inter=None, indirect_inter=True, landmarks=False),
    "range_aided": dict(intra_loop=True, direct_inter="range", indirect_inter=False, landmarks=False),
    "range_only": dict(intra_loop=False, direct_inter="range", indirect_inter=False, landmarks=False),
    "bearing_range_only": dict(intra_loop=False, direct_inter="bearing_range", indirect_inter=False, landmarks=False),
    "landmark": dict(intra_loop=False, direct_inter=None, indirect_inter=False, landmarks=True),
    "landmark_direct": dict(intra_loop=False, direct_inter="bearing_range", indirect_inter=False, landmarks=True),
}

LOOP_KINDS = ("intra", "indirect", "direct_pose", "direct_range", "direct_br", "landmark")


class DatasetFormatError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    robots: int = 6
    length: int = 1000
    mobility: str = "planar"  # planar -> SE(2) states, free3d -> SE(3)
    intra_loop: bool = True
    direct_inter: str | None = None  # None | 'pose' | 'range' | 'bearing_range'
    indirect_inter: bool = True
    landmarks: bool = False
    n_landmarks: int = 20
    sigma_r_deg: float = 0.25  # roll/pitch (3D) or fallback yaw noise, degrees
    sigma_rz_deg: float = 1.0  # yaw noise, degrees
    sigma_t: float = 0.05  # translation noise, meters
    outlier_fraction: float = 0.15  # 0 disables; otherwise within [0.10, 0.25]
    obs_range: float = 30.0
    loop_prob: float = 0.2
    min_loop_gap: int = 10
    start_box: float = 20.0
    forward_prob: float = 0.6
    scenario: str = "cpgo"
    seed: int = 0

    def __post_init__(self):
        if self.mobility not in ("planar", "free3d"):
            raise ValueError(f"unknown mobility {self.mobility!r}")
        lo, hi = OUTLIER_FRACTION_BOUNDS
        if self.outlier_fraction != 0.0 and not lo <= self.outlier_fraction <= hi:
            raise ValueError(f"outlier fraction must be 0 or within [{lo}, {hi}]")
        if self.landmarks and self.n_landmarks <= 0:
            raise ValueError("landmark measurements enabled with zero landmarks")
        if self.direct_inter not in (None, "pose", "range", "bearing_range"):
            raise ValueError(f"unknown direct measurement type {self.direct_inter!r}")

    @classmethod
    def preset(cls, name, **overrides):
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        kw = dict(SCENARIOS[name])
        kw["scenario"] = name
        kw.update(overrides)
        return cls(**kw)

    @property
    def dim(self):
        return 2 if self.mobility == "planar" else 3

    @property
    def sigma_r(self):
        return math.radians(self.sigma_r_deg)

    @property
    def sigma_rz(self):
        return math.radians(self.sigma_rz_deg)

    def pose_sigmas(self):
        """Per-tangent-dim noise (rotation first) for relative-pose measurements."""
        if self.dim == 2:
            return np.array([self.sigma_rz, self.sigma_t, self.sigma_t])
        return np.array(
            [self.sigma_r, self.sigma_r, self.sigma_rz, self.sigma_t, self.sigma_t, self.sigma_t]
        )


@dataclass
class Measurement:
    step: int
    robot: int  # robot whose stream delivers this measurement
    kind: str  # 'odom' or one of LOOP_KINDS
    key_a: VariableKey
    key_b: VariableKey | None
    payload: np.ndarray
    sigmas: np.ndarray
    inlier: bool = True
    uid: tuple = ()

    @property
    def is_loop(self):
        return self.kind in LOOP_KINDS


@dataclass
class Dataset:
    dim: int
    robots: list
    gt: dict  # robot -> list of raw pose arrays
    landmarks_gt: dict  # landmark id -> point
    streams: dict  # robot -> list[Measurement] ordered by step
    meta: dict = field(default_factory=dict)

    @property
    def length(self):
        return max(len(v) for v in self.gt.values())

    def measurements_at(self, robot, step):
        return [m for m in self.streams[robot] if m.step == step]

    def gt_positions(self, step):
        out = {}
        for r in self.robots:
            traj = self.gt[r]
            raw = traj[min(step, len(traj) - 1)]
            out[r] = raw[1:3] if self.dim == 2 else raw[4:7]
        return out

    def gt_pose(self, robot, idx):
        return self.gt[robot][idx]

    def loop_measurements(self):
        for r in sorted(self.streams):
            for m in self.streams[r]:
                if m.is_loop:
                    yield m

    def outlier_count(self):
        loops = list(self.loop_measurements())
        return sum(1 for m in loops if not m.inlier), len(loops)


def _compose_raw(a, b, dim):
    from . import _kernels as K

    fn = K.se2_compose if dim == 2 else K.se3_compose
    return fn(a[None, :], b[None, :])[0]


def _relative_raw(a, b, dim):
    from . import _kernels as K

    if dim == 2:
        return K.se2_compose(K.se2_inverse(a[None, :]), b[None, :])[0]
    return K.se3_compose(K.se3_inverse(a[None, :]), b[None, :])[0]


def _exp_raw(v, dim):
    from . import _kernels as K

    fn = K.se2_exp if dim == 2 else K.se3_exp
    return fn(np.asarray(v, dtype=np.float64)[None, :])[0]


def _position(raw, dim):
    return raw[1:3] if dim == 2 else raw[4:7]


def _turn_actions(dim):
    if dim == 2:
        return [np.array([np.pi / 2, 0.0, 0.0]), np.array([-np.pi / 2, 0.0, 0.0])]
    acts = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            w = np.zeros(6)
            w[axis] = sign * np.pi / 2
            acts.append(w)
    return acts


def _forward(dim):
    if dim == 2:
        return np.array([0.0, 1.0, 0.0])
    v = np.zeros(6)
    v[3] = 1.0
    return v


def generate(cfg: ScenarioConfig) -> Dataset:
    """Deterministic dataset generation; a pure function of the config."""
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.dim
    robots = list(range(cfg.robots))
    turns = _turn_actions(dim)
    fwd = _forward(dim)
    n_actions = 1 + len(turns)
    p_fwd = cfg.forward_prob
    p_turn = (1.0 - p_fwd) / len(turns)

    # 3D mode adds yaw-only ground-truth turns unless free motion is requested;
    # free3d uses all axes per the action table above.
    gt = {}
    gt_rel = {}
    for r in robots:
        if dim == 2:
            start = np.array([rng.uniform(-np.pi, np.pi), *rng.uniform(0, cfg.start_box, 2)])
        else:
            from . import _kernels as K

            yaw = rng.uniform(-np.pi, np.pi)
            q = K.so3_exp(np.array([[0.0, 0.0, yaw]]))[0]
            start = np.concatenate([q, rng.uniform(0, cfg.start_box, 3)])
        traj = [start]
        rels = []
        for _ in range(cfg.length - 1):
            u = rng.random()
            if u < p_fwd:
                xi = fwd
            else:
                xi = turns[min(int((u - p_fwd) / p_turn), len(turns) - 1)]
            rel = _exp_raw(xi, dim)
            rels.append(rel)
            traj.append(_compose_raw(traj[-1], rel, dim))
        gt[r] = traj
        gt_rel[r] = rels

    positions = {r: np.array([_position(p, dim) for p in gt[r]]) for r in robots}

    landmarks_gt = {}
    if cfg.landmarks:
        for li in range(cfg.n_landmarks):
            r = int(rng.integers(0, cfg.robots))
            t = int(rng.integers(0, cfg.length))
            offset = rng.uniform(-0.5 * cfg.obs_range, 0.5 * cfg.obs_range, size=dim)
            landmarks_gt[li] = positions[r][t] + offset

    pose_sig = cfg.pose_sigmas()
    p = len(pose_sig)
    streams = {r: [] for r in robots}

    def noisy_rel(a_raw, b_raw):
        rel = _relative_raw(a_raw, b_raw, dim)
        eta = rng.normal(size=p) * pose_sig
        return _compose_raw(rel, _exp_raw(eta, dim), dim)

    # odometry
    for r in robots:
        for t in range(1, cfg.length):
            meas = _compose_raw(gt_rel[r][t - 1], _exp_raw(rng.normal(size=p) * pose_sig, dim), dim)
            streams[r].append(
                Measurement(t, r, "odom", pose_key(r, t - 1), pose_key(r, t), meas, pose_sig.copy())
            )

    loop_list = []

    def add_loop(robot, kind, key_a, key_b, payload, sigmas, step):
        m = Measurement(step, robot, kind, key_a, key_b, np.atleast_1d(payload), np.atleast_1d(sigmas))
        streams[robot].append(m)
        loop_list.append(m)

    for t in range(cfg.length):
        # intra-robot loop closures
        if cfg.intra_loop:
            for r in robots:
                if t < cfg.min_loop_gap:
                    continue
                cands = np.where(
                    np.linalg.norm(positions[r][: t - cfg.min_loop_gap + 1] - positions[r][t], axis=1)
                    <= cfg.obs_range
                )[0]
                if len(cands) and rng.random() < cfg.loop_prob:
                    past = int(cands[rng.integers(0, len(cands))])
                    add_loop(
                        r, "intra", pose_key(r, t), pose_key(r, past),
                        noisy_rel(gt[r][t], gt[r][past]), pose_sig.copy(), t,
                    )
        # indirect inter-robot loop closures (distributed loop-closure system)
        if cfg.indirect_inter:
            for r in robots:
                for o in robots:
                    if o == r:
                        continue
                    cands = np.where(
                        np.linalg.norm(positions[o][: t + 1] - positions[r][t], axis=1)
                        <= cfg.obs_range
                    )[0]
                    if len(cands) and rng.random() < cfg.loop_prob:
                        past = int(cands[rng.integers(0, len(cands))])
                        add_loop(
                            r, "indirect", pose_key(r, t), pose_key(o, past),
                            noisy_rel(gt[r][t], gt[o][past]), pose_sig.copy(), t,
                        )
        # direct robot-to-robot observations
        if cfg.direct_inter:
            for r in robots:
                for o in robots:
                    if o == r:
                        continue
                    rel_t = positions[o][t] - positions[r][t]
                    d = float(np.linalg.norm(rel_t))
                    if d > cfg.obs_range or d < 1e-6 or rng.random() >= cfg.loop_prob:
                        continue
                    if cfg.direct_inter == "pose":
                        add_loop(
                            r, "direct_pose", pose_key(r, t), pose_key(o, t),
                            noisy_rel(gt[r][t], gt[o][t]), pose_sig.copy(), t,
                        )
                    elif cfg.direct_inter == "range":
                        add_loop(
                            r, "direct_range", pose_key(r, t), pose_key(o, t),
                            d + rng.normal() * cfg.sigma_t, [cfg.sigma_t], t,
                        )
                    else:  # bearing_range (planar only)
                        from . import _kernels as K

                        th = gt[r][t][0]
                        c, s = np.cos(th), np.sin(th)
                        v = np.array([c * rel_t[0] + s * rel_t[1], -s * rel_t[0] + c * rel_t[1]])
                        bearing = float(K.wrap_angle(np.arctan2(v[1], v[0]) + rng.normal() * cfg.sigma_rz))
                        add_loop(
                            r, "direct_br", pose_key(r, t), pose_key(o, t),
                            [bearing, d + rng.normal() * cfg.sigma_t],
                            [cfg.sigma_rz, cfg.sigma_t], t,
                        )
        # landmark observations (point in observing frame)
        if cfg.landmarks:
            for r in robots:
                for li in sorted(landmarks_gt):
                    rel_t = landmarks_gt[li] - positions[r][t]
                    if np.linalg.norm(rel_t) > cfg.obs_range or rng.random() >= cfg.loop_prob:
                        continue
                    if dim == 2:
                        th = gt[r][t][0]
                        c, s = np.cos(th), np.sin(th)
                        v = np.array([c * rel_t[0] + s * rel_t[1], -s * rel_t[0] + c * rel_t[1]])
                    else:
                        from . import _kernels as K

                        v = K.quat_rotate(K.quat_conj(gt[r][t][None, :4]), rel_t[None, :])[0]
                    add_loop(
                        r, "landmark", pose_key(r, t), landmark_key(li),
                        v + rng.normal(size=dim) * cfg.sigma_t, [cfg.sigma_t] * dim, t,
                    )

    # outlier injection: replace a deterministic count of loop values with
    # uniformly random wrong ones (random wrong association / transform)
    if cfg.outlier_fraction > 0 and loop_list:
        all_pos = np.vstack([positions[r] for r in robots])
        lo, hi = all_pos.min(axis=0) - 5.0, all_pos.max(axis=0) + 5.0
        n_out = int(round(cfg.outlier_fraction * len(loop_list)))
        idx = rng.choice(len(loop_list), size=n_out, replace=False)
        for i in sorted(idx):
            m = loop_list[i]
            m.inlier = False
            if m.kind in ("intra", "indirect", "direct_pose"):
                if dim == 2:
                    m.payload = np.array([rng.uniform(-np.pi, np.pi), *rng.uniform(lo, hi)])
                else:
                    from . import _kernels as K

                    q = K.so3_exp(rng.normal(size=(1, 3)) * 2.0)[0]
                    m.payload = np.concatenate([q, rng.uniform(lo, hi)])
            elif m.kind == "direct_range":
                m.payload = np.array([rng.uniform(0.0, np.linalg.norm(hi - lo))])
            elif m.kind == "direct_br":
                m.payload = np.array(
                    [rng.uniform(-np.pi, np.pi), rng.uniform(0.0, np.linalg.norm(hi - lo))]
                )
            else:  # landmark
                m.payload = rng.uniform(-cfg.obs_range, cfg.obs_range, size=dim)

    for r in robots:
        streams[r].sort(key=lambda m: (m.step, m.kind, str(m.key_a), str(m.key_b)))
        for i, m in enumerate(streams[r]):
            m.uid = (r, i)

    meta = {
        "version": "1",
        "dim": str(dim),
        "scenario": cfg.scenario,
        "seed": str(cfg.seed),
        "robots": str(cfg.robots),
        "length": str(cfg.length),
    }
    return Dataset(dim, robots, gt, landmarks_gt, streams, meta)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------


def _fmt(x):
    return f"{float(x):.17g}"


def _pose_to_fields(raw, dim):
    if dim == 2:
        return [_fmt(raw[1]), _fmt(raw[2]), _fmt(raw[0])]  # x y theta
    return [_fmt(v) for v in (*raw[4:7], *raw[0:4])]  # x y z qw qx qy qz


def _pose_from_fields(fields, dim):
    vals = [float(v) for v in fields]
    if dim == 2:
        return np.array([vals[2], vals[0], vals[1]])
    return np.array([vals[3], vals[4], vals[5], vals[6], vals[0], vals[1], vals[2]])


def _pose_field_count(dim):
    return 3 if dim == 2 else 7


def save(ds: Dataset, path):
    lines = []
    for k in sorted(ds.meta):
        lines.append(f"META {k} {ds.meta[k]}")
    for r in ds.robots:
        lines.append(f"ROBOT {r}")
    for r in ds.robots:
        for i, raw in enumerate(ds.gt[r]):
            lines.append(f"GT_POSE {r} {i} " + " ".join(_pose_to_fields(raw, ds.dim)))
    for li in sorted(ds.landmarks_gt):
        lines.append(f"GT_LM {li} " + " ".join(_fmt(v) for v in ds.landmarks_gt[li]))
    for r in ds.robots:
        for m in ds.streams[r]:
            if m.kind == "odom":
                lines.append(
                    f"ODOM {r} {m.key_a.index} {m.key_b.index} "
                    + " ".join(_pose_to_fields(m.payload, ds.dim))
                    + " " + " ".join(_fmt(s) for s in m.sigmas)
                )
            else:
                payload = (
                    _pose_to_fields(m.payload, ds.dim)
                    if m.kind in ("intra", "indirect", "direct_pose")
                    else [_fmt(v) for v in m.payload]
                )
                lines.append(
                    f"LOOP {m.kind} {m.key_a} {m.key_b} "
                    + " ".join(payload)
                    + " " + " ".join(_fmt(s) for s in m.sigmas)
                    + f" {1 if m.inlier else 0}"
                )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path) -> Dataset:
    meta, gt, landmarks_gt = {}, {}, {}
    robots = []
    odoms, loops = [], []
    dim = None
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "META":
                    meta[parts[1]] = " ".join(parts[2:])
                    if parts[1] == "dim":
                        dim = int(parts[2])
                    if parts[1] == "version" and parts[2] != "1":
                        raise DatasetFormatError(f"line {ln}: unsupported version {parts[2]}")
                elif tag == "ROBOT":
                    robots.append(int(parts[1]))
                elif tag == "GT_POSE":
                    if dim is None:
                        raise DatasetFormatError(f"line {ln}: GT_POSE before META dim")
                    r, i = int(parts[1]), int(parts[2])
                    gt.setdefault(r, {})[i] = _pose_from_fields(parts[3:], dim)
                elif tag == "GT_LM":
                    landmarks_gt[int(parts[1])] = np.array([float(v) for v in parts[2:]])
                elif tag == "ODOM":
                    r, a, b = int(parts[1]), int(parts[2]), int(parts[3])
                    np_ = _pose_field_count(dim)
                    pose = _pose_from_fields(parts[4: 4 + np_], dim)
                    sig = np.array([float(v) for v in parts[4 + np_:]])
                    odoms.append((r, a, b, pose, sig))
                elif tag == "LOOP":
                    kind = parts[1]
                    if kind not in LOOP_KINDS:
                        raise DatasetFormatError(f"line {ln}: unknown loop type {kind!r}")
                    ka = VariableKey.parse(parts[2])
                    kb = VariableKey.parse(parts[3])
                    rest = parts[4:]
                    inlier = rest[-1]
                    if inlier not in ("0", "1"):
                        raise DatasetFormatError(f"line {ln}: inlier flag must be 0 or 1")
                    vals = [float(v) for v in rest[:-1]]
                    if kind in ("intra", "indirect", "direct_pose"):
                        np_ = _pose_field_count(dim)
                        payload = _pose_from_fields(rest[:np_], dim)
                        sig = np.array(vals[np_:])
                    else:
                        nd = {"direct_range": 1, "direct_br": 2, "landmark": dim}[kind]
                        payload = np.array(vals[:nd])
                        sig = np.array(vals[nd:])
                    loops.append((kind, ka, kb, payload, sig, inlier == "1"))
                else:
                    raise DatasetFormatError(f"line {ln}: unknown record tag {tag!r}")
            except DatasetFormatError:
                raise
            except Exception as exc:
                raise DatasetFormatError(f"line {ln}: malformed {tag} record ({exc})") from exc
    if dim is None:
        raise DatasetFormatError("missing META dim record")
    gt_lists = {r: [gt[r][i] for i in sorted(gt[r])] for r in gt}
    streams = {r: [] for r in robots}
    for r, a, b, pose, sig in odoms:
        streams[r].append(Measurement(b, r, "odom", pose_key(r, a), pose_key(r, b), pose, sig))
    for kind, ka, kb, payload, sig, inlier in loops:
        streams[ka.owner].append(
            Measurement(ka.index, ka.owner, kind, ka, kb, payload, sig, inlier)
        )
    for r in robots:
        streams[r].sort(key=lambda m: (m.step, m.kind, str(m.key_a), str(m.key_b)))
        for i, m in enumerate(streams[r]):
            m.uid = (r, i)
    return Dataset(dim, robots, gt_lists, landmarks_gt, streams, meta)
