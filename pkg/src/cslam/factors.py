"""Factor-graph measurement model: variables, noise, robust kernels, residuals.

Factors evaluate whitened residuals against a mapping VariableKey -> packed
state array (pose layouts per `manifold`, landmarks as plain points). Jacobians
default to central finite differences on the retraction; analytic forms exist
for the SE(2) hot path and must agree with the numeric ones to 1e-5 relative
(enforced by the test suite).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize as _sopt
from scipy import stats as _sstats

from . import _kernels as K
from . import manifold as mf

ENV_OWNER = -1
FD_STEP = 1e-6


@dataclass(frozen=True, order=True)
class VariableKey:
    """(owner, kind, index); owner is a robot id or ENV_OWNER, kind 'p' or 'l'."""

    owner: int
    kind: str
    index: int

    def __str__(self):
        o = "env" if self.owner == ENV_OWNER else f"r{self.owner}"
        return f"{o}/{self.kind}/{self.index}"

    @classmethod
    def parse(cls, text):
        o, k, i = text.split("/")
        owner = ENV_OWNER if o == "env" else int(o.lstrip("r"))
        return cls(owner, k, int(i))


def pose_key(robot, index):
    return VariableKey(robot, "p", index)


def landmark_key(index):
    return VariableKey(ENV_OWNER, "l", index)


class NoiseModel:
    """Gaussian noise model; diagonal (per-dim sigmas) or full covariance."""

    __slots__ = ("sigmas", "_sqrt_info")

    def __init__(self, sigmas=None, covariance=None):
        if (sigmas is None) == (covariance is None):
            raise ValueError("provide exactly one of sigmas / covariance")
        if sigmas is not None:
            s = np.atleast_1d(np.asarray(sigmas, dtype=np.float64))
            if np.any(s <= 0):
                raise ValueError("sigmas must be positive")
            self.sigmas = s
            self._sqrt_info = None
        else:
            cov = np.asarray(covariance, dtype=np.float64)
            low = np.linalg.cholesky(cov)  # raises if not positive definite
            self.sigmas = None
            self._sqrt_info = np.linalg.inv(low)

    @classmethod
    def isotropic(cls, dim, sigma):
        return cls(sigmas=np.full(dim, float(sigma)))

    @property
    def dim(self):
        return len(self.sigmas) if self.sigmas is not None else self._sqrt_info.shape[0]

    def whiten(self, r):
        if self.sigmas is not None:
            return r / self.sigmas
        return self._sqrt_info @ r

    def unwhiten(self, r):
        if self.sigmas is not None:
            return r * self.sigmas
        return np.linalg.solve(self._sqrt_info, r)

    def whiten_jac(self, j):
        if self.sigmas is not None:
            return j / self.sigmas[:, None]
        return self._sqrt_info @ j


@dataclass(frozen=True)
class RobustKernel:
    """rho applied to squared whitened residual norms.

    variants: 'none' (quadratic), 'geman_mcclure' (shape c), 'graduated'
    (continuation family: mu=0 quadratic, mu=1 the Geman-McClure target whose
    shape is calibrated so influence(chi2(dim, 0.95)) = 0.1).
    """

    variant: str = "none"
    c: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.variant not in ("none", "geman_mcclure", "graduated"):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant != "none" and self.c <= 0:
            raise ValueError("shape parameter must be positive")

    @property
    def is_robust(self):
        return self.variant != "none"


NONE_KERNEL = RobustKernel()


def geman_mcclure(c):
    return RobustKernel("geman_mcclure", c=float(c))


def graduated(mu, c):
    return RobustKernel("graduated", c=float(c), mu=float(mu))


def kernel_value(k: RobustKernel, r2, mu=None):
    """rho(r2) for the kernel; `mu` overrides the graduated stage."""
    r2 = np.asarray(r2, dtype=np.float64)
    if k.variant == "none":
        return r2
    c2 = k.c * k.c
    if k.variant == "geman_mcclure":
        return c2 * r2 / (c2 + r2)
    m = k.mu if mu is None else mu
    return c2 * r2 / (c2 + m * r2)


def kernel_influence(k: RobustKernel, r2, mu=None):
    """d rho / d r2: the weight applied to a factor in IRLS."""
    r2 = np.asarray(r2, dtype=np.float64)
    if k.variant == "none":
        return np.ones_like(r2)
    c2 = k.c * k.c
    if k.variant == "geman_mcclure":
        return (c2 / (c2 + r2)) ** 2
    m = k.mu if mu is None else mu
    return (c2 / (c2 + m * r2)) ** 2


def chi2_threshold(dim, t):
    """chi-square quantile used by the joint-consistency tests."""
    if not 0.0 < t < 1.0:
        raise ValueError("probability threshold must be in (0, 1)")
    if dim < 1:
        raise ValueError("dimension must be a positive integer")
    return _chi2_cached(int(dim), float(t))


@functools.lru_cache(maxsize=None)
def _chi2_cached(dim, t):
    return float(_sstats.chi2.ppf(t, dim))


@functools.lru_cache(maxsize=None)
def graduated_shape(dim, influence_target=0.1, t=0.95):
    """Shape c such that the mu=1 kernel has the target influence at chi2(dim, t).

    influence(s) = (c^2/(c^2+s))^2 = target  =>  c^2 = s*sqrt(target)/(1-sqrt(target));
    solved numerically to stay faithful to the calibration statement.
    """
    s_star = chi2_threshold(dim, t)

    def f(c):
        return kernel_influence(RobustKernel("graduated", c=c, mu=1.0), s_star) - influence_target

    sol = _sopt.brentq(f, 1e-4, 1e4)
    return float(sol)


@dataclass(frozen=True)
class Factor:
    """One measurement term.

    kinds: prior_pose, between_pose, range, bearing_range, landmark_obs.
    `measurement` is packed: pose array for pose kinds, float for range,
    [bearing, range] for bearing_range, point-in-frame for landmark_obs.
    `dim` is the spatial dimension (2 or 3) of any pose variables involved.
    """

    kind: str
    keys: tuple
    measurement: np.ndarray
    noise: NoiseModel
    kernel: RobustKernel = NONE_KERNEL
    outlier_candidate: bool = False
    dim: int = 2

    def residual_dim(self):
        return self.noise.dim

    def with_kernel(self, kernel, candidate=None):
        return replace(
            self,
            kernel=kernel,
            outlier_candidate=self.outlier_candidate if candidate is None else candidate,
        )


def _as_raw(m, dim):
    if isinstance(m, mf.Pose):
        return m.raw()
    return np.asarray(m, dtype=np.float64)


def prior_factor(key, pose, sigmas, dim=2, **kw):
    return Factor("prior_pose", (key,), _as_raw(pose, dim), NoiseModel(sigmas=sigmas), dim=dim, **kw)


def between_factor(key_a, key_b, rel_pose, sigmas, dim=2, **kw):
    return Factor(
        "between_pose", (key_a, key_b), _as_raw(rel_pose, dim), NoiseModel(sigmas=sigmas), dim=dim, **kw
    )


def range_factor(key_a, key_b, distance, sigma, dim=2, **kw):
    return Factor(
        "range", (key_a, key_b), np.array([float(distance)]), NoiseModel(sigmas=[sigma]), dim=dim, **kw
    )


def bearing_range_factor(key_a, key_b, bearing, distance, sigmas, dim=2, **kw):
    if dim != 2:
        raise ValueError("bearing_range factors are planar-only")
    return Factor(
        "bearing_range",
        (key_a, key_b),
        np.array([float(bearing), float(distance)]),
        NoiseModel(sigmas=sigmas),
        dim=dim,
        **kw,
    )


def landmark_factor(pose_key_, lm_key, point_in_frame, sigmas, dim=2, **kw):
    return Factor(
        "landmark_obs",
        (pose_key_, lm_key),
        np.asarray(point_in_frame, dtype=np.float64),
        NoiseModel(sigmas=sigmas),
        dim=dim,
        **kw,
    )


def point_prior_factor(key, value, sigmas, dim=2, **kw):
    """Linear prior on a vector variable (landmarks, scalar test problems)."""
    return Factor(
        "point_prior", (key,), np.atleast_1d(np.asarray(value, dtype=np.float64)),
        NoiseModel(sigmas=sigmas), dim=dim, **kw
    )


def point_between_factor(key_a, key_b, diff, sigmas, dim=2, **kw):
    """Linear relative measurement b - a between vector variables."""
    return Factor(
        "point_between", (key_a, key_b), np.atleast_1d(np.asarray(diff, dtype=np.float64)),
        NoiseModel(sigmas=sigmas), dim=dim, **kw
    )


def state_size(key: VariableKey, dim):
    return mf.pose_size(dim) if key.kind == "p" else dim


def local_size(key: VariableKey, dim):
    """Tangent dimension of a variable (pose: p, landmark: dim)."""
    return mf.tangent_dim(dim) if key.kind == "p" else dim


def retract_state(key: VariableKey, x, delta, dim):
    if key.kind == "p":
        fn = K.se2_retract if dim == 2 else K.se3_retract
        return fn(x[None, :], delta[None, :])[0]
    return x + delta


def _translation(x, dim):
    return x[1:3] if dim == 2 else x[4:7]


def _check_keys(f, values):
    for k in f.keys:
        if k not in values:
            raise KeyError(f"factor references missing variable {k}")


def residual(f: Factor, values) -> np.ndarray:
    """Whitened residual of the factor at the given variable assignment."""
    _check_keys(f, values)
    dim = f.dim
    if f.kind == "prior_pose":
        x = np.asarray(values[f.keys[0]])
        if dim == 2:
            r, _ = K.se2_prior_rj(x[None, :], f.measurement[None, :], False)
            raw = r[0]
        else:
            d = K.se3_compose(K.se3_inverse(f.measurement[None, :]), x[None, :])
            raw = K.se3_log(d)[0]
    elif f.kind == "between_pose":
        a = np.asarray(values[f.keys[0]])[None, :]
        b = np.asarray(values[f.keys[1]])[None, :]
        if dim == 2:
            r, _, _ = K.se2_between_rj(a, b, f.measurement[None, :], False)
            raw = r[0]
        else:
            e = K.se3_compose(K.se3_inverse(a), b)
            raw = K.se3_log(K.se3_compose(K.se3_inverse(f.measurement[None, :]), e))[0]
    elif f.kind == "range":
        ta = _point_of(values[f.keys[0]], f.keys[0], dim)
        tb = _point_of(values[f.keys[1]], f.keys[1], dim)
        d = np.linalg.norm(tb - ta)
        if d < 1e-12:
            raise ValueError("range residual undefined for coincident points")
        raw = np.array([d - f.measurement[0]])
    elif f.kind == "bearing_range":
        raw = _bearing_range_raw(f, values)
    elif f.kind == "landmark_obs":
        x = np.asarray(values[f.keys[0]])
        lm = np.asarray(values[f.keys[1]])
        rel = lm - _translation(x, dim)
        if dim == 2:
            c, s = np.cos(x[0]), np.sin(x[0])
            pred = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]])
        else:
            pred = K.quat_rotate(K.quat_conj(x[None, :4]), rel[None, :])[0]
        raw = pred - f.measurement
    elif f.kind == "point_prior":
        raw = np.atleast_1d(np.asarray(values[f.keys[0]])) - f.measurement
    elif f.kind == "point_between":
        a = np.atleast_1d(np.asarray(values[f.keys[0]]))
        b = np.atleast_1d(np.asarray(values[f.keys[1]]))
        raw = (b - a) - f.measurement
    else:
        raise ValueError(f"unknown factor kind {f.kind!r}")
    if raw.shape[0] != f.noise.dim:
        raise ValueError(f"residual dim {raw.shape[0]} != noise dim {f.noise.dim}")
    return f.noise.whiten(raw)


def _point_of(x, key, dim):
    x = np.asarray(x)
    return _translation(x, dim) if key.kind == "p" else x


def _bearing_range_raw(f, values):
    x = np.asarray(values[f.keys[0]])
    tb = _point_of(values[f.keys[1]], f.keys[1], 2)
    rel = tb - x[1:3]
    d = np.linalg.norm(rel)
    if d < 1e-12:
        raise ValueError("bearing-range residual undefined for coincident points")
    c, s = np.cos(x[0]), np.sin(x[0])
    v = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]])
    bearing = np.arctan2(v[1], v[0])
    return np.array([K.wrap_angle(bearing - f.measurement[0]), d - f.measurement[1]])


def jacobian_fd(f: Factor, values, step=FD_STEP):
    """Central finite differences on the retraction; the default and the oracle."""
    _check_keys(f, values)
    out = {}
    base = {k: np.atleast_1d(np.asarray(values[k], dtype=np.float64)) for k in f.keys}
    for key in f.keys:
        n = mf.tangent_dim(f.dim) if key.kind == "p" else len(base[key])
        cols = []
        for i in range(n):
            delta = np.zeros(n)
            delta[i] = step
            vp = dict(base)
            vp[key] = retract_state(key, base[key], delta, f.dim)
            rp = residual(f, vp)
            vp[key] = retract_state(key, base[key], -delta, f.dim)
            rm = residual(f, vp)
            diff = rp - rm
            if f.kind == "bearing_range":
                diff[0] = K.wrap_angle(diff[0] * f.noise.sigmas[0]) / f.noise.sigmas[0]
            cols.append(diff / (2.0 * step))
        out[key] = np.stack(cols, axis=1)
    return out


def jacobian(f: Factor, values, analytic=None):
    """Per-variable whitened Jacobians. analytic=None auto-selects the SE(2)
    closed forms where implemented, True forces them, False forces FD."""
    if analytic is None:
        analytic = f.kind in ("point_prior", "point_between") or (
            f.dim == 2 and f.kind in _ANALYTIC_KINDS
        )
    if not analytic:
        return jacobian_fd(f, values)
    return _ANALYTIC_KINDS[f.kind](f, values)


def _jac_prior_se2(f, values):
    _check_keys(f, values)
    x = np.asarray(values[f.keys[0]])[None, :]
    _, j = K.se2_prior_rj(x, f.measurement[None, :], True)
    return {f.keys[0]: f.noise.whiten_jac(j[0])}


def _jac_between_se2(f, values):
    _check_keys(f, values)
    a = np.asarray(values[f.keys[0]])[None, :]
    b = np.asarray(values[f.keys[1]])[None, :]
    _, ja, jb = K.se2_between_rj(a, b, f.measurement[None, :], True)
    return {f.keys[0]: f.noise.whiten_jac(ja[0]), f.keys[1]: f.noise.whiten_jac(jb[0])}


def _jac_range_se2(f, values):
    _check_keys(f, values)
    out = {}
    pa = _point_of(values[f.keys[0]], f.keys[0], 2)
    pb = _point_of(values[f.keys[1]], f.keys[1], 2)
    rel = pb - pa
    d = np.linalg.norm(rel)
    if d < 1e-12:
        raise ValueError("range residual undefined for coincident points")
    u = rel / d
    sig = f.noise.sigmas[0]
    for key, point, sign in ((f.keys[0], pa, -1.0), (f.keys[1], pb, 1.0)):
        if key.kind == "p":
            x = np.asarray(values[key])
            c, s = np.cos(x[0]), np.sin(x[0])
            rmat = np.array([[c, -s], [s, c]])
            j = np.zeros((1, 3))
            j[0, 1:] = sign * (u @ rmat)
        else:
            j = (sign * u)[None, :]
        out[key] = j / sig
    return out


def _jac_bearing_range_se2(f, values):
    _check_keys(f, values)
    x = np.asarray(values[f.keys[0]])
    tb = _point_of(values[f.keys[1]], f.keys[1], 2)
    rel = tb - x[1:3]
    d = np.linalg.norm(rel)
    if d < 1e-12:
        raise ValueError("bearing-range residual undefined for coincident points")
    c, s = np.cos(x[0]), np.sin(x[0])
    rt = np.array([[c, s], [-s, c]])  # R(theta)^T
    v = rt @ rel
    jv = np.array([-v[1], v[0]])
    d2 = d * d
    # d bearing / d v and d range / d v
    db_dv = jv / d2
    dr_dv = v / d
    ja = np.zeros((2, 3))
    # dv/dtheta = -J v ; dv/dtrans(local) = -I
    ja[0, 0] = db_dv @ (-jv)
    ja[1, 0] = dr_dv @ (-jv)
    ja[0, 1:] = -db_dv
    ja[1, 1:] = -dr_dv
    out = {f.keys[0]: f.noise.whiten_jac(ja)}
    key_b = f.keys[1]
    if key_b.kind == "p":
        xb = np.asarray(values[key_b])
        cb, sb = np.cos(xb[0]), np.sin(xb[0])
        rb = rt @ np.array([[cb, -sb], [sb, cb]])
        jb = np.zeros((2, 3))
        jb[0, 1:] = db_dv @ rb
        jb[1, 1:] = dr_dv @ rb
    else:
        jb = np.vstack([db_dv @ rt, dr_dv @ rt])
    out[key_b] = f.noise.whiten_jac(jb)
    return out


def _jac_point_prior(f, values):
    _check_keys(f, values)
    n = len(f.measurement)
    return {f.keys[0]: f.noise.whiten_jac(np.eye(n))}


def _jac_point_between(f, values):
    _check_keys(f, values)
    n = len(f.measurement)
    return {
        f.keys[0]: f.noise.whiten_jac(-np.eye(n)),
        f.keys[1]: f.noise.whiten_jac(np.eye(n)),
    }


def _jac_landmark_se2(f, values):
    _check_keys(f, values)
    x = np.asarray(values[f.keys[0]])
    lm = np.asarray(values[f.keys[1]])
    rel = lm - x[1:3]
    c, s = np.cos(x[0]), np.sin(x[0])
    rt = np.array([[c, s], [-s, c]])
    v = rt @ rel
    ja = np.zeros((2, 3))
    ja[:, 0] = np.array([v[1], -v[0]])  # -J v
    ja[:, 1:] = -np.eye(2)
    return {
        f.keys[0]: f.noise.whiten_jac(ja),
        f.keys[1]: f.noise.whiten_jac(rt),
    }


_ANALYTIC_KINDS = {
    "prior_pose": _jac_prior_se2,
    "between_pose": _jac_between_se2,
    "range": _jac_range_se2,
    "bearing_range": _jac_bearing_range_se2,
    "landmark_obs": _jac_landmark_se2,
    "point_prior": _jac_point_prior,
    "point_between": _jac_point_between,
}
