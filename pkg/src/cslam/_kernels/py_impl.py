"""Pure-numpy kernel backend.

Batched primitives for SE(2)/SE(3) and the residual/Jacobian kernels the solver
assembles in its inner loop. Layouts (float64 throughout):

  SE(2) pose     (n, 3)  [theta, x, y]
  SE(2) tangent  (n, 3)  [w, vx, vy]          (rotation first, then translation)
  SE(3) pose     (n, 7)  [qw, qx, qy, qz, x, y, z]
  SE(3) tangent  (n, 6)  [wx, wy, wz, vx, vy, vz]

The compiled backend in ``_native.pyx`` mirrors this module function-for-function.
"""
import numpy as np

BACKEND = "python"

_TWO_PI = 2.0 * np.pi
_SMALL = 1e-7


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), _TWO_PI)


# ---------------------------------------------------------------------------
# SE(2)
# ---------------------------------------------------------------------------

def se2_compose(a, b):
    th = a[:, 0]
    c, s = np.cos(th), np.sin(th)
    out = np.empty_like(a)
    out[:, 0] = wrap_angle(a[:, 0] + b[:, 0])
    out[:, 1] = a[:, 1] + c * b[:, 1] - s * b[:, 2]
    out[:, 2] = a[:, 2] + s * b[:, 1] + c * b[:, 2]
    return out


def se2_inverse(a):
    th = a[:, 0]
    c, s = np.cos(th), np.sin(th)
    out = np.empty_like(a)
    out[:, 0] = wrap_angle(-th)
    out[:, 1] = -(c * a[:, 1] + s * a[:, 2])
    out[:, 2] = -(-s * a[:, 1] + c * a[:, 2])
    return out


def _se2_v_coeffs(th):
    """Coefficients (A, B) of V(th) = [[A, -B], [B, A]]."""
    th = np.asarray(th, dtype=np.float64)
    small = np.abs(th) < _SMALL
    th_safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th * th / 6.0, np.sin(th_safe) / th_safe)
    b = np.where(small, th / 2.0 - th**3 / 24.0, (1.0 - np.cos(th_safe)) / th_safe)
    return a, b


def _se2_vinv_coeffs(th):
    """Coefficients (A, B) of V(th)^-1 = [[A, B], [-B, A]]; A=(th/2)cot(th/2), B=th/2."""
    th = np.asarray(th, dtype=np.float64)
    small = np.abs(th) < _SMALL
    half = 0.5 * th
    half_safe = np.where(small, 1.0, half)
    a = np.where(small, 1.0 - th * th / 12.0, half_safe / np.tan(half_safe))
    return a, half


def se2_exp(xi):
    th = xi[:, 0]
    a, b = _se2_v_coeffs(th)
    out = np.empty_like(xi)
    out[:, 0] = wrap_angle(th)
    out[:, 1] = a * xi[:, 1] - b * xi[:, 2]
    out[:, 2] = b * xi[:, 1] + a * xi[:, 2]
    return out


def se2_log(p):
    th = wrap_angle(p[:, 0])
    a, b = _se2_vinv_coeffs(th)
    out = np.empty_like(p)
    out[:, 0] = th
    out[:, 1] = a * p[:, 1] + b * p[:, 2]
    out[:, 2] = -b * p[:, 1] + a * p[:, 2]
    return out


def se2_retract(p, xi):
    return se2_compose(p, se2_exp(xi))


def se2_logmap_jac(d):
    """Jacobian of log(d * Exp(delta)) w.r.t. delta at delta = 0.

    Row 0 is [1, 0, 0]; the translation rows are [W(phi) t | Vinv(phi) R(phi)].
    """
    n = d.shape[0]
    phi = wrap_angle(d[:, 0])
    tx, ty = d[:, 1], d[:, 2]
    a, b = _se2_vinv_coeffs(phi)  # Vinv = [[a, b], [-b, a]]
    # da/dphi with series fallback near 0
    small = np.abs(phi) < 1e-4
    half = 0.5 * phi
    half_safe = np.where(small, 1.0, half)
    cot = np.where(small, 0.0, 1.0 / np.tan(half_safe))
    aprime = np.where(
        small,
        -phi / 6.0 - phi**3 / 180.0,
        0.5 * cot - 0.25 * phi * (1.0 + cot * cot),
    )
    c, s = np.cos(phi), np.sin(phi)
    out = np.zeros((n, 3, 3))
    out[:, 0, 0] = 1.0
    # W(phi) t, with W = [[a', 1/2], [-1/2, a']]
    out[:, 1, 0] = aprime * tx + 0.5 * ty
    out[:, 2, 0] = -0.5 * tx + aprime * ty
    # Vinv(phi) R(phi)
    out[:, 1, 1] = a * c + b * s
    out[:, 1, 2] = -a * s + b * c
    out[:, 2, 1] = -b * c + a * s
    out[:, 2, 2] = b * s + a * c
    return out


def se2_adjoint(p):
    """Adjoint matrix in [w, v] tangent ordering: [[1, 0], [-J t, R]]."""
    n = p.shape[0]
    c, s = np.cos(p[:, 0]), np.sin(p[:, 0])
    out = np.zeros((n, 3, 3))
    out[:, 0, 0] = 1.0
    out[:, 1, 0] = p[:, 2]
    out[:, 2, 0] = -p[:, 1]
    out[:, 1, 1] = c
    out[:, 1, 2] = -s
    out[:, 2, 1] = s
    out[:, 2, 2] = c
    return out


def se2_prior_rj(p, m, want_jac):
    """Residual log(m^-1 p) and its Jacobian w.r.t. a right perturbation of p."""
    d = se2_compose(se2_inverse(m), p)
    r = se2_log(d)
    if not want_jac:
        return r, None
    return r, se2_logmap_jac(d)


def se2_between_rj(a, b, m, want_jac):
    """Residual log(m^-1 (a^-1 b)) with Jacobians w.r.t. right perturbations of a, b."""
    e = se2_compose(se2_inverse(a), b)
    d = se2_compose(se2_inverse(m), e)
    r = se2_log(d)
    if not want_jac:
        return r, None, None
    jb = se2_logmap_jac(d)
    ja = -np.matmul(jb, se2_adjoint(se2_inverse(e)))
    return r, ja, jb


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------

def quat_mul(q1, q2):
    w1, x1, y1, z1 = q1[:, 0], q1[:, 1], q1[:, 2], q1[:, 3]
    w2, x2, y2, z2 = q2[:, 0], q2[:, 1], q2[:, 2], q2[:, 3]
    out = np.empty_like(q1)
    out[:, 0] = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    out[:, 1] = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    out[:, 2] = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    out[:, 3] = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    return out


def quat_conj(q):
    out = q.copy()
    out[:, 1:] *= -1.0
    return out


def quat_normalize(q):
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_rotate(q, v):
    """Rotate vectors v by unit quaternions q."""
    u = q[:, 1:]
    w = q[:, 0:1]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def so3_exp(w):
    th = np.linalg.norm(w, axis=1)
    small = th < _SMALL
    th_safe = np.where(small, 1.0, th)
    half = 0.5 * th
    k = np.where(small, 0.5 - th * th / 48.0, np.sin(0.5 * th_safe) / th_safe)
    q = np.empty((w.shape[0], 4))
    q[:, 0] = np.cos(half)
    q[:, 1:] = w * k[:, None]
    return q


def so3_log(q):
    q = np.where(q[:, 0:1] < 0.0, -q, q)  # principal branch
    s = np.linalg.norm(q[:, 1:], axis=1)
    w = np.clip(q[:, 0], -1.0, 1.0)
    th = 2.0 * np.arctan2(s, w)
    small = s < _SMALL
    s_safe = np.where(small, 1.0, s)
    k = np.where(small, 2.0 / np.where(np.abs(w) < 1e-12, 1.0, w), th / s_safe)
    return q[:, 1:] * k[:, None]


def _skew(w):
    n = w.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -w[:, 2]
    out[:, 0, 2] = w[:, 1]
    out[:, 1, 0] = w[:, 2]
    out[:, 1, 2] = -w[:, 0]
    out[:, 2, 0] = -w[:, 1]
    out[:, 2, 1] = w[:, 0]
    return out


def _so3_left_jacobian_terms(w):
    """V and V^-1 for the SE(3) exp/log translation coupling."""
    th2 = np.sum(w * w, axis=1)
    th = np.sqrt(th2)
    small = th < _SMALL
    th2_safe = np.where(small, 1.0, th2)
    th_safe = np.where(small, 1.0, th)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(th_safe)) / th2_safe)
    c = np.where(small, 1.0 / 6.0 - th2 / 120.0, (th_safe - np.sin(th_safe)) / (th2_safe * th_safe))
    # D for Vinv = I - 1/2 W + D W^2
    half = 0.5 * th_safe
    d = np.where(
        small,
        1.0 / 12.0 + th2 / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / th2_safe,
    )
    omega = _skew(w)
    omega2 = np.matmul(omega, omega)
    eye = np.broadcast_to(np.eye(3), omega.shape)
    v = eye + b[:, None, None] * omega + c[:, None, None] * omega2
    vinv = eye - 0.5 * omega + d[:, None, None] * omega2
    return v, vinv


def se3_compose(a, b):
    out = np.empty_like(a)
    out[:, :4] = quat_normalize(quat_mul(a[:, :4], b[:, :4]))
    out[:, 4:] = a[:, 4:] + quat_rotate(a[:, :4], b[:, 4:])
    return out


def se3_inverse(a):
    out = np.empty_like(a)
    qc = quat_conj(a[:, :4])
    out[:, :4] = qc
    out[:, 4:] = -quat_rotate(qc, a[:, 4:])
    return out


def se3_exp(xi):
    w, v = xi[:, :3], xi[:, 3:]
    q = so3_exp(w)
    vmat, _ = _so3_left_jacobian_terms(w)
    out = np.empty((xi.shape[0], 7))
    out[:, :4] = q
    out[:, 4:] = np.einsum("nij,nj->ni", vmat, v)
    return out


def se3_log(p):
    w = so3_log(quat_normalize(p[:, :4]))
    _, vinv = _so3_left_jacobian_terms(w)
    out = np.empty((p.shape[0], 6))
    out[:, :3] = w
    out[:, 3:] = np.einsum("nij,nj->ni", vinv, p[:, 4:])
    return out


def se3_retract(p, xi):
    return se3_compose(p, se3_exp(xi))
