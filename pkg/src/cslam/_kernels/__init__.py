"""Kernel backend selection.

Prefers the compiled extension (`cslam._kernels._native`) and falls back to the
pure-numpy implementation. Override with CSLAM_KERNELS=python|native.
"""
import os

from . import py_impl

_choice = os.environ.get("CSLAM_KERNELS", "auto").lower()

if _choice == "python":
    impl = py_impl
elif _choice == "native":
    from . import _native as impl  # raises if the extension was not built
else:
    try:
        from . import _native as impl
    except ImportError:
        impl = py_impl

BACKEND = impl.BACKEND

wrap_angle = impl.wrap_angle
se2_compose = impl.se2_compose
se2_inverse = impl.se2_inverse
se2_exp = impl.se2_exp
se2_log = impl.se2_log
se2_retract = impl.se2_retract
se2_logmap_jac = impl.se2_logmap_jac
se2_adjoint = impl.se2_adjoint
se2_prior_rj = impl.se2_prior_rj
se2_between_rj = impl.se2_between_rj
quat_mul = impl.quat_mul
quat_conj = impl.quat_conj
quat_normalize = impl.quat_normalize
quat_rotate = impl.quat_rotate
so3_exp = impl.so3_exp
so3_log = impl.so3_log
se3_compose = impl.se3_compose
se3_inverse = impl.se3_inverse
se3_exp = impl.se3_exp
se3_log = impl.se3_log
se3_retract = impl.se3_retract
