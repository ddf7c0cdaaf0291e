"""Primitives on the rotation group SO(3).

Every function accepts a single 3x3 matrix or a stack with shape
``(..., 3, 3)`` and returns arrays of the matching leading shape. Rotation
matrices and skew matrices are plain float64 ndarrays; the validators in
this module check their invariants.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMatrix, NearPiSingularity

TOL_ORTH = 1e-9
TOL_DET = 1e-9
DELTA_THETA = 1e-6
SERIES_THETA = 1e-3

_Z_AXIS = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class AxisAngle:
    axis: tuple
    angle: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,):
            raise ValueError("axis must be a 3-vector")
        if not 0.0 <= self.angle <= np.pi:
            raise ValueError(f"angle {self.angle} outside [0, pi]")
        if self.angle > 0 and abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError("axis must be a unit vector")
        object.__setattr__(self, "axis", tuple(float(a) for a in axis))


def hat(v):
    """Map 3-vectors ``(..., 3)`` to skew matrices ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    a = np.zeros(v.shape[:-1] + (3, 3))
    a[..., 0, 1] = -v[..., 2]
    a[..., 0, 2] = v[..., 1]
    a[..., 1, 0] = v[..., 2]
    a[..., 1, 2] = -v[..., 0]
    a[..., 2, 0] = -v[..., 1]
    a[..., 2, 1] = v[..., 0]
    return a


def vee(a):
    """Inverse of :func:`hat`; reads the (3,2), (1,3), (2,1) entries."""
    a = np.asarray(a, dtype=float)
    return np.stack([a[..., 2, 1], a[..., 0, 2], a[..., 1, 0]], axis=-1)


def skew_part(x):
    return 0.5 * (x - np.swapaxes(x, -1, -2))


def orthogonality_error(r):
    """Frobenius norm of ``R^T R - I``."""
    r = np.asarray(r, dtype=float)
    resid = np.swapaxes(r, -1, -2) @ r - np.eye(3)
    return np.linalg.norm(resid, axis=(-2, -1))


def is_rotation(r, tol_orth=TOL_ORTH, tol_det=TOL_DET):
    r = np.asarray(r, dtype=float)
    if r.shape[-2:] != (3, 3) or not np.all(np.isfinite(r)):
        return False
    ok = orthogonality_error(r) < tol_orth
    ok &= np.abs(np.linalg.det(r) - 1.0) < tol_det
    return bool(np.all(ok))


def is_skew(a):
    a = np.asarray(a, dtype=float)
    return bool(np.all(a + np.swapaxes(a, -1, -2) == 0))


def rotation_angle(r):
    """Rotation angle in [0, pi] via the clamped arccos of the trace."""
    r = np.asarray(r, dtype=float)
    cos = (np.trace(r, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def _sign_fix(v):
    # first component with non-negligible magnitude made positive
    v = np.asarray(v, dtype=float)
    first = np.argmax(np.abs(v) > 1e-12, axis=-1)
    lead = np.take_along_axis(v, first[..., None], axis=-1)
    return np.where(lead < 0, -v, v)


def _axis_near_pi(r):
    # eigenvector of the symmetric part for its largest eigenvalue (+1)
    sym = 0.5 * (r + np.swapaxes(r, -1, -2))
    _, vecs = np.linalg.eigh(sym)
    return _sign_fix(vecs[..., :, -1])


def rotation_axis(r, delta=DELTA_THETA):
    """Unit rotation axis, with placeholder ``(0, 0, 1)`` for tiny angles.

    Near pi the sin-based formula loses all precision, so the axis is taken
    from the +1 eigenvector with its first nonzero component positive.
    """
    r = np.asarray(r, dtype=float)
    theta = rotation_angle(r)
    diff = np.stack(
        [
            r[..., 2, 1] - r[..., 1, 2],
            r[..., 0, 2] - r[..., 2, 0],
            r[..., 1, 0] - r[..., 0, 1],
        ],
        axis=-1,
    )
    small = theta <= delta
    near_pi = theta >= np.pi - delta
    regular = ~(small | near_pi)
    # diff = 2 sin(theta) axis; dividing by its norm rather than by sin of the
    # arccos angle keeps the axis unit length close to pi
    norm = np.where(regular, np.linalg.norm(diff, axis=-1), 1.0)
    axis = diff / norm[..., None]
    axis = np.where(small[..., None], _Z_AXIS, axis)
    if np.any(near_pi):
        axis = np.where(near_pi[..., None], _axis_near_pi(r), axis)
    return axis


def rotation_from_axis_angle(axis, angle=None):
    """Rodrigues formula ``I + sin(t) K + (1 - cos(t)) K^2``."""
    if isinstance(axis, AxisAngle):
        axis, angle = axis.axis, axis.angle
    axis = np.asarray(axis, dtype=float)
    angle = np.asarray(angle, dtype=float)
    k = hat(axis)
    s = np.sin(angle)[..., None, None]
    c = (1.0 - np.cos(angle))[..., None, None]
    return np.eye(3) + s * k + c * (k @ k)


def axis_angle_from_rotation(r):
    """Return ``(axis, angle)`` arrays."""
    return rotation_axis(r), rotation_angle(r)


def _half_theta_over_sin(theta):
    # theta / (2 sin theta) with a Taylor branch near zero
    small = theta < SERIES_THETA
    t2 = theta * theta
    series = 0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0
    safe = np.where(small, 1.0, theta)
    direct = safe / (2.0 * np.sin(safe))
    return np.where(small, series, direct)


def log_map(r, delta=DELTA_THETA):
    """Principal matrix logarithm of a rotation as a skew matrix.

    Raises:
        NearPiSingularity: if any angle is within ``delta`` of pi.
    """
    r = np.asarray(r, dtype=float)
    theta = rotation_angle(r)
    if np.any(theta >= np.pi - delta):
        raise NearPiSingularity(
            f"rotation angle {float(np.max(theta)):.12g} within {delta} of pi"
        )
    coef = _half_theta_over_sin(theta)
    return coef[..., None, None] * (r - np.swapaxes(r, -1, -2))


def log_map_fallback(r, delta=DELTA_THETA):
    """Like :func:`log_map` but total: near-pi entries use angle * hat(axis)."""
    r = np.asarray(r, dtype=float)
    theta = rotation_angle(r)
    near_pi = theta >= np.pi - delta
    if not np.any(near_pi):
        return log_map(r, delta)
    coef = _half_theta_over_sin(np.where(near_pi, 1.0, theta))
    out = coef[..., None, None] * (r - np.swapaxes(r, -1, -2))
    out[near_pi] = hat(_axis_near_pi(r[near_pi]) * theta[near_pi][..., None])
    return out


def exp_map(a):
    """Matrix exponential of a skew matrix via Rodrigues."""
    a = np.asarray(a, dtype=float)
    v = vee(a)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < SERIES_THETA
    t2 = theta * theta
    safe = np.where(small, 1.0, theta)
    # sin(t)/t and (1 - cos(t))/t^2
    s1 = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    s2 = np.where(
        small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / (safe * safe)
    )
    return np.eye(3) + s1[..., None, None] * a + s2[..., None, None] * (a @ a)


def frobenius_inner(a, b):
    """``trace(a^T b)`` over the last two axes."""
    return np.einsum("...ij,...ij->...", np.asarray(a, float), np.asarray(b, float))


def project_to_rotation(m, min_singular=1e-12):
    """Nearest rotation in Frobenius norm (SVD with determinant fix).

    Raises:
        DegenerateMatrix: if the smallest singular value is below
            ``min_singular`` or the input is not finite.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise DegenerateMatrix("non-finite matrix")
    u, s, vt = np.linalg.svd(m)
    if np.any(s[..., -1] <= min_singular):
        raise DegenerateMatrix(f"smallest singular value {float(np.min(s[..., -1])):.3g}")
    d = np.sign(np.linalg.det(u @ vt))
    u = u.copy()
    u[..., :, -1] *= d[..., None]
    return u @ vt


def tangent_project(w, g):
    """Tangent component ``W skew(W^T G)`` of an ambient gradient at ``W``."""
    w = np.asarray(w, dtype=float)
    return w @ skew_part(np.swapaxes(w, -1, -2) @ np.asarray(g, dtype=float))


def random_rotation(rng, size=None):
    """Haar-uniform rotation(s) from sign-corrected QR of Gaussian matrices.

    Args:
        rng: a ``numpy.random.Generator``.
        size: None for one matrix, an int or tuple for a stack.
    """
    shape = () if size is None else np.atleast_1d(size).tolist()
    g = rng.standard_normal(tuple(shape) + (3, 3))
    q, r = np.linalg.qr(g)
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    d = np.where(d == 0, 1.0, d)
    q = q * d[..., None, :]
    det = np.linalg.det(q)
    q[..., :, 0] *= np.sign(det)[..., None]
    return q


def geodesic_interpolate(r0, r1, t):
    """Point at fraction ``t`` along the geodesic from ``r0`` to ``r1``."""
    r0 = np.asarray(r0, dtype=float)
    r1 = np.asarray(r1, dtype=float)
    rel = r1 @ np.swapaxes(r0, -1, -2)
    t = np.asarray(t, dtype=float)
    return exp_map(t[..., None, None] * log_map(rel)) @ r0


def relative_angle(r0, r1):
    """Geodesic distance, the angle of ``r1 r0^T``."""
    return rotation_angle(np.asarray(r1) @ np.swapaxes(np.asarray(r0), -1, -2))
