import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from lienet import liegroup as lg
from lienet.errors import DegenerateMatrix, NearPiSingularity

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
mat3 = arrays(np.float64, (3, 3), elements=finite)


def rot_z(t):
    return lg.rotation_from_axis_angle([0.0, 0.0, 1.0], t)


def random_axis_angle(rng, n, lo=0.0, hi=np.pi):
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis, rng.uniform(lo, hi, n)


@st.composite
def rotations(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    return lg.random_rotation(np.random.default_rng(seed))


# -- axis-angle, angle, axis ---------------------------------------------------

def test_axis_angle_zero_is_identity():
    np.testing.assert_array_equal(lg.rotation_from_axis_angle(lg.AxisAngle((0, 0, 1), 0.0)), np.eye(3))


def test_axis_angle_z_quarter_turn():
    np.testing.assert_allclose(rot_z(np.pi / 2), RZ90, atol=1e-15)


def test_axis_angle_round_trip_1000():
    rng = np.random.default_rng(1)
    # keep clear of both branch points where the axis is a placeholder or sign-fixed
    axis, angle = random_axis_angle(rng, 1000, 1e-3, np.pi - 1e-3)
    r = lg.rotation_from_axis_angle(axis, angle)
    assert lg.is_rotation(r)
    np.testing.assert_allclose(lg.rotation_angle(r), angle, atol=1e-9)
    axis2, angle2 = lg.axis_angle_from_rotation(r)
    np.testing.assert_allclose(angle2, angle, atol=1e-8)
    np.testing.assert_allclose(axis2, axis, atol=1e-8)


def test_axis_unit_norm_near_pi():
    rng = np.random.default_rng(7)
    axis, _ = random_axis_angle(rng, 2000)
    angle = np.pi - 10.0 ** rng.uniform(-5.9, -1, 2000)
    got = lg.rotation_axis(lg.rotation_from_axis_angle(axis, angle))
    assert np.abs(np.linalg.norm(got, axis=1) - 1.0).max() < 1e-12
    assert lg.orthogonality_error(lg.rotation_from_axis_angle(got, angle)).max() < 1e-12


def test_axis_angle_rejects_non_unit_axis():
    with pytest.raises(ValueError):
        lg.AxisAngle((1.0, 1.0, 0.0), 0.3)
    with pytest.raises(ValueError):
        lg.AxisAngle((0.0, 0.0, 1.0), 4.0)


def test_rotation_angle_examples():
    assert lg.rotation_angle(np.eye(3)) == 0.0
    assert lg.rotation_angle(RZ90) == pytest.approx(np.pi / 2, abs=1e-15)


def test_rotation_angle_clamps_trace_above_three():
    r = np.eye(3)
    r[0, 0] += 1e-15
    theta = lg.rotation_angle(r)
    assert theta == 0.0 and not np.isnan(theta)


def test_rotation_axis_examples():
    np.testing.assert_allclose(lg.rotation_axis(RZ90), [0, 0, 1], atol=1e-15)
    np.testing.assert_array_equal(lg.rotation_axis(np.eye(3)), [0, 0, 1])
    rx_pi = lg.rotation_from_axis_angle([1.0, 0.0, 0.0], np.pi)
    np.testing.assert_allclose(lg.rotation_axis(rx_pi), [1, 0, 0], atol=1e-12)


def test_rotation_axis_near_pi_matches_eigenvector():
    rng = np.random.default_rng(2)
    axis, _ = random_axis_angle(rng, 200)
    r = lg.rotation_from_axis_angle(axis, np.full(200, np.pi - 1e-8))
    got = lg.rotation_axis(r)
    for a, g, m in zip(axis, got, r):
        w, v = np.linalg.eig(m)
        e = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        # eigenvector oracle up to sign; the first nonzero component is positive
        assert abs(abs(e @ g) - 1.0) < 1e-6
        assert abs(abs(a @ g) - 1.0) < 1e-6
        lead = g[np.argmax(np.abs(g) > 1e-12)]
        assert lead > 0


# -- log / exp -----------------------------------------------------------------

def test_log_identity_is_zero():
    np.testing.assert_array_equal(lg.log_map(np.eye(3)), np.zeros((3, 3)))


def test_log_z_quarter_turn():
    h = np.pi / 2
    np.testing.assert_allclose(lg.log_map(RZ90), [[0, -h, 0], [h, 0, 0], [0, 0, 0]], atol=1e-15)


def test_log_series_and_direct_branch_agree():
    r = lg.rotation_from_axis_angle([0.6, 0.0, 0.8], 1e-5)
    theta = lg.rotation_angle(r)
    series = lg.log_map(r)
    direct = theta / (2 * np.sin(theta)) * (r - r.T)
    np.testing.assert_allclose(series, direct, atol=1e-12)


def test_log_raises_near_pi():
    with pytest.raises(NearPiSingularity):
        lg.log_map(rot_z(np.pi - 1e-7))


def test_log_fallback_is_total_near_pi():
    r = rot_z(np.pi - 1e-7)
    out = lg.log_map_fallback(r)
    assert lg.is_skew(out)
    np.testing.assert_allclose(lg.vee(out), [0, 0, np.pi - 1e-7], atol=1e-6)


def test_exp_examples():
    np.testing.assert_array_equal(lg.exp_map(np.zeros((3, 3))), np.eye(3))
    np.testing.assert_allclose(lg.exp_map(lg.hat([0, 0, np.pi / 2])), RZ90, atol=1e-15)


def test_exp_log_round_trip_1000():
    rng = np.random.default_rng(3)
    axis, angle = random_axis_angle(rng, 1000, 0.0, np.pi - 0.01)
    r = lg.rotation_from_axis_angle(axis, angle)
    np.testing.assert_allclose(lg.exp_map(lg.log_map(r)), r, atol=1e-8)


def test_log_exp_round_trip_1000():
    rng = np.random.default_rng(4)
    axis, angle = random_axis_angle(rng, 1000, 0.0, np.pi - 0.01)
    a = lg.hat(axis * angle[:, None])
    np.testing.assert_allclose(lg.log_map(lg.exp_map(a)), a, atol=1e-8)


def test_exp_log_round_trip_tiny_angles():
    for theta in (0.0, 1e-12, 1e-8, 1e-6, 1e-4, 1e-3, 2e-3):
        r = rot_z(theta)
        np.testing.assert_allclose(lg.exp_map(lg.log_map(r)), r, atol=1e-14)


@given(vec3)
def test_exp_lands_on_manifold(v):
    assert lg.is_rotation(lg.exp_map(lg.hat(v)))


@given(vec3)
def test_hat_vee_inverse(v):
    a = lg.hat(v)
    assert lg.is_skew(a)
    np.testing.assert_array_equal(lg.vee(a), v)


# -- inner product ---------------------------------------------------------------

@given(vec3, vec3)
def test_frobenius_inner_of_skews(u, v):
    a, b = lg.hat(u), lg.hat(v)
    assert lg.frobenius_inner(a, b) == pytest.approx(2 * u @ v, rel=1e-12, abs=1e-9)
    assert lg.frobenius_inner(a, b) == pytest.approx(lg.frobenius_inner(b, a), rel=1e-12, abs=1e-12)
    assert lg.frobenius_inner(a, a) >= 0
    assert lg.frobenius_inner(a, np.zeros((3, 3))) == 0


# -- retraction and tangent projection ---------------------------------------------

def test_project_rotation_is_fixed():
    r = lg.random_rotation(np.random.default_rng(5))
    np.testing.assert_allclose(lg.project_to_rotation(r), r, atol=1e-12)


def test_project_scaled_identity():
    np.testing.assert_allclose(lg.project_to_rotation(2 * np.eye(3)), np.eye(3), atol=1e-15)


@given(mat3)
def test_project_fixes_determinant_sign(m):
    if np.linalg.svd(m, compute_uv=False)[-1] <= 1e-6:
        return
    r = lg.project_to_rotation(m)
    assert lg.is_rotation(r)
    assert np.linalg.det(r) > 0


def test_project_negative_determinant():
    m = np.diag([1.0, 2.0, -3.0])
    r = lg.project_to_rotation(m)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_project_rank_deficient_raises():
    with pytest.raises(DegenerateMatrix):
        lg.project_to_rotation(np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(DegenerateMatrix):
        lg.project_to_rotation(np.full((3, 3), np.nan))


def test_retraction_is_second_order():
    rng = np.random.default_rng(6)
    w = lg.random_rotation(rng)
    t = w @ lg.hat(rng.standard_normal(3))
    eps = np.array([1e-2, 1e-3, 1e-4, 1e-5])
    err = [np.linalg.norm(lg.project_to_rotation(w + e * t) - (w + e * t)) for e in eps]
    slope = np.polyfit(np.log(eps), np.log(err), 1)[0]
    assert slope >= 1.9


def test_tangent_project_examples():
    rng = np.random.default_rng(7)
    w = lg.random_rotation(rng)
    s = lg.hat(rng.standard_normal(3))
    np.testing.assert_allclose(lg.tangent_project(w, w @ s), w @ s, atol=1e-14)
    y = rng.standard_normal((3, 3))
    np.testing.assert_allclose(lg.tangent_project(w, w @ (y + y.T)), 0, atol=1e-14)


@settings(max_examples=50)
@given(rotations(), mat3, mat3, st.floats(-5, 5))
def test_tangent_project_linear_idempotent(w, g, h, c):
    p = lg.tangent_project(w, g)
    np.testing.assert_allclose(lg.tangent_project(w, p), p, atol=1e-12)
    assert lg.is_skew(np.round(w.T @ p, 12))
    np.testing.assert_allclose(
        lg.tangent_project(w, g + c * h), p + c * lg.tangent_project(w, h), atol=1e-10
    )


# -- sampling ------------------------------------------------------------------------

def test_random_rotation_deterministic_and_valid():
    a = lg.random_rotation(np.random.default_rng(8), 50)
    b = lg.random_rotation(np.random.default_rng(8), 50)
    np.testing.assert_array_equal(a, b)
    assert lg.is_rotation(a)


def _haar_cdf(theta):
    # integral of (1 - cos t) / pi from 0 to theta
    return (theta - np.sin(theta)) / np.pi


def _chi2_pvalue(angles, bins=20):
    edges = np.linspace(0, np.pi, bins + 1)
    observed, _ = np.histogram(angles, edges)
    expected = len(angles) * np.diff(_haar_cdf(edges))
    return stats.chisquare(observed, expected).pvalue


def _quaternion_rotations(rng, n):
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
        np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
        np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def test_random_rotation_angles_follow_haar_density():
    angles = lg.rotation_angle(lg.random_rotation(np.random.default_rng(9), 10000))
    assert _chi2_pvalue(angles) > 0.01


def test_random_rotation_matches_quaternion_sampler():
    ours = lg.random_rotation(np.random.default_rng(10), 10000)
    quat = _quaternion_rotations(np.random.default_rng(11), 10000)
    # the oracle sampler itself must pass the same density check
    assert _chi2_pvalue(lg.rotation_angle(quat)) > 0.01
    assert stats.ks_2samp(lg.rotation_angle(ours), lg.rotation_angle(quat)).pvalue > 0.01
    # axis directions are uniform: compare a coordinate of the axis
    assert stats.ks_2samp(lg.rotation_axis(ours)[:, 0], lg.rotation_axis(quat)[:, 0]).pvalue > 0.01


# -- geodesics -------------------------------------------------------------------------

def test_geodesic_fixed_point():
    r = lg.random_rotation(np.random.default_rng(12))
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(lg.geodesic_interpolate(r, r, t), r, atol=1e-12)


def test_geodesic_midpoint_z():
    np.testing.assert_allclose(lg.geodesic_interpolate(np.eye(3), RZ90, 0.5), rot_z(np.pi / 4), atol=1e-12)


def test_geodesic_endpoints_and_additivity():
    rng = np.random.default_rng(13)
    for _ in range(200):
        r0 = lg.random_rotation(rng)
        r1 = lg.exp_map(lg.hat(rng.standard_normal(3) * 0.5)) @ r0
        np.testing.assert_allclose(lg.geodesic_interpolate(r0, r1, 0.0), r0, atol=1e-9)
        np.testing.assert_allclose(lg.geodesic_interpolate(r0, r1, 1.0), r1, atol=1e-9)
        t = rng.uniform()
        mid = lg.geodesic_interpolate(r0, r1, t)
        assert lg.is_rotation(mid)
        d = lg.relative_angle(r0, mid) + lg.relative_angle(mid, r1)
        assert d == pytest.approx(lg.relative_angle(r0, r1), abs=1e-8)


def test_geodesic_near_pi_raises():
    with pytest.raises(NearPiSingularity):
        lg.geodesic_interpolate(np.eye(3), rot_z(np.pi - 1e-8), 0.5)
