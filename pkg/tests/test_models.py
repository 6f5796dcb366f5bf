"""Tests for model types, minimal solvers, residuals, refinement and losses."""

import numpy as np
import pytest

from esac import models
from esac.consensus import ScoringConfig
from esac.models import (
    CameraIntrinsics, Circle2D, Correspondences, DegenerateMinimalSet,
    Line2D, ModelDatumMismatch, Points2D, Pose6D,
    fit_circle_minimal, fit_line_minimal, pose_loss, residual, residuals,
    refine_on_inliers, solve_pnp_minimal, toy_loss,
)

K = CameraIntrinsics(f=260.0, cx=160.0, cy=120.0)


def random_pose(rng):
    v = rng.normal(size=3)
    v = v / np.linalg.norm(v) * rng.uniform(0.0, np.pi * 0.9)
    q = models.quat_from_rotvec(v)
    t = rng.uniform(-2.0, 2.0, size=3)
    return Pose6D(tuple(q), tuple(t))


def synth_correspondences(pose, rng, n=4, depth_range=(1.5, 5.0)):
    """Back-project random pixels at random depths: exact by construction."""
    px = rng.uniform([20.0, 20.0], [300.0, 220.0], size=(n, 2))
    depth = rng.uniform(*depth_range, size=n)
    rays = np.column_stack([(px[:, 0] - K.cx) / K.f, (px[:, 1] - K.cy) / K.f,
                            np.ones(n)])
    cam_pts = rays * depth[:, None]
    R = pose.rotation_matrix
    world = (cam_pts - np.asarray(pose.t)) @ R
    return Correspondences(px, world)


# ---------------------------------------------------------------------------
# line fitting
# ---------------------------------------------------------------------------


def test_fit_line_through_two_points():
    line = fit_line_minimal([(0.0, 0.0), (1.0, 1.0)])
    assert line.m == pytest.approx(1.0)
    assert line.n == pytest.approx(0.0)


def test_fit_line_horizontal():
    line = fit_line_minimal([(0.0, 5.0), (2.0, 5.0)])
    assert line.m == pytest.approx(0.0)
    assert line.n == pytest.approx(5.0)


def test_fit_line_degenerate_inputs():
    with pytest.raises(DegenerateMinimalSet):
        fit_line_minimal([(1.0, 1.0), (1.0, 1.0)])
    with pytest.raises(DegenerateMinimalSet):
        fit_line_minimal([(1.0, 0.0), (1.0, 5.0)])   # vertical
    with pytest.raises(DegenerateMinimalSet):
        fit_line_minimal([(0.0, 0.0), (0.1, 1.1)])   # slope 11 > bound 10


def test_fit_line_round_trip_property():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        pts = rng.uniform(-50, 50, size=(2, 2))
        if abs(pts[1, 0] - pts[0, 0]) < 0.2:
            continue
        dy, dx = pts[1, 1] - pts[0, 1], pts[1, 0] - pts[0, 0]
        if abs(dy / dx) > 10:
            continue
        line = fit_line_minimal(pts)
        d = residuals(line, Points2D(pts))
        assert np.all(d <= 1e-9)


# ---------------------------------------------------------------------------
# circle fitting
# ---------------------------------------------------------------------------


def test_fit_circle_unit():
    c = fit_circle_minimal([(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)])
    assert c.cx == pytest.approx(0.0, abs=1e-12)
    assert c.cy == pytest.approx(0.0, abs=1e-12)
    assert c.r == pytest.approx(1.0)


def test_fit_circle_collinear_raises():
    with pytest.raises(DegenerateMinimalSet):
        fit_circle_minimal([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])


def test_fit_circle_round_trip_property():
    rng = np.random.default_rng(11)
    done = 0
    while done < 1000:
        pts = rng.uniform(-30, 30, size=(3, 2))
        u, v = pts[1] - pts[0], pts[2] - pts[0]
        area = abs(u[0] * v[1] - u[1] * v[0])
        if area < 1.0:
            continue
        circle = fit_circle_minimal(pts)
        d = residuals(circle, Points2D(pts))
        assert np.all(d <= 1e-9)
        done += 1


# ---------------------------------------------------------------------------
# pose fitting
# ---------------------------------------------------------------------------


def test_pnp_identity_pose():
    rng = np.random.default_rng(3)
    pose_gt = Pose6D((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    corrs = synth_correspondences(pose_gt, rng)
    pose = solve_pnp_minimal(corrs, K)
    ang = models.rotation_angle_deg(np.asarray(pose.q), np.asarray(pose_gt.q))
    assert np.radians(ang) <= 1e-6
    assert np.linalg.norm(np.asarray(pose.t)) <= 1e-6


def test_pnp_round_trip_1000_poses():
    rng = np.random.default_rng(5)
    failures = 0
    for _ in range(1000):
        pose_gt = random_pose(rng)
        corrs = synth_correspondences(pose_gt, rng)
        try:
            pose = solve_pnp_minimal(corrs, K)
        except models.NoSolution:
            failures += 1
            continue
        ang_rad = np.radians(models.rotation_angle_deg(
            np.asarray(pose.q), np.asarray(pose_gt.q)))
        terr = np.linalg.norm(np.asarray(pose.t) - np.asarray(pose_gt.t))
        assert ang_rad <= 1e-4
        assert terr <= 1e-4
    assert failures == 0


def test_pnp_collinear_raises():
    px = np.array([[100.0, 100.0], [120.0, 100.0], [140.0, 100.0], [160.0, 100.0]])
    X = np.array([[0.0, 0.0, 2.0], [0.2, 0.0, 2.0], [0.4, 0.0, 2.0], [0.6, 0.0, 2.0]])
    with pytest.raises(DegenerateMinimalSet):
        solve_pnp_minimal(Correspondences(px, X), K)


def test_pnp_reprojects_minimal_set_within_1px():
    rng = np.random.default_rng(17)
    for _ in range(200):
        pose_gt = random_pose(rng)
        corrs = synth_correspondences(pose_gt, rng)
        pose = solve_pnp_minimal(corrs, K)
        d = residuals(pose, corrs, K=K)
        assert np.max(d) <= 1.0


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def test_residual_point_line():
    assert residual(Line2D(1.0, 0.0), (0.0, 1.0)) == pytest.approx(1 / np.sqrt(2))


def test_residual_circle():
    assert residual(Circle2D(0.0, 0.0, 2.0), (3.0, 0.0)) == pytest.approx(1.0)


def test_residual_pose_exact_projection_is_zero():
    rng = np.random.default_rng(23)
    pose = random_pose(rng)
    corrs = synth_correspondences(pose, rng)
    d = residuals(pose, corrs, K=K)
    assert np.max(d) <= 1e-9


def test_residual_type_mismatch():
    pts = Points2D([(0.0, 0.0)])
    pose = Pose6D((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(ModelDatumMismatch):
        residuals(pose, pts, K=K)
    corrs = Correspondences([[0.0, 0.0]], [[0.0, 0.0, 1.0]])
    with pytest.raises(ModelDatumMismatch):
        residuals(Line2D(0.0, 0.0), corrs)


def test_residuals_permutation_invariant():
    rng = np.random.default_rng(29)
    pts = rng.uniform(0, 64, size=(40, 2))
    perm = rng.permutation(40)
    line = Line2D(0.5, 3.0)
    d = residuals(line, Points2D(pts))
    dp = residuals(line, Points2D(pts[perm]))
    assert np.array_equal(d[perm], dp)


def test_behind_camera_sentinel():
    pose = Pose6D((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    corrs = Correspondences([[160.0, 120.0]], [[0.0, 0.0, -3.0]])
    d = residuals(pose, corrs, K=K, behind_sentinel=300.0)
    assert d[0] == 300.0


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


def test_refine_is_fixed_point_on_clean_data():
    rng = np.random.default_rng(31)
    line = Line2D(0.8, 5.0)
    x = rng.uniform(0, 64, size=50)
    pts = np.column_stack([x, line.m * x + line.n])
    cfg = ScoringConfig(tau=1.0)
    out = refine_on_inliers(line, Points2D(pts), cfg)
    assert out.m == pytest.approx(line.m, abs=1e-9)
    assert out.n == pytest.approx(line.n, abs=1e-9)


def test_refine_never_loses_inliers_monte_carlo():
    rng = np.random.default_rng(37)
    cfg = ScoringConfig(tau=1.5)
    from esac.consensus import hard_inlier_count
    for _ in range(1000):
        m, n = rng.uniform(-2, 2), rng.uniform(10, 50)
        x = rng.uniform(0, 64, size=70)
        inl = np.column_stack([x, m * x + n + rng.normal(0, 0.4, size=70)])
        out = rng.uniform(0, 64, size=(30, 2))
        pts = Points2D(np.vstack([inl, out]))
        i, j = rng.choice(70, size=2, replace=False)
        try:
            h = fit_line_minimal(inl[[i, j]])
        except DegenerateMinimalSet:
            continue
        refined = refine_on_inliers(h, pts, cfg)
        assert hard_inlier_count(refined, pts, cfg) >= hard_inlier_count(h, pts, cfg)


def test_refine_returns_input_when_no_inliers():
    cfg = ScoringConfig(tau=0.5)
    pts = Points2D([[0.0, 50.0], [10.0, 60.0], [20.0, 40.0]])
    line = Line2D(0.0, 0.0)
    out = refine_on_inliers(line, pts, cfg)
    assert out is line


def test_refine_pose_improves_on_noisy_inliers():
    rng = np.random.default_rng(41)
    pose_gt = random_pose(rng)
    corrs = synth_correspondences(pose_gt, rng, n=60)
    noisy = Correspondences(corrs.pixels + rng.normal(0, 1.0, corrs.pixels.shape),
                            corrs.coords)
    pose0 = solve_pnp_minimal(
        Correspondences(noisy.pixels[:4], noisy.coords[:4]), K, max_reproj_px=10.0)
    cfg = ScoringConfig(tau=8.0)
    refined = refine_on_inliers(pose0, noisy, cfg, K=K)
    e0 = np.mean(residuals(pose0, noisy, K=K))
    e1 = np.mean(residuals(refined, noisy, K=K))
    assert e1 <= e0 + 1e-9


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_pose_loss_zero_and_components():
    rng = np.random.default_rng(43)
    p = random_pose(rng)
    assert pose_loss(p, p) == 0.0

    # 5 degree rotation and 5 cm offset: 5 + 100 * 0.05 = 10
    axis = np.array([0.0, 0.0, 1.0])
    dq = models.quat_from_rotvec(axis * np.radians(5.0))
    q2 = models.quat_mul(dq, np.asarray(p.q))
    t2 = np.asarray(p.t) + np.array([0.05, 0.0, 0.0])
    p2 = Pose6D(tuple(q2), tuple(t2))
    assert pose_loss(p2, p) == pytest.approx(10.0, abs=1e-9)


def test_pose_loss_180_degrees():
    a = Pose6D((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    b = Pose6D((0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    assert pose_loss(a, b) == pytest.approx(180.0)


def test_pose_loss_symmetry_and_triangle():
    rng = np.random.default_rng(47)
    for _ in range(1000):
        a, b, c = (random_pose(rng) for _ in range(3))
        ab = models.rotation_angle_deg(np.asarray(a.q), np.asarray(b.q))
        ba = models.rotation_angle_deg(np.asarray(b.q), np.asarray(a.q))
        ac = models.rotation_angle_deg(np.asarray(a.q), np.asarray(c.q))
        cb = models.rotation_angle_deg(np.asarray(c.q), np.asarray(b.q))
        assert ab == pytest.approx(ba, abs=1e-9)
        assert ab <= ac + cb + 1e-6


def test_toy_loss_values():
    assert toy_loss(Line2D(1.0, 2.0), Line2D(1.0, 2.0), 64) == 0.0
    assert toy_loss(Line2D(1.0, 4.0), Line2D(1.0, 2.0), 64) == pytest.approx(2.0)
    assert toy_loss(Circle2D(0, 0, 5), Circle2D(3, 4, 6), 64) == pytest.approx(6.0)
    # mixed types use the flat image-size penalty
    assert toy_loss(Line2D(0, 0), Circle2D(3, 4, 6), 64) == 64.0
    assert toy_loss(Circle2D(3, 4, 6), Line2D(0, 0), 64) == 64.0


def test_toy_loss_zero_on_self():
    rng = np.random.default_rng(53)
    for _ in range(100):
        line = Line2D(rng.uniform(-2, 2), rng.uniform(-10, 70))
        circ = Circle2D(rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(4, 30))
        assert toy_loss(line, line, 64) == 0.0
        assert toy_loss(circ, circ, 64) == 0.0


def test_toy_loss_line_formula_matches_dense_scan():
    # independent oracle: dense evaluation of |dm*x + dn| over the pixel range
    rng = np.random.default_rng(59)
    for _ in range(200):
        a = Line2D(rng.uniform(-2, 2), rng.uniform(-10, 70))
        b = Line2D(rng.uniform(-2, 2), rng.uniform(-10, 70))
        xs = np.linspace(0.0, 63.0, 6301)
        dense = np.max(np.abs((a.m - b.m) * xs + (a.n - b.n)))
        assert toy_loss(a, b, 64) == pytest.approx(dense, abs=1e-6)


def test_pose_invariants():
    with pytest.raises(ValueError):
        Pose6D((1.0, 1.0, 0.0, 0.0), (0.0, 0.0, 0.0))   # not unit norm
    with pytest.raises(ValueError):
        Pose6D((1.0, 0.0, 0.0, 0.0), (np.nan, 0.0, 0.0))
