"""Parametric model types, minimal solvers, residuals, refinement and task losses.

Three model families are supported:

* 2D lines ``y = m*x + n`` fit to 2D points (minimal set: 2 points),
* 2D circles ``(cx, cy, r)`` fit to 2D points (minimal set: 3 points),
* 6D camera poses fit to pixel/scene-coordinate correspondences
  (minimal set: 4 correspondences).

Poses are stored as extrinsics: ``x_cam = R @ x_world + t`` with the rotation
kept as a unit quaternion ``(w, x, y, z)``.  Batched internals operate on flat
parameter arrays, ``(m, n)`` for lines, ``(cx, cy, r)`` for circles and the
7-vector ``(qw, qx, qy, qz, tx, ty, tz)`` for poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LINE = "line"
CIRCLE = "circle"
POSE = "pose"

MINIMAL_SET_SIZE = {LINE: 2, CIRCLE: 3, POSE: 4}

#: parameter-vector width per model kind
PARAM_DIM = {LINE: 2, CIRCLE: 3, POSE: 7}

#: marker radius for "this hypothesis is a line, not a circle"
NOT_A_CIRCLE = -1.0

DEGENERACY_EPS = 1e-9
DEFAULT_SLOPE_BOUND = 10.0


class DegenerateMinimalSet(ValueError):
    """The minimal set does not determine a model (coincident/collinear/...)."""


class NoSolution(RuntimeError):
    """A minimal solver failed to produce a valid model."""


class ModelDatumMismatch(TypeError):
    """Model kind and observation type do not match."""


# ---------------------------------------------------------------------------
# model and observation containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Line2D:
    m: float
    n: float

    @property
    def params(self) -> np.ndarray:
        return np.array([self.m, self.n], dtype=float)


@dataclass(frozen=True)
class Circle2D:
    cx: float
    cy: float
    r: float

    @property
    def params(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.r], dtype=float)


@dataclass(frozen=True)
class Pose6D:
    """Camera extrinsics: ``x_cam = R(q) @ x_world + t``."""

    q: tuple  # unit quaternion (w, x, y, z)
    t: tuple  # translation, meters

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("Pose6D expects a 4-quaternion and 3-translation")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("Pose6D components must be finite")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("Pose6D quaternion must be unit norm")
        object.__setattr__(self, "q", tuple(float(x) for x in q))
        object.__setattr__(self, "t", tuple(float(x) for x in t))

    @property
    def params(self) -> np.ndarray:
        return np.array(self.q + self.t, dtype=float)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_mat(np.asarray(self.q))

    @property
    def camera_position(self) -> np.ndarray:
        R = self.rotation_matrix
        return -R.T @ np.asarray(self.t)


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float   # focal length, pixels
    cx: float  # principal point x, pixels
    cy: float  # principal point y, pixels

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError("focal length must be positive")


@dataclass
class Points2D:
    """Observation set for the line/circle models: an (P, 2) point array."""

    xy: np.ndarray

    def __post_init__(self):
        self.xy = np.atleast_2d(np.asarray(self.xy, dtype=float))
        if self.xy.ndim != 2 or self.xy.shape[1] != 2:
            raise ValueError("Points2D expects an (P, 2) array")

    def __len__(self) -> int:
        return self.xy.shape[0]


@dataclass
class Correspondences:
    """Observation set for the pose model: paired pixels (P, 2) and 3D points (P, 3)."""

    pixels: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        self.pixels = np.atleast_2d(np.asarray(self.pixels, dtype=float))
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        if self.pixels.shape[1] != 2 or self.coords.shape[1] != 3:
            raise ValueError("Correspondences expects (P, 2) pixels and (P, 3) coords")
        if self.pixels.shape[0] != self.coords.shape[0]:
            raise ValueError("pixel/coordinate counts differ")

    def __len__(self) -> int:
        return self.pixels.shape[0]


def model_from_params(kind: str, params: np.ndarray):
    p = np.asarray(params, dtype=float)
    if kind == LINE:
        return Line2D(float(p[0]), float(p[1]))
    if kind == CIRCLE:
        return Circle2D(float(p[0]), float(p[1]), float(p[2]))
    if kind == POSE:
        q = p[:4] / np.linalg.norm(p[:4])
        return Pose6D(tuple(q), tuple(p[4:]))
    raise ValueError(f"unknown model kind {kind!r}")


def model_kind(h) -> str:
    if isinstance(h, Line2D):
        return LINE
    if isinstance(h, Circle2D):
        return CIRCLE
    if isinstance(h, Pose6D):
        return POSE
    raise ModelDatumMismatch(f"not a model hypothesis: {type(h).__name__}")


def check_observations(kind: str, obs) -> None:
    if kind in (LINE, CIRCLE):
        if not isinstance(obs, Points2D):
            raise ModelDatumMismatch(f"{kind} models need Points2D observations")
    elif kind == POSE:
        if not isinstance(obs, Correspondences):
            raise ModelDatumMismatch("pose models need Correspondences observations")
    else:
        raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------


def quat_to_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of unit quaternion(s); accepts (4,) or (..., 4)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def mat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of rotation matrix(es), w >= 0."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    n = Rf.shape[0]
    q = np.empty((n, 4), dtype=float)
    # Shepperd's method: pick the largest of the four squared components.
    t0 = 1 + Rf[:, 0, 0] + Rf[:, 1, 1] + Rf[:, 2, 2]
    t1 = 1 + Rf[:, 0, 0] - Rf[:, 1, 1] - Rf[:, 2, 2]
    t2 = 1 - Rf[:, 0, 0] + Rf[:, 1, 1] - Rf[:, 2, 2]
    t3 = 1 - Rf[:, 0, 0] - Rf[:, 1, 1] + Rf[:, 2, 2]
    choice = np.argmax(np.stack([t0, t1, t2, t3], axis=1), axis=1)
    for i in range(n):
        c = choice[i]
        M = Rf[i]
        if c == 0:
            s = 2.0 * np.sqrt(max(t0[i], 0.0))
            q[i] = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s,
                    (M[1, 0] - M[0, 1]) / s]
        elif c == 1:
            s = 2.0 * np.sqrt(max(t1[i], 0.0))
            q[i] = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s,
                    (M[0, 2] + M[2, 0]) / s]
        elif c == 2:
            s = 2.0 * np.sqrt(max(t2[i], 0.0))
            q[i] = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s,
                    (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(max(t3[i], 0.0))
            q[i] = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s,
                    (M[1, 2] + M[2, 1]) / s, 0.25 * s]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    flip = q[:, 0] < 0
    q[flip] = -q[flip]
    return q.reshape(batch + (4,))


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    """Quaternion of rotation vector(s) theta*axis; accepts (..., 3)."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, theta))
    q = np.concatenate([np.cos(half), scale * v], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def rotation_angle_deg(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Geodesic angle between rotations, degrees; symmetric, in [0, 180]."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = np.abs(np.sum(qa * qb, axis=-1))
    dot = np.clip(dot, -1.0, 1.0)
    return np.degrees(2.0 * np.arccos(dot))


# ---------------------------------------------------------------------------
# minimal solvers: line and circle
# ---------------------------------------------------------------------------


def fit_line_minimal(pts, slope_bound: float = DEFAULT_SLOPE_BOUND,
                     eps: float = DEGENERACY_EPS) -> Line2D:
    """Line through two points.

    Raises DegenerateMinimalSet when the points coincide, their x-coordinates
    are closer than ``eps``, or the resulting slope exceeds ``slope_bound``
    (the slope/intercept parametrization cannot represent vertical lines).
    """
    p = np.asarray(pts, dtype=float).reshape(2, 2)
    dx = p[1, 0] - p[0, 0]
    dy = p[1, 1] - p[0, 1]
    if dx * dx + dy * dy <= eps * eps:
        raise DegenerateMinimalSet("coincident points")
    if abs(dx) <= eps:
        raise DegenerateMinimalSet("points share an x-coordinate")
    m = dy / dx
    if abs(m) > slope_bound:
        raise DegenerateMinimalSet(f"slope {m:.3g} exceeds bound {slope_bound}")
    n = p[0, 1] - m * p[0, 0]
    return Line2D(float(m), float(n))


def fit_circle_minimal(pts, eps: float = DEGENERACY_EPS) -> Circle2D:
    """Circle through three points; raises DegenerateMinimalSet when collinear."""
    p = np.asarray(pts, dtype=float).reshape(3, 2)
    params, valid = fit_circles_batch(p, np.array([[0, 1, 2]]), eps=eps)
    if not valid[0]:
        raise DegenerateMinimalSet("collinear or coincident points")
    return Circle2D(*params[0])


def fit_lines_batch(xy: np.ndarray, idx: np.ndarray,
                    slope_bound: float = DEFAULT_SLOPE_BOUND,
                    eps: float = DEGENERACY_EPS):
    """Vectorized two-point line fits.

    Returns (params (N, 2), valid (N,)).  Invalid rows hold zeros.
    """
    xy = np.asarray(xy, dtype=float)
    idx = np.asarray(idx, dtype=int)
    p0 = xy[idx[:, 0]]
    p1 = xy[idx[:, 1]]
    dx = p1[:, 0] - p0[:, 0]
    dy = p1[:, 1] - p0[:, 1]
    valid = np.abs(dx) > eps
    safe_dx = np.where(valid, dx, 1.0)
    m = dy / safe_dx
    valid &= np.abs(m) <= slope_bound
    n = p0[:, 1] - m * p0[:, 0]
    params = np.stack([np.where(valid, m, 0.0), np.where(valid, n, 0.0)], axis=1)
    return params, valid


def fit_circles_batch(xy: np.ndarray, idx: np.ndarray, eps: float = DEGENERACY_EPS):
    """Vectorized three-point circle fits via the circumcenter linear system.

    Returns (params (N, 3), valid (N,)).  ``valid`` is False when the 2x2
    circumcenter determinant falls below ``eps``.
    """
    xy = np.asarray(xy, dtype=float)
    idx = np.asarray(idx, dtype=int)
    p1, p2, p3 = xy[idx[:, 0]], xy[idx[:, 1]], xy[idx[:, 2]]
    ax, ay = p2[:, 0] - p1[:, 0], p2[:, 1] - p1[:, 1]
    bx, by = p3[:, 0] - p1[:, 0], p3[:, 1] - p1[:, 1]
    det = 2.0 * (ax * by - ay * bx)
    valid = np.abs(det) > eps
    safe = np.where(valid, det, 1.0)
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    ux = (by * a2 - ay * b2) / safe
    uy = (ax * b2 - bx * a2) / safe
    cx = p1[:, 0] + np.where(valid, ux, 0.0)
    cy = p1[:, 1] + np.where(valid, uy, 0.0)
    r = np.hypot(cx - p1[:, 0], cy - p1[:, 1])
    params = np.stack([cx, cy, np.where(valid, r, 0.0)], axis=1)
    return params, valid


def line_fit_jacobian(xy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """d(m, n)/d(x1, y1, x2, y2) for two-point fits: (N, 2, 4)."""
    xy = np.asarray(xy, dtype=float)
    idx = np.asarray(idx, dtype=int)
    p0, p1 = xy[idx[:, 0]], xy[idx[:, 1]]
    dx = p1[:, 0] - p0[:, 0]
    dy = p1[:, 1] - p0[:, 1]
    x1 = p0[:, 0]
    J = np.zeros((idx.shape[0], 2, 4), dtype=float)
    dm_dx1 = dy / dx ** 2
    dm_dy1 = -1.0 / dx
    dm_dx2 = -dy / dx ** 2
    dm_dy2 = 1.0 / dx
    m = dy / dx
    J[:, 0, 0] = dm_dx1
    J[:, 0, 1] = dm_dy1
    J[:, 0, 2] = dm_dx2
    J[:, 0, 3] = dm_dy2
    J[:, 1, 0] = -m - x1 * dm_dx1
    J[:, 1, 1] = 1.0 - x1 * dm_dy1
    J[:, 1, 2] = -x1 * dm_dx2
    J[:, 1, 3] = -x1 * dm_dy2
    return J


def circle_fit_jacobian(xy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """d(cx, cy, r)/d(x1, y1, x2, y2, x3, y3) for three-point fits: (N, 3, 6).

    Differentiates the linear system ``A c = rhs`` with
    ``A = 2 [[x2-x1, y2-y1], [x3-x1, y3-y1]]`` and
    ``rhs = [x2^2-x1^2+y2^2-y1^2, x3^2-x1^2+y3^2-y1^2]``, then
    ``r = |p1 - c|``.
    """
    xy = np.asarray(xy, dtype=float)
    idx = np.asarray(idx, dtype=int)
    N = idx.shape[0]
    p = xy[idx]  # (N, 3, 2)
    p1, p2, p3 = p[:, 0], p[:, 1], p[:, 2]
    A = 2.0 * np.stack([p2 - p1, p3 - p1], axis=1)  # (N, 2, 2)
    rhs = np.stack([
        np.sum(p2 ** 2 - p1 ** 2, axis=1),
        np.sum(p3 ** 2 - p1 ** 2, axis=1),
    ], axis=1)  # (N, 2)
    Ainv = np.linalg.inv(A)
    c = np.einsum("nij,nj->ni", Ainv, rhs)  # (N, 2) center

    # dA/dcoord (2, 2) and drhs/dcoord (2,) for the six coordinates.
    dA = np.zeros((6, N, 2, 2), dtype=float)
    drhs = np.zeros((6, N, 2), dtype=float)
    # x1, y1 appear (negated) in both rows.
    dA[0, :, 0, 0] = -2.0
    dA[0, :, 1, 0] = -2.0
    dA[1, :, 0, 1] = -2.0
    dA[1, :, 1, 1] = -2.0
    drhs[0, :, 0] = -2.0 * p1[:, 0]
    drhs[0, :, 1] = -2.0 * p1[:, 0]
    drhs[1, :, 0] = -2.0 * p1[:, 1]
    drhs[1, :, 1] = -2.0 * p1[:, 1]
    # x2, y2 -> first row only.
    dA[2, :, 0, 0] = 2.0
    dA[3, :, 0, 1] = 2.0
    drhs[2, :, 0] = 2.0 * p2[:, 0]
    drhs[3, :, 0] = 2.0 * p2[:, 1]
    # x3, y3 -> second row only.
    dA[4, :, 1, 0] = 2.0
    dA[5, :, 1, 1] = 2.0
    drhs[4, :, 1] = 2.0 * p3[:, 0]
    drhs[5, :, 1] = 2.0 * p3[:, 1]

    # dc = Ainv @ (drhs - dA @ c)
    dAc = np.einsum("knij,nj->kni", dA, c)
    dc = np.einsum("nij,knj->kni", Ainv, drhs - dAc)  # (6, N, 2)

    diff = p1 - c  # (N, 2)
    r = np.linalg.norm(diff, axis=1)
    r_safe = np.where(r > 0, r, 1.0)
    dp1 = np.zeros((6, N, 2), dtype=float)
    dp1[0, :, 0] = 1.0
    dp1[1, :, 1] = 1.0
    dr = np.einsum("ni,kni->kn", diff / r_safe[:, None], dp1 - dc)  # (6, N)

    J = np.empty((N, 3, 6), dtype=float)
    J[:, 0, :] = dc[:, :, 0].T
    J[:, 1, :] = dc[:, :, 1].T
    J[:, 2, :] = dr.T
    return J


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def line_residual_matrix(params: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Perpendicular point-line distances: (N, P)."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    xy = np.asarray(xy, dtype=float)
    m = params[:, 0:1]
    n = params[:, 1:2]
    e = m * xy[:, 0][None, :] - xy[:, 1][None, :] + n
    return np.abs(e) / np.sqrt(m * m + 1.0)


def circle_residual_matrix(params: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Radial distances | |p-c| - r |: (N, P)."""
    params = np.atleast_2d(np.asarray(params, dtype=float))
    xy = np.asarray(xy, dtype=float)
    dx = xy[:, 0][None, :] - params[:, 0:1]
    dy = xy[:, 1][None, :] - params[:, 1:2]
    return np.abs(np.hypot(dx, dy) - params[:, 2:3])


def project_points(params: np.ndarray, coords: np.ndarray, K: CameraIntrinsics):
    """Project world points through pose parameter rows.

    params: (N, 7), coords: (P, 3).  Returns (pixels (N, P, 2), depths (N, P)).
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    coords = np.asarray(coords, dtype=float)
    R = quat_to_mat(params[:, :4])           # (N, 3, 3)
    t = params[:, 4:]                        # (N, 3)
    Xc = np.einsum("nij,pj->npi", R, coords) + t[:, None, :]
    z = Xc[..., 2]
    z_safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    u = K.f * Xc[..., 0] / z_safe + K.cx
    v = K.f * Xc[..., 1] / z_safe + K.cy
    return np.stack([u, v], axis=-1), z


def pose_residual_matrix(params: np.ndarray, obs: Correspondences,
                         K: CameraIntrinsics,
                         behind_sentinel: float = np.inf) -> np.ndarray:
    """Reprojection errors (N, P); points behind the camera get the sentinel."""
    pix, z = project_points(params, obs.coords, K)
    err = np.linalg.norm(pix - obs.pixels[None, :, :], axis=-1)
    return np.where(z > 1e-9, err, behind_sentinel)


def residuals(h, obs, K: CameraIntrinsics | None = None,
              behind_sentinel: float = np.inf) -> np.ndarray:
    """Per-datum distances between a hypothesis and an observation set."""
    kind = model_kind(h)
    check_observations(kind, obs)
    if kind == LINE:
        return line_residual_matrix(h.params[None, :], obs.xy)[0]
    if kind == CIRCLE:
        return circle_residual_matrix(h.params[None, :], obs.xy)[0]
    if K is None:
        raise ModelDatumMismatch("pose residuals require camera intrinsics")
    return pose_residual_matrix(h.params[None, :], obs, K, behind_sentinel)[0]


def residual(h, datum, K: CameraIntrinsics | None = None,
             behind_sentinel: float = np.inf) -> float:
    """Distance between a hypothesis and a single datum.

    ``datum`` is a 2D point for line/circle models or a ``(pixel, coord)``
    pair for pose models.
    """
    kind = model_kind(h)
    if kind == POSE:
        pixel, coord = datum
        obs = Correspondences(np.asarray(pixel, dtype=float).reshape(1, 2),
                              np.asarray(coord, dtype=float).reshape(1, 3))
    else:
        obs = Points2D(np.asarray(datum, dtype=float).reshape(1, 2))
    return float(residuals(h, obs, K=K, behind_sentinel=behind_sentinel)[0])


def residual_matrix(kind: str, params: np.ndarray, obs,
                    K: CameraIntrinsics | None = None,
                    behind_sentinel: float = np.inf) -> np.ndarray:
    check_observations(kind, obs)
    if kind == LINE:
        return line_residual_matrix(params, obs.xy)
    if kind == CIRCLE:
        return circle_residual_matrix(params, obs.xy)
    if K is None:
        raise ModelDatumMismatch("pose residuals require camera intrinsics")
    return pose_residual_matrix(params, obs, K, behind_sentinel)


def line_residual_partials(params: np.ndarray, xy: np.ndarray):
    """Partials of the point-line distance.

    Returns (dD_dy (N, P, 2), dD_dh (N, P, 2)) for parameters (m, n).
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    xy = np.asarray(xy, dtype=float)
    m = params[:, 0:1]
    n = params[:, 1:2]
    x = xy[:, 0][None, :]
    y = xy[:, 1][None, :]
    e = m * x - y + n
    s = np.sign(e)
    denom = np.sqrt(m * m + 1.0)
    dD_dy = np.stack([s * m / denom, -s / denom], axis=-1)
    dD_dm = s * x / denom - np.abs(e) * m / denom ** 3
    dD_dn = s / denom * np.ones_like(x)
    dD_dh = np.stack([dD_dm, dD_dn], axis=-1)
    return dD_dy, dD_dh


def circle_residual_partials(params: np.ndarray, xy: np.ndarray):
    """Partials of | |p-c| - r |.

    Returns (dD_dy (N, P, 2), dD_dh (N, P, 3)) for parameters (cx, cy, r).
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    xy = np.asarray(xy, dtype=float)
    dx = xy[:, 0][None, :] - params[:, 0:1]
    dy = xy[:, 1][None, :] - params[:, 1:2]
    q = np.hypot(dx, dy)
    q_safe = np.where(q > 1e-12, q, 1e-12)
    s = np.sign(q - params[:, 2:3])
    ux = dx / q_safe
    uy = dy / q_safe
    dD_dy = np.stack([s * ux, s * uy], axis=-1)
    dD_dh = np.stack([-s * ux, -s * uy, -s * np.ones_like(ux)], axis=-1)
    return dD_dy, dD_dh


# ---------------------------------------------------------------------------
# minimal solver: pose (P3P + fourth-point disambiguation + polish)
# ---------------------------------------------------------------------------


def _p3p_quartic_coeffs(a2, b2, c2, ca, cb, cg):
    """Grunert quartic in v = s3/s1 (arrays broadcast elementwise)."""
    A4 = a2 ** 2 - 2 * a2 * b2 - 2 * a2 * c2 + b2 ** 2 - 4 * b2 * c2 * ca ** 2 \
        + 2 * b2 * c2 + c2 ** 2
    A3 = (-4 * a2 ** 2 * cb + 4 * a2 * b2 * ca * cg + 4 * a2 * b2 * cb
          + 8 * a2 * c2 * cb - 4 * b2 ** 2 * ca * cg + 8 * b2 * c2 * ca ** 2 * cb
          + 4 * b2 * c2 * ca * cg - 4 * b2 * c2 * cb - 4 * c2 ** 2 * cb)
    A2 = (4 * a2 ** 2 * cb ** 2 + 2 * a2 ** 2 - 8 * a2 * b2 * ca * cb * cg
          - 4 * a2 * b2 * cg ** 2 - 8 * a2 * c2 * cb ** 2 - 4 * a2 * c2
          + 4 * b2 ** 2 * ca ** 2 + 4 * b2 ** 2 * cg ** 2 - 2 * b2 ** 2
          - 4 * b2 * c2 * ca ** 2 - 8 * b2 * c2 * ca * cb * cg
          + 4 * c2 ** 2 * cb ** 2 + 2 * c2 ** 2)
    A1 = (-4 * a2 ** 2 * cb + 4 * a2 * b2 * ca * cg + 8 * a2 * b2 * cb * cg ** 2
          - 4 * a2 * b2 * cb + 8 * a2 * c2 * cb - 4 * b2 ** 2 * ca * cg
          + 4 * b2 * c2 * ca * cg + 4 * b2 * c2 * cb - 4 * c2 ** 2 * cb)
    A0 = a2 ** 2 - 4 * a2 * b2 * cg ** 2 + 2 * a2 * b2 - 2 * a2 * c2 + b2 ** 2 \
        - 2 * b2 * c2 + c2 ** 2
    return np.stack([A4, A3, A2, A1, A0], axis=-1)


def _quartic_roots_batch(coeffs: np.ndarray) -> np.ndarray:
    """Real roots of quartics, batched via companion eigenvalues.

    coeffs: (N, 5) highest power first.  Returns (N, 4) array with NaN at
    non-real or invalid slots.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    N = coeffs.shape[0]
    out = np.full((N, 4), np.nan)
    scale = np.max(np.abs(coeffs), axis=1)
    ok = (scale > 0) & (np.abs(coeffs[:, 0]) > 1e-12 * scale)
    if not np.any(ok):
        return out
    c = coeffs[ok] / coeffs[ok, 0:1]
    M = np.zeros((c.shape[0], 4, 4), dtype=float)
    M[:, 1, 0] = 1.0
    M[:, 2, 1] = 1.0
    M[:, 3, 2] = 1.0
    M[:, 0, :] = -c[:, 1:]
    roots = np.linalg.eigvals(M)
    real = np.where(np.abs(roots.imag) < 1e-8 * np.maximum(1.0, np.abs(roots.real)),
                    roots.real, np.nan)
    out[ok] = real
    return out


def _kabsch_batch(X: np.ndarray, P: np.ndarray):
    """Rigid world->camera alignments: R @ X + t = P, batched over axis 0."""
    Xc = X - X.mean(axis=1, keepdims=True)
    Pc = P - P.mean(axis=1, keepdims=True)
    M = np.einsum("bni,bnj->bij", Pc, Xc)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(np.einsum("bij,bjk->bik", U, Vt)))
    D = np.zeros_like(M)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.einsum("bij,bjk,bkl->bil", U, D, Vt)
    t = P.mean(axis=1) - np.einsum("bij,bj->bi", R, X.mean(axis=1))
    return R, t


def gauss_newton_pose(params: np.ndarray, pixels: np.ndarray, coords: np.ndarray,
                      K: CameraIntrinsics, iters: int = 5) -> np.ndarray:
    """Batched Gauss-Newton reprojection refinement of pose parameter rows.

    params: (N, 7); pixels: (N, P, 2); coords: (N, P, 3).  The rotation update
    is left-multiplicative, ``R <- exp(skew(w)) @ R``.
    """
    params = np.array(np.atleast_2d(params), dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    coords = np.asarray(coords, dtype=float)
    lm = 1e-9  # tiny damping keeps near-singular systems solvable
    for _ in range(iters):
        R = quat_to_mat(params[:, :4])
        t = params[:, 4:]
        Xc = np.einsum("nij,npj->npi", R, coords) + t[:, None, :]
        z = np.where(np.abs(Xc[..., 2]) > 1e-9, Xc[..., 2], 1e-9)
        u = K.f * Xc[..., 0] / z + K.cx
        v = K.f * Xc[..., 1] / z + K.cy
        res = np.stack([u, v], axis=-1) - pixels        # (N, P, 2)
        # d(proj)/d(Xc)
        Jp = np.zeros(Xc.shape[:2] + (2, 3), dtype=float)
        Jp[..., 0, 0] = K.f / z
        Jp[..., 0, 2] = -K.f * Xc[..., 0] / z ** 2
        Jp[..., 1, 1] = K.f / z
        Jp[..., 1, 2] = -K.f * Xc[..., 1] / z ** 2
        # d(Xc)/d(w) = -skew(Xc), d(Xc)/d(dt) = I
        Jw = np.zeros(Xc.shape[:2] + (3, 3), dtype=float)
        Jw[..., 0, 1] = Xc[..., 2]
        Jw[..., 0, 2] = -Xc[..., 1]
        Jw[..., 1, 0] = -Xc[..., 2]
        Jw[..., 1, 2] = Xc[..., 0]
        Jw[..., 2, 0] = Xc[..., 1]
        Jw[..., 2, 1] = -Xc[..., 0]
        J = np.empty(Xc.shape[:2] + (2, 6), dtype=float)
        J[..., :3] = np.einsum("npij,npjk->npik", Jp, Jw)
        J[..., 3:] = Jp
        Jf = J.reshape(J.shape[0], -1, 6)
        rf = res.reshape(res.shape[0], -1)
        H = np.einsum("nki,nkj->nij", Jf, Jf)
        H += lm * np.eye(6)[None, :, :]
        g = np.einsum("nki,nk->ni", Jf, rf)
        try:
            delta = -np.linalg.solve(H, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        dq = quat_from_rotvec(delta[:, :3])
        params[:, :4] = quat_mul(dq, params[:, :4])
        params[:, :4] /= np.linalg.norm(params[:, :4], axis=1, keepdims=True)
        params[:, 4:] += delta[:, 3:]
    return params


def fit_poses_batch(pixels: np.ndarray, coords: np.ndarray, idx: np.ndarray,
                    K: CameraIntrinsics, max_reproj_px: float = 1.0,
                    polish_iters: int = 5):
    """Vectorized minimal pose solves from four-correspondence index rows.

    P3P (Grunert) on the first three correspondences, fourth-point
    disambiguation among the quartic roots, then Gauss-Newton polish on all
    four.  Returns (params (N, 7), valid (N,)); a row is valid when a pose
    with positive depths reprojects all four points within ``max_reproj_px``.
    """
    pixels = np.asarray(pixels, dtype=float)
    coords = np.asarray(coords, dtype=float)
    idx = np.atleast_2d(np.asarray(idx, dtype=int))
    N = idx.shape[0]
    px = pixels[idx]      # (N, 4, 2)
    X = coords[idx]       # (N, 4, 3)

    params = np.zeros((N, 7), dtype=float)
    params[:, 0] = 1.0
    valid = np.zeros(N, dtype=bool)

    # coincident or collinear first triples cannot seed P3P
    cross = np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0])
    span = np.linalg.norm(X[:, :3] - X[:, :3].mean(axis=1, keepdims=True), axis=2).max(axis=1)
    ok = np.linalg.norm(cross, axis=1) > 1e-9 * np.maximum(1.0, span ** 2)
    if not np.any(ok):
        return params, valid

    bearings = np.concatenate([(px[:, :3] - [K.cx, K.cy]) / K.f,
                               np.ones((N, 3, 1))], axis=2)
    bearings /= np.linalg.norm(bearings, axis=2, keepdims=True)
    v1, v2, v3 = bearings[:, 0], bearings[:, 1], bearings[:, 2]
    a2 = np.sum((X[:, 1] - X[:, 2]) ** 2, axis=1)
    b2 = np.sum((X[:, 0] - X[:, 2]) ** 2, axis=1)
    c2 = np.sum((X[:, 0] - X[:, 1]) ** 2, axis=1)
    ca = np.sum(v2 * v3, axis=1)
    cb = np.sum(v1 * v3, axis=1)
    cg = np.sum(v1 * v2, axis=1)
    ok &= (a2 > 1e-18) & (b2 > 1e-18) & (c2 > 1e-18)

    coeffs = _p3p_quartic_coeffs(a2, b2, c2, ca, cb, cg)
    roots = _quartic_roots_batch(coeffs)          # (N, 4) candidate v values
    roots = np.where(ok[:, None], roots, np.nan)

    best_err = np.full(N, np.inf)
    best_params = params.copy()
    for r in range(4):
        v = roots[:, r]
        cand = np.isfinite(v) & (v > 1e-9)
        if not np.any(cand):
            continue
        denom = 2.0 * b2 * (cg - v * ca)
        cand &= np.abs(denom) > 1e-12
        u = np.where(cand, (b2 * (1 - v ** 2) + (a2 - c2) * (1 + v ** 2 - 2 * v * cb))
                     / np.where(cand, denom, 1.0), np.nan)
        cand &= np.isfinite(u) & (u > 1e-9)
        s1sq = b2 / np.maximum(1 + v ** 2 - 2 * v * cb, 1e-18)
        cand &= s1sq > 0
        if not np.any(cand):
            continue
        s1 = np.sqrt(np.where(cand, s1sq, 1.0))
        depths = np.stack([s1, u * s1, v * s1], axis=1)  # (N, 3)
        Pc = depths[:, :, None] * bearings                # camera-frame points
        sel = np.nonzero(cand)[0]
        R, t = _kabsch_batch(X[sel, :3], Pc[sel])
        q = mat_to_quat(R)
        cand_params = np.concatenate([q, t], axis=1)
        # score with the full minimal set (fourth point disambiguates)
        Xc4 = np.einsum("nij,npj->npi", R, X[sel]) + t[:, None, :]
        z4 = Xc4[..., 2]
        front = np.all(z4 > 1e-9, axis=1)
        zs = np.where(np.abs(z4) > 1e-9, z4, 1e-9)
        proj = np.stack([K.f * Xc4[..., 0] / zs + K.cx,
                         K.f * Xc4[..., 1] / zs + K.cy], axis=-1)
        err = np.linalg.norm(proj - px[sel], axis=-1).max(axis=1)
        err = np.where(front, err, np.inf)
        better = err < best_err[sel]
        upd = sel[better]
        best_err[upd] = err[better]
        best_params[upd] = cand_params[better]

    seeded = np.isfinite(best_err)
    if np.any(seeded):
        polished = gauss_newton_pose(best_params[seeded], px[seeded], X[seeded],
                                     K, iters=polish_iters)
        Rp = quat_to_mat(polished[:, :4])
        Xc = np.einsum("nij,npj->npi", Rp, X[seeded]) + polished[:, 4:][:, None, :]
        z = Xc[..., 2]
        zs = np.where(np.abs(z) > 1e-9, z, 1e-9)
        proj = np.stack([K.f * Xc[..., 0] / zs + K.cx,
                         K.f * Xc[..., 1] / zs + K.cy], axis=-1)
        err = np.linalg.norm(proj - px[seeded], axis=-1).max(axis=1)
        good = np.all(z > 1e-9, axis=1) & (err <= max_reproj_px)
        sel = np.nonzero(seeded)[0]
        keep = sel[good]
        params[keep] = polished[good]
        valid[keep] = True
    return params, valid


def solve_pnp_minimal(corrs: Correspondences, K: CameraIntrinsics,
                      max_reproj_px: float = 1.0) -> Pose6D:
    """Camera pose from exactly four 2D-3D correspondences.

    Raises DegenerateMinimalSet for collinear/coincident 3D points and
    NoSolution when no pose reprojects all four points within
    ``max_reproj_px``.
    """
    if len(corrs) != 4:
        raise ValueError("solve_pnp_minimal expects exactly 4 correspondences")
    X = corrs.coords
    span = np.linalg.norm(X - X.mean(axis=0), axis=1).max()
    d = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    if np.min(d[np.triu_indices(4, 1)]) <= 1e-9:
        raise DegenerateMinimalSet("coincident 3D points")
    # all four collinear?
    dirs = X[1:] - X[0]
    if np.linalg.norm(np.cross(dirs[0], dirs[1])) <= 1e-9 * max(1.0, span ** 2) and \
       np.linalg.norm(np.cross(dirs[0], dirs[2])) <= 1e-9 * max(1.0, span ** 2):
        raise DegenerateMinimalSet("collinear 3D points")
    # try cyclic orderings until the leading triple is non-collinear
    for shift in range(4):
        order = np.roll(np.arange(4), shift)
        tri = X[order[:3]]
        if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) \
                > 1e-9 * max(1.0, span ** 2):
            params, valid = fit_poses_batch(corrs.pixels, corrs.coords,
                                            order[None, :], K,
                                            max_reproj_px=max_reproj_px)
            if valid[0]:
                return model_from_params(POSE, params[0])
    raise NoSolution("no pose found for the minimal set")


def solve_pnp(corrs: Correspondences, K: CameraIntrinsics, init: Pose6D,
              iters: int = 10) -> Pose6D:
    """Full (non-minimal) PnP: Gauss-Newton from ``init`` on all correspondences."""
    params = gauss_newton_pose(init.params[None, :], corrs.pixels[None, :, :],
                               corrs.coords[None, :, :], K, iters=iters)
    return model_from_params(POSE, params[0])


# ---------------------------------------------------------------------------
# non-minimal refits and refinement
# ---------------------------------------------------------------------------


def fit_line_tls(xy: np.ndarray, slope_bound: float = DEFAULT_SLOPE_BOUND):
    """Total-least-squares (orthogonal regression) line through >= 2 points.

    Returns a Line2D or None when the best-fit direction is near-vertical or
    the points are degenerate.
    """
    xy = np.asarray(xy, dtype=float)
    c = xy.mean(axis=0)
    d = xy - c
    cov = d.T @ d
    w, V = np.linalg.eigh(cov)
    direction = V[:, np.argmax(w)]
    if abs(direction[0]) <= 1e-12:
        return None
    m = direction[1] / direction[0]
    if abs(m) > slope_bound:
        return None
    return Line2D(float(m), float(c[1] - m * c[0]))


def fit_circle_kasa(xy: np.ndarray):
    """Algebraic (Kasa) circle fit through >= 3 points; None when degenerate."""
    xy = np.asarray(xy, dtype=float)
    A = np.column_stack([2.0 * xy[:, 0], 2.0 * xy[:, 1], np.ones(len(xy))])
    b = np.sum(xy ** 2, axis=1)
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 3:
        return None
    cx, cy, k = sol
    r2 = k + cx * cx + cy * cy
    if r2 <= 0:
        return None
    return Circle2D(float(cx), float(cy), float(np.sqrt(r2)))


def refine_on_inliers(h, obs, cfg, iters: int = 8,
                      K: CameraIntrinsics | None = None):
    """Iterative inlier refit: keep the iterate with the best hard inlier count.

    Lines/circles are refit by total least squares / Kasa; poses by a full
    Gauss-Newton PnP on the inliers.  Returns ``h`` unchanged when the inlier
    set drops below the minimal-set size, so the returned hypothesis never
    scores worse than the input.
    """
    kind = model_kind(h)
    check_observations(kind, obs)
    sentinel = 100.0 * cfg.tau
    best = h
    best_count = int(np.sum(residuals(h, obs, K=K, behind_sentinel=sentinel) < cfg.tau))
    current = h
    prev_mask = None
    for _ in range(iters):
        d = residuals(current, obs, K=K, behind_sentinel=sentinel)
        mask = d < cfg.tau
        if prev_mask is not None and np.array_equal(mask, prev_mask):
            break
        prev_mask = mask
        if int(mask.sum()) < MINIMAL_SET_SIZE[kind]:
            break
        if kind == LINE:
            refit = fit_line_tls(obs.xy[mask])
        elif kind == CIRCLE:
            refit = fit_circle_kasa(obs.xy[mask])
        else:
            sub = Correspondences(obs.pixels[mask], obs.coords[mask])
            refit = solve_pnp(sub, K, current)
        if refit is None:
            break
        count = int(np.sum(residuals(refit, obs, K=K, behind_sentinel=sentinel) < cfg.tau))
        if count >= best_count:
            best = refit
            best_count = count
        current = refit
    return best


# ---------------------------------------------------------------------------
# task losses
# ---------------------------------------------------------------------------


def pose_loss(h: Pose6D, h_gt: Pose6D, gamma: float = 100.0) -> float:
    """Rotation angle (degrees) plus ``gamma`` times translation distance (meters)."""
    ang = float(rotation_angle_deg(np.asarray(h.q), np.asarray(h_gt.q)))
    dt = float(np.linalg.norm(np.asarray(h.t) - np.asarray(h_gt.t)))
    return ang + gamma * dt


def toy_loss(h, h_gt, image_size: float) -> float:
    """Training loss for the toy models.

    Lines: the maximum vertical deviation ``|dm*x + dn|`` over the image
    (attained at ``x = 0`` or ``x = image_size - 1``).  Circles: center
    distance plus absolute radius difference.  Mixed line/circle comparisons
    return ``image_size`` as a fixed cross-type penalty.
    """
    ka, kb = model_kind(h), model_kind(h_gt)
    if ka != kb:
        return float(image_size)
    loss, _ = toy_loss_batch(h.params[None, :], ka, h_gt, image_size)
    return float(loss[0])


def toy_loss_batch(params: np.ndarray, kind: str, h_gt, image_size: float):
    """Vectorized toy losses and their parameter gradients.

    Returns (losses (N,), grads (N, k)).  Cross-type rows (``kind`` differs
    from the ground-truth kind) get the flat penalty and zero gradient.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    gt_kind = model_kind(h_gt)
    N = params.shape[0]
    if kind != gt_kind:
        return np.full(N, float(image_size)), np.zeros_like(params)
    if kind == LINE:
        dm = params[:, 0] - h_gt.m
        dn = params[:, 1] - h_gt.n
        x_far = float(image_size) - 1.0
        v0 = np.abs(dn)
        v1 = np.abs(dm * x_far + dn)
        loss = np.maximum(v0, v1)
        grads = np.zeros((N, 2), dtype=float)
        far = v1 > v0
        s_far = np.sign(dm * x_far + dn)
        s_near = np.sign(dn)
        grads[:, 0] = np.where(far, s_far * x_far, 0.0)
        grads[:, 1] = np.where(far, s_far, s_near)
        return loss, grads
    if kind == CIRCLE:
        dc = params[:, :2] - [h_gt.cx, h_gt.cy]
        dist = np.linalg.norm(dc, axis=1)
        dr = params[:, 2] - h_gt.r
        loss = dist + np.abs(dr)
        grads = np.zeros((N, 3), dtype=float)
        safe = np.where(dist > 1e-12, dist, 1.0)
        grads[:, 0] = np.where(dist > 1e-12, dc[:, 0] / safe, 0.0)
        grads[:, 1] = np.where(dist > 1e-12, dc[:, 1] / safe, 0.0)
        grads[:, 2] = np.sign(dr)
        return loss, grads
    raise ModelDatumMismatch("toy_loss applies to line/circle models only")
