"""Synthetic multi-room camera re-localization study.

A world of M disjoint rooms, optionally built as ambiguous pairs that share
their landmark layout up to a rigid offset (locally identical geometry, like
repeated offices).  Synthetic scene-coordinate experts stand in for trained
networks: on their home room they return the true coordinates corrupted by
Gaussian noise and a controlled outlier fraction; shown a paired foreign room
they return geometrically plausible but wrong-room coordinates (mapped through
the pairing offset, further degraded); unrelated rooms yield uninformative
coordinates.  A gating simulator with a configurable confusion matrix stands
in for the gating network.

On top of these, the module runs the full pose inference path (allocation,
per-expert PnP hypothesis pools, joint selection by score, inlier refinement)
and compares gating schemes: single pooled estimator over all rooms, expert
selection, expert sample consensus, uniform gating and oracle gating.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import _util, consensus, ensemble, models
from .consensus import ScoringConfig
from .ensemble import HypothesisStream
from .models import CameraIntrinsics, Correspondences, Pose6D


class RetryExhausted(RuntimeError):
    """No valid camera viewpoint found within the retry budget."""


class DegenerateCluster(ValueError):
    """Every cluster has zero spread; soft assignment is undefined."""


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------


@dataclass
class Room:
    index: int
    origin: np.ndarray        # (3,) world-frame corner, meters
    size: np.ndarray          # (3,) box extents
    landmarks: np.ndarray     # (L, 3) world-frame points

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.size


@dataclass
class Environment:
    rooms: list
    pairing: dict             # room index -> partner sharing its layout
    intrinsics: CameraIntrinsics
    image_size: tuple         # (width, height) pixels

    @property
    def n_rooms(self) -> int:
        return len(self.rooms)

    def room_of_position(self, p: np.ndarray) -> int:
        """Nearest room (containing box first, then nearest center)."""
        for room in self.rooms:
            if np.all(p >= room.origin) and np.all(p <= room.origin + room.size):
                return room.index
        d = [np.linalg.norm(p - r.center) for r in self.rooms]
        return int(np.argmin(d))


def build_environment(n_rooms: int, seed: int, room_size=(4.0, 4.0, 2.5),
                      spacing: float = 10.0, landmarks_per_room: int = 256,
                      paired: bool = True, image_size=(320, 240),
                      focal: float = 260.0) -> Environment:
    """Rooms along the world x-axis; consecutive pairs share their layout."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 101)))
    size = np.asarray(room_size, dtype=float)
    rooms = []
    pairing = {}
    base_layout = {}
    for i in range(n_rooms):
        origin = np.array([i * spacing, 0.0, 0.0])
        if paired and i % 2 == 1:
            local = base_layout[i - 1]
            pairing[i] = i - 1
            pairing[i - 1] = i
        else:
            local = rng.uniform(0.05, 0.95, size=(landmarks_per_room, 3)) * size
            base_layout[i] = local
        rooms.append(Room(i, origin, size.copy(), origin + local))
    K = CameraIntrinsics(f=focal, cx=image_size[0] / 2.0, cy=image_size[1] / 2.0)
    return Environment(rooms, pairing, K, tuple(image_size))


def room_offset(env: Environment, src: int, dst: int) -> np.ndarray:
    """World translation mapping room ``src`` coordinates into room ``dst``."""
    return env.rooms[dst].origin - env.rooms[src].origin


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


@dataclass
class SyntheticFrame:
    room: int
    pose: Pose6D              # extrinsics, x_cam = R x_world + t
    pixels: np.ndarray        # (P, 2) grid pixel positions
    coords: np.ndarray        # (P, 3) true world scene coordinates

    @property
    def correspondences(self) -> Correspondences:
        return Correspondences(self.pixels, self.coords)

    @property
    def median_coordinate(self) -> np.ndarray:
        return np.median(self.coords, axis=0)


def _look_at_pose(center: np.ndarray, target: np.ndarray, roll: float) -> Pose6D:
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(fwd, up)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(fwd, x_cam)
    R = np.stack([x_cam, y_cam, fwd])
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]]) @ R
    t = -R @ center
    return models.model_from_params(models.POSE,
                                    np.concatenate([models.mat_to_quat(R), t]))


def generate_frame(env: Environment, room: int, rng: np.random.Generator,
                   grid=(20, 15), min_visible: int = 30,
                   max_attempts: int = 100) -> SyntheticFrame:
    """Sample a camera pose inside the room and record exact correspondences.

    The dense grid coordinates are back-projected from a smooth random depth
    field, so every correspondence reprojects to its pixel exactly.  The pose
    must see at least ``min_visible`` of the room's landmarks.
    """
    r = env.rooms[room]
    K = env.intrinsics
    W, H = env.image_size
    for _ in range(max_attempts):
        center = r.origin + rng.uniform([0.3, 0.3, 0.3], 1.0 - np.array([0.3, 0.3, 0.3]) / r.size) * r.size
        target = r.landmarks[rng.integers(len(r.landmarks), size=8)].mean(axis=0)
        target = target + rng.uniform(-0.3, 0.3, size=3)
        if np.linalg.norm(target - center) < 0.5:
            continue
        roll = rng.uniform(-0.4, 0.4)
        pose = _look_at_pose(center, target, roll)
        pix, depth = models.project_points(pose.params[None, :], r.landmarks, K)
        pix, depth = pix[0], depth[0]
        visible = (depth > 0.25) & (pix[:, 0] >= 0) & (pix[:, 0] < W) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < H)
        if int(visible.sum()) < min_visible:
            continue

        gw, gh = grid
        us = (np.arange(gw) + 0.5) * (W / gw)
        vs = (np.arange(gh) + 0.5) * (H / gh)
        uu, vv = np.meshgrid(us, vs)
        pixels = np.column_stack([uu.ravel(), vv.ravel()])
        # smooth positive depth field over the grid
        base = rng.uniform(1.2, 2.4)
        amp = rng.uniform(0.1, 0.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        dfield = base \
            + amp[0] * np.sin(2 * np.pi * uu / W + phase[0]) \
            + amp[1] * np.sin(2 * np.pi * vv / H + phase[1])
        dfield = np.clip(dfield, 0.8, None).ravel()
        rays = np.column_stack([(pixels[:, 0] - K.cx) / K.f,
                                (pixels[:, 1] - K.cy) / K.f,
                                np.ones(len(pixels))])
        cam_pts = rays * dfield[:, None]
        R = pose.rotation_matrix
        world = (cam_pts - np.asarray(pose.t)) @ R
        return SyntheticFrame(room, pose, pixels, world)
    raise RetryExhausted(f"no valid viewpoint in room {room} "
                         f"after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# synthetic experts and gating
# ---------------------------------------------------------------------------


def _burn_compute(reps: int) -> None:
    """Fixed numeric workload emulating a network forward pass."""
    if reps <= 0:
        return
    a = _burn_compute._scratch
    for _ in range(reps):
        a = 0.5 * (a @ _burn_compute._weights) + 0.5
    float(a[0, 0])


_burn_compute._scratch = np.linspace(0.0, 1.0, 96 * 96).reshape(96, 96)
_burn_compute._weights = np.linspace(-0.01, 0.01, 96 * 96).reshape(96, 96)


@dataclass
class SyntheticExpertModel:
    """Stand-in for a trained scene-coordinate network of one room.

    ``compute_reps`` sizes an artificial numeric workload per evaluation so
    that conditional computation shows up in wall-clock measurements the way
    a real network forward pass would.
    """

    room: int
    env: Environment
    sigma: float = 0.02                # coordinate noise, meters
    outlier_fraction: float = 0.2
    outlier_magnitude: float = 3.0     # half-side of the outlier box, meters
    cross_noise_scale: float = 4.0     # degradation on paired foreign rooms
    cross_outlier_fraction: float = 0.55
    compute_reps: int = 4
    evaluations: int = 0

    def predict(self, frame: SyntheticFrame,
                rng: np.random.Generator) -> Correspondences:
        self.evaluations += 1
        _burn_compute(self.compute_reps)
        n = len(frame.pixels)
        home = self.env.rooms[self.room]
        if frame.room == self.room:
            coords = frame.coords.copy()
            sigma = self.sigma
            out_frac = self.outlier_fraction
        elif self.env.pairing.get(frame.room) == self.room:
            # locally identical partner room: plausible but wrong-room output
            coords = frame.coords + room_offset(self.env, frame.room, self.room)
            sigma = self.sigma * self.cross_noise_scale
            out_frac = self.cross_outlier_fraction
        else:
            # unrelated room: no geometric consistency at all
            coords = home.origin + rng.uniform(0, 1, size=(n, 3)) * home.size
            sigma = self.sigma
            out_frac = 0.0
        coords = coords + rng.normal(0.0, sigma, size=coords.shape)
        if out_frac > 0:
            bad = rng.random(n) < out_frac
            junk = home.center + rng.uniform(-self.outlier_magnitude,
                                             self.outlier_magnitude,
                                             size=(int(bad.sum()), 3))
            coords[bad] = junk
        return Correspondences(frame.pixels, coords)


@dataclass
class GatingSimulator:
    """Stand-in for the gating network, calibrated by a confusion matrix.

    Per frame, the believed room is drawn from the confusion row of the true
    room; the emitted distribution concentrates ``top_mass`` on the belief and
    ``second_mass`` on the belief's most confusable other room, so schemes
    that trust the argmax reproduce the configured confusion while soft
    schemes can still recover the truth.
    """

    confusion: np.ndarray
    top_mass: float = 0.7
    second_mass: float = 0.3

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=float)
        m = self.confusion.shape[0]
        if self.confusion.shape != (m, m):
            raise ValueError("confusion matrix must be square")
        if np.any(np.abs(self.confusion.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("confusion rows must sum to 1")
        if not np.isclose(self.top_mass + self.second_mass, 1.0):
            raise ValueError("top_mass + second_mass must equal 1")
        if self.top_mass <= self.second_mass:
            raise ValueError("top_mass must exceed second_mass")

    @property
    def n_rooms(self) -> int:
        return self.confusion.shape[0]

    def gating_for(self, true_room: int, rng: np.random.Generator) -> np.ndarray:
        m = self.n_rooms
        believed = int(rng.choice(m, p=self.confusion[true_room]
                                  / self.confusion[true_room].sum()))
        g = np.zeros(m)
        if m == 1 or self.second_mass <= 0:
            g[believed] = 1.0
            return g
        row = self.confusion[believed].copy()
        row[believed] = -1.0
        second = int(np.argmax(row))
        g[believed] = self.top_mass
        g[second] = self.second_mass
        return g


def ambiguous_confusion(n_rooms: int, fidelity: float = 0.62) -> np.ndarray:
    """Pairwise-ambiguous confusion: mass splits between a room and its pair."""
    c = np.zeros((n_rooms, n_rooms))
    for i in range(n_rooms):
        partner = i + 1 if i % 2 == 0 else i - 1
        if partner >= n_rooms:
            c[i, i] = 1.0
            continue
        c[i, i] = fidelity
        c[i, partner] = 1.0 - fidelity
    return c


def oracle_gating(true_room: int, n_rooms: int) -> np.ndarray:
    g = np.zeros(n_rooms)
    g[true_room] = 1.0
    return g


# ---------------------------------------------------------------------------
# localization
# ---------------------------------------------------------------------------


@dataclass
class LocalizationResult:
    pose: Pose6D | None
    expert: int
    hypothesis_index: int
    score: float
    experts_evaluated: int
    allocation: np.ndarray
    best_scores: dict              # expert -> best pool score


def esac_localize(frame: SyntheticFrame, experts: list, gating: np.ndarray,
                  n_hypotheses: int, cfg: ScoringConfig, env: Environment,
                  seed: int, top_k: int | None = None,
                  refine_iters: int = 8) -> LocalizationResult:
    """Allocate the budget, pool PnP hypotheses per expert, select and refine.

    Deterministic test-time rule: expected-count allocation with largest
    remainder, argmax score across every allocated hypothesis, then inlier
    refinement of the winner.  Only experts with a nonzero allocation are
    evaluated.
    """
    g = ensemble.validate_gating(gating)
    if top_k is not None:
        g = ensemble.restrict_top_k(g, top_k)
    alloc = ensemble.expected_count_allocation(g, n_hypotheses)
    pools = []
    best_scores = {}
    evaluated = 0
    for e, c in enumerate(alloc):
        if c == 0:
            continue
        evaluated += 1
        rng = np.random.default_rng(np.random.SeedSequence((seed, 11, e)))
        obs = experts[e].predict(frame, rng)
        stream_rng = np.random.default_rng(np.random.SeedSequence((seed, 13, e)))
        try:
            pool = consensus.sample_pool(obs, int(c), models.POSE, cfg,
                                         stream_rng, K=env.intrinsics)
        except consensus.PoolExhausted:
            continue
        pools.append((e, pool, obs))
        best_scores[e] = float(np.max(pool.scores))
    if not pools:
        return LocalizationResult(None, -1, -1, 0.0, evaluated, alloc, best_scores)
    sel = ensemble.esac_joint_selection([(e, p) for e, p, _ in pools], argmax=True)
    obs = next(o for e, _, o in pools if e == sel.expert)
    pose = models.refine_on_inliers(sel.hypothesis, obs, cfg, iters=refine_iters,
                                    K=env.intrinsics)
    return LocalizationResult(pose, sel.expert, sel.index, sel.score,
                              evaluated, alloc, best_scores)


def dsac_all_rooms_localize(frame: SyntheticFrame, experts: list,
                            n_hypotheses: int, cfg: ScoringConfig,
                            env: Environment, seed: int,
                            refine_iters: int = 8) -> LocalizationResult:
    """Monolithic baseline: one pool over the union of all expert outputs."""
    parts = []
    for e, expert in enumerate(experts):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 17, e)))
        parts.append(expert.predict(frame, rng))
    obs = Correspondences(np.vstack([p.pixels for p in parts]),
                          np.vstack([p.coords for p in parts]))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 19)))
    try:
        pool = consensus.sample_pool(obs, n_hypotheses, models.POSE, cfg, rng,
                                     K=env.intrinsics)
    except consensus.PoolExhausted:
        return LocalizationResult(None, -1, -1, 0.0, len(experts),
                                  np.zeros(len(experts), dtype=int), {})
    h, j = consensus.ransac_select(pool)
    pose = models.refine_on_inliers(h, obs, cfg, iters=refine_iters,
                                    K=env.intrinsics)
    room = env.room_of_position(pose.camera_position)
    return LocalizationResult(pose, room, j, float(pool.scores[j]),
                              len(experts), np.zeros(len(experts), dtype=int), {})


def pose_errors(pose: Pose6D, truth: Pose6D):
    """(rotation degrees, translation meters)."""
    rot = float(models.rotation_angle_deg(np.asarray(pose.q), np.asarray(truth.q)))
    trans = float(np.linalg.norm(np.asarray(pose.t) - np.asarray(truth.t)))
    return rot, trans


# ---------------------------------------------------------------------------
# clustering and soft assignment
# ---------------------------------------------------------------------------


def cluster_environment(medians: np.ndarray, k: int, rng: np.random.Generator,
                        max_iterations: int = 100, tol: float = 1e-6):
    """Lloyd k-means over per-frame median scene coordinates.

    Initialization is farthest-point sampling from a random seed point.
    Returns (centers (k, 3), assignments (F,), objective history).  The
    objective (sum of squared distances) never increases between iterations.
    """
    pts = np.asarray(medians, dtype=float)
    if pts.shape[0] < k:
        raise ValueError("need at least k frames to form k clusters")
    centers = np.empty((k, 3))
    centers[0] = pts[int(rng.integers(pts.shape[0]))]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        centers[i] = pts[int(np.argmax(d2))]
        d2 = np.minimum(d2, np.sum((pts - centers[i]) ** 2, axis=1))

    history = []
    assign = None
    for _ in range(max_iterations):
        d2all = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2all, axis=1)
        history.append(float(np.sum(d2all[np.arange(len(pts)), assign])))
        new_centers = centers.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break
    d2all = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2all, axis=1)
    history.append(float(np.sum(d2all[np.arange(len(pts)), assign])))
    return centers, assign, history


def cluster_sizes(medians: np.ndarray, centers: np.ndarray,
                  assignments: np.ndarray) -> np.ndarray:
    """Mean squared member distance per cluster (zero for empty clusters)."""
    pts = np.asarray(medians, dtype=float)
    sizes = np.zeros(centers.shape[0])
    for j in range(centers.shape[0]):
        members = pts[assignments == j]
        if len(members):
            sizes[j] = float(np.mean(np.sum((members - centers[j]) ** 2, axis=1)))
    return sizes


def soft_assignment(mean_coordinate: np.ndarray, centers: np.ndarray,
                    sizes: np.ndarray, softness: float = 5.0) -> np.ndarray:
    """Normalized cluster similarities S = exp(-softness*d / (2*sigma)) / (2*pi*sigma).

    Zero-size (single frame) clusters borrow the smallest positive size;
    DegenerateCluster is raised when no positive size exists.
    """
    sizes = np.asarray(sizes, dtype=float)
    if np.any(sizes < 0):
        raise ValueError("cluster sizes must be non-negative")
    if np.all(sizes == 0):
        raise DegenerateCluster("all clusters have zero spread")
    floor = float(np.min(sizes[sizes > 0]))
    sigma = np.where(sizes > 0, sizes, floor)
    d = np.linalg.norm(np.asarray(mean_coordinate, dtype=float) - centers, axis=1)
    log_s = -np.log(2.0 * np.pi * sigma) - softness * d / (2.0 * sigma)
    log_s = log_s - np.max(log_s)
    s = np.exp(log_s)
    return s / s.sum()


# ---------------------------------------------------------------------------
# study
# ---------------------------------------------------------------------------


SCHEMES = ("dsac-all-rooms", "expert-selection", "esac", "uniform", "oracle")


@dataclass
class RelocConfig:
    n_rooms: int = 4
    n_frames: int = 2000
    n_hypotheses: int = 256
    grid: tuple = (20, 15)
    tau: float = 10.0
    alpha: float = 20.0 / 300.0
    beta: float = 0.5
    sigma: float = 0.02
    outlier_fraction: float = 0.2
    outlier_magnitude: float = 3.0
    cross_noise_scale: float = 4.0
    cross_outlier_fraction: float = 0.55
    gating_fidelity: float = 0.62
    gating_top_mass: float = 0.7
    expert_compute_reps: int = 4
    refine_iters: int = 8
    top_k: int | None = None
    schemes: tuple = SCHEMES
    room_size: tuple = (4.0, 4.0, 2.5)
    landmarks_per_room: int = 256
    paired_rooms: bool = True
    accept_rot_deg: float = 5.0
    accept_trans_m: float = 0.05

    def scoring(self) -> ScoringConfig:
        return ScoringConfig(tau=self.tau, alpha=self.alpha, beta=self.beta)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schemes"] = list(self.schemes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RelocConfig":
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown reloc config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, tuple) and value is not None:
                value = tuple(value)
            setattr(cfg, key, value)
        return cfg


def build_experts(env: Environment, config: RelocConfig) -> list:
    return [SyntheticExpertModel(
        room=e, env=env, sigma=config.sigma,
        outlier_fraction=config.outlier_fraction,
        outlier_magnitude=config.outlier_magnitude,
        cross_noise_scale=config.cross_noise_scale,
        cross_outlier_fraction=config.cross_outlier_fraction,
        compute_reps=config.expert_compute_reps) for e in range(env.n_rooms)]


def confusion_matrix(true_rooms, selected, n_rooms: int) -> np.ndarray:
    """Counts with rows = true room, columns = selected expert."""
    mat = np.zeros((n_rooms, n_rooms), dtype=int)
    for t, s in zip(true_rooms, selected):
        if 0 <= s < n_rooms:
            mat[t, s] += 1
    return mat


def confusion_to_csv(mat: np.ndarray) -> str:
    m = mat.shape[0]
    lines = ["true_room," + ",".join(f"selected_{j}" for j in range(m))]
    for i in range(m):
        lines.append(f"{i}," + ",".join(str(int(v)) for v in mat[i]))
    return "\n".join(lines) + "\n"


def run_study(config: RelocConfig, seed: int, collect_traces: bool = False,
              threads: int = 1):
    """Compare gating schemes on one environment.

    Returns (report dict, timing dict, traces).  The report is a pure
    function of (config, seed): every frame derives its own rng, so results
    do not depend on the worker count.  Per-frame wall-clock times live in
    the separate timing dict so deterministic outputs stay byte-stable.
    """
    env = build_environment(config.n_rooms, seed,
                            room_size=config.room_size,
                            landmarks_per_room=config.landmarks_per_room,
                            paired=config.paired_rooms)
    cfg = config.scoring()
    gating_sim = GatingSimulator(
        ambiguous_confusion(config.n_rooms, config.gating_fidelity),
        top_mass=config.gating_top_mass,
        second_mass=1.0 - config.gating_top_mass)

    def make_frame(i: int):
        room = i % config.n_rooms
        rng = np.random.default_rng(np.random.SeedSequence((seed, 23, i)))
        return generate_frame(env, room, rng, grid=config.grid)

    frames = _util.parallel_map(make_frame, range(config.n_frames), threads)

    report = {"schemes": {}, "n_rooms": config.n_rooms,
              "n_frames": config.n_frames}
    timing = {}
    traces = {}
    for scheme in config.schemes:
        experts = build_experts(env, config)

        def localize_frame(item):
            i, frame = item
            rng = np.random.default_rng(np.random.SeedSequence((seed, 29, i)))
            t0 = time.perf_counter()
            if scheme == "dsac-all-rooms":
                res = dsac_all_rooms_localize(frame, experts,
                                              config.n_hypotheses, cfg, env,
                                              seed=seed * 1000003 + i,
                                              refine_iters=config.refine_iters)
            else:
                if scheme == "oracle":
                    g = oracle_gating(frame.room, env.n_rooms)
                    top_k = None
                elif scheme == "uniform":
                    g = np.full(env.n_rooms, 1.0 / env.n_rooms)
                    top_k = None
                elif scheme == "expert-selection":
                    g = gating_sim.gating_for(frame.room, rng)
                    top_k = 1
                elif scheme == "esac":
                    g = gating_sim.gating_for(frame.room, rng)
                    top_k = config.top_k
                else:
                    raise ValueError(f"unknown scheme {scheme!r}")
                res = esac_localize(frame, experts, g, config.n_hypotheses,
                                    cfg, env, seed=seed * 1000003 + i,
                                    top_k=top_k,
                                    refine_iters=config.refine_iters)
            elapsed = time.perf_counter() - t0
            return res, elapsed

        results = _util.parallel_map(localize_frame, enumerate(frames), threads)
        rows = []
        t_total = 0.0
        scheme_traces = []
        for i, (frame, (res, elapsed)) in enumerate(zip(frames, results)):
            t_total += elapsed
            if res.pose is None:
                rows.append((False, 180.0, float("inf"), res.expert,
                             res.experts_evaluated))
            else:
                rot, trans = pose_errors(res.pose, frame.pose)
                ok = rot < config.accept_rot_deg and trans < config.accept_trans_m
                rows.append((ok, rot, trans, res.expert, res.experts_evaluated))
            if collect_traces:
                scheme_traces.append({
                    "frame": i, "true_room": frame.room,
                    "allocation": [int(v) for v in res.allocation],
                    "best_scores": {str(k): v for k, v in res.best_scores.items()},
                    "selected": [int(res.expert), int(res.hypothesis_index)],
                    "pose": list(res.pose.params) if res.pose else None,
                })
        oks = np.array([r[0] for r in rows])
        rots = np.array([r[1] for r in rows])
        trans = np.array([r[2] for r in rows])
        sel = [r[3] for r in rows]
        evals = np.array([r[4] for r in rows])
        mat = confusion_matrix([f.room for f in frames], sel, env.n_rooms)
        report["schemes"][scheme] = {
            "accuracy": float(np.mean(oks)),
            "median_rotation_deg": float(np.median(rots)),
            "median_translation_m": float(np.median(trans)),
            "classification_accuracy": float(np.mean(
                [s == f.room for s, f in zip(sel, frames)])),
            "mean_experts_evaluated": float(np.mean(evals)),
            "confusion": mat.tolist(),
        }
        timing[scheme] = {"mean_ms_per_frame": 1000.0 * t_total / len(frames)}
        if collect_traces:
            traces[scheme] = scheme_traces
    return report, timing, traces
