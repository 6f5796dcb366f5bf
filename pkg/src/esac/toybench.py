"""Synthetic line/circle benchmark: generation, training and evaluation.

Images show either a line or a circle (50% each) plus box distractors and
multiplicative speckle noise.  Two point-predicting experts (one per model
kind) and a small gating classifier are trained in three stages: per-kind
DSAC pretraining of each expert, NLL pretraining of the gating, then joint
end-to-end training with either expert selection or expert sample consensus.

All randomness derives from per-item seeds, so datasets, training runs and
evaluations are pure functions of (config, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import _util, consensus, diffnet, ensemble, models
from .consensus import GradEntry, ScoringConfig
from .diffnet import AdamState, Predictor
from .ensemble import HypothesisStream
from .models import Circle2D, Line2D, Points2D

KINDS = (models.LINE, models.CIRCLE)


@dataclass
class ToyConfig:
    """Generator, scoring and schedule settings for the toy benchmark."""

    image_size: int = 64
    n_points: int = 64           # points each expert predicts
    n_hypotheses: int = 64       # hypothesis budget per estimate
    batch_size: int = 32

    # generator
    slope_limit: float = 2.0
    radius_min_frac: float = 0.125      # of image size
    radius_max_frac: float = 1 / 2.2
    distractor_count: tuple = (4, 10)
    distractor_side_frac: tuple = (0.125, 1 / 3)
    speckle: tuple = (0.8, 1.2)
    line_width: float = 1.5
    shape_intensity: tuple = (0.05, 0.75)

    # scoring (non-paper defaults: tau matches the 3px acceptance criterion,
    # alpha makes a fully inlying prediction score about 20)
    tau: float = 3.0
    beta: float = 0.5
    alpha: float = 20.0 / 64.0

    # schedule
    pretrain_iterations: int = 50_000
    gating_iterations: int = 50_000
    joint_iterations: int = 50_000
    lr_pretrain: float = 1e-4
    lr_gating_pretrain: float = 1e-4
    lr_joint_expert: float = 3e-5
    lr_joint_gating: float = 3e-5
    # two-phase pretrain lr: multiply by lr_decay after lr_decay_at * iters
    lr_decay: float = 1.0
    lr_decay_at: float = 1.0
    # supervised warm-up that pulls reachable points onto the true shape
    # before consensus training starts (desk-scale initializer; mirrors the
    # supervised initialization the full pipeline uses before end-to-end)
    warmup_iterations: int = 0
    warmup_lr: float = 1e-3
    # test-time hypothesis budget; defaults to the training budget
    eval_hypotheses: int | None = None
    test_scenes: int = 10_000

    # architecture
    expert_patch: int = 4
    expert_patch_features: int = 24
    expert_hidden: tuple = (160, 128)
    expert_offset_reach: float = 2.5    # in units of the point-grid pitch
    gating_patch: int = 4
    gating_patch_features: int = 6
    gating_hidden: int = 16

    # per-scene point-gradient norm clip; 0 disables
    grad_clip: float = 50.0

    def scoring(self) -> ScoringConfig:
        return ScoringConfig(tau=self.tau, alpha=self.alpha, beta=self.beta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ToyConfig":
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown toy config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, tuple):
                value = tuple(value)
            setattr(cfg, key, value)
        return cfg


def mini_config() -> ToyConfig:
    """Desk-scale profile: smaller images, shorter schedule."""
    return ToyConfig(
        image_size=32,
        n_hypotheses=16,
        batch_size=16,
        pretrain_iterations=24_000,
        gating_iterations=8000,
        joint_iterations=6000,
        lr_pretrain=2e-4,
        lr_gating_pretrain=1e-3,
        lr_joint_expert=4e-5,
        lr_joint_gating=4e-5,
        lr_decay=0.35,
        lr_decay_at=0.6,
        warmup_iterations=6000,
        expert_patch_features=40,
        expert_hidden=(256, 160),
        eval_hypotheses=48,
        test_scenes=2000,
    )


def paper_config() -> ToyConfig:
    return ToyConfig()


PROFILES = {"mini": mini_config, "paper": paper_config}


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


@dataclass
class ToyScene:
    image: np.ndarray      # (S, S) float32 intensities in [0, 1]
    kind: str              # "line" or "circle"
    h_gt: object           # Line2D or Circle2D
    distractors: int
    seed: int

    @property
    def gt_vector(self) -> np.ndarray:
        """(m, n, r) vector; lines carry r = -1 as the not-a-circle marker."""
        if self.kind == models.LINE:
            return np.array([self.h_gt.m, self.h_gt.n, models.NOT_A_CIRCLE])
        return self.h_gt.params

    @property
    def class_index(self) -> int:
        return KINDS.index(self.kind)


def scene_rng(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def render_scene(rng: np.random.Generator, config: ToyConfig,
                 force_kind: str | None = None, seed: int = -1) -> ToyScene:
    """Draw one scene: shape, occluding box distractors, speckle noise."""
    S = config.image_size
    kind = force_kind or (models.LINE if rng.random() < 0.5 else models.CIRCLE)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    image = np.ones((S, S), dtype=np.float64)
    shade = rng.uniform(*config.shape_intensity)
    half_w = config.line_width / 2.0

    if kind == models.LINE:
        m = rng.uniform(-config.slope_limit, config.slope_limit)
        x0 = rng.uniform(0.2 * S, 0.8 * S)
        y0 = rng.uniform(0.2 * S, 0.8 * S)
        n = y0 - m * x0
        h_gt = Line2D(float(m), float(n))
        dist = np.abs(m * xx - yy + n) / np.hypot(m, 1.0)
    else:
        cx = rng.uniform(0.25 * S, 0.75 * S)
        cy = rng.uniform(0.25 * S, 0.75 * S)
        r = rng.uniform(config.radius_min_frac * S, config.radius_max_frac * S)
        h_gt = Circle2D(float(cx), float(cy), float(r))
        dist = np.abs(np.hypot(xx - cx, yy - cy) - r)
    image[dist <= half_w] = shade

    lo, hi = config.distractor_count
    count = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    side_lo = config.distractor_side_frac[0] * S
    side_hi = config.distractor_side_frac[1] * S
    for _ in range(count):
        w = rng.uniform(side_lo, side_hi)
        h = rng.uniform(side_lo, side_hi)
        cx0 = rng.uniform(0, S)
        cy0 = rng.uniform(0, S)
        x_lo, x_hi = int(max(0, cx0 - w / 2)), int(min(S, cx0 + w / 2))
        y_lo, y_hi = int(max(0, cy0 - h / 2)), int(min(S, cy0 + h / 2))
        image[y_lo:y_hi, x_lo:x_hi] = rng.uniform(0, 1)

    if config.speckle is not None:
        image *= rng.uniform(config.speckle[0], config.speckle[1], size=(S, S))
    np.clip(image, 0.0, 1.0, out=image)
    return ToyScene(image.astype(np.float32), kind, h_gt, count, seed)


def render_batch(seed: int, config: ToyConfig, count: int, stream: int = 0,
                 force_kind: str | None = None) -> list:
    return [render_scene(scene_rng(seed, stream, i), config,
                         force_kind=force_kind, seed=i)
            for i in range(count)]


# ---------------------------------------------------------------------------
# architectures and the ensemble container
# ---------------------------------------------------------------------------


def expert_layers(config: ToyConfig) -> list:
    """Point-predicting trunk with a grid-anchored offset head.

    The head ties each predicted point to a cell of a regular grid so the
    cloud stays spread out; a free (un-anchored) sigmoid head lets the cloud
    collapse early in training, which makes minimal-set fits ill conditioned
    and stalls DSAC learning.
    """
    S = config.image_size
    p = config.expert_patch
    f = config.expert_patch_features
    h1, h2 = config.expert_hidden
    n = config.n_points
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError("n_points must be a perfect square for the grid head")
    pitch = S / side
    return [
        ["patches", p, f],
        ["relu"],
        ["flatten"],
        ["dense", (S // p) ** 2 * f, h1],
        ["relu"],
        ["dense", h1, h2],
        ["relu"],
        ["dense", h2, 2 * n],
        ["offset_head", side, pitch, config.expert_offset_reach * pitch],
    ]


def gating_layers(config: ToyConfig, n_experts: int = 2) -> list:
    S = config.image_size
    p = config.gating_patch
    f = config.gating_patch_features
    return [
        ["patches", p, f],
        ["relu"],
        ["flatten"],
        ["dense", (S // p) ** 2 * f, config.gating_hidden],
        ["relu"],
        ["dense", config.gating_hidden, n_experts],
    ]


@dataclass
class ToyEnsemble:
    experts: list          # predictor per model kind, KINDS order
    gating: object
    kinds: tuple = KINDS

    def clone(self) -> "ToyEnsemble":
        return ToyEnsemble([e.clone() for e in self.experts],
                           self.gating.clone(), self.kinds)


def build_ensemble(config: ToyConfig, seed: int) -> ToyEnsemble:
    experts = [Predictor(expert_layers(config), seed=seed * 13 + 2 + e)
               for e in range(len(KINDS))]
    gating = Predictor(gating_layers(config, len(KINDS)), seed=seed * 13 + 1)
    return ToyEnsemble(experts, gating)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _clip_rows(grad: np.ndarray, limit: float) -> np.ndarray:
    if limit and limit > 0:
        norm = float(np.linalg.norm(grad))
        if norm > limit:
            return grad * (limit / norm)
    return grad


def _point_grid(config: ToyConfig):
    side = int(round(np.sqrt(config.n_points)))
    pitch = config.image_size / side
    return diffnet._grid_anchors(side, pitch), config.expert_offset_reach * pitch


def _shape_pull_gout(points: np.ndarray, scene: ToyScene, anchors: np.ndarray,
                     reach: float) -> np.ndarray:
    """Mean-distance-to-shape gradient over points whose anchor can reach it."""
    x, y = points[:, 0], points[:, 1]
    if scene.kind == models.LINE:
        m, n = scene.h_gt.m, scene.h_gt.n
        denom = np.hypot(m, 1.0)
        anchor_d = np.abs(m * anchors[:, 0] - anchors[:, 1] + n) / denom
        mask = anchor_d <= reach - 1.0
        e = (m * x - y + n) / denom
        w = np.sign(e) * mask / max(int(mask.sum()), 1) / denom
        return np.column_stack([w * m, -w])
    dxa = anchors[:, 0] - scene.h_gt.cx
    dya = anchors[:, 1] - scene.h_gt.cy
    anchor_d = np.abs(np.hypot(dxa, dya) - scene.h_gt.r)
    mask = anchor_d <= reach - 1.0
    dx, dy = x - scene.h_gt.cx, y - scene.h_gt.cy
    q = np.hypot(dx, dy)
    qs = np.where(q > 1e-9, q, 1e-9)
    w = np.sign(q - scene.h_gt.r) * mask / max(int(mask.sum()), 1)
    return np.column_stack([w * dx / qs, w * dy / qs])


def warmup_expert(kind: str, predictor: Predictor, config: ToyConfig,
                  seed: int, iterations: int | None = None,
                  telemetry: list | None = None) -> Predictor:
    """Supervised warm-up: pull reachable predicted points onto the shape."""
    iters = config.warmup_iterations if iterations is None else iterations
    anchors, reach = _point_grid(config)
    state = AdamState(predictor.n_params)
    stream = 11 if kind == models.LINE else 12
    for it in range(iters):
        scenes = render_batch(seed, config, config.batch_size,
                              stream=stream * 1000000 + it, force_kind=kind)
        images = np.stack([s.image for s in scenes])
        points, trace = predictor.trace(images)
        gout = np.zeros_like(points, dtype=np.float64)
        for b, scene in enumerate(scenes):
            gout[b] = _shape_pull_gout(points[b].astype(np.float64), scene,
                                       anchors, reach)
        pgrad = predictor.backward_from_trace(
            trace, (gout / config.batch_size).astype(np.float32))
        predictor.params = diffnet.adam_step(predictor.params, pgrad, state,
                                             config.warmup_lr)
        if telemetry is not None:
            telemetry.append({"iteration": it, "phase": "warmup"})
    return predictor


def pretrain_expert(kind: str, predictor: Predictor, config: ToyConfig,
                    seed: int, iterations: int | None = None,
                    telemetry: list | None = None) -> Predictor:
    """Minimize the DSAC expected toy loss on scenes of a single kind.

    When the config requests a warm-up, a short supervised phase first pulls
    reachable points onto the true shape; without it, consensus training
    stalls at desk scale because the initial point clouds give minimal-set
    fits no usable structure.
    """
    iters = config.pretrain_iterations if iterations is None else iterations
    if config.warmup_iterations > 0 and iterations != 0:
        warmup_expert(kind, predictor, config, seed, telemetry=telemetry)
    cfg = config.scoring()
    state = AdamState(predictor.n_params)
    stream = 1 if kind == models.LINE else 2
    decay_from = int(config.lr_decay_at * iters)
    for it in range(iters):
        lr = config.lr_pretrain * (config.lr_decay if it >= decay_from else 1.0)
        scenes = render_batch(seed, config, config.batch_size, stream=stream * 1000 + it,
                              force_kind=kind)
        images = np.stack([s.image for s in scenes])
        points, trace = predictor.trace(images)
        gout = np.zeros_like(points, dtype=np.float64)
        total = 0.0
        skipped = 0
        for b, scene in enumerate(scenes):
            obs = Points2D(points[b].astype(np.float64))
            rng = scene_rng(seed, stream, it, b, 7)
            try:
                pool = consensus.sample_pool(obs, config.n_hypotheses, kind, cfg, rng)
            except consensus.PoolExhausted:
                skipped += 1
                continue
            L, grad = consensus.dsac_backward(obs, pool, cfg, scene.h_gt,
                                              config.image_size)
            gout[b] = _clip_rows(grad, config.grad_clip)
            total += L
        used = max(1, config.batch_size - skipped)
        pgrad = predictor.backward_from_trace(trace, (gout / used).astype(np.float32))
        predictor.params = diffnet.adam_step(predictor.params, pgrad, state, lr)
        if telemetry is not None:
            telemetry.append({"iteration": it, "loss": total / used})
    return predictor


def pretrain_gating(predictor: Predictor, config: ToyConfig, seed: int,
                    iterations: int | None = None,
                    telemetry: list | None = None) -> Predictor:
    """Minimize the NLL classification loss on mixed scenes."""
    iters = config.gating_iterations if iterations is None else iterations
    state = AdamState(predictor.n_params)
    for it in range(iters):
        scenes = render_batch(seed, config, config.batch_size, stream=3000000 + it)
        images = np.stack([s.image for s in scenes])
        labels = np.array([s.class_index for s in scenes])
        logits, trace = predictor.trace(images)
        loss, gout = diffnet.nll_gating_loss_batch(logits, labels)
        pgrad = predictor.backward_from_trace(trace, gout.astype(np.float32))
        predictor.params = diffnet.adam_step(predictor.params, pgrad, state,
                                             config.lr_gating_pretrain)
        if telemetry is not None:
            telemetry.append({"iteration": it, "loss": loss})
    return predictor


def _expert_grad_pass(expert: Predictor, images: np.ndarray, gouts: np.ndarray):
    _, trace = expert.trace(images)
    return expert.backward_from_trace(trace, gouts.astype(np.float32))


def train_joint(ens: ToyEnsemble, scheme: str, config: ToyConfig, seed: int,
                iterations: int | None = None, telemetry: list | None = None,
                freeze_gating: bool = False) -> ToyEnsemble:
    """Joint end-to-end training with a K=1 sampled gradient per scene.

    ``scheme`` is "expert-selection" or "esac".  Each scene contributes a
    score-function gradient for the gating logits and exact DSAC point
    gradients for the experts that were evaluated; pools are redrawn fresh
    every step.
    """
    if scheme not in ("expert-selection", "esac"):
        raise ValueError(f"unknown scheme {scheme!r}")
    cfg = config.scoring()
    S = config.image_size
    n_exp = len(ens.experts)
    expert_states = [AdamState(e.n_params) for e in ens.experts]
    gating_state = AdamState(ens.gating.n_params)

    for it in range(iterations if iterations is not None else config.joint_iterations):
        scenes = render_batch(seed, config, config.batch_size, stream=4000000 + it)
        images = np.stack([s.image for s in scenes])
        logits, gating_trace = ens.gating.trace(images)
        gating_gout = np.zeros_like(logits, dtype=np.float64)

        # decide which experts each scene needs
        alloc_rows = []
        active_sets = []
        for b, scene in enumerate(scenes):
            g = ensemble.gating_softmax(logits[b].astype(np.float64))
            rng = scene_rng(seed, 5, it, b)
            if scheme == "expert-selection":
                e = int(rng.choice(n_exp, p=g / g.sum()))
                alloc = np.zeros(n_exp, dtype=int)
                alloc[e] = config.n_hypotheses
                active = [e]
            else:
                alloc = ensemble.sample_allocation(g, config.n_hypotheses, rng)
                active = [e for e in range(n_exp) if alloc[e] > 0]
            alloc_rows.append(alloc)
            active_sets.append(active)

        # batched expert forwards over the scenes that need them
        points = {}
        traces = {}
        members = {}
        for e in range(n_exp):
            rows = [b for b in range(len(scenes)) if e in active_sets[b]]
            if not rows:
                continue
            out, tr = ens.experts[e].trace(images[rows])
            points[e] = out
            traces[e] = tr
            members[e] = rows
        gouts = {e: np.zeros_like(points[e], dtype=np.float64) for e in points}

        total = 0.0
        used = 0
        for b, scene in enumerate(scenes):
            g = ensemble.gating_softmax(logits[b].astype(np.float64))
            alloc = alloc_rows[b]
            entries = []
            slots = []
            try:
                for e in active_sets[b]:
                    row = members[e].index(b)
                    obs = Points2D(points[e][row].astype(np.float64))
                    rng = scene_rng(seed, 6, it, b, e)
                    pool = consensus.sample_pool(obs, int(alloc[e]), ens.kinds[e],
                                                 cfg, rng)
                    entries.append(GradEntry(obs, pool))
                    slots.append((e, row))
            except consensus.PoolExhausted:
                continue
            L, _, grads = consensus.toy_grad_engine(entries, cfg, scene.h_gt, S)
            for (e, row), grad in zip(slots, grads):
                gouts[e][row] = _clip_rows(grad, config.grad_clip)
            if scheme == "expert-selection":
                e = active_sets[b][0]
                one_hot = np.zeros(n_exp)
                one_hot[e] = 1.0
                gating_gout[b] = L * (one_hot - g)
            else:
                gating_gout[b] = L * ensemble.allocation_logprob_grad_logits(
                    alloc, logits[b].astype(np.float64))
            total += L
            used += 1

        denom = max(used, 1)
        for e in points:
            pgrad = ens.experts[e].backward_from_trace(
                traces[e], (gouts[e] / denom).astype(np.float32))
            ens.experts[e].params = diffnet.adam_step(
                ens.experts[e].params, pgrad, expert_states[e],
                config.lr_joint_expert)
        if not freeze_gating:
            ggrad = ens.gating.backward_from_trace(
                gating_trace, (gating_gout / denom).astype(np.float32))
            ens.gating.params = diffnet.adam_step(
                ens.gating.params, ggrad, gating_state, config.lr_joint_gating)
        if telemetry is not None:
            telemetry.append({"iteration": it, "loss": total / denom})
    return ens


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ToyMetrics:
    scheme: str
    n_scenes: int
    parameter_accuracy: float
    classification_accuracy: float
    mean_experts_evaluated: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parameter_ok(h, scene: ToyScene, image_size: float) -> bool:
    """3px acceptance: max in-image deviation (line) / center and radius (circle)."""
    if models.model_kind(h) != scene.kind:
        return False
    if scene.kind == models.LINE:
        return models.toy_loss(h, scene.h_gt, image_size) < 3.0
    dc = np.hypot(h.cx - scene.h_gt.cx, h.cy - scene.h_gt.cy)
    return bool(dc < 3.0 and abs(h.r - scene.h_gt.r) < 3.0)


def _predict_points(predictor, scene: ToyScene, images_cache=None):
    if hasattr(predictor, "forward_scene"):
        return np.asarray(predictor.forward_scene(scene), dtype=np.float64)
    return np.asarray(predictor.forward(scene.image), dtype=np.float64)


def _gating_probs(gating, scene: ToyScene):
    if hasattr(gating, "forward_scene"):
        logits = np.asarray(gating.forward_scene(scene), dtype=np.float64)
    else:
        logits = np.asarray(gating.forward(scene.image), dtype=np.float64)
    return ensemble.gating_softmax(logits)


def evaluate_scene(ens: ToyEnsemble, scheme: str, scene: ToyScene,
                   config: ToyConfig, seed: int, index: int,
                   top_k: int | None = None):
    """Deterministic test-time estimate for one scene.

    Expert selection takes the argmax gating expert; expert sample consensus
    allocates by expected counts (largest remainder) and takes the argmax
    score across all allocated hypotheses.  Returns (hypothesis or None,
    selected expert, experts evaluated).
    """
    cfg = config.scoring()
    budget = config.eval_hypotheses or config.n_hypotheses
    g = _gating_probs(ens.gating, scene)
    if top_k is not None:
        g = ensemble.restrict_top_k(g, top_k)
    if scheme == "expert-selection":
        alloc = np.zeros(len(ens.experts), dtype=int)
        alloc[int(np.argmax(g))] = budget
    elif scheme == "esac":
        alloc = ensemble.expected_count_allocation(g, budget)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    pools = []
    evaluated = 0
    for e, c in enumerate(alloc):
        if c == 0:
            continue
        evaluated += 1
        pts = _predict_points(ens.experts[e], scene)
        rng = scene_rng(seed, 8, index, e)
        try:
            pool = consensus.sample_pool(Points2D(pts), int(c), ens.kinds[e],
                                         cfg, rng)
        except consensus.PoolExhausted:
            continue
        pools.append((e, pool))
    if not pools:
        return None, -1, evaluated
    sel = ensemble.esac_joint_selection(pools, argmax=True)
    return sel.hypothesis, sel.expert, evaluated


def evaluate(ens: ToyEnsemble, scheme: str, test_count: int, config: ToyConfig,
             seed: int, top_k: int | None = None, threads: int = 1) -> ToyMetrics:
    """Accuracy metrics over a seeded test set.

    A pure function of (config, seed): every scene derives its own rng, so
    the result is identical regardless of the worker count.
    """
    def one(i: int):
        scene = render_scene(scene_rng(seed, 9, i), config, seed=i)
        h, expert, evaluated = evaluate_scene(ens, scheme, scene, config, seed, i,
                                              top_k=top_k)
        if h is None:
            return False, False, evaluated
        return (parameter_ok(h, scene, config.image_size),
                ens.kinds[expert] == scene.kind, evaluated)

    rows = _util.parallel_map(one, range(test_count), threads)
    param_ok = sum(r[0] for r in rows)
    class_ok = sum(r[1] for r in rows)
    evaluated_total = sum(r[2] for r in rows)
    return ToyMetrics(scheme, test_count, param_ok / test_count,
                      class_ok / test_count, evaluated_total / test_count)


# ---------------------------------------------------------------------------
# oracle stubs (upper-bound harnesses for tests and studies)
# ---------------------------------------------------------------------------


class OracleExpert:
    """Emits exact on-model points for its kind, read from the scene."""

    def __init__(self, kind: str, config: ToyConfig):
        self.kind = kind
        self.config = config

    def forward_scene(self, scene: ToyScene) -> np.ndarray:
        n = self.config.n_points
        S = self.config.image_size
        ts = np.linspace(0.0, 1.0, n, endpoint=False)
        if self.kind == models.LINE:
            if scene.kind == models.LINE:
                x = ts * (S - 1)
                return np.column_stack([x, scene.h_gt.m * x + scene.h_gt.n])
            x = ts * (S - 1)
            return np.column_stack([x, np.full(n, 0.25 * S)])
        if scene.kind == models.CIRCLE:
            th = 2 * np.pi * ts
            return np.column_stack([
                scene.h_gt.cx + scene.h_gt.r * np.cos(th),
                scene.h_gt.cy + scene.h_gt.r * np.sin(th)])
        th = 2 * np.pi * ts
        return np.column_stack([0.5 * S + 0.25 * S * np.cos(th),
                                0.5 * S + 0.25 * S * np.sin(th)])


class OracleGating:
    """One-hot gating read from the true scene kind."""

    def forward_scene(self, scene: ToyScene) -> np.ndarray:
        logits = np.full(len(KINDS), -40.0)
        logits[scene.class_index] = 40.0
        return logits


class ConstantGating:
    """Fixed logits regardless of the input image."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def forward_scene(self, scene: ToyScene) -> np.ndarray:
        return self.logits


# ---------------------------------------------------------------------------
# image dumps
# ---------------------------------------------------------------------------


def scene_to_rgb(scene: ToyScene, estimate=None, upscale: int = 4) -> np.ndarray:
    """Scene as an RGB byte image; ground truth in green, estimate in blue."""
    S = scene.image.shape[0]
    gray = np.repeat(scene.image[:, :, None], 3, axis=2)
    rgb = (gray * 255).astype(np.uint8)
    big = rgb.repeat(upscale, axis=0).repeat(upscale, axis=1)

    def draw(h, color):
        yy, xx = np.mgrid[0:S * upscale, 0:S * upscale] / upscale
        if models.model_kind(h) == models.LINE:
            d = np.abs(h.m * xx - yy + h.n) / np.hypot(h.m, 1.0)
        else:
            d = np.abs(np.hypot(xx - h.cx, yy - h.cy) - h.r)
        big[d <= 0.5] = color

    draw(scene.h_gt, (0, 200, 0))
    if estimate is not None:
        draw(estimate, (40, 90, 255))
    return big


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary portable pixmap (P6) writer."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.astype(np.uint8).tobytes())
