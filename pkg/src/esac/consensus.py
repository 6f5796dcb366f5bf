"""Single-model hypothesize-and-verify: pools, scoring, RANSAC and DSAC.

Everything here is a pure function of its inputs (pools and scores can be
computed concurrently for disjoint hypothesis subsets); sampling takes an
explicit ``numpy.random.Generator`` so identical seeds reproduce pools,
scores, losses and gradients bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import models
from .models import (
    LINE, CIRCLE, POSE, MINIMAL_SET_SIZE,
    CameraIntrinsics, Points2D, Correspondences,
    check_observations, model_from_params, model_kind,
)


class PoolExhausted(RuntimeError):
    """No valid minimal set was found within the draw budget."""


class NonDifferentiableModel(TypeError):
    """Gradients are only available for the closed-form line/circle fits."""


@dataclass(frozen=True)
class ScoringConfig:
    """Inlier threshold tau (pixels), score scale alpha and sigmoid sharpness beta."""

    tau: float
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0 and self.alpha > 0 and self.beta > 0):
            raise ValueError("tau, alpha and beta must all be positive")

    @property
    def behind_sentinel(self) -> float:
        # finite stand-in residual for scene points behind the camera
        return 100.0 * self.tau


@dataclass
class HypothesisPool:
    """A pool of model hypotheses with their minimal sets and soft scores."""

    kind: str
    params: np.ndarray               # (N, k) parameter rows
    minimal_set_indices: np.ndarray  # (N, m) indices into the observation set
    scores: np.ndarray               # (N,) soft inlier scores

    def __len__(self) -> int:
        return self.params.shape[0]

    def hypothesis(self, j: int):
        return model_from_params(self.kind, self.params[j])

    @property
    def hypotheses(self) -> list:
        return [self.hypothesis(j) for j in range(len(self))]


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def hard_inlier_counts(kind: str, params: np.ndarray, obs, cfg: ScoringConfig,
                       K: CameraIntrinsics | None = None) -> np.ndarray:
    """Strict inlier counts per hypothesis row: residual < tau counts, == tau does not."""
    if len(obs) == 0:
        return np.zeros(np.atleast_2d(params).shape[0], dtype=int)
    D = models.residual_matrix(kind, params, obs, K=K,
                               behind_sentinel=cfg.behind_sentinel)
    return np.sum(D < cfg.tau, axis=1)


def soft_scores(kind: str, params: np.ndarray, obs, cfg: ScoringConfig,
                K: CameraIntrinsics | None = None) -> np.ndarray:
    """Soft inlier scores alpha * sum_y (1 - sigmoid(beta*d - beta*tau))."""
    if len(obs) == 0:
        return np.zeros(np.atleast_2d(params).shape[0], dtype=float)
    D = models.residual_matrix(kind, params, obs, K=K,
                               behind_sentinel=cfg.behind_sentinel)
    return cfg.alpha * np.sum(1.0 - expit(cfg.beta * (D - cfg.tau)), axis=1)


def hard_inlier_count(h, obs, cfg: ScoringConfig,
                      K: CameraIntrinsics | None = None) -> int:
    kind = model_kind(h)
    check_observations(kind, obs)
    return int(hard_inlier_counts(kind, h.params[None, :], obs, cfg, K=K)[0])


def soft_inlier_score(h, obs, cfg: ScoringConfig,
                      K: CameraIntrinsics | None = None) -> float:
    kind = model_kind(h)
    check_observations(kind, obs)
    return float(soft_scores(kind, h.params[None, :], obs, cfg, K=K)[0])


# ---------------------------------------------------------------------------
# pool sampling
# ---------------------------------------------------------------------------


def _draw_minimal_sets(rng: np.random.Generator, count: int, n_data: int,
                       set_size: int) -> np.ndarray:
    """Uniform without-replacement index sets, one row per hypothesis."""
    keys = rng.random((count, n_data))
    part = np.argpartition(keys, set_size - 1, axis=1)[:, :set_size]
    return np.ascontiguousarray(part)


def _fit_batch(kind: str, obs, idx: np.ndarray, K: CameraIntrinsics | None):
    if kind == LINE:
        return models.fit_lines_batch(obs.xy, idx)
    if kind == CIRCLE:
        return models.fit_circles_batch(obs.xy, idx)
    if K is None:
        raise models.ModelDatumMismatch("pose pools require camera intrinsics")
    # pools keep every converged solve (positive depths); noisy minimal sets
    # cannot interpolate to a tight reprojection bound, and scoring is the
    # arbiter of hypothesis quality anyway
    return models.fit_poses_batch(obs.pixels, obs.coords, idx, K,
                                  max_reproj_px=np.inf)


def sample_pool(obs, n_hypotheses: int, kind: str, cfg: ScoringConfig,
                rng: np.random.Generator, retry_cap: int = 100,
                K: CameraIntrinsics | None = None) -> HypothesisPool:
    """Sample a pool of hypotheses from random minimal sets.

    Degenerate draws are rejected and redrawn up to ``retry_cap`` times per
    hypothesis; slots still empty afterwards duplicate the most recent valid
    hypothesis.  PoolExhausted is raised when the whole budget of
    ``retry_cap * n_hypotheses`` draws produced no valid hypothesis at all.
    """
    check_observations(kind, obs)
    m = MINIMAL_SET_SIZE[kind]
    if len(obs) < m:
        raise PoolExhausted(f"need at least {m} observations for a {kind} minimal set")
    if n_hypotheses < 1:
        raise ValueError("n_hypotheses must be >= 1")

    idx = _draw_minimal_sets(rng, n_hypotheses, len(obs), m)
    params, valid = _fit_batch(kind, obs, idx, K)
    attempts = np.ones(n_hypotheses, dtype=int)
    while True:
        bad = ~valid & (attempts < retry_cap)
        if not np.any(bad):
            break
        redraw = _draw_minimal_sets(rng, int(bad.sum()), len(obs), m)
        new_params, new_valid = _fit_batch(kind, obs, redraw, K)
        rows = np.nonzero(bad)[0]
        idx[rows] = redraw
        params[rows] = new_params
        valid[rows] = new_valid
        attempts[rows] += 1

    if not np.any(valid):
        raise PoolExhausted(
            f"no valid {kind} minimal set in {retry_cap * n_hypotheses} draws")
    if not np.all(valid):
        good = np.nonzero(valid)[0]
        # each failed slot copies the nearest valid slot before it (or the
        # first valid slot overall)
        for row in np.nonzero(~valid)[0]:
            earlier = good[good < row]
            donor = earlier[-1] if earlier.size else good[0]
            idx[row] = idx[donor]
            params[row] = params[donor]

    scores = soft_scores(kind, params, obs, cfg, K=K)
    return HypothesisPool(kind, params, idx, scores)


def pool_from_indices(obs, idx: np.ndarray, kind: str, cfg: ScoringConfig,
                      K: CameraIntrinsics | None = None) -> HypothesisPool:
    """Build a pool from explicit minimal-set index rows (no rejection).

    Used by gradient checks and enumeration oracles that need to re-fit the
    exact same minimal sets after perturbing the observations.
    """
    check_observations(kind, obs)
    idx = np.atleast_2d(np.asarray(idx, dtype=int))
    params, valid = _fit_batch(kind, obs, idx, K)
    if not np.all(valid):
        raise models.DegenerateMinimalSet("index rows contain a degenerate set")
    scores = soft_scores(kind, params, obs, cfg, K=K)
    return HypothesisPool(kind, params, idx, scores)


# ---------------------------------------------------------------------------
# selection and expected loss
# ---------------------------------------------------------------------------


def ransac_select(pool: HypothesisPool):
    """Argmax-score hypothesis; ties resolve to the lowest index.

    Returns (hypothesis, index).
    """
    if len(pool) == 0:
        raise ValueError("empty pool")
    j = int(np.argmax(pool.scores))
    return pool.hypothesis(j), j


def dsac_distribution(scores: np.ndarray) -> np.ndarray:
    """Softmax over scores with max subtraction; sums to one within 1e-12."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("empty score vector")
    e = np.exp(s - np.max(s))
    return e / e.sum()


def dsac_select(pool: HypothesisPool, rng: np.random.Generator):
    """Sample a hypothesis from the softmax distribution over pool scores."""
    probs = dsac_distribution(pool.scores)
    j = int(rng.choice(len(pool), p=probs))
    return pool.hypothesis(j), j


def dsac_expected_loss(pool: HypothesisPool, probs: np.ndarray, loss_fn,
                       h_gt) -> float:
    """Exact expectation sum_j p_j * loss(h_j, h_gt)."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape[0] != len(pool):
        raise ValueError("probability/pool size mismatch")
    losses = np.array([loss_fn(pool.hypothesis(j), h_gt) for j in range(len(pool))])
    return float(probs @ losses)


# ---------------------------------------------------------------------------
# gradients of the expected toy loss w.r.t. predicted points
# ---------------------------------------------------------------------------


@dataclass
class GradEntry:
    """One expert's contribution to a joint softmax-expectation gradient."""

    obs: Points2D
    pool: HypothesisPool


def toy_grad_engine(entries: list, cfg: ScoringConfig, h_gt, image_size: float):
    """Expected toy loss and its exact point gradients over joint entries.

    All entries contribute their hypotheses to one softmax over scores; each
    hypothesis is scored against its own entry's observations.  Gradients
    flow through both the selection probabilities (via soft scores and
    residuals) and the per-hypothesis losses (via the minimal-set fits).

    Returns (expected_loss, probs (N,), grads: list of (P_e, 2) arrays).
    """
    all_scores = []
    cached = []
    for ent in entries:
        kind = ent.pool.kind
        if kind not in (LINE, CIRCLE):
            raise NonDifferentiableModel("pose pools are not differentiable")
        xy = ent.obs.xy
        params = ent.pool.params
        if kind == LINE:
            D = models.line_residual_matrix(params, xy)
            dD_dy, dD_dh = models.line_residual_partials(params, xy)
            Jfit = models.line_fit_jacobian(xy, ent.pool.minimal_set_indices)
        else:
            D = models.circle_residual_matrix(params, xy)
            dD_dy, dD_dh = models.circle_residual_partials(params, xy)
            Jfit = models.circle_fit_jacobian(xy, ent.pool.minimal_set_indices)
        z = cfg.beta * (D - cfg.tau)
        sig = expit(z)
        scores = cfg.alpha * np.sum(1.0 - sig, axis=1)
        w = -cfg.alpha * cfg.beta * sig * (1.0 - sig)   # ds_j / dD_jp
        losses, loss_grads = models.toy_loss_batch(params, kind, h_gt, image_size)
        all_scores.append(scores)
        cached.append((xy, dD_dy, dD_dh, Jfit, w, losses, loss_grads))

    scores = np.concatenate(all_scores)
    probs = dsac_distribution(scores)
    losses = np.concatenate([c[5] for c in cached])
    L = float(probs @ losses)
    dL_ds = probs * (losses - L)

    grads = []
    start = 0
    for ent, (xy, dD_dy, dD_dh, Jfit, w, _, loss_grads) in zip(entries, cached):
        n = len(ent.pool)
        p = probs[start:start + n]
        gs = dL_ds[start:start + n]
        start += n
        # direct path: scores depend on every observation through residuals
        G = np.einsum("j,jp,jpc->pc", gs, w, dD_dy)
        # fit path: hypothesis parameters depend on the minimal-set points
        gh = np.einsum("j,jp,jpk->jk", gs, w, dD_dh)
        gh += p[:, None] * loss_grads
        contrib = np.einsum("jk,jkd->jd", gh, Jfit)
        m = ent.pool.minimal_set_indices.shape[1]
        np.add.at(G, ent.pool.minimal_set_indices.ravel(),
                  contrib.reshape(-1, m, 2).reshape(-1, 2))
        grads.append(G)
    return L, probs, grads


def dsac_backward(obs: Points2D, pool: HypothesisPool, cfg: ScoringConfig,
                  h_gt, image_size: float):
    """Exact gradient of the DSAC expected toy loss w.r.t. every point.

    Returns (expected_loss, gradient (P, 2)).  Raises NonDifferentiableModel
    for pose pools.
    """
    L, _, grads = toy_grad_engine([GradEntry(obs, pool)], cfg, h_gt, image_size)
    return L, grads[0]
