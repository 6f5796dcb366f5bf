"""Brute-force and enumeration oracles for the consensus/ensemble math.

Each oracle checks an analytic implementation against an independent route:
central finite differences, exact enumeration, direct recomputation or plain
Monte-Carlo counting.  The same functions back the command-line oracle suite
and the acceptance tests; ``fast=True`` shrinks sample counts for smoke runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chisquare

from . import consensus, ensemble, models, relocsim
from .consensus import ScoringConfig, dsac_distribution, pool_from_indices
from .ensemble import HypothesisStream
from .models import Line2D, Points2D


@dataclass
class OracleResult:
    name: str
    measured: float
    tolerance: float
    comparison: str           # "<=" or ">="
    passed: bool


def _result(name, measured, tolerance, comparison="<=") -> OracleResult:
    ok = measured <= tolerance if comparison == "<=" else measured >= tolerance
    return OracleResult(name, float(measured), float(tolerance), comparison,
                        bool(ok))


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


def _line_instance(rng, n_pts=16, n_hyp=8):
    pts = rng.uniform(5, 59, size=(n_pts, 2))
    idx = []
    while len(idx) < n_hyp:
        pair = rng.choice(n_pts, size=2, replace=False)
        d = pts[pair[1]] - pts[pair[0]]
        if abs(d[0]) > 1.0 and abs(d[1] / d[0]) < 5.0:
            idx.append(pair)
    h_gt = Line2D(rng.uniform(-1.5, 1.5), rng.uniform(5, 50))
    return Points2D(pts), np.asarray(idx), h_gt


def _circle_instance(rng, n_pts=16, n_hyp=8):
    pts = rng.uniform(5, 59, size=(n_pts, 2))
    idx = []
    while len(idx) < n_hyp:
        tri = rng.choice(n_pts, size=3, replace=False)
        u, v = pts[tri[1]] - pts[tri[0]], pts[tri[2]] - pts[tri[0]]
        if abs(u[0] * v[1] - u[1] * v[0]) > 20.0:
            idx.append(tri)
    h_gt = models.Circle2D(rng.uniform(20, 44), rng.uniform(20, 44),
                           rng.uniform(8, 20))
    return Points2D(pts), np.asarray(idx), h_gt


def _two_expert_streams(seed, cfg, n_max=4, n_pts=10):
    """Two line experts with similar but unequal quality near one truth.

    Keeps the per-sample loss spread moderate so the score-function
    estimators have workable Monte-Carlo variance.
    """
    rng = np.random.default_rng(seed)
    h_gt = Line2D(0.3, 20.0)
    streams = []
    for noise, shift in ((0.6, 0.0), (1.2, 1.0)):
        x = rng.uniform(4, 60, size=n_pts)
        y = h_gt.m * x + h_gt.n + shift + rng.normal(0, noise, n_pts)
        streams.append(HypothesisStream(Points2D(np.column_stack([x, y])),
                                        models.LINE, cfg, n_max,
                                        seed=int(rng.integers(1 << 31))))
    return streams, h_gt


# ---------------------------------------------------------------------------
# gradient oracles
# ---------------------------------------------------------------------------


def dsac_gradient_finite_difference(seed=0, fast=False) -> OracleResult:
    """Analytic expected-loss point gradients vs central differences."""
    cfg = ScoringConfig(tau=3.0, alpha=0.3, beta=0.5)
    n_instances = 10 if fast else 100
    worst = 0.0
    step = 1e-4
    for trial in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 31, trial)))
        kind = models.LINE if trial % 2 == 0 else models.CIRCLE
        if kind == models.LINE:
            obs, idx, h_gt = _line_instance(rng)
        else:
            obs, idx, h_gt = _circle_instance(rng)
        pool = pool_from_indices(obs, idx, kind, cfg)
        _, grad = consensus.dsac_backward(obs, pool, cfg, h_gt, 64.0)
        fd = np.zeros_like(obs.xy)
        for i in range(obs.xy.shape[0]):
            for c in range(2):
                vals = []
                for sgn in (1.0, -1.0):
                    pts = obs.xy.copy()
                    pts[i, c] += sgn * step
                    p = pool_from_indices(Points2D(pts), idx, kind, cfg)
                    losses, _ = models.toy_loss_batch(p.params, kind, h_gt, 64.0)
                    vals.append(float(dsac_distribution(p.scores) @ losses))
                fd[i, c] = (vals[0] - vals[1]) / (2 * step)
        scale = np.max(np.abs(fd))
        worst = max(worst, float(np.max(np.abs(grad - fd)) / scale))
    return _result("dsac_gradient_vs_finite_differences", worst, 1e-3)


def _mc_gradient_error(streams, h_gt, logits, exact, draw, samples):
    """Max coordinate error of the Monte-Carlo mean, relative to grad scale."""
    n_pts = [len(s.observations()) for s in streams]

    def flatten(gating_grad, point_grads):
        parts = [np.asarray(gating_grad, dtype=float)]
        for e in range(len(streams)):
            parts.append(np.asarray(point_grads.get(
                e, np.zeros((n_pts[e], 2)))).ravel())
        return np.concatenate(parts)

    ref = flatten(exact.gating_logit_grad, exact.point_grads)
    acc = np.zeros_like(ref)
    for _ in range(samples):
        est = draw()
        acc += flatten(est.gating_logit_grad, est.point_grads)
    mean = acc / samples
    scale = np.max(np.abs(ref))
    return float(np.max(np.abs(mean - ref)) / scale)


def _mc_tolerance(base: float, fast: bool, full: int, reduced: int) -> float:
    """Fast mode shrinks sample counts; widen the tolerance by sqrt(ratio)."""
    return base * np.sqrt(full / reduced) if fast else base


def expert_selection_gradient_mc(seed=0, fast=False) -> OracleResult:
    """Sampled expert-selection gradient vs the exact enumerated gradient."""
    cfg = ScoringConfig(tau=3.0, alpha=0.3, beta=0.5)
    streams, h_gt = _two_expert_streams((seed, 37), cfg)
    logits = np.array([0.3, -0.3])
    exact = ensemble.expert_selection_exact_grads(logits, streams, h_gt, 64.0)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 38)))
    samples = 5000 if fast else 100_000
    err = _mc_gradient_error(
        streams, h_gt, logits, exact,
        lambda: ensemble.expert_selection_grad_sampled(logits, streams, h_gt,
                                                       64.0, rng),
        samples)
    return _result("expert_selection_gradient_mc_vs_exact", err,
                   _mc_tolerance(0.02, fast, 100_000, samples))


def esac_gradient_mc(seed=0, fast=False) -> OracleResult:
    """Sampled ESAC gradient (incl. allocation log-prob term) vs enumeration."""
    cfg = ScoringConfig(tau=3.0, alpha=0.3, beta=0.5)
    streams, h_gt = _two_expert_streams((seed, 41), cfg)
    logits = np.array([0.25, -0.25])
    exact = ensemble.esac_exact_grads(logits, streams, 4, h_gt, 64.0)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 42)))
    samples = 5000 if fast else 100_000
    err = _mc_gradient_error(
        streams, h_gt, logits, exact,
        lambda: ensemble.esac_grad_sampled(logits, streams, 4, h_gt, 64.0, rng),
        samples)
    return _result("esac_gradient_mc_vs_exact", err,
                   _mc_tolerance(0.02, fast, 100_000, samples))


def allocation_logprob_gradient_fd(seed=0, fast=False) -> OracleResult:
    """Multinomial log-probability derivative vs simplex finite differences."""
    n_instances = 20 if fast else 100
    worst = 0.0
    eps = 1e-6
    for trial in range(n_instances):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 43, trial)))
        g = rng.dirichlet([2.0, 2.0, 2.0])
        h = ensemble.sample_allocation(g, 6, rng)
        grad = ensemble.allocation_logprob_grad_probs(h, g)
        for i, j in ((0, 1), (1, 2), (0, 2)):
            d = np.zeros(3)
            d[i], d[j] = 1.0, -1.0
            hi = ensemble.allocation_logprob(h, g + eps * d)
            lo = ensemble.allocation_logprob(h, g - eps * d)
            fd = (hi - lo) / (2 * eps)
            err = abs(float(grad @ d) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return _result("allocation_logprob_grad_vs_finite_differences", worst, 1e-3)


# ---------------------------------------------------------------------------
# expectation oracles
# ---------------------------------------------------------------------------


def expert_selection_expectation_mc(seed=0, fast=False) -> OracleResult:
    """Monte-Carlo estimate of the expert-selection expected loss, z-score."""
    cfg = ScoringConfig(tau=3.0, alpha=0.3, beta=0.5)
    streams, h_gt = _two_expert_streams((seed, 47), cfg)
    g = np.array([0.55, 0.45])
    loss_fn = lambda h, gt: models.toy_loss(h, gt, 64.0)
    pools = [s.full() for s in streams]
    exact = ensemble.expert_selection_loss(g, pools, loss_fn, h_gt)
    probs = [dsac_distribution(p.scores) for p in pools]
    losses = [np.array([loss_fn(p.hypothesis(j), h_gt) for j in range(len(p))])
              for p in pools]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 48)))
    samples = 10_000 if fast else 100_000
    es = rng.choice(2, size=samples, p=g)
    vals = np.empty(samples)
    for e in (0, 1):
        mask = es == e
        js = rng.choice(len(losses[e]), size=int(mask.sum()), p=probs[e])
        vals[mask] = losses[e][js]
    se = vals.std(ddof=1) / np.sqrt(samples)
    z = abs(float(vals.mean()) - exact) / se
    return _result("expert_selection_expectation_mc_zscore", z, 3.0)


def esac_expectation_mc(seed=0, fast=False) -> OracleResult:
    """Monte-Carlo estimate of the ESAC expected loss, z-score vs enumeration."""
    cfg = ScoringConfig(tau=3.0, alpha=0.3, beta=0.5)
    streams, h_gt = _two_expert_streams((seed, 53), cfg)
    g = np.array([0.55, 0.45])
    n = 4
    loss_fn = lambda h, gt: models.toy_loss(h, gt, 64.0)
    exact = ensemble.esac_expected_loss_exact(g, streams, n, loss_fn, h_gt)
    scores = [s.full().scores[:n] for s in streams]
    losses = [np.array([loss_fn(s.full().hypothesis(j), h_gt) for j in range(n)])
              for s in streams]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 54)))
    samples = 10_000 if fast else 100_000
    vals = np.empty(samples)
    for k in range(samples):
        alloc = ensemble.sample_allocation(g, n, rng)
        sc = np.concatenate([scores[e][:c] for e, c in enumerate(alloc) if c > 0])
        ls = np.concatenate([losses[e][:c] for e, c in enumerate(alloc) if c > 0])
        p = dsac_distribution(sc)
        vals[k] = ls[rng.choice(len(ls), p=p / p.sum())]
    se = vals.std(ddof=1) / np.sqrt(samples)
    z = abs(float(vals.mean()) - exact) / se
    return _result("esac_expectation_mc_zscore", z, 3.0)


# ---------------------------------------------------------------------------
# distribution oracles
# ---------------------------------------------------------------------------


def allocation_chi_square(seed=0, fast=False) -> OracleResult:
    """Sampled allocations vs exact multinomial probabilities (M=3, N=5)."""
    g = np.array([0.5, 0.3, 0.2])
    n = 5
    draws = 20_000 if fast else 100_000
    rng = np.random.default_rng(np.random.SeedSequence((seed, 59)))
    cells = {a: i for i, a in enumerate(ensemble.enumerate_allocations(3, n))}
    counts = np.zeros(len(cells))
    for _ in range(draws):
        counts[cells[tuple(ensemble.sample_allocation(g, n, rng))]] += 1
    expected = np.array([np.exp(ensemble.allocation_logprob(np.asarray(a), g))
                         for a in cells]) * draws
    _, p = chisquare(counts, expected)
    return _result("allocation_chi_square_pvalue", p, 0.01, comparison=">=")


def dsac_selection_marginals(seed=0, fast=False) -> OracleResult:
    """Softmax hypothesis-selection frequencies vs probabilities."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 61)))
    scores = rng.normal(0.0, 1.5, size=8)
    probs = dsac_distribution(scores)
    draws = 20_000 if fast else 100_000
    picks = rng.choice(8, size=draws, p=probs / probs.sum())
    freq = np.bincount(picks, minlength=8) / draws
    return _result("dsac_selection_marginals_max_abs_err",
                   float(np.max(np.abs(freq - probs))), 0.01)


def joint_selection_marginals(seed=0, fast=False) -> OracleResult:
    """Joint selection with equal scores: each expert wins E[n_e]/N = g_e."""
    g = np.array([0.3, 0.7])
    n = 6
    rng = np.random.default_rng(np.random.SeedSequence((seed, 67)))
    draws = 20_000 if fast else 100_000
    wins = np.zeros(2)
    pools = {e: consensus.HypothesisPool(models.LINE, np.zeros((n, 2)),
                                         np.zeros((n, 2), int), np.full(n, 1.0))
             for e in range(2)}
    for _ in range(draws):
        alloc = ensemble.sample_allocation(g, n, rng)
        entries = [(e, consensus.HypothesisPool(
            models.LINE, pools[e].params[:c], pools[e].minimal_set_indices[:c],
            pools[e].scores[:c])) for e, c in enumerate(alloc) if c > 0]
        wins[ensemble.esac_joint_selection(entries, rng).expert] += 1
    return _result("joint_selection_marginals_max_abs_err",
                   float(np.max(np.abs(wins / draws - g))), 0.01)


# ---------------------------------------------------------------------------
# scoring and recovery oracles
# ---------------------------------------------------------------------------


def soft_hard_limit(seed=0, fast=False) -> OracleResult:
    """At beta=100 the soft score matches alpha * hard count to 1% of alpha."""
    cfg = ScoringConfig(tau=1.0, alpha=0.7, beta=100.0)
    trials = 20 if fast else 200
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 71, trial)))
        line = Line2D(rng.uniform(-2, 2), rng.uniform(-5, 5))
        # residuals at least 0.5 away from the threshold on either side
        x = rng.uniform(0, 64, size=30)
        side = rng.choice([-1.0, 1.0], size=30)
        d = np.where(side < 0, rng.uniform(0, 0.5, 30), rng.uniform(1.5, 20, 30))
        offs = d * np.hypot(line.m, 1.0) * rng.choice([-1.0, 1.0], size=30)
        pts = np.column_stack([x, line.m * x + line.n + offs])
        obs = Points2D(pts)
        soft = consensus.soft_inlier_score(line, obs, cfg)
        hard = consensus.hard_inlier_count(line, obs, cfg)
        worst = max(worst, abs(soft - cfg.alpha * hard) / cfg.alpha)
    return _result("soft_hard_score_limit", worst, 0.01)


def ransac_line_recovery(seed=0, fast=False) -> OracleResult:
    """70% inliers, 0.5px noise, N=64: recovery within 3px in >= 99% of trials."""
    trials = 100 if fast else 1000
    cfg = ScoringConfig(tau=1.5, alpha=0.5, beta=2.0)
    successes = 0
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 73, trial)))
        m = rng.uniform(-2, 2)
        n = rng.uniform(10, 54) - 32 * m
        x = rng.uniform(0, 64, size=70)
        inl = np.column_stack([x, m * x + n + rng.normal(0, 0.5, 70)])
        out = rng.uniform(0, 64, size=(30, 2))
        obs = Points2D(np.vstack([inl, out]))
        pool = consensus.sample_pool(obs, 64, models.LINE, cfg, rng)
        h, _ = consensus.ransac_select(pool)
        h = models.refine_on_inliers(h, obs, cfg)
        successes += models.toy_loss(h, Line2D(m, n), 64.0) < 3.0
    return _result("ransac_line_recovery_rate", successes / trials, 0.99,
                   comparison=">=")


def pool_binomial_fraction(seed=0, fast=False) -> OracleResult:
    """All-inlier minimal-set fraction vs the without-replacement binomial."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 79)))
    x = 0.64 * np.arange(100)
    y = np.where(np.arange(100) < 70, 0.02 * x + 1.0, rng.uniform(0, 3, 100))
    obs = Points2D(np.column_stack([x, y]))
    cfg = ScoringConfig(tau=1.0)
    draws = 20_000 if fast else 100_000
    pool = consensus.sample_pool(obs, draws, models.LINE, cfg, rng)
    frac = float(np.mean(np.all(pool.minimal_set_indices < 70, axis=1)))
    expected = (70 / 100) * (69 / 99)
    return _result("pool_all_inlier_fraction_err", abs(frac - expected), 0.05)


# ---------------------------------------------------------------------------
# clustering oracles
# ---------------------------------------------------------------------------


def soft_assignment_recompute(seed=0, fast=False) -> OracleResult:
    """Three-cluster soft assignment vs direct formula recomputation."""
    centers = np.array([[0.0, 0.0, 0.0], [3.0, 1.0, 0.0], [-2.0, 4.0, 1.0]])
    sizes = np.array([0.8, 1.7, 0.4])
    y = np.array([0.5, 0.7, -0.2])
    kappa = 5.0
    s = np.array([1.0 / (2 * np.pi * sz)
                  * np.exp(-kappa * np.linalg.norm(y - c) / (2 * sz))
                  for c, sz in zip(centers, sizes)])
    expected = s / s.sum()
    got = relocsim.soft_assignment(y, centers, sizes, softness=kappa)
    return _result("soft_assignment_recompute_max_err",
                   float(np.max(np.abs(got - expected))), 1e-12)


def kmeans_objective_monotone(seed=0, fast=False) -> OracleResult:
    """Lloyd objective never increases, over many seeded datasets."""
    datasets = 20 if fast else 100
    worst = -np.inf
    for trial in range(datasets):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 83, trial)))
        pts = rng.normal(size=(60 + trial % 40, 3)) * rng.uniform(0.5, 3.0)
        _, _, history = relocsim.cluster_environment(pts, 4, rng)
        increases = np.diff(history)
        worst = max(worst, float(np.max(increases)))
    return _result("kmeans_objective_max_increase", worst, 1e-9)


ALL_ORACLES = (
    dsac_gradient_finite_difference,
    expert_selection_gradient_mc,
    esac_gradient_mc,
    allocation_logprob_gradient_fd,
    expert_selection_expectation_mc,
    esac_expectation_mc,
    allocation_chi_square,
    dsac_selection_marginals,
    joint_selection_marginals,
    soft_hard_limit,
    ransac_line_recovery,
    pool_binomial_fraction,
    soft_assignment_recompute,
    kmeans_objective_monotone,
)


def run_all(seed: int = 0, fast: bool = False) -> list:
    return [fn(seed=seed, fast=fast) for fn in ALL_ORACLES]
