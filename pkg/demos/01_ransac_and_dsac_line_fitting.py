"""Fitting a line to contaminated points: RANSAC vs its soft counterpart.

Walks through the single-model pipeline step by step: sample minimal sets
into a hypothesis pool, score them with hard and soft inlier counts, select
by argmax (RANSAC) or by a softmax draw (DSAC), and differentiate the
expected task loss back to the input points.
"""

import numpy as np

from esac import (
    Line2D, Points2D, ScoringConfig, dsac_backward, dsac_distribution,
    dsac_expected_loss, hard_inlier_count, pool_from_indices, ransac_select,
    refine_on_inliers, sample_pool, soft_inlier_score, toy_loss,
)

rng = np.random.default_rng(7)

# --- data: 70 points on a line, 30 uniform outliers --------------------------
truth = Line2D(m=0.8, n=12.0)
x = rng.uniform(0, 64, size=70)
inliers = np.column_stack([x, truth.m * x + truth.n + rng.normal(0, 0.5, 70)])
outliers = rng.uniform(0, 64, size=(30, 2))
obs = Points2D(np.vstack([inliers, outliers]))
print(f"observations: {len(obs)} points, true line m={truth.m}, n={truth.n}")

# --- hypothesize and verify ---------------------------------------------------
cfg = ScoringConfig(tau=1.5, alpha=0.5, beta=2.0)
pool = sample_pool(obs, 64, "line", cfg, rng)
print(f"pool: {len(pool)} hypotheses from random 2-point minimal sets")

best, j = ransac_select(pool)
print(f"argmax selection: hypothesis {j}, "
      f"hard inliers {hard_inlier_count(best, obs, cfg)}, "
      f"soft score {soft_inlier_score(best, obs, cfg):.2f}")

refined = refine_on_inliers(best, obs, cfg)
print(f"after inlier refit: max in-image deviation "
      f"{toy_loss(refined, truth, 64):.3f} px "
      f"(raw argmax: {toy_loss(best, truth, 64):.3f} px)")

# --- the probabilistic view ---------------------------------------------------
probs = dsac_distribution(pool.scores)
expected = dsac_expected_loss(pool, probs, lambda h, gt: toy_loss(h, gt, 64), truth)
print(f"softmax selection: top probability {probs.max():.3f}, "
      f"expected task loss {expected:.3f}")

# --- gradients back to the points ---------------------------------------------
loss, grads = dsac_backward(obs, pool, cfg, truth, 64.0)
norms = np.linalg.norm(grads, axis=1)
print(f"expected-loss gradient over all {len(obs)} points: "
      f"mean|g|={norms.mean():.4f}, max|g|={norms.max():.4f}")

# a far-away outlier in no minimal set is score-saturated: (near) zero gradient
far = int(np.argmax(np.linalg.norm(obs.xy - [32, 32], axis=1)))
print(f"most distant point has |g| = {norms[far]:.2e} (saturated outlier)")

# finite-difference spot check on one coordinate
i = int(np.argmax(norms))
step = 1e-4
for sign in (+1, -1):
    pts = obs.xy.copy()
    pts[i, 0] += sign * step
    p = pool_from_indices(Points2D(pts), pool.minimal_set_indices, "line", cfg)
    pr = dsac_distribution(p.scores)
    val = dsac_expected_loss(p, pr, lambda h, gt: toy_loss(h, gt, 64), truth)
    if sign > 0:
        hi = val
    else:
        lo = val
fd = (hi - lo) / (2 * step)
print(f"spot check d(expected loss)/dx of point {i}: "
      f"analytic {grads[i, 0]:+.6f}, finite difference {fd:+.6f}")
