"""Expert ensembles over consensus: hard selection vs budget allocation.

Two "experts" (here: fixed point sets, one good and one mediocre) compete
under a gating distribution.  Hard expert selection trusts a single gating
draw; the allocation scheme splits the hypothesis budget by a multinomial
draw and lets the joint score softmax pick the winner across experts.  The
script compares both expected losses exactly (enumeration) and checks the
sampled gradient estimators against the enumerated truth.
"""

import numpy as np

from esac import Line2D, Points2D, ScoringConfig, toy_loss
from esac.ensemble import (
    HypothesisStream, allocation_logprob, enumerate_allocations,
    esac_exact_grads, esac_expected_loss_exact, esac_grad_sampled,
    esac_joint_selection, expert_selection_loss, gating_softmax,
    sample_allocation,
)

rng = np.random.default_rng(3)
cfg = ScoringConfig(tau=3.0, alpha=0.3, beta=0.5)
truth = Line2D(0.3, 20.0)

# expert 0 is accurate, expert 1 is noisy and biased
streams = []
for noise, shift in ((0.5, 0.0), (1.5, 2.0)):
    x = rng.uniform(4, 60, size=12)
    y = truth.m * x + truth.n + shift + rng.normal(0, noise, 12)
    streams.append(HypothesisStream(Points2D(np.column_stack([x, y])),
                                    "line", cfg, n_max=6, seed=int(rng.integers(1 << 30))))

loss_fn = lambda h, gt: toy_loss(h, gt, 64.0)
gating = np.array([0.45, 0.55])     # the gating slightly prefers the worse expert
print(f"gating distribution: {gating}")

# --- exact expected losses -----------------------------------------------------
hard = expert_selection_loss(gating, [s.full() for s in streams], loss_fn, truth)
joint = esac_expected_loss_exact(gating, streams, 6, loss_fn, truth)
print(f"expected loss, hard expert selection: {hard:.3f}")
print(f"expected loss, budget allocation:     {joint:.3f}  (lower: the joint "
      "softmax can still pick expert 0 when the draw favors expert 1)")

# --- allocations ----------------------------------------------------------------
counts = {}
for _ in range(2000):
    key = tuple(sample_allocation(gating, 6, rng))
    counts[key] = counts.get(key, 0) + 1
top = sorted(counts.items(), key=lambda kv: -kv[1])[:3]
print("most frequent allocations of 6 hypotheses:",
      ", ".join(f"{a}:{c}" for a, c in top))
total = sum(np.exp(allocation_logprob(np.array(a), gating))
            for a in enumerate_allocations(2, 6))
print(f"allocation probabilities sum to {total:.12f} over all compositions")

# --- one forward pass ------------------------------------------------------------
alloc = sample_allocation(gating, 6, rng)
pools = [(e, streams[e].prefix(int(c))) for e, c in enumerate(alloc) if c > 0]
sel = esac_joint_selection(pools, rng)
print(f"allocation {tuple(alloc)} -> selected expert {sel.expert}, "
      f"hypothesis {sel.index}, score {sel.score:.2f}")

# --- estimator vs enumerated gradient --------------------------------------------
logits = np.log(gating)
exact = esac_exact_grads(logits, streams, 6, truth, 64.0)
acc = np.zeros(2)
k = 4000
for _ in range(k):
    acc += esac_grad_sampled(logits, streams, 6, truth, 64.0, rng).gating_logit_grad
print(f"gating-logit gradient: enumerated {exact.gating_logit_grad}, "
      f"mean of {k} single-sample estimates {acc / k}")
print(f"softmax of logits round-trips: {gating_softmax(logits)}")
