"""Multi-expert estimation: gating, hypothesis allocation, joint selection.

Two schemes are implemented on top of the single-model consensus machinery:

* expert selection: sample one expert from the gating distribution and run
  plain DSAC on its output;
* expert sample consensus: draw a multinomial allocation of the hypothesis
  budget over experts, pool every allocated hypothesis and select jointly by
  score, irrespective of which expert produced it.

Both schemes come with an exact expected loss (enumeration, used as a test
oracle) and a sampled, unbiased gradient estimator used for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import consensus, models
from .consensus import GradEntry, HypothesisPool, ScoringConfig, dsac_distribution

GATING_FLOOR = 1e-12


class EnumerationTooLarge(RuntimeError):
    """Exact allocation enumeration would exceed the configured bound."""


@dataclass(frozen=True)
class IndexedHypothesis:
    """A hypothesis tagged with the expert it came from."""

    expert: int
    index: int          # position within the expert's pool
    hypothesis: object
    score: float


# ---------------------------------------------------------------------------
# gating distributions
# ---------------------------------------------------------------------------


def validate_gating(probs) -> np.ndarray:
    g = np.asarray(probs, dtype=float)
    if g.ndim != 1 or g.size < 1:
        raise ValueError("gating must be a non-empty probability vector")
    if np.any(g < -1e-12) or np.any(g > 1 + 1e-12):
        raise ValueError("gating probabilities must lie in [0, 1]")
    if abs(g.sum() - 1.0) > 1e-9:
        raise ValueError("gating probabilities must sum to 1")
    return np.clip(g, 0.0, 1.0)


def gating_softmax(logits) -> np.ndarray:
    return dsac_distribution(logits)


def restrict_top_k(probs, k: int) -> np.ndarray:
    """Keep the k largest gating entries (ties by lowest index), renormalize."""
    g = validate_gating(probs)
    m = g.size
    if not 1 <= k <= m:
        raise ValueError("k must be in [1, M]")
    if k == m:
        return g.copy()
    order = np.argsort(-g, kind="stable")
    out = np.zeros_like(g)
    keep = order[:k]
    out[keep] = g[keep]
    return out / out.sum()


# ---------------------------------------------------------------------------
# allocations
# ---------------------------------------------------------------------------


def sample_allocation(probs, n: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial draw as n independent categorical draws, tallied."""
    g = validate_gating(probs)
    if n < 1:
        raise ValueError("n must be >= 1")
    picks = rng.choice(g.size, size=n, p=g / g.sum())
    return np.bincount(picks, minlength=g.size)


def allocation_logprob(counts, probs) -> float:
    """Log multinomial probability of an allocation; -inf marks impossible ones."""
    h = np.asarray(counts)
    g = validate_gating(probs)
    if np.any(h < 0) or h.shape != g.shape:
        raise ValueError("invalid allocation vector")
    n = int(h.sum())
    impossible = (h > 0) & (g == 0.0)
    if np.any(impossible):
        return float("-inf")
    active = h > 0
    logp = gammaln(n + 1) - np.sum(gammaln(h + 1))
    logp += float(np.sum(h[active] * np.log(g[active])))
    return float(logp)


def allocation_logprob_grad_probs(counts, probs,
                                  floor: float = GATING_FLOOR) -> np.ndarray:
    """d log p(H) / d g_e = n_e / g_e, with the division floor-guarded."""
    h = np.asarray(counts, dtype=float)
    g = np.asarray(probs, dtype=float)
    return h / np.maximum(g, floor)


def allocation_logprob_grad_logits(counts, logits) -> np.ndarray:
    """Chain the allocation log-probability through the gating softmax."""
    g = gating_softmax(logits)
    dprobs = allocation_logprob_grad_probs(counts, g)
    return g * (dprobs - float(dprobs @ g))


def enumerate_allocations(n_experts: int, n_hypotheses: int):
    """Yield every allocation of n_hypotheses over n_experts, lexicographic."""
    def rec(prefix, remaining, slots):
        if slots == 1:
            yield prefix + (remaining,)
            return
        for c in range(remaining + 1):
            yield from rec(prefix + (c,), remaining - c, slots - 1)
    yield from rec((), n_hypotheses, n_experts)


def allocation_count(n_experts: int, n_hypotheses: int) -> int:
    return math.comb(n_hypotheses + n_experts - 1, n_experts - 1)


def expected_count_allocation(probs, n: int) -> np.ndarray:
    """Deterministic test-time allocation: expected counts, largest remainder."""
    g = validate_gating(probs)
    raw = g * n
    base = np.floor(raw).astype(int)
    short = n - int(base.sum())
    if short > 0:
        remainder = raw - base
        order = np.argsort(-remainder, kind="stable")
        base[order[:short]] += 1
    return base


# ---------------------------------------------------------------------------
# hypothesis streams
# ---------------------------------------------------------------------------


class HypothesisStream:
    """A fixed-seed stream of hypotheses for one expert.

    An allocation of n consumes the first n hypotheses, so hypothesis i is
    identical across every allocation with n_e >= i+1; this is what makes
    exact enumeration over allocations well defined.  Both the expert output
    (when ``source`` is a callable) and the pool are materialized lazily, so
    experts that receive no hypotheses are never evaluated.
    """

    def __init__(self, source, kind: str, cfg: ScoringConfig, n_max: int,
                 seed, retry_cap: int = 100, K=None):
        self._source = source
        self.kind = kind
        self.cfg = cfg
        self.n_max = int(n_max)
        self._seed = seed
        self._retry_cap = retry_cap
        self._K = K
        self._obs = None
        self._pool = None
        self.evaluations = 0

    @property
    def evaluated(self) -> bool:
        return self._obs is not None

    def observations(self):
        if self._obs is None:
            self._obs = self._source() if callable(self._source) else self._source
            self.evaluations += 1
        return self._obs

    def full(self) -> HypothesisPool:
        if self._pool is None:
            obs = self.observations()
            rng = np.random.default_rng(self._seed)
            self._pool = consensus.sample_pool(obs, self.n_max, self.kind,
                                               self.cfg, rng,
                                               retry_cap=self._retry_cap,
                                               K=self._K)
        return self._pool

    def prefix(self, n: int) -> HypothesisPool:
        if not 1 <= n <= self.n_max:
            raise ValueError(f"prefix length {n} outside [1, {self.n_max}]")
        pool = self.full()
        return HypothesisPool(pool.kind, pool.params[:n],
                              pool.minimal_set_indices[:n], pool.scores[:n])


def pool_expected_loss(pool: HypothesisPool, loss_fn, h_gt):
    """Inner DSAC expectation of a pool: (expected loss, probs, losses)."""
    probs = dsac_distribution(pool.scores)
    losses = np.array([loss_fn(pool.hypothesis(j), h_gt) for j in range(len(pool))])
    return float(probs @ losses), probs, losses


# ---------------------------------------------------------------------------
# expert selection (hard mixture of experts)
# ---------------------------------------------------------------------------


@dataclass
class SelectionResult:
    hypothesis: object
    expert: int
    index: int
    score: float
    experts_evaluated: int


def expert_selection_estimate(gating, streams: list, rng: np.random.Generator,
                              argmax_expert: bool = False,
                              argmax_hypothesis: bool = False) -> SelectionResult:
    """Pick an expert from the gating distribution and run DSAC on it alone.

    Only the chosen expert's stream is materialized.  ``argmax_*`` switch the
    training-time sampling to the deterministic test-time rule.
    """
    g = validate_gating(gating)
    if len(streams) != g.size:
        raise ValueError("one stream per gating entry required")
    if argmax_expert:
        e = int(np.argmax(g))
    else:
        e = int(rng.choice(g.size, p=g / g.sum()))
    pool = streams[e].full()
    if argmax_hypothesis:
        h, j = consensus.ransac_select(pool)
    else:
        h, j = consensus.dsac_select(pool, rng)
    evaluated = sum(1 for s in streams if s.evaluated)
    return SelectionResult(h, e, j, float(pool.scores[j]), evaluated)


def expert_selection_loss(gating, pools: list, loss_fn, h_gt) -> float:
    """Exact double expectation: sum_e p(e) sum_j p(j|e) loss(h_j)."""
    g = validate_gating(gating)
    if len(pools) != g.size:
        raise ValueError("one pool per gating entry required")
    total = 0.0
    for e, pool in enumerate(pools):
        if g[e] == 0.0:
            continue
        inner, _, _ = pool_expected_loss(pool, loss_fn, h_gt)
        total += float(g[e]) * inner
    return total


@dataclass
class SampledGradient:
    """Mean of k single-sample estimates of an expected-loss gradient."""

    gating_logit_grad: np.ndarray
    point_grads: dict = field(default_factory=dict)  # expert -> (P_e, 2)
    mean_loss: float = 0.0
    samples: int = 0


def expert_selection_grad_sampled(gating_logits, streams: list, h_gt,
                                  image_size: float, rng: np.random.Generator,
                                  k_samples: int = 1) -> SampledGradient:
    """Sampled gradient of the expert-selection expected loss.

    Each sample draws one expert e ~ p(e) and contributes
    ``E_j[loss] * dlog p(e) + d E_j[loss]``: a score-function term for the
    gating logits and the exact DSAC gradient for the chosen expert's points.
    """
    logits = np.asarray(gating_logits, dtype=float)
    g = gating_softmax(logits)
    out = SampledGradient(np.zeros_like(logits))
    for _ in range(k_samples):
        e = int(rng.choice(g.size, p=g / g.sum()))
        stream = streams[e]
        pool = stream.full()
        L, grads = consensus.dsac_backward(stream.observations(), pool,
                                           stream.cfg, h_gt, image_size)
        one_hot = np.zeros_like(logits)
        one_hot[e] = 1.0
        out.gating_logit_grad += L * (one_hot - g)
        if e in out.point_grads:
            out.point_grads[e] = out.point_grads[e] + grads
        else:
            out.point_grads[e] = grads
        out.mean_loss += L
        out.samples += 1
    out.gating_logit_grad /= k_samples
    out.point_grads = {e: v / k_samples for e, v in out.point_grads.items()}
    out.mean_loss /= k_samples
    return out


def expert_selection_exact_grads(gating_logits, streams: list, h_gt,
                                 image_size: float) -> SampledGradient:
    """Exact gradient of the expert-selection expected loss (all experts).

    Oracle counterpart of :func:`expert_selection_grad_sampled`; materializes
    every pool.
    """
    logits = np.asarray(gating_logits, dtype=float)
    g = gating_softmax(logits)
    out = SampledGradient(np.zeros_like(logits))
    inner = np.zeros(g.size)
    for e, stream in enumerate(streams):
        pool = stream.full()
        L, grads = consensus.dsac_backward(stream.observations(), pool,
                                           stream.cfg, h_gt, image_size)
        inner[e] = L
        out.point_grads[e] = g[e] * grads
    # d/dlogits sum_e softmax_e(logits) * inner_e
    out.gating_logit_grad = g * (inner - float(inner @ g))
    out.mean_loss = float(inner @ g)
    out.samples = 1
    return out


# ---------------------------------------------------------------------------
# expert sample consensus
# ---------------------------------------------------------------------------


def esac_joint_selection(pools: list, rng: np.random.Generator | None = None,
                         argmax: bool = False) -> IndexedHypothesis:
    """Select one hypothesis across expert pools by a joint score softmax.

    ``pools`` is a list of (expert_index, HypothesisPool) pairs covering the
    experts with a nonzero allocation.
    """
    if not pools:
        raise ValueError("no pools to select from")
    scores = np.concatenate([p.scores for _, p in pools])
    owners = np.concatenate([np.full(len(p), e) for e, p in pools])
    within = np.concatenate([np.arange(len(p)) for _, p in pools])
    if argmax:
        flat = int(np.argmax(scores))
    else:
        if rng is None:
            raise ValueError("sampling selection needs an rng")
        probs = dsac_distribution(scores)
        flat = int(rng.choice(scores.size, p=probs / probs.sum()))
    e = int(owners[flat])
    j = int(within[flat])
    pool = dict(pools)[e]
    return IndexedHypothesis(e, j, pool.hypothesis(j), float(scores[flat]))


def esac_expected_loss_exact(gating, streams: list, n_hypotheses: int,
                             loss_fn, h_gt,
                             max_allocations: int = 100_000) -> float:
    """Exact ESAC expected loss by enumerating every allocation.

    Only feasible for small budgets; raises EnumerationTooLarge above
    ``max_allocations``.  Streams make hypothesis prefixes shared across
    allocations, so per-expert scores and losses are computed once.
    """
    g = validate_gating(gating)
    m = g.size
    count = allocation_count(m, n_hypotheses)
    if count > max_allocations:
        raise EnumerationTooLarge(f"{count} allocations exceed {max_allocations}")

    scores_e: dict[int, np.ndarray] = {}
    losses_e: dict[int, np.ndarray] = {}
    for e in range(m):
        if g[e] > 0.0:
            pool = streams[e].full()
            scores_e[e] = pool.scores[:n_hypotheses]
            losses_e[e] = np.array([loss_fn(pool.hypothesis(j), h_gt)
                                    for j in range(min(len(pool), n_hypotheses))])

    total = 0.0
    for alloc in enumerate_allocations(m, n_hypotheses):
        h = np.asarray(alloc)
        logp = allocation_logprob(h, g)
        if logp == float("-inf"):
            continue
        scores = np.concatenate([scores_e[e][:c] for e, c in enumerate(h) if c > 0])
        losses = np.concatenate([losses_e[e][:c] for e, c in enumerate(h) if c > 0])
        probs = dsac_distribution(scores)
        total += math.exp(logp) * float(probs @ losses)
    return total


def esac_grad_sampled(gating_logits, streams: list, n_hypotheses: int, h_gt,
                      image_size: float, rng: np.random.Generator,
                      k_samples: int = 1) -> SampledGradient:
    """Sampled gradient of the ESAC expected loss.

    Each sample draws an allocation H ~ p(H) and contributes
    ``E_(e,j)[loss] * dlog p(H) + d E_(e,j)[loss]``; the log-probability
    derivative follows d log p(H)/d g_e = n_e / g_e chained through the
    gating softmax, and the point gradient runs the joint-softmax DSAC
    backward over the concatenated pool.
    """
    logits = np.asarray(gating_logits, dtype=float)
    g = gating_softmax(logits)
    out = SampledGradient(np.zeros_like(logits))
    for _ in range(k_samples):
        alloc = sample_allocation(g, n_hypotheses, rng)
        entries = []
        active = []
        for e, c in enumerate(alloc):
            if c > 0:
                stream = streams[e]
                entries.append(GradEntry(stream.observations(), stream.prefix(int(c))))
                active.append(e)
        cfg = streams[active[0]].cfg
        L, _, grads = consensus.toy_grad_engine(entries, cfg, h_gt, image_size)
        out.gating_logit_grad += L * allocation_logprob_grad_logits(alloc, logits)
        for e, grad in zip(active, grads):
            if e in out.point_grads:
                out.point_grads[e] = out.point_grads[e] + grad
            else:
                out.point_grads[e] = grad
        out.mean_loss += L
        out.samples += 1
    out.gating_logit_grad /= k_samples
    out.point_grads = {e: v / k_samples for e, v in out.point_grads.items()}
    out.mean_loss /= k_samples
    return out


def esac_exact_grads(gating_logits, streams: list, n_hypotheses: int, h_gt,
                     image_size: float,
                     max_allocations: int = 100_000) -> SampledGradient:
    """Exact gradient of the ESAC expected loss by allocation enumeration.

    Oracle counterpart of :func:`esac_grad_sampled`:
    ``sum_H p(H) [E[loss|H] dlog p(H) + d E[loss|H]]``.
    """
    logits = np.asarray(gating_logits, dtype=float)
    g = gating_softmax(logits)
    m = g.size
    count = allocation_count(m, n_hypotheses)
    if count > max_allocations:
        raise EnumerationTooLarge(f"{count} allocations exceed {max_allocations}")
    out = SampledGradient(np.zeros_like(logits))
    for alloc in enumerate_allocations(m, n_hypotheses):
        h = np.asarray(alloc)
        logp = allocation_logprob(h, g)
        if logp == float("-inf"):
            continue
        w = math.exp(logp)
        entries = []
        active = []
        for e, c in enumerate(h):
            if c > 0:
                stream = streams[e]
                entries.append(GradEntry(stream.observations(), stream.prefix(int(c))))
                active.append(e)
        cfg = streams[active[0]].cfg
        L, _, grads = consensus.toy_grad_engine(entries, cfg, h_gt, image_size)
        out.gating_logit_grad += w * L * allocation_logprob_grad_logits(h, logits)
        for e, grad in zip(active, grads):
            if e in out.point_grads:
                out.point_grads[e] = out.point_grads[e] + w * grad
            else:
                out.point_grads[e] = w * grad
        out.mean_loss += w * L
    out.samples = 1
    return out
