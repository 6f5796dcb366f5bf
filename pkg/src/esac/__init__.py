"""Robust parametric model fitting with consensus and expert ensembles.

Layers of the library:

* :mod:`esac.models` - model types (lines, circles, 6D poses), minimal
  solvers, residuals, inlier refinement and task losses.
* :mod:`esac.consensus` - hypothesis pools, hard/soft inlier scoring, RANSAC
  argmax selection, probabilistic (softmax) selection, exact expected losses
  and their point gradients.
* :mod:`esac.ensemble` - gating distributions, multinomial hypothesis
  allocation, joint cross-expert selection, exact enumeration oracles and
  sampled gradient estimators for training.
* :mod:`esac.diffnet` - minimal differentiable predictors with flat
  parameter vectors, Adam, and binary checkpoints.
* :mod:`esac.toybench` - the synthetic line/circle benchmark with full
  training and evaluation loops.
* :mod:`esac.relocsim` - the synthetic multi-room re-localization study.
* :mod:`esac.oracles` - brute-force verification oracles.
"""

from .consensus import (
    HypothesisPool, NonDifferentiableModel, PoolExhausted, ScoringConfig,
    dsac_backward, dsac_distribution, dsac_expected_loss, dsac_select,
    hard_inlier_count, pool_from_indices, ransac_select, sample_pool,
    soft_inlier_score,
)
from .ensemble import (
    EnumerationTooLarge, HypothesisStream, IndexedHypothesis,
    allocation_logprob, esac_expected_loss_exact, esac_grad_sampled,
    esac_joint_selection, expected_count_allocation,
    expert_selection_estimate, expert_selection_grad_sampled,
    expert_selection_loss, restrict_top_k, sample_allocation,
)
from .models import (
    CameraIntrinsics, Circle2D, Correspondences, DegenerateMinimalSet, Line2D,
    ModelDatumMismatch, NoSolution, Points2D, Pose6D, fit_circle_minimal,
    fit_line_minimal, pose_loss, refine_on_inliers, residual, residuals,
    solve_pnp_minimal, toy_loss,
)

__version__ = "0.1.0"
