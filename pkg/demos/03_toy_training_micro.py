"""A micro end-to-end run of the line/circle benchmark.

A heavily shrunk schedule (a couple of minutes on one core) that exercises
every stage: scene generation, supervised warm-up plus consensus pretraining
of both experts, gating pretraining, joint training with both schemes, and
the final evaluation.  Accuracy will be modest at this scale; the point is
the moving parts.  The mini profile in README.md is the calibrated version.
"""

import time

import numpy as np

from esac.toybench import (
    ToyConfig, build_ensemble, evaluate, pretrain_expert, pretrain_gating,
    render_scene, scene_rng, scene_to_rgb, train_joint, write_ppm,
)

config = ToyConfig(
    image_size=32,
    n_hypotheses=12,
    batch_size=8,
    warmup_iterations=800,
    pretrain_iterations=800,
    gating_iterations=600,
    joint_iterations=300,
    lr_pretrain=3e-4,
    warmup_lr=1e-3,
    expert_patch_features=16,
    expert_hidden=(96, 64),
    eval_hypotheses=24,
    test_scenes=300,
)
SEED = 5

ens = build_ensemble(config, SEED)
print(f"experts: {ens.experts[0].n_params} parameters each, "
      f"gating: {ens.gating.n_params}")

t0 = time.time()
for e, kind in enumerate(("line", "circle")):
    telemetry = []
    pretrain_expert(kind, ens.experts[e], config, seed=SEED * 10 + e,
                    telemetry=telemetry)
    losses = [t["loss"] for t in telemetry if "loss" in t]
    print(f"{kind} expert pretrained ({time.time() - t0:.0f}s): "
          f"consensus loss {np.mean(losses[:100]):.2f} -> {np.mean(losses[-100:]):.2f}")

telemetry = []
pretrain_gating(ens.gating, config, seed=SEED * 10 + 7, telemetry=telemetry)
print(f"gating pretrained, final NLL {np.mean([t['loss'] for t in telemetry[-100:]]):.3f}")

for scheme in ("expert-selection", "esac"):
    trained = ens.clone()
    train_joint(trained, scheme, config, seed=SEED * 10 + 8)
    m = evaluate(trained, scheme, config.test_scenes, config, seed=SEED * 10 + 9)
    print(f"{scheme:17s}: parameter accuracy {m.parameter_accuracy:.3f}, "
          f"classification {m.classification_accuracy:.3f}, "
          f"experts evaluated/scene {m.mean_experts_evaluated:.2f}")

# qualitative dump: ground truth in green, estimate in blue
from esac.toybench import evaluate_scene

scene = render_scene(scene_rng(SEED, 9, 0), config, seed=0)
h, _, _ = evaluate_scene(trained, "esac", scene, config, SEED * 10 + 9, 0)
write_ppm("toy_scene.ppm", scene_to_rgb(scene, estimate=h))
print("wrote toy_scene.ppm")
