"""Acceptance suite: one test per criterion, one printed verdict line each.

Criteria 6 and 7 train/evaluate at the calibrated mini profile and dominate
the runtime; everything else reuses the full-size brute-force oracles.
Deselect with ``pytest -m "not acceptance"`` during development.
"""

import json
import time

import numpy as np
import pytest

from esac import cli, oracles, relocsim, toybench

pytestmark = pytest.mark.acceptance

TOY_SEED = 207


def _verdict(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{criterion}] {'PASS' if passed else 'FAIL'} - {detail}")


def _run_oracles(fns, budget_s: float, label: str):
    t0 = time.time()
    results = [fn(seed=0, fast=False) for fn in fns]
    elapsed = time.time() - t0
    detail = "; ".join(f"{r.name}={r.measured:.3g}{r.comparison}{r.tolerance:g}"
                       for r in results)
    ok = all(r.passed for r in results) and elapsed <= budget_s
    _verdict(label, ok, f"{detail}; runtime {elapsed:.0f}s <= {budget_s:.0f}s")
    assert elapsed <= budget_s
    for r in results:
        assert r.passed, f"{r.name}: measured {r.measured} vs {r.tolerance}"
    return results


def test_criterion_1_gradient_correctness():
    """Analytic/sampled gradients match finite differences and enumeration."""
    _run_oracles([
        oracles.dsac_gradient_finite_difference,
        oracles.expert_selection_gradient_mc,
        oracles.esac_gradient_mc,
        oracles.allocation_logprob_gradient_fd,
    ], budget_s=300.0, label="criterion 1: gradient correctness")


def test_criterion_2_expectation_oracles():
    """Monte-Carlo expectations sit within 3 standard errors of enumeration."""
    _run_oracles([
        oracles.expert_selection_expectation_mc,
        oracles.esac_expectation_mc,
    ], budget_s=120.0, label="criterion 2: expectation oracles")


def test_criterion_3_distribution_correctness():
    """Allocation sampling passes chi-square; selection marginals match."""
    _run_oracles([
        oracles.allocation_chi_square,
        oracles.dsac_selection_marginals,
        oracles.joint_selection_marginals,
    ], budget_s=300.0, label="criterion 3: distribution correctness")


def test_criterion_4_soft_hard_limit():
    """Sharp sigmoid scores converge to alpha times the hard inlier count."""
    _run_oracles([oracles.soft_hard_limit], budget_s=60.0,
                 label="criterion 4: soft/hard score limit")


def test_criterion_5_ransac_recovery():
    """70%-inlier line data is recovered within 3px in >= 99% of 1000 trials."""
    _run_oracles([oracles.ransac_line_recovery], budget_s=120.0,
                 label="criterion 5: ransac recovery")


def test_criterion_8_cluster_formulas():
    """Soft assignment matches recomputation; Lloyd objective is monotone."""
    _run_oracles([
        oracles.soft_assignment_recompute,
        oracles.kmeans_objective_monotone,
    ], budget_s=120.0, label="criterion 8: cluster formulas")


# ---------------------------------------------------------------------------
# criterion 6: toy benchmark at the mini profile
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_run():
    """One full mini-profile run shared by the toy-benchmark criteria."""
    config = toybench.mini_config()
    t0 = time.time()
    ens = toybench.build_ensemble(config, TOY_SEED)
    telemetry = {}
    for e, kind in enumerate(("line", "circle")):
        rows = []
        toybench.pretrain_expert(kind, ens.experts[e], config,
                                 seed=TOY_SEED * 7 + 1 + e, telemetry=rows)
        telemetry[kind] = [r["loss"] for r in rows if "loss" in r]
    rows = []
    toybench.pretrain_gating(ens.gating, config, seed=TOY_SEED * 7 + 3,
                             telemetry=rows)
    telemetry["gating"] = [r["loss"] for r in rows]

    pretrained_metrics = {
        scheme: toybench.evaluate(ens, scheme, config.test_scenes, config,
                                  seed=TOY_SEED * 7 + 5)
        for scheme in ("expert-selection", "esac")
    }
    trained = {}
    trained_metrics = {}
    for scheme in ("expert-selection", "esac"):
        t = ens.clone()
        toybench.train_joint(t, scheme, config, seed=TOY_SEED * 7 + 4)
        trained[scheme] = t
        trained_metrics[scheme] = toybench.evaluate(
            t, scheme, config.test_scenes, config, seed=TOY_SEED * 7 + 5)
    return {
        "config": config,
        "pretrained": ens,
        "telemetry": telemetry,
        "pretrained_metrics": pretrained_metrics,
        "trained_metrics": trained_metrics,
        "elapsed": time.time() - t0,
    }


def test_criterion_6_toy_reproduction(mini_run):
    """Budget allocation beats hard expert selection by the stated margins."""
    es = mini_run["trained_metrics"]["expert-selection"]
    esac_m = mini_run["trained_metrics"]["esac"]
    dp = 100 * (esac_m.parameter_accuracy - es.parameter_accuracy)
    dc = 100 * (esac_m.classification_accuracy - es.classification_accuracy)
    hours = mini_run["elapsed"] / 3600
    ok = dp >= 2.0 and dc >= 5.0 and hours <= 4.0
    _verdict("criterion 6: toy reproduction", ok,
             f"esac param {esac_m.parameter_accuracy:.3f} vs es "
             f"{es.parameter_accuracy:.3f} (+{dp:.1f}pts, need >=2); "
             f"class {esac_m.classification_accuracy:.3f} vs "
             f"{es.classification_accuracy:.3f} (+{dc:.1f}pts, need >=5); "
             f"{hours:.2f}h <= 4h; n={esac_m.n_scenes}")
    assert esac_m.n_scenes >= 2000
    assert dp >= 2.0
    assert dc >= 5.0
    assert hours <= 4.0


def test_toy_expert_pretraining_health(mini_run):
    """Per-kind expert accuracy >= 60% and consensus loss halves (smoothed)."""
    config = mini_run["config"]
    ens = mini_run["pretrained"]
    from esac import consensus
    from esac.models import Points2D

    accs = {}
    for e, kind in enumerate(("line", "circle")):
        ok = 0
        sc = config.scoring()
        for i in range(500):
            scene = toybench.render_scene(toybench.scene_rng(TOY_SEED + 99, 9, i),
                                          config, force_kind=kind, seed=i)
            pts = ens.experts[e].forward(scene.image).astype(np.float64)
            pool = consensus.sample_pool(Points2D(pts), config.eval_hypotheses,
                                         kind, sc, np.random.default_rng(i))
            h, _ = consensus.ransac_select(pool)
            ok += toybench.parameter_ok(h, scene, config.image_size)
        accs[kind] = ok / 500

    ratios = {}
    for kind in ("line", "circle"):
        losses = np.asarray(mini_run["telemetry"][kind])
        ratios[kind] = losses[-500:].mean() / losses[:500].mean()

    detail = (f"held-out accuracy line {accs['line']:.3f} / circle "
              f"{accs['circle']:.3f} (need >=0.6); smoothed loss ratios "
              f"line {ratios['line']:.2f} / circle {ratios['circle']:.2f} (need <0.5)")
    ok = all(a >= 0.60 for a in accs.values()) and all(r < 0.5 for r in ratios.values())
    _verdict("toy expert pretraining", ok, detail)
    assert accs["line"] >= 0.60 and accs["circle"] >= 0.60
    assert ratios["line"] < 0.5 and ratios["circle"] < 0.5


def test_toy_gating_pretraining_health(mini_run):
    """Gating reaches >= 75% held-out accuracy with window-monotone telemetry."""
    config = mini_run["config"]
    gating = mini_run["pretrained"].gating
    hits = 0
    for i in range(2000):
        scene = toybench.render_scene(toybench.scene_rng(TOY_SEED + 999, 2, i),
                                      config)
        hits += int(np.argmax(gating.forward(scene.image))) == scene.class_index
    acc = hits / 2000
    losses = np.asarray(mini_run["telemetry"]["gating"])
    windows = [losses[k:k + 500].mean() for k in range(0, len(losses), 500)]
    monotone = all(b < a for a, b in zip(windows, windows[1:]))
    _verdict("toy gating pretraining", acc >= 0.75 and monotone,
             f"held-out accuracy {acc:.3f} (need >=0.75); "
             f"NLL windows {windows[0]:.3f}->{windows[-1]:.3f} monotone={monotone}")
    assert acc >= 0.75
    assert monotone


def test_toy_joint_training_improves(mini_run):
    """End-to-end training lifts both metrics over the pretrained ensemble."""
    pre = mini_run["pretrained_metrics"]["esac"]
    post = mini_run["trained_metrics"]["esac"]
    dp = post.parameter_accuracy - pre.parameter_accuracy
    dc = post.classification_accuracy - pre.classification_accuracy
    _verdict("toy end-to-end ablation", dp > 0 and dc > 0,
             f"esac param {pre.parameter_accuracy:.3f}->{post.parameter_accuracy:.3f}, "
             f"class {pre.classification_accuracy:.3f}->{post.classification_accuracy:.3f}")
    assert dp > 0
    assert dc > 0


# ---------------------------------------------------------------------------
# criterion 7: re-localization ordering
# ---------------------------------------------------------------------------


def test_criterion_7_relocsim_ordering():
    """Oracle >= ESAC >= expert selection with the stated margins and costs."""
    config = relocsim.RelocConfig(
        n_rooms=4, n_frames=2000,
        schemes=("oracle", "esac", "expert-selection", "uniform"))
    t0 = time.time()
    report, timing, _ = relocsim.run_study(config, seed=97)
    elapsed = time.time() - t0
    acc = {s: report["schemes"][s]["accuracy"] for s in config.schemes}
    margin = 100 * (acc["esac"] - acc["expert-selection"])
    experts = report["schemes"]["esac"]["mean_experts_evaluated"]
    ms = {s: timing[s]["mean_ms_per_frame"] for s in ("esac", "uniform")}
    gap_uniform = 100 * abs(acc["esac"] - acc["uniform"])
    ok = (acc["oracle"] >= acc["esac"] >= acc["expert-selection"]
          and margin >= 3.0 and experts < config.n_rooms
          and ms["esac"] < ms["uniform"] and gap_uniform <= 2.0
          and elapsed <= 1800.0)
    _verdict("criterion 7: relocsim ordering", ok,
             f"oracle {acc['oracle']:.3f} >= esac {acc['esac']:.3f} >= "
             f"es {acc['expert-selection']:.3f} (margin {margin:.1f}pts, need >=3); "
             f"experts/frame {experts:.2f} < 4; esac {ms['esac']:.1f}ms < "
             f"uniform {ms['uniform']:.1f}ms; esac-vs-uniform gap "
             f"{gap_uniform:.1f}pts <= 2; runtime {elapsed:.0f}s <= 1800s")
    assert acc["oracle"] >= acc["esac"] >= acc["expert-selection"]
    assert margin >= 3.0
    assert experts < config.n_rooms
    assert ms["esac"] < ms["uniform"]
    assert gap_uniform <= 2.0
    assert elapsed <= 1800.0


# ---------------------------------------------------------------------------
# criterion 9: command-line determinism
# ---------------------------------------------------------------------------


def test_criterion_9_cli_determinism(tmp_path):
    """Identical config+seed reproduce every metrics file byte for byte."""
    toy_cfg = tmp_path / "toy.json"
    toy_cfg.write_text(json.dumps({
        "image_size": 16, "n_points": 16, "n_hypotheses": 6, "batch_size": 2,
        "pretrain_iterations": 2, "gating_iterations": 2, "joint_iterations": 2,
        "warmup_iterations": 2, "test_scenes": 25, "expert_patch_features": 6,
        "expert_hidden": [24, 16], "gating_hidden": 6, "eval_hypotheses": 6,
    }))
    reloc_cfg = tmp_path / "reloc.json"
    reloc_cfg.write_text(json.dumps({
        "n_rooms": 2, "n_frames": 6, "n_hypotheses": 24,
        "landmarks_per_room": 64, "expert_compute_reps": 0,
        "schemes": ["esac", "oracle"],
    }))

    pairs = []
    for run in ("a", "b"):
        base = tmp_path / run
        assert cli.main(["toy-train", "--config", str(toy_cfg), "--seed", "5",
                         "--out", str(base / "train"), "--scheme", "both"]) == 0
        assert cli.main(["toy-eval", "--config", str(toy_cfg), "--seed", "5",
                         "--out", str(base / "eval"), "--scheme", "esac",
                         "--checkpoints", str(base / "train" / "trained_esac")]) == 0
        assert cli.main(["relocsim", "--config", str(reloc_cfg), "--seed", "5",
                         "--out", str(base / "reloc")]) == 0
        assert cli.main(["oracle", "--fast", "--seed", "5",
                         "--out", str(base / "oracle")]) == 0
    files = ["train/metrics_esac.json", "train/metrics_expert-selection.json",
             "eval/metrics_esac.json", "reloc/report.json",
             "reloc/confusion_esac.csv", "oracle/oracle_report.json"]
    mismatched = [f for f in files
                  if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    _verdict("criterion 9: cli determinism", not mismatched,
             f"{len(files)} metrics files byte-identical across reruns"
             + (f"; MISMATCH: {mismatched}" if mismatched else ""))
    assert not mismatched
