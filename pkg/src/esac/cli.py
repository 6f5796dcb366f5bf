"""Command-line entry point for experiments, evaluation and oracle suites.

Subcommands:

* ``toy-train``  - pretrain the toy experts and gating, then train one or
  both joint schemes; writes checkpoints, telemetry and metrics.
* ``toy-eval``   - evaluate checkpoints on a seeded test set; optional scene
  image dumps.
* ``relocsim``   - run the multi-room re-localization study; writes the
  report, confusion CSVs and a separate timing file.
* ``oracle``     - run the brute-force/enumeration oracle suite and report
  measured values against tolerances.

Every subcommand is a pure function of (config, seed): metrics files embed
the config hash and seed and are byte-identical across reruns.  Wall-clock
measurements go to separate ``*_timing.json`` files, which are the only
non-reproducible outputs.  Flags mirror environment variables with the
``ESAC_`` prefix (``ESAC_SEED``, ``ESAC_CONFIG``, ``ESAC_OUT``,
``ESAC_THREADS``, ``ESAC_PROFILE``, ``ESAC_SCHEME``, ``ESAC_TOP_K``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import _util, diffnet, oracles, relocsim, toybench

SCHEMA_VERSION = 1

ENV_PREFIX = "ESAC_"


class CliError(RuntimeError):
    pass


def _env_default(name: str, fallback=None):
    return os.environ.get(ENV_PREFIX + name.upper(), fallback)


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc}") from exc


def _toy_config(args) -> toybench.ToyConfig:
    profile = args.profile or "mini"
    if profile not in toybench.PROFILES:
        raise CliError(f"unknown profile {profile!r}")
    cfg = toybench.PROFILES[profile]()
    overrides = _load_config_file(args.config)
    base = cfg.to_dict()
    base.update(overrides)
    try:
        return toybench.ToyConfig.from_dict(base)
    except KeyError as exc:
        raise CliError(str(exc)) from exc


def _reloc_config(args) -> relocsim.RelocConfig:
    overrides = _load_config_file(args.config)
    base = relocsim.RelocConfig().to_dict()
    base.update(overrides)
    try:
        cfg = relocsim.RelocConfig.from_dict(base)
    except KeyError as exc:
        raise CliError(str(exc)) from exc
    if args.top_k is not None:
        cfg.top_k = args.top_k if args.top_k > 0 else None
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metrics_payload(subcommand: str, seed: int, config_dict: dict, body: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "seed": seed,
        "config_hash": _util.config_hash(config_dict),
        **body,
    }


def _write_telemetry(path: Path, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(_util.canonical_json(rec))
            fh.write("\n")


CHECKPOINT_NAMES = ("expert_line", "expert_circle", "gating")


def _save_ensemble(directory: Path, ens: toybench.ToyEnsemble) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    diffnet.save_checkpoint(directory / "expert_line.ckpt", ens.experts[0])
    diffnet.save_checkpoint(directory / "expert_circle.ckpt", ens.experts[1])
    diffnet.save_checkpoint(directory / "gating.ckpt", ens.gating)


def _load_ensemble(directory: Path, config: toybench.ToyConfig) -> toybench.ToyEnsemble:
    directory = Path(directory)
    for name in CHECKPOINT_NAMES:
        if not (directory / f"{name}.ckpt").exists():
            raise CliError(f"missing checkpoint: {directory / (name + '.ckpt')}")
    try:
        experts = [
            diffnet.load_checkpoint(directory / "expert_line.ckpt",
                                    expected_layers=toybench.expert_layers(config)),
            diffnet.load_checkpoint(directory / "expert_circle.ckpt",
                                    expected_layers=toybench.expert_layers(config)),
        ]
        gating = diffnet.load_checkpoint(
            directory / "gating.ckpt",
            expected_layers=toybench.gating_layers(config))
    except diffnet.CheckpointMismatch as exc:
        raise CliError(str(exc)) from exc
    return toybench.ToyEnsemble(experts, gating)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_toy_train(args) -> int:
    config = _toy_config(args)
    out = _out_dir(args)
    seed = args.seed
    schemes = (("expert-selection", "esac") if args.scheme in (None, "both")
               else (args.scheme,))

    ens = toybench.build_ensemble(config, seed)
    telemetry = []
    toybench.pretrain_expert("line", ens.experts[0], config, seed * 7 + 1,
                             telemetry=telemetry)
    _write_telemetry(out / "telemetry_expert_line.jsonl", telemetry)
    telemetry = []
    toybench.pretrain_expert("circle", ens.experts[1], config, seed * 7 + 2,
                             telemetry=telemetry)
    _write_telemetry(out / "telemetry_expert_circle.jsonl", telemetry)
    telemetry = []
    toybench.pretrain_gating(ens.gating, config, seed * 7 + 3,
                             telemetry=telemetry)
    _write_telemetry(out / "telemetry_gating.jsonl", telemetry)
    _save_ensemble(out / "pretrained", ens)

    for scheme in schemes:
        trained = ens.clone()
        telemetry = []
        toybench.train_joint(trained, scheme, config, seed * 7 + 4,
                             telemetry=telemetry)
        _write_telemetry(out / f"telemetry_joint_{scheme}.jsonl", telemetry)
        _save_ensemble(out / f"trained_{scheme}", trained)
        metrics = toybench.evaluate(trained, scheme, config.test_scenes, config,
                                    seed * 7 + 5, threads=args.threads)
        payload = _metrics_payload("toy-train", seed, config.to_dict(), {
            "scheme": scheme,
            "profile": args.profile or "mini",
            "metrics": metrics.to_dict(),
        })
        _util.write_json(out / f"metrics_{scheme}.json", payload)
        print(f"[toy-train] {scheme}: parameter_accuracy="
              f"{metrics.parameter_accuracy:.4f} classification_accuracy="
              f"{metrics.classification_accuracy:.4f}")
    return 0


def cmd_toy_eval(args) -> int:
    config = _toy_config(args)
    out = _out_dir(args)
    seed = args.seed
    if args.checkpoints is None:
        raise CliError("toy-eval requires --checkpoints DIR")
    ens = _load_ensemble(Path(args.checkpoints), config)
    schemes = (("expert-selection", "esac") if args.scheme in (None, "both")
               else (args.scheme,))
    for scheme in schemes:
        metrics = toybench.evaluate(ens, scheme, config.test_scenes, config,
                                    seed, top_k=args.top_k,
                                    threads=args.threads)
        payload = _metrics_payload("toy-eval", seed, config.to_dict(), {
            "scheme": scheme,
            "metrics": metrics.to_dict(),
        })
        _util.write_json(out / f"metrics_{scheme}.json", payload)
        print(f"[toy-eval] {scheme}: parameter_accuracy="
              f"{metrics.parameter_accuracy:.4f} classification_accuracy="
              f"{metrics.classification_accuracy:.4f}")
    if args.dump_images:
        dump_dir = out / "scenes"
        dump_dir.mkdir(exist_ok=True)
        for i in range(args.dump_images):
            scene = toybench.render_scene(toybench.scene_rng(seed, 9, i),
                                          config, seed=i)
            h, _, _ = toybench.evaluate_scene(ens, schemes[-1], scene, config,
                                              seed, i)
            rgb = toybench.scene_to_rgb(scene, estimate=h)
            toybench.write_ppm(dump_dir / f"scene_{i:04d}.ppm", rgb)
    return 0


def cmd_relocsim(args) -> int:
    config = _reloc_config(args)
    out = _out_dir(args)
    seed = args.seed
    report, timing, traces = relocsim.run_study(
        config, seed, collect_traces=args.dump_traces, threads=args.threads)
    payload = _metrics_payload("relocsim", seed, config.to_dict(),
                               {"report": report})
    _util.write_json(out / "report.json", payload)
    _util.write_json(out / "report_timing.json", timing)
    for scheme, body in report["schemes"].items():
        mat = np.asarray(body["confusion"])
        (out / f"confusion_{scheme}.csv").write_text(
            relocsim.confusion_to_csv(mat))
    if args.dump_traces:
        with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
            for scheme, rows in traces.items():
                for row in rows:
                    fh.write(_util.canonical_json({"scheme": scheme, **row}))
                    fh.write("\n")
    for scheme, body in report["schemes"].items():
        print(f"[relocsim] {scheme}: accuracy={body['accuracy']:.4f} "
              f"classification={body['classification_accuracy']:.4f} "
              f"experts={body['mean_experts_evaluated']:.2f} "
              f"({timing[scheme]['mean_ms_per_frame']:.1f} ms/frame)")
    return 0


def cmd_oracle(args) -> int:
    out = _out_dir(args)
    results = oracles.run_all(seed=args.seed, fast=args.fast)
    body = {
        "oracles": [
            {"name": r.name, "measured": r.measured, "tolerance": r.tolerance,
             "comparison": r.comparison, "passed": r.passed}
            for r in results
        ],
        "all_passed": all(r.passed for r in results),
    }
    payload = _metrics_payload("oracle", args.seed, {"fast": args.fast}, body)
    _util.write_json(out / "oracle_report.json", payload)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"[oracle] {r.name:<{width}} {status}  measured={r.measured:.6g} "
              f"{r.comparison} {r.tolerance:.6g}")
    return 0 if body["all_passed"] else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esac",
        description="Robust model fitting experiments: consensus, experts, poses.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_profile=False):
        p.add_argument("--config", default=_env_default("config"),
                       help="JSON config file overriding profile defaults")
        p.add_argument("--seed", type=int,
                       default=int(_env_default("seed", 1)),
                       help="master seed (64-bit)")
        p.add_argument("--out", default=_env_default("out", "out"),
                       help="output directory")
        p.add_argument("--threads", type=int,
                       default=int(_env_default("threads", 1)))
        if needs_profile:
            p.add_argument("--profile", choices=("mini", "paper"),
                           default=_env_default("profile"),
                           help="schedule/profile preset (default mini)")

    p = sub.add_parser("toy-train", help="pretrain and jointly train the toy ensemble")
    common(p, needs_profile=True)
    p.add_argument("--scheme", choices=("expert-selection", "esac", "both"),
                   default=_env_default("scheme"))
    p.set_defaults(fn=cmd_toy_train)

    p = sub.add_parser("toy-eval", help="evaluate toy checkpoints")
    common(p, needs_profile=True)
    p.add_argument("--checkpoints", help="directory with expert/gating checkpoints")
    p.add_argument("--scheme", choices=("expert-selection", "esac", "both"),
                   default=_env_default("scheme"))
    p.add_argument("--top-k", type=int,
                   default=(int(_env_default("top_k")) if _env_default("top_k") else None))
    p.add_argument("--dump-images", type=int, default=0,
                   help="write N test scenes with overlays as .ppm")
    p.set_defaults(fn=cmd_toy_eval)

    p = sub.add_parser("relocsim", help="run the multi-room re-localization study")
    common(p)
    p.add_argument("--top-k", type=int,
                   default=(int(_env_default("top_k")) if _env_default("top_k") else None),
                   help="restrict the expert budget to the top-k gating entries")
    p.add_argument("--dump-traces", action="store_true")
    p.set_defaults(fn=cmd_relocsim)

    p = sub.add_parser("oracle", help="run the brute-force oracle suite")
    common(p)
    p.add_argument("--fast", action="store_true",
                   help="reduced sample sizes for a quick smoke run")
    p.set_defaults(fn=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
