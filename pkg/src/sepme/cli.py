"""Experiment runner: train the toy model, erase concepts, compose subsets,
evaluate, and sweep the stopping threshold, reproducibly from a flat config.

Every run writes into --out: checkpoints plus sidecars, CSV reports, and an
echo of the effective config. No timestamps anywhere, so rerunning a command
with the same inputs reproduces every output byte for byte.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointFormatError,
    load_increment,
    load_params,
    save_increment,
    save_params,
)
from .erasure_trainers import (
    BASELINE_KINDS,
    EraseHyper,
    train_baseline,
    train_gcirs,
    train_sepme,
    write_trace_csv,
)
from .eval_harness import (
    ablate_tau,
    evaluate,
    separability_suite,
    train_classifier,
    write_ablation_csv,
    write_eval_csv,
    write_subsets_csv,
)
from .numerics import NullSpaceEmpty, NumericalError
from .toy_diffusion import (
    DmHyper,
    ModelDims,
    build_concepts,
    make_default_dataset,
    make_schedule,
    train_dm,
)
from .weight_decoupling import EraserSet, WeightIncrement

# Toy-calibrated rates used when "lr"/"dense_lr" are left null in the config.
# The library defaults (1e-6 dense, 1e-2 decoupled) are tuned for the scale
# the methods were designed at and barely move this model within the
# iteration budget.
TOY_LR = {"gcirs": 3e-3, "sepme": 1.0}
TOY_BASELINE_LR = 3e-3

DEFAULT_CONFIG = {
    "concepts": ["A", "B", "C", "D", "E"],
    "forgotten": ["A", "B", "C"],
    "radius": 2.0,
    "sigma": 0.25,
    "token_scale": 3.0,
    "timesteps": 200,
    "beta_min": 1e-4,
    "beta_max": 0.1,
    "data_dim": 2,
    "hidden_dim": 32,
    "token_dim": 64,
    "token_count": 4,
    "attn_dim": 32,
    "ffn_dim": 64,
    "blocks": 2,
    "dm_lr": 2e-3,
    "dm_steps": 6000,
    "dm_batch": 32,
    "method": "sepme",
    "mode": "separate",
    "lr": None,
    "dense_lr": None,
    "max_iters": 1000,
    "tau": 0.0,
    "tau_overrides": {},
    "alpha": 0.9,
    "beta": 1e-4,
    "reg_weight": 3e-5,
    "reg_mode": "l1_mean",
    "corr": "product",
    "batch": None,
    "baseline_iters": 200,
    "anchors": {},
    "esd_eta": 1.0,
    "subset": None,
    "eval_n": 250,
    "classifier_n": 250,
    "classifier_seed": 0,
    "eval_seed": 123,
    "ablate_taus": [1e-3, 5e-4, 0.0, -5e-4],
    "suite_probes": 100,
    "suite_taus": {},
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def load_config(path: str | None, overrides: dict) -> dict:
    config = dict(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(user) - set(DEFAULT_CONFIG))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        config.update(user)
    config.update(overrides)
    if config["method"] not in ("gcirs", "sepme", *BASELINE_KINDS):
        raise ConfigError(f"unknown method {config['method']!r}")
    if config["mode"] not in ("simultaneous", "separate", "iterative"):
        raise ConfigError(f"unknown mode {config['mode']!r}")
    if config["corr"] not in ("product", "cosine"):
        raise ConfigError(f"unknown corr mode {config['corr']!r}")
    missing = [n for n in config["forgotten"] if n not in config["concepts"]]
    if missing:
        raise ConfigError(f"forgotten concepts not in concept list: {missing}")
    return config


def _dims(config: dict) -> ModelDims:
    return ModelDims(
        data_dim=config["data_dim"],
        hidden_dim=config["hidden_dim"],
        token_dim=config["token_dim"],
        token_count=config["token_count"],
        attn_dim=config["attn_dim"],
        ffn_dim=config["ffn_dim"],
        blocks=config["blocks"],
    )


def _setup(config: dict):
    dims = _dims(config)
    data = make_default_dataset(config["concepts"], radius=config["radius"],
                                sigma=config["sigma"])
    concepts = build_concepts(config["concepts"], dims.token_count, dims.token_dim,
                              seed=config["seed"], scale=config["token_scale"])
    schedule = make_schedule(config["timesteps"], beta_min=config["beta_min"],
                             beta_max=config["beta_max"])
    return dims, data, concepts, schedule


def _erase_hyper(config: dict) -> EraseHyper:
    method = config["method"]
    lr = config["lr"]
    if lr is None:
        lr = TOY_LR.get(method, TOY_BASELINE_LR)
    dense_lr = config["dense_lr"]
    if dense_lr is None:
        dense_lr = TOY_LR["gcirs"]
    return EraseHyper(
        lr=lr,
        dense_lr=dense_lr,
        max_iters=config["max_iters"],
        tau=config["tau"],
        tau_overrides=config["tau_overrides"],
        alpha=config["alpha"],
        scale=config["beta"],
        reg_weight=config["reg_weight"],
        reg_mode=config["reg_mode"],
        corr_mode=config["corr"],
        batch=config["batch"],
        seed=config["seed"],
    )


def _echo_config(out: Path, config: dict) -> None:
    # the echo is itself a loadable config, so any run can be reproduced
    # by pointing --config at its own output directory
    with open(out / "config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dm_path(out: Path) -> Path:
    return out / "theta_dm.ckpt"


def _inc_path(out: Path, concept: str) -> Path:
    return out / f"inc_{concept}.ckpt"


def _load_dm(out: Path):
    path = _dm_path(out)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run train-dm first")
    return load_params(path)


def _subset_arg(config: dict) -> list[str]:
    raw = config["subset"]
    if raw is None:
        return list(config["forgotten"])
    if isinstance(raw, str):
        names = [s for s in raw.split(",") if s]
    else:
        names = list(raw)
    bad = [n for n in names if n not in config["forgotten"]]
    if bad:
        raise ConfigError(f"subset names without an increment: {bad}")
    return names


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_dm(config: dict, out: Path) -> int:
    dims, data, concepts, schedule = _setup(config)
    hyper = DmHyper(lr=config["dm_lr"], steps=config["dm_steps"],
                    batch=config["dm_batch"], seed=config["seed"])
    theta, trace = train_dm(data, concepts, schedule, dims, hyper)
    final = float(np.mean(trace[-100:])) if trace else float("nan")
    save_params(_dm_path(out), theta, {
        "seed": config["seed"],
        "dm_lr": config["dm_lr"],
        "dm_steps": config["dm_steps"],
        "dm_batch": config["dm_batch"],
        "concepts": config["concepts"],
        "final_loss": final,
    })
    print(f"trained denoiser for {config['dm_steps']} steps; "
          f"final loss {final:.6f}")
    print(f"wrote {_dm_path(out)}")
    return 0


def _report_meta(report, config: dict) -> dict:
    return {
        "method": report.method,
        "mode": report.mode,
        "concepts": list(report.concepts),
        "tau": report.tau,
        "alpha": report.alpha,
        "iters_run": report.iters_run,
        "stop_reason": report.stop_reason,
        "final_momentum": report.final_momentum,
        "delta_norm": report.delta_norm,
        "scope_layers": list(report.scope_layers),
        "notes": list(report.notes),
        "seed": config["seed"],
    }


def cmd_erase(config: dict, out: Path) -> int:
    _, data, concepts, schedule = _setup(config)
    theta, _ = _load_dm(out)
    method = config["method"]
    hyper = _erase_hyper(config)
    forgotten = config["forgotten"]

    if method == "sepme":
        try:
            eraser, reports = train_sepme(theta, forgotten, data, concepts,
                                          schedule, hyper, mode=config["mode"])
        except NullSpaceEmpty as e:
            raise NullSpaceEmpty(
                f"{e}; the preserved token matrices already span the embedding "
                "space, use fewer concepts or a wider token_dim"
            ) from e
        for name in eraser.concepts:
            inc = eraser.increment(name)
            # simultaneous mode has one joint report covering every concept
            report = next(r for r in reports if name in r.concepts)
            save_increment(_inc_path(out, name), inc, _report_meta(report, config))
        for report in reports:
            label = "_".join(report.concepts)
            write_trace_csv(out / f"trace_{label}.csv", report)
            with open(out / f"report_{label}.json", "w") as fh:
                json.dump(_report_meta(report, config), fh, indent=2, sort_keys=True)
                fh.write("\n")
            line = (f"{report.method} [{label}] iters={report.iters_run} "
                    f"stop={report.stop_reason} |delta|={report.delta_norm:.6g}")
            if report.notes:
                line += f" note: {report.notes[0]}"
            print(line)
        print(f"wrote {len(eraser.concepts)} increment file(s) to {out}")
        return 0

    label = "_".join(forgotten)
    if method == "gcirs":
        deltas, report = train_gcirs(theta, forgotten, data, concepts, schedule, hyper)
    else:
        anchors = config["anchors"]
        if method == "abconcept" and not anchors:
            raise ConfigError("abconcept needs an anchors mapping in the config")
        deltas, report = train_baseline(method, theta, forgotten, data, concepts,
                                        schedule, hyper, iters=config["baseline_iters"],
                                        anchors=anchors, esd_eta=config["esd_eta"])
    inc = WeightIncrement(concept=label, kind="dense",
                          layers={k: v.copy() for k, v in deltas.items()})
    save_increment(_inc_path(out, label), inc, _report_meta(report, config))
    write_trace_csv(out / f"trace_{label}.csv", report)
    with open(out / f"report_{label}.json", "w") as fh:
        json.dump(_report_meta(report, config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{report.method} [{label}] iters={report.iters_run} "
          f"stop={report.stop_reason} |delta|={report.delta_norm:.6g}")
    print(f"wrote {_inc_path(out, label)}")
    return 0


def _load_increments(config: dict, out: Path) -> tuple[list[WeightIncrement], bool]:
    """Per-concept increments when present, else one joined dense increment.

    The dense fallback covers runs of the broad fine-tuning method and the
    baselines, which write a single non-separable increment file.
    """
    per = [_inc_path(out, n) for n in config["forgotten"]]
    if all(p.exists() for p in per):
        return [load_increment(p)[0] for p in per], False
    joined = _inc_path(out, "_".join(config["forgotten"]))
    if joined.exists():
        return [load_increment(joined)[0]], True
    missing = next(p for p in per if not p.exists())
    raise FileNotFoundError(f"{missing} not found; run erase first")


def _edited_name(subset: list[str], config: dict) -> str:
    canonical = [n for n in config["forgotten"] if n in subset]
    return "edited_" + ("-".join(canonical) if canonical else "base") + ".ckpt"


def cmd_compose(config: dict, out: Path) -> int:
    theta, _ = _load_dm(out)
    subset = _subset_arg(config)
    incs, dense = _load_increments(config, out)
    if dense and subset and set(subset) != set(config["forgotten"]):
        raise ConfigError(
            "this run produced one dense increment; compose the full "
            "forgotten set or the empty subset"
        )
    eraser = EraserSet(theta)
    for inc in incs:
        eraser.add(inc)
    edited = eraser.apply(eraser.concepts if (dense and subset) else subset)
    path = out / _edited_name(subset, config)
    save_params(path, edited, {
        "seed": config["seed"],
        "subset": sorted(subset),
        "base": _dm_path(out).name,
    })
    print(f"wrote {path}")
    return 0


def _fit_classifier(theta, concepts, schedule, config: dict):
    try:
        return train_classifier(theta, concepts, schedule,
                                n_per_concept=config["classifier_n"],
                                seed=config["classifier_seed"])
    except ValueError as e:
        # an unusable generative model is a run failure, not a config mistake
        raise NumericalError(str(e)) from e


def cmd_evaluate(config: dict, out: Path) -> int:
    _, _, concepts, schedule = _setup(config)
    theta, dm_meta = _load_dm(out)
    subset = _subset_arg(config)
    edited_path = out / _edited_name(subset, config)
    if not edited_path.exists():
        raise FileNotFoundError(f"{edited_path} not found; run compose first")
    edited, _ = load_params(edited_path)
    classifier = _fit_classifier(theta, concepts, schedule, config)
    report = evaluate(edited, theta, concepts, schedule, classifier,
                      n_per_concept=config["eval_n"], seed=config["eval_seed"])
    write_eval_csv(out / "eval.csv", report)
    warnings = []
    if dm_meta.get("seed") != config["classifier_seed"]:
        warnings.append(
            "classifier seed differs from the model's training seed; "
            "ACC baselines may not line up with other runs"
        )
    with open(out / "eval_meta.json", "w") as fh:
        json.dump({
            "edited": edited_path.name,
            "classifier_holdout_accuracy": classifier.holdout_accuracy,
            "classifier_seed": config["classifier_seed"],
            "eval_seed": config["eval_seed"],
            "n_per_concept": config["eval_n"],
            "delta_norm": report.delta_norm,
            "warnings": warnings,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in report.rows:
        print(f"{row.name}: acc {row.acc_before:.3f} -> {row.acc_after:.3f} "
              f"distance {row.distance:.4f} corr {row.corr:.4f}")
    print(f"|delta| = {report.delta_norm:.6g}; wrote {out / 'eval.csv'}")
    return 0


def cmd_ablate_tau(config: dict, out: Path) -> int:
    _, data, concepts, schedule = _setup(config)
    theta, _ = _load_dm(out)
    hyper = _erase_hyper(config)
    classifier = _fit_classifier(theta, concepts, schedule, config)
    rows = ablate_tau(config["ablate_taus"], theta, config["forgotten"], data,
                      concepts, schedule, hyper, classifier,
                      n_per_concept=config["eval_n"],
                      eval_seed=config["eval_seed"], mode=config["mode"])
    write_ablation_csv(out / "ablation.csv", rows)
    for r in rows:
        print(f"tau={r.tau:g}: iters={r.iters_run} |delta|={r.delta_norm:.6g} "
              f"erased_acc={r.erased_acc:.3f} preserved_acc={r.preserved_acc:.3f}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_suite(config: dict, out: Path) -> int:
    _, _, concepts, schedule = _setup(config)
    theta, _ = _load_dm(out)
    incs, dense = _load_increments(config, out)
    if dense:
        raise ConfigError(
            "separability checks need one increment per concept; rerun "
            "erase with method=sepme"
        )
    eraser = EraserSet(theta)
    for inc in incs:
        eraser.add(inc)
    result = separability_suite(eraser, concepts, schedule,
                                probes=config["suite_probes"],
                                taus=config["suite_taus"], seed=config["seed"])
    write_subsets_csv(out / "subsets.csv", result)
    failures = result.failures()
    print(f"{len(result.cells)} checks, {len(failures)} failed; "
          f"wrote {out / 'subsets.csv'}")
    for cell in failures:
        label = "+".join(cell.subset) or "(empty)"
        detail = cell.note or f"value {cell.value:.6g} > bound {cell.bound:.6g}"
        print(f"  FAIL subset={label} concept={cell.concept} "
              f"check={cell.check}: {detail}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepme",
        description="separable multi-concept erasure on a toy diffusion model",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train-dm", "train the toy denoiser"),
        ("erase", "train erasure increments against a saved model"),
        ("compose", "apply a subset of increments and save the edited model"),
        ("evaluate", "classifier accuracy and distance metrics for an edited model"),
        ("ablate-tau", "erase + evaluate across stopping thresholds"),
        ("suite", "exhaustive subset separability checks"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (flat schema)")
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--method",
                       choices=["gcirs", "sepme", *BASELINE_KINDS])
        p.add_argument("--mode",
                       choices=["simultaneous", "separate", "iterative"])
        p.add_argument("--subset",
                       help="comma-separated concepts, empty string for none")
        p.add_argument("--tau", type=float)
        p.add_argument("--corr", choices=["product", "cosine"])
        p.add_argument("--iters", type=int, help="override max_iters")
    return parser


_COMMANDS = {
    "train-dm": cmd_train_dm,
    "erase": cmd_erase,
    "compose": cmd_compose,
    "evaluate": cmd_evaluate,
    "ablate-tau": cmd_ablate_tau,
    "suite": cmd_suite,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.method is not None:
        overrides["method"] = args.method
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.subset is not None:
        overrides["subset"] = args.subset
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.corr is not None:
        overrides["corr"] = args.corr
    if args.iters is not None:
        overrides["max_iters"] = args.iters
    try:
        config = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(out, config)
        return _COMMANDS[args.command](config, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericalError, NullSpaceEmpty) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (OSError, CheckpointFormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except KeyError as e:
        # increments built against a different model geometry
        print(f"i/o error: incompatible files: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        # library-level validation of values the config let through
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
