"""Experiment CLI: compose the library into reproducible pipeline runs.

Subcommands: pretrain, self-analyze, distill, evaluate, sweep, transfer,
noise. Every run gets its own directory holding a resolved config echo,
per-epoch CSV metrics, emitted checkpoints, and a summary JSON written
last (atomically), so completed run directories are never mutated again.
Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, state_checksums
from .config import ExperimentConfig, augmenter_from, dataset_kwargs, load_config, sweep_grid
from .data import load_dataset
from .distill import (
    DistillScheme,
    HOOKS,
    early_loss_stability,
    make_hook,
    run_distillation,
)
from .errors import ConfigError, InvalidArgumentError, NonFiniteLossError
from .evaluation import (
    CKA_ESTIMATOR_NOTE,
    DEFAULT_NOISE_GRID,
    cka_similarity,
    correlation_matrix_difference,
    knowledge_similarity,
    noise_robustness_sweep,
    top1_accuracy,
    transfer_finetune,
)
from .models import (
    GranularitySpec,
    PlainModel,
    StudentBundle,
    TeacherBundle,
    attach_branches,
    build_plain_model,
    build_student,
    forward_student,
    forward_teacher,
    model_from_checkpoint,
    plain_to_checkpoint,
    strip_encoders,
    student_to_checkpoint,
    teacher_to_checkpoint,
    validate_spec,
)
from .self_analyze import SelfAnalyzeConfig, branch_agreement, run_self_analysis
from .train import train_classifier, write_metrics_csv
from .version import code_version

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    os.replace(tmp, path)


def _provenance(cfg: ExperimentConfig, command: str, seeds) -> dict:
    return {
        "command": command,
        "config_hash": cfg.config_hash,
        "seeds": list(seeds),
        "code_version": code_version(),
    }


def _make_run_dir(cfg: ExperimentConfig, command: str, seed=None) -> Path:
    base = f"{command}_{cfg.config_hash[:8]}"
    if seed is not None:
        base += f"_s{seed}"
    run_dir = cfg.out_dir / base
    counter = 1
    while run_dir.exists():
        counter += 1
        run_dir = cfg.out_dir / f"{base}-{counter}"
    run_dir.mkdir(parents=True)
    echo = {"config": cfg.raw, "resolved": _provenance(cfg, command, cfg.seeds)}
    _write_json_atomic(run_dir / "config.json", echo)
    return run_dir


def _load_splits(cfg: ExperimentConfig) -> dict:
    name, kwargs = dataset_kwargs(cfg.dataset)
    kwargs.setdefault("seed", 0)
    normalization = cfg.dataset.get("normalization")
    if name in ("cifar10", "cifar100"):
        kwargs.pop("classes", None)
        return load_dataset(name, normalization=normalization, **kwargs)
    return load_dataset(name, **kwargs)


def _artifact_path(cfg: ExperimentConfig, flag_value, key: str, seed: int) -> Path:
    template = flag_value or cfg.artifacts.get(key)
    if not template:
        raise FileNotFoundError(
            f"no {key} checkpoint given; pass --{key} or set [artifacts].{key}"
        )
    return Path(str(template).format(seed=seed))


def _load_model(path: Path):
    return model_from_checkpoint(load_checkpoint(path))


def _expect_kind(model, kinds, path: Path):
    if not isinstance(model, kinds):
        names = ", ".join(k.__name__ for k in kinds)
        raise InvalidArgumentError(f"{path}: expected a {names} checkpoint, got {type(model).__name__}")
    return model


# --- subcommands -------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    splits = _load_splits(cfg)
    schedule = cfg.schedule("pretrain")
    for seed in cfg.seeds:
        run_dir = _make_run_dir(cfg, "pretrain", seed)
        model = build_plain_model(
            cfg.teacher["arch"],
            splits["train"].in_shape,
            cfg.teacher["widths"],
            splits["train"].class_count,
            seed,
        )
        records = train_classifier(
            model, splits["train"], schedule, seed, splits["val"],
            augment_fn=augmenter_from(cfg.dataset),
        )
        write_metrics_csv(run_dir / "metrics.csv", records)
        ckpt = plain_to_checkpoint(model, seed, extra={"config_hash": cfg.config_hash})
        ckpt_path = run_dir / "teacher.ckpt"
        save_checkpoint(ckpt, ckpt_path)
        declared = cfg.teacher.get("checkpoint") or cfg.artifacts.get("teacher")
        if declared:
            save_checkpoint(ckpt, Path(str(declared).format(seed=seed)))
        summary = _provenance(cfg, "pretrain", [seed])
        summary.update(
            {
                "checkpoint": str(ckpt_path),
                "test_accuracy": top1_accuracy(model, splits["test"]),
                "final_train_accuracy": records[-1]["train_acc"],
            }
        )
        _write_json_atomic(run_dir / "summary.json", summary)
        print(f"pretrain seed {seed}: test acc {summary['test_accuracy']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_self_analyze(args) -> int:
    cfg = _load_cfg(args)
    splits = _load_splits(cfg)
    schedule = cfg.schedule("self_analyze")
    for seed in cfg.seeds:
        teacher_path = _artifact_path(cfg, args.teacher, "teacher", seed)
        teacher = _expect_kind(_load_model(teacher_path), (PlainModel,), teacher_path)
        run_dir = _make_run_dir(cfg, "self-analyze", seed)
        bundle = attach_branches(teacher, cfg.spec, seed)
        augment_fn = augmenter_from(cfg.dataset)
        sa_cfg = SelfAnalyzeConfig(
            schedule=schedule,
            tau_akb=cfg.tau_akb,
            tau_dkb=cfg.tau_dkb,
            seed=seed,
            cache_supervision=augment_fn is None,
        )
        bundle, records = run_self_analysis(bundle, splits["train"], sa_cfg, augment_fn=augment_fn)
        write_metrics_csv(run_dir / "metrics.csv", records)
        agreement = branch_agreement(bundle, splits["val"])
        _write_json_atomic(run_dir / "branch_agreement.json", agreement)
        temps = {"tau_akb": cfg.tau_akb, "tau_dkb": cfg.tau_dkb}
        ckpt = teacher_to_checkpoint(
            bundle, seed, temperatures=temps, extra={"config_hash": cfg.config_hash}
        )
        save_checkpoint(ckpt, run_dir / "t_sa.ckpt")
        summary = _provenance(cfg, "self-analyze", [seed])
        summary.update(
            {
                "checkpoint": str(run_dir / "t_sa.ckpt"),
                "teacher_checkpoint": str(teacher_path),
                "temperatures": temps,
                "branch_agreement": agreement,
                "final_losses": {
                    k: records[-1][k] for k in ("l_ga_akb", "l_ce_akb", "l_ga_dkb", "l_ce_dkb")
                },
            }
        )
        _write_json_atomic(run_dir / "summary.json", summary)
        print(
            f"self-analyze seed {seed}: agreement akb {agreement['akb_agreement']:.3f} "
            f"dkb {agreement['dkb_agreement']:.3f} -> {run_dir}"
        )
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    splits = _load_splits(cfg)
    schedule = cfg.schedule("distill")
    hook = make_hook(cfg.hook_name, **cfg.hook_kwargs)
    for seed in cfg.seeds:
        tsa_path = _artifact_path(cfg, args.tsa, "tsa", seed)
        t_sa = _expect_kind(_load_model(tsa_path), (TeacherBundle,), tsa_path)
        run_dir = _make_run_dir(cfg, "distill", seed)
        student = build_student(
            cfg.student["arch"],
            splits["train"].in_shape,
            cfg.student["widths"],
            t_sa.spec,
            seed,
        )
        student, records = run_distillation(
            t_sa,
            student,
            cfg.scheme,
            cfg.distill_temps,
            hook,
            schedule,
            splits["train"],
            splits["val"],
            seed=seed,
            term_weights=cfg.term_weights,
            augment_fn=augmenter_from(cfg.dataset),
        )
        write_metrics_csv(run_dir / "metrics.csv", records)
        temps = {
            "tau_ak": cfg.distill_temps.tau_ak,
            "tau_nk": cfg.distill_temps.tau_nk,
            "tau_dk": cfg.distill_temps.tau_dk,
        }
        save_checkpoint(
            student_to_checkpoint(student, seed, temps, extra={"config_hash": cfg.config_hash}),
            run_dir / "student.ckpt",
        )
        stripped = strip_encoders(student)
        save_checkpoint(
            plain_to_checkpoint(stripped, seed, extra={"config_hash": cfg.config_hash}),
            run_dir / "student_stripped.ckpt",
        )
        val_losses = [r["val_loss"] for r in records]
        decomposition = {
            k: records[-1][k] for k in records[-1] if k.startswith("loss_")
        }
        summary = _provenance(cfg, "distill", [seed])
        summary.update(
            {
                "scheme": cfg.scheme.value,
                "hook": cfg.hook_name,
                "tsa_checkpoint": str(tsa_path),
                "temperatures": temps,
                "loss_decomposition": decomposition,
                "early_loss_stability": early_loss_stability(val_losses, 0.25),
                "stability_fraction": 0.25,
                "val_accuracy": records[-1]["val_acc"],
                "test_accuracy": top1_accuracy(student, splits["test"]),
                "stripped_test_accuracy": top1_accuracy(stripped, splits["test"]),
            }
        )
        _write_json_atomic(run_dir / "summary.json", summary)
        print(
            f"distill[{cfg.scheme.value}/{cfg.hook_name}] seed {seed}: "
            f"test acc {summary['test_accuracy']:.4f} -> {run_dir}"
        )
    return EXIT_OK


def _head_outputs(model, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Representation and per-head outputs for similarity analyses."""
    feats, heads = [], {"ak": [], "nk": [], "dk": []}
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        feats.append(model.backbone.forward(x))
        if isinstance(model, TeacherBundle):
            outs = forward_teacher(model, x)
        elif isinstance(model, StudentBundle):
            outs = forward_student(model, x)
        else:
            outs = None
        if outs is None:
            heads["nk"].append(model.classifier.forward(feats[-1]))
        else:
            heads["ak"].append(outs.f_ak)
            heads["nk"].append(outs.f_nk)
            heads["dk"].append(outs.f_dk)
    result = {"repr": np.concatenate(feats)}
    for key, chunks in heads.items():
        if chunks:
            result[key] = np.concatenate(chunks)
    return result


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    splits = _load_splits(cfg)
    eval_split = splits["test"]
    sample_cap = int(cfg.evaluate.get("samples", 512))
    paths = [Path(p) for p in args.checkpoints]
    if len(paths) == 1:
        paths = [paths[0], paths[0]]
    teacher = _load_model(paths[0])
    student = _load_model(paths[1])
    run_dir = _make_run_dir(cfg, "evaluate")

    images = eval_split.images[:sample_cap]
    t_heads = _head_outputs(teacher, images)
    s_heads = _head_outputs(student, images)

    report = _provenance(cfg, "evaluate", cfg.seeds)
    report["checkpoints"] = {"teacher": str(paths[0]), "student": str(paths[1])}
    report["samples"] = int(images.shape[0])
    report["accuracy"] = {
        "teacher": top1_accuracy(teacher, eval_split),
        "student": top1_accuracy(student, eval_split),
    }

    similarity = {}
    for head in ("ak", "nk", "dk"):
        if head not in t_heads or head not in s_heads:
            continue
        if t_heads[head].shape != s_heads[head].shape:
            raise InvalidArgumentError(
                f"head {head!r}: teacher outputs {t_heads[head].shape} vs "
                f"student outputs {s_heads[head].shape}"
            )
        rep = knowledge_similarity(t_heads[head], s_heads[head])
        similarity[head] = {
            "ssim": rep.ssim,
            "cosine": rep.cosine,
            "pearson": rep.pearson,
            "l2": rep.l2,
            "skipped_cosine": rep.skipped_cosine,
            "skipped_pearson": rep.skipped_pearson,
        }
    report["knowledge_similarity"] = similarity

    cka = {}
    for layer in ("repr", "ak", "nk", "dk"):
        if layer not in t_heads or layer not in s_heads:
            continue
        cka[layer] = {
            "linear": cka_similarity(t_heads[layer], s_heads[layer], kernel="linear"),
            "rbf": cka_similarity(t_heads[layer], s_heads[layer], kernel="rbf"),
        }
    report["cka"] = cka
    report["cka_estimator"] = CKA_ESTIMATOR_NOTE

    diff = correlation_matrix_difference(t_heads["nk"], s_heads["nk"])
    np.savetxt(run_dir / "correlation_difference.csv", diff, delimiter=",")
    report["correlation_difference_max_abs"] = float(np.abs(diff).max())

    sigmas = tuple(cfg.evaluate.get("noise_sigmas", DEFAULT_NOISE_GRID))
    curve = noise_robustness_sweep(student, eval_split, sigmas, seed=cfg.seeds[0])
    _write_noise_csv(run_dir / "noise_curve.csv", curve)
    report["noise_variance"] = curve.variance

    export = int(getattr(args, "export_heads", 0) or 0)
    if export > 0:
        heads_dir = run_dir / "heads"
        heads_dir.mkdir()
        for label, outs in (("teacher", t_heads), ("student", s_heads)):
            for key, arr in outs.items():
                np.savetxt(heads_dir / f"{label}_{key}.csv", arr[:export], delimiter=",")
        report["exported_heads"] = export

    _write_json_atomic(run_dir / "report.json", report)
    print(f"evaluate: report -> {run_dir / 'report.json'}")
    return EXIT_OK


def _write_noise_csv(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "accuracy", "accuracy_delta_points"])
        for sigma, acc, delta in zip(curve.sigmas, curve.accuracies, curve.accuracy_delta):
            writer.writerow([sigma, acc, delta])


def cmd_noise(args) -> int:
    cfg = _load_cfg(args)
    splits = _load_splits(cfg)
    path = Path(args.checkpoint)
    model = _load_model(path)
    run_dir = _make_run_dir(cfg, "noise")
    sigmas = tuple(cfg.evaluate.get("noise_sigmas", DEFAULT_NOISE_GRID))
    curve = noise_robustness_sweep(model, splits["test"], sigmas, seed=cfg.seeds[0])
    _write_noise_csv(run_dir / "noise_curve.csv", curve)
    summary = _provenance(cfg, "noise", cfg.seeds)
    summary.update(
        {
            "checkpoint": str(path),
            "sigmas": list(curve.sigmas),
            "accuracy_delta_points": list(curve.accuracy_delta),
            "variance": curve.variance,
        }
    )
    _write_json_atomic(run_dir / "summary.json", summary)
    print(f"noise: {len(curve.sigmas)} points, delta variance {curve.variance:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    splits = _load_splits(cfg)
    axis = args.axis
    points = sweep_grid(cfg, axis)
    # grid accuracies are averaged over two runs unless the config says otherwise
    sweep_seeds = [int(s) for s in cfg.sweep.get("seeds", [0, 1])]

    valid, rejected = [], []
    for point in points:
        if axis == "dims":
            candidate = GranularitySpec(
                dim_ak=point["dim_ak"],
                num_classes=cfg.spec.num_classes,
                dim_dk=point["dim_dk"],
            )
            problem = validate_spec(candidate)
        else:
            problem = None
            if not (point["tau_akb"] > 0 and point["tau_dkb"] > 0):
                problem = f"temperatures must be positive, got {point}"
            elif not point["tau_akb"] < point["tau_dkb"]:
                problem = (
                    f"tau_akb must be strictly less than tau_dkb, got "
                    f"({point['tau_akb']}, {point['tau_dkb']})"
                )
        if problem is None:
            valid.append(point)
        else:
            rejected.append({"point": point, "problem": problem})
    if not valid:
        raise ConfigError(
            [f"sweep axis {axis!r}: every grid point is invalid"]
            + [r["problem"] for r in rejected]
        )

    run_dir = _make_run_dir(cfg, "sweep")
    hook = make_hook(cfg.hook_name, **cfg.hook_kwargs)
    sa_schedule = cfg.schedule("self_analyze")
    distill_schedule = cfg.schedule("distill")

    rows = []
    for index, point in enumerate(valid):
        spec = GranularitySpec(
            dim_ak=point.get("dim_ak", cfg.spec.dim_ak),
            num_classes=cfg.spec.num_classes,
            dim_dk=point.get("dim_dk", cfg.spec.dim_dk),
        )
        tau_akb = point.get("tau_akb", cfg.tau_akb)
        tau_dkb = point.get("tau_dkb", cfg.tau_dkb)
        accs = []
        for seed in sweep_seeds:
            teacher_path = _artifact_path(cfg, args.teacher, "teacher", seed)
            teacher = _expect_kind(_load_model(teacher_path), (PlainModel,), teacher_path)
            bundle = attach_branches(teacher, spec, seed)
            sa_cfg = SelfAnalyzeConfig(
                schedule=sa_schedule, tau_akb=tau_akb, tau_dkb=tau_dkb,
                seed=seed, cache_supervision=True,
            )
            run_self_analysis(bundle, splits["train"], sa_cfg)
            student = build_student(
                cfg.student["arch"], splits["train"].in_shape, cfg.student["widths"], spec, seed
            )
            temps = type(cfg.distill_temps)(
                tau_ak=tau_akb, tau_nk=cfg.distill_temps.tau_nk, tau_dk=tau_dkb
            )
            run_distillation(
                bundle, student, cfg.scheme, temps, hook, distill_schedule,
                splits["train"], None, seed=seed, term_weights=cfg.term_weights,
            )
            accs.append(top1_accuracy(student, splits["test"]))
        row = dict(point)
        row["mean_accuracy"] = float(np.mean(accs))
        for seed, acc in zip(sweep_seeds, accs):
            row[f"acc_seed{seed}"] = acc
        rows.append(row)
        print(f"sweep point {index + 1}/{len(valid)} {point}: mean acc {row['mean_accuracy']:.4f}")

    write_metrics_csv(run_dir / "sweep_summary.csv", rows)
    summary = _provenance(cfg, "sweep", sweep_seeds)
    summary.update(
        {
            "axis": axis,
            "valid_points": len(valid),
            "rejected_points": rejected,
            "scheme": cfg.scheme.value,
            "hook": cfg.hook_name,
        }
    )
    _write_json_atomic(run_dir / "summary.json", summary)
    print(f"sweep: {len(valid)} points -> {run_dir}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _load_cfg(args)
    student_path = _artifact_path(cfg, args.student, "student", cfg.seeds[0])
    student = _load_model(student_path)
    target_table = dict(cfg.transfer.get("dataset") or {})
    if not target_table:
        raise ConfigError(["[transfer.dataset]: missing target dataset table"])
    name, kwargs = dataset_kwargs(target_table)
    target = load_dataset(name, **kwargs)
    schedule = cfg.schedule("transfer")
    run_dir = _make_run_dir(cfg, "transfer")

    before = state_checksums({"backbone": dict(student.state()["backbone"])})["backbone"]
    target_acc = transfer_finetune(
        student, target["train"], target["test"], schedule, seed=cfg.seeds[0]
    )
    after = state_checksums({"backbone": dict(student.state()["backbone"])})["backbone"]

    report = _provenance(cfg, "transfer", cfg.seeds)
    report.update(
        {
            "student_checkpoint": str(student_path),
            "target_dataset": target_table,
            "target_accuracy": target_acc,
            "backbone_checksum_before": before,
            "backbone_checksum_after": after,
            "backbone_unchanged": before == after,
        }
    )
    try:
        source = _load_splits(cfg)
        report["source_accuracy"] = top1_accuracy(student, source["test"])
    except Exception:
        report["source_accuracy"] = None
    _write_json_atomic(run_dir / "transfer_report.json", report)
    print(f"transfer: target acc {target_acc:.4f}, backbone unchanged: {before == after}")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------


def _load_cfg(args) -> ExperimentConfig:
    overrides = {
        "seeds": args.seed or None,
        "out": args.out,
        "scale": args.scale,
        "scheme": getattr(args, "scheme", None),
        "hook": getattr(args, "hook", None),
    }
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgkd",
        description="Multi-granularity knowledge distillation experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scheme_flags=False):
        p.add_argument("--config", "-c", required=True, help="TOML experiment config")
        p.add_argument("--seed", type=int, action="append", help="override [run].seeds (repeatable)")
        p.add_argument("--out", help="override [run].out output directory")
        p.add_argument("--scale", type=float, help="override [run].scale schedule multiplier")
        if scheme_flags:
            p.add_argument("--scheme", choices=[m.value for m in DistillScheme])
            p.add_argument("--hook", choices=sorted(HOOKS))

    p = sub.add_parser("pretrain", help="train a base teacher network from scratch")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("self-analyze", help="attach and train granularity branches on a teacher")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint ({seed} placeholder allowed)")
    p.set_defaults(func=cmd_self_analyze)

    p = sub.add_parser("distill", help="distill a student under a self-analyzed teacher")
    common(p, scheme_flags=True)
    p.add_argument("--tsa", help="self-analyzed teacher checkpoint ({seed} placeholder allowed)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="similarity and robustness reports for checkpoints")
    common(p)
    p.add_argument("checkpoints", nargs="+", metavar="CKPT",
                   help="one checkpoint (self comparison) or teacher and student")
    p.add_argument("--export-heads", type=int, default=0,
                   help="also dump the first N per-head outputs as CSV for external tools")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid sweep over encoder dims or temperatures")
    common(p, scheme_flags=True)
    p.add_argument("--axis", choices=("dims", "temperatures"), required=True)
    p.add_argument("--teacher", help="teacher checkpoint ({seed} placeholder allowed)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("transfer", help="frozen-backbone fine-tuning on a target dataset")
    common(p)
    p.add_argument("--student", help="student checkpoint to transfer")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("noise", help="Gaussian-noise robustness sweep for a checkpoint")
    common(p)
    p.add_argument("checkpoint", metavar="CKPT")
    p.set_defaults(func=cmd_noise)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
