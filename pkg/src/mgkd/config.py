"""Experiment configuration: TOML parsing, validation, and resolution.

One config file drives the whole pipeline; each subcommand reads the
sections it needs. Validation is total -- every problem is collected and
reported before any compute starts.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .distill import DEFAULT_TAU_NK, HOOKS, DistillScheme, DistillTemperatures
from .errors import ConfigError, InvalidArgumentError
from .models import GranularitySpec, validate_spec
from .nn import BACKBONE_KINDS
from .self_analyze import DEFAULT_TAU_AKB, DEFAULT_TAU_DKB
from .train import TrainSchedule

# Grids used when a sweep section does not provide its own temperature axis.
DEFAULT_AK_TAU_GRID = (1.5, 2.0, 2.5, 3.0, 4.0)
DEFAULT_DK_TAU_GRID = (4.0, 6.0, 8.0, 10.0, 15.0)

DEFAULT_SCALE = 1.0 / 6.0

_SCHEDULE_DEFAULTS = {
    # Full-scale plans; desk runs shrink them through [run].scale.
    "pretrain": dict(epochs=10, initial_lr=0.02, milestones=(7,), batch_size=64),
    "self_analyze": dict(epochs=60, initial_lr=0.02, milestones=(30, 45), batch_size=64),
    "distill": dict(epochs=240, initial_lr=0.005, milestones=(150, 180, 210), batch_size=64),
    "transfer": dict(epochs=30, initial_lr=0.1, milestones=(20,), batch_size=64),
}


@dataclass
class ExperimentConfig:
    raw: dict
    path: Path
    dataset: dict
    teacher: dict
    student: dict
    spec: GranularitySpec
    tau_akb: float
    tau_dkb: float
    scheme: DistillScheme
    hook_name: str
    hook_kwargs: dict
    distill_temps: DistillTemperatures
    term_weights: dict
    schedules: dict[str, TrainSchedule]
    seeds: list[int]
    out_dir: Path
    scale: float
    evaluate: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, default=str).encode()
        ).hexdigest()

    def schedule(self, phase: str, scaled: bool = True) -> TrainSchedule:
        sched = self.schedules[phase]
        # Pretraining and transfer are desk-native; only the two main
        # phases follow the full-scale plan and shrink by [run].scale.
        if scaled and phase in ("self_analyze", "distill"):
            return sched.scaled(self.scale)
        return sched


def _get_table(raw: dict, name: str, problems: list) -> dict:
    table = raw.get(name, {})
    if not isinstance(table, dict):
        problems.append(f"[{name}]: expected a table, got {type(table).__name__}")
        return {}
    return dict(table)


def _build_schedule(name: str, table: dict, problems: list) -> TrainSchedule | None:
    merged = dict(_SCHEDULE_DEFAULTS[name])
    merged.update(table)
    merged["milestones"] = tuple(merged.get("milestones", ()))
    try:
        return TrainSchedule(**merged)
    except (InvalidArgumentError, TypeError) as exc:
        problems.append(f"[schedule.{name}]: {exc}")
        return None


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse and fully validate a TOML experiment config.

    ``overrides`` lets CLI flags replace seeds / out / scale / scheme / hook
    before validation. Raises :class:`ConfigError` carrying every problem
    found.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: invalid TOML ({exc})"]) from exc

    overrides = overrides or {}
    problems: list[str] = []

    dataset = _get_table(raw, "dataset", problems)
    dataset.setdefault("name", "blobs")

    teacher = _get_table(raw, "teacher", problems)
    teacher.setdefault("arch", "conv")
    teacher.setdefault("widths", [16, 32, 64])
    student = _get_table(raw, "student", problems)
    student.setdefault("arch", "conv")
    student.setdefault("widths", [8, 16, 32])
    for label, section in (("teacher", teacher), ("student", student)):
        if section["arch"] not in BACKBONE_KINDS:
            problems.append(
                f"[{label}].arch: unknown backbone {section['arch']!r}; "
                f"valid kinds: {sorted(BACKBONE_KINDS)}"
            )

    gran = _get_table(raw, "granularity", problems)
    classes = int(dataset.get("classes", 10))
    spec = GranularitySpec(
        dim_ak=int(gran.get("dim_ak", max(2, classes // 2))),
        num_classes=classes,
        dim_dk=int(gran.get("dim_dk", classes * 2 + 4)),
    )
    spec_problem = validate_spec(spec)
    if spec_problem is not None:
        problems.append(f"[granularity]: {spec_problem}")

    tau_akb = float(gran.get("tau_akb", DEFAULT_TAU_AKB))
    tau_dkb = float(gran.get("tau_dkb", DEFAULT_TAU_DKB))
    if not (tau_akb > 0 and tau_dkb > 0):
        problems.append(f"[granularity]: temperatures must be positive, got ({tau_akb}, {tau_dkb})")
    elif not tau_akb < tau_dkb:
        problems.append(
            f"[granularity]: tau_akb must be strictly less than tau_dkb, got ({tau_akb}, {tau_dkb})"
        )

    scheme_table = _get_table(raw, "scheme", problems)
    scheme_name = overrides.get("scheme") or scheme_table.get("variant", "se")
    try:
        scheme = DistillScheme.parse(scheme_name)
    except InvalidArgumentError as exc:
        problems.append(f"[scheme].variant: {exc}")
        scheme = DistillScheme.SE

    hook_name = overrides.get("hook") or scheme_table.get("hook", "hkd")
    if hook_name not in HOOKS:
        problems.append(f"[scheme].hook: unknown hook {hook_name!r}; valid hooks: {sorted(HOOKS)}")
    hook_kwargs = {}
    if hook_name == "hkd":
        hook_kwargs["tau_nk"] = float(scheme_table.get("hook_tau", DEFAULT_TAU_NK))
        hook_kwargs["include_ce"] = bool(scheme_table.get("hook_include_ce", True))

    try:
        distill_temps = DistillTemperatures(
            tau_ak=float(scheme_table.get("tau_ak", tau_akb)),
            tau_nk=float(scheme_table.get("tau_nk", DEFAULT_TAU_NK)),
            tau_dk=float(scheme_table.get("tau_dk", tau_dkb)),
        )
    except InvalidArgumentError as exc:
        problems.append(f"[scheme]: {exc}")
        distill_temps = DistillTemperatures()

    term_weights = {
        key: float(scheme_table.get(f"weight_{key}", 1.0)) for key in ("ak", "nk", "dk", "en")
    }
    if any(w < 0 for w in term_weights.values()):
        problems.append(f"[scheme]: term weights must be nonnegative, got {term_weights}")

    sched_tables = _get_table(raw, "schedule", problems)
    schedules = {}
    for name in _SCHEDULE_DEFAULTS:
        table = sched_tables.get(name, {})
        if not isinstance(table, dict):
            problems.append(f"[schedule.{name}]: expected a table")
            table = {}
        built = _build_schedule(name, table, problems)
        if built is not None:
            schedules[name] = built

    run = _get_table(raw, "run", problems)
    seeds = overrides.get("seeds") or run.get("seeds", [0])
    if not isinstance(seeds, (list, tuple)) or not seeds:
        problems.append(f"[run].seeds: expected a non-empty list, got {seeds!r}")
        seeds = [0]
    seeds = [int(s) for s in seeds]
    out_dir = Path(overrides.get("out") or run.get("out", "runs"))
    scale_value = overrides.get("scale")
    if scale_value is None:
        scale_value = run.get("scale", DEFAULT_SCALE)
    scale = float(scale_value)
    if not (scale > 0):
        problems.append(f"[run].scale: must be positive, got {scale}")
        scale = DEFAULT_SCALE

    evaluate = _get_table(raw, "evaluate", problems)
    sweep = _get_table(raw, "sweep", problems)
    transfer = _get_table(raw, "transfer", problems)
    artifacts = _get_table(raw, "artifacts", problems)

    if problems:
        raise ConfigError(problems)

    return ExperimentConfig(
        raw=raw,
        path=path,
        dataset=dataset,
        teacher=teacher,
        student=student,
        spec=spec,
        tau_akb=tau_akb,
        tau_dkb=tau_dkb,
        scheme=scheme,
        hook_name=hook_name,
        hook_kwargs=hook_kwargs,
        distill_temps=distill_temps,
        term_weights=term_weights,
        schedules=schedules,
        seeds=seeds,
        out_dir=out_dir,
        scale=scale,
        evaluate=evaluate,
        sweep=sweep,
        transfer=transfer,
        artifacts=artifacts,
    )


def dataset_kwargs(table: dict) -> tuple[str, dict]:
    """Split a [dataset] table into the loader name and its kwargs."""
    table = dict(table)
    name = table.pop("name")
    table.pop("normalization", None)
    table.pop("augment", None)
    return name, table


def augmenter_from(table: dict):
    """Build the train-time crop/flip augmenter declared under
    [dataset].augment, or None when absent/disabled."""
    from .data import make_augmenter

    augment = table.get("augment")
    if not augment:
        return None
    if augment is True:
        return make_augmenter()
    return make_augmenter(
        pad=int(augment.get("pad", 2)), flip_prob=float(augment.get("flip", 0.5))
    )


def sweep_grid(cfg: ExperimentConfig, axis: str) -> list[dict]:
    """Expand the sweep axis into per-point parameter dicts (unvalidated)."""
    table = cfg.sweep
    if axis == "dims":
        ak_values = table.get("ak_dims")
        dk_values = table.get("dk_dims")
        if not ak_values or not dk_values:
            raise ConfigError(
                ["[sweep]: the dims axis needs ak_dims and dk_dims lists sized to the dataset"]
            )
        return [
            {"dim_ak": int(a), "dim_dk": int(d)} for a in ak_values for d in dk_values
        ]
    if axis == "temperatures":
        ak_values = table.get("ak_taus", DEFAULT_AK_TAU_GRID)
        dk_values = table.get("dk_taus", DEFAULT_DK_TAU_GRID)
        return [
            {"tau_akb": float(a), "tau_dkb": float(d)} for a in ak_values for d in dk_values
        ]
    raise ConfigError([f"unknown sweep axis {axis!r}; valid axes: dims, temperatures"])
