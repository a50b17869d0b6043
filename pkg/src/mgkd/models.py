"""Model assembly: granularity specs, teacher/student bundles, and forwards.

A bundle is a backbone plus a classifier plus two granularity encoders
(and, on the teacher side, the two adapters that align encoder outputs to
the class dimension). Parts carry stable names -- backbone, classifier,
ake, dke, ak_adapter, dk_adapter -- which are also the checkpoint keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from .errors import InvalidArgumentError
from .nn import Affine, build_backbone
from .version import code_version

TEACHER_FROZEN_PARTS = frozenset({"backbone", "classifier"})


@dataclass(frozen=True)
class GranularitySpec:
    """Head dimensions (dim_ak, num_classes, dim_dk) with the strict ordering
    dim_ak < num_classes < dim_dk."""

    dim_ak: int
    num_classes: int
    dim_dk: int

    def require_valid(self) -> None:
        problem = validate_spec(self)
        if problem is not None:
            raise InvalidArgumentError(problem)


def validate_spec(spec: GranularitySpec) -> Optional[str]:
    """Return None when the spec satisfies the ordering constraint, else a
    description naming the failed inequality."""
    for name in ("dim_ak", "num_classes", "dim_dk"):
        value = getattr(spec, name)
        if not isinstance(value, (int, np.integer)) or value <= 0:
            return f"{name} must be a positive integer, got {value!r}"
    if not spec.dim_ak < spec.num_classes:
        return f"dim_ak must be < num_classes, got {spec.dim_ak} >= {spec.num_classes}"
    if not spec.num_classes < spec.dim_dk:
        return f"num_classes must be < dim_dk, got {spec.num_classes} >= {spec.dim_dk}"
    return None


@dataclass
class GranularityOutputs:
    """Per-head logits for one batch. Branch outputs (f_akb/f_dkb) are
    present only when produced by a teacher bundle."""

    f_ak: np.ndarray
    f_nk: np.ndarray
    f_dk: np.ndarray
    f_akb: Optional[np.ndarray] = None
    f_dkb: Optional[np.ndarray] = None

    def head_map(self) -> dict[str, np.ndarray]:
        return {"ak": self.f_ak, "nk": self.f_nk, "dk": self.f_dk}

    def branch_map(self) -> dict[str, np.ndarray]:
        if self.f_akb is None or self.f_dkb is None:
            raise InvalidArgumentError("branch outputs are only available on teacher forwards")
        return {"akb": self.f_akb, "dkb": self.f_dkb}


def _state_of(parts: dict) -> dict[str, dict[str, np.ndarray]]:
    return {
        part_name: {name: p.value for name, p in part.params().items()}
        for part_name, part in parts.items()
    }


def _load_state_into(parts: dict, state: dict) -> None:
    for part_name, part in parts.items():
        params = part.params()
        saved = state.get(part_name)
        if saved is None:
            raise InvalidArgumentError(f"state is missing part {part_name!r}")
        for name, p in params.items():
            if name not in saved:
                raise InvalidArgumentError(f"state for {part_name!r} is missing {name!r}")
            if saved[name].shape != p.value.shape:
                raise InvalidArgumentError(
                    f"{part_name}.{name}: shape {saved[name].shape} != {p.value.shape}"
                )
            p.value = np.ascontiguousarray(saved[name], dtype=np.float32)


@dataclass
class PlainModel:
    """A deployable backbone + classifier pair."""

    backbone: object
    classifier: Affine

    def parts(self) -> dict[str, object]:
        return {"backbone": self.backbone, "classifier": self.classifier}

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return _state_of(self.parts())

    def load_state(self, state) -> None:
        _load_state_into(self.parts(), state)

    def native_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        chunks = []
        for start in range(0, images.shape[0], batch_size):
            feats = self.backbone.forward(images[start : start + batch_size])
            chunks.append(self.classifier.forward(feats))
        return np.concatenate(chunks, axis=0)


def build_plain_model(kind: str, in_shape, widths, num_classes: int, seed: int) -> PlainModel:
    """Freshly initialized backbone + classifier, reproducible from the seed."""
    rng = np.random.default_rng([int(seed), 0])
    backbone = build_backbone(kind, in_shape, widths, rng)
    classifier = Affine(backbone.feature_dim, num_classes, rng)
    return PlainModel(backbone=backbone, classifier=classifier)


@dataclass
class TeacherBundle:
    backbone: object
    classifier: Affine
    ake: Affine
    dke: Affine
    ak_adapter: Affine
    dk_adapter: Affine
    spec: GranularitySpec
    frozen_parts: frozenset = field(default_factory=lambda: TEACHER_FROZEN_PARTS)

    def parts(self) -> dict[str, object]:
        return {
            "backbone": self.backbone,
            "classifier": self.classifier,
            "ake": self.ake,
            "dke": self.dke,
            "ak_adapter": self.ak_adapter,
            "dk_adapter": self.dk_adapter,
        }

    def trainable_parts(self) -> dict[str, object]:
        return {k: v for k, v in self.parts().items() if k not in self.frozen_parts}

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return _state_of(self.parts())

    def load_state(self, state) -> None:
        _load_state_into(self.parts(), state)

    def native_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return PlainModel(self.backbone, self.classifier).native_logits(images, batch_size)


@dataclass
class StudentBundle:
    backbone: object
    classifier: Affine
    ake: Affine
    dke: Affine
    spec: GranularitySpec

    def parts(self) -> dict[str, object]:
        return {
            "backbone": self.backbone,
            "classifier": self.classifier,
            "ake": self.ake,
            "dke": self.dke,
        }

    def trainable_parts(self) -> dict[str, object]:
        return dict(self.parts())

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        return _state_of(self.parts())

    def load_state(self, state) -> None:
        _load_state_into(self.parts(), state)

    def native_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return PlainModel(self.backbone, self.classifier).native_logits(images, batch_size)


def attach_branches(teacher: PlainModel, spec: GranularitySpec, seed: int) -> TeacherBundle:
    """Attach freshly initialized encoder+adapter branches to a trained model.

    The backbone and classifier object references are carried over untouched
    and marked frozen; only the four branch layers are new. The same
    (seed, spec) always produces bit-identical branch parameters.
    """
    spec.require_valid()
    feature_dim = teacher.backbone.feature_dim
    if teacher.classifier.in_dim != feature_dim:
        raise InvalidArgumentError(
            f"classifier input dim {teacher.classifier.in_dim} != backbone feature dim {feature_dim}"
        )
    if teacher.classifier.out_dim != spec.num_classes:
        raise InvalidArgumentError(
            f"classifier output dim {teacher.classifier.out_dim} != num_classes {spec.num_classes}"
        )
    rng = np.random.default_rng([int(seed), 1])
    teacher.backbone.trainable = False
    teacher.classifier.trainable = False
    return TeacherBundle(
        backbone=teacher.backbone,
        classifier=teacher.classifier,
        ake=Affine(feature_dim, spec.dim_ak, rng),
        dke=Affine(feature_dim, spec.dim_dk, rng),
        ak_adapter=Affine(spec.dim_ak, spec.num_classes, rng),
        dk_adapter=Affine(spec.dim_dk, spec.num_classes, rng),
        spec=spec,
    )


def build_student(kind: str, in_shape, widths, spec: GranularitySpec, seed: int) -> StudentBundle:
    """Freshly initialized student with encoder heads sized to the spec."""
    spec.require_valid()
    rng = np.random.default_rng([int(seed), 2])
    backbone = build_backbone(kind, in_shape, widths, rng)
    return StudentBundle(
        backbone=backbone,
        classifier=Affine(backbone.feature_dim, spec.num_classes, rng),
        ake=Affine(backbone.feature_dim, spec.dim_ak, rng),
        dke=Affine(backbone.feature_dim, spec.dim_dk, rng),
        spec=spec,
    )


def forward_teacher(bundle: TeacherBundle, batch: np.ndarray, branch_grad: bool = False) -> GranularityOutputs:
    """All five teacher head outputs from one shared representation.

    The backbone and classifier always run without gradient caches (they
    are frozen in both training phases); the branch layers cache inputs
    only when ``branch_grad`` is set.
    """
    feats = bundle.backbone.forward(batch)
    f_nk = bundle.classifier.forward(feats)
    f_ak = bundle.ake.forward(feats, branch_grad)
    f_dk = bundle.dke.forward(feats, branch_grad)
    f_akb = bundle.ak_adapter.forward(f_ak, branch_grad)
    f_dkb = bundle.dk_adapter.forward(f_dk, branch_grad)
    return GranularityOutputs(f_ak=f_ak, f_nk=f_nk, f_dk=f_dk, f_akb=f_akb, f_dkb=f_dkb)


def forward_student(bundle: StudentBundle, batch: np.ndarray, need_grad: bool = False) -> GranularityOutputs:
    """The three student head outputs from one shared representation."""
    feats = bundle.backbone.forward(batch, need_grad)
    return GranularityOutputs(
        f_ak=bundle.ake.forward(feats, need_grad),
        f_nk=bundle.classifier.forward(feats, need_grad),
        f_dk=bundle.dke.forward(feats, need_grad),
    )


def strip_encoders(student: StudentBundle) -> PlainModel:
    """The deployable form of a trained student: backbone + classifier only.

    The encoders are parallel heads, never on the native path, so the
    stripped model's logits match the bundle's native head bit-exactly.
    """
    return PlainModel(backbone=student.backbone, classifier=student.classifier)


# --- checkpoint conversion -------------------------------------------------

def _base_metadata(seed, extra: Optional[dict]) -> dict:
    meta = {"seed": seed, "code_version": code_version()}
    if extra:
        meta.update(extra)
    return meta


def plain_to_checkpoint(model: PlainModel, seed: int, extra: Optional[dict] = None) -> ckpt_io.Checkpoint:
    meta = _base_metadata(seed, extra)
    meta.update(
        {
            "model_kind": "plain",
            "backbone": model.backbone.describe(),
            "num_classes": model.classifier.out_dim,
        }
    )
    return ckpt_io.Checkpoint(parts=model.state(), metadata=meta)


def teacher_to_checkpoint(bundle: TeacherBundle, seed: int, temperatures: Optional[dict] = None, extra: Optional[dict] = None) -> ckpt_io.Checkpoint:
    meta = _base_metadata(seed, extra)
    meta.update(
        {
            "model_kind": "teacher",
            "backbone": bundle.backbone.describe(),
            "spec": {
                "dim_ak": bundle.spec.dim_ak,
                "num_classes": bundle.spec.num_classes,
                "dim_dk": bundle.spec.dim_dk,
            },
            "temperatures": temperatures or {},
        }
    )
    return ckpt_io.Checkpoint(parts=bundle.state(), metadata=meta)


def student_to_checkpoint(bundle: StudentBundle, seed: int, temperatures: Optional[dict] = None, extra: Optional[dict] = None) -> ckpt_io.Checkpoint:
    meta = _base_metadata(seed, extra)
    meta.update(
        {
            "model_kind": "student",
            "backbone": bundle.backbone.describe(),
            "spec": {
                "dim_ak": bundle.spec.dim_ak,
                "num_classes": bundle.spec.num_classes,
                "dim_dk": bundle.spec.dim_dk,
            },
            "temperatures": temperatures or {},
        }
    )
    return ckpt_io.Checkpoint(parts=bundle.state(), metadata=meta)


def _affine_from_state(state: dict[str, np.ndarray], trainable: bool = True) -> Affine:
    return Affine.from_arrays(state["weight"], state["bias"], trainable)


def model_from_checkpoint(ckpt: ckpt_io.Checkpoint):
    """Rebuild a PlainModel / TeacherBundle / StudentBundle from a checkpoint."""
    meta = ckpt.metadata
    kind = meta.get("model_kind")
    desc = meta.get("backbone")
    if kind not in ("plain", "teacher", "student") or desc is None:
        raise InvalidArgumentError(f"checkpoint does not describe a known model kind: {kind!r}")
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    backbone = build_backbone(desc["kind"], desc["in_shape"], desc["widths"], rng)
    parts = ckpt.parts
    if kind == "plain":
        model = PlainModel(backbone=backbone, classifier=_affine_from_state(parts["classifier"]))
        model.load_state(parts)
        return model
    spec = GranularitySpec(**meta["spec"])
    if kind == "teacher":
        bundle = TeacherBundle(
            backbone=backbone,
            classifier=_affine_from_state(parts["classifier"], trainable=False),
            ake=_affine_from_state(parts["ake"]),
            dke=_affine_from_state(parts["dke"]),
            ak_adapter=_affine_from_state(parts["ak_adapter"]),
            dk_adapter=_affine_from_state(parts["dk_adapter"]),
            spec=spec,
        )
        bundle.backbone.trainable = False
    else:
        bundle = StudentBundle(
            backbone=backbone,
            classifier=_affine_from_state(parts["classifier"]),
            ake=_affine_from_state(parts["ake"]),
            dke=_affine_from_state(parts["dke"]),
            spec=spec,
        )
    bundle.load_state(parts)
    return bundle
