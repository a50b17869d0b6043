"""Representation and knowledge similarity between a teacher and a student.

Compares per-head outputs with the four knowledge-similarity metrics
(vectorized SSIM, cosine, Pearson, L2), computes linear and RBF CKA over
shared samples, and prints the class-correlation difference matrix built
from softmax probabilities.
"""

import numpy as np

from mgkd import (
    DistillScheme,
    DistillTemperatures,
    GranularitySpec,
    attach_branches,
    build_plain_model,
    build_student,
    cka_similarity,
    correlation_matrix_difference,
    forward_student,
    forward_teacher,
    hkd_reference_hook,
    knowledge_similarity,
    make_blobs_dataset,
    run_distillation,
    run_self_analysis,
)
from mgkd.self_analyze import SelfAnalyzeConfig
from mgkd.train import TrainSchedule, train_classifier

splits = make_blobs_dataset(seed=0, train_size=1000, val_size=200, test_size=400)
in_shape = splits["train"].in_shape
spec = GranularitySpec(dim_ak=6, num_classes=10, dim_dk=24)

print("training teacher and a distilled student ...")
teacher = build_plain_model("conv", in_shape, (16, 32, 64), 10, seed=0)
train_classifier(
    teacher, splits["train"], TrainSchedule(epochs=8, initial_lr=0.02, milestones=(6,)), seed=0
)
bundle = attach_branches(teacher, spec, seed=0)
run_self_analysis(
    bundle,
    splits["train"],
    SelfAnalyzeConfig(
        schedule=TrainSchedule(epochs=6, initial_lr=0.02), seed=0, cache_supervision=True
    ),
)
student = build_student("conv", in_shape, (8, 16, 32), spec, seed=1)
run_distillation(
    bundle, student, DistillScheme.SE, DistillTemperatures(), hkd_reference_hook(),
    TrainSchedule(epochs=10, initial_lr=0.005, milestones=(7,)),
    splits["train"], seed=1,
)

samples = splits["test"].images[:256]
t_outs = forward_teacher(bundle, samples)
s_outs = forward_student(student, samples)

print("\n=== per-head knowledge similarity (student vs teacher) ===")
print(f"{'head':>4} {'ssim':>8} {'cosine':>8} {'pearson':>8} {'l2':>8}")
for head in ("ak", "nk", "dk"):
    rep = knowledge_similarity(getattr(t_outs, f"f_{head}"), getattr(s_outs, f"f_{head}"))
    print(f"{head:>4} {rep.ssim:>8.4f} {rep.cosine:>8.4f} {rep.pearson:>8.4f} {rep.l2:>8.4f}")

print("\n=== CKA between teacher and student representations ===")
t_feats = bundle.backbone.forward(samples)
s_feats = student.backbone.forward(samples)
print("backbone features: linear", round(cka_similarity(t_feats, s_feats, "linear"), 4),
      "| rbf", round(cka_similarity(t_feats, s_feats, "rbf"), 4))
for head in ("ak", "nk", "dk"):
    t_h, s_h = getattr(t_outs, f"f_{head}"), getattr(s_outs, f"f_{head}")
    print(f"{head} head:          linear", round(cka_similarity(t_h, s_h, "linear"), 4),
          "| rbf", round(cka_similarity(t_h, s_h, "rbf"), 4))
print("(self-similarity sanity: teacher vs itself =",
      round(cka_similarity(t_feats, t_feats, "rbf"), 6), ")")

print("\n=== class-correlation difference (teacher minus student) ===")
diff = correlation_matrix_difference(t_outs.f_nk, s_outs.f_nk)
print("max |entry| =", round(float(np.abs(diff).max()), 4))
print(np.round(diff[:5, :5], 3), "... (top-left 5x5 block)")
print("entries near 0 mean the student captured the teacher's dark knowledge")
