import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mgkd import (
    GranularitySpec,
    attach_branches,
    build_plain_model,
    build_student,
    make_blobs_dataset,
    make_separable_dataset,
)
from mgkd.train import TrainSchedule, train_classifier

SPEC_SMALL = GranularitySpec(dim_ak=4, num_classes=10, dim_dk=16)


@pytest.fixture(scope="session")
def blobs_small():
    """Tiny image-classification fixture for structural tests."""
    return make_blobs_dataset(seed=0, train_size=320, val_size=96, test_size=160)


@pytest.fixture(scope="session")
def separable():
    return make_separable_dataset(seed=0)


@pytest.fixture(scope="session")
def conv_teacher(blobs_small):
    """A briefly trained conv teacher on the tiny fixture."""
    model = build_plain_model("conv", blobs_small["train"].in_shape, (8, 16, 16), 10, seed=0)
    train_classifier(
        model,
        blobs_small["train"],
        TrainSchedule(epochs=3, initial_lr=0.02, batch_size=64),
        seed=0,
    )
    return model


@pytest.fixture()
def conv_bundle(conv_teacher):
    return attach_branches(conv_teacher, SPEC_SMALL, seed=7)


@pytest.fixture()
def conv_student(blobs_small):
    return build_student("conv", blobs_small["train"].in_shape, (4, 8, 8), SPEC_SMALL, seed=11)


@pytest.fixture(scope="session")
def mlp_teacher(separable):
    """An MLP teacher trained to full accuracy on the separable fixture."""
    model = build_plain_model("mlp", separable["train"].in_shape, (16, 16), 3, seed=0)
    train_classifier(
        model,
        separable["train"],
        TrainSchedule(epochs=12, initial_lr=0.05, batch_size=32, milestones=(9,)),
        seed=0,
    )
    logits = model.native_logits(separable["train"].images)
    assert (logits.argmax(axis=1) == separable["train"].labels).mean() == 1.0
    return model
