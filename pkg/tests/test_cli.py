"""CLI pipeline: config validation, run-directory contracts, exit codes,
and cross-command artifact flow on a miniature configuration."""

import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from mgkd.cli import main
from mgkd.config import DEFAULT_AK_TAU_GRID, DEFAULT_DK_TAU_GRID, load_config
from mgkd.errors import ConfigError

TINY_CONFIG = """
[dataset]
name = "blobs"
seed = 0
classes = 10
train_size = 256
val_size = 64
test_size = 128
image_size = 16
channels = 3
noise = 5.0

[teacher]
arch = "conv"
widths = [8, 16, 16]

[student]
arch = "conv"
widths = [4, 8, 8]

[granularity]
dim_ak = {dim_ak}
dim_dk = 24
tau_akb = 2.5
tau_dkb = 8.0

[scheme]
variant = "{variant}"
hook = "hkd"

[schedule.pretrain]
epochs = 3
initial_lr = 0.02
milestones = []

[schedule.self_analyze]
epochs = 36
initial_lr = 0.02
milestones = [24]

[schedule.distill]
epochs = 36
initial_lr = 0.005
milestones = [24]

[schedule.transfer]
epochs = 4
initial_lr = 0.1
milestones = []

[run]
seeds = [0]
out = "{out}"
scale = 0.084

[artifacts]
teacher = "{out}/teacher_s{{seed}}.ckpt"

[sweep]
seeds = [0]
ak_dims = [4, 100]
dk_dims = [16]

[transfer]
[transfer.dataset]
name = "blobs"
seed = 5
classes = 10
train_size = 128
val_size = 32
test_size = 64
noise = 5.0
"""


def _write_config(tmp_path, dim_ak=6, variant="se", name="cfg.toml"):
    path = tmp_path / name
    path.write_text(TINY_CONFIG.format(dim_ak=dim_ak, variant=variant, out=tmp_path / "runs"))
    return path


def _only_run_dir(out_dir, command):
    matches = [p for p in Path(out_dir).glob(f"{command}_*") if p.is_dir()]
    assert len(matches) == 1, matches
    return matches[0]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One pretrain -> self-analyze -> distill chain shared by read-only tests."""
    tmp_path = tmp_path_factory.mktemp("pipeline")
    cfg = _write_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["pretrain", "-c", str(cfg)]) == 0
    assert main(["self-analyze", "-c", str(cfg)]) == 0
    sa_dir = _only_run_dir(out, "self-analyze")
    assert main(["distill", "-c", str(cfg), "--tsa", str(sa_dir / "t_sa.ckpt")]) == 0
    distill_dir = _only_run_dir(out, "distill")
    return {"cfg": cfg, "out": out, "sa_dir": sa_dir, "distill_dir": distill_dir}


class TestConfigValidation:
    def test_spec_violation_names_constraint_and_blocks_run(self, tmp_path, capsys):
        cfg = _write_config(tmp_path, dim_ak=100)
        code = main(["self-analyze", "-c", str(cfg)])
        assert code == 2
        err = capsys.readouterr().err
        assert "dim_ak" in err and "num_classes" in err
        assert not (tmp_path / "runs").exists()

    def test_unknown_hook_flag_lists_valid_options(self, tmp_path, capsys):
        cfg = _write_config(tmp_path)
        with pytest.raises(SystemExit) as err:
            main(["distill", "-c", str(cfg), "--hook", "crd", "--tsa", "x.ckpt"])
        assert err.value.code == 2
        stderr = capsys.readouterr().err
        assert "crd" in stderr and "hkd" in stderr and "null" in stderr

    def test_unknown_hook_in_config_lists_valid_options(self, tmp_path, capsys):
        cfg = tmp_path / "hook.toml"
        cfg.write_text(_write_config(tmp_path).read_text().replace('hook = "hkd"', 'hook = "crd"'))
        code = main(["distill", "-c", str(cfg), "--tsa", "x.ckpt"])
        assert code == 2
        stderr = capsys.readouterr().err
        assert "crd" in stderr and "hkd" in stderr and "null" in stderr

    def test_swapped_branch_temperatures_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text(
            _write_config(tmp_path).read_text().replace("tau_akb = 2.5", "tau_akb = 9.5")
        )
        assert main(["self-analyze", "-c", str(cfg)]) == 2
        assert "tau_akb" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["pretrain", "-c", str(tmp_path / "nope.toml")]) == 3

    def test_loader_collects_all_problems(self, tmp_path):
        cfg = tmp_path / "multi.toml"
        cfg.write_text(
            "[granularity]\ndim_ak = 100\ntau_akb = 9.0\ntau_dkb = 2.0\n"
            "[scheme]\nvariant = 'bogus'\n"
        )
        with pytest.raises(ConfigError) as err:
            load_config(cfg)
        text = str(err.value)
        assert "dim_ak" in text and "tau_akb" in text and "variant" in text

    def test_default_temperature_sweep_grids(self):
        assert DEFAULT_AK_TAU_GRID == (1.5, 2.0, 2.5, 3.0, 4.0)
        assert DEFAULT_DK_TAU_GRID == (4.0, 6.0, 8.0, 10.0, 15.0)


class TestSelfAnalyzeCommand:
    def test_run_dir_has_declared_artifacts(self, pipeline):
        names = {p.name for p in pipeline["sa_dir"].iterdir()}
        assert names == {"config.json", "metrics.csv", "t_sa.ckpt", "branch_agreement.json", "summary.json"}

    def test_missing_teacher_checkpoint_exits_3(self, tmp_path):
        cfg = _write_config(tmp_path)
        assert main(["self-analyze", "-c", str(cfg)]) == 3

    def test_rerun_reproduces_checkpoint_bytes(self, tmp_path):
        cfg = _write_config(tmp_path)
        out = tmp_path / "runs"
        assert main(["pretrain", "-c", str(cfg)]) == 0
        assert main(["self-analyze", "-c", str(cfg)]) == 0
        assert main(["self-analyze", "-c", str(cfg)]) == 0
        dirs = sorted(p for p in out.glob("self-analyze_*") if p.is_dir())
        assert len(dirs) == 2
        first = (dirs[0] / "t_sa.ckpt").read_bytes()
        second = (dirs[1] / "t_sa.ckpt").read_bytes()
        assert first == second


class TestDistillCommand:
    def test_summary_decomposition_matches_scheme(self, pipeline, tmp_path):
        summary = json.loads((pipeline["distill_dir"] / "summary.json").read_text())
        assert summary["scheme"] == "se"
        assert "loss_en" in summary["loss_decomposition"]
        assert "loss_nk" not in summary["loss_decomposition"]
        assert "early_loss_stability" in summary
        # gwd run shows the native-head term instead
        cfg = pipeline["cfg"]
        gwd_out = tmp_path / "gwd_runs"
        code = main([
            "distill", "-c", str(cfg), "--tsa", str(pipeline["sa_dir"] / "t_sa.ckpt"),
            "--scheme", "gwd", "--out", str(gwd_out),
        ])
        assert code == 0
        gwd_dir = _only_run_dir(gwd_out, "distill")
        gwd_summary = json.loads((gwd_dir / "summary.json").read_text())
        assert "loss_nk" in gwd_summary["loss_decomposition"]
        assert "loss_en" not in gwd_summary["loss_decomposition"]

    def test_missing_tsa_exits_3(self, pipeline):
        assert main(["distill", "-c", str(pipeline["cfg"]), "--tsa", "missing.ckpt"]) == 3

    def test_stripped_checkpoint_matches_full_student_accuracy(self, pipeline):
        summary = json.loads((pipeline["distill_dir"] / "summary.json").read_text())
        assert summary["stripped_test_accuracy"] == summary["test_accuracy"]

    def test_artifacts_present(self, pipeline):
        names = {p.name for p in pipeline["distill_dir"].iterdir()}
        assert {"config.json", "metrics.csv", "student.ckpt", "student_stripped.ckpt", "summary.json"} <= names

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergent_schedule_exits_4(self, pipeline, tmp_path):
        cfg_text = pipeline["cfg"].read_text().replace("initial_lr = 0.005", "initial_lr = 1e8")
        cfg = tmp_path / "hot.toml"
        cfg.write_text(cfg_text)
        code = main([
            "distill", "-c", str(cfg), "--tsa", str(pipeline["sa_dir"] / "t_sa.ckpt"),
            "--out", str(tmp_path / "hot_runs"),
        ])
        assert code == 4


class TestEvaluateCommand:
    def test_self_comparison_report(self, pipeline, tmp_path):
        out = tmp_path / "eval_runs"
        student = pipeline["distill_dir"] / "student.ckpt"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code = main(["evaluate", "-c", str(pipeline["cfg"]), str(student), "--out", str(out)])
        assert code == 0
        run_dir = _only_run_dir(out, "evaluate")
        report = json.loads((run_dir / "report.json").read_text())
        for layer, values in report["cka"].items():
            assert values["linear"] == pytest.approx(1.0, abs=1e-9)
            assert values["rbf"] == pytest.approx(1.0, abs=1e-9)
        for head, metrics in report["knowledge_similarity"].items():
            assert metrics["l2"] == 0.0
            assert metrics["cosine"] == pytest.approx(1.0, abs=1e-12)
        diff = np.loadtxt(run_dir / "correlation_difference.csv", delimiter=",")
        assert np.abs(diff).max() == 0.0
        assert report["config_hash"]
        assert report["seeds"] == [0]

    def test_teacher_student_report_and_noise_csv(self, pipeline, tmp_path):
        out = tmp_path / "eval2_runs"
        code = main([
            "evaluate", "-c", str(pipeline["cfg"]),
            str(pipeline["sa_dir"] / "t_sa.ckpt"),
            str(pipeline["distill_dir"] / "student.ckpt"),
            "--out", str(out), "--export-heads", "8",
        ])
        assert code == 0
        run_dir = _only_run_dir(out, "evaluate")
        lines = (run_dir / "noise_curve.csv").read_text().strip().splitlines()
        assert len(lines) == 17  # header + 16 grid points
        assert lines[0] == "sigma,accuracy,accuracy_delta_points"
        report = json.loads((run_dir / "report.json").read_text())
        assert set(report["knowledge_similarity"]) == {"ak", "nk", "dk"}
        heads = list((run_dir / "heads").glob("*.csv"))
        assert len(heads) == 8  # teacher/student x repr/ak/nk/dk


class TestNoiseCommand:
    def test_sixteen_rows_and_summary(self, pipeline, tmp_path):
        out = tmp_path / "noise_runs"
        ckpt = pipeline["distill_dir"] / "student_stripped.ckpt"
        assert main(["noise", "-c", str(pipeline["cfg"]), str(ckpt), "--out", str(out)]) == 0
        run_dir = _only_run_dir(out, "noise")
        lines = (run_dir / "noise_curve.csv").read_text().strip().splitlines()
        assert len(lines) == 17
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["accuracy_delta_points"][0] == 0.0
        assert len(summary["sigmas"]) == 16


class TestSweepCommand:
    def test_invalid_points_rejected_up_front(self, pipeline, tmp_path):
        out = tmp_path / "sweep_runs"
        code = main([
            "sweep", "-c", str(pipeline["cfg"]), "--axis", "dims",
            "--teacher", str(pipeline["out"] / "teacher_s{seed}.ckpt"),
            "--out", str(out),
        ])
        assert code == 0
        run_dir = _only_run_dir(out, "sweep")
        summary = json.loads((run_dir / "summary.json").read_text())
        # grid was {4, 100} x {16}; (100, 10, 16) violates the ordering
        assert summary["valid_points"] == 1
        assert len(summary["rejected_points"]) == 1
        assert "dim_ak" in summary["rejected_points"][0]["problem"]
        rows = (run_dir / "sweep_summary.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + one valid point

    def test_all_invalid_grid_is_config_error(self, pipeline, tmp_path, capsys):
        cfg_text = pipeline["cfg"].read_text().replace("ak_dims = [4, 100]", "ak_dims = [100]")
        cfg = tmp_path / "allbad.toml"
        cfg.write_text(cfg_text)
        code = main([
            "sweep", "-c", str(cfg), "--axis", "dims",
            "--teacher", str(pipeline["out"] / "teacher_s{seed}.ckpt"),
            "--out", str(tmp_path / "sweep2_runs"),
        ])
        assert code == 2
        assert "invalid" in capsys.readouterr().err

    def test_unknown_axis_rejected_by_parser(self, pipeline):
        with pytest.raises(SystemExit) as err:
            main(["sweep", "-c", str(pipeline["cfg"]), "--axis", "widths"])
        assert err.value.code == 2


class TestTransferCommand:
    def test_report_fields_and_frozen_backbone(self, pipeline, tmp_path):
        out = tmp_path / "transfer_runs"
        code = main([
            "transfer", "-c", str(pipeline["cfg"]),
            "--student", str(pipeline["distill_dir"] / "student.ckpt"),
            "--out", str(out),
        ])
        assert code == 0
        run_dir = _only_run_dir(out, "transfer")
        report = json.loads((run_dir / "transfer_report.json").read_text())
        assert report["backbone_unchanged"] is True
        assert report["backbone_checksum_before"] == report["backbone_checksum_after"]
        assert 0.0 <= report["target_accuracy"] <= 1.0
        assert report["source_accuracy"] is not None
        assert report["config_hash"] and report["code_version"]


class TestRunDirectoryContracts:
    def test_config_echo_written_before_compute(self, pipeline):
        echo = json.loads((pipeline["sa_dir"] / "config.json").read_text())
        assert echo["resolved"]["config_hash"]
        assert echo["config"]["granularity"]["dim_ak"] == 6

    def test_summary_embeds_provenance(self, pipeline):
        for run in ("sa_dir", "distill_dir"):
            summary = json.loads((pipeline[run] / "summary.json").read_text())
            assert summary["config_hash"]
            assert summary["seeds"] == [0]
            assert summary["code_version"].startswith("mgkd-")

    def test_no_tmp_files_left_behind(self, pipeline):
        leftovers = list(pipeline["out"].rglob("*.tmp"))
        assert leftovers == []
