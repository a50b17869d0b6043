"""The full experiment pipeline through the CLI.

Writes a miniature config into a scratch directory and drives every
subcommand in order: pretrain -> self-analyze -> distill -> evaluate ->
noise -> transfer, then shows the artifacts each run directory contains.
Uses reduced sizes so the whole thing finishes in well under a minute.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

CONFIG = """
[dataset]
name = "blobs"
seed = 0
classes = 10
train_size = 512
val_size = 128
test_size = 256
noise = 5.0

[teacher]
arch = "conv"
widths = [8, 16, 16]

[student]
arch = "conv"
widths = [4, 8, 8]

[granularity]
dim_ak = 6
dim_dk = 24

[scheme]
variant = "se"
hook = "hkd"

[schedule.pretrain]
epochs = 4
initial_lr = 0.02
milestones = []

[run]
seeds = [0]
out = "{out}"
scale = 0.05

[artifacts]
teacher = "{out}/teacher_s{{seed}}.ckpt"

[transfer]
[transfer.dataset]
name = "blobs"
seed = 9
classes = 10
train_size = 256
val_size = 64
test_size = 128
"""


def run(*args):
    cmd = [sys.executable, "-m", "mgkd.cli", *args]
    print(f"\n$ mgkd {' '.join(args)}")
    result = subprocess.run(cmd, capture_output=True, text=True)
    print(result.stdout.strip())
    if result.returncode != 0:
        print(result.stderr.strip())
        raise SystemExit(result.returncode)


with tempfile.TemporaryDirectory() as scratch:
    scratch = Path(scratch)
    out = scratch / "runs"
    config = scratch / "experiment.toml"
    config.write_text(CONFIG.format(out=out))

    run("pretrain", "-c", str(config))
    run("self-analyze", "-c", str(config))
    tsa = next(out.glob("self-analyze_*")) / "t_sa.ckpt"
    run("distill", "-c", str(config), "--tsa", str(tsa))
    distill_dir = next(out.glob("distill_*"))
    run(
        "evaluate", "-c", str(config),
        str(tsa), str(distill_dir / "student.ckpt"),
        "--export-heads", "16",
    )
    run("noise", "-c", str(config), str(distill_dir / "student_stripped.ckpt"))
    run("transfer", "-c", str(config), "--student", str(distill_dir / "student.ckpt"))

    print("\n=== run directories and their artifacts ===")
    for run_dir in sorted(p for p in out.iterdir() if p.is_dir()):
        names = sorted(p.name for p in run_dir.iterdir())
        print(f"{run_dir.name}: {names}")

    summary = json.loads((distill_dir / "summary.json").read_text())
    print("\ndistill summary highlights:")
    for key in ("scheme", "hook", "test_accuracy", "stripped_test_accuracy", "early_loss_stability"):
        print(f"  {key}: {summary[key]}")
    print("\nevery summary embeds provenance:",
          {k: summary[k] for k in ("config_hash", "seeds", "code_version")})
