"""Train the small desk preset end to end and score the held-out samples (about 6 min on one core).

    python demos/03_train_desk_preset.py [out_dir]
"""
import sys
from pathlib import Path

from deepca.harness import cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_train, load_config, read_log

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
cfg = load_config(preset="desk", overrides={"out_dir": str(out)})
print(f"{cfg.volume_dims} volumes, {cfg.detector_dims} detectors, {cfg.n_samples} samples, {cfg.steps} steps")

manifest = cmd_simulate(cfg, out / "data")
summary = cmd_train(cfg, manifest, out / "train")
print(f"train l1 {summary['train_l1_initial']:.4f} -> {summary['train_l1_final']:.4f}")

for row in read_log(out / "train" / "val_log.csv"):
    print("  val", row)

cmd_reconstruct(out / "train" / "checkpoints" / "final.ckpt", out / "recon", manifest=manifest)
report = cmd_evaluate(manifest, out / "recon", out / "eval", mode="reproj")
print("report:", report)
print(Path(report).read_text())
