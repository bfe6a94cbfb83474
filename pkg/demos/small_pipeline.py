"""Synthesize a tiny dataset, train every stage and run the ablation.

Uses 8x8 images and a couple of epochs so it finishes in seconds; the
numbers are only a smoke test.  Run: python3 demos/small_pipeline.py [out_dir]
"""
import json
import sys
import tempfile
from pathlib import Path

from voxcal.cli import main

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="voxcal-demo-"))
root.mkdir(parents=True, exist_ok=True)
config = {
    "n_samples": 24, "image_size": 8, "z_res": 8, "gan_levels": 3, "gan_base_channels": 4,
    "gan_epochs": 3, "gan_batch": 4, "regressor_epochs": 10, "regressor_batch": 8,
    "adaptation_epochs": 20, "ablation_seeds": [0, 1],
    "dataset_dir": str(root / "data"), "ckpt_dir": str(root / "ckpt"), "report_dir": str(root / "report"),
}
cfg = root / "config.json"
cfg.write_text(json.dumps(config, indent=2))

for argv in (["--force", "synth"], ["train", "--all-seeds"], ["ablate"]):
    code = main(["--config", str(cfg), *argv])
    if code:
        sys.exit(code)

image = sorted((root / "data").glob("*/rgb.ppm"))[0]
main(["--config", str(cfg), "infer", str(image)])
print(f"outputs under {root}")
