#!/usr/bin/env python3
"""End-to-end toy run: synth data -> train both stages -> infer/eval/viz.

Everything goes through the CLI, so this doubles as a smoke test of the
installed entry point. Finishes in a few minutes on one CPU core.

    python3 scripts/run_toy_experiment.py --work /tmp/toy_run
"""

import argparse
import json
import sys
from pathlib import Path

from posetransfer.cli import main as cli

CONFIG = {
    "epochs": 56, "decay_start_epoch": 14, "lr0": 3e-4,
    "batch_size": 2, "seed": 0, "max_steps": 500, "checkpoint_every": 1000,
    "image_size": [128, 88],
    "base_channels": 12, "num_blocks": 2,
    "code_length": 32, "stage_channels": [48, 24, 12], "num_res_blocks": 2,
    "style_channels": [12, 16], "disc_base_channels": 12, "disc_layers": 3,
    "face_epochs": 30, "face_crop": 32,
    "face_code_length": 32, "face_stage_channels": [48, 24, 12],
    "face_res_blocks": 2, "face_style_channels": [12, 16],
}


def run(argv):
    print("+ posetransfer " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="toy_run", help="working directory")
    ap.add_argument("--steps", type=int, default=500, help="body-stage steps")
    args = ap.parse_args()

    work = Path(args.work)
    data, out = work / "data", work / "run"
    work.mkdir(parents=True, exist_ok=True)

    cfg = dict(CONFIG, max_steps=args.steps)
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(cfg, indent=1))

    run(["synth-data", "--out", str(data), "--identities", "4",
         "--poses", "3", "--seed", "7", "--size", "128x88"])
    run(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(out)])
    run(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(out),
         "--face"])

    ckpt = out / "checkpoint-final"
    face_ckpt = out / "face" / "checkpoint-final"
    run(["infer", "--ckpt", str(ckpt), "--face-ckpt", str(face_ckpt),
         "--split", "test", "--out", str(work / "images"), "--save-intermediate"])
    run(["eval", "--ckpt", str(ckpt), "--face-ckpt", str(face_ckpt),
         "--split", "test", "--out", str(work / "report.json")])
    run(["viz-guidance", "--ckpt", str(ckpt), "--pair", "0",
         "--out", str(work / "guidance.png")])

    report = json.loads((work / "report.json").read_text())
    print(json.dumps(report["image_metrics"], indent=1))
    print(f"done; outputs under {work}")


if __name__ == "__main__":
    main()
