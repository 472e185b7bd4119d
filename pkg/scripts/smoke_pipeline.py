"""End-to-end CLI smoke run: gen-data -> pretrain -> sample -> overlay -> evaluate.

    python3 scripts/smoke_pipeline.py [--out DIR] [--steps 200]

Asserts that every stage leaves its artifacts behind and that the evaluation
report has the documented schema.  Takes a few minutes on one CPU core.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from ctrlsynth import imageio

SMALL_MODEL = ["--base-channels", "16", "--batch-size", "8", "--lr", "1e-3"]


def cli(*args: str) -> dict:
    r = subprocess.run([sys.executable, "-m", "ctrlsynth", *args], capture_output=True, text=True)
    if r.returncode != 0:
        sys.exit(f"ctrlsynth {args[0]} failed ({r.returncode}):\n{r.stderr}")
    # the last log line of every command carries its result summary
    return json.loads(json.loads(r.stderr.strip().splitlines()[-1])["message"])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--samples", type=int, default=4)
    args = ap.parse_args()
    out = args.out or Path(tempfile.mkdtemp(prefix="ctrlsynth_smoke_"))
    data, pre = out / "data", out / "pretrain"

    cli("gen-data", "--n", str(args.n), "--resolution", "32", "--out-dir", str(data))
    manifest = data / "manifest.jsonl"
    assert len(manifest.read_text().splitlines()) == args.n

    summary = cli("pretrain", "--manifest", str(manifest), "--steps", str(args.steps),
        "--checkpoint-every", str(max(1, args.steps // 2)), *SMALL_MODEL, "--out-dir", str(pre))
    assert summary["steps"] == args.steps
    for name in ("last.bin", "metrics.jsonl", "config.echo.json"):
        assert (pre / name).exists(), name
    losses = [json.loads(l)["loss"] for l in (pre / "metrics.jsonl").read_text().splitlines()]
    assert len(losses) == args.steps and all(np.isfinite(losses))
    print(f"pretrain: {args.steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")

    eval_records = []
    for rec in [json.loads(l) for l in manifest.read_text().splitlines()][:args.samples]:
        rid = rec["id"]
        img_path = data / rec["files"]["image"]
        union = np.zeros((32, 32), np.float32)
        for m in rec["masks"]:
            union = np.maximum(union, imageio.read_mask(data / m))
        mask_path = out / "masks" / f"{rid}.png"
        mask_path.parent.mkdir(parents=True, exist_ok=True)
        imageio.write_png(mask_path, union)

        s_dir, o_dir = out / "samples" / rid, out / "overlay" / rid
        phi = rec["light"]["azimuth_deg"]
        cli("sample", "--ckpt", str(pre / "last.bin"), "--fg", str(img_path),
            "--mask", str(mask_path), "--bg", str(img_path), "--light-deg", str(phi),
            "--prompt", rec["prompt"], "--out-dir", str(s_dir))
        gen = imageio.read_png(s_dir / "sample.png")
        assert gen.shape == (32, 32, 3) and np.isfinite(gen).all()
        assert (s_dir / "stack.json").exists() and (s_dir / "stack.npy").exists()

        cli("overlay", "--src", str(img_path), "--gen", str(s_dir / "sample.png"),
            "--mask", str(mask_path), "--out-dir", str(o_dir))
        assert (o_dir / "overlay.png").exists()
        eval_records.append({"id": rid, "generated": str(o_dir / "overlay.png"),
                             "fg": str(img_path), "mask": str(mask_path),
                             "B": str(s_dir / "stack_layout.png"), "phi": phi})

    eval_manifest = out / "eval.jsonl"
    eval_manifest.write_text("".join(json.dumps(r) + "\n" for r in eval_records))
    cli("evaluate", "--manifest", str(eval_manifest), "--out-dir", str(out / "eval"))
    report = json.loads((out / "eval" / "report.json").read_text())
    assert (out / "eval" / "report.csv").exists()
    keys = {"masked_psnr", "masked_l1", "edge_iou", "light_angle_error"}
    assert len(report["samples"]) == len(eval_records)
    for row in report["samples"]:
        assert keys <= set(row)
        assert row["masked_psnr"] >= 0 and row["masked_l1"] >= 0
        assert row["edge_iou"] is None or 0.0 <= row["edge_iou"] <= 1.0
        assert row["light_angle_error"] is None or 0.0 <= row["light_angle_error"] <= 180.0
    assert keys <= set(report["aggregates"])
    agg = report["aggregates"]
    print("evaluate:", {k: round(agg[k]["mean"], 3) if agg[k]["mean"] is not None else None
                        for k in sorted(keys)})
    print(f"smoke pipeline OK -> {out}")


if __name__ == "__main__":
    main()
