"""Walk through detection on a handful of phantoms.

Generates a tiny train/validation split, fits the Haar + GBM baseline and
prints per-image Dice next to the oracle upper bound of the same sweep.

    python demos/detect_walkthrough.py [out_dir]
"""

import sys
import tempfile

from kidneyxfer import pipeline, synthdata
from kidneyxfer.imaging import dice_many


def main(out_dir):
    params = synthdata.PhantomParams()
    train = synthdata.generate_dataset(8, 0, params, "train", out_dir)
    val = synthdata.generate_dataset(4, 500, params, "val", out_dir)
    exp = pipeline.Experiment(train, val)
    report = exp.report("haar")
    print(f"{'image':<14}{'dice':>7}{'best in sweep':>15}{'confident':>11}")
    for (img, gt), r in zip(val.samples(), report.results):
        best = dice_many(pipeline.sweep_rois(img), gt).max()
        print(f"{r.image:<14}{r.dice:7.3f}{best:15.3f}{str(r.confident):>11}")
    print(report.summary())
    for path in pipeline.write_overlays(out_dir, val, report):
        print("overlay:", path)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="kidneyxfer_"))
