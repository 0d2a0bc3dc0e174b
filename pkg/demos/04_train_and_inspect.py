"""Synthesise a small defect set, train briefly, look inside.

This uses the 32 px micro configuration so it finishes in well under a
minute.  The CLI does the same with ``cinformer synth`` / ``train`` /
``eval`` / ``dump-features``.
"""
import tempfile
from pathlib import Path

import numpy as np

from cinformer.cli import dump_features
from cinformer.config import micro_config
from cinformer.data import generate_dataset, load_split, read_pgm
from cinformer.train import evaluate, train_loop

work = Path(tempfile.mkdtemp(prefix="cinformer-demo-"))
generate_dataset(work / "data", count=24, size=32, contrast=0.8, seed=3)
x_tr, y_tr, _ = load_split(work / "data", "train")
x_te, y_te, _ = load_split(work / "data", "test")
print(f"{len(x_tr)} train / {len(x_te)} test images, classes present:", np.unique(y_tr).tolist())

cfg = micro_config(num_classes=4)
cfg.train.steps, cfg.train.eval_every = 300, 100
run = train_loop(cfg, x_tr, y_tr, out_dir=work / "run", eval_images=x_te, eval_masks=y_te)
for rec in run["history"]:
    if "miou" in rec:
        print(f"step {rec['step']:3d}  loss {rec['loss']:.3f}  test mIoU {rec['miou']:.3f}")

# a 32 px micro model on 17 images mostly learns the background; the
# default 64 px model is the one that fits its training set
rep = evaluate(run["params"], cfg, x_te, y_te)
print("per-class IoU:", [None if np.isnan(v) else round(float(v), 3) for v in rep.per_class_iou])

# feature maps come out as greyscale PGMs; Top-K stages also get a selection mask
written = dump_features(run["params"], cfg, read_pgm(work / "data" / "images" / "00000.pgm"),
                        [1, 2, 3, 4], work / "features")
for p in written:
    grid = read_pgm(p)
    print(f"{Path(p).name:<22} {grid.shape}  white cells {int((grid == 255).sum())}")
print("outputs in", work)
