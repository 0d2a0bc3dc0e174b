"""Checkpoints are plain little-endian binaries, and resuming is bit-exact.

A run interrupted at step 5 and resumed from ``last.ckpt`` writes the same
bytes as a run that never stopped.
"""
import tempfile
from pathlib import Path

import numpy as np

from cinformer.checkpoint import load_entries
from cinformer.config import micro_config
from cinformer.data import generate_dataset, load_split
from cinformer.train import train_loop

work = Path(tempfile.mkdtemp(prefix="cinformer-ckpt-"))
generate_dataset(work / "data", count=6, size=32, seed=0)
x, y, _ = load_split(work / "data", "train")

cfg = micro_config(num_classes=4)
cfg.train.steps, cfg.train.eval_every, cfg.train.batch = 10, 5, 2

train_loop(cfg, x, y, out_dir=work / "straight")
train_loop(cfg, x, y, out_dir=work / "broken", stop_after=5)
train_loop(cfg, x, y, out_dir=work / "broken", resume=work / "broken" / "last.ckpt")

for name in ("last.ckpt", "best.ckpt", "metrics.jsonl"):
    same = (work / "straight" / name).read_bytes() == (work / "broken" / name).read_bytes()
    print(f"{name:<14} identical: {same}")

# entries are named arrays; optimizer moments and the config travel along
entries = load_entries(work / "straight" / "last.ckpt")
kinds = {}
for key in entries:
    head = key.split(".", 1)[0]
    kinds[head] = kinds.get(head, 0) + 1
print("\nentry groups:", kinds)
print("one entry:", next(k for k in entries if k.startswith("stem")),
      np.asarray(next(v for k, v in entries.items() if k.startswith("stem"))).shape)
