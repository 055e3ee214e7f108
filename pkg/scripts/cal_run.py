"""Parameterized toy-training calibration run.

Usage: cal_run.py <tag> [key=value ...]
Keys: lr_max, lr_min, epochs, batch, seed, l1, obj, noobj, coord, augment,
train_dir, val_dir, out
"""

import sys
import time

from robodet.data import generate_toy_dataset, load_all_annotations, load_index
from robodet.detect import compute_anchors
from robodet.evaluate import map_at_distance
from robodet.model import build_robo, init_network, save_weights
from robodet.train import LossWeights, TrainConfig, train_loop

tag = sys.argv[1]
opts = dict(kv.split("=", 1) for kv in sys.argv[2:])

train_dir = opts.get("train_dir", "/tmp/cal/train_a")
val_dir = opts.get("val_dir", "/tmp/cal/val_a")
try:
    train_index = load_index(train_dir)
    val_index = load_index(val_dir)
except FileNotFoundError:
    train_index = generate_toy_dataset(500, "A", seed=0, out_dir=train_dir)
    val_index = generate_toy_dataset(100, "A", seed=1, out_dir=val_dir)

cfg = TrainConfig(
    lr_max=float(opts.get("lr_max", 1e-3)),
    lr_min=float(opts.get("lr_min", 5e-5)),
    epochs=int(opts.get("epochs", 25)),
    batch=int(opts.get("batch", 16)),
    seed=int(opts.get("seed", 0)),
)
lw = LossWeights(
    coord=float(opts.get("coord", 5.0)),
    obj=float(opts.get("obj", 1.0)),
    noobj=float(opts.get("noobj", 0.5)),
    l1=float(opts.get("l1", 0.0)),
)
augment = opts.get("augment", "0") == "1"

net = init_network(build_robo(1), seed=cfg.seed)
anns = load_all_annotations(train_index)
net.anchors = compute_anchors([(a.class_id, a.box) for a in anns])

t0 = time.time()
metrics = train_loop(net, train_index, cfg, lw, val_index=val_index,
                     augment_data=augment)
elapsed = time.time() - t0
vals = [(m["epoch"], round(m["val_map"], 4)) for m in metrics if m["val_map"] is not None]
print(f"[{tag}] time={elapsed:.0f}s loss {metrics[0]['loss']:.2f}->{metrics[-1]['loss']:.2f} "
      f"val trajectory: {vals}", flush=True)
if "out" in opts:
    save_weights(net, opts["out"])
