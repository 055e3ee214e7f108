"""Calibration run for the toy end-to-end training target (criterion 6 shape):
ROBO k=1, 500 train images, 25 epochs, batch 16, mAP@dist16 on 100 held out."""

import sys
import time

import numpy as np

from robodet.data import generate_toy_dataset
from robodet.detect import compute_anchors
from robodet.evaluate import map_at_distance
from robodet.model import build_robo, init_network
from robodet.train import LossWeights, TrainConfig, train_loop
from robodet.data import load_all_annotations

t0 = time.time()
train_index = generate_toy_dataset(500, "A", seed=0, out_dir="/tmp/cal/train_a")
val_index = generate_toy_dataset(100, "A", seed=1, out_dir="/tmp/cal/val_a")
print(f"datasets in {time.time()-t0:.1f}s", flush=True)

net = init_network(build_robo(1), seed=0)
anns = load_all_annotations(train_index)
net.anchors = compute_anchors([(a.class_id, a.box) for a in anns])
print("anchors:", net.anchors, flush=True)

cfg = TrainConfig(epochs=25, batch=16, seed=0)
lw = LossWeights()

t0 = time.time()
metrics = train_loop(net, train_index, cfg, lw, val_index=val_index)
elapsed = time.time() - t0
for m in metrics:
    print(f"epoch {m['epoch']:3d} loss {m['loss']:8.4f} lr {m['lr']:.2e} "
          f"val {m['val_map']}", flush=True)
final = map_at_distance(net, val_index)
print(f"TRAIN TIME {elapsed:.1f}s  FINAL mAP@dist16 = {final:.4f}", flush=True)
print(f"loss ratio final/initial = {metrics[-1]['loss']/metrics[0]['loss']:.4f}")

from robodet.model import save_weights
save_weights(net, "/tmp/cal/c6_baseline.rbw")
