"""Training: detection loss with L1 regularization, Adam with a cosine
learning-rate schedule, photometric/flip augmentation, magnitude pruning
with mask-frozen fine-tuning, and first-k-layers transfer fine-tuning.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import expit

from . import data as data_mod
from .detect import BBox, encode
from .model import (
    HEAD_HI,
    HEAD_LO,
    Network,
    backward,
    forward_with_cache,
    trainable_params,
    weight_masks,
)

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    l1: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 5e-5
    epochs: int = 125
    batch: int = 64
    finetune_epochs: int = 10
    finetune_lr: float = 5e-5
    prune_threshold: float = 0.01
    seed: int = 0
    transfer_layers: int | None = None
    transfer_lr_factor: float = 10.0

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if not 0.0 < self.prune_threshold < 1.0:
            raise ValueError("prune_threshold must lie in (0, 1)")


_CONFIG_INT_FIELDS = {"epochs", "batch", "finetune_epochs", "seed", "transfer_layers"}
_LOSS_KEYS = {"lambda_coord": "coord", "lambda_obj": "obj",
              "lambda_noobj": "noobj", "lambda_l1": "l1"}


def parse_config(text: str) -> tuple[TrainConfig, LossWeights]:
    """Flat key=value config covering TrainConfig and the loss weights."""
    cfg_kwargs = {}
    loss_kwargs = {}
    known = {f.name for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _LOSS_KEYS:
            loss_kwargs[_LOSS_KEYS[key]] = float(value)
        elif key in known:
            if key == "transfer_layers" and value.lower() == "none":
                cfg_kwargs[key] = None
            elif key in _CONFIG_INT_FIELDS:
                cfg_kwargs[key] = int(value)
            else:
                cfg_kwargs[key] = float(value)
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    return TrainConfig(**cfg_kwargs), LossWeights(**loss_kwargs)


def format_config(cfg: TrainConfig, lw: LossWeights) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    lines += [f"{key}={getattr(lw, attr)}" for key, attr in _LOSS_KEYS.items()]
    return "\n".join(lines) + "\n"


def cosine_lr(t: int, total: int, cfg: TrainConfig) -> float:
    """Half-cosine decay from lr_max at t=0 to lr_min at t=total."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside schedule of {total} steps")
    if total == 0:
        return cfg.lr_max
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * t / total))


class AdamState:
    """First/second moment estimates keyed like the parameter dict."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params, grads, state: AdamState, lr: float, masks=None, lr_scale=None):
    """Bias-corrected Adam update in place; masked weights stay exactly 0."""
    state.t += 1
    b1c = 1.0 - state.beta1**state.t
    b2c = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        mask = masks.get(name) if masks else None
        if mask is not None:
            g = g * mask
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        scale = lr if lr_scale is None else lr * lr_scale.get(name, 1.0)
        p -= scale * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        if mask is not None:
            p[~mask] = 0.0


# ---------------------------------------------------------------------------
# Detection loss.


def _assign_targets(targets, spec, anchors):
    """Group encodable targets by (head, slot, cell); same-slot collisions
    keep the larger box."""
    owner = {}
    for head in spec.heads:
        for slot, class_id in enumerate(head.classes_owned):
            owner[class_id] = (head.name, slot)
    assigned: dict[tuple, tuple] = {}
    for class_id, box in targets:
        head_name, slot = owner[class_id]
        head = spec.head(head_name)
        (i, j), t = encode((class_id, box), anchors, spec.head_grid(head))
        key = (head_name, slot, i, j)
        if key in assigned:
            old_box, _ = assigned[key]
            logger.warning(
                "target collision: two '%s' boxes in cell (%d, %d) of %s; "
                "keeping the larger one",
                spec.classes[class_id], i, j, head_name,
            )
            if box.w * box.h <= old_box.w * old_box.h:
                continue
        assigned[key] = (box, t)
    return assigned


def _l1_term(net: Network) -> float:
    return float(sum(np.abs(layer.conv.weights).sum() for _, layer in net.all_layers()))


def detection_loss(raw_lo, raw_hi, targets, net: Network, lw: LossWeights):
    """Single-image loss and its gradients on the two raw head tensors.

    Responsibility is one (cell, class-slot) per target; there is no
    classification term.  Returns (loss, grad_lo, grad_hi).
    """
    spec = net.spec
    assigned = _assign_targets(targets, spec, net.anchors)
    raws = {HEAD_LO: raw_lo, HEAD_HI: raw_hi}
    grads = {}
    loss = lw.l1 * _l1_term(net)
    for head in spec.heads:
        raw = raws[head.name]
        grad = np.zeros_like(raw)
        to = raw[0, 4::5]  # (slots, gh, gw)
        sig_to = expit(to)
        # Every slot starts as a non-object; responsible cells corrected below.
        loss += lw.noobj * float(np.logaddexp(0.0, to).sum())
        grad[0, 4::5] = lw.noobj * sig_to
        for (hname, slot, i, j), (_box, t) in assigned.items():
            if hname != head.name:
                continue
            base = 5 * slot
            tx, ty, tw, th, t_o = (float(v) for v in raw[0, base : base + 5, i, j])
            sx, sy = expit(tx), expit(ty)
            txh, tyh, twh, thh = t
            loss += lw.coord * (
                (sx - txh) ** 2 + (sy - tyh) ** 2 + (tw - twh) ** 2 + (th - thh) ** 2
            )
            grad[0, base + 0, i, j] = lw.coord * 2 * (sx - txh) * sx * (1 - sx)
            grad[0, base + 1, i, j] = lw.coord * 2 * (sy - tyh) * sy * (1 - sy)
            grad[0, base + 2, i, j] = lw.coord * 2 * (tw - twh)
            grad[0, base + 3, i, j] = lw.coord * 2 * (th - thh)
            # Swap this cell's objectness from the no-object to the object term.
            loss -= lw.noobj * float(np.logaddexp(0.0, t_o))
            loss += lw.obj * float(np.logaddexp(0.0, -t_o))
            s_o = float(expit(t_o))
            grad[0, base + 4, i, j] = lw.obj * (s_o - 1.0)
        grads[head.name] = grad
    return loss, grads[HEAD_LO], grads[HEAD_HI]


def batch_detection_loss(raw_lo, raw_hi, targets_per_image, net, lw):
    """Mean per-image detection loss over a batch; the L1 term enters once."""
    n = raw_lo.shape[0]
    grad_lo = np.zeros_like(raw_lo)
    grad_hi = np.zeros_like(raw_hi)
    total = 0.0
    l1 = lw.l1 * _l1_term(net)
    for b in range(n):
        loss, glo, ghi = detection_loss(
            raw_lo[b : b + 1], raw_hi[b : b + 1], targets_per_image[b],
            net, replace(lw, l1=0.0),
        )
        total += loss
        grad_lo[b] = glo[0]
        grad_hi[b] = ghi[0]
    return total / n + l1, grad_lo / n, grad_hi / n


# ---------------------------------------------------------------------------
# Augmentation.


def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    spread = maxc - minc
    sat = np.where(maxc > 0, spread / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(spread, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    hue = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    hue = np.where(spread > 0, (hue / 6.0) % 1.0, 0.0)
    return np.stack([hue, sat, maxc], axis=-1)


def _hsv_to_rgb(hsv):
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    choices = [
        np.stack([v, t, p], axis=-1),
        np.stack([q, v, p], axis=-1),
        np.stack([p, v, t], axis=-1),
        np.stack([p, q, v], axis=-1),
        np.stack([t, p, v], axis=-1),
        np.stack([v, p, q], axis=-1),
    ]
    out = np.zeros(hsv.shape, dtype=hsv.dtype)
    for idx, choice in enumerate(choices):
        out[i == idx] = choice[i == idx]
    return out


def hflip(image, boxes):
    """Mirror the image and box centers; applying it twice is the identity."""
    flipped = image[:, ::-1].copy()
    out = [
        data_mod.Annotation(a.class_id, BBox(1.0 - a.box.cx, a.box.cy, a.box.w, a.box.h))
        for a in boxes
    ]
    return flipped, out


def augment(image, boxes, rng, flip_prob=0.5, jitter=0.25, hue_max_deg=18.0):
    """Random horizontal flip plus brightness/contrast/saturation/hue jitter.

    Operates on 8-bit RGB before any YUV conversion; box sizes are untouched
    by the photometric ops.
    """
    if rng.random() < flip_prob:
        image, boxes = hflip(image, boxes)
    brightness = rng.uniform(1 - jitter, 1 + jitter)
    contrast = rng.uniform(1 - jitter, 1 + jitter)
    saturation = rng.uniform(1 - jitter, 1 + jitter)
    hue_shift = rng.uniform(-hue_max_deg, hue_max_deg) / 360.0
    img = image.astype(np.float32) / 255.0
    img = img * brightness
    mean = img.mean()
    img = (img - mean) * contrast + mean
    img = np.clip(img, 0.0, 1.0)
    if saturation != 1.0 or hue_shift != 0.0:
        hsv = _rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + hue_shift) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        img = _hsv_to_rgb(hsv)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img, boxes


# ---------------------------------------------------------------------------
# Training loops.


def _load_dataset(index):
    images, targets = [], []
    for image, annotations in data_mod.load_all_samples(index):
        images.append(image)
        targets.append(data_mod.filter_min_size(annotations))
    return images, targets


def _epoch_batches(n, batch, rng):
    """Shuffled index batches covering every sample exactly once; the final
    batch may be short."""
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def _weight_param_names(net):
    return [f"{name}.w" for name, _ in net.all_layers()]


def _layer_lr_scale(net: Network, k_t: int, factor: float):
    """Full rate for backbone layers 1..k_t, reduced for the rest and heads."""
    scale = {}
    slow = 1.0 / factor
    for name, layer in net.all_layers():
        mult = slow
        if name.startswith("l") and int(name[1:]) <= k_t:
            mult = 1.0
        for suffix in (".w", ".b", ".gamma", ".beta"):
            scale[name + suffix] = mult
    return scale


def _diagnostics(net, epoch, batch):
    norms = ", ".join(
        f"{name}|w|={np.abs(layer.conv.weights).max():.3g}"
        for name, layer in net.all_layers()
    )
    return f"epoch {epoch}, batch {batch}, layer max-abs weights: {norms}"


def train_loop(
    net: Network,
    index,
    cfg: TrainConfig,
    lw: LossWeights,
    val_index=None,
    epochs: int | None = None,
    schedule: str = "cosine",
    constant_lr: float | None = None,
    lr_scale=None,
    assert_masks: bool = False,
    augment_data: bool = True,
    log_path=None,
):
    """Shuffled minibatch training with Adam; returns per-epoch metrics.

    Every 5 epochs (and on the last), validation mAP at the 16 px
    center-distance criterion is logged when val_index is given.
    """
    from .evaluate import map_at_distance

    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    images, targets = _load_dataset(index)
    n = len(images)
    batch = min(cfg.batch, n)
    n_batches = -(-n // batch)
    params = trainable_params(net)
    masks = weight_masks(net)
    active_masks = {k: m for k, m in masks.items() if not m.all()}
    state = AdamState(params)
    total_steps = epochs * n_batches
    weight_names = _weight_param_names(net)
    net.invalidate_sparse()
    metrics = []
    log_file = open(log_path, "a") if log_path else None
    try:
        step = 0
        for epoch in range(epochs):
            epoch_losses = []
            for b, ids in enumerate(_epoch_batches(n, batch, rng)):
                xs, batch_targets = [], []
                for i in ids:
                    img, anns = images[i], targets[i]
                    if augment_data:
                        img, anns = augment(img, anns, rng)
                    xs.append(data_mod.rgb_to_yuv(img))
                    batch_targets.append([(a.class_id, a.box) for a in anns])
                x = np.stack(xs)
                (raw_lo, raw_hi), cache = forward_with_cache(net, x)
                loss, grad_lo, grad_hi = batch_detection_loss(
                    raw_lo, raw_hi, batch_targets, net, lw
                )
                if not math.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite training loss; {_diagnostics(net, epoch, b)}"
                    )
                grads = backward(net, cache, grad_lo, grad_hi)
                if lw.l1 > 0:
                    for name in weight_names:
                        grads[name] = grads[name] + lw.l1 * np.sign(params[name])
                if schedule == "cosine":
                    lr = cosine_lr(step, total_steps, cfg)
                else:
                    lr = constant_lr if constant_lr is not None else cfg.finetune_lr
                adam_step(params, grads, state, lr, masks=active_masks, lr_scale=lr_scale)
                if assert_masks:
                    for name, m in active_masks.items():
                        assert np.all(params[name][~m] == 0.0), (
                            f"pruned weights of {name} drifted from zero"
                        )
                epoch_losses.append(loss)
                step += 1
            mean_loss = float(np.mean(epoch_losses))
            val_map = None
            if val_index is not None and ((epoch + 1) % 5 == 0 or epoch == epochs - 1):
                val_map = map_at_distance(net, val_index)
            metrics.append({"epoch": epoch, "loss": mean_loss, "lr": lr, "val_map": val_map})
            if log_file:
                cell = "" if val_map is None else f"{val_map:.4f}"
                log_file.write(f"{epoch},{mean_loss:.6f},{lr:.6g},{cell}\n")
                log_file.flush()
            logger.info("epoch %d: loss %.4f lr %.2e val_map %s",
                        epoch, mean_loss, lr, val_map)
    finally:
        if log_file:
            log_file.close()
    net.invalidate_sparse()
    return metrics


@dataclass
class PruneReport:
    per_layer: dict[str, float]  # pruned fraction per layer
    total: float

    def __str__(self):
        lines = [f"{name}: {frac:.1%} pruned" for name, frac in self.per_layer.items()]
        lines.append(f"total: {self.total:.1%} pruned")
        return "\n".join(lines)


def prune(net: Network, theta: float):
    """Mask every weight below theta times its layer's largest magnitude."""
    if not 0.0 < theta < 1.0:
        raise ValueError("prune threshold must lie in (0, 1)")
    per_layer = {}
    pruned = 0
    total = 0
    for name, layer in net.all_layers():
        w = layer.conv.weights
        top = np.abs(w).max()
        if top == 0.0:
            warnings.warn(f"layer {name} is all zero; masking it entirely")
            mask = np.zeros(w.shape, dtype=bool)
        else:
            mask = np.abs(w) >= theta * top
        layer.mask = mask
        layer.apply_mask()
        per_layer[name] = 1.0 - float(mask.mean())
        pruned += int((~mask).sum())
        total += mask.size
    net.invalidate_sparse()
    return net, PruneReport(per_layer, pruned / total)


def sparsity(net: Network) -> float:
    """Fraction of weights currently masked out."""
    masked = sum(int((~layer.mask).sum()) for _, layer in net.all_layers())
    total = sum(layer.mask.size for _, layer in net.all_layers())
    return masked / total


def finetune_pruned(net: Network, index, cfg: TrainConfig, lw: LossWeights, val_index=None,
                    log_path=None):
    """Constant-rate fine-tuning that keeps every pruned weight at zero."""
    if all(layer.mask.all() for _, layer in net.all_layers()):
        warnings.warn("finetune_pruned called on a network with no pruned weights")
    train_loop(
        net, index, cfg, lw,
        val_index=val_index,
        epochs=cfg.finetune_epochs,
        schedule="constant",
        constant_lr=cfg.finetune_lr,
        assert_masks=True,
        log_path=log_path,
    )
    return net


def transfer_finetune(net: Network, index, cfg: TrainConfig, lw: LossWeights,
                      val_index=None, log_path=None):
    """Retrain the first transfer_layers backbone layers at the scheduled
    rate; all later layers and both heads run at lr / transfer_lr_factor."""
    k_t = cfg.transfer_layers
    if k_t is None or not 0 <= k_t <= len(net.layers):
        raise ValueError(
            f"transfer_layers must lie in 0..{len(net.layers)}, got {k_t}"
        )
    lr_scale = _layer_lr_scale(net, k_t, cfg.transfer_lr_factor)
    train_loop(net, index, cfg, lw, val_index=val_index, lr_scale=lr_scale,
               log_path=log_path)
    return net
