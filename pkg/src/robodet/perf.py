"""Analytic multiply-accumulate counting, sparsity-aware accounting, model
comparison tables, and a single-threaded wall-clock micro-benchmark.

MACs are the unit throughout; batch norm and activation costs are excluded
(well under 1% for these shapes) and bias adds are not counted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec, Network, forward, head_layer_spec

REPORT_FOOTER = "MAC = one multiply-accumulate; batch norm and activation costs excluded."


@dataclass(frozen=True)
class LayerOps:
    name: str
    macs: int
    params: int
    nonzero: float  # fraction of unmasked weights

    @property
    def effective_macs(self) -> float:
        return self.macs * self.nonzero


@dataclass
class OpReport:
    model: str
    layers: list[LayerOps]

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_effective(self) -> float:
        return sum(l.effective_macs for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)


def _mask_fraction(masks, name: str) -> float:
    if masks is None:
        return 1.0
    mask = masks.get(name)
    return 1.0 if mask is None else float(np.asarray(mask).mean())


def count_macs(spec: ModelSpec, masks=None) -> OpReport:
    """Per-layer MACs = k^2 * in_ch * out_ch * out_h * out_w, scaled by the
    layer's nonzero weight fraction when masks are given.  Head convolutions
    are included."""
    layers = []
    h, w = spec.input_hw
    for layer in spec.layers:
        h //= layer.stride
        w //= layer.stride
        name = f"l{layer.index}"
        macs = layer.kernel**2 * layer.in_ch * layer.out_ch * h * w
        params = layer.kernel**2 * layer.in_ch * layer.out_ch
        if not layer.has_bn:
            params += layer.out_ch
        layers.append(LayerOps(name, macs, params, _mask_fraction(masks, name)))
    for head in spec.heads:
        ls = head_layer_spec(spec, head)
        gh, gw = spec.head_grid(head)
        macs = ls.in_ch * ls.out_ch * gh * gw
        params = ls.in_ch * ls.out_ch + ls.out_ch
        layers.append(LayerOps(head.name, macs, params, _mask_fraction(masks, head.name)))
    return OpReport(spec.name, layers)


def count_macs_network(net: Network) -> OpReport:
    return count_macs(net.spec, net.mask_dict())


# Tiny YOLOv3 at 416x416, vendored as a static op-count reference.  Only the
# convolutions appear (pooling/upsampling contribute no MACs); each row is
# (name, kernel, in_ch, out_ch, out_h, out_w).
TINY_YOLO_REF_LAYERS = (
    ("conv1", 3, 3, 16, 416, 416),
    ("conv2", 3, 16, 32, 208, 208),
    ("conv3", 3, 32, 64, 104, 104),
    ("conv4", 3, 64, 128, 52, 52),
    ("conv5", 3, 128, 256, 26, 26),
    ("conv6", 3, 256, 512, 13, 13),
    ("conv7", 3, 512, 1024, 13, 13),
    ("conv8", 1, 1024, 256, 13, 13),
    ("conv9", 3, 256, 512, 13, 13),
    ("conv10_det", 1, 512, 255, 13, 13),
    ("conv11", 1, 256, 128, 13, 13),
    ("conv12", 3, 384, 256, 26, 26),
    ("conv13_det", 1, 256, 255, 26, 26),
)


def count_tiny_yolo_ref() -> OpReport:
    layers = [
        LayerOps(name, k * k * ci * co * h * w, k * k * ci * co + co, 1.0)
        for name, k, ci, co, h, w in TINY_YOLO_REF_LAYERS
    ]
    return OpReport("tiny_yolo_ref", layers)


@dataclass
class CompareTable:
    reports: list[OpReport]

    def ratio(self, a: str, b: str, effective: bool = False) -> float:
        """total MACs of model a divided by model b's."""
        by_name = {r.model: r for r in self.reports}
        pick = (lambda r: r.total_effective) if effective else (lambda r: r.total_macs)
        return pick(by_name[a]) / pick(by_name[b])

    def format(self) -> str:
        width = max(len(r.model) for r in self.reports) + 2
        lines = [f"{'model':<{width}}{'MACs':>14}{'effective':>14}{'params':>10}"]
        for r in self.reports:
            lines.append(
                f"{r.model:<{width}}{r.total_macs:>14,}"
                f"{round(r.total_effective):>14,}{r.total_params:>10,}"
            )
        base = self.reports[0]
        for r in self.reports[1:]:
            lines.append(
                f"{base.model}/{r.model} MAC ratio: "
                f"{base.total_macs / r.total_macs:.2f}x "
                f"(effective {base.total_effective / max(r.total_effective, 1):.2f}x)"
            )
        lines.append(REPORT_FOOTER)
        return "\n".join(lines)


def compare(reports) -> CompareTable:
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("compare needs at least two models")
    return CompareTable(reports)


def preset_comparison() -> CompareTable:
    """Tiny YOLOv3 reference against the three ROBO variants, unpruned."""
    from .model import build_robo, build_robo_bn, build_robo_hr

    return compare([
        count_tiny_yolo_ref(),
        count_macs(build_robo(2)),
        count_macs(build_robo_bn(2)),
        count_macs(build_robo_hr()),
    ])


def format_op_report(report: OpReport, csv: bool = False) -> str:
    if csv:
        lines = ["layer,macs,effective_macs,params,nonzero_fraction"]
        for l in report.layers:
            lines.append(
                f"{l.name},{l.macs},{round(l.effective_macs)},{l.params},{l.nonzero:.4f}"
            )
        lines.append(
            f"total,{report.total_macs},{round(report.total_effective)},{report.total_params},"
        )
        return "\n".join(lines) + "\n"
    lines = [f"model: {report.model}"]
    lines.append(f"{'layer':<12}{'MACs':>14}{'effective':>14}{'params':>10}{'nonzero':>9}")
    for l in report.layers:
        lines.append(
            f"{l.name:<12}{l.macs:>14,}{round(l.effective_macs):>14,}"
            f"{l.params:>10,}{l.nonzero:>9.2f}"
        )
    lines.append(
        f"{'total':<12}{report.total_macs:>14,}{round(report.total_effective):>14,}"
        f"{report.total_params:>10,}"
    )
    lines.append(REPORT_FOOTER)
    return "\n".join(lines)


def benchmark(net: Network, x=None, repeats: int = 10, use_sparse: bool = False):
    """Mean/std milliseconds over single-threaded forward passes, after one
    untimed warmup run."""
    if repeats < 3:
        raise ValueError("benchmark needs repeats >= 3")
    if x is None:
        rng = np.random.default_rng(0)
        x = rng.random((1, 3) + net.spec.input_hw, dtype=np.float32)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy
        import contextlib

        threadpool_limits = lambda limits: contextlib.nullcontext()
    times = []
    with threadpool_limits(limits=1):
        forward(net, x, mode="infer", use_sparse=use_sparse)  # warmup
        for _ in range(repeats):
            start = time.perf_counter()
            forward(net, x, mode="infer", use_sparse=use_sparse)
            times.append((time.perf_counter() - start) * 1000.0)
    return float(np.mean(times)), float(np.std(times))
