"""ROBO detector family: declarative layer tables, network instantiation,
parameter counting, forward/backward passes, and the binary weight format.

Layer indices are 1-based along the backbone; the two detection heads are
1x1 convolutions tapping intermediate feature maps and are handled
separately from the backbone list.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    batch_norm,
    batch_norm_backward,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_backward,
)

CLASS_NAMES = ("ball", "crossing", "goalpost", "robot")
HEAD_LO = "head_lo"
HEAD_HI = "head_hi"

WEIGHT_MAGIC = b"ROBO"
WEIGHT_VERSION = 1

# Density below which a pruned layer is run through the compressed
# (index, value) matrix product instead of the dense one.
SPARSE_DENSITY_THRESHOLD = 0.35


class WeightFormatError(ValueError):
    """Base error for weight file problems."""


class BadMagicError(WeightFormatError):
    pass


class VersionError(WeightFormatError):
    pass


class TruncatedFileError(WeightFormatError):
    pass


class SpecMismatchError(WeightFormatError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kernel: int
    stride: int
    in_ch: int
    out_ch: int
    has_bn: bool = True
    activation: str = "leaky"  # leaky | linear
    tap: str | None = None  # head_lo | head_hi


@dataclass(frozen=True)
class HeadSpec:
    name: str
    source_layer: int
    classes_owned: tuple[int, int]

    @property
    def channels(self) -> int:
        return 5 * len(self.classes_owned)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    k: int
    input_hw: tuple[int, int]  # (height, width)
    layers: tuple[LayerSpec, ...]
    heads: tuple[HeadSpec, HeadSpec]
    classes: tuple[str, ...] = CLASS_NAMES

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    def stride_upto(self, layer_index: int) -> int:
        s = 1
        for layer in self.layers[:layer_index]:
            s *= layer.stride
        return s

    def grid_at(self, layer_index: int) -> tuple[int, int]:
        s = self.stride_upto(layer_index)
        return self.input_hw[0] // s, self.input_hw[1] // s

    def head_grid(self, head: HeadSpec) -> tuple[int, int]:
        return self.grid_at(head.source_layer)

    def head(self, name: str) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise KeyError(name)


# Canonical ROBO backbone: (kernel, stride, in_ch, out_ch) per layer.
_ROBO_BACKBONE = (
    (3, 2, 3, 4),
    (3, 2, 4, 8),
    (3, 2, 8, 16),
    (3, 1, 16, 16),
    (3, 2, 16, 32),
    (3, 1, 32, 32),
    (3, 2, 32, 64),
    (3, 1, 64, 64),
    (3, 1, 64, 64),
    (3, 2, 64, 128),
    (3, 1, 128, 128),
    (1, 1, 128, 256),
    (1, 1, 256, 256),
    (1, 1, 256, 256),
    (1, 1, 256, 256),
)
_ROBO_TAP_HI = 9
_ROBO_TAP_LO = 15

# Classes owned by each head: the low-resolution head predicts the large
# object classes, the higher-resolution one the small classes.
_HEAD_LO_CLASSES = (2, 3)  # goalpost, robot
_HEAD_HI_CLASSES = (0, 1)  # ball, crossing


def _validate(spec: ModelSpec) -> ModelSpec:
    for prev, cur in zip(spec.layers, spec.layers[1:]):
        if prev.out_ch != cur.in_ch:
            raise ValueError(
                f"layer {cur.index} in_ch {cur.in_ch} does not chain from "
                f"layer {prev.index} out_ch {prev.out_ch}"
            )
    for layer in spec.layers:
        if layer.stride == 2 and layer.out_ch <= layer.in_ch:
            raise ValueError(
                f"strided layer {layer.index} must increase channels "
                f"({layer.in_ch} -> {layer.out_ch})"
            )
    taps = {l.tap for l in spec.layers if l.tap}
    if taps != {HEAD_LO, HEAD_HI}:
        raise ValueError(f"expected exactly one tap per head, got {taps}")
    for head in spec.heads:
        if spec.layers[head.source_layer - 1].tap != head.name:
            raise ValueError(f"head {head.name} source layer tap mismatch")
    h, w = spec.input_hw
    if h % spec.total_stride or w % spec.total_stride:
        raise ValueError(
            f"input {h}x{w} not divisible by total stride {spec.total_stride}"
        )
    return spec


def _make_layers(rows, tap_hi: int, tap_lo: int) -> tuple[LayerSpec, ...]:
    layers = []
    for idx, (k, s, ci, co) in enumerate(rows, start=1):
        tap = HEAD_HI if idx == tap_hi else HEAD_LO if idx == tap_lo else None
        layers.append(LayerSpec(idx, k, s, ci, co, has_bn=True, tap=tap))
    return tuple(layers)


def build_robo(k: int = 2) -> ModelSpec:
    """The 15-conv ROBO backbone at input resolution k*64*(4x3)."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    layers = _make_layers(_ROBO_BACKBONE, _ROBO_TAP_HI, _ROBO_TAP_LO)
    heads = (
        HeadSpec(HEAD_LO, _ROBO_TAP_LO, _HEAD_LO_CLASSES),
        HeadSpec(HEAD_HI, _ROBO_TAP_HI, _HEAD_HI_CLASSES),
    )
    return _validate(ModelSpec("robo", k, (k * 192, k * 256), layers, heads))


def build_robo_hr() -> ModelSpec:
    """Low-resolution ROBO variant: first strided conv removed, input fixed
    at 192x256 so the head grids match ROBO at k=2."""
    rows = [(3, 2, 3, 8)] + [list(r) for r in _ROBO_BACKBONE[2:]]
    layers = _make_layers(rows, _ROBO_TAP_HI - 1, _ROBO_TAP_LO - 1)
    heads = (
        HeadSpec(HEAD_LO, _ROBO_TAP_LO - 1, _HEAD_LO_CLASSES),
        HeadSpec(HEAD_HI, _ROBO_TAP_HI - 1, _HEAD_HI_CLASSES),
    )
    return _validate(ModelSpec("robo_hr", 1, (192, 256), layers, heads))


def build_robo_bn(k: int = 2) -> ModelSpec:
    """Bottleneck variant: every channel width doubled, with a 1x1 conv
    halving the input of each 3x3 conv whose input width exceeds 64."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    rows = []
    tap_hi = tap_lo = None
    for idx, (kk, s, ci, co) in enumerate(_ROBO_BACKBONE, start=1):
        ci2 = 3 if idx == 1 else ci * 2
        co2 = co * 2
        if kk == 3 and ci2 > 64:
            rows.append((1, 1, ci2, ci2 // 2))
            ci2 //= 2
        rows.append((kk, s, ci2, co2))
        if idx == _ROBO_TAP_HI:
            tap_hi = len(rows)
        elif idx == _ROBO_TAP_LO:
            tap_lo = len(rows)
    layers = _make_layers(rows, tap_hi, tap_lo)
    heads = (
        HeadSpec(HEAD_LO, tap_lo, _HEAD_LO_CLASSES),
        HeadSpec(HEAD_HI, tap_hi, _HEAD_HI_CLASSES),
    )
    return _validate(ModelSpec("robo_bn", k, (k * 192, k * 256), layers, heads))


_BUILDERS = {
    "robo": lambda k: build_robo(k),
    "robo_bn": lambda k: build_robo_bn(k),
    "robo_hr": lambda k: build_robo_hr(),
}


def build_spec(name: str, k: int = 2) -> ModelSpec:
    try:
        return _BUILDERS[name](k)
    except KeyError:
        raise ValueError(f"unknown model {name!r}") from None


def head_layer_spec(spec: ModelSpec, head: HeadSpec) -> LayerSpec:
    """The implicit 1x1 linear conv realizing a detection head."""
    src_ch = spec.layers[head.source_layer - 1].out_ch
    return LayerSpec(
        index=0,
        kernel=1,
        stride=1,
        in_ch=src_ch,
        out_ch=head.channels,
        has_bn=False,
        activation="linear",
    )


def count_params(spec: ModelSpec, upto_layer: int | None = None) -> int:
    """Weight+bias element count over backbone layers 1..upto_layer.

    Convolutions followed by batch norm carry no bias of their own (the BN
    shift plays that role), so only their weights are counted.
    """
    if upto_layer is None:
        upto_layer = len(spec.layers)
    if upto_layer > len(spec.layers) or upto_layer < 0:
        raise ValueError(f"upto_layer {upto_layer} out of range")
    total = 0
    for layer in spec.layers[:upto_layer]:
        total += layer.kernel * layer.kernel * layer.in_ch * layer.out_ch
        if not layer.has_bn:
            total += layer.out_ch
    return total


def count_head_params(spec: ModelSpec) -> int:
    total = 0
    for head in spec.heads:
        ls = head_layer_spec(spec, head)
        total += ls.in_ch * ls.out_ch + ls.out_ch
    return total


def count_bn_params(spec: ModelSpec) -> int:
    """Learnable batch norm parameters (gamma and beta)."""
    return sum(2 * l.out_ch for l in spec.layers if l.has_bn)


@dataclass
class Layer:
    """Instantiated parameters of one convolution (backbone layer or head)."""

    spec: LayerSpec
    conv: ConvParams
    bn: BatchNormParams | None
    mask: np.ndarray  # bool, same shape as conv.weights; False = pruned

    def apply_mask(self) -> None:
        self.conv.weights[~self.mask] = 0.0


class Network:
    """A ModelSpec bound to weights, BN state, prune masks, and anchors."""

    def __init__(self, spec: ModelSpec, layers, heads, anchors):
        self.spec = spec
        self.layers: list[Layer] = layers
        self.heads: dict[str, Layer] = heads
        self.anchors = anchors  # (4, 2) float32, (width, height) per class
        self._sparse: dict[int, object] | None = None

    def all_layers(self):
        """Backbone layers then heads, with their parameter-name prefixes."""
        for i, layer in enumerate(self.layers, start=1):
            yield f"l{i}", layer
        for name in (HEAD_LO, HEAD_HI):
            yield name, self.heads[name]

    def apply_masks(self) -> None:
        for _, layer in self.all_layers():
            layer.apply_mask()
        self.invalidate_sparse()

    def mask_dict(self) -> dict[str, np.ndarray]:
        return {name: layer.mask for name, layer in self.all_layers()}

    def invalidate_sparse(self) -> None:
        self._sparse = None

    def _sparse_weights(self):
        """Lazily built CSR weight matrices for layers dense enough to prune."""
        if self._sparse is None:
            from scipy.sparse import csr_matrix

            table = {}
            for name, layer in self.all_layers():
                density = layer.mask.mean()
                if density < SPARSE_DENSITY_THRESHOLD:
                    w2 = layer.conv.weights.reshape(layer.conv.out_ch, -1)
                    table[name] = csr_matrix(w2)
            self._sparse = table
        return self._sparse


def init_network(spec: ModelSpec, seed: int = 0) -> Network:
    """He-initialized network with identity BN, all-pass masks, and
    placeholder anchors."""
    rng = np.random.default_rng(seed)

    def make_layer(ls: LayerSpec) -> Layer:
        std = np.sqrt(2.0 / (ls.kernel * ls.kernel * ls.in_ch))
        shape = (ls.out_ch, ls.in_ch, ls.kernel, ls.kernel)
        weights = rng.normal(0.0, std, size=shape).astype(np.float32)
        conv = ConvParams(
            ls.kernel, ls.stride, ls.in_ch, ls.out_ch,
            weights, np.zeros(ls.out_ch, dtype=np.float32),
        )
        bn = BatchNormParams.identity(ls.out_ch) if ls.has_bn else None
        return Layer(ls, conv, bn, np.ones(shape, dtype=bool))

    layers = [make_layer(ls) for ls in spec.layers]
    heads = {h.name: make_layer(head_layer_spec(spec, h)) for h in spec.heads}
    anchors = np.full((len(CLASS_NAMES), 2), 0.1, dtype=np.float32)
    return Network(spec, layers, heads, anchors)


def _layer_forward(layer: Layer, x, mode, sparse_w=None, cache=None):
    z = conv2d_forward(x, layer.conv, sparse_w=sparse_w)
    zn = batch_norm(z, layer.bn, mode) if layer.bn is not None else z
    a = leaky_relu(zn) if layer.spec.activation == "leaky" else zn
    if cache is not None:
        cache.append({"x": x, "z": z, "zn": zn})
    return a


def forward(net: Network, x: np.ndarray, mode: str = "infer", use_sparse: bool = False):
    """Run the network; returns (raw_lo, raw_hi) head output tensors."""
    out, _ = _forward_impl(net, x, mode, use_sparse, keep_cache=False)
    return out


def forward_with_cache(net: Network, x: np.ndarray):
    """Train-mode forward keeping per-layer activations for backward()."""
    return _forward_impl(net, x, "train", False, keep_cache=True)


def _forward_impl(net, x, mode, use_sparse, keep_cache):
    expected = (x.shape[0], 3) + net.spec.input_hw
    if x.ndim != 4 or x.shape[1:] != expected[1:]:
        raise ShapeError(
            f"input shape {tuple(x.shape)} does not match model input "
            f"(n, 3, {net.spec.input_hw[0]}, {net.spec.input_hw[1]})"
        )
    sparse = net._sparse_weights() if use_sparse else {}
    cache = [] if keep_cache else None
    taps = {}
    h = x
    for i, layer in enumerate(net.layers, start=1):
        h = _layer_forward(layer, h, mode, sparse.get(f"l{i}"), cache)
        if layer.spec.tap:
            taps[layer.spec.tap] = h
    raws = {}
    head_cache = {}
    for name in (HEAD_LO, HEAD_HI):
        layer = net.heads[name]
        raws[name] = conv2d_forward(taps[name], layer.conv, sparse_w=sparse.get(name))
        head_cache[name] = taps[name]
    full_cache = {"layers": cache, "taps": head_cache} if keep_cache else None
    return (raws[HEAD_LO], raws[HEAD_HI]), full_cache


def backward(net: Network, cache, grad_lo: np.ndarray, grad_hi: np.ndarray):
    """Backprop head-output gradients to every parameter.

    Returns a dict keyed like trainable_params(); input gradients are not
    returned (the image is not a parameter).
    """
    grads: dict[str, np.ndarray] = {}
    tap_grads = {}
    for name, g in ((HEAD_LO, grad_lo), (HEAD_HI, grad_hi)):
        layer = net.heads[name]
        gx, gw, gb = conv2d_backward(cache["taps"][name], layer.conv, g)
        grads[f"{name}.w"] = gw
        grads[f"{name}.b"] = gb
        tap_grads[name] = gx
    g = None
    for i in range(len(net.layers), 0, -1):
        layer = net.layers[i - 1]
        entry = cache["layers"][i - 1]
        if layer.spec.tap:
            tg = tap_grads[layer.spec.tap]
            g = tg if g is None else g + tg
        if layer.spec.activation == "leaky":
            g = leaky_relu_backward(entry["zn"], g)
        if layer.bn is not None:
            g, dgamma, dbeta = batch_norm_backward(entry["z"], layer.bn, g, "train")
            grads[f"l{i}.gamma"] = dgamma
            grads[f"l{i}.beta"] = dbeta
            g, dw, _ = conv2d_backward(entry["x"], layer.conv, g)
        else:
            g, dw, db = conv2d_backward(entry["x"], layer.conv, g)
            grads[f"l{i}.b"] = db
        grads[f"l{i}.w"] = dw
    return grads


def trainable_params(net: Network) -> dict[str, np.ndarray]:
    """Name -> array views of every trainable parameter (mutated in place).

    Conv biases under batch norm are excluded; they stay zero.
    """
    params: dict[str, np.ndarray] = {}
    for name, layer in net.all_layers():
        params[f"{name}.w"] = layer.conv.weights
        if layer.bn is not None:
            params[f"{name}.gamma"] = layer.bn.gamma
            params[f"{name}.beta"] = layer.bn.beta
        else:
            params[f"{name}.b"] = layer.conv.bias
    return params


def weight_masks(net: Network) -> dict[str, np.ndarray]:
    """Prune masks keyed like the weight entries of trainable_params()."""
    return {f"{name}.w": layer.mask for name, layer in net.all_layers()}


# ---------------------------------------------------------------------------
# Binary weight file format (little-endian).


def save_weights(net: Network, path) -> None:
    chunks = [WEIGHT_MAGIC, struct.pack("<H", WEIGHT_VERSION)]
    name = net.spec.name.encode()
    chunks.append(struct.pack("<H", len(name)))
    chunks.append(name)
    layer_list = list(net.all_layers())
    chunks.append(struct.pack("<HH", net.spec.k, len(layer_list)))
    for _, layer in layer_list:
        c = layer.conv
        chunks.append(struct.pack("<HHHH", c.kernel, c.stride, c.in_ch, c.out_ch))
        w = np.ascontiguousarray(c.weights, dtype="<f4")
        chunks.append(struct.pack("<I", w.size))
        chunks.append(w.tobytes())
        chunks.append(np.ascontiguousarray(c.bias, dtype="<f4").tobytes())
        if layer.bn is not None:
            chunks.append(struct.pack("<B", 1))
            bn = np.stack([layer.bn.gamma, layer.bn.beta, layer.bn.mean, layer.bn.var])
            chunks.append(np.ascontiguousarray(bn, dtype="<f4").tobytes())
        else:
            chunks.append(struct.pack("<B", 0))
        packed = np.packbits(layer.mask.reshape(-1), bitorder="little").tobytes()
        chunks.append(struct.pack("<I", len(packed)))
        chunks.append(packed)
    chunks.append(np.ascontiguousarray(net.anchors, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.context = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated while reading {self.context}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def load_weights(path) -> Network:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != WEIGHT_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a robodet weight file")
    (version,) = r.unpack("<H")
    if version != WEIGHT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {WEIGHT_VERSION}")
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode()
    k, layer_count = r.unpack("<HH")
    spec = build_spec(name, k)
    net = init_network(spec, seed=0)
    expected = list(net.all_layers())
    if layer_count != len(expected):
        raise SpecMismatchError(
            f"{path}: {layer_count} layers in file, spec {name} has {len(expected)}"
        )
    for lname, layer in expected:
        r.context = f"layer {lname}"
        kernel, stride, in_ch, out_ch = r.unpack("<HHHH")
        c = layer.conv
        if (kernel, stride, in_ch, out_ch) != (c.kernel, c.stride, c.in_ch, c.out_ch):
            raise SpecMismatchError(
                f"{path}: layer {lname} geometry "
                f"{(kernel, stride, in_ch, out_ch)} does not match spec "
                f"{(c.kernel, c.stride, c.in_ch, c.out_ch)}"
            )
        (wcount,) = r.unpack("<I")
        if wcount != c.weights.size:
            raise SpecMismatchError(
                f"{path}: layer {lname} has {wcount} weights, spec expects {c.weights.size}"
            )
        c.weights = r.floats(wcount).reshape(c.weights.shape)
        c.bias = r.floats(out_ch)
        (bn_flag,) = r.unpack("<B")
        if bn_flag != (layer.bn is not None):
            raise SpecMismatchError(f"{path}: layer {lname} batch norm flag mismatch")
        if bn_flag:
            vals = r.floats(4 * out_ch).reshape(4, out_ch)
            layer.bn.gamma, layer.bn.beta = vals[0], vals[1]
            layer.bn.mean, layer.bn.var = vals[2], vals[3]
        (mask_bytes,) = r.unpack("<I")
        packed = np.frombuffer(r.take(mask_bytes), dtype=np.uint8)
        bits = np.unpackbits(packed, bitorder="little")[: c.weights.size]
        layer.mask = bits.astype(bool).reshape(c.weights.shape)
    r.context = "anchors"
    net.anchors = r.floats(2 * len(CLASS_NAMES)).reshape(len(CLASS_NAMES), 2)
    net.apply_masks()
    return net


# ---------------------------------------------------------------------------
# Textual backbone format: `conv <kernel> <stride> <in> <out> [bn] [tap=...]`.


def spec_to_text(spec: ModelSpec) -> str:
    lines = [f"# {spec.name} k={spec.k} input={spec.input_hw[0]}x{spec.input_hw[1]}"]
    for l in spec.layers:
        parts = ["conv", str(l.kernel), str(l.stride), str(l.in_ch), str(l.out_ch)]
        if l.has_bn:
            parts.append("bn")
        if l.tap:
            parts.append(f"tap={l.tap}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def spec_from_text(text: str, name: str = "custom", k: int = 1) -> ModelSpec:
    rows = []
    taps = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "conv" or len(parts) < 5:
            raise ValueError(f"line {lineno}: expected 'conv <k> <s> <in> <out> ...'")
        try:
            kk, s, ci, co = (int(p) for p in parts[1:5])
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer layer field") from None
        has_bn = "bn" in parts[5:]
        tap = None
        for extra in parts[5:]:
            if extra.startswith("tap="):
                tap = extra[4:]
                if tap not in (HEAD_LO, HEAD_HI):
                    raise ValueError(f"line {lineno}: unknown tap {tap!r}")
        idx = len(rows) + 1
        rows.append(LayerSpec(idx, kk, s, ci, co, has_bn=has_bn, tap=tap))
        if tap:
            taps[tap] = idx
    if set(taps) != {HEAD_LO, HEAD_HI}:
        raise ValueError("model text must tap exactly one head_lo and one head_hi")
    heads = (
        HeadSpec(HEAD_LO, taps[HEAD_LO], _HEAD_LO_CLASSES),
        HeadSpec(HEAD_HI, taps[HEAD_HI], _HEAD_HI_CLASSES),
    )
    return _validate(ModelSpec(name, k, (k * 192, k * 256), tuple(rows), heads))
