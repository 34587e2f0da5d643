"""WeatherNet: stacked inception-style LiLaBlocks over 2-channel lidar images."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..core import check_finite
from .layers import ConvSpec, conv_backward, conv_forward, dropout_mask

# (name, kernel_h, kernel_w, dilation) of the four parallel branches, in serialization order.
# Kernel shapes are rows x cols, i.e. rings x azimuth.
BRANCHES = (
    ("conv7x3", 7, 3, 1),
    ("conv3x3", 3, 3, 1),
    ("dilated3x3", 3, 3, 2),
    ("conv3x7", 3, 7, 1),
)


def lila_param_count(c, n):
    """Trainable parameters of a LiLaBlock with ``c`` inputs and branch width ``n``."""
    return 60 * c * n + 4 * n * n + 5 * n


@dataclass(frozen=True)
class LiLaBlockSpec:
    in_channels: int
    width: int

    def branch_convs(self):
        return [(name, ConvSpec(self.in_channels, self.width, kh, kw, d, d)) for name, kh, kw, d in BRANCHES]

    def bottleneck(self):
        return ConvSpec(4 * self.width, self.width)

    @property
    def param_count(self):
        return sum(s.param_count for _, s in self.branch_convs()) + self.bottleneck().param_count


@dataclass(frozen=True)
class WeatherNetSpec:
    trunk_widths: tuple = (32, 64, 96, 96)
    final_width: int = 64
    num_classes: int = 3
    in_channels: int = 2
    dropout: float = 0.5
    distance_scale: float = 0.02  # metres -> network input units

    def blocks(self):
        specs, c = [], self.in_channels
        for n in (*self.trunk_widths, self.final_width):
            specs.append(LiLaBlockSpec(c, n))
            c = n
        return specs

    def head(self):
        return ConvSpec(self.final_width, self.num_classes)

    def layout(self):
        """``(name, shape)`` of every parameter tensor in serialization order."""
        out = []
        for b, block in enumerate(self.blocks()):
            for name, conv in block.branch_convs():
                out += [(f"block{b}.{name}.weight", conv.weight_shape), (f"block{b}.{name}.bias", (conv.out_channels,))]
            bn = block.bottleneck()
            out += [(f"block{b}.bottleneck.weight", bn.weight_shape), (f"block{b}.bottleneck.bias", (bn.out_channels,))]
        h = self.head()
        out += [("head.weight", h.weight_shape), ("head.bias", (h.out_channels,))]
        return out

    def block_param_counts(self):
        return [b.param_count for b in self.blocks()] + [self.head().param_count]

    @property
    def param_count(self):
        return sum(self.block_param_counts())

    def to_dict(self):
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["trunk_widths"] = tuple(d["trunk_widths"])
        return cls(**d)


def init_params(spec: WeatherNetSpec, seed=0, dtype=np.float64):
    """Fan-in scaled uniform weights (ReLU gain), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.layout():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _lila_forward(x, p, prefix, block: LiLaBlockSpec):
    outs, cache = [], {"x": x}
    for name, conv in block.branch_convs():
        y = conv_forward(x, p[f"{prefix}.{name}.weight"], p[f"{prefix}.{name}.bias"], conv)
        np.maximum(y, 0, out=y)
        outs.append(y)
    cat = np.concatenate(outs, axis=0)
    y = conv_forward(cat, p[f"{prefix}.bottleneck.weight"], p[f"{prefix}.bottleneck.bias"], block.bottleneck())
    np.maximum(y, 0, out=y)
    cache["cat"] = cat
    cache["y"] = y
    return y, cache


def _lila_backward(dy, cache, p, prefix, block: LiLaBlockSpec, grads, need_dx=True):
    dy = dy * (cache["y"] > 0)
    dcat, dw, db = conv_backward(cache["cat"], p[f"{prefix}.bottleneck.weight"], dy, block.bottleneck())
    grads[f"{prefix}.bottleneck.weight"], grads[f"{prefix}.bottleneck.bias"] = dw, db
    dcat *= cache["cat"] > 0
    x = cache["x"]
    dx = np.zeros_like(x) if need_dx else None
    n = block.width
    for k, (name, conv) in enumerate(block.branch_convs()):
        dxk, dw, db = conv_backward(x, p[f"{prefix}.{name}.weight"], dcat[k * n:(k + 1) * n], conv, need_dx)
        grads[f"{prefix}.{name}.weight"], grads[f"{prefix}.{name}.bias"] = dw, db
        if need_dx:
            dx += dxk
    return dx


class WeatherNet:
    """Parameters plus forward/backward passes of the network.

    Forward takes channel-major input ``(2, B, H, W)`` and returns logits
    ``(num_classes, B, H, W)``.
    """

    def __init__(self, spec: WeatherNetSpec = WeatherNetSpec(), params=None, seed=0, dtype=np.float64):
        self.spec = spec
        self.params = params if params is not None else init_params(spec, seed, dtype)
        layout = spec.layout()
        if [k for k, _ in layout] != list(self.params):
            raise ValueError("parameter names do not match the network layout")
        for name, shape in layout:
            if self.params[name].shape != tuple(shape):
                raise ValueError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        return WeatherNet(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def make_input(self, distance, intensity):
        """Stack batches of distance and intensity images into the ``(2, B, H, W)`` input."""
        d = np.asarray(distance, dtype=self.dtype)
        i = np.asarray(intensity, dtype=self.dtype)
        if d.shape != i.shape:
            raise ValueError(f"distance {d.shape} and intensity {i.shape} differ")
        if d.ndim == 2:
            d, i = d[None], i[None]
        return np.stack([d * self.spec.distance_scale, i])

    def forward(self, x, train_mode=False, rng=None):
        """Logits and a cache for :meth:`backward`. Dropout is active only in ``train_mode``."""
        if x.shape[0] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[0]}")
        check_finite("network input", x)
        p = self.params
        caches = []
        h = x.astype(self.dtype, copy=False)
        blocks = self.spec.blocks()
        n_trunk = len(self.spec.trunk_widths)
        mask = None
        for b, block in enumerate(blocks):
            if b == n_trunk and train_mode and self.spec.dropout > 0:
                if rng is None:
                    rng = np.random.default_rng(0)
                mask = dropout_mask(h.shape, self.spec.dropout, rng, h.dtype)
                h = h * mask
            h, cache = _lila_forward(h, p, f"block{b}", block)
            caches.append(cache)
        logits = conv_forward(h, p["head.weight"], p["head.bias"], self.spec.head())
        return logits, {"blocks": caches, "last": h, "mask": mask}

    def backward(self, cache, dlogits):
        """Parameter gradients (same keys as ``params``) for upstream gradient ``dlogits``."""
        grads = {}
        p = self.params
        dh, dw, db = conv_backward(cache["last"], p["head.weight"], dlogits, self.spec.head())
        grads["head.weight"], grads["head.bias"] = dw, db
        blocks = self.spec.blocks()
        n_trunk = len(self.spec.trunk_widths)
        for b in range(len(blocks) - 1, -1, -1):
            dh = _lila_backward(dh, cache["blocks"][b], p, f"block{b}", blocks[b], grads, need_dx=b > 0)
            if b == n_trunk and cache["mask"] is not None:
                dh = dh * cache["mask"]
        return {k: grads[k] for k in p}

    def logits(self, distance, intensity):
        """Inference logits ``(num_classes, H, W)`` for one image (or ``(K, B, H, W)`` for a batch)."""
        x = self.make_input(distance, intensity)
        out, _ = self.forward(x, train_mode=False)
        return out[:, 0] if np.ndim(distance) == 2 else out


def weathernet_forward(distance, intensity, net: WeatherNet, train_mode=False, rng=None):
    """Per-pixel class logits ``(3, H, W)`` for one distance/intensity pair."""
    x = net.make_input(distance, intensity)
    logits, _ = net.forward(x, train_mode, rng)
    return logits[:, 0]


def save_checkpoint(path, net: WeatherNet, epoch=0, seed=0, extra=None):
    """JSON header line followed by all parameters as little-endian float64 in layout order."""
    header = {
        "format": "weathernet-checkpoint-1",
        "spec": net.spec.to_dict(),
        "epoch": epoch,
        "seed": seed,
        "layout": [[k, list(s)] for k, s in net.spec.layout()],
    }
    if extra:
        header.update(extra)
    blob = b"".join(net.params[k].astype("<f8").tobytes() for k, _ in net.spec.layout())
    Path(path).write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    end = buf.find(b"\n")
    if end < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(buf[:end])
    spec = WeatherNetSpec.from_dict(header["spec"])
    params, off = {}, end + 1
    for name, shape in spec.layout():
        n = int(np.prod(shape))
        if off + 8 * n > len(buf):
            raise ValueError(f"{path}: truncated parameter blob at byte offset {off} ({name})")
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes after parameters")
    return WeatherNet(spec, params), header


