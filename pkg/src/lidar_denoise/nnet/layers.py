"""Dense layer primitives with hand-written backward passes.

Internally activations are channel-major, ``(C, B, H, W)``, so that every
convolution tap is a single ``(O, C) @ (C, B*H*W)`` matrix product. The
public :func:`conv2d` takes the usual ``(B, C, H, W)`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE = 255


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 1
    kernel_w: int = 1
    dilation_h: int = 1
    dilation_w: int = 1

    def __post_init__(self):
        if self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError("kernel sizes must be odd for shape-preserving padding")
        if self.dilation_h < 1 or self.dilation_w < 1:
            raise ValueError("dilation must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def param_count(self):
        return self.out_channels * self.in_channels * self.kernel_h * self.kernel_w + self.out_channels

    @property
    def padding(self):
        return (self.dilation_h * (self.kernel_h - 1) // 2, self.dilation_w * (self.kernel_w - 1) // 2)


def _pad(x, spec: ConvSpec):
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap_offsets(spec: ConvSpec, Wp):
    """Flat offsets of every kernel tap inside a padded ``(Hp, Wp)`` image."""
    for ki in range(spec.kernel_h):
        for kj in range(spec.kernel_w):
            yield ki, kj, ki * spec.dilation_h * Wp + kj * spec.dilation_w


def _flat_geometry(spec: ConvSpec, B, H, W):
    ph, pw = spec.padding
    Hp, Wp = H + 2 * ph, W + 2 * pw
    # output position (b, i, j) lives at flat index b*Hp*Wp + i*Wp + j; the
    # extended range covers all of them, with junk in the padding gaps
    L = (B - 1) * Hp * Wp + (H - 1) * Wp + W
    return Hp, Wp, L


def _crop_flat(y_ext, B, H, W, Hp, Wp):
    """Pick the valid ``(B, H, W)`` positions out of an extended flat result."""
    O = y_ext.shape[0]
    full = np.zeros((O, B * Hp * Wp), dtype=y_ext.dtype)
    full[:, : y_ext.shape[1]] = y_ext
    return full.reshape(O, B, Hp, Wp)[:, :, :H, :W]


def _scatter_flat(dy, Hp, Wp, L):
    """Inverse of :func:`_crop_flat`: embed ``(O, B, H, W)`` into the extended flat layout."""
    O, B, H, W = dy.shape
    full = np.zeros((O, B, Hp, Wp), dtype=dy.dtype)
    full[:, :, :H, :W] = dy
    return full.reshape(O, -1)[:, :L]


def conv_forward(x, w, b, spec: ConvSpec):
    """Zero-padded 'same' convolution (cross-correlation) of a ``(C, B, H, W)`` tensor.

    Each tap is one matrix product against a strided view of the flattened
    padded input, so no shifted copies of the activations are made.
    """
    C, B, H, W = x.shape
    if C != spec.in_channels or w.shape != spec.weight_shape:
        raise ValueError(f"conv expects {spec.in_channels} input channels and weights {spec.weight_shape}, "
                         f"got input {x.shape} and weights {w.shape}")
    if spec.kernel_h == 1 and spec.kernel_w == 1:
        y = np.ascontiguousarray(w[:, :, 0, 0]) @ x.reshape(C, -1)
        y += b[:, None]
        return y.reshape(spec.out_channels, B, H, W)
    Hp, Wp, L = _flat_geometry(spec, B, H, W)
    xf = _pad(x, spec).reshape(C, -1)
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # (kh, kw, O, C)
    y = np.empty((spec.out_channels, L), dtype=x.dtype)
    tmp = np.empty_like(y)
    first = True
    for ki, kj, off in _tap_offsets(spec, Wp):
        if first:
            np.matmul(wt[ki, kj], xf[:, off:off + L], out=y)
            first = False
        else:
            np.matmul(wt[ki, kj], xf[:, off:off + L], out=tmp)
            y += tmp
    y += b[:, None]
    return np.ascontiguousarray(_crop_flat(y, B, H, W, Hp, Wp))


def conv_backward(x, w, dy, spec: ConvSpec, need_dx=True):
    """Gradients ``(dx, dw, db)`` of :func:`conv_forward`; ``dx`` is None unless requested."""
    C, B, H, W = x.shape
    O = spec.out_channels
    db = dy.reshape(O, -1).sum(axis=1)
    if spec.kernel_h == 1 and spec.kernel_w == 1:
        dy2 = dy.reshape(O, -1)
        dw = (dy2 @ x.reshape(C, -1).T).reshape(w.shape)
        dx = (np.ascontiguousarray(w[:, :, 0, 0].T) @ dy2).reshape(x.shape) if need_dx else None
        return dx, dw, db
    Hp, Wp, L = _flat_geometry(spec, B, H, W)
    xf = _pad(x, spec).reshape(C, -1)
    dye = _scatter_flat(dy, Hp, Wp, L)
    dwt = np.empty((spec.kernel_h, spec.kernel_w, O, C), dtype=w.dtype)
    for ki, kj, off in _tap_offsets(spec, Wp):
        np.matmul(dye, xf[:, off:off + L].T, out=dwt[ki, kj])
    dw = np.ascontiguousarray(dwt.transpose(2, 3, 0, 1))
    dx = None
    if need_dx:
        wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (kh, kw, C, O)
        dxf = np.zeros((C, B * Hp * Wp), dtype=x.dtype)
        tmp = np.empty((C, L), dtype=x.dtype)
        for ki, kj, off in _tap_offsets(spec, Wp):
            np.matmul(wt[ki, kj], dye, out=tmp)
            dxf[:, off:off + L] += tmp
        ph, pw = spec.padding
        dx = np.ascontiguousarray(dxf.reshape(C, B, Hp, Wp)[:, :, ph:ph + H, pw:pw + W])
    return dx, dw, db


def conv2d(input, spec: ConvSpec, weights, bias):
    """Shape-preserving 2-D convolution of a ``(B, C, H, W)`` tensor."""
    x = np.asarray(input)
    if x.ndim != 4:
        raise ValueError(f"expected a 4-D tensor, got shape {x.shape}")
    y = conv_forward(np.ascontiguousarray(x.transpose(1, 0, 2, 3)), weights, bias, spec)
    return y.transpose(1, 0, 2, 3)


def conv2d_backward(input, spec: ConvSpec, weights, grad_output):
    """``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d`, all in ``(B, C, H, W)`` layout."""
    x = np.ascontiguousarray(np.asarray(input).transpose(1, 0, 2, 3))
    dy = np.ascontiguousarray(np.asarray(grad_output).transpose(1, 0, 2, 3))
    dx, dw, db = conv_backward(x, weights, dy, spec)
    return dx.transpose(1, 0, 2, 3), dw, db


def relu(x):
    return np.maximum(x, 0)


def dropout_mask(shape, rate, rng, dtype):
    """Inverted-dropout mask: zeros with probability ``rate``, ``1/(1-rate)`` elsewhere."""
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def softmax(logits, axis=0):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction="mean", class_weights=None):
    """Per-pixel cross-entropy over class axis 0 of ``(K, B, H, W)`` logits.

    Pixels labelled ``IGNORE`` contribute neither loss nor gradient. With
    ``reduction="mean"`` the loss is divided by the (weighted) number of
    counted pixels. Returns ``(loss, dlogits)``.
    """
    K = logits.shape[0]
    valid = labels != IGNORE
    safe = np.where(valid, labels, 0).astype(np.int64)
    if np.any(safe >= K):
        raise ValueError(f"label outside [0, {K})")
    z = logits - logits.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    picked = np.take_along_axis(z, safe[None], axis=0)[0]
    nll = logsum - picked
    weight = valid.astype(logits.dtype)
    if class_weights is not None:
        weight = weight * np.asarray(class_weights, dtype=logits.dtype)[safe]
    total = weight.sum()
    scale = 1.0 if reduction == "sum" else (1.0 / total if total > 0 else 0.0)
    loss = float((nll * weight).sum() * scale)
    grad = np.exp(z - logsum[None])
    np.put_along_axis(grad, safe[None], np.take_along_axis(grad, safe[None], axis=0) - 1.0, axis=0)
    grad *= (weight * scale)[None]
    return loss, grad
