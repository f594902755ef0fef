"""Differentiable layers the logo network is assembled from.

Image tensors are ``H x W x C`` or batched ``N x H x W x C``; every spatial op
accepts both and returns the same rank it was given. There is no general
broadcasting: each op documents exactly which shapes it combines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record, sum_all
from .errors import ShapeError

BCE_EPS = 1e-7


@dataclass
class ConvParams:
    """Weights ``kh x kw x in_ch x out_ch`` plus bias, stride and padding mode."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw, _, cout = self.weight.shape
        if kh not in (1, 2, 3) or kw not in (1, 2, 3):
            raise ShapeError(f"unsupported kernel size {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch {cout}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', not {self.padding!r}")

    @property
    def in_ch(self) -> int:
        return self.weight.shape[2]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[3]


def _as4d(x: Tensor, what: str) -> np.ndarray:
    if x.data.ndim == 3:
        return x.data[None]
    if x.data.ndim == 4:
        return x.data
    raise ShapeError(f"{what} expects an HxWxC or NxHxWxC tensor, got shape {x.shape}")


def _restore(arr: np.ndarray, like: Tensor) -> np.ndarray:
    return arr[0] if like.data.ndim == 3 else arr


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record("mul", [a, b], a.data * b.data, lambda g: (g * b.data, g * a.data))


def mean(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return record("mean", [x], np.asarray(x.data.mean(), dtype=x.dtype), grad_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return record("reshape", [x], out, lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return record("relu", [x], np.where(on, x.data, 0).astype(x.dtype), lambda g: (g * on,), branch=on)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return record("sigmoid", [x], out, lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", [x], out, lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------------------
# convolution and resampling


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-d cross-correlation via im2col.

    Same padding follows the usual convention of putting the odd pixel on the
    bottom/right, so a 2x2 kernel pads one row and one column there only.
    """
    xd = _as4d(x, "conv2d")
    w, b = p.weight.data, p.bias.data
    kh, kw, cin, cout = w.shape
    n, h, wd, c = xd.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, weights expect {cin}")
    s = p.stride
    if p.padding == "same":
        pt, pb = _same_pads(h, kh, s)
        pl, pr = _same_pads(wd, kw, s)
    else:
        if h < kh or wd < kw:
            raise ShapeError(f"conv2d: {h}x{wd} input is smaller than {kh}x{kw} kernel")
        pt = pb = pl = pr = 0
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else xd
    ho = (h + pt + pb - kh) // s + 1
    wo = (wd + pl + pr - kw) // s + 1

    def window(i, j):
        return (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    if kh == kw == 1 and s == 1:
        cols = xp
    else:
        cols = np.concatenate([xp[window(i, j)] for i, j in offsets], axis=-1)
    cols2 = cols.reshape(-1, kh * kw * cin)
    wm = w.reshape(kh * kw * cin, cout)
    out = (cols2 @ wm + b).reshape(n, ho, wo, cout)

    def grad_fn(g):
        g2 = g.reshape(-1, cout)
        dw = (cols2.T @ g2).reshape(w.shape)
        db = g2.sum(axis=0)
        dcols = (g2 @ wm.T).reshape(n, ho, wo, kh * kw, cin)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for idx, (i, j) in enumerate(offsets):
            dxp[window(i, j)] += dcols[:, :, :, idx, :]
        dx = dxp[:, pt : pt + h, pl : pl + wd, :]
        return _restore(dx, x), dw, db

    return record("conv2d", [x, p.weight, p.bias], _restore(out, x), grad_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pool, stride 2. Ties route the gradient to the first element in row-major order."""
    xd = _as4d(x, "maxpool2x2")
    n, h, w, c = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {h}x{w}")
    blocks = xd.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg, g[..., None] if x.data.ndim == 4 else g[None, ..., None], axis=-1)
        dx = gb.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (_restore(dx, x),)

    return record("maxpool2x2", [x], _restore(out, x), grad_fn, branch=arg)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xd = _as4d(x, "upsample_nearest2x")
    n, h, w, c = xd.shape
    out = xd.repeat(2, axis=1).repeat(2, axis=2)

    def grad_fn(g):
        g4 = g if x.data.ndim == 4 else g[None]
        return (_restore(g4.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)), x),)

    return record("upsample_nearest2x", [x], _restore(out, x), grad_fn)


def tile_spatial(code: Tensor, height: int, width: int) -> Tensor:
    """Replicate a 1x1xD code over an ``height x width`` grid."""
    cd = _as4d(code, "tile_spatial")
    if cd.shape[1:3] != (1, 1):
        raise ShapeError(f"tile_spatial: input must be 1x1 spatially, got {code.shape}")
    out = np.broadcast_to(cd, (cd.shape[0], height, width, cd.shape[3])).copy()

    def grad_fn(g):
        g4 = g if code.data.ndim == 4 else g[None]
        return (_restore(g4.sum(axis=(1, 2), keepdims=True), code),)

    return record("tile_spatial", [code], _restore(out, code), grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: spatial shapes {a.shape[:-1]} and {b.shape[:-1]} differ")
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return record("concat_channels", [a, b], out, lambda g: (g[..., :ca], g[..., ca:]))


# ---------------------------------------------------------------------------
# query/feature similarity (cosine ablation)


def cosine_map(f: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity between every pixel of ``f`` and the 1x1 vector ``v``.

    Returns ``H x W x 1``. A zero-norm operand gives similarity 0 (and zero
    gradient) at that position.
    """
    fd = _as4d(f, "cosine_map")
    vd = _as4d(v, "cosine_map")
    if vd.shape[1:3] != (1, 1) or vd.shape[3] != fd.shape[3] or vd.shape[0] != fd.shape[0]:
        raise ShapeError(f"cosine_map: cannot compare {f.shape} with {v.shape}")
    dot = (fd * vd).sum(axis=-1, keepdims=True)
    nf = np.sqrt((fd * fd).sum(axis=-1, keepdims=True))
    nv = np.sqrt((vd * vd).sum(axis=-1, keepdims=True))
    denom = nf * nv
    ok = denom > 0
    safe = np.where(ok, denom, 1)
    cos = np.where(ok, dot / safe, 0).astype(fd.dtype)

    def grad_fn(g):
        g4 = (g if f.data.ndim == 4 else g[None]) * ok
        nf_safe = np.where(nf > 0, nf, 1)
        nv_safe = np.where(nv > 0, nv, 1)
        df = g4 * (vd / safe - cos * fd / nf_safe**2)
        dv = (g4 * (fd / safe - cos * vd / nv_safe**2)).sum(axis=(1, 2), keepdims=True)
        return _restore(df, f), _restore(dv, v)

    return record("cosine_map", [f, v], _restore(cos, f), grad_fn, branch=ok)


def scale_channels(f: Tensor, s: Tensor) -> Tensor:
    """Multiply every channel of ``f`` (HxWxC) by the single-channel map ``s`` (HxWx1)."""
    if s.shape[:-1] != f.shape[:-1] or s.shape[-1] != 1:
        raise ShapeError(f"scale_channels: map {s.shape} does not fit features {f.shape}")

    def grad_fn(g):
        return g * s.data, (g * f.data).sum(axis=-1, keepdims=True)

    return record("scale_channels", [f, s], f.data * s.data, grad_fn)


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean two-term binary cross entropy over all pixels.

    ``pred`` holds probabilities; it is clamped to ``[eps, 1-eps]`` before the
    log, and clamped positions receive zero gradient. ``target`` must be 0/1.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target must be binary")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, BCE_EPS, 1 - BCE_EPS)
    n = pred.size
    loss = -(t * np.log(p) + (1 - t) * np.log1p(-p)).sum() / n
    inside = (pred.data >= BCE_EPS) & (pred.data <= 1 - BCE_EPS)

    def grad_fn(g):
        return (g * inside * (-(t / p) + (1 - t) / (1 - p)) / n,)

    return record("bce_loss", [pred], np.asarray(loss, dtype=pred.dtype), grad_fn, branch=inside)


__all__ = [
    "BCE_EPS",
    "ConvParams",
    "add",
    "bce_loss",
    "concat_channels",
    "conv2d",
    "cosine_map",
    "maxpool2x2",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale_channels",
    "sigmoid",
    "sum_all",
    "tanh",
    "tile_spatial",
    "upsample_nearest2x",
]
