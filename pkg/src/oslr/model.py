"""Query-conditioned mask predictor.

A small VGG-style conditioning net collapses the query logo to a ``1x1 x latent_dim``
code. A U-Net over the target image fuses that code into its encoder stages
(tile, concatenate, 1x1 conv) and decodes a full-resolution logit map.

Fusion variants:

``multi_scale``
    every encoder stage output (pre-pool) is fused, plus the bottleneck when
    ``fuse_bottleneck`` is set.
``bottleneck_only``
    only the bottleneck is fused; skips carry raw encoder features.
``cosine_tanh``
    like ``multi_scale`` but the 1x1 fusion is replaced by a per-pixel cosine
    similarity against a 1x1-projected code, squashed by tanh and multiplied
    onto the features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import FormatError, ShapeError

FUSION_MODES = ("multi_scale", "bottleneck_only", "cosine_tanh")
INIT_MODES = ("paper_gaussian", "fan_in_scaled")
PAPER_INIT_STD = 0.01


def _ints(value) -> tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in value)


def _bool(value) -> bool:
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return bool(value)


@dataclass
class ModelConfig:
    query_size: int = 16
    target_size: int = 64
    num_stages: int = 4
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    latent_dim: int = 64
    cond_channels: tuple[int, ...] = (8, 16, 32, 64)
    cond_convs_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    seg_convs_per_stage: int = 2
    fusion_mode: str = "multi_scale"
    fuse_bottleneck: bool = True
    init_mode: str = "fan_in_scaled"
    precision: str = "single"

    _CASTS = {
        "query_size": int,
        "target_size": int,
        "num_stages": int,
        "stage_channels": _ints,
        "latent_dim": int,
        "cond_channels": _ints,
        "cond_convs_per_stage": _ints,
        "seg_convs_per_stage": int,
        "fusion_mode": str,
        "fuse_bottleneck": _bool,
        "init_mode": str,
        "precision": str,
    }

    def __post_init__(self):
        for fld in fields(self):
            setattr(self, fld.name, self._CASTS[fld.name](getattr(self, fld.name)))
        self.validate()

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(
            query_size=64,
            target_size=256,
            num_stages=5,
            stage_channels=(64, 128, 256, 512, 512),
            latent_dim=512,
            cond_channels=(64, 128, 256, 512, 512, 512),
            cond_convs_per_stage=(2, 2, 3, 3, 2, 1),
            init_mode="paper_gaussian",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest useful net; used for end-to-end gradient checks."""
        base = dict(
            query_size=8,
            target_size=16,
            num_stages=2,
            stage_channels=(4, 8),
            latent_dim=8,
            cond_channels=(4, 8, 8),
            cond_convs_per_stage=(1, 1, 1),
            precision="double",
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.num_stages < 1 or len(self.stage_channels) != self.num_stages:
            raise ValueError(f"stage_channels needs {self.num_stages} entries, got {self.stage_channels}")
        if any(c <= 0 for c in self.stage_channels + self.cond_channels):
            raise ValueError("channel counts must be positive")
        if self.target_size % (2**self.num_stages):
            raise ValueError(f"target_size {self.target_size} not divisible by 2^{self.num_stages}")
        if len(self.cond_convs_per_stage) != len(self.cond_channels):
            raise ValueError("cond_convs_per_stage and cond_channels must have equal length")
        if any(n < 1 for n in self.cond_convs_per_stage) or self.seg_convs_per_stage < 1:
            raise ValueError("every stage needs at least one conv")
        if self.query_size != 2 ** len(self.cond_channels):
            raise ValueError(
                f"query_size {self.query_size} does not reduce to 1x1 after {len(self.cond_channels)} pools"
            )
        if self.cond_channels[-1] != self.latent_dim:
            raise ValueError("last conditioning stage must output latent_dim channels")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.fusion_mode == "bottleneck_only" and not self.fuse_bottleneck:
            raise ValueError("bottleneck_only requires fuse_bottleneck")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def bottleneck_size(self) -> int:
        return self.target_size // 2**self.num_stages

    def to_dict(self) -> dict[str, str]:
        out = {}
        for fld in fields(self):
            v = getattr(self, fld.name)
            if isinstance(v, tuple):
                out[fld.name] = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                out[fld.name] = "true" if v else "false"
            else:
                out[fld.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        known = {fld.name for fld in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# parameters


def _conv_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, int, int, int]]]:
    """(name, kh x kw x in x out) for every conv layer, in canonical order."""
    cin = 3
    for i, (cout, nconv) in enumerate(zip(config.cond_channels, config.cond_convs_per_stage), 1):
        for j in range(1, nconv + 1):
            yield f"cond.stage{i}.conv{j}", (3, 3, cin, cout)
            cin = cout

    latent = config.latent_dim
    chans = config.stage_channels
    cin = 3
    for s, cout in enumerate(chans, 1):
        for j in range(1, config.seg_convs_per_stage + 1):
            yield f"seg.enc.stage{s}.conv{j}", (3, 3, cin, cout)
            cin = cout

    fused = []
    if config.fusion_mode != "bottleneck_only":
        fused = [(f"stage{s}", c) for s, c in enumerate(chans, 1)]
    if config.fuse_bottleneck:
        fused.append(("bottleneck", chans[-1]))
    for where, c in fused:
        if config.fusion_mode == "cosine_tanh":
            yield f"seg.proj.{where}", (1, 1, latent, c)
        else:
            yield f"seg.fuse.{where}", (1, 1, c + latent, c)

    cin = chans[-1]
    for s in range(config.num_stages, 0, -1):
        c = chans[s - 1]
        yield f"seg.dec.stage{s}.up", (2, 2, cin, c)
        cin = 2 * c
        for j in range(1, config.seg_convs_per_stage + 1):
            yield f"seg.dec.stage{s}.conv{j}", (3, 3, cin, c)
            cin = c
    yield "seg.head", (1, 1, chans[0], 1)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for name, wshape in _conv_shapes(config):
        shapes[f"{name}.weight"] = wshape
        shapes[f"{name}.bias"] = (wshape[3],)
    return shapes


class Parameters:
    """Ordered, uniquely named learnable tensors of both networks."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def conv(self, prefix: str, padding: str = "same") -> ops.ConvParams:
        return ops.ConvParams(self.tensors[f"{prefix}.weight"], self.tensors[f"{prefix}.bias"], 1, padding)

    def count(self) -> int:
        return sum(t.size for t in self)


def init_params(config: ModelConfig, seed: int = 0) -> Parameters:
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        elif config.init_mode == "paper_gaussian":
            data = rng.normal(0.0, PAPER_INIT_STD, size=shape).astype(dtype)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return Parameters(tensors)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class StageFeatures:
    """Per-stage pre-pool encoder outputs (full resolution first) and the bottleneck."""

    stages: list[Tensor] = field(default_factory=list)
    bottleneck: Tensor | None = None


def _check_image(x: Tensor, size: int, what: str) -> None:
    if x.data.ndim not in (3, 4) or x.shape[-3:] != (size, size, 3):
        raise ShapeError(f"{what} must be {size}x{size}x3 (optionally batched), got {x.shape}")


def encode_query(query: Tensor, params: Parameters, config: ModelConfig) -> Tensor:
    """Collapse the query logo to a 1x1 latent code."""
    _check_image(query, config.query_size, "query image")
    h = query
    for i, nconv in enumerate(config.cond_convs_per_stage, 1):
        for j in range(1, nconv + 1):
            h = ops.relu(ops.conv2d(h, params.conv(f"cond.stage{i}.conv{j}")))
        h = ops.maxpool2x2(h)
    return h


def encode_target(target: Tensor, params: Parameters, config: ModelConfig) -> StageFeatures:
    _check_image(target, config.target_size, "target image")
    feats = StageFeatures()
    h = target
    for s in range(1, config.num_stages + 1):
        for j in range(1, config.seg_convs_per_stage + 1):
            h = ops.relu(ops.conv2d(h, params.conv(f"seg.enc.stage{s}.conv{j}")))
        feats.stages.append(h)
        h = ops.maxpool2x2(h)
    feats.bottleneck = h
    return feats


def fuse_stage(feat: Tensor, code: Tensor, fusion: ops.ConvParams) -> Tensor:
    """relu(conv1x1([feat ; tile(code)])): per-position learned query/feature similarity."""
    c = feat.shape[-1]
    if fusion.in_ch != c + code.shape[-1] or fusion.out_ch != c:
        raise ShapeError(
            f"fusion weights {fusion.weight.shape} do not fit {c}-channel features and {code.shape[-1]}-d code"
        )
    h, w = feat.shape[-3], feat.shape[-2]
    return ops.relu(ops.conv2d(ops.concat_channels(feat, ops.tile_spatial(code, h, w)), fusion))


def fuse_stage_cosine(feat: Tensor, code: Tensor, proj: ops.ConvParams) -> Tensor:
    """feat * tanh(cos(feat, proj(code))) at every position."""
    if proj.in_ch != code.shape[-1] or proj.out_ch != feat.shape[-1]:
        raise ShapeError(f"projection weights {proj.weight.shape} do not map code to {feat.shape[-1]} channels")
    v = ops.conv2d(code, proj)
    return ops.scale_channels(feat, ops.tanh(ops.cosine_map(feat, v)))


def _fuse(feat: Tensor, code: Tensor, where: str, params: Parameters, config: ModelConfig) -> Tensor:
    if config.fusion_mode == "cosine_tanh":
        return fuse_stage_cosine(feat, code, params.conv(f"seg.proj.{where}"))
    return fuse_stage(feat, code, params.conv(f"seg.fuse.{where}"))


def fuse_features(feats: StageFeatures, code: Tensor, params: Parameters, config: ModelConfig) -> StageFeatures:
    stages = list(feats.stages)
    if config.fusion_mode != "bottleneck_only":
        stages = [_fuse(feat, code, f"stage{s}", params, config) for s, feat in enumerate(stages, 1)]
    bottleneck = feats.bottleneck
    if config.fuse_bottleneck:
        bottleneck = _fuse(bottleneck, code, "bottleneck", params, config)
    return StageFeatures(stages, bottleneck)


def decode(fused: StageFeatures, params: Parameters, config: ModelConfig) -> Tensor:
    """Upsample + 2x2 conv, concatenate the matching skip, then 3x3 convs; 1x1 head to one logit."""
    if fused.bottleneck is None or len(fused.stages) != config.num_stages:
        raise ShapeError(f"decoder needs {config.num_stages} fused stages and a bottleneck")
    h = fused.bottleneck
    for s in range(config.num_stages, 0, -1):
        h = ops.relu(ops.conv2d(ops.upsample_nearest2x(h), params.conv(f"seg.dec.stage{s}.up")))
        h = ops.concat_channels(h, fused.stages[s - 1])
        for j in range(1, config.seg_convs_per_stage + 1):
            h = ops.relu(ops.conv2d(h, params.conv(f"seg.dec.stage{s}.conv{j}")))
    return ops.conv2d(h, params.conv("seg.head"))


def forward_logits(query: Tensor, target: Tensor, params: Parameters, config: ModelConfig) -> Tensor:
    code = encode_query(query, params, config)
    feats = encode_target(target, params, config)
    return decode(fuse_features(feats, code, params, config), params, config)


def predict_mask(query: Tensor, target: Tensor, params: Parameters, config: ModelConfig) -> Tensor:
    """Per-pixel logo probability, ``size x size`` (or ``N x size x size`` for batches)."""
    logits = forward_logits(query, target, params, config)
    return ops.reshape(ops.sigmoid(logits), logits.shape[:-1])


def as_input(images: np.ndarray, config: ModelConfig) -> Tensor:
    """uint8 HxWx3 (or batched) pixels -> normalized tensor in the model's precision."""
    arr = np.asarray(images)
    if arr.dtype == np.uint8:
        arr = arr.astype(config.dtype) / np.asarray(255, dtype=config.dtype)
    return Tensor(arr.astype(config.dtype, copy=False))


# ---------------------------------------------------------------------------
# checkpoint I/O

CKPT_MAGIC = b"OSLR"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}
VELOCITY_PREFIX = "optim.velocity."
TRAIN_PREFIX = "train."


def save_checkpoint(
    params: Parameters,
    config: ModelConfig,
    path,
    meta: dict[str, str] | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    """Write weights (and optional extra arrays such as optimizer velocity)."""
    block = dict(config.to_dict())
    for k, v in (meta or {}).items():
        block[k] = str(v)
    text = "".join(f"{k}={v}\n" for k, v in block.items()).encode("utf-8")
    arrays = [(name, t.data) for name, t in params.tensors.items()]
    arrays += list((extra or {}).items())
    names = [n for n, _ in arrays]
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")

    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(text)), text]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw_name = name.encode("utf-8")
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
        parts += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Raw access: the key=value block and every stored array, by name."""
    r = _Reader(Path(path).read_bytes(), f"checkpoint {path}")
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (tlen,) = r.unpack("<I")
    meta = {}
    for line in r.take(tlen).decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        (tag,) = r.unpack("<B")
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name}")
        dt = _DTYPE_TAGS[tag]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        arrays[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return meta, arrays


def load_checkpoint(path) -> tuple[Parameters, ModelConfig]:
    meta, arrays = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad config block: {exc}") from exc
    expected = parameter_shapes(config)
    for name in arrays:
        if name not in expected and not name.startswith((VELOCITY_PREFIX, TRAIN_PREFIX)):
            raise FormatError(f"{path}: unknown tensor {name!r}")
    tensors = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if arrays[name].shape != shape:
            raise FormatError(f"{path}: {name} has shape {arrays[name].shape}, config expects {shape}")
        tensors[name] = Tensor(arrays[name].astype(config.dtype), requires_grad=True, name=name)
    return Parameters(tensors), config
