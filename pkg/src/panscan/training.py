"""Loss, optimizer, learning-rate schedule, training loop and checkpoints.

Checkpoint layout ("MMCK", integers little-endian)::

    b"MMCK" | u16 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype (0=f32, 1=f64)
                | u8 rank | rank x u64 extents | row-major payload

The model configuration travels as one extra float64 tensor named
``meta.config`` (see :func:`config_to_vector`).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Scene
from .model import VARIANTS, ModelConfig, PanSharpNet
from .numerics import Tensor

log = logging.getLogger(__name__)

LR_START = 5e-4
LR_END = 5e-8
CLIP_NORM = 4.0


class TrainingError(RuntimeError):
    pass


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise nx.ShapeError(f"l1_loss: {pred.shape} vs {target.shape}")
    return nx.mean(nx.abs_(nx.sub(pred, target)))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: list[np.ndarray], max_norm: float = CLIP_NORM) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the joint L2 norm exceeds
    ``max_norm``.  Returns the (possibly scaled) gradients and the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        grads = [(g * s).astype(g.dtype, copy=False) for g in grads]
    return grads, norm


@dataclass
class LrSchedule:
    total_steps: int
    lr_start: float = LR_START
    lr_end: float = LR_END


def cosine_lr(step: int, sched: LrSchedule) -> float:
    """lr_end + (lr_start - lr_end) (1 + cos(pi step / total)) / 2."""
    if sched.total_steps < 0 or not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if sched.total_steps == 0:
        return sched.lr_start
    frac = step / sched.total_steps
    return sched.lr_end + 0.5 * (sched.lr_start - sched.lr_end) * (1 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = CLIP_NORM

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> OptimState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], opt: OptimState, lr: float) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``opt``."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.data -= update.astype(p.dtype, copy=False)


# ------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: PanSharpNet
    steps: list[int] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    clipped_norms: list[float] = field(default_factory=list)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for s, lr, loss in zip(self.steps, self.lrs, self.losses):
            w.writerow([s, repr(lr), repr(loss)])
        return buf.getvalue()


def stack_batch(scenes: Sequence[Scene], dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lms = np.stack([s.lms for s in scenes]).astype(dtype)
    pan = np.stack([s.pan for s in scenes]).astype(dtype)
    gt = np.stack([s.gt for s in scenes]).astype(dtype)
    return lms, pan, gt


def batch_schedule(n_items: int, batch_size: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for ``steps`` updates: reshuffle every epoch, drop nothing
    (the last batch of an epoch may be short)."""
    out: list[np.ndarray] = []
    while len(out) < steps:
        perm = rng.permutation(n_items)
        for i in range(0, n_items, batch_size):
            out.append(perm[i:i + batch_size])
            if len(out) == steps:
                break
    return out


def train(scenes: Sequence[Scene], cfg: ModelConfig, steps: int, seed: int = 0, batch_size: int = 2,
          lr_start: float = LR_START, lr_end: float = LR_END, clip_norm: float = CLIP_NORM,
          model: PanSharpNet | None = None, log_every: int = 0) -> TrainResult:
    """Optimize L1 on ``scenes`` for ``steps`` updates.  Fully determined by
    ``seed`` (initialization and batch order)."""
    if not scenes:
        raise TrainingError("training set is empty")
    if steps < 0:
        raise TrainingError("steps must be >= 0")
    model = model or PanSharpNet(cfg, seed=seed)
    params = list(model.parameters())
    opt = OptimState.for_params(params, clip_norm=clip_norm)
    sched = LrSchedule(steps, lr_start, lr_end)
    rng = np.random.default_rng([seed, 1])
    result = TrainResult(model)
    dtype = cfg.np_dtype
    for step, idx in enumerate(batch_schedule(len(scenes), batch_size, steps, rng)):
        lms, pan, gt = stack_batch([scenes[i] for i in idx], dtype)
        model.zero_grad()
        pan_in = pan if cfg.modality == "dual" else None
        try:
            loss = l1_loss(model.forward(lms, pan_in), gt)
        except nx.NonFiniteError as exc:
            raise TrainingError(f"step {step}: non-finite forward pass ({exc})") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"step {step}: loss is {value}")
        nx.backward(loss)
        grads, norm = clip_global_norm([p.grad for p in params], clip_norm)
        if not math.isfinite(norm):
            raise TrainingError(f"step {step}: gradient norm is {norm}")
        lr = cosine_lr(step, sched)
        adam_step(params, grads, opt, lr)
        result.steps.append(step)
        result.lrs.append(lr)
        result.losses.append(value)
        result.grad_norms.append(norm)
        result.clipped_norms.append(global_norm(grads))
        if log_every and step % log_every == 0:
            log.info("step %d lr %.3g loss %.5f |g| %.3f", step, lr, value, norm)
    return result


def predict(model: PanSharpNet, lms: np.ndarray, pan: np.ndarray | None = None,
            modality: str | None = None, batch_size: int = 4) -> np.ndarray:
    """Inference over a stack of scenes without recording a graph."""
    outs = []
    with nx.no_grad():
        for i in range(0, len(lms), batch_size):
            p = None if pan is None else pan[i:i + batch_size]
            outs.append(model.forward(lms[i:i + batch_size], p, modality=modality).data)
    return np.concatenate(outs)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_DT_CODE = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DT = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CONFIG_FIELDS = ("channels", "blocks", "patch_size", "state_dim", "bands", "ratio")


class CheckpointError(ValueError):
    pass


def config_to_vector(cfg: ModelConfig) -> np.ndarray:
    vals = [getattr(cfg, f) for f in _CONFIG_FIELDS]
    vals += [VARIANTS.index(cfg.variant), ("dual", "ms-only").index(cfg.modality),
             0 if cfg.dtype == "float32" else 1]
    return np.asarray(vals, dtype=np.float64)


def config_from_vector(vec: np.ndarray) -> ModelConfig:
    if vec.shape != (len(_CONFIG_FIELDS) + 3,):
        raise CheckpointError(f"bad meta.config length {vec.shape}")
    ints = [int(v) for v in vec]
    kw = dict(zip(_CONFIG_FIELDS, ints))
    kw["variant"] = VARIANTS[ints[len(_CONFIG_FIELDS)]]
    kw["modality"] = ("dual", "ms-only")[ints[len(_CONFIG_FIELDS) + 1]]
    kw["dtype"] = ("float32", "float64")[ints[len(_CONFIG_FIELDS) + 2]]
    return ModelConfig(**kw)


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DT_CODE:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DT_CODE[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", buf, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dt = _CODE_DT[code]
            n = int(np.prod(shape))
            if off + n * dt.itemsize > len(buf):
                raise CheckpointError(f"{name}: payload truncated")
            out[name] = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))
            off += n * dt.itemsize
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if off != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, model: PanSharpNet) -> None:
    tensors = {"meta.config": config_to_vector(model.cfg)}
    tensors.update({name: p.data for name, p in model.named_parameters()})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> PanSharpNet:
    tensors = decode_checkpoint(Path(path).read_bytes())
    if "meta.config" not in tensors:
        raise CheckpointError("checkpoint lacks meta.config")
    cfg = config_from_vector(tensors.pop("meta.config"))
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}
    return PanSharpNet(cfg, params)
