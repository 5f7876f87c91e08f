"""Pan-sharpening network: gated conv encoders, stacked interleaved-scan
blocks, conv decoder and a global residual onto the upsampled MS input."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import numerics as nx
from .mi_ssm import DIRECTIONS, Direction, build_layouts, mi_ssm
from .nn import ConvParams, LayerNormParams, conv2d, dwconv, layer_norm, linear_channels, upsample
from .numerics import Tensor, add, mul, sigmoid, silu
from .scan import SsmParams, init_ssm_arrays

VARIANTS = ("full", "channel-concat", "sequential-concat", "one-way", "global-window")
MODALITY_MODES = ("dual", "ms-only")
RATIO = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    blocks: int = 2
    patch_size: int = 4
    state_dim: int = 8
    bands: int = 4
    ratio: int = RATIO
    variant: str = "full"
    modality: str = "dual"
    dtype: str = "float32"

    def __post_init__(self):
        if self.ratio != RATIO:
            raise ConfigError(f"resolution ratio is fixed at {RATIO}")
        if self.blocks < 1:
            raise ConfigError("need at least one block")
        if self.channels < 4 or self.channels % 2:
            raise ConfigError("channel width must be even and >= 4")
        if self.state_dim < 1 or self.patch_size < 1 or self.bands < 1:
            raise ConfigError("state_dim, patch_size and bands must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.modality not in MODALITY_MODES:
            raise ConfigError(f"unknown modality mode {self.modality!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def scan_directions(self) -> tuple[Direction, ...]:
        return DIRECTIONS[:1] if self.variant == "one-way" else DIRECTIONS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------- param shapes

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor's name and shape, in a fixed order."""
    c, half, n, cb = cfg.channels, cfg.channels // 2, cfg.state_dim, cfg.bands
    shapes: dict[str, tuple[int, ...]] = {}
    for mod, cin in (("ms", cb), ("pan", 1)):
        for u in range(2):
            shapes[f"enc.{mod}.{u}.conv_a.weight"] = (c, cin if u == 0 else c, 3, 3)
            shapes[f"enc.{mod}.{u}.conv_a.bias"] = (c,)
            shapes[f"enc.{mod}.{u}.conv_b.weight"] = (c, half, 3, 3)
            shapes[f"enc.{mod}.{u}.conv_b.bias"] = (c,)
    for k in range(cfg.blocks):
        pre = f"block{k}"
        for mod in ("ms", "pan"):
            shapes[f"{pre}.{mod}.ln_in.gamma"] = (c,)
            shapes[f"{pre}.{mod}.ln_in.beta"] = (c,)
            shapes[f"{pre}.{mod}.proj_in.weight"] = (c, c)
            shapes[f"{pre}.{mod}.proj_in.bias"] = (c,)
            shapes[f"{pre}.{mod}.dwconv.weight"] = (c, 1, 3, 3)
            shapes[f"{pre}.{mod}.dwconv.bias"] = (c,)
            if cfg.variant == "channel-concat":
                shapes[f"{pre}.{mod}.fuse.weight"] = (c, 2 * c, 1, 1)
                shapes[f"{pre}.{mod}.fuse.bias"] = (c,)
            shapes[f"{pre}.{mod}.ln_out.gamma"] = (c,)
            shapes[f"{pre}.{mod}.ln_out.beta"] = (c,)
            shapes[f"{pre}.{mod}.proj_out.weight"] = (c, c)
            shapes[f"{pre}.{mod}.proj_out.bias"] = (c,)
        for d in cfg.scan_directions:
            sp = f"{pre}.ssm.{d.value}"
            shapes[f"{sp}.a_log"] = (c, n)
            shapes[f"{sp}.d_skip"] = (c,)
            shapes[f"{sp}.delta_w"] = (c, c)
            shapes[f"{sp}.delta_b"] = (c,)
            shapes[f"{sp}.b_w"] = (c, n)
            shapes[f"{sp}.c_w"] = (c, n)
    shapes["dec.conv1.weight"] = (c, c, 3, 3)
    shapes["dec.conv1.bias"] = (c,)
    shapes["dec.conv2.weight"] = (cb, c, 3, 3)
    shapes["dec.conv2.bias"] = (cb,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Number of learnable scalars."""
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def is_pan_param(name: str) -> bool:
    return ".pan." in name


def init_params(cfg: ModelConfig, seed: int = 0, zero_decoder: bool = True) -> dict[str, Tensor]:
    """Seeded initialization.

    Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer norms start
    at the identity; scan parameters follow :func:`init_ssm_arrays`; the last
    decoder conv is zero so the network starts as plain bicubic upsampling.
    """
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    arrays: dict[str, np.ndarray] = {}
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        if ".ssm." in name:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arrays[name] = np.ones(shape)
        elif leaf == "beta":
            arrays[name] = np.zeros(shape)
        else:
            wshape = shapes[name.rsplit(".", 1)[0] + ".weight"]
            fan_in = wshape[0] if len(wshape) == 2 else math.prod(wshape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    for k in range(cfg.blocks):
        for d in cfg.scan_directions:
            sp = f"block{k}.ssm.{d.value}"
            for key, arr in init_ssm_arrays(rng, cfg.channels, cfg.state_dim, dtype=dt).items():
                arrays[f"{sp}.{key}"] = arr
    if zero_decoder:
        arrays["dec.conv2.weight"] = np.zeros(shapes["dec.conv2.weight"])
        arrays["dec.conv2.bias"] = np.zeros(shapes["dec.conv2.bias"])
    return {name: Tensor(arrays[name].astype(dt), requires_grad=True, name=name) for name in shapes}


# --------------------------------------------------------------------- layers

def _conv(params, prefix, x, padding=1) -> Tensor:
    return conv2d(x, ConvParams(params[prefix + ".weight"], params[prefix + ".bias"], padding=padding))


def gated_unit(params, prefix, x) -> Tensor:
    """conv3x3 -> (content, gate) halves -> content * sigmoid(gate) -> conv3x3."""
    h = _conv(params, prefix + ".conv_a", x)
    c = h.shape[1] // 2
    content, gate = nx.split(h, 1, [c, c])
    return _conv(params, prefix + ".conv_b", mul(content, sigmoid(gate)))


def encode_one(params, modality: str, img: Tensor) -> Tensor:
    h = gated_unit(params, f"enc.{modality}.0", img)
    return gated_unit(params, f"enc.{modality}.1", h)


def encode(params, ms_up: Tensor, pan: Tensor | None) -> tuple[Tensor, Tensor | None]:
    """Shallow features of both modalities (PAN skipped when absent)."""
    if pan is not None and pan.shape[-2:] != ms_up.shape[-2:]:
        raise ValueError(f"spatial mismatch: MS {ms_up.shape[-2:]} vs PAN {pan.shape[-2:]}")
    f_ms = encode_one(params, "ms", ms_up)
    f_p = encode_one(params, "pan", pan) if pan is not None else None
    return f_ms, f_p


def _ssm(params, block: int, direction: Direction) -> SsmParams:
    sp = f"block{block}.ssm.{direction.value}"
    return SsmParams(*(params[f"{sp}.{k}"] for k in ("a_log", "d_skip", "delta_w", "delta_b", "b_w", "c_w")))


def _ln(params, prefix, x) -> Tensor:
    return layer_norm(x, LayerNormParams(params[prefix + ".gamma"], params[prefix + ".beta"]), axis=1)


def _proj(params, prefix, x) -> Tensor:
    return linear_channels(x, params[prefix + ".weight"], params[prefix + ".bias"], axis=1)


def block_forward(params, block: int, f_ms: Tensor, f_p: Tensor | None, cfg: ModelConfig,
                  layouts, method: str = "fused") -> tuple[Tensor, Tensor | None]:
    """One interleaved-scan block with a residual connection.

    Per modality: LN -> Linear (= F_ln) -> DWConv -> SiLU -> scan mixing ->
    LN(scan) * SiLU(F_ln) -> Linear -> + input.
    """
    pre = f"block{block}"
    mods = ["ms"] if f_p is None else ["ms", "pan"]
    inputs = {"ms": f_ms, "pan": f_p}
    f_ln, f_act = {}, {}
    for m in mods:
        f_ln[m] = _proj(params, f"{pre}.{m}.proj_in", _ln(params, f"{pre}.{m}.ln_in", inputs[m]))
        dw = ConvParams(params[f"{pre}.{m}.dwconv.weight"], params[f"{pre}.{m}.dwconv.bias"])
        f_act[m] = silu(dwconv(f_ln[m], dw))

    ssms = [_ssm(params, block, d) for d in cfg.scan_directions]
    if cfg.variant == "channel-concat" and f_p is not None:
        # no interleaving: fuse by channel concat, then scan each modality alone
        cat = nx.concat([f_act["ms"], f_act["pan"]], axis=1)
        mixed = []
        for m in mods:
            fused = _conv(params, f"{pre}.{m}.fuse", cat, padding=0)
            mixed.append(mi_ssm(fused, None, layouts["single"], ssms, method)[0])
    else:
        key = "single" if f_p is None else "dual"
        mixed = mi_ssm(f_act["ms"], f_act.get("pan"), layouts[key], ssms, method)

    outs = []
    for m, y in zip(mods, mixed):
        gated = mul(_ln(params, f"{pre}.{m}.ln_out", y), silu(f_ln[m]))
        outs.append(add(_proj(params, f"{pre}.{m}.proj_out", gated), inputs[m]))
    return outs[0], (outs[1] if len(outs) > 1 else None)


def decode(params, feat: Tensor) -> Tensor:
    h = silu(_conv(params, "dec.conv1", feat))
    return _conv(params, "dec.conv2", h)


# ---------------------------------------------------------------------- model

class PanSharpNet:
    """Parameters plus configuration; forward passes are pure functions of both."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0,
                 zero_decoder: bool = True):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, zero_decoder)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter set mismatch; missing={missing[:3]} extra={extra[:3]}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape} != {shape}")
        self._layouts: dict[tuple[int, int], dict] = {}

    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        nx.zero_grads(self.parameters())

    def layouts(self, height: int, width: int) -> dict:
        key = (height, width)
        if key not in self._layouts:
            cfg = self.cfg
            dirs = cfg.scan_directions
            if cfg.variant == "global-window":
                patch = (height, width)
            else:
                patch = (cfg.patch_size, cfg.patch_size)
            scheme = "sequential" if cfg.variant == "sequential-concat" else "interleave"
            self._layouts[key] = {
                "dual": build_layouts(height, width, patch, dirs, scheme),
                "single": build_layouts(height, width, patch, dirs, single=True),
            }
        return self._layouts[key]

    def features(self, ms_up: Tensor, pan: Tensor | None, method: str = "fused"):
        """Encoder + block stack; returns the last block's (MS, PAN) features."""
        f_ms, f_p = encode(self.params, ms_up, pan)
        lays = self.layouts(*ms_up.shape[-2:])
        for k in range(self.cfg.blocks):
            f_ms, f_p = block_forward(self.params, k, f_ms, f_p, self.cfg, lays, method)
        return f_ms, f_p

    def forward(self, lms, pan=None, modality: str | None = None, method: str = "fused") -> Tensor:
        """HRMS estimate [B, bands, H, W] from LRMS [B, bands, H/4, W/4] and
        PAN [B, 1, H, W].  In ms-only mode the PAN branch is skipped."""
        modality = modality or self.cfg.modality
        lms = lms.data if isinstance(lms, Tensor) else np.asarray(lms)
        dt = self.cfg.np_dtype
        lms = lms.astype(dt, copy=False)
        if lms.ndim != 4 or lms.shape[1] != self.cfg.bands:
            raise ValueError(f"LRMS must be [B, {self.cfg.bands}, h, w], got {lms.shape}")
        if modality == "dual":
            if pan is None:
                raise ValueError("dual mode needs a PAN image")
            pan = pan.data if isinstance(pan, Tensor) else np.asarray(pan)
            pan = pan.astype(dt, copy=False)
            want = (lms.shape[0], 1, lms.shape[2] * RATIO, lms.shape[3] * RATIO)
            if pan.shape != want:
                raise ValueError(f"PAN shape {pan.shape} != {want} (4x the LRMS extent)")
            pan_t = Tensor(pan)
        elif modality == "ms-only":
            pan_t = None
        else:
            raise ValueError(f"unknown modality mode {modality!r}")
        up = upsample(lms, RATIO, "bicubic")
        f_ms, _ = self.features(Tensor(up), pan_t, method)
        return add(decode(self.params, f_ms), Tensor(up))

    __call__ = forward

    def with_config(self, **changes) -> PanSharpNet:
        """Same parameters under a modified config (e.g. modality='ms-only')."""
        return PanSharpNet(replace(self.cfg, **changes), self.params)


def forward_variant(variant: str, lms, pan, base: ModelConfig | None = None, seed: int = 0,
                    params: dict[str, Tensor] | None = None) -> Tensor:
    """Build (or reuse params for) an ablation variant and run it."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    cfg = replace(base or ModelConfig(), variant=variant)
    return PanSharpNet(cfg, params, seed=seed).forward(lms, pan)
