"""Multimodal interleaved scanning.

Two feature maps (MS and PAN, each [B, C, H, W]) are cut into non-overlapping
patches ("windows"), ordered along one of four directions, and interleaved
window by window: MS window 0, PAN window 0, MS window 1, ...  A single
selective scan with one continuous hidden state runs over the interleaved
sequence of length 2HW, so every PAN window is read with the state left by
the matching MS window and vice versa.

Token indices used throughout: ``m * H * W + row * W + col`` where ``m`` is 0
for MS and 1 for PAN (the flattened concatenation of both maps).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Tensor, add, concat, inverse_permutation, permute_gather, reshape, split, take_slice
from .scan import SsmParams, ssm_forward


class Direction(str, enum.Enum):
    LTR_UTD = "ltr_utd"  # patches row-major, tokens row-major
    UTD_LTR = "utd_ltr"  # patches column-major, tokens column-major
    RTL_DTU = "rtl_dtu"  # reversal of LTR_UTD
    DTU_RTL = "dtu_rtl"  # reversal of UTD_LTR


DIRECTIONS = (Direction.LTR_UTD, Direction.UTD_LTR, Direction.RTL_DTU, Direction.DTU_RTL)

_BASE = {
    Direction.LTR_UTD: (Direction.LTR_UTD, False),
    Direction.UTD_LTR: (Direction.UTD_LTR, False),
    Direction.RTL_DTU: (Direction.LTR_UTD, True),
    Direction.DTU_RTL: (Direction.UTD_LTR, True),
}

SCHEMES = ("interleave", "sequential")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScanLayout:
    """Immutable bijection between token indices and scan positions.

    ``order[pos]`` is the token read at sequence position ``pos``;
    ``inverse[token]`` is the position where ``token`` is read.
    """

    direction: Direction
    height: int
    width: int
    patch: tuple[int, int]
    modalities: int
    scheme: str
    order: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return self.order.size

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch[0], self.width // self.patch[1]

    @property
    def window(self) -> int:
        return self.patch[0] * self.patch[1]

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def modality_positions(self, m: int) -> np.ndarray:
        """Sequence positions holding modality ``m`` tokens, in scan order."""
        return np.flatnonzero(self.order // self.pixels == m)

    def modality_pixels(self, m: int) -> np.ndarray:
        """Row-major pixel index of each modality-``m`` token, in scan order."""
        return self.order[self.modality_positions(m)] - m * self.pixels

    def labels(self) -> list[tuple[str, int, int]]:
        """Human-readable (modality, row, col) per position."""
        names = ("MS", "PAN")
        out = []
        for tok in self.order:
            m, pix = divmod(int(tok), self.pixels)
            out.append((names[m], *divmod(pix, self.width)))
        return out


def spatial_order(height: int, width: int, patch: tuple[int, int], direction: Direction) -> np.ndarray:
    """Row-major pixel indices of one modality in window-grouped scan order."""
    ph, pw = patch
    if ph < 1 or pw < 1 or height % ph or width % pw:
        raise LayoutError(f"patch {patch} does not tile a {height}x{width} map")
    base, reverse = _BASE[Direction(direction)]
    gh, gw = height // ph, width // pw
    pix = np.arange(height * width).reshape(gh, ph, gw, pw)
    if base is Direction.LTR_UTD:
        seq = pix.transpose(0, 2, 1, 3)  # grid row, grid col, intra row, intra col
    else:
        seq = pix.transpose(2, 0, 3, 1)  # grid col, grid row, intra col, intra row
    seq = seq.reshape(-1)
    return seq[::-1].copy() if reverse else seq


def _make(direction, height, width, patch, modalities, scheme, order) -> ScanLayout:
    order = np.ascontiguousarray(order, dtype=np.intp)
    return ScanLayout(Direction(direction), height, width, tuple(patch), modalities, scheme,
                      order, inverse_permutation(order))


def build_layout(height: int, width: int, patch_size: int | tuple[int, int], direction,
                 scheme: str = "interleave") -> ScanLayout:
    """Two-modality scan layout.

    ``interleave`` alternates MS and PAN windows (MS first in the two forward
    directions); the reversed directions are exact reversals of the whole
    sequence.  ``sequential`` reads every MS token before any PAN token.
    A patch equal to the whole map gives one global window per modality.
    """
    if scheme not in SCHEMES:
        raise LayoutError(f"unknown layout scheme {scheme!r}")
    patch = (patch_size, patch_size) if np.isscalar(patch_size) else tuple(patch_size)
    direction = Direction(direction)
    base, reverse = _BASE[direction]
    ms = spatial_order(height, width, patch, base)
    pan = ms + height * width
    if scheme == "interleave":
        win = patch[0] * patch[1]
        order = np.stack([ms.reshape(-1, win), pan.reshape(-1, win)], axis=1).reshape(-1)
    else:
        order = np.concatenate([ms, pan])
    if reverse:
        order = order[::-1]
    return _make(direction, height, width, patch, 2, scheme, order)


def single_modality_layout(height: int, width: int, patch_size: int | tuple[int, int],
                           direction) -> ScanLayout:
    """Layout over MS tokens only (length HW), used when PAN is absent."""
    patch = (patch_size, patch_size) if np.isscalar(patch_size) else tuple(patch_size)
    order = spatial_order(height, width, patch, direction)
    return _make(direction, height, width, patch, 1, "single", order)


def build_layouts(height: int, width: int, patch_size, directions: Sequence = DIRECTIONS,
                  scheme: str = "interleave", single: bool = False) -> list[ScanLayout]:
    if single:
        return [single_modality_layout(height, width, patch_size, d) for d in directions]
    return [build_layout(height, width, patch_size, d, scheme) for d in directions]


# ---------------------------------------------------------------- sequences

def _flatten_modalities(maps: Sequence[Tensor]) -> Tensor:
    b, c, h, w = maps[0].shape
    for f in maps[1:]:
        if f.shape != maps[0].shape:
            raise LayoutError(f"modality shapes differ: {maps[0].shape} vs {f.shape}")
    flat = [reshape(f, (b, c, h * w)) for f in maps]
    return flat[0] if len(flat) == 1 else concat(flat, axis=2)


def _check(layout: ScanLayout, shape) -> None:
    if shape[-2:] != (layout.height, layout.width):
        raise LayoutError(f"feature map {shape[-2:]} does not match layout "
                          f"{layout.height}x{layout.width}")


def sequence_for(layout: ScanLayout, f_ms: Tensor, f_p: Tensor | None = None) -> Tensor:
    """Gather the [B, C, L] scan sequence of one layout."""
    _check(layout, f_ms.shape)
    maps = [f_ms] if layout.modalities == 1 else [f_ms, f_p]
    if layout.modalities == 2 and f_p is None:
        raise LayoutError("two-modality layout needs a PAN feature map")
    return permute_gather(_flatten_modalities(maps), layout.order, axis=2, inverse=layout.inverse)


def tokenize_interleave(f_ms: Tensor, f_p: Tensor, layouts: Sequence[ScanLayout]) -> Tensor:
    """Stack the per-direction interleaved sequences into [B, D, C, L]."""
    seqs = [sequence_for(lay, f_ms, f_p) for lay in layouts]
    b, c, n = seqs[0].shape
    return concat([reshape(s, (b, 1, c, n)) for s in seqs], axis=1)


def split_directions(s_int: Tensor, count: int = 4) -> list[Tensor]:
    if s_int.ndim != 4 or s_int.shape[1] != count:
        raise LayoutError(f"expected [B, {count}, C, L], got {s_int.shape}")
    b, _, c, n = s_int.shape
    return [reshape(take_slice(s_int, 1, d, d + 1), (b, c, n)) for d in range(count)]


def deinterleave(y: Tensor, layout: ScanLayout) -> list[Tensor]:
    """Split a scanned sequence into per-modality outputs, each in scan order."""
    if y.shape[-1] != layout.length:
        raise LayoutError(f"sequence length {y.shape[-1]} != layout length {layout.length}")
    if layout.modalities == 1:
        return [y]
    perm = np.concatenate([layout.modality_positions(0), layout.modality_positions(1)])
    grouped = permute_gather(y, perm, axis=2)
    return split(grouped, 2, [layout.pixels, layout.pixels])


def mi_scan(seq: Tensor, layout: ScanLayout, ssm: SsmParams, method: str = "fused") -> list[Tensor]:
    """One continuous selective scan over the layout's sequence.

    Returns ``[y_ms, y_p]`` (or ``[y_ms]`` for a single-modality layout), each
    [B, C, HW] in scan order.
    """
    if seq.shape[-1] != layout.length:
        raise LayoutError(f"sequence length {seq.shape[-1]} != layout length {layout.length}")
    return deinterleave(ssm_forward(seq, ssm, method), layout)


def to_canonical(y_mod: Tensor, layout: ScanLayout, modality: int = 0) -> Tensor:
    """Reorder a per-modality output from scan order to row-major pixels."""
    pixels = layout.modality_pixels(modality)
    return permute_gather(y_mod, inverse_permutation(pixels), axis=2)


def directional_sum(outputs: Sequence[Sequence[Tensor]], layouts: Sequence[ScanLayout]) -> list[Tensor]:
    """Map every direction back to row-major order and sum per modality,
    accumulating in the fixed direction order."""
    n_mod = len(outputs[0])
    total = []
    for m in range(n_mod):
        acc = None
        for ys, lay in zip(outputs, layouts):
            y = to_canonical(ys[m], lay, m)
            acc = y if acc is None else add(acc, y)
        total.append(acc)
    return total


def mi_ssm(f_ms: Tensor, f_p: Tensor | None, layouts: Sequence[ScanLayout],
           ssms: Sequence[SsmParams], method: str = "fused") -> list[Tensor]:
    """Full MI-SSM: gather per direction, scan, de-interleave, sum.

    Returns per-modality [B, C, H, W] maps (PAN omitted for single layouts).
    """
    b, c, h, w = f_ms.shape
    outs = []
    for lay, ssm in zip(layouts, ssms):
        outs.append(mi_scan(sequence_for(lay, f_ms, f_p), lay, ssm, method))
    return [reshape(t, (b, c, h, w)) for t in directional_sum(outs, layouts)]
