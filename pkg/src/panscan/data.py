"""Synthetic scenes, reduced-resolution (Wald) pairs and tensor files.

MMTF layout (all integers little-endian)::

    b"MMTF" | u16 version=1 | u8 dtype (0=f32, 1=f64) | u8 rank
    | rank x u64 extents | row-major little-endian payload
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

RATIO = 4
MAGIC = b"MMTF"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


# ---------------------------------------------------------------- tensor I/O

def encode_tensor(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim == 0 or 0 in x.shape:
        raise TensorFileError(f"cannot store empty or rank-0 tensor of shape {x.shape}")
    if x.ndim > 255:
        raise TensorFileError("rank exceeds 255")
    dt = x.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise TensorFileError(f"unsupported dtype {x.dtype}")
    head = MAGIC + struct.pack("<HBB", VERSION, DTYPE_CODES[dt], x.ndim)
    head += struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + np.ascontiguousarray(x, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFileError("header truncated")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    if code not in CODE_DTYPES:
        raise TensorFileError(f"unknown dtype code {code}")
    if rank == 0 or len(buf) < 8 + 8 * rank:
        raise TruncatedFileError("extent table truncated")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    dt = CODE_DTYPES[code]
    offset = 8 + 8 * rank
    need = int(np.prod(shape)) * dt.itemsize
    if len(buf) - offset < need:
        raise TruncatedFileError(f"payload has {len(buf) - offset} bytes, expected {need}")
    if len(buf) - offset > need:
        raise TensorFileError("trailing bytes after payload")
    return np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(x))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ------------------------------------------------------------ scene synthesis

def gaussian_kernel(sigma: float = 1.0, size: int = 7) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float = 1.0, size: int = 7) -> np.ndarray:
    """Separable blur over the two trailing axes, reflect padding."""
    k = gaussian_kernel(sigma, size)
    out = ndimage.correlate1d(img, k, axis=-2, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-1, mode="reflect")


def synth_scene(seed: int, height: int = 64, width: int = 64, bands: int = 4,
                multiple: int = 4) -> np.ndarray:
    """Procedural [bands, H, W] ground truth in [0, 1].

    A shared spatial layer (smooth ramp, Gaussian blobs, sharp-edged
    rectangles and stripes) is mixed into each band with band-specific gains
    and offsets, so bands are correlated but not identical.
    """
    if height % RATIO or width % RATIO or height % multiple or width % multiple:
        raise ValueError(f"{height}x{width} must be divisible by {RATIO} and {multiple}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= height
    xx /= width

    layers = []
    gx, gy = rng.uniform(-1, 1, 2)
    layers.append(gx * xx + gy * yy)
    blobs = np.zeros((height, width))
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.2)
        blobs += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    layers.append(blobs)
    rects = np.zeros((height, width))
    for _ in range(rng.integers(4, 10)):
        y0, x0 = rng.integers(0, height - 4), rng.integers(0, width - 4)
        h, w = rng.integers(3, height // 3), rng.integers(3, width // 3)
        rects[y0:y0 + h, x0:x0 + w] += rng.uniform(-1, 1)
    layers.append(rects)
    period = rng.uniform(3, 8)
    theta = rng.uniform(0, np.pi)
    stripes = (np.sin(2 * np.pi * (xx * width * np.cos(theta) + yy * height * np.sin(theta)) / period) > 0)
    mask = np.zeros((height, width))
    my, mx = rng.integers(0, height // 2), rng.integers(0, width // 2)
    mask[my:my + height // 3, mx:mx + width // 3] = 1.0
    layers.append(stripes * mask)
    layers = np.stack(layers)  # [4, H, W]

    gains = rng.uniform(0.3, 1.0, size=(bands, layers.shape[0]))
    offsets = rng.uniform(0.0, 0.5, size=(bands, 1, 1))
    gt = np.einsum("bl,lhw->bhw", gains, layers) + offsets
    gt -= gt.min()
    peak = gt.max()
    if peak > 0:
        gt /= peak
    return np.clip(gt * 0.9 + 0.05, 0.0, 1.0)


def blur_decimate(img: np.ndarray, ratio: int = RATIO) -> np.ndarray:
    """Gaussian blur (sigma 1, 7 taps) then keep every ``ratio``-th sample from
    the top-left."""
    return np.ascontiguousarray(gaussian_blur(img)[..., ::ratio, ::ratio])


def laplacian(img: np.ndarray) -> np.ndarray:
    return ndimage.laplace(img, mode="reflect")


def wald_degrade(gt: np.ndarray, detail: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """(pan [1, H, W], lms [bands, H/4, W/4]) from a ground truth [bands, H, W].

    PAN is the equal-weight band mean sharpened with ``detail`` times the
    negative Laplacian of that mean, clamped to [0, 1].
    """
    intensity = gt.mean(axis=0)
    pan = np.clip(intensity - detail * laplacian(intensity), 0.0, 1.0)[None]
    return pan, blur_decimate(gt)


@dataclass
class Scene:
    gt: np.ndarray
    pan: np.ndarray
    lms: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.pan.shape[1:] != self.gt.shape[1:]:
            raise ValueError("PAN extent differs from ground truth")
        if self.lms.shape != (self.gt.shape[0], self.gt.shape[1] // RATIO, self.gt.shape[2] // RATIO):
            raise ValueError("LRMS extent is not 1/4 of ground truth")


def make_scene(seed: int, height: int = 64, width: int = 64, bands: int = 4, scene_id: str = "") -> Scene:
    gt = synth_scene(seed, height, width, bands)
    pan, lms = wald_degrade(gt)
    return Scene(gt, pan, lms, scene_id)


# ------------------------------------------------------------------- datasets

@dataclass
class DatasetManifest:
    directory: Path
    scene_ids: list[str] = field(default_factory=list)
    splits: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    bands: int = 4
    height: int = 64
    width: int = 64
    dtype: str = "float32"

    def paths(self, scene_id: str) -> dict[str, Path]:
        return {k: self.directory / f"{scene_id}_{k}.mmtf" for k in ("gt", "pan", "lms")}

    def ids(self, split: str = "all") -> list[str]:
        if split == "all":
            return list(self.scene_ids)
        return [s for s in self.scene_ids if self.splits[s] == split]

    def load(self, scene_id: str) -> Scene:
        p = self.paths(scene_id)
        return Scene(load_tensor(p["gt"]), load_tensor(p["pan"]), load_tensor(p["lms"]), scene_id)

    def scenes(self, split: str = "all") -> list[Scene]:
        return [self.load(s) for s in self.ids(split)]


def split_for(index: int) -> str:
    """Every fourth scene is held out for testing."""
    return "test" if index % 4 == 3 else "train"


def build_dataset(out_dir, n_scenes: int, seed: int = 0, height: int = 64, width: int = 64,
                  bands: int = 4, dtype: str = "float32") -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(out, seed=seed, bands=bands, height=height, width=width, dtype=dtype)
    seeds = np.random.SeedSequence(seed).generate_state(max(n_scenes, 1), dtype=np.uint32)
    for i in range(n_scenes):
        sid = f"scene_{i:04d}"
        scene = make_scene(int(seeds[i]), height, width, bands, sid)
        for key, arr in (("gt", scene.gt), ("pan", scene.pan), ("lms", scene.lms)):
            save_tensor(man.paths(sid)[key], arr.astype(dtype))
        man.scene_ids.append(sid)
        man.splits[sid] = split_for(i)
    write_manifest(man)
    return man


def write_manifest(man: DatasetManifest) -> None:
    lines = [
        f"seed = {man.seed}",
        f"bands = {man.bands}",
        f"height = {man.height}",
        f"width = {man.width}",
        f"dtype = {man.dtype}",
        f"count = {len(man.scene_ids)}",
    ]
    lines += [f"scene = {sid},{man.splits[sid]}" for sid in man.scene_ids]
    tmp = man.directory / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, man.directory / "manifest.txt")


def read_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.txt in {directory}")
    man = DatasetManifest(directory)
    ints = {"seed", "bands", "height", "width", "count"}
    count = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "scene":
            sid, split = (s.strip() for s in value.split(","))
            if sid in man.splits:
                raise ValueError(f"{path}:{lineno}: duplicate scene id {sid}")
            if split not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            man.scene_ids.append(sid)
            man.splits[sid] = split
        elif key in ints:
            if key == "count":
                count = int(value)
            else:
                setattr(man, key, int(value))
        elif key == "dtype":
            man.dtype = value
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    if count is not None and count != len(man.scene_ids):
        raise ValueError(f"{path}: count = {count} but {len(man.scene_ids)} scenes listed")
    for sid in man.scene_ids:
        for p in man.paths(sid).values():
            if not p.exists():
                raise FileNotFoundError(f"manifest lists {sid} but {p.name} is missing")
    return man
