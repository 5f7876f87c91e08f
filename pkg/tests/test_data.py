import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panscan import data as D


# ----------------------------------------------------------------- tensor I/O

@given(st.sampled_from([np.float32, np.float64]), st.lists(st.integers(1, 5), min_size=1, max_size=4),
       st.integers(0, 2**31 - 1))
def test_mmtf_roundtrip_bit_exact(dtype, shape, seed):
    x = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    y = D.decode_tensor(D.encode_tensor(x))
    assert y.dtype == x.dtype and y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_mmtf_header_by_hand():
    buf = D.encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float64))
    assert buf[:4] == b"MMTF"
    assert struct.unpack("<HBB", buf[4:8]) == (1, 1, 2)
    assert struct.unpack("<2Q", buf[8:24]) == (1, 3)
    assert buf[24:] == np.array([1.0, 2.0, 3.0], "<f8").tobytes()


def test_mmtf_file_roundtrip(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    D.save_tensor(tmp_path / "x.mmtf", x)
    np.testing.assert_array_equal(D.load_tensor(tmp_path / "x.mmtf"), x)


def test_mmtf_errors_are_distinct():
    good = D.encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(D.BadMagicError):
        D.decode_tensor(b"MMTX" + good[4:])
    with pytest.raises(D.VersionMismatchError):
        D.decode_tensor(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(D.TruncatedFileError):
        D.decode_tensor(good[:-1])
    with pytest.raises(D.TruncatedFileError):
        D.decode_tensor(good[:12])
    with pytest.raises(D.TensorFileError):
        D.decode_tensor(good + b"\0")
    for exc in (D.BadMagicError, D.VersionMismatchError, D.TruncatedFileError):
        assert issubclass(exc, D.TensorFileError)


def test_mmtf_rejects_empty_and_bad_dtype():
    with pytest.raises(D.TensorFileError):
        D.encode_tensor(np.zeros((0, 3), np.float32))
    with pytest.raises(D.TensorFileError):
        D.encode_tensor(np.float32(1.0))
    with pytest.raises(D.TensorFileError):
        D.encode_tensor(np.ones(3, dtype=np.int32))


# -------------------------------------------------------------------- scenes

def test_synth_deterministic_and_distinct():
    a, b = D.synth_scene(5), D.synth_scene(5)
    assert a.tobytes() == b.tobytes()
    assert np.abs(D.synth_scene(6) - a).max() > 0.01


def test_synth_range_over_many_seeds():
    for seed in range(100):
        gt = D.synth_scene(seed, 32, 32, 3)
        assert gt.shape == (3, 32, 32)
        assert gt.min() >= 0.0 and gt.max() <= 1.0


def test_synth_divisibility():
    with pytest.raises(ValueError):
        D.synth_scene(0, 30, 32)
    with pytest.raises(ValueError):
        D.synth_scene(0, 24, 24, multiple=16)


def test_constant_ground_truth():
    gt = np.full((4, 16, 16), 0.42)
    pan, lms = D.wald_degrade(gt)
    np.testing.assert_allclose(pan, 0.42, atol=1e-15)
    np.testing.assert_allclose(lms, 0.42, atol=1e-15)
    assert pan.shape == (1, 16, 16) and lms.shape == (4, 4, 4)


def test_decimation_against_loop_oracle():
    gt = D.synth_scene(3, 16, 16, 2)
    k = D.gaussian_kernel(1.0, 7)
    pad = np.pad(gt, ((0, 0), (3, 3), (3, 3)), mode="symmetric")  # scipy "reflect" repeats the edge
    ref = np.zeros((2, 4, 4))
    for b in range(2):
        for i in range(4):
            for j in range(4):
                r, c = 4 * i, 4 * j
                ref[b, i, j] = sum(k[u] * k[v] * pad[b, r + u, c + v] for u in range(7) for v in range(7))
    np.testing.assert_allclose(D.wald_degrade(gt)[1], ref, atol=1e-14)


def test_blur_preserves_mean():
    gt = D.synth_scene(9)
    assert abs(D.gaussian_blur(gt).mean() - gt.mean()) < 1e-12


def test_wald_consistency():
    scene = D.make_scene(11)
    assert D.blur_decimate(scene.gt).tobytes() == scene.lms.tobytes()


def test_pan_carries_ground_truth_detail():
    def hp(x):
        return x - D.gaussian_blur(x)

    for seed in range(10):
        s = D.make_scene(seed)
        for b in range(s.gt.shape[0]):
            assert np.corrcoef(hp(s.pan[0]).ravel(), hp(s.gt[b]).ravel())[0, 1] > 0.5


def test_scene_validation():
    gt = np.zeros((2, 8, 8))
    with pytest.raises(ValueError):
        D.Scene(gt, np.zeros((1, 4, 4)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        D.Scene(gt, np.zeros((1, 8, 8)), np.zeros((2, 4, 4)))


# ------------------------------------------------------------------ datasets

def test_empty_dataset_writes_manifest_only(tmp_path):
    man = D.build_dataset(tmp_path / "d", 0, seed=1, height=16, width=16)
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["manifest.txt"]
    assert D.read_manifest(tmp_path / "d").scene_ids == [] == man.scene_ids


def test_dataset_files_and_determinism(tmp_path):
    a = D.build_dataset(tmp_path / "a", 8, seed=4, height=16, width=16)
    b = D.build_dataset(tmp_path / "b", 8, seed=4, height=16, width=16)
    files = sorted(p.name for p in (tmp_path / "a").glob("*.mmtf"))
    assert len(files) == 24 and files[0] == "scene_0000_gt.mmtf"
    for name in files + ["manifest.txt"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = D.read_manifest(tmp_path / "a")
    assert man.ids("test") == ["scene_0003", "scene_0007"]
    assert len(man.ids("train")) == 6 and man.seed == 4 and man.bands == 4
    scene = man.load("scene_0002")
    assert scene.gt.dtype == np.float32 and scene.lms.shape == (4, 4, 4)
    assert a.scene_ids == b.scene_ids


def test_manifest_errors(tmp_path):
    D.build_dataset(tmp_path, 2, seed=0, height=16, width=16)
    path = tmp_path / "manifest.txt"
    text = path.read_text()
    for bad in (text + "colour = red\n", text + "scene = scene_0000,train\n",
                text.replace("count = 2", "count = 3"), text + "scene = x,validation\n",
                text + "nonsense\n"):
        path.write_text(bad)
        with pytest.raises(ValueError):
            D.read_manifest(tmp_path)
    path.write_text(text)
    (tmp_path / "scene_0001_pan.mmtf").unlink()
    with pytest.raises(FileNotFoundError):
        D.read_manifest(tmp_path)
    with pytest.raises(FileNotFoundError):
        D.read_manifest(tmp_path / "missing")
