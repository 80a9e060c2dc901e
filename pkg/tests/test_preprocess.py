import numpy as np
import pytest

from granite import microgen, preprocess, tensorio
from granite.preprocess import MissingSamples


def test_downsample_constant():
    np.testing.assert_array_equal(preprocess.downsample(np.full((128, 128, 1), 2.5)), np.full((32, 32, 1), 2.5))


def test_downsample_single_block():
    a = np.zeros((128, 128, 1))
    a[8:12, 4:8] = 16.0
    out = preprocess.downsample(a)
    assert out[2, 1, 0] == 16.0
    assert out.sum() == 16.0


def test_downsample_mean_preserved():
    a = np.random.default_rng(0).random((128, 128, 1))
    assert abs(preprocess.downsample(a).mean() - a.mean()) < 1e-6


def test_downsample_idempotent_after_replication():
    a = np.random.default_rng(1).random((64, 64, 1))
    d = preprocess.downsample(a)
    up = np.repeat(np.repeat(d, 4, axis=0), 4, axis=1)
    np.testing.assert_allclose(preprocess.downsample(up), d, rtol=1e-12)


def test_downsample_indivisible():
    with pytest.raises(ValueError):
        preprocess.downsample(np.zeros((10, 12, 1)))


def test_scale_examples():
    np.testing.assert_array_equal(preprocess.scale_unit(np.array([[2.0], [4.0]])), [[0.0], [1.0]])
    np.testing.assert_array_equal(preprocess.scale_unit(np.array([[5.0], [5.0]])), [[0.0], [0.0]])
    out = preprocess.scale_unit(np.array([[1e-4], [3.0], [13.68]]))
    assert out[0, 0] == 0.0 and out[2, 0] == 1.0


def test_scale_per_channel():
    t = np.random.default_rng(2).normal(size=(8, 8, 3)) * [1, 10, 100]
    s = preprocess.scale_unit(t)
    np.testing.assert_allclose(s.min(axis=(0, 1)), 0)
    np.testing.assert_allclose(s.max(axis=(0, 1)), 1)


@pytest.mark.parametrize("a,b", [(3.0, -1.0), (1e-3, 7.0), (250.0, 0.0)])
def test_scale_affine_invariant(a, b):
    t = np.random.default_rng(3).random((16, 16, 2))
    np.testing.assert_allclose(preprocess.scale_unit(a * t + b), preprocess.scale_unit(t), atol=1e-6)


def _write_corpus(root, n, size=32):
    ms_dir, vm_dir = root / "ms", root / "vm"
    vm_dir.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        sid = tensorio.sample_id(i)
        microgen.generate(microgen.GeneratorConfig(size=size, seed=i)).save(ms_dir / sid)
        tensorio.write_tensor(vm_dir / f"{sid}_vm.gtns", rng.random((size, size, 1)).astype(np.float32))
    return ms_dir, vm_dir


def test_assemble(tmp_path):
    ms_dir, vm_dir = _write_corpus(tmp_path, 10)
    man = tensorio.split_dataset(10, seed=1)
    out = preprocess.assemble(ms_dir, vm_dir, man, tmp_path / "a")
    for split, n in zip(tensorio.SPLITS, (7, 1, 2)):
        x, y, ids = preprocess.load_split(out, split)
        assert x.shape == (n, 32, 32, 4) and y.shape == (n, 8, 8, 1)
        assert ids == sorted(man.splits[split])
        assert x.min() >= 0 and x.max() <= 1 and y.min() >= 0 and y.max() <= 1
    # a rerun writes the same bytes
    again = preprocess.assemble(ms_dir, vm_dir, man, tmp_path / "b")
    for f in sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file()):
        assert (out / f).read_bytes() == (again / f).read_bytes()


def test_assemble_missing(tmp_path):
    ms_dir, vm_dir = _write_corpus(tmp_path, 10)
    man = tensorio.split_dataset(10, seed=1)
    (vm_dir / "s00003_vm.gtns").unlink()
    with pytest.raises(MissingSamples) as info:
        preprocess.assemble(ms_dir, vm_dir, man, tmp_path / "a")
    assert info.value.ids == ["s00003"]
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(MissingSamples) as info:
        preprocess.assemble(empty, empty, man, tmp_path / "b")
    assert len(info.value.ids) == 10
