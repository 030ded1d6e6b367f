"""Parameter containers and the binary checkpoint format: byte-exact round
trips, canonical file bytes, and strict mismatch errors."""

import numpy as np
import pytest

from dropclip.params import (CkptError, ParamTree, arrays_digest, load_arrays,
                             load_checkpoint, save_arrays, save_checkpoint,
                             tree_digest)
from dropclip.tensor import Tensor


def _tree():
    t = ParamTree()
    rng = np.random.default_rng(0)
    t.add("b.weight", Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                             requires_grad=True))
    t.add("a.bias", Tensor(rng.standard_normal(4), requires_grad=True))
    t.add("scalar", Tensor(np.float64(2.5), requires_grad=True))
    return t


def test_round_trip_bitwise(tmp_path):
    t = _tree()
    p = tmp_path / "a.ckpt"
    save_checkpoint(t, p)
    t2 = _tree()
    t2["b.weight"].data[:] = 0
    t2["scalar"].data = np.float64(0.0)
    load_checkpoint(t2, p)
    for name, tensor in t.items():
        assert (t2[name].data == tensor.data).all()
        assert t2[name].data.dtype == tensor.data.dtype


def test_scalar_zero_rank_entry_survives(tmp_path):
    p = tmp_path / "s.ckpt"
    save_arrays(p, {"s": np.asarray(np.float64(-1.25))})
    out = load_arrays(p)
    assert out["s"].shape == () and out["s"] == -1.25


def test_int64_entries(tmp_path):
    p = tmp_path / "i.ckpt"
    save_arrays(p, {"step": np.asarray(np.int64(42))})
    assert load_arrays(p)["step"] == 42


def test_canonical_bytes_independent_of_dict_order(tmp_path):
    a = {"x": np.ones((2,), np.float32), "y": np.zeros((3,), np.float32)}
    b = {"y": np.zeros((3,), np.float32), "x": np.ones((2,), np.float32)}
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_arrays(pa, a)
    save_arrays(pb, b)
    assert pa.read_bytes() == pb.read_bytes()


def test_non_contiguous_array_saved_correctly(tmp_path):
    base = np.arange(12, dtype=np.float32).reshape(3, 4)
    view = base.T   # non-contiguous
    p = tmp_path / "v.ckpt"
    save_arrays(p, {"v": view})
    assert (load_arrays(p)["v"] == view).all()


def test_header_and_truncation_errors(tmp_path):
    p = tmp_path / "x.ckpt"
    save_arrays(p, {"x": np.ones((4,), np.float32)})
    raw = p.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOT-A-CKPT\n" + raw)
    with pytest.raises(CkptError):
        load_arrays(bad)
    bad.write_bytes(raw[:-8])     # truncated payload
    with pytest.raises(CkptError):
        load_arrays(bad)
    bad.write_bytes(raw + b"junk")
    with pytest.raises(CkptError):
        load_arrays(bad)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(CkptError):
        save_arrays(tmp_path / "c.ckpt", {"c": np.ones(2, dtype=np.complex128)})


def test_load_arrays_mismatches():
    t = _tree()
    good = t.arrays()
    with pytest.raises(CkptError):
        t.load_arrays({**good, "extra": np.ones(1)})
    missing = dict(good)
    del missing["scalar"]
    with pytest.raises(CkptError):
        t.load_arrays(missing)
    t.load_arrays(missing, subset=True)   # subset load is allowed
    wrong_shape = dict(good)
    wrong_shape["a.bias"] = np.zeros(5)
    with pytest.raises(CkptError):
        t.load_arrays(wrong_shape)
    wrong_dtype = dict(good)
    wrong_dtype["b.weight"] = good["b.weight"].astype(np.float64)
    with pytest.raises(CkptError):
        t.load_arrays(wrong_dtype)


def test_subset_load_keeps_uncovered_values():
    t = _tree()
    before = t["scalar"].data.copy()
    t.load_arrays({"a.bias": np.zeros(4)}, subset=True)
    assert t["scalar"].data == before
    assert (t["a.bias"].data == 0).all()


def test_tree_bookkeeping():
    t = _tree()
    assert t.names() == ["a.bias", "b.weight", "scalar"]   # sorted
    assert "a.bias" in t and "nope" not in t
    assert t.n_scalars() == 12 + 4 + 1
    with pytest.raises(ValueError):
        t.add("a.bias", Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        t.add("bad name", Tensor(np.zeros(1)))


def test_frozen_prefixes():
    t = _tree()
    t.frozen_prefixes = ("a",)
    assert t.is_frozen("a.bias") and not t.is_frozen("b.weight")
    names = [n for n, _ in t.trainable_items()]
    assert names == ["b.weight", "scalar"]
    assert t.n_scalars(trainable_only=True) == 13


def test_digest_regression_and_sensitivity():
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    d = arrays_digest(arrays)
    assert d == arrays_digest({"w": arrays["w"].copy()})
    changed = {"w": arrays["w"].copy()}
    changed["w"][0, 0] += 1
    assert arrays_digest(changed) != d
    renamed = {"w2": arrays["w"].copy()}
    assert arrays_digest(renamed) != d
    t = _tree()
    assert tree_digest(t) == arrays_digest(t.arrays())


def test_zero_grads():
    t = _tree()
    t["a.bias"].grad = np.ones(4)
    t.zero_grads()
    assert t["a.bias"].grad is None
