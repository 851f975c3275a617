import numpy as np
import pytest

from minute.checkpoint import CheckpointError, load_tensors, save_tensors


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "enc.w": rng.standard_normal((4, 6)).astype(np.float32),
        "enc.b": rng.standard_normal(6).astype(np.float32),
        "scalarish": np.float32(3.5).reshape(()),
        "deep.nested.table": rng.standard_normal((2, 3, 4)).astype(np.float32),
    }
    footer = {"kind": "test", "config": {"lr": 0.001}, "seed": 7}
    path = tmp_path / "m.ckpt"
    save_tensors(path, tensors, footer)
    loaded, footer2 = load_tensors(path)
    assert footer2 == footer
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], np.asarray(tensors[name], dtype=np.float32))
        assert loaded[name].shape == np.asarray(tensors[name]).shape


def test_writes_are_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.standard_normal((3, 3)).astype(np.float32)}
    save_tensors(tmp_path / "x1.ckpt", tensors, {"seed": 1})
    save_tensors(tmp_path / "x2.ckpt", tensors, {"seed": 1})
    assert (tmp_path / "x1.ckpt").read_bytes() == (tmp_path / "x2.ckpt").read_bytes()


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_tensors(path, {"a": np.zeros((8, 8), dtype=np.float32)}, {})
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError):
        load_tensors(path)


def test_bad_footer_rejected(tmp_path):
    path = tmp_path / "f.ckpt"
    save_tensors(path, {}, {"ok": True})
    raw = path.read_bytes()
    path.write_bytes(raw[:4] + b"{nope")
    with pytest.raises(CheckpointError):
        load_tensors(path)
