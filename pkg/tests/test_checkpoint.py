import numpy as np
import pytest

from tubekit.checkpoint import load_checkpoint, save_checkpoint
from tubekit.errors import CorruptManifest


def sample_params():
    rng = np.random.default_rng(0)
    return {
        "enc.0.attn.wq": rng.standard_normal((8, 8)).astype(np.float32),
        "tubes.0.kernel": rng.standard_normal((2, 2, 2, 1, 8)).astype(np.float32),
        "gate.alpha": np.zeros((), dtype=np.float32),
        "heads.motion.w": rng.standard_normal((8, 4)).astype(np.float64),
    }


def test_round_trip_is_bitwise_exact(tmp_path):
    params = sample_params()
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.full_like(p, 0.25) for k, p in params.items()}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, m, v, step=17, seed=3, model={"kind": "demo"}, extra={"x": 1})
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.seed == 3
    assert ck.model == {"kind": "demo"}
    assert ck.extra == {"x": 1}
    assert set(ck.params) == set(params)
    for k in params:
        assert ck.params[k].dtype == params[k].dtype
        assert np.array_equal(ck.params[k], params[k])
        assert np.array_equal(ck.adam_v[k], v[k])


def test_save_load_save_is_byte_identical(tmp_path):
    params = sample_params()
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, params, zeros, zeros, 0, 0, model={})
    ck = load_checkpoint(p1)
    save_checkpoint(p2, ck.params, ck.adam_m, ck.adam_v, ck.step, ck.seed, model=ck.model, extra=ck.extra)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_raises(tmp_path):
    params = sample_params()
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, zeros, zeros, 0, 0, model={})
    blob = path.read_bytes()
    for cut in (2, 10, len(blob) // 2, len(blob) - 3):
        bad = tmp_path / f"cut{cut}.ckpt"
        bad.write_bytes(blob[:cut])
        with pytest.raises(CorruptManifest):
            load_checkpoint(bad)


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(CorruptManifest):
        load_checkpoint(path)


def test_missing_file_raises(tmp_path):
    with pytest.raises(CorruptManifest):
        load_checkpoint(tmp_path / "absent.ckpt")
