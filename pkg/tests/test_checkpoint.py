import numpy as np
import pytest

from crm.checkpoint import CheckpointError, load_arrays, load_params, save_arrays, save_params
from crm.model import CrmConfig, init_params
from crm.optim import AdamState, adam_step, collect_grads


def small_params():
    cfg = CrmConfig(grid=(4, 6), stages=2, feature_dim=4, backbone_widths=(4, 4, 4), phi_widths=(4, 4, 4, 4),
                    psi_widths=(4, 4, 4, 4), zeta_widths=(4, 4, 4))
    return init_params(cfg)


def test_arrays_round_trip_bit_exact(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "s": np.array(2.5)}
    save_arrays(tmp_path / "x.ckpt", arrays, {"note": "hi", "n": 3})
    back, meta = load_arrays(tmp_path / "x.ckpt")
    assert meta == {"note": "hi", "n": 3} and list(back) == ["a", "b", "s"]
    for k in arrays:
        assert back[k].tobytes() == np.asarray(arrays[k], dtype=np.float64).tobytes()


def test_params_and_adam_round_trip(tmp_path, rng):
    params = small_params()
    state = AdamState(learning_rate=3e-4)
    for p in params.values():
        p.grad = rng.normal(size=p.shape)
    adam_step(params, collect_grads(params), state)
    save_params(tmp_path / "p.ckpt", params, {"epoch": 4}, state)
    back, meta, adam = load_params(tmp_path / "p.ckpt")
    assert meta["epoch"] == 4
    assert all(np.array_equal(back[n].data, params[n].data) and back[n].requires_grad for n in params)
    assert adam.step == 1 and adam.learning_rate == 3e-4
    assert all(np.array_equal(adam.m[n], state.m[n]) and np.array_equal(adam.v[n], state.v[n]) for n in params)
    save_params(tmp_path / "q.ckpt", params)
    assert load_params(tmp_path / "q.ckpt")[2] is None


def test_same_content_same_bytes(tmp_path):
    save_params(tmp_path / "a.ckpt", small_params(), {"k": [1, 2]})
    save_params(tmp_path / "b.ckpt", small_params(), {"k": [1, 2]})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corrupt_files_rejected(tmp_path):
    save_params(tmp_path / "p.ckpt", small_params())
    raw = (tmp_path / "p.ckpt").read_bytes()
    cases = {"magic": b"NOTACKPT" + raw[8:], "short": raw[:10], "header": raw[:40], "data": raw[:-3]}
    for name, blob in cases.items():
        (tmp_path / f"{name}.ckpt").write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_params(tmp_path / f"{name}.ckpt")
