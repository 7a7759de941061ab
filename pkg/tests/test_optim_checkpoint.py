"""Optimizer update math and checkpoint round-trips."""

import numpy as np
import pytest

from pointcell import tensor as T
from pointcell.checkpoint import load_arrays, load_meta, save_arrays, save_meta
from pointcell.errors import ContractError, ValidationError
from pointcell.optim import AdamW
from pointcell.tensor import Tensor


def test_single_step_matches_hand_computation():
    # one parameter, one step, worked by hand
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    p.grad = np.array([2.0])
    opt.step()
    m_hat = 0.1 * 2.0 / (1 - 0.9)          # = 2.0
    v_hat = 0.001 * 4.0 / (1 - 0.999)      # = 4.0
    expected = 1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert abs(p.data[0] - expected) < 1e-12


def test_weight_decay_is_decoupled():
    # zero gradient: decay shrinks the weight, moments stay zero
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.5, weight_decay=0.1)
    p.grad = np.array([0.0])
    opt.step()
    assert abs(p.data[0] - 2.0 * (1 - 0.5 * 0.1)) < 1e-15
    assert opt.m["w"][0] == 0.0 and opt.v["w"][0] == 0.0


def test_decay_multiplicative_not_in_moments():
    # with decay on and a nonzero grad, the update equals
    # decay-then-adam on the same gradient
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(4,))
    g = rng.normal(size=(4,))

    p = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.01, weight_decay=0.3)
    p.grad = g.copy()
    opt.step()

    q = Tensor(w0.copy(), requires_grad=True)
    ref = AdamW({"w": q}, lr=0.01, weight_decay=0.0)
    q.grad = g.copy()
    q.data *= 1 - 0.01 * 0.3
    ref.step()
    assert np.allclose(p.data, q.data, atol=1e-15)


def test_converges_on_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.05, weight_decay=0.0)
    for _ in range(2000):
        opt.zero_grad()
        loss = T.sum_all(T.square(p))
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-3


def test_missing_grad_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"w": p})
    with pytest.raises(ContractError):
        opt.step()


def test_bad_hyperparams_raise():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    with pytest.raises(ContractError):
        AdamW(p, lr=-1e-4)
    with pytest.raises(ContractError):
        AdamW(p, betas=(1.0, 0.999))
    with pytest.raises(ContractError):
        AdamW(p, weight_decay=-1.0)


def test_lr_zero_freezes_parameters():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = AdamW({"w": p}, lr=0.0, weight_decay=0.1)
    before = p.data.copy()
    p.grad = np.array([3.0, -1.0])
    opt.step()
    assert np.array_equal(p.data, before)


def test_state_roundtrip_resumes_identically(tmp_path):
    rng = np.random.default_rng(1)
    w0 = rng.normal(size=(3, 2))

    def run(n_steps, opt, p):
        for i in range(n_steps):
            opt.zero_grad()
            loss = T.sum_all(T.square(T.add_scalar(p, -0.5)))
            loss.backward()
            opt.step()

    # continuous run
    pa = Tensor(w0.copy(), requires_grad=True)
    oa = AdamW({"w": pa}, lr=0.01, weight_decay=0.05)
    run(10, oa, pa)

    # split run with a save/load in the middle
    pb = Tensor(w0.copy(), requires_grad=True)
    ob = AdamW({"w": pb}, lr=0.01, weight_decay=0.05)
    run(6, ob, pb)
    path = tmp_path / "ck.ptck"
    arrays = {"w": pb.data}
    arrays.update(ob.state_arrays())
    save_arrays(path, arrays)
    save_meta(tmp_path / "ck.json", {"step": ob.step_count})

    loaded = load_arrays(path)
    pc = Tensor(loaded["w"], requires_grad=True)
    oc = AdamW({"w": pc}, lr=0.01, weight_decay=0.05)
    oc.load_state_arrays(loaded, load_meta(tmp_path / "ck.json")["step"])
    run(4, oc, pc)
    assert np.array_equal(pa.data, pc.data)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    arrays = {
        "a": np.arange(6.0).reshape(2, 3),
        "scalar": np.asarray(3.5),
        "deep.name.w": np.random.default_rng(2).normal(size=(2, 1, 2)),
    }
    p = tmp_path / "m.ptck"
    save_arrays(p, arrays)
    out = load_arrays(p)
    assert set(out) == set(arrays)
    for k in arrays:
        assert out[k].shape == np.asarray(arrays[k]).shape
        assert np.array_equal(out[k], arrays[k])


def test_checkpoint_bitwise_stable(tmp_path):
    arrays = {"b": np.ones((2, 2)), "a": np.zeros(3)}
    p1, p2 = tmp_path / "1.ptck", tmp_path / "2.ptck"
    save_arrays(p1, arrays)
    save_arrays(p2, {"a": np.zeros(3), "b": np.ones((2, 2))})  # insertion order differs
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_header_layout(tmp_path):
    p = tmp_path / "h.ptck"
    save_arrays(p, {"x": np.asarray([1.0, 2.0])})
    blob = p.read_bytes()
    assert blob[:4] == b"PTCK"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1          # name length
    assert blob[12:13] == b"x"
    assert int.from_bytes(blob[13:21], "little") == 1         # rank
    assert int.from_bytes(blob[21:29], "little") == 2         # extent
    assert np.frombuffer(blob[29:], dtype="<f8").tolist() == [1.0, 2.0]


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ptck"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValidationError):
        load_arrays(p)


def test_checkpoint_rejects_truncation(tmp_path):
    p = tmp_path / "t.ptck"
    save_arrays(p, {"x": np.ones((4, 4))})
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(ValidationError):
        load_arrays(p)


def test_checkpoint_rejects_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_arrays(tmp_path / "absent.ptck")
