"""MLP forward/VJP against the tape, Adam behaviour, checkpoints."""

import numpy as np
import pytest

from symsmc.diffcore import Tape, backward, grads_by_name, logsumexp
from symsmc.errors import ContractError
from symsmc.neural import (MlpSpec, ParamStore, adam_step, forward,
                           forward_batch, glorot_init, init_store,
                           load_checkpoint, save_checkpoint, vjp_batch)
from symsmc.stochastics import RngKey


SPEC = MlpSpec((5, 8, 3), head="log_softmax")


class TestInitialisation:

    def test_glorot_bounds_and_zero_biases(self):
        values = glorot_init(SPEC, RngKey(4))
        for l, (fi, fo) in enumerate(zip(SPEC.sizes, SPEC.sizes[1:])):
            w = values[f"w{l}"]
            limit = np.sqrt(6.0 / (fi + fo))
            assert w.shape == (fo, fi)
            assert np.all(np.abs(w) <= limit)
            assert np.abs(w).max() > 0.5 * limit  # actually spread out
            np.testing.assert_array_equal(values[f"b{l}"], np.zeros(fo))

    def test_init_is_key_deterministic(self):
        a = glorot_init(SPEC, RngKey(11))
        b = glorot_init(SPEC, RngKey(11))
        c = glorot_init(SPEC, RngKey(12))
        for name in a:
            assert np.array_equal(a[name], b[name])
        assert not np.array_equal(a["w0"], c["w0"])

    def test_sigmoid_head_needs_single_output(self):
        with pytest.raises(ContractError):
            MlpSpec((4, 4, 2), head="sigmoid_logit")


class TestForward:

    def test_log_softmax_normalises(self):
        store = init_store(SPEC, RngKey(0))
        tape = Tape(record=False)
        rng = np.random.default_rng(1)
        for _ in range(10):
            out = forward(store, SPEC, rng.normal(size=5), tape)
            assert logsumexp(out).item() == pytest.approx(0.0, abs=1e-10)

    def test_batch_matches_single(self):
        store = init_store(SPEC, RngKey(0))
        tape = Tape(record=False)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(7, 5))
        out, _ = forward_batch(store, SPEC, x)
        for i in range(7):
            single = forward(store, SPEC, x[i], tape)
            np.testing.assert_allclose(out[i], single.value, atol=1e-12)

    def test_linear_head_batch(self):
        spec = MlpSpec((3, 4, 2), head="linear")
        store = init_store(spec, RngKey(9))
        x = np.random.default_rng(3).normal(size=(4, 3))
        out, _ = forward_batch(store, spec, x)
        assert out.shape == (4, 2)


class TestVjpOracle:
    """Batched backward agrees with the autodiff tape."""

    def test_vjp_matches_tape(self):
        store = init_store(SPEC, RngKey(21))
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 5))
        cot = rng.normal(size=(6, 3))

        out, cache = forward_batch(store, SPEC, x)
        fast = vjp_batch(store, SPEC, cache, cot)

        tape = Tape()
        total = None
        from symsmc.diffcore import dot
        for i in range(6):
            row = forward(store, SPEC, x[i], tape)
            term = dot(row, tape.constant(cot[i]))
            total = term if total is None else total + term
        slow = grads_by_name(tape, backward(total))
        for name in fast:
            np.testing.assert_allclose(fast[name], slow[name], atol=1e-10,
                                       err_msg=name)

    def test_vjp_matches_tape_sigmoid_head(self):
        spec = MlpSpec((4, 6, 1), head="sigmoid_logit")
        store = init_store(spec, RngKey(33))
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 4))
        cot = rng.normal(size=(3, 1))
        out, cache = forward_batch(store, spec, x)
        fast = vjp_batch(store, spec, cache, cot)
        tape = Tape()
        from symsmc.diffcore import dot
        total = None
        for i in range(3):
            row = forward(store, spec, x[i], tape)
            term = dot(row, tape.constant(cot[i]))
            total = term if total is None else total + term
        slow = grads_by_name(tape, backward(total))
        for name in fast:
            np.testing.assert_allclose(fast[name], slow[name], atol=1e-10,
                                       err_msg=name)


class TestAdam:

    def test_quadratic_bowl_converges(self):
        store = ParamStore()
        store.add("w", np.array([3.0, -2.0, 1.5, -0.7]))
        for _ in range(500):
            grads = {"w": 2.0 * store["w"]}
            adam_step(store, grads, lr=0.1)
        assert np.linalg.norm(store["w"]) < 1e-3

    def test_zero_lr_is_identity(self):
        store = ParamStore()
        w0 = np.array([1.0, 2.0])
        store.add("w", w0.copy())
        adam_step(store, {"w": np.array([5.0, -5.0])}, lr=0.0)
        np.testing.assert_array_equal(store["w"], w0)

    def test_first_step_is_signed_lr(self):
        # bias correction makes the very first update lr * sign(grad)
        store = ParamStore()
        store.add("w", np.zeros(3))
        g = np.array([0.3, -4.0, 1e-4])
        adam_step(store, {"w": g.copy()}, lr=0.01)
        np.testing.assert_allclose(store["w"], -0.01 * np.sign(g), rtol=1e-3)

    def test_missing_grad_entry_is_skipped(self):
        store = ParamStore()
        store.add("a", np.ones(2))
        store.add("b", np.ones(2))
        adam_step(store, {"a": np.ones(2)}, lr=0.1)
        np.testing.assert_array_equal(store["b"], np.ones(2))
        assert not np.array_equal(store["a"], np.ones(2))


class TestCheckpoints:

    def test_npz_roundtrip_bit_exact(self, tmp_path):
        values = glorot_init(SPEC, RngKey(77))
        path = tmp_path / "model.npz"
        save_checkpoint(path, values)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(values)
        for name in values:
            assert np.array_equal(loaded[name], values[name])

    def test_json_roundtrip_bit_exact(self, tmp_path):
        values = glorot_init(SPEC, RngKey(78))
        path = tmp_path / "model.json"
        save_checkpoint(path, values)
        loaded = load_checkpoint(path)
        for name in values:
            assert np.array_equal(loaded[name], values[name])
            assert loaded[name].shape == values[name].shape

    def test_unknown_suffix_raises(self, tmp_path):
        with pytest.raises(ContractError):
            save_checkpoint(tmp_path / "model.pkl", {"w": np.ones(1)})
