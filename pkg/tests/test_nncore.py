import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from causalmta import nncore as nn
from causalmta.nncore import ops


def _ref_lstm_step(x, h, c, w, b):
    """Gate equations written out with plain numpy, independent of the fused op."""
    hid = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ w + b
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f = sig(z[:, :hid]), sig(z[:, hid:2 * hid])
    g, o = np.tanh(z[:, 2 * hid:3 * hid]), sig(z[:, 3 * hid:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestGrl:
    def test_forward_identity(self):
        x = nn.Tensor([1.2, -0.5])
        np.testing.assert_array_equal(nn.grl(x, 1.0).value, [1.2, -0.5])

    def test_negates_gradient(self):
        x = nn.Tensor([1.2, -0.5], requires_grad=True)
        with nn.Tape() as tape:
            loss = nn.grl(x, 1.0).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])

    def test_half_strength_matches_finite_differences(self):
        x = np.array([0.3, -1.1, 2.0])
        analytic = nn.Tensor(x, requires_grad=True)
        with nn.Tape() as tape:
            loss = nn.grl(analytic, 0.5).sum()
        tape.backward(loss)
        # reversed objective is -0.5 * sum(x)
        eps = 1e-6
        fd = np.array([(-0.5 * (x + eps * e).sum() + 0.5 * (x - eps * e).sum()) / (2 * eps) for e in np.eye(3)])
        np.testing.assert_allclose(analytic.grad, fd, rtol=1e-6)

    @given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), st.floats(0, 10))
    def test_identity_for_any_strength(self, x, lam):
        np.testing.assert_array_equal(nn.grl(nn.Tensor(x), lam).value, x)

    def test_zero_strength_blocks_reversed_path(self):
        rng = np.random.default_rng(0)
        trunk = nn.Parameter(rng.normal(size=(3, 3)), "trunk")
        x = nn.Tensor(rng.normal(size=(2, 3)))
        with nn.Tape() as tape:
            loss = ops.sum(nn.matmul(nn.grl(nn.matmul(x, trunk), 0.0), nn.Tensor(np.ones((3, 1)))))
        tape.backward(loss)
        np.testing.assert_array_equal(trunk.grad, np.zeros((3, 3)))

    def test_negative_strength_rejected(self):
        with pytest.raises(ValueError):
            nn.grl(nn.Tensor([1.0]), -1.0)


class TestLstmStep:
    def _zero_layer(self, d, hid):
        return nn.LstmLayer(nn.Parameter(np.zeros((d + hid, 4 * hid)), "w"), nn.Parameter(np.zeros(4 * hid), "b"))

    def test_zero_everything(self):
        lay = self._zero_layer(2, 3)
        h, c = nn.lstm_step(nn.Tensor(np.zeros((1, 2))), (nn.Tensor(np.zeros((1, 3))), nn.Tensor(np.zeros((1, 3)))), lay)
        np.testing.assert_array_equal(h.value, 0.0)
        np.testing.assert_array_equal(c.value, 0.0)

    def test_zero_params_unit_cell(self):
        lay = self._zero_layer(2, 1)
        h, c = nn.lstm_step(nn.Tensor(np.zeros((1, 2))), (nn.Tensor(np.zeros((1, 1))), nn.Tensor(np.ones((1, 1)))), lay)
        assert c.value[0, 0] == pytest.approx(0.5, abs=1e-15)
        assert h.value[0, 0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)
        assert h.value[0, 0] == pytest.approx(0.23106, abs=1e-5)

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        x, h, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        w, b = rng.normal(size=(8, 20)), rng.normal(size=20)
        ho, co = nn.lstm_cell(nn.Tensor(x), nn.Tensor(h), nn.Tensor(c), nn.Tensor(w), nn.Tensor(b))
        hr, cr = _ref_lstm_step(x, h, c, w, b)
        np.testing.assert_allclose(ho.value, hr, atol=1e-14)
        np.testing.assert_allclose(co.value, cr, atol=1e-14)

    def test_gradients_finite_difference(self):
        rng = np.random.default_rng(2)
        x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        w = nn.Parameter(rng.normal(scale=0.5, size=(7, 16)), "w")
        b = nn.Parameter(rng.normal(size=16), "b")
        xt = nn.Parameter(x, "x")
        ht = nn.Parameter(h, "h")
        ct = nn.Parameter(c, "c")
        proj = rng.normal(size=(4, 1))

        def loss():
            ho, co = nn.lstm_cell(xt, ht, ct, w, b)
            return ops.sum(nn.matmul(ho, nn.Tensor(proj))) + ops.sum(ops.mul(co, co))

        assert nn.param_grad_check(loss, [w, b, xt, ht, ct]) <= 1e-4

    def test_mask_carries_state(self):
        rng = np.random.default_rng(3)
        h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        w, b = rng.normal(size=(5, 12)), rng.normal(size=12)
        ho, co = nn.lstm_cell(nn.Tensor(rng.normal(size=(2, 2))), nn.Tensor(h), nn.Tensor(c),
                              nn.Tensor(w), nn.Tensor(b), mask=np.array([True, False]))
        np.testing.assert_array_equal(ho.value[1], h[1])
        np.testing.assert_array_equal(co.value[1], c[1])

    def test_masked_gradients(self):
        rng = np.random.default_rng(4)
        w = nn.Parameter(rng.normal(scale=0.5, size=(5, 12)), "w")
        b = nn.Parameter(rng.normal(size=12), "b")
        ht = nn.Parameter(rng.normal(size=(3, 3)), "h")
        x = nn.Tensor(rng.normal(size=(3, 2)))
        mask = np.array([True, False, True])

        def loss():
            h1, c1 = nn.lstm_cell(x, ht, nn.Tensor(np.zeros((3, 3))), w, b, mask)
            h2, _ = nn.lstm_cell(x, h1, c1, w, b, np.array([False, True, True]))
            return ops.sum(ops.mul(h2, h2))

        assert nn.param_grad_check(loss, [w, b, ht]) <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.lstm_cell(nn.Tensor(np.zeros((1, 2))), nn.Tensor(np.zeros((1, 3))), nn.Tensor(np.zeros((1, 3))),
                         nn.Tensor(np.zeros((4, 12))), nn.Tensor(np.zeros(12)))


class TestSoftmaxCrossEntropy:
    def test_symmetric(self):
        np.testing.assert_allclose(nn.softmax(nn.Tensor([0.0, 0.0])).value, [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(nn.softmax(nn.Tensor([math.log(2), 0.0])).value, [2 / 3, 1 / 3], atol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_array_equal(nn.softmax(nn.Tensor([1000.0, 1000.0])).value, [0.5, 0.5])

    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
    def test_simplex(self, x):
        p = nn.softmax(nn.Tensor(x)).value
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-12

    def test_ce_values(self):
        assert nn.cross_entropy(nn.Tensor([[1.0, 0.0]]), [0]).value == 0.0
        assert nn.cross_entropy(nn.Tensor([[0.5, 0.5]]), [1]).value == pytest.approx(0.693147, abs=1e-6)
        clamp = nn.cross_entropy(nn.Tensor([[0.0, 1.0]]), [0]).value
        assert clamp == pytest.approx(-math.log(1e-12))
        assert clamp == pytest.approx(27.631, abs=1e-3)

    def test_ce_target_range(self):
        with pytest.raises(IndexError):
            nn.cross_entropy(nn.Tensor([[0.5, 0.5]]), [2])

    def test_softmax_ce_gradient(self):
        rng = np.random.default_rng(5)
        targets = np.array([0, 2, 1])
        weights = np.array([1.0, 0.5, 0.0])
        err = nn.grad_check(lambda x: nn.cross_entropy(nn.softmax(x), targets, weights), rng.normal(size=(3, 3)))
        assert err <= 1e-6


class TestAttention:
    def test_single_step_returns_value(self):
        rng = np.random.default_rng(6)
        q, k, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 1, 3)), rng.normal(size=(1, 1, 3))
        np.testing.assert_allclose(nn.attention(nn.Tensor(q), nn.Tensor(k), nn.Tensor(v)).value, v[:, 0])

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(7)
        keys = np.repeat(rng.normal(size=(1, 1, 4)), 5, axis=1)
        vals = rng.normal(size=(1, 5, 4))
        out = nn.attention(nn.Tensor(rng.normal(size=(1, 4))), nn.Tensor(keys), nn.Tensor(vals)).value
        np.testing.assert_allclose(out, vals.mean(axis=1), atol=1e-14)

    def test_hand_computation(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        v = np.array([[[2.0, 0.0], [0.0, 4.0]]])
        s = 1 / math.sqrt(2)
        w0 = math.exp(s) / (math.exp(s) + 1.0)
        out = nn.attention(nn.Tensor(q), nn.Tensor(k), nn.Tensor(v)).value
        np.testing.assert_allclose(out, [[2 * w0, 4 * (1 - w0)]], atol=1e-15)

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            nn.attention(nn.Tensor(np.zeros((1, 2))), nn.Tensor(np.zeros((1, 0, 2))), nn.Tensor(np.zeros((1, 0, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(8)
        q = nn.Parameter(rng.normal(size=(2, 3)), "q")
        k = nn.Parameter(rng.normal(size=(2, 4, 3)), "k")
        v = nn.Parameter(rng.normal(size=(2, 4, 3)), "v")
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
        proj = nn.Tensor(rng.normal(size=(3, 1)))
        loss = lambda: ops.sum(ops.tanh(nn.matmul(nn.attention(q, k, v, mask), proj)))
        assert nn.param_grad_check(loss, [q, k, v]) <= 1e-4

    def test_padding_is_bitwise_invisible(self):
        rng = np.random.default_rng(9)
        q, k, v = rng.normal(size=(1, 3)), rng.normal(size=(1, 5, 3)), rng.normal(size=(1, 5, 3))
        base = nn.attention(nn.Tensor(q), nn.Tensor(k), nn.Tensor(v)).value
        kp = np.concatenate([k, rng.normal(size=(1, 9, 3))], axis=1)
        vp = np.concatenate([v, rng.normal(size=(1, 9, 3))], axis=1)
        mask = np.array([[True] * 5 + [False] * 9])
        padded = nn.attention(nn.Tensor(q), nn.Tensor(kp), nn.Tensor(vp), mask).value
        np.testing.assert_array_equal(base, padded)


class TestAdam:
    def test_zero_gradient_keeps_value(self):
        p = nn.Parameter(np.array([1.5]), "p")
        opt = nn.Adam([p], lr=0.1)
        opt.step()
        assert p.value[0] == 1.5

    def test_first_step_is_sign(self):
        p = nn.Parameter(np.array([0.0, 0.0]), "p")
        p.grad[:] = [3.0, -0.2]
        nn.Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.value, [-0.01, 0.01], rtol=1e-6)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_quadratic_trajectory_matches_reference(self):
        # reference: scalar Adam written from the update rule with python floats
        x_ref, m, v = 1.0, 0.0, 0.0
        ref = []
        for t in range(1, 11):
            g = 2 * x_ref
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x_ref -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            ref.append(x_ref)
        p = nn.Parameter(np.array([1.0]), "x")
        opt = nn.Adam([p], lr=0.1)
        got = []
        for _ in range(10):
            with nn.Tape() as tape:
                loss = ops.sum(ops.mul(p, p))
            tape.backward(loss)
            opt.step()
            got.append(p.value[0])
        np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)

    def test_clip(self):
        p = nn.Parameter(np.zeros(2), "p")
        p.grad[:] = [30.0, 40.0]
        norm = nn.clip_grad_norm([p], 5.0)
        assert norm == pytest.approx(50.0)
        np.testing.assert_allclose(p.grad, [3.0, 4.0])


class TestGradCheck:
    def test_sum(self):
        assert nn.grad_check(lambda x: x.sum(), np.array([1.0, 2.0])) <= 1e-9

    def test_square(self):
        x = nn.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with nn.Tape() as tape:
            y = ops.sum(ops.mul(x, x))
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])
        assert nn.grad_check(lambda t: ops.sum(ops.mul(t, t)), np.array([1.0, 2.0])) <= 1e-8

    def test_nan_is_error(self):
        with pytest.raises(nn.NumericError):
            nn.grad_check(lambda t: ops.mul(t.sum(), nn.Tensor(np.nan)), np.array([1.0]))

    @pytest.mark.parametrize("op", ["tanh", "sigmoid", "elu", "exp"])
    def test_elementwise(self, op):
        fn = getattr(ops, op)
        x = np.array([-2.0, -0.3, 0.4, 1.7])
        assert nn.grad_check(lambda t: ops.sum(fn(t)), x) <= 1e-6

    def test_composites(self):
        rng = np.random.default_rng(10)
        w = nn.Tensor(rng.normal(size=(3, 2)))
        f = lambda t: ops.sum(ops.concat([ops.linear(t, w), ops.index(t, (slice(None), [0, 2]))]) * 0.5)
        assert nn.grad_check(f, rng.normal(size=(4, 3))) <= 1e-6


class TestTape:
    def test_backward_twice_is_error(self):
        x = nn.Tensor([1.0], requires_grad=True)
        with nn.Tape() as tape:
            y = ops.mul(x, x).sum()
        tape.backward(y)
        with pytest.raises(RuntimeError):
            tape.backward(y)

    def test_no_tape_records_nothing(self):
        x = nn.Parameter(np.array([1.0]), "x")
        y = ops.mul(x, x)
        assert y._is_leaf

    def test_reverse_order(self):
        x = nn.Tensor([2.0], requires_grad=True)
        with nn.Tape() as tape:
            a = ops.mul(x, x)
            b = ops.mul(a, x)
            c = ops.sum(ops.add(b, a))
        tape.backward(c)
        assert x.grad[0] == pytest.approx(3 * 4 + 2 * 2)


class TestArchive:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        params = {"a.w": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
        nn.archive.save(tmp_path / "m.bin", params, {"config_hash": "abc"})
        loaded, meta = nn.archive.load(tmp_path / "m.bin")
        assert meta == {"config_hash": "abc"}
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k])

    def test_bytes_are_deterministic(self):
        params = {"x": np.arange(6.0).reshape(2, 3)}
        assert nn.archive.dumps(params, {"k": 1}) == nn.archive.dumps(dict(params), {"k": 1})

    def test_checksum_detects_corruption(self):
        blob = bytearray(nn.archive.dumps({"x": np.ones(3)}))
        blob[-1] ^= 0xFF
        with pytest.raises(nn.archive.ArchiveError):
            nn.archive.loads(bytes(blob))

    def test_layout(self):
        blob = nn.archive.dumps({"x": np.array([1.0])})
        assert blob[:8] == b"CMTAPARM"
        assert int.from_bytes(blob[8:12], "little") == nn.archive.FORMAT_VERSION
        assert blob[-8:] == np.array([1.0], dtype="<f8").tobytes()


class TestModules:
    def test_forget_bias_and_init_bounds(self):
        rng = np.random.default_rng(12)
        lstm = nn.LSTM(3, 4, 3, rng, "enc")
        lay = lstm.layer(1)
        np.testing.assert_array_equal(lay.b.value[4:8], 1.0)
        assert np.abs(lay.w.value).max() <= 1 / math.sqrt(8)
        assert lay.w.shape == (8, 16)
        assert len(lstm.parameters()) == 6

    def test_run_matches_stepwise_reference(self):
        rng = np.random.default_rng(13)
        lstm = nn.LSTM(2, 3, 2, rng, "l")
        xs = rng.normal(size=(4, 1, 2))
        outs, _ = lstm.run([nn.Tensor(x) for x in xs])
        hs = [np.zeros((1, 3))] * 2
        cs = [np.zeros((1, 3))] * 2
        for t in range(4):
            inp = xs[t]
            for k in range(2):
                lay = lstm.layer(k)
                hs[k], cs[k] = _ref_lstm_step(inp, hs[k], cs[k], lay.w.value, lay.b.value)
                inp = hs[k]
            np.testing.assert_allclose(outs[t].value, inp, atol=1e-13)

    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(14)
        m1 = nn.MLP([3, 5, 2], rng, "m")
        m2 = nn.MLP([3, 5, 2], np.random.default_rng(99), "m")
        m2.load_state_dict(m1.state_dict())
        x = nn.Tensor(rng.normal(size=(2, 3)))
        np.testing.assert_array_equal(m1(x).value, m2(x).value)
