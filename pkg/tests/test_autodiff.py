"""Engine-level checks: hand oracles, finite differences, graph behavior."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zslvit import autodiff as ad
from zslvit.errors import ContractError, DimensionError


def fd_grad(f, x, h=1e-6):
    """Central-difference gradient of scalar f wrt array x (test-local oracle)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, arrays, atol=1e-7):
    """Backprop through ``build(tensors) -> scalar Tensor`` vs central differences."""
    tensors = [ad.param(a) for a in arrays]
    loss = build(*tensors)
    ad.backward(loss)
    for t, a in zip(tensors, arrays):
        def f(a=a, tensors=tensors, arrays=arrays):
            with ad.no_grad():
                fresh = [ad.tensor(arr) for arr in arrays]
                return float(build(*fresh).data)

        num = fd_grad(f, a)
        np.testing.assert_allclose(t.grad, num, atol=atol, rtol=1e-5)


class TestForwardOracles:
    def test_matmul_hand_values(self):
        a = ad.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = ad.tensor([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
        np.testing.assert_allclose((a @ b).data, [[58.0, 64.0], [139.0, 154.0]])

    def test_softmax_hand_values(self):
        y = ad.softmax(ad.tensor([np.log(2.0), 0.0]))
        np.testing.assert_allclose(y.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=7)
        a = ad.softmax(ad.tensor(x)).data
        b = ad.softmax(ad.tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_extreme_logits_finite(self):
        y = ad.softmax(ad.tensor([1e4, -1e4, 0.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y.sum(), 1.0, atol=1e-15)

    def test_l1_hand_value(self):
        a = ad.tensor([1.0, 3.0])
        b = ad.tensor([2.0, 5.0])
        assert ad.l1_loss(a, b).item() == pytest.approx(1.5)
        assert ad.l1_loss(a, b, reduction="sum").item() == pytest.approx(3.0)

    def test_layer_norm_normalizes(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 16)) * 3 + 2
        g = ad.tensor(np.ones(16))
        b = ad.tensor(np.zeros(16))
        y = ad.layer_norm(ad.tensor(x), g, b).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_attention_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        t_len, d, heads = 5, 8, 2
        q, k, v = (rng.normal(size=(t_len, d)) for _ in range(3))
        out, w = ad.attention(ad.tensor(q), ad.tensor(k), ad.tensor(v), heads)
        dh = d // heads
        expected = np.zeros((t_len, d))
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(t_len):
                logits = np.array([q[i, sl] @ k[j, sl] for j in range(t_len)]) / np.sqrt(dh)
                e = np.exp(logits - logits.max())
                a = e / e.sum()
                np.testing.assert_allclose(w[h, i], a, atol=1e-12)
                expected[i, sl] = sum(a[j] * v[j, sl] for j in range(t_len))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        _, w = ad.attention(
            ad.tensor(rng.normal(size=(6, 8))),
            ad.tensor(rng.normal(size=(6, 8))),
            ad.tensor(rng.normal(size=(6, 8))),
            4,
        )
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=12),
    st.randoms(use_true_random=False),
)
def test_softmax_simplex_and_permutation(vals, rnd):
    x = np.array(vals)
    perm = np.arange(x.size)
    rnd.shuffle(perm)
    y = ad.softmax(ad.tensor(x)).data
    yp = ad.softmax(ad.tensor(x[perm])).data
    assert y.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(y >= 0)
    np.testing.assert_allclose(yp, y[perm], atol=1e-12)


class TestBackwardFiniteDifference:
    def test_add_sub_mul(self):
        rng = np.random.default_rng(4)
        arrs = [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
        check_op(lambda a, b: ad.mean(ad.mul(ad.add(a, b), ad.sub(a, b))), arrs)

    def test_bias_add(self):
        rng = np.random.default_rng(5)
        check_op(
            lambda a, b: ad.mean(ad.add(a, b)),
            [rng.normal(size=(4, 6)), rng.normal(size=6)],
        )

    def test_matmul_all_arities(self):
        rng = np.random.default_rng(6)
        check_op(lambda a, b: ad.mean(a @ b), [rng.normal(size=(3, 5)), rng.normal(size=(5, 2))])
        check_op(lambda a, b: ad.mean(a @ b), [rng.normal(size=5), rng.normal(size=(5, 2))])
        check_op(lambda a, b: ad.mean(a @ b), [rng.normal(size=(3, 5)), rng.normal(size=5)])
        check_op(lambda a, b: a @ b, [rng.normal(size=5), rng.normal(size=5)])

    def test_nonlinearities(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 5))
        check_op(lambda a: ad.mean(ad.gelu(a)), [x])
        check_op(lambda a: ad.mean(ad.relu(a)), [x + 0.1])
        check_op(lambda a: ad.mean(ad.exp(a)), [x])
        check_op(lambda a: ad.mean(ad.log(a)), [np.abs(x) + 0.5])

    def test_softmax_backward(self):
        rng = np.random.default_rng(8)
        w = rng.normal(size=(3, 6))
        check_op(lambda a: ad.mean(ad.mul(ad.softmax(a), ad.tensor(w))), [rng.normal(size=(3, 6))])

    def test_layer_norm_backward(self):
        rng = np.random.default_rng(9)
        w = rng.normal(size=(4, 8))
        check_op(
            lambda x, g, b: ad.mean(ad.mul(ad.layer_norm(x, g, b), ad.tensor(w))),
            [rng.normal(size=(4, 8)), rng.normal(size=8), rng.normal(size=8)],
        )

    def test_shape_ops_backward(self):
        rng = np.random.default_rng(10)
        w = rng.normal(size=(2, 3))
        w2 = rng.normal(size=(3, 4))
        check_op(lambda a: ad.mean(ad.mul(ad.slice_rows(a, 1, 3), ad.tensor(w))), [rng.normal(size=(5, 3))])
        check_op(
            lambda a: ad.mean(ad.mul(ad.take(a, [3, 0, 3]), ad.tensor(w2))),
            [rng.normal(size=(5, 4))],
        )
        check_op(
            lambda a, b: ad.mean(ad.concat([a, b], axis=0)),
            [rng.normal(size=(2, 3)), rng.normal(size=(4, 3))],
        )
        check_op(lambda a: ad.mean(ad.transpose(a)), [rng.normal(size=(3, 4))])
        check_op(lambda a: ad.mean(ad.reshape(a, (6,))), [rng.normal(size=(2, 3))])

    def test_scale_rows_backward(self):
        rng = np.random.default_rng(11)
        check_op(
            lambda m, v: ad.mean(ad.scale_rows(m, v)),
            [rng.normal(size=(5, 3)), rng.normal(size=5)],
        )

    def test_attention_backward(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(5, 8))
        check_op(
            lambda q, k, v: ad.mean(ad.mul(ad.attention(q, k, v, 2)[0], ad.tensor(w))),
            [rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))],
        )


class TestGraphSemantics:
    def test_shared_subexpression_accumulates(self):
        # d/dx of x*x + x*x = 4x
        x = ad.param(np.array([3.0]))
        y = ad.mul(x, x)
        loss = ad.total_sum(ad.add(y, y))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_repeated_backward_accumulates(self):
        x = ad.param(np.array([2.0]))
        loss = ad.total_sum(ad.mul(x, x))
        ad.backward(loss)
        first = x.grad.copy()
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * first)

    def test_zero_grad_resets(self):
        x = ad.param(np.array([2.0]))
        ad.backward(ad.total_sum(ad.mul(x, x)))
        x.zero_grad()
        assert x.grad is None

    def test_backward_requires_scalar(self):
        x = ad.param(np.ones(3))
        with pytest.raises(ContractError):
            ad.backward(ad.mul(x, 2.0))

    def test_no_grad_builds_no_graph(self):
        x = ad.param(np.ones((2, 2)))
        with ad.no_grad():
            y = ad.mean(ad.mul(x, x))
        assert y._backward is None and not y.requires_grad

    def test_deterministic_gradients(self):
        def run():
            rng = np.random.default_rng(13)
            w = ad.param(rng.normal(size=(6, 6)))
            x = ad.tensor(rng.normal(size=(4, 6)))
            loss = ad.mean(ad.gelu(x @ w))
            ad.backward(loss)
            return w.grad

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_mismatched_shapes_named_in_error(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(3, 3\)"):
            ad.add(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((3, 3))))

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(6, 8)) * 20
        outs = [
            ad.gelu(ad.tensor(x)).data,
            ad.softmax(ad.tensor(x)).data,
            ad.layer_norm(ad.tensor(x), ad.tensor(np.ones(8)), ad.tensor(np.zeros(8))).data,
            ad.attention(ad.tensor(x), ad.tensor(x), ad.tensor(x), 2)[0].data,
        ]
        for o in outs:
            assert np.all(np.isfinite(o))


class TestGradCheck:
    def test_quadratic_tight_tolerance(self):
        rng = np.random.default_rng(15)
        w = ad.param(rng.uniform(-1, 1, size=12))
        report = ad.grad_check(lambda: w @ w, {"w": w}, tol=1e-8)
        assert report.passed, report.summary()
        assert report.max_rel_err < 1e-8

    def test_softmax_cross_entropy_layer(self):
        rng = np.random.default_rng(16)
        w = ad.param(rng.normal(size=(5, 4)) * 0.5)
        x = ad.tensor(rng.normal(size=5))
        label = 2

        def f():
            logits = x @ w
            m = float(logits.data.max())
            shifted = ad.add(logits, -m)
            lse = ad.log(ad.total_sum(ad.exp(shifted)))
            return ad.sub(lse, ad.total_sum(ad.take(shifted, [label])))

        report = ad.grad_check(f, {"w": w}, tol=1e-6)
        assert report.passed, report.summary()

    def test_corrupted_gradient_fails(self):
        w = ad.param(np.ones(4))
        report = ad.grad_check(lambda: w @ w, {"w": w}, corrupt="w")
        assert not report.passed
        assert report.worst_param == "w"
