import numpy as np
import pytest

from dispersionlab import autograd as ag
from dispersionlab import traced
from dispersionlab.attention import (
    WindowSpec,
    focused_attention,
    linear_attention,
    mila_attention,
    sema_attention,
    softmax_attention,
    window_attention,
)
from dispersionlab.errors import DifferentiationError
from dispersionlab.posenc import GridSpec, rope_angles
from dispersionlab.rng import rng_for


def run_backward(f, arrays):
    tape = ag.Tape()
    leaves = [ag.leaf(tape, a) for a in arrays]
    loss = f(*leaves)
    grads = ag.backward(loss)
    return [grads.get(lv.idx, np.zeros_like(a)) for lv, a in zip(leaves, arrays)]


class TestBasicAdjoints:
    def test_sum_gradient_is_ones(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        (g,) = run_backward(lambda a: ag.sum_all(a), [x])
        np.testing.assert_array_equal(g, np.ones_like(x))

    def test_quadratic_gradient(self):
        x = np.random.default_rng(1).standard_normal((2, 5))
        (g,) = run_backward(lambda a: ag.sum_all(ag.mul(a, a)), [x])
        np.testing.assert_allclose(g, 2 * x, atol=1e-14)

    def test_fanout_accumulates(self):
        x = np.random.default_rng(2).standard_normal((2, 2))
        (g,) = run_backward(lambda a: ag.sum_all(ag.add(a, a)), [x])
        np.testing.assert_array_equal(g, 2 * np.ones_like(x))

    def test_linear_function_gradient_exact(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((3, 2))
        report = ag.gradcheck(lambda a, b: ag.sum_all(ag.matmul(a, b)), [x, w])
        assert report.max_rel_err < 1e-9

    def test_unregistered_op_raises(self):
        tape = ag.Tape()
        x = ag.leaf(tape, np.ones((1, 1)))
        bad = tape.push("mystery_op", (x.idx,), x.value)
        with pytest.raises(DifferentiationError):
            ag.backward(bad)

    def test_loss_must_be_scalar(self):
        tape = ag.Tape()
        x = ag.leaf(tape, np.ones((2, 2)))
        with pytest.raises(Exception):
            ag.backward(x)


PRIMITIVE_CASES = [
    ("exp", lambda a: ag.sum_all(ag.exp(a)), (3, 4), None),
    ("log", lambda a: ag.sum_all(ag.log(a)), (3, 4), "positive"),
    ("relu", lambda a: ag.sum_all(ag.relu(a)), (3, 4), None),
    ("elu_plus_one", lambda a: ag.sum_all(ag.elu_plus_one(a)), (3, 4), None),
    ("gelu", lambda a: ag.sum_all(ag.gelu(a)), (3, 4), None),
    ("power3", lambda a: ag.sum_all(ag.power_int(a, 3)), (3, 4), None),
    ("softmax_rows", lambda a: ag.sum_all(ag.mul(ag.softmax_rows(a), a)), (3, 4), None),
    ("mean_rows", lambda a: ag.sum_all(ag.mean_rows(a)), (5, 3), None),
    ("broadcast", lambda a: ag.sum_all(ag.mul(ag.broadcast_row(ag.mean_rows(a), 5), a)),
     (5, 3), None),
    ("sum_cols", lambda a: ag.sum_all(ag.mul(ag.sum_cols(a), ag.sum_cols(a))), (4, 3), None),
    ("row_l2norm", lambda a: ag.sum_all(ag.row_l2norm(a)), (4, 3), "positive"),
    ("rows_cols", lambda a: ag.sum_all(ag.cols(ag.rows(a, 1, 3), 0, 2)), (4, 4), None),
    ("concat", lambda a: ag.sum_all(ag.concat_rows([ag.rows(a, 0, 2), ag.rows(a, 2, 4)])),
     (4, 3), None),
    ("permute", lambda a: ag.sum_all(ag.mul(ag.permute_rows(a, [2, 0, 1, 3]), a)), (4, 3), None),
    ("gather", lambda a: ag.sum_all(ag.gather_rows(a, [0, 2, 2])), (4, 3), None),
    ("group", lambda a: ag.sum_all(ag.power_int(ag.group_rows(a, 2), 2)), (4, 3), None),
    ("focused_map", lambda a: ag.sum_all(ag.focused_map_rows(a, 3)), (4, 5), "positive"),
    ("blocked_mean", lambda a: ag.sum_all(ag.mul(ag.blocked_mean_broadcast(a, 2), a)),
     (6, 3), None),
]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,f,shape,domain",
                             PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
    def test_primitive_against_finite_differences(self, name, f, shape, domain):
        rng = rng_for(0, "prim", name)
        x = rng.standard_normal(shape)
        if domain == "positive":
            x = np.abs(x) + 0.5
        report = ag.gradcheck(f, [x])
        assert report.passed, f"{name}: {report.max_rel_err}"

    def test_rope_rotation_gradient(self):
        rng = rng_for(1, "rope")
        x = rng.standard_normal((6, 8))
        ang = rope_angles(GridSpec.linear(6), 8)

        def f(a):
            return ag.sum_all(ag.mul(ag.rope_rotate(a, ang), a))

        assert ag.gradcheck(f, [x]).passed

    def test_depthwise_conv_gradients_in_both_inputs(self):
        rng = rng_for(2, "dwc")
        v = rng.standard_normal((12, 2))
        taps = rng.standard_normal((2, 3, 3))

        def f(a, t):
            return ag.sum_all(ag.power_int(ag.depthwise_conv(a, t, 3, 4), 2))

        assert ag.gradcheck(f, [v, taps]).passed

    def test_layer_norm_gradients(self):
        rng = rng_for(3, "ln")
        x = rng.standard_normal((5, 6))
        gamma = rng.standard_normal((1, 6))
        beta = rng.standard_normal((1, 6))

        def f(a, g, b):
            return ag.sum_all(ag.power_int(ag.layer_norm(a, g, b), 2))

        assert ag.gradcheck(f, [x, gamma, beta]).passed

    def test_blocked_softmax_attention_gradients(self):
        rng = rng_for(4, "bsa")
        q, k, v = rng.standard_normal((3, 8, 4))

        def f(a, b, c):
            return ag.sum_all(ag.power_int(ag.blocked_softmax_attention(a, b, c, 4), 2))

        assert ag.gradcheck(f, [q, k, v]).passed

    def test_blocked_linear_attention_gradients(self):
        rng = rng_for(5, "bla")
        u, w, v = rng.standard_normal((3, 6, 4))
        u, w = np.abs(u) + 0.1, np.abs(w) + 0.1

        def f(a, b, c):
            return ag.sum_all(ag.power_int(ag.blocked_linear_attention(a, b, c, 3), 2))

        assert ag.gradcheck(f, [u, w, v]).passed

    def test_cross_entropy_gradient(self):
        rng = rng_for(6, "ce")
        logits = rng.standard_normal((5, 3))
        labels = np.array([0, 2, 1, 1, 0])

        def f(a):
            return ag.cross_entropy(a, labels)

        assert ag.gradcheck(f, [logits]).passed

    def test_random_composite_graph(self):
        rng = rng_for(7, "composite")
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 6))

        def f(a, b):
            h = ag.gelu(ag.matmul(a, b))
            h = ag.softmax_rows(ag.add(h, a))
            return ag.sum_all(ag.mul(h, ag.exp(ag.scale(a, 0.1))))

        report = ag.gradcheck(f, [x, w], step=1e-5)
        assert report.max_rel_err < 1e-6


class TestTracedEquivalence:
    def setup_method(self):
        rng = rng_for(7, "traced")
        self.q = rng.standard_normal((8, 4))
        self.k = rng.standard_normal((8, 4))
        self.v = rng.standard_normal((8, 4))

    def run_traced(self, fn, *arrays):
        tape = ag.Tape()
        leaves = [ag.leaf(tape, a) for a in arrays]
        return fn(*leaves).value

    def test_softmax_matches_plain(self):
        out = self.run_traced(traced.softmax_attention, self.q, self.k, self.v)
        assert np.abs(out - softmax_attention(self.q, self.k, self.v).array).max() < 1e-12

    def test_linear_matches_plain(self):
        out = self.run_traced(traced.linear_attention, self.q, self.k, self.v)
        assert np.abs(out - linear_attention(self.q, self.k, self.v).array).max() < 1e-12

    def test_focused_matches_plain(self):
        qa, ka = np.abs(self.q), np.abs(self.k)
        out = self.run_traced(lambda a, b, c: traced.focused_attention(a, b, c, 3),
                              qa, ka, self.v)
        assert np.abs(out - focused_attention(qa, ka, self.v, 3).array).max() < 1e-12

    def test_window_matches_plain(self):
        out = self.run_traced(lambda a, b, c: traced.window_attention(a, b, c, 4),
                              self.q, self.k, self.v)
        plain = window_attention(self.q, self.k, self.v, WindowSpec(4)).array
        assert np.abs(out - plain).max() < 1e-12

    def test_sema_matches_plain(self):
        out = self.run_traced(lambda a, b, c: traced.sema_attention(a, b, c, 4),
                              self.q, self.k, self.v)
        plain = sema_attention(self.q, self.k, self.v, WindowSpec(4)).array
        assert np.abs(out - plain).max() < 1e-12

    def test_mila_matches_plain(self):
        out = self.run_traced(traced.mila_attention, self.q, self.k, self.v)
        assert np.abs(out - mila_attention(self.q, self.k, self.v).array).max() < 1e-12

    def test_sema_full_matches_plain(self):
        from dispersionlab.attention import SemaParams, sema_attention_full
        from dispersionlab.posenc import DepthwiseKernel

        rng = rng_for(11, "sema-full-eq")
        x = rng.standard_normal((8, 4))
        wq, wk, wv = rng.standard_normal((3, 4, 4))
        taps = rng.standard_normal((4, 3, 3))
        grid = GridSpec.grid(2, 4)
        out = self.run_traced(
            lambda a, b, c, d, t: traced.sema_attention_full(a, b, c, d, t, 2, grid),
            x, wq, wk, wv, taps)
        plain = sema_attention_full(
            x, SemaParams(wq, wk, wv, DepthwiseKernel(taps)),
            WindowSpec(2), grid).array
        assert np.abs(out - plain).max() < 1e-12


class TestGradcheckHarness:
    def test_samples_coordinates_for_large_inputs(self):
        rng = rng_for(8, "large")
        x = rng.standard_normal((40, 20))  # 800 entries > 512
        report = ag.gradcheck(lambda a: ag.sum_all(ag.mul(a, a)), [x])
        assert report.passed

    def test_reports_failure_instead_of_raising(self):
        # a wrong-adjoint op built from a raw node must fail, not crash
        x = np.array([[1.0, 2.0]])

        def f(a):
            bad = a.tape.push("scale", (a.idx,), a.value * 3.0, {"c": 2.0})
            return ag.sum_all(bad)

        report = ag.gradcheck(f, [x])
        assert not report.passed
        assert report.max_rel_err > 0.1

    def test_homogeneous_mix_gradient_of_sum_is_all_ones(self):
        rng = rng_for(9, "mix")
        v = rng.standard_normal((6, 3))
        (g,) = run_backward(lambda a: ag.sum_all(ag.blocked_mean_broadcast(a, 6)), [v])
        np.testing.assert_allclose(g, np.ones_like(v), atol=1e-14)

    def test_sema_full_pipeline_gradcheck(self):
        rng = rng_for(10, "sema-full")
        x = rng.standard_normal((8, 4))
        wq, wk, wv = rng.standard_normal((3, 4, 4))
        taps = rng.standard_normal((4, 3, 3))
        grid = GridSpec.grid(2, 4)

        def f(a, b, c, d, t):
            return ag.sum_all(traced.sema_attention_full(a, b, c, d, t, 2, grid))

        report = ag.gradcheck(f, [x, wq, wk, wv, taps], step=1e-5, tol=1e-5)
        assert report.passed, report.max_rel_err
