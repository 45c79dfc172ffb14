import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pat import tensor as tn
from pat.gradcheck import grad_check
from pat.oracles import matmul_loops
from pat.tensor import NonFiniteError, ShapeError, Tensor


def t64(rng, *shape):
    return Tensor(rng.normal(size=shape).astype(np.float64), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one entry per primitive: (builder(rng) -> (fn, params))
def _cases():
    cases = {}

    def mk(name, fn_builder):
        cases[name] = fn_builder

    mk("add", lambda r: _bin(r, tn.add, (3, 4), (3, 4)))
    mk("add_bias", lambda r: _bin(r, tn.add, (3, 4), (4,)))
    mk("sub", lambda r: _bin(r, tn.sub, (2, 3), (2, 3)))
    mk("mul", lambda r: _bin(r, tn.mul, (2, 3, 4), (2, 3, 4)))
    mk("matmul2", lambda r: _bin(r, tn.matmul, (3, 2), (2, 4)))
    mk("matmul3", lambda r: _bin(r, tn.matmul, (2, 3, 2), (2, 2, 4)))
    mk("matmul32", lambda r: _bin(r, tn.matmul, (2, 3, 2), (2, 4)))
    mk("sigmoid", lambda r: _un(r, tn.sigmoid, (3, 4)))
    mk("gelu", lambda r: _un(r, tn.gelu, (3, 4)))
    mk("softmax", lambda r: _un(r, tn.softmax, (2, 3, 5)))
    mk("log", lambda r: _un(r, tn.log, (3, 4), lambda x: np.abs(x) + 0.5))
    mk("exp", lambda r: _un(r, tn.exp, (3, 4)))
    mk("pow3", lambda r: _un(r, lambda a: tn.power(a, 3.0), (3, 4), lambda x: np.abs(x) + 0.1))
    mk("pow_frac", lambda r: _un(r, lambda a: tn.power(a, 1.5), (3, 4), lambda x: np.abs(x) + 0.1))
    mk("relu", lambda r: _un(r, tn.relu, (3, 4), lambda x: np.where(np.abs(x) < 0.05, 0.3, x)))
    mk("clip", lambda r: _un(r, lambda a: tn.clip(a, -0.5, 0.5), (3, 4),
                             lambda x: np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.2, x)))
    mk("sum_axis", lambda r: _un(r, lambda a: tn.sum(a, axis=1), (2, 3, 4)))
    mk("mean", lambda r: _un(r, lambda a: tn.mean(a, axis=-1), (3, 4)))
    mk("reshape", lambda r: _un(r, lambda a: tn.reshape(a, (4, 3)), (3, 4)))
    mk("transpose", lambda r: _un(r, lambda a: tn.transpose(a, (1, 0, 2)), (2, 3, 4)))
    mk("resample_up", lambda r: _un(r, lambda a: tn.resample_linear(a, 9), (4, 3)))
    mk("resample_down", lambda r: _un(r, lambda a: tn.resample_linear(a, 3), (7, 2)))
    mk("rel_skew", lambda r: _un(r, tn.rel_skew, (2, 4, 7)))
    mk("take_rows", lambda r: _un(r, lambda a: tn.take_rows(a, np.array([[0, 2, 2], [4, 1, 0]])), (5, 3)))
    mk("concat", lambda r: _bin(r, lambda a, b: tn.concat([a, b], axis=-1), (3, 2), (3, 4)))
    mk("layer_norm", lambda r: _ln(r))
    mk("conv_s1", lambda r: _conv(r, 7, 3, 4, 3, 1, 1))
    mk("conv_s2", lambda r: _conv(r, 8, 3, 2, 3, 2, 1))
    mk("conv_s4_k1", lambda r: _conv(r, 8, 2, 3, 1, 4, 0))
    return cases


def _project(out):
    w = np.random.default_rng(99).normal(size=out.shape)
    return tn.sum(out * w)


def _un(rng, op, shape, transform=lambda x: x):
    a = t64(rng, *shape)
    a.data = transform(a.data)
    return (lambda: _project(op(a))), {"a": a}


def _bin(rng, op, sa, sb):
    a, b = t64(rng, *sa), t64(rng, *sb)
    return (lambda: _project(op(a, b))), {"a": a, "b": b}


def _ln(rng):
    x, g, b = t64(rng, 3, 5), t64(rng, 5), t64(rng, 5)
    return (lambda: _project(tn.layer_norm(x, g, b))), {"x": x, "g": g, "b": b}


def _conv(rng, T, cin, cout, k, s, p):
    x, w, b = t64(rng, T, cin), t64(rng, k, cin, cout), t64(rng, cout)
    return (lambda: _project(tn.conv1d(x, w, b, stride=s, padding=p))), {"x": x, "w": w, "b": b}


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_backward_matches_central_differences(name, rng):
    fn, params = CASES[name](rng)
    report = grad_check(fn, params, h=1e-5)
    assert np.percentile(report.all_errors(), 95) <= 1e-4
    assert report.max_error <= 1e-3


def test_conv_output_length_paper_branch():
    x = Tensor(np.zeros((256, 4)))
    w = Tensor(np.zeros((3, 4, 4)))
    assert tn.conv1d(x, w, stride=2, padding=1).shape == (128, 4)
    assert tn.conv_out_len(256, 3, 8, 1) == 32


@given(st.integers(1, 40))
def test_conv_k3_s1_p1_preserves_length(T):
    out = tn.conv1d(Tensor(np.ones((T, 2))), Tensor(np.ones((3, 2, 1))), stride=1, padding=1)
    assert out.shape == (T, 1)


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(6, 2))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    out = tn.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.vstack([np.zeros((1, 2)), x, np.zeros((1, 2))])
    expected = np.array([[sum(xp[2 * t + j] @ w[j][:, o] for j in range(3)) + b[o] for o in range(3)]
                         for t in range(3)])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_softmax_single_element_is_exactly_one():
    out = tn.softmax(Tensor(np.array([[3.7]], dtype=np.float32)))
    assert out.data.tolist() == [[1.0]]


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
    out = tn.softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(3, 2)).astype(np.float32)
    b = rng.normal(size=(2, 4)).astype(np.float32)
    np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-6)


@given(st.integers(1, 12), st.integers(1, 30), st.floats(-100, 100, allow_nan=False, width=32))
def test_resample_constant_signal_is_exact(t_in, t_out, c):
    x = np.full((t_in, 3), c, dtype=np.float32)
    out = tn.resample_linear(Tensor(x), t_out).data
    assert (out == np.float32(c)).all()


def test_resample_hand_values():
    out = tn.resample_linear(Tensor(np.array([[1.0], [3.0]])), 3).data
    assert out.ravel().tolist() == [1.0, 2.0, 3.0]


def test_rel_skew_places_offsets():
    n = 4
    # column k encodes key offset m - n = k - (n - 1)
    s = np.tile(np.arange(2 * n - 1, dtype=np.float64) - (n - 1), (n, 1))
    out = tn.rel_skew(Tensor(s)).data
    expected = np.arange(n)[None, :] - np.arange(n)[:, None]
    np.testing.assert_array_equal(out, expected)


def test_shape_errors_name_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(3, 2\).*\(3, 4\)"):
        tn.matmul(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError, match="add"):
        tn.add(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="conv1d"):
        tn.conv1d(Tensor(np.zeros((5, 2))), Tensor(np.zeros((3, 3, 1))))
    with pytest.raises(ShapeError, match="rank"):
        Tensor(np.zeros((1, 1, 1, 1)))


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError, match="log"):
        tn.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_gradients_accumulate_across_fan_out():
    a = Tensor(np.array([2.0]), requires_grad=True)
    out = tn.sum(a * a + a * 3.0)
    out.backward()
    assert a.grad.tolist() == [7.0]
    tn.sum(a).backward()
    assert a.grad.tolist() == [8.0]


def test_no_grad_builds_no_graph():
    a = Tensor(np.ones(3), requires_grad=True)
    with tn.no_grad():
        out = tn.sum(a * 2.0)
    assert not out.requires_grad


def test_precision_context_sets_dtype():
    with tn.precision(np.float64):
        assert tn.tensor([1.0]).dtype == np.float64
    assert tn.tensor([1.0]).dtype == np.float32


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(16, 8)).astype(np.float32)
    w = rng.normal(size=(3, 8, 8)).astype(np.float32)

    def run():
        return tn.softmax(tn.conv1d(Tensor(x), Tensor(w), padding=1)).data

    assert run().tobytes() == run().tobytes()
