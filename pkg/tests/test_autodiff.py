import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunelab import autodiff as ad
from prunelab.model import ModelConfig, init_model, loss_on_tape

from conftest import perturbed


def _check(build, inputs: dict, tol=1e-6, eps=1e-5):
    """backward vs central differences for every input of a scalar-valued graph."""
    with ad.Tape() as tape:
        ts = {k: tape.param(k, v) for k, v in inputs.items()}
        loss = build(ts)
    grads = ad.backward(tape, loss)
    for name, x in inputs.items():
        def f(v, name=name):
            vals = dict(inputs)
            vals[name] = v
            return float(build({k: ad.Tensor(a) for k, a in vals.items()}).data)
        fd = ad.finite_diff_grad(f, x, eps)
        err = np.abs(grads[name] - fd).max() / max(1.0, np.abs(fd).max())
        assert err <= tol, f"{name}: rel err {err:.2e}"


def _proj(t, seed=3):
    """Scalar probe: sum(t * R) with a fixed random R, so every output entry matters."""
    R = np.random.default_rng(seed).standard_normal(t.shape)
    return ad.mul(t, ad.Tensor(R))


def _sum(t):
    flat = ad.reshape(t, (1, -1) if False else (1, int(np.prod(t.shape))))
    return ad.matmul(flat, ad.Tensor(np.ones((flat.shape[1], 1))))


def scalar(t):
    return ad.reshape(_sum(_proj(t)), ())


def test_product_rule_toy():
    with ad.Tape() as tape:
        x = tape.param("x", np.array(2.0))
        y = tape.param("y", np.array(3.0))
        f = ad.mul(x, y)
    g = ad.backward(tape, f)
    assert g["x"] == 3.0 and g["y"] == 2.0


def test_softmax_cross_entropy_gradient_is_p_minus_onehot(rng):
    z = rng.standard_normal((1, 5))
    with ad.Tape() as tape:
        zt = tape.param("z", z)
        loss = ad.cross_entropy(zt, np.array([2]))
    g = ad.backward(tape, loss)["z"]
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    onehot = np.eye(5)[2]
    np.testing.assert_allclose(g[0], p[0] - onehot, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_primitives_match_finite_differences_f64(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((2, 3, 4))
    b = r.standard_normal((4, 5))
    c = r.standard_normal((2, 3, 4))
    w = r.standard_normal(4) + 1.5
    bias = r.standard_normal(4)
    table = r.standard_normal((7, 4))
    _check(lambda t: scalar(ad.matmul(t["a"], t["b"])), {"a": a, "b": b})
    _check(lambda t: scalar(ad.add(t["a"], t["bias"])), {"a": a, "bias": bias})
    _check(lambda t: scalar(ad.mul(t["a"], t["c"])), {"a": a, "c": c})
    _check(lambda t: scalar(ad.mul(t["a"], t["w"])), {"a": a, "w": w})
    for kind in ("silu", "gelu", "relu"):
        x = a + np.sign(a) * 0.05 if kind == "relu" else a  # keep away from the kink
        _check(lambda t, k=kind: scalar(ad.activation(t["a"], k)), {"a": x})
    _check(lambda t: scalar(ad.softmax(t["a"])), {"a": a})
    sq = r.standard_normal((2, 3, 4, 4))
    _check(lambda t: scalar(ad.softmax(t["s"], causal=True)), {"s": sq})
    _check(lambda t: scalar(ad.rmsnorm(t["a"], t["w"])), {"a": a, "w": w})
    _check(lambda t: scalar(ad.layernorm(t["a"], t["w"], t["bias"])), {"a": a, "w": w, "bias": bias})
    ids = r.integers(0, 7, size=(2, 3))
    _check(lambda t: scalar(ad.embedding(t["table"], ids)), {"table": table})
    tg = r.integers(0, 4, size=6)
    _check(lambda t: ad.cross_entropy(ad.reshape(t["a"], (6, 4)), tg), {"a": a})
    _check(lambda t: scalar(ad.transpose(t["a"], (2, 0, 1))), {"a": a})


def test_primitives_f32_within_1e3(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    w = (rng.standard_normal(4) + 1.5).astype(np.float32)
    with ad.Tape() as tape:
        at, wt = tape.param("a", a), tape.param("w", w)
        loss = ad.cross_entropy(ad.rmsnorm(at, wt), np.array([0, 1, 2]))
    g = ad.backward(tape, loss)

    def f(x):
        return float(ad.cross_entropy(ad.rmsnorm(ad.Tensor(x.astype(np.float32)), ad.Tensor(w)),
                                      np.array([0, 1, 2])).data)
    fd = ad.finite_diff_grad(f, a.astype(np.float64), 1e-2)
    assert np.abs(g["a"] - fd).max() / np.abs(fd).max() <= 1e-3


def test_full_model_gradient_f64():
    cfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_mlp=8, max_seq_len=6, dtype="float64")
    model = perturbed(init_model(cfg, 3))
    toks = np.array([[5, 17, 200, 3, 9, 44]])
    with ad.Tape() as tape:
        loss = loss_on_tape(model, toks, tape)
    grads = ad.backward(tape, loss)
    r = np.random.default_rng(0)
    for name in ("layers.0.attn.q", "layers.1.mlp.down", "layers.0.attn_norm.weight",
                 "final_norm.weight", "lm_head", "pos_emb"):
        arr = model.params[name]
        idx = [tuple(r.integers(0, n) for n in arr.shape) for _ in range(4)]
        for i in idx:
            def f(v, i=i, name=name):
                m = model.copy()
                m.params[name][i] = v[0]
                return float(loss_on_tape(m, toks).data)
            fd = ad.finite_diff_grad(f, np.array([arr[i]]))[0]
            assert abs(grads[name][i] - fd) <= 1e-6 * max(1.0, abs(fd)), (name, i)


def test_finite_diff_oracles():
    assert abs(ad.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([1.0]), 1e-4)[0] - 2.0) <= 1e-7
    np.testing.assert_array_equal(ad.finite_diff_grad(lambda x: 3.0, np.ones(4)), np.zeros(4))
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda x: 0.0, np.ones(2), 0.0)


def test_backward_errors():
    with ad.Tape() as tape:
        x = tape.param("x", np.ones(3))
        y = ad.mul(x, x)
    with pytest.raises(ad.AutodiffError):
        ad.backward(tape, y)  # not scalar
    other = ad.Tape()
    with pytest.raises(ad.AutodiffError):
        ad.backward(other, ad.reshape(_sum(y), ()))


def test_backward_deterministic(tiny):
    toks = np.arange(12)[None, :]
    runs = []
    for _ in range(2):
        with ad.Tape() as tape:
            loss = loss_on_tape(tiny, toks, tape)
        runs.append(ad.backward(tape, loss))
    for k in runs[0]:
        assert runs[0][k].tobytes() == runs[1][k].tobytes()


def test_primitive_catalogue_and_shapes():
    cat = ad.primitive_set()
    assert set(cat["primitives"]) == {"matmul", "add", "mul", "activation", "softmax",
                                      "rmsnorm", "layernorm", "embedding", "cross_entropy"}
    assert ad.matmul(np.ones((2, 3)), np.ones((3, 4))).shape == (2, 4)
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((4, 4)))
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


def test_softmax_stability():
    out = ad.softmax(np.array([[1000.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1.0, 0.0]])
    assert np.all(np.isfinite(out))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 20
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0, atol=1e-6)


def test_norms_normalize(rng):
    x = rng.standard_normal((5, 32)) * 3 + 1
    y = ad.rmsnorm(x, np.ones(32)).data
    np.testing.assert_allclose(np.sqrt((y ** 2).mean(-1)), 1.0, atol=1e-5)
    z = ad.layernorm(x, np.ones(32), np.zeros(32)).data
    np.testing.assert_allclose(z.mean(-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(z.std(-1), 1.0, atol=1e-5)
