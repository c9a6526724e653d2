import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scg import autodiff as ad
from scg import synthetic as syn
from scg import tvae

H = 1e-4
TOL = 1e-4


def _scalarize(out, rng):
    w = rng.normal(size=out.value.shape)
    return ad.sum_(ad.mul(out, ad.const(w)))


def _graph_fn(build, shapes, seed=0):
    """``x -> (f, grad)`` for a graph built from parameters cut out of ``x``."""
    sizes = [int(np.prod(s)) for s in shapes]

    def fn(x):
        parts, off = [], 0
        for k, (s, n) in enumerate(zip(shapes, sizes)):
            parts.append(ad.Param(f"p{k}", x[off:off + n].reshape(s).copy()))
            off += n
        root = _scalarize(build(*parts), np.random.default_rng(seed))
        grads = ad.forward_backward(root)
        g = np.concatenate([grads.get(f"p{k}", np.zeros(s)).reshape(-1) for k, s in enumerate(shapes)])
        return float(root.value), g

    return fn, sum(sizes)


# one case per primitive: (builder, operand shapes, positive operands)
CASES = {
    "add": (lambda a, b: ad.add(a, b), [(4,), (4,)], False),
    "sub": (lambda a, b: ad.sub(a, b), [(4,), (4,)], False),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 2), (3, 2)], False),
    "scale": (lambda a: ad.scale(a, -1.7), [(5,)], False),
    "neg": (lambda a: ad.neg(a), [(3,)], False),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], False),
    "linear": (lambda w, x, b: ad.linear(w, x, b), [(3, 4), (4,), (3,)], False),
    "dense_tanh": (lambda w, x, b: ad.dense_tanh(w, x, b), [(3, 4), (4,), (3,)], False),
    "concat": (lambda a, b: ad.concat([a, b]), [(3,), (2,)], False),
    "slice": (lambda a: ad.slice_(a, 1, 4), [(5,)], False),
    "tanh": (lambda a: ad.tanh(a), [(4,)], False),
    "sigmoid": (lambda a: ad.sigmoid(a), [(4,)], False),
    "relu": (lambda a: ad.relu(a), [(6,)], False),
    "exp": (lambda a: ad.exp(a), [(4,)], False),
    "square": (lambda a: ad.square(a), [(2, 3)], False),
    "sqrt": (lambda a: ad.sqrt(a), [(4,)], True),
    "sum": (lambda a: ad.scale(ad.square(ad.sum_(a)), 1.0), [(2, 3)], False),
    "mean": (lambda a: ad.square(ad.mean(a)), [(5,)], False),
    "dot": (lambda a, b: ad.dot(a, b), [(4,), (4,)], False),
    "add_n": (lambda a, b, c: ad.add_n([a, b, c]), [(3,), (3,), (3,)], False),
    "affine_const": (lambda a: ad.affine_const(a, np.array([2.0, -1.0, 0.5]), np.ones(3)), [(3,)], False),
    "softmax_ce": (lambda a: ad.softmax_ce(a, 2, 1.3), [(5,)], False),
    "sq_error": (lambda a: ad.sq_error(a, np.arange(4.0), np.array([1.0, 0.0, 1.0, 1.0])), [(4,)], False),
    "dense_rows": (lambda x, w, b: ad.dense_rows(x, w, b, "tanh"), [(3, 4), (2, 4), (2,)], False),
    "take_rows": (lambda a, b: ad.take_rows([(a, [2, 0, 2]), (b, [0])]), [(3, 2), (2,)], False),
    "hcat": (lambda a, b: ad.hcat([a, b]), [(2, 3), (2, 1)], False),
    "col_slice": (lambda a: ad.col_slice(a, 1, 3), [(2, 4)], False),
    "softmax_ce_rows": (lambda a: ad.softmax_ce_rows(a, [0, 3, 1], [1.0, 0.5, 2.0]), [(3, 4)], False),
    "sq_error_rows": (lambda a: ad.sq_error_rows(a, np.ones((3, 2)), [1.0, 2.0, 0.5],
                                                  np.array([1.0, 0.0])), [(3, 2)], False),
}


def test_every_primitive_has_a_case():
    assert set(CASES) == set(ad.op_set())


@pytest.mark.parametrize("op", sorted(CASES))
def test_primitive_gradient(op):
    build, shapes, positive = CASES[op]
    fn, n = _graph_fn(build, shapes)
    rng = np.random.default_rng(7)
    x = rng.uniform(0.5, 2.0, n) if positive else rng.normal(size=n)
    assert ad.check_gradient(fn, x, h=H) < TOL


def test_dense_rows_linear_activation():
    fn, n = _graph_fn(lambda x, w, b: ad.dense_rows(x, w, b), [(3, 4), (2, 4), (2,)])
    assert ad.check_gradient(fn, np.random.default_rng(3).normal(size=n), h=H) < TOL


def _elbo_setup(seed=0):
    trees, _ = syn.gen_dataset(12, seed)
    model = tvae.TreeVAE(syn.SCHEMA, seed=seed)
    model.set_class_prior(tvae.class_prior(trees, syn.SCHEMA))
    return model, trees


def _directional(model, loss_of_model, k=6, seed=0):
    """Gradient oracle along ``k`` random unit directions in parameter space."""
    base = model.store.snapshot()
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(k):
        d = {n: rng.normal(size=v.shape) for n, v in base.items()}
        norm = np.sqrt(sum(float((v * v).sum()) for v in d.values()))
        dirs.append({n: v / norm for n, v in d.items()})

    def set_at(a):
        model.store.load({n: base[n] + sum(a[j] * dirs[j][n] for j in range(k)) for n in base})

    def fn(a):
        set_at(a)
        model.store.zero_grad()
        root = loss_of_model()
        ad.backward(root)
        g = model.store.grads()
        proj = np.array([sum(float((g[n] * d[n]).sum()) for n in base) for d in dirs])
        return float(root.value), proj

    try:
        return ad.check_gradient(fn, np.zeros(k), h=H)
    finally:
        model.store.load(base)


def test_elbo_graph_gradient():
    model, trees = _elbo_setup()
    eps = np.random.default_rng(1).standard_normal(model.latent_dim)
    err = _directional(model, lambda: tvae.elbo_loss(trees[0], model, beta=0.7, eps=eps).total)
    assert err < TOL


def test_batched_elbo_graph_gradient():
    model, trees = _elbo_setup(1)
    eps = np.random.default_rng(2).standard_normal((4, model.latent_dim))
    err = _directional(model, lambda: tvae.batch_elbo(trees[:4], model, 0.5, eps).total, seed=1)
    assert err < TOL


def test_elbo_gradient_wrt_latent_noise():
    model, trees = _elbo_setup(2)
    tree = trees[3]

    def fn(eps):
        model.store.zero_grad()
        with model.store.frozen():
            e = ad.Param("eps", eps.copy())
            mu, logsigma = tvae.encode(tree, model)
            z = ad.add(mu, ad.mul(ad.exp(logsigma), e))
            trace = tvae.decode(z, model, mode="teacher", tree=tree)
            l_c, l_r = tvae.structure_losses(trace, tree, model)
            root = ad.add(l_c, l_r)
            ad.backward(root)
        return float(root.value), e.grad

    x = np.random.default_rng(4).standard_normal(model.latent_dim) * 20.0
    assert ad.check_gradient(fn, x, h=H) < TOL


# -- examples ---------------------------------------------------------------

def test_sum_gradient_is_ones():
    p = ad.Param("p", np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(ad.forward_backward(ad.sum_(p))["p"], np.ones(3))


def test_constant_root_has_empty_gradient_map():
    assert ad.forward_backward(ad.const(3.0)) == {}


def test_sigmoid_at_zero():
    w = ad.Param("w", np.array([0.0]))
    root = ad.sum_(ad.sigmoid(ad.mul(w, ad.const([1.0]))))
    assert ad.forward_backward(root)["w"][0] == pytest.approx(0.25)


def test_concat_splits_gradient():
    a, b = ad.Param("a", np.zeros(3)), ad.Param("b", np.zeros(2))
    c = ad.concat([a, b])
    assert c.value.shape == (5,)
    g = ad.forward_backward(ad.dot(c, ad.const(np.arange(5.0))))
    assert np.array_equal(g["a"], [0, 1, 2]) and np.array_equal(g["b"], [3, 4])


def test_softmax_ce_uniform():
    assert float(ad.softmax_ce(ad.const([0.0, 0.0]), 0).value) == pytest.approx(math.log(2))


def test_slice_scatters():
    v = ad.Param("v", np.arange(5.0))
    g = ad.forward_backward(ad.sum_(ad.slice_(v, 1, 4)))["v"]
    assert np.array_equal(g, [0, 1, 1, 1, 0])


def test_check_gradient_quadratic():
    fn = lambda p: (float(p @ p), 2.0 * p)  # noqa: E731
    assert ad.check_gradient(fn, np.array([1.0, -2.0]), h=1e-5) < 1e-6


def test_check_gradient_constant():
    assert ad.check_gradient(lambda p: (5.0, np.zeros(2)), np.array([0.3, 0.1])) == 0.0


def test_check_gradient_explicit_grad_and_mismatch():
    f = lambda p: float(np.sin(p).sum())  # noqa: E731
    x = np.array([0.1, 0.7])
    assert ad.check_gradient(f, x, grad=np.cos(x)) < 1e-8
    assert ad.check_gradient(f, x, grad=np.cos(x) + 0.1) > 0.05


# -- errors and invariants --------------------------------------------------

def test_non_scalar_root_rejected():
    with pytest.raises(ad.GradientError):
        ad.backward(ad.tanh(ad.Param("p", np.zeros(3))))


def test_nan_reports_op():
    p = ad.Param("p", np.array([0.0, 1.0]))
    bad = ad.custom(p.value, (p,), lambda g: (g * np.inf,), "exploding")
    with pytest.raises(ad.GradientError, match="exploding"):
        ad.backward(ad.sum_(bad))
    assert p.grad is None


def test_unreachable_params_get_no_entry_and_zero_in_store():
    store = ad.ParamStore()
    a, _ = store.add("a", np.ones(2)), store.add("b", np.ones(3))
    grads = ad.forward_backward(ad.sum_(ad.square(a)))
    assert set(grads) == {"a"}
    assert np.array_equal(store.grads()["b"], np.zeros(3))


def test_shared_node_visited_once():
    p = ad.Param("p", np.array([2.0]))
    t = ad.tanh(p)
    calls = []
    shared = ad.custom(t.value, (t,), lambda g: (calls.append(1) or g,), "spy")
    root = ad.sum_(ad.add(shared, ad.mul(shared, shared)))
    ad.backward(root)
    assert calls == [1]
    y = math.tanh(2.0)
    assert p.grad[0] == pytest.approx((1 + 2 * y) * (1 - y * y))


def test_gradients_accumulate_until_zeroed():
    store = ad.ParamStore()
    p = store.add("p", np.array([1.0, 2.0]))
    root = ad.sum_(ad.square(p))
    ad.backward(root)
    ad.backward(root)
    assert np.array_equal(p.grad, 4.0 * np.array([1.0, 2.0]))
    store.zero_grad()
    assert p.grad is None


def test_frozen_store_blocks_gradient():
    store = ad.ParamStore()
    p = store.add("p", np.ones(2))
    with store.frozen():
        root = ad.sum_(ad.square(p))
        assert ad.backward(root) == []
    assert p.needs_grad


def test_adam_update_is_pure():
    def run():
        store = ad.ParamStore()
        p = store.add("p", np.array([1.0, -2.0, 0.5]))
        opt = ad.Adam(store, lr=0.1)
        for _ in range(5):
            store.zero_grad()
            ad.backward(ad.sum_(ad.square(p)))
            opt.step(clip=1.0)
        return p.value
    a, b = run(), run()
    assert np.array_equal(a, b) and np.all(np.isfinite(a))
    assert np.all(np.abs(a) < np.array([1.0, 2.0, 0.5]))


def test_adam_rejects_nonfinite_update():
    store = ad.ParamStore()
    p = store.add("p", np.array([1.0]))
    p.grad = np.array([np.nan])
    with pytest.raises(ad.GradientError):
        ad.Adam(store).step()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)}
    path = tmp_path / "x.ckpt"
    ad.save_checkpoint(path, arrays, "boxes", 32, 64, {"epoch": 3})
    header, back = ad.load_checkpoint(path)
    assert header["schema"] == "boxes" and header["latent_dim"] == 32 and header["feature_dim"] == 64
    assert header["format_version"] == 1 and header["meta"]["epoch"] == 3
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    # bit-exact file round trip
    ad.save_checkpoint(tmp_path / "y.ckpt", back, "boxes", 32, 64, {"epoch": 3})
    assert (tmp_path / "y.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)
    ad.save_checkpoint(path, {"a": np.ones(2)}, "s", 1, 1)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_gradient_shape_matches_value(x):
    p = ad.Param("p", x)
    root = ad.sum_(ad.tanh(ad.mul(p, p)))
    g = ad.forward_backward(root)["p"]
    assert g.shape == x.shape
    assert np.allclose(g, 2 * x * (1 - np.tanh(x * x) ** 2))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
       st.floats(-3, 3))
def test_backward_is_linear_in_seed(a, b, s):
    p = ad.Param("p", a)
    root = ad.dot(ad.sigmoid(p), ad.const(b))
    g1 = ad.forward_backward(root, 1.0)["p"]
    gs = ad.forward_backward(root, s)["p"]
    assert np.allclose(gs, s * g1, atol=1e-12)
