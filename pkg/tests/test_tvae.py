import math

import numpy as np
import pytest

from scg import autodiff as ad
from scg import synthetic as syn
from scg import traffic as tr
from scg import tvae
from scg.tree import SceneNode, same_topology, validate

S = syn.SCHEMA


def _model(trees=None, seed=0, **cfg):
    m = tvae.TreeVAE(S, tvae.ModelConfig(**cfg) if cfg else None, seed=seed)
    m.set_class_prior(tvae.class_prior(trees or syn.gen_dataset(20, 0)[0], S))
    return m


def test_encode_single_node_tree():
    m = _model()
    mu, sigma = tvae.encode_mean(SceneNode(S.root, [], [SceneNode(S.stop)]), m)
    assert mu.shape == (m.latent_dim,) and sigma.shape == (m.latent_dim,)
    assert np.all(np.isfinite(mu)) and np.all(sigma > 0)


def test_encode_is_deterministic():
    m = _model()
    t = syn.target_scene()
    a, b = tvae.encode_mean(t, m), tvae.encode_mean(t.copy(), m)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_encode_rejects_invalid_tree():
    bad = syn.target_scene()
    bad.children = []
    with pytest.raises(tvae.SchemaError):
        tvae.encode(bad, _model())


def test_teacher_forcing_keeps_topology():
    m = _model()
    for k in range(5):
        t = syn.random_scene(np.random.default_rng(k))
        trace = tvae.decode(np.random.default_rng(k).normal(size=m.latent_dim), m, "teacher", t)
        assert same_topology(trace.tree, t)
        for path, logits in trace.logits.items():
            assert logits.value.shape == (S.n_types,)


def test_free_decode_respects_depth_guard():
    m = _model()
    for k in range(10):
        z = np.random.default_rng(k).normal(size=m.latent_dim) * 5.0
        tree = tvae.decode(z, m, max_depth=6).tree
        assert tree.depth() <= 6
        validate(tree, S, max_depth=6)


def test_kl_zero_at_standard_normal():
    kl = tvae.kl_divergence(ad.const(np.zeros(5)), ad.const(np.zeros(5)))
    assert float(kl.value) == 0.0


def test_uniform_logits_ce_ln4():
    prior = np.full(4, 0.25)
    w = tvae.class_weights(prior)
    assert np.allclose(w, 1.0)
    assert float(ad.softmax_ce(ad.const(np.zeros(4)), 2, w[2]).value) == pytest.approx(math.log(4))


def test_elbo_repeatable_with_fixed_noise():
    m = _model()
    t = syn.target_scene()
    a = tvae.elbo_loss(t, m, rng=np.random.default_rng(5)).values()
    b = tvae.elbo_loss(t, m, rng=np.random.default_rng(5)).values()
    assert a == b


def test_class_weights_smoothing_and_symmetry():
    only_stop = [SceneNode(S.root, [], [SceneNode(S.stop)])] * 5
    prior = tvae.class_prior(only_stop, S)
    assert np.all(prior > 0) and np.all(tvae.class_weights(prior) > 0)
    w = tvae.class_weights(np.array([0.5, 0.5]))
    assert w[0] == w[1]


def test_class_prior_stop_most_frequent():
    trees, _ = syn.gen_dataset(1000, 0)
    prior = tvae.class_prior(trees, S)
    # independent oracle: recursive count of node type names
    counts = {}

    def count(n):
        name = S.types[n.type].name
        counts[name] = counts.get(name, 0) + 1
        for c in n.children:
            count(c)
    for t in trees:
        count(t)
    assert max(counts, key=counts.get) == "Stop"
    assert S.types[int(np.argmax(prior))].name == "Stop"
    total = sum(counts.values()) + S.n_types
    for name, c in counts.items():
        assert prior[S.type_id(name)] == pytest.approx((c + 1) / total)


def test_batch_elbo_matches_per_tree_elbo():
    trees, _ = syn.gen_dataset(15, 3)
    m = _model(trees)
    batch = trees[2:7]
    eps = np.random.default_rng(0).standard_normal((len(batch), m.latent_dim))
    m.store.zero_grad()
    bt = tvae.batch_elbo(batch, m, 0.3, eps)
    ad.backward(bt.total)
    g_batch = m.store.grads()
    m.store.zero_grad()
    vals = []
    for t, e in zip(batch, eps):
        terms = tvae.elbo_loss(t, m, 0.3, eps=e)
        ad.backward(ad.scale(terms.total, 1.0 / len(batch)))
        vals.append(terms.values())
    g_single = m.store.grads()
    assert float(bt.total.value) == pytest.approx(np.mean([v[0] for v in vals]), rel=1e-10)
    assert bt.l_c == pytest.approx(np.mean([v[1] for v in vals]), rel=1e-10)
    assert bt.kl == pytest.approx(np.mean([v[3] for v in vals]), rel=1e-10)
    for n in g_batch:
        assert np.allclose(g_batch[n], g_single[n], rtol=1e-8, atol=1e-12)


def test_beta_zero_kl_gradient_vanishes():
    m = _model()
    t = syn.target_scene()
    eps = np.zeros(m.latent_dim)
    grads = {}
    for beta in (0.0, 1.0):
        m.store.zero_grad()
        terms = tvae.elbo_loss(t, m, beta, eps=eps)
        ad.backward(ad.sub(terms.total, ad.add(terms.l_c, terms.l_r)))
        grads[beta] = m.store.grads()["sampler.mu.b"]
    assert np.array_equal(grads[0.0], np.zeros_like(grads[0.0]))
    assert np.any(grads[1.0] != 0)


def test_small_training_run_reduces_loss():
    trees, _ = syn.gen_dataset(10, 0, target_copies=0)
    m = tvae.TreeVAE(S, seed=0)
    log = tvae.train(trees, m, tvae.TrainConfig(epochs=200, batch_size=10))
    assert len(log) == 200
    assert log[-1]["total"] < log[0]["total"]


def test_training_is_bit_identical_per_seed():
    trees, _ = syn.gen_dataset(12, 1, target_copies=2)

    def run():
        m = tvae.TreeVAE(S, seed=3)
        log = tvae.train(trees, m, tvae.TrainConfig(epochs=4, batch_size=5, seed=3))
        return [{k: v for k, v in r.items() if k != "seconds"} for r in log], m.arrays()
    (la, pa), (lb, pb) = run(), run()
    assert la == lb
    assert all(pa[n].tobytes() == pb[n].tobytes() for n in pa)


def test_resume_equals_straight_run(tmp_path):
    trees, _ = syn.gen_dataset(12, 2, target_copies=2)
    cfg = tvae.TrainConfig(epochs=6, batch_size=4, seed=1)
    straight = tvae.TreeVAE(S, seed=1)
    log_a = tvae.Trainer(straight, cfg).run(trees)

    first = tvae.TreeVAE(S, seed=1)
    t1 = tvae.Trainer(first, cfg)
    t1.run(trees, epochs=2)
    tvae.save_model(tmp_path / "m.ckpt", first, t1)
    resumed, header = tvae.load_model(tmp_path / "m.ckpt", S)
    assert header["meta"]["epoch"] == 2
    t2 = tvae.restore_trainer(tmp_path / "m.ckpt", resumed, cfg)
    log_b = t2.run(trees, epochs=4)
    assert [r["epoch"] for r in log_b] == [2, 3, 4, 5]
    assert [r["total"] for r in log_b] == [r["total"] for r in log_a[2:]]
    assert all(resumed.arrays()[n].tobytes() == straight.arrays()[n].tobytes() for n in straight.arrays())


def test_lr_schedule_and_beta_warmup():
    cfg = tvae.TrainConfig(epochs=11, lr=1e-2, lr_final=1e-4, warmup_frac=0.2)
    assert tvae.lr_schedule(0, cfg) == pytest.approx(1e-2)
    assert tvae.lr_schedule(10, cfg) == pytest.approx(1e-4)
    lrs = [tvae.lr_schedule(e, cfg) for e in range(11)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert tvae.beta_schedule(0, cfg) == 0.0
    assert tvae.beta_schedule(5, cfg) == cfg.beta_max


def test_checkpoint_schema_mismatch(tmp_path):
    m = _model()
    tvae.save_model(tmp_path / "m.ckpt", m)
    back, _ = tvae.load_model(tmp_path / "m.ckpt", S)
    assert all(back.arrays()[n].tobytes() == m.arrays()[n].tobytes() for n in m.arrays())
    with pytest.raises(tvae.SchemaError):
        tvae.load_model(tmp_path / "m.ckpt", tr.SCHEMA)


def test_sample_prior_contract():
    m = _model()
    assert tvae.sample_prior(m, 0, 0) == []
    for t in tvae.sample_prior(m, 10, 0):
        validate(t, S)


# -- trained-model checks ---------------------------------------------------

def test_trained_color_changes_latent(syn_trained):
    m = syn_trained.model
    a = syn.target_scene()
    b = a.copy()
    box = next(n for _, n in b.walk() if n.type == syn.BOX)
    box.props[2] = 0.3
    diff = np.abs(tvae.encode_mean(a, m)[0] - tvae.encode_mean(b, m)[0])
    assert diff.max() >= 1e-9


def test_trained_free_running_accuracy(syn_trained):
    m = syn_trained.model
    accs = [tvae.type_accuracy(tvae.reconstruct(t, m), t) for t in syn_trained.dataset[:100]]
    assert np.mean(accs) >= 0.95


def test_trained_samples_are_diverse(syn_trained):
    trees = tvae.sample_prior(syn_trained.model, 100, 0)
    keys = {tvae_key(t) for t in trees}
    assert len(keys) >= 2


def tvae_key(tree):
    return tuple((p, n.type) for p, n in tree.walk())
