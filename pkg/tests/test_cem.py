"""Tests for the ensemble model, its loss, conferrability scoring, and
candidate generation."""
import math

import numpy as np
import pytest

from confprint import cem, data, nn, zoo
from confprint.errors import ConfigError


def onehot_net(num_classes, cls, input_dim=4):
    """Constant network whose softmax output is exactly one-hot at cls."""
    net = nn.init_network(input_dim, [3], num_classes, seed=0)
    for layer in net.layers:
        layer.weight[:] = 0.0
        layer.bias[:] = 0.0
    net.layers[-1].bias[cls] = 1000.0
    return net


def soft_net(num_classes, seed, input_dim=4):
    return nn.init_network(input_dim, [6], num_classes, seed=seed)


@pytest.fixture(scope="module")
def trained_populations():
    spec = data.DomainSpec(generator="gaussian_blobs", num_classes=4, input_dim=6, rng_seed=50)
    ds = data.generate_synthetic(spec, 800)
    fr = {"defender_train": 0.5, "attacker_train": 0.2, "test": 0.2, "holdout": 0.1}
    ds = data.assign_splits(ds, fr, seed=51)
    cfg = nn.TrainConfig(epochs=30, batch_size=32, learning_rate=3e-3, rng_seed=52)
    source = zoo.train_reference(ds, cfg, hidden=[24]).network
    z = zoo.populate(source, ds, c1=3, c2=3, holdout_c1=0, holdout_c2=0,
                     cfg=nn.TrainConfig(epochs=25, batch_size=32, learning_rate=3e-3, rng_seed=53))
    return ds, source, z


def test_surr_mean_single_member_no_dropout():
    net = soft_net(3, seed=1)
    ens = cem.EnsembleModel(net, [net], [onehot_net(3, 0)], dropout=0.0)
    x = np.array([0.2, 0.4, 0.6, 0.8])
    assert np.allclose(cem.surr_mean(ens, x), nn.softmax(nn.forward_batch(net, x[None])[0]), atol=1e-12)


def test_surr_mean_two_onehot_members_average():
    a, b = onehot_net(2, 0), onehot_net(2, 1)
    ens = cem.EnsembleModel(a, [a, b], [onehot_net(2, 0)], dropout=0.0)
    assert np.allclose(cem.surr_mean(ens, np.full(4, 0.5)), [0.5, 0.5])


def test_surr_mean_dropout_reproducible_per_seed():
    net = soft_net(3, seed=2)
    ens = cem.EnsembleModel(net, [net, soft_net(3, seed=3)], [soft_net(3, seed=4)], dropout=0.3, seed=9)
    x = np.full(4, 0.5)
    v1 = cem.surr_mean(ens, x)
    ens.reseed(9)
    v2 = cem.surr_mean(ens, x)
    assert np.array_equal(v1, v2)
    ens.reseed(10)
    v3 = cem.surr_mean(ens, x)
    assert not np.array_equal(v1, v3)


def test_ref_mean_onehot_cases():
    t_net = onehot_net(4, 1)
    ens = cem.EnsembleModel(t_net, [t_net], [t_net, t_net, t_net], dropout=0.0)
    assert np.allclose(cem.ref_mean(ens, np.full(4, 0.3))[1], 1.0)
    # 3 of 4 references predict t=2, one predicts u=0
    refs = [onehot_net(4, 2), onehot_net(4, 2), onehot_net(4, 2), onehot_net(4, 0)]
    ens = cem.EnsembleModel(t_net, [t_net], refs, dropout=0.0)
    assert np.allclose(cem.ref_mean(ens, np.full(4, 0.3))[2], 0.75)


def test_ensemble_forward_identical_onehots_gives_uniform():
    t_net = onehot_net(4, 2)
    ens = cem.EnsembleModel(t_net, [t_net], [t_net], dropout=0.0)
    out = cem.ensemble_forward(ens, np.full(4, 0.5))
    assert np.allclose(out, 0.25, atol=1e-12)


def test_ensemble_forward_distinct_onehots():
    s, r = onehot_net(4, 1), onehot_net(4, 3)
    ens = cem.EnsembleModel(s, [s], [r], dropout=0.0)
    out = cem.ensemble_forward(ens, np.full(4, 0.5))
    expected = nn.softmax(np.array([0.0, 1.0, 0.0, 0.0]))
    assert np.allclose(out, expected, atol=1e-12)
    assert np.argmax(out) == 1


def test_ensemble_forward_compositional_oracle():
    surr = [soft_net(3, seed=5), soft_net(3, seed=6)]
    refs = [soft_net(3, seed=7), soft_net(3, seed=8)]
    ens = cem.EnsembleModel(soft_net(3, seed=9), surr, refs, dropout=0.0)
    x = np.array([0.1, 0.9, 0.4, 0.7])
    s = cem.surr_mean(ens, x)
    r = cem.ref_mean(ens, x)
    recomputed = nn.softmax(s * (1.0 - r))
    assert np.allclose(cem.ensemble_forward(ens, x), recomputed, atol=1e-12)
    assert abs(cem.ensemble_forward(ens, x).sum() - 1.0) < 1e-9


def test_cem_loss_alpha_only_uniform_ensemble():
    t_net = onehot_net(8, 2)
    ens = cem.EnsembleModel(t_net, [t_net], [t_net], dropout=0.0)
    x = np.full(4, 0.5)
    loss = cem.cem_loss(ens, x, x, weights=(1.0, 0.0, 0.0))
    assert loss == pytest.approx(math.log(8), abs=1e-9)


def test_cem_loss_beta_term_is_negative_entropy_at_start():
    src = onehot_net(4, 1)  # fully confident: entropy 0
    ens = cem.EnsembleModel(src, [soft_net(4, seed=11)], [soft_net(4, seed=12)], dropout=0.0)
    x = np.full(4, 0.5)
    alpha_part = cem.cem_loss(ens, x, x, weights=(1.0, 0.0, 0.0))
    with_beta = cem.cem_loss(ens, x, x, weights=(1.0, 1.0, 0.0))
    assert with_beta - alpha_part == pytest.approx(0.0, abs=1e-6)


def test_cem_loss_compositional_oracle():
    surr = [soft_net(4, seed=13), soft_net(4, seed=14)]
    refs = [soft_net(4, seed=15)]
    src = soft_net(4, seed=16)
    ens = cem.EnsembleModel(src, surr, refs, dropout=0.0)
    x0 = np.array([0.3, 0.3, 0.3, 0.3])
    x1 = np.array([0.35, 0.25, 0.32, 0.28])
    w = (0.7, 0.3, 0.2)
    # hand-assembled from independently computed terms
    me = cem.ensemble_forward(ens, x1)
    p0 = nn.softmax(nn.forward_batch(src, x0[None])[0])
    p1 = nn.softmax(nn.forward_batch(src, x1[None])[0])
    s = cem.surr_mean(ens, x1)
    expected = (
        w[0] * (-math.log(me.max()))
        - w[1] * nn.cross_entropy(p0, p1)
        + w[2] * nn.cross_entropy(p1, s)
    )
    assert cem.cem_loss(ens, x0, x1, weights=w) == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------------------
# conferrability


def test_conferrability_maximum():
    surr = [onehot_net(4, 2)] * 3
    refs = [onehot_net(4, 0), onehot_net(4, 1)]
    assert cem.conferrability(surr, refs, np.full(4, 0.5), 2) == 1.0


def test_conferrability_perfect_transfer_is_zero():
    every = [onehot_net(4, 3)] * 2
    assert cem.conferrability(every, every, np.full(4, 0.5), 3) == 0.0


def test_conferrability_partial_counts():
    surr = [onehot_net(4, 1)] * 4 + [onehot_net(4, 0)]
    refs = [onehot_net(4, 1)] + [onehot_net(4, 2)] * 4
    score = cem.conferrability(surr, refs, np.full(4, 0.5), 1)
    assert score == pytest.approx(0.8 * (1 - 0.2), abs=1e-12)


def test_conferrability_empty_set_rejected():
    with pytest.raises(ConfigError):
        cem.transfer_rate([], np.full(4, 0.5), 0)


def test_conferrability_matches_brute_force_recount():
    rng = np.random.Generator(np.random.PCG64(60))
    for _ in range(50):
        ns, nr = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        surr = [soft_net(3, seed=int(rng.integers(1 << 30))) for _ in range(ns)]
        refs = [soft_net(3, seed=int(rng.integers(1 << 30))) for _ in range(nr)]
        x = rng.random(4)
        t = int(rng.integers(0, 3))
        got = cem.conferrability(surr, refs, x, t)
        s_count = sum(1 for m in surr if nn.forward(m, x).label == t)
        r_count = sum(1 for m in refs if nn.forward(m, x).label == t)
        expected = (s_count / ns) * (1 - r_count / nr)
        assert got == pytest.approx(expected, abs=1e-12)
        assert 0.0 <= got <= 1.0


# ---------------------------------------------------------------------------
# candidate generation


def test_generate_candidates_tau_zero_keeps_all_flipped(trained_populations):
    ds, source, z = trained_populations
    ens = cem.EnsembleModel(
        source,
        [r.network for r in z.ensemble_surrogates()],
        [r.network for r in z.ensemble_references()],
        dropout=0.3,
    )
    X, y = ds.subset("defender_train")
    ok = nn.predict_labels(source, X) == y
    seeds = X[ok][:40]
    cfg = cem.CemConfig(epsilon=0.1, tau=0.0, n=40, iterations=120, rng_seed=1)
    cands, short = cem.generate_candidates(ens, seeds, cfg)
    X_adv = cem.optimize_candidates(ens, seeds, cfg)
    flips = int((nn.predict_labels(source, X_adv) != nn.predict_labels(source, seeds)).sum())
    assert len(cands) == flips
    assert short == (flips < 40)
    for c in cands:
        assert np.max(np.abs(c.x_adv - c.x0)) <= cfg.epsilon + 1e-9
        assert c.x_adv.min() >= 0 and c.x_adv.max() <= 1
        assert c.target_label != c.source_label


def test_generate_candidates_tau_one_with_shared_sets_empty(trained_populations):
    ds, source, z = trained_populations
    members = [r.network for r in z.ensemble_surrogates()]
    ens = cem.EnsembleModel(source, members, members, dropout=0.0)
    X, y = ds.subset("defender_train")
    seeds = X[nn.predict_labels(source, X) == y][:20]
    cfg = cem.CemConfig(epsilon=0.1, tau=1.0, n=10, iterations=60, rng_seed=2)
    cands, short = cem.generate_candidates(ens, seeds, cfg)
    assert cands == [] and short


def test_generate_candidates_deterministic(trained_populations):
    ds, source, z = trained_populations
    ens = cem.EnsembleModel(
        source,
        [r.network for r in z.ensemble_surrogates()],
        [r.network for r in z.ensemble_references()],
        dropout=0.3,
    )
    X, y = ds.subset("defender_train")
    seeds = X[nn.predict_labels(source, X) == y][:25]
    cfg = cem.CemConfig(epsilon=0.08, tau=0.5, n=12, iterations=80, rng_seed=5)
    c1, s1 = cem.generate_candidates(ens, seeds, cfg)
    c2, s2 = cem.generate_candidates(ens, seeds, cfg)
    assert s1 == s2 and len(c1) == len(c2)
    for a, b in zip(c1, c2):
        assert np.array_equal(a.x_adv, b.x_adv)
        assert a.score == b.score and a.target_label == b.target_label


def test_cem_descent_on_toy_ensemble():
    surr = [soft_net(3, seed=21), soft_net(3, seed=22)]
    refs = [soft_net(3, seed=23)]
    ens = cem.EnsembleModel(soft_net(3, seed=24), surr, refs, dropout=0.0)
    x0 = np.full(4, 0.5)
    cfg = cem.CemConfig(epsilon=0.1, iterations=150, rng_seed=3)
    before = cem.cem_loss(ens, x0, x0)
    x_adv = cem.optimize_candidates(ens, x0[None], cfg)[0]
    after = cem.cem_loss(ens, x0, x_adv)
    assert after <= before


def test_config_validation():
    with pytest.raises(ConfigError):
        cem.CemConfig(epsilon=0.1, alpha=0.0)
    with pytest.raises(ConfigError):
        cem.CemConfig(epsilon=0.1, tau=1.5)
    with pytest.raises(ConfigError):
        cem.CemConfig(epsilon=0.0)
