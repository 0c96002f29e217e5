import dataclasses
import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from psfvae import numerics as nx
from psfvae.models import bounds, checkpoint, core
from psfvae.models.checks import gradient_checks, tiny_batch
from psfvae.models.train import (DependencyError, TrainConfig, evaluate, posterior_mean_f,
                                 predict_scores, psf_nn_filter, train_model)

TINY = TrainConfig(k_f=4, k_b=2, epochs_ub=2, epochs=3, epochs_psf=2, batch_size=50, seed=0)


@pytest.fixture(scope="module")
def trained(small_prepared):
    data, splits = small_prepared
    return train_model("psf_vae", data, splits, TINY)


def _model(kind, rng, num_items=20, k_s=3, k_f=4, k_b=2):
    return core.init_model(kind, num_items, k_s, 0, k_f, k_b, rng)


def test_zero_weight_encoders_return_biases(rng):
    params = _model("psf_vae", rng)
    for name in ("enc_f", "enc_b"):
        net = params.nets[name]
        for w in net.weights:
            w[:] = 0.0
        net.biases[0][:] = 0.0
        net.biases[1][:] = rng.standard_normal(net.biases[1].shape)
    post = core.encode(params, tiny_batch(rng))
    np.testing.assert_array_equal(post.mu_f[0], params.nets["enc_f"].biases[1][:4])
    np.testing.assert_array_equal(post.mu_b[3], params.nets["enc_b"].biases[1][:2])


def test_encoder_matches_scalar_loop(rng):
    params = _model("psf_vae", rng, num_items=6, k_s=2)
    batch = tiny_batch(rng, 3, 6, k_s=2)
    post = core.encode(params, batch)
    net = params.nets["enc_f"]
    for u in range(3):
        x = list(batch.r[u] / np.sqrt((batch.r[u] ** 2).sum())) + list(batch.s[u])
        hidden = []
        for k in range(net.weights[0].shape[1]):
            a = net.biases[0][k]
            for i, xi in enumerate(x):
                a += xi * net.weights[0][i, k]
            hidden.append(np.tanh(a))
        for k in range(4):
            a = net.biases[1][k]
            for i, hi in enumerate(hidden):
                a += hi * net.weights[1][i, k]
            assert abs(a - post.mu_f[u, k]) < 1e-12


def test_no_observed_unfair_items_gives_zero_bernoulli_gradient(rng):
    params = _model("psf_vae", rng)
    batch = tiny_batch(rng)
    batch.observed[:] = False
    batch.rb[:] = 0.0
    noise = core.draw_noise(rng, batch, params, 0.5)
    _, grads, aux = core.psf_elbo(params, batch, noise, 0.5)
    assert aux["nll_b"] == 0.0
    for a in grads["dec_b"].arrays().values():
        assert not a.any()


def test_zero_kl_weight_is_reconstruction_only(rng):
    params = _model("psf_vae", rng)
    batch = tiny_batch(rng)
    noise = core.draw_noise(rng, batch, params, 0.0)
    loss, _, aux = core.psf_elbo(params, batch, noise, 0.0)
    assert loss == pytest.approx(aux["nll_r"] + aux["nll_b"], rel=1e-12)


def test_unobserved_users_still_use_their_bias_branch(rng):
    params = _model("psf_vae", rng)
    batch = tiny_batch(rng)
    assert (~batch.observed).any()
    noise = core.draw_noise(rng, batch, params, 0.0)
    full, _, _ = core.psf_elbo(params, batch, noise, 1.0)
    cut, _, _ = core.psf_elbo(params, batch, noise, 1.0, ub_rows=batch.observed)
    assert full != cut


def test_elbo_gradients_pass_finite_differences():
    reports = dict(gradient_checks(seed=1))
    for label in ("elbo", "elbo_ub_stage", "discriminator", "encoder_penalty", "psf_predictor"):
        assert reports[label].passed, (label, str(reports[label]))


def test_discriminator_detects_a_leak(rng):
    # a discriminator trained on u_f that contains u_b verbatim learns to predict it
    params = _model("psf_vae", rng, k_f=2, k_b=2)
    params.nets["disc"] = nx.init_mlp([2 + 3, 16, 2], ["tanh", "identity"], rng)
    batch = tiny_batch(rng, 200, 20)
    u_b = rng.standard_normal((200, 2))
    zero = nx.init_mlp([2 + 3, 16, 2], ["tanh", "identity"], rng)
    arrays = params.arrays(["disc"])
    opt = nx.AdamState(lr=1e-2)
    for _ in range(400):
        pred = nx.forward_cached(params.nets["disc"], np.hstack([u_b, batch.s]))
        _, d = nx.gaussian_nll(pred.logits, u_b)
        g, _ = nx.backward(params.nets["disc"], pred, d / 200)
        nx.optimizer_step(opt, arrays, g.arrays(prefix="disc."))
    err = ((nx.forward(params.nets["disc"], np.hstack([u_b, batch.s])) - u_b) ** 2).mean()
    base = ((nx.forward(zero, np.hstack([u_b, batch.s])) - u_b) ** 2).mean()
    assert err < 0.1 * base


def test_predictor_reads_only_fair_latents(trained, small_prepared):
    data, splits = small_prepared
    assert trained.nets["psf"].in_dim == trained.k_f
    users = splits.test
    u_f = posterior_mean_f(trained, data, splits.visible, users)
    base = core.psf_scores_from_latent(trained, u_f)
    rng = np.random.default_rng(0)
    junk = [rng.standard_normal((len(users), d)) for d in (trained.k_b, data.k_s, 3, data.num_items)]
    np.testing.assert_array_equal(core.psf_scores_from_latent(trained, u_f, *junk), base)


def test_scores_ignore_unfair_items_and_bias_branch(trained, small_prepared):
    data, splits = small_prepared
    users = splits.test
    base = predict_scores(trained, data, splits.visible, users)
    other = trained.copy()
    for w in other.nets["enc_b"].weights + other.nets["dec_b"].weights:
        w[:] = np.random.default_rng(1).standard_normal(w.shape)
    flipped = dataclasses.replace(data, unfair=sp.csr_matrix(1.0 - data.unfair.toarray()))
    np.testing.assert_array_equal(predict_scores(other, flipped, splits.visible, users), base)


def test_predict_scores_masks_seen_items(trained, small_prepared):
    data, splits = small_prepared
    users = splits.test[:5]
    raw = core.score_batch(trained, core.make_batch(data, splits.visible, users))
    assert np.all(raw.sum(axis=1) <= 1 + 1e-12)
    scores = predict_scores(trained, data, splits.visible, users)
    seen = splits.visible[users].toarray() > 0
    assert np.all(np.isneginf(scores[seen])) and np.all(np.isfinite(scores[~seen]))
    full = sp.csr_matrix(np.ones((data.num_users, data.num_items)))
    assert np.all(np.isneginf(predict_scores(trained, data, full, users)))
    # top-5 equals a full sort of the forward pass
    for u in range(len(users)):
        order = sorted(np.flatnonzero(~seen[u]), key=lambda j: (-raw[u, j], j))[:5]
        assert list(np.argsort(-scores[u], kind="stable")[:5]) == order


@pytest.mark.parametrize("kind", core.ALL_KINDS)
def test_every_variant_trains_and_scores(kind, small_prepared):
    data, splits = small_prepared
    cfg = TrainConfig(k_f=4, k_b=2, epochs_ub=1, epochs=1, epochs_psf=1, batch_size=100,
                      es_target=0.0 if kind == "cond_vae_es" else -1.0)
    params = train_model(kind, data, splits, cfg)
    rep = evaluate(params, data, splits)
    assert np.all(np.isfinite(rep.recall)) and np.all(rep.recall >= 0)


def test_cond_vae_es_needs_reference_metric(small_prepared):
    data, splits = small_prepared
    with pytest.raises(DependencyError):
        train_model("cond_vae_es", data, splits, TINY)


def test_training_is_deterministic(trained, small_prepared):
    data, splits = small_prepared
    again = train_model("psf_vae", data, splits, TINY)
    for name, a in trained.arrays().items():
        assert np.array_equal(a, again.arrays()[name]), name
    assert again.curves == trained.curves


def test_unaware_baseline_ignores_sensitive_features(small_prepared):
    data, splits = small_prepared
    cfg = TrainConfig(k_f=4, k_b=2, epochs=2, batch_size=100)
    shuffled = dataclasses.replace(data, sensitive=data.sensitive[::-1].copy())
    a = train_model("multi_vae", data, splits, cfg)
    b = train_model("multi_vae", shuffled, splits, cfg)
    for name, arr in a.arrays().items():
        assert np.array_equal(arr, b.arrays()[name])


def test_mask_variant_zeroes_bias_columns(rng):
    params = _model("psf_vae_mask", rng)
    dec = core.masked_decoder(params)
    assert not dec.weights[0][params.k_f:].any()
    assert params.nets["dec_r"].weights[0][params.k_f:].any()


def test_filter_without_overlap_leaves_scores(rng):
    scores = rng.random((2, 6))
    ref_unfair = sp.csr_matrix(np.zeros((3, 6)))
    out = psf_nn_filter(scores, rng.standard_normal((2, 2)), rng.standard_normal((3, 2)), ref_unfair, 2, 3)
    np.testing.assert_array_equal(out, scores)


def test_filter_identical_neighbour(rng):
    ref_s = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.2]])
    ref_unfair = sp.csr_matrix(np.array([[1, 0, 1, 0, 1, 0], [0, 1, 0, 1, 0, 0], [0, 0, 0, 0, 0, 1.0]]))
    out = psf_nn_filter(np.ones((1, 6)), ref_s[1:2], ref_s, ref_unfair, 1, 10)
    assert list(np.isneginf(out[0])) == [False, True, False, True, False, False]


def test_filter_matches_brute_force(rng):
    ref_s = rng.standard_normal((5, 3))
    ref_unfair = sp.csr_matrix((rng.random((5, 8)) < 0.35).astype(float))
    users = rng.standard_normal((4, 3))
    n_nb, k_top = 3, 2
    out = psf_nn_filter(np.zeros((4, 8)), users, ref_s, ref_unfair, n_nb, k_top)
    dense = ref_unfair.toarray()
    for u in range(4):
        cos = [users[u] @ r / np.linalg.norm(users[u]) / np.linalg.norm(r) for r in ref_s]
        best = max(itertools.combinations(range(5), n_nb), key=lambda c: sum(cos[i] for i in c))
        freq = dense[list(best)].sum(axis=0)
        ranked = sorted([j for j in range(8) if freq[j] > 0], key=lambda j: (-freq[j], j))
        assert set(np.flatnonzero(np.isneginf(out[u]))) == set(ranked[:k_top])


def test_checkpoint_round_trip(tmp_path, trained):
    path = checkpoint.save_model(trained, tmp_path / "m.ckpt")
    back = checkpoint.load_model(path)
    assert back.kind == trained.kind and back.hparams == trained.hparams
    for name, a in trained.arrays().items():
        assert np.array_equal(a, back.arrays()[name])
    checkpoint.save_model(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
    mlp = checkpoint.load_mlp(path, "psf")
    np.testing.assert_array_equal(mlp.weights[0], trained.nets["psf"].weights[0])


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT\n")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_model(tmp_path / "bad.ckpt")


def test_curves_file(tmp_path, trained):
    text = checkpoint.write_curves(trained.curves, tmp_path / "c.csv", "h").read_text().splitlines()
    assert text[0] == "# config_hash=h"
    assert text[1].startswith("stage,epoch,step,") and text[1].endswith(",wall_time")
    assert all(line.endswith(",") for line in text[2:])
    stages = {line.split(",")[0] for line in text[2:]}
    assert stages == {"ub", "joint", "psf"}


def test_elbo_bounds_log_evidence(rng):
    params = _model("psf_vae", rng, num_items=8, k_f=1, k_b=1)
    batch = tiny_batch(rng, 10, 8)
    assert np.all(bounds.elbo_gap(params, batch) >= -1e-6)
    mc = bounds.elbo_mc(params, batch, 20_000, rng)
    np.testing.assert_allclose(mc, bounds.elbo(params, batch), atol=0.05)
    with pytest.raises(ValueError):
        bounds.elbo(_model("psf_vae", rng), batch)
