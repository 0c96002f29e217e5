"""Finite-difference checks of every training objective on a tiny random instance."""
from __future__ import annotations

import numpy as np

from .. import numerics as nx
from . import core


def tiny_batch(rng: np.random.Generator, num_users=10, num_items=20, k_s=3) -> core.Batch:
    r = (rng.random((num_users, num_items)) < 0.3).astype(float)
    r[:, 0] = 1.0
    rb = (rng.random((num_users, num_items)) < 0.1).astype(float)
    observed = np.arange(num_users) % 3 != 1
    rb[~observed] = 0.0
    return core.Batch(np.arange(num_users), r, rng.standard_normal((num_users, k_s)),
                      np.zeros((num_users, 0)), rb, observed)


def gradient_checks(seed: int = 0, k_f: int = 4, k_b: int = 2, num_users=10, num_items=20,
                    tolerance: float = 1e-4) -> list[tuple[str, nx.GradCheckReport]]:
    """(label, report) for the ELBO, adversarial, predictor and every baseline objective."""
    rng = nx.derive_rng(seed, "gradcheck")
    batch = tiny_batch(rng, num_users, num_items)
    k_s = batch.s.shape[1]
    out = []

    def check(label, kind, fn, nets):
        params = core.init_model(kind, num_items, k_s, 0, k_f, k_b, rng)
        noise = core.draw_noise(rng, batch, params, 0.5)
        noise.bandwidth = 1.3
        _, grads = fn(params, noise)[:2]
        rep = nx.finite_diff_check(lambda: fn(params, noise)[0], params.arrays(nets),
                                   core.flat_grads(grads), tolerance=tolerance)
        out.append((label, rep))

    psf_nets = ["enc_f", "enc_b", "dec_r", "dec_b"]
    check("elbo", "psf_vae", lambda p, n: core.psf_elbo(p, batch, n, 0.7), psf_nets)
    check("elbo_ub_stage", "psf_vae", lambda p, n: core.psf_elbo(p, batch, n, 0.7, stage="ub"),
          ["enc_b", "dec_b"])
    check("elbo_nwsl", "psf_vae_nwsl",
          lambda p, n: core.psf_elbo(p, batch, n, 0.7, ub_rows=batch.observed), psf_nets)
    u_b_hat = rng.standard_normal((num_users, k_b))
    check("discriminator", "psf_vae",
          lambda p, n: core.adversarial_step(p, batch, n, u_b_hat)[:2], ["disc"])
    check("encoder_penalty", "psf_vae",
          lambda p, n: core.adversarial_step(p, batch, n, u_b_hat)[2:], ["enc_f"])
    u_f_hat = rng.standard_normal((num_users, k_f))
    check("psf_predictor", "psf_vae", lambda p, n: core.predictor_loss(p, u_f_hat, batch.r), ["psf"])
    groups = np.arange(num_users) % 2 == 0
    for kind in ("multi_vae", "cond_vae", "fair_adv", "fair_mmd", "psf_vae_nlat"):
        check(kind, kind, lambda p, n: core.vae_loss(p, batch, n, 0.6, penalty_weight=2.0,
                                                    groups=groups), ["enc", "dec"])
        if kind in ("fair_adv", "psf_vae_nlat"):
            z = rng.standard_normal((num_users, k_f + k_b))
            check(f"{kind}_adversary", kind, lambda p, n: core.adversary_loss(p, z, batch), ["adv"])
    return out
