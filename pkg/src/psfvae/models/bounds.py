"""Exact evidence and ELBO for one-dimensional U_f and U_b by Gauss-Hermite quadrature.

Only feasible for K_f = K_b = 1 and a handful of items; used to check that
the training objective really bounds the log-likelihood from below. The
multinomial coefficient is dropped from both sides.
"""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .. import numerics as nx
from .core import PSF_KINDS, Batch, ModelParams, encode


def _loglik_grid(params: ModelParams, batch: Batch, u_f: np.ndarray, u_b: np.ndarray) -> np.ndarray:
    """log p(r | u_f, u_b) + [observed] log p(r_b | u_b) for every user and grid point.

    ``u_f`` and ``u_b`` are (n, G) grids of latent values; returns (n, G).
    """
    n, g = u_f.shape
    z = np.stack([u_f.ravel(), u_b.ravel()], axis=1)
    log_r = nx.log_softmax(nx.forward_cached(params.nets["dec_r"], z).logits)
    r = np.repeat(batch.r, g, axis=0)
    ll = (r * log_r).sum(axis=1)
    nll_b, _ = nx.bernoulli_nll(nx.forward_cached(params.nets["dec_b"], z[:, 1:]).logits,
                                np.repeat(batch.rb, g, axis=0))
    ll = ll - np.repeat(batch.observed.astype(float), g) * nll_b
    return ll.reshape(n, g)


def _nodes(n_nodes: int):
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    # N(0, 1) expectations: E[h(u)] = sum_i w_i / sqrt(pi) * h(sqrt(2) x_i)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def log_evidence(params: ModelParams, batch: Batch, n_nodes: int = 64) -> np.ndarray:
    """log p(r, r_b | s, x) per user under the standard-normal priors."""
    _require_1d(params)
    x, w = _nodes(n_nodes)
    uf, ub = np.meshgrid(x, x, indexing="ij")
    logw = (np.log(w)[:, None] + np.log(w)[None, :]).ravel()
    n = batch.size
    grid_f = np.broadcast_to(uf.ravel(), (n, uf.size))
    grid_b = np.broadcast_to(ub.ravel(), (n, ub.size))
    return logsumexp(_loglik_grid(params, batch, grid_f, grid_b) + logw, axis=1)


def elbo(params: ModelParams, batch: Batch, n_nodes: int = 64) -> np.ndarray:
    """Exact ELBO per user: quadrature under q for the likelihood, closed-form KL."""
    _require_1d(params)
    post = encode(params, batch)
    x, w = _nodes(n_nodes)
    sd_f = np.exp(0.5 * post.log_var_f)
    sd_b = np.exp(0.5 * post.log_var_b)
    xf, xb = np.meshgrid(x, x, indexing="ij")
    ww = (w[:, None] * w[None, :]).ravel()
    grid_f = post.mu_f + sd_f * xf.ravel()[None, :]
    grid_b = post.mu_b + sd_b * xb.ravel()[None, :]
    expected = _loglik_grid(params, batch, grid_f, grid_b) @ ww
    kl_f, _, _ = nx.kl_std_normal(post.mu_f, post.log_var_f)
    kl_b, _, _ = nx.kl_std_normal(post.mu_b, post.log_var_b)
    return expected - kl_f - kl_b


def elbo_mc(params: ModelParams, batch: Batch, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Sampled ELBO per user (reparameterised draws), for comparison with ``elbo``."""
    _require_1d(params)
    post = encode(params, batch)
    e_f = rng.standard_normal((batch.size, n_samples))
    e_b = rng.standard_normal((batch.size, n_samples))
    grid_f = post.mu_f + np.exp(0.5 * post.log_var_f) * e_f
    grid_b = post.mu_b + np.exp(0.5 * post.log_var_b) * e_b
    expected = _loglik_grid(params, batch, grid_f, grid_b).mean(axis=1)
    kl_f, _, _ = nx.kl_std_normal(post.mu_f, post.log_var_f)
    kl_b, _, _ = nx.kl_std_normal(post.mu_b, post.log_var_b)
    return expected - kl_f - kl_b


def elbo_gap(params: ModelParams, batch: Batch, n_nodes: int = 64) -> np.ndarray:
    """log evidence minus ELBO per user; the KL from q to the true posterior."""
    return log_evidence(params, batch, n_nodes) - elbo(params, batch, n_nodes)


def _require_1d(params: ModelParams):
    if params.kind not in PSF_KINDS or params.k_f != 1 or params.k_b != 1:
        raise ValueError("quadrature needs a PSF-VAE model with K_f = K_b = 1")
