"""Networks, objectives and scoring for PSF-VAE and the baseline VAEs.

Every objective takes explicit per-step noise (Gaussian draws, dropout
mask, MMD bandwidth) so the same call is a deterministic function of the
parameters, which is what the gradient checker needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .. import numerics as nx
from ..numerics import MlpParams

PSF_KINDS = ("psf_vae", "psf_vae_nwsl", "psf_vae_nadv", "psf_vae_mask")
VAE_KINDS = ("multi_vae", "cond_vae", "cond_vae_es", "fair_adv", "fair_mmd", "psf_vae_nlat")
ALL_KINDS = PSF_KINDS + VAE_KINDS + ("psf_nn",)


@dataclass
class ModelParams:
    kind: str
    nets: dict[str, MlpParams]
    hparams: dict
    curves: list = field(default_factory=list)

    def arrays(self, names=None) -> dict[str, np.ndarray]:
        out = {}
        for net in names or self.nets:
            out.update(self.nets[net].arrays(prefix=f"{net}."))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, {k: v.copy() for k, v in self.nets.items()},
                           dict(self.hparams), list(self.curves))

    @property
    def k_f(self) -> int:
        return self.hparams["k_f"]

    @property
    def k_b(self) -> int:
        return self.hparams["k_b"]


def flat_grads(grads: dict[str, MlpParams]) -> dict[str, np.ndarray]:
    out = {}
    for net, g in grads.items():
        out.update(g.arrays(prefix=f"{net}."))
    return out


@dataclass
class LatentPosterior:
    mu_f: np.ndarray
    log_var_f: np.ndarray
    mu_b: np.ndarray | None = None
    log_var_b: np.ndarray | None = None


@dataclass
class Batch:
    users: np.ndarray
    r: np.ndarray          # visible ratings, dense n x J
    s: np.ndarray
    x: np.ndarray
    rb: np.ndarray         # unfair items, dense n x J (zero rows where unobserved)
    observed: np.ndarray   # bool n

    @property
    def size(self) -> int:
        return len(self.users)


def make_batch(dataset, visible: sp.csr_matrix, users) -> Batch:
    users = np.asarray(users)
    return Batch(users, visible[users].toarray(), dataset.sensitive[users],
                 dataset.nonsensitive[users], dataset.unfair[users].toarray(),
                 dataset.observed[users])


@dataclass
class Noise:
    eps: dict[str, np.ndarray]
    keep: np.ndarray | None = None       # dropout keep-mask scaled by 1/(1-p), or None
    bandwidth: float = 1.0               # RBF bandwidth for the MMD penalty


def draw_noise(rng: np.random.Generator, batch: Batch, params: ModelParams,
               dropout: float) -> Noise:
    eps = {}
    for name, dim in latent_dims(params).items():
        eps[name] = rng.standard_normal((batch.size, dim))
    keep = None
    if dropout > 0:
        keep = (rng.random(batch.r.shape) >= dropout) / (1.0 - dropout)
    return Noise(eps, keep)


def latent_dims(params: ModelParams) -> dict[str, int]:
    if params.kind in PSF_KINDS:
        return {"f": params.k_f, "b": params.k_b}
    return {"u": params.k_f + params.k_b}


def normalize_input(r: np.ndarray, keep: np.ndarray | None = None) -> np.ndarray:
    norm = np.sqrt((r * r).sum(axis=1, keepdims=True))
    h = r / np.where(norm > 0, norm, 1.0)
    return h if keep is None else h * keep


# ---------------------------------------------------------------------------
# construction


def init_model(kind: str, num_items: int, k_s: int, k_x: int, k_f: int, k_b: int,
               rng: np.random.Generator, hidden_mult: int = 4, **extra) -> ModelParams:
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    k = k_f + k_b
    h = hidden_mult * k
    J = num_items

    def mlp(n_in, n_out, head):
        return nx.init_mlp([n_in, h, n_out], ["tanh", head], rng)

    nets = {}
    if kind in PSF_KINDS:
        nets["enc_f"] = mlp(J + k_s + k_x, 2 * k_f, "identity")
        nets["enc_b"] = mlp(J + k_s, 2 * k_b, "identity")
        nets["dec_r"] = mlp(k, J, "softmax")
        nets["dec_b"] = mlp(k_b, J, "sigmoid")
        nets["disc"] = mlp(k_f + k_s, k_b, "identity")
        nets["psf"] = mlp(k_f, J, "softmax")
    else:
        cond = kind in ("cond_vae", "cond_vae_es", "psf_nn")
        nets["enc"] = mlp(J + (k_s if cond else 0), 2 * k, "identity")
        nets["dec"] = mlp(k + (k_s if cond else 0), J, "softmax")
        if kind == "fair_adv":
            nets["adv"] = mlp(k, k_s, "identity")
        elif kind == "psf_vae_nlat":
            nets["adv"] = mlp(k, J, "sigmoid")
    hp = dict(num_items=J, k_s=k_s, k_x=k_x, k_f=k_f, k_b=k_b, hidden=h, **extra)
    return ModelParams(kind, nets, hp)


def _split(out: np.ndarray, k: int):
    return out[:, :k], out[:, k:]


# ---------------------------------------------------------------------------
# inference


def psf_inputs(params: ModelParams, batch: Batch, keep=None):
    h = normalize_input(batch.r, keep)
    return np.hstack([h, batch.s, batch.x]), np.hstack([h, batch.s])


def encode(params: ModelParams, batch: Batch) -> LatentPosterior:
    """Posterior parameters at inference time (no dropout).

    The U_b encoder sees (r, s) only; neither encoder reads the unfair items.
    """
    if params.kind in PSF_KINDS:
        in_f, in_b = psf_inputs(params, batch)
        mu_f, lv_f = _split(nx.forward(params.nets["enc_f"], in_f), params.k_f)
        mu_b, lv_b = _split(nx.forward(params.nets["enc_b"], in_b), params.k_b)
        return LatentPosterior(mu_f, lv_f, mu_b, lv_b)
    h = normalize_input(batch.r)
    if params.kind in ("cond_vae", "cond_vae_es", "psf_nn"):
        h = np.hstack([h, batch.s])
    mu, lv = _split(nx.forward(params.nets["enc"], h), params.k_f + params.k_b)
    return LatentPosterior(mu, lv)


# ---------------------------------------------------------------------------
# PSF-VAE objectives


def psf_elbo(params: ModelParams, batch: Batch, noise: Noise, kl_weight: float,
             ub_rows: np.ndarray | None = None, stage: str = "joint"):
    """Negated ELBO averaged over the batch, with gradients.

    ``stage`` = "joint" uses every term; "ub" keeps only the U_b-specific
    terms (unfair-item likelihood + U_b KL) over users with observed unfair
    items. ``ub_rows`` restricts which users carry a U_b branch at all;
    elsewhere u_b is pinned to zero (the variant without weak supervision).

    Returns ``(loss, grads, aux)``; ``aux`` holds the samples and loss parts.
    """
    n = batch.size
    k_f, k_b = params.k_f, params.k_b
    nets = params.nets
    obs = batch.observed.astype(float)
    has_b = np.ones(n) if ub_rows is None else ub_rows.astype(float)

    in_f, in_b = psf_inputs(params, batch, noise.keep)
    cache_b = nx.forward_cached(nets["enc_b"], in_b)
    mu_b, lv_b = _split(cache_b.out, k_b)
    u_b = nx.reparameterized_sample(mu_b, lv_b, noise.eps["b"]) * has_b[:, None]

    logits_b_cache = nx.forward_cached(nets["dec_b"], u_b)
    nll_b, d_logits_b = nx.bernoulli_nll(logits_b_cache.logits, batch.rb)
    kl_b, dkl_mu_b, dkl_lv_b = nx.kl_std_normal(mu_b, lv_b)
    w_b = obs * has_b                         # rows contributing the unfair-item term
    kl_b_rows = has_b if stage == "joint" else w_b

    grads = {}
    if stage == "ub":
        denom = max(w_b.sum(), 1.0)
        loss_rows = w_b * nll_b + kl_weight * kl_b_rows * kl_b
        loss = float(loss_rows.sum() / denom)
        g_db, d_ub = nx.backward(nets["dec_b"], logits_b_cache, d_logits_b * (w_b / denom)[:, None])
        d_mu_b, d_lv_b = nx.reparam_backward(d_ub * has_b[:, None], lv_b, noise.eps["b"])
        d_mu_b = d_mu_b + kl_weight * (kl_b_rows / denom)[:, None] * dkl_mu_b
        d_lv_b = d_lv_b + kl_weight * (kl_b_rows / denom)[:, None] * dkl_lv_b
        grads["enc_b"], _ = nx.backward(nets["enc_b"], cache_b, np.hstack([d_mu_b, d_lv_b]))
        grads["dec_b"] = g_db
        aux = dict(u_b=u_b, nll_b=float((w_b * nll_b).sum() / denom),
                   kl_b=float((kl_b_rows * kl_b).sum() / denom))
        return _check(loss, "ub"), grads, aux

    cache_f = nx.forward_cached(nets["enc_f"], in_f)
    mu_f, lv_f = _split(cache_f.out, k_f)
    u_f = nx.reparameterized_sample(mu_f, lv_f, noise.eps["f"])
    cache_r = nx.forward_cached(nets["dec_r"], np.hstack([u_f, u_b]))
    nll_r, d_logits_r = nx.multinomial_nll(cache_r.logits, batch.r)
    kl_f, dkl_mu_f, dkl_lv_f = nx.kl_std_normal(mu_f, lv_f)

    loss_rows = nll_r + w_b * nll_b + kl_weight * (kl_f + kl_b_rows * kl_b)
    loss = float(loss_rows.mean())

    g_dr, d_z = nx.backward(nets["dec_r"], cache_r, d_logits_r / n)
    d_uf, d_ub_r = d_z[:, :k_f], d_z[:, k_f:]
    g_db, d_ub_b = nx.backward(nets["dec_b"], logits_b_cache, d_logits_b * (w_b / n)[:, None])
    d_ub = (d_ub_r + d_ub_b) * has_b[:, None]

    d_mu_f, d_lv_f = nx.reparam_backward(d_uf, lv_f, noise.eps["f"])
    d_mu_f = d_mu_f + kl_weight * dkl_mu_f / n
    d_lv_f = d_lv_f + kl_weight * dkl_lv_f / n
    d_mu_b, d_lv_b = nx.reparam_backward(d_ub, lv_b, noise.eps["b"])
    d_mu_b = d_mu_b + kl_weight * (kl_b_rows / n)[:, None] * dkl_mu_b
    d_lv_b = d_lv_b + kl_weight * (kl_b_rows / n)[:, None] * dkl_lv_b

    grads["enc_f"], _ = nx.backward(nets["enc_f"], cache_f, np.hstack([d_mu_f, d_lv_f]))
    grads["enc_b"], _ = nx.backward(nets["enc_b"], cache_b, np.hstack([d_mu_b, d_lv_b]))
    grads["dec_r"] = g_dr
    grads["dec_b"] = g_db
    aux = dict(u_f=u_f, u_b=u_b, nll_r=float(nll_r.mean()), nll_b=float((w_b * nll_b).mean()),
               kl_f=float(kl_f.mean()), kl_b=float((kl_b_rows * kl_b).mean()))
    return _check(loss, "joint"), grads, aux


def _check(loss: float, where: str) -> float:
    if not np.isfinite(loss):
        raise nx.NumericalError(f"non-finite loss in {where}")
    return loss


def adversarial_step(params: ModelParams, batch: Batch, noise: Noise, u_b_hat: np.ndarray,
                     rows: np.ndarray | None = None):
    """Both sides of the U_f / U_b minimax game.

    The discriminator N(MLP_d([u_f || s]), I) is scored on samples ``u_b_hat``
    from the frozen U_b posterior. Returns
    ``(disc_loss, disc_grads, encoder_penalty, encoder_grads)``: the
    discriminator minimises ``disc_loss`` (its negative log-density, constants
    dropped); the U_f encoder minimises ``encoder_penalty`` = mean log-density.
    """
    nets = params.nets
    n = batch.size
    w = np.ones(n) if rows is None else rows.astype(float)
    denom = max(w.sum(), 1.0)
    in_f, _ = psf_inputs(params, batch, noise.keep)
    cache_f = nx.forward_cached(nets["enc_f"], in_f)
    mu_f, lv_f = _split(cache_f.out, params.k_f)
    u_f = nx.reparameterized_sample(mu_f, lv_f, noise.eps["f"])
    cache_d = nx.forward_cached(nets["disc"], np.hstack([u_f, batch.s]))
    nll, d_pred = nx.gaussian_nll(cache_d.out, u_b_hat)
    disc_loss = float((w * nll).sum() / denom)
    g_disc, d_in = nx.backward(nets["disc"], cache_d, d_pred * (w / denom)[:, None])
    # encoder side: penalty = -disc_loss, so its gradient is the negation
    d_uf = -d_in[:, :params.k_f]
    d_mu, d_lv = nx.reparam_backward(d_uf, lv_f, noise.eps["f"])
    g_enc, _ = nx.backward(nets["enc_f"], cache_f, np.hstack([d_mu, d_lv]))
    return disc_loss, {"disc": g_disc}, -disc_loss, {"enc_f": g_enc}


def predictor_loss(params: ModelParams, u_f_hat: np.ndarray, r: np.ndarray):
    """Multinomial NLL of the PS-fair predictor fed posterior-mean u_f."""
    loss, g = nx.loss_and_grads(params.nets["psf"], u_f_hat, r, "multinomial")
    return loss, {"psf": g}


# ---------------------------------------------------------------------------
# single-latent VAEs (Multi-VAE family)


def _cond(params: ModelParams) -> bool:
    return params.kind in ("cond_vae", "cond_vae_es", "psf_nn")


def vae_loss(params: ModelParams, batch: Batch, noise: Noise, kl_weight: float,
             penalty_weight: float = 0.0, groups: np.ndarray | None = None):
    """Negated ELBO of a single-latent VAE plus its fairness penalty.

    Penalties by kind: ``fair_mmd`` adds ``penalty_weight * MMD^2`` between
    the two groups; ``fair_adv`` and ``psf_vae_nlat`` add ``penalty_weight``
    times the adversary's mean log-likelihood (the encoder tries to fool it;
    the adversary itself is frozen here).
    """
    nets = params.nets
    n = batch.size
    k = params.k_f + params.k_b
    cond = _cond(params)
    h = normalize_input(batch.r, noise.keep)
    if cond:
        h = np.hstack([h, batch.s])
    cache_e = nx.forward_cached(nets["enc"], h)
    mu, lv = _split(cache_e.out, k)
    z = nx.reparameterized_sample(mu, lv, noise.eps["u"])
    dec_in = np.hstack([z, batch.s]) if cond else z
    cache_d = nx.forward_cached(nets["dec"], dec_in)
    nll, d_logits = nx.multinomial_nll(cache_d.logits, batch.r)
    kl, dkl_mu, dkl_lv = nx.kl_std_normal(mu, lv)
    loss = float((nll + kl_weight * kl).mean())
    g_dec, d_in = nx.backward(nets["dec"], cache_d, d_logits / n)
    d_z = d_in[:, :k]
    aux = dict(z=z, nll_r=float(nll.mean()), kl=float(kl.mean()), penalty=0.0)

    if penalty_weight and params.kind == "fair_mmd":
        mmd, d_mmd = mmd2_rbf(z, groups, noise.bandwidth)
        loss += penalty_weight * mmd
        d_z = d_z + penalty_weight * d_mmd
        aux["penalty"] = mmd
    elif penalty_weight and params.kind in ("fair_adv", "psf_vae_nlat"):
        ll, d_ll = _adversary_loglik(params, z, batch)
        loss += penalty_weight * ll
        d_z = d_z + penalty_weight * d_ll
        aux["penalty"] = ll

    d_mu, d_lv = nx.reparam_backward(d_z, lv, noise.eps["u"])
    d_mu = d_mu + kl_weight * dkl_mu / n
    d_lv = d_lv + kl_weight * dkl_lv / n
    g_enc, _ = nx.backward(nets["enc"], cache_e, np.hstack([d_mu, d_lv]))
    return _check(loss, params.kind), {"enc": g_enc, "dec": g_dec}, aux


def _adversary_rows(params: ModelParams, batch: Batch) -> np.ndarray:
    if params.kind == "psf_vae_nlat":
        return batch.observed.astype(float)
    return np.ones(batch.size)


def _adversary_loglik(params: ModelParams, z: np.ndarray, batch: Batch):
    """Mean adversary log-likelihood of its target and d/dz (adversary frozen)."""
    cache = nx.forward_cached(params.nets["adv"], z)
    w = _adversary_rows(params, batch)
    denom = max(w.sum(), 1.0)
    if params.kind == "psf_vae_nlat":
        nll, d = nx.bernoulli_nll(cache.logits, batch.rb)
    else:
        nll, d = nx.gaussian_nll(cache.out, batch.s)
    _, d_z = nx.backward(params.nets["adv"], cache, -d * (w / denom)[:, None])
    return -float((w * nll).sum() / denom), d_z


def adversary_loss(params: ModelParams, z: np.ndarray, batch: Batch):
    """Adversary's own loss (negative log-likelihood of S, or of R_b for the nLat variant)."""
    cache = nx.forward_cached(params.nets["adv"], z)
    w = _adversary_rows(params, batch)
    denom = max(w.sum(), 1.0)
    if params.kind == "psf_vae_nlat":
        nll, d = nx.bernoulli_nll(cache.logits, batch.rb)
    else:
        nll, d = nx.gaussian_nll(cache.out, batch.s)
    g, _ = nx.backward(params.nets["adv"], cache, d * (w / denom)[:, None])
    return float((w * nll).sum() / denom), {"adv": g}


def median_bandwidth(z: np.ndarray) -> float:
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
    off = d2[np.triu_indices(len(z), 1)]
    med = float(np.median(off)) if len(off) else 1.0
    return float(np.sqrt(0.5 * med)) if med > 0 else 1.0


def mmd2_rbf(z: np.ndarray, groups: np.ndarray, bandwidth: float):
    """Biased MMD^2 between ``z[groups]`` and ``z[~groups]`` with an RBF kernel.

    Returns the value and d MMD^2 / d z; zero when a group is empty.
    """
    groups = np.asarray(groups, dtype=bool)
    a, b = groups, ~groups
    na, nb = a.sum(), b.sum()
    if na == 0 or nb == 0:
        return 0.0, np.zeros_like(z)
    diff = z[:, None, :] - z[None, :, :]
    kmat = np.exp(-(diff ** 2).sum(-1) / (2.0 * bandwidth ** 2))
    coef = np.zeros_like(kmat)
    coef[np.ix_(a, a)] = 1.0 / na ** 2
    coef[np.ix_(b, b)] = 1.0 / nb ** 2
    coef[np.ix_(a, b)] = -1.0 / (na * nb)
    coef[np.ix_(b, a)] = -1.0 / (na * nb)
    val = float((coef * kmat).sum())
    # d k(z_i, z_j) / d z_i = -k (z_i - z_j) / h^2, and symmetric for z_j
    w = coef * kmat / bandwidth ** 2
    d_z = -2.0 * (w[:, :, None] * diff).sum(axis=1)
    return val, d_z


# ---------------------------------------------------------------------------
# scoring


def psf_scores_from_latent(params: ModelParams, u_f: np.ndarray, *_ignored) -> np.ndarray:
    """PS-fair multinomial probabilities: a function of u_f and nothing else."""
    return nx.forward(params.nets["psf"], u_f)


def masked_decoder(params: ModelParams) -> MlpParams:
    """MLP_r with the first-layer weights fed by u_b zeroed out."""
    dec = params.nets["dec_r"].copy()
    dec.weights[0][params.k_f:, :] = 0.0
    return dec


def score_batch(params: ModelParams, batch: Batch) -> np.ndarray:
    """Unmasked recommendation probabilities for each user in ``batch``."""
    post = encode(params, batch)
    kind = params.kind
    if kind == "psf_vae_mask":
        return nx.forward(masked_decoder(params), np.hstack([post.mu_f, post.mu_b]))
    if kind in PSF_KINDS:
        return psf_scores_from_latent(params, post.mu_f)
    dec_in = np.hstack([post.mu_f, batch.s]) if _cond(params) else post.mu_f
    return nx.forward(params.nets["dec"], dec_in)


def naive_scores_from_latent(params: ModelParams, u_f: np.ndarray, u_b: np.ndarray) -> np.ndarray:
    """The factual rating decoder MLP_r([u_f || u_b])."""
    return nx.forward(params.nets["dec_r"], np.hstack([u_f, u_b]))
