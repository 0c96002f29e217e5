"""Training loops for PSF-VAE, its ablations and the baselines, plus scoring."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np
import scipy.sparse as sp

from .. import numerics as nx
from ..evalharness import MetricConfig, MetricsReport, evaluate_scores
from ..numerics import AdamState, derive_rng, optimizer_step
from . import core
from .core import PSF_KINDS, ModelParams

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class DependencyError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k_f: int = 24
    k_b: int = 8
    hidden_mult: int = 4
    epochs_ub: int = 30          # stage 1: U_b branch
    epochs: int = 80             # stage 2 / baseline epochs
    epochs_psf: int = 60         # PS-fair predictor epochs
    batch_size: int = 100
    lr: float = 3e-3
    lr_disc: float = 1e-3
    dropout: float = 0.5
    kl_anneal_frac: float = 0.2
    kl_max: float = 1.0
    adv_weight: float = 5.0
    mmd_weight: float = 10.0
    n_neighbors: int = 50
    k_top: int = 100
    es_target: float = -1.0      # validation N@100 of the PSF-VAE reference, for cond_vae_es
    select: bool = True          # keep the epoch with the best validation Met-hat
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("epochs_ub", "epochs", "epochs_psf", "batch_size", "k_f", "k_b",
                          "hidden_mult") and getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")


def _batches(users: np.ndarray, size: int, rng: np.random.Generator):
    order = users[rng.permutation(len(users))]
    return [order[i:i + size] for i in range(0, len(order), size)]


def _kl_weight(cfg: TrainConfig, step: int, total: int) -> float:
    warm = cfg.kl_anneal_frac * total
    return cfg.kl_max if warm <= 0 else cfg.kl_max * min(1.0, step / warm)


def _guard(fn, stage: str, step: int):
    try:
        return fn()
    except nx.NumericalError as exc:
        raise TrainingDiverged(f"diverged in stage {stage} at step {step}: {exc}") from exc


# ---------------------------------------------------------------------------
# scoring and evaluation


def predict_scores(params: ModelParams, dataset, visible: sp.csr_matrix, users,
                   splits=None, chunk: int = 500) -> np.ndarray:
    """Scores over all items with each user's visible items set to -inf."""
    users = np.asarray(users)
    out = np.empty((len(users), dataset.num_items))
    for start in range(0, len(users), chunk):
        sl = slice(start, start + chunk)
        batch = core.make_batch(dataset, visible, users[sl])
        out[sl] = core.score_batch(params, batch)
    if params.kind == "psf_nn":
        if splits is None:
            raise DependencyError("psf_nn scoring needs the splits to find reference users")
        out = psf_nn_filter(out, dataset.sensitive[users], *reference_users(dataset, splits),
                            params.hparams.get("n_neighbors", 50), params.hparams.get("k_top", 100))
    seen = visible[users]
    rows = np.repeat(np.arange(len(users)), np.diff(seen.indptr))
    out[rows, seen.indices] = -np.inf
    return out


def reference_users(dataset, splits):
    """Sensitive features and unfair sets of train/validation users with observed unfair items."""
    pool = np.concatenate([splits.train, splits.validation])
    pool = np.sort(pool[dataset.observed[pool]])
    return dataset.sensitive[pool], dataset.unfair[pool]


def psf_nn_filter(scores: np.ndarray, s_users: np.ndarray, ref_s: np.ndarray,
                  ref_unfair: sp.csr_matrix, n_neighbors: int = 50, k_top: int = 100) -> np.ndarray:
    """Drop each user's ``k_top`` most frequent unfair items among their nearest neighbours.

    Neighbours are the ``n_neighbors`` reference users with the highest
    cosine similarity of sensitive features; frequency ties go to the lower
    item index.
    """
    if ref_s.shape[0] < 1:
        raise ValueError("need at least one reference user")
    scores = np.array(scores, dtype=float, copy=True)
    s_users = np.atleast_2d(s_users)

    def unit(a):
        n = np.linalg.norm(a, axis=1, keepdims=True)
        return a / np.where(n > 0, n, 1.0)

    sim = unit(s_users) @ unit(ref_s).T
    n_nb = min(n_neighbors, ref_s.shape[0])
    ref_unfair = sp.csr_matrix(ref_unfair)
    for u in range(scores.shape[0]):
        nb = np.argsort(-sim[u], kind="stable")[:n_nb]
        freq = np.asarray(ref_unfair[nb].sum(axis=0)).ravel()
        cand = np.flatnonzero(freq > 0)
        if len(cand) == 0:
            continue
        cand = cand[np.argsort(-freq[cand], kind="stable")][:k_top]
        scores[u, cand] = -np.inf
    return scores


def evaluate(params: ModelParams, dataset, splits, cfg: MetricConfig | None = None,
             users=None, meta: dict | None = None) -> MetricsReport:
    """Test-set metrics (or any user subset), scoring only previously unseen items."""
    users = splits.test if users is None else np.asarray(users)
    scores = predict_scores(params, dataset, splits.visible, users, splits)
    meta = {"model": params.kind, **(meta or {})}
    return evaluate_scores(scores, users, splits.holdout, dataset.unfair, cfg, meta)


class _Selector:
    """Tracks the best validation Met-hat across candidate epochs (earliest wins ties)."""

    def __init__(self, dataset, splits, enabled: bool):
        self.dataset, self.splits, self.enabled = dataset, splits, enabled
        self.best_score, self.best, self.best_epoch = -math.inf, None, -1

    def offer(self, params: ModelParams, epoch: int) -> float:
        if not self.enabled or len(self.splits.validation) == 0:
            return float("nan")
        rep = evaluate(params, self.dataset, self.splits, users=self.splits.validation)
        score = rep.met_hat()
        if score > self.best_score:
            self.best_score, self.best, self.best_epoch = score, params.copy(), epoch
        return score

    def result(self, params: ModelParams) -> ModelParams:
        if self.best is None:
            return params
        self.best.curves = params.curves
        self.best.hparams["selected_epoch"] = self.best_epoch
        self.best.hparams["selected_met_hat"] = self.best_score
        return self.best


# ---------------------------------------------------------------------------
# PSF-VAE


def _new_model(kind, dataset, cfg: TrainConfig, **extra) -> ModelParams:
    rng = derive_rng(cfg.seed, kind, "init")
    return core.init_model(kind, dataset.num_items, dataset.k_s, dataset.k_x, cfg.k_f, cfg.k_b,
                           rng, cfg.hidden_mult, **extra)


def _sub(grads: dict, names) -> dict[str, np.ndarray]:
    return core.flat_grads({k: v for k, v in grads.items() if k in names})


def train_psf_vae(dataset, splits, cfg: TrainConfig, kind: str = "psf_vae") -> ModelParams:
    """Two-stage factual fit, then the PS-fair predictor (skipped for the masked variant)."""
    if kind not in PSF_KINDS:
        raise ValueError(f"{kind} is not a PSF-VAE variant")
    params = _new_model(kind, dataset, cfg)
    adv_weight = 0.0 if kind == "psf_vae_nadv" else cfg.adv_weight
    train = np.asarray(splits.train)
    observed_train = train[dataset.observed[train]]
    all_arrays = params.arrays()

    # stage 1: U_b encoder + unfair-item decoder on users with observed unfair items
    opt = AdamState(lr=cfg.lr)
    if len(observed_train):
        n_steps = cfg.epochs_ub * math.ceil(len(observed_train) / cfg.batch_size)
        step = 0
        for epoch in range(cfg.epochs_ub):
            rng = derive_rng(cfg.seed, kind, "ub", epoch)
            parts = []
            for users in _batches(observed_train, cfg.batch_size, rng):
                batch = core.make_batch(dataset, splits.visible, users)
                noise = core.draw_noise(rng, batch, params, cfg.dropout)
                klw = _kl_weight(cfg, step, n_steps)
                loss, grads, aux = _guard(
                    lambda: core.psf_elbo(params, batch, noise, klw, stage="ub"), "ub", step)
                optimizer_step(opt, all_arrays, _sub(grads, ("enc_b", "dec_b")))
                parts.append((loss, aux["nll_b"], aux["kl_b"]))
                step += 1
            _log_curve(params, "ub", epoch, step, parts, ("loss", "nll_b", "kl_b"))

    # stage 2: U_f encoder + rating decoder with the U_b branch frozen
    opt = AdamState(lr=cfg.lr)
    opt_d = AdamState(lr=cfg.lr_disc)
    ub_rows_all = dataset.observed if kind == "psf_vae_nwsl" else None
    selector = _Selector(dataset, splits, cfg.select and kind == "psf_vae_mask")
    n_steps = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        rng = derive_rng(cfg.seed, kind, "joint", epoch)
        parts = []
        for users in _batches(train, cfg.batch_size, rng):
            batch = core.make_batch(dataset, splits.visible, users)
            noise = core.draw_noise(rng, batch, params, cfg.dropout)
            ub_rows = None if ub_rows_all is None else ub_rows_all[users]
            klw = _kl_weight(cfg, step, n_steps)
            loss, grads, aux = _guard(
                lambda: core.psf_elbo(params, batch, noise, klw, ub_rows=ub_rows), "joint", step)
            g = _sub(grads, ("enc_f", "dec_r"))
            disc_loss = pen = 0.0
            if adv_weight > 0:
                disc_loss, g_disc, pen, g_enc = core.adversarial_step(
                    params, batch, noise, aux["u_b"], rows=ub_rows)
                for name, arr in core.flat_grads(g_enc).items():
                    g[name] = g[name] + adv_weight * arr
                optimizer_step(opt_d, all_arrays, core.flat_grads(g_disc))
            optimizer_step(opt, all_arrays, g)
            parts.append((loss, aux["nll_r"], aux["nll_b"], aux["kl_f"], aux["kl_b"], disc_loss, pen))
            step += 1
        _log_curve(params, "joint", epoch, step, parts,
                   ("loss", "nll_r", "nll_b", "kl_f", "kl_b", "disc_loss", "enc_penalty"))
        selector.offer(params, epoch)

    if kind == "psf_vae_mask":
        return selector.result(params)
    return fit_psf_predictor(params, dataset, splits, cfg)


def posterior_mean_f(params: ModelParams, dataset, visible, users) -> np.ndarray:
    batch = core.make_batch(dataset, visible, users)
    return core.encode(params, batch).mu_f


def fit_psf_predictor(params: ModelParams, dataset, splits, cfg: TrainConfig) -> ModelParams:
    """Fit MLP_psf on posterior-mean u_f of training users, encoders frozen."""
    train = np.asarray(splits.train)
    u_f = posterior_mean_f(params, dataset, splits.visible, train)
    r = splits.visible[train].toarray()
    arrays = params.arrays(["psf"])
    opt = AdamState(lr=cfg.lr)
    selector = _Selector(dataset, splits, cfg.select)
    step = 0
    for epoch in range(cfg.epochs_psf):
        rng = derive_rng(cfg.seed, params.kind, "psf", epoch)
        parts = []
        for idx in _batches(np.arange(len(train)), cfg.batch_size, rng):
            loss, grads = _guard(lambda: core.predictor_loss(params, u_f[idx], r[idx]), "psf", step)
            optimizer_step(opt, arrays, core.flat_grads(grads))
            parts.append((loss,))
            step += 1
        _log_curve(params, "psf", epoch, step, parts, ("loss",))
        selector.offer(params, epoch)
    return selector.result(params)


# ---------------------------------------------------------------------------
# baselines


def _floor2(v: float) -> float:
    return math.floor(v * 100.0 + 1e-9) / 100.0


def mmd_groups(dataset, cfg: TrainConfig, users) -> tuple[int, np.ndarray]:
    """Binarise one randomly chosen sensitive dimension at its training median."""
    dim = int(derive_rng(cfg.seed, "fair_mmd", "dim").integers(dataset.k_s))
    col = dataset.sensitive[:, dim]
    return dim, col > np.median(col[users])


def train_baseline(kind: str, dataset, splits, cfg: TrainConfig) -> ModelParams:
    """Multi-VAE family: multi_vae, cond_vae, cond_vae_es, fair_adv, fair_mmd, psf_vae_nlat, psf_nn."""
    if kind == "cond_vae_es" and cfg.es_target < 0:
        raise DependencyError("cond_vae_es needs the PSF-VAE validation N@100 (es_target)")
    extra = {}
    if kind == "psf_nn":
        extra = dict(n_neighbors=cfg.n_neighbors, k_top=cfg.k_top)
    params = _new_model(kind, dataset, cfg, **extra)
    arrays = params.arrays()
    train = np.asarray(splits.train)
    opt = AdamState(lr=cfg.lr)
    opt_a = AdamState(lr=cfg.lr_disc)
    penalty = {"fair_mmd": cfg.mmd_weight, "fair_adv": cfg.adv_weight,
               "psf_vae_nlat": cfg.adv_weight}.get(kind, 0.0)
    groups_all = mmd_groups(dataset, cfg, train)[1] if kind == "fair_mmd" else None
    selector = _Selector(dataset, splits, cfg.select and kind != "cond_vae_es")
    n_steps = cfg.epochs * math.ceil(len(train) / cfg.batch_size)
    es_hist = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = derive_rng(cfg.seed, kind, "train", epoch)
        parts = []
        for users in _batches(train, cfg.batch_size, rng):
            batch = core.make_batch(dataset, splits.visible, users)
            noise = core.draw_noise(rng, batch, params, cfg.dropout)
            klw = _kl_weight(cfg, step, n_steps)
            groups = None
            if kind == "fair_mmd":
                groups = groups_all[users]
                noise.bandwidth = core.median_bandwidth(_sample_z(params, batch, noise))
            adv_loss = 0.0
            if kind in ("fair_adv", "psf_vae_nlat") and penalty:
                z = _sample_z(params, batch, noise)
                adv_loss, g_adv = core.adversary_loss(params, z, batch)
                optimizer_step(opt_a, arrays, core.flat_grads(g_adv))
            loss, grads, aux = _guard(
                lambda: core.vae_loss(params, batch, noise, klw, penalty, groups), kind, step)
            optimizer_step(opt, arrays, core.flat_grads(grads))
            parts.append((loss, aux["nll_r"], aux["kl"], aux["penalty"], adv_loss))
            step += 1
        _log_curve(params, "train", epoch, step, parts, ("loss", "nll_r", "kl", "penalty", "adv_loss"))
        if kind == "cond_vae_es":
            rep = evaluate(params, dataset, splits, users=splits.validation)
            es_hist.append((epoch, rep.mean_ndcg, params.copy()))
            if _floor2(rep.mean_ndcg) >= _floor2(cfg.es_target):
                params.hparams["stopped_epoch"] = epoch
                return params
        else:
            selector.offer(params, epoch)
    if kind == "cond_vae_es":
        # target never reached: keep the epoch whose rounded N@100 is closest
        target = _floor2(cfg.es_target)
        epoch, _, best = min(es_hist, key=lambda e: (abs(_floor2(e[1]) - target), e[0]))
        best.curves = params.curves
        best.hparams["stopped_epoch"] = epoch
        return best
    return selector.result(params)


def _sample_z(params: ModelParams, batch, noise) -> np.ndarray:
    h = core.normalize_input(batch.r, noise.keep)
    if params.kind in ("cond_vae", "cond_vae_es", "psf_nn"):
        h = np.hstack([h, batch.s])
    mu, lv = np.split(nx.forward(params.nets["enc"], h), 2, axis=1)
    return nx.reparameterized_sample(mu, lv, noise.eps["u"])


def train_model(kind: str, dataset, splits, cfg: TrainConfig) -> ModelParams:
    if kind in PSF_KINDS:
        return train_psf_vae(dataset, splits, cfg, kind)
    return train_baseline(kind, dataset, splits, cfg)


def _log_curve(params: ModelParams, stage: str, epoch: int, step: int, parts, names):
    mean = np.mean(np.asarray(parts, dtype=float), axis=0) if parts else np.zeros(len(names))
    row = {"stage": stage, "epoch": epoch, "step": step}
    row.update({n: float(v) for n, v in zip(names, mean)})
    params.curves.append(row)
    log.debug("%s %s epoch %d: %s", params.kind, stage, epoch, row)
