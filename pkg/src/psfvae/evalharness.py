"""Top-M ranking metrics (Recall, NDCG, HiR), composite model selection and reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class ConfigurationError(ValueError):
    pass


@dataclass
class MetricConfig:
    recall_cutoff: int = 20
    ndcg_cutoff: int = 100
    hir_cutoff: int = 10
    hir_norm: str = "min"       # "min": |hits| / min(M, |J_b|);  "m": |hits| / M

    def __post_init__(self):
        for name in ("recall_cutoff", "ndcg_cutoff", "hir_cutoff"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.hir_norm not in ("min", "m"):
            raise ConfigurationError("hir_norm must be 'min' or 'm'")


def recall_at_m(ranked, holdout, m: int) -> float:
    holdout = set(holdout)
    if not holdout:
        raise ValueError("empty holdout")
    hits = len(holdout.intersection(list(ranked)[:m]))
    return hits / min(m, len(holdout))


def ndcg_at_m(ranked, holdout, m: int) -> float:
    holdout = set(holdout)
    if not holdout:
        raise ValueError("empty holdout")
    dcg = sum(1.0 / math.log2(rank + 2) for rank, item in enumerate(list(ranked)[:m])
              if item in holdout)
    idcg = sum(1.0 / math.log2(rank + 2) for rank in range(min(m, len(holdout))))
    return dcg / idcg


def hir_at_m(ranked, unfair, m: int, norm: str = "min") -> float:
    unfair = set(unfair)
    if not unfair:
        raise ValueError("empty unfair set")
    hits = len(unfair.intersection(list(ranked)[:m]))
    return hits / (min(m, len(unfair)) if norm == "min" else m)


def rank_items(scores: np.ndarray, m: int) -> np.ndarray:
    """Top-``m`` item indices per row; ties go to the lower item index; -inf never ranked.

    Rows with fewer than ``m`` finite scores are padded with -1.
    """
    scores = np.atleast_2d(scores)
    n, j = scores.shape
    m = min(m, j)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :m]
    finite = np.isfinite(np.take_along_axis(scores, order, axis=1))
    return np.where(finite, order, -1)


def _row_sets(mat: sp.csr_matrix, rows) -> list[np.ndarray]:
    return [mat.indices[mat.indptr[i]:mat.indptr[i + 1]] for i in rows]


def _hits(top: np.ndarray, targets: list[np.ndarray]) -> list[int]:
    return [int(np.isin(t[t >= 0], tg).sum()) for t, tg in zip(top, targets)]


def batch_metrics(scores: np.ndarray, holdout: list[np.ndarray], unfair: list[np.ndarray],
                  cfg: MetricConfig):
    """Per-user Recall, NDCG and HiR arrays; NaN where a user is excluded."""
    n = scores.shape[0]
    m_max = max(cfg.recall_cutoff, cfg.ndcg_cutoff, cfg.hir_cutoff)
    top = rank_items(scores, m_max)
    recall = np.full(n, np.nan)
    ndcg = np.full(n, np.nan)
    hir = np.full(n, np.nan)
    discounts = 1.0 / np.log2(np.arange(2, m_max + 2))
    for u in range(n):
        ho = holdout[u]
        if len(ho):
            t = top[u, :cfg.recall_cutoff]
            recall[u] = np.isin(t[t >= 0], ho).sum() / min(cfg.recall_cutoff, len(ho))
            t = top[u, :cfg.ndcg_cutoff]
            rel = np.isin(t, ho) & (t >= 0)
            idcg = discounts[:min(cfg.ndcg_cutoff, len(ho))].sum()
            ndcg[u] = discounts[:len(t)][rel].sum() / idcg
        ub = unfair[u]
        if len(ub):
            t = top[u, :cfg.hir_cutoff]
            hits = np.isin(t[t >= 0], ub).sum()
            denom = min(cfg.hir_cutoff, len(ub)) if cfg.hir_norm == "min" else cfg.hir_cutoff
            hir[u] = hits / denom
    return recall, ndcg, hir


@dataclass
class MetricsReport:
    users: np.ndarray
    recall: np.ndarray
    ndcg: np.ndarray
    hir: np.ndarray
    cfg: MetricConfig = field(default_factory=MetricConfig)
    meta: dict = field(default_factory=dict)

    @staticmethod
    def _mean(a):
        a = a[~np.isnan(a)]
        return float(a.mean()) if len(a) else float("nan")

    @property
    def mean_recall(self) -> float:
        return self._mean(self.recall)

    @property
    def mean_ndcg(self) -> float:
        return self._mean(self.ndcg)

    @property
    def mean_hir(self) -> float:
        return self._mean(self.hir)

    @property
    def counts(self) -> dict[str, int]:
        return {k: int((~np.isnan(getattr(self, k))).sum()) for k in ("recall", "ndcg", "hir")}

    def met_hat(self) -> float:
        """Population-weighted composite: R + N - HiR on users with unfair items, R + N elsewhere."""
        valid = ~np.isnan(self.recall)
        if not valid.any():
            raise ConfigurationError("no validation users with a holdout")
        base = self.recall[valid] + self.ndcg[valid]
        hir = self.hir[valid]
        has_b = ~np.isnan(hir)
        met_rf = float((base[has_b] - hir[has_b]).mean()) if has_b.any() else 0.0
        met_r = float(base[~has_b].mean()) if (~has_b).any() else 0.0
        n_rf, n_r = int(has_b.sum()), int((~has_b).sum())
        return (n_rf * met_rf + n_r * met_r) / (n_rf + n_r)

    def summary(self) -> dict:
        c = self.cfg
        return {f"R@{c.recall_cutoff}": self.mean_recall, f"N@{c.ndcg_cutoff}": self.mean_ndcg,
                f"HiR@{c.hir_cutoff}": self.mean_hir, "Met_hat": self.met_hat(), **self.counts}

    def write(self, path, config_hash: str = "") -> Path:
        """Per-user rows followed by a ``#``-prefixed summary block."""
        c = self.cfg
        lines = [f"# config_hash={config_hash}"] if config_hash else []
        lines += [f"# {k}={v}" for k, v in sorted(self.meta.items())]
        lines.append(f"user,recall@{c.recall_cutoff},ndcg@{c.ndcg_cutoff},hir@{c.hir_cutoff}")
        for u, r, n, h in zip(self.users, self.recall, self.ndcg, self.hir):
            lines.append(f"{u},{_f(r)},{_f(n)},{_f(h)}")
        lines += [f"# summary {k}={_f(v)}" for k, v in self.summary().items()]
        path = Path(path)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        return path


def _f(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if np.isnan(v) else repr(float(v))


def evaluate_scores(scores: np.ndarray, users, holdout: sp.csr_matrix, unfair: sp.csr_matrix,
                    cfg: MetricConfig | None = None, meta: dict | None = None) -> MetricsReport:
    """Metrics for already-masked score rows (one row per entry of ``users``)."""
    cfg = cfg or MetricConfig()
    users = np.asarray(users)
    recall, ndcg, hir = batch_metrics(scores, _row_sets(holdout, users), _row_sets(unfair, users),
                                      cfg)
    return MetricsReport(users, recall, ndcg, hir, cfg, dict(meta or {}))


def model_select(candidates: list, met_hats: list[float] | None = None):
    """Index of the candidate with the largest Met-hat; ties go to the earliest.

    ``candidates`` are MetricsReports computed on validation users, or plain
    numbers when ``met_hats`` is None and the values are precomputed.
    """
    if not candidates:
        raise ConfigurationError("no candidates to select from")
    if met_hats is None:
        met_hats = [c.met_hat() if isinstance(c, MetricsReport) else float(c) for c in candidates]
    best = 0
    for i, v in enumerate(met_hats):
        if v > met_hats[best]:
            best = i
    return best


def seed_summary(values) -> tuple[float, float]:
    """Mean and sample standard deviation over seeds."""
    a = np.asarray(values, dtype=float)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0
