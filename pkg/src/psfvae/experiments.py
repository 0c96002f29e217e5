"""Desk-scale experiment protocols and the ordering checks applied to their results."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evalharness import seed_summary
from .models.train import TrainConfig, evaluate, train_model
from .simgen import SimConfig, prepare, simulate_dataset

log = logging.getLogger(__name__)

TABLE_MODELS = ("multi_vae", "cond_vae", "cond_vae_es", "fair_adv", "fair_mmd", "psf_nn", "psf_vae")
ABLATION_MODELS = ("psf_vae", "psf_vae_nwsl", "psf_vae_nadv", "psf_vae_mask", "psf_vae_nlat")
METRICS = ("R@20", "N@100", "HiR@10")


@dataclass
class Results:
    """metric values per (setting, seed); a setting is a model kind or a swept value."""
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def add(self, setting, seed: int, summary: dict):
        self.values.setdefault(setting, {})[seed] = {m: float(summary[m]) for m in METRICS}

    def stats(self, setting, metric: str) -> tuple[float, float]:
        return seed_summary([v[metric] for v in self.values[setting].values()])

    def table(self) -> list[tuple]:
        rows = []
        for setting in self.values:
            row = [setting]
            for m in METRICS:
                row.extend(self.stats(setting, m))
            rows.append(tuple(row))
        return rows


def run_seed(kinds, seed: int, sim: SimConfig | None = None, train: TrainConfig | None = None,
             c_r: float | None = None, results: Results | None = None,
             keep: dict | None = None) -> Results:
    """Simulate, split and mask once for ``seed``; train and test every kind on it.

    ``keep``, if given, collects (kind, seed) -> (model, dataset, splits).
    """
    sim = replace(sim or SimConfig(), seed=seed)
    train = replace(train or TrainConfig(), seed=seed)
    results = results or Results()
    data, _ = simulate_dataset(sim)
    ds, splits = prepare(data, sim.c_r if c_r is None else c_r, seed)
    es_target = None
    for kind in kinds:
        t0 = time.perf_counter()
        cfg = train
        if kind == "cond_vae_es":
            if es_target is None:
                ref = train_model("psf_vae", ds, splits, train)
                es_target = evaluate(ref, ds, splits, users=splits.validation).mean_ndcg
            cfg = replace(train, es_target=es_target)
        model = train_model(kind, ds, splits, cfg)
        if kind == "psf_vae":
            es_target = evaluate(model, ds, splits, users=splits.validation).mean_ndcg
        summary = evaluate(model, ds, splits).summary()
        results.add(kind, seed, summary)
        if keep is not None:
            keep[kind, seed] = (model, ds, splits)
        results.seconds += time.perf_counter() - t0
        log.info("seed %d %-13s R@20 %.4f N@100 %.4f HiR@10 %.4f (%.1fs)", seed, kind,
                 summary["R@20"], summary["N@100"], summary["HiR@10"], time.perf_counter() - t0)
    return results


def run_models(kinds, seeds, sim=None, train=None, c_r=None, keep=None) -> Results:
    # psf_vae first so cond_vae_es can reuse its validation N@100
    kinds = sorted(kinds, key=lambda k: k != "psf_vae")
    res = Results()
    for seed in seeds:
        run_seed(kinds, seed, sim, train, c_r, res, keep)
    return res


def run_cr_sweep(values, seeds, sim=None, train=None, kind: str = "psf_vae") -> Results:
    res = Results()
    for seed in seeds:
        for c_r in values:
            one = run_seed([kind], seed, sim, train, c_r)
            res.add(c_r, seed, one.values[kind][seed])
            res.seconds += one.seconds
    return res


# ---------------------------------------------------------------------------
# ordering checks


def pooled_sd(sd_a: float, sd_b: float) -> float:
    return math.sqrt((sd_a * sd_a + sd_b * sd_b) / 2.0)


@dataclass
class ChainCheck:
    """Verdict on a chain a >= b >= c ... of seed means."""
    passed: bool
    violations: list          # (left, right, shortfall, pooled sd)

    def describe(self) -> str:
        if not self.violations:
            return "no violations"
        return "; ".join(f"{a}<{b} by {gap:.4f} (pooled SD {sd:.4f})"
                         for a, b, gap, sd in self.violations)


def check_chain(res: Results, order, metric: str, descending: bool = True,
                allowed: int = 1) -> ChainCheck:
    """Adjacent inequalities along ``order``; up to ``allowed`` may fail, each within 1 pooled SD."""
    violations, ok = [], True
    for a, b in zip(order[:-1], order[1:]):
        (ma, sa), (mb, sb) = res.stats(a, metric), res.stats(b, metric)
        gap = (mb - ma) if descending else (ma - mb)
        if gap > 0:
            sd = pooled_sd(sa, sb)
            violations.append((a, b, gap, sd))
            ok = ok and gap <= sd
    return ChainCheck(ok and len(violations) <= allowed, violations)


def check_dominates(res: Results, best, others, metric: str, lower: bool = True,
                    allowed: int = 1) -> ChainCheck:
    """``best`` is at least as good as each of ``others``; same violation allowance."""
    violations, ok = [], True
    mb, sb = res.stats(best, metric)
    for o in others:
        mo, so = res.stats(o, metric)
        gap = (mb - mo) if lower else (mo - mb)
        if gap > 0:
            sd = pooled_sd(sb, so)
            violations.append((o, best, gap, sd) if lower else (best, o, gap, sd))
            ok = ok and gap <= sd
    return ChainCheck(ok and len(violations) <= allowed, violations)


def format_table(res: Results, label: str = "model") -> str:
    lines = [f"{label:>14s} " + " ".join(f"{m:>17s}" for m in METRICS)]
    for row in res.table():
        cells = " ".join(f"{row[1 + 2 * i]:.4f} ± {row[2 + 2 * i]:.4f}" for i in range(3))
        lines.append(f"{str(row[0]):>14s} {cells}")
    return "\n".join(lines)
