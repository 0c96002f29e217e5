"""Path-specific bias of rating predictors, by Monte Carlo and in closed form.

The linear-Gaussian structural model used throughout::

    s   ~ N(0, I)                          (population of queries)
    u_f = W_f s + V x + sigma_f * e_f
    u_b = W_b s       + sigma_b * e_b
    r   = A u_f + B u_b + sigma_r * e_r

A nested counterfactual feeds the fair path with one value of ``s`` and the
unfair path with another. PS-bias is the expected rating under
(fair=s, unfair=s') minus the factual expectation under (s, s). Both terms
reuse the same noise draws, so s' = s gives exactly zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import NumericalError, derive_rng

# Verdicts compare against max(3 SE, this floor); with common random numbers
# linear predictors have SE exactly 0 and only rounding error remains.
FLOAT_FLOOR = 1e-9
FAMILIES = ("naive", "total_fair", "psf")

Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DependencyError(RuntimeError):
    pass


@dataclass
class LinearScm:
    W_f: np.ndarray      # K_f x K_s
    V: np.ndarray        # K_f x K_x
    W_b: np.ndarray      # K_b x K_s
    A: np.ndarray        # J x K_f
    B: np.ndarray        # J x K_b
    sigma_f: float = 1.0
    sigma_b: float = 1.0
    sigma_r: float = 1.0

    def __post_init__(self):
        self.W_f, self.V, self.W_b, self.A, self.B = (
            np.atleast_2d(np.asarray(m, dtype=float)) for m in (self.W_f, self.V, self.W_b, self.A, self.B))
        if self.V.size == 0:
            self.V = self.V.reshape(self.W_f.shape[0], 0)
        k_f, k_s = self.W_f.shape
        if self.V.shape[0] != k_f or self.W_b.shape[1] != k_s:
            raise ValueError("W_f, V and W_b do not chain")
        if self.A.shape[1] != k_f or self.B.shape[1] != self.W_b.shape[0] or \
                self.A.shape[0] != self.B.shape[0]:
            raise ValueError("A and B do not match the latent sizes")
        if min(self.sigma_f, self.sigma_b, self.sigma_r) < 0:
            raise ValueError("noise scales must be non-negative")

    @property
    def k_s(self) -> int:
        return self.W_f.shape[1]

    @property
    def k_x(self) -> int:
        return self.V.shape[1]

    @property
    def k_f(self) -> int:
        return self.W_f.shape[0]

    @property
    def k_b(self) -> int:
        return self.W_b.shape[0]

    @property
    def num_items(self) -> int:
        return self.A.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, k_s=2, k_x=1, k_f=3, k_b=2, num_items=4,
               scale: float = 1.0) -> "LinearScm":
        g = lambda *shape: rng.standard_normal(shape) * scale / math.sqrt(shape[-1] or 1)
        return cls(g(k_f, k_s), g(k_f, k_x), g(k_b, k_s), g(num_items, k_f), g(num_items, k_b),
                   *rng.uniform(0.3, 1.0, size=3))

    def draw_noise(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        return {"f": rng.standard_normal((n, self.k_f)), "b": rng.standard_normal((n, self.k_b)),
                "xi_f": rng.standard_normal((n, self.k_s)), "xi_b": rng.standard_normal((n, self.k_s))}

    def latents(self, fair_s, unfair_s, x, noise) -> tuple[np.ndarray, np.ndarray]:
        u_f = self.W_f @ fair_s + self.V @ x + self.sigma_f * noise["f"]
        u_b = self.W_b @ unfair_s + self.sigma_b * noise["b"]
        return u_f, u_b

    def mean_rating(self, u_f: np.ndarray, u_b: np.ndarray) -> np.ndarray:
        """The structural expected rating, i.e. the naive predictor."""
        return u_f @ self.A.T + u_b @ self.B.T

    def psf_predictor(self) -> Predictor:
        """Best predictor from u_f alone under the population: A u_f + B E[u_b | u_f]."""
        cov_ff = (self.W_f @ self.W_f.T + self.V @ self.V.T
                  + self.sigma_f ** 2 * np.eye(self.k_f))
        cov_bf = self.W_b @ self.W_f.T
        proj = np.linalg.solve(cov_ff, cov_bf.T).T          # K_b x K_f
        eff = self.A + self.B @ proj
        return lambda u_f, u_b: u_f @ eff.T

    def total_fair(self) -> "TotalFairScm":
        return TotalFairScm(self)


@dataclass
class TotalFairScm:
    """Latent priors with the dependence on S integrated out (S drawn from its population)."""
    base: LinearScm

    def __getattr__(self, name):
        return getattr(self.base, name)

    def draw_noise(self, rng, n):
        return self.base.draw_noise(rng, n)

    def latents(self, fair_s, unfair_s, x, noise):
        b = self.base
        u_f = noise["xi_f"] @ b.W_f.T + b.V @ x + b.sigma_f * noise["f"]
        u_b = noise["xi_b"] @ b.W_b.T + b.sigma_b * noise["b"]
        return u_f, u_b

    def mean_rating(self, u_f, u_b):
        return self.base.mean_rating(u_f, u_b)


@dataclass
class PsBiasQuery:
    x: np.ndarray
    s_factual: np.ndarray
    s_counterfactual: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.s_factual = np.atleast_1d(np.asarray(self.s_factual, dtype=float))
        self.s_counterfactual = np.atleast_1d(np.asarray(self.s_counterfactual, dtype=float))
        for a in (self.x, self.s_factual, self.s_counterfactual):
            if not np.all(np.isfinite(a)):
                raise ValueError("query values must be finite")

    def swapped(self) -> "PsBiasQuery":
        return PsBiasQuery(self.x, self.s_counterfactual, self.s_factual)


@dataclass
class PathAssignment:
    fair_path_s: np.ndarray
    unfair_path_s: np.ndarray


@dataclass
class PsBiasEstimate:
    bias: np.ndarray         # per item
    stderr: np.ndarray       # per item Monte-Carlo standard error
    n_samples: int
    l2_stderr: float = 0.0   # delta-method SE of the L2 norm

    def __post_init__(self):
        if np.any(self.stderr < 0):
            raise ValueError("standard errors must be non-negative")

    @property
    def l2(self) -> float:
        return float(np.linalg.norm(self.bias))

    @property
    def linf(self) -> float:
        return float(np.abs(self.bias).max()) if self.bias.size else 0.0


def random_queries(rng: np.random.Generator, k_s: int, k_x: int, n: int) -> list[PsBiasQuery]:
    return [PsBiasQuery(rng.standard_normal(k_x), rng.standard_normal(k_s), rng.standard_normal(k_s))
            for _ in range(n)]


def _noise_rng(seed: int):
    return derive_rng(seed, "psbias", "noise")


def _checked(out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericalError("predictor returned non-finite values")
    return out


def npo_expectation(predictor: Predictor, scm, query: PsBiasQuery, path: PathAssignment,
                    n_mc: int = 100_000, seed: int = 0, chunk: int = 10_000):
    """Mean predicted rating with u_f fed by ``path.fair_path_s`` and u_b by ``path.unfair_path_s``.

    Returns ``(mean, stderr)`` per item.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    rng = _noise_rng(seed)
    acc = _Moments()
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        noise = scm.draw_noise(rng, n)
        acc.add(_checked(predictor(*scm.latents(path.fair_path_s, path.unfair_path_s, query.x,
                                                noise))))
        done += n
    return acc.mean, acc.stderr()


def ps_bias(predictor: Predictor, scm, query: PsBiasQuery, n_mc: int = 100_000,
            seed: int = 0, chunk: int = 10_000) -> PsBiasEstimate:
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    rng = _noise_rng(seed)
    s, s2 = query.s_factual, query.s_counterfactual
    acc = _Moments()
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        noise = scm.draw_noise(rng, n)
        cf = _checked(predictor(*scm.latents(s, s2, query.x, noise)))
        fact = _checked(predictor(*scm.latents(s, s, query.x, noise)))
        acc.add(cf - fact, cross=True)
        done += n
    return acc.estimate()


class _Moments:
    """Running mean and centred second moments, merged chunk by chunk."""

    def __init__(self):
        self.n = 0
        self.mean = self.m2 = self.cross = None

    def add(self, d: np.ndarray, cross: bool = False):
        n_b = d.shape[0]
        mean_b = d.mean(0)
        c = d - mean_b
        m2_b = (c * c).sum(0)
        cross_b = c.T @ c if cross else None
        if self.n == 0:
            self.n, self.mean, self.m2, self.cross = n_b, mean_b, m2_b, cross_b
            return
        n = self.n + n_b
        delta = mean_b - self.mean
        self.m2 = self.m2 + m2_b + delta * delta * self.n * n_b / n
        if cross:
            self.cross = self.cross + cross_b + np.outer(delta, delta) * self.n * n_b / n
        self.mean = self.mean + delta * n_b / n
        self.n = n

    def stderr(self) -> np.ndarray:
        return np.sqrt(self.m2 / (self.n - 1) / self.n)

    def estimate(self) -> PsBiasEstimate:
        bias, n = self.mean, self.n
        norm = np.linalg.norm(bias)
        l2_se = 0.0
        if norm > 0:
            u = bias / norm
            l2_se = float(math.sqrt(max(u @ self.cross @ u, 0.0) / (n - 1) / n))
        return PsBiasEstimate(bias, self.stderr(), n, l2_se)


def closed_form_psbias(scm: LinearScm, query: PsBiasQuery) -> np.ndarray:
    """B W_b (s' - s): exact PS-bias of the naive predictor on a linear model."""
    return scm.B @ (scm.W_b @ (query.s_counterfactual - query.s_factual))


def closed_form_factual(scm: LinearScm, query: PsBiasQuery, family: str = "naive") -> np.ndarray:
    """Factual expected rating of a family's induced model."""
    x, s = query.x, query.s_factual
    if family == "total_fair":
        return scm.A @ (scm.V @ x)
    return scm.A @ (scm.W_f @ s + scm.V @ x) + scm.B @ (scm.W_b @ s)


def direct_npo_simulation(scm: LinearScm, query: PsBiasQuery, path: PathAssignment,
                          n_mc: int = 100_000, seed: int = 0):
    """Simulate units of the intervened graph and average their sampled ratings.

    Each unit draws its own exogenous noise; S is set to ``fair_path_s`` on the
    edge into U_f and to ``unfair_path_s`` on the edge into U_b, and the rating
    is sampled with its own noise. Independent of ``npo_expectation``'s streams.
    """
    rng = derive_rng(seed, "psbias", "direct")
    e_f = rng.standard_normal((n_mc, scm.k_f))
    e_b = rng.standard_normal((n_mc, scm.k_b))
    e_r = rng.standard_normal((n_mc, scm.num_items))
    u_f = scm.W_f @ path.fair_path_s + scm.V @ query.x + scm.sigma_f * e_f
    u_b = scm.W_b @ path.unfair_path_s + scm.sigma_b * e_b
    r = u_f @ scm.A.T + u_b @ scm.B.T + scm.sigma_r * e_r
    return r.mean(axis=0), r.std(axis=0, ddof=1) / math.sqrt(n_mc)


# ---------------------------------------------------------------------------
# audits


@dataclass
class AuditRow:
    family: str
    query_id: int
    estimate: PsBiasEstimate
    expected: np.ndarray
    passed: bool
    detectable: bool          # L2 bias more than 5 SE (and the float floor) away from zero
    factual_gap: float = 0.0  # L2 distance of the factual expectation from the naive one


def tolerance(stderr: np.ndarray, expected: np.ndarray, k_se: float = 3.0) -> np.ndarray:
    return np.maximum(k_se * stderr, FLOAT_FLOOR * (1.0 + np.abs(expected)))


@dataclass
class AuditReport:
    rows: list[AuditRow] = field(default_factory=list)
    k_se: float = 3.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def summary(self) -> dict:
        out = {}
        for fam in dict.fromkeys(r.family for r in self.rows):
            rows = [r for r in self.rows if r.family == fam]
            out[fam] = {"queries": len(rows), "passed": sum(r.passed for r in rows),
                        "max_l2": max(r.estimate.l2 for r in rows),
                        "max_stderr": max(float(r.estimate.stderr.max()) for r in rows)}
        return out

    def write(self, path, config_hash: str = "") -> Path:
        lines = [f"# config_hash={config_hash}"] if config_hash else []
        lines.append("family,query,item,bias,stderr,expected,verdict")
        for r in self.rows:
            tol = tolerance(r.estimate.stderr, r.expected, self.k_se)
            for j, (b, se, e, t) in enumerate(zip(r.estimate.bias, r.estimate.stderr,
                                                  r.expected, tol)):
                verdict = "pass" if abs(b - e) <= t else "fail"
                lines.append(f"{r.family},{r.query_id},{j},{float(b)!r},{float(se)!r},{float(e)!r},{verdict}")
        for fam, s in self.summary().items():
            lines.append(f"# summary {fam} queries={s['queries']} passed={s['passed']} "
                         f"max_l2={s['max_l2']!r} max_stderr={s['max_stderr']!r}")
        lines.append(f"# verdict {'pass' if self.passed else 'fail'} (tolerance {self.k_se:g} SE)")
        path = Path(path)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        return path


def family_model(family: str, scm: LinearScm):
    """(latent sampler, predictor) induced by a model family on ``scm``."""
    if family == "naive":
        return scm, scm.mean_rating
    if family == "total_fair":
        return scm.total_fair(), scm.mean_rating
    if family == "psf":
        return scm, scm.psf_predictor()
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def audit_model_family(family: str, scm: LinearScm, queries: list[PsBiasQuery],
                       n_mc: int = 100_000, k_se: float = 3.0, seed: int = 0) -> AuditReport:
    if not queries:
        raise ValueError("no queries to audit")
    sampler, predictor = family_model(family, scm)
    report = AuditReport(k_se=k_se)
    for qi, q in enumerate(queries):
        est = ps_bias(predictor, sampler, q, n_mc, seed + qi)
        expected = closed_form_psbias(scm, q) if family == "naive" else np.zeros(scm.num_items)
        ok = bool(np.all(np.abs(est.bias - expected) <= tolerance(est.stderr, expected, k_se)))
        detectable = est.l2 > max(5.0 * est.l2_stderr, FLOAT_FLOOR)
        gap = float(np.linalg.norm(closed_form_factual(scm, q, family)
                                   - closed_form_factual(scm, q, "naive")))
        report.rows.append(AuditRow(family, qi, est, expected, ok, detectable, gap))
    return report


def identification_check(scm: LinearScm, query: PsBiasQuery, n_mc: int = 100_000,
                         seed: int = 0, k_se: float = 3.0):
    """Direct simulation of the nested counterfactual vs the factorized estimator.

    Returns ``(passed, direct_mean, factorized_mean, combined_se)``.
    """
    path = PathAssignment(query.s_factual, query.s_counterfactual)
    d_mean, d_se = direct_npo_simulation(scm, query, path, n_mc, seed)
    f_mean, f_se = npo_expectation(scm.mean_rating, scm, query, path, n_mc, seed)
    se = np.sqrt(d_se ** 2 + f_se ** 2)
    ok = bool(np.all(np.abs(d_mean - f_mean) <= tolerance(se, f_mean, k_se)))
    return ok, d_mean, f_mean, se


# ---------------------------------------------------------------------------
# trained models on the simulator


@dataclass
class SimQuery:
    s_factual: np.ndarray
    s_counterfactual: np.ndarray


class _SimSampler:
    """Latents given sensitive features, drawn from the simulator's structural equations.

    The confounder is conditioned on its principal-component projection; each
    path gets its own residual draw, matching the factorized estimator.
    """

    def __init__(self, truth):
        self.t = truth
        self.k_f = truth.c.shape[1]
        self.k_b = truth.u_b.shape[1]
        p = truth.pca_components
        self.resid = np.eye(self.k_f) - p @ p.T

    def draw_noise(self, rng, n):
        return {k: rng.standard_normal((n, d)) for k, d in
                (("zf", self.k_f), ("zb", self.k_f), ("f", self.k_f), ("b", self.k_b))}

    def latents(self, fair_s, unfair_s, x, noise):
        t = self.t
        c_f = t.pca_mean + t.pca_components @ fair_s + noise["zf"] @ self.resid
        c_b = t.pca_mean + t.pca_components @ unfair_s + noise["zb"] @ self.resid
        lf, lb = t.lambda_f, t.lambda_b
        u_f = lf * c_f + math.sqrt(1 - lf * lf) * noise["f"]
        u_b = lb * c_b[:, t.redim] + math.sqrt(1 - lb * lb) * noise["b"]
        return u_f, u_b


def audit_trained_model(params, truth, queries: list[SimQuery], n_mc: int = 100_000,
                        scorer: str = "psf", seed: int = 0, k_se: float = 3.0) -> AuditReport:
    """PS-bias of a trained model's scores, with structural u_f / u_b fed in directly.

    ``scorer`` = "psf" uses the PS-fair predictor (a function of u_f only);
    "naive" uses the factual rating decoder on [u_f || u_b].
    """
    if truth is None:
        raise DependencyError("auditing a trained model needs the simulator ground truth")
    from .models import core
    if scorer == "psf":
        predictor = lambda u_f, u_b: core.psf_scores_from_latent(params, u_f, u_b)
    elif scorer == "naive":
        predictor = lambda u_f, u_b: core.naive_scores_from_latent(params, u_f, u_b)
    else:
        raise ValueError("scorer must be 'psf' or 'naive'")
    if params.k_f != truth.u_f.shape[1] or params.k_b != truth.u_b.shape[1]:
        raise ValueError("model latent sizes differ from the simulator's")
    sampler = _SimSampler(truth)
    report = AuditReport(k_se=k_se)
    for qi, q in enumerate(queries):
        est = ps_bias(predictor, sampler, PsBiasQuery(np.zeros(0), q.s_factual, q.s_counterfactual),
                      n_mc, seed + qi)
        expected = np.zeros_like(est.bias)
        ok = bool(np.all(np.abs(est.bias) <= tolerance(est.stderr, expected, k_se)))
        detectable = est.l2 > max(5.0 * est.l2_stderr, FLOAT_FLOOR)
        report.rows.append(AuditRow(scorer, qi, est, expected, ok, detectable))
    return report


def sim_queries(dataset, users, rng: np.random.Generator) -> list[SimQuery]:
    """Factual s of the given users paired with the s of a random other user."""
    s = dataset.sensitive
    partners = rng.permutation(len(s))[:len(users)]
    return [SimQuery(s[u], s[p]) for u, p in zip(users, partners)]
