"""Dense float64 math, small MLPs with hand-derived backprop, Adam, and a
finite-difference gradient checker.

Matrices are plain ``numpy`` arrays (rows = batch). Every MLP keeps its
weights as ``(fan_in, fan_out)`` arrays so a forward pass is ``x @ W + b``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("tanh", "sigmoid", "softmax", "identity")
PROB_CLAMP = 1e-12


class DimensionError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def derive_rng(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named stream, e.g. ``derive_rng(7, "sim", "user", 42)``.

    The stream name is hashed so that adding new streams never perturbs
    existing ones.
    """
    key = "/".join(str(n) for n in names).encode()
    digest = hashlib.sha256(key).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))


# ---------------------------------------------------------------------------
# activations


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softmax":
        return softmax(z)
    return z


# ---------------------------------------------------------------------------
# MLPs


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r} at layer {k}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k > 0 and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {k}: input size {w.shape[0]} does not chain with "
                    f"previous output {self.weights[k - 1].shape[1]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{k}"] = w
            out[f"{prefix}b{k}"] = b
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], list(self.activations))


def init_mlp(sizes: list[int], activations: list[str], rng: np.random.Generator) -> MlpParams:
    """Xavier-uniform weights, zero biases."""
    if len(sizes) - 1 != len(activations):
        raise DimensionError("need one activation per layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]   # input to each layer
    pre: list[np.ndarray]      # pre-activation of each layer
    out: np.ndarray

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


def forward_cached(params: MlpParams, x: np.ndarray) -> ForwardCache:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    inputs, pre = [], []
    h = x
    for k, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {k}: got input width {h.shape[1]}, expected {w.shape[0]}")
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = _activate(z, act)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activation in layer {k}")
    return ForwardCache(inputs, pre, h)


def forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return forward_cached(params, x).out


def backward(params: MlpParams, cache: ForwardCache, d_logits: np.ndarray):
    """Backprop a gradient w.r.t. the final pre-activation.

    Losses are written against logits (softmax / sigmoid heads fold their
    Jacobian into the loss gradient), so the last activation is skipped here.
    Returns ``(grads, d_input)``.
    """
    grads = params.zeros_like()
    d = d_logits
    n_layers = len(params.weights)
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            act = params.activations[k]
            if act == "tanh":
                d = d * (1.0 - np.tanh(cache.pre[k]) ** 2)
            elif act == "sigmoid":
                s = sigmoid(cache.pre[k])
                d = d * s * (1.0 - s)
            elif act == "softmax":
                p = softmax(cache.pre[k])
                d = p * (d - (d * p).sum(axis=1, keepdims=True))
        grads.weights[k] = cache.inputs[k].T @ d
        grads.biases[k] = d.sum(axis=0)
        d = d @ params.weights[k].T
    return grads, d


def add_grads(a: MlpParams, b: MlpParams) -> MlpParams:
    return MlpParams([x + y for x, y in zip(a.weights, b.weights)],
                     [x + y for x, y in zip(a.biases, b.biases)], list(a.activations))


def scale_grads(a: MlpParams, c: float) -> MlpParams:
    return MlpParams([c * x for x in a.weights], [c * x for x in a.biases], list(a.activations))


# ---------------------------------------------------------------------------
# likelihoods, written against logits. Each returns (per-row loss, d loss / d logits).


def multinomial_nll(logits: np.ndarray, counts: np.ndarray):
    """-sum_j r_j log softmax(z)_j per row; the multinomial coefficient is omitted."""
    logp = log_softmax(logits)
    loss = -(counts * logp).sum(axis=1)
    d = np.exp(logp) * counts.sum(axis=1, keepdims=True) - counts
    return loss, d


def bernoulli_nll(logits: np.ndarray, targets: np.ndarray):
    # log sigmoid computed as -softplus(-z): exact and stable, no clamp needed
    loss = (softplus(logits) - targets * logits).sum(axis=1)
    d = sigmoid(logits) - targets
    return loss, d


def gaussian_nll(pred: np.ndarray, targets: np.ndarray):
    """Unit-variance Gaussian negative log density, constant dropped."""
    diff = pred - targets
    return 0.5 * (diff ** 2).sum(axis=1), diff


_LOSSES = {"multinomial": multinomial_nll, "bernoulli": bernoulli_nll,
           "gaussian_mse": gaussian_nll}


def loss_and_grads(params: MlpParams, inputs: np.ndarray, targets: np.ndarray, loss_kind: str):
    """Batch-mean negative log-likelihood of ``targets`` under the network's head."""
    if loss_kind not in _LOSSES:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if loss_kind == "multinomial" and np.any(targets < 0):
        raise ValueError("multinomial targets must be nonnegative counts")
    if loss_kind == "bernoulli" and not np.all((targets == 0) | (targets == 1)):
        raise ValueError("bernoulli targets must be 0/1")
    cache = forward_cached(params, inputs)
    if targets.shape != cache.out.shape:
        raise DimensionError(f"targets {targets.shape} vs output {cache.out.shape}")
    head = cache.out if loss_kind == "gaussian_mse" else cache.logits
    per_row, d = _LOSSES[loss_kind](head, targets)
    n = targets.shape[0]
    grads, _ = backward(params, cache, d / n)
    loss = float(per_row.mean())
    if not np.isfinite(loss):
        raise NumericalError("non-finite loss")
    return loss, grads


# ---------------------------------------------------------------------------
# Gaussians


def reparameterized_sample(mu, log_var, noise):
    mu, log_var, noise = (np.asarray(a, dtype=float) for a in (mu, log_var, noise))
    if not (mu.shape == log_var.shape == noise.shape):
        raise DimensionError(f"shapes differ: {mu.shape}, {log_var.shape}, {noise.shape}")
    return mu + np.exp(0.5 * log_var) * noise


def reparam_backward(d_z, log_var, noise):
    """Gradients of a reparameterized sample w.r.t. (mu, log_var)."""
    return d_z, d_z * 0.5 * np.exp(0.5 * log_var) * noise


def kl_diag_gaussian(mu_q, log_var_q, mu_p=None, log_var_p=None) -> float:
    """KL(q || p) for diagonal Gaussians, summed over all entries. ``p`` defaults to N(0, I)."""
    mu_q = np.asarray(mu_q, dtype=float)
    log_var_q = np.asarray(log_var_q, dtype=float)
    mu_p = np.zeros_like(mu_q) if mu_p is None else np.asarray(mu_p, dtype=float)
    log_var_p = np.zeros_like(mu_q) if log_var_p is None else np.asarray(log_var_p, dtype=float)
    if not (mu_q.shape == log_var_q.shape == mu_p.shape == log_var_p.shape):
        raise DimensionError("KL arguments must share a shape")
    kl = 0.5 * (log_var_p - log_var_q
                + (np.exp(log_var_q) + (mu_q - mu_p) ** 2) / np.exp(log_var_p) - 1.0)
    return float(max(kl.sum(), 0.0))


def kl_std_normal(mu: np.ndarray, log_var: np.ndarray):
    """Per-row KL(N(mu, exp(log_var)) || N(0, I)) and its gradients."""
    var = np.exp(log_var)
    kl = 0.5 * (var + mu ** 2 - 1.0 - log_var).sum(axis=1)
    return kl, mu, 0.5 * (var - 1.0)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(state: AdamState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One Adam update, applied in place to the arrays in ``params``.

    Names missing from ``grads`` are left untouched (frozen sub-networks).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_name: str | None
    worst_index: tuple | None
    analytic: float
    numeric: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} at "
                f"{self.worst_name}{list(self.worst_index or ())} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}; "
                f"{self.n_checked} entries)")


def finite_diff_check(loss_fn: Callable[[], float], params: dict[str, np.ndarray],
                      grads: dict[str, np.ndarray], eps: float = 1e-5,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``loss_fn``.

    ``loss_fn`` takes no arguments and must read the arrays in ``params``,
    which are perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    worst = (0.0, None, None, 0.0, 0.0)
    n = 0
    for name, g in grads.items():
        p = params[name]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            f_plus = loss_fn()
            p[idx] = orig - eps
            f_minus = loss_fn()
            p[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"non-finite loss while perturbing {name}{list(idx)}")
            num = (f_plus - f_minus) / (2.0 * eps)
            ana = float(g[idx])
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            n += 1
            if rel > worst[0] or worst[1] is None:
                worst = (rel, name, idx, ana, num)
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], worst[4], n, tolerance)
