"""Semi-simulated biased implicit-feedback data, splits, masking and dataset I/O.

Each simulated user gets a confounder ``c``; sensitive features are its
leading principal components, and the fair / bias mediators mix ``c`` with
independent noise. Ratings come from a random softmax decoder over
``[u_f || u_b]``; unfair items from the decoder's ``u_b``-only sub-network.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .numerics import MlpParams, derive_rng, forward, init_mlp

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class DatasetRangeError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    ratings: sp.csr_matrix          # I x J binary
    sensitive: np.ndarray           # I x K_s
    nonsensitive: np.ndarray        # I x K_x (K_x may be 0)
    unfair: sp.csr_matrix           # I x J binary; rows meaningful only where observed
    observed: np.ndarray            # I bool

    def __post_init__(self):
        self.ratings = _as_binary_csr(self.ratings)
        self.unfair = _as_binary_csr(self.unfair)
        self.sensitive = np.asarray(self.sensitive, dtype=float).reshape(self.num_users, -1)
        self.nonsensitive = np.asarray(self.nonsensitive, dtype=float).reshape(self.num_users, -1)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.unfair.shape != self.ratings.shape or self.observed.shape != (self.num_users,):
            raise DatasetFormatError("inconsistent dataset shapes")
        if np.any(self.interaction_counts == 0):
            raise DatasetFormatError("every user needs at least one rating")

    @property
    def num_users(self) -> int:
        return self.ratings.shape[0]

    @property
    def num_items(self) -> int:
        return self.ratings.shape[1]

    @property
    def k_s(self) -> int:
        return self.sensitive.shape[1]

    @property
    def k_x(self) -> int:
        return self.nonsensitive.shape[1]

    @property
    def interaction_counts(self) -> np.ndarray:
        return np.diff(self.ratings.indptr)

    def sparsity(self) -> tuple[float, float]:
        cells = self.num_users * self.num_items
        return 1.0 - self.ratings.nnz / cells, 1.0 - self.unfair.nnz / cells

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for m in (self.ratings, self.unfair):
            h.update(np.asarray(m.shape, dtype="<i8").tobytes())
            h.update(m.indptr.astype("<i8").tobytes())
            h.update(m.indices.astype("<i8").tobytes())
        for a in (self.sensitive, self.nonsensitive):
            h.update(np.asarray(a.shape, dtype="<i8").tobytes())
            h.update(a.astype("<f8").tobytes())
        h.update(self.observed.astype("u1").tobytes())
        return h.hexdigest()[:16]

    def equals(self, other: "Dataset") -> bool:
        return (self.ratings.shape == other.ratings.shape
                and (self.ratings != other.ratings).nnz == 0
                and (self.unfair != other.unfair).nnz == 0
                and np.array_equal(self.sensitive, other.sensitive)
                and np.array_equal(self.nonsensitive, other.nonsensitive)
                and np.array_equal(self.observed, other.observed))


def _as_binary_csr(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.data[:] = 1.0
    m.sort_indices()
    return m


@dataclass
class SimConfig:
    num_users: int = 2000
    num_items: int = 500
    k: int = 32                 # total latent size K = K_f + K_b
    k_b: int = 8
    k_s: int = 24
    lambda_f: float = 0.9
    lambda_b: float = 0.9
    p_r: float = 0.0447
    p_b: float = 0.00224
    c_r: float = 0.3
    decoder_hidden: int = 100
    decoder_scale: float = 4.0   # multiplies the output-layer weights of the random decoder
    # give every item's output weight vector the same norm, so no item is popular a priori
    decoder_equal_norm: bool = True
    decoder_checkpoint: str = ""
    seed: int = 0

    @property
    def k_f(self) -> int:
        return self.k - self.k_b

    def validate(self):
        if self.k_b < 1 or self.k_f < 1:
            raise ValueError("need K_f >= 1 and K_b >= 1")
        if not 1 <= self.k_s <= self.k_f:
            raise ValueError("k_s must lie in [1, K_f]")
        if self.k_b > self.k_f:
            raise ValueError("Redim needs K_b <= K_f")
        for name in ("lambda_f", "lambda_b"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("p_r", "p_b"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0.0 < self.c_r <= 1.0:
            raise ValueError("c_r must lie in (0, 1]")
        if self.num_users < 2 or self.num_items < 2:
            raise ValueError("need at least 2 users and 2 items")
        return self


ML1M_MIRROR = SimConfig(num_users=6000, num_items=3706, k=200, k_b=50, k_s=50,
                        p_r=0.0447, p_b=0.0024, decoder_hidden=600)


@dataclass
class GroundTruth:
    """Everything the simulator drew; enough to replay the structural equations."""
    c: np.ndarray
    eps_f: np.ndarray
    eps_b: np.ndarray
    u_f: np.ndarray
    u_b: np.ndarray
    redim: np.ndarray              # K_b distinct indices into c
    pca_components: np.ndarray     # K_f x K_s, orthonormal columns
    pca_mean: np.ndarray           # K_f
    pca_variances: np.ndarray      # K_s, descending
    decoder: MlpParams
    lambda_f: float
    lambda_b: float
    repaired_users: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def rating_probs(self, u_f: np.ndarray, u_b: np.ndarray) -> np.ndarray:
        return forward(self.decoder, np.hstack([u_f, u_b]))

    def unfair_probs(self, u_b: np.ndarray) -> np.ndarray:
        return forward(bias_subnetwork(self.decoder, u_b.shape[1]), u_b)


def mix(lam: float, signal: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Variance-preserving mixing ``lam * signal + sqrt(1 - lam^2) * noise``."""
    return lam * signal + math.sqrt(1.0 - lam * lam) * noise


def pca_fit(c: np.ndarray, k_s: int):
    """Eigen-decomposition of the sample covariance; components sorted by variance."""
    mean = c.mean(axis=0)
    cov = np.cov(c - mean, rowvar=False).reshape(c.shape[1], c.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k_s]
    comps = vecs[:, order]
    # fix the sign so the largest-magnitude loading is positive
    flip = np.sign(comps[np.abs(comps).argmax(axis=0), np.arange(k_s)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    return comps, mean, vals[order]


def bias_subnetwork(decoder: MlpParams, k_b: int) -> MlpParams:
    """Decoder restricted to its last ``k_b`` inputs (the u_b columns)."""
    sub = decoder.copy()
    sub.weights[0] = sub.weights[0][-k_b:, :].copy()
    return sub


def global_top(scores: np.ndarray, frac: float) -> sp.csr_matrix:
    """Binary matrix marking the top ``frac`` of all entries, ranked jointly across users."""
    n_sel = max(1, int(round(frac * scores.size)))
    flat = scores.ravel()
    idx = np.argsort(-flat, kind="stable")[:n_sel]
    rows, cols = np.unravel_index(idx, scores.shape)
    return sp.csr_matrix((np.ones(n_sel), (rows, cols)), shape=scores.shape)


def make_decoder(cfg: SimConfig) -> MlpParams:
    if cfg.decoder_checkpoint:
        from .models.checkpoint import load_mlp
        dec = load_mlp(cfg.decoder_checkpoint)
        if dec.in_dim != cfg.k or dec.out_dim != cfg.num_items:
            raise ValueError("pretrained decoder shape does not match the config")
        return dec
    rng = derive_rng(cfg.seed, "sim", "decoder")
    dec = init_mlp([cfg.k, cfg.decoder_hidden, cfg.num_items], ["tanh", "softmax"], rng)
    w = dec.weights[1]
    if cfg.decoder_equal_norm:
        norms = np.linalg.norm(w, axis=0)
        w = w / norms * norms.mean()
    dec.weights[1] = w * cfg.decoder_scale
    return dec


def simulate_dataset(cfg: SimConfig) -> tuple[Dataset, GroundTruth]:
    cfg.validate()
    n, k_f, k_b = cfg.num_users, cfg.k_f, cfg.k_b
    rng = derive_rng(cfg.seed, "sim", "latents")
    c = rng.standard_normal((n, k_f))
    eps_f = rng.standard_normal((n, k_f))
    eps_b = rng.standard_normal((n, k_b))
    redim = np.sort(derive_rng(cfg.seed, "sim", "redim").choice(k_f, size=k_b, replace=False))

    comps, mean, variances = pca_fit(c, cfg.k_s)
    s = (c - mean) @ comps
    u_f = mix(cfg.lambda_f, c, eps_f)
    u_b = mix(cfg.lambda_b, c[:, redim], eps_b)

    decoder = make_decoder(cfg)
    probs = forward(decoder, np.hstack([u_f, u_b]))
    ratings = global_top(probs, cfg.p_r).tolil()
    empty = np.flatnonzero(np.asarray(ratings.getnnz(axis=1)) == 0)
    for i in empty:
        ratings[i, int(np.argmax(probs[i]))] = 1.0
    if len(empty):
        log.info("repaired %d users with no ratings (%.2f%%)", len(empty), 100 * len(empty) / n)

    unfair_probs = forward(bias_subnetwork(decoder, k_b), u_b)
    unfair = global_top(unfair_probs, cfg.p_b)

    data = Dataset(ratings.tocsr(), s, np.zeros((n, 0)), unfair, np.ones(n, dtype=bool))
    truth = GroundTruth(c, eps_f, eps_b, u_f, u_b, redim, comps, mean, variances, decoder,
                        cfg.lambda_f, cfg.lambda_b, empty)
    return data, truth


# ---------------------------------------------------------------------------
# splits and masking


@dataclass
class Splits:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    visible: sp.csr_matrix       # model-visible ratings (holdout removed)
    holdout: sp.csr_matrix       # evaluation targets
    no_holdout: np.ndarray       # users with a single rating, flagged

    @property
    def num_users(self) -> int:
        return self.visible.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.train, self.validation, self.test):
            h.update(a.astype("<i8").tobytes())
        h.update(self.holdout.indptr.astype("<i8").tobytes())
        h.update(self.holdout.indices.astype("<i8").tobytes())
        return h.hexdigest()[:16]


def split_dataset(dataset: Dataset, ratios=(0.8, 0.1, 0.1), holdout_frac: float = 0.2,
                  seed: int = 0) -> Splits:
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or abs(ratios.sum() - 1.0) > 1e-9 or np.any(ratios < 0):
        raise ValueError("ratios must be three nonnegative numbers summing to 1")
    if not 0.0 < holdout_frac < 1.0:
        raise ValueError("holdout_frac must lie in (0, 1)")
    n = dataset.num_users
    perm = derive_rng(seed, "split", "users").permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    train, val, test = (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
                        np.sort(perm[n_train + n_val:]))

    rng = derive_rng(seed, "split", "holdout")
    r = dataset.ratings
    vis_rows, vis_cols, ho_rows, ho_cols, single = [], [], [], [], []
    for i in range(n):
        items = r.indices[r.indptr[i]:r.indptr[i + 1]]
        if len(items) < 2:
            single.append(i)
            held = np.zeros(0, dtype=int)
        else:
            n_hold = min(len(items) - 1, math.ceil(holdout_frac * len(items)))
            held = np.sort(rng.choice(items, size=n_hold, replace=False))
        keep = np.setdiff1d(items, held)
        vis_rows.append(np.full(len(keep), i))
        vis_cols.append(keep)
        ho_rows.append(np.full(len(held), i))
        ho_cols.append(held)
    shape = r.shape
    visible = _as_binary_csr(sp.csr_matrix(
        (np.ones(sum(map(len, vis_cols))), (np.concatenate(vis_rows), np.concatenate(vis_cols))),
        shape=shape))
    holdout = _as_binary_csr(sp.csr_matrix(
        (np.ones(sum(map(len, ho_cols))), (np.concatenate(ho_rows), np.concatenate(ho_cols))),
        shape=shape))
    if single:
        log.info("%d users have a single rating and no holdout", len(single))
    return Splits(train, val, test, visible, holdout, np.asarray(single, dtype=int))


def mask_unfair(dataset: Dataset, c_r: float, seed: int, eligible=None) -> Dataset:
    """Hide the unfair items of all but a ``c_r`` fraction of ``eligible`` users.

    ``eligible`` is normally train + validation users; test users keep full
    unfair sets for evaluation.
    """
    if not 0.0 < c_r <= 1.0:
        raise ValueError("c_r must lie in (0, 1]")
    eligible = np.arange(dataset.num_users) if eligible is None else np.sort(np.asarray(eligible))
    n_mask = int(round((1.0 - c_r) * len(eligible)))
    if n_mask == 0:
        return dataset
    masked = np.sort(derive_rng(seed, "mask", "users").choice(eligible, size=n_mask, replace=False))
    observed = dataset.observed.copy()
    observed[masked] = False
    keep = sp.diags(observed.astype(float))
    return replace(dataset, unfair=keep @ dataset.unfair, observed=observed)


def prepare(dataset: Dataset, c_r: float, seed: int, ratios=(0.8, 0.1, 0.1),
            holdout_frac: float = 0.2) -> tuple[Dataset, Splits]:
    splits = split_dataset(dataset, ratios, holdout_frac, seed)
    eligible = np.concatenate([splits.train, splits.validation])
    return mask_unfair(dataset, c_r, seed, eligible), splits


# ---------------------------------------------------------------------------
# disk format


def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = (f"format_version={FORMAT_VERSION}\nnum_users={dataset.num_users}\n"
                f"num_items={dataset.num_items}\nk_s={dataset.k_s}\nk_x={dataset.k_x}\n")
    (path / "manifest.txt").write_text(manifest, encoding="utf-8", newline="\n")
    for name, m in (("ratings.csv", dataset.ratings), ("unfair.csv", dataset.unfair)):
        coo = m.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = ["user,item"] + [f"{u},{j}" for u, j in zip(coo.row[order], coo.col[order])]
        (path / name).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    for name, arr, tag in (("sensitive.csv", dataset.sensitive, "s"),
                           ("nonsensitive.csv", dataset.nonsensitive, "x")):
        header = ",".join(["user"] + [f"{tag}{k + 1}" for k in range(arr.shape[1])])
        lines = [header] + [",".join([str(i)] + [_fmt(v) for v in row]) for i, row in enumerate(arr)]
        (path / name).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    lines = ["user,observed"] + [f"{i},{int(f)}" for i, f in enumerate(dataset.observed)]
    (path / "observed_flags.csv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                             newline="\n")
    return path


def _read_manifest(path: Path) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DatasetFormatError(f"{path.name}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = int(val)
    for key in ("num_users", "num_items", "k_s", "k_x", "format_version"):
        if key not in out:
            raise DatasetFormatError(f"manifest missing {key}")
    if out["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format_version {out['format_version']}")
    return out


def _data_lines(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if lineno == 1 or not line:
                continue
            yield lineno, line.split(",")


def _read_pairs(path: Path, n_users: int, n_items: int) -> sp.csr_matrix:
    rows, cols, seen = [], [], set()
    for lineno, parts in _data_lines(path):
        if len(parts) != 2:
            raise DatasetFormatError(f"{path.name}:{lineno}: expected user,item")
        u, j = int(parts[0]), int(parts[1])
        if not 0 <= u < n_users:
            raise DatasetRangeError(f"{path.name}:{lineno}: user {u} out of range [0, {n_users})")
        if not 0 <= j < n_items:
            raise DatasetRangeError(f"{path.name}:{lineno}: item {j} out of range [0, {n_items})")
        if (u, j) in seen:
            raise DatasetFormatError(f"{path.name}:{lineno}: duplicate pair ({u},{j})")
        seen.add((u, j))
        rows.append(u)
        cols.append(j)
    return sp.csr_matrix((np.ones(len(rows)), (np.asarray(rows, dtype=int),
                                               np.asarray(cols, dtype=int))),
                         shape=(n_users, n_items))


def _read_vectors(path: Path, n_users: int, width: int) -> np.ndarray:
    out = np.zeros((n_users, width))
    seen = np.zeros(n_users, dtype=bool)
    if not path.exists():
        if width == 0:
            return out
        raise DatasetFormatError(f"missing {path.name}")
    for lineno, parts in _data_lines(path):
        if len(parts) != width + 1:
            raise DatasetFormatError(f"{path.name}:{lineno}: expected {width + 1} fields")
        u = int(parts[0])
        if not 0 <= u < n_users:
            raise DatasetRangeError(f"{path.name}:{lineno}: user {u} out of range")
        if seen[u]:
            raise DatasetFormatError(f"{path.name}:{lineno}: duplicate user {u}")
        seen[u] = True
        out[u] = [float(v) for v in parts[1:]]
    if width and not seen.all():
        raise DatasetFormatError(f"{path.name}: missing rows for some users")
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    man = _read_manifest(path / "manifest.txt")
    n, j = man["num_users"], man["num_items"]
    ratings = _read_pairs(path / "ratings.csv", n, j)
    unfair = _read_pairs(path / "unfair.csv", n, j)
    s = _read_vectors(path / "sensitive.csv", n, man["k_s"])
    x = _read_vectors(path / "nonsensitive.csv", n, man["k_x"])
    observed = np.ones(n, dtype=bool)
    flags = path / "observed_flags.csv"
    if flags.exists():
        for lineno, parts in _data_lines(flags):
            u, f = int(parts[0]), parts[1].strip()
            if f not in ("0", "1"):
                raise DatasetFormatError(f"{flags.name}:{lineno}: flag must be 0 or 1")
            if not 0 <= u < n:
                raise DatasetRangeError(f"{flags.name}:{lineno}: user {u} out of range")
            observed[u] = f == "1"
    return Dataset(ratings, s, x, unfair, observed)


_SIDE_MAGIC = "PSFSIM 1"


def save_ground_truth(truth: GroundTruth, path) -> Path:
    """Little-endian float64 arrays behind a text shape header."""
    arrays = {
        "c": truth.c, "eps_f": truth.eps_f, "eps_b": truth.eps_b, "u_f": truth.u_f,
        "u_b": truth.u_b, "redim": truth.redim.astype(float)[None, :],
        "pca_components": truth.pca_components, "pca_mean": truth.pca_mean[None, :],
        "pca_variances": truth.pca_variances[None, :],
        "lambdas": np.array([[truth.lambda_f, truth.lambda_b]]),
        "repaired_users": truth.repaired_users.astype(float)[None, :],
    }
    for k, (w, b) in enumerate(zip(truth.decoder.weights, truth.decoder.biases)):
        arrays[f"dec_W{k}"] = w
        arrays[f"dec_b{k}"] = b[None, :]
    header = [_SIDE_MAGIC, "activations " + " ".join(truth.decoder.activations)]
    header += [f"{name} {a.shape[0]} {a.shape[1]}" for name, a in arrays.items()]
    header.append("END")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def load_ground_truth(path) -> GroundTruth:
    raw = Path(path).read_bytes()
    end = raw.index(b"\nEND\n") + len(b"\nEND\n")
    lines = raw[:end].decode("ascii").split("\n")
    if lines[0] != _SIDE_MAGIC:
        raise DatasetFormatError("not a ground-truth sidecar")
    acts = lines[1].split()[1:]
    arrays, offset = {}, end
    for line in lines[2:]:
        if line in ("END", ""):
            break
        name, r, c = line.split()
        count = int(r) * int(c)
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(
            int(r), int(c)).copy()
        offset += 8 * count
    n_layers = len(acts)
    dec = MlpParams([arrays[f"dec_W{k}"] for k in range(n_layers)],
                    [arrays[f"dec_b{k}"][0] for k in range(n_layers)], acts)
    lam = arrays["lambdas"][0]
    return GroundTruth(arrays["c"], arrays["eps_f"], arrays["eps_b"], arrays["u_f"],
                       arrays["u_b"], arrays["redim"][0].astype(int), arrays["pca_components"],
                       arrays["pca_mean"][0], arrays["pca_variances"][0], dec, float(lam[0]),
                       float(lam[1]), arrays["repaired_users"][0].astype(int))


def save_splits(splits: Splits, path) -> Path:
    """User roles and held-out items; visible ratings are recovered from the dataset."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    role = {}
    for name, users in (("train", splits.train), ("validation", splits.validation),
                        ("test", splits.test)):
        role.update({int(u): name for u in users})
    lines = ["user,role"] + [f"{u},{role[u]}" for u in sorted(role)]
    (path / "assignment.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    coo = splits.holdout.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = ["user,item"] + [f"{u},{j}" for u, j in zip(coo.row[order], coo.col[order])]
    (path / "holdout.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path


def load_splits(path, dataset: Dataset) -> Splits:
    path = Path(path)
    n, j = dataset.num_users, dataset.num_items
    groups = {"train": [], "validation": [], "test": []}
    for lineno, parts in _data_lines(path / "assignment.csv"):
        if len(parts) != 2 or parts[1] not in groups:
            raise DatasetFormatError(f"assignment.csv:{lineno}: expected user,train|validation|test")
        u = int(parts[0])
        if not 0 <= u < n:
            raise DatasetRangeError(f"assignment.csv:{lineno}: user {u} out of range")
        groups[parts[1]].append(u)
    holdout = _as_binary_csr(_read_pairs(path / "holdout.csv", n, j))
    if (holdout - holdout.multiply(dataset.ratings)).nnz:
        raise DatasetFormatError("holdout.csv lists items the user never rated")
    visible = _as_binary_csr(dataset.ratings - holdout)
    single = np.flatnonzero(np.diff(holdout.indptr) == 0)
    single = single[dataset.interaction_counts[single] < 2]
    return Splits(*(np.asarray(sorted(groups[k]), dtype=int) for k in ("train", "validation", "test")),
                  visible, holdout, single)
