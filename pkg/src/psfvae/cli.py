"""Command-line pipeline: simulate, split, train, select, evaluate, audit, sweep.

Configuration is a flat ``key=value`` namespace (``sim.*``, ``train.*``,
``metric.*``, ``audit.*``, ``sweep.*`` plus paths and the root ``seed``),
read from ``--config FILE`` and overridden by trailing ``key=value`` args.
Every artifact carries the hash of the resolved configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import psbias, simgen
from .evalharness import ConfigurationError, MetricConfig, model_select, seed_summary
from .models import checkpoint
from .models.core import ALL_KINDS
from .models.train import DependencyError, TrainConfig, evaluate, train_model
from .numerics import derive_rng

log = logging.getLogger("psfvae")

COMMANDS = ("simulate", "split", "train", "select", "evaluate", "audit", "sweep", "print-config")
PRESETS = {"desk": simgen.SimConfig(), "ml1m": simgen.ML1M_MIRROR}


@dataclass
class Key:
    name: str
    type: type
    default: object
    help: str = ""


def _dataclass_keys(prefix: str, cls, skip=("seed",)) -> list[Key]:
    base = cls()
    return [Key(f"{prefix}.{f.name}", type(getattr(base, f.name)), getattr(base, f.name))
            for f in fields(cls) if f.name not in skip]


KEYS: list[Key] = [
    Key("seed", int, 0, "root seed for every random stream"),
    Key("dataset", str, "", "dataset directory (simulate/split output)"),
    Key("truth", str, "", "ground-truth file written by simulate"),
    Key("checkpoint", str, "", "model checkpoint file"),
    Key("checkpoints", str, "", "comma-separated checkpoints for select"),
    Key("out", str, "", "output path"),
    Key("sim.preset", str, "desk", "desk | ml1m; explicit sim.* keys override it"),
    *_dataclass_keys("sim", simgen.SimConfig),
    Key("split.train_frac", float, 0.8),
    Key("split.val_frac", float, 0.1),
    Key("split.test_frac", float, 0.1),
    Key("split.holdout_frac", float, 0.2),
    Key("train.kind", str, "psf_vae", "one of " + ", ".join(ALL_KINDS)),
    *_dataclass_keys("train", TrainConfig),
    *_dataclass_keys("metric", MetricConfig, skip=()),
    Key("audit.mode", str, "model", "model (trained checkpoint) | linear (random linear models)"),
    Key("audit.scorer", str, "psf", "psf | naive scores of the trained model"),
    Key("audit.n_mc", int, 100_000),
    Key("audit.n_queries", int, 10),
    Key("audit.n_instances", int, 10),
    Key("audit.families", str, "naive,total_fair,psf"),
    Key("sweep.param", str, "c_r", "c_r | k_b"),
    Key("sweep.values", str, "0.1,0.3,0.5,0.7,0.9"),
    Key("sweep.seeds", str, "1,2,3,4,5"),
    Key("sweep.kind", str, "psf_vae"),
]
KEY_MAP = {k.name: k for k in KEYS}


class ConfigError(ConfigurationError):
    pass


def _convert(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.type is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError
            return low in ("true", "1")
        return key.type(raw)
    except ValueError:
        raise ConfigError(f"{key.name}: expected {key.type.__name__}, got {raw!r}") from None


def parse_pairs(pairs, source: str = "argument") -> dict:
    out = {}
    for lineno, line in enumerate(pairs, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        name, raw = (p.strip() for p in line.split("=", 1))
        if name not in KEY_MAP:
            raise ConfigError(f"unknown config key {name!r}")
        out[name] = _convert(KEY_MAP[name], raw)
    return out


class RunConfig:
    """Resolved flat configuration with typed accessors for each section."""

    def __init__(self, values: dict | None = None):
        self.values = {k.name: k.default for k in KEYS}
        values = dict(values or {})
        preset = values.get("sim.preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"sim.preset: unknown preset {preset!r}")
        base = PRESETS[preset]
        for f in fields(simgen.SimConfig):
            if f.name != "seed":
                self.values[f"sim.{f.name}"] = getattr(base, f.name)
        self.values.update(values)
        self.validate()

    def __getitem__(self, name):
        return self.values[name]

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def sim(self) -> simgen.SimConfig:
        kw = {k: v for k, v in self.section("sim").items() if k != "preset"}
        return simgen.SimConfig(seed=self["seed"], **kw)

    def train(self) -> TrainConfig:
        kw = {k: v for k, v in self.section("train").items() if k != "kind"}
        return TrainConfig(seed=self["seed"], **kw)

    def metric(self) -> MetricConfig:
        return MetricConfig(**self.section("metric"))

    def ratios(self):
        return (self["split.train_frac"], self["split.val_frac"], self["split.test_frac"])

    def validate(self):
        try:
            self.sim().validate()
            self.train()
            self.metric()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self["train.kind"] not in ALL_KINDS:
            raise ConfigError(f"train.kind: unknown model kind {self['train.kind']!r}")
        if self["sweep.param"] not in ("c_r", "k_b"):
            raise ConfigError("sweep.param must be c_r or k_b")
        if self["audit.mode"] not in ("model", "linear"):
            raise ConfigError("audit.mode must be model or linear")
        if self["audit.n_mc"] < 1000:
            raise ConfigError("audit.n_mc must be at least 1000")
        ratios = np.asarray(self.ratios())
        if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
            raise ConfigError("split fractions must be nonnegative and sum to 1")
        if not 0.0 < self["split.holdout_frac"] < 1.0:
            raise ConfigError("split.holdout_frac must lie in (0, 1)")

    def text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in sorted(self.values))

    def hash(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"config file {path} does not exist")
        values.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_pairs(overrides))
    return RunConfig(values)


# ---------------------------------------------------------------------------
# stamps and inputs


def _stamp(cfg: RunConfig, command: str, extra: dict | None = None) -> str:
    lines = [f"command={command}", f"config_hash={cfg.hash()}", f"seed={cfg['seed']}",
             f"python={platform.python_version()}", f"numpy={np.__version__}",
             f"scipy={scipy.__version__}"]
    lines += [f"{k}={v}" for k, v in sorted((extra or {}).items())]
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


def _need(cfg: RunConfig, key: str) -> Path:
    if not cfg[key]:
        raise DependencyError(f"{key}= is required for this command")
    p = Path(cfg[key])
    if not p.exists():
        raise DependencyError(f"{key}: {p} does not exist")
    return p


def _out(cfg: RunConfig) -> Path:
    if not cfg["out"]:
        raise ConfigError("out= is required for this command")
    return Path(cfg["out"])


def _load_prepared(cfg: RunConfig):
    path = _need(cfg, "dataset")
    data = simgen.load_dataset(path)
    if not (path / "assignment.csv").exists():
        raise DependencyError(f"{path} has no splits; run the split command first")
    return data, simgen.load_splits(path, data)


def _dataset_hash(data, splits) -> str:
    return f"{data.fingerprint()}-{splits.fingerprint()}"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig):
    out = _out(cfg)
    data, truth = simgen.simulate_dataset(cfg.sim())
    simgen.save_dataset(data, out)
    simgen.save_ground_truth(truth, out / "ground_truth.bin")
    sr, sb = data.sparsity()
    _write(out / "stamp.txt", _stamp(cfg, "simulate", {
        "dataset_hash": data.fingerprint(), "sparsity_r": repr(sr), "sparsity_rb": repr(sb)}))
    print(f"simulated {data.num_users} users x {data.num_items} items -> {out}")


def cmd_split(cfg: RunConfig):
    src = _need(cfg, "dataset")
    out = _out(cfg)
    data = simgen.load_dataset(src)
    masked, splits = simgen.prepare(data, cfg["sim.c_r"], cfg["seed"], cfg.ratios(),
                                    cfg["split.holdout_frac"])
    simgen.save_dataset(masked, out)
    simgen.save_splits(splits, out)
    _write(out / "stamp.txt", _stamp(cfg, "split", {"dataset_hash": _dataset_hash(masked, splits)}))
    print(f"split {len(splits.train)}/{len(splits.validation)}/{len(splits.test)} users -> {out}")


def cmd_train(cfg: RunConfig):
    out = _out(cfg)
    data, splits = _load_prepared(cfg)
    model = train_model(cfg["train.kind"], data, splits, cfg.train())
    model.hparams["config_hash"] = cfg.hash()
    model.hparams["dataset_hash"] = _dataset_hash(data, splits)
    model.hparams["seed"] = cfg["seed"]
    checkpoint.save_model(model, out)
    checkpoint.write_curves(model.curves, out.with_name(out.name + ".curves.csv"), cfg.hash())
    print(f"trained {model.kind} -> {out}")


def _checked_model(cfg: RunConfig, path, data, splits):
    model = checkpoint.load_model(path)
    want = _dataset_hash(data, splits)
    got = model.hparams.get("dataset_hash")
    if got != want:
        raise DependencyError(f"{path} was trained on dataset {got}, not {want}")
    return model


def cmd_evaluate(cfg: RunConfig):
    out = _out(cfg)
    data, splits = _load_prepared(cfg)
    model = _checked_model(cfg, _need(cfg, "checkpoint"), data, splits)
    rep = evaluate(model, data, splits, cfg.metric(), users=splits.test,
                   meta={"kind": model.kind, "model_config_hash": model.hparams["config_hash"]})
    rep.write(out, cfg.hash())
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in rep.summary().items()))


def cmd_select(cfg: RunConfig):
    out = _out(cfg)
    data, splits = _load_prepared(cfg)
    paths = [p for p in cfg["checkpoints"].split(",") if p]
    if not paths:
        raise ConfigError("checkpoints= needs at least one checkpoint")
    mets = []
    for p in paths:
        if not Path(p).exists():
            raise DependencyError(f"checkpoint {p} does not exist")
        model = _checked_model(cfg, p, data, splits)
        mets.append(evaluate(model, data, splits, cfg.metric(), users=splits.validation).met_hat())
    best = model_select(mets, mets)
    lines = [f"# config_hash={cfg.hash()}", "checkpoint,met_hat,selected"]
    lines += [f"{p},{m!r},{int(i == best)}" for i, (p, m) in enumerate(zip(paths, mets))]
    _write(out, "\n".join(lines) + "\n")
    print(f"selected {paths[best]} (Met_hat={mets[best]:.4f})")


def cmd_audit(cfg: RunConfig):
    out = _out(cfg)
    n_mc, seed = cfg["audit.n_mc"], cfg["seed"]
    if cfg["audit.mode"] == "linear":
        report = psbias.AuditReport()
        rng = derive_rng(seed, "audit", "linear")
        families = [f for f in cfg["audit.families"].split(",") if f]
        for inst in range(cfg["audit.n_instances"]):
            scm = psbias.LinearScm.random(rng)
            queries = psbias.random_queries(rng, scm.k_s, scm.k_x, cfg["audit.n_queries"])
            for fam in families:
                sub = psbias.audit_model_family(fam, scm, queries, n_mc, seed=seed + 1000 * inst)
                for row in sub.rows:
                    row.query_id = inst * len(queries) + row.query_id
                report.rows.extend(sub.rows)
    else:
        data, splits = _load_prepared(cfg)
        model = _checked_model(cfg, _need(cfg, "checkpoint"), data, splits)
        truth = simgen.load_ground_truth(_need(cfg, "truth"))
        users = splits.test[:cfg["audit.n_queries"]]
        queries = psbias.sim_queries(data, users, derive_rng(seed, "audit", "queries"))
        report = psbias.audit_trained_model(model, truth, queries, n_mc, cfg["audit.scorer"], seed)
    report.write(out, cfg.hash())
    print(f"audit {'pass' if report.passed else 'fail'}: {len(report.rows)} queries -> {out}")


def run_sweep(cfg: RunConfig):
    """Rows of (value, R@20, N@100, HiR@10) seed means and SDs for the swept parameter."""
    param, kind = cfg["sweep.param"], cfg["sweep.kind"]
    values = [float(v) for v in cfg["sweep.values"].split(",") if v]
    seeds = [int(s) for s in cfg["sweep.seeds"].split(",") if s]
    rows = []
    for value in values:
        per_seed = []
        for seed in seeds:
            sim = cfg.sim()
            sim.seed = seed
            c_r = sim.c_r
            tcfg = cfg.train()
            tcfg.seed = seed
            if param == "c_r":
                c_r = value
            else:
                sim.k_b = int(value)
                sim.k_s = min(sim.k_s, sim.k_f)
                sim.validate()
                tcfg.k_f, tcfg.k_b = sim.k_f, sim.k_b
            data, _ = simgen.simulate_dataset(sim)
            masked, splits = simgen.prepare(data, c_r, seed, cfg.ratios(), cfg["split.holdout_frac"])
            model = train_model(kind, masked, splits, tcfg)
            s = evaluate(model, masked, splits, cfg.metric()).summary()
            per_seed.append([s[k] for k in list(s)[:3]])
            log.info("sweep %s=%s seed %d: %s", param, value, seed, per_seed[-1])
        a = np.asarray(per_seed)
        stats = [seed_summary(a[:, j]) for j in range(3)]
        rows.append((value, *[x for st in stats for x in st]))
    return rows


def cmd_sweep(cfg: RunConfig):
    out = _out(cfg)
    rows = run_sweep(cfg)
    m = cfg.metric()
    head = (f"{cfg['sweep.param']},recall@{m.recall_cutoff},recall_sd,ndcg@{m.ndcg_cutoff},ndcg_sd,"
            f"hir@{m.hir_cutoff},hir_sd")
    lines = [f"# config_hash={cfg.hash()}", head] + [",".join(repr(float(v)) for v in r) for r in rows]
    _write(out, "\n".join(lines) + "\n")
    print("\n".join(lines[1:]))


def cmd_print_config(cfg: RunConfig):
    sys.stdout.write(cfg.text())


HANDLERS = {"simulate": cmd_simulate, "split": cmd_split, "train": cmd_train, "select": cmd_select,
            "evaluate": cmd_evaluate, "audit": cmd_audit, "sweep": cmd_sweep,
            "print-config": cmd_print_config}


def _help_epilog() -> str:
    lines = ["config keys (key=value; defaults shown):"]
    for k in KEYS:
        lines.append(f"  {k.name}={_fmt(k.default)}" + (f"   # {k.help}" if k.help else ""))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="psfvae", description=__doc__.splitlines()[0],
                                 epilog=_help_epilog(),
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="flat key=value config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("overrides", nargs="*", metavar="key=value")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides)
        HANDLERS[args.command](cfg)
    except (ConfigurationError, DependencyError, simgen.DatasetFormatError,
            checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
