"""Bit-exact model checkpoints and training-curve logs.

A checkpoint is a short text header followed by little-endian float64
arrays in header order::

    PSFCKPT 1
    kind psf_vae
    hparam k_f 24
    net enc_f tanh,identity
    array enc_f.W0 524 128
    ...
    END
    <raw f8 bytes>
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..numerics import MlpParams
from .core import ModelParams

MAGIC = "PSFCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(kind: str, nets: dict[str, MlpParams], hparams: dict) -> tuple[str, list[np.ndarray]]:
    lines = [f"{MAGIC} {FORMAT_VERSION}", f"kind {kind}"]
    for key in sorted(hparams):
        lines.append(f"hparam {key} {json.dumps(hparams[key], sort_keys=True)}")
    arrays = []
    for name, net in nets.items():
        lines.append(f"net {name} {','.join(net.activations)}")
        for aname, arr in net.arrays(prefix=f"{name}.").items():
            a2 = np.atleast_2d(arr) if arr.ndim == 1 else arr
            rows, cols = (1, arr.shape[0]) if arr.ndim == 1 else a2.shape
            lines.append(f"array {aname} {rows} {cols}")
            arrays.append(arr)
    lines.append("END")
    return "\n".join(lines) + "\n", arrays


def save_model(params: ModelParams, path) -> Path:
    header, arrays = _header(params.kind, params.nets, params.hparams)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def _read(path):
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing END marker")
    lines = raw[:end].decode("utf-8").split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(first[1]) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {first[1]}")
    data = raw[end + 5:]
    kind, hparams, nets, offset = "", {}, {}, 0
    for line in lines[1:]:
        tag, rest = line.split(" ", 1)
        if tag == "kind":
            kind = rest
        elif tag == "hparam":
            key, val = rest.split(" ", 1)
            hparams[key] = json.loads(val)
        elif tag == "net":
            name, acts = rest.split(" ")
            nets[name] = {"acts": acts.split(","), "W": [], "b": []}
        elif tag == "array":
            aname, rows, cols = rest.split(" ")
            rows, cols = int(rows), int(cols)
            nbytes = rows * cols * 8
            if offset + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated array data at {aname}")
            arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").astype(np.float64)
            offset += nbytes
            net, leaf = aname.rsplit(".", 1)
            if leaf.startswith("W"):
                nets[net]["W"].append(arr.reshape(rows, cols))
            else:
                nets[net]["b"].append(arr.reshape(cols))
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    built = {name: MlpParams(v["W"], v["b"], v["acts"]) for name, v in nets.items()}
    return kind, hparams, built


def load_model(path) -> ModelParams:
    kind, hparams, nets = _read(path)
    return ModelParams(kind, nets, hparams)


def save_mlp(net: MlpParams, path) -> Path:
    """Stand-alone network, e.g. a pretrained base decoder for the simulator."""
    header, arrays = _header("mlp", {"mlp": net}, {})
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_mlp(path, net: str | None = None) -> MlpParams:
    """One network from a checkpoint; defaults to the rating decoder of a model file."""
    _, _, nets = _read(path)
    if net is None:
        for cand in ("mlp", "dec_r", "dec"):
            if cand in nets:
                net = cand
                break
        else:
            raise CheckpointError(f"{path}: no decoder network found")
    if net not in nets:
        raise CheckpointError(f"{path}: no network named {net}")
    return nets[net]


def write_curves(curves: list[dict], path, config_hash: str = "", wall_times=None) -> Path:
    """Training curves as CSV: stage, epoch, step, loss parts, wall_time.

    ``wall_time`` stays blank unless timings are passed in, so reruns of the
    same config produce identical files.
    """
    names = []
    for row in curves:
        for k in row:
            if k not in ("stage", "epoch", "step") and k not in names:
                names.append(k)
    lines = [f"# config_hash={config_hash}"] if config_hash else []
    lines.append(",".join(["stage", "epoch", "step", *names, "wall_time"]))
    for i, row in enumerate(curves):
        vals = [str(row["stage"]), str(row["epoch"]), str(row["step"])]
        vals += ["" if k not in row else repr(float(row[k])) for k in names]
        vals.append("" if wall_times is None else repr(float(wall_times[i])))
        lines.append(",".join(vals))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return path
