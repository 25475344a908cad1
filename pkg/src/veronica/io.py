"""On-disk formats. All writes are atomic (temp file + rename).

Initial-condition file (text)::

    # veronica-init v1
    # config_hash <hash>
    # model <kind> d_x <d_x> d_goal <d_goal> N <N>
    <x0 ... goal ...>            one whitespace-separated row per trajectory

Checkpoint and dataset files (binary) start with one ASCII header line::

    veronica-checkpoint v1 <json metadata>\\n
    veronica-dataset v1 <json metadata>\\n

followed by little-endian float64 payload. A checkpoint payload is the flat
parameter vector (per layer: weights row-major, then biases). A dataset payload
is ``x0 (N,d_x)``, ``goals (N,d_goal)``, ``states (N,T+1,d_x)`` and
``controls (N,T,d_u)`` concatenated in that order.

CSV files start with a ``# config_hash=<hash>`` comment line; floats are
written with 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import policy_net as pn
from .errors import ContractError, IncompatibleError

INIT_TAG = "veronica-init v1"
CKPT_TAG = "veronica-checkpoint v1"
DATA_TAG = "veronica-dataset v1"


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_init_file(path, x0, goals, kind, cfg_hash):
    x0, goals = np.atleast_2d(x0), np.atleast_2d(goals)
    lines = [f"# {INIT_TAG}", f"# config_hash {cfg_hash}",
             f"# model {kind} d_x {x0.shape[1]} d_goal {goals.shape[1]} N {x0.shape[0]}"]
    for row in np.concatenate([x0, goals], axis=1):
        lines.append(" ".join(fmt(v) for v in row))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_init_file(path):
    """Returns ``(x0, goals, meta)``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != f"# {INIT_TAG}":
        raise IncompatibleError(f"{path}: not a '{INIT_TAG}' file")
    meta = {"config_hash": text[1].split()[2]}
    parts = text[2].split()[1:]
    meta["kind"] = parts[1]
    meta.update({parts[i]: int(parts[i + 1]) for i in range(2, len(parts), 2)})
    rows = np.array([[float(v) for v in line.split()] for line in text[3:] if line.strip()])
    rows = rows.reshape(-1, meta["d_x"] + meta["d_goal"])
    return rows[:, : meta["d_x"]], rows[:, meta["d_x"]:], meta


def _pack(tag, meta, arrays):
    header = f"{tag} {json.dumps(meta, sort_keys=True)}\n".encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return header + payload


def _unpack(path, tag):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    head = raw[:nl].decode(errors="replace") if nl >= 0 else ""
    if not head.startswith(tag + " "):
        raise IncompatibleError(f"{path}: expected a '{tag}' file, found header {head[:40]!r}")
    return json.loads(head[len(tag) + 1:]), raw[nl + 1:]


def save_checkpoint(path, W: pn.MlpParams, meta=None):
    meta = dict(meta or {})
    meta.update(layer_dims=list(W.layer_dims), activation=W.activation, n_params=int(W.flat.size))
    atomic_write(path, _pack(CKPT_TAG, meta, [W.flat]))


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    meta, payload = _unpack(path, CKPT_TAG)
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if flat.size != pn.n_params(meta["layer_dims"]) or flat.size != meta.get("n_params", flat.size):
        raise IncompatibleError(f"{path}: weight count {flat.size} does not match layer_dims {meta['layer_dims']}")
    return pn.MlpParams(tuple(meta["layer_dims"]), flat, meta["activation"]), meta


def save_dataset(path, x0, goals, states, controls, meta=None):
    meta = dict(meta or {})
    meta.update(N=int(x0.shape[0]), T=int(controls.shape[1]), d_x=int(x0.shape[1]),
                d_goal=int(goals.shape[1]), d_u=int(controls.shape[2]))
    atomic_write(path, _pack(DATA_TAG, meta, [x0, goals, states, controls]))


def load_dataset(path):
    """Returns ``(x0, goals, states, controls, meta)``."""
    meta, payload = _unpack(path, DATA_TAG)
    N, T, d_x, d_g, d_u = (meta[k] for k in ("N", "T", "d_x", "d_goal", "d_u"))
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    sizes = [N * d_x, N * d_g, N * (T + 1) * d_x, N * T * d_u]
    if flat.size != sum(sizes):
        raise IncompatibleError(f"{path}: payload size does not match header shapes")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return (parts[0].reshape(N, d_x), parts[1].reshape(N, d_g), parts[2].reshape(N, T + 1, d_x),
            parts[3].reshape(N, T, d_u), meta)


def write_csv(path, fieldnames, rows, cfg_hash):
    buf = _io.StringIO()
    buf.write(f"# config_hash={cfg_hash}\n")
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: fmt(row[k]) for k in fieldnames})
    atomic_write(path, buf.getvalue().encode())


def read_csv(path):
    """Returns ``(rows, config_hash)``; values are left as strings."""
    lines = Path(path).read_text().splitlines()
    cfg_hash = None
    if lines and lines[0].startswith("# config_hash="):
        cfg_hash = lines[0].split("=", 1)[1]
        lines = lines[1:]
    return list(csv.DictReader(lines)), cfg_hash


def check_compatible(meta, cfg_hash=None, model_hash=None, layer_dims=None):
    if cfg_hash is not None and meta.get("config_hash") not in (None, cfg_hash):
        raise IncompatibleError(f"config hash mismatch: file {meta.get('config_hash')} vs config {cfg_hash}")
    if model_hash is not None and meta.get("model_hash") not in (None, model_hash):
        raise IncompatibleError(f"model hash mismatch: file {meta.get('model_hash')} vs config {model_hash}")
    if layer_dims is not None and tuple(meta.get("layer_dims", layer_dims)) != tuple(layer_dims):
        raise IncompatibleError(f"layer dims {meta.get('layer_dims')} do not match expected {list(layer_dims)}")


def ensure(cond, msg):
    if not cond:
        raise ContractError(msg)
