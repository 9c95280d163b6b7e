"""Model checkpoints: one ``.npz`` with array data plus an embedded JSON header.

The header records the format version, network shapes, the parametric
constants ``psi`` and the filter settings, so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from metaadapt import adaptation as ad
from metaadapt import dynamics as dyn
from metaadapt import network as nn
from metaadapt.meta import Model

FORMAT = "metaadapt-model"
VERSION = 1


def save_checkpoint(path: str | Path, model: Model, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net = model.net
    header = {
        "format": FORMAT,
        "version": VERSION,
        "shapes": {k: list(np.shape(getattr(net, k))) for k in net._fields},
        "n_theta": net.n_theta,
        "psi": {k: float(v) for k, v in model.psi._asdict().items()},
        "filter": {"beta": float(model.fp.beta), "h": int(model.fp.h)},
        "extra": extra or {},
    }
    arrays = {f"net.{k}": np.asarray(getattr(net, k), dtype=np.float64) for k in net._fields}
    for k in ("p0", "q", "r", "eps"):
        arrays[f"filter.{k}"] = np.asarray(getattr(model.fp, k), dtype=np.float64)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != FORMAT or header.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format")
        net = nn.NetParams(**{k: jnp.asarray(data[f"net.{k}"]) for k in nn.NetParams._fields})
        fp = ad.FilterParams(
            p0=jnp.asarray(data["filter.p0"]), q=jnp.asarray(data["filter.q"]),
            r=jnp.asarray(data["filter.r"]), eps=jnp.asarray(data["filter.eps"]),
            beta=header["filter"]["beta"], h=header["filter"]["h"],
        )
    for k, shape in header["shapes"].items():
        if list(np.shape(getattr(net, k))) != shape:
            raise ValueError(f"{path}: array {k} has unexpected shape")
    psi = dyn.ParametricParams(**header["psi"])
    return Model(net, psi, fp), header
