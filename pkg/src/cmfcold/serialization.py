"""Model container: one ``.npz`` file with parameter blocks and JSON metadata.

Arrays are stored verbatim (float64, row-major), so a save/load round trip
reproduces every parameter bit for bit. The ``meta`` entry records the model
kind, a format version and the scalar settings needed to rebuild the model.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np

from .cmf import CmfHyperparams, CmfModel, FactorPartition
from .offsets import OffsetsModel

FORMAT_VERSION = 1
KINDS = ("cmf", "offsets")

Model = Union[CmfModel, OffsetsModel]

_BLOCKS = ("A", "B", "C", "D", "m", "n")


def model_kind(model: Model) -> str:
    if isinstance(model, CmfModel):
        return "cmf"
    if isinstance(model, OffsetsModel):
        return "offsets"
    raise TypeError(f"cannot serialize {type(model).__name__}")


def save_model(model: Model, path) -> Path:
    """Write ``model`` to ``path`` (``.npz`` is not appended automatically)."""
    kind = model_kind(model)
    arrays = {name: np.ascontiguousarray(getattr(model, name)) for name in _BLOCKS}
    arrays["user_ids"] = np.asarray(model.user_ids, dtype=str)
    arrays["item_ids"] = np.asarray(model.item_ids, dtype=str)
    arrays["trace"] = np.asarray(model.trace, dtype=np.float64)
    meta = {"kind": kind, "version": FORMAT_VERSION, "mu": model.mu.hex(),
            "termination": model.termination}
    if kind == "cmf":
        hyper = asdict(model.hyper)
        meta["hyper"] = {k: (v.hex() if isinstance(v, float) else v) for k, v in hyper.items()
                         if k != "partition"}
        meta["partition"] = hyper["partition"]
        meta["user_attr_entries"] = model.user_attr_entries
        meta["item_attr_entries"] = model.item_attr_entries
        arrays["user_column_kinds"] = np.asarray(model.user_column_kinds, dtype=str)
        arrays["item_column_kinds"] = np.asarray(model.item_column_kinds, dtype=str)
    else:
        meta["lambda"] = float(model.lambda_).hex()
        meta["lambda_offsets"] = None if model.lambda_offsets is None else float(model.lambda_offsets).hex()
        arrays["user_factors"] = model.user_factors
        arrays["item_factors"] = model.item_factors
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def _float(v):
    return None if v is None else (float.fromhex(v) if isinstance(v, str) else v)


def load_model(path) -> Model:
    """Read a model written by :func:`save_model`."""
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path} is not a model file: {exc}") from None
    if "meta" not in arrays:
        raise ValueError(f"{path} has no metadata entry")
    meta = json.loads(str(arrays["meta"]))
    if meta.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {meta.get('version')!r}")
    kind = meta.get("kind")
    blocks = {name: arrays[name] for name in _BLOCKS}
    common = dict(mu=float.fromhex(meta["mu"]), user_ids=arrays["user_ids"],
                  item_ids=arrays["item_ids"], trace=arrays["trace"].tolist(),
                  termination=meta["termination"])
    if kind == "cmf":
        hyper = {k: (_float(v) if k.startswith("lambda") or k.startswith("w_") else v)
                 for k, v in meta["hyper"].items()}
        hyper = CmfHyperparams(partition=FactorPartition(**meta["partition"]), **hyper)
        return CmfModel(**blocks, hyper=hyper,
                        user_column_kinds=arrays["user_column_kinds"],
                        item_column_kinds=arrays["item_column_kinds"],
                        user_attr_entries=meta["user_attr_entries"],
                        item_attr_entries=meta["item_attr_entries"], **common)
    if kind == "offsets":
        return OffsetsModel(**blocks, lambda_=float.fromhex(meta["lambda"]),
                            lambda_offsets=_float(meta["lambda_offsets"]),
                            user_factors=arrays["user_factors"],
                            item_factors=arrays["item_factors"], **common)
    raise ValueError(f"unknown model kind {kind!r}")
