"""JSON checkpoint manifests.

Layout::

    {
      "format": "flowmix-checkpoint",
      "version": 1,
      "meta": {...},                      # free-form, e.g. config + topology
      "tensors": [
        {"name": "decoder.flows.0.layers.0.s_in.weight",
         "shape": [2, 32],
         "values": [0.0123..., ...]},      # row-major, float64
        ...
      ]
    }

Floats are written with Python's shortest round-trip ``repr`` so reading
restores every value bit-for-bit.  Keys are sorted and separators fixed, so
identical states serialize to identical bytes.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..exceptions import InputError

FORMAT = "flowmix-checkpoint"
VERSION = 1


def dumps_state(state, meta=None) -> str:
    tensors = []
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InputError(f"refusing to serialize non-finite tensor {name!r}")
        tensors.append(
            {"name": name, "shape": list(arr.shape), "values": [float(v) for v in arr.ravel()]}
        )
    doc = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": tensors}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def loads_state(text):
    """Parse a manifest; returns ``(OrderedDict name -> ndarray, meta)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"checkpoint is not valid JSON: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise InputError(f"not a flowmix checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise InputError(f"unsupported checkpoint version {doc.get('version')}")
    state = OrderedDict()
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise InputError(f"tensor {entry['name']!r}: {values.size} values for shape {shape}")
        state[entry["name"]] = values.reshape(shape)
    return state, doc.get("meta", {})


def save_checkpoint(path, state, meta=None):
    Path(path).write_text(dumps_state(state, meta))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads_state(path.read_text())
