"""Weights document I/O.

A checkpoint is a JSON document with a list of parameter entries, each
``{"name", "shape", "values"}`` with row-major float64 values. Entries are
ordered layers top-down and, within a layer: weight, bias, low_down,
low_up, high_up, high_down. Plain models simply omit the adapter entries.
Floats are written with ``repr`` semantics, so a save/load round trip is
bit-exact and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapters import AdaptedLinear, AdaptedModel, DualRankAdapter
from .layers import LinearLayer, MlpModel

FORMAT_NAME = "driftadapt-weights"
FORMAT_VERSION = 1

_ADAPTER_FIELDS = ("low_down", "low_up", "high_up", "high_down")


class WeightsFormatError(ValueError):
    """Malformed weights document; message names the offending entry."""


def _entry(name: str, array: np.ndarray) -> dict:
    return {
        "name": name,
        "shape": list(array.shape),
        "values": np.asarray(array, dtype=np.float64).ravel(order="C").tolist(),
    }


def model_entries(model: MlpModel | AdaptedModel) -> list[dict]:
    entries = []
    for i, layer in enumerate(model.layers):
        prefix = f"layer{i}"
        if isinstance(layer, AdaptedLinear):
            entries.append(_entry(f"{prefix}.weight", layer.base.weight))
            entries.append(_entry(f"{prefix}.bias", layer.base.bias))
            for field in _ADAPTER_FIELDS:
                entries.append(_entry(f"{prefix}.{field}", getattr(layer.adapter, field)))
        else:
            entries.append(_entry(f"{prefix}.weight", layer.weight))
            entries.append(_entry(f"{prefix}.bias", layer.bias))
    return entries


def dumps_weights(model: MlpModel | AdaptedModel) -> str:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": {"dropout_rate": model.dropout_rate},
        "entries": model_entries(model),
    }
    return json.dumps(doc)


def save_weights(model: MlpModel | AdaptedModel, path) -> None:
    Path(path).write_text(dumps_weights(model))


def _take_array(entries: dict, name: str, position: int) -> np.ndarray:
    if name not in entries:
        raise WeightsFormatError(f"missing entry '{name}' (expected at position {position})")
    entry = entries[name]
    shape = tuple(entry.get("shape", ()))
    values = entry.get("values")
    if values is None:
        raise WeightsFormatError(f"entry '{name}' has no values")
    arr = np.asarray(values, dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 0
    if arr.size != expected:
        raise WeightsFormatError(
            f"entry '{name}' has {arr.size} values, shape {list(shape)} needs {expected}"
        )
    return arr.reshape(shape)


def loads_weights(text: str) -> MlpModel | AdaptedModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WeightsFormatError(f"document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise WeightsFormatError("document is not a weights document")
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise WeightsFormatError("document has no entries")
    by_name: dict[str, dict] = {}
    for pos, entry in enumerate(raw_entries):
        name = entry.get("name") if isinstance(entry, dict) else None
        if not name:
            raise WeightsFormatError(f"entry at position {pos} has no name")
        if name in by_name:
            raise WeightsFormatError(f"duplicate entry '{name}' at position {pos}")
        by_name[name] = entry
    layer_ids = sorted(
        {int(n.split(".")[0][len("layer"):]) for n in by_name if n.startswith("layer")}
    )
    if layer_ids != list(range(len(layer_ids))) or not layer_ids:
        raise WeightsFormatError(f"layer indices are not contiguous: {layer_ids}")
    dropout_rate = float(doc.get("meta", {}).get("dropout_rate", 0.0))
    adapted = any(f"layer0.{field}" in by_name for field in _ADAPTER_FIELDS)
    layers = []
    pos = 0
    for i in layer_ids:
        weight = _take_array(by_name, f"layer{i}.weight", pos)
        bias = _take_array(by_name, f"layer{i}.bias", pos + 1)
        if weight.ndim != 2 or bias.ndim != 1:
            raise WeightsFormatError(f"entry 'layer{i}.weight' or bias has a bad rank")
        base = LinearLayer(weight, bias)
        pos += 2
        if adapted:
            parts = {}
            for field in _ADAPTER_FIELDS:
                parts[field] = _take_array(by_name, f"layer{i}.{field}", pos)
                pos += 1
            try:
                adapter = DualRankAdapter(**parts)
                layers.append(AdaptedLinear(base, adapter))
            except ValueError as exc:
                raise WeightsFormatError(f"layer{i} adapter entries are inconsistent: {exc}") from exc
        else:
            layers.append(base)
    expected = {f"layer{i}.weight" for i in layer_ids} | {f"layer{i}.bias" for i in layer_ids}
    if adapted:
        expected |= {f"layer{i}.{f}" for i in layer_ids for f in _ADAPTER_FIELDS}
    extra = set(by_name) - expected
    if extra:
        raise WeightsFormatError(f"unexpected entries: {sorted(extra)}")
    try:
        if adapted:
            return AdaptedModel(layers, dropout_rate=dropout_rate)
        return MlpModel(layers, dropout_rate=dropout_rate)
    except ValueError as exc:
        raise WeightsFormatError(f"layer shapes do not chain: {exc}") from exc


def load_weights(path) -> MlpModel | AdaptedModel:
    return loads_weights(Path(path).read_text())
