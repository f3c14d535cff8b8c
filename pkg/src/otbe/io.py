"""Model files, CSV tables and experiment report writers.

Model files start with the line ``OTBE1`` followed by a JSON document.
Floats are written with ``repr`` (shortest round-trip form), so reading a
file back reproduces every array bit for bit.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import InvalidData
from .extractor import FeatureModel
from .heads import CentroidClassifier, LinearHead

MAGIC = "OTBE1"
FORMAT_VERSION = 1


def _arr(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unarr(d) -> np.ndarray:
    a = np.array(d["data"], dtype=float).reshape(d["shape"])
    a.setflags(write=False)
    return a


_MODEL_ARRAYS = ("x_mean", "x_inv_sqrt", "loadings", "raw_loadings", "h_eigenvalues", "C", "D")


def model_to_dict(model: FeatureModel) -> dict:
    out = {k: _arr(getattr(model, k)) for k in _MODEL_ARRAYS}
    out.update(lam=model.lam, dim=model.dim, task=model.task, delta_wy=model.delta_wy,
               delta_ws=model.delta_ws, context=list(model.context), warnings=list(model.warnings))
    return out


def model_from_dict(d: dict) -> FeatureModel:
    kw = {k: _unarr(d[k]) for k in _MODEL_ARRAYS}
    return FeatureModel(lam=float(d["lam"]), dim=int(d["dim"]), task=d["task"],
                        delta_wy=float(d["delta_wy"]), delta_ws=float(d["delta_ws"]),
                        context=tuple(d["context"]), warnings=tuple(d["warnings"]), **kw)


def head_to_dict(head) -> dict | None:
    if head is None:
        return None
    if isinstance(head, LinearHead):
        return {"type": "linear", "beta": _arr(head.beta), "intercept": _arr(head.intercept),
                "fitted_on": head.fitted_on, "name": head.name}
    if isinstance(head, CentroidClassifier):
        return {"type": "centroid", "classes": list(head.classes),
                "centroids": _arr(head.centroids), "priors": _arr(head.priors)}
    raise TypeError(f"cannot serialize head of type {type(head).__name__}")


def head_from_dict(d: dict | None, model: FeatureModel | None):
    if d is None:
        return None
    if d["type"] == "linear":
        return LinearHead(_unarr(d["beta"]), _unarr(d["intercept"]), d["fitted_on"], model, d["name"])
    if d["type"] == "centroid":
        return CentroidClassifier(tuple(d["classes"]), _unarr(d["centroids"]), _unarr(d["priors"]), model)
    raise InvalidData(f"unknown head type {d['type']!r}")


def dumps_model(model: FeatureModel, head=None, meta: dict | None = None) -> str:
    doc = {"format": MAGIC, "version": FORMAT_VERSION, "model": model_to_dict(model),
           "head": head_to_dict(head), "meta": meta or {}}
    return MAGIC + "\n" + json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def loads_model(text: str):
    """Parse a model document; returns ``(model, head, meta)``."""
    first, _, body = text.partition("\n")
    if first.strip() != MAGIC:
        raise InvalidData(f"not an {MAGIC} model file (header {first[:20]!r})")
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise InvalidData(f"corrupt model file: {exc}") from None
    if doc.get("version") != FORMAT_VERSION:
        raise InvalidData(f"unsupported model file version {doc.get('version')!r}")
    model = model_from_dict(doc["model"])
    return model, head_from_dict(doc["head"], model), doc.get("meta", {})


def save_model(path, model: FeatureModel, head=None, meta=None) -> None:
    Path(path).write_text(dumps_model(model, head, meta), encoding="utf-8")


def load_model(path):
    return loads_model(Path(path).read_text(encoding="utf-8"))


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidData(f"{path}: empty file, header row is mandatory") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise InvalidData(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
        if any(v.strip() == "" for v in r):
            raise InvalidData(f"{path}:{i}: missing value")
    return [h.strip() for h in header], rows


def numeric_columns(header, rows, names) -> np.ndarray:
    idx = [header.index(n) for n in names]
    out = np.empty((len(rows), len(idx)))
    for i, r in enumerate(rows):
        for j, k in enumerate(idx):
            try:
                out[i, j] = float(r[k])
            except ValueError:
                raise InvalidData(f"row {i + 2}, column {names[j]!r}: not a number: {r[k]!r}") from None
    if not np.all(np.isfinite(out)):
        raise InvalidData("non-finite values in numeric columns")
    return out


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report(report, out_dir, stem=None, extra=None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (one row per record) and ``<stem>.json`` (summary + config)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or report.name
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    write_csv(csv_path, list(report.columns), [[r[c] for c in report.columns] for r in report.records])
    write_json(json_path, {"experiment": report.name, "summary": report.summary,
                           "resolved": report.config, **(extra or {})})
    return csv_path, json_path
