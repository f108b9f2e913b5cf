"""Dataset ingestion, model configuration files and report serialisation.

Numbers are written with Python's shortest round-trip ``repr``, so reading a
report back reproduces every float bit for bit.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ModelError
from .model import ModelSpec, ObservationSet

__all__ = [
    "ModelConfig",
    "load_dataset",
    "parse_model_config",
    "load_model_config",
    "to_jsonable",
    "dump_json",
    "write_json",
    "read_json",
    "write_csv",
]


def load_dataset(
    path: str | os.PathLike,
    response: str,
    covariates: Sequence[str] | None = None,
) -> ObservationSet:
    """Read a CSV file (header row, '.' decimals) into an :class:`ObservationSet`.

    Every column other than ``response`` becomes a covariate unless
    ``covariates`` selects a subset.

    Raises
    ------
    DataError
        Empty file, header without rows, missing column (the message lists
        the available names), ragged row, or a cell that is not a finite
        number (the message gives the line number and column).
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise DataError(f"{path}: empty file")
        names = [h.strip() for h in header]
        if len(set(names)) != len(names):
            raise DataError(f"{path}: duplicate column names in header")
        wanted = [response] + (list(covariates) if covariates is not None else [c for c in names if c != response])
        missing = [c for c in wanted if c not in names]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; available: {names}")
        cols = {c: [] for c in wanted}
        pos = {c: names.index(c) for c in wanted}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(names):
                raise DataError(f"{path}: line {lineno} has {len(row)} fields, expected {len(names)}")
            for c in wanted:
                cell = row[pos[c]].strip()
                try:
                    value = float(cell)
                except ValueError:
                    value = math.nan
                if not math.isfinite(value):
                    raise DataError(f"{path}: line {lineno}, column {c!r}: not a finite number: {cell!r}")
                cols[c].append(value)
    if not cols[response]:
        raise DataError(f"{path}: no data rows")
    return ObservationSet(
        np.array(cols[response]),
        {c: np.array(cols[c]) for c in wanted[1:]},
        response_name=response,
    )


@dataclass
class ModelConfig:
    """A model together with the dataset column it explains and optional start values."""

    model: ModelSpec
    response: str = "y"
    init: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _part(cfg, key):
    part = cfg.get(key)
    if not isinstance(part, Mapping) or "formula" not in part or "params" not in part:
        raise ModelError(f"model config needs a '{key}' object with 'formula' and 'params'")
    return part


def parse_model_config(cfg: Mapping[str, Any]) -> ModelConfig:
    """Build a :class:`ModelConfig` from a parsed JSON object (see docs/config_schema.md)."""
    if not isinstance(cfg, Mapping):
        raise ModelError("model config must be a JSON object")
    loc = _part(cfg, "location")
    disp = _part(cfg, "dispersion")
    model = ModelSpec.from_formulas(
        loc["formula"],
        disp["formula"],
        list(loc["params"]),
        list(disp["params"]),
        covariates=cfg.get("covariates"),
        family=cfg.get("family", "max"),
        loc_link=loc.get("link", "identity"),
        disp_link=disp.get("link", "log"),
    )
    init = dict(cfg.get("init", {}) or {})
    for name in init:
        model.index(name)
    return ModelConfig(model=model, response=cfg.get("response", "y"), init=init, raw=dict(cfg))


def load_model_config(path: str | os.PathLike) -> ModelConfig:
    return parse_model_config(read_json(path))


def to_jsonable(obj):
    """Convert numpy scalars/arrays, sets and tuples into plain JSON types."""
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (set, frozenset)):
        return sorted(to_jsonable(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def dump_json(obj) -> str:
    # json uses float.__repr__, the shortest string that round-trips exactly
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=False)


def write_json(obj, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_json(obj) + "\n", encoding="utf-8")


def read_json(path: str | os.PathLike):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def write_csv(rows: Iterable[Mapping[str, Any]], path: str | os.PathLike) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    fields = list(rows[0])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})
