"""File formats: responses, kernels, configs and result records.

Plain-text formats throughout: a response is a single-column CSV with header
``y``; a dense kernel is a headerless CSV matrix (one file per kernel); a
diagonal kernel is a single-column CSV of eigenvalues with header ``lambda``;
an optional shared eigenbasis is a headerless CSV matrix.  Configs are JSON;
results are JSON records embedding the config hash, all seeds and the
package version.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvalidParameterError, VcsplitError
from .model import KernelSet, ResponseVector


def read_response(path) -> ResponseVector:
    """Single-column CSV with header ``y``."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["y"]:
        raise InvalidParameterError(f"{path}: expected a single-column CSV with header 'y'")
    vals = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals.append(float(row[0]))
        except ValueError:
            raise InvalidParameterError(f"{path}:{i}: not a number: {row[0]!r}") from None
    if not vals:
        raise InvalidParameterError(f"{path}: no data rows")
    return ResponseVector(y=np.array(vals))


def write_response(y, path) -> None:
    arr = y.y if isinstance(y, ResponseVector) else np.asarray(y, dtype=float)
    with open(path, "w") as fh:
        fh.write("y\n")
        for v in arr:
            fh.write(f"{float(v)!r}\n")


def _read_csv_matrix(path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise InvalidParameterError(f"{path}: cannot parse as CSV matrix ({e})") from None


def read_kernel(path):
    """Sniff a kernel file: returns ('diag', vector) or ('dense', matrix)."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().strip()
    if first == "lambda":
        vals = np.loadtxt(path, skiprows=1, ndmin=1)
        return "diag", np.asarray(vals, dtype=float)
    return "dense", _read_csv_matrix(path)


def write_kernel_dense(K, path) -> None:
    np.savetxt(path, np.asarray(K, dtype=float), delimiter=",")


def write_kernel_diag(lam, path) -> None:
    with open(path, "w") as fh:
        fh.write("lambda\n")
        for v in np.asarray(lam, dtype=float).ravel():
            fh.write(f"{float(v)!r}\n")


def write_basis(O, path) -> None:
    np.savetxt(path, np.asarray(O, dtype=float), delimiter=",")


def read_basis(path) -> np.ndarray:
    return _read_csv_matrix(path)


def load_kernel_set(paths, basis_path=None, validate: bool = True) -> KernelSet:
    """Assemble a KernelSet from kernel files (all-diagonal sets stay diagonal)."""
    kinds = [read_kernel(p) for p in paths]
    if all(kind == "diag" for kind, _ in kinds):
        lam = np.column_stack([v for _, v in kinds])
        if basis_path is not None:
            return KernelSet.from_shared_eigen(read_basis(basis_path), lam)
        return KernelSet.from_eigs(lam)
    mats = []
    n = None
    for kind, data in kinds:
        if kind == "diag":
            mats.append(np.diag(data))
        else:
            mats.append(data)
        n = mats[-1].shape[0] if n is None else n
    return KernelSet.from_dense(mats, validate=validate)


def read_resistor_csv(path) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Load a user-transcribed crossed measurement table.

    Expected columns: ``unit,rater,rep,y`` (headers required) with integer
    level labels; returns the response stacked in C order over
    (unit, rater, rep) plus the design dimensions.  The referenced resistance
    dataset is not shipped; transcribe it to this layout to reproduce the
    worked example.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"unit", "rater", "rep", "y"}
    if not rows or not need.issubset(rows[0].keys()):
        raise InvalidParameterError(f"{path}: expected columns {sorted(need)}")
    units = sorted({r["unit"] for r in rows})
    raters = sorted({r["rater"] for r in rows})
    reps = sorted({r["rep"] for r in rows})
    dims = (len(units), len(raters), len(reps))
    y = np.full(dims, np.nan)
    for r in rows:
        y[units.index(r["unit"]), raters.index(r["rater"]), reps.index(r["rep"])] = float(r["y"])
    if np.isnan(y).any():
        raise InvalidParameterError(f"{path}: incomplete crossed table")
    return y.ravel(), dims


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise InvalidParameterError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(cfg, dict):
        raise InvalidParameterError(f"{path}: config must be a JSON object")
    return cfg


def write_record(record: dict, config: dict, path) -> dict:
    """Attach provenance (version, config hash) and write a JSON record."""
    record = dict(record)
    record["version"] = __version__
    record["config_hash"] = config_hash(config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return record


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v)}")
