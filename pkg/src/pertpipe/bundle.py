"""Portable on-disk dataset bundles.

A bundle is a directory holding `manifest.json`, `obs.tsv`, `var.tsv`, a
row-major little-endian float64 matrix `X.f64`, and (for canonical
datasets) `pert_mask.u8` plus `pert_dose.f64`. Readers reject any binary
file whose size differs from the expected byte count.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import CANONICAL_OBS_KEYS, CanonicalDataset, RawTable
from .errors import BundleFormatError

MANIFEST = "manifest.json"

_OBS_TYPE_TAGS = {"str", "float", "bool", "categorical"}


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    text = str(value)
    if "\t" in text or "\n" in text:
        raise BundleFormatError(f"tsv cell value contains tab/newline: {text!r}")
    return text


def _write_tsv(path: Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    lines = ["\t".join(names)]
    for i in range(n):
        lines.append("\t".join(_format_cell(columns[name][i]) for name in names))
    path.write_text("\n".join(lines) + "\n")


def _read_tsv(path: Path) -> dict[str, list[str]]:
    text = path.read_text()
    lines = [ln for ln in text.split("\n") if ln != ""]
    if not lines:
        raise BundleFormatError(f"{path} is empty")
    names = lines[0].split("\t")
    columns: dict[str, list[str]] = {name: [] for name in names}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(names):
            raise BundleFormatError(
                f"{path}:{lineno} has {len(parts)} fields, expected {len(names)}"
            )
        for name, value in zip(names, parts):
            columns[name].append(value)
    return columns


def _write_matrix(path: Path, a: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read_matrix(path: Path, shape: tuple[int, int], dtype: str) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    expected = shape[0] * shape[1] * itemsize
    data = path.read_bytes()
    if len(data) != expected:
        raise BundleFormatError(
            f"{path} holds {len(data)} bytes, expected {expected} "
            f"({shape[0]}x{shape[1]} {dtype})"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def _obs_type_tag(col: np.ndarray) -> str:
    if col.dtype == bool:
        return "bool"
    if np.issubdtype(col.dtype, np.floating) or np.issubdtype(col.dtype, np.integer):
        return "float"
    return "str"


def _parse_obs_column(values: list[str], tag: str) -> np.ndarray:
    if tag == "bool":
        bad = [v for v in values if v not in ("true", "false")]
        if bad:
            raise BundleFormatError(f"bool column contains {bad[0]!r}")
        return np.array([v == "true" for v in values], dtype=bool)
    if tag == "float":
        return np.array([float(v) for v in values], dtype=np.float64)
    if tag in ("str", "categorical"):
        return np.array(values, dtype=object)
    raise BundleFormatError(f"unknown obs column type {tag!r}")


def write_raw_bundle(table: RawTable, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "raw",
        "n_cells": table.n_cells,
        "n_genes": table.n_genes,
        "p": 0,
        "flags": {},
        "pert_vocab": [],
        "obs_types": {k: _obs_type_tag(v) for k, v in table.obs.items()},
        "var_index_name": "index",
        "obsm": {k: int(v.shape[1]) for k, v in table.obsm.items()},
    }
    (out / MANIFEST).write_text(_dump_json(manifest))
    _write_tsv(out / "obs.tsv", table.obs)
    var_cols = {"index": table.var_index}
    var_cols.update(table.var_columns)
    _write_tsv(out / "var.tsv", var_cols)
    _write_matrix(out / "X.f64", table.X, "<f8")
    for name, m in table.obsm.items():
        _write_matrix(out / f"obsm_{name}.f64", m, "<f8")


def read_raw_bundle(path: str | Path) -> RawTable:
    root = Path(path)
    manifest = _load_manifest(root, expected_kind="raw")
    n_cells, n_genes = manifest["n_cells"], manifest["n_genes"]
    obs_types = manifest.get("obs_types", {})
    raw_obs = _read_tsv(root / "obs.tsv")
    obs = {
        name: _parse_obs_column(values, obs_types.get(name, "str"))
        for name, values in raw_obs.items()
    }
    var = _read_tsv(root / "var.tsv")
    var_names = list(var)
    var_index = np.array(var[var_names[0]], dtype=object)
    var_columns = {name: np.array(var[name], dtype=object) for name in var_names[1:]}
    X = _read_matrix(root / "X.f64", (n_cells, n_genes), "<f8")
    obsm = {}
    for name, k in manifest.get("obsm", {}).items():
        obsm[name] = _read_matrix(root / f"obsm_{name}.f64", (n_cells, int(k)), "<f8")
    return RawTable(obs=obs, var_index=var_index, var_columns=var_columns, X=X, obsm=obsm)


def write_canonical_bundle(ds: CanonicalDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "canonical",
        "n_cells": ds.n_cells,
        "n_genes": ds.n_genes,
        "p": ds.n_perts,
        "flags": {"log1p": True},
        "pert_vocab": list(ds.pert_vocab),
        "extra_obs": sorted(ds.extra_obs),
    }
    (out / MANIFEST).write_text(_dump_json(manifest))
    _write_tsv(out / "obs.tsv", ds.obs_columns())
    _write_tsv(
        out / "var.tsv",
        {"ensembl_id": ds.ensembl_id, "gene_symbol": ds.gene_symbol},
    )
    _write_matrix(out / "X.f64", ds.X, "<f8")
    _write_matrix(out / "pert_mask.u8", ds.pert_mask, "u1")
    _write_matrix(out / "pert_dose.f64", ds.pert_dose, "<f8")


def read_canonical_bundle(path: str | Path) -> CanonicalDataset:
    root = Path(path)
    manifest = _load_manifest(root, expected_kind="canonical")
    n_cells, n_genes, p = manifest["n_cells"], manifest["n_genes"], manifest["p"]
    obs = _read_tsv(root / "obs.tsv")
    missing = [k for k in CANONICAL_OBS_KEYS if k not in obs]
    if missing:
        raise BundleFormatError(f"obs.tsv missing canonical columns: {missing}")
    var = _read_tsv(root / "var.tsv")
    for col in ("ensembl_id", "gene_symbol"):
        if col not in var:
            raise BundleFormatError(f"var.tsv missing column {col!r}")
    extra = {
        name: np.array(values, dtype=object)
        for name, values in obs.items()
        if name not in CANONICAL_OBS_KEYS
    }
    return CanonicalDataset(
        cell_type=np.array(obs["cell_type"], dtype=object),
        batch_id=np.array(obs["batch_id"], dtype=object),
        donor_id=np.array(obs["donor_id"], dtype=object),
        pert_type=np.array(obs["pert_type"], dtype=object),
        is_control=_parse_obs_column(obs["is_control"], "bool"),
        condition_name=np.array(obs["condition_name"], dtype=object),
        X=_read_matrix(root / "X.f64", (n_cells, n_genes), "<f8"),
        pert_mask=_read_matrix(root / "pert_mask.u8", (n_cells, p), "u1"),
        pert_dose=_read_matrix(root / "pert_dose.f64", (n_cells, p), "<f8"),
        ensembl_id=np.array(var["ensembl_id"], dtype=object),
        gene_symbol=np.array(var["gene_symbol"], dtype=object),
        pert_vocab=tuple(manifest["pert_vocab"]),
        extra_obs=extra,
    )


def _load_manifest(root: Path, expected_kind: str) -> dict:
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise BundleFormatError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{mpath} is not valid JSON: {exc}") from exc
    kind = manifest.get("kind")
    if kind != expected_kind:
        raise BundleFormatError(
            f"{mpath} has kind {kind!r}, expected {expected_kind!r}"
        )
    return manifest


def bundle_kind(path: str | Path) -> str:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise BundleFormatError(f"no {MANIFEST} in {path}")
    return json.loads(mpath.read_text()).get("kind", "unknown")


def _is_bundle_file(name: str) -> bool:
    return name in (
        MANIFEST,
        "obs.tsv",
        "var.tsv",
        "X.f64",
        "pert_mask.u8",
        "pert_dose.f64",
    ) or (name.startswith("obsm_") and name.endswith(".f64"))


def bundle_digest(path: str | Path) -> str:
    """Stable content hash over the bundle's defined files.

    Sidecars such as run manifests or ground-truth records living in the
    same directory do not affect the digest.
    """
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.iterdir() if p.is_file() and _is_bundle_file(p.name)):
        h.update(f.name.encode())
        h.update(b"\0")
        h.update(f.read_bytes())
        h.update(b"\0")
    return h.hexdigest()
