"""Schema harmonization: previewing, mapping induction, application, merging.

A mapping specification describes how one raw table projects onto the
canonical schema: direct column aliases, logic expressions in the mapping
DSL, constants, or absent entries that fall back to documented defaults.
Specifications are induced by an LLM from a schema preview, or loaded from
JSON files; two surface forms are accepted (a nested block layout and a
flat per-key layout) and normalized into one entry model.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import dsl
from .data import (
    CANONICAL_OBS_KEYS,
    CanonicalDataset,
    PERT_TYPES,
    RawTable,
    normalize_log1p,
    validate_canonical,
)
from .errors import MappingError, ParameterError
from .llm import LlmClient

# wire-format key for the nested mapping surface form
UNIFIED_MAPPING_KEY = "uscp_mapping"

RAW_COUNTS_THRESHOLD = 50.0

_FLAT_ALIASES = {
    "perturbation_type": "pert_type",
    "perturbation_name": "pert_mask_source",
    "dose_value": "pert_dose_source",
    "control_status": "is_control",
    "cell_line": "cell_line",
    "cell_type": "cell_type",
    "batch_id": "batch_id",
    "donor_id": "donor_id",
    "condition_name": "condition_name",
    "is_control": "is_control",
    "pert_type": "pert_type",
}


# --------------------------------------------------------------------------
# mapping entries


@dataclass(frozen=True)
class Direct:
    source_key: str


@dataclass(frozen=True)
class Logic:
    expression: str
    parsed: dsl.Expr = field(compare=False, repr=False)
    description: str | None = None


@dataclass(frozen=True)
class Constant:
    value: object


@dataclass(frozen=True)
class Absent:
    pass


MappingEntry = Direct | Logic | Constant | Absent


@dataclass(frozen=True)
class MappingSpec:
    """Normalized mapping from one raw schema to the canonical schema."""

    obs_entries: dict[str, MappingEntry]
    pert_mask_source: MappingEntry
    pert_dose_source: MappingEntry
    var_index_type: str  # "ensembl" | "symbol"
    gene_symbol_col: str | None
    is_already_log1p: bool
    normalization_required: bool
    target_sum: float
    data_summary: str = ""

    @classmethod
    def from_json(cls, text: str, raw_response: str | None = None) -> "MappingSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MappingError(
                f"mapping is not valid JSON: {exc}", raw_response
            ) from exc
        if not isinstance(doc, dict):
            raise MappingError("mapping JSON must be an object", raw_response)
        return cls.from_dict(doc, raw_response)

    @classmethod
    def from_dict(cls, doc: dict, raw_response: str | None = None) -> "MappingSpec":
        violations: list[str] = []
        if UNIFIED_MAPPING_KEY in doc or "obs" in doc:
            spec = _parse_nested(doc, violations)
        elif any(k in doc for k in _FLAT_ALIASES):
            spec = _parse_flat(doc, violations)
        else:
            violations.append(
                f"missing blocks: expected {UNIFIED_MAPPING_KEY!r} with an 'obs' "
                f"block, or flat per-key entries"
            )
            spec = None
        if violations:
            raise MappingError(
                "mapping specification invalid:\n- " + "\n- ".join(violations),
                raw_response,
            )
        assert spec is not None
        return spec


def _entry_from_value(value, key: str, violations: list[str]) -> MappingEntry:
    """Interpret one mapping value: dict forms, column names, or absence markers."""
    if value is None:
        return Absent()
    if isinstance(value, dict):
        etype = value.get("type")
        if etype == "direct":
            source = value.get("source_key")
            if not isinstance(source, str) or not source:
                violations.append(f"{key}: direct entry missing source_key")
                return Absent()
            return Direct(source)
        if etype == "logic":
            expression = value.get("expression")
            if not isinstance(expression, str) or not expression:
                violations.append(f"{key}: logic entry missing expression")
                return Absent()
            return _logic_entry(expression, value.get("description"), key, violations)
        if etype == "constant":
            if "value" not in value:
                violations.append(f"{key}: constant entry missing value")
                return Absent()
            return Constant(value["value"])
        violations.append(f"{key}: unknown entry type {etype!r}")
        return Absent()
    if isinstance(value, str):
        if value in ("None", "", "unknown"):
            return Absent()
        return Direct(value)
    violations.append(f"{key}: cannot interpret entry {value!r}")
    return Absent()


def _logic_entry(
    expression: str, description, key: str, violations: list[str]
) -> MappingEntry:
    try:
        parsed = dsl.parse(expression)
    except dsl.DslError as exc:
        violations.append(f"{key}: {exc}")
        return Absent()
    return Logic(expression=expression, parsed=parsed, description=description)


def _parse_nested(doc: dict, violations: list[str]) -> MappingSpec:
    body = doc.get(UNIFIED_MAPPING_KEY, doc)
    if not isinstance(body, dict):
        violations.append(f"{UNIFIED_MAPPING_KEY} must be an object")
        body = {}
    obs = body.get("obs")
    if not isinstance(obs, dict):
        violations.append("missing or invalid 'obs' block")
        obs = {}
    obs_entries: dict[str, MappingEntry] = {}
    for key in ("cell_type", "batch_id", "donor_id"):
        obs_entries[key] = _entry_from_value(obs.get(key), f"obs.{key}", violations)
    pert_type_value = obs.get("pert_type")
    if pert_type_value in (None, "None"):
        obs_entries["pert_type"] = Absent()
    elif isinstance(pert_type_value, dict):
        obs_entries["pert_type"] = _entry_from_value(
            pert_type_value, "obs.pert_type", violations
        )
    else:
        obs_entries["pert_type"] = Constant(pert_type_value)
    for key, logic_key in (
        ("is_control", "is_control_logic"),
        ("condition_name", "condition_name_logic"),
    ):
        value = obs.get(logic_key, obs.get(key))
        if value in (None, "None", ""):
            obs_entries[key] = Absent()
        elif isinstance(value, dict):
            obs_entries[key] = _entry_from_value(value, f"obs.{logic_key}", violations)
        else:
            obs_entries[key] = _logic_entry(
                str(value), None, f"obs.{logic_key}", violations
            )
    obsm = body.get("obsm") or {}
    if not isinstance(obsm, dict):
        violations.append("'obsm' block must be an object")
        obsm = {}
    mask_entry = _entry_from_value(
        obsm.get("pert_mask_source"), "obsm.pert_mask_source", violations
    )
    dose_entry = _entry_from_value(
        obsm.get("pert_dose_source"), "obsm.pert_dose_source", violations
    )
    var = body.get("var") or {}
    numerical = body.get("numerical") or {}
    summary = doc.get("data_summary", body.get("data_summary", ""))
    return _finish_spec(
        obs_entries, mask_entry, dose_entry, var, numerical, summary, violations
    )


def _parse_flat(doc: dict, violations: list[str]) -> MappingSpec:
    obs_entries: dict[str, MappingEntry] = {k: Absent() for k in CANONICAL_OBS_KEYS}
    mask_entry: MappingEntry = Absent()
    dose_entry: MappingEntry = Absent()
    cell_line_entry: MappingEntry | None = None
    for key, value in doc.items():
        target = _FLAT_ALIASES.get(key)
        if target is None:
            continue
        if target == "pert_type":
            if isinstance(value, dict):
                obs_entries["pert_type"] = _entry_from_value(value, key, violations)
            elif value in (None, "None"):
                obs_entries["pert_type"] = Absent()
            else:
                obs_entries["pert_type"] = Constant(value)
        elif target == "pert_mask_source":
            mask_entry = _entry_from_value(value, key, violations)
        elif target == "pert_dose_source":
            dose_entry = _entry_from_value(value, key, violations)
        elif target == "cell_line":
            cell_line_entry = _entry_from_value(value, key, violations)
        elif target in ("is_control", "condition_name"):
            if isinstance(value, dict):
                obs_entries[target] = _entry_from_value(value, key, violations)
            elif value in (None, "None", ""):
                obs_entries[target] = Absent()
            else:
                obs_entries[target] = _logic_entry(str(value), None, key, violations)
        else:
            obs_entries[target] = _entry_from_value(value, key, violations)
    if cell_line_entry is not None:
        # a cell-line column identifies the donor; reuse it for cell_type
        # only when nothing better was mapped
        obs_entries["donor_id"] = cell_line_entry
        if isinstance(obs_entries["cell_type"], Absent):
            obs_entries["cell_type"] = cell_line_entry
    return _finish_spec(
        obs_entries,
        mask_entry,
        dose_entry,
        doc.get("var") or {},
        doc.get("numerical") or {},
        doc.get("data_summary", ""),
        violations,
    )


def _finish_spec(
    obs_entries, mask_entry, dose_entry, var, numerical, summary, violations
) -> MappingSpec:
    for key in CANONICAL_OBS_KEYS:
        obs_entries.setdefault(key, Absent())
    pert_type_entry = obs_entries["pert_type"]
    if isinstance(pert_type_entry, Constant) and pert_type_entry.value not in PERT_TYPES:
        violations.append(
            f"pert_type constant {pert_type_entry.value!r} not in {list(PERT_TYPES)}"
        )
    index_type_raw = str(var.get("index_type", "ensembl")).strip().lower()
    if "ensembl" in index_type_raw:
        index_type = "ensembl"
    elif "symbol" in index_type_raw:
        index_type = "symbol"
    else:
        violations.append(f"var.index_type {var.get('index_type')!r} not recognized")
        index_type = "ensembl"
    symbol_col = var.get("gene_symbol_col")
    if symbol_col in (None, "None", ""):
        symbol_col = None
    is_log1p = bool(numerical.get("is_already_log1p", False))
    norm_required = bool(numerical.get("normalization_required", True))
    try:
        target_sum = float(numerical.get("target_sum", 1e4))
    except (TypeError, ValueError):
        violations.append(f"numerical.target_sum {numerical.get('target_sum')!r} is not a number")
        target_sum = 1e4
    if target_sum <= 0:
        violations.append(f"numerical.target_sum must be positive, got {target_sum}")
    return MappingSpec(
        obs_entries=obs_entries,
        pert_mask_source=mask_entry,
        pert_dose_source=dose_entry,
        var_index_type=index_type,
        gene_symbol_col=symbol_col,
        is_already_log1p=is_log1p,
        normalization_required=norm_required,
        target_sum=target_sum,
        data_summary=str(summary or ""),
    )


# --------------------------------------------------------------------------
# schema previewing


@dataclass(frozen=True)
class ColumnPreview:
    name: str
    dtype: str
    samples: tuple[str, ...]


@dataclass(frozen=True)
class SchemaPreview:
    obs_columns: tuple[ColumnPreview, ...]
    var_index_samples: tuple[str, ...]
    x_stats: tuple[float, float, float]  # min, max, mean
    n_cells: int
    n_genes: int
    notes: tuple[str, ...]


def _first_distinct(values, limit: int) -> tuple[str, ...]:
    out: list[str] = []
    seen: set[str] = set()
    for v in values:
        s = str(v)
        if s not in seen:
            seen.add(s)
            out.append(s)
            if len(out) >= limit:
                break
    return tuple(out)


def preview_schema(table: RawTable, sample_size: int) -> SchemaPreview:
    """Deterministic schema fingerprint used to prompt for a mapping."""
    if sample_size < 1:
        raise ParameterError(f"sample_size must be >= 1, got {sample_size}")
    columns = []
    for name, col in table.obs.items():
        if col.dtype == bool:
            tag = "bool"
        elif np.issubdtype(col.dtype, np.floating) or np.issubdtype(col.dtype, np.integer):
            tag = "float"
        else:
            tag = "str"
        columns.append(
            ColumnPreview(name=name, dtype=tag, samples=_first_distinct(col, sample_size))
        )
    x_min = float(table.X.min()) if table.X.size else 0.0
    x_max = float(table.X.max()) if table.X.size else 0.0
    x_mean = float(table.X.mean()) if table.X.size else 0.0
    notes = []
    if x_max > RAW_COUNTS_THRESHOLD:
        notes.append("likely raw counts")
    return SchemaPreview(
        obs_columns=tuple(columns),
        var_index_samples=_first_distinct(table.var_index, sample_size),
        x_stats=(x_min, x_max, x_mean),
        n_cells=table.n_cells,
        n_genes=table.n_genes,
        notes=tuple(notes),
    )


def render_preview_text(preview: SchemaPreview) -> str:
    lines = [
        f"cells: {preview.n_cells}",
        f"genes: {preview.n_genes}",
        "expression stats: min={:.6g} max={:.6g} mean={:.6g}".format(*preview.x_stats),
    ]
    for note in preview.notes:
        lines.append(f"note: {note}")
    lines.append("obs columns:")
    for col in preview.obs_columns:
        sample_text = ", ".join(repr(s) for s in col.samples)
        lines.append(f"  - {col.name} ({col.dtype}): [{sample_text}]")
    lines.append(
        "var index samples: " + ", ".join(repr(s) for s in preview.var_index_samples)
    )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# mapping induction

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json_block(text: str) -> str:
    """Return the first fenced JSON block from a response."""
    match = _FENCE_RE.search(text)
    if match:
        return match.group(1).strip()
    raise MappingError("no fenced JSON block found in response", raw_response=text)


def load_prompt_template(name: str) -> str:
    return (resources.files("pertpipe") / "prompts" / name).read_text()


def build_mapping_messages(preview: SchemaPreview) -> list[dict[str, str]]:
    system = load_prompt_template("unify_system.txt")
    user = load_prompt_template("unify_user.txt").replace(
        "{schema_preview}", render_preview_text(preview)
    )
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": user},
    ]


def induce_mapping(preview: SchemaPreview, client: LlmClient) -> MappingSpec:
    """Prompt the client with a schema preview and validate its mapping reply."""
    response = client.complete(build_mapping_messages(preview))
    block = extract_json_block(response)
    return MappingSpec.from_json(block, raw_response=response)


# --------------------------------------------------------------------------
# mapping application

_OBS_DEFAULTS = {
    "cell_type": "unknown",
    "batch_id": "unknown",
    "donor_id": "unknown",
    "pert_type": "mixed",
}


def _resolve_entry(entry: MappingEntry, table: RawTable, key: str):
    if isinstance(entry, Direct):
        if entry.source_key not in table.obs:
            raise MappingError(
                f"{key}: source column {entry.source_key!r} not in table; "
                f"available columns: {sorted(table.obs)}"
            )
        return table.obs[entry.source_key]
    if isinstance(entry, Logic):
        try:
            return dsl.evaluate(entry.parsed, table)
        except dsl.DslError as exc:
            raise MappingError(f"{key}: {exc}") from exc
    if isinstance(entry, Constant):
        return entry.value
    raise MappingError(f"{key}: entry is absent and has no evaluation")


def _as_str_column(value, n: int) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return np.array([_scalar_str(v) for v in value.tolist()], dtype=object)
    return np.array([_scalar_str(value)] * n, dtype=object)


def _scalar_str(v) -> str:
    if isinstance(v, bool):
        return "True" if v else "False"
    return str(v)


def _as_bool_column(value, n: int, key: str) -> np.ndarray:
    if isinstance(value, np.ndarray):
        if value.dtype != bool:
            raise MappingError(
                f"{key}: expected a boolean column, got dtype {value.dtype}"
            )
        return value.astype(bool)
    if isinstance(value, bool):
        return np.full(n, value, dtype=bool)
    raise MappingError(f"{key}: expected a boolean value, got {value!r}")


def _as_float_column(value, n: int, key: str) -> np.ndarray:
    if isinstance(value, np.ndarray):
        if np.issubdtype(value.dtype, np.floating) or np.issubdtype(
            value.dtype, np.integer
        ):
            return value.astype(np.float64)
        out = np.empty(n, dtype=np.float64)
        for i, v in enumerate(value.tolist()):
            try:
                out[i] = float(v)
            except (TypeError, ValueError):
                raise MappingError(
                    f"{key}: cannot read {v!r} at row {i} as a number"
                ) from None
        return out
    try:
        return np.full(n, float(value), dtype=np.float64)
    except (TypeError, ValueError):
        raise MappingError(f"{key}: cannot read {value!r} as a number") from None


def apply_mapping(
    table: RawTable, spec: MappingSpec, combo_delimiter: str = "+"
) -> CanonicalDataset:
    """Project a raw table through a mapping into a canonical dataset.

    Perturbation vocabulary is built from the distinct non-control mask
    source values, with combination names split on ``combo_delimiter``.
    A per-cell scalar dose broadcasts across that cell's set mask bits.
    The result is validated before being returned; a spec that produces an
    invalid dataset is rejected.
    """
    n = table.n_cells

    if isinstance(spec.obs_entries["is_control"], Absent):
        is_control = np.zeros(n, dtype=bool)
    else:
        is_control = _as_bool_column(
            _resolve_entry(spec.obs_entries["is_control"], table, "is_control"),
            n,
            "is_control",
        )

    if isinstance(spec.pert_mask_source, Absent):
        pert_values = None
    else:
        pert_values = _as_str_column(
            _resolve_entry(spec.pert_mask_source, table, "pert_mask_source"), n
        )

    obs: dict[str, np.ndarray] = {"is_control": is_control}
    for key in ("cell_type", "batch_id", "donor_id", "pert_type"):
        entry = spec.obs_entries[key]
        if isinstance(entry, Absent):
            obs[key] = np.array([_OBS_DEFAULTS[key]] * n, dtype=object)
        else:
            obs[key] = _as_str_column(_resolve_entry(entry, table, key), n)

    cond_entry = spec.obs_entries["condition_name"]
    if isinstance(cond_entry, Absent):
        if pert_values is not None:
            obs["condition_name"] = pert_values.copy()
        else:
            obs["condition_name"] = np.array(["unknown"] * n, dtype=object)
    else:
        obs["condition_name"] = _as_str_column(
            _resolve_entry(cond_entry, table, "condition_name"), n
        )

    # vocabulary over non-control perturbation names, combos split apart
    vocab: list[str] = []
    if pert_values is not None:
        seen = set()
        for i in np.flatnonzero(~is_control):
            for part in str(pert_values[i]).split(combo_delimiter):
                part = part.strip()
                if part and part not in seen:
                    seen.add(part)
                    vocab.append(part)
        vocab.sort()
    index_of = {name: j for j, name in enumerate(vocab)}

    mask = np.zeros((n, len(vocab)), dtype=np.uint8)
    if pert_values is not None:
        for i in np.flatnonzero(~is_control):
            for part in str(pert_values[i]).split(combo_delimiter):
                part = part.strip()
                if part:
                    mask[i, index_of[part]] = 1

    dose = np.zeros((n, len(vocab)), dtype=np.float64)
    if not isinstance(spec.pert_dose_source, Absent) and vocab:
        dose_col = _as_float_column(
            _resolve_entry(spec.pert_dose_source, table, "pert_dose_source"),
            n,
            "pert_dose_source",
        )
        rows = np.flatnonzero((~is_control) & (mask.sum(axis=1) > 0))
        for i in rows:
            dose[i, mask[i] == 1] = dose_col[i]

    X = normalize_log1p(
        table.X,
        target_sum=spec.target_sum,
        is_already_log1p=spec.is_already_log1p,
        normalization_required=spec.normalization_required,
    )

    ensembl = np.array([str(v) for v in table.var_index.tolist()], dtype=object)
    if spec.gene_symbol_col is not None:
        if spec.gene_symbol_col not in table.var_columns:
            raise MappingError(
                f"gene_symbol_col {spec.gene_symbol_col!r} not in var columns; "
                f"available: {sorted(table.var_columns)}"
            )
        symbols = np.array(
            [str(v) for v in table.var_columns[spec.gene_symbol_col].tolist()],
            dtype=object,
        )
    else:
        symbols = ensembl.copy()

    ds = CanonicalDataset(
        cell_type=obs["cell_type"],
        batch_id=obs["batch_id"],
        donor_id=obs["donor_id"],
        pert_type=obs["pert_type"],
        is_control=is_control,
        condition_name=obs["condition_name"],
        X=X,
        pert_mask=mask,
        pert_dose=dose,
        ensembl_id=ensembl,
        gene_symbol=symbols,
        pert_vocab=tuple(vocab),
    )
    report = validate_canonical(ds)
    if not report.ok:
        raise MappingError(
            "mapping produced an invalid canonical dataset:\n" + str(report)
        )
    return ds


# --------------------------------------------------------------------------
# merging


@dataclass(frozen=True)
class MergeResult:
    dataset: CanonicalDataset
    warnings: tuple[str, ...]


def merge_datasets(parts: list[CanonicalDataset]) -> MergeResult:
    """Concatenate canonical datasets over their shared genes.

    Genes are restricted to the intersection of ensembl ids (ordered by the
    first part), the perturbation vocabulary becomes the first-seen union,
    and mask/dose matrices are re-projected onto it. Expression values are
    never renormalized. A ``source_dataset`` obs column records provenance.
    Identical mask/dose patterns that carry different condition names across
    parts are renamed to the first-seen name so the merged dataset stays
    canonical.
    """
    if len(parts) < 2:
        raise ParameterError(f"need at least 2 datasets to merge, got {len(parts)}")

    common = set(parts[0].ensembl_id.tolist())
    for part in parts[1:]:
        common &= set(part.ensembl_id.tolist())
    if not common:
        raise ParameterError("gene intersection across datasets is empty")
    gene_order = [g for g in parts[0].ensembl_id.tolist() if g in common]

    warnings: list[str] = []
    symbol_for: dict[str, str] = {}
    for i, part in enumerate(parts):
        for eid, sym in zip(part.ensembl_id.tolist(), part.gene_symbol.tolist()):
            if eid not in common:
                continue
            if eid not in symbol_for:
                symbol_for[eid] = sym
            elif symbol_for[eid] != sym:
                warnings.append(
                    f"gene_symbol conflict for {eid!r}: keeping "
                    f"{symbol_for[eid]!r}, dataset_{i} says {sym!r}"
                )

    vocab: list[str] = []
    seen_vocab: set[str] = set()
    for part in parts:
        for name in part.pert_vocab:
            if name not in seen_vocab:
                seen_vocab.add(name)
                vocab.append(name)
    vocab_index = {name: j for j, name in enumerate(vocab)}

    x_blocks, mask_blocks, dose_blocks = [], [], []
    obs_concat: dict[str, list] = {k: [] for k in CANONICAL_OBS_KEYS}
    extra_keys = sorted(
        {k for part in parts for k in part.extra_obs} - {"source_dataset"}
    )
    extras: dict[str, list] = {k: [] for k in extra_keys}
    source: list[str] = []

    for i, part in enumerate(parts):
        col_of = {eid: j for j, eid in enumerate(part.ensembl_id.tolist())}
        cols = [col_of[g] for g in gene_order]
        x_blocks.append(part.X[:, cols])
        mask = np.zeros((part.n_cells, len(vocab)), dtype=np.uint8)
        dose = np.zeros((part.n_cells, len(vocab)), dtype=np.float64)
        for j, name in enumerate(part.pert_vocab):
            mask[:, vocab_index[name]] = part.pert_mask[:, j]
            dose[:, vocab_index[name]] = part.pert_dose[:, j]
        mask_blocks.append(mask)
        dose_blocks.append(dose)
        for k in CANONICAL_OBS_KEYS:
            obs_concat[k].extend(getattr(part, k).tolist())
        for k in extra_keys:
            values = part.extra_obs.get(k)
            extras[k].extend(
                values.tolist() if values is not None else ["unknown"] * part.n_cells
            )
        source.extend([f"dataset_{i}"] * part.n_cells)

    mask_all = np.vstack(mask_blocks)
    dose_all = np.vstack(dose_blocks)
    condition = np.array(obs_concat["condition_name"], dtype=object)

    # same pattern, one name: first-seen wins
    pattern_name: dict[bytes, str] = {}
    renamed = 0
    for i in range(mask_all.shape[0]):
        key = mask_all[i].tobytes() + dose_all[i].tobytes()
        if key not in pattern_name:
            pattern_name[key] = condition[i]
        elif condition[i] != pattern_name[key]:
            renamed += 1
            condition[i] = pattern_name[key]
    if renamed:
        warnings.append(
            f"renamed condition_name on {renamed} cells to match the first-seen "
            f"name of their mask/dose pattern"
        )

    extra_obs = {k: np.array(v, dtype=object) for k, v in extras.items()}
    extra_obs["source_dataset"] = np.array(source, dtype=object)
    merged = CanonicalDataset(
        cell_type=np.array(obs_concat["cell_type"], dtype=object),
        batch_id=np.array(obs_concat["batch_id"], dtype=object),
        donor_id=np.array(obs_concat["donor_id"], dtype=object),
        pert_type=np.array(obs_concat["pert_type"], dtype=object),
        is_control=np.array(obs_concat["is_control"], dtype=bool),
        condition_name=condition,
        X=np.vstack(x_blocks),
        pert_mask=mask_all,
        pert_dose=dose_all,
        ensembl_id=np.array(gene_order, dtype=object),
        gene_symbol=np.array([symbol_for[g] for g in gene_order], dtype=object),
        pert_vocab=tuple(vocab),
        extra_obs=extra_obs,
    )
    report = validate_canonical(merged)
    if not report.ok:
        raise MappingError("merged dataset violates canonical invariants:\n" + str(report))
    return MergeResult(dataset=merged, warnings=tuple(warnings))
