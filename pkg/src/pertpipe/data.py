"""Dataset model: raw tables, the canonical schema, pseudo-bulk, and splits.

A canonical dataset carries a normalized+log1p expression matrix, the six
standardized cell-metadata columns, a multi-hot perturbation mask, a dose
matrix in nM, and Ensembl-indexed gene metadata. All containers are frozen
after construction; every operation here is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ValidationError

PERT_TYPES = ("drug", "crispr", "mixed", "control")
SPLIT_LABELS = ("train", "val", "test")

CANONICAL_OBS_KEYS = (
    "cell_type",
    "batch_id",
    "donor_id",
    "pert_type",
    "is_control",
    "condition_name",
)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RawTable:
    """An unharmonized dataset: per-cell metadata columns plus expression.

    ``obs`` maps column name to a 1-D array (string, float, or bool) of
    length n_cells. ``var_index`` holds the gene identifier column;
    ``var_columns`` holds any further gene metadata. ``obsm`` holds optional
    named per-cell matrices.
    """

    obs: dict[str, np.ndarray]
    var_index: np.ndarray
    var_columns: dict[str, np.ndarray] = field(default_factory=dict)
    X: np.ndarray = None  # type: ignore[assignment]
    obsm: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.X is None:
            raise ValidationError("RawTable requires an expression matrix X")
        X = np.asarray(self.X, dtype=np.float64)
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(
            self, "obs", {k: _freeze(np.asarray(v)) for k, v in self.obs.items()}
        )
        object.__setattr__(self, "var_index", _freeze(np.asarray(self.var_index)))
        object.__setattr__(
            self,
            "var_columns",
            {k: _freeze(np.asarray(v)) for k, v in self.var_columns.items()},
        )
        object.__setattr__(
            self, "obsm", {k: _freeze(np.asarray(v)) for k, v in self.obsm.items()}
        )
        n_cells, n_genes = self.X.shape
        for name, col in self.obs.items():
            if col.shape != (n_cells,):
                raise ValidationError(
                    f"obs column {name!r} has length {col.shape}, expected ({n_cells},)"
                )
        if self.var_index.shape != (n_genes,):
            raise ValidationError(
                f"var index has length {self.var_index.shape[0]}, expected {n_genes}"
            )
        for name, col in self.var_columns.items():
            if col.shape != (n_genes,):
                raise ValidationError(
                    f"var column {name!r} has length {col.shape[0]}, expected {n_genes}"
                )
        for name, m in self.obsm.items():
            if m.ndim != 2 or m.shape[0] != n_cells:
                raise ValidationError(
                    f"obsm matrix {name!r} has shape {m.shape}, expected ({n_cells}, k)"
                )

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def n_genes(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class CanonicalDataset:
    """A dataset aligned to the canonical perturbation schema."""

    cell_type: np.ndarray
    batch_id: np.ndarray
    donor_id: np.ndarray
    pert_type: np.ndarray
    is_control: np.ndarray
    condition_name: np.ndarray
    X: np.ndarray
    pert_mask: np.ndarray
    pert_dose: np.ndarray
    ensembl_id: np.ndarray
    gene_symbol: np.ndarray
    pert_vocab: tuple[str, ...]
    extra_obs: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.condition_name)
        for name in ("cell_type", "batch_id", "donor_id", "pert_type", "condition_name"):
            arr = np.asarray(getattr(self, name), dtype=object)
            object.__setattr__(self, name, _freeze(arr))
        object.__setattr__(
            self, "is_control", _freeze(np.asarray(self.is_control, dtype=bool))
        )
        object.__setattr__(self, "X", _freeze(np.asarray(self.X, dtype=np.float64)))
        object.__setattr__(
            self, "pert_mask", _freeze(np.asarray(self.pert_mask, dtype=np.uint8))
        )
        object.__setattr__(
            self, "pert_dose", _freeze(np.asarray(self.pert_dose, dtype=np.float64))
        )
        object.__setattr__(
            self, "ensembl_id", _freeze(np.asarray(self.ensembl_id, dtype=object))
        )
        object.__setattr__(
            self, "gene_symbol", _freeze(np.asarray(self.gene_symbol, dtype=object))
        )
        object.__setattr__(self, "pert_vocab", tuple(self.pert_vocab))
        object.__setattr__(
            self,
            "extra_obs",
            {k: _freeze(np.asarray(v, dtype=object)) for k, v in self.extra_obs.items()},
        )
        p = len(self.pert_vocab)
        g = self.X.shape[1] if self.X.ndim == 2 else -1
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise ValidationError(f"X has shape {self.X.shape}, expected ({n}, genes)")
        for name in ("cell_type", "batch_id", "donor_id", "pert_type", "is_control"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"obs column {name!r} length mismatch")
        if self.pert_mask.shape != (n, p):
            raise ValidationError(
                f"pert_mask has shape {self.pert_mask.shape}, expected ({n}, {p})"
            )
        if self.pert_dose.shape != (n, p):
            raise ValidationError(
                f"pert_dose has shape {self.pert_dose.shape}, expected ({n}, {p})"
            )
        if len(self.ensembl_id) != g or len(self.gene_symbol) != g:
            raise ValidationError("var columns do not match gene count")
        for name, col in self.extra_obs.items():
            if len(col) != n:
                raise ValidationError(f"extra obs column {name!r} length mismatch")

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def n_genes(self) -> int:
        return self.X.shape[1]

    @property
    def n_perts(self) -> int:
        return len(self.pert_vocab)

    def obs_columns(self) -> dict[str, np.ndarray]:
        """All obs columns (canonical first, then extras) in a fixed order."""
        cols: dict[str, np.ndarray] = {k: getattr(self, k) for k in CANONICAL_OBS_KEYS}
        cols.update(self.extra_obs)
        return cols


@dataclass(frozen=True)
class PseudoBulkProfile:
    """Mean expression over all cells of one condition."""

    condition_name: str
    mean_expr: np.ndarray
    n_cells: int

    def __post_init__(self):
        object.__setattr__(
            self, "mean_expr", _freeze(np.asarray(self.mean_expr, dtype=np.float64))
        )


@dataclass(frozen=True)
class SplitAssignment:
    """Per-cell train/val/test labels plus the strategy that produced them."""

    labels: np.ndarray
    split_kind: str
    seed: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=object)
        bad = set(labels.tolist()) - set(SPLIT_LABELS)
        if bad:
            raise ValidationError(f"unknown split labels: {sorted(bad)}")
        object.__setattr__(self, "labels", _freeze(labels))

    def indices(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...]

    @property
    def ok(self) -> bool:
        return not self.issues

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"[{i.code}] {i.message}" for i in self.issues)


def normalize_log1p(
    X: np.ndarray,
    target_sum: float,
    is_already_log1p: bool,
    normalization_required: bool,
) -> np.ndarray:
    """Total-count normalize each row to ``target_sum``, then apply log1p.

    When ``is_already_log1p`` is set the matrix is returned unchanged. When
    ``normalization_required`` is false the scaling step is skipped but log1p
    still applies. Rows summing to zero pass through unscaled (empty droplets
    must not abort a batch job); the same applies to rows so close to zero
    that the scale factor would overflow.
    """
    X = np.asarray(X, dtype=np.float64)
    if target_sum <= 0:
        raise ParameterError(f"target_sum must be positive, got {target_sum}")
    neg = np.argwhere(X < 0)
    if neg.size:
        i, j = neg[0]
        raise ValidationError(
            f"negative expression value {X[i, j]} at cell X[{i}, {j}]"
        )
    if is_already_log1p:
        return X
    out = X.copy()
    if normalization_required:
        sums = out.sum(axis=1)
        with np.errstate(over="ignore", divide="ignore"):
            scale = np.divide(
                target_sum, sums, out=np.zeros_like(sums), where=sums > 0
            )
        usable = (sums > 0) & np.isfinite(scale)
        out[usable] = out[usable] * scale[usable][:, None]
    return np.log1p(out)


def select_hvg(ds: CanonicalDataset, k: int) -> CanonicalDataset:
    """Restrict to the k most variable genes.

    Variance is the population variance of the stored (log-space) values.
    Ties break toward the lower original gene index, and the surviving genes
    keep their original relative order.
    """
    g = ds.n_genes
    if k < 1 or k > g:
        raise ParameterError(f"k must be in [1, {g}], got {k}")
    if k == g:
        return ds
    variances = ds.X.var(axis=0)
    # sort by variance descending, ties by ascending index
    order = np.lexsort((np.arange(g), -variances))
    keep = np.sort(order[:k])
    return CanonicalDataset(
        cell_type=ds.cell_type,
        batch_id=ds.batch_id,
        donor_id=ds.donor_id,
        pert_type=ds.pert_type,
        is_control=ds.is_control,
        condition_name=ds.condition_name,
        X=ds.X[:, keep],
        pert_mask=ds.pert_mask,
        pert_dose=ds.pert_dose,
        ensembl_id=ds.ensembl_id[keep],
        gene_symbol=ds.gene_symbol[keep],
        pert_vocab=ds.pert_vocab,
        extra_obs=dict(ds.extra_obs),
    )


def pseudo_bulk(
    ds: CanonicalDataset, cells: np.ndarray | None = None
) -> list[PseudoBulkProfile]:
    """Per-condition mean expression profiles over a cell subset.

    Returns one profile per distinct condition_name present in the subset
    (control conditions included, labeled by their own condition name).
    Profiles come back sorted by condition name for determinism.
    """
    if cells is None:
        cells = np.arange(ds.n_cells)
    cells = np.asarray(cells)
    if cells.dtype == bool:
        cells = np.flatnonzero(cells)
    if cells.size == 0:
        raise ParameterError("cell subset is empty")
    names = ds.condition_name[cells]
    profiles = []
    for cond in sorted(set(names.tolist())):
        member = cells[names == cond]
        mean = ds.X[member].mean(axis=0)
        profiles.append(
            PseudoBulkProfile(condition_name=cond, mean_expr=mean, n_cells=member.size)
        )
    return profiles


def _partition_by_cumulative_ratio(
    n_items: int, ratios: tuple[float, float, float]
) -> tuple[int, int, int]:
    """Split n_items into three groups matching ratios within one item."""
    total = sum(ratios)
    if total <= 0:
        return (n_items, 0, 0)
    r = [x / total for x in ratios]
    b1 = int(math.floor(r[0] * n_items + 0.5))
    b2 = int(math.floor((r[0] + r[1]) * n_items + 0.5))
    b1 = min(b1, n_items)
    b2 = min(max(b2, b1), n_items)
    return (b1, b2 - b1, n_items - b2)


def split_unseen_perturbation(
    ds: CanonicalDataset, train_frac: float, seed: int
) -> SplitAssignment:
    """Hold out whole perturbation conditions for validation and test.

    Non-control condition names are shuffled by a seeded permutation; the
    first floor(train_frac * n) go to train and the remainder alternate
    val/test starting with val. Control cells are shuffled separately and
    partitioned at the same effective cell-count ratios as the non-control
    cells.
    """
    if not (0 < train_frac < 1):
        raise ParameterError(f"train_frac must be in (0, 1), got {train_frac}")
    rng = np.random.default_rng(seed)
    control = ds.is_control
    noncontrol_names = ds.condition_name[~control]
    conds = sorted(set(noncontrol_names.tolist()))
    if len(conds) < 2:
        raise ParameterError(
            f"need at least 2 non-control conditions, found {len(conds)}"
        )
    perm = rng.permutation(len(conds))
    shuffled = [conds[i] for i in perm]
    n_train = int(math.floor(train_frac * len(conds)))
    assignment: dict[str, str] = {}
    for c in shuffled[:n_train]:
        assignment[c] = "train"
    for i, c in enumerate(shuffled[n_train:]):
        assignment[c] = "val" if i % 2 == 0 else "test"

    labels = np.empty(ds.n_cells, dtype=object)
    for idx in np.flatnonzero(~control):
        labels[idx] = assignment[ds.condition_name[idx]]

    # controls follow the effective non-control cell-count ratios
    counts = {lab: 0 for lab in SPLIT_LABELS}
    for idx in np.flatnonzero(~control):
        counts[labels[idx]] += 1
    ctrl_idx = np.flatnonzero(control)
    shuffled_ctrl = ctrl_idx[rng.permutation(ctrl_idx.size)]
    n_tr, n_va, _ = _partition_by_cumulative_ratio(
        ctrl_idx.size, (counts["train"], counts["val"], counts["test"])
    )
    labels[shuffled_ctrl[:n_tr]] = "train"
    labels[shuffled_ctrl[n_tr : n_tr + n_va]] = "val"
    labels[shuffled_ctrl[n_tr + n_va :]] = "test"
    return SplitAssignment(labels=labels, split_kind="unseen_perturbation", seed=seed)


def split_unseen_cell(
    ds: CanonicalDataset,
    holdout_cell_type: str,
    val_frac_of_holdout: float,
    seed: int,
) -> SplitAssignment:
    """Reserve one cell type entirely for validation and test."""
    if not (0 < val_frac_of_holdout < 1):
        raise ParameterError(
            f"val_frac_of_holdout must be in (0, 1), got {val_frac_of_holdout}"
        )
    holdout = ds.cell_type == holdout_cell_type
    n_hold = int(holdout.sum())
    if n_hold == 0:
        known = sorted(set(ds.cell_type.tolist()))
        raise ParameterError(
            f"cell type {holdout_cell_type!r} not present; known types: {known}"
        )
    rng = np.random.default_rng(seed)
    labels = np.empty(ds.n_cells, dtype=object)
    labels[~holdout] = "train"
    hold_idx = np.flatnonzero(holdout)
    shuffled = hold_idx[rng.permutation(n_hold)]
    n_val = int(math.floor(val_frac_of_holdout * n_hold + 0.5))
    labels[shuffled[:n_val]] = "val"
    labels[shuffled[n_val:]] = "test"
    return SplitAssignment(labels=labels, split_kind="unseen_cell", seed=seed)


def validate_canonical(ds: CanonicalDataset) -> ValidationReport:
    """Check every canonical-schema invariant; violations become report entries."""
    issues: list[ValidationIssue] = []

    ids = ds.ensembl_id.tolist()
    seen: dict[str, int] = {}
    for j, eid in enumerate(ids):
        if eid in seen:
            issues.append(
                ValidationIssue(
                    "duplicate_ensembl_id",
                    f"ensembl_id {eid!r} appears at gene rows {seen[eid]} and {j}",
                )
            )
        else:
            seen[eid] = j

    bad_mask = np.argwhere((ds.pert_mask != 0) & (ds.pert_mask != 1))
    if bad_mask.size:
        i, j = bad_mask[0]
        issues.append(
            ValidationIssue(
                "mask_not_binary",
                f"pert_mask[{i}, {j}] = {ds.pert_mask[i, j]} is not in {{0, 1}} "
                f"({len(bad_mask)} offending entries)",
            )
        )

    neg_dose = np.argwhere(ds.pert_dose < 0)
    if neg_dose.size:
        i, j = neg_dose[0]
        issues.append(
            ValidationIssue(
                "negative_dose",
                f"pert_dose[{i}, {j}] = {ds.pert_dose[i, j]} is negative "
                f"({len(neg_dose)} offending entries)",
            )
        )

    stray = (ds.pert_mask == 0) & (ds.pert_dose != 0)
    for i in np.flatnonzero(stray.any(axis=1)):
        j = int(np.flatnonzero(stray[i])[0])
        issues.append(
            ValidationIssue(
                "dose_without_mask",
                f"cell {i} has nonzero pert_dose[{i}, {j}] where pert_mask is 0",
            )
        )

    ctrl_nonzero = ds.is_control & (ds.pert_mask.sum(axis=1) > 0)
    for i in np.flatnonzero(ctrl_nonzero):
        issues.append(
            ValidationIssue(
                "control_with_mask",
                f"control cell {i} has a nonzero pert_mask row",
            )
        )

    neg_x = np.argwhere(ds.X < 0)
    if neg_x.size:
        i, j = neg_x[0]
        issues.append(
            ValidationIssue(
                "negative_expression",
                f"X[{i}, {j}] = {ds.X[i, j]} is negative ({len(neg_x)} entries)",
            )
        )

    bad_types = sorted(set(ds.pert_type.tolist()) - set(PERT_TYPES))
    if bad_types:
        issues.append(
            ValidationIssue(
                "unknown_pert_type",
                f"pert_type values {bad_types} not in {list(PERT_TYPES)}",
            )
        )

    # identical (mask row, dose row) patterns must share one condition name
    pattern_names: dict[bytes, tuple[str, int]] = {}
    reported: set[bytes] = set()
    for i in range(ds.n_cells):
        key = ds.pert_mask[i].tobytes() + ds.pert_dose[i].tobytes()
        name = ds.condition_name[i]
        if key not in pattern_names:
            pattern_names[key] = (name, i)
        elif pattern_names[key][0] != name and key not in reported:
            first_name, first_row = pattern_names[key]
            issues.append(
                ValidationIssue(
                    "condition_name_conflict",
                    f"cells {first_row} and {i} share one mask/dose pattern but have "
                    f"condition names {first_name!r} and {name!r}",
                )
            )
            reported.add(key)

    return ValidationReport(issues=tuple(issues))
