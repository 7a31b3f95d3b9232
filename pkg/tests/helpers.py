"""Shared test helpers: independent oracles and fixture builders.

The metric oracle here is a deliberately naive pure-Python reimplementation
(no shared code with the package) used to cross-check the vectorized
implementations. The expression generator draws ASTs from the grammar's
derivation space, so every generated tree is reachable by the parser.
"""

from __future__ import annotations

import math
import random

import numpy as np

from pertpipe import dsl
from pertpipe.data import CanonicalDataset


# --------------------------------------------------------------------------
# naive metric oracles (plain loops, no numpy vector ops)


def oracle_rmse(y, y_hat):
    total = 0.0
    for a, b in zip(y, y_hat):
        total += (a - b) ** 2
    return math.sqrt(total / len(y))


def oracle_pcc(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sxx = syy = 0.0
    for a, b in zip(x, y):
        cov += (a - mx) * (b - my)
        sxx += (a - mx) ** 2
        syy += (b - my) ** 2
    denom = math.sqrt(sxx) * math.sqrt(syy)
    if denom == 0:
        return None
    return cov / denom


def oracle_cosine(x, y):
    dot = nx = ny = 0.0
    for a, b in zip(x, y):
        dot += a * b
        nx += a * a
        ny += b * b
    denom = math.sqrt(nx) * math.sqrt(ny)
    if denom == 0:
        return None
    return dot / denom


def oracle_condition_metrics(y_true, y_pred, y_ctrl):
    """Per-condition metric triple from plain lists."""
    delta = [a - c for a, c in zip(y_true, y_ctrl)]
    delta_hat = [a - c for a, c in zip(y_pred, y_ctrl)]
    return {
        "rmse": oracle_rmse(y_true, y_pred),
        "delta_pcc": oracle_pcc(delta, delta_hat),
        "cos_logfc": oracle_cosine(delta, delta_hat),
    }


# --------------------------------------------------------------------------
# grammar-derived random expressions


_COLUMNS = ["drug_id", "conc_um", "cell_line", "guide", "dose", "batch"]
_STRINGS = ["DMSO", "Ctrl", "KRAS knockdown", "a_b", "x 1", ""]


def random_expr(rng: random.Random, depth: int = 6) -> dsl.Expr:
    return _gen_or(rng, depth)


def _gen_or(rng, depth):
    node = _gen_and(rng, depth)
    for _ in range(rng.choice([0, 0, 1]) if depth > 1 else 0):
        node = dsl.BinOp("or", node, _gen_and(rng, depth - 1))
    return node


def _gen_and(rng, depth):
    node = _gen_cmp(rng, depth)
    for _ in range(rng.choice([0, 0, 1]) if depth > 1 else 0):
        node = dsl.BinOp("and", node, _gen_cmp(rng, depth - 1))
    return node


def _gen_cmp(rng, depth):
    node = _gen_sum(rng, depth)
    if depth > 1 and rng.random() < 0.4:
        node = dsl.BinOp(rng.choice(["==", "!="]), node, _gen_sum(rng, depth - 1))
    return node


def _gen_sum(rng, depth):
    node = _gen_term(rng, depth)
    for _ in range(rng.choice([0, 0, 1, 2]) if depth > 1 else 0):
        node = dsl.BinOp(rng.choice(["+", "-"]), node, _gen_term(rng, depth - 1))
    return node


def _gen_term(rng, depth):
    node = _gen_postfix(rng, depth)
    for _ in range(rng.choice([0, 0, 1]) if depth > 1 else 0):
        node = dsl.BinOp(rng.choice(["*", "/"]), node, _gen_postfix(rng, depth - 1))
    return node


def _gen_postfix(rng, depth):
    node = _gen_atom(rng, depth)
    for _ in range(rng.choice([0, 0, 0, 1]) if depth > 0 else 0):
        if rng.random() < 0.6:
            node = dsl.Cast(rng.choice(["float", "str"]), node)
        else:
            node = dsl.IsIn(node, _gen_list(rng))
    return node


def _gen_list(rng):
    kind = rng.choice(["str", "num", "bool"])
    n = rng.randint(1, 3)
    if kind == "str":
        items = tuple(rng.choice(_STRINGS) for _ in range(n))
    elif kind == "num":
        items = tuple(float(rng.randint(-50, 1000)) for _ in range(n))
    else:
        items = tuple(rng.choice([True, False]) for _ in range(n))
    return dsl.ListLit(items)


def _gen_atom(rng, depth):
    choices = ["column", "str", "num", "bool"]
    if depth > 1:
        choices.append("paren")
    kind = rng.choice(choices)
    if kind == "column":
        return dsl.ColumnRef(rng.choice(_COLUMNS))
    if kind == "str":
        return dsl.StrLit(rng.choice(_STRINGS))
    if kind == "num":
        return dsl.NumLit(float(rng.choice([0, 1, 10, 1000, -5, 2.5, 0.125])))
    if kind == "bool":
        return dsl.BoolLit(rng.choice([True, False]))
    return dsl.Paren(_gen_or(rng, depth - 1))


# --------------------------------------------------------------------------
# dataset builders


def small_canonical(
    conditions: dict[str, list[list[float]]],
    control_name: str = "control",
    vocab: tuple[str, ...] | None = None,
    doses: dict[str, float] | None = None,
) -> CanonicalDataset:
    """Build a canonical dataset from {condition: list of expression rows}.

    Conditions other than ``control_name`` get a one-hot mask over the vocab
    (default: sorted non-control condition names).
    """
    if vocab is None:
        vocab = tuple(sorted(c for c in conditions if c != control_name))
    rows, names, ctrl = [], [], []
    for cond in conditions:
        for row in conditions[cond]:
            rows.append(row)
            names.append(cond)
            ctrl.append(cond == control_name)
    n = len(rows)
    mask = np.zeros((n, len(vocab)), dtype=np.uint8)
    dose = np.zeros((n, len(vocab)))
    for i, cond in enumerate(names):
        if cond != control_name and cond in vocab:
            j = vocab.index(cond)
            mask[i, j] = 1
            if doses and cond in doses:
                dose[i, j] = doses[cond]
    g = len(rows[0])
    return CanonicalDataset(
        cell_type=np.array(["T0"] * n, dtype=object),
        batch_id=np.array(["b0"] * n, dtype=object),
        donor_id=np.array(["d0"] * n, dtype=object),
        pert_type=np.array(
            ["control" if c else "crispr" for c in ctrl], dtype=object
        ),
        is_control=np.array(ctrl, dtype=bool),
        condition_name=np.array(names, dtype=object),
        X=np.array(rows, dtype=np.float64),
        pert_mask=mask,
        pert_dose=dose,
        ensembl_id=np.array([f"ENSG{j:011d}" for j in range(g)], dtype=object),
        gene_symbol=np.array([f"G{j}" for j in range(g)], dtype=object),
        pert_vocab=vocab,
    )
