from __future__ import annotations

import random

import numpy as np
import pytest

from helpers import random_expr
from pertpipe import dsl
from pertpipe.dsl import (
    BinOp,
    BoolLit,
    Cast,
    ColumnRef,
    DslEvalError,
    DslSyntaxError,
    IsIn,
    ListLit,
    NumLit,
    StrLit,
    UnsupportedConstructError,
    evaluate,
    format_expr,
    parse,
)

NEGATIVE_CORPUS = [
    "df['a'].apply(lambda x: x)",
    "df['a'].str.upper()",
    "lambda x: x",
    "df['a'][0]",
    "df['a'].astype(int)",
    "df['a'].astype(bool)",
    "df['a'] < 5",
    "df['a'] >= 5",
    "df['a'] ** 2",
    "df['a'] % 2",
    "df['a'] & df['b']",
    "df['a'] | df['b']",
    "not df['a']",
    "df.a",
    "df['a'] == df['b'] == df['c']",
    "df['a'].isin(df['b'])",
    "adata.var['x']",
    "foo(df['a'])",
    "df['a'] if True else df['b']",
    "-df['a']",
]


class TestParse:
    def test_equality_with_string(self):
        assert parse("adata.obs['col'] == 'control'") == BinOp(
            "==", ColumnRef("col"), StrLit("control")
        )

    def test_cast_and_multiply(self):
        assert parse("df['conc_um'].astype(float) * 1000") == BinOp(
            "*", Cast("float", ColumnRef("conc_um")), NumLit(1000.0)
        )

    def test_string_concat_left_associative(self):
        expr = parse("adata.obs['A'].astype(str) + '_' + adata.obs['B'].astype(str)")
        assert expr == BinOp(
            "+",
            BinOp("+", Cast("str", ColumnRef("A")), StrLit("_")),
            Cast("str", ColumnRef("B")),
        )

    def test_whitespace_insensitive(self):
        a = parse("df['x']==1")
        b = parse("  df[ 'x' ]   ==  1  ")
        assert a == b

    def test_both_column_spellings(self):
        assert parse("df['c']") == parse("adata.obs['c']") == ColumnRef("c")

    def test_isin_list(self):
        assert parse("df['a'].isin(['Ctrl', 'DMSO'])") == IsIn(
            ColumnRef("a"), ListLit(("Ctrl", "DMSO"))
        )

    def test_parens_preserved(self):
        expr = parse("(df['a'] == 'x') and df['b'] == 'y'")
        assert isinstance(expr.lhs, dsl.Paren)

    def test_negative_number_literal(self):
        assert parse("-5 * 2") == BinOp("*", NumLit(-5.0), NumLit(2.0))

    def test_booleans(self):
        assert parse("True") == BoolLit(True)
        assert parse("False") == BoolLit(False)

    def test_empty_input(self):
        with pytest.raises(DslSyntaxError):
            parse("   ")

    def test_syntax_error_carries_offset_and_expectations(self):
        with pytest.raises(DslSyntaxError) as err:
            parse("df['a'] == ")
        assert err.value.offset == 11
        assert err.value.expected

    def test_unterminated_string(self):
        with pytest.raises(DslSyntaxError, match="unterminated"):
            parse("df['a")

    def test_mixed_type_list_rejected(self):
        with pytest.raises(DslSyntaxError, match="mixes"):
            parse("df['a'].isin([1, 'b'])")

    @pytest.mark.parametrize("text", NEGATIVE_CORPUS)
    def test_negative_corpus_rejected_as_unsupported(self, text):
        with pytest.raises(UnsupportedConstructError) as err:
            parse(text)
        assert "unsupported construct" in str(err.value)


class TestFormat:
    def test_column_canonical_spelling(self):
        assert format_expr(ColumnRef("x")) == "df['x']"

    @pytest.mark.parametrize(
        "text",
        [
            "adata.obs['col'] == 'control'",
            "df['conc_um'].astype(float) * 1000",
            "adata.obs['A'].astype(str) + '_' + adata.obs['B'].astype(str)",
        ],
    )
    def test_reference_expressions_reach_fixpoint(self, text):
        once = parse(text)
        rendered = format_expr(once)
        again = parse(rendered)
        assert once == again
        assert format_expr(again) == rendered

    def test_right_nested_binop_gets_parentheses(self):
        expr = BinOp("+", NumLit(1.0), BinOp("+", NumLit(2.0), NumLit(3.0)))
        assert format_expr(expr) == "1.0 + (2.0 + 3.0)"

    def test_escaped_quote_round_trip(self):
        lit = StrLit("it's")
        assert parse(format_expr(lit)) == lit

    def test_random_ast_round_trip(self):
        rng = random.Random(2024)
        for _ in range(300):
            expr = random_expr(rng, depth=6)
            assert parse(format_expr(expr)) == expr


class TestEvaluate:
    def test_equality_elementwise(self):
        cols = {"drug_id": np.array(["DMSO", "X", "DMSO"], dtype=object)}
        out = evaluate(parse("df['drug_id'] == 'DMSO'"), cols)
        assert out.tolist() == [True, False, True]

    def test_cast_float_and_scale(self):
        cols = {"conc_um": np.array(["10"], dtype=object)}
        out = evaluate(parse("df['conc_um'].astype(float) * 1000"), cols)
        assert out.tolist() == [10000.0]

    def test_isin(self):
        cols = {"a": np.array(["Ctrl", "Drug"], dtype=object)}
        out = evaluate(parse("df['a'].isin(['Ctrl', 'DMSO'])"), cols)
        assert out.tolist() == [True, False]

    def test_string_concat(self):
        cols = {
            "A": np.array(["g1", "g2"], dtype=object),
            "B": np.array(["x", "y"], dtype=object),
        }
        out = evaluate(
            parse("adata.obs['A'].astype(str) + '_' + adata.obs['B'].astype(str)"),
            cols,
        )
        assert out.tolist() == ["g1_x", "g2_y"]

    def test_missing_column_lists_available(self):
        with pytest.raises(DslEvalError) as err:
            evaluate(parse("df['nope']"), {"a": np.array([1.0]), "b": np.array([2.0])})
        message = str(err.value)
        assert "'nope'" in message and "a" in message and "b" in message

    def test_type_mismatch_string_times_number(self):
        with pytest.raises(DslEvalError, match="type mismatch"):
            evaluate(parse("df['a'] * 2"), {"a": np.array(["x"], dtype=object)})

    def test_division_by_zero_names_row(self):
        cols = {"a": np.array([1.0, 2.0]), "b": np.array([1.0, 0.0])}
        with pytest.raises(DslEvalError, match="row 1"):
            evaluate(parse("df['a'] / df['b']"), cols)

    def test_and_or_elementwise_both_operands(self):
        cols = {
            "a": np.array([True, True, False]),
            "b": np.array([True, False, False]),
        }
        assert evaluate(parse("df['a'] and df['b']"), cols).tolist() == [True, False, False]
        assert evaluate(parse("df['a'] or df['b']"), cols).tolist() == [True, True, False]

    def test_boolean_op_requires_booleans(self):
        cols = {"a": np.array([1.0, 2.0])}
        with pytest.raises(DslEvalError, match="type mismatch"):
            evaluate(parse("df['a'] and df['a']"), cols)

    def test_scalar_broadcast_result(self):
        # a pure-literal expression evaluates to a broadcastable scalar
        assert evaluate(parse("2 * 3"), {"a": np.array([0.0])}) == 6.0

    def test_cast_float_failure_names_row(self):
        cols = {"a": np.array(["1.5", "oops"], dtype=object)}
        with pytest.raises(DslEvalError, match="row 1"):
            evaluate(parse("df['a'].astype(float)"), cols)

    def test_numeric_equality_after_cast(self):
        cols = {"a": np.array(["2", "3"], dtype=object)}
        out = evaluate(parse("df['a'].astype(float) == 2"), cols)
        assert out.tolist() == [True, False]

    def test_comparing_mismatched_kinds_fails(self):
        cols = {"a": np.array([1.0, 2.0])}
        with pytest.raises(DslEvalError, match="compare"):
            evaluate(parse("df['a'] == 'x'"), cols)

    def test_determinism(self):
        cols = {"a": np.array(["u", "v"], dtype=object)}
        expr = parse("df['a'] != 'u'")
        assert evaluate(expr, cols).tolist() == evaluate(expr, cols).tolist()
