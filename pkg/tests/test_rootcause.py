"""Rule-DSL parsing, Kleene evaluation against a min/max oracle, and
symptom binding."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dsl_corpus
from tracekit.rootcause import (
    BUILTIN_PROCEDURES,
    And,
    BindingError,
    DuplicateDeclarationError,
    Not,
    Or,
    RuleSyntaxError,
    SymRef,
    UndeclaredSymptomError,
    bind_symptoms,
    evaluate,
    evaluate_expr,
    format_rules,
    parse_rules,
)

CONGESTION = ("SYMPTOM high_rtt\nSYMPTOM retrans\n"
              "PATHOLOGY congestion DEF ( high_rtt AND retrans )\n")


def test_parse_congestion_example():
    rs = parse_rules(CONGESTION)
    assert rs.symptom_names == ("high_rtt", "retrans")
    assert len(rs.pathologies) == 1
    name, expr = rs.pathologies[0]
    assert name == "congestion"
    assert expr == And(SymRef("high_rtt"), SymRef("retrans"))


def test_parse_errors_carry_line_and_column():
    with pytest.raises(RuleSyntaxError) as err:
        parse_rules("SYMPTOM a\nPATHOLOGY p DEF ( a AND\n")
    assert err.value.line == 2
    with pytest.raises(RuleSyntaxError) as err:
        parse_rules("SYMPTOM a\nPATHOLOGY p DEF a )\n")
    assert err.value.line == 2 and err.value.col > 0


def test_undeclared_symptom_rejected():
    with pytest.raises(UndeclaredSymptomError):
        parse_rules("PATHOLOGY p DEF missing_sym\n")


def test_duplicate_declarations_rejected():
    with pytest.raises(DuplicateDeclarationError):
        parse_rules("SYMPTOM a\nSYMPTOM a\n")


def test_precedence_not_over_and_over_or():
    rs = parse_rules("SYMPTOM a\nSYMPTOM b\nSYMPTOM c\n"
                     "PATHOLOGY p DEF a OR NOT b AND c\n")
    _, expr = rs.pathologies[0]
    assert expr == Or(SymRef("a"), And(Not(SymRef("b")), SymRef("c")))


def test_corpus_labels():
    for name, text in dsl_corpus.VALID:
        parse_rules(text)  # must not raise
    for name, text in dsl_corpus.INVALID:
        with pytest.raises((RuleSyntaxError, UndeclaredSymptomError,
                            DuplicateDeclarationError)):
            parse_rules(text)


def test_corpus_sizes():
    assert len(dsl_corpus.VALID) >= 30
    assert len(dsl_corpus.INVALID) >= 20


def test_print_parse_fixpoint_on_corpus():
    for name, text in dsl_corpus.VALID:
        rs = parse_rules(text)
        printed = format_rules(rs)
        assert parse_rules(printed) == rs


# -- evaluation ----------------------------------------------------------------

def test_kleene_truth_table_for_and():
    rs = parse_rules(CONGESTION)
    assert evaluate(rs, {"high_rtt": True, "retrans": True}).matched == ("congestion",)
    assert evaluate(rs, {"high_rtt": True, "retrans": False}).matched == ()
    result = evaluate(rs, {"high_rtt": True, "retrans": None})
    assert result.matched == ()
    assert result.detail_dict["congestion"] is None


def test_unknown_propagation_rules():
    env = {"a": None, "b": False, "c": True}
    assert evaluate_expr(And(SymRef("a"), SymRef("b")), env) is False
    assert evaluate_expr(Or(SymRef("a"), SymRef("c")), env) is True
    assert evaluate_expr(Or(SymRef("a"), SymRef("b")), env) is None
    assert evaluate_expr(Not(SymRef("a")), env) is None


def test_evaluation_requires_total_assignment():
    rs = parse_rules(CONGESTION)
    with pytest.raises(ValueError):
        evaluate(rs, {"high_rtt": True})


# Random-AST property: Kleene connectives equal the min/max encoding with
# T=1, U=1/2, F=0 (AND=min, OR=max, NOT=1-x).

NAMES = ["s0", "s1", "s2", "s3", "s4"]


def exprs(depth):
    if depth == 0:
        return st.sampled_from(NAMES).map(SymRef)
    sub = exprs(depth - 1)
    return st.one_of(
        st.sampled_from(NAMES).map(SymRef),
        sub.map(Not),
        st.tuples(sub, sub).map(lambda ab: And(*ab)),
        st.tuples(sub, sub).map(lambda ab: Or(*ab)),
    )


def numeric_eval(expr, env):
    if isinstance(expr, SymRef):
        return env[expr.name]
    if isinstance(expr, Not):
        return 1.0 - numeric_eval(expr.operand, env)
    if isinstance(expr, And):
        return min(numeric_eval(expr.left, env), numeric_eval(expr.right, env))
    return max(numeric_eval(expr.left, env), numeric_eval(expr.right, env))


_TO_NUM = {True: 1.0, None: 0.5, False: 0.0}
_FROM_NUM = {1.0: True, 0.5: None, 0.0: False}


@settings(max_examples=300, deadline=None)
@given(expr=exprs(5),
       values=st.tuples(*[st.sampled_from([True, False, None])] * len(NAMES)))
def test_random_ast_matches_numeric_oracle(expr, values):
    env = dict(zip(NAMES, values))
    numeric_env = {k: _TO_NUM[v] for k, v in env.items()}
    assert evaluate_expr(expr, env) == _FROM_NUM[numeric_eval(expr, numeric_env)]


@settings(max_examples=150, deadline=None)
@given(expr=exprs(3),
       values=st.tuples(*[st.sampled_from([True, False, None])] * len(NAMES)),
       refine=st.sampled_from(NAMES),
       to=st.booleans())
def test_refining_unknown_never_flips_definite(expr, values, refine, to):
    env = dict(zip(NAMES, values))
    before = evaluate_expr(expr, env)
    if env[refine] is None:
        refined = dict(env)
        refined[refine] = to
        after = evaluate_expr(expr, refined)
        if before is not None:
            assert after == before


# -- binding --------------------------------------------------------------------

BOUND = ("SYMPTOM high_rtt\nSYMPTOM retrans\nSYMPTOM mystery\n"
         "PROCEDURE high_rtt high_rtt_variation\n"
         "PROCEDURE retrans high_retrans\n"
         "PATHOLOGY congestion DEF ( high_rtt AND retrans )\n"
         "PATHOLOGY spooky DEF mystery\n")


def test_bound_ruleset_evaluates_signals():
    bound = bind_symptoms(parse_rules(BOUND), BUILTIN_PROCEDURES)
    result = bound.evaluate_against({"rtt_variation": 0.5, "retrans_segments": 4})
    assert result.matched == ("congestion",)
    assert result.detail_dict["spooky"] is None  # unbound symptom -> unknown


def test_unbound_symptom_is_unknown_everywhere():
    bound = bind_symptoms(parse_rules(BOUND), BUILTIN_PROCEDURES)
    result = bound.evaluate_against({})
    assert result.detail_dict["spooky"] is None


def test_missing_procedure_listed_in_error():
    text = "SYMPTOM a\nPROCEDURE a not_a_real_procedure\n"
    with pytest.raises(BindingError) as err:
        bind_symptoms(parse_rules(text), BUILTIN_PROCEDURES)
    assert "not_a_real_procedure" in str(err.value)
