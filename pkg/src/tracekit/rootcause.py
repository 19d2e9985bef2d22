"""Operator-supplied root-cause rules: a small line-oriented DSL plus a
three-valued evaluator.

Rule files look like::

    SYMPTOM high_rtt
    SYMPTOM retrans
    PROCEDURE high_rtt high_rtt_variation
    PATHOLOGY congestion DEF ( high_rtt AND retrans )

Keywords are case-sensitive. A pathology is a boolean expression over
declared symptoms combining AND, OR, NOT and parentheses (precedence
NOT > AND > OR; NOT may apply to any parenthesized expression). PROCEDURE
binds a symptom to a named predicate over diagnosis inputs; unbound
symptoms evaluate to unknown.

Evaluation uses Kleene three-valued logic so missing instrumentation
degrades gracefully: unknown propagates through the connectives and a
pathology matches only when its expression is definitely true. Refining an
unknown symptom to true or false never flips an already-definite result.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Union

Tri = Optional[bool]  # True / False / None (unknown)


class RuleSyntaxError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class UndeclaredSymptomError(ValueError):
    pass


class DuplicateDeclarationError(ValueError):
    pass


class BindingError(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__(f"no procedure registered for: {', '.join(missing)}")
        self.missing = tuple(missing)


# -- expression AST ---------------------------------------------------------

@dataclass(frozen=True)
class SymRef:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "Expr"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"


Expr = Union[SymRef, Not, And, Or]


@dataclass(frozen=True)
class RuleSet:
    """Symptom declarations (optionally bound to procedure names) and
    pathology expressions, in declaration order."""

    symptoms: tuple[tuple[str, Optional[str]], ...]
    pathologies: tuple[tuple[str, Expr], ...]

    @property
    def symptom_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.symptoms)

    def procedure_of(self, symptom: str) -> Optional[str]:
        for name, proc in self.symptoms:
            if name == symptom:
                return proc
        raise KeyError(symptom)


# -- parser -----------------------------------------------------------------

_TOKEN = re.compile(r"\(|\)|[A-Za-z_][A-Za-z0-9_]*")
_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")
_KEYWORDS = {"AND", "OR", "NOT", "DEF", "SYMPTOM", "PATHOLOGY", "PROCEDURE"}


class _ExprParser:
    def __init__(self, text: str, line_no: int, col_base: int):
        self.line_no = line_no
        self.tokens: list[tuple[str, int]] = []
        pos = 0
        for m in _TOKEN.finditer(text):
            between = text[pos:m.start()]
            if between.strip():
                raise RuleSyntaxError(f"unexpected {between.strip()[0]!r}",
                                      line_no, col_base + pos + 1)
            self.tokens.append((m.group(), col_base + m.start() + 1))
            pos = m.end()
        if text[pos:].strip():
            raise RuleSyntaxError(f"unexpected {text[pos:].strip()[0]!r}",
                                  line_no, col_base + pos + 1)
        self.index = 0
        self.end_col = col_base + len(text)

    def peek(self) -> Optional[str]:
        if self.index < len(self.tokens):
            return self.tokens[self.index][0]
        return None

    def next(self) -> tuple[str, int]:
        if self.index >= len(self.tokens):
            raise RuleSyntaxError("unexpected end of expression",
                                  self.line_no, self.end_col)
        tok = self.tokens[self.index]
        self.index += 1
        return tok

    def parse(self) -> Expr:
        expr = self._or()
        if self.peek() is not None:
            tok, col = self.tokens[self.index]
            raise RuleSyntaxError(f"unexpected token {tok!r}", self.line_no, col)
        return expr

    def _or(self) -> Expr:
        left = self._and()
        while self.peek() == "OR":
            self.next()
            left = Or(left, self._and())
        return left

    def _and(self) -> Expr:
        left = self._unary()
        while self.peek() == "AND":
            self.next()
            left = And(left, self._unary())
        return left

    def _unary(self) -> Expr:
        if self.peek() == "NOT":
            self.next()
            return Not(self._unary())
        return self._atom()

    def _atom(self) -> Expr:
        tok, col = self.next()
        if tok == "(":
            expr = self._or()
            if self.peek() != ")":
                at = (self.tokens[self.index][1]
                      if self.index < len(self.tokens) else self.end_col)
                raise RuleSyntaxError("unbalanced parenthesis", self.line_no, at)
            self.next()
            return expr
        if tok == ")":
            raise RuleSyntaxError("unbalanced parenthesis", self.line_no, col)
        if tok in _KEYWORDS:
            raise RuleSyntaxError(f"keyword {tok!r} cannot name a symptom",
                                  self.line_no, col)
        return SymRef(tok)


def _referenced(expr: Expr) -> set[str]:
    if isinstance(expr, SymRef):
        return {expr.name}
    if isinstance(expr, Not):
        return _referenced(expr.operand)
    return _referenced(expr.left) | _referenced(expr.right)


def parse_rules(text: str) -> RuleSet:
    """Parse SYMPTOM / PATHOLOGY / PROCEDURE declarations; blank lines are
    skipped. Errors carry line and column."""
    symptoms: dict[str, Optional[str]] = {}
    order: list[str] = []
    pathologies: list[tuple[str, Expr]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line.strip():
            continue
        stripped = line.lstrip()
        indent = len(line) - len(stripped)
        parts = stripped.split(None, 1)
        keyword = parts[0]

        if keyword == "SYMPTOM":
            rest = parts[1].strip() if len(parts) > 1 else ""
            if not _NAME.match(rest):
                raise RuleSyntaxError("SYMPTOM expects exactly one name",
                                      line_no, indent + len("SYMPTOM ") + 1)
            if rest in _KEYWORDS:
                raise RuleSyntaxError(f"keyword {rest!r} cannot name a symptom",
                                      line_no, indent + len("SYMPTOM ") + 1)
            if rest in symptoms:
                raise DuplicateDeclarationError(
                    f"line {line_no}: symptom {rest!r} declared twice")
            symptoms[rest] = None
            order.append(rest)
        elif keyword == "PATHOLOGY":
            rest = parts[1] if len(parts) > 1 else ""
            m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)\s+DEF\s+(.*)$", rest)
            if m is None:
                raise RuleSyntaxError("expected PATHOLOGY <name> DEF <expression>",
                                      line_no, indent + len("PATHOLOGY ") + 1)
            name, expr_text = m.group(1), m.group(2)
            if any(p == name for p, _ in pathologies):
                raise DuplicateDeclarationError(
                    f"line {line_no}: pathology {name!r} declared twice")
            col_base = indent + len("PATHOLOGY ") + rest.index(expr_text, len(name))
            expr = _ExprParser(expr_text, line_no, col_base).parse()
            pathologies.append((name, expr))
        elif keyword == "PROCEDURE":
            rest = parts[1].split() if len(parts) > 1 else []
            if len(rest) != 2 or not all(_NAME.match(r) for r in rest):
                raise RuleSyntaxError("expected PROCEDURE <symptom> <funcname>",
                                      line_no, indent + len("PROCEDURE ") + 1)
            symptom, funcname = rest
            if symptom not in symptoms:
                raise UndeclaredSymptomError(
                    f"line {line_no}: PROCEDURE for undeclared symptom {symptom!r}")
            if symptoms[symptom] is not None:
                raise DuplicateDeclarationError(
                    f"line {line_no}: symptom {symptom!r} bound twice")
            symptoms[symptom] = funcname
        else:
            raise RuleSyntaxError(f"unknown keyword {keyword!r}", line_no, indent + 1)

    for name, expr in pathologies:
        missing = sorted(_referenced(expr) - set(symptoms))
        if missing:
            raise UndeclaredSymptomError(
                f"pathology {name!r} references undeclared symptom(s): "
                + ", ".join(missing))

    return RuleSet(symptoms=tuple((s, symptoms[s]) for s in order),
                   pathologies=tuple(pathologies))


def format_expr(expr: Expr) -> str:
    """Fully parenthesized rendering; reparsing yields an equal AST."""
    if isinstance(expr, SymRef):
        return expr.name
    if isinstance(expr, Not):
        return f"( NOT {format_expr(expr.operand)} )"
    op = "AND" if isinstance(expr, And) else "OR"
    return f"( {format_expr(expr.left)} {op} {format_expr(expr.right)} )"


def format_rules(ruleset: RuleSet) -> str:
    lines = [f"SYMPTOM {name}" for name, _ in ruleset.symptoms]
    lines += [f"PROCEDURE {name} {proc}" for name, proc in ruleset.symptoms
              if proc is not None]
    lines += [f"PATHOLOGY {name} DEF {format_expr(expr)}"
              for name, expr in ruleset.pathologies]
    return "\n".join(lines) + "\n"


# -- evaluation ---------------------------------------------------------------

def evaluate_expr(expr: Expr, env: Mapping[str, Tri]) -> Tri:
    """Kleene semantics: False dominates AND, True dominates OR, unknown
    propagates otherwise; NOT unknown is unknown."""
    if isinstance(expr, SymRef):
        return env[expr.name]
    if isinstance(expr, Not):
        v = evaluate_expr(expr.operand, env)
        return None if v is None else (not v)
    a = evaluate_expr(expr.left, env)
    b = evaluate_expr(expr.right, env)
    if isinstance(expr, And):
        if a is False or b is False:
            return False
        if a is True and b is True:
            return True
        return None
    if a is True or b is True:
        return True
    if a is False and b is False:
        return False
    return None


@dataclass(frozen=True)
class Evaluation:
    matched: tuple[str, ...]
    detail: tuple[tuple[str, Tri], ...]

    @property
    def detail_dict(self) -> dict[str, Tri]:
        return dict(self.detail)


def evaluate(ruleset: RuleSet, evals: Mapping[str, Tri]) -> Evaluation:
    """Evaluate every pathology; a pathology matches when definitely true.

    ``evals`` must cover every declared symptom (unknown is a value, absence
    is an error).
    """
    missing = [s for s in ruleset.symptom_names if s not in evals]
    if missing:
        raise ValueError(f"symptom evaluation not total; missing: {missing}")
    detail = []
    matched = []
    for name, expr in ruleset.pathologies:
        verdict = evaluate_expr(expr, evals)
        detail.append((name, verdict))
        if verdict is True:
            matched.append(name)
    return Evaluation(matched=tuple(matched), detail=tuple(detail))


# -- binding ------------------------------------------------------------------

Procedure = Callable[[Mapping], Tri]


@dataclass(frozen=True)
class BoundRuleSet:
    ruleset: RuleSet
    procedures: tuple[tuple[str, Optional[Procedure]], ...]

    def evaluate_against(self, inputs: Mapping) -> Evaluation:
        env: dict[str, Tri] = {}
        for name, proc in self.procedures:
            if proc is None:
                env[name] = None
            else:
                value = proc(inputs)
                env[name] = None if value is None else bool(value)
        return evaluate(self.ruleset, env)


def bind_symptoms(ruleset: RuleSet,
                  registry: Mapping[str, Procedure]) -> BoundRuleSet:
    """Resolve PROCEDURE names against the registry. Symptoms without a
    PROCEDURE stay unbound and evaluate to unknown everywhere."""
    missing = sorted(proc for _, proc in ruleset.symptoms
                     if proc is not None and proc not in registry)
    if missing:
        raise BindingError(missing)
    procedures = tuple(
        (name, registry[proc] if proc is not None else None)
        for name, proc in ruleset.symptoms)
    return BoundRuleSet(ruleset=ruleset, procedures=procedures)


# -- built-in symptom procedures ----------------------------------------------
#
# Procedures take the per-session signal mapping assembled by the diagnosis
# pipeline. Returning None means the underlying instrumentation was absent.

def _signal(inputs: Mapping, key: str):
    return inputs.get(key)


def high_rtt_variation(inputs: Mapping) -> Tri:
    v = _signal(inputs, "rtt_variation")
    return None if v is None else v >= 0.2


def significant_queueing(inputs: Mapping) -> Tri:
    v = _signal(inputs, "flagged_rpc_count")
    return None if v is None else v > 0


def cache_miss(inputs: Mapping) -> Tri:
    v = _signal(inputs, "cache_hit")
    return None if v is None else (not v)


def high_retrans(inputs: Mapping) -> Tri:
    v = _signal(inputs, "retrans_segments")
    return None if v is None else v >= 3


def internet_bottleneck(inputs: Mapping) -> Tri:
    v = _signal(inputs, "bottleneck")
    return None if v is None else v == "internet"


def backend_bottleneck(inputs: Mapping) -> Tri:
    v = _signal(inputs, "bottleneck")
    return None if v is None else v == "cdn_backend"


def slow_user_experience(inputs: Mapping) -> Tri:
    v = _signal(inputs, "detection_flag")
    return None if v is None else v == "high"


def content_dominant(inputs: Mapping) -> Tri:
    v = _signal(inputs, "significant_content_events")
    return None if v is None else v > 0


BUILTIN_PROCEDURES: dict[str, Procedure] = {
    "high_rtt_variation": high_rtt_variation,
    "significant_queueing": significant_queueing,
    "cache_miss": cache_miss,
    "high_retrans": high_retrans,
    "internet_bottleneck": internet_bottleneck,
    "backend_bottleneck": backend_bottleneck,
    "slow_user_experience": slow_user_experience,
    "content_dominant": content_dominant,
}
