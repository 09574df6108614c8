"""
Linear temporal logic on finite traces.

Formulas are immutable trees; ``parse_ltlf`` reads the ASCII surface syntax
(``!  &  |  ->  X  F  G  true  false``) and ``format_ltlf`` writes it back with
the fewest parentheses that preserve the tree. ``Next`` is strong: it is false
at the last position of a trace.

Attack plans are eventually-chains evaluated at position 0,
``F (a & X F (b & X F c))``, built by ``chain_pattern``.
"""

import logging
import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Sequence, Set, Tuple, Union

import numpy as np
from lark import Lark, Transformer, v_args
from lark.exceptions import UnexpectedCharacters, UnexpectedEOF, UnexpectedInput, UnexpectedToken

from nesy_soc.errors import InputFileError, LtlSyntaxError

logger = logging.getLogger(__name__)

ATOM_PATTERN = re.compile(r"[a-zA-Z][a-zA-Z0-9_]*")
KEYWORDS = frozenset({"X", "F", "G", "true", "false"})
PLAN_ID_PATTERN = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*")


# ===== SYNTAX TREE =====


@dataclass(frozen=True)
class Atom:
    name: str

    def __post_init__(self):
        if not ATOM_PATTERN.fullmatch(self.name) or self.name in KEYWORDS:
            raise LtlSyntaxError(f"invalid atom name {self.name!r}", 0, ("ATOM",))


@dataclass(frozen=True)
class TrueFormula:
    pass


@dataclass(frozen=True)
class FalseFormula:
    pass


@dataclass(frozen=True)
class Not:
    operand: "LtlFormula"


@dataclass(frozen=True)
class And:
    left: "LtlFormula"
    right: "LtlFormula"


@dataclass(frozen=True)
class Or:
    left: "LtlFormula"
    right: "LtlFormula"


@dataclass(frozen=True)
class Implies:
    left: "LtlFormula"
    right: "LtlFormula"


@dataclass(frozen=True)
class Next:
    operand: "LtlFormula"


@dataclass(frozen=True)
class Eventually:
    operand: "LtlFormula"


@dataclass(frozen=True)
class Always:
    operand: "LtlFormula"


LtlFormula = Union[Atom, TrueFormula, FalseFormula, Not, And, Or, Implies, Next, Eventually, Always]
TRUE = TrueFormula()
FALSE = FalseFormula()

_UNARY = (Not, Next, Eventually, Always)
_BINARY = (And, Or, Implies)


@dataclass(frozen=True)
class Trace:
    """Finite sequence of states; each state is the set of atoms holding there."""

    states: Tuple[FrozenSet[str], ...]

    def __post_init__(self):
        if not self.states:
            raise ValueError("a trace needs at least one state")

    @classmethod
    def of(cls, states: Iterable[Iterable[str]]) -> "Trace":
        return cls(tuple(frozenset(s) for s in states))

    def __len__(self) -> int:
        return len(self.states)


# ===== PARSER =====

GRAMMAR = r"""
?start: implication

?implication: disjunction
    | disjunction _IMPLIES implication -> implies

?disjunction: conjunction
    | disjunction _OR conjunction -> or_

?conjunction: unary
    | conjunction _AND unary -> and_

?unary: primary
    | _NOT unary -> not_
    | _NEXT unary -> next_
    | _EVENTUALLY unary -> eventually
    | _ALWAYS unary -> always

?primary: ATOM -> atom
    | _TRUE -> true
    | _FALSE -> false
    | _LPAR implication _RPAR

_NOT: "!"
_AND: "&"
_OR: "|"
_IMPLIES: "->"
_NEXT: "X"
_EVENTUALLY: "F"
_ALWAYS: "G"
_TRUE: "true"
_FALSE: "false"
_LPAR: "("
_RPAR: ")"
ATOM: /[a-zA-Z][a-zA-Z0-9_]*/

%import common.WS
%ignore WS
"""

_TERMINAL_TEXT = {
    "_NOT": "!",
    "_AND": "&",
    "_OR": "|",
    "_IMPLIES": "->",
    "_NEXT": "X",
    "_EVENTUALLY": "F",
    "_ALWAYS": "G",
    "_TRUE": "true",
    "_FALSE": "false",
    "_LPAR": "(",
    "_RPAR": ")",
    "ATOM": "atom",
    "$END": "end of input",
}


@v_args(inline=True)
class _ToFormula(Transformer):
    def atom(self, token):
        return Atom(str(token))

    def true(self):
        return TRUE

    def false(self):
        return FALSE

    def not_(self, operand):
        return Not(operand)

    def next_(self, operand):
        return Next(operand)

    def eventually(self, operand):
        return Eventually(operand)

    def always(self, operand):
        return Always(operand)

    def and_(self, left, right):
        return And(left, right)

    def or_(self, left, right):
        return Or(left, right)

    def implies(self, left, right):
        return Implies(left, right)


_PARSER = Lark(GRAMMAR, parser="lalr", transformer=_ToFormula())


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def parse_ltlf(text: str) -> LtlFormula:
    """
    Parses the ASCII syntax into a formula tree.

    Precedence, tightest first: ``! X F G``, then ``&``, ``|``, ``->``.
    ``&`` and ``|`` associate to the left, ``->`` to the right.

    Raises
    ------
    LtlSyntaxError
        With the byte offset of the offending input and the set of tokens
        the parser would have accepted there.
    """
    try:
        return _PARSER.parse(text)
    except UnexpectedInput as exc:
        offset, expected, found = _describe_error(text, exc)
        raise LtlSyntaxError(f"unexpected {found}", offset, expected)


def _describe_error(text: str, exc: UnexpectedInput) -> Tuple[int, Set[str], str]:
    if isinstance(exc, UnexpectedCharacters):
        expected = exc.allowed or set()
        found = repr(text[exc.pos_in_stream])
        pos = exc.pos_in_stream
    elif isinstance(exc, UnexpectedToken):
        expected = exc.expected
        if exc.token.type == "$END":
            pos, found = len(text), "end of input"
        else:
            pos, found = exc.token.start_pos, repr(str(exc.token))
    elif isinstance(exc, UnexpectedEOF):
        expected = set(exc.expected)
        pos, found = len(text), "end of input"
    else:
        expected, pos, found = set(), getattr(exc, "pos_in_stream", 0) or 0, "input"
    return _byte_offset(text, pos), {_TERMINAL_TEXT.get(t, t) for t in expected}, found


# ===== FORMATTER =====

_LEVEL_IMPLIES, _LEVEL_OR, _LEVEL_AND, _LEVEL_UNARY, _LEVEL_PRIMARY = 1, 2, 3, 4, 5
_UNARY_SYMBOL = {Not: "!", Next: "X ", Eventually: "F ", Always: "G "}
_BINARY_SYMBOL = {And: "&", Or: "|", Implies: "->"}
_BINARY_LEVEL = {
    # (own level, minimum left level, minimum right level)
    And: (_LEVEL_AND, _LEVEL_AND, _LEVEL_UNARY),
    Or: (_LEVEL_OR, _LEVEL_OR, _LEVEL_AND),
    Implies: (_LEVEL_IMPLIES, _LEVEL_OR, _LEVEL_IMPLIES),
}


def _level(f: LtlFormula) -> int:
    if isinstance(f, _BINARY):
        return _BINARY_LEVEL[type(f)][0]
    if isinstance(f, _UNARY):
        return _LEVEL_UNARY
    return _LEVEL_PRIMARY


def _wrap(f: LtlFormula, minimum: int) -> str:
    text = format_ltlf(f)
    return f"({text})" if _level(f) < minimum else text


def format_ltlf(f: LtlFormula) -> str:
    """Canonical ASCII form; ``parse_ltlf(format_ltlf(f)) == f``."""
    if isinstance(f, Atom):
        return f.name
    if isinstance(f, TrueFormula):
        return "true"
    if isinstance(f, FalseFormula):
        return "false"
    if isinstance(f, _UNARY):
        return _UNARY_SYMBOL[type(f)] + _wrap(f.operand, _LEVEL_UNARY)
    if isinstance(f, _BINARY):
        _, left_min, right_min = _BINARY_LEVEL[type(f)]
        return f"{_wrap(f.left, left_min)} {_BINARY_SYMBOL[type(f)]} {_wrap(f.right, right_min)}"
    raise TypeError(f"not a formula: {f!r}")


# ===== SEMANTICS =====


def _truth_table(f: LtlFormula, trace: Trace, memo: Dict[LtlFormula, np.ndarray]) -> np.ndarray:
    """Truth value of ``f`` at every position, computed bottom-up."""
    if f in memo:
        return memo[f]
    n = len(trace)
    if isinstance(f, Atom):
        out = np.array([f.name in state for state in trace.states])
    elif isinstance(f, TrueFormula):
        out = np.ones(n, dtype=bool)
    elif isinstance(f, FalseFormula):
        out = np.zeros(n, dtype=bool)
    elif isinstance(f, Not):
        out = ~_truth_table(f.operand, trace, memo)
    elif isinstance(f, And):
        out = _truth_table(f.left, trace, memo) & _truth_table(f.right, trace, memo)
    elif isinstance(f, Or):
        out = _truth_table(f.left, trace, memo) | _truth_table(f.right, trace, memo)
    elif isinstance(f, Implies):
        out = ~_truth_table(f.left, trace, memo) | _truth_table(f.right, trace, memo)
    elif isinstance(f, Next):
        inner = _truth_table(f.operand, trace, memo)
        out = np.zeros(n, dtype=bool)
        out[:-1] = inner[1:]
    elif isinstance(f, Eventually):
        out = np.logical_or.accumulate(_truth_table(f.operand, trace, memo)[::-1])[::-1]
    elif isinstance(f, Always):
        out = np.logical_and.accumulate(_truth_table(f.operand, trace, memo)[::-1])[::-1]
    else:
        raise TypeError(f"not a formula: {f!r}")
    memo[f] = out
    return out


def eval_ltlf(f: LtlFormula, trace: Trace, i: int = 0) -> bool:
    """Whether ``f`` holds at position ``i`` of ``trace``."""
    if not 0 <= i < len(trace):
        raise IndexError(f"position {i} outside a trace of length {len(trace)}")
    return bool(_truth_table(f, trace, {})[i])


def _not(f: LtlFormula) -> LtlFormula:
    if isinstance(f, TrueFormula):
        return FALSE
    if isinstance(f, FalseFormula):
        return TRUE
    if isinstance(f, Not):
        return f.operand
    return Not(f)


def _and(a: LtlFormula, b: LtlFormula) -> LtlFormula:
    if isinstance(a, FalseFormula) or isinstance(b, FalseFormula):
        return FALSE
    if isinstance(a, TrueFormula):
        return b
    if isinstance(b, TrueFormula):
        return a
    return And(a, b)


def _or(a: LtlFormula, b: LtlFormula) -> LtlFormula:
    if isinstance(a, TrueFormula) or isinstance(b, TrueFormula):
        return TRUE
    if isinstance(a, FalseFormula):
        return b
    if isinstance(b, FalseFormula):
        return a
    return Or(a, b)


def progress(f: LtlFormula, state: FrozenSet[str], is_last: bool) -> LtlFormula:
    """
    Rewrites ``f`` into the obligation left for the rest of the trace after
    reading ``state``.

    With ``is_last`` every temporal operator is closed off, so the result is
    ``TRUE`` or ``FALSE``. Progressing through a whole trace yields ``TRUE``
    exactly when ``eval_ltlf(f, trace, 0)`` holds. A ``FALSE`` result before the
    end means no continuation can satisfy ``f``.
    """
    if isinstance(f, Atom):
        return TRUE if f.name in state else FALSE
    if isinstance(f, (TrueFormula, FalseFormula)):
        return f
    if isinstance(f, Not):
        return _not(progress(f.operand, state, is_last))
    if isinstance(f, And):
        return _and(progress(f.left, state, is_last), progress(f.right, state, is_last))
    if isinstance(f, Or):
        return _or(progress(f.left, state, is_last), progress(f.right, state, is_last))
    if isinstance(f, Implies):
        return _or(_not(progress(f.left, state, is_last)), progress(f.right, state, is_last))
    if isinstance(f, Next):
        return FALSE if is_last else f.operand
    if isinstance(f, Eventually):
        return _or(progress(f.operand, state, is_last), FALSE if is_last else f)
    if isinstance(f, Always):
        return _and(progress(f.operand, state, is_last), TRUE if is_last else f)
    raise TypeError(f"not a formula: {f!r}")


def atoms(f: LtlFormula) -> Set[str]:
    """Names of the atoms occurring in ``f``."""
    if isinstance(f, Atom):
        return {f.name}
    if isinstance(f, _UNARY):
        return atoms(f.operand)
    if isinstance(f, _BINARY):
        return atoms(f.left) | atoms(f.right)
    return set()


def chain_pattern(techniques: Sequence[str]) -> LtlFormula:
    """
    ``F (t1 & X F (t2 & ... X F tn))``: the techniques occur at strictly
    increasing positions.

    Evaluated at position 0 this is the plan shape "always, from the initial
    state, next eventually t1, then ..." with the initial state taken as the
    start of the trace.
    """
    if not techniques:
        raise ValueError("chain pattern needs at least one technique")
    f: LtlFormula = Eventually(Atom(techniques[-1]))
    for name in reversed(techniques[:-1]):
        f = Eventually(And(Atom(name), Next(f)))
    return f


# ===== PATTERN LIBRARY =====


def format_pattern_entry(plan_id: str, f: LtlFormula) -> str:
    return f"{plan_id}: {format_ltlf(f)}"


def parse_pattern_library(text: str, source: str = "<string>") -> Dict[str, LtlFormula]:
    """``plan_id: formula`` lines in file order; ``#`` starts a comment."""
    plans: Dict[str, LtlFormula] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        plan_id, sep, body = line.partition(":")
        plan_id = plan_id.strip()
        if not sep or not PLAN_ID_PATTERN.fullmatch(plan_id):
            raise InputFileError(source, lineno, "expected 'plan_id: formula'")
        if plan_id in plans:
            raise InputFileError(source, lineno, f"duplicate plan id {plan_id!r}")
        try:
            plans[plan_id] = parse_ltlf(body)
        except LtlSyntaxError as exc:
            raise InputFileError(source, lineno, str(exc))
    return plans


def read_pattern_library(path: str) -> Dict[str, LtlFormula]:
    with open(path, encoding="utf-8") as fh:
        plans = parse_pattern_library(fh.read(), path)
    logger.info("read %d plan patterns from %s", len(plans), path)
    return plans


def write_pattern_library(path: str, entries: List[Tuple[str, LtlFormula]], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as fh:
        for plan_id, f in entries:
            fh.write(format_pattern_entry(plan_id, f) + "\n")
