import itertools

import numpy as np
import pytest

from nesy_soc import ltlf
from nesy_soc.errors import InputFileError, LtlSyntaxError
from nesy_soc.ltlf import (
    FALSE,
    TRUE,
    Always,
    And,
    Atom,
    Eventually,
    Implies,
    Next,
    Not,
    Or,
    Trace,
    eval_ltlf,
    format_ltlf,
    parse_ltlf,
)

a, b, c, d = Atom("a"), Atom("b"), Atom("c"), Atom("d")
NAMES = ["a", "b", "c", "d"]


def random_formula(rng, depth=4, names=NAMES):
    if depth == 0 or rng.random() < 0.25:
        pick = rng.integers(0, len(names) + 2)
        if pick == len(names):
            return TRUE
        if pick == len(names) + 1:
            return FALSE
        return Atom(names[pick])
    kind = rng.integers(0, 7)
    if kind < 4:
        return (Not, Next, Eventually, Always)[kind](random_formula(rng, depth - 1, names))
    return (And, Or, Implies)[kind - 4](random_formula(rng, depth - 1, names), random_formula(rng, depth - 1, names))


def random_trace(rng, names=NAMES, max_len=6):
    n = int(rng.integers(1, max_len + 1))
    return Trace.of({x for x in names if rng.random() < 0.5} for _ in range(n))


def naive_eval(f, trace, i):
    """Direct reading of the semantics, one position at a time."""
    n = len(trace)
    if isinstance(f, Atom):
        return f.name in trace.states[i]
    if f == TRUE:
        return True
    if f == FALSE:
        return False
    if isinstance(f, Not):
        return not naive_eval(f.operand, trace, i)
    if isinstance(f, And):
        return naive_eval(f.left, trace, i) and naive_eval(f.right, trace, i)
    if isinstance(f, Or):
        return naive_eval(f.left, trace, i) or naive_eval(f.right, trace, i)
    if isinstance(f, Implies):
        return (not naive_eval(f.left, trace, i)) or naive_eval(f.right, trace, i)
    if isinstance(f, Next):
        return i + 1 < n and naive_eval(f.operand, trace, i + 1)
    if isinstance(f, Eventually):
        return any(naive_eval(f.operand, trace, j) for j in range(i, n))
    if isinstance(f, Always):
        return all(naive_eval(f.operand, trace, j) for j in range(i, n))
    raise TypeError(f)


# ===== PARSER =====


@pytest.mark.parametrize(
    "text, expected",
    [
        ("a", a),
        ("true", TRUE),
        ("false", FALSE),
        ("!a", Not(a)),
        ("X a", Next(a)),
        ("Xa", Atom("Xa")),
        ("F G a", Eventually(Always(a))),
        ("a & b & c", And(And(a, b), c)),
        ("a | b | c", Or(Or(a, b), c)),
        ("a -> b -> c", Implies(a, Implies(b, c))),
        ("a | b & c", Or(a, And(b, c))),
        ("!a & b", And(Not(a), b)),
        ("F a & b", And(Eventually(a), b)),
        ("a & b | c -> d", Implies(Or(And(a, b), c), d)),
        ("(a -> b) -> c", Implies(Implies(a, b), c)),
        ("  ( ( a ) )  ", a),
        ("t1548_003", Atom("t1548_003")),
    ],
)
def test_parse(text, expected):
    assert parse_ltlf(text) == expected


@pytest.mark.parametrize(
    "text, offset, expected_token",
    [
        ("a &", 3, "atom"),
        ("a & & b", 4, "!"),
        ("", 0, "("),
        ("(a | b", 6, ")"),
        ("a $ b", 2, None),
        ("X", 1, "true"),
        ("a b", 2, None),
    ],
)
def test_syntax_errors_report_offset(text, offset, expected_token):
    with pytest.raises(LtlSyntaxError) as info:
        parse_ltlf(text)
    assert info.value.offset == offset
    if expected_token is not None:
        assert expected_token in info.value.expected


def test_keywords_are_not_atoms():
    for word in sorted(ltlf.KEYWORDS):
        with pytest.raises(LtlSyntaxError):
            Atom(word)
    with pytest.raises(LtlSyntaxError):
        Atom("1abc")


# ===== FORMATTER =====


def test_format_chain():
    f = ltlf.chain_pattern(["t1566", "t1548", "t1048"])
    assert format_ltlf(f) == "F (t1566 & X F (t1548 & X F t1048))"
    assert format_ltlf(ltlf.chain_pattern(["t1"])) == "F t1"


@pytest.mark.parametrize(
    "f, text",
    [
        (Not(And(a, b)), "!(a & b)"),
        (And(a, And(b, c)), "a & (b & c)"),
        (Implies(Implies(a, b), c), "(a -> b) -> c"),
        (Implies(a, Implies(b, c)), "a -> b -> c"),
        (Next(Not(a)), "X !a"),
        (Or(a, And(b, c)), "a | b & c"),
        (And(Or(a, b), c), "(a | b) & c"),
    ],
)
def test_format_uses_minimal_parentheses(f, text):
    assert format_ltlf(f) == text


def test_format_parse_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        f = random_formula(rng)
        assert parse_ltlf(format_ltlf(f)) == f, format_ltlf(f)


# ===== SEMANTICS =====


def test_evaluation_matches_direct_semantics():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        f, trace = random_formula(rng), random_trace(rng)
        i = int(rng.integers(0, len(trace)))
        assert eval_ltlf(f, trace, i) == naive_eval(f, trace, i), (format_ltlf(f), trace, i)


def test_next_is_strong():
    trace = Trace.of([{"a"}, {"a"}])
    assert eval_ltlf(Next(a), trace, 0)
    assert not eval_ltlf(Next(a), trace, 1)
    assert not eval_ltlf(Next(TRUE), trace, 1)
    assert eval_ltlf(Not(Next(Not(a))), trace, 1)


def test_duality():
    rng = np.random.default_rng(2)
    for _ in range(300):
        f, trace = random_formula(rng, depth=3), random_trace(rng)
        assert eval_ltlf(Eventually(f), trace) == eval_ltlf(Not(Always(Not(f))), trace)
        assert eval_ltlf(Always(f), trace) == eval_ltlf(Not(Eventually(Not(f))), trace)


def test_eval_position_bounds():
    trace = Trace.of([{"a"}])
    with pytest.raises(IndexError):
        eval_ltlf(a, trace, 1)
    with pytest.raises(ValueError):
        Trace.of([])


def test_chain_pattern_means_increasing_positions():
    names = ["a", "b"]
    states = [frozenset(s) for s in ([], ["a"], ["b"], ["a", "b"])]
    for chain in (["a", "b"], ["b", "a"], ["a", "b", "a"], ["a", "a"]):
        f = ltlf.chain_pattern(chain)
        for n in range(1, 6):
            for seq in itertools.product(states, repeat=n):
                expected = any(
                    all(chain[k] in seq[p] for k, p in enumerate(positions))
                    for positions in itertools.combinations(range(n), len(chain))
                )
                assert eval_ltlf(f, Trace(tuple(seq))) == expected, (chain, seq)
    assert ltlf.atoms(ltlf.chain_pattern(names)) == set(names)
    with pytest.raises(ValueError):
        ltlf.chain_pattern([])


def test_progression_agrees_with_evaluation():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        f, trace = random_formula(rng), random_trace(rng)
        rest = f
        for k, state in enumerate(trace.states):
            rest = ltlf.progress(rest, state, k == len(trace) - 1)
        assert rest in (TRUE, FALSE)
        assert (rest == TRUE) == eval_ltlf(f, trace, 0), format_ltlf(f)


def test_progression_detects_early_failure():
    f = Always(a)
    assert ltlf.progress(f, frozenset({"b"}), False) == FALSE
    assert ltlf.progress(Eventually(a), frozenset({"a"}), False) == TRUE


# ===== PATTERN LIBRARY =====


def test_pattern_library_round_trip(tmp_path):
    path = str(tmp_path / "plans.txt")
    entries = [("plan1", ltlf.chain_pattern(["t1", "t2"])), ("plan-2.b", Always(Not(Atom("t3"))))]
    ltlf.write_pattern_library(path, entries[:1])
    ltlf.write_pattern_library(path, entries[1:], append=True)
    with open(path) as fh:
        assert fh.read() == "plan1: F (t1 & X F t2)\nplan-2.b: G !t3\n"
    assert list(ltlf.read_pattern_library(path).items()) == entries


def test_pattern_library_errors_name_the_line():
    with pytest.raises(InputFileError, match="plans.txt:2:"):
        ltlf.parse_pattern_library("# header\nplan1 F a\n", "plans.txt")
    with pytest.raises(InputFileError, match=":3: duplicate"):
        ltlf.parse_pattern_library("p: a\n\np: b\n")
    with pytest.raises(InputFileError, match=":1:.*offset") as info:
        ltlf.parse_pattern_library("p: a &\n")
    assert info.value.line == 1
    assert ltlf.parse_pattern_library("# nothing\n\n") == {}
