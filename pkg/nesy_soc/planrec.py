"""
Attack-plan postdiction over symbolic alert traces.

Every alert fires at most one rule, and a rule selects exactly one technique
out of its candidates. A plan is plausible for a trace when some selection
turns the trace into a technique trace satisfying the plan's formula at
position 0. Alerts without a rule contribute no technique.
"""

import itertools
import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import pandas as pd

from nesy_soc import ltlf
from nesy_soc.errors import InputFileError, RecognitionError
from nesy_soc.ltlf import FALSE, TRUE, LtlFormula

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10 ** 6

Option = Optional[str]


def technique_atom(text: str) -> str:
    """ATT&CK identifier to atom syntax: ``T1548.003`` becomes ``t1548_003``."""
    atom = text.strip().lower().replace(".", "_")
    if not ltlf.ATOM_PATTERN.fullmatch(atom) or atom in ltlf.KEYWORDS:
        raise ValueError(f"{text!r} is not a technique identifier")
    return atom


@dataclass(frozen=True)
class AlertEvent:
    name: str
    position: int

    def __post_init__(self):
        if not ltlf.ATOM_PATTERN.fullmatch(self.name):
            raise RecognitionError(f"alert name {self.name!r} is not an atom")


@dataclass(frozen=True)
class TechniqueRule:
    """``1 { candidates } 1 <- alert``: exactly one candidate per firing."""

    alert: str
    candidates: Tuple[str, ...]

    def __post_init__(self):
        if not self.candidates:
            raise RecognitionError(f"rule for {self.alert!r} has no candidate techniques")
        object.__setattr__(self, "candidates", tuple(sorted(set(self.candidates))))


@dataclass(frozen=True)
class PlanPattern:
    plan_id: str
    formula: LtlFormula

    @property
    def text(self) -> str:
        return ltlf.format_pattern_entry(self.plan_id, self.formula)


@dataclass(frozen=True)
class WitnessStep:
    position: int
    alert: str
    technique: Option


Witness = Tuple[WitnessStep, ...]


@dataclass(frozen=True)
class RecognitionResult:
    plan_id: str
    plausible: bool
    witnesses: Tuple[Witness, ...]


def make_trace(alerts: Sequence[str]) -> List[AlertEvent]:
    return [AlertEvent(name, i) for i, name in enumerate(alerts)]


# ===== RECOGNITION =====


def candidate_sets(trace: Sequence[AlertEvent], rules: Sequence[TechniqueRule]) -> List[Tuple[Option, ...]]:
    """Options per position: the rule's sorted candidates, or ``(None,)`` when no rule fires."""
    by_alert: Dict[str, TechniqueRule] = {}
    for rule in rules:
        if rule.alert in by_alert:
            raise RecognitionError(f"two rules for alert {rule.alert!r}; merge them into one rule")
        by_alert[rule.alert] = rule
    return [by_alert[event.name].candidates if event.name in by_alert else (None,) for event in trace]


def _state(option: Option) -> frozenset:
    return frozenset() if option is None else frozenset((option,))


def _witness(trace: Sequence[AlertEvent], choice: Sequence[Option]) -> Witness:
    return tuple(WitnessStep(event.position, event.name, option) for event, option in zip(trace, choice))


def _assignments(
    options: Sequence[Tuple[Option, ...]], formula: LtlFormula, pos: int, prefix: List[Option]
) -> Iterator[List[Option]]:
    """Satisfying assignments in lexicographic order, pruned by formula progression."""
    last = len(options) - 1
    for option in options[pos]:
        rest = ltlf.progress(formula, _state(option), pos == last)
        if rest == FALSE:
            continue
        prefix.append(option)
        if pos == last:
            yield list(prefix)
        elif rest == TRUE:
            for tail in itertools.product(*options[pos + 1:]):
                yield prefix + list(tail)
        else:
            yield from _assignments(options, rest, pos + 1, prefix)
        prefix.pop()


def _check_atoms(plans: Sequence[PlanPattern], rules: Sequence[TechniqueRule]) -> None:
    known = {t for rule in rules for t in rule.candidates}
    for plan in plans:
        unknown = sorted(ltlf.atoms(plan.formula) - known)
        if unknown:
            logger.warning("plan %s mentions techniques no rule can produce: %s", plan.plan_id, ", ".join(unknown))


def recognize(
    trace: Sequence[AlertEvent],
    rules: Sequence[TechniqueRule],
    plans: Sequence[PlanPattern],
    max_witnesses: int = 1,
) -> List[RecognitionResult]:
    """
    Decides every plan independently against ``trace``.

    Parameters
    ----------
    trace : sequence of AlertEvent
        Observed alerts in temporal order; must not be empty.
    rules : sequence of TechniqueRule
        At most one rule per alert name.
    plans : sequence of PlanPattern
        Each plan is reported, plausible or not.
    max_witnesses : int
        Upper bound on the witnesses returned per plan, in lexicographic
        order of (position, technique).

    Returns
    -------
    list of RecognitionResult
        One result per plan, in the order of ``plans``.
    """
    if not trace:
        raise RecognitionError("cannot recognise plans in an empty trace")
    if max_witnesses < 1:
        raise RecognitionError(f"max_witnesses must be >= 1, got {max_witnesses}")
    options = candidate_sets(trace, rules)
    _check_atoms(plans, rules)

    results = []
    for plan in plans:
        found = itertools.islice(_assignments(options, plan.formula, 0, []), max_witnesses)
        witnesses = tuple(_witness(trace, choice) for choice in found)
        results.append(RecognitionResult(plan.plan_id, bool(witnesses), witnesses))
        logger.info("plan %s is %s", plan.plan_id, "plausible" if witnesses else "not plausible")
    return results


def brute_force_recognize(
    trace: Sequence[AlertEvent], rules: Sequence[TechniqueRule], plan: PlanPattern
) -> RecognitionResult:
    """Enumerates every assignment and evaluates the plan on each induced technique trace."""
    if not trace:
        raise RecognitionError("cannot recognise plans in an empty trace")
    options = candidate_sets(trace, rules)
    size = 1
    for opts in options:
        size *= len(opts)
    if size > BRUTE_FORCE_LIMIT:
        raise RecognitionError(f"{size} assignments exceed the enumeration bound of {BRUTE_FORCE_LIMIT}")

    witnesses = []
    for choice in itertools.product(*options):
        techniques = ltlf.Trace(tuple(_state(option) for option in choice))
        if ltlf.eval_ltlf(plan.formula, techniques, 0):
            witnesses.append(_witness(trace, choice))
    return RecognitionResult(plan.plan_id, bool(witnesses), tuple(witnesses))


# ===== FILES =====


def _content_lines(text: str) -> Iterator[Tuple[int, str]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_trace(text: str, source: str = "<string>") -> List[AlertEvent]:
    names = []
    for lineno, line in _content_lines(text):
        if not ltlf.ATOM_PATTERN.fullmatch(line):
            raise InputFileError(source, lineno, f"{line!r} is not an alert atom")
        names.append(line)
    return make_trace(names)


def read_trace(path: str) -> List[AlertEvent]:
    """One alert atom per line, oldest first."""
    with open(path, encoding="utf-8") as fh:
        trace = parse_trace(fh.read(), path)
    logger.info("read %d alerts from %s", len(trace), path)
    return trace


def parse_rules(text: str, source: str = "<string>") -> List[TechniqueRule]:
    rules: Dict[str, TechniqueRule] = {}
    for lineno, line in _content_lines(text):
        alert, sep, body = line.partition(":")
        alert = alert.strip()
        if not sep or not ltlf.ATOM_PATTERN.fullmatch(alert):
            raise InputFileError(source, lineno, "expected 'alert : technique, technique, ...'")
        if alert in rules:
            raise InputFileError(source, lineno, f"second rule for alert {alert!r}")
        try:
            candidates = [technique_atom(t) for t in body.split(",") if t.strip()]
            rules[alert] = TechniqueRule(alert, tuple(candidates))
        except (ValueError, RecognitionError) as exc:
            raise InputFileError(source, lineno, str(exc))
    return list(rules.values())


def read_rules(path: str) -> List[TechniqueRule]:
    """``alert : t1, t2`` lines; each rule picks exactly one of its techniques."""
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read(), path)


def read_plans(path: str) -> List[PlanPattern]:
    return [PlanPattern(plan_id, f) for plan_id, f in ltlf.read_pattern_library(path).items()]


# ===== REPORTS =====


def format_witness(witness: Witness) -> str:
    """Positions that received a technique, e.g. ``0:t1556 2:t1059``."""
    return " ".join(f"{step.position}:{step.technique}" for step in witness if step.technique is not None)


def format_recognition(results: Sequence[RecognitionResult]) -> str:
    """Human-readable table, one row per witness (or per plan without one)."""
    rows = []
    for result in results:
        if not result.witnesses:
            rows.append({"plan": result.plan_id, "plausible": "no", "witness": "", "techniques": "-"})
        for k, witness in enumerate(result.witnesses, start=1):
            rows.append({"plan": result.plan_id, "plausible": "yes", "witness": k, "techniques": format_witness(witness)})
    if not rows:
        return "no plans\n"
    return pd.DataFrame(rows).to_string(index=False) + "\n"


def recognition_kv(results: Sequence[RecognitionResult]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for result in results:
        prefix = f"plan.{result.plan_id}"
        out[f"{prefix}.plausible"] = "true" if result.plausible else "false"
        out[f"{prefix}.witnesses"] = str(len(result.witnesses))
        for k, witness in enumerate(result.witnesses, start=1):
            out[f"{prefix}.witness.{k}"] = format_witness(witness)
    return out
