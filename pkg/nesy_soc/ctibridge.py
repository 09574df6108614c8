"""
Natural-language CTI reports to attack-plan patterns.

A report is split into sentences, taken to be in temporal order, and every
sentence is mapped to one ATT&CK technique. The techniques become an
eventually-chain (``ltlf.chain_pattern``). Two backends produce the mapping:

* ``KeywordBackend``: ordered phrase table, deterministic, offline.
* ``RemoteBackend``: sends consecutive sentence pairs joined by
  "This leads to:" to a text-completion endpoint and merges the two-symbol
  ``ExistenceEventuallyOther`` replies on their shared sentence.
"""

import json
import logging
import os
import re
import threading
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import requests

from nesy_soc import ltlf
from nesy_soc.errors import (
    ConfigError,
    DisallowedPatternError,
    ExtractionError,
    InputFileError,
    MalformedReplyError,
    PlanConflictError,
    TransportError,
    UnmappedSentenceError,
)
from nesy_soc.planrec import PlanPattern, technique_atom

logger = logging.getLogger(__name__)

ALLOWED_PATTERN = "ExistenceEventuallyOther"
CONNECTOR = "This leads to:"
DEFAULT_PLAN_ID = "planX"
DEFAULT_MODEL = "gpt-3.5-turbo-instruct"
DEFAULT_TIMEOUT = 60.0

TECHNIQUE_ID = re.compile(r"T\d{4}(\.\d{3})?", re.IGNORECASE)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")

# Techniques offered to the completion endpoint as ALLOWED_SYMBOLS.
ATTACK_TECHNIQUES = {
    "T1003": "OS Credential Dumping",
    "T1021": "Remote Services",
    "T1041": "Exfiltration Over C2 Channel",
    "T1048": "Exfiltration Over Alternative Protocol",
    "T1059": "Command and Scripting Interpreter",
    "T1068": "Exploitation for Privilege Escalation",
    "T1071": "Application Layer Protocol",
    "T1078": "Valid Accounts",
    "T1098": "Account Manipulation",
    "T1110": "Brute Force",
    "T1133": "External Remote Services",
    "T1190": "Exploit Public-Facing Application",
    "T1204": "User Execution",
    "T1486": "Data Encrypted for Impact",
    "T1530": "Data from Cloud Storage",
    "T1548": "Abuse Elevation Control Mechanism",
    "T1550": "Use Alternate Authentication Material",
    "T1552": "Unsecured Credentials",
    "T1556": "Modify Authentication Process",
    "T1566": "Phishing",
}


@dataclass(frozen=True)
class FewShotExample:
    first: str
    second: str
    symbols: Tuple[str, str]


FEW_SHOT_EXAMPLES = (
    FewShotExample(
        "The adversary logs into the Kubernetes console.",
        "The adversary can view plaintext AWS keys in the Kubernetes console.",
        ("T1133", "T1552"),
    ),
)


@dataclass(frozen=True)
class ExtractionRequest:
    prompt: str
    first: str
    second: str


@dataclass(frozen=True)
class ExtractionResponse:
    pattern: str
    symbols: Tuple[str, ...]


# ===== SENTENCES AND KEYWORDS =====


def split_sentences(report: str) -> List[str]:
    """Sentences in report order; line breaks inside a sentence are folded."""
    text = " ".join(report.split())
    if not text:
        raise ExtractionError("empty report")
    return [s for s in _SENTENCE_END.split(text) if s]


@dataclass(frozen=True)
class KeywordTable:
    """Ordered ``(phrase, technique)`` pairs; the first phrase found in a sentence wins."""

    entries: Tuple[Tuple[str, str], ...]

    def __post_init__(self):
        for phrase, _ in self.entries:
            if not phrase.strip():
                raise ExtractionError("keyword table contains an empty phrase")

    @classmethod
    def of(cls, pairs: Sequence[Tuple[str, str]]) -> "KeywordTable":
        return cls(tuple((phrase.strip().lower(), technique_atom(tid)) for phrase, tid in pairs))

    @property
    def phrases(self) -> List[str]:
        return [phrase for phrase, _ in self.entries]


def parse_keyword_table(text: str, source: str = "<string>") -> KeywordTable:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        phrase, sep, tid = line.partition("=>")
        if not sep or not phrase.strip() or not TECHNIQUE_ID.fullmatch(tid.strip()):
            raise InputFileError(source, lineno, "expected 'phrase => technique_id'")
        pairs.append((phrase, tid))
    return KeywordTable.of(pairs)


def read_keyword_table(path: str) -> KeywordTable:
    """``phrase => technique_id`` lines, ``#`` comments."""
    with open(path, encoding="utf-8") as fh:
        table = parse_keyword_table(fh.read(), path)
    logger.info("read %d keyword entries from %s", len(table.entries), path)
    return table


def map_sentence(sentence: str, table: KeywordTable) -> str:
    if not table.entries:
        raise ExtractionError("keyword table is empty")
    lowered = sentence.lower()
    for phrase, technique in table.entries:
        if phrase in lowered:
            return technique
    raise UnmappedSentenceError(sentence, table.phrases)


# ===== PROMPT PROTOCOL =====


def build_prompt(
    first: str,
    second: str,
    symbols: Mapping[str, str] = ATTACK_TECHNIQUES,
    examples: Sequence[FewShotExample] = FEW_SHOT_EXAMPLES,
) -> str:
    """Prompt for one sentence pair: allowed pattern, allowed symbols, worked examples, the pair."""
    allowed = ", ".join(f"{tid} ({name})" for tid, name in symbols.items())
    lines = [
        "Translate natural language sentences into patterns:",
        f"ALLOWED_PATTERNS: {ALLOWED_PATTERN}",
        f"ALLOWED_SYMBOLS: {allowed}",
        "",
    ]
    for example in examples:
        lines += [
            f"NL: {example.first}",
            f"{CONNECTOR} {example.second}",
            f"PATTERN: {ALLOWED_PATTERN}",
            f"SYMBOLS: {', '.join(example.symbols)}",
            "",
        ]
    lines += [f"NL: {first}", f"{CONNECTOR} {second}"]
    return "\n".join(lines) + "\n"


def _field(text: str, name: str) -> str:
    match = re.search(rf"^\s*{name}:\s*(.*?)\s*$", text, re.MULTILINE)
    if match is None:
        raise MalformedReplyError(f"reply has no {name} line")
    return match.group(1)


def parse_reply(text: str, allowed_symbols: Optional[Mapping[str, str]] = None) -> ExtractionResponse:
    """
    Reads the ``PATTERN:`` and ``SYMBOLS:`` lines of a completion.

    Nothing is repaired: an unknown pattern, a non-technique symbol or a
    symbol count other than two is rejected.
    """
    pattern = _field(text, "PATTERN")
    if pattern != ALLOWED_PATTERN:
        raise DisallowedPatternError(f"pattern {pattern!r} is not {ALLOWED_PATTERN}")
    raw_symbols = [s.strip() for s in _field(text, "SYMBOLS").split(",") if s.strip()]
    allowed = {tid.upper() for tid in allowed_symbols} if allowed_symbols is not None else None
    for symbol in raw_symbols:
        if not TECHNIQUE_ID.fullmatch(symbol):
            raise ExtractionError(f"symbol {symbol!r} is not an ATT&CK technique")
        if allowed is not None and symbol.upper() not in allowed:
            raise ExtractionError(f"symbol {symbol!r} is not among the allowed symbols")
    if len(raw_symbols) != 2:
        raise MalformedReplyError(f"{ALLOWED_PATTERN} takes two symbols, reply has {len(raw_symbols)}")
    return ExtractionResponse(pattern, tuple(technique_atom(s) for s in raw_symbols))


# ===== COMPLETION CLIENT =====


def _redact(text: str, secret: Optional[str]) -> str:
    return text.replace(secret, "***") if secret else text


class CompletionClient:
    """
    Text-completion endpoint reached over HTTP(S).

    One request is in flight per instance; callers wanting parallel requests
    create one client each.

    Parameters
    ----------
    endpoint : str
        Full URL of the completion route.
    api_key : str, optional
        Sent as a bearer token; never logged.
    model : str
        Model name placed in the request body.
    timeout : float
        Seconds before the request is abandoned.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: Optional[str] = None,
        model: str = DEFAULT_MODEL,
        timeout: float = DEFAULT_TIMEOUT,
        session: Optional[requests.Session] = None,
    ):
        if not endpoint:
            raise ConfigError("completion endpoint is not configured")
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self._api_key = api_key
        self._session = session or requests.Session()
        self._lock = threading.Lock()

    @classmethod
    def from_env(cls, environ: Optional[Mapping[str, str]] = None) -> "CompletionClient":
        """Builds a client from ``NESY_SOC_LLM_*`` variables; endpoint and key are required."""
        environ = os.environ if environ is None else environ
        endpoint = environ.get("NESY_SOC_LLM_ENDPOINT", "")
        api_key = environ.get("NESY_SOC_LLM_API_KEY", "")
        if not endpoint or not api_key:
            raise ConfigError("remote backend needs NESY_SOC_LLM_ENDPOINT and NESY_SOC_LLM_API_KEY")
        try:
            timeout = float(environ.get("NESY_SOC_LLM_TIMEOUT", DEFAULT_TIMEOUT))
        except ValueError:
            raise ConfigError("NESY_SOC_LLM_TIMEOUT must be a number of seconds")
        return cls(endpoint, api_key, environ.get("NESY_SOC_LLM_MODEL", DEFAULT_MODEL), timeout)

    def complete(self, prompt: str, max_tokens: int = 64) -> str:
        payload = {"model": self.model, "prompt": prompt, "max_tokens": max_tokens, "temperature": 0}
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else {}
        with self._lock:
            logger.debug("completion request to %s: %s", self.endpoint, json.dumps(payload))
            try:
                response = self._session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                response.raise_for_status()
            except requests.exceptions.RequestException as exc:
                raise TransportError(f"completion request failed: {_redact(str(exc), self._api_key)}")
            try:
                body = response.json()
            except ValueError:
                raise MalformedReplyError("completion reply is not JSON")
            logger.debug("completion reply: %s", _redact(json.dumps(body), self._api_key))
        return _reply_text(body)


def _reply_text(body) -> str:
    try:
        choice = body["choices"][0]
    except (KeyError, IndexError, TypeError):
        raise MalformedReplyError("completion reply has no choices")
    if isinstance(choice.get("text"), str):
        return choice["text"]
    message = choice.get("message") or {}
    if isinstance(message.get("content"), str):
        return message["content"]
    raise MalformedReplyError("completion choice carries no text")


def remote_extract(
    request: ExtractionRequest, client: CompletionClient, allowed_symbols: Mapping[str, str] = ATTACK_TECHNIQUES
) -> ExtractionResponse:
    reply = client.complete(request.prompt)
    return parse_reply(reply, allowed_symbols)


# ===== BACKENDS =====


class KeywordBackend:
    def __init__(self, table: KeywordTable):
        self.table = table

    def techniques(self, sentences: Sequence[str]) -> List[str]:
        found: List[str] = []
        for sentence in sentences:
            try:
                found.append(map_sentence(sentence, self.table))
            except UnmappedSentenceError as exc:
                raise UnmappedSentenceError(exc.sentence, exc.tried, list(found))
        return found


class RemoteBackend:
    def __init__(
        self,
        client: CompletionClient,
        symbols: Mapping[str, str] = ATTACK_TECHNIQUES,
        examples: Sequence[FewShotExample] = FEW_SHOT_EXAMPLES,
    ):
        self.client = client
        self.symbols = symbols
        self.examples = examples

    def techniques(self, sentences: Sequence[str]) -> List[str]:
        if len(sentences) < 2:
            raise ExtractionError(f"{ALLOWED_PATTERN} relates two sentences; the report has {len(sentences)}")
        chain: List[str] = []
        for k, (first, second) in enumerate(zip(sentences, sentences[1:])):
            request = ExtractionRequest(build_prompt(first, second, self.symbols, self.examples), first, second)
            a, b = remote_extract(request, self.client, self.symbols).symbols
            if not chain:
                chain = [a, b]
            elif chain[-1] != a:
                raise PlanConflictError(
                    f"sentence {k + 1} mapped to {chain[-1]} in one pair and to {a} in the next: {first!r}"
                )
            else:
                chain.append(b)
            logger.info("pair %d mapped to %s -> %s", k + 1, a, b)
        return chain


def extract_plan(report: str, backend, plan_id: str = DEFAULT_PLAN_ID) -> PlanPattern:
    """Maps every sentence of ``report`` to a technique and chains them in sentence order."""
    sentences = split_sentences(report)
    techniques = backend.techniques(sentences)
    plan = PlanPattern(plan_id, ltlf.chain_pattern(techniques))
    logger.info("extracted %s", plan.text)
    return plan
