import os

import pytest
import requests

from nesy_soc import ctibridge as cti
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
from nesy_soc.ltlf import format_ltlf

DATA = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "cti")
CHAIN = "F (t1566 & X F (t1548 & X F t1048))"


def _reply(*symbols, pattern=cti.ALLOWED_PATTERN):
    return f"PATTERN: {pattern}\nSYMBOLS: {', '.join(symbols)}\n"


class ScriptedClient:
    """Answers completion prompts from a fixed list of replies."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt, max_tokens=64):
        self.prompts.append(prompt)
        return self.replies.pop(0)


class FakeResponse:
    def __init__(self, body=None, status=200):
        self.body = body
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"{self.status} error")

    def json(self):
        if self.body is None:
            raise ValueError("no json")
        return self.body


class FakeSession:
    def __init__(self, response=None, error=None):
        self.response = response
        self.error = error
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        if self.error is not None:
            raise self.error
        return self.response


@pytest.fixture(scope="module")
def report():
    with open(os.path.join(DATA, "attack_description.txt")) as fh:
        return fh.read()


@pytest.fixture(scope="module")
def table():
    return cti.read_keyword_table(os.path.join(DATA, "keywords.txt"))


# ===== KEYWORD BACKEND =====


def test_bundled_report_with_keywords(report, table):
    plan = cti.extract_plan(report, cti.KeywordBackend(table))
    assert plan.plan_id == "planX"
    assert plan.text == f"planX: {CHAIN}"
    again = cti.extract_plan(report, cti.KeywordBackend(table))
    assert again.text.encode() == plan.text.encode()


def test_split_sentences():
    assert cti.split_sentences("One. Two!  Three?") == ["One.", "Two!", "Three?"]
    assert cti.split_sentences("no terminal\nstop") == ["no terminal stop"]
    assert cti.split_sentences("Version 1.2 shipped. Then") == ["Version 1.2 shipped.", "Then"]
    with pytest.raises(ExtractionError, match="empty"):
        cti.split_sentences(" \n ")


def test_first_phrase_wins():
    table = cti.KeywordTable.of([("sudoers", "T1548"), ("root", "T1068")])
    assert cti.map_sentence("edit the SUDOERS file to gain root", table) == "t1548"
    assert cti.map_sentence("gain root", table) == "t1068"


def test_unmapped_sentence_keeps_partial_result(table):
    backend = cti.KeywordBackend(table)
    with pytest.raises(UnmappedSentenceError) as info:
        backend.techniques(["Spearphishing first.", "Then something else."])
    assert info.value.sentence == "Then something else."
    assert info.value.tried == ["spearphishing", "sudoers", "exfiltration"]
    assert info.value.partial == ["t1566"]
    with pytest.raises(ExtractionError, match="empty"):
        cti.map_sentence("anything", cti.KeywordTable(()))


def test_keyword_table_errors():
    with pytest.raises(InputFileError, match=":2:"):
        cti.parse_keyword_table("phish => T1566\nsudo -> T1548\n")
    with pytest.raises(InputFileError, match=":1:"):
        cti.parse_keyword_table("phish => Phishing\n")
    assert cti.parse_keyword_table("# nothing\n").entries == ()


# ===== PROMPT PROTOCOL =====


def test_prompt_contents():
    prompt = cti.build_prompt("First sentence.", "Second sentence.")
    assert "ALLOWED_PATTERNS: ExistenceEventuallyOther" in prompt
    assert "T1566 (Phishing)" in prompt
    assert "NL: The adversary logs into the Kubernetes console." in prompt
    assert "SYMBOLS: T1133, T1552" in prompt
    assert prompt.endswith("NL: First sentence.\nThis leads to: Second sentence.\n")


def test_parse_reply():
    response = cti.parse_reply("  PATTERN: ExistenceEventuallyOther\nSYMBOLS: T1566, T1548.003\n")
    assert response == cti.ExtractionResponse(cti.ALLOWED_PATTERN, ("t1566", "t1548_003"))

    with pytest.raises(MalformedReplyError):
        cti.parse_reply("SYMBOLS: T1566, T1548")
    with pytest.raises(DisallowedPatternError):
        cti.parse_reply(_reply("T1566", "T1548", pattern="Precedence"))
    with pytest.raises(MalformedReplyError, match="two symbols"):
        cti.parse_reply(_reply("T1566", "T1548", "T1048"))
    with pytest.raises(ExtractionError, match="technique"):
        cti.parse_reply(_reply("Phishing", "T1548"))
    with pytest.raises(ExtractionError, match="allowed"):
        cti.parse_reply(_reply("T9999", "T1548"), cti.ATTACK_TECHNIQUES)


# ===== REMOTE BACKEND =====


def test_remote_backend_merges_pairs(report):
    client = ScriptedClient([_reply("T1566", "T1548"), _reply("T1548", "T1048")])
    plan = cti.extract_plan(report, cti.RemoteBackend(client))
    assert format_ltlf(plan.formula) == CHAIN
    assert len(client.prompts) == 2
    assert "NL: Attackers leveraged spearphishing" in client.prompts[0]
    assert "This leads to: Attackers modifies the tty_tickets" in client.prompts[0]


def test_remote_backend_conflict(report):
    client = ScriptedClient([_reply("T1566", "T1548"), _reply("T1059", "T1048")])
    with pytest.raises(PlanConflictError):
        cti.extract_plan(report, cti.RemoteBackend(client))


def test_remote_backend_needs_two_sentences():
    with pytest.raises(ExtractionError, match="two sentences"):
        cti.extract_plan("Just one sentence.", cti.RemoteBackend(ScriptedClient([])))


# ===== COMPLETION CLIENT =====


def test_client_posts_prompt():
    session = FakeSession(FakeResponse({"choices": [{"text": _reply("T1566", "T1548")}]}))
    client = cti.CompletionClient("https://llm.example/v1/completions", "k-secret", session=session)
    assert cti.parse_reply(client.complete("hello")).symbols == ("t1566", "t1548")
    (call,) = session.calls
    assert call["json"]["prompt"] == "hello"
    assert call["json"]["model"] == cti.DEFAULT_MODEL
    assert call["headers"] == {"Authorization": "Bearer k-secret"}
    assert call["timeout"] == cti.DEFAULT_TIMEOUT


def test_client_accepts_chat_replies():
    session = FakeSession(FakeResponse({"choices": [{"message": {"content": "PATTERN: x"}}]}))
    assert cti.CompletionClient("https://e", "k", session=session).complete("p") == "PATTERN: x"


@pytest.mark.parametrize(
    "response, error",
    [
        (FakeResponse(None), MalformedReplyError),
        (FakeResponse({"choices": []}), MalformedReplyError),
        (FakeResponse({"choices": [{"text": None}]}), MalformedReplyError),
        (FakeResponse({}, status=503), TransportError),
    ],
)
def test_client_reply_errors(response, error):
    with pytest.raises(error):
        cti.CompletionClient("https://e", "k", session=FakeSession(response)).complete("p")


def test_transport_errors_hide_the_key():
    session = FakeSession(error=requests.ConnectionError("refused for k-secret"))
    client = cti.CompletionClient("https://e", "k-secret", session=session)
    with pytest.raises(TransportError) as info:
        client.complete("p")
    assert "k-secret" not in str(info.value)
    assert isinstance(info.value, ConnectionError)


def test_client_from_env():
    with pytest.raises(ConfigError):
        cti.CompletionClient.from_env({})
    with pytest.raises(ConfigError):
        cti.CompletionClient.from_env({"NESY_SOC_LLM_ENDPOINT": "https://e"})
    with pytest.raises(ConfigError):
        cti.CompletionClient.from_env(
            {"NESY_SOC_LLM_ENDPOINT": "https://e", "NESY_SOC_LLM_API_KEY": "k", "NESY_SOC_LLM_TIMEOUT": "soon"}
        )
    client = cti.CompletionClient.from_env(
        {"NESY_SOC_LLM_ENDPOINT": "https://e", "NESY_SOC_LLM_API_KEY": "k", "NESY_SOC_LLM_MODEL": "m"}
    )
    assert (client.endpoint, client.model, client.timeout) == ("https://e", "m", cti.DEFAULT_TIMEOUT)
