"""Tests for prompt assembly, backends and report parsing."""

import numpy as np
import pytest
import requests

from errors import BackendError, ConfigError, DomainError, PromptTooLongError, ReportSchemaError
from ingest import CLASS_NAMES, FAULT_CLASSES
from llmbridge import (
    Action,
    HttpChatBackend,
    MockBackend,
    Report,
    backend_from_config,
    build_prompt,
    compose_mock_response,
    estimate_tokens,
    format_report,
    normalize_options,
    parse_report,
    query_llm,
    query_many,
    render_response,
    save_report,
)
from model import DetectionOutput

SENTENCES = (
    "The node reports that the end-to-end delay shows a high anomaly with value 120 ms.",
    "The node reports that the packet loss rate shows a slight anomaly.",
)


def detection(p_anomalous=0.9, top="congestion"):
    p_c = np.full(len(CLASS_NAMES), 0.05)
    p_c[CLASS_NAMES.index(top)] = 1.0 - 0.05 * (len(CLASS_NAMES) - 1)
    return DetectionOutput(np.array([1 - p_anomalous, p_anomalous]), p_c)


class FakeResponse:
    def __init__(self, content=None, status=200):
        self.content = content
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError(f"{self.status} error")

    def json(self):
        return {"choices": [{"message": {"content": self.content}}]}


class FakeSession:
    """Replays a list of responses or exceptions."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


class TestBuildPrompt:
    """Three-segment prompt"""

    def test_segments_in_order(self):
        prompt = build_prompt(detection(), SENTENCES, entity=("city_vehicle-01", "city_vehicle", 4))
        text = prompt.rendered

        assert text.index("CONTEXT") < text.index("OPTIONS") < text.index("TASK INSTRUCTION")
        assert "[1] " + SENTENCES[0] in prompt.context
        assert "[2] " + SENTENCES[1] in prompt.context
        assert "Entity: city_vehicle-01 (city_vehicle), window 4" in prompt.context
        assert "anomalous (probability 0.900)" in prompt.context
        assert "Top fault prediction: congestion" in prompt.context

    def test_options_bracketed_by_normal_and_unclassified(self):
        prompt = build_prompt(detection(), SENTENCES)

        assert prompt.options[0] == "normal"
        assert prompt.options[-1] == "unclassified"
        assert set(FAULT_CLASSES) <= set(prompt.options)

    def test_task_steps_in_order(self):
        task = build_prompt(detection(), SENTENCES).task_instruction
        assert task.index("fault type confirmation") < task.index("evidence verification") < task.index(
            "action generation"
        )

    def test_no_sentences_states_normal(self):
        prompt = build_prompt(detection(0.1, "normal"), ())

        assert "every monitored KPI is in its normal state" in prompt.context
        assert "normal status" in prompt.context
        assert prompt.severity == "normal"

    def test_schema_holds_for_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p_d = rng.dirichlet([1, 1])
            p_c = rng.dirichlet([1] * len(CLASS_NAMES))
            n = int(rng.integers(0, 6))
            sentences = [f"Sentence number {i}." for i in range(n)]
            options = list(rng.permutation(FAULT_CLASSES)[: int(rng.integers(1, 6))])
            prompt = build_prompt(DetectionOutput(p_d, p_c), sentences, options)

            assert prompt.rendered.count("CONTEXT\n") == 1
            assert prompt.options[0] == "normal" and prompt.options[-1] == "unclassified"
            assert len(prompt.options) == len(set(prompt.options))
            for i in range(1, n + 1):
                assert f"[{i}] Sentence number {i - 1}." in prompt.context
            for i, option in enumerate(prompt.options, start=1):
                assert f"{i}. {option}" in prompt.rendered

    def test_deterministic(self):
        a = build_prompt(detection(), SENTENCES)
        b = build_prompt(detection(), SENTENCES)
        assert a.rendered == b.rendered
        assert a.fingerprint == b.fingerprint

    def test_normalize_options(self):
        assert normalize_options(["unclassified", "congestion", "normal", "congestion"]) == (
            "normal", "congestion", "unclassified",
        )
        with pytest.raises(DomainError):
            normalize_options(["  "])


class TestParseReport:
    """Structured report parsing"""

    def test_round_trip(self):
        report = Report(
            fault_type="congestion",
            severity="high",
            evidence=(1, 2),
            actions=(Action("Apply rate limiting", "tc qdisc add dev eth0 root tbf rate 10mbit"), Action("Reroute")),
        )
        parsed = parse_report(render_response(report), sentence_count=2)

        assert parsed.fault_type == "congestion"
        assert parsed.severity == "high"
        assert parsed.evidence == (1, 2)
        assert parsed.actions == report.actions

    def test_lenient_headers(self):
        raw = "**Fault Type:** 2. Congestion\nEvidence: 1 and 3\n## ACTIONS:\n* Reduce load\n  on the link\n"
        parsed = parse_report(raw)

        assert parsed.fault_type == "congestion"
        assert parsed.severity == "unspecified"
        assert parsed.evidence == (1, 3)
        assert parsed.actions == (Action("Reduce load on the link"),)

    def test_unknown_fault_becomes_unclassified(self):
        raw = "FAULT TYPE: solar flare\nEVIDENCE: none\nACTIONS:\n- Wait\n"
        assert parse_report(raw).fault_type == "unclassified"

    def test_out_of_range_evidence_dropped(self):
        raw = "FAULT TYPE: normal\nEVIDENCE: 1, 7\nACTIONS:\n- Nothing\n"
        assert parse_report(raw, sentence_count=2).evidence == (1,)

    @pytest.mark.parametrize("raw", ["", "   ", "FAULT TYPE: congestion\nACTIONS:\n- x\n"])
    def test_missing_sections(self, raw):
        with pytest.raises(ReportSchemaError):
            parse_report(raw)

    def test_header_lines_inside_script_stay_in_script(self):
        raw = (
            "FAULT TYPE: congestion\nEVIDENCE: 1\nACTIONS:\n- Apply the shaping profile\n"
            "```yaml\nseverity: critical\nevidence: 9\n```\n"
        )
        parsed = parse_report(raw, sentence_count=2)

        assert parsed.severity == "unspecified"
        assert parsed.evidence == (1,)
        assert parsed.actions == (Action("Apply the shaping profile", "severity: critical\nevidence: 9"),)

    def test_unterminated_script(self):
        raw = "FAULT TYPE: congestion\nEVIDENCE: 1\nACTIONS:\n- Limit\n```sh\ntc qdisc\n"
        with pytest.raises(ReportSchemaError, match="unterminated"):
            parse_report(raw)


class TestMockBackend:
    """Deterministic offline backend"""

    def test_composed_answer_follows_detection(self):
        prompt = build_prompt(detection(0.9, "node_crash"), SENTENCES, severity="high")
        report = parse_report(MockBackend().complete(prompt), prompt.options, len(SENTENCES))

        assert report.fault_type == "node_crash"
        assert report.severity == "high"
        assert report.evidence == (1, 2)
        assert report.actions

    def test_normal_detection(self):
        prompt = build_prompt(detection(0.2, "normal"), ())
        assert parse_report(compose_mock_response(prompt)).fault_type == "normal"

    def test_fault_outside_options(self):
        prompt = build_prompt(detection(0.9, "interference"), SENTENCES, options=["congestion"])
        assert parse_report(compose_mock_response(prompt), prompt.options).fault_type == "unclassified"

    def test_canned_response_by_hash(self, tmp_path):
        prompt = build_prompt(detection(), SENTENCES)
        (tmp_path / f"{prompt.fingerprint}.txt").write_text("FAULT TYPE: config_error\nEVIDENCE: 2\nACTIONS:\n- Roll back\n")

        assert parse_report(MockBackend(tmp_path).complete(prompt)).fault_type == "config_error"


class TestHttpBackend:
    """OpenAI-compatible endpoint with retries"""

    def test_success_payload(self):
        session = FakeSession([FakeResponse("FAULT TYPE: normal\nEVIDENCE: none\nACTIONS:\n- None\n")])
        backend = HttpChatBackend("http://llm.local/v1/", "m", api_key="k", session=session)
        prompt = build_prompt(detection(), SENTENCES)
        raw = backend.complete(prompt)

        call = session.calls[0]
        assert raw.startswith("FAULT TYPE")
        assert call["url"] == "http://llm.local/v1/chat/completions"
        assert call["headers"]["Authorization"] == "Bearer k"
        assert call["json"]["messages"][-1]["content"] == prompt.rendered
        assert call["json"]["temperature"] == 0

    def test_retries_then_succeeds(self, monkeypatch):
        sleeps = []
        monkeypatch.setattr("llmbridge.time.sleep", sleeps.append)
        session = FakeSession([
            requests.ConnectionError("down"),
            FakeResponse(status=503),
            FakeResponse("FAULT TYPE: normal\nEVIDENCE: none\nACTIONS:\n- None\n"),
        ])
        backend = HttpChatBackend("http://llm.local/v1", "m", max_retries=3, backoff=0.5, session=session)
        backend.complete(build_prompt(detection(), SENTENCES))

        assert len(session.calls) == 3
        assert sleeps == [0.5, 1.0]

    def test_gives_up(self, monkeypatch):
        monkeypatch.setattr("llmbridge.time.sleep", lambda s: None)
        session = FakeSession([requests.Timeout("slow")] * 2)
        backend = HttpChatBackend("http://llm.local/v1", "m", max_retries=2, session=session)

        with pytest.raises(BackendError, match="after 2 attempts"):
            backend.complete(build_prompt(detection(), SENTENCES))

    def test_from_config(self, monkeypatch):
        monkeypatch.setenv("TEST_LLM_KEY", "secret")
        llm = {
            "backend": "http", "base_url": "http://x/v1", "model": "m", "api_key_env": "TEST_LLM_KEY",
            "timeout": 5, "max_retries": 2, "backoff": 0.1,
        }
        backend = backend_from_config(llm)

        assert isinstance(backend, HttpChatBackend)
        assert backend.api_key == "secret"
        assert isinstance(backend_from_config({"backend": "mock"}), MockBackend)
        with pytest.raises(ConfigError):
            backend_from_config({"backend": "carrier-pigeon"})


class TestQuery:
    """Token budget and concurrent queries"""

    def test_token_estimate(self):
        assert estimate_tokens("") == 0
        assert estimate_tokens("abcde") == 2

    def test_budget_refused_before_sending(self):
        session = FakeSession([])
        prompt = build_prompt(detection(), SENTENCES)
        with pytest.raises(PromptTooLongError):
            query_llm(prompt, HttpChatBackend("http://x/v1", "m", session=session), token_budget=10)
        assert session.calls == []

    def test_query_many_keeps_order(self):
        prompts = [build_prompt(detection(0.9, fault), SENTENCES) for fault in FAULT_CLASSES]
        responses = query_many(prompts, MockBackend(), max_in_flight=3)
        faults = [parse_report(r).fault_type for r in responses]

        assert faults == list(FAULT_CLASSES)


class TestSaveReport:
    """Report files"""

    def test_json_and_text(self, tmp_path):
        prompt = build_prompt(detection(), SENTENCES)
        report = parse_report(compose_mock_response(prompt), prompt.options, len(SENTENCES))
        json_path, text_path = save_report(report, tmp_path / "r" / "city-w0001", prompt)

        assert json_path.name == "city-w0001.json"
        assert '"prompt_hash"' in json_path.read_text()
        text = text_path.read_text()
        assert text == format_report(report, prompt)
        assert "[1] " + SENTENCES[0] in text
        assert "$ tc qdisc" in text
