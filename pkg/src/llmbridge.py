"""
Prompt assembly, LLM backends and report parsing.

A prompt has three segments:

    CONTEXT           detection result, numbered severity descriptions,
                      common anomaly signatures
    OPTIONS           numbered fault labels, always including "normal"
                      and "unclassified"
    TASK INSTRUCTION  fault confirmation → evidence verification → actions,
                      plus the response headers to use

Responses are parsed by header:

    FAULT TYPE: congestion
    SEVERITY: moderate
    EVIDENCE: 1, 3
    ACTIONS:
    - Apply rate limiting on the egress interface
    ```sh
    tc qdisc add dev eth0 root tbf rate 10mbit burst 32kbit latency 400ms
    ```

Scripts are kept as text and never executed.
"""

import hashlib
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import requests

from errors import BackendError, ConfigError, DomainError, PromptTooLongError, ReportSchemaError
from ingest import CLASS_NAMES, FAULT_CLASSES

logger = logging.getLogger(__name__)

OPTION_NORMAL = "normal"
OPTION_UNCLASSIFIED = "unclassified"

DEFAULT_OPTIONS = CLASS_NAMES + (OPTION_UNCLASSIFIED,)

DEFAULT_TOKEN_BUDGET = 4096

# Typical KPI signature of each fault class
COMMON_ANOMALIES = {
    "congestion": "delay and packet loss rise together, jitter grows moderately",
    "node_crash": "packet loss reaches 100% and throughput drops to zero",
    "malicious_traffic": "throughput surges while packet loss sits near 99%",
    "config_error": "delay steps up to a new constant level without extra loss",
    "interference": "jitter and delay variability grow sharply, mean levels barely move",
}

RATE_LIMIT_SCRIPT = "tc qdisc add dev eth0 root tbf rate 10mbit burst 32kbit latency 400ms"

MITIGATIONS = {
    "normal": [("No action required; keep monitoring the node", None)],
    "congestion": [
        ("Apply rate limiting on the egress interface", RATE_LIMIT_SCRIPT),
        ("Shift part of the traffic to a less loaded neighbouring node", None),
    ],
    "node_crash": [
        ("Reroute traffic around the failed node", None),
        ("Restart the node's network stack and verify it rejoins", None),
    ],
    "malicious_traffic": [
        ("Rate-limit the offending flows on the egress interface", RATE_LIMIT_SCRIPT),
        ("Block the source addresses identified in the flow logs", None),
    ],
    "config_error": [
        ("Roll back the most recent configuration change", None),
        ("Compare routing and QoS settings against the baseline profile", None),
    ],
    "interference": [
        ("Move the affected link to a cleaner channel", None),
        ("Raise transmit power within regulatory limits", None),
    ],
    "unclassified": [("Escalate to an operator for manual diagnosis", None)],
}

TASKS = (
    "Step 1 (fault type confirmation): choose exactly one fault type from OPTIONS "
    "that is consistent with the detection result.",
    "Step 2 (evidence verification): cite the numbered severity descriptions that support "
    "the chosen fault type and check each of them against it; drop any that contradict it.",
    "Step 3 (action generation): propose mitigation actions for the confirmed fault; "
    "put any executable command in a fenced code block.",
)

RESPONSE_FORMAT = (
    "Answer using exactly these headers, each on its own line:\n"
    "FAULT TYPE: <one option>\n"
    "SEVERITY: <severity descriptor>\n"
    "EVIDENCE: <comma-separated description numbers, or none>\n"
    "ACTIONS:\n"
    "- <action>"
)

SYSTEM_PROMPT = (
    "You are a network operations analyst. Use only the facts in the prompt "
    "and answer strictly in the requested format."
)

HEADERS = ("FAULT TYPE", "SEVERITY", "EVIDENCE", "ACTIONS")
REQUIRED_HEADERS = ("FAULT TYPE", "EVIDENCE", "ACTIONS")

_HEADER_LINE = re.compile(r"^[#*\s]*(FAULT TYPE|SEVERITY|EVIDENCE|ACTIONS)[*\s]*:[*\s]*(.*)$", re.IGNORECASE)
_OPTION_NUMBER = re.compile(r"^\d+[.)]\s*")


@dataclass(frozen=True)
class PromptBundle:
    context: str
    options: tuple
    task_instruction: str
    rendered: str
    sentences: tuple = ()
    top_fault: str = OPTION_NORMAL
    anomalous: bool = False
    severity: str = OPTION_NORMAL

    @property
    def fingerprint(self):
        return prompt_hash(self.rendered)


@dataclass(frozen=True)
class Action:
    description: str
    script: str = None


@dataclass(frozen=True)
class Report:
    fault_type: str
    severity: str
    evidence: tuple
    actions: tuple
    raw_response: str = ""

    def to_dict(self):
        doc = asdict(self)
        doc["evidence"] = list(self.evidence)
        doc["actions"] = [asdict(a) for a in self.actions]
        return doc


def prompt_hash(text):
    """First 16 hex chars of sha256; names canned mock responses."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def estimate_tokens(text):
    return math.ceil(len(text) / 4)


def normalize_options(options):
    """Keep order, drop duplicates, force "normal" first and "unclassified" last."""
    options = [str(o).strip() for o in options if str(o).strip()]
    if not options:
        raise DomainError("prompt options must not be empty")
    options = list(dict.fromkeys(options))
    if OPTION_NORMAL in options:
        options.remove(OPTION_NORMAL)
    if OPTION_UNCLASSIFIED in options:
        options.remove(OPTION_UNCLASSIFIED)
    return (OPTION_NORMAL, *options, OPTION_UNCLASSIFIED)


def build_prompt(det, sentences, options=DEFAULT_OPTIONS, common_anomalies=None,
                 class_names=CLASS_NAMES, entity=None, severity=None):
    """
    Fill the three-segment template.

    Args:
        det: DetectionOutput of one sample (p_d of length 2, p_c over class_names)
        sentences: severity descriptions from the semantic tree
        options: fault labels offered to the model
        common_anomalies: {fault: signature}; defaults to COMMON_ANOMALIES
        entity: optional (entity_id, entity_class, window_index)
        severity: descriptor of the worst state, if known

    Returns:
        PromptBundle
    """
    options = normalize_options(options)
    common_anomalies = COMMON_ANOMALIES if common_anomalies is None else common_anomalies
    sentences = tuple(sentences)

    p_anomalous = float(det.p_d[1])
    anomalous = p_anomalous > float(det.p_d[0])
    top = int(max(range(len(det.p_c)), key=lambda i: (det.p_c[i], -i)))
    top_fault = class_names[top]

    lines = ["CONTEXT"]
    if entity is not None:
        entity_id, entity_class, window_index = entity
        lines.append(f"Entity: {entity_id} ({entity_class}), window {window_index}")
    if anomalous:
        lines.append(f"Detection result: anomalous (probability {p_anomalous:.3f}).")
    else:
        lines.append(f"Detection result: normal status (probability {1.0 - p_anomalous:.3f}).")
    lines.append(f"Top fault prediction: {top_fault} (probability {float(det.p_c[top]):.3f}).")

    if sentences:
        lines.append("Severity descriptions:")
        lines.extend(f"[{i}] {s}" for i, s in enumerate(sentences, start=1))
    else:
        lines.append("Severity descriptions: none; every monitored KPI is in its normal state.")

    if common_anomalies:
        lines.append("Common anomalies:")
        lines.extend(f"- {fault}: {signature}" for fault, signature in common_anomalies.items())
    context = "\n".join(lines)

    options_text = "OPTIONS\n" + "\n".join(f"{i}. {o}" for i, o in enumerate(options, start=1))
    task_instruction = (
        "TASK INSTRUCTION\n"
        "Work through the steps in order and verify each one before moving on.\n"
        + "\n".join(TASKS)
        + "\n"
        + RESPONSE_FORMAT
    )

    rendered = "\n\n".join([context, options_text, task_instruction]) + "\n"
    if severity is None:
        severity = "unspecified" if sentences else OPTION_NORMAL
    return PromptBundle(
        context=context,
        options=options,
        task_instruction=task_instruction,
        rendered=rendered,
        sentences=sentences,
        top_fault=top_fault,
        anomalous=anomalous,
        severity=severity,
    )


# --- responses -------------------------------------------------------------

def render_response(report):
    """Text of a report in the response schema parse_report reads."""
    evidence = ", ".join(str(i) for i in report.evidence) if report.evidence else "none"
    lines = [
        f"FAULT TYPE: {report.fault_type}",
        f"SEVERITY: {report.severity}",
        f"EVIDENCE: {evidence}",
        "ACTIONS:",
    ]
    for action in report.actions:
        lines.append(f"- {action.description}")
        if action.script is not None:
            lines.extend(["```sh", action.script, "```"])
    return "\n".join(lines) + "\n"


def compose_mock_response(prompt):
    """Deterministic answer built from the prompt's own detection result."""
    if prompt.anomalous and prompt.top_fault in FAULT_CLASSES:
        fault = prompt.top_fault
    elif prompt.anomalous:
        fault = OPTION_UNCLASSIFIED
    else:
        fault = OPTION_NORMAL
    if fault not in prompt.options:
        fault = OPTION_UNCLASSIFIED

    report = Report(
        fault_type=fault,
        severity=prompt.severity,
        evidence=tuple(range(1, len(prompt.sentences) + 1)),
        actions=tuple(Action(d, s) for d, s in MITIGATIONS[fault]),
    )
    return render_response(report)


def _sections(raw):
    """Lines per header; header-like lines inside ``` fences stay content."""
    sections = {}
    current = None
    in_fence = False
    for line in raw.splitlines():
        if line.strip().startswith("```"):
            in_fence = not in_fence
        match = None if in_fence else _HEADER_LINE.match(line)
        if match:
            current = match.group(1).upper()
            sections[current] = [match.group(2).strip()] if match.group(2).strip() else []
        elif current is not None:
            sections[current].append(line)
    return sections


def _parse_actions(lines):
    actions = []
    description = None
    script = None
    in_fence = False
    for line in lines:
        stripped = line.strip()
        if stripped.startswith("```"):
            if in_fence:
                if description is None:
                    description = "Run script"
                actions.append(Action(description, "\n".join(script)))
                description, script, in_fence = None, None, False
            else:
                in_fence = True
                script = []
            continue
        if in_fence:
            script.append(line)
        elif stripped.startswith(("- ", "* ")):
            if description is not None:
                actions.append(Action(description))
            description = stripped[2:].strip()
        elif stripped and description is not None:
            description = f"{description} {stripped}"
        elif stripped:
            description = stripped
    if in_fence:
        raise ReportSchemaError("unterminated code block in ACTIONS")
    if description is not None:
        actions.append(Action(description))
    return tuple(actions)


def parse_report(raw, options=DEFAULT_OPTIONS, sentence_count=None):
    """
    Parse a response into a Report.

    Fault types outside `options` become "unclassified". With sentence_count,
    evidence numbers that do not refer to a prompt sentence are dropped.
    """
    if not raw or not raw.strip():
        raise ReportSchemaError("empty response", raw=raw or "")
    sections = _sections(raw)
    missing = [h for h in REQUIRED_HEADERS if h not in sections]
    if missing:
        raise ReportSchemaError(f"response is missing section(s) {missing}", raw=raw)

    fault = " ".join(" ".join(sections["FAULT TYPE"]).split()).strip("`*. ").lower()
    fault = _OPTION_NUMBER.sub("", fault)
    if fault not in options:
        logger.warning("fault type '%s' is not an option; using '%s'", fault, OPTION_UNCLASSIFIED)
        fault = OPTION_UNCLASSIFIED

    severity = " ".join(" ".join(sections.get("SEVERITY", [])).split()) or "unspecified"

    evidence = tuple(int(n) for n in re.findall(r"\d+", " ".join(sections["EVIDENCE"])))
    if sentence_count is not None:
        valid = tuple(n for n in evidence if 1 <= n <= sentence_count)
        if valid != evidence:
            logger.warning("dropping evidence references outside 1..%d: %s", sentence_count, evidence)
        evidence = valid

    return Report(
        fault_type=fault,
        severity=severity,
        evidence=evidence,
        actions=_parse_actions(sections["ACTIONS"]),
        raw_response=raw,
    )


# --- backends --------------------------------------------------------------

class MockBackend:
    """Canned responses from `<directory>/<prompt hash>.txt`, else a composed answer."""

    name = "mock"

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None

    def complete(self, prompt):
        if self.directory is not None:
            canned = self.directory / f"{prompt.fingerprint}.txt"
            if canned.exists():
                return canned.read_text(encoding="utf-8")
        return compose_mock_response(prompt)


class HttpChatBackend:
    """OpenAI-compatible chat-completion endpoint."""

    name = "http"

    def __init__(self, base_url, model, api_key=None, timeout=30.0, max_retries=3, backoff=0.5, session=None):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max(1, int(max_retries))
        self.backoff = backoff
        self.session = session or requests.Session()

    def complete(self, prompt):
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt.rendered},
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error = None
        for attempt in range(1, self.max_retries + 1):
            try:
                response = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
                response.raise_for_status()
                return response.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as e:
                last_error = e
                logger.warning("attempt %d/%d to %s failed: %s", attempt, self.max_retries, self.url, e)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise BackendError(f"{self.url} failed after {self.max_retries} attempts: {last_error}")


def backend_from_config(llm):
    """Backend for the `llm` config section."""
    if llm["backend"] == "mock":
        return MockBackend(llm.get("mock_dir"))
    if llm["backend"] == "http":
        return HttpChatBackend(
            base_url=llm["base_url"],
            model=llm["model"],
            api_key=os.environ.get(llm.get("api_key_env") or ""),
            timeout=float(llm["timeout"]),
            max_retries=int(llm["max_retries"]),
            backoff=float(llm["backoff"]),
        )
    raise ConfigError(f"unknown llm.backend '{llm['backend']}'")


def query_llm(prompt, backend, token_budget=DEFAULT_TOKEN_BUDGET):
    """Send one prompt; refuses prompts over the token budget before sending."""
    tokens = estimate_tokens(prompt.rendered)
    if tokens > token_budget:
        raise PromptTooLongError(f"prompt needs ~{tokens} tokens, budget is {token_budget}")

    logger.info("request %s to %s backend (~%d tokens)", prompt.fingerprint, backend.name, tokens)
    logger.debug("prompt %s:\n%s", prompt.fingerprint, prompt.rendered)
    started = time.monotonic()
    raw = backend.complete(prompt)
    logger.info("response %s after %.2fs (%d chars)", prompt.fingerprint, time.monotonic() - started, len(raw))
    logger.debug("response %s:\n%s", prompt.fingerprint, raw)
    return raw


def query_many(prompts, backend, max_in_flight=4, token_budget=DEFAULT_TOKEN_BUDGET):
    """Query prompts concurrently (at most max_in_flight at once); results in input order."""
    with ThreadPoolExecutor(max_workers=max(1, int(max_in_flight))) as pool:
        return list(pool.map(lambda p: query_llm(p, backend, token_budget), prompts))


def format_report(report, prompt=None):
    """Human-readable report text."""
    lines = ["NETWORK ANOMALY REPORT", ""]
    lines.append(f"Fault type: {report.fault_type}")
    lines.append(f"Severity:   {report.severity}")
    lines.append("")
    lines.append("Evidence:")
    if not report.evidence:
        lines.append("  (none)")
    for n in report.evidence:
        if prompt is not None and 1 <= n <= len(prompt.sentences):
            lines.append(f"  [{n}] {prompt.sentences[n - 1]}")
        else:
            lines.append(f"  [{n}]")
    lines.append("")
    lines.append("Mitigation plan:")
    for i, action in enumerate(report.actions, start=1):
        lines.append(f"  {i}. {action.description}")
        if action.script is not None:
            lines.extend(f"       $ {line}" for line in action.script.splitlines())
    return "\n".join(lines) + "\n"


def save_report(report, stem, prompt=None):
    """Write `<stem>.json` and `<stem>.txt`; returns both paths."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    if prompt is not None:
        doc["prompt"] = prompt.rendered
        doc["prompt_hash"] = prompt.fingerprint
    json_path = stem.with_suffix(".json")
    text_path = stem.with_suffix(".txt")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    text_path.write_text(format_report(report, prompt), encoding="utf-8")
    return json_path, text_path
