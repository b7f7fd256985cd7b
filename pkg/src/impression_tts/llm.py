"""Map a free-form impression description to an impression vector with an LLM.

The prompt has three sections in a fixed order: a task description, the
instructions (what each dimension means plus the scores of the unmodulated
utterance) and the target description. The model must answer with a JSON
object keyed "A".."K"; anything else triggers a retry with a format
reminder.
"""

from __future__ import annotations

import json
import math
import os
import re
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

from .errors import EmptyTarget, MalformedResponse, MappingFailed, MissingDimension
from .impression import DIM_IDS, DIMS, LIKERT_MAX, LIKERT_MIN, ImpressionVector, Scale

K_RANGE = (-3.0, 3.0)


def _dim_definition(d) -> str:
    low, high = d.name_pair.split("–")
    if d.scale is Scale.ZSCORE:
        return (f"- {d.id}) {d.name_pair}: speaking rate as a z-score over a reference corpus; "
                f"negative = slower ({low.lower()}), positive = faster ({high.lower()}), typical range -3 to 3.")
    return f"- {d.id}) {d.name_pair}: 1 = {low.lower()}, 7 = {high.lower()}, 4 = neutral."


DEFAULT_TASK = (
    "You are an expert in voice quality and speech perception. You adjust an eleven-dimensional "
    "voice impression vector so that a synthesized voice conveys a requested impression."
)

DEFAULT_INSTRUCTIONS = (
    "Each dimension scores one impression pair. Dimensions A-J use a 7-point scale; "
    "dimension K is a speaking-rate z-score.\n"
    "{definitions}\n\n"
    "Scores of the utterance before modulation:\n"
    "{current_scores}\n\n"
    "Change only the dimensions the target calls for and keep the others at their current values. "
    "Answer with one JSON object whose keys are exactly \"A\" through \"K\" and whose values are numbers. "
    "Do not add any other text."
)

DEFAULT_TARGET = "Target impression: {target}"

FORMAT_REMINDER = (
    "\n\nYour previous answer could not be parsed. Reply with only a JSON object with numeric "
    "values for every key \"A\" through \"K\", for example "
    '{"A": 4.0, "B": 4.0, "C": 4.0, "D": 4.0, "E": 4.0, "F": 4.0, "G": 4.0, "H": 4.0, "I": 4.0, "J": 4.0, "K": 0.0}.'
)


@dataclass(frozen=True)
class PromptTemplate:
    task_description: str = DEFAULT_TASK
    instructions: str = DEFAULT_INSTRUCTIONS
    target_spec: str = DEFAULT_TARGET


SECTION_HEADERS = ("## Task", "## Instructions", "## Target")


def build_prompt(tpl: PromptTemplate, current_v: ImpressionVector, target_desc: str) -> str:
    if not target_desc or not target_desc.strip():
        raise EmptyTarget("target description is empty")
    definitions = "\n".join(_dim_definition(d) for d in DIMS)
    scores = "\n".join(f"{d} = {s:.1f}" for d, s in zip(DIM_IDS, current_v.scores))
    instructions = tpl.instructions.format(definitions=definitions, current_scores=scores)
    target = tpl.target_spec.format(target=target_desc)
    parts = zip(SECTION_HEADERS, (tpl.task_description, instructions, target))
    return "\n\n".join(f"{h}\n{body}" for h, body in parts)


def target_section(prompt: str) -> str:
    return prompt.split(SECTION_HEADERS[2] + "\n", 1)[1]


def current_scores_from_prompt(prompt: str) -> dict[str, float]:
    return {m.group(1): float(m.group(2)) for m in re.finditer(r"^([A-K]) = (-?\d+(?:\.\d+)?)$", prompt, re.M)}


# --- parsing ---------------------------------------------------------------------------------


def _json_objects(text: str):
    dec = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = dec.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            yield obj


def parse_vector(response: str) -> tuple[ImpressionVector, tuple[str, ...]]:
    """First JSON object keyed by impression dims -> (clamped vector, dims that were clamped)."""
    for obj in _json_objects(response or ""):
        if isinstance(obj.get("scores"), dict):
            obj = obj["scores"]
        if not any(k in obj for k in DIM_IDS):
            continue
        values, clamped = [], []
        for d in DIM_IDS:
            if d not in obj:
                raise MissingDimension(d)
            x = obj[d]
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                raise MalformedResponse(f"dimension {d} is not a finite number: {x!r}")
            lo, hi = K_RANGE if d == "K" else (LIKERT_MIN, LIKERT_MAX)
            if x < lo or x > hi:
                clamped.append(d)
                x = min(max(x, lo), hi)
            values.append(float(x))
        return ImpressionVector(tuple(values)), tuple(clamped)
    raise MalformedResponse("no JSON object with impression dimensions found")


# --- clients ------------------------------------------------------------------------------------


class LlmClient(Protocol):
    def complete(self, prompt: str, temperature: float = 0.0) -> str: ...


@dataclass
class LlmClientConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    timeout: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    api_key_env: str = "LLM_API_KEY"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class HttpChatClient:
    """Minimal chat-completions client (OpenAI-compatible request/response JSON)."""

    def __init__(self, cfg: LlmClientConfig):
        self.cfg = cfg

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        body = json.dumps({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        }).encode()
        req = urllib.request.Request(self.cfg.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            req.add_header("Authorization", f"Bearer {key}")
        with urllib.request.urlopen(req, timeout=self.cfg.timeout) as resp:
            payload = json.loads(resp.read().decode())
        return payload["choices"][0]["message"]["content"]


class StubClient:
    """Replays canned responses in order (the last one repeats); records every prompt."""

    def __init__(self, responses: Sequence[str] | Callable[[str], str]):
        self._responses = responses
        self.prompts: list[str] = []

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        self.prompts.append(prompt)
        if callable(self._responses):
            return self._responses(prompt)
        i = min(len(self.prompts) - 1, len(self._responses) - 1)
        return self._responses[i]


# keyword -> additive shifts; a deterministic offline stand-in for a real model
KEYWORD_SHIFTS: dict[str, dict[str, float]] = {
    "sleepy": {"D": -1.5, "E": 1.5, "H": 1.5, "I": -1.0, "K": -1.5},
    "tired": {"E": 1.0, "H": 1.0, "K": -1.0},
    "urgent": {"D": 2.0, "E": -1.5, "H": -1.5, "K": 1.5},
    "attention": {"E": -1.0, "I": 1.0, "C": -0.5},
    "calm": {"D": -1.5, "H": 1.0},
    "bright": {"I": 2.0},
    "dark": {"I": -2.0},
    "warm": {"J": 2.0},
    "cold": {"J": -2.0},
    "old": {"F": 2.0},
    "young": {"F": -2.0},
    "powerful": {"E": -2.0},
    "weak": {"E": 2.0},
    "fast": {"K": 1.5},
    "slow": {"K": -1.5},
}


class KeywordStubClient:
    """Offline client: reads the current scores from the prompt and shifts them by keyword."""

    def complete(self, prompt: str, temperature: float = 0.0) -> str:
        scores = current_scores_from_prompt(prompt)
        target = target_section(prompt).lower()
        for word, shifts in KEYWORD_SHIFTS.items():
            if re.search(rf"\b{word}", target):
                for d, s in shifts.items():
                    scores[d] = scores.get(d, 0.0) + s
        return json.dumps({d: round(scores.get(d, 0.0), 2) for d in DIM_IDS})


# --- mapping -------------------------------------------------------------------------------------


@dataclass
class MappingTrace:
    prompt: str
    attempts: int = 0
    responses: list[str] = field(default_factory=list)
    clamped: tuple[str, ...] = ()
    errors: list[str] = field(default_factory=list)

    @property
    def raw_response(self) -> str | None:
        return self.responses[-1] if self.responses else None


def map_impression(client: LlmClient, tpl: PromptTemplate, current_v: ImpressionVector, target_desc: str,
                   max_retries: int = 2, temperature: float = 0.0) -> tuple[ImpressionVector, MappingTrace]:
    """Prompt -> LLM -> parsed vector, retrying unparseable answers up to ``max_retries`` times."""
    prompt = build_prompt(tpl, current_v, target_desc)
    trace = MappingTrace(prompt=prompt)
    for attempt in range(max_retries + 1):
        trace.attempts = attempt + 1
        text = client.complete(prompt if attempt == 0 else prompt + FORMAT_REMINDER, temperature=temperature)
        trace.responses.append(text)
        try:
            vec, clamped = parse_vector(text)
        except (MalformedResponse, MissingDimension) as exc:
            trace.errors.append(str(exc))
            continue
        trace.clamped = clamped
        return vec, trace
    raise MappingFailed(f"no valid impression vector after {trace.attempts} attempts",
                        last_response=trace.raw_response, trace=trace)
