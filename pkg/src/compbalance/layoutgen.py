"""Layout generation from a caption: in-context LLM prompting or an offline stub.

Template files are plain text split by ``[section]`` marker lines:
``[instruction]`` once, ``[demonstration]`` one or more times (each holding a
``Caption:`` line and a ``Layout:`` JSON line) and ``[test]`` once, whose
body contains the ``{prompt}`` slot.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .attention import tokenize
from .conditions import Box, Layout

__all__ = [
    "PromptTemplate",
    "LlmEndpointConfig",
    "LayoutParseError",
    "LayoutRequestError",
    "load_template",
    "default_template",
    "render_template",
    "parse_layout_response",
    "generate_layout",
    "stub_layout",
    "OBJECT_NOUNS",
]

log = logging.getLogger(__name__)

OBJECT_NOUNS = frozenset(
    """apple ball banana bear bench bicycle bird boat book bottle bowl box bus cake car cat chair
    clock cow cube cup desk dog donut duck elephant flower giraffe guitar hat horse house kite lamp
    laptop mug orange pen pizza plant pumpkin rabbit sheep shoe sofa table teddy train tree truck
    umbrella vase""".split()
)

_SECTION = re.compile(r"^\[(instruction|demonstration|test)\]\s*$")


class LayoutParseError(ValueError):
    """The LLM reply held no usable layout; ``raw`` keeps the offending text."""

    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}: {raw[:200]!r}")
        self.raw = raw


class LayoutRequestError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str
    demonstrations: tuple[tuple[str, str], ...]
    test: str = "Caption: {prompt}\nLayout:"

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("template instruction is empty")
        if not self.demonstrations:
            raise ValueError("template needs at least one demonstration")
        for prompt, layout_json in self.demonstrations:
            if not prompt.strip() or not layout_json.strip():
                raise ValueError("template demonstration is empty")
        if "{prompt}" not in self.test:
            raise ValueError("template test section lacks the {prompt} slot")


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "LAYOUT_LLM_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def _parse_demo(body: str) -> tuple[str, str]:
    prompt = layout = None
    for line in body.splitlines():
        if line.startswith("Caption:"):
            prompt = line[len("Caption:"):].strip()
        elif line.startswith("Layout:"):
            layout = line[len("Layout:"):].strip()
    if not prompt or not layout:
        raise ValueError(f"demonstration needs Caption: and Layout: lines, got {body!r}")
    return prompt, layout


def parse_template(text: str) -> PromptTemplate:
    sections: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        m = _SECTION.match(line)
        if m:
            sections.append((m.group(1), []))
        elif sections:
            sections[-1][1].append(line)
    bodies = [(name, "\n".join(lines).strip()) for name, lines in sections]
    instr = [b for n, b in bodies if n == "instruction"]
    tests = [b for n, b in bodies if n == "test"]
    if len(instr) != 1 or len(tests) != 1:
        raise ValueError("template needs exactly one [instruction] and one [test] section")
    demos = tuple(_parse_demo(b) for n, b in bodies if n == "demonstration")
    return PromptTemplate(instr[0], demos, tests[0])


def load_template(path) -> PromptTemplate:
    return parse_template(Path(path).read_text())


def default_template() -> PromptTemplate:
    text = resources.files("compbalance").joinpath("templates/default_layout.txt").read_text()
    return parse_template(text)


def render_template(template: PromptTemplate, user_prompt: str) -> str:
    """Instruction, demonstrations, then the test slot, blank-line separated."""
    if not user_prompt.strip():
        raise ValueError("prompt is empty")
    parts = [template.instruction.strip()]
    for prompt, layout_json in template.demonstrations:
        parts.append(f"Caption: {prompt}\nLayout: {layout_json}")
    parts.append(template.test.replace("{prompt}", user_prompt.strip()))
    return "\n\n".join(parts) + "\n"


def _first_json_array(text: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\[", text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, list) and all(isinstance(v, dict) for v in value) and value:
            return value
    return None


def _match_token(obj: str, tokens: list[str], used: set[int]) -> int:
    words = re.findall(r"[a-z0-9]+", obj.lower())
    for word in reversed(words):
        for j, tok in enumerate(tokens[1:], start=1):
            if j in used:
                continue
            if tok == word or tok.rstrip("s") == word.rstrip("s"):
                return j
    raise ValueError(f"object {obj!r} does not match any prompt token")


def _clean_box(raw, obj: str) -> tuple[float, float, float, float]:
    try:
        x0, y0, x1, y1 = (float(v) for v in raw)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"box for {obj!r} must be four numbers, got {raw!r}") from exc
    if not all(math.isfinite(v) for v in (x0, y0, x1, y1)):
        raise ValueError(f"box for {obj!r} has non-finite coordinates")
    if x1 < x0:
        log.warning("box for %r has x1 < x0; swapping", obj)
        x0, x1 = x1, x0
    if y1 < y0:
        log.warning("box for %r has y1 < y0; swapping", obj)
        y0, y1 = y1, y0
    clamped = tuple(min(max(v, 0.0), 1.0) for v in (x0, y0, x1, y1))
    if clamped != (x0, y0, x1, y1):
        log.warning("box for %r left the unit square; clamped to %s", obj, clamped)
    return clamped


def parse_layout_response(text: str, prompt: str) -> Layout:
    """Extract, validate and bind the first JSON layout array found in ``text``."""
    entries = _first_json_array(text)
    if entries is None:
        raise LayoutParseError("no JSON layout array in reply", text)
    tokens = tokenize(prompt)
    used: set[int] = set()
    boxes = []
    for entry in entries:
        if "object" not in entry or "box" not in entry:
            raise LayoutParseError("layout entry lacks 'object' or 'box'", text)
        obj = str(entry["object"])
        try:
            coords = _clean_box(entry["box"], obj)
            j = _match_token(obj, tokens, used)
            boxes.append(Box(*coords, token_index=j, name=tokens[j]))
        except ValueError as exc:
            raise LayoutParseError(str(exc), text) from exc
        used.add(j)
    return Layout(tuple(boxes))


def stub_layout(prompt: str, margin: float = 0.05) -> Layout:
    """Offline layout: recognized nouns fill a near-square grid in mention order."""
    tokens = tokenize(prompt)
    objs = [j for j, tok in enumerate(tokens[1:], start=1) if tok in OBJECT_NOUNS or tok.rstrip("s") in OBJECT_NOUNS]
    if not objs:
        raise ValueError(f"no known object noun in prompt {prompt!r}")
    cols = math.ceil(math.sqrt(len(objs)))
    rows = math.ceil(len(objs) / cols)
    boxes = []
    for slot, j in enumerate(objs):
        r, c = divmod(slot, cols)
        boxes.append(
            Box(c / cols + margin, r / rows + margin, (c + 1) / cols - margin, (r + 1) / rows - margin, j, tokens[j])
        )
    return Layout(tuple(boxes))


def _post_chat(endpoint: LlmEndpointConfig, text: str) -> str:
    body = json.dumps(
        {"model": endpoint.model, "messages": [{"role": "user", "content": text}], "temperature": 0}
    ).encode()
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(endpoint.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
        raw = resp.read().decode("utf-8", errors="replace")
    try:
        content = json.loads(raw)["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise LayoutParseError("endpoint reply is not a chat completion", raw) from exc
    if not isinstance(content, str):
        raise LayoutParseError("chat completion content is not text", raw)
    return content


def generate_layout(
    prompt: str,
    endpoint: LlmEndpointConfig | None = None,
    template: PromptTemplate | None = None,
) -> Layout:
    """Ask the endpoint for a layout, or use the offline stub when ``endpoint`` is None."""
    if endpoint is None:
        return stub_layout(prompt)
    text = render_template(template or default_template(), prompt)
    last_exc = None
    for attempt in range(endpoint.max_retries + 1):
        try:
            reply = _post_chat(endpoint, text)
            break
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            last_exc = exc
            log.warning("layout request failed (attempt %d): %s", attempt + 1, exc)
            if attempt < endpoint.max_retries:
                time.sleep(min(0.5 * 2**attempt, 4.0))
    else:
        raise LayoutRequestError(f"layout endpoint unreachable after {endpoint.max_retries + 1} attempts") from last_exc
    return parse_layout_response(reply, prompt)
