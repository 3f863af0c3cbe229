"""
LLM gateway: prompt assembly, provider adapters and a scripted mock.

Every call goes through generate(), which builds the message list
(system prompt, optional experience segment, user prompt), sends it through
a provider and returns the verbatim transcript. Nothing here parses
sketches; that is sketch_text's job.

Providers:
  - OpenAICompatibleProvider: POST {endpoint}/chat/completions
  - GeminiProvider:           POST {endpoint}/models/{model}:generateContent
  - MockLlm:                  replays a JSON script, no network

API keys come from the environment variable named in LlmConfig.api_key_env.

Usage:
    from scripts.llm_gateway import LlmConfig, SystemPromptSpec, build_system_prompt, generate

    system = build_system_prompt(SystemPromptSpec.default(curve_budget=16))
    transcript = generate(LlmConfig(endpoint=url, model=name), system, "a bench")
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Protocol, Sequence

import jinja2
import requests

from scripts.curves import Sketch
from scripts.sketch_text import ParserLimits, parse, serialize

logger = logging.getLogger(__name__)

EXPLORATION_TEMPERATURE = 0.7
INFERENCE_TEMPERATURE = 0.3
DEFAULT_MAX_OUTPUT_TOKENS = 32768

EXPERIENCE_HEADER = "## Drawing experience (principles learned from earlier attempts)"

_PROMPT_DIR = Path(__file__).resolve().parent.parent / 'prompts'
_SYSTEM_TEMPLATE = 'system_prompt.md.j2'
_RETRY_STATUSES = {429, 500, 502, 503, 504}

DEFAULT_ROLE = (
    "You are a professional 3D artist who draws objects as clean 3D line sketches. "
    "A sketch is a sequence of cubic Bezier curves placed in 3D space; together the "
    "curves must read as the requested object from every viewing direction."
)
DEFAULT_FORMAT = (
    "Reply with exactly one Python list wrapped in <curves> and </curves>. You may reason "
    "before the block, but the block itself holds only the list: no comments, no variable "
    "assignments, no code, and only one block per reply."
)
DEFAULT_TYPES = (
    "The list holds curves. A curve is a list of exactly 4 control points "
    "[start, control1, control2, end]. A point is a list of exactly 3 decimal numbers "
    "[x, y, z]. For a straight edge put both inner control points on the segment between "
    "the endpoints; for a curved stroke use distinct, non-collinear control points."
)
DEFAULT_COORDINATES = (
    "Use a right-handed coordinate system with Z pointing up. Every coordinate must lie in "
    "[-0.8, 0.8]. Center the object at the origin and let it fill the volume without "
    "touching the bounds."
)
DEFAULT_EDGE_RULES = (
    "Never emit a curve whose control points all coincide. Never nest lists deeper than "
    "curve, point, number. Use as few curves as the shape needs; hundreds of tiny curves "
    "make a worse drawing, not a better one."
)
DEFAULT_EXAMPLE_PROMPT = 'a table'
DEFAULT_EXAMPLE_FILE = _PROMPT_DIR / 'examples' / 'table.curves'


class GatewayError(Exception):
    """LLM request failed after retries, or the provider reply was unusable."""
    pass


class MockScriptError(GatewayError):
    """Mock script file is malformed."""
    pass


class MockScriptExhausted(GatewayError):
    """The mock has no scripted response left for this call."""
    pass


# --------------------------------------------------------------------------- #
# Configuration and prompt assembly
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = ''
    model: str = ''
    provider: str = 'openai'
    temperature: float = EXPLORATION_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    api_key_env: str = 'LLM_API_KEY'
    timeout: float = 600.0
    max_retries: int = 3
    backoff_seconds: float = 2.0
    fan_out: int = 5

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ValueError(f"max_output_tokens must be > 0, got {self.max_output_tokens}")
        if self.fan_out < 1:
            raise ValueError(f"fan_out must be >= 1, got {self.fan_out}")

    def with_temperature(self, temperature: float) -> LlmConfig:
        return dataclasses.replace(self, temperature=temperature)


@dataclass(frozen=True)
class SystemPromptSpec:
    role_instruction: str = DEFAULT_ROLE
    format_spec: str = DEFAULT_FORMAT
    type_constraints: str = DEFAULT_TYPES
    coordinate_system: str = DEFAULT_COORDINATES
    gt_examples: tuple[tuple[str, Sketch], ...] = ()
    edge_case_rules: str = DEFAULT_EDGE_RULES
    curve_budget: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'gt_examples', tuple(tuple(e) for e in self.gt_examples))
        if self.curve_budget is not None and self.curve_budget <= 0:
            raise ValueError(f"curve_budget must be > 0, got {self.curve_budget}")

    @classmethod
    def default(cls, curve_budget: Optional[int] = None,
                example_file: Path = DEFAULT_EXAMPLE_FILE) -> SystemPromptSpec:
        """Stock prompt with the bundled in-context example."""
        example = parse(Path(example_file).read_text(encoding='utf-8'), ParserLimits(strict=True))
        return cls(gt_examples=((DEFAULT_EXAMPLE_PROMPT, example.sketch),), curve_budget=curve_budget)


def _template_env() -> jinja2.Environment:
    return jinja2.Environment(
        loader=jinja2.FileSystemLoader(str(_PROMPT_DIR)),
        autoescape=False,
        undefined=jinja2.StrictUndefined,
        keep_trailing_newline=True,
    )


def render_template(name: str, **context) -> str:
    """Render a prompt template from prompts/."""
    return _template_env().get_template(name).render(**context)


def build_system_prompt(spec: SystemPromptSpec) -> str:
    """Render sections role, format, types, coordinates, examples, edge rules, budget."""
    return render_template(
        _SYSTEM_TEMPLATE,
        role=spec.role_instruction,
        format_spec=spec.format_spec,
        type_constraints=spec.type_constraints,
        coordinate_system=spec.coordinate_system,
        examples=[{'prompt': p, 'curves': serialize(s)} for p, s in spec.gt_examples],
        edge_case_rules=spec.edge_case_rules,
        budget=budget_directive(spec.curve_budget) if spec.curve_budget else None,
    )


def budget_directive(curve_budget: int) -> str:
    return f"Draw the object using exactly {curve_budget} curves."


def build_messages(system_prompt: str, user_prompt: str,
                   experience: Optional[str] = None) -> list[dict[str, str]]:
    messages = [{'role': 'system', 'content': system_prompt}]
    if experience:
        messages.append({'role': 'system', 'content': f"{EXPERIENCE_HEADER}\n{experience}"})
    messages.append({'role': 'user', 'content': user_prompt})
    return messages


def prompt_hash(text: str) -> str:
    """Stable key for a user message."""
    return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


# --------------------------------------------------------------------------- #
# Transcripts
# --------------------------------------------------------------------------- #

@dataclass
class LlmTranscript:
    messages: list[dict[str, str]]
    raw: str
    usage: dict[str, Any] = field(default_factory=dict)
    latency_s: float = 0.0
    truncated: bool = False
    model: str = ''

    def as_dict(self) -> dict:
        return {
            'messages': self.messages,
            'raw': self.raw,
            'usage': self.usage,
            'latency_s': self.latency_s,
            'truncated': self.truncated,
            'model': self.model,
        }

    @classmethod
    def from_dict(cls, data: dict) -> LlmTranscript:
        return cls(
            messages=list(data['messages']),
            raw=data['raw'],
            usage=dict(data.get('usage') or {}),
            latency_s=float(data.get('latency_s', 0.0)),
            truncated=bool(data.get('truncated', False)),
            model=data.get('model', ''),
        )


@dataclass(frozen=True)
class ProviderReply:
    text: str
    usage: dict[str, Any] = field(default_factory=dict)
    truncated: bool = False
    model: str = ''
    latency_s: float = 0.0


class Provider(Protocol):
    requires_ordering: bool

    def complete(self, messages: list[dict[str, str]], config: LlmConfig,
                 stream: str) -> ProviderReply:
        ...


# --------------------------------------------------------------------------- #
# HTTP providers
# --------------------------------------------------------------------------- #

def _post_with_retry(session: requests.Session, url: str, payload: dict,
                     headers: dict, config: LlmConfig) -> dict:
    last_error = None
    for attempt in range(config.max_retries + 1):
        try:
            response = session.post(url, json=payload, headers=headers, timeout=config.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            last_error = f"{type(e).__name__}: {e}"
        else:
            if response.status_code in _RETRY_STATUSES:
                last_error = f"HTTP {response.status_code}"
            elif response.status_code >= 400:
                raise GatewayError(f"{url} rejected the request with HTTP "
                                   f"{response.status_code}: {response.text[:200]}")
            else:
                try:
                    return response.json()
                except ValueError as e:
                    raise GatewayError(f"{url} returned invalid JSON: {e}") from e

        if attempt < config.max_retries:
            delay = config.backoff_seconds * (2 ** attempt)
            logger.warning("LLM request to %s failed (%s), attempt %d/%d; retrying in %.1fs",
                           url, last_error, attempt + 1, config.max_retries + 1, delay)
            time.sleep(delay)

    raise GatewayError(f"{url} failed after {config.max_retries + 1} attempts: {last_error}")


class OpenAICompatibleProvider:
    """Chat-completions wire shape."""

    requires_ordering = False

    def __init__(self, session: Optional[requests.Session] = None):
        self.session = session or requests.Session()

    def complete(self, messages, config, stream='default'):
        if not config.endpoint:
            raise GatewayError("LLM endpoint is not configured ([llm] endpoint)")
        url = config.endpoint.rstrip('/')
        if not url.endswith('/chat/completions'):
            url += '/chat/completions'
        headers = {'Content-Type': 'application/json'}
        api_key = os.getenv(config.api_key_env)
        if api_key:
            headers['Authorization'] = f"Bearer {api_key}"
        payload = {
            'model': config.model,
            'messages': messages,
            'temperature': config.temperature,
            'max_tokens': config.max_output_tokens,
        }

        started = time.monotonic()
        body = _post_with_retry(self.session, url, payload, headers, config)
        latency = time.monotonic() - started
        try:
            choice = body['choices'][0]
            text = choice['message'].get('content') or ''
        except (KeyError, IndexError, TypeError, AttributeError) as e:
            raise GatewayError(f"Unexpected chat-completions response shape: {e}") from e
        return ProviderReply(
            text=text,
            usage=dict(body.get('usage') or {}),
            truncated=choice.get('finish_reason') == 'length',
            model=body.get('model', config.model),
            latency_s=latency,
        )


class GeminiProvider:
    """generateContent wire shape; system messages become systemInstruction."""

    requires_ordering = False

    def __init__(self, session: Optional[requests.Session] = None):
        self.session = session or requests.Session()

    def complete(self, messages, config, stream='default'):
        if not config.endpoint:
            raise GatewayError("LLM endpoint is not configured ([llm] endpoint)")
        url = f"{config.endpoint.rstrip('/')}/models/{config.model}:generateContent"
        headers = {'Content-Type': 'application/json'}
        api_key = os.getenv(config.api_key_env)
        if api_key:
            headers['x-goog-api-key'] = api_key
        system = '\n\n'.join(m['content'] for m in messages if m['role'] == 'system')
        payload = {
            'systemInstruction': {'parts': [{'text': system}]},
            'contents': [{'role': 'user', 'parts': [{'text': m['content']}]}
                         for m in messages if m['role'] == 'user'],
            'generationConfig': {
                'temperature': config.temperature,
                'maxOutputTokens': config.max_output_tokens,
            },
        }

        started = time.monotonic()
        body = _post_with_retry(self.session, url, payload, headers, config)
        latency = time.monotonic() - started
        try:
            candidate = body['candidates'][0]
            parts = candidate.get('content', {}).get('parts', [])
            text = ''.join(p.get('text', '') for p in parts)
        except (KeyError, IndexError, TypeError, AttributeError) as e:
            raise GatewayError(f"Unexpected generateContent response shape: {e}") from e
        return ProviderReply(
            text=text,
            usage=dict(body.get('usageMetadata') or {}),
            truncated=candidate.get('finishReason') == 'MAX_TOKENS',
            model=config.model,
            latency_s=latency,
        )


PROVIDERS = {
    'openai': OpenAICompatibleProvider,
    'gemini': GeminiProvider,
}


def make_provider(config: LlmConfig) -> Provider:
    try:
        return PROVIDERS[config.provider]()
    except KeyError:
        raise GatewayError(f"Unknown LLM provider {config.provider!r}; "
                           f"expected one of: {', '.join(sorted(PROVIDERS))}")


# --------------------------------------------------------------------------- #
# Scripted mock
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class ScriptEntry:
    match: Any
    response: str
    stream: str = 'default'
    truncated: bool = False


class MockLlm:
    """Drop-in provider that replays canned responses.

    sequential: responses are consumed in index order, one queue per stream
                ("rollout", "judge", ...); streams missing from the script
                fall back to "default".
    by_hash:    the final user message's prompt_hash selects the response;
                repeated prompts get the same response.
    """

    MODES = ('sequential', 'by_hash')

    def __init__(self, entries: Sequence[ScriptEntry], mode: str = 'sequential'):
        if mode not in self.MODES:
            raise MockScriptError(f"Unknown mock mode {mode!r}; expected one of {self.MODES}")
        if not entries:
            raise MockScriptError("Mock script must contain at least one response")
        self.mode = mode
        self.requires_ordering = mode == 'sequential'
        self._lock = threading.Lock()
        self._cursors: dict[str, int] = {}
        self._queues: dict[str, list[ScriptEntry]] = {}
        self._by_hash: dict[str, ScriptEntry] = {}

        if mode == 'sequential':
            for entry in entries:
                self._queues.setdefault(entry.stream, []).append(entry)
            for stream, queue in self._queues.items():
                indices = [e.match for e in queue]
                if any(not isinstance(i, int) for i in indices) or len(set(indices)) != len(indices):
                    raise MockScriptError(
                        f"Sequential stream {stream!r} needs unique integer 'match' indices")
                queue.sort(key=lambda e: e.match)
        else:
            for entry in entries:
                if not isinstance(entry.match, str):
                    raise MockScriptError("by_hash entries need a string 'match' prompt hash")
                self._by_hash[entry.match] = entry

    def _next(self, stream: str) -> ScriptEntry:
        key = stream if stream in self._queues else 'default'
        with self._lock:
            queue = self._queues.get(key, [])
            cursor = self._cursors.get(key, 0)
            if cursor >= len(queue):
                raise MockScriptExhausted(
                    f"Mock script exhausted on stream {key!r} after {cursor} responses")
            self._cursors[key] = cursor + 1
            return queue[cursor]

    def complete(self, messages, config, stream='default'):
        if self.mode == 'sequential':
            entry = self._next(stream)
        else:
            user = next(m['content'] for m in reversed(messages) if m['role'] == 'user')
            key = prompt_hash(user)
            entry = self._by_hash.get(key)
            if entry is None:
                raise MockScriptExhausted(f"No scripted response for prompt hash {key}")
        return ProviderReply(text=entry.response, truncated=entry.truncated, model='mock')

    def state_dict(self) -> dict:
        with self._lock:
            return {'mode': self.mode, 'cursors': dict(sorted(self._cursors.items()))}

    def load_state(self, state: dict) -> None:
        with self._lock:
            self._cursors = {k: int(v) for k, v in (state.get('cursors') or {}).items()}


def mock_from_script(script: Sequence[Any], mode: str = 'sequential') -> MockLlm:
    """Build a mock from a list of dict entries (or bare response strings)."""
    entries = []
    for position, item in enumerate(script):
        if isinstance(item, str):
            entries.append(ScriptEntry(match=position, response=item))
            continue
        if not isinstance(item, dict) or 'response' not in item:
            raise MockScriptError(f"Script entry {position} needs a 'response' field: {item!r}")
        entries.append(ScriptEntry(
            match=item.get('match', position),
            response=str(item['response']),
            stream=str(item.get('stream', 'default')),
            truncated=bool(item.get('truncated', False)),
        ))
    return MockLlm(entries, mode)


def load_mock_script(path: Path, mode: Optional[str] = None) -> MockLlm:
    """Load a JSON mock script.

    The file is either a JSON array of entries, or an object
    {"mode": "sequential"|"by_hash", "entries": [...]}.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise MockScriptError(f"Could not read mock script {path}: {e}") from e
    if isinstance(data, dict):
        return mock_from_script(data.get('entries', []), mode or data.get('mode', 'sequential'))
    return mock_from_script(data, mode or 'sequential')


# --------------------------------------------------------------------------- #
# Generation
# --------------------------------------------------------------------------- #

def generate(config: LlmConfig, system_prompt: str, user_prompt: str,
             experience: Optional[str] = None, provider: Optional[Provider] = None,
             stream: str = 'default') -> LlmTranscript:
    """One chat call; returns the verbatim transcript.

    Raises:
        GatewayError: Transport failure after retries (truncation is flagged, not raised)
    """
    provider = provider or make_provider(config)
    messages = build_messages(system_prompt, user_prompt, experience)
    reply = provider.complete(messages, config, stream)
    if reply.truncated:
        logger.warning("LLM reply hit the %d-token output limit and was truncated",
                       config.max_output_tokens)
    return LlmTranscript(
        messages=messages,
        raw=reply.text,
        usage=reply.usage,
        latency_s=reply.latency_s,
        truncated=reply.truncated,
        model=reply.model,
    )


def generate_many(config: LlmConfig, system_prompt: str, user_prompts: Sequence[str],
                  experience: Optional[str] = None, provider: Optional[Provider] = None,
                  stream: str = 'default') -> list:
    """Run several generations with bounded fan-out; results keep input order.

    Each slot holds an LlmTranscript or the GatewayError it raised. Providers
    that need ordered consumption (the sequential mock) run serially.
    """
    provider = provider or make_provider(config)

    def one(user_prompt):
        try:
            return generate(config, system_prompt, user_prompt, experience, provider, stream)
        except GatewayError as e:
            return e

    if getattr(provider, 'requires_ordering', False) or config.fan_out == 1:
        return [one(p) for p in user_prompts]
    with ThreadPoolExecutor(max_workers=config.fan_out) as pool:
        return list(pool.map(one, user_prompts))
