"""Chat-completion access: live HTTP and offline mock backends, retries, transcripts,
and extraction of structured payloads from model text."""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import ParseError, ProviderError, RequestError, SchemaError, ValidationError

RETRYABLE = {408, 429}

# decoding defaults per role; exploration where ideas form, stability where judging happens
TEMPERATURES = {"mentor": 0.8, "researcher": 0.8, "reviewer": 0.3, "comparator": 0.0,
                "summarizer": 0.2}


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.role in (Role.SYSTEM, Role.USER) and not self.content.strip():
            raise ValidationError(f"{self.role.value} message must have content")


@dataclass(frozen=True)
class ChatRequest:
    """One chat call. ``hints`` never go over the wire; offline backends read them."""

    messages: tuple[ChatMessage, ...]
    tag: str
    temperature: float = 0.8
    seed: int = 0
    max_tokens: int = 1024
    hints: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValidationError("request needs at least one message")
        if self.messages[0].role is not Role.SYSTEM:
            raise ValidationError("first message must be the system prompt")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")

    @classmethod
    def build(cls, system: str, user: str, tag: str, **kw) -> "ChatRequest":
        return cls((ChatMessage(Role.SYSTEM, system), ChatMessage(Role.USER, user)), tag=tag, **kw)

    def followup(self, assistant: str, user: str, tag: str | None = None, **hints) -> "ChatRequest":
        msgs = self.messages + (ChatMessage(Role.ASSISTANT, assistant), ChatMessage(Role.USER, user))
        return ChatRequest(msgs, tag=tag or self.tag, temperature=self.temperature, seed=self.seed,
                           max_tokens=self.max_tokens, hints={**self.hints, **hints})

    @property
    def text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)

    def wire(self) -> list[dict]:
        return [{"role": m.role.value, "content": m.content} for m in self.messages]

    def hash(self) -> str:
        body = json.dumps({"messages": self.wire(), "temperature": self.temperature,
                           "seed": self.seed, "max_tokens": self.max_tokens, "tag": self.tag},
                          sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    model_id: str = "gpt-4o"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    parallelism: int = 1

    def __post_init__(self):
        if not 0 <= self.max_retries <= 8:
            raise ValidationError("max_retries must be within 0..8")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")


@dataclass
class Reply:
    status: int
    text: str = ""
    usage: dict = field(default_factory=dict)


@dataclass
class Completion:
    text: str
    usage: dict
    attempts: int
    latency: float


class Backend(Protocol):
    def send(self, request: ChatRequest) -> Reply: ...


# --------------------------------------------------------------------------
# clocks and transcript


class SystemClock:
    def now(self) -> float:
        return time.time()

    def state_dict(self) -> dict:
        return {}

    def load_state(self, state: dict) -> None:
        pass


class LogicalClock:
    """Deterministic clock: every reading advances by ``step`` seconds."""

    def __init__(self, start: float = 1_700_000_000.0, step: float = 0.001):
        self.start = start
        self.step = step
        self.ticks = 0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            self.ticks += 1
            return round(self.start + self.ticks * self.step, 6)

    def state_dict(self) -> dict:
        return {"ticks": self.ticks}

    def load_state(self, state: dict) -> None:
        self.ticks = int(state.get("ticks", 0))


class Transcript:
    """Append-only record of every provider attempt, optionally mirrored to JSON lines."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.records = [json.loads(line) for line in fh if line.strip()]

    def append(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    def truncate(self, n: int) -> None:
        with self._lock:
            self.records = self.records[:n]
            if self.path:
                with open(self.path, "w", encoding="utf-8") as fh:
                    for rec in self.records:
                        fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self.records)

    def tags(self) -> list[str]:
        return [r["tag"] for r in self.records]


# --------------------------------------------------------------------------
# client


class LLMClient:
    """Retrying front door to a backend. Every attempt lands in the transcript."""

    def __init__(self, backend: Backend, config: ProviderConfig | None = None,
                 transcript: Transcript | None = None, clock=None,
                 sleep: Callable[[float], None] | None = None, jitter_seed: int | None = None):
        self.backend = backend
        self.config = config or ProviderConfig()
        self.transcript = transcript if transcript is not None else Transcript()
        self.clock = clock or SystemClock()
        self._sleep = sleep or time.sleep
        self._jitter = random.Random(jitter_seed)
        self._slots = threading.BoundedSemaphore(self.config.parallelism)

    def backoff(self, attempt: int) -> float:
        return min(0.5 * 2 ** attempt, 30.0) * (1.0 + self._jitter.random())

    def complete(self, request: ChatRequest) -> Completion:
        rhash = request.hash()
        attempts = self.config.max_retries + 1
        last: Any = None
        with self._slots:
            for attempt in range(1, attempts + 1):
                t0 = time.perf_counter()
                try:
                    reply = self.backend.send(request)
                except TimeoutError:
                    reply = Reply(status=408, text="")
                    status: Any = "timeout"
                else:
                    status = reply.status
                latency = 0.0 if isinstance(self.clock, LogicalClock) else round(time.perf_counter() - t0, 6)
                self.transcript.append({
                    "tag": request.tag, "timestamp": self.clock.now(), "request_hash": rhash,
                    "attempt": attempt, "status": status, "latency": latency,
                    "response_text": reply.text if reply.status == 200 else "",
                })
                if reply.status == 200:
                    return Completion(reply.text, reply.usage, attempt, latency)
                last = status
                if not (reply.status in RETRYABLE or reply.status >= 500):
                    raise RequestError(f"{request.tag}: backend rejected request ({reply.status})",
                                       status=reply.status)
                if attempt < attempts:
                    self._sleep(self.backoff(attempt - 1))
        raise ProviderError(f"{request.tag}: retries exhausted after {attempts} attempts", status=last)


class HTTPBackend:
    """OpenAI-compatible ``/chat/completions`` over HTTPS with bearer auth."""

    def __init__(self, config: ProviderConfig):
        self.config = config

    def send(self, request: ChatRequest) -> Reply:
        import httpx

        key = os.environ.get(self.config.api_key_env, "")
        body = {"model": self.config.model_id, "messages": request.wire(),
                "temperature": request.temperature, "seed": request.seed,
                "max_tokens": request.max_tokens}
        try:
            resp = httpx.post(f"{self.config.base_url.rstrip('/')}/chat/completions", json=body,
                              headers={"Authorization": f"Bearer {key}"}, timeout=self.config.timeout)
        except httpx.TimeoutException as exc:
            raise TimeoutError(str(exc)) from exc
        except httpx.HTTPError:
            return Reply(status=503)
        if resp.status_code != 200:
            return Reply(status=resp.status_code)
        data = resp.json()
        return Reply(200, data["choices"][0]["message"]["content"] or "", data.get("usage", {}))


class ScriptedBackend:
    """Replays per-tag scripts.

    A script item is a response string, an ``int`` status, or a :class:`Reply`.
    Items are consumed in order; the last one repeats once a script runs dry.
    Tags match exactly, then by longest ``prefix*`` pattern, then ``"*"``.
    """

    def __init__(self, scripts: Mapping[str, Sequence | str | int]):
        self.scripts = {k: (list(v) if isinstance(v, (list, tuple)) else [v]) for k, v in scripts.items()}
        self.position: dict[str, int] = {}
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def _key(self, tag: str) -> str:
        if tag in self.scripts:
            return tag
        prefixes = [k for k in self.scripts if k.endswith("*") and tag.startswith(k[:-1])]
        if prefixes:
            return max(prefixes, key=len)
        raise KeyError(f"no script for tag {tag!r}")

    def send(self, request: ChatRequest) -> Reply:
        with self._lock:
            self.calls.append(request)
            try:
                key = self._key(request.tag)
            except KeyError:
                return Reply(status=404)
            script = self.scripts[key]
            i = self.position.get(key, 0)
            self.position[key] = i + 1
            item = script[min(i, len(script) - 1)]
        if callable(item):
            item = item(request)
        if isinstance(item, Reply):
            return item
        if isinstance(item, int):
            return Reply(status=item)
        return Reply(200, str(item))


class GenerativeBackend:
    """Seeded offline backend producing schema-valid payloads from request hints.

    Handlers are looked up by the longest registered tag prefix. Each call gets
    its own generator seeded from ``(seed, request hash, occurrence)`` so that a
    repeated identical request yields a fresh but reproducible draw. ``sigma``
    is the score noise used by review handlers.
    """

    def __init__(self, seed: int = 0, sigma: float = 0.2, handlers: Mapping[str, Callable] | None = None):
        from . import mocks

        self.seed = seed
        self.sigma = sigma
        self.handlers = dict(mocks.DEFAULT_HANDLERS)
        self.handlers.update(handlers or {})
        self.occurrences: dict[str, int] = {}
        self._lock = threading.Lock()

    def rng_for(self, request: ChatRequest) -> np.random.Generator:
        h = request.hash()
        with self._lock:
            n = self.occurrences.get(h, 0)
            self.occurrences[h] = n + 1
        return np.random.default_rng([self.seed & 0xFFFFFFFF, int(h[:15], 16), n])

    def send(self, request: ChatRequest) -> Reply:
        keys = [k for k in self.handlers if request.tag.startswith(k)]
        if not keys:
            return Reply(status=404)
        out = self.handlers[max(keys, key=len)](request, self.rng_for(request), self)
        if isinstance(out, Reply):
            return out
        if not isinstance(out, str):
            out = "```json\n" + json.dumps(out, ensure_ascii=False, sort_keys=True) + "\n```"
        return Reply(200, out, {"completion_tokens": len(out.split())})

    def state_dict(self) -> dict:
        return {"occurrences": dict(self.occurrences)}

    def load_state(self, state: dict) -> None:
        self.occurrences = dict(state.get("occurrences", {}))


class FaultInjector:
    """Wraps a backend and answers ``status`` for chosen calls (0-based call index).

    ``outage_from`` starts a persistent outage at that call; ``fail_calls``
    fails individual calls. ``heal()`` ends the outage.
    """

    def __init__(self, inner: Backend, *, outage_from: int | None = None,
                 fail_calls: Sequence[int] = (), status: int = 503):
        self.inner = inner
        self.outage_from = outage_from
        self.fail_calls = set(fail_calls)
        self.status = status
        self.count = 0
        self._lock = threading.Lock()

    def heal(self) -> None:
        self.outage_from = None
        self.fail_calls.clear()

    def send(self, request: ChatRequest) -> Reply:
        with self._lock:
            i = self.count
            self.count += 1
        if i in self.fail_calls or (self.outage_from is not None and i >= self.outage_from):
            return Reply(status=self.status)
        return self.inner.send(request)

    def __getattr__(self, name):
        return getattr(self.inner, name)


# --------------------------------------------------------------------------
# structured extraction


@dataclass(frozen=True)
class Field:
    """Schema entry: expected type, requiredness, numeric bounds, nested schemas."""

    type: Any = str
    required: bool = True
    lo: float | None = None
    hi: float | None = None
    items: Mapping[str, Any] | None = None
    fields: Mapping[str, Any] | None = None


_FENCE = re.compile(r"```[ \t]*[A-Za-z0-9_+-]*[ \t]*\r?\n(.*?)```", re.DOTALL)


def _excerpt(text: str, n: int = 160) -> str:
    text = text.strip()
    return text if len(text) <= n else text[:n] + "..."


def locate_payload(text: str) -> Any:
    """Parse the first fenced block, or failing that the outermost ``{...}`` span."""
    if not isinstance(text, str):
        raise ParseError("model output is not text", repr(text)[:80])
    m = _FENCE.search(text)
    if m:
        body = m.group(1)
    else:
        start, end = text.find("{"), text.rfind("}")
        if start < 0 or end <= start:
            start, end = text.find("["), text.rfind("]")
        if start < 0 or end <= start:
            raise ParseError("no structured payload found", _excerpt(text))
        body = text[start:end + 1]
    try:
        return json.loads(body)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise ParseError(f"payload is not valid JSON ({exc})", _excerpt(body)) from None


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def validate(value: Any, schema: Mapping[str, Any], path: str = "") -> dict:
    """Check ``value`` against ``schema``; returns the value with numbers coerced to float."""
    if not isinstance(value, dict):
        raise SchemaError(path or "<root>", "expected an object")
    out = dict(value)
    for name, spec in schema.items():
        spec = spec if isinstance(spec, Field) else Field(type=spec)
        where = f"{path}.{name}" if path else name
        if name not in value or value[name] is None:
            if spec.required:
                raise SchemaError(where, "missing")
            continue
        v = value[name]
        if spec.type in (float, int):
            if not _is_number(v):
                raise SchemaError(where, f"expected a number, got {type(v).__name__}")
            if (spec.lo is not None and v < spec.lo) or (spec.hi is not None and v > spec.hi):
                raise SchemaError(where, f"{v} outside [{spec.lo}, {spec.hi}]")
            out[name] = float(v) if spec.type is float else v
        elif spec.type is str:
            if not isinstance(v, str) or (spec.required and not v.strip()):
                raise SchemaError(where, "expected non-empty text")
        elif spec.type is list:
            if not isinstance(v, list):
                raise SchemaError(where, "expected a list")
            if spec.items is not None:
                out[name] = [validate(item, spec.items, f"{where}[{i}]") for i, item in enumerate(v)]
        elif spec.type is dict:
            if spec.fields is not None:
                out[name] = validate(v, spec.fields, where)
            elif not isinstance(v, dict):
                raise SchemaError(where, "expected an object")
        elif not isinstance(v, spec.type):
            raise SchemaError(where, f"expected {spec.type.__name__}")
    return out


def extract_structured(text: str, schema: Mapping[str, Any]) -> dict:
    """Locate, parse and validate a structured payload in model output.

    Raises :class:`ParseError` when nothing parseable is found and
    :class:`SchemaError` naming the first offending field otherwise.
    """
    if not any((s if isinstance(s, Field) else Field(type=s)).required for s in schema.values()):
        raise ValidationError("schema needs at least one required field")
    try:
        payload = locate_payload(text)
    except ParseError:
        raise
    except Exception as exc:  # totality: never leak a crash
        raise ParseError(f"unexpected parse failure ({type(exc).__name__})", _excerpt(str(text))) from None
    return validate(payload, schema)


def make_client(kind: str = "mock", *, config: ProviderConfig | None = None, seed: int = 0,
                sigma: float = 0.2, transcript: Transcript | None = None, clock=None,
                scripts: Mapping | None = None, sleep=None) -> LLMClient:
    """Build a client for ``kind`` in {"mock", "scripted", "http"}."""
    config = config or ProviderConfig()
    if kind == "mock":
        backend: Backend = GenerativeBackend(seed=seed, sigma=sigma)
        clock = clock or LogicalClock()
        sleep = sleep or (lambda s: None)
    elif kind == "scripted":
        backend = ScriptedBackend(scripts or {})
        clock = clock or LogicalClock()
        sleep = sleep or (lambda s: None)
    elif kind == "http":
        backend = HTTPBackend(config)
    else:
        raise ValidationError(f"unknown provider kind {kind!r}")
    return LLMClient(backend, config, transcript=transcript, clock=clock, sleep=sleep, jitter_seed=seed)
