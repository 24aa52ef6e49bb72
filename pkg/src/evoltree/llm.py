"""Text-generation backends.

Everything that talks to a language model goes through :class:`Generator`:
a single ``generate(request) -> response`` call.  Two implementations ship:

* :class:`RemoteGenerator` posts to an OpenAI-compatible
  ``/chat/completions`` endpoint with bounded retries and a response cache.
* :class:`MockGenerator` is fully deterministic and offline.  It either
  looks prompts up in a fixture table or grows the instruction found in the
  prompt by a hash-derived suffix of 10 to 20 words.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence, runtime_checkable

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 2048
API_KEY_ENV = "EVOLTREE_API_KEY"
FALLBACK_API_KEY_ENV = "OPENAI_API_KEY"

# Markers shared with the evolution prompt template (see actions.py).  The mock
# uses them to recover the instruction being rewritten.
INSTRUCTION_OPEN = "#Given Instruction#:\n"
INSTRUCTION_CLOSE = "\n\n#Rewritten Instruction#:"


class GenerationError(RuntimeError):
    """Base class for generator failures.  ``attempts`` counts tries made."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class CredentialError(GenerationError):
    pass


class ThrottleError(GenerationError):
    pass


class ProtocolError(GenerationError):
    pass


class GenerationTimeout(GenerationError):
    pass


class FixtureMissError(GenerationError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    stop: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.stop is not None and not isinstance(self.stop, tuple):
            object.__setattr__(self, "stop", tuple(self.stop))


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_id: str
    usage: Optional[dict] = None


@runtime_checkable
class Generator(Protocol):
    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


class ResponseCache:
    """Thread-safe cache keyed by a digest of the request parameters.

    Entries live in memory and, when ``directory`` is given, as one JSON file
    per key so that reruns in a fresh process are served without network.
    """

    def __init__(self, directory: Optional[str | os.PathLike] = None):
        self.directory = Path(directory) if directory else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(model: str, request: GenerationRequest) -> str:
        payload = json.dumps(
            [model, request.prompt, request.temperature, request.max_tokens, request.stop],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def get(self, key: str) -> Optional[dict]:
        with self._lock:
            if key in self._mem:
                return self._mem[key]
            if self.directory is None:
                return None
            path = self.directory / f"{key}.json"
            if not path.exists():
                return None
            try:
                entry = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                logger.warning("ignoring unreadable cache entry %s", path)
                return None
            self._mem[key] = entry
            return entry

    def put(self, key: str, entry: dict) -> None:
        with self._lock:
            self._mem[key] = entry
            if self.directory is not None:
                path = self.directory / f"{key}.json"
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps(entry, ensure_ascii=False), encoding="utf-8")
                os.replace(tmp, path)


def resolve_api_key(explicit: Optional[str] = None) -> Optional[str]:
    if explicit:
        return explicit
    return os.environ.get(API_KEY_ENV) or os.environ.get(FALLBACK_API_KEY_ENV) or None


class RemoteGenerator:
    """Chat-completion client for OpenAI-compatible servers.

    The prompt is sent verbatim as a single user message.  Transient failures
    (HTTP 429, 5xx, timeouts, connection errors) are retried with exponential
    backoff up to ``max_retries`` attempts in total.
    """

    def __init__(
        self,
        endpoint_url: str = "https://api.openai.com/v1",
        model_name: str = "gpt-3.5-turbo-0125",
        api_key: Optional[str] = None,
        timeout_seconds: float = 60.0,
        max_retries: int = 3,
        cache: bool = True,
        cache_dir: Optional[str | os.PathLike] = None,
        backoff_seconds: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        url = endpoint_url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        self.url = url
        self.model_name = model_name
        self.api_key = resolve_api_key(api_key)
        self.timeout_seconds = timeout_seconds
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.cache = ResponseCache(cache_dir) if cache else None
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout_seconds, transport=transport)
        self.calls = 0  # HTTP requests actually issued
        self._calls_lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return f"remote:{self.model_name}"

    def close(self) -> None:
        self._client.close()

    def _payload(self, request: GenerationRequest) -> dict:
        body: dict[str, Any] = {
            "model": self.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "frequency_penalty": 0,
            "presence_penalty": 0,
        }
        if request.stop:
            body["stop"] = list(request.stop)
        return body

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        key = None
        if self.cache is not None:
            key = ResponseCache.key(self.model_name, request)
            hit = self.cache.get(key)
            if hit is not None:
                return GenerationResponse(hit["text"], self.backend_id, hit.get("usage"))
        if not self.api_key:
            raise CredentialError(
                f"no API key: set {API_KEY_ENV} (or {FALLBACK_API_KEY_ENV})", attempts=0
            )

        headers = {"Authorization": f"Bearer {self.api_key}"}
        body = self._payload(request)
        last: Optional[GenerationError] = None
        for attempt in range(1, self.max_retries + 1):
            with self._calls_lock:
                self.calls += 1
            try:
                resp = self._client.post(self.url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last = GenerationTimeout(f"request timed out: {exc}", attempt)
            except httpx.TransportError as exc:
                last = GenerationError(f"transport failure: {exc}", attempt)
            else:
                if resp.status_code in (401, 403):
                    raise CredentialError(
                        f"authentication rejected (HTTP {resp.status_code})", attempt
                    )
                if resp.status_code == 429:
                    last = ThrottleError("rate limited (HTTP 429)", attempt)
                elif resp.status_code >= 500:
                    last = GenerationError(f"server error (HTTP {resp.status_code})", attempt)
                elif resp.status_code >= 400:
                    raise GenerationError(
                        f"request rejected (HTTP {resp.status_code}): {resp.text[:200]}", attempt
                    )
                else:
                    text, usage = _parse_completion(resp, attempt)
                    if key is not None:
                        self.cache.put(key, {"text": text, "usage": usage})
                    return GenerationResponse(text, self.backend_id, usage)
            if attempt < self.max_retries:
                delay = self.backoff_seconds * 2 ** (attempt - 1)
                logger.debug("attempt %d/%d failed (%s); retrying in %.2fs",
                             attempt, self.max_retries, last, delay)
                self._sleep(delay)
        assert last is not None
        raise last


def _parse_completion(resp: httpx.Response, attempt: int) -> tuple[str, Optional[dict]]:
    try:
        data = resp.json()
        text = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed completion body: {exc!r}", attempt) from exc
    if not isinstance(text, str):
        raise ProtocolError("completion content is not text", attempt)
    usage = data.get("usage")
    return text, usage if isinstance(usage, dict) else None


# Suffix vocabulary for the growth rule.  Mixed so heuristic scorers see
# clauses, connectives and an occasional question.
_SUFFIX_WORDS = (
    "and", "while", "because", "considering", "including", "especially", "for",
    "beginners", "experts", "with", "clear", "examples,", "practical", "steps,",
    "budget", "limits", "within", "a", "short", "report", "format", "explain",
    "why", "each", "choice", "matters,", "then", "compare", "alternatives",
    "describe", "risks", "and", "benefits", "in", "real-world", "settings,",
    "mobile", "access", "accessibility", "standards", "safety", "concerns",
    "if", "possible", "summarize", "key", "points", "using", "bullet", "lists",
)


def extract_instruction(prompt: str) -> str:
    """Recover the instruction embedded in an evolution prompt.

    Falls back to the whole prompt when the template markers are absent.
    """
    start = prompt.find(INSTRUCTION_OPEN)
    if start < 0:
        return prompt.strip()
    start += len(INSTRUCTION_OPEN)
    end = prompt.find(INSTRUCTION_CLOSE, start)
    return prompt[start:end if end >= 0 else None].strip()


def growth_suffix(text: str, seed: int = 0) -> list[str]:
    """Deterministic 10-20 word suffix derived from ``seed`` and ``text``."""
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    n = 10 + digest[0] % 11
    stream = digest
    words = []
    i = 1
    while len(words) < n:
        if i >= len(stream):
            stream = hashlib.sha256(stream).digest()
            i = 0
        words.append(_SUFFIX_WORDS[stream[i] % len(_SUFFIX_WORDS)])
        i += 1
    return words


@dataclass(frozen=True)
class FixtureRule:
    """Canned output for prompts containing ``pattern`` (or matching it as regex)."""

    pattern: str
    output: str
    regex: bool = False

    def matches(self, prompt: str) -> bool:
        if self.regex:
            return re.search(self.pattern, prompt) is not None
        return self.pattern in prompt


@dataclass
class MockGenerator:
    """Deterministic offline generator.

    With ``exact`` or ``rules`` configured (fixture mode) a prompt must match
    one of them, exact prompts first, then rules in order, or
    :class:`FixtureMissError` is raised.  With neither configured (growth
    mode) the output is the instruction found in the prompt followed by a
    10-20 word suffix derived from ``seed`` and the prompt text.
    """

    exact: Mapping[str, str] = field(default_factory=dict)
    rules: Sequence[FixtureRule] = ()
    seed: int = 0
    fail_on: Callable[[GenerationRequest], bool] | None = None
    calls: int = 0

    def __post_init__(self):
        self.exact = dict(self.exact)
        self.rules = tuple(self.rules)
        self._lock = threading.Lock()

    @property
    def fixture_mode(self) -> bool:
        return bool(self.exact) or bool(self.rules)

    @property
    def backend_id(self) -> str:
        return "mock:fixture" if self.fixture_mode else f"mock:growth:{self.seed}"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        with self._lock:
            self.calls += 1
        if self.fail_on is not None and self.fail_on(request):
            raise GenerationError("injected mock failure")
        prompt = request.prompt
        if self.fixture_mode:
            if prompt in self.exact:
                return GenerationResponse(self.exact[prompt], self.backend_id)
            for rule in self.rules:
                if rule.matches(prompt):
                    return GenerationResponse(rule.output, self.backend_id)
            raise FixtureMissError(f"no fixture matches prompt {prompt[:80]!r}")
        base = extract_instruction(prompt)
        words = base.split() + growth_suffix(prompt, self.seed)
        return GenerationResponse(" ".join(words), self.backend_id)

    @classmethod
    def from_fixture_file(cls, path: str | os.PathLike, seed: int = 0) -> "MockGenerator":
        """Load ``{"exact": {prompt: output}, "rules": [{pattern, output, regex}]}``.

        A bare list is read as the ``rules`` list.
        """
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid fixture file at line {exc.lineno} col {exc.colno}") from exc
        if isinstance(data, list):
            data = {"rules": data}
        rules = [FixtureRule(r["pattern"], r["output"], bool(r.get("regex", False)))
                 for r in data.get("rules", [])]
        return cls(exact=data.get("exact", {}), rules=rules, seed=seed)


def generate_many(
    generator: Generator,
    requests: Iterable[GenerationRequest],
    max_workers: int = 1,
) -> list[GenerationResponse | GenerationError]:
    """Run requests, optionally concurrently, preserving order.

    Failures are returned in place instead of raised.
    """
    reqs = list(requests)

    def call(req):
        try:
            return generator.generate(req)
        except GenerationError as exc:
            return exc

    if max_workers <= 1 or len(reqs) <= 1:
        return [call(r) for r in reqs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=min(max_workers, len(reqs))) as pool:
        return list(pool.map(call, reqs))
