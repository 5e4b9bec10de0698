"""Chat-completion provider contract, the deterministic mock, and wire adapters.

A provider is a synchronous callable surface: ``complete(request)`` returns
a reply or raises a typed failure. Credentials come from environment
variables only; they are never read from config files and never echoed into
errors (see :func:`scrub_secrets`).

Model ids with the ``mock:`` prefix select :class:`MockProvider`, the
canonical test provider: seeded, scriptable failures, fixed latency, and
raw text that depends only on (model_id, custom_id, prompt) so interrupted
and uninterrupted runs converge to identical response sets.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

from .clock import Clock, RealClock

CREDENTIAL_ENV_VARS = (
    "ABSCREEN_API_KEY",
    "OPENAI_API_KEY",
    "ANTHROPIC_API_KEY",
    "XAI_API_KEY",
    "GEMINI_API_KEY",
)


class ProviderError(Exception):
    pass


class ProviderAuthError(ProviderError):
    """Credential failure: fail fast, never retried."""


class ProviderTransientError(ProviderError):
    """Retryable failure (5xx, connection reset, rate-limit rejection)."""


class ProviderTimeout(ProviderTransientError):
    pass


@dataclass(frozen=True)
class ProviderReply:
    raw_text: str
    input_tokens: int
    output_tokens: int


class ChatProvider(Protocol):
    def complete(self, custom_id: str, model_id: str, prompt: str,
                 max_output_tokens: int, temperature: float) -> ProviderReply: ...


def scrub_secrets(text: str) -> str:
    """Blank out any credential env-var value that leaked into a message."""
    for var in CREDENTIAL_ENV_VARS:
        value = os.environ.get(var)
        if value and value in text:
            text = text.replace(value, "[redacted]")
    return text


class MockProvider:
    """Deterministic in-process provider for tests and demos.

    ``failures`` maps custom_id to the number of leading attempts that fail
    transiently; ``fail_first`` applies one count to every request. The
    decision embedded in the reply comes from ``script`` (record_id keyed)
    when given, otherwise from a hash of (model_id, custom_id, prompt), so
    replies are reproducible across runs, resumes, and dispatch orders.
    """

    def __init__(
        self,
        clock: Optional[Clock] = None,
        latency: float = 0.0,
        failures: Optional[dict[str, int]] = None,
        fail_first: int = 0,
        auth_error: bool = False,
        script: Optional[dict] = None,
        include_token: str = "INCLUDE",
        exclude_token: str = "EXCLUDE",
        echo_checklist: bool = True,
    ):
        self.clock = clock or RealClock()
        self.latency = latency
        self.failures = dict(failures or {})
        self.fail_first = fail_first
        self.auth_error = auth_error
        self.script = script or {}
        self.include_token = include_token
        self.exclude_token = exclude_token
        self.echo_checklist = echo_checklist
        self.calls = 0
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_model_id(cls, model_id: str, clock: Optional[Clock] = None) -> "MockProvider":
        if model_id.startswith("mock:script:"):
            path = model_id[len("mock:script:"):]
            script = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(clock=clock, script=script)
        if model_id.startswith("mock:latency:"):
            return cls(clock=clock, latency=float(model_id[len("mock:latency:"):]))
        return cls(clock=clock)

    def _scripted(self, custom_id: str) -> Optional[tuple[str, float]]:
        if not self.script:
            return None
        record_id = custom_id.rsplit("::", 2)[0]
        entry = self.script.get("records", {}).get(record_id) or self.script.get("default")
        if entry is None:
            return None
        return entry["decision"], float(entry["confidence"])

    def _derived(self, model_id: str, custom_id: str, prompt: str) -> tuple[str, float]:
        digest = hashlib.sha256(f"{model_id}|{custom_id}|{len(prompt)}".encode("utf-8")).digest()
        decision = "include" if digest[0] < 90 else "exclude"  # ~35% includes
        confidence = round(0.5 + digest[1] / 255.0 * 0.5, 2)
        return decision, confidence

    def complete(self, custom_id: str, model_id: str, prompt: str,
                 max_output_tokens: int, temperature: float) -> ProviderReply:
        with self._lock:
            self.calls += 1
            attempt = self._attempts.get(custom_id, 0) + 1
            self._attempts[custom_id] = attempt
        if self.auth_error:
            raise ProviderAuthError("mock credential rejection")
        if self.latency > 0:
            self.clock.sleep(self.latency)
        budget = self.failures.get(custom_id, self.fail_first)
        if attempt <= budget:
            raise ProviderTransientError(f"scripted failure {attempt}/{budget} for {custom_id}")

        planned = self._scripted(custom_id) or self._derived(model_id, custom_id, prompt)
        decision, confidence = planned
        token = self.include_token if decision == "include" else self.exclude_token
        lines = []
        if self.echo_checklist:
            lines.append("- Inclusion-1 (Population) met? (yes)")
        lines.append(f"Decision: {token}")
        lines.append(f"Confidence: {confidence:g}")
        text = "\n".join(lines)
        input_tokens = (len(prompt) + 3) // 4
        return ProviderReply(raw_text=text, input_tokens=input_tokens, output_tokens=len(text) // 4 + 1)


class HttpChatProvider:
    """OpenAI-style chat-completions adapter over plain HTTP.

    The API key is taken from ``ABSCREEN_API_KEY`` (or the first provider
    env var that is set); a missing key fails fast with
    :class:`ProviderAuthError` before any network traffic.
    """

    def __init__(self, base_url: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.api_key = next((os.environ[v] for v in CREDENTIAL_ENV_VARS if os.environ.get(v)), None)
        if not self.api_key:
            raise ProviderAuthError("no provider API key found in the environment")

    def complete(self, custom_id: str, model_id: str, prompt: str,
                 max_output_tokens: int, temperature: float) -> ProviderReply:
        import urllib.error
        import urllib.request

        payload = json.dumps(
            {
                "model": model_id,
                "messages": [{"role": "user", "content": prompt}],
                "max_tokens": max_output_tokens,
                "temperature": temperature,
            }
        ).encode("utf-8")
        req = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=payload,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code in (401, 403):
                raise ProviderAuthError(f"provider rejected credentials (HTTP {exc.code})") from None
            raise ProviderTransientError(scrub_secrets(f"provider HTTP {exc.code}")) from None
        except TimeoutError as exc:
            raise ProviderTimeout("provider request timed out") from exc
        except urllib.error.URLError as exc:
            raise ProviderTransientError(scrub_secrets(f"provider unreachable: {exc.reason}")) from None
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderTransientError("malformed provider response") from exc
        return ProviderReply(
            raw_text=text,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
        )


def resolve_provider(model_id: str, clock: Optional[Clock] = None,
                     base_url: Optional[str] = None) -> ChatProvider:
    """Pick the provider implementation for a model id."""
    if model_id.startswith("mock:"):
        return MockProvider.from_model_id(model_id, clock=clock)
    url = base_url or os.environ.get("ABSCREEN_BASE_URL", "https://api.openai.com/v1")
    return HttpChatProvider(url)
