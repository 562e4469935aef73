"""Text-completion clients: a remote HTTP client, a fixed-response mock and a record/replay cassette."""

from __future__ import annotations

import hashlib
import json
import os
import urllib.request
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Protocol

DEFAULT_PARAMS: Mapping = {"temperature": 0}

ENV_ENDPOINT = "SAFETRACE_LLM_ENDPOINT"
ENV_API_KEY = "SAFETRACE_LLM_API_KEY"
ENV_MODEL = "SAFETRACE_LLM_MODEL"


class CompletionClient(Protocol):
    def complete(self, prompt: str, params: Mapping | None = None) -> str: ...


class ClientConfigError(RuntimeError):
    pass


class CassetteMiss(KeyError):
    pass


class MockClient:
    """Returns canned responses in order, repeating the last one once exhausted."""

    def __init__(self, responses: str | Sequence[str]):
        self.responses = [responses] if isinstance(responses, str) else list(responses)
        if not self.responses:
            raise ValueError("MockClient needs at least one response")
        self.prompts: list[str] = []

    def complete(self, prompt: str, params: Mapping | None = None) -> str:
        i = min(len(self.prompts), len(self.responses) - 1)
        self.prompts.append(prompt)
        return self.responses[i]


def interaction_key(prompt: str, params: Mapping | None) -> str:
    payload = json.dumps({"prompt": prompt, "params": dict(params or DEFAULT_PARAMS)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ReplayClient:
    """Cassette-backed client.

    In ``replay`` mode every prompt must already be recorded. In ``record``
    mode misses are forwarded to ``inner`` and stored; call :meth:`save`.
    """

    FORMAT = "safetrace.cassette/1"

    def __init__(self, path: str | Path, mode: str = "replay", inner: CompletionClient | None = None):
        if mode not in ("replay", "record"):
            raise ValueError(f"unknown cassette mode {mode!r}")
        if mode == "record" and inner is None:
            raise ValueError("record mode needs an inner client")
        self.path = Path(path)
        self.mode = mode
        self.inner = inner
        self.interactions: dict[str, dict] = {}
        if self.path.exists():
            data = json.loads(self.path.read_text(encoding="utf-8"))
            if data.get("format") != self.FORMAT:
                raise ValueError(f"{self.path}: not a cassette file")
            for rec in data["interactions"]:
                self.interactions[rec["key"]] = rec
        elif mode == "replay":
            raise FileNotFoundError(self.path)

    def complete(self, prompt: str, params: Mapping | None = None) -> str:
        key = interaction_key(prompt, params)
        rec = self.interactions.get(key)
        if rec is not None:
            return rec["response"]
        if self.mode == "replay":
            raise CassetteMiss(f"no recorded response for prompt {key[:12]} in {self.path}")
        response = self.inner.complete(prompt, params)
        self.interactions[key] = {
            "key": key,
            "prompt": prompt,
            "params": dict(params or DEFAULT_PARAMS),
            "response": response,
        }
        return response

    def save(self) -> None:
        records = [self.interactions[k] for k in sorted(self.interactions)]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps({"format": self.FORMAT, "interactions": records}, indent=2,
                                        sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


class HttpCompletionClient:
    """Minimal OpenAI-compatible chat-completions client configured from the environment."""

    def __init__(self, endpoint: str, api_key: str | None = None, model: str = "default", timeout: float = 120.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.timeout = timeout

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> HttpCompletionClient:
        env = os.environ if env is None else env
        endpoint = env.get(ENV_ENDPOINT)
        if not endpoint:
            raise ClientConfigError(f"live client mode needs {ENV_ENDPOINT} to be set")
        return cls(endpoint, env.get(ENV_API_KEY), env.get(ENV_MODEL, "default"))

    def complete(self, prompt: str, params: Mapping | None = None) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        body.update(params or DEFAULT_PARAMS)
        req = urllib.request.Request(self.endpoint, data=json.dumps(body).encode("utf-8"), method="POST")
        req.add_header("Content-Type", "application/json")
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:  # noqa: S310 - configured endpoint
            data = json.loads(resp.read().decode("utf-8"))
        return data["choices"][0]["message"]["content"]
