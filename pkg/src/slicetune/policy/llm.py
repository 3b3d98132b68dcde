"""Chat-completion endpoint client and the actor backend built on it."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass

import httpx

from ..errors import ConfigError, EndpointError, TransportError
from .base import ActContext, Capabilities, Policy

log = logging.getLogger(__name__)

ACTOR_SYSTEM = "You are a radio resource controller. Follow the output format exactly."


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model: str
    token_env: str = "SLICETUNE_API_KEY"
    act_temperature: float = 0.0
    rollout_temperature: float = 0.8
    timeout: float = 60.0
    max_retries: int = 2
    max_tokens: int = 512
    backoff: float = 0.5  # seconds, doubled per retry

    def __post_init__(self):
        if not self.base_url:
            raise ConfigError("base_url is required")
        if min(self.act_temperature, self.rollout_temperature) < 0:
            raise ConfigError("temperatures must be >= 0")
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LlmEndpointConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown endpoint config keys: {sorted(unknown)}")
        return cls(**d)


class ChatClient:
    """Minimal chat-completion client returning the first choice's text."""

    def __init__(self, config: LlmEndpointConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(base_url=config.base_url.rstrip("/"), headers=headers,
                                  timeout=config.timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def complete(self, messages: list[dict], temperature: float, max_tokens: int | None = None) -> str:
        payload = {
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens or self.config.max_tokens,
        }
        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            try:
                resp = self._http.post("/chat/completions", json=payload)
            except httpx.TransportError as exc:
                if attempt + 1 == attempts:
                    raise TransportError(f"{type(exc).__name__} after {attempts} attempts: {exc}") from exc
                log.warning("chat request failed (%s), retrying", exc)
                time.sleep(self.config.backoff * 2 ** attempt)
                continue
            if not 200 <= resp.status_code < 300:
                raise EndpointError(resp.status_code, resp.text)
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(resp.status_code, f"unexpected response body: {resp.text}") from exc
        raise AssertionError("unreachable")


class LlmEndpointPolicy(Policy):
    backend = "llm_endpoint"
    capabilities = Capabilities(has_exact_logprob=False, supports_temperature=True)

    def __init__(self, config: LlmEndpointConfig, client: ChatClient | None = None):
        self.config = config
        self.client = client or ChatClient(config)

    def _messages(self, prompt: str) -> list[dict]:
        return [{"role": "system", "content": ACTOR_SYSTEM}, {"role": "user", "content": prompt}]

    def act(self, prompt: str, context: ActContext) -> str:
        return self.client.complete(self._messages(prompt), self.config.act_temperature)

    def sample_k(self, prompt: str, context: ActContext, m: int) -> list[str]:
        if m < 1:
            raise ValueError("m must be >= 1")
        return [self.client.complete(self._messages(prompt), self.config.rollout_temperature) for _ in range(m)]
