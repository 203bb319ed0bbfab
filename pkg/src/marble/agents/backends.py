"""Text-completion backends: a remote chat-completions client and a scripted stand-in."""

from __future__ import annotations

import os
import threading
import time
from typing import Callable, Mapping, Protocol, runtime_checkable

import requests

from ..core import DecodingParams, EndpointParams


class TransportError(Exception):
    """Network failure or HTTP error status from the completion endpoint."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class BackendTimeoutError(TimeoutError):
    """The backend did not produce a completion within the deadline."""


@runtime_checkable
class SlmBackend(Protocol):
    def complete(self, prompt: str, decoding: DecodingParams, timeout_ms: int) -> str: ...


def call_with_timeout(fn: Callable[[], str], timeout_ms: int) -> str:
    """Run ``fn`` on a daemon thread and abandon it past the deadline.

    Late results are discarded irrevocably; the abandoned thread cannot
    block interpreter exit.
    """
    box: dict[str, object] = {}

    def target() -> None:
        try:
            box["value"] = fn()
        except BaseException as exc:  # propagated to the caller below
            box["error"] = exc

    thread = threading.Thread(target=target, daemon=True)
    thread.start()
    thread.join(timeout_ms / 1000.0)
    if thread.is_alive():
        raise BackendTimeoutError(f"no completion within {timeout_ms} ms")
    if "error" in box:
        raise box["error"]  # type: ignore[misc]
    return box["value"]  # type: ignore[return-value]


class ScriptedBackend:
    """Deterministic backend for tests: fixed text, a prompt->text table, or a closure.

    A mapping script matches keys as substrings of the prompt in insertion
    order, with the empty-string key acting as the default. ``delay_ms``
    simulates a slow model; ``error`` is raised after the delay.
    """

    def __init__(
        self,
        script: str | Mapping[str, str] | Callable[[str], str],
        *,
        delay_ms: int = 0,
        error: Exception | None = None,
    ):
        self._script = script
        self._delay_ms = delay_ms
        self._error = error
        self.calls = 0

    def complete(self, prompt: str, decoding: DecodingParams, timeout_ms: int) -> str:
        self.calls += 1
        if self._delay_ms:
            time.sleep(self._delay_ms / 1000.0)
        if self._error is not None:
            raise self._error
        if callable(self._script):
            return self._script(prompt)
        if isinstance(self._script, str):
            return self._script
        for key, value in self._script.items():
            if key and key in prompt:
                return value
        if "" in self._script:
            return self._script[""]
        raise TransportError("no scripted response matches the prompt")


def remote_complete(
    endpoint: str,
    prompt: str,
    decoding: DecodingParams,
    timeout_ms: int,
    *,
    model: str = "",
    api_key: str | None = None,
    send_repetition_penalty: bool = True,
) -> str:
    """Issue one chat-completion request and return the first choice's text.

    The prompt travels as a single user message together with the four
    decoding parameters; the repetition penalty is omitted when the
    endpoint is flagged as not accepting it.
    """
    body: dict[str, object] = {
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": decoding.temperature,
        "top_p": decoding.top_p,
        "max_tokens": decoding.max_new_tokens,
    }
    if send_repetition_penalty:
        body["repetition_penalty"] = decoding.repetition_penalty
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    try:
        response = requests.post(endpoint, json=body, headers=headers, timeout=timeout_ms / 1000.0)
    except requests.Timeout as exc:
        raise BackendTimeoutError(f"no completion within {timeout_ms} ms") from exc
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if response.status_code >= 400:
        raise TransportError(f"HTTP {response.status_code}", status=response.status_code)
    try:
        payload = response.json()
        return payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion payload: {exc}") from exc


class RemoteHttpBackend:
    """Chat-completions-compatible HTTP backend configured from EndpointParams."""

    def __init__(self, endpoint: EndpointParams):
        if not endpoint.url:
            raise ValueError("remote backend requires an endpoint url")
        self._endpoint = endpoint

    def complete(self, prompt: str, decoding: DecodingParams, timeout_ms: int) -> str:
        api_key = os.environ.get(self._endpoint.api_key_env) or None
        return remote_complete(
            self._endpoint.url,
            prompt,
            decoding,
            timeout_ms,
            model=self._endpoint.model,
            api_key=api_key,
            send_repetition_penalty=self._endpoint.send_repetition_penalty,
        )
