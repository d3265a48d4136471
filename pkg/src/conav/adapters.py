"""Navigation-policy and belief-source backends.

A policy is any callable ``policy(prompt, observation, history)`` returning
either raw text (parsed by the engine) or an :class:`~conav.actions.Action`.
A belief source is any callable ``source(request, cloud, step)`` returning a
:class:`~conav.comms.BeliefHypothesis` or plain text.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Mapping, Protocol

from .actions import STOP, Action, GoTo
from .comms import BeliefHypothesis, PromptBundle
from .metrics import DEFAULT_SUCCESS_THRESHOLD
from .scene import Episode, Scene, Unreachable

if TYPE_CHECKING:
    from .engine import History, Observation
    from .pointcloud import PointCloud

log = logging.getLogger(__name__)


class NavPolicy(Protocol):
    def __call__(self, prompt: PromptBundle, observation: "Observation", history: "History") -> str | Action: ...


class BeliefSource(Protocol):
    def __call__(self, request: PromptBundle, cloud: "PointCloud | None", step: int) -> BeliefHypothesis | str: ...


@dataclass(frozen=True)
class GenerationParams:
    max_new_tokens: int
    top_p: float
    temperature: float
    do_sample: bool = True

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


# inference decoding settings used for each model
GEN_3D_MODEL = GenerationParams(max_new_tokens=64, top_p=0.95, temperature=0.2, do_sample=True)
GEN_NAV_AGENT = GenerationParams(max_new_tokens=20, top_p=0.95, temperature=0.1, do_sample=True)


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    timeout: float = 30.0
    max_retries: int = 3
    auth_token_env: str | None = "CONAV_API_TOKEN"
    auth_token: str | None = field(default=None, repr=False)
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    max_in_flight: int = 8

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    def token(self) -> str | None:
        if self.auth_token_env and os.environ.get(self.auth_token_env):
            return os.environ[self.auth_token_env]
        return self.auth_token

    def describe(self) -> dict:
        d = asdict(self)
        d.pop("auth_token")
        return d


def load_endpoint_config(path: str | Path) -> EndpointConfig:
    """Read an endpoint from a JSON or TOML file; the token env var overrides the file."""
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
    else:
        from ._toml import loads

        data = loads(path.read_text())
    data = data.get("endpoint", data)
    return EndpointConfig(**data)


class AdapterError(RuntimeError):
    """Transport-level failure talking to a model backend."""


class EndpointTimeout(AdapterError):
    pass


class EndpointStatusError(AdapterError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")
        self.status = status


class MalformedResponse(AdapterError):
    pass


class EndpointUnreachable(AdapterError):
    pass


@dataclass
class CallRecord:
    attempts: int
    latency_s: float
    prompt_tokens: int
    completion_tokens: int
    truncated: bool
    error: str | None = None


@dataclass(frozen=True)
class Generation:
    text: str
    completion_tokens: int
    truncated: bool


def _is_transient(err: AdapterError) -> bool:
    if isinstance(err, EndpointStatusError):
        return err.status == 429 or err.status >= 500
    return isinstance(err, (EndpointTimeout, EndpointUnreachable))


class RemoteClient:
    """JSON-over-HTTP text generation client with retries and an in-flight cap.

    Request body: ``{model, prompt, max_new_tokens, top_p, temperature, do_sample}``.
    Response body: ``{text}``, optionally with ``completion_tokens`` and
    ``finish_reason``.
    """

    def __init__(self, endpoint: EndpointConfig, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.calls: list[CallRecord] = []
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._lock = threading.Lock()

    def _post(self, payload: dict) -> dict:
        ep = self.endpoint
        req = urllib.request.Request(
            ep.base_url.rstrip("/") + "/generate",
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        token = ep.token()
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=ep.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as e:
            raise EndpointStatusError(e.code, e.read().decode("utf-8", "replace")) from e
        except TimeoutError as e:
            raise EndpointTimeout(f"no response within {ep.timeout}s") from e
        except urllib.error.URLError as e:
            if isinstance(e.reason, TimeoutError):
                raise EndpointTimeout(f"no response within {ep.timeout}s") from e
            raise EndpointUnreachable(str(e.reason)) from e
        except OSError as e:
            raise EndpointUnreachable(str(e)) from e
        try:
            data = json.loads(body)
        except ValueError as e:
            raise MalformedResponse(f"response is not JSON: {body[:200]!r}") from e
        if not isinstance(data, dict) or not isinstance(data.get("text"), str):
            raise MalformedResponse(f"response lacks a string 'text' field: {data!r:.200}")
        return data

    def generate_full(self, prompt: str, params: GenerationParams) -> Generation:
        payload = {"model": self.endpoint.model, "prompt": prompt, **asdict(params)}
        ep = self.endpoint
        attempts = 0
        t0 = time.monotonic()
        with self._sem:
            while True:
                attempts += 1
                try:
                    data = self._post(payload)
                    break
                except AdapterError as e:
                    if not _is_transient(e) or attempts > ep.max_retries:
                        self._record(CallRecord(attempts, time.monotonic() - t0, len(prompt.split()), 0, False, repr(e)))
                        raise
                    delay = min(ep.backoff_max, ep.backoff_base * 2 ** (attempts - 1))
                    log.warning("attempt %d to %s failed (%s); retrying in %.2fs", attempts, ep.base_url, e, delay)
                    self._sleep(delay)
        text = data["text"]
        n_out = int(data.get("completion_tokens", len(text.split())))
        truncated = data.get("finish_reason") == "length" or n_out >= params.max_new_tokens
        self._record(CallRecord(attempts, time.monotonic() - t0, int(data.get("prompt_tokens", len(prompt.split()))), n_out, truncated))
        return Generation(text, n_out, truncated)

    def generate(self, prompt: str, params: GenerationParams) -> str:
        return self.generate_full(prompt, params).text

    def _record(self, rec: CallRecord) -> None:
        with self._lock:
            self.calls.append(rec)


def remote_generate(endpoint: EndpointConfig, prompt: str, params: GenerationParams) -> str:
    return RemoteClient(endpoint).generate(prompt, params)


class RemotePolicy:
    def __init__(self, client: RemoteClient, params: GenerationParams = GEN_NAV_AGENT):
        self.client = client
        self.params = params

    def __call__(self, prompt, observation, history) -> str:
        return self.client.generate(prompt.rendered, self.params)


class RemoteBeliefSource:
    def __init__(self, client: RemoteClient, params: GenerationParams = GEN_3D_MODEL):
        self.client = client
        self.params = params

    def __call__(self, request, cloud, step) -> BeliefHypothesis:
        gen = self.client.generate_full(request.rendered, self.params)
        return BeliefHypothesis(gen.text, step, gen.truncated)


class OraclePolicyError(RuntimeError):
    pass


class OraclePolicy:
    """Follows the episode's ground-truth path and stops at its end."""

    def __init__(self, episode: Episode):
        if not episode.gt_path:
            raise ValueError("oracle policy needs a gt_path")
        self.path = episode.gt_path

    def __call__(self, prompt, observation, history) -> Action:
        t = observation.step_index
        if t >= len(self.path) or observation.at != self.path[t]:
            raise OraclePolicyError(f"step {t}: agent at {observation.at}, off the ground-truth path")
        if t == len(self.path) - 1:
            return STOP
        return GoTo(self.path[t + 1])


def oracle_policy(episode: Episode) -> OraclePolicy:
    return OraclePolicy(episode)


class GreedyPolicy:
    """Moves to the candidate geodesically closest to the goal (ties by candidate order)."""

    def __init__(self, scene: Scene, goal: str, threshold: float = DEFAULT_SUCCESS_THRESHOLD):
        self.scene = scene
        self.goal = goal
        self.threshold = threshold

    def __call__(self, prompt, observation, history) -> Action:
        here = self.scene.geodesic(observation.at, self.goal)
        if here is Unreachable or here <= self.threshold:
            return STOP
        best, best_d = None, None
        for c in observation.candidates:
            d = self.scene.geodesic(c, self.goal)
            if d is Unreachable:
                continue
            if best_d is None or d < best_d:
                best, best_d = c, d
        return STOP if best is None else GoTo(best)


def greedy_policy(scene: Scene, goal: str, threshold: float = DEFAULT_SUCCESS_THRESHOLD) -> GreedyPolicy:
    return GreedyPolicy(scene, goal, threshold)


class FirstCandidatePolicy:
    """Always takes the first candidate; stops only at dead ends."""

    def __call__(self, prompt, observation, history) -> Action:
        return GoTo(observation.candidates[0]) if observation.candidates else STOP


class RandomPolicy:
    """Uniform over the action space, stop included. Seeded per instance."""

    def __init__(self, seed: int, stop_weight: float = 1.0):
        if stop_weight < 0:
            raise ValueError("stop_weight must be non-negative")
        self.rng = random.Random(seed)
        self.stop_weight = stop_weight

    def __call__(self, prompt, observation, history) -> Action:
        if not observation.candidates:
            return STOP
        options: list[Action] = [GoTo(c) for c in observation.candidates]
        weights = [1.0] * len(options) + [self.stop_weight]
        return self.rng.choices(options + [STOP], weights=weights)[0]


class ScriptedTextPolicy:
    """Replays canned raw answers by step index; runs out -> "stop"."""

    def __init__(self, answers: Mapping[int, str] | list[str]):
        self.answers = dict(enumerate(answers)) if isinstance(answers, list) else dict(answers)

    def __call__(self, prompt, observation, history) -> str:
        return self.answers.get(observation.step_index, "stop")


class ScriptedBeliefSource:
    def __init__(self, fixture: Mapping[int, str]):
        self.fixture = {int(k): v for k, v in fixture.items()}

    def __call__(self, request, cloud, step) -> BeliefHypothesis:
        return BeliefHypothesis(self.fixture.get(step, ""), step, False)


def scripted_belief_source(fixture: Mapping[int, str]) -> ScriptedBeliefSource:
    return ScriptedBeliefSource(fixture)


def describe_backend(obj: Any) -> str:
    return type(obj).__name__ if obj is not None else "Null"
