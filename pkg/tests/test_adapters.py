from __future__ import annotations

import json
import threading
import time
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from conav.actions import STOP, GoTo
from conav.adapters import (
    GEN_3D_MODEL,
    GEN_NAV_AGENT,
    EndpointConfig,
    EndpointStatusError,
    EndpointTimeout,
    EndpointUnreachable,
    FirstCandidatePolicy,
    GenerationParams,
    MalformedResponse,
    OraclePolicyError,
    RemoteBeliefSource,
    RemoteClient,
    RemotePolicy,
    ScriptedTextPolicy,
    greedy_policy,
    load_endpoint_config,
    oracle_policy,
    remote_generate,
    scripted_belief_source,
)
from conav.comms import EMPTY_HYPOTHESIS, build_3d_request, parse_prompt
from conav.engine import EngineConfig, EpisodeAborted, Observation, History, run_episode, step_records
from conav.metrics import EpisodeResult, aggregate
from conav.scene import Episode


class Stub:
    """Scripted HTTP endpoint: each request pops the next behavior."""

    def __init__(self, behaviors, default=("ok", {"text": "done"})):
        self.behaviors = list(behaviors)
        self.default = default
        self.requests = []
        self.lock = threading.Lock()


def make_handler(stub):
    class H(BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            with stub.lock:
                stub.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                kind, arg = stub.behaviors.pop(0) if stub.behaviors else stub.default
            if kind == "sleep":
                time.sleep(arg)
                kind, arg = "ok", {"text": "late"}
            if kind == "ok":
                data = json.dumps(arg).encode()
                self.send_response(200)
            elif kind == "raw":
                data = arg
                self.send_response(200)
            else:
                data = b"boom"
                self.send_response(arg)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            try:
                self.wfile.write(data)
            except BrokenPipeError:
                pass

    return H


@contextmanager
def serve(stub):
    srv = ThreadingHTTPServer(("127.0.0.1", 0), make_handler(stub))
    th = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    th.start()
    try:
        yield f"http://127.0.0.1:{srv.server_address[1]}"
    finally:
        srv.shutdown()
        srv.server_close()


def endpoint(url, **kw):
    kw.setdefault("auth_token_env", None)
    return EndpointConfig(url, "stub-model", **kw)


def test_generation_defaults():
    assert (GEN_3D_MODEL.max_new_tokens, GEN_3D_MODEL.top_p, GEN_3D_MODEL.temperature, GEN_3D_MODEL.do_sample) == (64, 0.95, 0.2, True)
    assert (GEN_NAV_AGENT.max_new_tokens, GEN_NAV_AGENT.top_p, GEN_NAV_AGENT.temperature, GEN_NAV_AGENT.do_sample) == (20, 0.95, 0.1, True)
    for bad in [dict(max_new_tokens=0, top_p=0.5, temperature=1), dict(max_new_tokens=1, top_p=0, temperature=1),
                dict(max_new_tokens=1, top_p=1.1, temperature=1), dict(max_new_tokens=1, top_p=1, temperature=0)]:
        with pytest.raises(ValueError):
            GenerationParams(**bad)
    with pytest.raises(ValueError):
        EndpointConfig("http://x", "m", timeout=0)
    with pytest.raises(ValueError):
        EndpointConfig("http://x", "m", max_retries=-1)


def test_canned_reply_and_wire_format():
    stub = Stub([("ok", {"text": "Candidate 2", "completion_tokens": 3})])
    with serve(stub) as url:
        out = remote_generate(endpoint(url), "prompt text", GEN_NAV_AGENT)
    assert out == "Candidate 2"
    req = stub.requests[0]
    assert req["path"] == "/generate"
    assert req["body"] == {"model": "stub-model", "prompt": "prompt text", "max_new_tokens": 20,
                           "top_p": 0.95, "temperature": 0.1, "do_sample": True}


def test_fail_twice_then_succeed():
    stub = Stub([("status", 503), ("status", 500), ("ok", {"text": "fine"})])
    sleeps = []
    with serve(stub) as url:
        client = RemoteClient(endpoint(url, max_retries=3, backoff_base=0.5), sleep=sleeps.append)
        assert client.generate("p", GEN_NAV_AGENT) == "fine"
    assert len(stub.requests) == 3
    assert client.calls[-1].attempts == 3 and client.calls[-1].error is None
    assert sleeps == [0.5, 1.0]


def test_always_failing_stops_after_retries_plus_one():
    stub = Stub([], default=("status", 502))
    with serve(stub) as url:
        client = RemoteClient(endpoint(url, max_retries=2), sleep=lambda s: None)
        with pytest.raises(EndpointStatusError) as ei:
            client.generate("p", GEN_NAV_AGENT)
    assert ei.value.status == 502
    assert len(stub.requests) == 3
    assert client.calls[-1].attempts == 3


def test_client_error_is_not_retried():
    stub = Stub([], default=("status", 400))
    with serve(stub) as url:
        client = RemoteClient(endpoint(url, max_retries=5), sleep=lambda s: None)
        with pytest.raises(EndpointStatusError):
            client.generate("p", GEN_NAV_AGENT)
    assert len(stub.requests) == 1


def test_malformed_body():
    for payload in (b"not json", b'{"txt": 1}'):
        stub = Stub([("raw", payload)])
        with serve(stub) as url:
            with pytest.raises(MalformedResponse):
                remote_generate(endpoint(url, max_retries=3), "p", GEN_NAV_AGENT)
        assert len(stub.requests) == 1


def test_timeout_is_bounded():
    stub = Stub([], default=("sleep", 1.0))
    with serve(stub) as url:
        client = RemoteClient(endpoint(url, timeout=0.2, max_retries=1, backoff_base=0.05), sleep=time.sleep)
        t0 = time.monotonic()
        with pytest.raises(EndpointTimeout):
            client.generate("p", GEN_NAV_AGENT)
        elapsed = time.monotonic() - t0
    # timeout x (retries + 1) plus the backoff budget, with scheduling slack
    assert elapsed < 0.2 * 2 + 0.05 + 0.5
    assert client.calls[-1].attempts == 2


def test_unreachable():
    client = RemoteClient(endpoint("http://127.0.0.1:9", max_retries=1), sleep=lambda s: None)
    with pytest.raises(EndpointUnreachable):
        client.generate("p", GEN_NAV_AGENT)
    assert client.calls[-1].attempts == 2


def test_token_env_override(monkeypatch, tmp_path):
    cfg_file = tmp_path / "ep.toml"
    cfg_file.write_text('[endpoint]\nbase_url = "http://x"\nmodel = "m"\nauth_token = "from-file"\n')
    cfg = load_endpoint_config(cfg_file)
    monkeypatch.delenv("CONAV_API_TOKEN", raising=False)
    assert cfg.token() == "from-file"
    monkeypatch.setenv("CONAV_API_TOKEN", "from-env")
    assert cfg.token() == "from-env"
    assert "auth_token" not in cfg.describe()
    stub = Stub([("ok", {"text": "x"})])
    with serve(stub) as url:
        remote_generate(EndpointConfig(url, "m"), "p", GEN_NAV_AGENT)
    assert stub.requests[0]["auth"] == "Bearer from-env"
    (tmp_path / "ep.json").write_text(json.dumps({"base_url": "http://y", "model": "n", "timeout": 3}))
    assert load_endpoint_config(tmp_path / "ep.json").timeout == 3


def test_truncation_flag():
    stub = Stub([("ok", {"text": "a b c", "finish_reason": "length"}), ("ok", {"text": "short"})])
    with serve(stub) as url:
        src = RemoteBeliefSource(RemoteClient(endpoint(url)))
        req = build_3d_request("VLN", "go")
        assert src(req, None, 0).truncated is True
        assert src(req, None, 1).truncated is False


def test_in_flight_cap():
    stub = Stub([], default=("sleep", 0.15))
    active = []
    peak = [0]
    lock = threading.Lock()
    with serve(stub) as url:
        client = RemoteClient(endpoint(url, max_in_flight=2))
        orig = client._post

        def counting(payload):
            with lock:
                active.append(1)
                peak[0] = max(peak[0], len(active))
            try:
                return orig(payload)
            finally:
                with lock:
                    active.pop()

        client._post = counting
        threads = [threading.Thread(target=client.generate, args=("p", GEN_NAV_AGENT)) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert peak[0] == 2
    assert len(client.calls) == 6


def test_unreachable_endpoint_aborts_episode(fixture8):
    e = Episode("e", "fixture8", "a0", "a1", "go", ("a0", "a1"), 2.0)
    client = RemoteClient(endpoint("http://127.0.0.1:9", max_retries=0))
    with pytest.raises(EpisodeAborted) as ei:
        run_episode(fixture8, e, RemotePolicy(client), None)
    assert ei.value.step == 0 and isinstance(ei.value.cause, EndpointUnreachable)


def test_remote_policy_drives_episode(fixture8):
    stub = Stub([("ok", {"text": "go to a1"}), ("ok", {"text": "Stop."})])
    e = Episode("e", "fixture8", "a0", "a1", "go", ("a0", "a1"), 2.0)
    with serve(stub) as url:
        t = run_episode(fixture8, e, RemotePolicy(RemoteClient(endpoint(url))), None)
    assert t.visited == ["a0", "a1"]
    assert parse_prompt(stub.requests[0]["body"]["prompt"], "ForNavAgent", "VLN")["instruction"] == "go"


# ---- scripted and geometric backends -----------------------------------------------------


def obs(at, cands, t=0):
    return Observation(at, (), (), tuple(cands), t)


def test_oracle_policy_contract():
    e = Episode("e", "s", "a", "c", "", ("a", "b", "c"), 2.0)
    pol = oracle_policy(e)
    assert pol(None, obs("a", ["b"], 0), History()) == GoTo("b")
    assert pol(None, obs("c", ["b"], 2), History()) == STOP
    with pytest.raises(OraclePolicyError):
        pol(None, obs("x", ["b"], 1), History())
    single = oracle_policy(Episode("e", "s", "a", "a", "", ("a",), 0.0))
    assert single(None, obs("a", ["b"]), History()) == STOP


def test_greedy_start_within_threshold(fixture8):
    pol = greedy_policy(fixture8, "a1")
    assert pol(None, obs("a0", sorted(fixture8.navigable_from("a0"))), History()) == STOP


def test_scripted_belief_source():
    src = scripted_belief_source({0: "A bathroom with blue and white tiles on the walls."})
    assert src(None, None, 0).text == "A bathroom with blue and white tiles on the walls."
    assert src(None, None, 1).text == ""


def test_scripted_replay_is_identical(fixture8):
    e = Episode("e", "fixture8", "a0", "b2", "go", ("a0", "a1", "h0", "b1", "b2"),
                fixture8.path_length(["a0", "a1", "h0", "b1", "b2"]))
    table = {i: f"step {i} hypothesis" for i in range(5)}

    def transcript():
        t = run_episode(fixture8, e, oracle_policy(e), scripted_belief_source(table))
        return json.dumps(step_records(t))

    a, b = transcript(), transcript()
    assert a == b
    assert EMPTY_HYPOTHESIS not in a


def test_backends_are_interchangeable(fixture8):
    """Same episodes through every local backend pair: engine invariants hold for each."""
    e = Episode("e", "fixture8", "a0", "b2", "go", ("a0", "a1", "h0", "b1", "b2"),
                fixture8.path_length(["a0", "a1", "h0", "b1", "b2"]))
    policies = [oracle_policy(e), greedy_policy(fixture8, "b2"), FirstCandidatePolicy(), ScriptedTextPolicy(["1", "2", "stop"])]
    beliefs = [None, scripted_belief_source({0: "x"}), lambda req, cloud, t: "plain text"]
    for pol in policies:
        for src in beliefs:
            t = run_episode(fixture8, e, pol, src, EngineConfig(max_steps=6))
            assert t.steps_taken <= 6
            aggregate([EpisodeResult.from_trajectory(t, fixture8)])
