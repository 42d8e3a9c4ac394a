"""Tests for the chat-completion gateway, cache, and backends."""
import json
import threading

import httpx
import pytest

from trialmatch.gateway import (
    ChatRequest,
    ConfigurationError,
    FixtureError,
    GatewayConfig,
    LlmGateway,
    MockBackend,
    RemoteBackend,
    ResponseCache,
    TokenBucket,
    TransientError,
    TransportError,
    format_request_header,
    mock_register,
    parse_request_header,
    request_key,
)


def _request(user_text="hello", **kwargs):
    return ChatRequest(model="m", system_text="sys", user_text=user_text, **kwargs)


class ScriptedBackend:
    """Backend that raises a scripted prefix of failures, then succeeds."""

    backend_id = "scripted"
    default_model = "scripted"

    def __init__(self, failures, response="done"):
        self.failures = list(failures)
        self.response = response
        self.calls = 0

    def send(self, request):
        self.calls += 1
        if self.failures:
            raise self.failures.pop(0)
        return self.response


class TestChatRequest:
    def test_defaults(self):
        request = _request()
        assert request.temperature == 0.0
        assert request.max_output_tokens == 1024

    def test_empty_texts_rejected(self):
        with pytest.raises(ValueError):
            ChatRequest(model="m", system_text=" ", user_text="u")
        with pytest.raises(ValueError):
            ChatRequest(model="m", system_text="s", user_text=" ")

    def test_request_key_depends_only_on_content(self):
        assert request_key(_request()) == request_key(_request())
        assert request_key(_request()) != request_key(_request(user_text="other"))
        assert request_key(_request()) != request_key(
            _request(temperature=0.5)
        )


class TestRequestHeader:
    def test_round_trip(self):
        header = format_request_header(task="matching", patient="p1", side="inclusion")
        parsed = parse_request_header(header + "\n\nbody text")
        assert parsed == {"task": "matching", "patient": "p1", "side": "inclusion"}

    def test_absent_header_parses_empty(self):
        assert parse_request_header("plain prompt") == {}


class TestTemperatureEnforcement:
    def test_nonzero_temperature_rejected(self):
        gateway = LlmGateway(MockBackend())
        with pytest.raises(ConfigurationError):
            gateway.complete(_request(temperature=0.7))

    def test_enforcement_can_be_disabled(self):
        gateway = LlmGateway(
            MockBackend(), config=GatewayConfig(require_zero_temperature=False)
        )
        response = gateway.complete(_request(temperature=0.7))
        assert response.text.startswith("MOCK-REFUSAL")


class TestCaching:
    def test_second_identical_request_is_cached(self, tmp_path):
        backend = MockBackend()
        backend.add_fixture("OK", user_text="hello")
        gateway = LlmGateway(backend, cache_path=tmp_path / "cache.jsonl")
        first = gateway.complete(_request())
        second = gateway.complete(_request())
        assert first.text == second.text == "OK"
        assert not first.cached and second.cached
        assert first.attempts == 1 and second.attempts == 0
        assert backend.call_count == 1

    def test_cache_persists_across_gateways(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        backend = MockBackend()
        backend.add_fixture("OK", user_text="hello")
        LlmGateway(backend, cache_path=path).complete(_request())
        fresh_backend = MockBackend()
        response = LlmGateway(fresh_backend, cache_path=path).complete(_request())
        assert response.cached
        assert response.text == "OK"
        assert fresh_backend.call_count == 0

    def test_cache_file_format(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        backend = MockBackend()
        backend.add_fixture("OK", user_text="hello")
        LlmGateway(backend, cache_path=path).complete(_request())
        row = json.loads(path.read_text().splitlines()[0])
        assert set(row) == {"key", "response", "ts"}
        assert row["key"] == request_key(_request())
        assert row["response"] == "OK"

    def test_corrupt_tail_line_skipped(self, tmp_path):
        path = tmp_path / "cache.jsonl"
        good = json.dumps(
            {"key": request_key(_request()), "response": "OK", "ts": "t"}
        )
        path.write_text(good + '\n{"key": "trunc')
        cache = ResponseCache(path)
        assert len(cache) == 1
        assert cache.get(request_key(_request())) == "OK"

    def test_caching_does_not_change_responses(self, tmp_path):
        backend = MockBackend()
        backend.add_fixture("OK", user_text="hello")
        without_cache = LlmGateway(backend).complete(_request())
        with_cache = LlmGateway(backend, cache_path=tmp_path / "c.jsonl").complete(
            _request()
        )
        assert without_cache.text == with_cache.text


class TestRetries:
    def test_two_transient_failures_then_success(self):
        sleeps = []
        backend = ScriptedBackend(
            [TransientError("429"), TransientError("429")], response="recovered"
        )
        gateway = LlmGateway(
            backend,
            config=GatewayConfig(retry_jitter_seed=7),
            sleep=sleeps.append,
        )
        response = gateway.complete(_request())
        assert response.text == "recovered"
        assert response.attempts == 3
        assert backend.calls == 3
        assert len(sleeps) == 2
        assert all(delay > 0 for delay in sleeps)
        # Exponential base doubles between the first two retries.
        assert sleeps[1] > sleeps[0] * 0.5

    def test_exhausted_retries_raise_transport_error(self):
        backend = ScriptedBackend([TransientError("boom")] * 99)
        gateway = LlmGateway(
            backend,
            config=GatewayConfig(max_attempts=3, retry_jitter_seed=7),
            sleep=lambda _s: None,
        )
        with pytest.raises(TransportError, match="after 3 attempts"):
            gateway.complete(_request())
        assert backend.calls == 3

    def test_jitter_is_seeded(self):
        def delays(seed):
            sleeps = []
            backend = ScriptedBackend([TransientError("x")] * 2)
            LlmGateway(
                backend,
                config=GatewayConfig(retry_jitter_seed=seed),
                sleep=sleeps.append,
            ).complete(_request())
            return sleeps

        assert delays(7) == delays(7)

    def test_transport_error_not_retried(self):
        backend = ScriptedBackend([TransportError("bad request")])
        gateway = LlmGateway(backend, sleep=lambda _s: None)
        with pytest.raises(TransportError):
            gateway.complete(_request())
        assert backend.calls == 1


class TestMockBackend:
    def test_exact_fixture_replay(self):
        backend = MockBackend()
        backend.add_fixture("OK", user_text="hello")
        assert backend.send(_request()) == "OK"

    def test_parametric_field_replay(self):
        backend = MockBackend()
        backend.add_fixture(
            "matched", fields={"patient": "p1", "trial": "NCT1", "side": "inclusion"}
        )
        header = format_request_header(
            task="matching", patient="p1", trial="NCT1", side="inclusion"
        )
        assert backend.send(_request(user_text=header + "\n\nbody")) == "matched"
        other = format_request_header(
            task="matching", patient="p2", trial="NCT1", side="inclusion"
        )
        assert backend.send(_request(user_text=other + "\n\nbody")).startswith(
            "MOCK-REFUSAL"
        )

    def test_unmatched_refusal_is_deterministic(self):
        backend = MockBackend()
        first = backend.send(_request(user_text="nothing matches"))
        second = backend.send(_request(user_text="nothing matches"))
        assert first == second
        assert first.startswith("MOCK-REFUSAL")
        assert backend.send(_request(user_text="different")) != first

    def test_fixture_file_round_trip(self, tmp_path):
        path = tmp_path / "fixtures.jsonl"
        rows = [
            {"user_text": "hello", "response": "OK"},
            {"fields": {"task": "keywords"}, "response": '{"keywords": ["a"]}'},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        backend = MockBackend()
        assert mock_register(backend, path) == 2
        assert backend.send(_request()) == "OK"

    def test_empty_fixture_file(self, tmp_path):
        path = tmp_path / "fixtures.jsonl"
        path.write_text("")
        backend = MockBackend()
        assert mock_register(backend, path) == 0
        assert backend.send(_request()).startswith("MOCK-REFUSAL")

    def test_malformed_fixture_file_names_line(self, tmp_path):
        path = tmp_path / "fixtures.jsonl"
        path.write_text('{"user_text": "a", "response": "b"}\n{"response": 3}\n')
        backend = MockBackend()
        with pytest.raises(FixtureError, match=r"fixtures\.jsonl:2"):
            backend.load_fixtures(path)

    def test_fixture_needs_exactly_one_matcher(self):
        backend = MockBackend()
        with pytest.raises(FixtureError):
            backend.add_fixture("r")
        with pytest.raises(FixtureError):
            backend.add_fixture("r", user_text="a", fields={"task": "b"})

    def test_file_order_decides_among_field_matchers(self):
        backend = MockBackend()
        backend.add_fixture("first", fields={"task": "matching"})
        backend.add_fixture("second", fields={"task": "matching", "patient": "p1"})
        header = format_request_header(task="matching", patient="p1")
        assert backend.send(_request(user_text=header + "\nbody")) == "first"


class TestTokenBucket:
    def test_invalid_rate_rejected(self):
        with pytest.raises(ValueError):
            TokenBucket(0.0)

    def test_high_rate_does_not_block(self):
        bucket = TokenBucket(100000.0, capacity=8)
        for _ in range(50):
            bucket.acquire()


class TestRemoteBackend:
    def _backend(self, handler):
        return RemoteBackend(
            endpoint="https://llm.example",
            model="m",
            api_key="k",
            transport=httpx.MockTransport(handler),
        )

    def test_missing_env_vars_named(self):
        with pytest.raises(ConfigurationError, match="TRIALMATCH_LLM_ENDPOINT"):
            RemoteBackend.from_env(environ={})

    def test_from_env_reads_configuration(self):
        environ = {
            "TRIALMATCH_LLM_ENDPOINT": "https://llm.example",
            "TRIALMATCH_LLM_MODEL": "med-model",
            "TRIALMATCH_LLM_KEY": "secret",
        }

        def handler(request):
            assert request.headers["Authorization"] == "Bearer secret"
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "pong"}}]}
            )

        backend = RemoteBackend.from_env(
            environ=environ, transport=httpx.MockTransport(handler)
        )
        assert backend.default_model == "med-model"
        assert backend.send(_request()) == "pong"

    def test_send_posts_chat_completion_payload(self):
        captured = {}

        def handler(request):
            captured["url"] = str(request.url)
            captured["payload"] = json.loads(request.content)
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "pong"}}]}
            )

        backend = self._backend(handler)
        assert backend.send(_request()) == "pong"
        assert captured["url"] == "https://llm.example/chat/completions"
        assert captured["payload"]["model"] == "m"
        assert captured["payload"]["temperature"] == 0.0
        assert [m["role"] for m in captured["payload"]["messages"]] == [
            "system", "user",
        ]

    def test_rate_limit_and_server_errors_are_transient(self):
        for status in (429, 500, 503):
            backend = self._backend(lambda _r, s=status: httpx.Response(s))
            with pytest.raises(TransientError):
                backend.send(_request())

    def test_client_error_is_permanent(self):
        backend = self._backend(lambda _r: httpx.Response(404, text="missing"))
        with pytest.raises(TransportError):
            backend.send(_request())

    def test_network_failure_is_transient(self):
        def handler(_request):
            raise httpx.ConnectError("refused")

        backend = self._backend(handler)
        with pytest.raises(TransientError):
            backend.send(_request())

    def test_rate_limited_twice_then_success_records_attempts(self):
        statuses = [429, 429, 200]

        def handler(_request):
            status = statuses.pop(0)
            if status != 200:
                return httpx.Response(status)
            return httpx.Response(
                200, json={"choices": [{"message": {"content": "finally"}}]}
            )

        backend = self._backend(handler)
        gateway = LlmGateway(
            backend,
            config=GatewayConfig(retry_jitter_seed=7),
            sleep=lambda _s: None,
        )
        response = gateway.complete(_request())
        assert response.text == "finally"
        assert response.attempts == 3

    def test_malformed_success_body_is_transport_error(self):
        backend = self._backend(lambda _r: httpx.Response(200, json={"nope": 1}))
        with pytest.raises(TransportError, match="malformed"):
            backend.send(_request())


class TestConcurrency:
    def test_parallel_completions_share_cache(self, tmp_path):
        backend = MockBackend()
        for i in range(20):
            backend.add_fixture(f"response-{i}", user_text=f"prompt-{i}")
        gateway = LlmGateway(backend, cache_path=tmp_path / "cache.jsonl")
        results = {}

        def work(i):
            results[i] = gateway.complete(_request(user_text=f"prompt-{i}")).text

        threads = [threading.Thread(target=work, args=(i % 20,)) for i in range(60)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: f"response-{i}" for i in range(20)}
        cache_rows = [
            json.loads(line)
            for line in (tmp_path / "cache.jsonl").read_text().splitlines()
        ]
        assert len(cache_rows) == len({row["key"] for row in cache_rows})
