import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from metaopt.engine import (
    DEFAULT_TEMPERATURE,
    CachedEngine,
    CallableEngine,
    EchoEngine,
    EngineRequest,
    EngineSet,
    HTTPEngine,
    ProtocolError,
    ScriptedEngine,
    ScriptRecord,
    TransportError,
    UnscriptedRequestError,
    UsageLedger,
    cache_key,
    usage_report,
    write_transcript,
)


def req(user="hello", level="program", **kw):
    return EngineRequest("sys", user, level, **kw)


class TestRequest:
    @pytest.mark.parametrize("level", ["program", "optimizer", "meta"])
    def test_default_temperature(self, level):
        assert req(level=level).temperature == DEFAULT_TEMPERATURE[level]

    def test_validation(self):
        with pytest.raises(ValueError):
            req(level="oracle")
        with pytest.raises(ValueError):
            req(user="")
        with pytest.raises(ValueError):
            req(temperature=3.0)
        with pytest.raises(ValueError):
            req(max_tokens=0)


class TestScripted:
    def test_exact_beats_substring(self):
        eng = ScriptedEngine([ScriptRecord("hel", "sub", "substring"), ScriptRecord("hello", "exact", "exact")])
        assert eng.complete(req("hello")).text == "exact"
        assert eng.complete(req("say hel")).text == "sub"

    def test_substring_in_transcript_order(self):
        eng = ScriptedEngine([("b", "first"), ("ab", "second")], mode="substring")
        assert eng.complete(req("xab")).text == "first"

    def test_unscripted(self):
        eng = ScriptedEngine([("a", "b")])
        with pytest.raises(UnscriptedRequestError):
            eng.complete(req("zzz"))
        assert eng.misses == 1

    def test_token_estimates_and_explicit_usage(self):
        eng = ScriptedEngine([ScriptRecord("one two", "three four five"), ScriptRecord("x", "y", usage=(10, 20))])
        r = eng.complete(EngineRequest("s", "one two", "program"))
        assert (r.prompt_tokens, r.completion_tokens) == (3, 3)
        r = eng.complete(req("x"))
        assert (r.prompt_tokens, r.completion_tokens) == (10, 20)

    @pytest.mark.parametrize("fmt", ["doc", "list", "jsonl"])
    def test_from_file(self, tmp_path, fmt):
        path = tmp_path / "t"
        recs = [{"match": "q", "response": "a"}]
        if fmt == "doc":
            write_transcript(path, [ScriptRecord("q", "a")], mode="exact")
        elif fmt == "list":
            path.write_text(json.dumps(recs))
        else:
            path.write_text("\n".join(json.dumps(r) for r in recs))
        assert ScriptedEngine.from_file(path).complete(req("q")).text == "a"


class TestUsage:
    def test_ledger_totals(self):
        eng = ScriptedEngine([("a", "b c")], count_tokens=True)
        eng.complete(EngineRequest("", "a", "program"))
        eng.complete(EngineRequest("", "a", "meta"))
        rep = usage_report(eng.ledger)
        assert rep["program"]["requests"] == 1 and rep["meta"]["requests"] == 1
        assert rep["total"]["total_tokens"] == sum(rep[k]["total_tokens"] for k in ("program", "optimizer", "meta"))

    def test_thread_safe(self):
        eng = CallableEngine(lambda r: "x y")
        with ThreadPoolExecutor(8) as pool:
            list(pool.map(lambda _: eng.complete(req("a b")), range(400)))
        assert eng.ledger.level("program").requests == 400
        assert eng.ledger.level("program").completion_tokens == 800

    def test_engine_set_distinct_usage(self):
        shared = EchoEngine()
        es = EngineSet(shared, shared, CallableEngine(lambda r: "z"))
        assert len(es.distinct()) == 2
        es.program.complete(req())
        es.meta.complete(req(level="meta"))
        assert es.combined_usage().total().requests == 2

    def test_merge(self):
        a, b = UsageLedger(), UsageLedger()
        CallableEngine(lambda r: "x", ledger=a).complete(req())
        CallableEngine(lambda r: "x", ledger=b).complete(req())
        a.merge(b)
        assert a.total().requests == 2


def ok_body(text="fine", p=5, c=7):
    return {"choices": [{"message": {"content": text}}], "usage": {"prompt_tokens": p, "completion_tokens": c}}


class TestHTTP:
    def make(self, handler, **kw):
        sleeps = []
        client = httpx.Client(transport=httpx.MockTransport(handler))
        eng = HTTPEngine("m1", endpoint="https://api.test/v1", api_key="k", client=client, sleep=sleeps.append, **kw)
        return eng, sleeps

    def test_payload_and_usage(self):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json=ok_body())

        eng, _ = self.make(handler)
        r = eng.complete(EngineRequest("S", "U", "meta", seed=3))
        assert r.text == "fine" and (r.prompt_tokens, r.completion_tokens) == (5, 7)
        assert seen["url"] == "https://api.test/v1/chat/completions"
        assert seen["auth"] == "Bearer k"
        assert seen["body"]["messages"] == [{"role": "system", "content": "S"}, {"role": "user", "content": "U"}]
        assert seen["body"]["temperature"] == 1.0 and seen["body"]["seed"] == 3
        assert eng.ledger.level("meta").total_tokens == 12

    def test_retries_then_succeeds(self):
        codes = iter([429, 503])

        def handler(request):
            code = next(codes, 200)
            return httpx.Response(code, json=ok_body() if code == 200 else {})

        eng, sleeps = self.make(handler)
        assert eng.complete(req()).text == "fine"
        assert sleeps == [1.0, 2.0]

    def test_retries_exhausted(self):
        calls = []

        def handler(request):
            calls.append(1)
            raise httpx.ConnectTimeout("slow")

        eng, sleeps = self.make(handler)
        with pytest.raises(TransportError):
            eng.complete(req())
        assert len(calls) == 4 and sleeps == [1.0, 2.0, 4.0]
        assert eng.ledger.total().requests == 0

    def test_client_error_not_retried(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400, json={"error": "bad"})

        eng, _ = self.make(handler)
        with pytest.raises(ProtocolError) as info:
            eng.complete(req())
        assert info.value.status == 400 and len(calls) == 1

    def test_malformed_body(self):
        eng, _ = self.make(lambda r: httpx.Response(200, json={"nope": 1}))
        with pytest.raises(ProtocolError):
            eng.complete(req())


class TestCache:
    def test_hit_returns_stored_tokens(self, tmp_path):
        inner = ScriptedEngine([("q", "a b c")])
        eng = CachedEngine(inner, tmp_path)
        first = eng.complete(req("q"))
        second = eng.complete(req("q"))
        assert not first.cached and second.cached
        assert (second.text, second.prompt_tokens, second.completion_tokens) == (
            first.text, first.prompt_tokens, first.completion_tokens)
        assert inner.ledger.total().requests == 1
        assert eng.hits == 1 and eng.misses == 1
        assert eng.ledger.total().cached_requests == 1

    def test_persists_across_instances(self, tmp_path):
        CachedEngine(ScriptedEngine([("q", "a")]), tmp_path).complete(req("q"))
        inner = ScriptedEngine([])
        assert CachedEngine(inner, tmp_path).complete(req("q")).text == "a"
        assert inner.ledger.total().requests == 0

    def test_key_covers_sampling_parameters(self):
        base = req("q")
        keys = {cache_key("e", base), cache_key("e2", base), cache_key("e", req("q", temperature=0.5)),
                cache_key("e", req("q", max_tokens=10)), cache_key("e", req("q", seed=1)),
                cache_key("e", EngineRequest("other", "q", "program"))}
        assert len(keys) == 6

    def test_concurrent_same_key_single_call(self, tmp_path):
        calls = []
        lock = threading.Lock()

        def fn(r):
            with lock:
                calls.append(1)
            return "x"

        eng = CachedEngine(CallableEngine(fn), tmp_path)
        with ThreadPoolExecutor(8) as pool:
            out = list(pool.map(lambda _: eng.complete(req("same")).text, range(32)))
        assert out == ["x"] * 32 and len(calls) == 1

    @pytest.mark.skipif(hasattr(os, "geteuid") and os.geteuid() == 0, reason="root ignores permissions")
    def test_unwritable_dir_degrades(self, tmp_path):
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        warnings = []
        eng = CachedEngine(ScriptedEngine([("q", "a")]), ro, on_warning=warnings.append)
        assert eng.complete(req("q")).text == "a"
        assert warnings

    def test_unusable_cache_path_degrades(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("not a directory")
        warnings = []
        eng = CachedEngine(ScriptedEngine([("q", "a")]), blocker, on_warning=warnings.append)
        assert eng.complete(req("q")).text == "a"
        assert eng.complete(req("q")).text == "a"
        assert warnings

    def test_corrupt_entry_degrades(self, tmp_path):
        eng = CachedEngine(ScriptedEngine([("q", "a")]), tmp_path)
        eng.complete(req("q"))
        (entry,) = [p for p in tmp_path.rglob("*.json")]
        entry.write_text("{broken")
        warnings = []
        eng2 = CachedEngine(ScriptedEngine([("q", "a")]), tmp_path, on_warning=warnings.append)
        assert eng2.complete(req("q")).text == "a" and warnings
