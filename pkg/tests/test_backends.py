import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from vqaharness.backends import (
    BackendRequest,
    BackendResponse,
    GenerationConfig,
    HTTPBackend,
    ReplayBackend,
    ScriptedBackend,
    complete_batch,
    preset,
    with_seed,
)
from vqaharness.errors import BackendError, ReplayMiss, UnknownPreset


def make_request(prompt="Question: Q? Answer:", **gen_kwargs):
    return BackendRequest(prompt=prompt, gen=GenerationConfig(**gen_kwargs))


class TestGenerationConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            GenerationConfig(mode="beam", beam_size=0)
        with pytest.raises(ValueError):
            GenerationConfig(mode="sample", temperature=0.0)
        with pytest.raises(ValueError):
            GenerationConfig(n=0)
        with pytest.raises(ValueError):
            GenerationConfig(max_new_tokens=0)
        with pytest.raises(ValueError):
            GenerationConfig(mode="magic")

    def test_canonical_is_field_order_independent(self):
        a = GenerationConfig(mode="beam", beam_size=3, max_new_tokens=10)
        b = GenerationConfig(max_new_tokens=10, beam_size=3, mode="beam")
        assert a.canonical() == b.canonical()


class TestBackendRequest:
    def test_text_only_purposes_reject_images(self):
        for purpose in ("parse", "convert", "embed"):
            with pytest.raises(ValueError):
                BackendRequest(prompt="p", gen=GenerationConfig(), purpose=purpose, image_ref="i.jpg")

    def test_digest_sensitivity(self):
        base = make_request()
        assert base.digest() == make_request().digest()
        assert base.digest() != make_request(prompt="other prompt").digest()
        assert base.digest() != make_request(max_new_tokens=11).digest()
        seeded = BackendRequest(prompt=base.prompt, gen=with_seed(base.gen, 7))
        assert base.digest() != seeded.digest()

    def test_digest_includes_image_and_omit_flag(self):
        with_image = BackendRequest(prompt="p", gen=GenerationConfig(), image_ref="img.jpg")
        without = BackendRequest(prompt="p", gen=GenerationConfig())
        omitted = BackendRequest(prompt="p", gen=GenerationConfig(omit_image=True), image_ref="img.jpg")
        assert len({with_image.digest(), without.digest(), omitted.digest()}) == 3


class TestPresets:
    def test_answer(self):
        gen = preset("answer")
        assert (gen.mode, gen.beam_size, gen.max_new_tokens, gen.length_penalty) == ("beam", 3, 10, -1.0)

    def test_verbose_answer(self):
        gen = preset("verbose-answer")
        assert (gen.mode, gen.beam_size, gen.max_new_tokens, gen.length_penalty) == ("beam", 3, 50, -1.0)

    def test_caption_and_rationale(self):
        for tag in ("caption", "rationale"):
            gen = preset(tag)
            assert (gen.mode, gen.beam_size, gen.max_new_tokens, gen.length_penalty) == ("beam", 3, 128, 1.0)

    def test_consistency_path(self):
        gen = preset("consistency-path")
        assert (gen.mode, gen.temperature, gen.max_new_tokens, gen.length_penalty) == ("sample", 0.7, 128, 1.0)

    def test_unknown(self):
        with pytest.raises(UnknownPreset):
            preset("surprise")

    def test_fresh_instances(self):
        a = preset("answer")
        a.max_new_tokens = 99
        assert preset("answer").max_new_tokens == 10


class TestScriptedBackend:
    def test_script_hit_and_shape(self):
        backend = ScriptedBackend(script={"p": "out"})
        response = backend.complete(BackendRequest(prompt="p", gen=GenerationConfig(n=3, mode="sample", temperature=0.7)))
        assert response.texts == ["out", "out", "out"]

    def test_default_fallback_deterministic(self):
        backend = ScriptedBackend()
        req = make_request()
        assert backend.complete(req).texts == backend.complete(req).texts


class TestReplay:
    def test_record_then_replay_identical(self, tmp_path):
        store = tmp_path / "store.jsonl"
        inner = ScriptedBackend(script={"p": ["alpha", "beta"]})
        recorder = ReplayBackend("record", store, inner=inner)
        req = BackendRequest(prompt="p", gen=GenerationConfig(n=2, mode="sample", temperature=0.5))
        recorded = recorder.complete(req)
        replay = ReplayBackend("replay", store)
        replayed = replay.complete(req)
        assert replayed.texts == recorded.texts

    def test_modified_prompt_misses(self, tmp_path):
        store = tmp_path / "store.jsonl"
        recorder = ReplayBackend("record", store, inner=ScriptedBackend(script={"p": "x"}))
        recorder.complete(BackendRequest(prompt="p", gen=GenerationConfig()))
        replay = ReplayBackend("replay", store)
        with pytest.raises(ReplayMiss):
            replay.complete(BackendRequest(prompt="p changed", gen=GenerationConfig()))

    def test_passthrough_leaves_store_untouched(self, tmp_path):
        store = tmp_path / "store.jsonl"
        backend = ReplayBackend("passthrough", store, inner=ScriptedBackend(script={"p": "x"}))
        backend.complete(BackendRequest(prompt="p", gen=GenerationConfig()))
        assert not store.exists()

    def test_replay_mode_requires_no_inner(self, tmp_path):
        with pytest.raises(ValueError):
            ReplayBackend("record", tmp_path / "s.jsonl")

    def test_store_digest_stable(self, tmp_path):
        store = tmp_path / "store.jsonl"
        recorder = ReplayBackend("record", store, inner=ScriptedBackend(script={"p": "x"}))
        recorder.complete(BackendRequest(prompt="p", gen=GenerationConfig()))
        a = ReplayBackend("replay", store).store_digest()
        b = ReplayBackend("replay", store).store_digest()
        assert a == b


class TestCompleteBatch:
    def test_order_preserved(self):
        backend = ScriptedBackend(fallback=lambda req: [req.prompt.split()[-1]])
        reqs = [make_request(prompt=f"item {i}") for i in range(10)]
        results = complete_batch(backend, reqs, max_in_flight=2)
        assert [r.texts[0] for r in results] == [str(i) for i in range(10)]

    def test_limit_one_matches_sequential(self):
        backend = ScriptedBackend(fallback=lambda req: [req.prompt])
        reqs = [make_request(prompt=f"r{i}") for i in range(5)]
        batch = complete_batch(backend, reqs, max_in_flight=1)
        loop = [backend.complete(r) for r in reqs]
        assert [r.texts for r in batch] == [r.texts for r in loop]

    def test_error_slots_do_not_abort(self):
        class Flaky:
            def complete(self, req):
                if req.prompt == "bad":
                    raise BackendError("request", "boom")
                return BackendResponse(texts=["ok"])

        reqs = [make_request(prompt=p) for p in ["a", "bad", "c"]]
        results = complete_batch(Flaky(), reqs, max_in_flight=3)
        assert isinstance(results[1], BackendError)
        assert results[0].texts == ["ok"] and results[2].texts == ["ok"]

    def test_bad_limit(self):
        with pytest.raises(ValueError):
            complete_batch(ScriptedBackend(), [], max_in_flight=0)


class _StubHandler(BaseHTTPRequestHandler):
    server_version = "stub"
    behaviors = {}
    requests_seen = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length).decode("utf-8"))
        type(self).requests_seen.append(body)
        behavior = type(self).behaviors.get("next", "ok")
        if behavior == "fail-once":
            type(self).behaviors["next"] = "ok"
            self.send_response(500)
            self.end_headers()
            return
        if behavior == "bad-request":
            self.send_response(400)
            self.end_headers()
            self.wfile.write(b'{"error": "no"}')
            return
        if behavior == "reject-beam":
            if "num_beams" in body:
                self.send_response(400)
                self.end_headers()
                self.wfile.write(b'{"error": "unknown field num_beams"}')
                return
        if behavior == "garbage":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"not json at all")
            return
        n = body.get("n", 1)
        payload = {"choices": [{"message": {"content": f"reply {i} "}} for i in range(n)]}
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(json.dumps(payload).encode("utf-8"))


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.behaviors = {}
    _StubHandler.requests_seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


class TestHTTPBackend:
    def test_n_texts_and_trimming(self, stub_server):
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        req = BackendRequest(prompt="p", gen=GenerationConfig(n=3, mode="sample", temperature=0.7))
        response = backend.complete(req)
        assert response.texts == ["reply 0", "reply 1", "reply 2"]

    def test_retries_transient_then_succeeds(self, stub_server):
        _StubHandler.behaviors["next"] = "fail-once"
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        response = backend.complete(make_request())
        assert response.texts == ["reply 0"]

    def test_bad_request_no_retry(self, stub_server):
        _StubHandler.behaviors["next"] = "bad-request"
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        before = len(_StubHandler.requests_seen)
        with pytest.raises(BackendError) as err:
            backend.complete(make_request())
        assert err.value.kind == "request"
        assert len(_StubHandler.requests_seen) == before + 1

    def test_protocol_error(self, stub_server):
        _StubHandler.behaviors["next"] = "garbage"
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        with pytest.raises(BackendError) as err:
            backend.complete(make_request())
        assert err.value.kind == "protocol"

    def test_beam_extensions_degrade_to_greedy(self, stub_server):
        _StubHandler.behaviors["next"] = "reject-beam"
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        response = backend.complete(
            BackendRequest(prompt="p", gen=GenerationConfig(mode="beam", beam_size=3))
        )
        assert response.texts == ["reply 0"]
        assert "num_beams" in _StubHandler.requests_seen[-2]
        assert "num_beams" not in _StubHandler.requests_seen[-1]

    def test_image_attached_when_present(self, stub_server):
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        backend.complete(
            BackendRequest(prompt="p", gen=GenerationConfig(), image_ref="http://img/1.png")
        )
        content = _StubHandler.requests_seen[-1]["messages"][0]["content"]
        assert any(part.get("type") == "image_url" for part in content)

    def test_omit_image_never_puts_image_on_wire(self, stub_server):
        backend = HTTPBackend(stub_server, model="m", backoff=0.0)
        backend.complete(
            BackendRequest(
                prompt="p", gen=GenerationConfig(omit_image=True), image_ref="http://img/1.png"
            )
        )
        body = json.dumps(_StubHandler.requests_seen[-1])
        assert "img/1.png" not in body
        assert "image_url" not in body

    def test_exhausted_retries_is_transport_error(self):
        backend = HTTPBackend("http://127.0.0.1:1", model="m", max_retries=1, backoff=0.0)
        with pytest.raises(BackendError) as err:
            backend.complete(make_request())
        assert err.value.kind == "transport"
