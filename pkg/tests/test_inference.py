import base64
import json

import httpx
import pytest

from sitewarden.errors import (
    BackendError,
    BackendUnreachable,
    CassetteMiss,
    ImageNotFound,
    InvalidRequest,
    ModelNotFound,
    ScriptExhausted,
)
from sitewarden.inference import (
    ChatMessage,
    ChatRequest,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    chat,
    chat_with_image,
    load_cassette,
    record_cassette,
    request_key,
    resolve_base_url,
    text_request,
    wire_payload,
)


def req(text="hello", images=(), model="m", options=None):
    return ChatRequest(model, (ChatMessage("user", text, images),), options or {"temperature": 0, "seed": 42})


@pytest.fixture
def image(tmp_path):
    p = tmp_path / "img.jpg"
    p.write_bytes(bytes(range(256)) * 4)
    return p


def test_request_validation():
    with pytest.raises(InvalidRequest):
        ChatMessage("robot", "x")
    with pytest.raises(InvalidRequest):
        ChatMessage("user", "")
    with pytest.raises(InvalidRequest):
        ChatRequest("", (ChatMessage("user", "x"),))
    with pytest.raises(InvalidRequest):
        ChatRequest("m", ())


def test_key_stability_and_sensitivity():
    a = req("hi", (b"abc",), options={"seed": 42, "temperature": 0})
    b = req("hi", [b"abc"], options={"temperature": 0, "seed": 42})
    assert request_key(a) == request_key(b)
    assert request_key(a) != request_key(req("hi", (b"abd",)))
    assert request_key(a) != request_key(req("hi ", (b"abc",)))
    assert request_key(a) != request_key(req("hi", (b"abc",), model="n"))
    assert request_key(a) != request_key(req("hi", (b"abc",), options={"temperature": 0, "seed": 43}))


def test_scripted_passthrough_and_exhaustion():
    backend = ScriptedBackend.always("OK")
    assert chat(backend, req()).text == "OK"
    seq = ScriptedBackend([(None, ["one", "two"])])
    assert [seq.chat(req()).text for _ in range(2)] == ["one", "two"]
    with pytest.raises(ScriptExhausted):
        seq.chat(req())
    with pytest.raises(ScriptExhausted):
        ScriptedBackend([("needle", "x")]).chat(req("haystack"))


def test_scripted_error_reply():
    backend = ScriptedBackend([(None, BackendUnreachable("down"))])
    with pytest.raises(BackendUnreachable):
        backend.chat(req())


def test_chat_with_image(image, tmp_path):
    backend = ScriptedBackend.always("a ladder leans on a forklift")
    assert chat_with_image(backend, "vlm", "describe", image) == "a ladder leans on a forklift"
    with pytest.raises(ImageNotFound):
        chat_with_image(backend, "vlm", "describe", tmp_path / "nope.jpg")


def test_wire_payload_shape(image):
    r = req("look", (image.read_bytes(),))
    body = wire_payload(r)
    assert body == {
        "model": "m",
        "messages": [{"role": "user", "content": "look", "images": [base64.b64encode(image.read_bytes()).decode()]}],
        "stream": False,
        "options": {"temperature": 0, "seed": 42},
    }
    assert "images" not in wire_payload(req("plain"))["messages"][0]


def test_live_backend_over_mock_transport(image):
    seen = []

    def handler(request: httpx.Request):
        seen.append((request.url.path, json.loads(request.content)))
        if request.url.path == "/api/embed":
            return httpx.Response(200, json={"embeddings": [[0.5, 0.5]]})
        if json.loads(request.content)["model"] == "missing":
            return httpx.Response(404, json={"error": "model 'missing' not found"})
        return httpx.Response(200, json={"message": {"role": "assistant", "content": "a ladder"}})

    live = LiveBackend("http://server:1234", transport=httpx.MockTransport(handler))
    assert chat_with_image(live, "vlm", "describe", image) == "a ladder"
    path, body = seen[0]
    assert path == "/api/chat" and body["stream"] is False
    assert base64.b64decode(body["messages"][0]["images"][0]) == image.read_bytes()
    with pytest.raises(ModelNotFound):
        live.chat(req(model="missing"))
    assert live.embed("emb", "text") == [0.5, 0.5]


def test_live_backend_unreachable(image):
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    live = LiveBackend("http://server:1234", transport=httpx.MockTransport(handler))
    with pytest.raises(BackendUnreachable):
        chat_with_image(live, "vlm", "describe", image)


def test_live_backend_bad_reply():
    live = LiveBackend("http://s", transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"x": 1})))
    with pytest.raises(BackendError):
        live.chat(req())


def test_base_url_resolution(monkeypatch):
    monkeypatch.setenv("SITEWARDEN_BASE_URL", "http://env:1/")
    assert resolve_base_url() == "http://env:1"
    assert resolve_base_url("http://flag:2") == "http://flag:2"
    monkeypatch.delenv("SITEWARDEN_BASE_URL")
    assert resolve_base_url() == "http://localhost:11434"


def test_record_then_replay(tmp_path):
    cassette = tmp_path / "c.jsonl"
    requests = [req(f"q{i}") for i in range(3)]
    inner = ScriptedBackend([(None, lambda r: "answer to " + r.prompt_text())])
    record_cassette(inner, requests, cassette)
    replay = ReplayBackend(cassette)
    assert [replay.chat(r).text for r in requests] == ["answer to q0", "answer to q1", "answer to q2"]
    records = [json.loads(line) for line in cassette.read_text().splitlines()]
    assert set(records[0]) >= {"key", "request_summary", "response_text", "model_id"}


def test_record_is_one_record_per_key(tmp_path):
    cassette = tmp_path / "c.jsonl"
    rec = RecordingBackend(ScriptedBackend.always("x"), cassette)
    rec.chat(req())
    rec.chat(req())
    assert len(load_cassette(cassette)) == 1
    assert len(cassette.read_text().splitlines()) == 1


def test_replay_miss_on_changed_image_byte(tmp_path):
    cassette = tmp_path / "c.jsonl"
    original = req("describe", (b"\x00\x01\x02",))
    record_cassette(ScriptedBackend.always("scene"), [original], cassette)
    replay = ReplayBackend(cassette)
    assert replay.chat(original).text == "scene"
    with pytest.raises(CassetteMiss):
        replay.chat(req("describe", (b"\x00\x01\x03",)))


def test_replay_empty_cassette(tmp_path):
    cassette = tmp_path / "empty.jsonl"
    cassette.write_text("")
    with pytest.raises(CassetteMiss):
        ReplayBackend(cassette).chat(req())


def test_recorded_errors_replay_as_errors(tmp_path):
    cassette = tmp_path / "c.jsonl"
    failing = ScriptedBackend([("boom", ModelNotFound("no such model")), (None, "fine")])
    record_cassette(failing, [req("boom"), req("ok")], cassette)
    replay = ReplayBackend(cassette)
    with pytest.raises(ModelNotFound):
        replay.chat(req("boom"))
    assert replay.chat(req("ok")).text == "fine"


def test_text_request_default_options():
    assert text_request("m", "x").options == {"temperature": 0, "seed": 42}
