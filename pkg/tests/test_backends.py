import json
import threading

import httpx
import numpy as np
import pytest

from refverify.backends.base import (
    NONE_CHOICE,
    Proposal,
    VlmReply,
    VlmRequest,
    format_truefalse,
    parse_index,
    parse_truefalse,
    request_key,
)
from refverify.backends.http import (
    HttpDetector,
    OpenAICompatibleVlm,
    extract_message_text,
    parse_detections,
    replay_transport,
)
from refverify.backends.scripted import FixtureDetector, Rule, ScriptedVlm
from refverify.errors import ProtocolError, TransportError
from refverify.geometry import BoundingBox
from refverify.render import RasterImage

from conftest import FIXTURES, GOLDEN, box

TINY = RasterImage(np.arange(12, dtype=np.uint8).reshape(2, 2, 3), "tiny.png")
VERIFY_REQ = VlmRequest("Does the description apply? Answer True or False.", (TINY,), 0.0, "gpt-4o", "verify")


# -- parsers -----------------------------------------------------------------


@pytest.mark.parametrize(
    "text, expected",
    [
        ("True", True),
        ("false.", False),
        ("The box does not match. False", False),
        ("**Yes**, it does.", True),
        ("No", False),
        ("`TRUE`", True),
        ("maybe", None),
        ("", None),
        ("Truely not", None),
    ],
)
def test_parse_truefalse(text, expected):
    assert parse_truefalse(VlmReply(text)) is expected


@pytest.mark.parametrize("value", [True, False])
def test_truefalse_round_trip(value):
    assert parse_truefalse(format_truefalse(value)) is value


@pytest.mark.parametrize(
    "text, n, expected",
    [
        ("2", 3, 1),
        ("none", 5, NONE_CHOICE),
        ("None of the boxes match.", 2, NONE_CHOICE),
        ("Box 7", 3, None),
        ("box 12", 4, None),
        ("Box 3 fits best", 3, 2),
        ("0", 3, None),
        ("I cannot tell", 3, None),
        ("nonempty", 3, None),
    ],
)
def test_parse_index(text, n, expected):
    assert parse_index(VlmReply(text), n) == expected


def test_parse_index_needs_positive_n():
    with pytest.raises(ValueError):
        parse_index("1", 0)


# -- data types ----------------------------------------------------------------


def test_proposal_invariants():
    with pytest.raises(ValueError):
        Proposal(box(0, 0, 1, 1), "")
    with pytest.raises(ValueError):
        Proposal(box(0, 0, 1, 1), "dog", 1.5)


def test_request_invariants():
    with pytest.raises(ValueError):
        VlmRequest("")
    with pytest.raises(ValueError):
        VlmRequest("x", (TINY, TINY))
    with pytest.raises(ValueError):
        VlmRequest("x", temperature=-1)


def test_request_key_ignores_local_annotations():
    a = VlmRequest("p", (TINY,), 0.0, "m", "verify", (box(0, 0, 1, 1),))
    b = VlmRequest("p", (TINY,), 0.0, "m", "select", ())
    assert request_key(a) == request_key(b)
    assert request_key(a) != request_key(VlmRequest("p", (TINY,), 1.0, "m"))
    assert request_key(a) != request_key(VlmRequest("p", (), 0.0, "m"))


# -- HTTP VLM ------------------------------------------------------------------


def make_vlm(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    kw.setdefault("sleep", lambda s: None)
    return OpenAICompatibleVlm("http://vlm.test/v1", "gpt-4o", client=client, **kw)


def test_vlm_request_serialization_is_golden():
    vlm = OpenAICompatibleVlm("http://vlm.test/v1", "gpt-4o", api_key="secret")
    body = vlm.serialize(VERIFY_REQ)
    assert body == (GOLDEN / "vlm_request.json").read_bytes()
    assert body == vlm.serialize(VERIFY_REQ)
    payload = json.loads(body)
    parts = payload["messages"][0]["content"]
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_vlm_replays_recorded_fixture():
    client = httpx.Client(transport=replay_transport(FIXTURES / "wire"))
    vlm = OpenAICompatibleVlm("http://vlm.test/v1", "gpt-4o", client=client)
    reply = vlm.query(VERIFY_REQ)
    assert reply == VlmReply("True.", cached=False)
    assert parse_truefalse(reply) is True


def test_vlm_sends_bearer_token():
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["url"] = str(request.url)
        return httpx.Response(200, json={"choices": [{"message": {"content": "False"}}]})

    vlm = make_vlm(handler, api_key="sk-test")
    assert vlm.query(VERIFY_REQ).text == "False"
    assert seen == {"auth": "Bearer sk-test", "url": "http://vlm.test/v1/chat/completions"}


def test_vlm_retries_transport_errors_with_backoff():
    attempts = []
    sleeps = []

    def handler(request):
        attempts.append(1)
        if len(attempts) < 3:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json={"choices": [{"message": {"content": "True"}}]})

    vlm = make_vlm(handler, sleep=sleeps.append)
    assert vlm.query(VERIFY_REQ).text == "True"
    assert len(attempts) == 3
    assert sleeps == [0.5, 2.0]


def test_vlm_gives_up_after_two_retries():
    attempts = []

    def handler(request):
        attempts.append(1)
        raise httpx.ReadTimeout("slow")

    with pytest.raises(TransportError):
        make_vlm(handler).query(VERIFY_REQ)
    assert len(attempts) == 3


def test_vlm_protocol_error_not_retried():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(429, text="rate limited")

    with pytest.raises(ProtocolError) as info:
        make_vlm(handler).query(VERIFY_REQ)
    assert info.value.status == 429 and "rate limited" in info.value.body
    assert len(attempts) == 1


@pytest.mark.parametrize("body", [{"choices": []}, {"nope": 1}, [1, 2]])
def test_malformed_completion(body):
    with pytest.raises(ProtocolError):
        make_vlm(lambda r: httpx.Response(200, json=body)).query(VERIFY_REQ)


def test_non_json_body():
    with pytest.raises(ProtocolError):
        make_vlm(lambda r: httpx.Response(200, text="<html>")).query(VERIFY_REQ)


def test_content_parts_are_joined():
    data = {"choices": [{"message": {"content": [{"type": "text", "text": "Tr"}, {"type": "text", "text": "ue"}]}}]}
    assert extract_message_text(data) == "True"


def test_concurrency_cap():
    active = []
    peak = []
    lock = threading.Lock()
    gate = threading.Event()

    def handler(request):
        with lock:
            active.append(1)
            peak.append(len(active))
        gate.wait(0.05)
        with lock:
            active.pop()
        return httpx.Response(200, json={"choices": [{"message": {"content": "True"}}]})

    vlm = make_vlm(handler, max_concurrency=2)
    threads = [threading.Thread(target=vlm.query, args=(VERIFY_REQ,)) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert max(peak) <= 2


# -- HTTP detector ---------------------------------------------------------------


def test_detector_request_serialization_is_golden():
    assert HttpDetector("http://det.test").serialize(TINY, "person") == (GOLDEN / "detector_request.json").read_bytes()


def test_detector_replays_recorded_fixture():
    client = httpx.Client(transport=replay_transport(FIXTURES / "wire"))
    det = HttpDetector("http://det.test", client=client)
    props = det.detect(TINY, "person")
    assert [p.box for p in props] == [
        BoundingBox(1, 2, 31, 42),
        BoundingBox(50.5, 10, 70.5, 35.5),
        BoundingBox(0, 0, 5, 5),
    ]
    assert [p.confidence for p in props] == [0.93, 0.61, 0.12]
    assert all(p.class_name == "person" for p in props)


def test_detector_unknown_request_is_protocol_error():
    client = httpx.Client(transport=replay_transport(FIXTURES / "wire"))
    with pytest.raises(ProtocolError):
        HttpDetector("http://det.test", client=client).detect(TINY, "dog")


def test_detector_empty_and_malformed():
    assert parse_detections({"boxes": []}, "cat") == []
    with pytest.raises(ProtocolError):
        parse_detections({"boxes": [{"x": 1}]}, "cat")
    with pytest.raises(ProtocolError):
        parse_detections({"results": []}, "cat")


# -- scripted backends ---------------------------------------------------------


def test_scripted_by_request_hash():
    vlm = ScriptedVlm.by_key({request_key(VERIFY_REQ): "True"})
    assert vlm.query(VERIFY_REQ).text == "True"
    with pytest.raises(ProtocolError):
        vlm.query(VlmRequest("other prompt"))


def test_scripted_replies_in_order_last_repeats():
    vlm = ScriptedVlm([Rule(["maybe", "False"], purpose="verify")])
    req = VlmRequest("q", purpose="verify")
    assert [vlm.query(req).text for _ in range(3)] == ["maybe", "False", "False"]
    assert len(vlm.calls) == 3


def test_scripted_rule_matching():
    b = box(1, 2, 3, 4)
    vlm = ScriptedVlm(
        [
            {"purpose": "verify", "regions": [[1, 2, 3, 4]], "reply": "True"},
            {"purpose": "verify", "replies": ["False"]},
            {"prompt_contains": "class", "replies": ["dog"]},
        ]
    )
    assert vlm.query(VlmRequest("x", purpose="verify", regions=(b,))).text == "True"
    assert vlm.query(VlmRequest("x", purpose="verify", regions=(box(0, 0, 1, 1),))).text == "False"
    assert vlm.query(VlmRequest("which class?")).text == "dog"


def test_fixture_detector_echo():
    det = FixtureDetector({"img.png": {"person": [[10, 20, 30, 40, 0.9], {"x": 0, "y": 0, "w": 2, "h": 2}]}})
    img = RasterImage.blank(4, 4, name="img.png")
    props = det.detect(img, "person")
    assert [p.box for p in props] == [BoundingBox(10, 20, 40, 60), BoundingBox(0, 0, 2, 2)]
    assert props[0].confidence == 0.9 and props[1].confidence == 1.0
    assert det.detect(img, "giraffe") == []
    assert det.detect(RasterImage.blank(4, 4, name="other.png"), "person") == []
