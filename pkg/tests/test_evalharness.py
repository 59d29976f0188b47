import json
import threading

import numpy as np
import pytest

from refverify.backends.base import Proposal, VlmReply, VlmRequest, request_key
from refverify.backends.scripted import FixtureDetector, Rule, ScriptedVlm
from refverify.backends.synthetic import SyntheticOracleParams, SyntheticVlm, SyntheticWorld
from refverify.cache import CachedVlm, ResponseCache, cache_get_or_call
from refverify.errors import ConfigError, TransportError
from refverify.evalharness import (
    EvalItem,
    build_report,
    ingest_dataset,
    refcoco_to_jsonl,
    resolve_variant,
    run_eval,
    write_report,
)
from refverify.geometry import BoundingBox, acc_at, iou
from refverify.render import RasterImage, save_png

from conftest import box


class EchoVlm:
    model_id = "echo"

    def __init__(self, text="True"):
        self.text = text
        self.calls = 0
        self._lock = threading.Lock()

    def query(self, request):
        with self._lock:
            self.calls += 1
        return VlmReply(self.text)


REQ = VlmRequest("is it?", (RasterImage.blank(3, 3),), 0.0, "echo")


# -- ingestion ---------------------------------------------------------------------


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_ingest_xywh(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"id": "a1", "image": "img.png", "expr": "the left dog", "box": [10, 20, 30, 40]}])
    [item] = ingest_dataset(path)
    assert item.gt_box == BoundingBox(10, 20, 40, 60)
    assert item.image_path == str(tmp_path / "img.png")


def test_ingest_xyxy_identity(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"id": "a1", "image": "/abs/img.png", "expr": "x", "box": [10, 20, 40, 60]}])
    [item] = ingest_dataset(path, "xyxy")
    assert item.gt_box == BoundingBox(10, 20, 40, 60) and item.image_path == "/abs/img.png"
    path2 = write_jsonl(
        tmp_path / "e.jsonl", [{"id": "a1", "image": "i.png", "expr": "x", "box": [10, 20, 40, 60], "box_format": "xyxy"}]
    )
    assert ingest_dataset(path2)[0].gt_box == item.gt_box


def test_ingest_empty_file(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    assert ingest_dataset(tmp_path / "empty.jsonl") == []


def test_ingest_errors(tmp_path):
    good = {"id": "a", "image": "i.png", "expr": "x", "box": [0, 0, 1, 1]}
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(ConfigError, match=":2:"):
        ingest_dataset(p)
    write_jsonl(p, [good, good])
    with pytest.raises(ConfigError, match="duplicate"):
        ingest_dataset(p)
    write_jsonl(p, [dict(good, box=[0, 0, 1])])
    with pytest.raises(ConfigError, match=":1:"):
        ingest_dataset(p)
    write_jsonl(p, [dict(good, expr="")])
    with pytest.raises(ConfigError):
        ingest_dataset(p)
    with pytest.raises(ConfigError):
        ingest_dataset(tmp_path / "missing.jsonl")


# -- cache -----------------------------------------------------------------------


def test_cache_hit_on_second_request(tmp_path):
    cache, backend = ResponseCache(tmp_path), EchoVlm()
    first = cache_get_or_call(cache, REQ, backend)
    second = cache_get_or_call(cache, REQ, backend)
    assert (first.cached, second.cached) == (False, True)
    assert first.text == second.text and backend.calls == 1
    key = request_key(REQ)
    path = cache.path_for(key)
    assert path.relative_to(tmp_path).parts[:2] == (key[:2], key[2:4])
    entry = json.loads(path.read_text())
    assert entry["model_id"] == "echo" and entry["reply_text"] == "True" and "created_at" in entry


def test_cache_bypassed_at_temperature_one(tmp_path):
    cache, backend = ResponseCache(tmp_path), EchoVlm()
    hot = VlmRequest("is it?", (), 1.0, "echo")
    assert [cache_get_or_call(cache, hot, backend).cached for _ in range(2)] == [False, False]
    assert backend.calls == 2
    assert not any(tmp_path.rglob("*.json"))


def test_truncated_entry_is_a_miss(tmp_path, caplog):
    cache, backend = ResponseCache(tmp_path), EchoVlm()
    cache_get_or_call(cache, REQ, backend)
    path = cache.path_for(request_key(REQ))
    path.write_text(path.read_text()[:15])
    reply = cache_get_or_call(cache, REQ, backend)
    assert reply.cached is False and backend.calls == 2
    assert "corrupt" in caplog.text
    assert json.loads(path.read_text())["reply_text"] == "True"
    assert cache_get_or_call(cache, REQ, backend).cached is True


def test_cache_concurrent_writers(tmp_path):
    cache, backend = ResponseCache(tmp_path), EchoVlm()
    threads = [threading.Thread(target=cache_get_or_call, args=(cache, REQ, backend)) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache_get_or_call(cache, REQ, backend).cached
    assert not list(tmp_path.rglob(".tmp-*"))


def test_cached_vlm_wrapper(tmp_path):
    vlm = CachedVlm(EchoVlm("False"), ResponseCache(tmp_path))
    assert vlm.model_id == "echo"
    assert [vlm.query(REQ).cached for _ in range(2)] == [False, True]


# -- run_eval --------------------------------------------------------------------


GT = box(0, 0, 10, 10)
PRED = {"i1": box(0, 0, 10, 10), "i2": box(0, 0, 10, 6), "i3": box(0, 0, 10, 3)}  # iou 1.0, 0.6, 0.3


@pytest.fixture
def three_items(tmp_path):
    items = []
    for name in PRED:
        save_png(RasterImage.blank(20, 20), tmp_path / f"{name}.png")
        items.append(EvalItem(name, str(tmp_path / f"{name}.png"), "the thing", GT))
    det = FixtureDetector(
        {f"{n}.png": {"thing": [[b.x_min, b.y_min, b.width, b.height]]} for n, b in PRED.items()}
    )
    return items, det


def thing_vlm(verdict="True", select="1"):
    return ScriptedVlm([Rule(["thing"], purpose="class"), Rule([verdict], purpose="verify"), Rule([select], purpose="select")])


def test_run_eval_counts_hits(three_items):
    items, det = three_items
    report = run_eval(items, "verification_first", det, thing_vlm())
    assert [round(r.iou, 6) for r in report.per_item] == [1.0, 0.6, 0.3]
    assert [r.hit for r in report.per_item] == [True, True, False]
    assert report.acc_at_05 == pytest.approx(2 / 3)
    assert report.path_histogram == {"UniqueTrue": 3, "TieBreak": 0, "Fallback": 0, "AbstainNone": 0, "NoProposals": 0}
    assert report.vlm_call_total == 6


def test_run_eval_all_abstain(three_items):
    items, det = three_items
    report = run_eval(items, "verification_first", det, thing_vlm("False", "none"))
    assert report.acc_at_05 == 0 and report.abstain_count == 3
    assert report.path_histogram["AbstainNone"] == 3


def test_run_eval_consistency(three_items):
    items, det = three_items
    vlm = thing_vlm("False", "1")
    report = run_eval(items, "selection_mv3", det, vlm)
    assert sum(report.path_histogram.values()) == report.n_items
    assert report.vlm_call_total == len(vlm.calls) == 3 * 4
    pairs = [(None if r.box is None else BoundingBox.from_list(r.box), it.gt_box) for r, it in zip(report.per_item, items)]
    assert report.acc_at_05 == acc_at(pairs)


def test_run_eval_failures_are_misses(three_items, tmp_path):
    items, det = three_items

    class Flaky(ScriptedVlm):
        def query(self, request):
            if request.images and request.images[0].name == "i2.png":
                raise TransportError("connection reset")
            return super().query(request)

    missing = EvalItem("gone", str(tmp_path / "gone.png"), "x", GT)
    vlm = Flaky(thing_vlm().rules)
    report = run_eval(items + [missing], "verification_first", det, vlm)
    assert report.n_items == 4 and report.path_histogram["Error"] == 2
    assert sum(report.path_histogram.values()) == 4
    bad = {r.item_id: r for r in report.per_item if r.error}
    assert "TransportError" in bad["i2"].error and bad["i2"].vlm_calls == 2
    assert report.acc_at_05 == pytest.approx(1 / 4)


def test_run_eval_empty_and_bad_variant(three_items):
    items, det = three_items
    with pytest.raises(ConfigError):
        run_eval([], "verification_first", det, thing_vlm())
    with pytest.raises(ConfigError):
        run_eval(items, "beam_search", det, thing_vlm())
    assert resolve_variant("select-mv3") == "selection_mv3"


def test_warm_cache_report_is_identical(three_items, tmp_path):
    items, det = three_items
    cache = ResponseCache(tmp_path / "cache")
    cold = run_eval(items, "verification_first", det, thing_vlm(), cache=cache)
    offline = ScriptedVlm([])  # any uncached call would raise
    warm = run_eval(items, "verification_first", det, offline, cache=cache)
    assert warm.to_json() == cold.to_json()
    assert offline.calls == []


def test_parallel_items_same_report():
    world = SyntheticWorld.build(60, seed=4)
    items = [EvalItem(n, n, "the target", s.target_box) for n, s in world.scenes.items()]
    params = SyntheticOracleParams(0.8, 0.3, 0.6, seed=2)
    serial = run_eval(items, "verification_first", world, SyntheticVlm(params, world), image_loader=world.image)
    par = run_eval(items, "verification_first", world, SyntheticVlm(params, world), workers=8, image_loader=world.image)
    assert serial.to_json() == par.to_json()


def test_write_report(tmp_path, three_items):
    items, det = three_items
    report = run_eval(items, "verification_first", det, thing_vlm())
    js, txt = write_report(report, tmp_path / "r.json")
    assert json.loads(js.read_text())["acc_at_05"] == pytest.approx(2 / 3)
    assert "ACC@0.5:        66.67% (2/3)" in txt.read_text()


def test_refcoco_conversion():
    import io

    refs = [
        {"ref_id": 5, "ann_id": 9, "image_id": 1, "split": "val", "sentences": [{"sent_id": 1, "sent": "left man"}, {"sent_id": 2, "sent": "man"}]},
        {"ref_id": 6, "ann_id": 9, "image_id": 1, "split": "train", "sentences": [{"sent_id": 3, "sent": "x"}]},
    ]
    instances = {"images": [{"id": 1, "file_name": "COCO_1.jpg"}], "annotations": [{"id": 9, "bbox": [1, 2, 3, 4]}]}
    buf = io.StringIO()
    assert refcoco_to_jsonl(refs, instances, buf, split="val", image_dir="imgs") == 2
    first = json.loads(buf.getvalue().splitlines()[0])
    assert first == {"id": "5-1", "image": "imgs/COCO_1.jpg", "expr": "left man", "box": [1, 2, 3, 4], "box_format": "xywh"}
