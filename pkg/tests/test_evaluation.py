import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from psearch.errors import ProtocolError
from psearch.evaluation import (
    GalleryScene,
    ProbeReport,
    ProbeRow,
    SearchProtocol,
    SearchQuery,
    ap_small,
    detection_ap_recall,
    precision_envelope_ap,
    search_map_top1,
    small_box_mask,
)


def box(x, y, w, h):
    return [x, y, x + w, y + h]


def micro_detection(seed):
    rng = np.random.default_rng(seed)
    preds, gts = [], []
    for _ in range(int(rng.integers(1, 5))):
        n = int(rng.integers(0, 5))
        g = [box(*rng.uniform(0, 80, 2), *rng.uniform(4, 30, 2)) for _ in range(n)]
        p = []
        for b in g:
            if rng.random() < 0.7:
                p.append(list(np.asarray(b) + rng.normal(0, 2, 4)))
        for _ in range(int(rng.integers(0, 3))):
            p.append(box(*rng.uniform(0, 80, 2), *rng.uniform(4, 30, 2)))
        scores = np.round(rng.random(len(p)), 1)  # coarse scores create ties
        gts.append(np.asarray(g).reshape(-1, 4))
        preds.append((np.asarray(p).reshape(-1, 4), scores))
    return preds, gts


def oracle_inputs(preds, gts):
    return [([list(b) for b in p], list(s)) for p, s in preds], [[list(b) for b in g] for g in gts]


@pytest.mark.parametrize("seed", range(50))
def test_detection_ap_matches_exhaustive_oracle(seed):
    preds, gts = micro_detection(seed)
    ap, rec = detection_ap_recall(preds, gts)
    want_ap, want_rec = oracles.detection_ap(*oracle_inputs(preds, gts))
    assert ap == pytest.approx(want_ap, abs=1e-12)
    assert rec == pytest.approx(want_rec, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_ap_small_matches_oracle(seed):
    preds, gts = micro_detection(seed + 1000)
    if sum(len(g) for g in gts) < 4:
        with pytest.raises(ProtocolError):
            ap_small(preds, gts)
        return
    areas = np.concatenate([(g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1]) for g in gts])
    limit = np.percentile(areas, 25)
    small = [[(b[2] - b[0]) * (b[3] - b[1]) <= limit for b in g] for g in gts]
    want, _ = oracles.detection_ap(*oracle_inputs(preds, gts), small=small)
    assert ap_small(preds, gts) == pytest.approx(want, abs=1e-12)


def test_detection_closed_forms():
    gts = [np.array([box(0, 0, 10, 20), box(30, 0, 10, 20)]), np.array([box(5, 5, 8, 8)])]
    perfect = [(g, np.linspace(0.9, 0.5, len(g))) for g in gts]
    assert detection_ap_recall(perfect, gts) == (1.0, 1.0)
    gts4 = gts + [np.array([box(50, 50, 9, 9)])]
    perfect4 = perfect + [(gts4[-1], np.array([0.3]))]
    assert ap_small(perfect4, gts4) == 1.0
    empty = [(np.zeros((0, 4)), np.zeros(0)) for _ in gts]
    assert detection_ap_recall(empty, gts) == (0.0, 0.0)


def test_hit_miss_hit_example():
    gts = [np.array([box(0, 0, 10, 10), box(20, 0, 10, 10), box(40, 0, 10, 10)])]
    preds = [(np.array([box(0, 0, 10, 10), box(70, 70, 5, 5), box(20, 0, 10, 10)]), np.array([0.9, 0.8, 0.7]))]
    ap, rec = detection_ap_recall(preds, gts)
    # envelope: precision 1 up to recall 1/3, then 2/3 up to recall 2/3
    assert ap == pytest.approx(1 / 3 * 1 + 1 / 3 * 2 / 3, abs=1e-15)
    assert rec == pytest.approx(2 / 3)
    assert ap == oracles.detection_ap(*oracle_inputs(preds, gts))[0]


@given(st.integers(0, 10_000), st.sampled_from(["exp", "cube", "affine", "log"]))
def test_ap_invariant_under_monotone_score_maps(seed, kind):
    preds, gts = micro_detection(seed)
    f = {"exp": np.exp, "cube": lambda s: s**3 + s, "affine": lambda s: 7 * s - 3,
         "log": lambda s: np.log(s + 1e-3)}[kind]
    mapped = [(b, f(np.asarray(s, dtype=np.float64))) for b, s in preds]
    assert detection_ap_recall(mapped, gts) == detection_ap_recall(preds, gts)


def test_ap_small_all_equal_areas_is_ap():
    rng = np.random.default_rng(0)
    gts = [np.array([box(*rng.integers(0, 50, 2), 10, 20) for _ in range(3)], float) for _ in range(3)]
    preds = [(np.concatenate([g[:2] + 1, [box(90, 90, 10, 20)]]), rng.random(3)) for g in gts]
    mask, _ = small_box_mask(gts)
    assert all(m.all() for m in mask)
    assert ap_small(preds, gts) == detection_ap_recall(preds, gts)[0]


def test_ap_small_below_ap_when_small_boxes_missed():
    gts = [np.array([box(0, 0, 40, 80), box(50, 0, 40, 80), box(0, 90, 6, 6)]),
           np.array([box(0, 0, 40, 80), box(60, 60, 5, 5)])]
    preds = [(gts[0][:2], np.array([0.9, 0.8])), (np.array([gts[1][0], box(60, 60, 5, 5)]), np.array([0.7, 0.2]))]
    small = ap_small(preds, gts)
    full = detection_ap_recall(preds, gts)[0]
    assert small < full
    sm = [[(b[2] - b[0]) * (b[3] - b[1]) <= np.percentile([3200] * 3 + [36, 25], 25) for b in g] for g in gts]
    assert small == pytest.approx(oracles.detection_ap(*oracle_inputs(preds, gts), small=sm)[0], abs=1e-15)


def test_ap_small_needs_four_boxes():
    gts = [np.array([box(0, 0, 4, 4), box(10, 10, 4, 4), box(20, 20, 4, 4)])]
    with pytest.raises(ProtocolError):
        ap_small([(gts[0], np.ones(3))], gts)


def test_envelope_helper_bounds():
    assert precision_envelope_ap(np.array([]), 3) == 0.0
    assert precision_envelope_ap(np.array([1.0, 1.0]), 2) == 1.0


# -- person search --------------------------------------------------------------

def scene(boxes, embs, gt_boxes, gt_ids):
    return GalleryScene(np.asarray(boxes, float).reshape(-1, 4), np.asarray(embs, float),
                        np.asarray(gt_boxes, float).reshape(-1, 4), np.asarray(gt_ids))


def test_single_relevant_closed_forms():
    q = SearchQuery(np.array([1.0, 0.0]), 7, "q")
    b = box(0, 0, 10, 20)
    scenes = {"a": scene([b], [[1.0, 0.0]], [b], [7])}
    assert tuple(search_map_top1([q], scenes, SearchProtocol([["a"]]))) == (1.0, 1.0)
    scenes = {"a": scene([b, box(30, 0, 10, 20)], [[0.6, 0.8], [1.0, 0.0]], [b, box(30, 0, 10, 20)], [7, 3])}
    assert tuple(search_map_top1([q], scenes, SearchProtocol([["a"]]))) == (0.5, 0.0)
    for rank in range(1, 6):
        boxes = [box(20 * k, 0, 10, 20) for k in range(5)]
        sims = [[np.cos(0.1 * k), np.sin(0.1 * k)] for k in range(5)]
        ids = [7 if k == rank - 1 else 1 for k in range(5)]
        res = search_map_top1([q], {"a": scene(boxes, sims, boxes, ids)}, SearchProtocol([["a"]]))
        assert res.mAP == pytest.approx(1 / rank, abs=1e-15)


def micro_search(seed, n_queries=5, n_items=20):
    rng = np.random.default_rng(seed)
    n_scenes = 5
    scenes, dets = {}, []
    for s in range(n_scenes):
        k = n_items // n_scenes
        gt = [box(25 * j, rng.uniform(0, 10), 15, 30) for j in range(k)]
        ids = rng.integers(0, 4, k)
        boxes = [list(np.asarray(b) + rng.normal(0, 3, 4)) if rng.random() < 0.8
                 else box(200, 200, 10, 10) for b in gt]
        emb = rng.normal(size=(k, 6))
        emb = np.round(emb / np.linalg.norm(emb, axis=1, keepdims=True), 2)  # ties in similarity
        scenes[f"g{s}"] = scene(boxes, emb, gt, ids)
    queries, galleries = [], []
    for _ in range(n_queries):
        e = rng.normal(size=6)
        queries.append(SearchQuery(e / np.linalg.norm(e), int(rng.integers(0, 4)), "x"))
        galleries.append(sorted(rng.choice(list(scenes), size=int(rng.integers(2, 6)), replace=False)))
    return queries, scenes, galleries


@pytest.mark.parametrize("seed", range(50))
def test_search_matches_exhaustive_oracle(seed):
    queries, scenes, galleries = micro_search(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = search_map_top1(queries, scenes, SearchProtocol(galleries))
    aps, tops = [], []
    for q, g in zip(queries, galleries):
        want = oracles.search_ap(q.embedding, q.identity,
                                 [(scenes[s].boxes, scenes[s].embeddings, scenes[s].gt_boxes, scenes[s].gt_ids)
                                  for s in g])
        if want is not None:
            aps.append(want[0])
            tops.append(want[1])
    assert len(res.aps) == len(aps)
    assert res.aps == pytest.approx(aps, abs=1e-15)
    if aps:
        assert res.mAP == pytest.approx(float(np.mean(aps)), abs=1e-15)
        assert res.top1 == pytest.approx(float(np.mean(tops)), abs=1e-15)
    assert 0 <= res.mAP <= 1 and 0 <= res.top1 <= 1


def test_search_excludes_empty_galleries_with_warning():
    q = SearchQuery(np.array([1.0, 0.0]), 1, "q")
    b = box(0, 0, 10, 20)
    scenes = {"a": scene([b], [[1.0, 0.0]], [b], [1]), "b": scene([b], [[1.0, 0.0]], [b], [2])}
    with pytest.warns(RuntimeWarning):
        res = search_map_top1([q, q, q], scenes, SearchProtocol([["a"], [], ["b"]]))
    assert res.excluded == [1, 2] and res.aps == [1.0]


def test_search_tie_break_is_gallery_order():
    q = SearchQuery(np.array([1.0, 0.0]), 1, "q")
    b1, b2 = box(0, 0, 10, 20), box(30, 0, 10, 20)
    scenes = {"a": scene([b1, b2], [[1.0, 0.0], [1.0, 0.0]], [b1, b2], [2, 1])}
    res = search_map_top1([q], scenes, SearchProtocol([["a"]]))
    assert res.top1 == 0.0 and res.mAP == 0.5


# -- probe reports --------------------------------------------------------------

def test_probe_report_formats():
    rep = ProbeReport([ProbeRow("Up-stage Level3 ViT0 key", 0.981, 0.948, 0.5, 0.25),
                       ProbeRow("bad", error="layer not in catalog")])
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t") == ["Layer", "Recall", "AP", "mAP", "Top-1", "error"]
    assert lines[1].split("\t")[1:5] == ["98.1", "94.8", "50.0", "25.0"]
    assert lines[2].split("\t")[1:] == ["-", "-", "-", "-", "layer not in catalog"]
    data = json.loads(rep.to_json())
    assert data["kind"] == "layer" and data["rows"][0]["det_ap"] == 0.948
    assert rep.row("bad").error
