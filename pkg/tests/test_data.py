import json
from dataclasses import replace

import numpy as np
import pytest

from cmr.data import (
    DataError,
    GeneratorSpec,
    SchemaError,
    brute_force_label,
    example_to_record,
    generate,
    label_balance,
    nlvr_label_from_trace,
    read_jsonl,
    vqa_label_from_trace,
    write_jsonl,
)


@pytest.fixture(scope="module")
def nlvr():
    return generate(GeneratorSpec(seed=3, n=600))


@pytest.fixture(scope="module")
def vqa():
    return generate(GeneratorSpec(task="vqa_like", seed=3, n=400, n_text=10))


def test_split_sizes(nlvr):
    assert len(nlvr.train) == 480 and len(nlvr.heldout) == 120
    assert {ex.task for ex in nlvr.train} == {"nlvr_like"}


def test_default_split_is_2000_and_500():
    spec = GeneratorSpec()
    n_held = round(spec.n * spec.heldout_fraction)
    assert (spec.n - n_held, n_held) == (2000, 500)


def test_determinism():
    spec = GeneratorSpec(seed=7, n=50)
    a, b = generate(spec), generate(spec)
    assert a.train == b.train and a.heldout == b.heldout
    assert generate(replace(spec, seed=8)).train != a.train


def test_identical_files(tmp_path):
    spec = GeneratorSpec(seed=7, n=40)
    write_jsonl(tmp_path / "a.jsonl", generate(spec).train)
    write_jsonl(tmp_path / "b.jsonl", generate(spec).train)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_shapes(nlvr, vqa):
    spec = nlvr.spec
    for ex in nlvr.train[:20]:
        assert len(ex.visual) == 2 and all(v.shape == (spec.n_visual, spec.d_raw_v) for v in ex.visual)
        assert len(ex.tokens) <= spec.n_text and ex.label in (0, 1)
        assert all(g.shape == (spec.n_visual, 4) for g in ex.geometry)
    for ex in vqa.train[:20]:
        assert len(ex.visual) == 1 and 0 <= ex.label < vqa.spec.n_concepts


def test_nlvr_balance(nlvr):
    for split in (nlvr.train, nlvr.heldout):
        counts = label_balance(split)
        assert abs(counts[1] / len(split) - 0.5) <= 0.05


def test_vqa_balance(vqa):
    counts = label_balance(vqa.train)
    target = len(vqa.train) / vqa.spec.n_concepts
    assert all(abs(c - target) / len(vqa.train) <= 0.05 for c in counts.values())
    assert len(counts) == vqa.spec.n_concepts


def test_distractor_rate(nlvr):
    kinds = [ex.trace["kind"] for ex in nlvr.train]
    assert kinds.count("distractor") / len(kinds) >= 0.30
    for ex in nlvr.train:
        if ex.trace["kind"] == "distractor":
            assert ex.label == 0
            for img in ex.trace["images"]:
                assert ex.trace["a"] in img["concepts"] and ex.trace["b"] in img["concepts"]


def test_brute_force_agrees(nlvr, vqa):
    for ds in (nlvr, vqa):
        for ex in ds.train + ds.heldout:
            assert brute_force_label(ex, ds.spec, ds.world) == ex.label
    assert all(nlvr_label_from_trace(ex.trace) == ex.label for ex in nlvr.train)
    assert all(vqa_label_from_trace(ex.trace, vqa.spec.n_concepts) == ex.label for ex in vqa.train)


def test_brute_force_detects_a_tampered_trace(nlvr):
    ex = next(e for e in nlvr.train if e.trace["kind"] == "distractor")
    trace = json.loads(json.dumps(ex.trace))
    a, b = trace["a"], trace["b"]
    for img in trace["images"]:
        ia, ib = img["concepts"].index(a), img["concepts"].index(b)
        lo, hi = sorted((img["x"][ia], img["x"][ib]))
        img["x"][ia], img["x"][ib] = (lo, hi) if trace["rel"] == "left" else (hi, lo)
    assert ex.label == 0
    assert brute_force_label(replace(ex, trace=trace), nlvr.spec) == 1
    with pytest.raises(DataError, match="decode"):
        brute_force_label(replace(ex, visual=[ex.visual[1], ex.visual[0]]), nlvr.spec, nlvr.world)


def test_rois_sorted_left_to_right(nlvr):
    for ex in nlvr.train[:50]:
        for img in ex.trace["images"]:
            assert img["x"] == sorted(img["x"])
    shuffled = generate(GeneratorSpec(seed=3, n=50, sort_rois=False))
    assert any(img["x"] != sorted(img["x"]) for ex in shuffled.train for img in ex.trace["images"])
    assert all(brute_force_label(ex, shuffled.spec, shuffled.world) == ex.label for ex in shuffled.train)


def test_optional_relation_words_and_fillers():
    ds = generate(GeneratorSpec(seed=1, n=200, relation_words=2, max_fillers=2))
    rels = {ex.trace["rel"] for ex in ds.train}
    assert rels == {"left", "right"}
    assert any(len(ex.tokens) > 3 for ex in ds.train)
    assert all(brute_force_label(ex, ds.spec, ds.world) == ex.label for ex in ds.train)


def test_non_relational_variant():
    ds = generate(GeneratorSpec(seed=1, n=100, relational=False))
    assert "distractor" not in {ex.trace["kind"] for ex in ds.train}
    assert all(brute_force_label(ex, ds.spec) == ex.label for ex in ds.train)


@pytest.mark.parametrize(
    "override,match",
    [
        ({"n_concepts": 1}, "at least 2 concepts"),
        ({"n": 0}, "n must be positive"),
        ({"vocab_size": 9}, "vocab_size"),
        ({"task": "captions"}, "unknown task"),
        ({"positive_rate": 0.8}, "exceeds 1"),
        ({"relation_words": 3}, "relation_words"),
        ({"heldout_fraction": 1.0}, "heldout_fraction"),
    ],
)
def test_infeasible_specs(override, match):
    with pytest.raises(DataError, match=match):
        generate(GeneratorSpec(**override))


def test_jsonl_round_trip(tmp_path, nlvr):
    path = tmp_path / "d.jsonl"
    write_jsonl(path, nlvr.train[:30])
    back = read_jsonl(path)
    assert back == nlvr.train[:30]


def test_floats_use_nine_significant_digits(nlvr):
    rec = example_to_record(nlvr.train[0])
    for v in rec["visual"][0][0]:
        assert len(repr(v).replace("-", "").replace(".", "").lstrip("0").split("e")[0]) <= 9


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_jsonl(tmp_path / "e.jsonl") == []


def test_malformed_line_reports_line_number(tmp_path, nlvr):
    path = tmp_path / "bad.jsonl"
    write_jsonl(path, nlvr.train[:2])
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(DataError, match="line 3"):
        read_jsonl(path)


def test_missing_field(tmp_path, nlvr):
    rec = example_to_record(nlvr.train[0])
    del rec["label"]
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaError, match="label"):
        read_jsonl(tmp_path / "m.jsonl")


def test_wrong_visual_row_count_names_the_id(tmp_path, nlvr):
    recs = [example_to_record(e) for e in nlvr.train[:2]]
    recs[1]["visual"][0] = recs[1]["visual"][0][:-1]
    (tmp_path / "v.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    with pytest.raises(SchemaError, match=nlvr.train[1].id):
        read_jsonl(tmp_path / "v.jsonl")


def test_bad_label_and_image_count(tmp_path, nlvr):
    rec = example_to_record(nlvr.train[0])
    rec["label"] = 2
    (tmp_path / "l.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaError, match="label"):
        read_jsonl(tmp_path / "l.jsonl")
    rec["label"] = 0
    rec["visual"] = rec["visual"][:1]
    (tmp_path / "i.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(SchemaError, match="2 images"):
        read_jsonl(tmp_path / "i.jsonl")


def test_round_trip_is_exact_at_float32(tmp_path, nlvr):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, nlvr.train[:5])
    for a, b in zip(read_jsonl(path), nlvr.train[:5]):
        for va, vb in zip(a.visual, b.visual):
            assert va.dtype == np.float32
            np.testing.assert_array_equal(va, vb.astype(np.float32))
