import numpy as np
import pytest

import lami

SMALL = {
    "world": {"objects": 32},
    "lm": {"layers": 1, "heads": 2, "d_model": 16, "context": 40},
    "lm_train": {"steps": 40, "batch": 8, "lr": 0.003},
    "dual": {"d_v": 8, "joint": 8, "steps": 60, "batch": 16},
    "fusion": {"hidden": 8, "stage1_steps": 20, "stage2_steps": 5, "batch": 4},
}


@pytest.fixture(scope="module")
def pipe():
    return lami.Pipeline(SMALL, seed=0, placements=["late", "early"])


def test_config_defaults_and_rejects_unknown_keys():
    cfg = lami.default_config()
    assert cfg["inference"]["k"] == 6
    assert lami.normalize_config({})["fusion"] == cfg["fusion"]
    with pytest.raises(lami.ConfigError):
        lami.normalize_config({"lm": {"layer": 2}})


def test_world_and_render():
    objs = lami.world(3, 16)
    assert len(objs) == 16
    assert objs == lami.world(3, 16)
    pix, drawn = lami.render(objs[0]["attrs"], seed=5)
    assert pix.shape == (16, 16, 3)
    assert pix.min() >= 0.0 and pix.max() <= 1.0
    assert drawn == objs[0]["attrs"]
    again, _ = lami.render(objs[0]["attrs"], seed=5)
    assert np.array_equal(pix, again)
    with pytest.raises(lami.ArgumentError):
        lami.render({"color": "mauve", "shape": "disc", "size": "small"}, seed=0)


def test_aggregate_hand_case_and_endpoints():
    p0 = [0.5, 0.3, 0.2]
    imgs = [([0.1, 0.8, 0.1], 1.0), ([0.2, 0.2, 0.6], 0.5)]
    got = lami.aggregate(p0, imgs)
    assert got == pytest.approx([9 / 40, 21 / 40, 1 / 4], abs=1e-15)
    assert lami.aggregate(p0, [(p, 0.0) for p, _ in imgs]) == p0
    for s in lami.strategies():
        assert sum(lami.aggregate(p0, imgs, s)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(lami.ConfigError):
        lami.aggregate(p0, imgs, "vote")


def test_pipeline_inference(pipe):
    objs = pipe.objects()
    assert len(objs) == 32
    held = next(o for o in objs if o["heldout"])
    out = pipe.infer("What is the color of the " + held["name"] + "? It is", k=3, seed=1)
    assert out["strategy"] == "clip_fusion"
    assert len(out["images"]) == 3
    assert sum(out["p_final"]) == pytest.approx(1.0)
    assert all(0.0 <= im["f"] <= 1.0 for im in out["images"])
    assert all(im["drawn"] == held["attrs"] for im in out["images"])
    assert out == pipe.infer("What is the color of the " + held["name"] + "? It is", k=3, seed=1)
    early = pipe.infer("What is the color of the " + held["name"] + "? It is", k=2, placement="early")
    assert len(early["images"]) == 2
    with pytest.raises(lami.ConfigError):
        pipe.infer("What is the color of the " + held["name"] + "?", placement="intermediate")


def test_pipeline_evaluate_and_scores(pipe):
    row = pipe.evaluate("color", k=2, strategy="text_only")
    assert row["k"] == 0 and row["count"] > 0
    assert row["accuracy"] == row["correct"] / row["count"]
    assert pipe.evaluate("color", k=2, threads=4) == pipe.evaluate("color", k=2, threads=1)
    s = pipe.score("what is the color of the", ["red", "blue"])
    assert len(s) == 2 and all(x <= 0.0 for x in s)


def test_checkpoints_round_trip(pipe, tmp_path):
    pipe.save(tmp_path)
    assert (tmp_path / "lm.ckpt").exists()
    assert (tmp_path / "fusion-late.ckpt").exists()
    cached = lami.Pipeline(SMALL, seed=0, placements=["late"], cache_dir=tmp_path / "cache")
    reloaded = lami.Pipeline(SMALL, seed=0, placements=["late"], cache_dir=tmp_path / "cache")
    assert cached.lm_hash == reloaded.lm_hash == pipe.lm_hash
    assert cached.vision_hash == pipe.vision_hash


def test_rows_csv():
    rows = [
        {"task": "shape", "method": "text_only", "k": 0, "epsilon": 0.0, "seed": 0, "accuracy": 0.25, "count": 8, "ms": 0.0},
        {"task": "color", "method": "clip_fusion", "k": 6, "epsilon": 0.0, "seed": 0, "accuracy": 0.5, "count": 8, "ms": 0.0},
    ]
    csv = lami.rows_csv(rows)
    lines = csv.strip().split("\n")
    assert lines[0] == "task,method,k,epsilon,seed,accuracy,count,ms"
    assert lines[1].startswith("color,clip_fusion,6,")
