import math

import numpy as np
import pytest

import alps

SMALL_CONFIG = {
    "steps": 10,
    "batch_size": 4,
    "train_size": 32,
    "eval_size": 8,
    "seq_len": 16,
    "init_seed": 3,
}


def test_kv_group_worked_example():
    geo = alps.ModelGeometry(1, 32, 32, 8)
    assert alps.kv_group_of(20, geo) == 5
    toy = alps.toy_geometry()
    assert [alps.kv_group_of(h, toy) for h in range(1, 9)] == [1, 1, 1, 1, 2, 2, 2, 2]
    with pytest.raises(alps.RangeError):
        alps.kv_group_of(9, toy)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal((5,)),
    }
    path = tmp_path / "x.alps"
    alps.write_checkpoint(path, tensors, {"note": "hi"})
    back, meta, fingerprint = alps.read_checkpoint(path)
    assert meta == {"note": "hi"}
    assert len(fingerprint) == 64
    assert back["a"].dtype == np.float32 and back["b"].dtype == np.float64
    np.testing.assert_array_equal(back["a"], tensors["a"])
    np.testing.assert_array_equal(back["b"], tensors["b"])


def test_corrupt_container_raises(tmp_path):
    path = tmp_path / "bad.alps"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(alps.FormatError):
        alps.read_checkpoint(path)
    with pytest.raises(alps.IoError):
        alps.read_checkpoint(tmp_path / "missing.alps")
    nan_path = tmp_path / "nan.alps"
    alps.write_checkpoint(nan_path, {"nan": np.array([1.0, math.nan])})
    with pytest.raises(alps.ValueError):
        alps.read_checkpoint(nan_path)


def test_metrics():
    assert alps.w1_distance([0.0, 1.0], [0.5, 1.5]) == pytest.approx(0.5)
    p, q = [0.5, 0.5], [0.25, 0.75]
    assert alps.kl_divergence(p, q) == pytest.approx(0.14384, abs=1e-5)
    w = np.random.default_rng(1).standard_normal((6, 5))
    assert sum(alps.tempered_softmax(w, 1.0)) == pytest.approx(1.0, abs=1e-12)
    for metric in ("pad", "kl", "cosine", "euclid"):
        assert alps.score_head(w, w, metric) == pytest.approx(0.0, abs=1e-15)
    wq, wk, wv = np.eye(2), np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(alps.head_projection(wq, wk, wv), wv)


def test_pipeline(tmp_path):
    base = tmp_path / "base.alps"
    alps.init_model(base, seed=3)
    zero = alps.score(base, base)
    assert len(zero["entries"]) == 32
    assert all(e["score"] == 0.0 for e in zero["entries"])
    assert alps.heatmap_csv(zero).count("\n") == 4

    trained = tmp_path / "t.alps"
    result = alps.train(SMALL_CONFIG, trained)
    assert sum("loss" in r for r in result["log"]) == 10
    assert math.isfinite(result["eval_loss"])

    report = alps.score(base, trained)
    assert report["metric"] == "pad" and report["tau"] == 1.0
    mask = alps.select(report)
    assert mask["ratio"] == 0.1 and len(mask["selected"]) == 4

    masked = tmp_path / "m.alps"
    alps.train(dict(SMALL_CONFIG, freeze="mask"), masked, mask=mask)
    frozen = [k for k in alps.read_checkpoint(masked)[0] if k.endswith("attn.q_proj.weight")]
    assert len(frozen) == 4

    loss, acc = alps.evaluate(base, eval_size=8)
    assert loss == pytest.approx(math.log(32.0))
    abl = alps.ablate(base, ratio=0.25, eval_size=8)
    assert len(abl["top_k"]) == 8
    assert all(e["delta"] == 0.0 for e in abl["entries"])


def test_geometry_mismatch(tmp_path):
    a, b = tmp_path / "a.alps", tmp_path / "b.alps"
    alps.init_model(a, seed=1)
    alps.init_model(b, seed=1, geometry=alps.ModelGeometry(2, 64, 8, 2))
    with pytest.raises(alps.GeometryError):
        alps.score(a, b)
