import json

import numpy as np
import pytest

import spruft


def row_norms(w):
    return np.sqrt((w * w).sum(axis=1))


def test_model_roundtrip():
    m = spruft.Model.mlp(6, [8], 3, seed=2)
    again = spruft.Model.from_json(m.to_json())
    x = np.random.default_rng(0).normal(size=(5, 6))
    np.testing.assert_array_equal(m.logits(x), again.logits(x))
    assert m.parameter_count() == 6 * 8 + 8 + 8 * 3 + 3


def test_magnitude_matches_numpy():
    m = spruft.Model.mlp(6, [8], 3, seed=5)
    for layer in m.linear_layers():
        got = spruft.magnitude_importance(m, layer)
        np.testing.assert_allclose(got, row_norms(m.parameter(layer + ".weight")), rtol=0, atol=1e-12)


def test_quantiles_mean_against_numpy():
    rng = np.random.default_rng(1)
    for _ in range(50):
        row = rng.normal(size=rng.integers(1, 9))
        expected = np.quantile(row, np.linspace(0, 1, 11), method="linear").mean()
        assert spruft.quantiles_mean(list(row)) == pytest.approx(expected, abs=1e-12)


def test_select_top_r_ties_go_to_smaller_index():
    assert spruft.select_top_r([2.0, 5.0, 5.0, 1.0], 2) == [1, 2]
    assert spruft.select_top_r([1.0, 1.0, 1.0], 2) == [0, 1]


def test_taylor_and_qm_shapes():
    m = spruft.Model.mlp(4, [6], 3, seed=3)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(30, 4))
    y = [i % 3 for i in range(30)]
    t = spruft.taylor_importance(m, "fc1", x, y)
    q = spruft.qm_taylor_importance(m, "fc1", x, y)
    assert len(t) == len(q) == 6
    assert min(t) >= 0 and min(q) >= 0


def test_spsa_moments_are_unbiased():
    rows = spruft.spsa_moments([1.0, -0.5, 0.25], n=2, k=2, samples=2000, seed=9)
    for r in rows:
        assert abs(r["mean"] - r["g"]) < 4 * r["std_error"]
        assert 0.7 < r["variance"] / r["law_variance"] < 1.3


def test_pair_rank_probability():
    assert spruft.pair_rank_probability(1.0, 1.0, 1.0, 1.0) == pytest.approx(0.5)
    assert spruft.pair_rank_probability(2.0, 1.0, 1.0, 1.0) == pytest.approx(0.8413447460685429)


def test_bad_input_raises():
    m = spruft.Model.mlp(4, [6], 3)
    with pytest.raises(ValueError):
        m.logits(np.ones((2, 5)))
    with pytest.raises(ValueError):
        spruft.Model.from_json('{"format": "nope"}')


def test_cli_train_and_merge(tmp_path):
    config = {
        "seed": 1,
        "model": {"mlp": {"input_dim": 6, "hidden": [10], "num_classes": 3}},
        "task": {"train_size": 60, "val_size": 30},
        "method": "sprufft",
        "metric": "l2",
        "rank": 2,
        "train": {"epochs": 1, "batch_size": 20},
        "out": "run",
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    assert spruft.run_cli(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    base = spruft.Model.mlp(6, [10], 3, seed=1)
    merged = base.merge((run / "adapter.json").read_text())
    assert json.loads(merged.to_json()) == json.loads((run / "model.json").read_text())
    assert spruft.run_cli(["train", "--config", str(tmp_path / "absent.json")]) == 4
