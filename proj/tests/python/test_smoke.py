import math

import numpy as np
import pytest

import ecp


def test_rank_and_infinite_threshold():
    assert ecp.conformal_rank(9, 0.1) == 9
    cal = ecp.calibrate([0.1, 0.2, 0.3], 0.1)
    assert cal.is_infinite and math.isinf(cal.q_hat)


def test_calibrate_picks_rank_statistic():
    scores = np.linspace(0.01, 1.0, 100)
    cal = ecp.calibrate(scores.tolist(), 0.1)
    # rank ceil(101 * 0.9) = 91
    assert cal.q_hat == pytest.approx(scores[90])
    assert cal.alpha_n == pytest.approx(0.1 - 1 / 101)


def test_threshold_score_and_sets():
    spec = ecp.ScoreSpec("THR")
    assert ecp.score(spec, [0.7, 0.2, 0.1], 1) == pytest.approx(0.8)
    cal = ecp.calibrate([0.7] * 20, 0.1)
    sets = ecp.predict_sets(cal, spec, np.array([[0.7, 0.2, 0.1], [0.4, 0.35, 0.25]]))
    assert sets.tolist() == [[True, False, False], [True, True, False]]
    assert ecp.coverage(sets, [0, 2]) == pytest.approx(0.5)
    assert ecp.inefficiency(sets) == pytest.approx(1.5)


def test_bad_score_kind_raises():
    with pytest.raises(ValueError):
        ecp.ScoreSpec("NOPE")


def test_gaussian_mixture_pipeline_covers():
    spec = ecp.ring_mixture(4, 2)
    x, y, _ = ecp.gen_gaussian_mixture(spec, 4000, 3)
    probs = ecp.gmm_posterior(spec, x)
    assert probs.shape == (4000, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    score = ecp.ScoreSpec("THR", jitter=1e-6)
    cal_scores = [ecp.score(score, probs[i].tolist(), int(y[i]), seed=i) for i in range(2000)]
    cal = ecp.calibrate(cal_scores, 0.1)
    sets = ecp.predict_sets(cal, score, probs[2000:], seed=7)
    assert abs(ecp.coverage(sets, y[2000:].tolist()) - 0.9) < 0.03


def test_bounds_bracket_entropy_for_perfect_model():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), size=400)
    labels = [int(rng.choice(3, p=p)) for p in probs]
    sets = np.ones((400, 3), dtype=bool)
    ce = ecp.cross_entropy(probs, labels)
    fano = ecp.simple_fano_bound(probs, labels, sets, 100, 0.1)
    assert fano["method"] == "simple_fano"
    assert set(fano) >= {"value", "terms", "alpha", "n", "clip_events"}
    assert ecp.dpi_exact(probs, labels, sets, 100) <= ce + 1e-9
    assert ecp.binary_entropy(0.5) == pytest.approx(math.log(2))


def test_entropy_helpers():
    est = ecp.entropy_mle([5, 5, 0])
    assert est["h_mle"] == pytest.approx(math.log(2))
    assert est["h_mm"] == pytest.approx(math.log(2) + 1 / 20)
    post = ecp.posterior_with_si([0.5, 0.5], [0.9, 0.1])
    assert post == pytest.approx([0.9, 0.1])
    joint = [[[0.25, 0.0], [0.0, 0.25]], [[0.125, 0.125], [0.125, 0.125]]]
    d = ecp.entropy_decomposition(joint)
    assert d["h_y_given_x"] == pytest.approx(d["avg_local"] + d["mi"])


def test_train_reduces_loss():
    spec = ecp.ring_mixture(3, 2, radius=3.0, variance=0.5)
    x, y, _ = ecp.gen_gaussian_mixture(spec, 600, 1)
    model = ecp.init_model({"layer_sizes": [2, 3], "activation": "RELU"}, 0)
    cfg = {"loss": "CE", "batch_size": 50, "lr": 0.05, "epochs": 5}
    trained, history = ecp.train(model, x, y.tolist(), cfg)
    assert len(history) == 5
    assert history[-1]["mean_loss"] < history[0]["mean_loss"]
    probs = ecp.predict_probs(trained, x)
    assert (probs.argmax(axis=1) == y).mean() > 0.8


def test_infeasible_training_batch_rejected():
    model = ecp.init_model({"layer_sizes": [2, 3]}, 0)
    x = np.zeros((10, 2))
    with pytest.raises(ValueError, match="rank"):
        ecp.train(model, x, [0] * 10, {"loss": "MB_FANO", "alpha_train": 0.01, "batch_size": 100})


def test_criteria_listing_and_fast_repro():
    slugs = [c["slug"] for c in ecp.criteria()]
    assert len(slugs) == 12 and "coverage-sandwich" in slugs
    result = ecp.repro("dpi-dominance")
    assert result["verdict"] == "PASS"
