import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modpool.data import Episode, sample_episode
from modpool.evaluate import (
    DEFAULT_EPISODES,
    DEFAULT_QUERIES,
    DEFAULT_SHOT,
    DEFAULT_WAY,
    METHODS,
    ConfigurationError,
    EvalReport,
    IndependentPool,
    ProtocolViolation,
    classify_probs,
    confidence_halfwidth,
    contribution_report,
    evaluate,
    fine_tune_linear,
    format_report,
    parse_report,
    predict_doa,
    predict_dos,
    predict_proto,
    predict_simple_avg,
    run_method,
)
from modpool.pool import ADAPTER, BackboneSpec, ModelPool, init_base, init_selector


def fixed_embedding(points):
    """An embedder that ignores its input and returns prepared rows."""
    return lambda x: np.asarray(points, np.float64)


def bare_episode(way, shot, queries, dim=2):
    return Episode(way, shot, queries, np.zeros((way * shot, dim), np.float32), np.repeat(np.arange(way), shot),
                   np.zeros((way * queries, dim), np.float32), np.repeat(np.arange(way), queries))


def forcing_selector(pool, index):
    phi = {k: np.zeros_like(v) for k, v in init_selector(pool.spec.embed_dim, 4, pool.size, np.random.default_rng(0)).items()}
    phi["fc2.bias"][index] = 5.0
    return phi


def test_protocol_defaults():
    assert (DEFAULT_EPISODES, DEFAULT_QUERIES, DEFAULT_WAY, DEFAULT_SHOT) == (600, 10, 5, 5)


# --- classify_probs --------------------------------------------------------------------

def test_dominant_prototype():
    ep = bare_episode(3, 1, 1)
    emb = [[0, 0], [10, 0], [0, 10], [0, 0], [10, 0], [0, 10]]
    probs = classify_probs(ep, fixed_embedding(emb))
    assert probs[0, 0] > 0.999 and probs[1, 1] > 0.999 and probs[2, 2] > 0.999


def test_equidistant_query_uniform():
    ep = bare_episode(4, 1, 1)
    support = [[1, 0], [0, 1], [-1, 0], [0, -1]]
    probs = classify_probs(ep, fixed_embedding(support + [[0, 0]] * 4))
    assert np.allclose(probs, 0.25, atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1e3))
def test_probability_rows_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    ep = bare_episode(5, 2, 3, dim=4)
    emb = rng.standard_normal((25, 4)) * scale
    probs = classify_probs(ep, fixed_embedding(emb))
    assert probs.dtype == np.float64
    assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-6


# --- methods ---------------------------------------------------------------------------

def test_dos_forced_to_base_equals_proto(small_domains, small_pool):
    datasets, splits = small_domains
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(1))
    preds, chosen, probs = predict_dos(ep, small_pool, forcing_selector(small_pool, 0))
    base_preds, base_probs = predict_proto(ep, small_pool)
    assert chosen == 0 and np.array_equal(preds, base_preds) and np.array_equal(probs, base_probs)


def test_dos_arity_mismatch(small_domains, small_pool):
    datasets, splits = small_domains
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(1))
    phi = init_selector(small_pool.spec.embed_dim, 4, 2, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        predict_dos(ep, small_pool, phi)


def test_dos_single_model_pool(small_domains):
    datasets, splits = small_domains
    spec = BackboneSpec(8, (8, 4))
    pool = ModelPool(spec, init_base(spec, np.random.default_rng(0)), ADAPTER)
    phi = init_selector(4, 4, 1, np.random.default_rng(2))
    for seed in range(5):
        ep = sample_episode(datasets[1], splits[1].test, 3, 2, 2, np.random.default_rng(seed))
        assert predict_dos(ep, pool, phi)[1] == 0


def test_doa_with_identity_members_equals_proto(small_domains):
    datasets, splits = small_domains
    spec = BackboneSpec(8, (8, 4))
    pool = ModelPool.create(spec, init_base(spec, np.random.default_rng(0)), ADAPTER, ["a", "b"])
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(2))
    preds, probs, _ = predict_doa(ep, pool)
    base_preds, base_probs = predict_proto(ep, pool)
    assert np.array_equal(preds, base_preds) and np.allclose(probs, base_probs, atol=1e-15)


def test_doa_averages_members(small_domains, small_pool):
    datasets, splits = small_domains
    ep = sample_episode(datasets[1], splits[1].test, 3, 2, 4, np.random.default_rng(3))
    _, probs, members = predict_doa(ep, small_pool)
    assert len(members) == small_pool.size
    assert np.allclose(probs, sum(members) / len(members))


def independent(seed, n):
    spec = BackboneSpec(8, (6, 4))
    rng = np.random.default_rng(seed)
    return IndependentPool(spec, [init_base(spec, rng) for _ in range(n)], [f"d{i}" for i in range(n)])


def test_simple_avg_single_member_is_that_member(small_domains):
    datasets, splits = small_domains
    ipool = independent(0, 1)
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(4))
    preds, probs, _ = predict_simple_avg(ep, ipool)
    alone = classify_probs(ep, lambda x: ipool.embed(x, 0))
    assert np.array_equal(probs, alone) and np.array_equal(preds, alone.argmax(axis=1))


def test_simple_avg_order_invariant(small_domains):
    datasets, splits = small_domains
    ipool = independent(1, 3)
    flipped = IndependentPool(ipool.spec, ipool.members[::-1], ipool.domains[::-1])
    ep = sample_episode(datasets[1], splits[1].test, 3, 2, 4, np.random.default_rng(5))
    a, pa, _ = predict_simple_avg(ep, ipool)
    b, pb, _ = predict_simple_avg(ep, flipped)
    assert np.array_equal(a, b) and np.allclose(pa, pb, atol=1e-15)


def test_fine_tune_zero_iterations_predicts_class_zero():
    rng = np.random.default_rng(0)
    preds, probs, head = fine_tune_linear(rng.standard_normal((6, 3)), np.repeat(np.arange(3), 2),
                                          rng.standard_normal((9, 3)), 3, iterations=0)
    assert not preds.any() and np.allclose(probs, 1 / 3) and not head["weight"].any()


def test_fine_tune_fits_separable_support():
    rng = np.random.default_rng(1)
    centers = np.array([[4, 0, 0], [0, 4, 0], [0, 0, 4]], np.float32)
    labels = np.repeat(np.arange(3), 5)
    support = (centers[labels] + 0.3 * rng.standard_normal((15, 3))).astype(np.float32)
    preds, _, _ = fine_tune_linear(support, labels, support, 3, iterations=100)
    assert (preds == labels).mean() == 1.0


def test_run_method_hides_domain(small_domains, small_pool, monkeypatch):
    datasets, splits = small_domains
    seen = []
    import modpool.evaluate as ev
    original = ev.predict_proto
    monkeypatch.setattr(ev, "predict_proto", lambda ep, pool: (seen.append(ep), original(ep, pool))[1])
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(0))
    run_method("proto", ep, small_pool)
    assert seen[0].domain_name is None and seen[0].support_src is None


def test_run_method_guards(small_domains, small_pool):
    datasets, splits = small_domains
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="selector"):
        run_method("dos", ep, small_pool)
    with pytest.raises(ConfigurationError):
        run_method("simple_avg", ep, small_pool)
    with pytest.raises(ConfigurationError):
        run_method("vote", ep, small_pool)


@pytest.mark.parametrize("method", ["proto", "dos", "doa", "simple_avg"])
def test_further_adaptation_runs(small_domains, small_pool, method):
    datasets, splits = small_domains
    ep = sample_episode(datasets[0], splits[0].test, 3, 2, 4, np.random.default_rng(0))
    res = run_method(method, ep, small_pool, forcing_selector(small_pool, 1), independent(2, 2),
                     further_adapt=True, ft_iterations=5)
    assert res.predictions.shape == (12,) and np.allclose(res.probs.sum(axis=1), 1)


# --- evaluate ---------------------------------------------------------------------------------

def test_confidence_halfwidth():
    assert confidence_halfwidth([1.0] * 10) == 0.0
    values = [0.2, 0.4, 0.6, 0.8]
    assert confidence_halfwidth(values) == pytest.approx(1.96 * np.std(values, ddof=1) / 2)


def test_all_correct_episodes():
    report = EvalReport("proto", ["a"], [1.0] * 5, ["a"] * 5, [-1] * 5, None)
    assert report.mean == 1.0 and report.ci95 == 0.0


def test_evaluate_deterministic_and_complete(small_domains, small_pool):
    datasets, splits = small_domains
    kw = dict(pool=small_pool, episodes=20, way=3, shot=2, query=3, seed=7)
    a = evaluate("doa", datasets, splits, **kw)
    b = evaluate("doa", datasets, splits, **kw)
    assert a == b
    assert a.episodes == 20 and len(a.contributions) == 20
    assert set(a.episode_domains) <= {"masked", "warped"}
    assert a.max_row_error <= 1e-6
    assert sum(n for _, _, n in a.by_domain().values()) == 20


def test_evaluate_episode_streams_are_prefix_stable(small_domains, small_pool):
    datasets, splits = small_domains
    kw = dict(pool=small_pool, way=3, shot=2, query=3, seed=3)
    short = evaluate("proto", datasets, splits, episodes=5, **kw)
    long = evaluate("proto", datasets, splits, episodes=9, **kw)
    assert long.accuracies[:5] == short.accuracies


@pytest.mark.parametrize("method", METHODS)
def test_every_method_emits_valid_rows(small_domains, small_pool, method):
    datasets, splits = small_domains
    report = evaluate(method, datasets, splits, pool=small_pool, phi=forcing_selector(small_pool, 2),
                      ipool=independent(3, 2), episodes=6, way=3, shot=2, query=3, ft_iterations=10)
    assert report.max_row_error <= 1e-6 and all(0 <= a <= 1 for a in report.accuracies)


def test_unseen_protocol(small_domains, small_pool):
    datasets, splits = small_domains
    kw = dict(pool=small_pool, episodes=3, way=3, shot=2, query=3)
    with pytest.raises(ProtocolViolation):
        evaluate("doa", datasets[:1], splits[:1], holdout="masked", **kw)
    with pytest.raises(ProtocolViolation):
        evaluate("doa", datasets, splits, holdout="other", sources=["masked"], **kw)
    report = evaluate("doa", datasets[:1], splits[:1], holdout="masked", sources=["warped"], **kw)
    assert report.settings["protocol"] == "unseen" and report.settings["holdout"] == "masked"


def test_evaluate_needs_checkpoints(small_domains):
    datasets, splits = small_domains
    with pytest.raises(ConfigurationError):
        evaluate("doa", datasets, splits)
    with pytest.raises(ConfigurationError):
        evaluate("simple_avg", datasets, splits)
    with pytest.raises(ConfigurationError):
        evaluate("nearest", datasets, splits)


def test_report_round_trip(small_domains, small_pool):
    datasets, splits = small_domains
    report = evaluate("dos", datasets, splits, pool=small_pool, phi=forcing_selector(small_pool, 1),
                      episodes=4, way=3, shot=2, query=3)
    parsed = parse_report(format_report(report, {"checkpoint_digest": "abc"}))
    assert parsed["header"]["checkpoint_digest"] == "abc"
    assert parsed["header"]["method"] == "dos" and parsed["header"]["episodes"] == "4"
    assert [e[3] for e in parsed["episodes"]] == [1] * 4
    assert float(parsed["header"]["mean"]) == pytest.approx(report.mean, abs=1e-6)
    assert report.chosen_frequencies(small_pool.size) == [0, 4, 0]


def test_contribution_report_identical_members(small_domains):
    datasets, splits = small_domains
    spec = BackboneSpec(8, (8, 4))
    pool = ModelPool.create(spec, init_base(spec, np.random.default_rng(0)), ADAPTER, ["a", "b"])
    rng = np.random.default_rng(0)
    eps = [sample_episode(datasets[0], splits[0].test, 3, 2, 4, rng) for _ in range(5)]
    table = contribution_report(eps, pool=pool)
    assert table.shape == (5, 3) and all(len(set(row)) == 1 for row in table)
    with pytest.raises(ConfigurationError):
        contribution_report(eps)
