import numpy as np
import pytest
from scipy.stats import ks_2samp

from lrtwostage.bart import BartHyper
from lrtwostage.data import TrialDataset
from lrtwostage.dgp import DgpScenario, gen_trial
from lrtwostage.glm import Link
from lrtwostage.harness import (
    MccvConfig,
    Method,
    SimConfig,
    export_overlap_data,
    mcse_coverage,
    run_mccv,
    run_replication,
    run_simulation,
    summarize,
)
from lrtwostage.twostage import SubgroupingRule

FAST = BartHyper(m=20, n_burn=50, n_keep=20)


def test_mcse_values():
    assert mcse_coverage(0.95, 200) == pytest.approx(0.01541, abs=1e-4)
    assert mcse_coverage(0.0, 50) == 0.0
    assert mcse_coverage(0.5, 100) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        mcse_coverage(1.2, 10)


def test_summarize_definitions():
    d = np.array([0.1, 0.3, 0.5, 0.9])
    s = np.array([0.2, 0.2, 0.1, 0.1])
    row = summarize("m", "LR", 0.4, d, s, 1)
    assert row.bias == pytest.approx(d.mean() - 0.4)
    assert row.var == pytest.approx(np.mean((d - d.mean()) ** 2))
    assert row.mse - (row.bias ** 2 + row.var) == pytest.approx(0.0, abs=1e-15)
    # intervals: [-.292,.492] [-.092,.692] [.304,.696] [.704,1.096]
    assert row.coverage == pytest.approx(0.75)
    assert row.mean_se == pytest.approx(0.15)
    assert row.n_used == 4 and not row.flagged
    assert summarize("m", "LR", 0.0, d, s, 2).flagged


def test_sim_config_validation():
    sc = DgpScenario("binary")
    with pytest.raises(ValueError):
        SimConfig(sc, R=1)
    with pytest.raises(ValueError):
        SimConfig(sc, n_total=50)


@pytest.fixture(scope="module")
def small_sim():
    cfg = SimConfig(DgpScenario("continuous"), n_total=200, R=3, bart=FAST, n_mc=100_000,
                    methods=("naive_gbm", "naive_bart", "corrected_bart"), base_seed=7)
    return cfg, run_simulation(cfg)


def test_simulation_table(small_sim):
    cfg, tab = small_sim
    assert len(tab.rows) == 3 * 2
    for r in tab.rows:
        assert abs(r.mse - (r.bias ** 2 + r.var)) < 1e-10
        assert 0 <= r.coverage <= 1
        assert r.n_used + r.n_excluded == cfg.R
    assert [rep.seed for rep in tab.replicates] == [7, 8, 9]


def test_simulation_worker_invariance(small_sim, tmp_path):
    cfg, tab = small_sim
    tab2 = run_simulation(cfg, workers=2)
    tab.to_csv(tmp_path / "a.csv")
    tab2.to_csv(tmp_path / "b.csv")
    tab.to_json(tmp_path / "a.json")
    tab2.to_json(tmp_path / "b.json")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("# provenance: ")


def test_collapsed_rule_naive_equals_corrected():
    rule = SubgroupingRule.threshold(1e6)
    cfg = SimConfig(DgpScenario("continuous"), n_total=200, R=2, rule=rule, bart=FAST)
    for r in range(2):
        rep = run_replication(cfg, r)
        n, c = rep.estimates["naive_bart"]["UR"], rep.estimates["corrected_bart"]["UR"]
        assert n[0] == pytest.approx(c[0], abs=1e-12)
        assert "LR" in rep.failures["naive_bart"] and "LR" in rep.failures["corrected_bart"]
    tab = run_simulation(cfg, truth={"UR": 0.0, "LR": 0.0})
    assert tab.get("naive_bart", "LR").n_excluded == 2
    assert tab.flagged


def _null_binary(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    t = rng.integers(0, 2, n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(X[:, 0] - 0.3)))).astype(float)
    return TrialDataset(X, t, y, "binary")


def test_mccv_identical_seeds_give_single_values():
    data = _null_binary()
    rule = SubgroupingRule.threshold(0.45)
    cfg = MccvConfig(rule, Link.LOGIT, repetitions=2, bart=FAST, rep_seeds=(5, 5))
    res = run_mccv(data, cfg)
    rep = res.per_rep[0]
    for m in ("naive_bart", "corrected_bart"):
        for lb in rule.labels:
            row = res.get(m, lb)
            d, s, lo, hi = rep["estimates"][m][lb]
            assert (row.delta, row.se, row.ci_low, row.ci_high) == (d, s, lo, hi)
            assert row.or_low <= row.or_ <= row.or_high
            assert row.size_sd == 0.0
    assert set(res.confidence) == set(rule.labels)


def test_mccv_standardized_columns_and_adjustment():
    data = _null_binary(seed=1)
    cfg = MccvConfig(SubgroupingRule.threshold(0.45), "logit", repetitions=2, bart=FAST,
                     adjust=("x3",), standardize_at={"x3": 0.0})
    res = run_mccv(data, cfg)
    assert res.n_failed == 0
    with pytest.raises(ValueError):
        run_mccv(data, MccvConfig(SubgroupingRule.threshold(0.45), "logit", repetitions=2,
                                  bart=FAST, standardize_at={"nope": 0.0}))


def test_mccv_too_many_failures():
    data = _null_binary()
    # only 20 treated rows survive: split needs >= 20 treated, so the design half has 10
    idx = np.r_[np.flatnonzero(data.t == 1)[:19], np.flatnonzero(data.t == 0)]
    with pytest.raises(RuntimeError, match="MCCV repetitions failed"):
        run_mccv(data.subset(idx), MccvConfig(SubgroupingRule.threshold(0.5), repetitions=2,
                                              bart=FAST))


def test_mccv_config_validation():
    r = SubgroupingRule.threshold(0.5)
    with pytest.raises(ValueError):
        MccvConfig(r, repetitions=1)
    with pytest.raises(ValueError):
        MccvConfig(r, repetitions=3, rep_seeds=(1, 2))
    data = gen_trial(DgpScenario("continuous"), 200, 0)
    with pytest.raises(ValueError):
        run_mccv(data, MccvConfig(r, "logit", repetitions=2, bart=FAST))


def test_overlap_ecdf_properties():
    rng = np.random.default_rng(0)
    s = np.r_[rng.normal(size=120), rng.normal(0.7, 1, size=80)]
    t = np.r_[np.ones(120), np.zeros(80)].astype(int)
    ov = export_overlap_data(s, t)
    for c in ("ecdf_treated", "ecdf_control"):
        assert np.all(np.diff(ov.ecdf[c]) >= 0)
        assert ov.ecdf[c].iloc[-1] == 1.0
    assert ov.ks_statistic == pytest.approx(ks_2samp(s[t == 1], s[t == 0]).statistic, abs=1e-12)
    assert len(ov.samples) == 200


def test_overlap_identical_arms_and_draws():
    s = np.linspace(0, 1, 10)
    ov = export_overlap_data(np.r_[s, s], np.r_[np.ones(10), np.zeros(10)].astype(int), grid=25)
    np.testing.assert_array_equal(ov.ecdf["ecdf_treated"], ov.ecdf["ecdf_control"])
    draws = np.vstack([s, s + 0.1])
    ov2 = export_overlap_data(draws, np.r_[np.ones(5), np.zeros(5)].astype(int))
    np.testing.assert_allclose(np.sort(ov2.samples["score"]), np.sort(s + 0.05))


def test_methods_enum():
    assert Method("corrected_bart") is Method.CORRECTED_BART
