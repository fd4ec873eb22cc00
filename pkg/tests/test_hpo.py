import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcvae.dataio import SplitSpec, prepare, synth_generate
from rcvae.errors import HpoError, SpecError
from rcvae.hpo import (TRIAL_LOG_HEADER, BoState, Dim, GaussianProcess, SearchSpace, expected_improvement,
                       minimize, observe, rcvae_space, run_hpo, suggest, write_trial_log)
from rcvae.numcore import Rng

LINE = SearchSpace((Dim("x", 0.0, 1.0),))


def quad(p):
    return (p["x"] - 0.3) ** 2


def test_first_suggestion_in_bounds():
    space = rcvae_space()
    p = suggest(BoState(space), Rng(0))
    assert space.contains(p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_from_unit_in_bounds_and_integral(u):
    space = rcvae_space()
    p = space.from_unit(u)
    assert space.contains(p)
    for d in space.dims:
        if d.kind == "int":
            assert isinstance(p[d.name], int)


def test_ei_zero_at_noiseless_observed_point():
    assert expected_improvement(np.array([0.4]), np.array([0.0]), best=0.4)[0] == 0.0
    assert expected_improvement(np.array([0.3]), np.array([0.0]), best=0.4)[0] == pytest.approx(0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 3), st.floats(-5, 5))
def test_ei_nonnegative(mean, std, best):
    assert expected_improvement(np.array([mean]), np.array([std]), best)[0] >= 0


def test_quadratic_optimum():
    state = minimize(quad, LINE, 25, Rng(0))
    grid = np.linspace(0, 1, 100001)
    oracle = grid[np.argmin((grid - 0.3) ** 2)]
    assert abs(state.best().point["x"] - oracle) < 0.05


def test_duplicate_observation_survives():
    state = BoState(LINE)
    for _ in range(3):
        observe(state, {"x": 0.5}, 1.0)
    observe(state, {"x": 0.2}, 0.5)
    mean, std = state.gp.predict([[0.5]])
    assert np.isfinite(mean).all() and np.isfinite(std).all()


def test_best_so_far_monotone():
    state = minimize(quad, LINE, 12, Rng(3), method="random")
    bsf = state.best_so_far()
    assert all(b <= a for a, b in zip(bsf, bsf[1:]))


def test_gp_interpolates_observations():
    rng = Rng(1)
    X = rng.uniform(8).reshape(8, 1)
    y = np.sin(6 * X[:, 0])
    gp = GaussianProcess(1e-6).fit(X, y)
    mean, std = gp.predict(X)
    np.testing.assert_allclose(mean, y, atol=1e-2)
    assert np.all(std < 0.05)


def test_out_of_bounds_observation():
    with pytest.raises(SpecError):
        observe(BoState(LINE), {"x": 1.5}, 0.0)


def test_failed_trial_penalty():
    state = BoState(LINE, method="random")
    observe(state, {"x": 0.1}, 0.2)
    observe(state, {"x": 0.2}, -0.7)
    observe(state, {"x": 0.3}, None)
    assert state.trials[-1].status == "failed" and state.trials[-1].objective == pytest.approx(1.4)


def test_all_failed():
    def boom(p):
        raise ValueError("nope")

    with pytest.raises(HpoError):
        minimize(boom, LINE, 3, Rng(0))


def test_deterministic_replay():
    a = minimize(quad, LINE, 10, Rng(4))
    b = minimize(quad, LINE, 10, Rng(4))
    assert [t.point for t in a.trials] == [t.point for t in b.trials]


@pytest.fixture(scope="module")
def small_data():
    recs = synth_generate(Rng(1), 6, 6, n_points=60)
    return prepare(recs, SplitSpec(seed=0, n_cycles=6), 4, 4)


def small_space():
    return SearchSpace((Dim("eta", 1e-4, 1e-2, "log"), Dim("h", 8, 16, "int"), Dim("J", 2, 4, "int"),
                        Dim("D", 2, 8, "int"), Dim("K", 8, 32, "int")))


def test_run_hpo_budget_one(small_data, tmp_path):
    res = run_hpo(small_data.train, small_data.val, small_space(), budget=1, rng=Rng(0), trial_epochs=2,
                  base_model={"enc_layers": 2, "dec_layers": 2})
    assert len(res.trials) == 1 and res.best == res.trials[0].point
    write_trial_log(res.trials, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == ",".join(TRIAL_LOG_HEADER) and len(lines) == 2


def test_run_hpo_deterministic(small_data):
    kw = dict(space=small_space(), budget=3, trial_epochs=2, base_model={"enc_layers": 2, "dec_layers": 2})
    a = run_hpo(small_data.train, small_data.val, rng=Rng(5), **kw)
    b = run_hpo(small_data.train, small_data.val, rng=Rng(5), **kw)
    assert [t.point for t in a.trials] == [t.point for t in b.trials] and a.best_value == b.best_value
