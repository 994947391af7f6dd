import warnings

import numpy as np
import pytest

from transflower import baselines, geodata
from transflower.baselines import BaselineWarning, GravityParams


def test_gravity_probs_examples():
    assert np.allclose(baselines.gravity_probs([3, 5, 9], [1, 2, 3], GravityParams(0, 0)), 1 / 3)
    assert np.allclose(baselines.gravity_probs([1, 2], [4, 4], GravityParams(1, 0)), [1 / 3, 2 / 3])
    p = GravityParams(0.7, 1.9)
    m, r = np.array([3.0, 1.0, 8.0]), np.array([100.0, 250.0, 900.0])
    a = baselines.gravity_probs(m, r, p)
    assert abs(a.sum() - 1) <= 1e-9
    assert np.allclose(a, baselines.gravity_probs(m, 2 * r, p), atol=1e-15)
    assert np.allclose(a, baselines.gravity_probs(10 * m, r, p), atol=1e-15)
    with pytest.raises(ValueError):
        baselines.gravity_probs([1, 2], [0, 3], p)


def test_fit_gravity_recovers_planted_parameters():
    ds = baselines.gravity_synthetic(GravityParams(1.0, 2.0), n_regions=200, mean_outflow=5000, seed=3)
    a = baselines.fit_gravity(ds, range(200))
    assert abs(a.beta - 1.0) <= 0.1 and abs(a.gamma - 2.0) <= 0.1 and not a.warning
    assert baselines.fit_gravity(ds, range(200)) == a


def test_fit_gravity_degenerate_flag():
    ids = ["A", "B", "C"]
    regions = geodata.RegionTable(ids, [[0, 0], [1, 0], [0, 2]], np.ones((3, 20)))
    flows = geodata.FlowTable([0, 1], [1, 2], [5.0, 3.0], 3)
    ds = geodata.Dataset(regions, flows)
    with pytest.warns(BaselineWarning):
        fit = baselines.fit_gravity(ds, [0, 1])
    assert fit.warning


def test_gravity_loss_grid_kernel_matches_direct():
    ds = baselines.gravity_synthetic(GravityParams(0.5, 1.0), n_regions=40, mean_outflow=300, seed=1)
    pops = np.maximum(ds.regions.population, 1)
    direct = 0.0
    for o in range(40):
        d, v = ds.flows.of_origin(o)
        p = baselines.gravity_probs(pops[d], ds.distances_from(o, d), GravityParams(0.8, 1.3))
        direct -= np.sum(v / v.sum() * np.log(p))
    assert abs(baselines.gravity_loss(ds, range(40), 0.8, 1.3) - direct) <= 1e-9 * abs(direct)


def test_radiation_raw_examples():
    assert baselines.radiation_raw(1, 1, 0) == 0.5
    assert baselines.radiation_raw(5, 0, 3) == 0.0
    vals = [float(baselines.radiation_raw(4, 7, s)) for s in (0, 1, 10, 100)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    p, q, s = np.array([3.0, 8.0]), np.array([5.0, 2.0]), np.array([1.0, 40.0])
    assert np.allclose(baselines.radiation_raw(p, q, s), baselines.radiation_raw(10 * p, 10 * q, 10 * s))


def test_radiation_probs():
    p = baselines.radiation_probs(10.0, np.array([5.0, 20.0, 7.0]), np.array([0.0, 3.0, 30.0]))
    assert abs(p.sum() - 1) <= 1e-9
    with pytest.warns(BaselineWarning):
        u = baselines.radiation_probs(10.0, np.zeros(4), np.zeros(4))
    assert np.allclose(u, 0.25)
    with pytest.raises(ValueError):
        baselines.radiation_probs(0.0, np.ones(2), np.zeros(2))


def _line(pops_at):
    """Regions on the x axis: origin at 0, then (distance, population) pairs."""
    xs = [0.0] + [d for d, _ in pops_at]
    pops = [1.0] + [p for _, p in pops_at]
    feats = np.zeros((len(xs), 20))
    feats[:, 0] = pops
    regions = geodata.RegionTable([f"R{k}" for k in range(len(xs))], np.column_stack([xs, np.zeros(len(xs))]), feats)
    return geodata.Dataset(regions, geodata.FlowTable([], [], [], len(xs)))


def test_intervening_population_examples():
    ds = _line([(1, 10), (2, 20), (3, 30)])
    assert baselines.intervening_population(ds, 0, 3) == 30.0
    assert baselines.intervening_population(ds, 0, 1) == 0.0
    ds2 = _line([(1, 10), (2, 20), (3, 30), (9, 500)])
    assert baselines.intervening_population(ds2, 0, 3) == 30.0
    # a region at exactly the destination's distance is excluded
    ds3 = _line([(1, 10), (3, 20), (-3, 30)])
    assert baselines.intervening_population(ds3, 0, 2) == 10.0


def test_intervening_matrix_matches_scalar(city):
    S = baselines.intervening_matrix(city)
    for o, d in [(0, 5), (3, 40), (10, 11), (48, 0)]:
        assert S[o, d] == baselines.intervening_population(city, o, d)


def test_predictions_allocate_outflow(city):
    origins = sorted(int(o) for o in city.flows.origins_with_flows())
    out = city.flows.outflow()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BaselineWarning)
        fit = baselines.fit_gravity(city, origins)
    for pred in (baselines.gravity_predict(city, fit, origins), baselines.radiation_predict(city, origins)):
        for o in origins:
            assert abs(sum(v for (a, _), v in pred.items() if a == o) - out[o]) <= 1e-9 * out[o]
