import math

import numpy as np
import pytest
from scipy import optimize, stats

from transflower import geodata
from transflower.geodata import DataError, DuplicateIdError, SchemaError, UnknownRegionError

from conftest import region_rows

ABC = region_rows([("A", 0, 0, 10), ("B", 3, 4, 20), ("C", 6, 8, 30)])


def test_load_three_regions(write):
    regions = geodata.load_regions(write("r.csv", ABC))
    assert len(regions) == 3
    assert regions["B"].centroid == (3.0, 4.0)
    assert regions["C"].population == 30.0
    assert regions.features.shape == (3, 20)


def test_duplicate_region_id_is_named(write):
    text = region_rows([("A", 0, 0, 1), ("A", 1, 1, 1)])
    with pytest.raises(DuplicateIdError, match="'A'"):
        geodata.load_regions(write("r.csv", text))


def test_short_row_is_schema_error_with_line(write):
    lines = ABC.splitlines()
    lines[2] = lines[2].rsplit(",", 1)[0]
    with pytest.raises(SchemaError, match=":3:"):
        geodata.load_regions(write("r.csv", "\n".join(lines) + "\n"))


def test_negative_feature_and_bad_number(write):
    with pytest.raises(DataError, match="negative feature population"):
        geodata.load_regions(write("r.csv", region_rows([("A", 0, 0, -1)])))
    with pytest.raises(DataError, match="cannot parse"):
        geodata.load_regions(write("r.csv", region_rows([("A", "x", 0, 1)])))


def test_wrong_header(write):
    with pytest.raises(SchemaError):
        geodata.load_regions(write("r.csv", "region_id,x,y\nA,0,0\n"))


def test_load_flows_and_outflow(write):
    regions = geodata.load_regions(write("r.csv", ABC))
    flows = geodata.load_flows(write("f.csv", "origin_id,dest_id,volume\nA,B,5\nA,C,2\n"), regions)
    assert len(flows) == 2
    assert geodata.total_outflow(flows, regions, "A") == 7.0
    assert geodata.total_outflow(flows, regions, "B") == 0.0
    flows = geodata.load_flows(write("f.csv", "origin_id,dest_id,volume\nA,B,5\nB,C,2\n"), regions)
    assert geodata.total_outflow(flows, regions, "A") == 5.0
    with pytest.raises(UnknownRegionError):
        geodata.total_outflow(flows, regions, "Q")


@pytest.mark.parametrize("body,err", [
    ("A,Z,1", UnknownRegionError),
    ("A,B,-1", DataError),
    ("A,B,1\nA,B,2", DataError),
    ("A,B", SchemaError),
])
def test_bad_flows(write, body, err):
    regions = geodata.load_regions(write("r.csv", ABC))
    with pytest.raises(err):
        geodata.load_flows(write("f.csv", "origin_id,dest_id,volume\n" + body + "\n"), regions)


def test_csv_round_trip(tmp_path, city):
    geodata.write_regions(tmp_path / "r.csv", city.regions)
    geodata.write_flows(tmp_path / "f.csv", city.flows, city.regions)
    back = geodata.load_dataset(tmp_path / "r.csv", tmp_path / "f.csv")
    assert back.regions.ids == city.regions.ids
    assert np.array_equal(back.regions.xy, city.regions.xy)
    assert np.array_equal(back.regions.features, city.regions.features)
    assert np.array_equal(back.flows.volume, city.flows.volume)
    assert back.lambda_max == city.lambda_max


def test_distance_examples():
    assert geodata.distance((0, 0), (3, 4)) == 5.0
    assert geodata.distance((2, 7), (2, 7)) == 0.0
    # haversine at the equator reduces to R * (pi / 180) for one degree of longitude
    want = 6_371_008.8 * math.pi / 180
    got = geodata.distance((0, 0), (1, 0), "geodesic")
    assert abs(got - want) < 1e-6 and abs(got - 111_195) <= 1


def test_distance_errors():
    with pytest.raises(ValueError):
        geodata.distance((0, float("nan")), (0, 0))
    with pytest.raises(ValueError):
        geodata.distance((0, 95), (0, 0), "geodesic")


def test_distance_is_a_metric(rng):
    pts = rng.normal(size=(200, 3, 2)) * 1000
    a, b, c = pts[:, 0], pts[:, 1], pts[:, 2]
    dab, dba = geodata.distance(a, b), geodata.distance(b, a)
    assert np.all(dab >= 0) and np.array_equal(dab, dba)
    assert np.all(dab <= geodata.distance(a, c) + geodata.distance(c, b) + 1e-9)


def test_relative_location(rng):
    assert np.array_equal(geodata.relative_location((10, 20), (3, 4)), [7, 16])
    assert np.array_equal(geodata.relative_location((5, 5), (5, 5)), [0, 0])
    a, b = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    assert np.array_equal(geodata.relative_location(a, b), -geodata.relative_location(b, a))
    assert np.allclose(np.linalg.norm(geodata.relative_location(a, b), axis=1), geodata.distance(a, b))


def test_geodesic_projection_matches_haversine_locally():
    xy = np.array([[-71.06, 42.36], [-71.05, 42.37], [-71.08, 42.35]])
    p = geodata.planar_coordinates(xy, "geodesic")
    for i, j in ((0, 1), (0, 2), (1, 2)):
        hv = geodata.distance(xy[i], xy[j], "geodesic")
        assert abs(np.linalg.norm(p[i] - p[j]) - hv) / hv < 1e-3


def _ring_dataset(n_origins):
    ids = [f"R{k}" for k in range(n_origins + 1)]
    xy = np.column_stack([np.arange(n_origins + 1), np.zeros(n_origins + 1)]) * 100.0
    regions = geodata.RegionTable(ids, xy, np.ones((n_origins + 1, 20)))
    flows = geodata.FlowTable(np.arange(n_origins), np.full(n_origins, n_origins), np.ones(n_origins), n_origins + 1)
    return geodata.Dataset(regions, flows)


def test_split_sizes_and_partition():
    ds = _ring_dataset(10)
    split = geodata.split_by_origin(ds, (0.7, 0.1, 0.2), 1234)
    assert (len(split.train_origins), len(split.val_origins), len(split.test_origins)) == (7, 1, 2)
    union = split.train_origins | split.val_origins | split.test_origins
    assert union == {f"R{k}" for k in range(10)}
    assert sum(map(len, (split.train_origins, split.val_origins, split.test_origins))) == 10
    assert geodata.split_by_origin(ds, (0.7, 0.1, 0.2), 1234) == split


def test_split_seeds_differ_and_errors():
    ds = _ring_dataset(100)
    assert geodata.split_by_origin(ds, seed=1) != geodata.split_by_origin(ds, seed=2)
    with pytest.raises(ValueError):
        geodata.split_by_origin(_ring_dataset(2))
    with pytest.raises(ValueError):
        geodata.split_by_origin(ds, (0.5, 0.5, 0.5))


def test_split_round_trip(tmp_path, city, city_split):
    geodata.write_split(tmp_path / "s.csv", city_split, city.regions)
    assert geodata.load_split(tmp_path / "s.csv") == city_split


def test_synth_determinism_and_invariants():
    cfg = geodata.SynthConfig(n_regions=30, epsilon=0.3)
    a, b = geodata.synth_city(cfg, 9), geodata.synth_city(cfg, 9)
    assert np.array_equal(a.regions.xy, b.regions.xy)
    assert np.array_equal(a.regions.features, b.regions.features)
    assert np.array_equal(a.flows.volume, b.flows.volume) and np.array_equal(a.flows.dest, b.flows.dest)
    assert not np.any(a.flows.origin == a.flows.dest)
    assert a.lambda_max >= a.distance_matrix().max()
    with pytest.raises(ValueError):
        geodata.synth_city(geodata.SynthConfig(n_regions=3))
    with pytest.raises(ValueError):
        geodata.synth_city(geodata.SynthConfig(epsilon=1.0))


def test_synth_total_volume():
    ds = geodata.synth_city(geodata.SynthConfig(n_regions=100, mean_outflow=50), 7)
    assert abs(ds.flows.volume.sum() - 5000) <= 3 * math.sqrt(5000)


def _bearings(ds):
    rl = ds.regions.xy[ds.flows.origin] - ds.regions.xy[ds.flows.dest]
    return np.arctan2(rl[:, 1], rl[:, 0]), np.hypot(rl[:, 0], rl[:, 1])


def test_isotropic_city_has_no_direction_preference():
    cfg = geodata.SynthConfig(n_regions=100, mean_outflow=300, epsilon=0.0)
    ds = geodata.synth_city(cfg, 11)
    theta, _ = _bearings(ds)
    sector = ((theta + math.pi) / (2 * math.pi) * 8).astype(int) % 8
    observed = np.bincount(sector, weights=ds.flows.volume, minlength=8)
    # expected sector mass under the isotropic planted model, from geometry alone
    xy = ds.regions.xy
    rl = xy[:, None, :] - xy[None, :, :]
    P = geodata.ground_truth_probs(xy, ds.regions.features, cfg)
    sec_all = ((np.arctan2(rl[..., 1], rl[..., 0]) + math.pi) / (2 * math.pi) * 8).astype(int) % 8
    out = ds.flows.outflow()
    expected = np.array([(out[:, None] * P * (sec_all == s)).sum() for s in range(8)])
    expected *= observed.sum() / expected.sum()
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_anisotropic_decay_ratio():
    eps = 0.6
    cfg = geodata.SynthConfig(n_regions=400, mean_outflow=400, epsilon=eps)
    ds = geodata.synth_city(cfg, 5)
    xy = ds.regions.xy
    rl = xy[:, None, :] - xy[None, :, :]
    r = np.hypot(rl[..., 0], rl[..., 1])
    off = ~np.eye(len(xy), dtype=bool)
    r = r / r[off].mean()
    c2 = np.cos(2 * np.arctan2(rl[..., 1], rl[..., 0]))
    sector = np.where(c2 > 0.9, 0, np.where(c2 < -0.9, 1, 2))
    logm = np.log(geodata.attractiveness(ds.regions.features))
    V = np.zeros_like(r)
    V[ds.flows.origin, ds.flows.dest] = ds.flows.volume

    def nll(k):
        logw = logm[None, :] - k[sector] * r
        logw = np.where(off, logw, -np.inf)
        lse = np.log(np.exp(logw - logw.max(1, keepdims=True)).sum(1)) + logw.max(1)
        return -((V * np.where(off, logw, 0.0)).sum() - (V.sum(1) * lse).sum())

    k = optimize.minimize(nll, np.ones(3), method="L-BFGS-B", bounds=[(0.01, 20)] * 3).x
    # sector-averaged |cos 2(theta - theta0)| is about 0.96 inside |c2| > 0.9
    want = (1 + 0.96 * eps) / (1 - 0.96 * eps)
    assert abs(k[0] / k[1] - want) / want < 0.2, (k, want)
