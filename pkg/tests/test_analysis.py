import csv
import dataclasses

import numpy as np
import pytest

from transflower import analysis, model, train
from transflower.analysis import AnalysisWarning
from transflower.features import OriginBatch, build_origin_batch


def test_residual_grid_examples():
    g = analysis.residual_grid([[5.0, 5.0]], [3.5], lambda_max=100.0)
    assert list(g.cells.values()) == [(3.5, 1)]
    g = analysis.residual_grid([[1.0, 1.0], [2.0, 3.0]], [1.0, 3.0], lambda_max=100.0)
    assert list(g.cells.values()) == [(2.0, 2)]
    g = analysis.residual_grid(np.random.default_rng(0).normal(size=(50, 2)) * 30, np.zeros(50), 100.0)
    assert all(m == 0 for m, _ in g.cells.values())
    assert g.n_cells == 10


def test_residual_grid_cell_indices_and_clamping():
    g = analysis.residual_grid([[-100.0, -100.0], [99.9, 0.0]], [1.0, 2.0], 100.0)
    assert set(g.cells) == {(0, 0), (9, 5)}
    with pytest.warns(AnalysisWarning):
        g = analysis.residual_grid([[1e6, 0.0], [-1e6, -1e6]], [1.0, 2.0], 100.0)
    assert g.n_clamped == 2 and set(g.cells) == {(9, 5), (0, 0)}


def test_residual_grid_conserves_mass(rng):
    rl = rng.uniform(-900, 900, size=(2000, 2))
    res = rng.normal(size=2000) * 10
    g = analysis.residual_grid(rl, res, 1000.0)
    assert abs(g.total_mass() - res.sum()) <= 1e-6


def test_residual_diff(rng):
    rl = rng.uniform(-90, 90, size=(40, 2))
    a = analysis.residual_grid(rl, rng.normal(size=40), 100.0)
    b = analysis.residual_grid(rl[:30], rng.normal(size=30), 100.0)
    assert all(m == 0 for m, _ in analysis.residual_diff_grid(a, a).cells.values())
    ab, ba = analysis.residual_diff_grid(a, b), analysis.residual_diff_grid(b, a)
    for k in ab.cells:
        assert ab.cells[k][0] == -ba.cells[k][0]
    x = analysis.ResidualGrid(20.0, 100.0, {(1, 1): (5.0, 3)})
    y = analysis.ResidualGrid(20.0, 100.0, {(1, 1): (2.0, 1), (2, 2): (1.0, 1)})
    d = analysis.residual_diff_grid(x, y)
    assert d.cells[(1, 1)][0] == 3.0 and d.occupancy == {(1, 1): "both", (2, 2): "b"}
    with pytest.raises(ValueError):
        analysis.residual_diff_grid(x, analysis.ResidualGrid(10.0, 100.0, {}))


def test_residual_csv(tmp_path):
    g = analysis.ResidualGrid(20.0, 100.0, {(0, 0): (1.5, 2)})
    analysis.write_residual_csv(g, tmp_path / "r.csv")
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows[0] == ["ix", "iy", "x_center_m", "y_center_m", "mean_residual", "count"]
    assert rows[1] == ["0", "0", "-90.0", "-90.0", "1.5", "2"]


@pytest.fixture(scope="module")
def trained(city, city_split):
    mc = model.ModelConfig(d_geo=16, d_loc=8, n_heads=2, ffn_hidden=16, max_destinations=32, lambda_min=200.0,
                           lambda_max=city.lambda_max, n_scales=6)
    params, _ = train.train(city, city_split, mc, train.TrainConfig(learning_rate=1e-3, max_epochs=4, batch_origins=8))
    return mc, params, train.featurizer_for(city, mc, train.stats_of(params))


def test_attention_map_contracts(city, trained, tmp_path):
    mc, params, feat = trained
    b = build_origin_batch(3, city.flows, city.regions.ids, 32, 1, 0)
    amap = analysis.attention_map(b, params, mc, feat)
    assert amap.matrix.shape == (b.n_real, b.n_real)
    assert np.allclose(amap.matrix.sum(axis=1), 1, atol=1e-6)
    assert len(amap.influencers) == min(10, b.n_real)
    scores = [s for _, s in amap.influencers]
    assert scores == sorted(scores, reverse=True)
    analysis.write_attention_csv(amap, tmp_path / "a.csv")
    analysis.write_influencers_csv(amap, tmp_path / "i.csv")
    assert (tmp_path / "a.csv").read_text().startswith("row_dest_id,col_dest_id,weight\n")
    assert (tmp_path / "i.csv").read_text().startswith("rank,region_id,score\n")


def test_attention_singleton_and_uniform(city, trained):
    mc, params, feat = trained
    one = OriginBatch(0, "R0", np.array([4]), ["R4"], np.ones(1), np.ones(1, bool), 3.0)
    amap = analysis.attention_map(one, params, mc, feat)
    assert amap.matrix.tolist() == [[1.0]] and len(amap.influencers) == 1
    p = dict(params)
    for layer in range(mc.n_layers):
        p[f"layers.{layer}.attn.wq"] = np.zeros_like(p[f"layers.{layer}.attn.wq"])
    b = build_origin_batch(3, city.flows, city.regions.ids, 32, 1, 0)
    scores = [s for _, s in analysis.attention_map(b, p, mc, feat).influencers]
    assert np.allclose(scores, scores[0])


def test_cluster_grid(trained, tmp_path):
    mc, params, _ = trained
    grid = analysis.cluster_embeddings(params, mc, mc.lambda_max, grid_n=30, k=10)
    assert len(grid.labels) == 900 and len(set(grid.labels.tolist())) == 10
    assert analysis.cluster_embeddings(params, mc, mc.lambda_max, grid_n=30, k=1).labels.max() == 0
    analysis.write_cluster_csv(grid, tmp_path / "c.csv")
    rows = list(csv.DictReader((tmp_path / "c.csv").open()))
    assert len(rows) == 900 and set(rows[0]) >= {"ix", "iy", "x_center_m", "y_center_m", "label"}


def test_cluster_permutation_stability(trained):
    mc, params, _ = trained
    a = analysis.cluster_embeddings(params, mc, mc.lambda_max, grid_n=20)
    perm = np.random.default_rng(5).permutation(400)
    b = analysis.cluster_embeddings(params, mc, mc.lambda_max, grid_n=20, eval_order=perm)
    pairs = {(x, y) for x, y in zip(a.labels, b.labels)}
    assert len(pairs) == len(set(a.labels.tolist())) == len(set(b.labels.tolist()))


def test_cluster_degenerate(trained):
    mc, params, _ = trained
    p = dict(params)
    p["rle.fuse.W"] = np.zeros_like(p["rle.fuse.W"])
    p["rle.fuse.b"] = np.zeros_like(p["rle.fuse.b"])
    with pytest.warns(AnalysisWarning):
        g = analysis.cluster_embeddings(p, mc, mc.lambda_max, grid_n=10)
    assert g.degenerate and np.all(g.labels == 0)
    with pytest.raises(ValueError):
        analysis.cluster_embeddings(params, dataclasses.replace(mc, rle_variant="none"), mc.lambda_max, grid_n=5)


def test_non_concentric_pairs():
    centers = analysis.grid_centers(1.0, 4)
    ring = analysis.ClusterGrid(centers, np.zeros(16, dtype=np.int64), None)
    assert analysis.non_concentric_pairs(ring) == []
    labels = np.zeros(16, dtype=np.int64)
    labels[0] = 1  # one corner differs from the other three corners at equal radius
    assert analysis.non_concentric_pairs(analysis.ClusterGrid(centers, labels, None))


def test_svg_export(tmp_path):
    analysis.write_grid_svg({(0, 0): 1.0, (1, 1): -2.0}, 2, tmp_path / "g.svg", "t")
    text = (tmp_path / "g.svg").read_text()
    assert text.startswith("<svg") and text.count("<rect") >= 2
