"""Explainability exports: residual grids, attention maps, embedding clusters."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage

from . import kernels
from .features import Featurizer, OriginBatch
from .locenc import encode_inputs, rle_apply
from .model import ModelConfig, forward_origin


class AnalysisWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# residual grids


@dataclass
class ResidualGrid:
    cell_size: float
    lambda_max: float
    cells: dict                       # (ix, iy) -> (mean residual, count)
    n_clamped: int = 0
    occupancy: dict | None = None     # diff grids only: (ix, iy) -> "both" | "a" | "b"

    @property
    def n_cells(self) -> int:
        return int(math.ceil(2.0 * self.lambda_max / self.cell_size))

    def center(self, ix: int, iy: int) -> tuple[float, float]:
        c = self.cell_size
        return (-self.lambda_max + (ix + 0.5) * c, -self.lambda_max + (iy + 0.5) * c)

    def total_mass(self) -> float:
        return float(sum(m * n for m, n in self.cells.values()))


def residual_grid(rl, residuals, lambda_max: float, cell_size: float = 20.0) -> ResidualGrid:
    """Mean residual per cell of relative location; out-of-extent flows go to edge cells."""
    rl = np.asarray(rl, dtype=np.float64).reshape(-1, 2)
    res = np.asarray(residuals, dtype=np.float64).reshape(-1)
    if len(rl) != len(res):
        raise ValueError("one residual per relative location")
    ix, iy, n_clamped = kernels.bin_cells(rl, cell_size, lambda_max)
    if n_clamped:
        warnings.warn(f"{n_clamped} flows outside the grid extent were clamped", AnalysisWarning, stacklevel=2)
    n = int(math.ceil(2.0 * lambda_max / cell_size))
    key = ix * n + iy
    uniq, inv = np.unique(key, return_inverse=True)
    sums = np.bincount(inv, weights=res, minlength=len(uniq))
    counts = np.bincount(inv, minlength=len(uniq))
    cells = {(int(k // n), int(k % n)): (float(s / c), int(c)) for k, s, c in zip(uniq, sums, counts)}
    return ResidualGrid(cell_size, lambda_max, cells, n_clamped)


def residual_diff_grid(a: ResidualGrid, b: ResidualGrid) -> ResidualGrid:
    """Cellwise ``a - b``; a cell present in only one grid is compared against 0."""
    if a.cell_size != b.cell_size or a.lambda_max != b.lambda_max:
        raise ValueError("residual grids have different geometry")
    cells, occ = {}, {}
    for key in sorted(set(a.cells) | set(b.cells)):
        ma, na = a.cells.get(key, (0.0, 0))
        mb, nb = b.cells.get(key, (0.0, 0))
        cells[key] = (ma - mb, na + nb)
        occ[key] = "both" if na and nb else ("a" if na else "b")
    return ResidualGrid(a.cell_size, a.lambda_max, cells, a.n_clamped + b.n_clamped, occ)


def flow_residuals(dataset, predicted: dict, origins=None):
    """(rl, real - predicted) for every observed flow of ``origins`` (all by default)."""
    flows = dataset.flows
    keep = np.ones(len(flows), dtype=bool) if origins is None else np.isin(flows.origin, sorted(origins))
    o, d, v = flows.origin[keep], flows.dest[keep], flows.volume[keep]
    pred = np.array([predicted.get((int(a), int(b)), 0.0) for a, b in zip(o, d)])
    rl = dataset.planar_xy[o] - dataset.planar_xy[d]
    return rl, v - pred


def write_residual_csv(grid: ResidualGrid, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["ix", "iy", "x_center_m", "y_center_m", "mean_residual", "count"]
        w.writerow(head + (["occupancy"] if grid.occupancy is not None else []))
        for (ix, iy) in sorted(grid.cells):
            m, n = grid.cells[(ix, iy)]
            x, y = grid.center(ix, iy)
            row = [ix, iy, repr(x), repr(y), repr(m), n]
            if grid.occupancy is not None:
                row.append(grid.occupancy[(ix, iy)])
            w.writerow(row)


def _diverging(v: float, vmax: float) -> str:
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def write_grid_svg(values: dict, n_cells: int, path, title: str = "", categorical: bool = False,
                   px: float | None = None) -> None:
    """One rect per occupied cell; diverging red/blue ramp centred at 0, or a categorical palette."""
    px = px or max(1.0, 600.0 / n_cells)
    size = n_cells * px
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
    vmax = max((abs(v) for v in values.values()), default=0.0)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160:.0f}" height="{size:.0f}">',
             f"<title>{title}</title>"]
    for (ix, iy), v in sorted(values.items()):
        fill = palette[int(v) % len(palette)] if categorical else _diverging(v, vmax)
        y = (n_cells - 1 - iy) * px
        parts.append(f'<rect x="{ix * px:.2f}" y="{y:.2f}" width="{px:.2f}" height="{px:.2f}" fill="{fill}"/>')
    lx = size + 20
    if categorical:
        for k in sorted({int(v) for v in values.values()}):
            parts.append(f'<rect x="{lx}" y="{20 + 18 * k}" width="12" height="12" fill="{palette[k % 10]}"/>')
            parts.append(f'<text x="{lx + 18}" y="{31 + 18 * k}" font-size="11">cluster {k}</text>')
    else:
        for k, t in enumerate((1.0, 0.5, 0.0, -0.5, -1.0)):
            parts.append(f'<rect x="{lx}" y="{20 + 18 * k}" width="12" height="12" fill="{_diverging(t, 1.0)}"/>')
            parts.append(f'<text x="{lx + 18}" y="{31 + 18 * k}" font-size="11">{t * vmax:+.3g}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# attention maps


@dataclass
class AttentionMap:
    origin_id: str
    matrix: np.ndarray                 # (n, n) over real destinations
    dest_ids: list
    influencers: list                  # [(region id, score)], best first
    layers: np.ndarray = field(repr=False, default=None)   # (L, h, n, n)


def attention_map(batch: OriginBatch, params: dict, config: ModelConfig, featurizer: Featurizer,
                  top_k: int = 10) -> AttentionMap:
    """Layer- and head-averaged attention among the origin's real destinations."""
    if config.predictor_variant != "transformer":
        raise ValueError("attention maps need the transformer predictor")
    res = forward_origin(batch, params, config, featurizer, mode="eval")
    m = batch.n_real
    layers = res.attentions[:, :, :m, :m]
    matrix = layers.mean(axis=(0, 1))
    scores = matrix.mean(axis=0)
    order = sorted(range(m), key=lambda j: (-scores[j], j))[:top_k]
    ids = batch.dest_ids[:m]
    return AttentionMap(batch.origin_id, matrix, ids, [(ids[j], float(scores[j])) for j in order], layers)


def write_attention_csv(amap: AttentionMap, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_dest_id", "col_dest_id", "weight"])
        for i, ri in enumerate(amap.dest_ids):
            for j, cj in enumerate(amap.dest_ids):
                w.writerow([ri, cj, repr(float(amap.matrix[i, j]))])


def write_influencers_csv(amap: AttentionMap, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "region_id", "score"])
        for rank, (rid, s) in enumerate(amap.influencers, start=1):
            w.writerow([rank, rid, repr(s)])


def write_attention_layers_csv(amap: AttentionMap, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "head", "row_dest_id", "col_dest_id", "weight"])
        L, H = amap.layers.shape[:2]
        for layer in range(L):
            for h in range(H):
                for i, ri in enumerate(amap.dest_ids):
                    for j, cj in enumerate(amap.dest_ids):
                        w.writerow([layer, h, ri, cj, repr(float(amap.layers[layer, h, i, j]))])


# --------------------------------------------------------------------------
# embedding clusters


@dataclass
class ClusterGrid:
    centers: np.ndarray      # (grid_n,) cell-centre coordinate along each axis
    labels: np.ndarray       # (grid_n * grid_n,), index ix * grid_n + iy
    linkage: np.ndarray | None
    degenerate: bool = False

    @property
    def grid_n(self) -> int:
        return len(self.centers)

    def cell_centers(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.centers, self.centers, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])


def grid_centers(lambda_max: float, grid_n: int = 100) -> np.ndarray:
    edges = np.linspace(-lambda_max, lambda_max, grid_n + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def rle_embeddings(params: dict, config: ModelConfig, rl: np.ndarray) -> np.ndarray:
    if config.rle_variant == "none":
        raise ValueError("model has no relative-location encoder")
    pe_a, pe_b = encode_inputs(rl, config.encoder(), config.rle_variant)
    return rle_apply(pe_a, pe_b, params, config.rle_variant)[0]


def _canonical_labels(raw: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    mapping: dict = {}
    out = np.empty(len(raw), dtype=np.int64)
    for i, r in enumerate(raw):
        out[i] = mapping.setdefault(int(r), len(mapping))
    return out


def cluster_embeddings(params: dict, config: ModelConfig, lambda_max: float, grid_n: int = 100,
                       k: int = 10, eval_order=None) -> ClusterGrid:
    """Ward clustering of encoder outputs on a grid_n x grid_n lattice over [-lmax, lmax]^2.

    ``eval_order`` permutes the order in which cells are evaluated; the
    partition does not depend on it because rows are sorted canonically
    before linkage.
    """
    centers = grid_centers(lambda_max, grid_n)
    pts = ClusterGrid(centers, np.zeros(0), None).cell_centers()
    order = np.arange(len(pts)) if eval_order is None else np.asarray(eval_order)
    emb = np.empty((len(pts), config.d_loc))
    emb[order] = rle_embeddings(params, config, pts[order])
    uniq, inverse = np.unique(emb, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    if len(uniq) == 1 or k == 1:
        if len(uniq) == 1:
            warnings.warn("all grid embeddings identical; single cluster", AnalysisWarning, stacklevel=2)
        return ClusterGrid(centers, np.zeros(len(pts), dtype=np.int64), None, len(uniq) == 1)
    Z = linkage(uniq, method="ward")
    raw = cut_tree(Z, n_clusters=min(k, len(uniq)))[:, 0]
    labels = _canonical_labels(raw[inverse])
    return ClusterGrid(centers, labels, Z)


def write_cluster_csv(grid: ClusterGrid, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ix", "iy", "x_center_m", "y_center_m", "label", "radius_m", "bearing_rad"])
        n = grid.grid_n
        for ix in range(n):
            for iy in range(n):
                x, y = grid.centers[ix], grid.centers[iy]
                w.writerow([ix, iy, repr(float(x)), repr(float(y)), int(grid.labels[ix * n + iy]),
                            repr(float(math.hypot(x, y))), repr(float(math.atan2(y, x)))])


def non_concentric_pairs(grid: ClusterGrid, rel_tol: float = 0.02, limit: int | None = None) -> list:
    """Pairs of cells with radii within ``rel_tol`` but different cluster labels."""
    pts = grid.cell_centers()
    r = np.hypot(pts[:, 0], pts[:, 1])
    order = np.argsort(r, kind="stable")
    rs, labs = r[order], grid.labels[order]
    found = []
    for a in range(len(rs)):
        b = a + 1
        while b < len(rs) and rs[b] <= rs[a] * (1 + rel_tol):
            if labs[b] != labs[a]:
                found.append((int(order[a]), int(order[b])))
                if limit is not None and len(found) >= limit:
                    return found
            b += 1
    return found
