"""Regions, flows, geometry, origin splits and the synthetic city generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .nnkernel import make_rng

EARTH_RADIUS_M = 6_371_008.8

FEATURE_COLUMNS = (
    "population",
    "food_pt_amenity", "food_pt_shop", "food_poly_amenity", "food_poly_shop",
    "retail_pt_amenity", "retail_pt_shop", "retail_poly_amenity", "retail_poly_shop",
    "edu_pt_amenity", "edu_poly_amenity", "edu_poly_building",
    "health_pt_amenity", "health_poly_amenity", "health_poly_building",
    "transport_pt_amenity", "transport_pt_public", "transport_poly_amenity",
    "transport_poly_building", "transport_poly_public",
)
N_FEATURES = len(FEATURE_COLUMNS)
REGION_HEADER = ("region_id", "x", "y") + FEATURE_COLUMNS
FLOW_HEADER = ("origin_id", "dest_id", "volume")
CRS_MODES = ("planar", "geodesic")


class DataError(ValueError):
    """Invalid input data (schema, parse or invariant violation)."""


class SchemaError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class UnknownRegionError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


# --------------------------------------------------------------------------
# tables


@dataclass(frozen=True)
class Region:
    id: str
    centroid: tuple[float, float]
    features: tuple[float, ...]

    @property
    def population(self) -> float:
        return self.features[0]


class RegionTable:
    """Column-oriented region table; rows keep file order."""

    def __init__(self, ids: Sequence[str], xy, features):
        self.ids = [str(i) for i in ids]
        self.xy = np.asarray(xy, dtype=np.float64).reshape(len(self.ids), 2)
        self.features = np.asarray(features, dtype=np.float64).reshape(len(self.ids), N_FEATURES)
        self.index: dict[str, int] = {}
        for k, rid in enumerate(self.ids):
            if rid in self.index:
                raise DuplicateIdError(f"duplicate region id {rid!r}")
            self.index[rid] = k
        if not np.all(np.isfinite(self.xy)):
            raise DataError("region centroids must be finite")
        if not np.all(np.isfinite(self.features)) or np.any(self.features < 0):
            raise DataError("region features must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, rid) -> bool:
        return rid in self.index

    def __getitem__(self, rid: str) -> Region:
        k = self.idx(rid)
        return Region(rid, (float(self.xy[k, 0]), float(self.xy[k, 1])), tuple(self.features[k].tolist()))

    def idx(self, rid: str) -> int:
        try:
            return self.index[rid]
        except KeyError:
            raise UnknownRegionError(f"unknown region id {rid!r}") from None

    @property
    def population(self) -> np.ndarray:
        return self.features[:, 0]


class FlowTable:
    """Flows as parallel arrays of region indices and volumes."""

    def __init__(self, origin, dest, volume, n_regions: int):
        self.origin = np.asarray(origin, dtype=np.int64)
        self.dest = np.asarray(dest, dtype=np.int64)
        self.volume = np.asarray(volume, dtype=np.float64)
        self.n_regions = n_regions
        if np.any(self.volume < 0) or not np.all(np.isfinite(self.volume)):
            raise DataError("flow volumes must be finite and non-negative")
        pairs = self.origin * n_regions + self.dest
        if len(np.unique(pairs)) != len(pairs):
            raise DataError("duplicate (origin, destination) pair")
        order = np.lexsort((self.dest, self.origin))
        self.origin, self.dest, self.volume = self.origin[order], self.dest[order], self.volume[order]
        self._starts = np.searchsorted(self.origin, np.arange(n_regions + 1), side="left")

    def __len__(self) -> int:
        return len(self.volume)

    def of_origin(self, o: int) -> tuple[np.ndarray, np.ndarray]:
        """(destination indices, volumes) of origin index ``o``."""
        a, b = self._starts[o], self._starts[o + 1]
        return self.dest[a:b], self.volume[a:b]

    def outflow(self) -> np.ndarray:
        return np.bincount(self.origin, weights=self.volume, minlength=self.n_regions)

    def origins_with_flows(self) -> np.ndarray:
        return np.flatnonzero(np.diff(self._starts) > 0)


@dataclass
class Dataset:
    regions: RegionTable
    flows: FlowTable
    crs_mode: str = "planar"
    lambda_max: float = 0.0

    def __post_init__(self):
        if self.crs_mode not in CRS_MODES:
            raise DataError(f"crs_mode must be one of {CRS_MODES}, got {self.crs_mode!r}")
        if self.lambda_max <= 0:
            self.lambda_max = study_diameter(self.regions.xy, self.crs_mode)
        self._planar = planar_coordinates(self.regions.xy, self.crs_mode)

    @property
    def planar_xy(self) -> np.ndarray:
        """Centroids in planar meters (projected when geodesic)."""
        return self._planar

    def distances_from(self, o: int, dests=None) -> np.ndarray:
        xy = self.regions.xy
        d = xy if dests is None else xy[np.asarray(dests)]
        return distance(xy[o], d, self.crs_mode)

    def distance_matrix(self) -> np.ndarray:
        xy = self.regions.xy
        return distance(xy[:, None, :], xy[None, :, :], self.crs_mode)

    def rel_locations(self, o: int, dests) -> np.ndarray:
        p = self._planar
        return relative_location(p[o], p[np.asarray(dests)])


@dataclass(frozen=True)
class SplitAssignment:
    train_origins: frozenset
    val_origins: frozenset
    test_origins: frozenset
    seed: int

    def of(self, name: str) -> frozenset:
        return {"train": self.train_origins, "val": self.val_origins, "test": self.test_origins}[name]


# --------------------------------------------------------------------------
# csv io


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row]
    return [h.strip() for h in header], rows


def _float(value: str, path, line: int, col: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse {col}={value!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"{path}:{line}: {col} is not finite")
    return v


def load_regions(path) -> RegionTable:
    header, rows = _read_rows(path)
    if tuple(header) != REGION_HEADER:
        raise SchemaError(f"{path}: header does not match the regions schema "
                          f"({len(header)} columns, expected {len(REGION_HEADER)})")
    ids, xy, feats, seen = [], [], [], set()
    for line, row in rows:
        if len(row) != len(REGION_HEADER):
            raise SchemaError(f"{path}:{line}: expected {len(REGION_HEADER)} columns, got {len(row)}")
        rid = row[0].strip()
        if rid in seen:
            raise DuplicateIdError(f"{path}:{line}: duplicate region id {rid!r}")
        seen.add(rid)
        vals = [_float(v, path, line, c) for v, c in zip(row[1:], REGION_HEADER[1:])]
        if any(v < 0 for v in vals[2:]):
            bad = REGION_HEADER[3 + next(i for i, v in enumerate(vals[2:]) if v < 0)]
            raise DataError(f"{path}:{line}: negative feature {bad}")
        ids.append(rid)
        xy.append(vals[:2])
        feats.append(vals[2:])
    return RegionTable(ids, np.array(xy).reshape(-1, 2), np.array(feats).reshape(-1, N_FEATURES))


def load_flows(path, regions: RegionTable) -> FlowTable:
    header, rows = _read_rows(path)
    if tuple(header) != FLOW_HEADER:
        raise SchemaError(f"{path}: header must be {','.join(FLOW_HEADER)}")
    o, d, v, seen = [], [], [], set()
    for line, row in rows:
        if len(row) != 3:
            raise SchemaError(f"{path}:{line}: expected 3 columns, got {len(row)}")
        oid, did = row[0].strip(), row[1].strip()
        for rid in (oid, did):
            if rid not in regions:
                raise UnknownRegionError(f"{path}:{line}: unknown region id {rid!r}")
        vol = _float(row[2], path, line, "volume")
        if vol < 0:
            raise DataError(f"{path}:{line}: negative volume {vol}")
        if (oid, did) in seen:
            raise DataError(f"{path}:{line}: duplicate flow {oid}->{did}")
        seen.add((oid, did))
        o.append(regions.index[oid])
        d.append(regions.index[did])
        v.append(vol)
    return FlowTable(o, d, v, len(regions))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_regions(path, regions: RegionTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION_HEADER)
        for k, rid in enumerate(regions.ids):
            w.writerow([rid, _fmt(regions.xy[k, 0]), _fmt(regions.xy[k, 1])]
                       + [_fmt(x) for x in regions.features[k]])


def write_flows(path, flows: FlowTable, regions: RegionTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLOW_HEADER)
        for o, d, v in zip(flows.origin, flows.dest, flows.volume):
            w.writerow([regions.ids[o], regions.ids[d], _fmt(v)])


def load_dataset(regions_path, flows_path, crs_mode: str = "planar") -> Dataset:
    regions = load_regions(regions_path)
    flows = load_flows(flows_path, regions)
    return Dataset(regions, flows, crs_mode)


# --------------------------------------------------------------------------
# geometry


def distance(a, b, crs_mode: str = "planar"):
    """Planar Euclidean distance, or haversine meters for (lon, lat) degrees.

    Broadcasts over leading dimensions.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("distance: non-finite coordinates")
    if crs_mode == "planar":
        out = np.sqrt(np.sum((a - b) ** 2, axis=-1))
    elif crs_mode == "geodesic":
        lat_a, lat_b = a[..., 1], b[..., 1]
        if np.any(np.abs(lat_a) > 90) or np.any(np.abs(lat_b) > 90):
            raise ValueError("distance: latitude outside [-90, 90]")
        lon1, lat1, lon2, lat2 = map(np.radians, (a[..., 0], lat_a, b[..., 0], lat_b))
        h = (np.sin((lat2 - lat1) / 2) ** 2
             + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
        out = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    else:
        raise ValueError(f"unknown crs_mode {crs_mode!r}")
    return float(out) if np.ndim(out) == 0 else out


def planar_coordinates(xy, crs_mode: str, center=None) -> np.ndarray:
    """Identity for planar input; local equirectangular projection otherwise."""
    xy = np.asarray(xy, dtype=np.float64)
    if crs_mode == "planar":
        return xy.copy()
    lon0, lat0 = (xy.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64))
    lon, lat = np.radians(xy[:, 0] - lon0), np.radians(xy[:, 1] - lat0)
    x = EARTH_RADIUS_M * lon * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * lat
    return np.column_stack([x, y])


def relative_location(loc_o, loc_d) -> np.ndarray:
    """Origin minus destination, componentwise (planar meters)."""
    loc_o = np.asarray(loc_o, dtype=np.float64)
    loc_d = np.asarray(loc_d, dtype=np.float64)
    if not (np.all(np.isfinite(loc_o)) and np.all(np.isfinite(loc_d))):
        raise ValueError("relative_location: non-finite coordinates")
    return loc_o - loc_d


def study_diameter(xy, crs_mode: str = "planar") -> float:
    """Largest pairwise centroid distance (projected and native, whichever is larger)."""
    xy = np.asarray(xy, dtype=np.float64)
    if len(xy) < 2:
        return 1.0
    planar = planar_coordinates(xy, crs_mode)
    diam = float(pdist(planar).max())
    if crs_mode == "geodesic":
        iu = np.triu_indices(len(xy), 1)
        diam = max(diam, float(np.max(distance(xy[iu[0]], xy[iu[1]], "geodesic"))))
    return diam if diam > 0 else 1.0


def total_outflow(flows: FlowTable, regions: RegionTable, origin_id: str) -> float:
    o = regions.idx(origin_id)
    return float(flows.of_origin(o)[1].sum())


# --------------------------------------------------------------------------
# splitting


def _shares(n: int, ratios: Sequence[float]) -> list[int]:
    raw = [n * r for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    # largest remainder, earliest split first on ties
    order = sorted(range(len(ratios)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    for k in range(len(sizes)):
        if sizes[k] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[k] += 1
    return sizes


def split_by_origin(dataset: Dataset, ratios: Sequence[float] = (0.7, 0.1, 0.2),
                    seed: int = 1234) -> SplitAssignment:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    origins = [dataset.regions.ids[k] for k in dataset.flows.origins_with_flows()]
    if len(origins) < 3:
        raise ValueError(f"need at least 3 origins with flows to split, got {len(origins)}")
    perm = make_rng(seed, "split").permutation(len(origins))
    shuffled = [origins[k] for k in perm]
    a, b, _ = _shares(len(origins), ratios)
    return SplitAssignment(frozenset(shuffled[:a]), frozenset(shuffled[a:a + b]),
                           frozenset(shuffled[a + b:]), seed)


def write_split(path, split: SplitAssignment, regions: RegionTable) -> None:
    rows = []
    for name in ("train", "val", "test"):
        rows += [(regions.index[r], r, name) for r in split.of(name)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("region_id", "split"))
        for _, rid, name in sorted(rows):
            w.writerow((rid, name))
        fh.write(f"# seed={split.seed}\n")


def load_split(path) -> SplitAssignment:
    sets: dict[str, set] = {"train": set(), "val": set(), "test": set()}
    seed = 0
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# seed="):
                    seed = int(line.split("=", 1)[1])
                continue
            if line_no == 1:
                if line != "region_id,split":
                    raise SchemaError(f"{path}: header must be region_id,split")
                continue
            rid, name = line.rsplit(",", 1)
            if name not in sets:
                raise SchemaError(f"{path}:{line_no}: unknown split {name!r}")
            sets[name].add(rid)
    return SplitAssignment(frozenset(sets["train"]), frozenset(sets["val"]),
                           frozenset(sets["test"]), seed)


# --------------------------------------------------------------------------
# synthetic cities


@dataclass
class SynthConfig:
    """Generator settings.

    Destinations attract with mass ``m_j = 1 + sum of the 19 POI counts``;
    origins emit ``Poisson(mean_outflow * pop_i / mean(pop))`` commuters.
    """

    n_regions: int = 100
    extent_m: float = 20_000.0
    jitter: float = 0.5
    pop_log_mean: float = 7.0
    pop_log_sigma: float = 0.8
    poi_rate: float = 3.0
    activity_log_sigma: float = 1.0
    beta0: float = 1.0
    gamma0: float = 3.0
    epsilon: float = 0.0
    theta0: float = 0.0
    mean_outflow: float = 50.0

    def validate(self) -> None:
        if self.n_regions < 4:
            raise ValueError(f"n_regions must be >= 4, got {self.n_regions}")
        if not self.extent_m > 0:
            raise ValueError("extent_m must be positive")
        if not 0 <= self.jitter <= 1:
            raise ValueError("jitter must be in [0, 1]")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.gamma0 < 0 or self.mean_outflow <= 0:
            raise ValueError("gamma0 must be >= 0 and mean_outflow > 0")
        if self.pop_log_sigma < 0 or self.activity_log_sigma < 0 or self.poi_rate < 0:
            raise ValueError("feature law parameters must be non-negative")

    def to_items(self) -> list[tuple[str, str]]:
        return [(f.name, repr(getattr(self, f.name))) for f in fields(self)]


def attractiveness(features: np.ndarray) -> np.ndarray:
    return 1.0 + np.asarray(features)[..., 1:].sum(axis=-1)


def ground_truth_probs(xy: np.ndarray, features: np.ndarray, config: SynthConfig) -> np.ndarray:
    """Row-stochastic matrix P[i, j] of the planted model, zero diagonal."""
    n = len(xy)
    rl = xy[:, None, :] - xy[None, :, :]
    r = np.hypot(rl[..., 0], rl[..., 1])
    off = ~np.eye(n, dtype=bool)
    rbar = r[off].mean()
    theta = np.arctan2(rl[..., 1], rl[..., 0])
    decay = config.gamma0 * (1.0 + config.epsilon * np.cos(2.0 * (theta - config.theta0)))
    logw = config.beta0 * np.log(attractiveness(features))[None, :] - decay * r / rbar
    logw = np.where(off, logw, -np.inf)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def synth_city(config: SynthConfig | None = None, seed: int = 1234) -> Dataset:
    config = config or SynthConfig()
    config.validate()
    n = config.n_regions
    rng = make_rng(seed, "synth")
    side = int(math.ceil(math.sqrt(n)))
    spacing = config.extent_m / side
    cells = np.arange(n)
    base = np.column_stack([(cells % side + 0.5) * spacing, (cells // side + 0.5) * spacing])
    xy = base + rng.uniform(-0.5, 0.5, size=(n, 2)) * config.jitter * spacing

    pop = np.round(rng.lognormal(config.pop_log_mean, config.pop_log_sigma, size=n))
    activity = rng.lognormal(0.0, config.activity_log_sigma, size=n)
    pois = rng.poisson(config.poi_rate * activity[:, None], size=(n, N_FEATURES - 1))
    features = np.column_stack([pop, pois]).astype(np.float64)

    P = ground_truth_probs(xy, features, config)
    lam = config.mean_outflow * pop / pop.mean() if pop.mean() > 0 else np.full(n, config.mean_outflow)
    outflow = rng.poisson(lam)
    o_idx, d_idx, vol = [], [], []
    for i in range(n):
        if outflow[i] == 0:
            continue
        counts = rng.multinomial(outflow[i], P[i])
        nz = np.flatnonzero(counts)
        o_idx.append(np.full(len(nz), i))
        d_idx.append(nz)
        vol.append(counts[nz].astype(np.float64))
    ids = [f"R{k}" for k in range(n)]
    regions = RegionTable(ids, xy, features)
    flows = FlowTable(np.concatenate(o_idx) if o_idx else [], np.concatenate(d_idx) if d_idx else [],
                      np.concatenate(vol) if vol else [], n)
    return Dataset(regions, flows, "planar")


def write_ground_truth(path, config: SynthConfig, seed: int) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_items()] + [f"seed = {seed}"]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def origin_ids(regions: RegionTable, idx: Iterable[int]) -> list[str]:
    return [regions.ids[k] for k in idx]
