"""Common Part of Commuters, MAE and RMSE over origin-destination maps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

REPORT_HEADER = ("model", "dataset", "split", "cpc", "mae", "rmse", "n_pairs")


class UndefinedMetric(ValueError):
    """Both maps are identically zero (CPC is 0/0)."""


def _union(predicted: Mapping, real: Mapping) -> list:
    keys = sorted(set(predicted) | set(real))
    if not keys:
        raise ValueError("metrics need at least one origin-destination pair")
    return keys


def cpc(predicted: Mapping, real: Mapping) -> float:
    keys = _union(predicted, real)
    num = den = 0.0
    for k in keys:
        p, r = float(predicted.get(k, 0.0)), float(real.get(k, 0.0))
        if p < 0 or r < 0:
            raise ValueError(f"negative volume at {k}")
        num += min(p, r)
        den += p + r
    if den == 0:
        raise UndefinedMetric("CPC undefined: both flow maps are zero")
    return 2.0 * num / den


def mae(predicted: Mapping, real: Mapping) -> float:
    keys = _union(predicted, real)
    return sum(abs(float(predicted.get(k, 0.0)) - float(real.get(k, 0.0))) for k in keys) / len(keys)


def rmse(predicted: Mapping, real: Mapping) -> float:
    keys = _union(predicted, real)
    sq = sum((float(predicted.get(k, 0.0)) - float(real.get(k, 0.0))) ** 2 for k in keys)
    return math.sqrt(sq / len(keys))


@dataclass
class EvalReport:
    cpc: float
    mae: float
    rmse: float
    n_pairs: int
    scope: str = "observed OD pairs of the scored origins plus pairs with nonzero predicted volume"

    def row(self, model: str, dataset: str, split: str) -> list:
        return [model, dataset, split, repr(self.cpc), repr(self.mae), repr(self.rmse), self.n_pairs]


def evaluate(predicted: Mapping, real: Mapping) -> EvalReport:
    """Score over observed pairs plus every pair the prediction gives nonzero volume."""
    universe = set(real) | {k for k, v in predicted.items() if v > 0}
    pred = {k: predicted.get(k, 0.0) for k in universe}
    obs = {k: real.get(k, 0.0) for k in universe}
    return EvalReport(cpc(pred, obs), mae(pred, obs), rmse(pred, obs), len(universe))


def append_report(path, report: EvalReport, model: str, dataset: str, split: str) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(REPORT_HEADER)
        w.writerow(report.row(model, dataset, split))
