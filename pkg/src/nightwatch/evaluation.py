"""Precision / recall / F1 with one-to-one distance-gated matching."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .assignment import solve_lap
from .correlate import build_cost_matrix
from .geo import GeoPoint

DEFAULT_MATCH_RADIUS_M = 1500.0


@dataclass(frozen=True)
class ScoreReport:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0

    @property
    def precision(self) -> float:
        d = self.true_positives + self.false_positives
        return self.true_positives / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.true_positives + self.false_negatives
        return self.true_positives / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport(self.true_positives + other.true_positives,
                           self.false_positives + other.false_positives,
                           self.false_negatives + other.false_negatives)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1)
        return d


def match(predictions, truth, match_radius_m: float = DEFAULT_MATCH_RADIUS_M):
    """Optimal prediction->truth pairs ``[(i, j, distance_m)]`` within the radius."""
    if match_radius_m <= 0:
        raise ValueError("match_radius_m must be positive")
    preds = [getattr(p, "geo", p) for p in predictions]
    gts = [getattr(t, "geo", t) for t in truth]
    if not preds or not gts:
        return []
    costs = build_cost_matrix(preds, gts, match_radius_m)
    return [(i, j, float(costs[i, j])) for i, j in solve_lap(costs).pairs]


def score(predictions, truth, match_radius_m: float = DEFAULT_MATCH_RADIUS_M) -> ScoreReport:
    tp = len(match(predictions, truth, match_radius_m))
    return ScoreReport(tp, len(predictions) - tp, len(truth) - tp)


def read_points(path, kind: str | None = "vessel", status: str | None = "kept"):
    """GeoPoints from a JSON-lines file, filtered on ``kind``/``status`` when present."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if kind is not None and "kind" in d and d["kind"] != kind:
            continue
        if status is not None and "status" in d and d["status"] != status:
            continue
        out.append(GeoPoint(d["lat"], d["lon"]))
    return out
