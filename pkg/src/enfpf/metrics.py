"""Wasserstein-1 distances between equal-size empirical measures and statistic errors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ContractViolation

MAX_ASSIGNMENT_SIZE = 2000


def w1_sorted(samples_a, samples_b) -> float:
    """Exact W1 between two equal-size 1-D samples (sorted pairing)."""
    a = np.sort(np.ravel(np.asarray(samples_a, dtype=float)))
    b = np.sort(np.ravel(np.asarray(samples_b, dtype=float)))
    if a.size != b.size or a.size == 0:
        raise ContractViolation(f"need equal, non-zero sample counts (got {a.size} and {b.size})")
    return float(np.mean(np.abs(a - b)))


def w1_assignment(points_a, points_b) -> float:
    """Exact W1 between equal-size point clouds under the Euclidean cost.

    Solved as a linear assignment problem, which is optimal for uniform
    weights on equal numbers of points.
    """
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    n = a.shape[0]
    if b.shape[0] != n or n == 0:
        raise ContractViolation(f"need equal, non-zero point counts (got {a.shape[0]} and {b.shape[0]})")
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("point sets have different dimensions")
    if n > MAX_ASSIGNMENT_SIZE:
        raise ContractViolation(f"assignment W1 limited to n <= {MAX_ASSIGNMENT_SIZE}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)


def marginal_w1_mean(ens_a, ens_b) -> float:
    """Mean over coordinates of the 1-D W1 between marginals."""
    a = np.atleast_2d(np.asarray(ens_a, dtype=float))
    b = np.atleast_2d(np.asarray(ens_b, dtype=float))
    if a.shape != b.shape:
        raise ContractViolation(f"ensemble shapes differ: {a.shape} vs {b.shape}")
    # vectorised per-column sorted pairing
    return float(np.mean(np.abs(np.sort(a, axis=0) - np.sort(b, axis=0))))


def stat_rmse(stats_a, stats_b) -> float:
    a = np.asarray(stats_a, dtype=float)
    b = np.asarray(stats_b, dtype=float)
    if a.shape != b.shape:
        raise ContractViolation("statistic vectors differ in length")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class MetricSeries:
    label: str
    cycle_index: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cycle_index) != len(self.value):
            raise ContractViolation("cycle_index and value differ in length")

    def append(self, cycle, value):
        self.cycle_index.append(int(cycle))
        self.value.append(float(value))

    def __len__(self):
        return len(self.value)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.value, dtype=float)

    def to_csv(self, path, append=False):
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(["cycle", "value", "label"])
            for c, v in zip(self.cycle_index, self.value):
                w.writerow([c, repr(v), self.label])

    @staticmethod
    def read_csv(path) -> dict:
        out = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.setdefault(row["label"], MetricSeries(row["label"])).append(
                    int(row["cycle"]), float(row["value"])
                )
        return out
