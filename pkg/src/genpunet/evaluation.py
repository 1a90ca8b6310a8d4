"""Generalized energy distance, its overlap/diversity terms, and the Wilcoxon signed-rank test."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import AnnotatedCase, stack_images
from .model import GenProbUNet, forward_sample

CASE_COLUMNS = ["case_id", "ged_squared", "cross_term", "diversity_term", "interobserver_term"]


class UndefinedTestError(ValueError):
    """Raised when every paired difference is zero."""


def iou_distance(a, b) -> float:
    """``1 - |a & b| / |a | b|``; two empty masks are at distance 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 0.0
    return 1.0 - int(np.count_nonzero(a & b)) / union


def pairwise_iou_distance(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """``len(xs) x len(ys)`` matrix of IoU distances between flattened binary masks."""
    xs = xs.reshape(len(xs), -1).astype(np.int64)
    ys = ys.reshape(len(ys), -1).astype(np.int64)
    inter = xs @ ys.T
    union = xs.sum(1)[:, None] + ys.sum(1)[None, :] - inter
    out = np.zeros(inter.shape)
    nz = union > 0
    out[nz] = 1.0 - inter[nz] / union[nz]
    return out


@dataclass(frozen=True)
class GedEntry:
    ged_squared: float
    cross_term: float
    diversity_term: float
    interobserver_term: float
    case_id: str = ""


def _mean(d: np.ndarray) -> float:
    return math.fsum(d.ravel().tolist()) / d.size


def ged(prediction_samples, reference_masks, case_id: str = "") -> GedEntry:
    """Squared generalized energy distance with d = 1 - IoU.

    Every term averages the full pair matrix.  The self terms include each
    mask paired with itself (distance 0), so a sample set equal to the
    reference set scores exactly 0.
    """
    S = np.asarray(prediction_samples, dtype=bool)
    Y = np.asarray(reference_masks, dtype=bool)
    if len(S) < 2 or len(Y) < 2:
        raise ValueError("ged needs at least two prediction samples and two reference masks")
    if S.shape[1:] != Y.shape[1:]:
        raise ValueError(f"shape mismatch: samples {S.shape[1:]} vs references {Y.shape[1:]}")
    cross = _mean(pairwise_iou_distance(S, Y))
    diversity = _mean(pairwise_iou_distance(S, S))
    inter = _mean(pairwise_iou_distance(Y, Y))
    return GedEntry(2 * cross - diversity - inter, cross, diversity, inter, case_id)


# -- reports ------------------------------------------------------------------

@dataclass
class TermSummary:
    mean: float
    std: float

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f}"


def summarize(values: Sequence[float]) -> TermSummary:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return TermSummary(float(arr.mean()), float(arr.std(ddof=0)))


@dataclass
class GedReport:
    entries: list

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.entries])

    def summary(self) -> dict:
        return {name: summarize(self.column(name)) for name in CASE_COLUMNS[1:]}

    def format_summary(self) -> str:
        lines = ["term, mean ± std (population)"]
        lines += [f"{name}, {s}" for name, s in self.summary().items()]
        return "\n".join(lines)


def write_case_csv(report: GedReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CASE_COLUMNS)
        for e in report.entries:
            writer.writerow([e.case_id, *(repr(float(getattr(e, c))) for c in CASE_COLUMNS[1:])])


def read_case_csv(path) -> GedReport:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CASE_COLUMNS:
            raise ValueError(f"{path}: expected columns {CASE_COLUMNS}, got {header}")
        entries = [GedEntry(float(r[1]), float(r[2]), float(r[3]), float(r[4]), r[0]) for r in reader if r]
    return GedReport(entries)


def case_rng(seed: int, case_id: str) -> np.random.Generator:
    """Per-case noise stream; stable across processes and batch compositions."""
    return np.random.default_rng([seed, zlib.crc32(case_id.encode("utf-8"))])


def evaluate_model(model: GenProbUNet, cases: Sequence[AnnotatedCase], n_samples: int = 16,
                   seed: int = 0, batch_size: int = 32, keep_samples: bool = False):
    """GED per case from ``n_samples`` prior samples.

    Returns the report, plus the ``n x H x W`` sample stacks per case when
    ``keep_samples`` is set.
    """
    entries, samples = [], []
    for start in range(0, len(cases), batch_size):
        chunk = list(cases[start:start + batch_size])
        out = forward_sample(model, stack_images(chunk), n_samples, [case_rng(seed, c.case_id) for c in chunk])
        for b, case in enumerate(chunk):
            entries.append(ged(out.masks[:, b], case.masks, case.case_id))
            if keep_samples:
                samples.append(out.masks[:, b])
    report = GedReport(entries)
    return (report, samples) if keep_samples else report


# -- Wilcoxon signed-rank test ------------------------------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    significant: bool
    n: int
    method: str


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_p(doubled_ranks: np.ndarray, w_plus_doubled: int) -> float:
    """Two-sided p-value from the exact null distribution of the signed-rank sum.

    Each rank enters with a + or - sign with probability 1/2; the count of
    sign assignments per total is built up one rank at a time (equivalent to
    enumerating all ``2**n`` assignments).
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    n_assign = 2 ** len(doubled_ranks)
    lower = sum(counts[:w_plus_doubled + 1])
    upper = sum(counts[w_plus_doubled:])
    return min(1.0, 2 * min(lower, upper) / n_assign)


def _normal_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2)))


def wilcoxon_signed_rank(a, b, alpha: float = 0.05, method: str = "auto") -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test.

    Zero differences are dropped and ties get mid-ranks.  ``method="auto"``
    uses the exact null distribution for ``n <= 25`` and the normal
    approximation (tie and continuity corrected) otherwise.  The statistic is
    ``min(W+, W-)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d arrays of equal length")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        raise UndefinedTestError("all paired differences are zero; the test is undefined")
    ranks = _midranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    if method == "auto":
        method = "exact" if n <= 25 else "approx"
    if method == "exact":
        p = _exact_p(2 * ranks, int(round(2 * w_plus)))
    elif method == "approx":
        p = _normal_p(ranks, w_plus)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(min(w_plus, w_minus), p, p < alpha, n, method)


def empty_fraction(samples: np.ndarray) -> float:
    """Share of masks with no foreground pixel."""
    samples = np.asarray(samples, dtype=bool)
    return float(np.mean(~samples.reshape(len(samples), -1).any(axis=1)))


@dataclass
class PairedMetricTable:
    """Per-model metric columns aligned by case id."""

    case_ids: list
    columns: dict  # model name -> 1-d float array, same order as case_ids

    def __post_init__(self):
        n = len(self.case_ids)
        if len(set(self.case_ids)) != n:
            raise ValueError("duplicate case ids")
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}
        for name, col in self.columns.items():
            if col.shape != (n,):
                raise ValueError(f"column {name!r} has {col.size} values for {n} cases")

    @classmethod
    def from_reports(cls, reports: dict, metric: str = "ged_squared") -> "PairedMetricTable":
        """Align reports on their case ids, which must be the same set for every model."""
        ids: Optional[list] = None
        columns = {}
        for name, rep in reports.items():
            by_id = {e.case_id: getattr(e, metric) for e in rep.entries}
            if len(by_id) != len(rep.entries):
                raise ValueError(f"report {name!r} lists a case more than once")
            if ids is None:
                ids = sorted(by_id)
            elif sorted(by_id) != ids:
                raise ValueError(f"case ids of {name!r} do not match the other reports")
            columns[name] = [by_id[i] for i in ids]
        return cls(ids or [], columns)

    def write_csv(self, path) -> None:
        names = list(self.columns)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", *names])
            for i, case_id in enumerate(self.case_ids):
                writer.writerow([case_id, *(repr(float(self.columns[n][i])) for n in names)])

    @classmethod
    def read_csv(cls, path) -> "PairedMetricTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
        if not rows or rows[0][0] != "case_id":
            raise ValueError(f"{path}: missing case_id header")
        names = rows[0][1:]
        body = rows[1:]
        return cls([r[0] for r in body], {n: [float(r[j + 1]) for r in body] for j, n in enumerate(names)})
