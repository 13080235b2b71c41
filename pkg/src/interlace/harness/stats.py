"""Goodness-of-fit tests and local-law distances used by the checks."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "TestReport",
    "poisson_gof",
    "chi2_gof",
    "exp1_ks",
    "tv_local_law",
    "image_summary",
    "pass_rate",
    "mean_se",
]

MIN_SAMPLE = 1000


@dataclass
class TestReport:
    """Outcome of one statistical check at a declared level."""

    name: str
    statistic: float
    p_value: float | None
    n: int
    passed: bool
    level: float = 0.01
    seed: int | None = None
    margin: float | None = None
    detail: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        p = "n/a" if self.p_value is None else f"{self.p_value:.4g}"
        return (f"{self.name}: {'PASS' if self.passed else 'FAIL'} stat={self.statistic:.4g} "
                f"p={p} n={self.n}")


def _merge_cells(expected: np.ndarray, observed: np.ndarray, min_expected: float):
    """Merge adjacent cells left to right until each has at least ``min_expected``."""
    e_out, o_out = [], []
    e_acc = o_acc = 0.0
    for e, o in zip(expected, observed):
        e_acc += e
        o_acc += o
        if e_acc >= min_expected:
            e_out.append(e_acc)
            o_out.append(o_acc)
            e_acc = o_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if e_out:
            e_out[-1] += e_acc
            o_out[-1] += o_acc
        else:
            e_out.append(e_acc)
            o_out.append(o_acc)
    return np.array(e_out), np.array(o_out)


def chi2_gof(observed, probs, name: str = "chi2", level: float = 0.01, min_expected: float = 5.0,
             fitted: int = 0, seed: int | None = None) -> TestReport:
    """Pearson chi-square of counts against cell probabilities (merged to ``min_expected``)."""
    observed = np.asarray(observed, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = observed.sum()
    e, o = _merge_cells(probs * n, observed, min_expected)
    dof = e.size - 1 - fitted
    if dof < 1:
        return TestReport(name, 0.0, 1.0, int(n), True, level, seed, detail={"cells": int(e.size)})
    stat = float(((o - e) ** 2 / e).sum())
    p = float(stats.chi2.sf(stat, dof))
    return TestReport(name, stat, p, int(n), p >= level, level, seed, detail={"cells": int(e.size), "dof": dof})


def poisson_gof(counts, rate: float, level: float = 0.01, seed: int | None = None,
                name: str = "poisson_gof") -> TestReport:
    """Chi-square test of nonnegative integer counts against Poisson(rate).

    Cells ``0, 1, ...`` plus an upper tail, merged so every cell expects at
    least five counts.  Needs at least 1000 counts.
    """
    counts = np.asarray(counts)
    if counts.size < MIN_SAMPLE:
        raise ValueError(f"need at least {MIN_SAMPLE} counts, got {counts.size}")
    if rate <= 0:
        ok = bool(np.all(counts == 0))
        return TestReport(name, 0.0 if ok else math.inf, 1.0 if ok else 0.0, counts.size, ok, level, seed)
    top = int(max(counts.max(), stats.poisson.ppf(1 - 1e-12, rate))) + 1
    k = np.arange(top)
    probs = stats.poisson.pmf(k, rate)
    probs = np.append(probs, stats.poisson.sf(top - 1, rate))
    obs = np.bincount(np.minimum(counts, top).astype(np.int64), minlength=top + 1)
    rep = chi2_gof(obs, probs, name, level, seed=seed)
    rep.detail["rate"] = rate
    rep.detail["mean"] = float(counts.mean())
    return rep


def exp1_ks(samples, level: float = 0.01, seed: int | None = None, name: str = "exp1_ks") -> TestReport:
    """Kolmogorov-Smirnov test against the unit exponential law."""
    x = np.asarray(samples, dtype=float)
    if x.size < MIN_SAMPLE:
        raise ValueError(f"need at least {MIN_SAMPLE} samples, got {x.size}")
    res = stats.kstest(x, "expon")
    return TestReport(name, float(res.statistic), float(res.pvalue), x.size, res.pvalue >= level, level, seed)


def _bucket(label, buckets: int) -> int:
    if label is None:
        return -1
    return min(int(label * buckets), buckets - 1)


def image_summary(image, label_buckets: int = 10) -> tuple:
    """Hashable summary of a local image: sorted (shape, label bucket) pairs."""
    return tuple(sorted((p, _bucket(lab, label_buckets)) for p, lab in image.members))


def tv_local_law(sample_a, sample_b, K=None, label_buckets: int = 10) -> float:
    """Empirical total variation between two ensembles of local images.

    Each image is reduced to its multiset of shapes with labels rounded
    down to ``label_buckets`` buckets; the two empirical laws of these
    summaries are compared over the observed support.  When ``K`` is given
    the ensemble members are localized to ``K`` first.
    """
    from ..pointproc import localize

    def law(sample):
        c = Counter()
        for img in sample:
            if K is not None:
                img = localize(img, K)
            c[image_summary(img, label_buckets)] += 1
        n = sum(c.values())
        return c, n

    ca, na = law(sample_a)
    cb, nb = law(sample_b)
    if na == 0 or nb == 0:
        raise ValueError("empty ensemble")
    keys = set(ca) | set(cb)
    return 0.5 * sum(abs(ca[k] / na - cb[k] / nb) for k in keys)


def pass_rate(reports) -> float:
    reports = list(reports)
    return sum(r.passed for r in reports) / len(reports) if reports else 0.0


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()) if x.size else 0.0, 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))
