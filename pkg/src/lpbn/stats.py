"""Monte-Carlo checks on quantized normalized variables.

Correlation and spread of Q(N(X)) for Gaussian and Student-t(3) draws, the
saturation coverage of a scheme, and transfer-curve data for plotting.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from . import quantizers as qz
from .normcore import DEFAULT_EPS
from .tensorcore import make_rng

DISTRIBUTIONS = ("gaussian", "student_t3")

# reference values: (scheme, distribution) -> (correlation, sd)
TABLE2 = {
    ("L2", "gaussian"): (0.918, 1.000),
    ("L3", "gaussian"): (0.965, 1.000),
    ("L4", "gaussian"): (0.981, 1.000),
    ("L2", "student_t3"): (0.769, 0.888),
    ("L3", "student_t3"): (0.857, 1.11),
    ("L4", "student_t3"): (0.970, 0.978),
}


def _dist(name: str) -> str:
    key = name.lower().replace("-", "_").replace("(", "").replace(")", "")
    aliases = {"normal": "gaussian", "n01": "gaussian", "t3": "student_t3", "studentt3": "student_t3", "t": "student_t3"}
    key = aliases.get(key, key)
    if key not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {name!r}; expected one of {DISTRIBUTIONS}")
    return key


def sample(dist: str, n: int, seed: int) -> np.ndarray:
    """n i.i.d. float64 draws; Student-t(3) as Z / sqrt(chi2_3 / 3)."""
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = make_rng(seed)
    d = _dist(dist)
    z = rng.standard_normal(n)
    if d == "gaussian":
        return z
    return z / np.sqrt(rng.chisquare(3, n) / 3.0)


def standardize(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Whole-sample normalization: (x - mean) / sqrt(var + eps)."""
    return (x - x.mean()) / np.sqrt(x.var() + eps)


@dataclass(frozen=True)
class Table2Row:
    scheme: str
    distribution: str
    n: int
    seed: int
    correlation: float
    sd: float


def table2_row(scheme, dist: str, n: int = 10**6, seed: int = 0) -> Table2Row:
    s = qz.get_scheme(scheme)
    x = sample(dist, n, seed)
    _, q = qz.quantize_array(s, standardize(x), dtype=np.float64)
    corr = float(np.corrcoef(x, q)[0, 1])
    return Table2Row(s.id, _dist(dist), n, seed, corr, float(q.std()))


def coverage_fraction(samples, scheme) -> float:
    """Fraction of samples whose magnitude does not exceed the largest codebook magnitude."""
    top = float(np.abs(qz.codebook(scheme)).max())
    samples = np.asarray(samples)
    return float(np.count_nonzero(np.abs(samples) <= top) / samples.size)


def transfer_curve(scheme, x_grid) -> list[tuple[float, float]]:
    x = np.asarray(x_grid, dtype=np.float64)
    _, q = qz.quantize_array(scheme, x, dtype=np.float64)
    return list(zip(x.tolist(), q.tolist()))


def grid(lo: float, hi: float, step: float) -> np.ndarray:
    """Inclusive grid lo, lo+step, ... <= hi, built from integer multiples to avoid drift."""
    if step <= 0 or hi < lo:
        raise ValueError("need step > 0 and hi >= lo")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(count)


def student_t3_logpdf(x) -> np.ndarray:
    """Log density of Student-t(3) rescaled to unit variance."""
    return sps.t.logpdf(np.asarray(x), df=3, scale=1 / math.sqrt(3))


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "distribution", "n", "seed", "correlation", "sd"])
    for r in rows:
        w.writerow([r.scheme, r.distribution, r.n, r.seed, f"{r.correlation:.6f}", f"{r.sd:.6f}"])
    return buf.getvalue()


def curve_to_csv(points, with_logpdf: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "q"] + (["logpdf_t3"] if with_logpdf else []))
    xs = np.array([p[0] for p in points])
    lp = student_t3_logpdf(xs) if with_logpdf else None
    for i, (x, q) in enumerate(points):
        row = [f"{x:.6f}", repr(float(q))]
        if with_logpdf:
            row.append(f"{lp[i]:.6f}")
        w.writerow(row)
    return buf.getvalue()
