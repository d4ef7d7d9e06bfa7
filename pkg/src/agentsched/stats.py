"""Summary statistics for multi-seed experiments."""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import special


def mean_sd(xs: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(xs, float)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _t_sf(t: float, df: float) -> float:
    """Upper tail of Student's t via the regularized incomplete beta function."""
    x = df / (df + t * t)
    return 0.5 * special.betainc(df / 2.0, 0.5, x)


def welch(a: Sequence[float], b: Sequence[float]) -> Dict[str, float]:
    """Two-tailed Welch t-test; returns t, Welch-Satterthwaite df and p."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size < 2 or b.size < 2:
        raise ValueError("each group needs at least two samples")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        if diff == 0:
            return {"t": 0.0, "df": float(a.size + b.size - 2), "p": 1.0}
        return {"t": math.copysign(math.inf, diff), "df": float(a.size + b.size - 2), "p": 0.0}
    t = diff / math.sqrt(se2)
    fa, fb = va / se2, vb / se2  # shares of the variance; avoids underflow in the squares
    df = 1.0 / (fa * fa / (a.size - 1) + fb * fb / (b.size - 1))
    p = min(1.0, 2.0 * _t_sf(abs(t), df))
    return {"t": float(t), "df": float(df), "p": float(p)}


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def iqr_filter(xs: Sequence[float], k: float = 1.5) -> Tuple[List[float], int]:
    """Drop points beyond k*IQR from the quartiles; returns (kept, removed count)."""
    xs = [float(x) for x in xs]
    if len(xs) < 4:
        return xs, 0
    q1, q3 = np.percentile(xs, [25, 75])
    lo, hi = q1 - k * (q3 - q1), q3 + k * (q3 - q1)
    kept = [x for x in xs if lo <= x <= hi]
    return kept, len(xs) - len(kept)


def fmt_cell(xs: Sequence[float], digits: int = 2) -> str:
    m, s = mean_sd(xs)
    return f"{m:.{digits}f} ± {s:.{digits}f}"
