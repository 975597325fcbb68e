"""Evaluation statistics: MAE/R², brain-age-gap summaries, t-tests, and
rank correlations, with p-values computed from a self-contained Student-t
CDF (regularized incomplete beta via Lentz's continued fraction).

The p-value machinery is written out in full so an external statistics
package is only ever a test oracle, never a runtime dependency.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

_BETA_EPS = 1e-12      # continued-fraction convergence; comfortably below 1e-8
_BETA_MAX_ITER = 500


class StatsError(Exception):
    pass


# ---------------------------------------------------------------------------
# Student-t distribution


def _log_beta(a: float, b: float) -> float:
    from math import lgamma
    return lgamma(a) + lgamma(b) - lgamma(a + b)


def _betainc_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    from math import exp, log
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            break
    else:
        raise StatsError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")
    front = exp(a * log(x) + b * np.log1p(-x) - _log_beta(a, b)) / a
    return front * h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError(f"beta parameters must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"x={x} outside [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    # use the representation that converges fast
    if x < (a + 1.0) / (a + b + 2.0):
        return _betainc_cf(a, b, x)
    return 1.0 - _betainc_cf(b, a, 1.0 - x)


def student_t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return tail if t < 0 else 1.0 - tail


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided p-value P(|T| >= |t|); exactly 1 at t = 0."""
    if df <= 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 1.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


# ---------------------------------------------------------------------------
# core metrics


@dataclass
class TTestResult:
    statistic: float
    df: float
    p_value: float
    degenerate: bool = False


def _as_vector(x, name: str, min_len: int = 1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise StatsError(f"{name} must be 1-D, got shape {x.shape}")
    if len(x) < min_len:
        raise StatsError(f"{name} needs >= {min_len} values, got {len(x)}")
    if not np.isfinite(x).all():
        raise StatsError(f"{name} contains non-finite values")
    return x


def mae_r2(predictions, truths):
    """Returns (MAE, std of absolute errors, R²)."""
    p = _as_vector(predictions, "predictions", 2)
    y = _as_vector(truths, "truths", 2)
    if len(p) != len(y):
        raise StatsError(f"length mismatch {len(p)} vs {len(y)}")
    err = np.abs(p - y)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise StatsError("truths have zero variance; R² undefined")
    ss_res = float(((p - y) ** 2).sum())
    return float(err.mean()), float(err.std()), 1.0 - ss_res / ss_tot


def one_sample_ttest(x, popmean: float = 0.0) -> TTestResult:
    x = _as_vector(x, "sample", 2)
    n = len(x)
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        # zero-variance sample: the test statistic is undefined
        return TTestResult(0.0, n - 1, 1.0, degenerate=True)
    t = float((x.mean() - popmean) / (sd / np.sqrt(n)))
    return TTestResult(t, n - 1, student_t_sf2(t, n - 1))


def bag_stats(predictions, truths):
    """Brain age gap = prediction - truth; returns (mean, std, TTestResult
    of the one-sample test against zero)."""
    p = _as_vector(predictions, "predictions", 2)
    y = _as_vector(truths, "truths", 2)
    if len(p) != len(y):
        raise StatsError(f"length mismatch {len(p)} vs {len(y)}")
    bag = p - y
    return float(bag.mean()), float(bag.std()), one_sample_ttest(bag)


def paired_ttest(a, b) -> TTestResult:
    """Paired two-sided t-test on the differences a - b."""
    a = _as_vector(a, "a", 2)
    b = _as_vector(b, "b", 2)
    if len(a) != len(b):
        raise StatsError(f"length mismatch {len(a)} vs {len(b)}")
    return one_sample_ttest(a - b)


def paired_abs_error_ttest(pred_a, pred_b, truths) -> TTestResult:
    """Paired t-test on per-sample absolute errors of two models on the same
    subjects. Negative statistic means model A has the smaller errors."""
    pa = _as_vector(pred_a, "pred_a", 2)
    pb = _as_vector(pred_b, "pred_b", 2)
    y = _as_vector(truths, "truths", 2)
    if not len(pa) == len(pb) == len(y):
        raise StatsError("length mismatch between predictions and truths")
    return paired_ttest(np.abs(pa - y), np.abs(pb - y))


def welch_ttest(a, b) -> TTestResult:
    """Welch's two-sample t-test (unequal variances)."""
    a = _as_vector(a, "a", 2)
    b = _as_vector(b, "b", 2)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    if va + vb == 0.0:
        return TTestResult(0.0, len(a) + len(b) - 2, 1.0, degenerate=True)
    t = float((a.mean() - b.mean()) / np.sqrt(va + vb))
    df = float((va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1)))
    return TTestResult(t, df, student_t_sf2(t, df))


# ---------------------------------------------------------------------------
# correlations


def rankdata_average(x) -> np.ndarray:
    """Ranks 1..n with ties assigned the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def correlate(x, y, kind: str = "pearson"):
    """Returns (coefficient, two-sided p) with p via the t-transform
    t = r sqrt((n-2)/(1-r²))."""
    if kind not in ("pearson", "spearman"):
        raise StatsError(f"unknown correlation kind {kind!r}")
    x = _as_vector(x, "x", 3)
    y = _as_vector(y, "y", 3)
    if len(x) != len(y):
        raise StatsError(f"length mismatch {len(x)} vs {len(y)}")
    if kind == "spearman":
        x, y = rankdata_average(x), rankdata_average(y)
    xc, yc = x - x.mean(), y - y.mean()
    denom = float(np.sqrt((xc ** 2).sum() * (yc ** 2).sum()))
    if denom == 0.0:
        raise StatsError("zero variance; correlation undefined")
    r = float((xc * yc).sum() / denom)
    r = min(1.0, max(-1.0, r))
    n = len(x)
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, student_t_sf2(float(t), n - 2)


# ---------------------------------------------------------------------------
# report assembly


def build_report(ids, ages, predictions, model_id: str, provenance: dict,
                 correlations: dict | None = None,
                 paired: dict | None = None) -> dict:
    """Full evaluation report as a plain dict with deterministic ordering.

    `correlations` maps covariate name -> covariate vector (correlated
    against BAG); `paired` maps competitor model id -> its predictions on
    the same subjects (paired absolute-error t-test)."""
    ages = _as_vector(ages, "ages", 2)
    predictions = _as_vector(predictions, "predictions", 2)
    if not len(ids) == len(ages) == len(predictions):
        raise StatsError("ids, ages, predictions must have equal length")
    mae, err_std, r2 = mae_r2(predictions, ages)
    bag_mean, bag_std, bag_test = bag_stats(predictions, ages)
    bag = predictions - ages

    report = {
        "model_id": model_id,
        "n": int(len(ages)),
        "mae": mae,
        "abs_error_std": err_std,
        "r2": r2,
        "bag_mean": bag_mean,
        "bag_std": bag_std,
        "bag_ttest": {"statistic": bag_test.statistic, "df": bag_test.df,
                      "p": bag_test.p_value, "degenerate": bag_test.degenerate},
        "correlations": [],
        "paired_tests": [],
        "provenance": dict(sorted(provenance.items())),
        "per_sample": [
            {"id": str(i), "age": float(a), "prediction": float(p),
             "bag": float(p - a)}
            for i, a, p in zip(ids, ages, predictions)
        ],
    }
    for name in sorted(correlations or {}):
        cov = _as_vector(correlations[name], name, 3)
        pr, pp = correlate(cov, bag, "pearson")
        sr, sp = correlate(cov, bag, "spearman")
        report["correlations"].append(
            {"covariate": name, "pearson_r": pr, "pearson_p": pp,
             "spearman_rho": sr, "spearman_p": sp})
    for other in sorted(paired or {}):
        t = paired_abs_error_ttest(predictions, paired[other], ages)
        report["paired_tests"].append(
            {"versus": other, "statistic": t.statistic, "df": t.df,
             "p": t.p_value, "degenerate": t.degenerate})
    return report


def emit_report(report: dict, out_dir: str, stem: str = "eval") -> dict:
    """Write <stem>.json and <stem>_per_sample.csv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f"{stem}.json")
    csv_path = os.path.join(out_dir, f"{stem}_per_sample.csv")
    tmp = json_path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(report, f, indent=1)
        f.write("\n")
    os.replace(tmp, json_path)
    tmp = csv_path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "age", "prediction", "bag"])
        for row in report["per_sample"]:
            w.writerow([row["id"], repr(row["age"]), repr(row["prediction"]),
                        repr(row["bag"])])
    os.replace(tmp, csv_path)
    return {"json": json_path, "csv": csv_path}
