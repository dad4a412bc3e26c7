"""
Lung volume, vessel abundance indices and the cohort statistics:
ordinary least squares, Wilcoxon signed-rank and rank-sum tests, and a
chi-square association test.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .metrics import abundance_counts
from .volume import ARTERY, VEIN, LabelMask

INDICES = ("slpa", "slpv", "bcpa", "bcpv")
PREDICTORS = ("intercept", "lung_volume", "sex", "age")
EXACT_LIMIT = 12


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    sex: int  # male = 1, female = 0
    age: float
    lung_volume: float  # liters
    slpa: float  # cm
    slpv: float
    bcpa: float
    bcpv: float

    def __post_init__(self):
        if self.sex not in (0, 1):
            raise ValueError(f"{self.id}: sex must be coded 0 or 1, got {self.sex}")
        if not self.lung_volume > 0:
            raise ValueError(f"{self.id}: lung volume must be positive")
        if min(self.slpa, self.slpv, self.bcpa, self.bcpv) < 0:
            raise ValueError(f"{self.id}: abundance indices must be non-negative")


# ---------------------------------------------------------------------------
# per-case measurements
# ---------------------------------------------------------------------------

def lung_volume(lung_mask, truth: LabelMask | None = None, spacing=None) -> float:
    """Lung volume minus the vessels inside it, in liters."""
    lung = lung_mask.foreground if isinstance(lung_mask, LabelMask) else np.asarray(lung_mask, bool)
    if spacing is None:
        spacing = getattr(lung_mask, "spacing", None) or getattr(truth, "spacing", None)
    if spacing is None:
        raise ValueError("spacing is required to convert voxels to liters")
    n_lung = int(np.count_nonzero(lung))
    if n_lung == 0:
        raise ValueError("empty lung mask")
    n_vessel = 0
    if truth is not None:
        vessels = truth.foreground if isinstance(truth, LabelMask) else np.asarray(truth, bool)
        n_vessel = int(np.count_nonzero(vessels & lung))
    return (n_lung - n_vessel) * float(np.prod(spacing)) / 1e6


def abundance_indices(truth: LabelMask, root_hints=None) -> dict:
    """SLPA/SLPV (cm) and BCPA/BCPV of a labelled case.

    Skeleton length is the smoothed centerline length in metric space,
    which equals the voxel count times the mean step length; the raw voxel
    counts are returned as ``sl_count_a`` and ``sl_count_v``.
    """
    root_hints = root_hints or {}
    out = {}
    for code, suffix in ((ARTERY, "a"), (VEIN, "v")):
        counts = abundance_counts(truth, code, root_hints.get(code))
        out[f"slp{suffix}"] = counts["length_mm"] / 10.0
        out[f"bcp{suffix}"] = counts["bc"]
        out[f"sl_count_{suffix}"] = counts["sl"]
    return out


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

@dataclass
class RegressionResult:
    names: list
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    n: int
    df: int
    residuals: np.ndarray = field(repr=False, default=None)

    def table(self) -> list:
        return [{"predictor": name, "coef": float(c), "se": float(s), "t": float(t),
                 "p": float(p), "stars": stars(p)}
                for name, c, s, t, p in zip(self.names, self.coef, self.se, self.t, self.p)]

    def to_json(self) -> dict:
        return {"n": self.n, "df": self.df, "r2": self.r2, "coefficients": self.table()}


def _collinear_columns(X: np.ndarray, names) -> list:
    _, s, vt = np.linalg.svd(X, full_matrices=False)
    tol = s.max() * max(X.shape) * np.finfo(float).eps
    null = vt[s <= tol]
    involved = np.any(np.abs(null) > 1e-8, axis=0)
    return [names[j] for j in np.flatnonzero(involved)]


def ols(X, y, names=None) -> RegressionResult:
    """Least squares with classical standard errors and two-sided t tests."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(k)]
    if n <= k:
        raise ValueError(f"need more observations ({n}) than predictors ({k})")
    if np.linalg.matrix_rank(X) < k:
        raise ValueError(f"rank-deficient design; collinear columns: {_collinear_columns(X, names)}")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    df = n - k
    sigma2 = float(resid @ resid) / df
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.sign(coef) * np.inf))
    p = 2.0 * sps.t.sf(np.abs(t), df)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 0.0 if sst == 0 else 1.0 - float(resid @ resid) / sst
    return RegressionResult(names, coef, se, t, p, r2, n, df, resid)


def design_matrix(records, columns=PREDICTORS) -> np.ndarray:
    rows = []
    for r in records:
        row = []
        for c in columns:
            row.append(1.0 if c == "intercept" else float(getattr(r, c)))
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), len(columns))


# ---------------------------------------------------------------------------
# rank tests
# ---------------------------------------------------------------------------

@dataclass
class TestResult:
    __test__ = False  # not a pytest class

    statistic: float
    p_value: float
    method: str
    n: int
    n1: int | None = None
    n2: int | None = None
    exact: bool = False
    flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _two_sided(dist: np.ndarray, observed: float) -> float:
    """Two-sided p from an enumerated null distribution."""
    tol = 1e-9
    lower = np.mean(dist <= observed + tol)
    upper = np.mean(dist >= observed - tol)
    return float(min(1.0, 2.0 * min(lower, upper)))


def _edgeworth_p(observed: float, mean: float, var: float, k4: float) -> float:
    """Two-sided p from a normal approximation with a kurtosis term.

    Both rank statistics are symmetric, so the first correction beyond
    the normal law is the fourth-cumulant term. A continuity correction
    of 0.5 is applied to each tail. Far out the series stops being a
    small correction, so it is capped at half the normal tail.
    """
    if var <= 0:
        return 1.0
    g2 = k4 / var ** 2
    sd = np.sqrt(var)

    def tail(z):
        # P(Z >= z); by symmetry the lower tail at z is tail(-z)
        normal = sps.norm.sf(z)
        corr = sps.norm.pdf(z) * g2 / 24.0 * (z ** 3 - 3.0 * z)
        return normal + float(np.clip(corr, -0.5 * normal, 0.5 * normal))

    lower = tail(-(observed + 0.5 - mean) / sd)
    upper = tail((observed - 0.5 - mean) / sd)
    p = float(np.clip(2.0 * min(lower, upper), 0.0, 1.0))
    # beyond double precision the tail underflows; report the smallest positive value
    return max(p, np.finfo(float).tiny)


def _sample_sum_cumulants(values: np.ndarray, n: int) -> tuple[float, float]:
    """Variance and fourth cumulant of the sum of ``n`` values drawn without
    replacement from ``values`` (ties allowed)."""
    a = np.asarray(values, dtype=np.float64)
    a = a - a.mean()
    N = a.size
    s2, s4 = float(np.sum(a ** 2)), float(np.sum(a ** 4))

    def incl(m):
        # probability that m given units are all in the sample
        out = 1.0
        for j in range(m):
            out *= (n - j) / (N - j) if N > j else 0.0
        return out

    var = n * (N - n) / (N * (N - 1)) * s2 if N > 1 else 0.0
    # distinct-index sums expressed with power sums (first power sum is zero)
    e4 = (incl(1) * s4
          + incl(2) * (4.0 * -s4 + 3.0 * (s2 ** 2 - s4))
          + incl(3) * 6.0 * (2.0 * s4 - s2 ** 2)
          + incl(4) * (3.0 * s2 ** 2 - 6.0 * s4))
    return var, e4 - 3.0 * var ** 2


def wilcoxon_signed_rank(x, y=None, exact: bool | None = None) -> TestResult:
    """Paired test on x - y (or on x alone); zero differences are dropped."""
    d = np.asarray(x, dtype=np.float64)
    if y is not None:
        d = d - np.asarray(y, dtype=np.float64)
    flags = {}
    zeros = int(np.count_nonzero(d == 0))
    if zeros:
        flags["zero_differences_dropped"] = zeros
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ValueError("degenerate pairs: all differences are zero")
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    use_exact = n <= EXACT_LIMIT if exact is None else exact
    if use_exact:
        signs = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
        p = _two_sided(signs @ ranks, w_plus)
    else:
        # W+ = sum of rank_i * Bernoulli(1/2), so its cumulants are power sums of the ranks
        mean = ranks.sum() / 2.0
        var = float(np.sum(ranks ** 2)) / 4.0
        k4 = -float(np.sum(ranks ** 4)) / 8.0
        p = _edgeworth_p(w_plus, mean, var, k4)
    return TestResult(w_plus, p, "signed-rank", n, exact=use_exact, flags=flags)


def wilcoxon_rank_sum(x, y, exact: bool | None = None) -> TestResult:
    """Two-sample rank-sum test; the statistic is the rank sum of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n1, n2 = x.size, y.size
    if n1 == 0 or n2 == 0:
        raise ValueError("rank-sum test needs two non-empty groups")
    pooled = np.concatenate([x, y])
    ranks = sps.rankdata(pooled)
    w = float(ranks[:n1].sum())
    N = n1 + n2
    use_exact = N <= EXACT_LIMIT if exact is None else exact
    if use_exact:
        sums = np.array([ranks[list(c)].sum() for c in itertools.combinations(range(N), n1)])
        p = _two_sided(sums, w)
    else:
        mean = n1 * (N + 1) / 2.0
        var, k4 = _sample_sum_cumulants(ranks, n1)
        p = _edgeworth_p(w, mean, var, k4)
    return TestResult(w, p, "rank-sum", N, n1, n2, exact=use_exact)


def chi_square_association(records, index: str) -> TestResult:
    """Sex x (above / at-or-below median ``index``) contingency test."""
    values = np.array([getattr(r, index) for r in records], dtype=float)
    sex = np.array([r.sex for r in records])
    high = values > np.median(values)
    table = np.array([[np.sum((sex == s) & (high == h)) for h in (False, True)] for s in (0, 1)])
    if np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
        raise ValueError(f"contingency table for {index} has an empty margin: {table.tolist()}")
    chi2, p, _, _ = sps.chi2_contingency(table)
    return TestResult(float(chi2), float(p), "chi-square", int(table.sum()),
                      flags={"table": table.tolist()})


def stars(p: float) -> str:
    if not np.isfinite(p):
        return "ns"
    for limit, mark in ((1e-4, "****"), (1e-3, "***"), (1e-2, "**"), (0.05, "*")):
        if p < limit:
            return mark
    return "ns"


# ---------------------------------------------------------------------------
# cohort report
# ---------------------------------------------------------------------------

def _summary(values) -> dict:
    values = np.asarray(values, dtype=float)
    n = values.size
    std = float(values.std(ddof=1)) if n > 1 else 0.0
    return {"n": int(n), "mean": float(values.mean()) if n else float("nan"),
            "std": std, "sem": std / np.sqrt(n) if n > 1 else 0.0}


def cohort_report(records, indices=INDICES) -> dict:
    """Group summaries, regression fits and tests for a cohort."""
    records = list(records)
    report = {"n": len(records), "by_sex": {}, "by_decade": {}, "regression": {},
              "regression_by_sex": {}, "rank_sum_sex": {}, "chi_square_sex": {}, "flags": {}}
    groups = {"male": [r for r in records if r.sex == 1], "female": [r for r in records if r.sex == 0]}
    for index in indices:
        report["by_sex"][index] = {g: _summary([getattr(r, index) for r in rs])
                                   for g, rs in groups.items()}
        decades = {}
        for r in records:
            decades.setdefault(int(r.age // 10 * 10), []).append(getattr(r, index))
        report["by_decade"][index] = {f"{d}-{d + 9}": _summary(v) for d, v in sorted(decades.items())}
        try:
            fit = ols(design_matrix(records), [getattr(r, index) for r in records], PREDICTORS)
            report["regression"][index] = fit.to_json()
        except ValueError as exc:
            report["flags"][f"regression_{index}"] = str(exc)
        cols = ("intercept", "lung_volume", "age")
        per_sex = {}
        for g, rs in groups.items():
            try:
                per_sex[g] = ols(design_matrix(rs, cols), [getattr(r, index) for r in rs], cols).to_json()
            except ValueError as exc:
                report["flags"][f"regression_{index}_{g}"] = str(exc)
        report["regression_by_sex"][index] = per_sex
        if groups["male"] and groups["female"]:
            test = wilcoxon_rank_sum([getattr(r, index) for r in groups["male"]],
                                     [getattr(r, index) for r in groups["female"]])
            report["rank_sum_sex"][index] = {**test.to_json(), "stars": stars(test.p_value)}
            try:
                chi = chi_square_association(records, index)
                report["chi_square_sex"][index] = {**chi.to_json(), "stars": stars(chi.p_value)}
            except ValueError as exc:
                report["flags"][f"chi_square_{index}"] = str(exc)
    return report


def report_tables(report: dict) -> dict:
    """Flatten a cohort report into CSV-ready row lists keyed by table name."""
    tables = {"by_sex": [], "by_decade": [], "regression": [], "tests": []}
    for index, groups in report["by_sex"].items():
        for g, s in groups.items():
            tables["by_sex"].append({"index": index, "group": g, **s})
    for index, bins in report["by_decade"].items():
        for b, s in bins.items():
            tables["by_decade"].append({"index": index, "decade": b, **s})
    for index, fit in report["regression"].items():
        for row in fit["coefficients"]:
            tables["regression"].append({"index": index, "fit": "joint", **row})
    for index, fits in report["regression_by_sex"].items():
        for g, fit in fits.items():
            for row in fit["coefficients"]:
                tables["regression"].append({"index": index, "fit": g, **row})
    for key in ("rank_sum_sex", "chi_square_sex"):
        for index, t in report[key].items():
            tables["tests"].append({"index": index, "test": t["method"], "statistic": t["statistic"],
                                    "p": t["p_value"], "stars": t["stars"]})
    return tables
