"""Error statistics: summaries, Q-Q normality analysis, linear fits.

Everything here is deterministic and platform independent: quantiles use
linear interpolation between order statistics, Q-Q plotting positions are
(i - 0.5) / n, and the normal quantile function is a fixed rational
approximation rather than a library call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TooFewSamples(Exception):
    pass


class DegenerateX(Exception):
    """Linear fit needs at least two distinct x values."""


@dataclass
class ErrorSample:
    """Scalar error values plus the condition labels they were measured under."""

    values: np.ndarray
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size and not np.all(np.isfinite(self.values)):
            raise ValueError("error sample contains non-finite values")


def _values(e) -> np.ndarray:
    return np.asarray(getattr(e, "values", e), dtype=np.float64).ravel()


# Wichura's AS241 (PPND16) rational approximation of the inverse normal CDF;
# absolute error well below 1.2e-9 over the whole open unit interval.
_C0 = (3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
       1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
       3.3430575583588128105e4, 2.5090809287301226727e3)
_D0 = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
       5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
       2.8729085735721942674e4, 5.2264952788528545610e3)
_C1 = (1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
       3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
       2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D1 = (1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
       6.89767334985100004550e-1, 1.48103976427480074590e-1,
       1.51986665636164571966e-2, 5.47593808499534494600e-4,
       1.05075007164441684324e-9)
_C2 = (6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
       2.96560571828504891230e-1, 2.65321895265761230930e-2,
       1.24266094738807843860e-3, 2.71155556874348757815e-5,
       2.01033439929228813265e-7)
_D2 = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
       1.48753612908506148525e-2, 7.86869131145613259100e-4,
       1.84631831751005468180e-5, 1.42151175831644588870e-7,
       2.04426310338993978564e-15)


def _poly(coef, x):
    out = np.full_like(x, coef[-1])
    for c in coef[-2::-1]:
        out = out * x + c
    return out


def norm_ppf(p):
    """Inverse standard normal CDF (AS241 rational approximation)."""
    arr = np.asarray(p, dtype=np.float64)
    scalar = arr.ndim == 0
    pv = np.atleast_1d(arr).ravel()
    if np.any((pv <= 0.0) | (pv >= 1.0)):
        raise ValueError("norm_ppf requires 0 < p < 1")
    q = pv - 0.5
    out = np.empty_like(q)

    central = np.abs(q) <= 0.425
    if np.any(central):
        r = 0.180625 - q[central] * q[central]
        out[central] = q[central] * _poly(_C0, r) / _poly(_D0, r)
    tail = ~central
    if np.any(tail):
        qt = q[tail]
        r = np.sqrt(-np.log(np.where(qt < 0.0, pv[tail], 1.0 - pv[tail])))
        near = r <= 5.0
        x = np.empty_like(r)
        if np.any(near):
            rn = r[near] - 1.6
            x[near] = _poly(_C1, rn) / _poly(_D1, rn)
        if np.any(~near):
            rf = r[~near] - 5.0
            x[~near] = _poly(_C2, rf) / _poly(_D2, rf)
        out[tail] = np.where(qt < 0.0, -x, x)
    if scalar:
        return float(out[0])
    return out.reshape(arr.shape)


def summarize(e) -> dict:
    """Standard summary: mean, sample std, median, q05/q25/q75/q95, max.

    Values are sorted before reduction, which makes every field exactly
    permutation invariant (float summation order is fixed).
    """
    v = np.sort(_values(e))
    if v.size < 2:
        raise TooFewSamples(f"need at least 2 samples, got {v.size}")
    qs = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {
        "n": int(v.size),
        "mean": float(v.mean()),
        "std": float(v.std(ddof=1)),
        "median": float(qs[2]),
        "q25": float(qs[1]),
        "q75": float(qs[3]),
        "q05": float(qs[0]),
        "q95": float(qs[4]),
        "max": float(v.max()),
    }


@dataclass
class QQResult:
    """Paired quantiles and the least-squares normal fit.

    The band fractions count quantile points whose vertical distance from
    the fitted line is at most k * |slope|, i.e. k standard deviations in
    data units, for k = 1 and k = 1.5.
    """

    theoretical: np.ndarray
    empirical: np.ndarray
    slope: float
    intercept: float
    r_squared: float
    frac_within_1sigma: float
    frac_within_1_5sigma: float


def qq_normal(e, min_samples: int = 20) -> QQResult:
    """Empirical order statistics against normal quantiles at (i-0.5)/n."""
    v = np.sort(_values(e))
    n = v.size
    if n < min_samples:
        raise TooFewSamples(f"need at least {min_samples} samples, got {n}")
    t = norm_ppf((np.arange(1, n + 1) - 0.5) / n)
    fit = linear_fit(t, v)
    resid = np.abs(v - (fit["slope"] * t + fit["intercept"]))
    scale = abs(fit["slope"])
    return QQResult(
        theoretical=t,
        empirical=v,
        slope=fit["slope"],
        intercept=fit["intercept"],
        r_squared=fit["r_squared"],
        frac_within_1sigma=float(np.mean(resid <= 1.0 * scale)),
        frac_within_1_5sigma=float(np.mean(resid <= 1.5 * scale)),
    )


def linear_fit(x, y) -> dict:
    """Ordinary least squares y = slope * x + intercept.

    R-squared is defined as 0 when the responses are constant (no variance
    to explain), so degenerate sweeps stay comparable.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise DegenerateX("need two same-length vectors with >= 2 points")
    if np.ptp(x) == 0.0:
        raise DegenerateX("all x values identical")
    xm = x.mean()
    ym = y.mean()
    sxx = float(((x - xm) ** 2).sum())
    sxy = float(((x - xm) * (y - ym)).sum())
    slope = sxy / sxx
    intercept = ym - slope * xm
    ss_tot = float(((y - ym) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 0.0
    else:
        ss_res = float(((y - slope * x - intercept) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot
    return {"slope": slope, "intercept": intercept, "r_squared": r2}
