"""Power-law scaling fits with bootstrap confidence intervals.

Error-vs-dataset-size points (one per training run, several seeds per
size) are reduced to per-size means and fitted as e(N) = a * N^b by least
squares in log-log space. Bootstrap resampling over sizes and seeds gives
CIs for the parameters and for any extrapolated size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import BootstrapCI


class FitError(ValueError):
    pass


@dataclass
class ScalingPoint:
    n: int          # training-set size
    error: float    # error rate in percent (must be positive)
    seed: int = 0


@dataclass
class ScalingFit:
    a: float
    b: float
    n_values: list
    mean_errors: list
    residuals: list                 # in log space, per retained size
    ci_a: BootstrapCI
    ci_b: BootstrapCI
    boot_ab: np.ndarray = field(repr=False, default=None)  # (B, 2) samples
    excluded: list = field(default_factory=list)

    def extrapolate(self, n: float) -> float:
        return self.a * float(n) ** self.b

    def extrapolate_ci(self, n: float, level: float = 0.95) -> BootstrapCI:
        if self.boot_ab is None or len(self.boot_ab) == 0:
            v = self.extrapolate(n)
            return BootstrapCI(v, v, level, degenerate=True)
        vals = self.boot_ab[:, 0] * float(n) ** self.boot_ab[:, 1]
        alpha = (1.0 - level) / 2.0
        low, high = np.quantile(vals, [alpha, 1.0 - alpha])
        v = self.extrapolate(n)
        return BootstrapCI(min(float(low), v), max(float(high), v), level)

    def to_dict(self) -> dict:
        return {
            "a": self.a, "b": self.b,
            "n_values": [int(n) for n in self.n_values],
            "mean_errors": [float(e) for e in self.mean_errors],
            "residuals_log": [float(r) for r in self.residuals],
            "ci_a": [self.ci_a.low, self.ci_a.high],
            "ci_b": [self.ci_b.low, self.ci_b.high],
            "excluded": [int(n) for n in self.excluded],
        }


def _loglog_fit(ns: np.ndarray, means: np.ndarray) -> tuple[float, float]:
    x = np.log(ns)
    y = np.log(means)
    slope, intercept = np.polyfit(x, y, 1)
    return float(np.exp(intercept)), float(slope)


def fit_power_law(points, exclude=None, n_boot: int = 2000, level: float = 0.95,
                  seed: int = 0) -> ScalingFit:
    """Fit e(N) = a * N^b to (N, error) points, optionally excluding sizes.

    ``points`` is an iterable of (N, error) pairs or ScalingPoint; repeated
    N values are treated as seeds and averaged before the fit.
    """
    by_n: dict[int, list[float]] = {}
    for p in points:
        n, e = (p.n, p.error) if isinstance(p, ScalingPoint) else (p[0], p[1])
        if e <= 0:
            raise FitError(f"error values must be positive, got {e} at N={n}")
        if n <= 0:
            raise FitError(f"sizes must be positive, got {n}")
        by_n.setdefault(int(n), []).append(float(e))
    excluded = sorted(int(n) for n in (exclude or ()))
    retained = sorted(n for n in by_n if n not in set(excluded))
    if len(retained) < 2:
        raise FitError("need at least 2 distinct retained sizes to fit")

    ns = np.array(retained, dtype=np.float64)
    means = np.array([np.mean(by_n[n]) for n in retained])
    a, b = _loglog_fit(ns, means)
    resid = np.log(means) - (np.log(a) + b * np.log(ns))

    rng = np.random.default_rng(seed)
    boot = []
    tries = 0
    while len(boot) < n_boot and tries < 20 * n_boot:
        tries += 1
        pick = rng.integers(0, len(retained), size=len(retained))
        if len(set(retained[i] for i in pick)) < 2:
            continue
        bn, bm = [], []
        for i in pick:
            vals = by_n[retained[i]]
            res = rng.integers(0, len(vals), size=len(vals))
            bn.append(retained[i])
            bm.append(np.mean([vals[j] for j in res]))
        grouped: dict[int, list[float]] = {}
        for n, m in zip(bn, bm):
            grouped.setdefault(n, []).append(m)
        gn = np.array(sorted(grouped), dtype=np.float64)
        gm = np.array([np.mean(grouped[n]) for n in sorted(grouped)])
        boot.append(_loglog_fit(gn, gm))
    boot_ab = np.array(boot) if boot else np.empty((0, 2))

    def ci_of(col: int, est: float) -> BootstrapCI:
        if boot_ab.shape[0] == 0:
            return BootstrapCI(est, est, level, degenerate=True)
        alpha = (1.0 - level) / 2.0
        low, high = np.quantile(boot_ab[:, col], [alpha, 1.0 - alpha])
        return BootstrapCI(min(float(low), est), max(float(high), est), level)

    return ScalingFit(a=a, b=b, n_values=retained,
                      mean_errors=[float(m) for m in means],
                      residuals=[float(r) for r in resid],
                      ci_a=ci_of(0, a), ci_b=ci_of(1, b),
                      boot_ab=boot_ab, excluded=excluded)


DESK_FRACTIONS = (0.05, 0.10, 0.25, 0.50, 0.75, 1.00)


def run_scaling(dataset, train_cfg, fractions=DESK_FRACTIONS, seeds=(0, 1, 2),
                model_cfg=None, eval_split: str = "test",
                progress=None) -> list[ScalingPoint]:
    """Retrain at each (fraction, seed) cell and collect test-split PER points."""
    from dataclasses import replace as dc_replace

    from .evaluate import evaluate_per
    from .synthdata import subsample_fraction
    from .trainer import train

    points: list[ScalingPoint] = []
    for frac in fractions:
        for seed in seeds:
            sub = subsample_fraction(dataset, frac, seed=seed)
            n = len(sub.trials("train"))
            cfg = dc_replace(train_cfg, seed=seed)
            result = train(sub, cfg, model_cfg)
            rate = evaluate_per(result.model, cfg.variant, sub, split=eval_split)
            points.append(ScalingPoint(n=n, error=100.0 * rate, seed=seed))
            if progress is not None:
                progress(frac, seed, n, rate)
    return points
