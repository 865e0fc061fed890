"""Lightcone extraction from OTOC heatmaps and series comparison reports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .protocol import OtocSeries


class FitError(ValueError):
    pass


@dataclass
class Heatmap:
    sites: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (S, T)
    mask: frozenset = frozenset()
    errors: np.ndarray | None = None

    def __post_init__(self):
        self.sites = np.asarray(self.sites)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.sites), len(self.times)):
            raise ValueError(f"values shape {self.values.shape} != ({len(self.sites)}, {len(self.times)})")
        if self.errors is not None:
            self.errors = np.asarray(self.errors, dtype=float)
            if self.errors.shape != self.values.shape:
                raise ValueError("errors shape does not match values")
        self.mask = frozenset(int(s) for s in self.mask)

    @classmethod
    def from_series(cls, series: OtocSeries, mask: Sequence[int] = ()) -> "Heatmap":
        errors = series.stderr if np.any(series.stderr) else None
        return cls(series.sites, series.times, series.otoc, frozenset(mask), errors)

    def active_rows(self) -> list[int]:
        return [k for k, s in enumerate(self.sites) if int(s) not in self.mask]


@dataclass(frozen=True)
class Arrival:
    site: int
    time: float | None  # None: the front never reached this site
    sigma: float = 0.0

    @property
    def present(self) -> bool:
        return self.time is not None


def arrival_times(hm: Heatmap, threshold: float = 0.5, cutoff_time: float = 4.0,
                  min_drop: float = 1e-6) -> list[Arrival]:
    """First crossing of 1 - threshold * (1 - row minimum) for each unmasked site.

    Rows are truncated at ``cutoff_time``. The crossing is linearly
    interpolated; its uncertainty combines the propagated value error (when
    the heatmap carries errors) with the grid resolution dt/sqrt(12).
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    keep = hm.times <= cutoff_time + 1e-12
    times = hm.times[keep]
    if times.size == 0:
        raise ValueError("empty time grid")
    out = []
    for k in hm.active_rows():
        row = hm.values[k, keep]
        drop = 1.0 - row.min()
        site = int(hm.sites[k])
        if drop <= min_drop:
            out.append(Arrival(site, None))
            continue
        level = 1.0 - threshold * drop
        below = np.flatnonzero(row < level)
        j = int(below[0])
        if j == 0:
            out.append(Arrival(site, float(times[0]), 0.0))
            continue
        t0, t1, v0, v1 = times[j - 1], times[j], row[j - 1], row[j]
        frac = (v0 - level) / (v0 - v1)
        t_cross = t0 + frac * (t1 - t0)
        grid_sigma = (t1 - t0) / math.sqrt(12)
        stat = 0.0
        if hm.errors is not None:
            slope = abs(v1 - v0) / (t1 - t0)
            err = hm.errors[k, keep]
            stat = math.hypot((1 - frac) * err[j - 1], frac * err[j]) / slope
        out.append(Arrival(site, float(t_cross), float(math.hypot(stat, grid_sigma))))
    return out


@dataclass
class LightconeFit:
    slope: float  # us per site (orientation "t_vs_d") or sites per us ("d_vs_t")
    slope_err: float
    intercept: float
    intercept_err: float
    orientation: str
    origin_site: int
    threshold: float
    sites: list[int]
    distances: list[float]
    arrivals: list[float]
    arrival_errors: list[float]
    residuals: list[float]
    chi2_red: float

    @property
    def us_per_site(self) -> tuple[float, float]:
        if self.orientation == "t_vs_d":
            return self.slope, self.slope_err
        return 1.0 / self.slope, self.slope_err / self.slope**2

    @property
    def sites_per_us(self) -> tuple[float, float]:
        if self.orientation == "d_vs_t":
            return self.slope, self.slope_err
        return 1.0 / self.slope, self.slope_err / self.slope**2

    def to_dict(self) -> dict:
        out = asdict(self)
        out["us_per_site"] = list(self.us_per_site)
        out["sites_per_us"] = list(self.sites_per_us)
        return out


def _wls(x: np.ndarray, y: np.ndarray, sigma: np.ndarray | None):
    """Straight-line fit. Without ``sigma`` the covariance comes from the residual scatter."""
    if np.ptp(x) == 0:
        raise FitError("degenerate lightcone fit: all points share one abscissa")
    w = np.ones_like(x) if sigma is None else 1.0 / sigma**2
    design = np.column_stack([x, np.ones_like(x)])
    cov = np.linalg.inv(design.T @ (w[:, None] * design))
    coef = cov @ (design.T @ (w * y))
    resid = y - design @ coef
    dof = len(x) - 2
    chi2_red = float(np.sum(w * resid**2) / dof)
    if sigma is None:
        cov = cov * chi2_red
    else:
        # inflate by the scatter when the front is not a perfect line
        cov = cov * max(1.0, chi2_red)
    return coef, cov, resid, chi2_red


def fit_lightcone(arrivals: Sequence[Arrival], origin_site: int, threshold: float = 0.5,
                  orientation: str = "t_vs_d") -> LightconeFit:
    """Weighted straight-line fit of arrival time against distance from ``origin_site``."""
    if orientation not in ("t_vs_d", "d_vs_t"):
        raise ValueError("orientation must be 't_vs_d' or 'd_vs_t'")
    valid = [a for a in arrivals if a.present]
    if len(valid) < 3:
        raise FitError(f"need at least 3 arrivals, got {len(valid)}")
    d = np.array([abs(a.site - origin_site) for a in valid], dtype=float)
    t = np.array([a.time for a in valid], dtype=float)
    sig = np.array([a.sigma for a in valid], dtype=float)
    if np.all(sig <= 0):
        sig = None
    elif np.any(sig <= 0):
        sig = np.where(sig > 0, sig, sig[sig > 0].min())
    if orientation == "t_vs_d":
        coef, cov, resid, chi2 = _wls(d, t, sig)
    else:
        if np.ptp(t) == 0:
            raise FitError("degenerate lightcone fit: all arrivals simultaneous")
        # errors in t mapped onto d through a first unweighted pass
        pilot = abs(np.polyfit(t, d, 1)[0])
        coef, cov, resid, chi2 = _wls(t, d, None if sig is None or pilot == 0 else pilot * sig)
    return LightconeFit(
        slope=float(coef[0]), slope_err=float(math.sqrt(cov[0, 0])),
        intercept=float(coef[1]), intercept_err=float(math.sqrt(cov[1, 1])),
        orientation=orientation, origin_site=int(origin_site), threshold=threshold,
        sites=[a.site for a in valid], distances=d.tolist(), arrivals=t.tolist(),
        arrival_errors=[a.sigma for a in valid], residuals=resid.tolist(), chi2_red=chi2,
    )


def slopes_agree(a: LightconeFit, b: LightconeFit, n_sigma: float = 2.0) -> bool:
    return abs(a.slope - b.slope) <= n_sigma * math.hypot(a.slope_err, b.slope_err)


def _resample(series: OtocSeries, times: np.ndarray) -> np.ndarray:
    return np.array([np.interp(times, series.times, row) for row in series.otoc])


@dataclass
class CompareReport:
    sites: list[int]
    times: list[float]
    rms_by_site: dict[int, float]
    max_by_site: dict[int, float]
    rms: float
    max_abs: float
    resampled: bool
    slope_a: dict | None = None
    slope_b: dict | None = None
    slopes_consistent: bool | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self, site_base: int = 0) -> dict:
        """``site_base=1`` relabels sites 1-based for file output."""
        out = asdict(self)
        out["sites"] = [s + site_base for s in self.sites]
        out["rms_by_site"] = {str(k + site_base): v for k, v in self.rms_by_site.items()}
        out["max_by_site"] = {str(k + site_base): v for k, v in self.max_by_site.items()}
        for key in ("slope_a", "slope_b"):
            if out[key] is not None:
                out[key]["sites"] = [s + site_base for s in out[key]["sites"]]
                out[key]["origin_site"] += site_base
        return out

    def summary(self, site_base: int = 0) -> str:
        lines = [f"compared {len(self.sites)} sites x {len(self.times)} times"
                 + (" (resampled to coarser grid)" if self.resampled else ""),
                 f"overall RMS deviation {self.rms:.4f}, max deviation {self.max_abs:.4f}"]
        for s in self.sites:
            lines.append(f"  site {s + site_base}: rms {self.rms_by_site[s]:.4f}  max {self.max_by_site[s]:.4f}")
        if self.slopes_consistent is not None:
            lines.append(f"lightcone slopes {self.slope_a['slope']:.4f}+-{self.slope_a['slope_err']:.4f} vs "
                         f"{self.slope_b['slope']:.4f}+-{self.slope_b['slope_err']:.4f}: "
                         + ("consistent" if self.slopes_consistent else "inconsistent") + " at 2 sigma")
        lines.extend(self.notes)
        return "\n".join(lines)


def compare_series(a: OtocSeries, b: OtocSeries, mask: Sequence[int] = (), origin_site: int | None = None,
                   threshold: float = 0.5, cutoff_time: float = 4.0, t_max: float | None = None) -> CompareReport:
    """Deviation report between two OTOC series on their common grid.

    Differing time grids are reconciled by interpolating the finer series
    onto the coarser one over the overlapping window.
    """
    if list(a.sites) != list(b.sites):
        raise ValueError("series cover different sites")
    resampled = False
    if len(a.times) == len(b.times) and np.allclose(a.times, b.times, atol=1e-9):
        times = np.asarray(a.times, dtype=float)
        va, vb = a.otoc, b.otoc
    else:
        coarse, fine = (a, b) if len(a.times) <= len(b.times) else (b, a)
        lo, hi = max(a.times.min(), b.times.min()), min(a.times.max(), b.times.max())
        times = coarse.times[(coarse.times >= lo - 1e-9) & (coarse.times <= hi + 1e-9)]
        if times.size < 2:
            raise ValueError("time grids do not overlap")
        rc, rf = _resample(coarse, times), _resample(fine, times)
        va, vb = (rc, rf) if coarse is a else (rf, rc)
        resampled = True
    if t_max is not None:
        keep = times <= t_max + 1e-9
        times, va, vb = times[keep], va[:, keep], vb[:, keep]
    rows = [k for k, s in enumerate(a.sites) if int(s) not in set(mask)]
    diff = np.abs(va - vb)[rows]
    sites = [int(a.sites[k]) for k in rows]
    report = CompareReport(
        sites=sites, times=times.tolist(),
        rms_by_site={s: float(np.sqrt(np.mean(diff[i] ** 2))) for i, s in enumerate(sites)},
        max_by_site={s: float(diff[i].max()) for i, s in enumerate(sites)},
        rms=float(np.sqrt(np.mean(diff**2))), max_abs=float(diff.max()), resampled=resampled,
    )
    if origin_site is not None:
        try:
            fits = []
            for series, values in ((a, va), (b, vb)):
                errs = None
                if np.any(series.stderr) and not resampled:
                    errs = series.stderr[:, : len(times)]
                hm = Heatmap(series.sites, times, values, frozenset(mask), errs)
                fits.append(fit_lightcone(arrival_times(hm, threshold, cutoff_time), origin_site, threshold))
            report.slope_a, report.slope_b = fits[0].to_dict(), fits[1].to_dict()
            report.slopes_consistent = slopes_agree(*fits)
        except FitError as exc:
            report.notes.append(f"lightcone fit skipped: {exc}")
    return report


REFERENCE_SLOPES = {"simulator": (0.32, 0.02), "hardware": (0.31, 0.03), "mps": (0.33, 0.01)}


def reference_slope_check(fit: LightconeFit, n_sigma: float = 2.0) -> dict:
    """Compare a fit with reference slopes under both unit readings."""
    out = {}
    for unit, (val, err) in (("us_per_site", fit.us_per_site), ("sites_per_us", fit.sites_per_us)):
        out[unit] = {
            "value": val,
            "error": err,
            "matches": {name: abs(val - ref) <= n_sigma * math.hypot(err, ref_err)
                        for name, (ref, ref_err) in REFERENCE_SLOPES.items()},
        }
    return out
