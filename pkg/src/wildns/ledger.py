"""Diagnostics: inductive ledgers, energy processes and report files.

The energy process of order p along a trajectory x is

    E^p(t) = |x(t)|^{2p} + 2p int_0^t |x|^{2p-2} |x|_{H^g}^2 dl
             - (C_{p,1} + C_{p,2} C_G) int_0^t |x|^{2p-2} dl,

with L^2 norms |.|, integrals by the trapezoid rule on the trajectory
grid and the convention that the integrand |x|^{2p-2} is 1 for p = 1.
The monotonicity check is the trajectory-wise surrogate of the
supermartingale property: E^p(t ^ stop) must not increase between samples.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import field as F

__all__ = [
    "LedgerError",
    "EnergyProcess",
    "energy_process",
    "energy_process_from_norms",
    "Verdict",
    "supermartingale_check",
    "minimal_C_p",
    "trajectory_constants",
    "IterationReport",
    "report_emit",
    "SAMPLE_COLUMNS",
]


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyProcess:
    """Samples of E^p on ``times``.

    Attributes
    ----------
    p : int
    C_p : float
        Coefficient of C_G (written C_{p,2} when both constants are used).
    C_G : float
    C_p1 : float
        Deterministic constant C_{p,1} (defaults to 0).
    times, values : ndarray
    l2sq, hsq : ndarray
        |x|_{L^2}^2 and |x|_{H^gamma}^2 at the samples.
    """

    p: int
    C_p: float
    C_G: float
    C_p1: float
    times: np.ndarray
    values: np.ndarray
    l2sq: np.ndarray
    hsq: np.ndarray


def energy_process_from_norms(
    times: Sequence[float],
    l2sq: Sequence[float],
    hsq: Sequence[float],
    p: int,
    C_p: float,
    C_G: float,
    *,
    C_p1: float = 0.0,
) -> EnergyProcess:
    """E^p from sampled |x|^2_{L^2} and |x|^2_{H^gamma}."""
    if p < 1 or int(p) != p:
        raise LedgerError("p must be a positive integer")
    if C_p < 0 or C_p1 < 0 or C_G < 0:
        raise LedgerError("constants must be non-negative")
    t = np.asarray(times, dtype=float)
    a = np.asarray(l2sq, dtype=float)
    h = np.asarray(hsq, dtype=float)
    if not (t.shape == a.shape == h.shape) or t.ndim != 1:
        raise LedgerError("times and norm samples must be 1-d arrays of equal length")
    base = np.ones_like(a) if p == 1 else a ** (p - 1)
    if len(t) > 1:
        I1 = cumulative_trapezoid(base * h, t, initial=0.0)
        I2 = cumulative_trapezoid(base, t, initial=0.0)
    else:
        I1 = I2 = np.zeros_like(t)
    vals = a**p + 2 * p * I1 - (C_p1 + C_p * C_G) * I2
    return EnergyProcess(int(p), float(C_p), float(C_G), float(C_p1), t, vals, a, h)


def energy_process(
    traj: F.TimeTrajectory,
    p: int,
    C_p: float,
    C_G: float,
    gamma: float,
    *,
    C_p1: float = 0.0,
    t0: float | None = None,
) -> EnergyProcess:
    """E^p along a vector-field trajectory, started at ``t0`` (default: first sample)."""
    times = traj.times
    i0 = 0 if t0 is None else traj.index(t0)
    l2 = np.array([F.norm(traj.at(i), "L", 2) ** 2 for i in range(i0, traj.nt)])
    hs = np.array([F.norm(traj.at(i), "H", gamma) ** 2 for i in range(i0, traj.nt)])
    return energy_process_from_norms(times[i0:] - times[i0], l2, hs, p, C_p, C_G, C_p1=C_p1)


@dataclass(frozen=True)
class Verdict:
    """Outcome of the monotonicity check.

    ``rows`` holds (t, E^p, increment, pass) per sample up to the stop time.
    """

    passed: bool
    p: int
    max_increase: float
    first_violation: float | None
    rows: tuple

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "p": self.p,
            "max_increase": self.max_increase,
            "first_violation": self.first_violation,
            "label": "trajectory-wise monotonicity surrogate",
        }


def supermartingale_check(proc: EnergyProcess, stop_t: float | None = None, *, tol: float = 1e-9) -> Verdict:
    """Pass iff E^p(t ^ stop_t) never increases by more than ``tol`` per step."""
    t = proc.times
    keep = t <= (np.inf if stop_t is None else stop_t + 1e-12)
    E = proc.values[keep]
    ts = t[keep]
    inc = np.diff(E, prepend=E[:1])
    ok = inc <= tol
    first = None if ok.all() else float(ts[np.argmin(ok)])
    rows = tuple((float(a), float(b), float(c), bool(d)) for a, b, c, d in zip(ts, E, inc, ok))
    return Verdict(bool(ok.all()), proc.p, float(inc.max(initial=0.0)), first, rows)


def minimal_C_p(p: int, c0: float, c1: float, c2: float, C_G: float) -> float:
    """Smallest C_p with C_p C_G c0^{p-1} >= 2p c2^p + 2p (c0 + c1)^{2p-1} c1."""
    if C_G <= 0 or c0 <= 0:
        raise LedgerError("need C_G > 0 and c0 > 0")
    return (2 * p * c2**p + 2 * p * (c0 + c1) ** (2 * p - 1) * c1) / (C_G * c0 ** (p - 1))


def trajectory_constants(times: Sequence[float], l2sq: Sequence[float], hsq: Sequence[float]) -> dict:
    """c0 = min |x|^2, c1 = max(1, largest slope of |x|^2), c2 = sup |x|^2_{H^gamma}."""
    t = np.asarray(times, dtype=float)
    a = np.asarray(l2sq, dtype=float)
    slope = np.diff(a) / np.diff(t) if len(t) > 1 else np.zeros(0)
    return {
        "c0": float(a.min()),
        "c1": float(max(1.0, slope.max(initial=0.0))),
        "c2": float(np.asarray(hsq, dtype=float).max()),
    }


# ----------------------------------------------------------------------------
# reports


@dataclass
class IterationReport:
    """Ledger rows of one level: ``name, value, bound, zone, passed``."""

    level: int
    variant: str
    rows: list = field(default_factory=list)

    @staticmethod
    def from_dict(d: dict) -> "IterationReport":
        return IterationReport(int(d["level"]), str(d["variant"]), [dict(r) for r in d["rows"]])

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows)


LEVEL_COLUMNS = ("level", "variant", "name", "zone", "value", "bound", "passed")
SAMPLE_COLUMNS = ("level", "t", "key", "value")
PROCESS_COLUMNS = ("t", "Ep", "dEp", "pass")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def report_emit(
    reports: Sequence[IterationReport | dict],
    sinks: str | Path,
    *,
    samples: dict[int, list] | None = None,
    processes: dict[str, Verdict] | None = None,
    summary: dict | None = None,
) -> list[Path]:
    """Write the ledgers to directory ``sinks``.

    Files: ``levels.csv`` (one row per bound per level), ``samples.csv``
    (per-sample diagnostics, long format), one ``energy_p<k>.csv`` per
    verdict and ``summary.json``.  Ordering is fixed, so re-emitting the same
    data gives byte-identical files.

    Raises
    ------
    OSError
        If the directory cannot be written.
    """
    out = Path(sinks)
    out.mkdir(parents=True, exist_ok=True)
    reps = [r if isinstance(r, IterationReport) else IterationReport.from_dict(r) for r in reports]
    reps.sort(key=lambda r: r.level)
    written = []
    rows = [(r.level, r.variant, x["name"], x["zone"], x["value"], x["bound"], x["passed"]) for r in reps for x in r.rows]
    p = out / "levels.csv"
    p.write_text(_csv(LEVEL_COLUMNS, rows))
    written.append(p)
    srows = []
    for lev in sorted(samples or {}):
        for s in samples[lev]:
            for k in sorted(s):
                if k == "t":
                    continue
                srows.append((lev, s["t"], k, s[k]))
    p = out / "samples.csv"
    p.write_text(_csv(SAMPLE_COLUMNS, srows))
    written.append(p)
    for name in sorted(processes or {}):
        v = processes[name]
        p = out / f"energy_{name}.csv"
        p.write_text(_csv(PROCESS_COLUMNS, v.rows))
        written.append(p)
    summ = {
        "levels": [{"level": r.level, "variant": r.variant, "passed": r.passed, "n_rows": len(r.rows)} for r in reps],
        "energy_checks": {k: processes[k].to_json() for k in sorted(processes or {})},
    }
    if summary:
        summ["run"] = summary
    p = out / "summary.json"
    p.write_text(json.dumps(_jsonable(summ), indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def report_asdict(r: IterationReport) -> dict:
    return asdict(r)
