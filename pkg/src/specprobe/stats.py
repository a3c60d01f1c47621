"""Closed-form statistics for the refinement loop.

Rate estimation from verdict-transition counts, the regression-aware
fidelity recursion, the Hoeffding train/test envelope, Wilson and bootstrap
intervals, the stationary balance identity and simple spec-size metrics.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .model import ANCHOR_RE, RateEstimates, TransitionContingency

CONDITIONAL_WORDS = ("when", "if", "unless", "while", "until")


def estimate_rates(c: TransitionContingency, k: int = 0) -> RateEstimates:
    """pi = impr/(impr+stuck), r = regr/(held+regr)."""
    non_agree = c.impr + c.stuck
    agree = c.held + c.regr
    if non_agree == 0 and agree == 0:
        raise ValueError("degenerate transition")
    pi_hat = c.impr / non_agree if non_agree else None
    r_hat = c.regr / agree if agree else None
    return RateEstimates(pi_hat, r_hat, k)


RateLike = Union[RateEstimates, tuple]


def _pi_r(rate: RateLike) -> tuple[float, float]:
    if isinstance(rate, RateEstimates):
        if rate.pi_hat is None or rate.r_hat is None:
            raise ValueError(f"cannot forecast with undefined rates at k={rate.k}")
        return rate.pi_hat, rate.r_hat
    pi, r = rate
    return float(pi), float(r)


def forecast(f0: float, rates: Union[RateLike, Sequence[RateLike]],
             steps: Optional[int] = None) -> list[float]:
    """Point forecast F_{k+1} = gamma_k F_k + pi_k, returned as [F_0, F_1, ...].

    ``rates`` is either one (pi, r) pair applied ``steps`` times or a
    per-step sequence.
    """
    if isinstance(rates, RateEstimates) or (
            isinstance(rates, tuple) and len(rates) == 2
            and all(isinstance(x, (int, float)) for x in rates)):
        seq = [rates] * (1 if steps is None else steps)
    else:
        seq = list(rates)
        if steps is not None:
            seq = seq[:steps]
    out = [float(f0)]
    for rate in seq:
        pi, r = _pi_r(rate)
        out.append((1.0 - pi - r) * out[-1] + pi)
    return out


def hoeffding_envelope(n: int, delta: float = 0.05) -> tuple[float, float]:
    """(one-sided deviation bound, train/test gap bound)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    one = math.sqrt(math.log(2.0 / delta) / (2.0 * n))
    return one, 2.0 * one


def wilson_ci(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n < 1 or not 0 <= successes <= n:
        raise ValueError(f"need 0 <= successes <= n and n >= 1, got {successes}/{n}")
    z = norm.ppf(1.0 - (1.0 - confidence) / 2.0)
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    lo, hi = centre - half, centre + half
    # exact endpoints at the boundaries; the closed form leaves ~1e-17 residue
    if successes == 0:
        lo = 0.0
    if successes == n:
        hi = 1.0
    return max(0.0, lo), min(1.0, hi)


@dataclass
class FixedPointForecast:
    fit_window: tuple[int, int]
    f_dagger: float
    bootstrap_ci: tuple[float, float]
    predicted_trajectory: list[float]
    resamples: int = 0
    dropped: int = 0
    window_rates: list[RateEstimates] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "fit_window": list(self.fit_window),
            "f_dagger": self.f_dagger,
            "bootstrap_ci": list(self.bootstrap_ci),
            "predicted_trajectory": self.predicted_trajectory,
            "resamples": self.resamples,
            "dropped": self.dropped,
            "window_rates": [r.to_dict() for r in self.window_rates],
        }


def _f_dagger_of_counts(counts: np.ndarray) -> np.ndarray:
    held, regr, impr, stuck = (counts[..., i].astype(float) for i in range(4))
    with np.errstate(divide="ignore", invalid="ignore"):
        pi = impr / (impr + stuck)
        r = regr / (held + regr)
        return pi / (pi + r)


def bootstrap_fixed_point(contingencies: Sequence[TransitionContingency], B: int = 2000,
                          seed: int = 0, confidence: float = 0.95,
                          fit_window: Optional[tuple[int, int]] = None,
                          horizon: int = 0) -> FixedPointForecast:
    """Plateau forecast from a window of transitions.

    The point estimate is the local fixed point of the most recent transition
    in the window; the interval is a percentile bootstrap that redraws that
    transition's four cells as one multinomial of its own size. The predicted
    trajectory runs the recursion over the window's rates from the observed
    starting fidelity, then ``horizon`` more steps at the terminal rates.
    """
    window = list(contingencies)
    if not window:
        raise ValueError("degenerate window: no transitions")
    if B < 1:
        raise ValueError("B must be >= 1")
    start = fit_window[0] if fit_window else 0
    rates = [estimate_rates(c, start + i) for i, c in enumerate(window)]
    last = window[-1]
    point = rates[-1].f_dagger
    if point is None:
        raise ValueError("degenerate window: terminal transition has no fixed point")

    rng = np.random.Generator(np.random.Philox(seed))
    probs = np.array([last.held, last.regr, last.impr, last.stuck], dtype=float) / last.n
    draws = rng.multinomial(last.n, probs, size=B)
    fd = _f_dagger_of_counts(draws)
    ok = np.isfinite(fd)
    if not ok.any():
        raise ValueError("degenerate window: every resample lacks a fixed point")
    tail = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(fd[ok], [tail, 1.0 - tail])
    lo, hi = min(float(lo), point), max(float(hi), point)

    f0 = window[0].prev_agree / window[0].n
    traj = forecast(f0, rates)
    if horizon:
        traj += forecast(traj[-1], rates[-1], steps=horizon)[1:]
    end = start + len(window) - 1
    return FixedPointForecast((start, end), point, (lo, hi), traj, int(ok.sum()),
                              int((~ok).sum()), rates)


def balance_identity(F: float, rates: RateLike, n: int) -> tuple[float, float]:
    """Expected (improvements, regressions) on the next transition at fidelity F."""
    pi, r = _pi_r(rates)
    return n * (1.0 - F) * pi, n * F * r


_WORD = re.compile(r"[a-z]+")


def spec_complexity(spec) -> dict:
    text = spec if isinstance(spec, str) else spec.text
    lines = text.splitlines()
    words = _WORD.findall(text.lower())
    return {
        "anchors": len(set(ANCHOR_RE.findall(text))),
        "shall": sum(1 for w in words if w == "shall"),
        "conditionals": sum(1 for w in words if w in CONDITIONAL_WORDS),
        "section_headers": sum(1 for ln in lines if ln.lstrip().startswith("#")),
        "lines": len(lines),
    }


def trajectory_table(contingencies: Iterable[TransitionContingency]) -> list[dict]:
    """Per-transition bookkeeping rows (counts, rates, observed fidelity)."""
    rows = []
    for k, c in enumerate(contingencies):
        est = estimate_rates(c, k)
        rows.append({
            "k": k, **c.to_dict(), "n": c.n,
            "pi_hat": est.pi_hat, "r_hat": est.r_hat, "f_dagger": est.f_dagger,
            "imp_minus_reg": c.impr - c.regr,
            "F_before": c.prev_agree / c.n, "F_after": c.next_agree / c.n,
        })
    return rows
