"""Vectorized Monte Carlo over the synthetic world.

``simulate_run`` reproduces what ``run_loop`` does with every role bound to
the simulated backend (same seeds, same draws, same stopping rule) but works
on status vectors instead of probe objects and text, which makes hundreds of
seeded runs cheap. ``simulated_setup`` builds the matching world, providers
and initial spec for the object-level loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .loop import StoppingConfig, should_stop
from .model import TransitionContingency
from .providers.base import ROLES, Providers, UsageLedger
from .providers.simulated import (CORRECT, SimulatedBackend, SyntheticWorld, draw_facts,
                                  sim_revise)
from .seeding import derive_seed, llm_seed, make_rng, revise_seed, test_seed, train_seed
from .stats import estimate_rates, hoeffding_envelope


@dataclass(frozen=True)
class SimConfig:
    n_facts: int = 1000
    f0: float = 0.59
    f_wrong: Optional[float] = None
    pi: float = 0.634
    r: float = 0.052
    d: float = 0.0
    d_test: float = 0.0
    negative_fraction: float = 0.0
    n_train: int = 785
    n_test: int = 785
    stopping: StoppingConfig = field(default_factory=StoppingConfig)

    def world(self, seed: int) -> SyntheticWorld:
        return SyntheticWorld.initial(self.n_facts, self.f0, self.f_wrong, self.pi, self.r, self.d,
                                      self.d_test, self.negative_fraction,
                                      seed=derive_seed(seed, "world"))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "stopping"}
        d["stopping"] = self.stopping.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        st = StoppingConfig.from_dict(d.pop("stopping", {}))
        return cls(**d, stopping=st)


def simulated_setup(cfg: SimConfig, seed: int, ledger: Optional[UsageLedger] = None):
    """(world, providers, initial spec text) for running the object-level loop."""
    world = cfg.world(seed)
    ledger = ledger or UsageLedger()
    backends = {role: SimulatedBackend(world, ledger=ledger, role=role) for role in ROLES}
    return world, Providers(backends, ledger), world.spec_text()


def _agree(status: np.ndarray, idx: np.ndarray, echo: np.ndarray, echo_status: np.ndarray):
    """Echo probes agree when the spec still says what it said at draw time;
    the rest agree when the spec states the fact correctly."""
    cur = status[idx]
    return np.where(echo, cur == echo_status, cur == CORRECT)


def _transition(prev: np.ndarray, curr: np.ndarray) -> TransitionContingency:
    return TransitionContingency(int(np.sum(prev & curr)), int(np.sum(prev & ~curr)),
                                 int(np.sum(~prev & curr)), int(np.sum(~prev & ~curr)))


@dataclass
class SimRun:
    seed: int
    f_train: list[float]
    f_test: list[float]
    gaps: list[float]
    population: list[float]
    contingencies: list[TransitionContingency]
    status: str
    stop_reason: str

    @property
    def k_star(self) -> int:
        return len(self.f_test) - 1

    def to_dict(self) -> dict:
        return {"seed": self.seed, "k_star": self.k_star, "status": self.status,
                "stop_reason": self.stop_reason, "f_train": self.f_train, "f_test": self.f_test,
                "gaps": self.gaps, "population": self.population,
                "contingencies": [c.to_dict() for c in self.contingencies]}


def simulate_run(cfg: SimConfig, seed: int) -> SimRun:
    stopping = cfg.stopping.resolved(cfg.n_test)
    world = cfg.world(seed)
    t_idx, t_echo, t_es = draw_facts(make_rng(llm_seed(test_seed(seed))), world.status,
                                     cfg.n_test, cfg.d_test)
    f_train, f_test, gaps, pop, conts = [], [], [], [], []
    prev = None
    k = 0
    while True:
        idx, echo, es = draw_facts(make_rng(llm_seed(train_seed(seed, k))), world.status,
                                   cfg.n_train, cfg.d)
        a_train = _agree(world.status, idx, echo, es)
        a_test = _agree(world.status, t_idx, t_echo, t_es)
        ftr = Fraction(int(a_train.sum()), cfg.n_train)
        fte = Fraction(int(a_test.sum()), cfg.n_test)
        f_train.append(float(ftr))
        f_test.append(float(fte))
        gaps.append(float(ftr - fte))
        pop.append(world.population_fidelity())
        if prev is not None:
            conts.append(_transition(prev, a_test))
        why = should_stop(k, f_test[-1], f_test[-2] if k else None, gaps[-1], stopping)
        if why is not None:
            status = ("converged" if why.startswith("improvement") else
                      "gap_exceeded" if why.startswith("train/test") else "max_iters")
            return SimRun(seed, f_train, f_test, gaps, pop, conts, status, why)
        facts = np.unique(idx[~a_train])
        if len(facts):
            sim_revise(world, facts, revise_seed(seed, k))
        prev = a_test
        k += 1


@dataclass
class MonteCarloResult:
    config: SimConfig
    runs: list[SimRun]

    def _padded(self, attr: str) -> np.ndarray:
        """Runs x iterations, each run held at its terminal value after it stops."""
        rows = [getattr(r, attr) for r in self.runs]
        K = max(len(x) for x in rows)
        return np.array([x + [x[-1]] * (K - len(x)) for x in rows])

    @property
    def test_matrix(self) -> np.ndarray:
        return self._padded("f_test")

    @property
    def gap_matrix(self) -> np.ndarray:
        return self._padded("gaps")

    @property
    def mean_trajectory(self) -> np.ndarray:
        return self.test_matrix.mean(axis=0)

    @property
    def terminal(self) -> np.ndarray:
        return np.array([r.f_test[-1] for r in self.runs])

    @property
    def k_stars(self) -> np.ndarray:
        return np.array([r.k_star for r in self.runs])

    def envelope_exceeded(self, within: Optional[int] = None, delta: float = 0.05) -> np.ndarray:
        """Per run: did |gap| exceed the two-sided bound at some k <= within?"""
        bound = hoeffding_envelope(self.config.n_test, delta)[1]
        out = []
        for r in self.runs:
            g = np.abs(np.array(r.gaps[: None if within is None else within + 1]))
            out.append(bool((g > bound).any()))
        return np.array(out)

    def summary(self) -> dict:
        term = self.terminal
        return {"runs": len(self.runs), "mean_terminal": float(term.mean()),
                "sd_terminal": float(term.std(ddof=1)) if len(term) > 1 else 0.0,
                "f_dagger": (self.config.pi / (self.config.pi + self.config.r)
                             if self.config.pi + self.config.r > 0 else None),
                "mean_trajectory": self.mean_trajectory.tolist(),
                "k_star": {"min": int(self.k_stars.min()), "max": int(self.k_stars.max())},
                "envelope_exceeded_share": float(self.envelope_exceeded().mean())}


def monte_carlo(cfg: SimConfig, seeds: Sequence[int]) -> MonteCarloResult:
    return MonteCarloResult(cfg, [simulate_run(cfg, int(s)) for s in seeds])


def pooled_rates(result: MonteCarloResult):
    """Rate estimates from the summed test-set transitions of every run."""
    tot = [0, 0, 0, 0]
    for r in result.runs:
        for c in r.contingencies:
            tot = [a + b for a, b in zip(tot, (c.held, c.regr, c.impr, c.stuck))]
    return estimate_rates(TransitionContingency(*tot))
