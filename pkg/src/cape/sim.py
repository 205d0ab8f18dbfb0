"""Compartmental ODE simulators and synthetic corpus generation.

SIRD is the working model (S -> I -> R/D); SIR and SEIR variants are kept
for corpus variety. Integration is fixed-step RK4: the systems are smooth
and the step sizes small enough that adaptive control buys nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesRecord, make_timestamps


@dataclass
class SirdParams:
    """Rates are per unit time; initial compartments are fractions."""
    beta: float = 0.3
    gamma: float = 0.1
    mu: float = 0.01
    N: float = 1.0e6
    S0: float = 0.99
    I0: float = 0.01
    R0_init: float = 0.0
    D0: float = 0.0

    def validate(self) -> None:
        for name in ("beta", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"SirdParams.{name} must be >= 0")
        total = self.S0 + self.I0 + self.R0_init + self.D0
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"initial fractions sum to {total}, expected 1")

    @property
    def basic_reproduction_number(self) -> float:
        return self.beta / (self.gamma + self.mu)


@dataclass
class Trajectory:
    times: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    D: np.ndarray
    observed: np.ndarray  # case series handed to the model
    params: SirdParams | None = None

    def compartment(self, name: str) -> np.ndarray:
        return {"S": self.S, "I": self.I, "R": self.R, "D": self.D}[name]


def _sird_rhs(state: np.ndarray, beta: float, gamma: float, mu: float) -> np.ndarray:
    s, i, _, _ = state
    flow_si = beta * s * i
    return np.array([-flow_si,
                     flow_si - (gamma + mu) * i,
                     gamma * i,
                     mu * i])


def simulate_sird(params: SirdParams, horizon: int, dt: float = 1.0,
                  observable: str = "incidence") -> Trajectory:
    """Integrate SIRD with RK4 and derive the observed case series.

    observable="incidence" reports new infections per step (what surveillance
    counts); "prevalence" reports the active-infection compartment itself.
    Both are scaled by the population N.
    """
    params.validate()
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    n = horizon + 1
    states = np.empty((n, 4))
    states[0] = [params.S0, params.I0, params.R0_init, params.D0]
    b, g, m = params.beta, params.gamma, params.mu
    for k in range(horizon):
        y = states[k]
        k1 = _sird_rhs(y, b, g, m)
        k2 = _sird_rhs(y + 0.5 * dt * k1, b, g, m)
        k3 = _sird_rhs(y + 0.5 * dt * k2, b, g, m)
        k4 = _sird_rhs(y + dt * k3, b, g, m)
        states[k + 1] = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    times = np.arange(n) * dt
    S, I, R, D = states.T
    if observable == "incidence":
        # all loss of S is new infection, so increments of -S are exact
        observed = np.maximum(S[:-1] - S[1:], 0.0) * params.N
        observed = np.concatenate([[observed[0]], observed])
    elif observable == "prevalence":
        observed = I * params.N
    else:
        raise ValueError(f"unknown observable {observable!r}")
    return Trajectory(times=times, S=S, I=I, R=R, D=D, observed=observed,
                      params=params)


def simulate_sir(beta: float, gamma: float, S0: float, I0: float,
                 horizon: int, dt: float = 1.0, N: float = 1.0e6) -> Trajectory:
    """SIR as the mu=0 special case of SIRD."""
    p = SirdParams(beta=beta, gamma=gamma, mu=0.0, N=N, S0=S0, I0=I0,
                   R0_init=1.0 - S0 - I0, D0=0.0)
    return simulate_sird(p, horizon, dt)


def simulate_seir(beta: float, sigma: float, gamma: float, S0: float,
                  E0: float, I0: float, horizon: int, dt: float = 1.0,
                  N: float = 1.0e6) -> Trajectory:
    """SEIR with incubation rate sigma; exposed mass is folded into S for
    the returned Trajectory (observed series is incidence into E)."""
    if min(beta, sigma, gamma) < 0:
        raise ValueError("rates must be >= 0")
    if dt <= 0 or horizon < 1:
        raise ValueError("dt must be positive and horizon >= 1")
    state = np.array([S0, E0, I0, 1.0 - S0 - E0 - I0])

    def rhs(y):
        s, e, i, _ = y
        return np.array([-beta * s * i,
                         beta * s * i - sigma * e,
                         sigma * e - gamma * i,
                         gamma * i])

    n = horizon + 1
    states = np.empty((n, 4))
    states[0] = state
    for k in range(horizon):
        y = states[k]
        k1, k2 = rhs(y), rhs(y + 0.5 * dt * rhs(y))
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        states[k + 1] = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    times = np.arange(n) * dt
    S, E, I, R = states.T
    observed = np.maximum(S[:-1] - S[1:], 0.0) * N
    observed = np.concatenate([[observed[0]], observed])
    return Trajectory(times=times, S=S + E, I=I, R=R, D=np.zeros(n),
                      observed=observed)


# ---------------------------------------------------------------------------
# corpus generation

DEFAULT_PARAM_RANGES = {
    "beta": (0.15, 0.6),
    "gamma": (0.05, 0.25),
    "mu": (0.0, 0.05),
    "I0": (0.002, 0.02),
}


@dataclass
class CorpusSpec:
    n_series: int = 200
    length: int = 100
    dt: float = 1.0
    noise_level: float = 0.05
    observable: str = "incidence"
    param_ranges: dict = field(default_factory=lambda: dict(DEFAULT_PARAM_RANGES))
    r0_tag_slack: float = 0.1
    population: float = 1.0e6


def sample_params(rng: np.random.Generator, ranges: dict,
                  population: float) -> SirdParams:
    beta = rng.uniform(*ranges["beta"])
    gamma = rng.uniform(*ranges["gamma"])
    mu = rng.uniform(*ranges["mu"])
    i0 = rng.uniform(*ranges["I0"])
    return SirdParams(beta=beta, gamma=gamma, mu=mu, N=population,
                      S0=1.0 - i0, I0=i0)


def make_corpus(seed: int, n_series: int | None = None,
                spec: CorpusSpec | None = None,
                noise_level: float | None = None) -> list[TimeSeriesRecord]:
    """Generate a deterministic synthetic corpus of SIRD case series.

    Each series gets its own RNG stream derived from (seed, index), so the
    corpus is reproducible and order-independent. Observation noise is
    multiplicative lognormal; records are tagged with the generating
    reproduction number widened by +-10%.
    """
    spec = spec or CorpusSpec()
    if n_series is not None:
        spec.n_series = n_series
    if noise_level is not None:
        spec.noise_level = noise_level
    records = []
    for idx in range(spec.n_series):
        rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
        params = sample_params(rng, spec.param_ranges, spec.population)
        traj = simulate_sird(params, spec.length - 1, spec.dt,
                             observable=spec.observable)
        values = traj.observed
        if spec.noise_level > 0:
            noise = rng.lognormal(mean=0.0, sigma=spec.noise_level,
                                  size=values.shape)
            values = values * noise
        r0 = params.basic_reproduction_number
        rec = TimeSeriesRecord(
            disease_id="sird-sim",
            region_id=f"series-{idx:04d}",
            timestamps=make_timestamps(len(values)),
            values=values,
            r0_range=(r0 * (1.0 - spec.r0_tag_slack),
                      r0 * (1.0 + spec.r0_tag_slack)),
        )
        rec.meta = {"beta": params.beta, "gamma": params.gamma,
                    "mu": params.mu, "I0": params.I0}
        records.append(rec)
    return records
