"""Population definitions and i.i.d. sampling.

A population is described by a score distribution, a treatment-assignment
probability as a function of the score, and outcome models for the two
potential outcomes. Samples are drawn deterministically from a 64-bit seed
using a counter-based bit generator (Philox), so replications can run in
parallel without coordination.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

ScoreSampler = Callable[[np.random.Generator, int], np.ndarray]
ScoreFunc = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PopulationSpec:
    """A data-generating process on a scalar score.

    score_sampler draws score values, assign_prob maps a score to the
    probability of treatment, mu0/mu1 are the conditional means of the two
    potential outcomes, and noise0/noise1 draw zero-mean disturbances. All
    callables are vectorized over numpy arrays. When the score distribution
    has a density, score_pdf/score_support enable quadrature in the theory
    routines; otherwise they fall back to fixed-seed Monte Carlo.
    """

    score_sampler: ScoreSampler
    assign_prob: ScoreFunc
    mu0: ScoreFunc
    mu1: ScoreFunc
    noise0: ScoreSampler
    noise1: ScoreSampler
    tau_att_true: float | None = None
    score_pdf: ScoreFunc | None = None
    score_support: tuple[float, float] | None = None
    score_breakpoints: tuple[float, ...] = ()
    name: str = "custom"


@dataclass(frozen=True)
class Unit:
    """One observation: treatment indicator, score, potential and realized outcomes."""

    w: int
    s: float
    y0: float
    y1: float
    y: float


@dataclass
class Sample:
    """An i.i.d. sample stored column-wise.

    `w`, `s`, `y0`, `y1`, `y` are aligned arrays of length n. Treated and
    control index sets preserve draw order. `y0`/`y1` may be NaN for real
    data where potential outcomes are unobserved.
    """

    w: np.ndarray
    s: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.s.size

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.w == 1)

    @property
    def control_idx(self) -> np.ndarray:
        return np.flatnonzero(self.w == 0)

    @property
    def n1(self) -> int:
        return int(np.count_nonzero(self.w))

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def treated_scores(self) -> np.ndarray:
        return self.s[self.treated_idx]

    @property
    def control_scores(self) -> np.ndarray:
        return self.s[self.control_idx]

    def unit(self, i: int) -> Unit:
        return Unit(int(self.w[i]), float(self.s[i]), float(self.y0[i]),
                    float(self.y1[i]), float(self.y[i]))

    @property
    def units(self) -> list[Unit]:
        """Materialized per-unit view; intended for small samples."""
        return [self.unit(i) for i in range(self.n)]


def derive_seed(master_seed: int, *indices: int) -> int:
    """Deterministic child seed keyed by (master seed, index path).

    Used to give every replication (and every simulation cell) its own
    independent, reproducible stream.
    """
    ss = np.random.SeedSequence((master_seed,) + tuple(indices))
    return int(ss.generate_state(1, np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def sample(spec: PopulationSpec, n: int, seed: int) -> Sample:
    """Draw n units i.i.d. from the population.

    Per unit: draw the score, assign treatment as Bernoulli of the
    assignment probability, draw both potential outcomes, and realize the
    outcome under the assigned arm. Deterministic given (spec, n, seed).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = _rng(seed)
    if n == 0:
        empty = np.empty(0)
        return Sample(np.empty(0, dtype=np.int8), empty, empty.copy(),
                      empty.copy(), empty.copy())
    s = np.asarray(spec.score_sampler(rng, n), dtype=float)
    p = np.asarray(spec.assign_prob(s), dtype=float)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("assign_prob left [0, 1] on the drawn scores")
    w = (rng.random(n) < p).astype(np.int8)
    y0 = np.asarray(spec.mu0(s), dtype=float) + spec.noise0(rng, n)
    y1 = np.asarray(spec.mu1(s), dtype=float) + spec.noise1(rng, n)
    y = np.where(w == 1, y1, y0)
    return Sample(w, s, y0, y1, y)


# --- building blocks (module-level so specs stay picklable) ---

def _triangular_scores(rng, n):
    # inverse CDF of f(s) = s on [0,1], 2-s on (1,2]
    u = rng.random(n)
    return np.where(u <= 0.5, np.sqrt(2.0 * u), 2.0 - np.sqrt(2.0 * (1.0 - u)))


def _triangular_pdf(s):
    s = np.asarray(s, dtype=float)
    return np.where(s <= 1.0, s, 2.0 - s) * ((s >= 0.0) & (s <= 2.0))


def _linear_assign(s, denom):
    return np.asarray(s, dtype=float) / denom


def _square(s):
    return np.asarray(s, dtype=float) ** 2


def _const(s, value):
    return np.full_like(np.asarray(s, dtype=float), value)


def _std_normal(rng, n):
    return rng.standard_normal(n)


def _no_noise(rng, n):
    return np.zeros(n)


def _uniform_scores(rng, n, upper):
    return rng.random(n) * upper


def _uniform_pdf(s, upper):
    s = np.asarray(s, dtype=float)
    return np.where((s >= 0.0) & (s <= upper), 1.0 / upper, 0.0)


def _identity(s):
    return np.asarray(s, dtype=float)


def _two_point_scores(rng, n, mass_a, s_a, s_b):
    return np.where(rng.random(n) < mass_a, s_a, s_b)


def _two_point_values(s, s_a, value_a, value_b):
    s = np.asarray(s, dtype=float)
    return np.where(s == s_a, value_a, value_b)


def make_prognostic_spec(a: float) -> PopulationSpec:
    """Prognostic-score population: S = X1 + X3 with X1, X3 ~ Uniform[0,1].

    The score has triangular density on [0, 2]; treatment probability given
    the score is s / (2a + 2); Y(0) = S^2 + e0 and Y(1) = 5/2 + e1 with
    standard-normal noise. The true ATT is 1 for every a. Scores are drawn
    directly from the triangular law rather than via the three covariates
    (distributionally equivalent, roughly twice as fast); see
    sample_prognostic_covariates for the covariate-level cross-check.
    """
    if a < 1.0 / 3.0:
        raise ValueError("prognostic spec requires a >= 1/3")
    return PopulationSpec(
        score_sampler=_triangular_scores,
        assign_prob=partial(_linear_assign, denom=2.0 * a + 2.0),
        mu0=_square,
        mu1=partial(_const, value=2.5),
        noise0=_std_normal,
        noise1=_std_normal,
        tau_att_true=1.0,
        score_pdf=_triangular_pdf,
        score_support=(0.0, 2.0),
        score_breakpoints=(1.0,),
        name=f"prognostic(a={a:g})",
    )


def make_prognostic_propensity_spec(a: float) -> PopulationSpec:
    """The prognostic population reparameterized so the score is the propensity.

    With T = S / (2a + 2), assignment is Bernoulli(T); outcome models are
    rewritten in terms of T. Matching on T is matching on a monotone rescale
    of S, so the asymptotic bias is unchanged. Used to cross-check the
    propensity-score bias routine against the score-based one.
    """
    if a < 1.0 / 3.0:
        raise ValueError("prognostic spec requires a >= 1/3")
    denom = 2.0 * a + 2.0
    return PopulationSpec(
        score_sampler=partial(_scaled_triangular_scores, denom=denom),
        assign_prob=_identity,
        mu0=partial(_scaled_square, denom=denom),
        mu1=partial(_const, value=2.5),
        noise0=_std_normal,
        noise1=_std_normal,
        tau_att_true=1.0,
        score_pdf=partial(_scaled_triangular_pdf, denom=denom),
        score_support=(0.0, 2.0 / denom),
        score_breakpoints=(1.0 / denom,),
        name=f"prognostic-propensity(a={a:g})",
    )


def _scaled_triangular_scores(rng, n, denom):
    return _triangular_scores(rng, n) / denom


def _scaled_triangular_pdf(t, denom):
    return denom * _triangular_pdf(np.asarray(t, dtype=float) * denom)


def _scaled_square(t, denom):
    return (np.asarray(t, dtype=float) * denom) ** 2


def make_uniform_propensity_spec(upper: float,
                                 mu0: ScoreFunc = _identity,
                                 mu1: ScoreFunc = _identity,
                                 noise_sd: float = 0.0) -> PopulationSpec:
    """Population whose propensity score is Uniform[0, upper] and is the score itself."""
    if not 0.0 < upper <= 1.0:
        raise ValueError("upper must be in (0, 1]")
    noise = _std_normal if noise_sd == 1.0 else (
        _no_noise if noise_sd == 0.0 else partial(_scaled_normal, sd=noise_sd))
    return PopulationSpec(
        score_sampler=partial(_uniform_scores, upper=upper),
        assign_prob=_identity,
        mu0=mu0,
        mu1=mu1,
        noise0=noise,
        noise1=noise,
        score_pdf=partial(_uniform_pdf, upper=upper),
        score_support=(0.0, upper),
        name=f"uniform-propensity[0,{upper:g}]",
    )


def _scaled_normal(rng, n, sd):
    return sd * rng.standard_normal(n)


def make_categorical_spec(mass_a: float, p_in_a: float, p_out: float,
                          mu0_in: float = 0.0, mu0_out: float = 0.0,
                          mu1_in: float = 0.0, mu1_out: float = 0.0,
                          noise_sd: float = 0.0) -> PopulationSpec:
    """Two-category population with the category propensity as the score.

    A unit belongs to category A with probability mass_a, in which case its
    score (and treatment probability) is p_in_a; otherwise the score is
    p_out. Outcome means are constant within category. Noise defaults to
    zero so the worked matching arithmetic is exact.
    """
    for name, v in (("mass_a", mass_a), ("p_in_a", p_in_a), ("p_out", p_out)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1]")
    pi_bar = mass_a * p_in_a + (1.0 - mass_a) * p_out
    tau = None
    if pi_bar > 0.0:
        pr_a_treated = mass_a * p_in_a / pi_bar
        tau = (pr_a_treated * (mu1_in - mu0_in)
               + (1.0 - pr_a_treated) * (mu1_out - mu0_out))
    noise = _no_noise if noise_sd == 0.0 else partial(_scaled_normal, sd=noise_sd)
    return PopulationSpec(
        score_sampler=partial(_two_point_scores, mass_a=mass_a,
                              s_a=p_in_a, s_b=p_out),
        assign_prob=_identity,
        mu0=partial(_two_point_values, s_a=p_in_a, value_a=mu0_in, value_b=mu0_out),
        mu1=partial(_two_point_values, s_a=p_in_a, value_a=mu1_in, value_b=mu1_out),
        noise0=noise,
        noise1=noise,
        tau_att_true=tau,
        score_support=(min(p_in_a, p_out), max(p_in_a, p_out)),
        name=f"categorical(mass_a={mass_a:g}, p_in_a={p_in_a:g}, p_out={p_out:g})",
    )


def sample_prognostic_covariates(a: float, n: int, seed: int) -> Sample:
    """Draw the prognostic population at the covariate level.

    Draws (X1, X2, X3) uniform on the cube, assigns treatment with
    probability x1 * x2^a, and sets the score to x1 + x3. Distributionally
    identical to sampling make_prognostic_spec(a); kept as a cross-check.
    """
    if a < 1.0 / 3.0:
        raise ValueError("prognostic spec requires a >= 1/3")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = _rng(seed)
    x1 = rng.random(n)
    x2 = rng.random(n)
    x3 = rng.random(n)
    w = (rng.random(n) < x1 * x2 ** a).astype(np.int8)
    s = x1 + x3
    y0 = s ** 2 + rng.standard_normal(n)
    y1 = 2.5 + rng.standard_normal(n)
    y = np.where(w == 1, y1, y0)
    return Sample(w, s, y0, y1, y)


def within_category_match_fraction(p_treated: float) -> float:
    """Expected fraction of a category's treated units matched inside it.

    With treated share p in the category, controls are the remaining 1 - p,
    so only (1 - p) / p of the treated find a same-category control once
    p exceeds one half; below that everyone matches locally.
    """
    if not 0.0 <= p_treated <= 1.0:
        raise ValueError("p_treated must be in [0, 1]")
    if p_treated == 0.0:
        return 1.0
    return min(1.0, (1.0 - p_treated) / p_treated)


def cross_category_match_share(mass: float, p_treated: float) -> float:
    """Share of the whole sample force-matched outside the category."""
    if not 0.0 <= mass <= 1.0:
        raise ValueError("mass must be in [0, 1]")
    return mass * p_treated * (1.0 - within_category_match_fraction(p_treated))


CSV_HEADER = ["id", "w", "s", "y0", "y1", "y"]


def sample_to_csv(smp: Sample, path) -> None:
    """Write a sample as CSV with header id,w,s,y0,y1,y."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(smp.n):
            writer.writerow([i, int(smp.w[i]), repr(float(smp.s[i])),
                             repr(float(smp.y0[i])), repr(float(smp.y1[i])),
                             repr(float(smp.y[i]))])


def sample_from_csv(path) -> Sample:
    """Read a sample from CSV.

    Requires id, w, s columns; y is optional (NaN when absent), as are the
    potential-outcome columns y0, y1 (real-data mode).
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty file")
        cols = set(reader.fieldnames)
        missing = {"id", "w", "s"} - cols
        if missing:
            raise ValueError(f"{path}: missing required columns {sorted(missing)}")
        w, s, y0, y1, y = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                w.append(int(row["w"]))
                s.append(float(row["s"]))
                y0.append(_opt_float(row.get("y0")))
                y1.append(_opt_float(row.get("y1")))
                y.append(_opt_float(row.get("y")))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row ({exc})") from None
    wa = np.asarray(w, dtype=np.int8)
    if wa.size and not np.all((wa == 0) | (wa == 1)):
        raise ValueError(f"{path}: w must be 0 or 1")
    return Sample(wa, np.asarray(s, dtype=float), np.asarray(y0, dtype=float),
                  np.asarray(y1, dtype=float), np.asarray(y, dtype=float))


def _opt_float(text):
    if text is None or text == "":
        return math.nan
    return float(text)
