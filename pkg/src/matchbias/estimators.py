"""ATT estimation from matched samples.

Matcher pairs are positions into the treated/control score sequences; the
helpers here translate them through a Sample's treated/control index sets.
The matching estimator follows the convention of being exactly zero when
the sample has no treated units or (without replacement) more treated than
controls; `degenerate` records that the convention fired.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import Matching, MatchConfig, MatchingError, match_scores
from .population import Sample

WITHOUT_REPLACEMENT_METHODS = frozenset({"auto", "exact", "banded",
                                         "exact_dp", "banded_dp", "brute_force"})


@dataclass(frozen=True)
class AttEstimate:
    value: float
    n1_used: int
    method: str
    degenerate: bool = False


@dataclass(frozen=True)
class ControlWeights:
    """Per-control match counts; nu[j] is how many treated units control j absorbs."""

    nu: np.ndarray


def match_sample(smp: Sample, method: str = "auto",
                 config: MatchConfig | None = None) -> Matching:
    """Match a sample's treated scores to its control scores."""
    return match_scores(smp.treated_scores, smp.control_scores, method, config)


def _validate_pairs(matching: Matching, n1: int, n0: int) -> None:
    keys = matching.pairs.keys()
    if len(keys) != n1 or set(keys) != set(range(n1)):
        raise ValueError("matching must pair every treated position exactly once")
    for j in matching.pairs.values():
        if not 0 <= j < n0:
            raise ValueError(
                f"pair references position {j}, which is not a control")


def att_matching(smp: Sample, matching: Matching | None) -> AttEstimate:
    """Average within-pair outcome difference over the treated units.

    Pass matching=None to signal that no matching without replacement was
    possible (no treated units, or more treated than controls); the
    estimate is then zero by convention, flagged degenerate.
    """
    n1, n0 = smp.n1, smp.n0
    if n1 == 0 or matching is None:
        return AttEstimate(0.0, 0, "zero_convention", degenerate=True)
    _validate_pairs(matching, n1, n0)
    tp, cp = matching.pair_arrays()
    y_t = smp.y[smp.treated_idx[tp]]
    y_c = smp.y[smp.control_idx[cp]]
    return AttEstimate(float(np.mean(y_t - y_c)), n1, matching.method)


def control_weights(matching: Matching, n0: int) -> ControlWeights:
    """Count how many treated units each control position absorbs."""
    nu = np.zeros(n0, dtype=np.int64)
    for j in matching.pairs.values():
        if not 0 <= j < n0:
            raise ValueError(f"pair references position {j} out of {n0} controls")
        nu[j] += 1
    return ControlWeights(nu)


def att_weighted(smp: Sample, weights: ControlWeights) -> AttEstimate:
    """Weighting form of the matching estimator.

    mean(Y over treated) minus (1/N1) * sum(nu_j * Y_j over controls);
    identical to att_matching on the matching that induced the weights.
    """
    n1 = smp.n1
    nu = np.asarray(weights.nu)
    total = int(nu.sum())
    if total != n1:
        raise ValueError(f"weights sum to {total}, expected N1 = {n1}")
    if n1 == 0:
        return AttEstimate(0.0, 0, "weighted", degenerate=True)
    y_c = smp.y[smp.control_idx]
    value = float(np.mean(smp.y[smp.treated_idx]) - np.dot(nu, y_c) / n1)
    return AttEstimate(value, n1, "weighted")


def att_caliper(smp: Sample, matching: Matching, dropped: set[int]) -> AttEstimate:
    """ATT over the caliper-retained pairs only.

    Dropping pairs reweights the treated units: the estimand is the
    treatment effect among the caliper-retained subpopulation, not the full
    treated population.
    """
    n1 = smp.n1
    if not dropped <= set(range(n1)):
        raise ValueError("dropped indices must be treated positions")
    retained = [(i, j) for i, j in matching.pairs.items() if i not in dropped]
    if not retained:
        return AttEstimate(0.0, 0, "caliper", degenerate=True)
    tp = smp.treated_idx[[i for i, _ in retained]]
    cp = smp.control_idx[[j for _, j in retained]]
    value = float(np.mean(smp.y[tp] - smp.y[cp]))
    return AttEstimate(value, len(retained), "caliper")


def att_true_sample(smp: Sample) -> float:
    """Sample-level target: mean of y1 - y0 over the treated units."""
    if smp.n1 == 0:
        raise ValueError("no treated units; sample ATT undefined")
    t = smp.treated_idx
    return float(np.mean(smp.y1[t] - smp.y0[t]))


def diagnose_overlap(smp: Sample, threshold: float = 0.5,
                     assign_prob=None) -> tuple[float, int]:
    """Fraction and count of units at or above the score threshold.

    When assign_prob is given, it maps scores to treatment probabilities
    first, so the check reads directly as the estimated mass with
    propensity >= threshold. A nonzero count already refutes the hypothesis
    that this mass is zero.
    """
    if smp.n == 0:
        return 0.0, 0
    values = smp.s if assign_prob is None else np.asarray(assign_prob(smp.s))
    count = int(np.count_nonzero(values >= threshold))
    return count / smp.n, count


def estimate_csv_row(est: AttEstimate) -> str:
    """Render an estimate as a CSV row `method,value,n1_used,degenerate`."""
    return f"{est.method},{est.value!r},{est.n1_used},{int(est.degenerate)}"


def att_without_replacement(smp: Sample, method: str = "auto",
                            config: MatchConfig | None = None) -> AttEstimate:
    """Match without replacement and estimate, applying the zero convention."""
    if method not in WITHOUT_REPLACEMENT_METHODS:
        raise ValueError(f"{method!r} is not a without-replacement method")
    if smp.n1 == 0 or smp.n1 > smp.n0:
        return att_matching(smp, None)
    try:
        matching = match_sample(smp, method, config)
    except MatchingError:
        return att_matching(smp, None)
    return att_matching(smp, matching)
