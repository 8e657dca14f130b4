import math
from functools import partial

import numpy as np
import pytest

from matchbias import population as pop
from matchbias import theory


A_GRID = (1 / 3, 0.4, 4 / 9, 0.6, 0.8, 1.0)


class TestClosedForms:
    def test_table_values(self):
        assert theory.prognostic_bias_closed_form(1 / 3) == pytest.approx(
            9 * (2 / 3) ** 4 * 14 / 160)
        assert round(theory.prognostic_bias_closed_form(1 / 3), 4) == 0.1556
        assert round(theory.prognostic_bias_closed_form(4 / 9), 4) == 0.0804
        assert theory.prognostic_bias_closed_form(1.0) == 0.0

    def test_intermediate_forms_at_a_third(self):
        a = 1 / 3
        assert theory.prognostic_upper_mass_ratio(a) == pytest.approx(2 / 3)
        assert theory.prognostic_outcome_gap(a) == pytest.approx(7 / 30)
        assert theory.prognostic_treated_upper_mean(a) == pytest.approx(1.95)
        assert theory.prognostic_sstar_lower(a) == pytest.approx(1.0)

    def test_factorization(self):
        for a in A_GRID:
            assert theory.prognostic_bias_closed_form(a) == pytest.approx(
                theory.prognostic_upper_mass_ratio(a)
                * theory.prognostic_outcome_gap(a), abs=1e-14)

    def test_domain_guard(self):
        for a in (0.2, 1.5):
            with pytest.raises(ValueError):
                theory.prognostic_bias_closed_form(a)
            with pytest.raises(ValueError):
                theory.prognostic_sstar_lower(a)


class TestPStar:
    def test_uniform_propensity(self):
        # g(p) = (p + 0.8) / 2 crosses one half at p = 0.2
        spec = pop.make_uniform_propensity_spec(0.8)
        res = theory.pstar(spec, 1e-8)
        assert res.pstar == pytest.approx(0.2, abs=1e-6)
        assert res.tail_treated_prob == pytest.approx(0.5, abs=1e-6)
        assert not res.defaulted
        assert res.left_closed

    def test_default_rule(self):
        spec = pop.make_uniform_propensity_spec(0.4)
        res = theory.pstar(spec, 1e-8)
        assert res.pstar == 0.5
        assert res.defaulted
        assert res.left_closed
        assert math.isnan(res.tail_treated_prob)

    def test_mc_fallback(self):
        spec = pop.make_uniform_propensity_spec(0.8)
        stripped = pop.PopulationSpec(
            score_sampler=spec.score_sampler, assign_prob=spec.assign_prob,
            mu0=spec.mu0, mu1=spec.mu1, noise0=spec.noise0, noise1=spec.noise1)
        res = theory.pstar(stripped, 1e-8)
        assert res.pstar == pytest.approx(0.2, abs=0.005)

    def test_rejects_bad_tol(self):
        with pytest.raises(ValueError):
            theory.pstar(pop.make_uniform_propensity_spec(0.8), 0.0)


class TestSStarThreshold:
    def test_paper_formula_on_grid(self):
        for a in A_GRID:
            spec = pop.make_prognostic_spec(a)
            b = theory.sstar_threshold(spec, 1e-9)
            assert b == pytest.approx((3 * a + 1) / 2, abs=1e-6)

    def test_no_root_above_one(self):
        spec = pop.make_prognostic_spec(2.0)
        with pytest.raises(theory.SStarNotFoundError):
            theory.sstar_threshold(spec)

    def test_requires_monotone_assign(self):
        bumpy = pop.PopulationSpec(
            score_sampler=pop._triangular_scores,
            assign_prob=pop._triangular_pdf,  # rises then falls
            mu0=pop._square, mu1=partial(pop._const, value=1.0),
            noise0=pop._no_noise, noise1=pop._no_noise,
            score_pdf=pop._triangular_pdf, score_support=(0.0, 2.0))
        with pytest.raises(ValueError, match="monotone"):
            theory.sstar_threshold(bumpy)


class TestBiasScore:
    def test_agrees_with_closed_form(self):
        for a in A_GRID:
            spec = pop.make_prognostic_spec(a)
            rep = theory.asymptotic_bias_score(spec, 1e-9)
            assert rep.bias == pytest.approx(
                theory.prognostic_bias_closed_form(a), abs=1e-3)

    def test_report_pieces_at_a_third(self):
        spec = pop.make_prognostic_spec(1 / 3)
        rep = theory.asymptotic_bias_score(spec, 1e-9)
        assert rep.prob_upper == pytest.approx(0.5, abs=1e-6)
        assert rep.pi_bar == pytest.approx(0.375, abs=1e-9)
        assert rep.e_y0_treated_upper == pytest.approx(1.95, abs=1e-4)
        assert rep.e_y0_treated_upper - rep.e_y0_control_upper == pytest.approx(
            7 / 30, abs=1e-4)

    def test_internal_identity(self):
        for a in (1 / 3, 0.6, 1.0):
            rep = theory.asymptotic_bias_score(pop.make_prognostic_spec(a))
            assert rep.bias == pytest.approx(
                rep.prob_upper / (2 * rep.pi_bar)
                * (rep.e_y0_treated_upper - rep.e_y0_control_upper), abs=1e-12)

    def test_zero_mass_above_one(self):
        rep = theory.asymptotic_bias_score(pop.make_prognostic_spec(2.0))
        assert rep.bias == 0.0 and rep.prob_upper == 0.0

    def test_monotone_in_a(self):
        biases = [theory.asymptotic_bias_score(pop.make_prognostic_spec(a)).bias
                  for a in A_GRID]
        assert all(biases[i + 1] <= biases[i] + 1e-9
                   for i in range(len(biases) - 1))

    def test_mc_fallback_close(self):
        spec = pop.make_prognostic_spec(1 / 3)
        stripped = pop.PopulationSpec(
            score_sampler=spec.score_sampler, assign_prob=spec.assign_prob,
            mu0=spec.mu0, mu1=spec.mu1, noise0=spec.noise0, noise1=spec.noise1)
        rep = theory.asymptotic_bias_score(stripped)
        assert rep.bias == pytest.approx(7 / 45, abs=0.01)


class TestBiasPropensity:
    def test_uniform_example_hand_computed(self):
        # Uniform[0, 0.8], mu0(s) = s. p* = 0.2; over [0.2, 0.8]:
        # E[S|W=1] = int s^2 / int s = 0.168/0.3 = 0.56
        # E[S|W=0] = int s(1-s) / int (1-s) = 0.132/0.3 = 0.44
        # bias = (0.75 / 0.8) * 0.12 = 0.1125
        spec = pop.make_uniform_propensity_spec(0.8)
        rep = theory.asymptotic_bias_propensity(spec, 1e-9)
        assert rep.prob_upper == pytest.approx(0.75, abs=1e-6)
        assert rep.pi_bar == pytest.approx(0.4, abs=1e-9)
        assert rep.e_y0_treated_upper == pytest.approx(0.56, abs=1e-6)
        assert rep.e_y0_control_upper == pytest.approx(0.44, abs=1e-6)
        assert rep.bias == pytest.approx(0.1125, abs=1e-6)

    def test_no_mass_above_half_gives_zero(self):
        rep = theory.asymptotic_bias_propensity(
            pop.make_uniform_propensity_spec(0.4))
        assert rep.bias == 0.0 and rep.prob_upper == 0.0

    def test_constant_mu0_gives_zero(self):
        spec = pop.make_uniform_propensity_spec(
            0.8, mu0=partial(pop._const, value=2.0))
        rep = theory.asymptotic_bias_propensity(spec)
        assert rep.bias == pytest.approx(0.0, abs=1e-9)

    def test_matches_score_route_on_rescaled_prognostic(self):
        for a in (1 / 3, 4 / 9, 0.8):
            rep = theory.asymptotic_bias_propensity(
                pop.make_prognostic_propensity_spec(a), 1e-9)
            assert rep.bias == pytest.approx(
                theory.prognostic_bias_closed_form(a), abs=1e-3)

    def test_rejects_non_identity_score(self):
        with pytest.raises(ValueError, match="score"):
            theory.asymptotic_bias_propensity(pop.make_prognostic_spec(0.5))

    def test_rejects_zero_treated(self):
        dead = pop.PopulationSpec(
            score_sampler=partial(pop._uniform_scores, upper=0.5),
            assign_prob=partial(pop._const, value=0.0),
            mu0=pop._identity, mu1=pop._identity,
            noise0=pop._no_noise, noise1=pop._no_noise,
            score_pdf=partial(pop._uniform_pdf, upper=0.5),
            score_support=(0.0, 0.5))
        with pytest.raises(ValueError, match="pi_bar"):
            theory.asymptotic_bias_score(dead)


class TestWasserstein:
    def test_identical_quantiles(self):
        assert theory.wasserstein_1d(lambda u: u, lambda u: u) == 0.0

    def test_point_masses(self):
        c = 2.5
        got = theory.wasserstein_1d(lambda u: np.zeros_like(u),
                                    lambda u: np.full_like(u, c))
        assert got == pytest.approx(c)

    def test_shifted_uniforms(self):
        delta = 0.3
        got = theory.wasserstein_1d(lambda u: u, lambda u: u + delta, grid=512)
        assert got == pytest.approx(delta, abs=1 / 512)

    def test_symmetry_and_triangle_on_empirical(self):
        rng = np.random.default_rng(6)
        grid = 1024
        datasets = [np.sort(rng.normal(loc, 1.0, 400)) for loc in (0.0, 0.5, 2.0)]
        qs = [lambda u, d=d: np.quantile(d, u) for d in datasets]
        w01 = theory.wasserstein_1d(qs[0], qs[1], grid)
        w10 = theory.wasserstein_1d(qs[1], qs[0], grid)
        assert w01 == pytest.approx(w10, abs=1e-12)
        w02 = theory.wasserstein_1d(qs[0], qs[2], grid)
        w12 = theory.wasserstein_1d(qs[1], qs[2], grid)
        assert w02 <= w01 + w12 + 2 / grid

    def test_grid_guard(self):
        with pytest.raises(ValueError):
            theory.wasserstein_1d(lambda u: u, lambda u: u, grid=1)


class TestWeightedObjective:
    def test_empty_region_is_zero(self):
        spec = pop.make_prognostic_spec(0.5)
        assert theory.weighted_wasserstein_objective(spec, 2.0) == 0.0

    def test_identical_conditional_laws(self):
        flat = pop.PopulationSpec(
            score_sampler=partial(pop._uniform_scores, upper=1.0),
            assign_prob=partial(pop._const, value=0.3),
            mu0=pop._identity, mu1=pop._identity,
            noise0=pop._no_noise, noise1=pop._no_noise,
            score_pdf=partial(pop._uniform_pdf, upper=1.0),
            score_support=(0.0, 1.0))
        assert theory.weighted_wasserstein_objective(flat, 0.4) == pytest.approx(
            0.0, abs=1e-9)

    def test_prognostic_links_to_empirical_matching_cost(self):
        from matchbias import estimators, matching
        spec = pop.make_prognostic_spec(1 / 3)
        w_star = theory.weighted_wasserstein_objective(spec, 1.0)
        assert w_star > 0.0
        smp = pop.sample(spec, 100_000, 11)
        m = matching.match_optimal_exact(smp.treated_scores, smp.control_scores)
        per_treated = m.total_cost / smp.n1
        assert per_treated == pytest.approx(w_star, rel=0.15)


class TestReportRendering:
    def test_csv_row_and_text(self):
        rep = theory.asymptotic_bias_score(pop.make_prognostic_spec(1 / 3))
        row = theory.bias_report_csv_row(rep)
        assert len(row.split(",")) == 5
        text = theory.format_bias_report(rep)
        assert "asymptotic bias" in text and "pi_bar" in text
