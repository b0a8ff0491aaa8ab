from __future__ import annotations

from math import inf, sqrt

import numpy as np
import pytest

from nested_impute import mi
from nested_impute import schema as sc

from conftest import make_household
from helpers import crosstab_proportion

TWO_BINARY = """
var household_size scope=household levels=1
var x scope=individual levels=x1,x2
var y scope=individual levels=y1,y2
sizes=1
"""

ROLE_SCHEMA = """
var household_size scope=household levels=2,3
var own scope=household levels=yes,no
var age scope=individual levels=0..9 ordinal
var role scope=individual levels=head,spouse,kid
sizes=2,3
relationship=role
head=head
"""


@pytest.fixture(scope="module")
def role_schema():
    return sc.parse_schema(ROLE_SCHEMA)


@pytest.fixture(scope="module")
def role_dataset(role_schema):
    s = role_schema
    recs = [
        make_household(s, "h1", 2, [1, 1], [[8, 1], [7, 2]]),   # head 7, spouse 6
        make_household(s, "h2", 2, [1, 2], [[6, 1], [2, 3]]),   # head + kid
        make_household(s, "h3", 3, [2, 1], [[9, 1], [8, 2], [1, 3]]),
        make_household(s, "h4", 2, [1, 2], [[5, 1], [5, 3]]),
    ]
    return sc.Dataset(s, recs)


class TestCombining:
    def test_pooled_variance_closed_form(self):
        res = mi.combine_rubin([(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)])
        assert res.q_bar == pytest.approx(2.0, abs=1e-15)
        assert res.b == pytest.approx(1.0, abs=1e-15)
        assert res.u_bar == pytest.approx(0.5, abs=1e-15)
        assert res.T == pytest.approx(11.0 / 6.0, abs=1e-12)
        assert res.df == pytest.approx(3.78125, abs=1e-12)

    def test_partial_synth_closed_form(self):
        res = mi.combine_partial_synth([(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)])
        assert res.T == pytest.approx(5.0 / 6.0, abs=1e-12)
        assert res.df == pytest.approx(12.5, abs=1e-12)

    def test_partial_synth_tighter_on_shared_inputs(self):
        inputs = [(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)]
        assert mi.combine_partial_synth(inputs).T < mi.combine_rubin(inputs).T

    def test_identical_estimates_degenerate(self):
        res = mi.combine_rubin([(0.3, 0.01), (0.3, 0.02)])
        assert res.b == 0.0
        assert res.df == inf
        assert res.T == pytest.approx(0.015)
        # normal critical value: 1.959964
        assert res.hi - res.q_bar == pytest.approx(1.959964 * sqrt(0.015), abs=1e-5)

    def test_all_zero_u(self):
        res = mi.combine_rubin([(0.1, 0.0), (0.4, 0.0), (0.7, 0.0)])
        assert res.T == pytest.approx((1 + 1 / 3) * res.b, abs=1e-15)

    def test_partial_synth_b_zero_limit(self):
        res = mi.combine_partial_synth([(0.5, 0.2), (0.5, 0.4)])
        assert res.T == pytest.approx(0.3)
        assert res.df == inf

    def test_needs_two_datasets(self):
        with pytest.raises(ValueError):
            mi.combine_rubin([(0.5, 0.1)])

    def test_symbolic_reconstruction_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            L = int(rng.integers(2, 30))
            qs = rng.random(L)
            us = rng.random(L) * 0.1
            res = mi.combine_rubin(list(zip(qs, us)))
            b = qs.var(ddof=1)
            assert res.T == pytest.approx((1 + 1 / L) * b + us.mean(), rel=1e-12)
            if b > 0:
                assert res.df == pytest.approx(
                    (L - 1) * (1 + us.mean() / ((1 + 1 / L) * b)) ** 2, rel=1e-12
                )
            res2 = mi.combine_partial_synth(list(zip(qs, us)))
            assert res2.T == pytest.approx(us.mean() + b / L, rel=1e-12)

    def test_interval_widens_with_confidence(self):
        inputs = [(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)]
        narrow = mi.combine_rubin(inputs, gamma=0.10)
        wide = mi.combine_rubin(inputs, gamma=0.01)
        assert (wide.hi - wide.lo) > (narrow.hi - narrow.lo)

    def test_t_quantiles_against_tabulated(self):
        from scipy.special import stdtrit

        table = {
            1: 12.7062047362,
            5: 2.5705818356,
            10: 2.2281388520,
            30: 2.0422724563,
            100: 1.9839715185,
        }
        for df, want in table.items():
            assert float(stdtrit(df, 0.975)) == pytest.approx(want, abs=1e-8)


class TestEstimation:
    def test_all_households_match(self, role_dataset):
        est = mi.parse_estimand_line("households: count(role in {head}) >= 1")
        q, u = mi.estimate_on_dataset(role_dataset, est)
        assert (q, u) == (1.0, 0.0)

    def test_two_household_toy_spouse_present(self, role_schema):
        recs = [
            make_household(role_schema, "a", 2, [1, 1], [[8, 1], [7, 2]]),
            make_household(role_schema, "b", 2, [1, 1], [[8, 1], [2, 3]]),
        ]
        d = sc.Dataset(role_schema, recs)
        est = mi.parse_estimand_line("households: present(role in {spouse})")
        q, u = mi.estimate_on_dataset(d, est)
        assert q == 0.5
        assert u == pytest.approx(0.125)

    def test_size_denominator(self, role_dataset):
        est = mi.parse_estimand_line("size:2 : present(role in {spouse})")
        q, _ = mi.estimate_on_dataset(role_dataset, est)
        assert q == pytest.approx(1 / 3)

    def test_marginal_cell_over_individuals(self, role_dataset):
        est = mi.parse_estimand_line("individuals: role=kid")
        q, u = mi.estimate_on_dataset(role_dataset, est)
        assert q == pytest.approx(3 / 9)
        assert u == pytest.approx(q * (1 - q) / 9)

    def test_trivariate_matches_crosstab_oracle(self, role_schema):
        rng = np.random.default_rng(7)
        recs = []
        for i in range(60):
            size = int(rng.choice([2, 3]))
            rows = [[int(rng.integers(1, 11)), 1]] + [
                [int(rng.integers(1, 11)), int(rng.choice([2, 3]))]
                for _ in range(size - 1)
            ]
            recs.append(
                make_household(
                    role_schema, f"h{i}", size,
                    [size - 1, int(rng.choice([1, 2]))], rows,
                )
            )
        d = sc.Dataset(role_schema, recs)
        cells = [("own", "yes"), ("age", "3"), ("role", "kid")]
        est = mi.parse_estimand_line("individuals: own=yes & age=3 & role=kid")
        q, _ = mi.estimate_on_dataset(d, est)
        assert q == pytest.approx(crosstab_proportion(d, cells), abs=1e-12)

    def test_head_atoms_raw_layout(self, role_dataset):
        est = mi.parse_estimand_line(
            "households: head.age > sel(role in {spouse}).age"
        )
        q, _ = mi.estimate_on_dataset(role_dataset, est)
        assert q == pytest.approx(2 / 4)  # h1 and h3

    def test_head_atoms_transformed_layout(self, role_dataset):
        t = sc.head_to_household_transform(role_dataset)
        est = mi.parse_estimand_line(
            "households: head.age > sel(role in {spouse}).age"
        )
        q, _ = mi.estimate_on_dataset(t, est)
        assert q == pytest.approx(2 / 4)

    def test_all_same_includes_moved_head(self, role_dataset):
        est = mi.parse_estimand_line("size:2 : all_same(age)")
        q_raw, _ = mi.estimate_on_dataset(role_dataset, est)
        assert q_raw == pytest.approx(1 / 3)  # only h4 has equal ages
        t = sc.head_to_household_transform(role_dataset)
        q_t, _ = mi.estimate_on_dataset(t, est)
        assert q_t == q_raw

    def test_bounds_property(self, role_dataset):
        rng = np.random.default_rng(1)
        suite = mi.estimand_suite(role_dataset.schema, triples=False, max_pairs=20, seed=4)
        for est in suite:
            q, u = mi.estimate_on_dataset(role_dataset, est)
            assert 0.0 <= q <= 1.0
            assert 0.0 <= u <= 0.25

    def test_empty_denominator_errors(self, role_schema):
        d = sc.Dataset(
            role_schema,
            [make_household(role_schema, "a", 2, [1, 1], [[8, 1], [7, 2]])],
        )
        est = mi.parse_estimand_line("size:3 : present(role in {spouse})")
        with pytest.raises(mi.EstimandError, match="denominator"):
            mi.estimate_on_dataset(d, est)

    def test_incomplete_dataset_rejected(self, role_schema):
        rec = make_household(
            role_schema, "a", 2, [1, 1], [[8, 1], [7, 2]],
            hh_miss=[0, 1],
        )
        d = sc.Dataset(role_schema, [rec])
        est = mi.parse_estimand_line("households: present(role in {spouse})")
        with pytest.raises(mi.EstimandError, match="fully observed"):
            mi.estimate_on_dataset(d, est)


class TestSuite:
    def test_two_binary_vars_counts(self):
        s = sc.parse_schema(TWO_BINARY)
        # size var is constant; restrict attention to x and y cells
        suite = mi.estimand_suite(s, triples=False)
        marginals = [e for e in suite if e.kind == "marginal"]
        pairs = [e for e in suite if e.kind == "bivariate"]
        x_y_marginals = [
            e for e in marginals if e.atoms[0].var in ("x", "y")
        ]
        x_y_pairs = [
            e for e in pairs
            if {a.var for a in e.atoms} == {"x", "y"}
        ]
        assert len(x_y_marginals) == 4
        assert len(x_y_pairs) == 4

    def test_triple_count_formula(self, role_schema):
        suite = mi.estimand_suite(role_schema)
        triples = [e for e in suite if e.kind == "trivariate"]
        vars_ = [v.name for v in role_schema.household_vars + role_schema.individual_vars]
        from itertools import combinations

        expected = sum(
            role_schema.var(a).cardinality
            * role_schema.var(b).cardinality
            * role_schema.var(c).cardinality
            for a, b, c in combinations(vars_, 3)
        )
        assert len(triples) == expected

    def test_subsampling_caps(self, role_schema):
        suite = mi.estimand_suite(
            role_schema, max_marginal=5, max_pairs=7, max_triples=9, seed=1
        )
        kinds = {}
        for e in suite:
            kinds[e.kind] = kinds.get(e.kind, 0) + 1
        assert kinds["marginal"] == 5
        assert kinds["bivariate"] == 7
        assert kinds["trivariate"] == 9

    def test_predicates_appended(self, role_schema):
        suite = mi.estimand_suite(
            role_schema, pairs=False, triples=False,
            predicates=["households: present(role in {spouse})"],
        )
        assert suite[-1].kind == "household_predicate"
