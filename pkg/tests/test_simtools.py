from __future__ import annotations

import numpy as np
import pytest

from nested_impute import model as mo
from nested_impute import rules as ru
from nested_impute import schema as sc
from nested_impute import simtools as st

from test_gibbs import SMALL, RULES


@pytest.fixture(scope="module")
def schema():
    return sc.parse_schema(SMALL)


@pytest.fixture(scope="module")
def ruleset(schema):
    return ru.RuleSet.from_text(RULES, schema)


class TestPopulation:
    def test_exact_counts(self, schema, ruleset):
        params = mo.init_from_prior(mo.Hyperparams(3, 2), schema, np.random.default_rng(0))
        d = st.sample_population(params, schema, ruleset, {2: 100, 3: 0},
                                 np.random.default_rng(1))
        assert d.n_by_size == {2: 100, 3: 0}
        assert d.fully_observed()

    def test_seeded_reproducibility(self, schema, ruleset):
        params = mo.init_from_prior(mo.Hyperparams(3, 2), schema, np.random.default_rng(0))
        a = st.sample_population(params, schema, ruleset, {2: 40, 3: 20},
                                 np.random.default_rng(7))
        b = st.sample_population(params, schema, ruleset, {2: 40, 3: 20},
                                 np.random.default_rng(7))
        assert a.households == b.households

    def test_all_feasible(self, schema, ruleset):
        params = mo.init_from_prior(mo.Hyperparams(3, 2), schema, np.random.default_rng(2))
        d = st.sample_population(params, schema, ruleset, {2: 80, 3: 40},
                                 np.random.default_rng(3))
        for h, grp in d.groups().items():
            if grp.n:
                assert ruleset.feasible_mask(grp.hh, grp.ind).all()


class TestMcar:
    def _population(self, schema, ruleset, n2=3000, n3=2000, seed=4):
        params = mo.uniform_params(schema, 1, 1)
        return st.sample_population(
            params, schema, ruleset, {2: n2, 3: n3}, np.random.default_rng(seed)
        )

    def test_complete_fraction_exact(self, schema, ruleset):
        d = self._population(schema, ruleset, 400, 100)
        masked = st.apply_mcar(d, 0.8, 0.5, np.random.default_rng(5))
        complete = sum(1 for _, mask in masked.households if not mask.any())
        # at least the selected 80% stay complete; a few more may dodge masking
        assert complete >= 400

    def test_realized_rate_within_binomial_bounds(self, schema, ruleset):
        d = self._population(schema, ruleset)
        masked = st.apply_mcar(d, 0.8, 0.5, np.random.default_rng(6))
        # maskable cells: one non-size household cell + p per individual
        maskable = sum(
            1 + d.schema.p * rec.size for rec, _ in d.households
        )
        expected = 0.2 * 0.5
        rate = masked.missing_cells() / maskable
        se = np.sqrt(expected * (1 - expected) / maskable)
        assert abs(rate - expected) < 3 * se

    def test_zero_rate_no_masks(self, schema, ruleset):
        d = self._population(schema, ruleset, 50, 20)
        masked = st.apply_mcar(d, 0.8, 0.0, np.random.default_rng(7))
        assert masked.missing_cells() == 0

    def test_size_never_masked(self, schema, ruleset):
        d = self._population(schema, ruleset, 300, 200)
        masked = st.apply_mcar(d, 0.0, 0.9, np.random.default_rng(8))
        for _, mask in masked.households:
            assert mask.household_mask[d.schema.size_index] == 0

    def test_rate_validation(self, schema, ruleset):
        d = self._population(schema, ruleset, 10, 5)
        with pytest.raises(ValueError):
            st.apply_mcar(d, 1.2, 0.5, np.random.default_rng(0))


STRESS_SCHEMA = """
var household_size scope=household levels=2,3,4
var own scope=household levels=owned,rented
var age_of_HH scope=household levels=0..95 ordinal
var gender scope=individual levels=male,female
var age scope=individual levels=0..95 ordinal
var relationship scope=individual levels=spouse,biological_child,adopted_child,stepchild,sibling,parent,grandchild,parent_in_law,child_in_law,other_relative,boarder_roommate_partner,other_nonrelative
sizes=2,3,4
relationship=relationship
head_moved=true
"""


def build_stress_dataset(n=5000, seed=0):
    """Households in head-moved layout with relationship/age marginals tuned
    so the default masking rates land near their nominal levels; the
    relationship-age joint carries negative dependence to keep the
    double-missing share near 8%."""
    s = sc.parse_schema(STRESS_SCHEMA)
    rng = np.random.default_rng(seed)
    rel_groups = [
        (np.array([2]), 0.20),
        (np.array([3, 4, 5, 10]), 0.50),
        (np.array([7, 9]), 0.10),
        (np.array([6, 8, 11, 12]), 0.20),
    ]
    age_bands = [(0, 20), (21, 50), (51, 70), (71, 95)]
    # joint over (relationship group, age band); rows sum to the group masses
    # and high age-masking groups sit in low relationship-masking bands so
    # the double-missing share stays near 8%
    joint = np.array(
        [
            [0.010, 0.040, 0.130, 0.020],
            [0.230, 0.190, 0.010, 0.070],
            [0.020, 0.070, 0.005, 0.005],
            [0.040, 0.150, 0.005, 0.005],
        ]
    )
    joint = joint / joint.sum()
    flat = joint.ravel()
    recs = []
    sizes = rng.choice([2, 3, 4], size=n)
    for i in range(int(n)):
        size = int(sizes[i])
        m = size - 1
        hh = [s.size_code(size), int(rng.integers(1, 3)), int(rng.integers(17, 96))]
        rows = []
        for _ in range(m):
            cell = int(rng.choice(flat.size, p=flat))
            gi_, bi = divmod(cell, 4)
            rel = int(rng.choice(rel_groups[gi_][0]))
            lo, hi = age_bands[bi]
            age = int(rng.integers(lo, hi + 1))
            rows.append([int(rng.integers(1, 3)), age + 1, rel])
        recs.append(
            (
                sc.Household(f"h{i}", size, tuple(hh), tuple(tuple(r) for r in rows)),
                sc.MissingnessMask((0, 0, 0), tuple((0, 0, 0) for _ in range(m))),
            )
        )
    return sc.Dataset(s, recs)


class TestStressMechanism:
    def test_protected_cells_never_masked(self):
        d = build_stress_dataset(n=800, seed=1)
        masked = st.apply_stress_mechanism(d, np.random.default_rng(2))
        s = d.schema
        age_hh = s.hh_var_index("age_of_HH")
        for _, mask in masked.households:
            assert mask.household_mask[s.size_index] == 0
            assert mask.household_mask[age_hh] == 0

    def test_value_dependent_rates(self):
        d = build_stress_dataset(n=4000, seed=3)
        masked = st.apply_stress_mechanism(d, np.random.default_rng(4))
        s = d.schema
        rel_idx = s.ind_var_index("relationship")
        age_idx = s.ind_var_index("age")
        n_bio = miss_bio = n_older = miss_older = 0
        for (rec, mask), (orig, _) in zip(masked.households, d.households):
            for row, mrow in zip(orig.individuals, mask.individual_masks):
                if row[rel_idx] == 2:
                    n_bio += 1
                    miss_bio += mrow[age_idx]
                if row[age_idx] - 1 > 70:
                    n_older += 1
                    miss_older += mrow[rel_idx]
        assert abs(miss_bio / n_bio - 0.50) < 3 * np.sqrt(0.25 / n_bio)
        assert abs(miss_older / n_older - 0.55) < 3 * np.sqrt(0.25 / n_older)

    def test_requires_head_moved_layout(self, schema):
        params = mo.uniform_params(schema, 1, 1)
        d = st.sample_population(
            params, schema, ru.RuleSet.empty(schema), {2: 5, 3: 0},
            np.random.default_rng(0),
        )
        with pytest.raises(ValueError, match="head"):
            st.apply_stress_mechanism(d, np.random.default_rng(1), age_var="age4",
                                      relationship_var="role")
