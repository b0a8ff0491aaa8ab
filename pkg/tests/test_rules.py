from __future__ import annotations

import numpy as np
import pytest

from nested_impute import rules as ru
from nested_impute import schema as sc
from nested_impute.data import data_path

from conftest import make_household


@pytest.fixture(scope="module")
def acs_schema():
    with open(data_path("acs_missing_schema.txt")) as f:
        return sc.parse_schema(f.read())


@pytest.fixture(scope="module")
def acs_rules(acs_schema):
    return ru.RuleSet.from_file(data_path("acs_missing.rules"), acs_schema)


def person(schema, age, rel, gender="male", race="white", hisp="not_hispanic"):
    return (
        schema.var("gender").code(gender),
        schema.var("race").code(race),
        schema.var("hispanic").code(hisp),
        age + 1,
        schema.var("relationship").code(rel),
    )


def household(schema, people, hid="h1", own=1):
    size = len(people)
    return make_household(schema, hid, size, [own, schema.size_code(size)], people)[0]


class TestParsing:
    def test_count_rule(self):
        t = ru.parse_rule_line("count rel {head} min=1 max=1")
        assert t == ru.CountRule("rel", frozenset({"head"}), 1, 1)

    def test_count_rule_inf(self):
        t = ru.parse_rule_line("count rel {kid} min=2 max=inf")
        assert t.max == ru.INT32_MAX

    def test_bound_rule_ops(self):
        ge = ru.parse_rule_line("bound sel(rel in {spouse}).age >= 16")
        assert (ge.min, ge.max) == (16, None)
        lt = ru.parse_rule_line("bound head.age < 50")
        assert (lt.min, lt.max) == (None, 49)
        assert isinstance(lt.role, ru.Head)

    def test_guarded_bound(self):
        t = ru.parse_rule_line("bound if_present(rel in {grandchild}) head.age >= 31")
        assert t.if_present == ru.Selector("rel", frozenset({"grandchild"}))

    def test_pairdiff_offsets(self):
        t = ru.parse_rule_line("pairdiff head.age >= sel(rel in {kid}).age + 7")
        assert (t.op, t.offset) == (">=", 7)
        t = ru.parse_rule_line("pairdiff head.age <= sel(rel in {parent}).age - 4")
        assert (t.op, t.offset) == ("<=", -4)

    def test_pairdiff_same_var_required(self):
        with pytest.raises(ru.RuleError):
            ru.parse_rule_line("pairdiff head.age >= sel(rel in {kid}).weight + 7")

    def test_valuepair_sugar(self):
        t = ru.parse_rule_line("valuepair head.gender != sel(rel in {spouse}).gender")
        assert isinstance(t, ru.ValuePairRule)

    def test_valuepair_explicit(self):
        t = ru.parse_rule_line(
            "valuepair head.g ~ sel(rel in {spouse}).g forbid {(a,b);(b,a)}"
        )
        assert t.forbidden == frozenset({("a", "b"), ("b", "a")})

    def test_unknown_keyword(self):
        with pytest.raises(ru.RuleError, match="keyword"):
            ru.parse_rule_line("banish rel {head}")

    def test_comment_and_blank_lines(self):
        pairs = ru.parse_rules("# comment\n\ncount rel {head} min=1 max=1\n")
        assert len(pairs) == 1


class TestFeasibility:
    def test_ordinary_couple_ok(self, acs_schema, acs_rules):
        # head 30, spouse 28, opposite sex: slack everywhere
        h = household(
            acs_schema,
            [
                person(acs_schema, 30, "household_head", "male"),
                person(acs_schema, 28, "spouse", "female"),
            ],
        )
        assert ru.is_feasible(h, acs_rules)

    def test_two_heads_infeasible(self, acs_schema, acs_rules):
        h = household(
            acs_schema,
            [
                person(acs_schema, 30, "household_head"),
                person(acs_schema, 28, "household_head", "female"),
            ],
        )
        assert not ru.is_feasible(h, acs_rules)

    def test_couple_age_gap_50_infeasible(self, acs_schema, acs_rules):
        h = household(
            acs_schema,
            [
                person(acs_schema, 20, "household_head", "male"),
                person(acs_schema, 70, "spouse", "female"),
            ],
        )
        assert not ru.is_feasible(h, acs_rules)

    def test_same_sex_couple_blocked_by_configured_rule(self, acs_schema, acs_rules):
        h = household(
            acs_schema,
            [
                person(acs_schema, 30, "household_head", "male"),
                person(acs_schema, 28, "spouse", "male"),
            ],
        )
        assert not ru.is_feasible(h, acs_rules)

    def test_young_head_infeasible(self, acs_schema, acs_rules):
        h = household(
            acs_schema,
            [
                person(acs_schema, 15, "household_head"),
                person(acs_schema, 40, "parent", "female"),
            ],
        )
        assert not ru.is_feasible(h, acs_rules)

    def test_guarded_grandparent_bound(self, acs_schema, acs_rules):
        young_head_kid = household(
            acs_schema,
            [
                person(acs_schema, 28, "household_head"),
                person(acs_schema, 1, "biological_child"),
            ],
        )
        assert ru.is_feasible(young_head_kid, acs_rules)
        young_head_grandkid = household(
            acs_schema,
            [
                person(acs_schema, 28, "household_head"),
                person(acs_schema, 1, "grandchild"),
            ],
        )
        # guard fires: a 28-year-old cannot head a grandchild household
        assert not ru.is_feasible(young_head_grandkid, acs_rules)

    def test_missing_cells_undefined(self, acs_schema, acs_rules):
        rec, _ = make_household(
            acs_schema, "h1", 2, [1, 1],
            [person(acs_schema, 30, "household_head"), person(acs_schema, 28, "spouse")],
            ind_miss=[[0, 0, 0, 1, 0], [0, 0, 0, 0, 0]],
        )
        with pytest.raises(ru.FeasibilityUndefinedError):
            acs_rules.is_feasible(rec)

    def test_determinism_and_order_invariance(self, acs_schema, acs_rules):
        rng = np.random.default_rng(3)
        shuffled = list(zip(acs_rules.sources, acs_rules.templates))
        rng.shuffle(shuffled)
        reordered = ru.RuleSet(
            [t for _, t in shuffled], acs_schema, sources=[s for s, _ in shuffled]
        )
        rels = acs_schema.var("relationship").cardinality
        for _ in range(200):
            people = [
                person(
                    acs_schema,
                    int(rng.integers(0, 96)),
                    acs_schema.var("relationship").levels[int(rng.integers(rels))],
                    "male" if rng.random() < 0.5 else "female",
                )
                for _ in range(int(rng.integers(2, 5)))
            ]
            h = household(acs_schema, people)
            v1 = ru.is_feasible(h, acs_rules)
            assert v1 == ru.is_feasible(h, acs_rules)  # pure
            assert v1 == ru.is_feasible(h, reordered)  # conjunction order free


class TestCounting:
    def test_worked_example_combinations(self, worked_schema):
        assert ru.count_combinations(worked_schema, 2) == 1_690_000

    def test_worked_example_zeros(self, worked_schema, worked_rules):
        zeros = ru.count_structural_zeros(worked_schema, worked_rules, 2)
        assert zeros == 1_450_000
        assert abs(zeros / 1_690_000 - 0.858) < 0.001

    def test_post_transform_counts(self, worked_schema):
        ts = sc.transformed_schema(worked_schema)
        assert ru.count_combinations(ts, 2) == 120_000
        rs = ru.RuleSet.from_text(
            "count relationship {household_head} min=1 max=1", ts
        )
        assert ru.count_structural_zeros(ts, rs, 2) == 0
        assert len(rs.eliminated) == 1

    def test_single_binary_household_var(self):
        s = sc.parse_schema(
            "var household_size scope=household levels=1\n"
            "var flag scope=household levels=on,off\nsizes=1\n"
        )
        # no individual vars: the empty-individual product is 1
        s = sc.DatasetSchema(
            household_vars=s.household_vars,
            individual_vars=(sc.VariableSpec("z", "individual", ("u", "v")),),
            household_sizes=s.household_sizes,
        )
        assert ru.count_combinations(s, 1) == 4

    def test_counts_exceed_machine_integers(self, acs_schema):
        # census-style schema at size 4: the space dwarfs int64 but the
        # arithmetic stays exact
        total = ru.count_combinations(acs_schema, 4)
        per_person = 2 * 9 * 5 * 96 * 13
        assert total == 2 * per_person ** 4
        assert total > 2 ** 63

    def test_empty_ruleset_zeros(self, worked_schema):
        assert ru.count_structural_zeros(worked_schema, ru.RuleSet.empty(worked_schema), 2) == 0

    def test_closed_form_matches_enumeration(self, worked_schema):
        # age reduced to 5 levels keeps the space enumerable
        small = sc.parse_schema(
            sc.format_schema(worked_schema).replace(
                "levels=" + ",".join(str(i) for i in range(100)), "levels=0..4"
            )
        )
        assert small.var("age").cardinality == 5
        rs = ru.RuleSet.from_text("count relationship {household_head} min=1 max=1", small)
        closed = ru.count_structural_zeros(small, rs, 2)
        hh, ind = ru.feasible_arrays(small, rs, 2)
        assert closed + hh.shape[0] == ru.count_combinations(small, 2)
        # force the enumeration path and compare with the closed form
        by_enum = sum(
            int((~rs.feasible_mask(hh_b, ind_b)).sum())
            for hh_b, ind_b in ru.combination_batches(small, 2)
        )
        assert by_enum == closed

    def test_mixed_rules_counted_by_enumeration(self, worked_schema):
        small = sc.parse_schema(
            sc.format_schema(worked_schema).replace(
                "levels=" + ",".join(str(i) for i in range(100)), "levels=0..4"
            )
        )
        rs = ru.RuleSet.from_text(
            "count relationship {household_head} min=1 max=1\n"
            "bound head.age >= 2\n",
            small,
        )
        zeros = ru.count_structural_zeros(small, rs, 2)
        feas_hh, _ = ru.feasible_arrays(small, rs, 2)
        assert zeros + feas_hh.shape[0] == ru.count_combinations(small, 2)

    def test_enumeration_guard(self, worked_schema):
        rs = ru.RuleSet.from_text(
            "count relationship {household_head} min=1 max=1\n"
            "bound head.age >= 16\n",
            worked_schema,
        )
        with pytest.raises(ru.RuleError, match="too large"):
            ru.count_structural_zeros(worked_schema, rs, 2, enumeration_guard=10 ** 4)


class TestEnumeration:
    def test_two_binary_vars_no_rules(self, tiny_schema):
        feasible = list(ru.enumerate_feasible(tiny_schema, ru.RuleSet.empty(tiny_schema), 1))
        assert len(feasible) == 4

    def test_forbidden_pair_removes_one(self, tiny_schema):
        rs = ru.RuleSet([
            ru.ValuePairRule(
                ru.Selector("a", frozenset({"a1", "a2"})), "a",
                ru.Selector("b", frozenset({"b1", "b2"})), "b",
                frozenset({("a1", "b1")}),
            )
        ], tiny_schema)
        # a single individual cannot pair with itself; use a 2-person size
        s2 = sc.DatasetSchema(
            household_vars=(sc.VariableSpec("household_size", "household", ("2",)),),
            individual_vars=tiny_schema.individual_vars,
            household_sizes=(2,),
        )
        rs2 = ru.RuleSet(rs.templates, s2)
        feasible = list(ru.enumerate_feasible(s2, rs2, 2))
        total = ru.count_combinations(s2, 2)
        zeros = ru.count_structural_zeros(s2, rs2, 2)
        assert total == 16
        assert len(feasible) == total - zeros

    def test_each_member_once(self, tiny_schema):
        feasible = list(ru.enumerate_feasible(tiny_schema, ru.RuleSet.empty(tiny_schema), 1))
        keys = {(h.household_values, h.individuals) for h in feasible}
        assert len(keys) == len(feasible)


class TestHeadMovedCompilation:
    def test_head_bounds_reexpressed_not_dropped(self, acs_schema):
        ts = sc.transformed_schema(acs_schema)
        rs = ru.RuleSet.from_file(data_path("acs_missing.rules"), ts)
        assert any("structural" in reason for _, reason in rs.eliminated)
        assert len(rs.eliminated) == 1  # only the head-count rule
        assert len(rs.reexpressed) == 2  # head.age floor + guarded head bound
        # the re-expressed floor still bites: a 10-year-old head is infeasible
        hh_vals = [1, ts.size_code(2), 1, 1, 1, 10 + 1]
        spouse = person(acs_schema, 40, "spouse", "female")[:4] + (
            ts.var("relationship").code("spouse"),
        )
        rec = make_household(ts, "h1", 2, hh_vals, [list(spouse)])[0]
        assert not rs.is_feasible(rec)

    def test_pure_head_selector_reexpressed_post_transform(self, acs_schema):
        ts = sc.transformed_schema(acs_schema)
        rs = ru.RuleSet.from_text(
            "bound sel(relationship in {household_head}).age >= 16", ts
        )
        assert len(rs.reexpressed) == 1
        assert rs.compiled.codes[0, 0] == ru.K_BOUND_HH

    def test_mixed_head_selector_rejected_post_transform(self, acs_schema):
        ts = sc.transformed_schema(acs_schema)
        with pytest.raises(ru.RuleError, match="head level"):
            ru.RuleSet.from_text(
                "bound sel(relationship in {household_head,spouse}).age >= 16", ts
            )
