"""Cross-backend contract: the compiled and pure-python kernels must agree
bitwise given a shared seed, and the compiled path must evaluate rules
identically to the reference evaluator."""

from __future__ import annotations

import numpy as np
import pytest

from nested_impute import _backend
from nested_impute import gibbs as gi
from nested_impute import model as mo
from nested_impute import rules as ru
from nested_impute import schema as sc

from test_gibbs import SMALL, RULES, mask_randomly, simulate_complete, strip_timings

needs_compiled = pytest.mark.skipif(
    not _backend.compiled_available(), reason="compiled extension unavailable"
)


@pytest.fixture(scope="module")
def schema():
    return sc.parse_schema(SMALL)


@pytest.fixture(scope="module")
def ruleset(schema):
    return ru.RuleSet.from_text(RULES, schema)


@pytest.fixture
def both_backends():
    previous = _backend.backend_name()
    yield
    _backend.set_backend(previous)


@needs_compiled
class TestParity:
    def test_feasible_mask_random_batches(self, schema, ruleset, both_backends):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 200))
            hh = np.column_stack(
                [
                    rng.integers(1, 3, n),
                    rng.integers(1, 3, n),
                ]
            ).astype(np.int32)
            ind = np.stack(
                [
                    rng.integers(1, 5, (n, 2)),
                    rng.integers(1, 4, (n, 2)),
                ],
                axis=2,
            ).astype(np.int32)
            _backend.set_backend("compiled")
            a = ruleset.feasible_mask(hh, ind)
            _backend.set_backend("python")
            b = ruleset.feasible_mask(hh, ind)
            assert np.array_equal(a, b)

    def test_random_rule_sets_agree(self, schema, both_backends):
        # fuzz the compiled rule evaluator against the reference one over
        # randomly generated rule sets and batches
        rng = np.random.default_rng(99)
        age_levels = [str(i) for i in range(4)]
        role_levels = ["head", "spouse", "kid"]
        own_levels = ["yes", "no"]

        def random_levelset(levels):
            k = int(rng.integers(1, len(levels)))
            picks = rng.choice(len(levels), size=k, replace=False)
            return frozenset(levels[i] for i in picks)

        for trial in range(30):
            templates = []
            for _ in range(int(rng.integers(1, 6))):
                kind = int(rng.integers(4))
                if kind == 0:
                    lo = int(rng.integers(0, 2))
                    hi = int(rng.integers(lo, 4))
                    templates.append(
                        ru.CountRule("role", random_levelset(role_levels), lo, hi)
                    )
                elif kind == 1:
                    lo = int(rng.integers(0, 3))
                    guard = (
                        ru.Selector("role", random_levelset(role_levels))
                        if rng.random() < 0.5 else None
                    )
                    templates.append(
                        ru.AttrBoundRule(
                            ru.Selector("role", random_levelset(role_levels)),
                            "age4", lo, None, if_present=guard,
                        )
                    )
                elif kind == 2:
                    templates.append(
                        ru.PairDiffRule(
                            ru.Selector("role", random_levelset(role_levels)),
                            ru.Selector("role", random_levelset(role_levels)),
                            "age4",
                            str(rng.choice(["<=", ">=", "<", ">"])),
                            int(rng.integers(-3, 4)),
                        )
                    )
                else:
                    forbidden = frozenset(
                        (a, b)
                        for a in age_levels
                        for b in age_levels
                        if rng.random() < 0.3
                    ) or frozenset({("0", "0")})
                    templates.append(
                        ru.ValuePairRule(
                            ru.Selector("role", random_levelset(role_levels)), "age4",
                            ru.Selector("role", random_levelset(role_levels)), "age4",
                            forbidden,
                        )
                    )
            rs = ru.RuleSet(templates, schema)
            n = 150
            hh = np.column_stack(
                [rng.integers(1, 3, n), rng.integers(1, 3, n)]
            ).astype(np.int32)
            ind = np.stack(
                [rng.integers(1, 5, (n, 3)), rng.integers(1, 4, (n, 3))], axis=2
            ).astype(np.int32)
            _backend.set_backend("compiled")
            a = rs.feasible_mask(hh, ind)
            _backend.set_backend("python")
            b = rs.feasible_mask(hh, ind)
            assert np.array_equal(a, b), f"trial {trial}: {templates}"

    def test_rejection_bitwise_identical(self, schema, ruleset, both_backends):
        params = mo.init_from_prior(mo.Hyperparams(3, 2), schema, np.random.default_rng(1))
        ptables = mo.build_proposal_tables(params, schema)
        outs = {}
        for name in ("compiled", "python"):
            _backend.set_backend(name)
            rng = np.random.default_rng(42)
            outs[name] = _backend.rejection_households(
                rng, ptables, ruleset.compiled, 2, 700, keep_infeasible=True
            )
        for a, b in zip(outs["compiled"], outs["python"]):
            if isinstance(a, np.ndarray):
                assert np.array_equal(a, b)
            else:
                assert a == b

    def test_imputation_bitwise_identical(self, schema, ruleset, both_backends):
        params = mo.init_from_prior(mo.Hyperparams(3, 2), schema, np.random.default_rng(2))
        ptables = mo.build_proposal_tables(params, schema)
        n = 300
        base_hh = np.tile(np.array([[1, 1]], dtype=np.int32), (n, 1))
        base_ind = np.tile(np.array([[[4, 1], [1, 3]]], dtype=np.int32), (n, 1, 1))
        hh_mask = np.zeros((n, 2), dtype=bool)
        hh_mask[:, 1] = True
        ind_mask = np.zeros((n, 2, 2), dtype=bool)
        ind_mask[:, 1, 0] = True
        ind_mask[: n // 2, 0, 0] = True
        G = np.tile(np.array([0, 1, 2], dtype=np.int32), n // 3)
        M = np.tile(np.array([[0, 1]], dtype=np.int32), (n, 1))
        results = {}
        for name in ("compiled", "python"):
            _backend.set_backend(name)
            hh = base_hh.copy()
            ind = base_ind.copy()
            attempts = _backend.impute_missing_cells(
                np.random.default_rng(9), ptables, ruleset.compiled, 2,
                hh, ind, hh_mask, ind_mask, G, M,
            )
            results[name] = (hh, ind, attempts)
        assert np.array_equal(results["compiled"][0], results["python"][0])
        assert np.array_equal(results["compiled"][1], results["python"][1])
        assert results["compiled"][2] == results["python"][2]

    def test_full_chain_bitwise_identical(self, schema, ruleset, both_backends):
        d, _ = simulate_complete(schema, ruleset, {2: 25, 3: 15}, seed=70)
        dm = mask_randomly(d, 0.3, seed=71)
        cfg = gi.SamplerConfig(iterations=10, burn_in=4, thin=2, seed=72)
        runs = {}
        for name in ("compiled", "python"):
            _backend.set_backend(name)
            runs[name] = gi.run_chain(dm, ruleset, mo.Hyperparams(3, 2), cfg)
        a, b = runs["compiled"], runs["python"]
        assert strip_timings(a.diagnostics) == strip_timings(b.diagnostics)
        for (i1, v1), (i2, v2) in zip(a.completed_snapshots, b.completed_snapshots):
            assert i1 == i2
            for h in v1:
                assert np.array_equal(v1[h][0], v2[h][0])
                assert np.array_equal(v1[h][1], v2[h][1])
        assert np.array_equal(a.final_params.ind_probs, b.final_params.ind_probs)


class TestSelection:
    def test_set_backend_validates(self):
        with pytest.raises(ValueError):
            _backend.set_backend("turbo")

    def test_backend_name_reports(self):
        assert _backend.backend_name() in ("compiled", "python")
