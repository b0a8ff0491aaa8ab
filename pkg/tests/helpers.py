"""Independent oracles used to freeze expected values in tests.

These deliberately avoid the library's vectorized code paths: probabilities
come from explicit loops over enumerated combination spaces.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from nested_impute.schema import DatasetSchema


def enumerate_combos(schema: DatasetSchema, h: int):
    """Yield (hh_values, ind_rows) tuples covering the size-h space."""
    m = schema.stored_individuals(h)
    hh_ranges = []
    for k, var in enumerate(schema.household_vars):
        if k == schema.size_index:
            hh_ranges.append((schema.size_code(h),))
        else:
            hh_ranges.append(tuple(range(1, var.cardinality + 1)))
    ind_ranges = tuple(
        tuple(range(1, var.cardinality + 1)) for var in schema.individual_vars
    )
    person_space = list(product(*ind_ranges)) if m else [()]
    for hh in product(*hh_ranges):
        for people in product(person_space, repeat=m):
            yield hh, people


def model_prob(params, schema, hh, people, condition_on_size=True):
    """Pr(record, marginalizing classes) by explicit loops.

    With ``condition_on_size`` the household-class weights are re-weighted
    by the size cell and the size factor is dropped (the generative scheme
    for a fixed household size).
    """
    F = params.class_weight.shape[0]
    S = params.member_weight.shape[1]
    size_idx = schema.size_index
    size_off = int(schema.hh_offsets[size_idx])
    if condition_on_size:
        w = np.array(
            [
                params.class_weight[g] * params.hh_probs[g, size_off + hh[size_idx] - 1]
                for g in range(F)
            ]
        )
        w = w / w.sum()
    else:
        w = params.class_weight
    total = 0.0
    for g in range(F):
        term = w[g]
        for k, val in enumerate(hh):
            if condition_on_size and k == size_idx:
                continue
            off = int(schema.hh_offsets[k])
            term *= params.hh_probs[g, off + val - 1]
        for person in people:
            inner = 0.0
            for mm in range(S):
                piece = params.member_weight[g, mm]
                for k, val in enumerate(person):
                    off = int(schema.ind_offsets[k])
                    piece *= params.ind_probs[g, mm, off + val - 1]
                inner += piece
            term *= inner
        total += term
    return total


def loglik_oracle(params, schema, records):
    """Sum of log joint-marginal probabilities over complete households."""
    total = 0.0
    for hh, people in records:
        total += np.log(model_prob(params, schema, hh, people, condition_on_size=False))
    return total


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def empirical_dist(samples) -> dict:
    out = {}
    n = len(samples)
    for s in samples:
        out[s] = out.get(s, 0.0) + 1.0 / n
    return out


def crosstab_proportion(dataset, cells) -> float:
    """Fraction of individuals matching the (var, level-label) cells, by
    direct iteration over household records."""
    schema = dataset.schema
    num = 0
    den = 0
    for rec, _ in dataset.households:
        for person in rec.individuals:
            den += 1
            ok = True
            for var_name, label in cells:
                var = schema.var(var_name)
                code = var.code(label)
                if var.scope == "household":
                    val = rec.household_values[schema.hh_var_index(var_name)]
                else:
                    val = person[schema.ind_var_index(var_name)]
                if val != code:
                    ok = False
                    break
            if ok:
                num += 1
    return num / den
