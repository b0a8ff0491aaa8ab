"""Generators for validation studies: ground-truth populations from known
parameters and the two missingness mechanisms used in the evaluation runs."""

from __future__ import annotations

import numpy as np

from . import _backend
from .model import ModelParams, build_proposal_tables
from .rules import RuleSet
from .schema import Dataset, DatasetSchema, Household, MissingnessMask


def sample_population(
    params: ModelParams,
    schema: DatasetSchema,
    ruleset: RuleSet,
    counts: dict[int, int],
    rng: np.random.Generator,
    cap: int = 10 ** 9,
    id_prefix: str = "p",
) -> Dataset:
    """Exact per-size counts of feasible households from the restricted model."""
    records = []
    ptables = build_proposal_tables(params, schema)
    serial = 0
    for h in schema.household_sizes:
        want = int(counts.get(h, 0))
        if want == 0:
            continue
        hh, ind, _, _, _, _, _ = _backend.rejection_households(
            rng, ptables, ruleset.compiled, h, want, keep_infeasible=False, cap=cap
        )
        m = schema.stored_individuals(h)
        for i in range(want):
            serial += 1
            records.append(
                (
                    Household(
                        id=f"{id_prefix}{serial}",
                        size=h,
                        household_values=tuple(int(v) for v in hh[i]),
                        individuals=tuple(tuple(int(v) for v in row) for row in ind[i]),
                    ),
                    MissingnessMask((0,) * schema.q, tuple((0,) * schema.p for _ in range(m))),
                )
            )
    return Dataset(schema, records)


def _dataset_with_masks(dataset: Dataset, new_masks) -> Dataset:
    """Rebuild a dataset with the given masks; masked values are dropped."""
    records = []
    for (rec, _), (hmask, imask) in zip(dataset.households, new_masks):
        hv = tuple(
            0 if miss else val for val, miss in zip(rec.household_values, hmask)
        )
        iv = tuple(
            tuple(0 if miss else val for val, miss in zip(row, mrow))
            for row, mrow in zip(rec.individuals, imask)
        )
        records.append(
            (
                Household(rec.id, rec.size, hv, iv),
                MissingnessMask(tuple(hmask), tuple(tuple(r) for r in imask)),
            )
        )
    return Dataset(dataset.schema, records, head_positions=dataset.head_positions)


def apply_mcar(
    dataset: Dataset,
    household_complete_frac: float,
    per_var_rate: float,
    rng: np.random.Generator,
) -> Dataset:
    """Mask cells completely at random.

    An exact fraction of households is kept fully observed; every non-size
    cell of the remaining households is masked independently at
    ``per_var_rate``.
    """
    if not 0 <= household_complete_frac <= 1 or not 0 <= per_var_rate <= 1:
        raise ValueError("rates must lie in [0, 1]")
    s = dataset.schema
    n = dataset.n
    n_complete = int(round(household_complete_frac * n))
    complete = np.zeros(n, dtype=bool)
    complete[rng.choice(n, size=n_complete, replace=False)] = True
    masks = []
    for pos, (rec, _) in enumerate(dataset.households):
        m = s.stored_individuals(rec.size)
        if complete[pos]:
            masks.append(([0] * s.q, [[0] * s.p for _ in range(m)]))
            continue
        hmask = (rng.random(s.q) < per_var_rate).astype(int)
        hmask[s.size_index] = 0
        imask = (rng.random((m, s.p)) < per_var_rate).astype(int)
        masks.append((hmask.tolist(), imask.tolist()))
    return _dataset_with_masks(dataset, masks)


# Default stress-mechanism rates.  Age missingness depends on the observed
# relationship level (post-transform coding); relationship missingness
# depends on the observed age in years.  The fourth relationship set is
# shipped without the out-of-range 13th level of its source coding.
AGE_RATE_BY_RELATIONSHIP = (
    (frozenset({2}), 0.50),
    (frozenset({3, 4, 5, 10}), 0.20),
    (frozenset({7, 9}), 0.40),
    (frozenset({6, 8, 11, 12}), 0.30),
)
RELATIONSHIP_RATE_BY_AGE = (
    (20, 0.40),   # age <= 20
    (50, 0.25),   # 20 < age <= 50
    (70, 0.10),   # 50 < age <= 70
    (None, 0.55),  # age > 70
)


def apply_stress_mechanism(
    dataset: Dataset,
    rng: np.random.Generator,
    age_var: str = "age",
    relationship_var: str | None = None,
    head_age_var: str | None = None,
    hh_rate: float = 0.30,
    ind_rate: float = 0.30,
    age_rates=AGE_RATE_BY_RELATIONSHIP,
    relationship_rates=RELATIONSHIP_RATE_BY_AGE,
) -> Dataset:
    """Value-dependent masking stress test.

    Household variables other than size and the head's age are masked at
    ``hh_rate``; individual variables other than age and relationship at
    ``ind_rate``; age at a rate depending on the relationship level; the
    relationship at a rate depending on age in years.  Requires a layout
    with the head's attributes at household level (head age protected).
    """
    s = dataset.schema
    rel_name = relationship_var or s.relationship_var
    if rel_name is None or not s.has_var(rel_name):
        raise ValueError("stress mechanism needs a relationship variable")
    if not s.has_var(age_var) or s.var(age_var).scope != "individual":
        raise ValueError(f"stress mechanism needs an individual-level {age_var!r} variable")
    if head_age_var is None:
        head_age_var = s.head_var_map.get(age_var)
    if head_age_var is None or not s.has_var(head_age_var):
        raise ValueError(
            "stress mechanism needs the head's age as a household variable "
            "(head-moved layout)"
        )
    rel_idx = s.ind_var_index(rel_name)
    age_idx = s.ind_var_index(age_var)
    protected_hh = {s.size_index, s.hh_var_index(head_age_var)}

    rel_card = s.var(rel_name).cardinality
    age_rate_by_code = np.zeros(rel_card + 1)
    for levels, rate in age_rates:
        for code in levels:
            if 1 <= code <= rel_card:
                age_rate_by_code[code] = rate

    def rel_rate(age_years: int) -> float:
        for bound, rate in relationship_rates:
            if bound is None or age_years <= bound:
                return rate
        return 0.0

    masks = []
    for rec, _ in dataset.households:
        m = s.stored_individuals(rec.size)
        hmask = [0] * s.q
        for k in range(s.q):
            if k not in protected_hh and rng.random() < hh_rate:
                hmask[k] = 1
        imask = [[0] * s.p for _ in range(m)]
        for j, row in enumerate(rec.individuals):
            for k in range(s.p):
                if k == age_idx:
                    rate = float(age_rate_by_code[row[rel_idx]])
                elif k == rel_idx:
                    rate = rel_rate(row[age_idx] - 1)
                else:
                    rate = ind_rate
                if rng.random() < rate:
                    imask[j][k] = 1
        masks.append((hmask, imask))
    return _dataset_with_masks(dataset, masks)
