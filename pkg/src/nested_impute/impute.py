"""Emission of completed datasets and generation of synthetic datasets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .gibbs import ChainResult
from .model import ModelParams, build_proposal_tables
from .rules import RuleSet
from .schema import Dataset, Household, MissingnessMask, inverse_transform


@dataclass
class CompletedDatasetSet:
    """L completed (or synthetic) datasets plus provenance."""

    datasets: list[Dataset]
    snapshot_iterations: list[int]
    seed: int | None = None
    kind: str = "imputed"  # "imputed" | "synthetic"

    @property
    def L(self) -> int:
        return len(self.datasets)


def select_snapshots(available: int, L: int, selection: str, rng=None) -> list[int]:
    """Indices (0-based) of the L snapshots to use.

    ``evenly`` spaces the picks over the available range ending at the last
    snapshot; ``random`` samples without replacement.
    """
    if L > available:
        raise ValueError(f"need {L} snapshots but only {available} were retained")
    if selection == "evenly":
        return [i * available // L - 1 for i in range(1, L + 1)]
    if selection == "random":
        if rng is None:
            rng = np.random.default_rng()
        return sorted(int(i) for i in rng.choice(available, size=L, replace=False))
    raise ValueError(f"unknown snapshot selection {selection!r}")


def emit_completed_datasets(
    chain: ChainResult,
    L: int,
    selection: str = "evenly",
    rng=None,
    validate_rules: RuleSet | None = None,
) -> CompletedDatasetSet:
    """Turn L retained completed-data snapshots into output datasets.

    Snapshots are converted back to the original (pre-transform) layout when
    the chain ran on head-moved data with provenance.  When
    ``validate_rules`` is given, every emitted household is checked against
    it and a violation raises.
    """
    picks = select_snapshots(len(chain.completed_snapshots), L, selection, rng)
    datasets = []
    iterations = []
    for idx in picks:
        iteration, values = chain.completed_snapshots[idx]
        d = chain.dataset.completed_with(values)
        if d.schema.head_moved and d.schema.parent is not None:
            d = inverse_transform(d)
        if validate_rules is not None:
            _validate_feasible(d, validate_rules)
        datasets.append(d)
        iterations.append(iteration)
    return CompletedDatasetSet(datasets=datasets, snapshot_iterations=iterations)


def _validate_feasible(dataset: Dataset, ruleset: RuleSet) -> None:
    for h, grp in dataset.groups().items():
        if grp.n == 0:
            continue
        feas = ruleset.feasible_mask(grp.hh, grp.ind)
        if not feas.all():
            bad = [grp.ids[i] for i in np.flatnonzero(~feas)]
            raise RuntimeError(
                f"emitted dataset contains infeasible household(s): {bad[:5]}"
            )


def generate_synthetic(
    params: ModelParams,
    dataset: Dataset,
    ruleset: RuleSet,
    rng: np.random.Generator,
    counts: dict[int, int] | None = None,
    cap: int = 10 ** 9,
    id_prefix: str = "s",
) -> Dataset:
    """Draw a fully synthetic dataset from the support-restricted model.

    Feasible households are drawn by rejection until the per-size counts
    match the input's exactly.  Output is converted to the original layout
    when the schema carries head-move provenance (the reconstructed head
    goes first in each household).
    """
    s = dataset.schema
    if counts is None:
        counts = dataset.n_by_size
    ptables = build_proposal_tables(params, s)
    records = []
    serial = 0
    for h in s.household_sizes:
        want = int(counts.get(h, 0))
        if want == 0:
            continue
        hh, ind, _, _, _, _, _ = _backend.rejection_households(
            rng, ptables, ruleset.compiled, h, want, keep_infeasible=False, cap=cap
        )
        m = s.stored_individuals(h)
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
                    MissingnessMask((0,) * s.q, tuple((0,) * s.p for _ in range(m))),
                )
            )
    out = Dataset(s, records)
    if s.head_moved and s.parent is not None:
        out = inverse_transform(out)
    return out


def synthesize_datasets(
    chain: ChainResult,
    ruleset: RuleSet,
    L: int,
    rng: np.random.Generator,
    selection: str = "random",
    cap: int = 10 ** 9,
) -> CompletedDatasetSet:
    """L synthetic datasets, one per selected parameter snapshot."""
    if not chain.params_snapshots:
        raise ValueError("chain was run without store_params; no parameter snapshots")
    picks = select_snapshots(len(chain.params_snapshots), L, selection, rng)
    datasets = []
    iterations = []
    for l, idx in enumerate(picks, start=1):
        iteration, params = chain.params_snapshots[idx]
        datasets.append(
            generate_synthetic(
                params, chain.dataset, ruleset, rng, cap=cap, id_prefix=f"s{l}_"
            )
        )
        iterations.append(iteration)
    return CompletedDatasetSet(
        datasets=datasets, snapshot_iterations=iterations, kind="synthetic"
    )
