"""Blocked Gibbs sampler with rejection-based augmentation and imputation.

Each sweep: (1) draw households from the unrestricted model per size until
the per-size feasible quota is met, keeping the infeasible draws with their
generation-time classes; (2) assign latent classes to the observed
households; (3, 4) update stick-breaking weights from class counts; (5, 6)
update cell probabilities from Dirichlet full conditionals; (7, 8) update
the two concentration parameters; (9) redraw every household's missing
cells from their class-conditional proposals until the completion passes
the structural-zero rules.

The cap-and-weight acceleration replaces the per-size feasible quota
``n_h`` with ``ceil(n_h * psi_h)`` and multiplies the kept draws'
count-statistic contributions by the integer ``1/psi_h``.  With every
``psi_h = 1`` the weighted path reproduces the plain path draw for draw.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from math import ceil

import numpy as np

from . import _backend
from ._backend import AttemptCapExceeded
from ._pykernels import _decode_rows
from .model import (
    AugmentedGroup,
    AugmentedSample,
    Hyperparams,
    LatentState,
    ModelParams,
    ProposalTables,
    build_proposal_tables,
    household_class_scores,
    init_from_prior,
    member_class_scores,
    weights_from_sticks,
    weights_from_sticks_rows,
)
from .rules import RuleSet
from .schema import Dataset, DatasetSchema

STICK_CLAMP = 1.0 - 1e-12

log = logging.getLogger("nested_impute.gibbs")

_POOL: ThreadPoolExecutor | None = None
_POOL_SIZE = 0


def _worker_pool(threads: int) -> ThreadPoolExecutor:
    """Shared worker pool for opt-in parallel rejection sharding."""
    global _POOL, _POOL_SIZE
    if _POOL is None or _POOL_SIZE < threads:
        if _POOL is not None:
            _POOL.shutdown(wait=True)
        _POOL = ThreadPoolExecutor(max_workers=threads)
        _POOL_SIZE = threads
    return _POOL


class SamplerError(RuntimeError):
    """Raised for unrecoverable sampler-state problems."""


def normalize_psi(psi) -> dict[int, Fraction] | None:
    """Validate a cap-and-weight map; 1/psi_h must be a positive integer."""
    if psi is None:
        return None
    out = {}
    for h, value in psi.items():
        frac = value if isinstance(value, Fraction) else Fraction(value).limit_denominator(10 ** 6)
        if not 0 < frac <= 1:
            raise ValueError(f"psi[{h}] = {value} must lie in (0, 1]")
        inv = 1 / frac
        if inv.denominator != 1:
            raise ValueError(f"1/psi[{h}] must be a positive integer, got {inv}")
        out[int(h)] = frac
    return out


@dataclass
class SamplerConfig:
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 5
    psi: dict[int, Fraction] | None = None
    seed: int = 0
    threads: int = 1
    impute_enabled: bool = True
    augment_cap: int = 10 ** 9
    impute_cap: int = 10 ** 6
    retain: str = "all"           # "all" | "evenly" | "random"
    retain_count: int | None = None
    store_params: bool = False
    probe_count: int = 5
    checkpoint_every: int | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.psi = normalize_psi(self.psi)
        if self.retain not in ("all", "evenly", "random"):
            raise ValueError(f"unknown retain policy {self.retain!r}")
        if self.retain != "all" and not self.retain_count:
            raise ValueError("retain policy needs retain_count")

    def retained_iterations(self) -> list[int]:
        return [
            it
            for it in range(self.burn_in + 1, self.iterations + 1)
            if (it - self.burn_in) % self.thin == 0
        ]


@dataclass
class CountStatistics:
    """Sufficient statistics split into observed and augmented parts.

    Augmented parts are integer counts times the integer per-size weight,
    so all arithmetic stays exact in int64.
    """

    class_obs: np.ndarray
    class_aug: np.ndarray
    member_obs: np.ndarray
    member_aug: np.ndarray
    hh_obs: np.ndarray
    hh_aug: np.ndarray
    ind_obs: np.ndarray
    ind_aug: np.ndarray

    @property
    def class_total(self) -> np.ndarray:
        return self.class_obs + self.class_aug

    @property
    def member_total(self) -> np.ndarray:
        return self.member_obs + self.member_aug

    @property
    def hh_total(self) -> np.ndarray:
        return self.hh_obs + self.hh_aug

    @property
    def ind_total(self) -> np.ndarray:
        return self.ind_obs + self.ind_aug


def _zero_stats(schema: DatasetSchema, F: int, S: int) -> CountStatistics:
    Dh = int(schema.hh_offsets[-1])
    Di = int(schema.ind_offsets[-1])
    z = lambda *shape: np.zeros(shape, dtype=np.int64)
    return CountStatistics(
        class_obs=z(F), class_aug=z(F),
        member_obs=z(F, S), member_aug=z(F, S),
        hh_obs=z(F, Dh), hh_aug=z(F, Dh),
        ind_obs=z(F, S, Di), ind_aug=z(F, S, Di),
    )


def _accumulate(schema, F, S, G, M, hh, ind, class_out, member_out, hh_out, ind_out, weight=1):
    """Add one batch's counts (optionally weighted) into the output arrays."""
    n, m = hh.shape[0], ind.shape[1]
    if n == 0:
        return
    Dh = int(schema.hh_offsets[-1])
    Di = int(schema.ind_offsets[-1])
    G = G.astype(np.int64)
    class_out += weight * np.bincount(G, minlength=F)
    col = hh.astype(np.int64) - 1 + schema.hh_offsets[:-1][None, :]
    hh_out += weight * np.bincount(
        (G[:, None] * Dh + col).ravel(), minlength=F * Dh
    ).reshape(F, Dh)
    if m:
        gm = G[:, None] * S + M.astype(np.int64)
        member_out += weight * np.bincount(gm.ravel(), minlength=F * S).reshape(F, S)
        icol = ind.astype(np.int64) - 1 + schema.ind_offsets[:-1][None, None, :]
        ind_out += weight * np.bincount(
            (gm[:, :, None] * Di + icol).ravel(), minlength=F * S * Di
        ).reshape(F, S, Di)


def assemble_counts(schema, groups, state: LatentState, aug: AugmentedSample, F, S):
    """Plain count assembly: augmented draws contribute with weight one."""
    stats = _zero_stats(schema, F, S)
    for h, (hh, ind) in groups.items():
        _accumulate(
            schema, F, S, state.household_class[h], state.member_class[h], hh, ind,
            stats.class_obs, stats.member_obs, stats.hh_obs, stats.ind_obs,
        )
    for h, g in aug.groups.items():
        _accumulate(
            schema, F, S, g.household_class, g.member_class, g.hh, g.ind,
            stats.class_aug, stats.member_aug, stats.hh_aug, stats.ind_aug,
        )
    return stats


def assemble_counts_weighted(
    schema, groups, state: LatentState, aug: AugmentedSample, F, S,
    psi: dict[int, Fraction],
):
    """Cap-and-weight assembly: size-h augmented draws count 1/psi_h times."""
    stats = _zero_stats(schema, F, S)
    for h, (hh, ind) in groups.items():
        _accumulate(
            schema, F, S, state.household_class[h], state.member_class[h], hh, ind,
            stats.class_obs, stats.member_obs, stats.hh_obs, stats.ind_obs,
        )
    for h, g in aug.groups.items():
        weight = int(1 / psi.get(h, Fraction(1)))
        _accumulate(
            schema, F, S, g.household_class, g.member_class, g.hh, g.ind,
            stats.class_aug, stats.member_aug, stats.hh_aug, stats.ind_aug,
            weight=weight,
        )
    return stats


# ---------------------------------------------------------------------------
# Sampler steps
# ---------------------------------------------------------------------------

def augment_rejection(
    n_by_size: dict[int, int],
    ptables: ProposalTables,
    ruleset: RuleSet,
    psi: dict[int, Fraction] | None,
    rng: np.random.Generator,
    cap: int = 10 ** 9,
    threads: int = 1,
) -> AugmentedSample:
    """Draw the infeasible complement for each household size.

    For each size the unrestricted model is sampled until the feasible-draw
    quota is reached; infeasible draws accumulate with their classes.  With
    ``threads > 1`` the quota is sharded over workers with independent
    spawned streams (not bitwise reproducible against the sequential path).
    """
    schema = ptables.schema
    groups: dict[int, AugmentedGroup] = {}
    targets: dict[int, int] = {}
    proposals: dict[int, int] = {}
    for h in schema.household_sizes:
        n1h = int(n_by_size.get(h, 0))
        if psi is not None and h in psi:
            target = int(ceil(n1h * psi[h]))
        else:
            target = n1h
        targets[h] = target
        if target == 0:
            m = schema.stored_individuals(h)
            groups[h] = AugmentedGroup(
                hh=np.empty((0, schema.q), dtype=np.int32),
                ind=np.empty((0, m, schema.p), dtype=np.int32),
                household_class=np.empty(0, dtype=np.int32),
                member_class=np.empty((0, m), dtype=np.int32),
            )
            proposals[h] = 0
            continue
        if threads > 1:
            shard = [target // threads] * threads
            for i in range(target % threads):
                shard[i] += 1
            shard = [t for t in shard if t > 0]
            child_rngs = rng.spawn(len(shard))
            pool = _worker_pool(threads)
            parts = list(
                pool.map(
                    lambda args: _backend.rejection_households(
                        args[0], ptables, ruleset.compiled, h, args[1],
                        keep_infeasible=True, cap=cap,
                    ),
                    zip(child_rngs, shard),
                )
            )
            hh = np.concatenate([p[0] for p in parts])
            ind = np.concatenate([p[1] for p in parts])
            G = np.concatenate([p[2] for p in parts])
            M = np.concatenate([p[3] for p in parts])
            n_prop = sum(p[6] for p in parts)
        else:
            hh, ind, G, M, _, _, n_prop = _backend.rejection_households(
                rng, ptables, ruleset.compiled, h, target,
                keep_infeasible=True, cap=cap,
            )
        groups[h] = AugmentedGroup(hh=hh, ind=ind, household_class=G, member_class=M)
        proposals[h] = n_prop
    return AugmentedSample(groups=groups, target_by_size=targets, proposals_by_size=proposals)


def assign_latent_classes(
    groups: dict[int, tuple[np.ndarray, np.ndarray]],
    params: ModelParams,
    schema: DatasetSchema,
    rng: np.random.Generator,
) -> LatentState:
    """Draw class assignments for the observed households (completed data)."""
    household_class: dict[int, np.ndarray] = {}
    member_class: dict[int, np.ndarray] = {}
    for h in schema.household_sizes:
        hh, ind = groups[h]
        n, m = hh.shape[0], ind.shape[1]
        if n == 0:
            household_class[h] = np.empty(0, dtype=np.int32)
            member_class[h] = np.empty((0, m), dtype=np.int32)
            continue
        scores = household_class_scores(params, schema, hh, ind)
        probs = _softmax_rows(scores)
        G = _decode_rows(np.cumsum(probs, axis=1), rng.random(n))
        if m:
            mscores = member_class_scores(params, schema, ind, G)
            mprobs = _softmax_rows(mscores.reshape(n * m, -1)).reshape(n, m, -1)
            U = rng.random((n, m))
            M = np.empty((n, m), dtype=np.int32)
            for j in range(m):
                M[:, j] = _decode_rows(np.cumsum(mprobs[:, j, :], axis=1), U[:, j])
        else:
            M = np.empty((n, 0), dtype=np.int32)
        household_class[h] = G
        member_class[h] = M
    return LatentState(household_class=household_class, member_class=member_class)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    peak = scores.max(axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    out = np.exp(scores - peak)
    total = out.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise SamplerError("a household has zero probability under every class")
    return out / total


def update_stick_weights(stats: CountStatistics, alpha: float, beta: float, rng):
    """Beta full conditionals for the stick fractions, then weights."""
    U = stats.class_total.astype(np.float64)
    F = U.shape[0]
    class_stick = np.ones(F)
    if F > 1:
        tail = np.concatenate([np.cumsum(U[::-1])[::-1][1:], [0.0]])
        class_stick[: F - 1] = rng.beta(1.0 + U[: F - 1], alpha + tail[: F - 1])
    V = stats.member_total.astype(np.float64)
    S = V.shape[1]
    member_stick = np.ones((F, S))
    if S > 1:
        vtail = np.concatenate(
            [np.cumsum(V[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((F, 1))], axis=1
        )
        member_stick[:, : S - 1] = rng.beta(
            1.0 + V[:, : S - 1], beta + vtail[:, : S - 1]
        )
    return (
        class_stick,
        weights_from_sticks(class_stick),
        member_stick,
        weights_from_sticks_rows(member_stick),
    )


def update_multinomial_probs(stats: CountStatistics, schema: DatasetSchema, rng):
    """Dirichlet full conditionals for every cell-probability row."""
    hh_probs = np.empty_like(stats.hh_total, dtype=np.float64)
    for k in range(schema.q):
        a, b = int(schema.hh_offsets[k]), int(schema.hh_offsets[k + 1])
        draw = rng.standard_gamma(1.0 + stats.hh_total[:, a:b])
        hh_probs[:, a:b] = draw / draw.sum(axis=1, keepdims=True)
    ind_probs = np.empty(stats.ind_total.shape, dtype=np.float64)
    for k in range(schema.p):
        a, b = int(schema.ind_offsets[k]), int(schema.ind_offsets[k + 1])
        draw = rng.standard_gamma(1.0 + stats.ind_total[:, :, a:b])
        ind_probs[:, :, a:b] = draw / draw.sum(axis=2, keepdims=True)
    return hh_probs, ind_probs


def update_concentration_params(
    class_stick: np.ndarray, member_stick: np.ndarray, hyper: Hyperparams, rng
) -> tuple[float, float]:
    """Gamma full conditionals for the two stick concentrations."""
    F = class_stick.shape[0]
    S = member_stick.shape[1]
    us = np.clip(class_stick[: F - 1], None, STICK_CLAMP)
    rate_a = hyper.b_alpha - np.log1p(-us).sum()
    alpha = rng.gamma(hyper.a_alpha + F - 1, 1.0 / rate_a)
    vs = np.clip(member_stick[:, : S - 1], None, STICK_CLAMP)
    rate_b = hyper.b_beta - np.log1p(-vs).sum()
    beta = rng.gamma(hyper.a_beta + F * (S - 1), 1.0 / rate_b)
    return float(alpha), float(beta)


def init_missing(
    dataset: Dataset,
    ruleset: RuleSet,
    rng: np.random.Generator,
    cap: int = 10 ** 6,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Initial completion: draw masked cells from available-case marginals,
    redrawing each household until it passes the rules.

    Returns per-size (hh, ind) working arrays (copies of the dataset's).
    """
    s = dataset.schema
    groups = dataset.groups()
    hh_marg = _empirical_marginals_hh(s, groups)
    ind_marg = _empirical_marginals_ind(s, groups)
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for h in s.household_sizes:
        grp = groups[h]
        hh = grp.hh.copy()
        ind = grp.ind.copy()
        out[h] = (hh, ind)
        for i in range(grp.n):
            hcols = np.flatnonzero(grp.hh_mask[i])
            pairs = np.argwhere(grp.ind_mask[i])
            if hcols.size == 0 and pairs.size == 0:
                continue
            cums = [hh_marg[k] for k in hcols] + [ind_marg[k] for _, k in pairs]
            attempts = 0
            while True:
                if attempts >= cap:
                    raise AttemptCapExceeded(
                        f"household {grp.ids[i]}: no feasible completion found "
                        f"from empirical marginals after {cap} attempts"
                    )
                attempts += 1
                u = rng.random(len(cums))
                for c, k in enumerate(hcols):
                    hh[i, k] = int(np.searchsorted(cums[c], u[c], side="right")) + 1
                for c2, (j, k) in enumerate(pairs):
                    c = len(hcols) + c2
                    ind[i, j, k] = int(np.searchsorted(cums[c], u[c], side="right")) + 1
                if ruleset.feasible_mask(hh[i:i + 1], ind[i:i + 1])[0]:
                    break
    return out


def _empirical_marginals_hh(s, groups):
    cums = []
    for k in range(s.q):
        d = int(s.hh_card[k])
        counts = np.zeros(d, dtype=np.int64)
        masked_anywhere = False
        for grp in groups.values():
            vals = grp.hh[:, k][~grp.hh_mask[:, k]]
            counts += np.bincount(vals - 1, minlength=d)
            masked_anywhere |= bool(grp.hh_mask[:, k].any())
        cums.append(_marginal_cum(counts, masked_anywhere, s.household_vars[k].name))
    return cums


def _empirical_marginals_ind(s, groups):
    cums = []
    for k in range(s.p):
        d = int(s.ind_card[k])
        counts = np.zeros(d, dtype=np.int64)
        masked_anywhere = False
        for grp in groups.values():
            if grp.ind.shape[1] == 0:
                continue
            vals = grp.ind[:, :, k][~grp.ind_mask[:, :, k]]
            counts += np.bincount(vals - 1, minlength=d)
            masked_anywhere |= bool(grp.ind_mask[:, :, k].any())
        cums.append(_marginal_cum(counts, masked_anywhere, s.individual_vars[k].name))
    return cums


def _marginal_cum(counts, masked_anywhere, name):
    total = counts.sum()
    if total == 0:
        if masked_anywhere:
            raise SamplerError(
                f"variable {name} has no observed values; cannot initialize"
            )
        return None
    cum = np.cumsum(counts / total)
    return cum


def impute_step(
    groups: dict[int, tuple[np.ndarray, np.ndarray]],
    masks: dict[int, tuple[np.ndarray, np.ndarray]],
    ids: dict[int, tuple[str, ...]],
    state: LatentState,
    ptables: ProposalTables,
    ruleset: RuleSet,
    rng: np.random.Generator,
    cap: int = 10 ** 6,
    threads: int = 1,
) -> int:
    """Redraw all masked cells (in place) by per-household rejection."""
    schema = ptables.schema
    total = 0
    for h in schema.household_sizes:
        hh, ind = groups[h]
        hh_mask, ind_mask = masks[h]
        if hh.shape[0] == 0 or not (hh_mask.any() or ind_mask.any()):
            continue
        if threads > 1:
            n = hh.shape[0]
            bounds = np.linspace(0, n, threads + 1, dtype=int)
            chunks = [
                (int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a
            ]
            child_rngs = rng.spawn(len(chunks))

            def work(args):
                child, (a, b) = args
                return _backend.impute_missing_cells(
                    child, ptables, ruleset.compiled, h,
                    hh[a:b], ind[a:b], hh_mask[a:b], ind_mask[a:b],
                    state.household_class[h][a:b], state.member_class[h][a:b],
                    cap=cap, ids=ids[h][a:b],
                )

            total += sum(_worker_pool(threads).map(work, zip(child_rngs, chunks)))
        else:
            total += _backend.impute_missing_cells(
                rng, ptables, ruleset.compiled, h,
                hh, ind, hh_mask, ind_mask,
                state.household_class[h], state.member_class[h],
                cap=cap, ids=ids[h],
            )
    return total


def impute_missing_rejection(
    dataset: Dataset,
    state: LatentState,
    params: ModelParams,
    ruleset: RuleSet,
    rng: np.random.Generator,
    cap: int = 10 ** 6,
) -> Dataset:
    """One rejection-imputation pass over a dataset; returns the completion."""
    s = dataset.schema
    ptables = build_proposal_tables(params, s)
    groups = {}
    masks = {}
    ids = {}
    for h, grp in dataset.groups().items():
        if grp.hh_mask.any() or grp.ind_mask.any():
            if np.any(grp.hh[~grp.hh_mask] == 0) or (
                grp.ind.size and np.any(grp.ind[~grp.ind_mask] == 0)
            ):
                raise SamplerError("dataset has unfilled observed cells")
        hh = grp.hh.copy()
        ind = grp.ind.copy()
        # masked cells must carry a current (initialized) value already; if
        # not, seed them with level 1 before the rejection pass
        hh[grp.hh_mask & (hh == 0)] = 1
        if ind.size:
            ind[grp.ind_mask & (ind == 0)] = 1
        groups[h] = (hh, ind)
        masks[h] = (grp.hh_mask, grp.ind_mask)
        ids[h] = grp.ids
    impute_step(groups, masks, ids, state, ptables, ruleset, rng, cap=cap)
    return dataset.completed_with(groups)


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------

@dataclass
class ChainResult:
    schema: DatasetSchema
    config: SamplerConfig
    dataset: Dataset
    completed_snapshots: list  # (iteration, {h: (hh, ind)})
    params_snapshots: list     # (iteration, ModelParams) when store_params
    diagnostics: list          # one dict per iteration
    final_params: ModelParams
    probe_labels: list

    def retained_count(self) -> int:
        return len(self.completed_snapshots)

    def trace_header(self) -> list[str]:
        base = [
            "iteration", "alpha", "beta", "n_augmented",
            "occupied_household_classes", "occupied_member_classes",
            "augment_seconds", "impute_seconds",
        ]
        return base + self.probe_labels

    def write_trace(self, path) -> None:
        import csv

        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            header = self.trace_header()
            w.writerow(header)
            for row in self.diagnostics:
                w.writerow([row[c] for c in header])


def _choose_probes(schema: DatasetSchema, count: int, seed: int):
    """Fixed random subset of cell probabilities to trace, as weighted
    (hence label-switching invariant) marginal cell probabilities."""
    rng = np.random.default_rng([seed, 0x9E3779B9])
    hh_cells = [
        (k, c)
        for k in range(schema.q)
        if k != schema.size_index
        for c in range(int(schema.hh_card[k]))
    ]
    ind_cells = [
        (k, c) for k in range(schema.p) for c in range(int(schema.ind_card[k]))
    ]
    chosen_hh = [] if not hh_cells else [
        hh_cells[i] for i in rng.choice(len(hh_cells), size=min(count, len(hh_cells)), replace=False)
    ]
    chosen_ind = [] if not ind_cells else [
        ind_cells[i] for i in rng.choice(len(ind_cells), size=min(count, len(ind_cells)), replace=False)
    ]
    return chosen_hh, chosen_ind


def _probe_values(params: ModelParams, schema, chosen_hh, chosen_ind):
    out = []
    w = params.class_weight
    for k, c in chosen_hh:
        off = int(schema.hh_offsets[k])
        out.append(float(w @ params.hh_probs[:, off + c]))
    wm = w[:, None] * params.member_weight
    for k, c in chosen_ind:
        off = int(schema.ind_offsets[k])
        out.append(float((wm * params.ind_probs[:, :, off + c]).sum()))
    return out


def run_chain(
    dataset: Dataset,
    ruleset: RuleSet,
    hyper: Hyperparams,
    config: SamplerConfig,
    resume_from=None,
) -> ChainResult:
    """Run the full sampler; returns retained snapshots and diagnostics.

    ``resume_from`` continues a checkpointed run from its saved iteration;
    only snapshots due after the checkpoint are (re)collected.
    """
    s = dataset.schema
    if ruleset.schema is not s and ruleset.schema != s:
        raise SamplerError("rule set compiled against a different schema")
    rng = np.random.default_rng(config.seed)
    groups_src = dataset.groups()
    has_missing = any(
        grp.hh_mask.any() or grp.ind_mask.any() for grp in groups_src.values()
    )
    if has_missing and not config.impute_enabled:
        raise SamplerError("dataset has missing cells but imputation is disabled")

    masks = {h: (grp.hh_mask, grp.ind_mask) for h, grp in groups_src.items()}
    ids = {h: grp.ids for h, grp in groups_src.items()}
    start_iteration = 1
    if resume_from is not None:
        done, params, groups, rng_state = load_checkpoint(resume_from, s)
        rng.bit_generator.state = rng_state
        start_iteration = done + 1
    elif has_missing:
        groups = init_missing(dataset, ruleset, rng, cap=config.impute_cap)
        params = init_from_prior(hyper, s, rng)
    else:
        groups = {h: (grp.hh.copy(), grp.ind.copy()) for h, grp in groups_src.items()}
        params = init_from_prior(hyper, s, rng)
    for h, (hh, ind) in groups.items():
        if hh.size and hh.min() < 1 or ind.size and ind.min() < 1:
            raise SamplerError(f"size-{h} working state contains unfilled cells")
    F, S = hyper.n_household_classes, hyper.n_member_classes
    n_by_size = dataset.n_by_size

    retained = config.retained_iterations()
    keep_set = _kept_snapshot_iterations(retained, config)

    chosen_hh, chosen_ind = _choose_probes(s, config.probe_count, config.seed)
    probe_labels = [f"probe_hh_{i}" for i in range(len(chosen_hh))] + [
        f"probe_ind_{i}" for i in range(len(chosen_ind))
    ]

    completed_snapshots = []
    params_snapshots = []
    diagnostics = []

    for it in range(start_iteration, config.iterations + 1):
        ptables = build_proposal_tables(params, s)
        t0 = time.perf_counter()
        aug = augment_rejection(
            n_by_size, ptables, ruleset, config.psi, rng,
            cap=config.augment_cap, threads=config.threads,
        )
        t_aug = time.perf_counter() - t0

        state = assign_latent_classes(groups, params, s, rng)
        if config.psi is None:
            stats = assemble_counts(s, groups, state, aug, F, S)
        else:
            stats = assemble_counts_weighted(s, groups, state, aug, F, S, config.psi)
        class_stick, class_weight, member_stick, member_weight = update_stick_weights(
            stats, params.alpha, params.beta, rng
        )
        hh_probs, ind_probs = update_multinomial_probs(stats, s, rng)
        alpha, beta = update_concentration_params(class_stick, member_stick, hyper, rng)
        params = ModelParams(
            class_weight=class_weight,
            class_stick=class_stick,
            member_weight=member_weight,
            member_stick=member_stick,
            hh_probs=hh_probs,
            ind_probs=ind_probs,
            alpha=alpha,
            beta=beta,
        )

        t_imp = 0.0
        if has_missing:
            ptables_new = build_proposal_tables(params, s)
            t0 = time.perf_counter()
            impute_step(
                groups, masks, ids, state, ptables_new, ruleset, rng,
                cap=config.impute_cap, threads=config.threads,
            )
            t_imp = time.perf_counter() - t0

        _assert_feasible(groups, ruleset, it)

        occ_h = len(
            np.unique(np.concatenate([g for g in state.household_class.values()]))
        )
        member_all = [g.ravel() for g in state.member_class.values() if g.size]
        occ_m = len(np.unique(np.concatenate(member_all))) if member_all else 0
        row = {
            "iteration": it,
            "alpha": params.alpha,
            "beta": params.beta,
            "n_augmented": aug.n0,
            "occupied_household_classes": occ_h,
            "occupied_member_classes": occ_m,
            "augment_seconds": t_aug,
            "impute_seconds": t_imp,
        }
        for label, val in zip(probe_labels, _probe_values(params, s, chosen_hh, chosen_ind)):
            row[label] = val
        diagnostics.append(row)

        if it in keep_set:
            completed_snapshots.append(
                (it, {h: (hh.copy(), ind.copy()) for h, (hh, ind) in groups.items()})
            )
            if config.store_params:
                params_snapshots.append((it, params.copy()))
        if config.checkpoint_every and it % config.checkpoint_every == 0:
            if config.checkpoint_path:
                _write_checkpoint(config.checkpoint_path, it, params, groups, rng)
        if it % max(1, config.iterations // 20) == 0 or it == config.iterations:
            log.info(
                "iteration %d/%d: alpha=%.3f beta=%.3f augmented=%d",
                it, config.iterations, params.alpha, params.beta, aug.n0,
            )

    return ChainResult(
        schema=s,
        config=config,
        dataset=dataset,
        completed_snapshots=completed_snapshots,
        params_snapshots=params_snapshots,
        diagnostics=diagnostics,
        final_params=params,
        probe_labels=probe_labels,
    )


def _kept_snapshot_iterations(retained: list[int], config: SamplerConfig) -> set[int]:
    if config.retain == "all":
        return set(retained)
    L = config.retain_count
    R = len(retained)
    if L > R:
        raise ValueError(f"retain_count {L} exceeds the {R} retained iterations")
    if config.retain == "evenly":
        return {retained[i * R // L - 1] for i in range(1, L + 1)}
    rng = np.random.default_rng([config.seed, 0x5EED5A17])
    picks = rng.choice(R, size=L, replace=False)
    return {retained[i] for i in picks}


def _assert_feasible(groups, ruleset: RuleSet, iteration: int) -> None:
    for h, (hh, ind) in groups.items():
        if hh.shape[0] == 0:
            continue
        feas = ruleset.feasible_mask(hh, ind)
        if not feas.all():
            bad = int((~feas).sum())
            raise SamplerError(
                f"iteration {iteration}: {bad} completed size-{h} household(s) "
                "violate the rules; sampler invariant broken"
            )


def load_checkpoint(path, schema: DatasetSchema):
    """Read back a chain checkpoint: (iteration, params, groups, rng state)."""
    with np.load(path) as z:
        if int(z["format_version"]) != 1:
            raise SamplerError("unsupported checkpoint format")
        iteration = int(z["iteration"])
        params = ModelParams(
            class_weight=z["class_weight"],
            class_stick=z["class_stick"],
            member_weight=z["member_weight"],
            member_stick=z["member_stick"],
            hh_probs=z["hh_probs"],
            ind_probs=z["ind_probs"],
            alpha=float(z["alpha"]),
            beta=float(z["beta"]),
        )
        groups = {
            h: (z[f"hh_{h}"].copy(), z[f"ind_{h}"].copy())
            for h in schema.household_sizes
        }
        rng_state = json.loads(z["rng_state"].tobytes().decode())
    return iteration, params, groups, rng_state


def _write_checkpoint(path, iteration, params: ModelParams, groups, rng) -> None:
    payload = {
        "format_version": np.int64(1),
        "iteration": np.int64(iteration),
        "rng_state": np.frombuffer(
            json.dumps(rng.bit_generator.state).encode(), dtype=np.uint8
        ),
        "alpha": np.float64(params.alpha),
        "beta": np.float64(params.beta),
        "class_weight": params.class_weight,
        "class_stick": params.class_stick,
        "member_weight": params.member_weight,
        "member_stick": params.member_stick,
        "hh_probs": params.hh_probs,
        "ind_probs": params.ind_probs,
    }
    for h, (hh, ind) in groups.items():
        payload[f"hh_{h}"] = hh
        payload[f"ind_{h}"] = ind
    np.savez(path, **payload)
