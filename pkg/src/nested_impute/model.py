"""Two-level latent class model for nested categorical data.

Households belong to one of F latent classes; individuals belong to one of S
member classes nested in their household's class.  Household-level variables
follow independent multinomials given the household class; individual-level
variables follow independent multinomials given the (household, member)
class pair.  Class weights carry truncated stick-breaking priors with Gamma
hyperpriors on the concentrations; cell probabilities carry uniform
Dirichlet priors.

Probability arrays are stored concatenated across variables: ``hh_probs``
has one block of columns per household variable (row-stochastic within each
block), ``ind_probs`` likewise for individual variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .schema import Dataset, DatasetSchema, Household
from .rules import RuleSet, combination_batches, count_combinations

SIMPLEX_TOL = 1e-12
STICK_TOL = 1e-14


@dataclass(frozen=True)
class Hyperparams:
    """Truncation levels and prior hyperparameters."""

    n_household_classes: int = 30
    n_member_classes: int = 15
    a_alpha: float = 0.25
    b_alpha: float = 0.25
    a_beta: float = 0.25
    b_beta: float = 0.25

    def __post_init__(self):
        if self.n_household_classes < 1 or self.n_member_classes < 1:
            raise ValueError("truncation levels must be >= 1")
        for name in ("a_alpha", "b_alpha", "a_beta", "b_beta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ModelParams:
    """One draw of all model parameters.

    class_stick / member_stick are the stick-breaking fractions; the
    corresponding weights are their running products and must satisfy the
    reconstruction identity to within STICK_TOL.
    """

    class_weight: np.ndarray   # (F,)
    class_stick: np.ndarray    # (F,), last entry 1
    member_weight: np.ndarray  # (F, S)
    member_stick: np.ndarray   # (F, S), last column 1
    hh_probs: np.ndarray       # (F, sum of household cardinalities)
    ind_probs: np.ndarray      # (F, S, sum of individual cardinalities)
    alpha: float
    beta: float

    @property
    def n_household_classes(self) -> int:
        return self.class_weight.shape[0]

    @property
    def n_member_classes(self) -> int:
        return self.member_weight.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            class_weight=self.class_weight.copy(),
            class_stick=self.class_stick.copy(),
            member_weight=self.member_weight.copy(),
            member_stick=self.member_stick.copy(),
            hh_probs=self.hh_probs.copy(),
            ind_probs=self.ind_probs.copy(),
            alpha=self.alpha,
            beta=self.beta,
        )

    def validate(self, schema: DatasetSchema) -> None:
        """Check simplex and stick-breaking invariants."""
        F, S = self.n_household_classes, self.n_member_classes
        if abs(self.class_weight.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("class weights do not sum to 1")
        if np.abs(self.member_weight.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
            raise ValueError("member weight rows do not sum to 1")
        for off in _block_slices(schema.hh_offsets):
            if np.abs(self.hh_probs[:, off].sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
                raise ValueError("household cell probabilities do not sum to 1")
        for off in _block_slices(schema.ind_offsets):
            if np.abs(self.ind_probs[:, :, off].sum(axis=2) - 1.0).max() > SIMPLEX_TOL:
                raise ValueError("individual cell probabilities do not sum to 1")
        if self.class_stick[F - 1] != 1.0 or np.any(self.member_stick[:, S - 1] != 1.0):
            raise ValueError("final stick fractions must equal 1")
        if np.abs(weights_from_sticks(self.class_stick) - self.class_weight).max() > STICK_TOL:
            raise ValueError("class weights inconsistent with sticks")
        if np.abs(
            weights_from_sticks_rows(self.member_stick) - self.member_weight
        ).max() > STICK_TOL:
            raise ValueError("member weights inconsistent with sticks")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("concentrations must be positive")

    # -- persistence -----------------------------------------------------

    FORMAT_VERSION = 1

    def save(self, path) -> None:
        np.savez(
            path,
            format_version=np.int64(self.FORMAT_VERSION),
            class_weight=self.class_weight,
            class_stick=self.class_stick,
            member_weight=self.member_weight,
            member_stick=self.member_stick,
            hh_probs=self.hh_probs,
            ind_probs=self.ind_probs,
            alpha=np.float64(self.alpha),
            beta=np.float64(self.beta),
        )

    @classmethod
    def load(cls, path) -> "ModelParams":
        with np.load(path) as z:
            version = int(z["format_version"])
            if version != cls.FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format {version}")
            return cls(
                class_weight=z["class_weight"],
                class_stick=z["class_stick"],
                member_weight=z["member_weight"],
                member_stick=z["member_stick"],
                hh_probs=z["hh_probs"],
                ind_probs=z["ind_probs"],
                alpha=float(z["alpha"]),
                beta=float(z["beta"]),
            )


@dataclass
class LatentState:
    """Per-size class assignments for the observed households."""

    household_class: dict[int, np.ndarray]  # h -> (n_h,) 0-based
    member_class: dict[int, np.ndarray]     # h -> (n_h, m) 0-based


@dataclass
class AugmentedGroup:
    """Rejected (infeasible) draws for one household size."""

    hh: np.ndarray               # (t0, q)
    ind: np.ndarray              # (t0, m, p)
    household_class: np.ndarray  # (t0,)
    member_class: np.ndarray     # (t0, m)

    @property
    def n(self) -> int:
        return self.hh.shape[0]


@dataclass
class AugmentedSample:
    """Infeasible households accumulated while hitting per-size quotas."""

    groups: dict[int, AugmentedGroup]
    target_by_size: dict[int, int]
    proposals_by_size: dict[int, int]

    @property
    def n0_by_size(self) -> dict[int, int]:
        return {h: g.n for h, g in self.groups.items()}

    @property
    def n0(self) -> int:
        return sum(g.n for g in self.groups.values())


def _block_slices(offsets) -> Iterable[slice]:
    for k in range(len(offsets) - 1):
        yield slice(int(offsets[k]), int(offsets[k + 1]))


def weights_from_sticks(sticks: np.ndarray) -> np.ndarray:
    """Mixture weights from stick fractions: w_g = s_g * prod_{f<g}(1-s_f)."""
    lead = np.concatenate([[1.0], np.cumprod(1.0 - sticks[:-1])])
    return sticks * lead


def weights_from_sticks_rows(sticks: np.ndarray) -> np.ndarray:
    """Row-wise stick-to-weight transform for a (F, S) stick matrix."""
    ones = np.ones((sticks.shape[0], 1))
    lead = np.concatenate([ones, np.cumprod(1.0 - sticks[:, :-1], axis=1)], axis=1)
    return sticks * lead


def init_from_prior(
    hyper: Hyperparams, schema: DatasetSchema, rng: np.random.Generator
) -> ModelParams:
    """Draw all parameters from their priors."""
    F, S = hyper.n_household_classes, hyper.n_member_classes
    alpha = rng.gamma(hyper.a_alpha, 1.0 / hyper.b_alpha)
    beta = rng.gamma(hyper.a_beta, 1.0 / hyper.b_beta)
    class_stick = np.ones(F)
    if F > 1:
        class_stick[: F - 1] = rng.beta(1.0, alpha, size=F - 1)
    member_stick = np.ones((F, S))
    if S > 1:
        member_stick[:, : S - 1] = rng.beta(1.0, beta, size=(F, S - 1))
    Dh = int(schema.hh_offsets[-1])
    Di = int(schema.ind_offsets[-1])
    hh_probs = np.empty((F, Dh))
    for sl in _block_slices(schema.hh_offsets):
        draw = rng.standard_gamma(1.0, size=(F, sl.stop - sl.start))
        hh_probs[:, sl] = draw / draw.sum(axis=1, keepdims=True)
    ind_probs = np.empty((F, S, Di))
    for sl in _block_slices(schema.ind_offsets):
        draw = rng.standard_gamma(1.0, size=(F, S, sl.stop - sl.start))
        ind_probs[:, :, sl] = draw / draw.sum(axis=2, keepdims=True)
    return ModelParams(
        class_weight=weights_from_sticks(class_stick),
        class_stick=class_stick,
        member_weight=weights_from_sticks_rows(member_stick),
        member_stick=member_stick,
        hh_probs=hh_probs,
        ind_probs=ind_probs,
        alpha=float(alpha),
        beta=float(beta),
    )


def uniform_params(schema: DatasetSchema, F: int = 1, S: int = 1) -> ModelParams:
    """Parameters assigning uniform probability to every combination."""
    Dh = int(schema.hh_offsets[-1])
    Di = int(schema.ind_offsets[-1])
    hh_probs = np.empty((F, Dh))
    for sl in _block_slices(schema.hh_offsets):
        hh_probs[:, sl] = 1.0 / (sl.stop - sl.start)
    ind_probs = np.empty((F, S, Di))
    for sl in _block_slices(schema.ind_offsets):
        ind_probs[:, :, sl] = 1.0 / (sl.stop - sl.start)
    class_stick = np.ones(F)
    class_stick[: F - 1] = 1.0 / (F - np.arange(F - 1))
    member_stick = np.ones((F, S))
    member_stick[:, : S - 1] = 1.0 / (S - np.arange(S - 1))
    return ModelParams(
        class_weight=np.full(F, 1.0 / F),
        class_stick=class_stick,
        member_weight=np.full((F, S), 1.0 / S),
        member_stick=member_stick,
        hh_probs=hh_probs,
        ind_probs=ind_probs,
        alpha=1.0,
        beta=1.0,
    )


# ---------------------------------------------------------------------------
# Proposal tables: cumulative distributions consumed by the sampling kernels
# ---------------------------------------------------------------------------

@dataclass
class ProposalTables:
    """Per-iteration cumulative lookup tables for categorical draws.

    Both kernel backends draw by inverse CDF over these shared arrays, so a
    common uniform stream yields identical values on either backend.
    """

    schema: DatasetSchema
    hh_cum: np.ndarray        # (F, Dh) blockwise cumulative
    ind_cum: np.ndarray       # (F, S, Di)
    member_cum: np.ndarray    # (F, S)
    class_cum_by_size: dict[int, np.ndarray]  # h -> (F,)

    @property
    def n_household_classes(self) -> int:
        return self.hh_cum.shape[0]


def build_proposal_tables(params: ModelParams, schema: DatasetSchema) -> ProposalTables:
    hh_cum = np.empty_like(params.hh_probs)
    for sl in _block_slices(schema.hh_offsets):
        np.cumsum(params.hh_probs[:, sl], axis=1, out=hh_cum[:, sl])
    ind_cum = np.empty_like(params.ind_probs)
    for sl in _block_slices(schema.ind_offsets):
        np.cumsum(params.ind_probs[:, :, sl], axis=2, out=ind_cum[:, :, sl])
    member_cum = np.cumsum(params.member_weight, axis=1)
    size_off = int(schema.hh_offsets[schema.size_index])
    class_cum = {}
    for h in schema.household_sizes:
        w = params.class_weight * params.hh_probs[:, size_off + schema.size_code(h) - 1]
        total = w.sum()
        if total <= 0:
            raise ValueError(f"no class mass for household size {h}")
        class_cum[h] = np.cumsum(w / total)
    return ProposalTables(
        schema=schema,
        hh_cum=hh_cum,
        ind_cum=ind_cum,
        member_cum=member_cum,
        class_cum_by_size=class_cum,
    )


def draw_categorical(cum: np.ndarray, u: float) -> int:
    """First index whose cumulative value exceeds u (0-based)."""
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, cum.shape[0] - 1)


def sample_household_untruncated(
    params: ModelParams,
    schema: DatasetSchema,
    h: int,
    rng: np.random.Generator,
    household_class: int | None = None,
    tables: ProposalTables | None = None,
    hid: str = "u0",
) -> tuple[Household, int, np.ndarray]:
    """Draw one household of size h from the unrestricted generative model.

    The household class is drawn from the class weights re-weighted by the
    size variable's cell probabilities (unless fixed by the caller); the
    size cell itself is set deterministically.  Returns the household plus
    its 0-based class assignments.
    """
    if tables is None:
        tables = build_proposal_tables(params, schema)
    s = schema
    m = s.stored_individuals(h)
    if household_class is None:
        g = draw_categorical(tables.class_cum_by_size[h], rng.random())
    else:
        g = int(household_class)
    members = np.empty(m, dtype=np.int32)
    for j in range(m):
        members[j] = draw_categorical(tables.member_cum[g], rng.random())
    hh_vals = [0] * s.q
    hh_vals[s.size_index] = s.size_code(h)
    for k in range(s.q):
        if k == s.size_index:
            continue
        a, b = int(s.hh_offsets[k]), int(s.hh_offsets[k + 1])
        hh_vals[k] = draw_categorical(tables.hh_cum[g, a:b], rng.random()) + 1
    ind_vals = [[0] * s.p for _ in range(m)]
    for j in range(m):
        for k in range(s.p):
            a, b = int(s.ind_offsets[k]), int(s.ind_offsets[k + 1])
            ind_vals[j][k] = (
                draw_categorical(tables.ind_cum[g, members[j], a:b], rng.random()) + 1
            )
    household = Household(
        id=hid,
        size=h,
        household_values=tuple(hh_vals),
        individuals=tuple(tuple(r) for r in ind_vals),
    )
    return household, g, members


# ---------------------------------------------------------------------------
# Log-likelihood machinery (log-space throughout)
# ---------------------------------------------------------------------------

def _log(arr):
    with np.errstate(divide="ignore"):
        return np.log(arr)


def household_class_scores(
    params: ModelParams,
    schema: DatasetSchema,
    hh: np.ndarray,
    ind: np.ndarray,
    log_class_weight: np.ndarray | None = None,
    skip_size: bool = False,
) -> np.ndarray:
    """(n, F) matrix of log p(class g, household record).

    ``skip_size`` omits the size variable's factor (used when the class
    weights passed in are already size-conditioned).
    """
    s = schema
    n = hh.shape[0]
    m = ind.shape[1]
    loglam = _log(params.hh_probs)
    logphi = _log(params.ind_probs)
    logom = _log(params.member_weight)
    if log_class_weight is None:
        log_class_weight = _log(params.class_weight)
    scores = np.broadcast_to(log_class_weight, (n, log_class_weight.shape[0])).copy()
    for k in range(s.q):
        if skip_size and k == s.size_index:
            continue
        off = int(s.hh_offsets[k])
        scores += loglam[:, off + hh[:, k] - 1].T
    for j in range(m):
        acc = np.broadcast_to(logom, (n,) + logom.shape).copy()
        for k in range(s.p):
            off = int(s.ind_offsets[k])
            acc += np.moveaxis(logphi[:, :, off + ind[:, j, k] - 1], 2, 0)
        with np.errstate(invalid="ignore"):
            scores += logsumexp(acc, axis=2)
    return scores


def member_class_scores(
    params: ModelParams,
    schema: DatasetSchema,
    ind: np.ndarray,
    household_class: np.ndarray,
) -> np.ndarray:
    """(n, m, S) matrix of log p(member class, individual record | class)."""
    s = schema
    logphi = _log(params.ind_probs)
    logom = _log(params.member_weight)
    n, m = ind.shape[0], ind.shape[1]
    acc = np.broadcast_to(logom[household_class][:, None, :], (n, m, logom.shape[1])).copy()
    for k in range(s.p):
        off = int(s.ind_offsets[k])
        acc += logphi[household_class[:, None], :, off + ind[:, :, k] - 1]
    return acc


def loglik_kernel(
    dataset: Dataset, params: ModelParams, ruleset: RuleSet | None = None
) -> float:
    """Log of the model kernel on a completed dataset.

    Infeasible households (under ``ruleset``) contribute -inf through the
    support indicator.  Missing cells are an error.
    """
    if not dataset.fully_observed():
        raise ValueError("log-likelihood needs a completed dataset")
    total = 0.0
    for h, grp in dataset.groups().items():
        if grp.n == 0:
            continue
        if ruleset is not None:
            feas = ruleset.feasible_mask(grp.hh, grp.ind)
            if not feas.all():
                return float("-inf")
        scores = household_class_scores(params, dataset.schema, grp.hh, grp.ind)
        with np.errstate(invalid="ignore"):
            total += float(logsumexp(scores, axis=1).sum())
    return total


def infeasible_mass_bruteforce(
    params: ModelParams,
    schema: DatasetSchema,
    ruleset: RuleSet,
    h: int,
    guard: int = 10 ** 6,
) -> float:
    """Exact probability that a size-h draw from the unrestricted model is
    infeasible, by summing model mass over the enumerated combination space."""
    if ruleset.compiled.n_rules == 0:
        return 0.0
    total_combos = count_combinations(schema, h)
    if total_combos > guard:
        raise ValueError(
            f"combination space for size {h} has {total_combos} members; "
            "too large for exact summation"
        )
    size_off = int(schema.hh_offsets[schema.size_index])
    w = params.class_weight * params.hh_probs[:, size_off + schema.size_code(h) - 1]
    logw = _log(w / w.sum())
    mass = 0.0
    for hh, ind in combination_batches(schema, h):
        feas = ruleset.feasible_mask(hh, ind)
        if feas.all():
            continue
        scores = household_class_scores(
            params, schema, hh[~feas], ind[~feas], log_class_weight=logw, skip_size=True
        )
        with np.errstate(invalid="ignore"):
            mass += float(np.exp(logsumexp(scores, axis=1)).sum())
    return mass
