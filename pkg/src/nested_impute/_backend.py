"""Kernel backend selection and the shared rejection-sampling drivers.

The hot inner loops (household proposal generation, rule checks, missing-cell
rejection) are implemented twice: a compiled Cython extension and a
vectorized pure-python fallback.  The compiled backend is used when the
extension imported successfully; set ``NESTED_IMPUTE_BACKEND=python`` or
``=compiled`` to force a choice.  Both backends consume uniforms from the
caller's Generator in the same order, in fixed-size blocks, so chain output
is bitwise identical across backends for a given seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _pykernels
from .model import ProposalTables
from .rules import CompiledRules

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - build without compiler
    _ckernels = None

_FORCED = os.environ.get("NESTED_IMPUTE_BACKEND", "").strip().lower()
if _FORCED and _FORCED not in ("python", "compiled"):
    raise RuntimeError(f"bad NESTED_IMPUTE_BACKEND value {_FORCED!r}")
if _FORCED == "compiled" and _ckernels is None:
    raise RuntimeError("NESTED_IMPUTE_BACKEND=compiled but the extension is unavailable")

_active = "python" if _FORCED == "python" or _ckernels is None else "compiled"

PROPOSAL_BLOCK = 256
IMPUTE_SCHEDULE = (1, 8, 64)
IMPUTE_BLOCK = 256


class AttemptCapExceeded(RuntimeError):
    """A rejection loop exceeded its configured attempt cap."""


def backend_name() -> str:
    return _active


def compiled_available() -> bool:
    return _ckernels is not None


def set_backend(name: str) -> None:
    """Force a backend (used by tests and benchmarks)."""
    global _active
    if name not in ("python", "compiled"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and _ckernels is None:
        raise RuntimeError("compiled backend unavailable")
    _active = name


@dataclass
class KernelTables:
    """Flat view of proposal tables + compiled rules for one household size."""

    class_cum: np.ndarray
    member_cum: np.ndarray
    hh_cum: np.ndarray
    ind_cum: np.ndarray
    hh_off: np.ndarray
    ind_off: np.ndarray
    size_index: int
    size_code: int
    q: int
    p: int
    m: int
    codes: np.ndarray
    tables: np.ndarray


def make_kernel_tables(
    ptables: ProposalTables, compiled: CompiledRules, h: int
) -> KernelTables:
    s = ptables.schema
    return KernelTables(
        class_cum=np.ascontiguousarray(ptables.class_cum_by_size[h]),
        member_cum=np.ascontiguousarray(ptables.member_cum),
        hh_cum=np.ascontiguousarray(ptables.hh_cum),
        ind_cum=np.ascontiguousarray(ptables.ind_cum),
        hh_off=np.ascontiguousarray(s.hh_offsets, dtype=np.int32),
        ind_off=np.ascontiguousarray(s.ind_offsets, dtype=np.int32),
        size_index=int(s.size_index),
        size_code=int(s.size_code(h)),
        q=int(s.q),
        p=int(s.p),
        m=int(s.stored_individuals(h)),
        codes=np.ascontiguousarray(compiled.codes),
        tables=np.ascontiguousarray(compiled.tables),
    )


def feasible_mask(compiled: CompiledRules, hh: np.ndarray, ind: np.ndarray) -> np.ndarray:
    hh = np.ascontiguousarray(hh, dtype=np.int32)
    ind = np.ascontiguousarray(ind, dtype=np.int32)
    if _active == "compiled":
        return _ckernels.feasible_mask(
            np.ascontiguousarray(compiled.codes),
            np.ascontiguousarray(compiled.tables),
            hh,
            ind,
        )
    return _pykernels.feasible_mask(compiled.codes, compiled.tables, hh, ind)


def _fill_block(rng, kt: KernelTables, n, hh, ind, G, M, feas):
    if _active == "compiled":
        _ckernels.fill_block(
            rng, kt.class_cum, kt.member_cum, kt.hh_cum, kt.ind_cum,
            kt.hh_off, kt.ind_off, kt.size_index, kt.size_code,
            kt.q, kt.p, kt.m, kt.codes, kt.tables,
            n, hh, ind, G, M, feas,
        )
    else:
        _pykernels.fill_block(rng, kt, n, hh, ind, G, M, feas)


def _impute_block(rng, kt: KernelTables, b, hh, ind, i, g, members, hcols, pj, pk):
    if _active == "compiled":
        return _ckernels.impute_block(
            rng, kt.class_cum, kt.member_cum, kt.hh_cum, kt.ind_cum,
            kt.hh_off, kt.ind_off, kt.size_index, kt.size_code,
            kt.q, kt.p, kt.m, kt.codes, kt.tables,
            b, hh, ind, i, g, members, hcols, pj, pk,
        )
    return _pykernels.impute_block(rng, kt, b, hh, ind, i, g, members, hcols, pj, pk)


def rejection_households(
    rng: np.random.Generator,
    ptables: ProposalTables,
    compiled: CompiledRules,
    h: int,
    target: int,
    keep_infeasible: bool,
    cap: int = 10 ** 9,
):
    """Draw from the unrestricted model until ``target`` feasible households
    have been seen.

    Returns (hh, ind, household_class, member_class, n_infeasible,
    n_feasible, n_proposals) where the returned arrays hold the infeasible
    draws (data augmentation) or the feasible ones (synthesis) depending on
    ``keep_infeasible``.  Proposals are drawn in fixed blocks; draws after
    the quota-filling proposal inside the final block are discarded.
    """
    kt = make_kernel_tables(ptables, compiled, h)
    q, p, m = kt.q, kt.p, kt.m
    blk = PROPOSAL_BLOCK
    hh_blk = np.empty((blk, q), dtype=np.int32)
    ind_blk = np.empty((blk, m, p), dtype=np.int32)
    G_blk = np.empty(blk, dtype=np.int32)
    M_blk = np.empty((blk, m), dtype=np.int32)
    feas_blk = np.empty(blk, dtype=np.uint8)
    kept_hh, kept_ind, kept_G, kept_M = [], [], [], []
    t0 = t1 = proposals = 0
    while t1 < target:
        if proposals >= cap:
            raise AttemptCapExceeded(
                f"size-{h} rejection loop exceeded {cap} proposals "
                f"({t1}/{target} feasible so far); the model assigns almost "
                "no mass to feasible households"
            )
        _fill_block(rng, kt, blk, hh_blk, ind_blk, G_blk, M_blk, feas_blk)
        feas = feas_blk.view(np.bool_)
        need = target - t1
        feas_cum = np.cumsum(feas)
        upto = blk if feas_cum[-1] < need else int(np.searchsorted(feas_cum, need)) + 1
        got = int(feas_cum[upto - 1])
        t1 += got
        t0 += upto - got
        proposals += upto
        keep = ~feas[:upto] if keep_infeasible else feas[:upto]
        if keep.any():
            kept_hh.append(hh_blk[:upto][keep].copy())
            kept_ind.append(ind_blk[:upto][keep].copy())
            kept_G.append(G_blk[:upto][keep].copy())
            kept_M.append(M_blk[:upto][keep].copy())
    if kept_hh:
        out = (
            np.concatenate(kept_hh),
            np.concatenate(kept_ind),
            np.concatenate(kept_G),
            np.concatenate(kept_M),
        )
    else:
        out = (
            np.empty((0, q), dtype=np.int32),
            np.empty((0, m, p), dtype=np.int32),
            np.empty(0, dtype=np.int32),
            np.empty((0, m), dtype=np.int32),
        )
    return out + (t0, t1, proposals)


def impute_missing_cells(
    rng: np.random.Generator,
    ptables: ProposalTables,
    compiled: CompiledRules,
    h: int,
    hh: np.ndarray,
    ind: np.ndarray,
    hh_mask: np.ndarray,
    ind_mask: np.ndarray,
    household_class: np.ndarray,
    member_class: np.ndarray,
    cap: int = 10 ** 6,
    ids=None,
):
    """Redraw each household's masked cells until the completion is feasible.

    Mutates ``hh``/``ind`` in place; observed cells never change.  Returns
    total proposals examined.  Missing cells are proposed independently from
    the household's class-conditional cell probabilities; a household whose
    attempts exceed ``cap`` raises, naming the household.
    """
    kt = make_kernel_tables(ptables, compiled, h)
    n = hh.shape[0]
    total = 0
    for i in range(n):
        hcols = np.flatnonzero(hh_mask[i]).astype(np.int32)
        pairs = np.argwhere(ind_mask[i]).astype(np.int32)
        if hcols.size == 0 and pairs.size == 0:
            continue
        pj = np.ascontiguousarray(pairs[:, 0]) if pairs.size else np.empty(0, np.int32)
        pk = np.ascontiguousarray(pairs[:, 1]) if pairs.size else np.empty(0, np.int32)
        g = int(household_class[i])
        members = np.ascontiguousarray(member_class[i], dtype=np.int32)
        attempts = 0
        sched = 0
        while True:
            if attempts >= cap:
                hid = ids[i] if ids is not None else f"#{i}"
                raise AttemptCapExceeded(
                    f"household {hid} (size {h}) exceeded {cap} completion "
                    "attempts; its observed margin has (almost) no feasible "
                    "completion mass under the current parameters"
                )
            b = IMPUTE_SCHEDULE[sched] if sched < len(IMPUTE_SCHEDULE) else IMPUTE_BLOCK
            sched += 1
            hit = _impute_block(rng, kt, b, hh, ind, i, g, members, hcols, pj, pk)
            if hit >= 0:
                attempts += hit + 1
                break
            attempts += b
        total += attempts
    return total
