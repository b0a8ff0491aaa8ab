"""Pure-python sampling primitives (vectorized fallback backend).

Both backends implement the same three primitives with an identical uniform
consumption contract, so a shared bit-generator produces identical output on
either one:

* ``fill_block`` draws a fixed-size block of household proposals.  Each
  proposal consumes ``1 + m + (q-1) + m*p`` uniforms in a fixed field order
  (class, member classes, household cells skipping size, individual cells
  row-major).
* ``impute_block`` draws ``b`` candidate completions for one household's
  missing cells (cells ordered household-columns then individual (row,
  column) pairs), consuming exactly ``b * n_missing`` uniforms, and accepts
  the first feasible candidate.
* ``feasible_mask`` evaluates the compiled rules over a batch.

Categorical draws are inverse-CDF lookups into shared cumulative tables:
the drawn index is the first whose cumulative value exceeds the uniform.
"""

from __future__ import annotations

import numpy as np

from .rules import feasible_mask_py


def feasible_mask(codes, tables, hh, ind):
    from .rules import CompiledRules

    return feasible_mask_py(CompiledRules(codes=codes, tables=tables), hh, ind)


def _decode_rows(cumrows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Per-row inverse CDF: first index with u < cum, else the last index."""
    less = u[:, None] < cumrows
    idx = less.argmax(axis=1).astype(np.int32)
    bad = ~less.any(axis=1)
    if bad.any():
        idx[bad] = cumrows.shape[1] - 1
    return idx


def _decode_shared(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(cum, u, side="right").astype(np.int32)
    np.minimum(idx, cum.shape[0] - 1, out=idx)
    return idx


def fill_block(rng, kt, block_n, hh_out, ind_out, G_out, M_out, feas_out):
    """Draw ``block_n`` proposals for households of the configured size."""
    q, p, m = kt.q, kt.p, kt.m
    per = 1 + m + (q - 1) + m * p
    U = rng.random((block_n, per))
    col = 0
    G = _decode_shared(kt.class_cum, U[:, col])
    col += 1
    G_out[:block_n] = G
    for j in range(m):
        M_out[:block_n, j] = _decode_rows(kt.member_cum[G], U[:, col])
        col += 1
    hh_out[:block_n, kt.size_index] = kt.size_code
    for k in range(q):
        if k == kt.size_index:
            continue
        a, b = int(kt.hh_off[k]), int(kt.hh_off[k + 1])
        hh_out[:block_n, k] = _decode_rows(kt.hh_cum[G, a:b], U[:, col]) + 1
        col += 1
    for j in range(m):
        mj = M_out[:block_n, j]
        for k in range(p):
            a, b = int(kt.ind_off[k]), int(kt.ind_off[k + 1])
            ind_out[:block_n, j, k] = _decode_rows(kt.ind_cum[G, mj, a:b], U[:, col]) + 1
            col += 1
    feas_out[:block_n] = feasible_mask(
        kt.codes, kt.tables, hh_out[:block_n], ind_out[:block_n]
    )


def impute_block(rng, kt, b, hh, ind, i, g, members, hcols, pairs_j, pairs_k):
    """Try ``b`` candidate completions for household row ``i``.

    Mutates ``hh[i]``/``ind[i]`` with the first feasible candidate and
    returns its 0-based index within the block, or -1 if none is feasible.
    """
    nh = hcols.shape[0]
    nm = nh + pairs_j.shape[0]
    U = rng.random((b, nm))
    cand = np.empty((b, nm), dtype=np.int32)
    for c in range(nh):
        k = int(hcols[c])
        a, e = int(kt.hh_off[k]), int(kt.hh_off[k + 1])
        cand[:, c] = _decode_shared(kt.hh_cum[g, a:e], U[:, c]) + 1
    for c in range(pairs_j.shape[0]):
        j, k = int(pairs_j[c]), int(pairs_k[c])
        a, e = int(kt.ind_off[k]), int(kt.ind_off[k + 1])
        cand[:, nh + c] = _decode_shared(
            kt.ind_cum[g, int(members[j]), a:e], U[:, nh + c]
        ) + 1
    hh_rep = np.repeat(hh[i:i + 1], b, axis=0)
    ind_rep = np.repeat(ind[i:i + 1], b, axis=0)
    for c in range(nh):
        hh_rep[:, int(hcols[c])] = cand[:, c]
    for c in range(pairs_j.shape[0]):
        ind_rep[:, int(pairs_j[c]), int(pairs_k[c])] = cand[:, nh + c]
    feas = feasible_mask(kt.codes, kt.tables, hh_rep, ind_rep)
    hits = np.flatnonzero(feas)
    if hits.size == 0:
        return -1
    first = int(hits[0])
    hh[i] = hh_rep[first]
    ind[i] = ind_rep[first]
    return first
