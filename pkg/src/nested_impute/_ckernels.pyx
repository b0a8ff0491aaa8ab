# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled sampling primitives.

Mirrors ``_pykernels`` exactly: same uniform-consumption order, same
inverse-CDF decode (first index whose cumulative value exceeds the uniform,
else the last), same rule evaluation semantics.  Uniforms come from the
numpy bit generator backing the caller's Generator, so both backends yield
bitwise-identical draws from a shared seed.
"""

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.stdint cimport int32_t, uint8_t
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_standard_uniform

import numpy as np


cdef int K_COUNT = 0
cdef int K_BOUND_IND = 1
cdef int K_BOUND_HH = 2
cdef int K_PAIR_II = 3
cdef int K_PAIR_HI = 4
cdef int K_VP_II = 5
cdef int K_VP_HI = 6


cdef inline bitgen_t *_bitgen(object rng):
    capsule = rng.bit_generator.capsule
    return <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")


cdef inline int _scan(const double *cum, int d, double u) noexcept nogil:
    # first index whose cumulative value exceeds u, clipped to the last;
    # binary search on the monotone row matches the linear scan exactly
    cdef int c, lo, hi, mid
    if d <= 32:
        for c in range(d):
            if u < cum[c]:
                return c
        return d - 1
    lo = 0
    hi = d
    while lo < hi:
        mid = (lo + hi) >> 1
        if cum[mid] <= u:
            lo = mid + 1
        else:
            hi = mid
    return lo if lo < d else d - 1


cdef inline bint _cmp_ok(long diff, int op, long offset) noexcept nogil:
    if op == 0:
        return diff <= offset
    elif op == 1:
        return diff >= offset
    elif op == 2:
        return diff < offset
    return diff > offset


cdef bint _eval_rules(const int32_t[:, ::1] codes, const uint8_t[::1] tables,
                      const int32_t *hh, const int32_t *ind,
                      int m, int p) noexcept nogil:
    cdef int r, kind, j, a, b, cnt
    cdef int var, toff, cmin, cmax, selvar, seltoff, lo, hi, gvar, gtoff
    cdef int col, aselvar, aseltoff, bselvar, bseltoff, bvar, op, avar, ftoff, db
    cdef long offset, diff
    cdef bint active
    cdef int R = codes.shape[0]
    for r in range(R):
        kind = codes[r, 0]
        if kind == K_COUNT:
            var = codes[r, 1]; toff = codes[r, 2]
            cmin = codes[r, 3]; cmax = codes[r, 4]
            cnt = 0
            for j in range(m):
                if tables[toff + ind[j * p + var] - 1]:
                    cnt += 1
            if cnt < cmin or cnt > cmax:
                return 0
        elif kind == K_BOUND_IND:
            selvar = codes[r, 1]; seltoff = codes[r, 2]; var = codes[r, 3]
            lo = codes[r, 4]; hi = codes[r, 5]
            gvar = codes[r, 6]; gtoff = codes[r, 7]
            if gvar >= 0:
                active = 0
                for j in range(m):
                    if tables[gtoff + ind[j * p + gvar] - 1]:
                        active = 1
                        break
                if not active:
                    continue
            for j in range(m):
                if tables[seltoff + ind[j * p + selvar] - 1]:
                    if ind[j * p + var] < lo or ind[j * p + var] > hi:
                        return 0
        elif kind == K_BOUND_HH:
            col = codes[r, 1]; lo = codes[r, 2]; hi = codes[r, 3]
            gvar = codes[r, 4]; gtoff = codes[r, 5]
            if gvar >= 0:
                active = 0
                for j in range(m):
                    if tables[gtoff + ind[j * p + gvar] - 1]:
                        active = 1
                        break
                if not active:
                    continue
            if hh[col] < lo or hh[col] > hi:
                return 0
        elif kind == K_PAIR_II:
            aselvar = codes[r, 1]; aseltoff = codes[r, 2]
            bselvar = codes[r, 3]; bseltoff = codes[r, 4]
            var = codes[r, 5]; op = codes[r, 6]; offset = codes[r, 7]
            for a in range(m):
                if not tables[aseltoff + ind[a * p + aselvar] - 1]:
                    continue
                for b in range(m):
                    if b == a:
                        continue
                    if not tables[bseltoff + ind[b * p + bselvar] - 1]:
                        continue
                    diff = ind[a * p + var] - ind[b * p + var]
                    if not _cmp_ok(diff, op, offset):
                        return 0
        elif kind == K_PAIR_HI:
            col = codes[r, 1]; bselvar = codes[r, 2]; bseltoff = codes[r, 3]
            bvar = codes[r, 4]; op = codes[r, 5]; offset = codes[r, 6]
            for b in range(m):
                if not tables[bseltoff + ind[b * p + bselvar] - 1]:
                    continue
                diff = hh[col] - ind[b * p + bvar]
                if not _cmp_ok(diff, op, offset):
                    return 0
        elif kind == K_VP_II:
            aselvar = codes[r, 1]; aseltoff = codes[r, 2]; avar = codes[r, 3]
            bselvar = codes[r, 4]; bseltoff = codes[r, 5]; bvar = codes[r, 6]
            ftoff = codes[r, 7]; db = codes[r, 8]
            for a in range(m):
                if not tables[aseltoff + ind[a * p + aselvar] - 1]:
                    continue
                for b in range(m):
                    if b == a:
                        continue
                    if not tables[bseltoff + ind[b * p + bselvar] - 1]:
                        continue
                    if tables[ftoff + (ind[a * p + avar] - 1) * db
                              + (ind[b * p + bvar] - 1)]:
                        return 0
        elif kind == K_VP_HI:
            col = codes[r, 1]; bselvar = codes[r, 2]; bseltoff = codes[r, 3]
            bvar = codes[r, 4]; ftoff = codes[r, 5]; db = codes[r, 6]
            for b in range(m):
                if not tables[bseltoff + ind[b * p + bselvar] - 1]:
                    continue
                if tables[ftoff + (hh[col] - 1) * db + (ind[b * p + bvar] - 1)]:
                    return 0
    return 1


def feasible_mask(int32_t[:, ::1] codes, uint8_t[::1] tables,
                  int32_t[:, ::1] hh, int32_t[:, :, ::1] ind):
    cdef Py_ssize_t n = hh.shape[0]
    cdef int m = <int> ind.shape[1]
    cdef int p = <int> ind.shape[2]
    out = np.empty(n, dtype=np.uint8)
    cdef uint8_t[::1] ov = out
    cdef Py_ssize_t i
    cdef const int32_t *ind_base = NULL
    with nogil:
        for i in range(n):
            if m > 0:
                ind_base = &ind[i, 0, 0]
            ov[i] = _eval_rules(codes, tables, &hh[i, 0], ind_base, m, p)
    return out.view(np.bool_)


def fill_block(object rng,
               double[::1] class_cum, double[:, ::1] member_cum,
               double[:, ::1] hh_cum, double[:, :, ::1] ind_cum,
               int32_t[::1] hh_off, int32_t[::1] ind_off,
               int size_index, int size_code, int q, int p, int m,
               int32_t[:, ::1] codes, uint8_t[::1] tables,
               int block_n,
               int32_t[:, ::1] hh_out, int32_t[:, :, ::1] ind_out,
               int32_t[::1] G_out, int32_t[:, ::1] M_out,
               uint8_t[::1] feas_out):
    cdef bitgen_t *bg = _bitgen(rng)
    cdef int F = <int> class_cum.shape[0]
    cdef int b, j, k, g, a, e
    cdef double u
    cdef const int32_t *ind_base
    with rng.bit_generator.lock, nogil:
        for b in range(block_n):
            u = random_standard_uniform(bg)
            g = _scan(&class_cum[0], F, u)
            G_out[b] = g
            for j in range(m):
                u = random_standard_uniform(bg)
                M_out[b, j] = _scan(&member_cum[g, 0], <int> member_cum.shape[1], u)
            hh_out[b, size_index] = size_code
            for k in range(q):
                if k == size_index:
                    continue
                a = hh_off[k]; e = hh_off[k + 1]
                u = random_standard_uniform(bg)
                hh_out[b, k] = _scan(&hh_cum[g, a], e - a, u) + 1
            for j in range(m):
                for k in range(p):
                    a = ind_off[k]; e = ind_off[k + 1]
                    u = random_standard_uniform(bg)
                    ind_out[b, j, k] = _scan(
                        &ind_cum[g, M_out[b, j], a], e - a, u) + 1
            if m > 0:
                ind_base = &ind_out[b, 0, 0]
            else:
                ind_base = NULL
            feas_out[b] = _eval_rules(codes, tables, &hh_out[b, 0], ind_base, m, p)


def impute_block(object rng,
                 double[::1] class_cum, double[:, ::1] member_cum,
                 double[:, ::1] hh_cum, double[:, :, ::1] ind_cum,
                 int32_t[::1] hh_off, int32_t[::1] ind_off,
                 int size_index, int size_code, int q, int p, int m,
                 int32_t[:, ::1] codes, uint8_t[::1] tables,
                 int b_n,
                 int32_t[:, ::1] hh, int32_t[:, :, ::1] ind, Py_ssize_t i,
                 int g, int32_t[::1] members,
                 int32_t[::1] hcols, int32_t[::1] pairs_j, int32_t[::1] pairs_k):
    """Draw b_n candidate completions for household row i; accept the first
    feasible one in place.  Returns the accepted index or -1."""
    cdef bitgen_t *bg = _bitgen(rng)
    cdef int nh = <int> hcols.shape[0]
    cdef int np_ = <int> pairs_j.shape[0]
    cdef int nm = nh + np_
    cand_arr = np.empty((b_n, nm), dtype=np.int32)
    hh_scr_arr = np.empty(q, dtype=np.int32)
    ind_scr_arr = np.empty(m * p if m * p > 0 else 1, dtype=np.int32)
    cdef int32_t[:, ::1] cand = cand_arr
    cdef int32_t[::1] hh_scr = hh_scr_arr
    cdef int32_t[::1] ind_scr = ind_scr_arr
    cdef int b, c, k, j, a, e, accepted
    cdef double u
    with rng.bit_generator.lock, nogil:
        for b in range(b_n):
            for c in range(nh):
                k = hcols[c]
                a = hh_off[k]; e = hh_off[k + 1]
                u = random_standard_uniform(bg)
                cand[b, c] = _scan(&hh_cum[g, a], e - a, u) + 1
            for c in range(np_):
                j = pairs_j[c]; k = pairs_k[c]
                a = ind_off[k]; e = ind_off[k + 1]
                u = random_standard_uniform(bg)
                cand[b, nh + c] = _scan(
                    &ind_cum[g, members[j], a], e - a, u) + 1
        accepted = -1
        for b in range(b_n):
            for k in range(q):
                hh_scr[k] = hh[i, k]
            for j in range(m):
                for k in range(p):
                    ind_scr[j * p + k] = ind[i, j, k]
            for c in range(nh):
                hh_scr[hcols[c]] = cand[b, c]
            for c in range(np_):
                ind_scr[pairs_j[c] * p + pairs_k[c]] = cand[b, nh + c]
            if _eval_rules(codes, tables, &hh_scr[0], &ind_scr[0], m, p):
                accepted = b
                for k in range(q):
                    hh[i, k] = hh_scr[k]
                for j in range(m):
                    for k in range(p):
                        ind[i, j, k] = ind_scr[j * p + k]
                break
    return accepted
