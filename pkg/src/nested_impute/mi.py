"""Estimands over completed datasets and pooled multiple-imputation inference.

Estimands are proportions: cell probabilities (marginal, bivariate,
trivariate) and within-household predicates written in the same selector
mini-language as the structural-zero rules.  Each completed dataset yields a
point estimate ``q`` and its Wald variance ``u``; the per-dataset results
pool either with the standard multiple-imputation rules or with the
partially-synthetic variant.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations
from math import inf, sqrt

import numpy as np
from scipy.special import ndtri, stdtrit

from .rules import parse_levelset
from .schema import Dataset, DatasetSchema

_OPS = {
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


class EstimandError(ValueError):
    """Raised for unparseable or schema-inconsistent estimand queries."""


# ---------------------------------------------------------------------------
# Atoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellAtom:
    """unit var == level; resolves to a household atom for household vars."""

    var: str
    level: str


@dataclass(frozen=True)
class VarInAtom:
    target: str  # "hh" | "head" | "unit"
    var: str
    levels: frozenset[str]


@dataclass(frozen=True)
class OrdAtom:
    target: str  # "hh" | "head"
    var: str
    op: str
    value: int  # ordinal units (level code - 1)


@dataclass(frozen=True)
class CountAtom:
    var: str
    levels: frozenset[str]
    op: str
    value: int


@dataclass(frozen=True)
class PairAtom:
    """Exists a selected individual with head.var <op> ind.var + offset."""

    var: str
    op: str
    sel_var: str
    sel_levels: frozenset[str]
    offset: int


@dataclass(frozen=True)
class AllSameAtom:
    var: str


Atom = object


@dataclass(frozen=True)
class Estimand:
    """A proportion query: atoms conjoined over a declared denominator."""

    denominator: tuple  # ("households",) | ("individuals",) | ("size", h)
    atoms: tuple
    label: str

    @property
    def kind(self) -> str:
        if len(self.atoms) == 1 and isinstance(self.atoms[0], CellAtom):
            return "marginal"
        if all(isinstance(a, CellAtom) for a in self.atoms):
            return {2: "bivariate", 3: "trivariate"}.get(len(self.atoms), "cell")
        return "household_predicate"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_DENOM_RE = re.compile(r"^(households|individuals|size:\d+)\s*:\s*(.+)$")
_IN_RE = re.compile(r"^(head|hh)\.(\w+)\s+in\s+\{([^}]*)\}$")
_EQ_RE = re.compile(r"^(head|hh)\.(\w+)\s*=\s*([^\s=<>!]+)$")
_ORD_RE = re.compile(r"^(head|hh)\.(\w+)\s*(<=|>=|<|>)\s*(-?\d+)$")
_PAIR_RE = re.compile(
    r"^head\.(\w+)\s*(<=|>=|<|>|==|!=)\s*sel\(\s*(\w+)\s+in\s+\{([^}]*)\}\s*\)\.(\w+)"
    r"(?:\s*([+-])\s*(\d+))?$"
)
_COUNT_RE = re.compile(r"^count\(\s*(\w+)\s+in\s+\{([^}]*)\}\s*\)\s*(<=|>=|<|>|==|!=)\s*(\d+)$")
_PRESENT_RE = re.compile(r"^(present|absent)\(\s*(\w+)\s+in\s+\{([^}]*)\}\s*\)$")
_ALLSAME_RE = re.compile(r"^all_same\(\s*(\w+)\s*\)$")
_BARE_IN_RE = re.compile(r"^(\w+)\s+in\s+\{([^}]*)\}$")
_BARE_EQ_RE = re.compile(r"^(\w+)\s*=\s*([^\s=<>!]+)$")


def parse_atom(text: str):
    text = text.strip()
    if m := _ALLSAME_RE.match(text):
        return AllSameAtom(m.group(1))
    if m := _PRESENT_RE.match(text):
        which, var, levels = m.groups()
        op, value = (">=", 1) if which == "present" else ("==", 0)
        return CountAtom(var, parse_levelset(levels), op, value)
    if m := _COUNT_RE.match(text):
        var, levels, op, value = m.groups()
        return CountAtom(var, parse_levelset(levels), op, int(value))
    if m := _PAIR_RE.match(text):
        var, op, sel_var, sel_levels, var_b, sign, mag = m.groups()
        if var_b != var:
            raise EstimandError(f"pair atom compares one variable on both sides: {text!r}")
        offset = 0 if mag is None else (int(mag) if sign == "+" else -int(mag))
        return PairAtom(var, op, sel_var, parse_levelset(sel_levels), offset)
    if m := _IN_RE.match(text):
        target, var, levels = m.groups()
        return VarInAtom(target, var, parse_levelset(levels))
    if m := _ORD_RE.match(text):
        target, var, op, value = m.groups()
        return OrdAtom(target, var, op, int(value))
    if m := _EQ_RE.match(text):
        target, var, level = m.groups()
        return VarInAtom(target, var, frozenset({level}))
    if m := _BARE_IN_RE.match(text):
        return VarInAtom("unit", m.group(1), parse_levelset(m.group(2)))
    if m := _BARE_EQ_RE.match(text):
        return CellAtom(m.group(1), m.group(2))
    raise EstimandError(f"cannot parse atom {text!r}")


def parse_estimand_line(line: str) -> Estimand:
    m = _DENOM_RE.match(line.strip())
    if not m:
        raise EstimandError(f"estimand needs a '<denominator>:' prefix: {line!r}")
    denom_text, rest = m.groups()
    if denom_text.startswith("size:"):
        denominator = ("size", int(denom_text.split(":", 1)[1]))
    else:
        denominator = (denom_text,)
    atoms = tuple(parse_atom(tok) for tok in rest.split("&"))
    return Estimand(denominator=denominator, atoms=atoms, label=line.strip())


def parse_estimand_file(text: str) -> list[Estimand]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append(parse_estimand_line(line))
        except EstimandError as e:
            raise EstimandError(f"estimand line {lineno}: {e}") from None
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _head_values(schema: DatasetSchema, grp, var: str):
    """(values, valid) for the head's ``var`` in one size group."""
    if schema.head_moved:
        moved = schema.head_var_map.get(var)
        if moved is None:
            raise EstimandError(f"no household-level copy of head variable {var!r}")
        return grp.hh[:, schema.hh_var_index(moved)], np.ones(grp.n, dtype=bool)
    if not schema.relationship_var or not schema.head_level:
        raise EstimandError("head atoms need relationship/head schema configuration")
    rel_idx = schema.ind_var_index(schema.relationship_var)
    head_code = schema.var(schema.relationship_var).code(schema.head_level)
    is_head = grp.ind[:, :, rel_idx] == head_code
    valid = is_head.sum(axis=1) == 1
    pos = is_head.argmax(axis=1)
    vals = grp.ind[np.arange(grp.n), pos, schema.ind_var_index(var)]
    return vals, valid


def _membership(schema, var_name, levels):
    var = schema.var(var_name)
    table = np.zeros(var.cardinality + 1, dtype=bool)
    for label in levels:
        table[var.code(label)] = True
    return table


def _eval_household_atom(atom, schema: DatasetSchema, grp) -> np.ndarray:
    """(n,) boolean vector for a household-level atom."""
    n, m = grp.n, grp.ind.shape[1]
    if isinstance(atom, CellAtom):
        var = schema.var(atom.var)
        if var.scope != "household":
            raise EstimandError(
                f"{atom.var!r} is individual-level; use an individuals denominator"
            )
        return grp.hh[:, schema.hh_var_index(atom.var)] == var.code(atom.level)
    if isinstance(atom, VarInAtom):
        if atom.target == "hh":
            table = _membership(schema, atom.var, atom.levels)
            return table[grp.hh[:, schema.hh_var_index(atom.var)]]
        if atom.target == "head":
            vals, valid = _head_values(schema, grp, atom.var)
            table = _membership(schema, atom.var, atom.levels)
            return table[vals] & valid
        raise EstimandError("unit atoms need an individuals denominator")
    if isinstance(atom, OrdAtom):
        if not schema.var(atom.var).ordinal:
            raise EstimandError(f"{atom.var!r} is not ordinal")
        if atom.target == "hh":
            vals = grp.hh[:, schema.hh_var_index(atom.var)]
            valid = np.ones(n, dtype=bool)
        else:
            vals, valid = _head_values(schema, grp, atom.var)
        return _OPS[atom.op](vals - 1, atom.value) & valid
    if isinstance(atom, CountAtom):
        if m == 0:
            cnt = np.zeros(n, dtype=np.int64)
        else:
            table = _membership(schema, atom.var, atom.levels)
            cnt = table[grp.ind[:, :, schema.ind_var_index(atom.var)]].sum(axis=1)
        return _OPS[atom.op](cnt, atom.value)
    if isinstance(atom, PairAtom):
        head_vals, valid = _head_values(schema, grp, atom.var)
        if m == 0:
            return np.zeros(n, dtype=bool)
        table = _membership(schema, atom.sel_var, atom.sel_levels)
        sel = table[grp.ind[:, :, schema.ind_var_index(atom.sel_var)]]
        diff = head_vals.astype(np.int64)[:, None] - grp.ind[:, :, schema.ind_var_index(atom.var)]
        return (sel & _OPS[atom.op](diff, atom.offset)).any(axis=1) & valid
    if isinstance(atom, AllSameAtom):
        k = schema.ind_var_index(atom.var)
        if m == 0:
            same = np.ones(n, dtype=bool)
        else:
            same = (grp.ind[:, :, k] == grp.ind[:, 0:1, k]).all(axis=1)
        if schema.head_moved:
            moved = schema.head_var_map.get(atom.var)
            if moved is not None and m > 0:
                same &= grp.hh[:, schema.hh_var_index(moved)] == grp.ind[:, 0, k]
        return same
    raise EstimandError(f"cannot evaluate {atom!r} at household level")


def _eval_unit_atom(atom, schema: DatasetSchema, grp) -> np.ndarray | None:
    """(n, m) boolean matrix for a per-individual atom, or None if the atom
    is household-level."""
    if isinstance(atom, CellAtom):
        var = schema.var(atom.var)
        if var.scope == "household":
            return None
        k = schema.ind_var_index(atom.var)
        return grp.ind[:, :, k] == var.code(atom.level)
    if isinstance(atom, VarInAtom) and atom.target == "unit":
        var = schema.var(atom.var)
        if var.scope == "household":
            return None
        table = _membership(schema, atom.var, atom.levels)
        return table[grp.ind[:, :, schema.ind_var_index(atom.var)]]
    return None


def estimate_on_dataset(dataset: Dataset, estimand: Estimand) -> tuple[float, float]:
    """Proportion and its Wald variance over the declared denominator."""
    if not dataset.fully_observed():
        raise EstimandError("estimands need fully observed datasets")
    schema = dataset.schema
    denom = estimand.denominator
    per_individual = denom[0] == "individuals"
    num = 0
    den = 0
    for h, grp in dataset.groups().items():
        if denom[0] == "size" and h != denom[1]:
            continue
        if grp.n == 0:
            continue
        m = grp.ind.shape[1]
        hh_ok = np.ones(grp.n, dtype=bool)
        unit_ok = None
        for atom in estimand.atoms:
            unit = _eval_unit_atom(atom, schema, grp) if per_individual else None
            if unit is not None:
                unit_ok = unit if unit_ok is None else (unit_ok & unit)
            else:
                hh_ok &= _eval_household_atom(atom, schema, grp)
        if per_individual:
            den += grp.n * m
            if m:
                matches = hh_ok[:, None] if unit_ok is None else (hh_ok[:, None] & unit_ok)
                num += int(matches.sum())
        else:
            den += grp.n
            num += int(hh_ok.sum())
    if den == 0:
        raise EstimandError(f"denominator is empty for {estimand.label!r}")
    q = num / den
    u = q * (1.0 - q) / den
    return q, u


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

@dataclass
class MIResult:
    estimates: tuple
    variances: tuple
    q_bar: float
    b: float
    u_bar: float
    T: float
    df: float
    lo: float
    hi: float
    gamma: float
    method: str

    @property
    def L(self) -> int:
        return len(self.estimates)


def _interval(q_bar, T, df, gamma):
    if T == 0:
        return q_bar, q_bar
    if df == inf:
        crit = float(ndtri(1.0 - gamma / 2.0))
    else:
        crit = float(stdtrit(df, 1.0 - gamma / 2.0))
    half = crit * sqrt(T)
    return q_bar - half, q_bar + half


def combine_rubin(results, gamma: float = 0.05) -> MIResult:
    """Pool completed-data estimates: total variance (1 + 1/L) b + u_bar."""
    qs = np.array([q for q, _ in results], dtype=np.float64)
    us = np.array([u for _, u in results], dtype=np.float64)
    L = qs.shape[0]
    if L < 2:
        raise ValueError("pooling needs at least two completed datasets")
    q_bar = float(qs.mean())
    b = float(qs.var(ddof=1))
    u_bar = float(us.mean())
    T = (1.0 + 1.0 / L) * b + u_bar
    if b > 0:
        df = (L - 1) * (1.0 + u_bar / ((1.0 + 1.0 / L) * b)) ** 2
    else:
        df = inf
    lo, hi = _interval(q_bar, T, df, gamma)
    return MIResult(tuple(qs), tuple(us), q_bar, b, u_bar, T, df, lo, hi, gamma, "rubin")


def combine_partial_synth(results, gamma: float = 0.05) -> MIResult:
    """Pool fully-simulated-record estimates: total variance u_bar + b / L."""
    qs = np.array([q for q, _ in results], dtype=np.float64)
    us = np.array([u for _, u in results], dtype=np.float64)
    L = qs.shape[0]
    if L < 2:
        raise ValueError("pooling needs at least two synthetic datasets")
    q_bar = float(qs.mean())
    b = float(qs.var(ddof=1))
    u_bar = float(us.mean())
    T = u_bar + b / L
    if b > 0:
        df = (L - 1) * (1.0 + L * u_bar / b) ** 2
    else:
        df = inf
    lo, hi = _interval(q_bar, T, df, gamma)
    return MIResult(
        tuple(qs), tuple(us), q_bar, b, u_bar, T, df, lo, hi, gamma, "partial_synth"
    )


COMBINERS = {"rubin": combine_rubin, "partial_synth": combine_partial_synth}


# ---------------------------------------------------------------------------
# Suite generation
# ---------------------------------------------------------------------------

def _cell_estimand(schema: DatasetSchema, cells: tuple) -> Estimand:
    any_individual = any(schema.var(v).scope == "individual" for v, _ in cells)
    denom = ("individuals",) if any_individual else ("households",)
    atoms = tuple(CellAtom(v, lvl) for v, lvl in cells)
    label = f"{denom[0]}: " + " & ".join(f"{v}={lvl}" for v, lvl in cells)
    return Estimand(denominator=denom, atoms=atoms, label=label)


def estimand_suite(
    schema: DatasetSchema,
    pairs: bool = True,
    triples: bool = True,
    max_marginal: int | None = None,
    max_pairs: int | None = None,
    max_triples: int | None = None,
    seed: int = 0,
    predicates=(),
) -> list[Estimand]:
    """Every marginal/pair/triple cell (optionally subsampled) plus the
    configured household predicates."""
    variables = [v.name for v in schema.household_vars + schema.individual_vars]
    out: list[Estimand] = []
    marginals = [
        ((v, lvl),) for v in variables for lvl in schema.var(v).levels
    ]
    out.extend(_subsample([ _cell_estimand(schema, c) for c in marginals],
                          max_marginal, seed, 1))
    if pairs:
        pair_cells = [
            ((v1, l1), (v2, l2))
            for v1, v2 in combinations(variables, 2)
            for l1 in schema.var(v1).levels
            for l2 in schema.var(v2).levels
        ]
        out.extend(_subsample([_cell_estimand(schema, c) for c in pair_cells],
                              max_pairs, seed, 2))
    if triples:
        triple_cells = [
            ((v1, l1), (v2, l2), (v3, l3))
            for v1, v2, v3 in combinations(variables, 3)
            for l1 in schema.var(v1).levels
            for l2 in schema.var(v2).levels
            for l3 in schema.var(v3).levels
        ]
        out.extend(_subsample([_cell_estimand(schema, c) for c in triple_cells],
                              max_triples, seed, 3))
    for line in predicates:
        out.append(parse_estimand_line(line) if isinstance(line, str) else line)
    return out


def _subsample(items, cap, seed, salt):
    if cap is None or len(items) <= cap:
        return items
    rng = np.random.default_rng([seed, salt])
    picks = sorted(rng.choice(len(items), size=cap, replace=False))
    return [items[i] for i in picks]
