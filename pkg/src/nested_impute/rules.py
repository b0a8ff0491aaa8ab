"""Declarative structural-zero rules over households.

Four rule templates cover within-household edit constraints:

* ``CountRule`` -- the number of individuals whose variable falls in a level
  set must lie in [min, max] (e.g. exactly one head).
* ``AttrBoundRule`` -- every selected individual's ordinal variable lies in
  [min, max]; an optional presence guard restricts the rule to households
  containing some other role (e.g. the head must be at least 31 when a
  grandchild is present).
* ``PairDiffRule`` -- an ordinal difference constraint between each pair of
  individuals matching two roles (e.g. head at least 7 years older than each
  biological child).
* ``ValuePairRule`` -- forbidden value combinations between two roles
  (e.g. spouse gender must differ from head gender).

Rules are written against level labels and compiled against a schema into a
flat numeric form shared by the pure-python evaluator below and the compiled
kernel.  Compiling against a head-moved schema re-expresses head roles
against the ``*_of_HH`` household columns; count rules that only restrict
the head level itself become structural after the transform and are dropped
(the compile reports them as eliminated).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .schema import DatasetSchema, Household, MISSING

INT32_MAX = np.iinfo(np.int32).max

# compiled rule kinds
K_COUNT = 0
K_BOUND_IND = 1
K_BOUND_HH = 2
K_PAIR_II = 3
K_PAIR_HI = 4
K_VP_II = 5
K_VP_HI = 6

# comparison opcodes for pair rules
OPS = {"<=": 0, ">=": 1, "<": 2, ">": 3}
OP_NAMES = {v: k for k, v in OPS.items()}

CODES_WIDTH = 12


class RuleError(ValueError):
    """Raised for unparseable or uncompilable rules."""


class FeasibilityUndefinedError(ValueError):
    """Raised when feasibility is evaluated on a household with missing cells."""


@dataclass(frozen=True)
class Head:
    """Role marker for the household head."""

    def describe(self) -> str:
        return "head"


@dataclass(frozen=True)
class Selector:
    """Role marker: individuals whose ``var`` lies in ``levels``."""

    var: str
    levels: frozenset[str]

    def describe(self) -> str:
        return f"sel({self.var} in {{{','.join(sorted(self.levels))}}})"


Role = Union[Head, Selector]


@dataclass(frozen=True)
class CountRule:
    var: str
    levels: frozenset[str]
    min: int
    max: int  # use a large sentinel for "no upper bound"

    def describe(self) -> str:
        return f"count {self.var} in {{{','.join(sorted(self.levels))}}} in [{self.min},{self.max}]"


@dataclass(frozen=True)
class AttrBoundRule:
    role: Role
    var: str
    min: int | None  # ordinal units (level code - 1)
    max: int | None
    if_present: Selector | None = None

    def describe(self) -> str:
        guard = f" if {self.if_present.describe()}" if self.if_present else ""
        return f"bound {self.role.describe()}.{self.var} in [{self.min},{self.max}]{guard}"


@dataclass(frozen=True)
class PairDiffRule:
    role_a: Role
    role_b: Selector
    var: str
    op: str  # one of <=, >=, <, >
    offset: int

    def describe(self) -> str:
        return (
            f"pairdiff {self.role_a.describe()}.{self.var} {self.op} "
            f"{self.role_b.describe()}.{self.var} + {self.offset}"
        )


@dataclass(frozen=True)
class ValuePairRule:
    role_a: Role
    var_a: str
    role_b: Selector
    var_b: str
    forbidden: frozenset[tuple[str, str]]

    def describe(self) -> str:
        return (
            f"valuepair {self.role_a.describe()}.{self.var_a} ~ "
            f"{self.role_b.describe()}.{self.var_b} ({len(self.forbidden)} forbidden)"
        )


RuleTemplate = Union[CountRule, AttrBoundRule, PairDiffRule, ValuePairRule]


# ---------------------------------------------------------------------------
# Rule file parsing
# ---------------------------------------------------------------------------

_SEL_RE = re.compile(r"^sel\(\s*(\w+)\s+in\s+\{([^}]*)\}\s*\)$")
_GUARD_RE = re.compile(r"^if_present\(\s*(\w+)\s+in\s+\{([^}]*)\}\s*\)\s+")
_TARGET_RE = re.compile(r"^(head|sel\([^)]*\))\.(\w+)$")


def parse_levelset(text: str) -> frozenset[str]:
    labels = frozenset(tok.strip() for tok in text.split(",") if tok.strip())
    if not labels:
        raise RuleError("empty level set")
    return labels


def parse_selector(text: str) -> Selector:
    m = _SEL_RE.match(text.strip())
    if not m:
        raise RuleError(f"bad selector {text!r}")
    return Selector(m.group(1), parse_levelset(m.group(2)))


def _parse_target(text: str) -> tuple[Role, str]:
    m = _TARGET_RE.match(text.strip())
    if not m:
        raise RuleError(f"bad role reference {text!r}")
    role_text, var = m.groups()
    role: Role = Head() if role_text == "head" else parse_selector(role_text)
    return role, var


def _split_cmp(text: str) -> tuple[str, str, str]:
    for op in ("<=", ">=", "<", ">"):
        if op in text:
            left, right = text.split(op, 1)
            return left.strip(), op, right.strip()
    raise RuleError(f"no comparison operator in {text!r}")


def parse_rule_line(line: str) -> RuleTemplate:
    line = line.strip()
    keyword, _, rest = line.partition(" ")
    rest = rest.strip()
    if keyword == "count":
        m = re.match(r"^(\w+)\s+\{([^}]*)\}\s+min=(\d+)\s+max=(\d+|inf)$", rest)
        if not m:
            raise RuleError(f"bad count rule {line!r}")
        var, levels, lo, hi = m.groups()
        return CountRule(
            var, parse_levelset(levels), int(lo),
            INT32_MAX if hi == "inf" else int(hi),
        )
    if keyword == "bound":
        guard = None
        g = _GUARD_RE.match(rest)
        if g:
            guard = Selector(g.group(1), parse_levelset(g.group(2)))
            rest = rest[g.end():]
        left, op, right = _split_cmp(rest)
        role, var = _parse_target(left)
        try:
            value = int(right)
        except ValueError:
            raise RuleError(f"bound rule needs an integer limit: {line!r}") from None
        if op == ">=":
            lo, hi = value, None
        elif op == ">":
            lo, hi = value + 1, None
        elif op == "<=":
            lo, hi = None, value
        else:
            lo, hi = None, value - 1
        return AttrBoundRule(role, var, lo, hi, if_present=guard)
    if keyword == "pairdiff":
        left, op, right = _split_cmp(rest)
        role_a, var_a = _parse_target(left)
        offset = 0
        m = re.match(r"^(.*?)\s*([+-])\s*(\d+)$", right)
        if m:
            right, sign, mag = m.groups()
            offset = int(mag) if sign == "+" else -int(mag)
        role_b, var_b = _parse_target(right)
        if var_a != var_b:
            raise RuleError(f"pairdiff compares one variable on both sides: {line!r}")
        if isinstance(role_b, Head):
            raise RuleError(f"pairdiff right-hand role must be a selector: {line!r}")
        return PairDiffRule(role_a, role_b, var_a, op, offset)
    if keyword == "valuepair":
        m = re.match(r"^(.*?)\s*(!=|==)\s*(.+)$", rest)
        forbid_pairs = None
        if not m:
            m2 = re.match(r"^(.+?)\s*~\s*(.+?)\s+forbid\s+\{(.*)\}$", rest)
            if not m2:
                raise RuleError(f"bad valuepair rule {line!r}")
            left, right, pairs_text = m2.groups()
            forbid_pairs = frozenset(
                tuple(p.strip() for p in pair.strip("() ").split(","))
                for pair in pairs_text.split(";")
                if pair.strip()
            )
            mode = "explicit"
        else:
            left, mode, right = m.groups()
        role_a, var_a = _parse_target(left)
        role_b, var_b = _parse_target(right)
        if isinstance(role_b, Head):
            raise RuleError(f"valuepair right-hand role must be a selector: {line!r}")
        if mode == "explicit":
            return ValuePairRule(role_a, var_a, role_b, var_b, forbid_pairs)
        # label-based sugar; resolved to concrete pairs at compile time
        return ValuePairRule(role_a, var_a, role_b, var_b, frozenset({("__" + mode, "")}))
    raise RuleError(f"unknown rule keyword {keyword!r}")


def parse_rules(text: str) -> list[tuple[str, RuleTemplate]]:
    """Parse a rule file; returns (source line, template) pairs."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append((line, parse_rule_line(line)))
        except RuleError as e:
            raise RuleError(f"rule line {lineno}: {e}") from None
    return out


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------

@dataclass
class CompiledRules:
    """Flat numeric rule encoding shared by both evaluator backends."""

    codes: np.ndarray   # (R, CODES_WIDTH) int32
    tables: np.ndarray  # uint8 membership / forbidden-pair storage

    @property
    def n_rules(self) -> int:
        return self.codes.shape[0]

    def count_rules_only(self) -> bool:
        return bool((self.codes[:, 0] == K_COUNT).all())


class _TableBuilder:
    def __init__(self):
        self.chunks: list[np.ndarray] = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> int:
        off = self.offset
        self.chunks.append(arr.astype(np.uint8))
        self.offset += arr.size
        return off

    def membership(self, var, levels: Iterable[str]) -> int:
        table = np.zeros(var.cardinality, dtype=np.uint8)
        for label in levels:
            table[var.code(label) - 1] = 1
        return self.add(table)

    def build(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros(1, dtype=np.uint8)
        return np.concatenate(self.chunks)


class RuleSet:
    """Compiled structural-zero rules bound to one schema.

    ``eliminated`` lists (source, reason) for rules removed by head-moved
    compilation; ``reexpressed`` lists head-alone bounds that were kept but
    re-expressed against household columns.  Instances are immutable after
    construction and safe to share across threads.
    """

    def __init__(self, templates, schema: DatasetSchema, sources=None):
        self.schema = schema
        self.head_moved = schema.head_moved
        self.templates: tuple[RuleTemplate, ...] = tuple(templates)
        self.sources = tuple(sources) if sources is not None else tuple(
            t.describe() for t in self.templates
        )
        self.eliminated: list[tuple[str, str]] = []
        self.reexpressed: list[tuple[str, str]] = []
        self.compiled = self._compile()

    # -- constructors --------------------------------------------------

    @classmethod
    def from_text(cls, text: str, schema: DatasetSchema) -> "RuleSet":
        pairs = parse_rules(text)
        return cls([t for _, t in pairs], schema, sources=[s for s, _ in pairs])

    @classmethod
    def from_file(cls, path, schema: DatasetSchema) -> "RuleSet":
        with open(path) as f:
            return cls.from_text(f.read(), schema)

    @classmethod
    def empty(cls, schema: DatasetSchema) -> "RuleSet":
        return cls([], schema)

    # -- compilation -----------------------------------------------------

    def _head_as_selector(self) -> Selector:
        s = self.schema
        if not s.relationship_var or not s.head_level:
            raise RuleError("head roles need relationship= and head= in the schema")
        return Selector(s.relationship_var, frozenset({s.head_level}))

    def _is_head_selector(self, role: Role) -> bool:
        s = self.schema
        return (
            isinstance(role, Head)
            or (
                s.relationship_var is not None
                and s.head_level is not None
                and isinstance(role, Selector)
                and role.var == s.relationship_var
                and role.levels == frozenset({s.head_level})
            )
        )

    def _head_column(self, var_name: str) -> int:
        s = self.schema
        mapped = s.head_var_map.get(var_name)
        if mapped is None:
            raise RuleError(
                f"no household-level copy of {var_name!r}; cannot express head rule "
                "after the head-move transform"
            )
        return s.hh_var_index(mapped)

    def _selector_parts(self, sel: Selector, tb: _TableBuilder) -> tuple[int, int]:
        s = self.schema
        var = s.var(sel.var)
        if var.scope != "individual":
            raise RuleError(f"selector variable {sel.var!r} must be individual-level")
        levels = set(sel.levels)
        if s.head_moved and sel.var == s.relationship_var and s.head_level in levels:
            raise RuleError(
                f"selector over {sel.var!r} references the head level after the "
                "head-move transform; use a head role instead"
            )
        return s.ind_var_index(sel.var), tb.membership(var, levels)

    def _ordinal_var(self, name: str):
        var = self.schema.var(name)
        if not var.ordinal:
            raise RuleError(f"variable {name!r} is not ordinal; bound/pairdiff need ordinal vars")
        return var

    def _compile(self) -> CompiledRules:
        s = self.schema
        tb = _TableBuilder()
        rows: list[list[int]] = []

        def emit(vals: list[int]):
            row = vals + [0] * (CODES_WIDTH - len(vals))
            rows.append(row)

        for source, t in zip(self.sources, self.templates):
            if isinstance(t, CountRule):
                var = s.var(t.var)
                if var.scope != "individual":
                    raise RuleError(f"count rule variable {t.var!r} must be individual-level")
                levels = set(t.levels)
                if s.head_moved and t.var == s.relationship_var and s.head_level in levels:
                    levels.discard(s.head_level)
                    if not levels:
                        self.eliminated.append(
                            (source, "head uniqueness is structural after the head-move transform")
                        )
                        continue
                    self.reexpressed.append((source, "head level dropped from count level set"))
                if t.min > t.max:
                    raise RuleError(f"count rule has min > max: {source}")
                emit([K_COUNT, s.ind_var_index(t.var), tb.membership(var, levels),
                      t.min, min(t.max, INT32_MAX)])
            elif isinstance(t, AttrBoundRule):
                var = self._ordinal_var(t.var)
                lo = 1 if t.min is None else t.min + 1
                hi = var.cardinality if t.max is None else t.max + 1
                gvar, gtoff = -1, 0
                if t.if_present is not None:
                    gvar, gtoff = self._selector_parts(t.if_present, tb)
                if self._is_head_selector(t.role) and s.head_moved:
                    col = self._head_column(t.var)
                    self.reexpressed.append(
                        (source, "head bound re-expressed on the household-level copy")
                    )
                    emit([K_BOUND_HH, col, lo, hi, gvar, gtoff])
                else:
                    role = self._head_as_selector() if isinstance(t.role, Head) else t.role
                    selvar, seltoff = self._selector_parts(role, tb)
                    emit([K_BOUND_IND, selvar, seltoff, s.ind_var_index(t.var),
                          lo, hi, gvar, gtoff])
            elif isinstance(t, PairDiffRule):
                self._ordinal_var(t.var)
                if t.op not in OPS:
                    raise RuleError(f"bad pairdiff operator {t.op!r}")
                bselvar, bseltoff = self._selector_parts(t.role_b, tb)
                bvar = s.ind_var_index(t.var)
                if self._is_head_selector(t.role_a) and s.head_moved:
                    acol = self._head_column(t.var)
                    emit([K_PAIR_HI, acol, bselvar, bseltoff, bvar, OPS[t.op], t.offset])
                else:
                    role_a = self._head_as_selector() if isinstance(t.role_a, Head) else t.role_a
                    aselvar, aseltoff = self._selector_parts(role_a, tb)
                    emit([K_PAIR_II, aselvar, aseltoff, bselvar, bseltoff,
                          bvar, OPS[t.op], t.offset])
            elif isinstance(t, ValuePairRule):
                var_a = s.var(t.var_a)
                var_b = s.var(t.var_b)
                forbidden = self._resolve_forbidden(t, var_a, var_b)
                da, db = var_a.cardinality, var_b.cardinality
                table = np.zeros(da * db, dtype=np.uint8)
                for la, lb in forbidden:
                    table[(var_a.code(la) - 1) * db + (var_b.code(lb) - 1)] = 1
                ftoff = tb.add(table)
                bselvar, bseltoff = self._selector_parts(t.role_b, tb)
                bvar = s.ind_var_index(t.var_b)
                if self._is_head_selector(t.role_a) and s.head_moved:
                    acol = self._head_column(t.var_a)
                    emit([K_VP_HI, acol, bselvar, bseltoff, bvar, ftoff, db])
                else:
                    role_a = self._head_as_selector() if isinstance(t.role_a, Head) else t.role_a
                    aselvar, aseltoff = self._selector_parts(role_a, tb)
                    avar = s.ind_var_index(t.var_a)
                    emit([K_VP_II, aselvar, aseltoff, avar, bselvar, bseltoff,
                          bvar, ftoff, db])
            else:
                raise RuleError(f"unknown template {t!r}")

        codes = (
            np.array(rows, dtype=np.int32)
            if rows
            else np.zeros((0, CODES_WIDTH), dtype=np.int32)
        )
        return CompiledRules(codes=codes, tables=tb.build())

    @staticmethod
    def _resolve_forbidden(t: ValuePairRule, var_a, var_b) -> set[tuple[str, str]]:
        marker = next(iter(t.forbidden)) if len(t.forbidden) == 1 else None
        if marker == ("__!=", ""):
            shared = set(var_a.levels) & set(var_b.levels)
            return {(l, l) for l in shared}
        if marker == ("__==", ""):
            return {
                (la, lb)
                for la in var_a.levels
                for lb in var_b.levels
                if la != lb
            }
        for la, lb in t.forbidden:
            var_a.code(la)
            var_b.code(lb)
        return set(t.forbidden)

    # -- evaluation --------------------------------------------------------

    def feasible_mask(self, hh: np.ndarray, ind: np.ndarray) -> np.ndarray:
        """Vector of feasibility verdicts for complete (hh, ind) code arrays."""
        from . import _backend

        return _backend.feasible_mask(self.compiled, hh, ind)

    def is_feasible(self, household: Household) -> bool:
        s = self.schema
        if any(v == MISSING for v in household.household_values) or any(
            v == MISSING for row in household.individuals for v in row
        ):
            raise FeasibilityUndefinedError(
                f"household {household.id} has missing cells; feasibility is undefined"
            )
        hh = np.array([household.household_values], dtype=np.int32)
        m = s.stored_individuals(household.size)
        ind = np.array([household.individuals], dtype=np.int32).reshape(1, m, s.p)
        return bool(self.feasible_mask(hh, ind)[0])


def is_feasible(household: Household, ruleset: RuleSet) -> bool:
    return ruleset.is_feasible(household)


def feasible_mask_py(compiled: CompiledRules, hh: np.ndarray, ind: np.ndarray) -> np.ndarray:
    """Reference evaluator over batches; also the pure-python backend."""
    codes, tables = compiled.codes, compiled.tables
    B = hh.shape[0]
    m = ind.shape[1]
    ok = np.ones(B, dtype=bool)
    if B == 0:
        return ok
    for r in range(codes.shape[0]):
        row = codes[r]
        kind = row[0]
        if kind == K_COUNT:
            var, toff, cmin, cmax = row[1], row[2], row[3], row[4]
            if m == 0:
                cnt = np.zeros(B, dtype=np.int64)
            else:
                cnt = tables[toff + ind[:, :, var] - 1].astype(bool).sum(axis=1)
            ok &= (cnt >= cmin) & (cnt <= cmax)
        elif kind == K_BOUND_IND:
            selvar, seltoff, var, lo, hi, gvar, gtoff = row[1:8]
            if m == 0:
                continue
            sel = tables[seltoff + ind[:, :, selvar] - 1].astype(bool)
            vals = ind[:, :, var]
            viol = (sel & ((vals < lo) | (vals > hi))).any(axis=1)
            if gvar >= 0:
                viol &= tables[gtoff + ind[:, :, gvar] - 1].astype(bool).any(axis=1)
            ok &= ~viol
        elif kind == K_BOUND_HH:
            col, lo, hi, gvar, gtoff = row[1:6]
            vals = hh[:, col]
            viol = (vals < lo) | (vals > hi)
            if gvar >= 0:
                if m == 0:
                    viol = np.zeros(B, dtype=bool)
                else:
                    viol &= tables[gtoff + ind[:, :, gvar] - 1].astype(bool).any(axis=1)
            ok &= ~viol
        elif kind == K_PAIR_II:
            aselvar, aseltoff, bselvar, bseltoff, var, op, offset = row[1:8]
            if m == 0:
                continue
            sa = tables[aseltoff + ind[:, :, aselvar] - 1].astype(bool)
            sb = tables[bseltoff + ind[:, :, bselvar] - 1].astype(bool)
            vals = ind[:, :, var].astype(np.int64)
            diff = vals[:, :, None] - vals[:, None, :]
            pairs = sa[:, :, None] & sb[:, None, :] & ~np.eye(m, dtype=bool)
            viol = (pairs & ~_cmp(diff, op, offset)).any(axis=(1, 2))
            ok &= ~viol
        elif kind == K_PAIR_HI:
            acol, bselvar, bseltoff, bvar, op, offset = row[1:7]
            if m == 0:
                continue
            sb = tables[bseltoff + ind[:, :, bselvar] - 1].astype(bool)
            diff = hh[:, acol].astype(np.int64)[:, None] - ind[:, :, bvar]
            viol = (sb & ~_cmp(diff, op, offset)).any(axis=1)
            ok &= ~viol
        elif kind == K_VP_II:
            aselvar, aseltoff, avar, bselvar, bseltoff, bvar, ftoff, db = row[1:9]
            if m == 0:
                continue
            sa = tables[aseltoff + ind[:, :, aselvar] - 1].astype(bool)
            sb = tables[bseltoff + ind[:, :, bselvar] - 1].astype(bool)
            av = ind[:, :, avar].astype(np.int64)
            bv = ind[:, :, bvar].astype(np.int64)
            bad = tables[
                ftoff + (av[:, :, None] - 1) * db + (bv[:, None, :] - 1)
            ].astype(bool)
            pairs = sa[:, :, None] & sb[:, None, :] & ~np.eye(m, dtype=bool)
            ok &= ~(pairs & bad).any(axis=(1, 2))
        elif kind == K_VP_HI:
            acol, bselvar, bseltoff, bvar, ftoff, db = row[1:7]
            if m == 0:
                continue
            sb = tables[bseltoff + ind[:, :, bselvar] - 1].astype(bool)
            av = hh[:, acol].astype(np.int64)
            bv = ind[:, :, bvar].astype(np.int64)
            bad = tables[ftoff + (av[:, None] - 1) * db + (bv - 1)].astype(bool)
            ok &= ~(sb & bad).any(axis=1)
        else:  # pragma: no cover
            raise RuleError(f"bad compiled rule kind {kind}")
    return ok


def _cmp(diff, op, offset):
    if op == 0:
        return diff <= offset
    if op == 1:
        return diff >= offset
    if op == 2:
        return diff < offset
    return diff > offset


# ---------------------------------------------------------------------------
# Combination counting and enumeration
# ---------------------------------------------------------------------------

def count_combinations(schema: DatasetSchema, h: int) -> int:
    """Number of value combinations for households of size h.

    The household-size variable is pinned to h within a size stratum and
    contributes a factor of one.  Exact (python integer) arithmetic.
    """
    m = schema.stored_individuals(h)
    out = 1
    for i, v in enumerate(schema.household_vars):
        if i != schema.size_index:
            out *= v.cardinality
    per_individual = 1
    for v in schema.individual_vars:
        per_individual *= v.cardinality
    return out * per_individual ** m


def _count_rule_closed_form(schema: DatasetSchema, compiled: CompiledRules, h: int) -> int:
    """Feasible-combination count for count-rule-only sets, by dynamic
    programming over individuals.  Exact big-integer arithmetic."""
    m = schema.stored_individuals(h)
    specs = []
    for r in range(compiled.n_rules):
        row = compiled.codes[r]
        var, toff = int(row[1]), int(row[2])
        d = int(schema.ind_card[var])
        member = compiled.tables[toff:toff + d].astype(bool)
        specs.append((var, member, int(row[3]), min(int(row[4]), m)))

    # per-individual signature histogram: signature = hit-bit per rule
    used_vars = sorted({var for var, _, _, _ in specs})
    combos: dict[tuple[int, ...], int] = {(0,) * len(specs): 1}
    for v in used_vars:
        rule_idx = [i for i, (var, _, _, _) in enumerate(specs) if var == v]
        hist: dict[tuple[int, ...], int] = {}
        for c in range(int(schema.ind_card[v])):
            bits = tuple(1 if specs[i][1][c] else 0 for i in rule_idx)
            hist[bits] = hist.get(bits, 0) + 1
        new: dict[tuple[int, ...], int] = {}
        for sig, cnt in combos.items():
            for bits, c2 in hist.items():
                merged = list(sig)
                for pos, i in enumerate(rule_idx):
                    merged[i] = bits[pos]
                key = tuple(merged)
                new[key] = new.get(key, 0) + cnt * c2
        combos = new
    unused = 1
    for k in range(schema.p):
        if k not in used_vars:
            unused *= int(schema.ind_card[k])
    combos = {sig: cnt * unused for sig, cnt in combos.items()}

    caps = [cmax + 1 for _, _, _, cmax in specs]
    dp: dict[tuple[int, ...], int] = {(0,) * len(specs): 1}
    for _ in range(m):
        new_dp: dict[tuple[int, ...], int] = {}
        for state, ways in dp.items():
            for sig, cnt in combos.items():
                ns = tuple(
                    min(s + b, cap) for s, b, cap in zip(state, sig, caps)
                )
                new_dp[ns] = new_dp.get(ns, 0) + ways * cnt
        dp = new_dp
    feasible = 0
    for state, ways in dp.items():
        if all(
            spec[2] <= s <= spec[3] for s, spec in zip(state, specs)
        ):
            feasible += ways
    hh_factor = 1
    for i, v in enumerate(schema.household_vars):
        if i != schema.size_index:
            hh_factor *= v.cardinality
    return feasible * hh_factor


def combination_batches(schema: DatasetSchema, h: int, batch: int = 1 << 16):
    """Yield (hh, ind) code-array batches covering every combination once."""
    m = schema.stored_individuals(h)
    total = count_combinations(schema, h)
    cards = []
    slots = []  # ("hh", k) or ("ind", j, k)
    for k in range(schema.q):
        if k != schema.size_index:
            cards.append(int(schema.hh_card[k]))
            slots.append(("hh", k))
    for j in range(m):
        for k in range(schema.p):
            cards.append(int(schema.ind_card[k]))
            slots.append(("ind", j, k))
    places = np.ones(len(cards), dtype=np.int64)
    for i in range(len(cards) - 2, -1, -1):
        places[i] = places[i + 1] * cards[i + 1]
    size_code = schema.size_code(h)
    for start in range(0, total, batch):
        stop = min(start + batch, total)
        idx = np.arange(start, stop, dtype=np.int64)
        B = idx.size
        hh = np.empty((B, schema.q), dtype=np.int32)
        hh[:, schema.size_index] = size_code
        ind = np.empty((B, m, schema.p), dtype=np.int32)
        for slot, card, place in zip(slots, cards, places):
            vals = ((idx // place) % card + 1).astype(np.int32)
            if slot[0] == "hh":
                hh[:, slot[1]] = vals
            else:
                ind[:, slot[1], slot[2]] = vals
        yield hh, ind


ENUMERATION_GUARD = 10 ** 8
FEASIBLE_STREAM_GUARD = 10 ** 6


def count_structural_zeros(
    schema: DatasetSchema,
    ruleset: RuleSet,
    h: int,
    enumeration_guard: int = ENUMERATION_GUARD,
) -> int:
    """Number of infeasible combinations for size h.

    Uses an exact closed form when every compiled rule is a count rule,
    otherwise exhaustively enumerates the combination space (guarded).
    """
    total = count_combinations(schema, h)
    if ruleset.compiled.n_rules == 0:
        return 0
    if ruleset.compiled.count_rules_only():
        return total - _count_rule_closed_form(schema, ruleset.compiled, h)
    if total > enumeration_guard:
        raise RuleError(
            f"combination space for size {h} has {total} members; too large to "
            "enumerate and no closed form applies"
        )
    infeasible = 0
    for hh, ind in combination_batches(schema, h):
        feas = ruleset.feasible_mask(hh, ind)
        infeasible += int((~feas).sum())
    return infeasible


def feasible_arrays(
    schema: DatasetSchema,
    ruleset: RuleSet,
    h: int,
    guard: int = FEASIBLE_STREAM_GUARD,
) -> tuple[np.ndarray, np.ndarray]:
    """All feasible combinations for size h as (hh, ind) code arrays."""
    total = count_combinations(schema, h)
    if total > guard:
        raise RuleError(
            f"combination space for size {h} has {total} members; above the "
            f"enumeration guard {guard}"
        )
    hh_parts, ind_parts = [], []
    for hh, ind in combination_batches(schema, h):
        feas = ruleset.feasible_mask(hh, ind)
        hh_parts.append(hh[feas])
        ind_parts.append(ind[feas])
    return np.concatenate(hh_parts), np.concatenate(ind_parts)


def enumerate_feasible(
    schema: DatasetSchema,
    ruleset: RuleSet,
    h: int,
    guard: int = FEASIBLE_STREAM_GUARD,
):
    """Yield each feasible household of size h exactly once."""
    hh_all, ind_all = feasible_arrays(schema, ruleset, h, guard)
    for i in range(hh_all.shape[0]):
        yield Household(
            id=f"c{i}",
            size=h,
            household_values=tuple(int(v) for v in hh_all[i]),
            individuals=tuple(tuple(int(v) for v in row) for row in ind_all[i]),
        )
