"""Nested categorical data model: variables, households, masks, ingestion.

A dataset is a collection of households.  Each household carries one value
per household-level variable and one value per individual-level variable
for each of its members.  Values are stored internally as 1-based level
codes; code 0 marks a missing cell, which is always accompanied by a mask
bit.  External files use level labels and the literal token ``NA``.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

MISSING = 0
NA_TOKEN = "NA"
SIZE_VAR = "household_size"
HEAD_SUFFIX = "_of_HH"


class SchemaError(ValueError):
    """Raised for malformed or inconsistent schema declarations."""


class DataError(ValueError):
    """Raised for data rows that do not conform to the schema."""


class TransformError(ValueError):
    """Raised when the head-to-household transform cannot be applied."""


@dataclass(frozen=True)
class VariableSpec:
    """A categorical variable with ordered level labels.

    ``ordinal`` marks variables whose levels are evenly spaced ordered
    quantities (ages).  The ordinal value of level code c is c - 1, so a
    variable with levels "0".."95" maps code 1 to age 0.
    """

    name: str
    scope: str  # "household" | "individual"
    levels: tuple[str, ...]
    ordinal: bool = False

    def __post_init__(self):
        if self.scope not in ("household", "individual"):
            raise SchemaError(f"variable {self.name}: bad scope {self.scope!r}")
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"variable {self.name}: duplicate level labels")
        min_levels = 1 if self.name == SIZE_VAR else 2
        if len(self.levels) < min_levels:
            raise SchemaError(
                f"variable {self.name}: needs at least {min_levels} levels"
            )

    @property
    def cardinality(self) -> int:
        return len(self.levels)

    def code(self, label: str) -> int:
        """1-based code for a level label."""
        try:
            return self.levels.index(label) + 1
        except ValueError:
            raise SchemaError(
                f"unknown level {label!r} for variable {self.name}"
            ) from None


@dataclass(frozen=True)
class DatasetSchema:
    """Variable declarations plus household-size and head configuration.

    ``head_moved`` marks schemas produced by :func:`head_to_household_transform`
    (or declared as such in a schema file): each household then stores
    ``size - 1`` individual rows, the head's attributes living in the
    ``*_of_HH`` household variables.  ``parent`` retains the pre-transform
    schema so the transform can be inverted.
    """

    household_vars: tuple[VariableSpec, ...]
    individual_vars: tuple[VariableSpec, ...]
    household_sizes: tuple[int, ...]
    relationship_var: str | None = None
    head_level: str | None = None
    head_moved: bool = False
    parent: "DatasetSchema | None" = None

    def __post_init__(self):
        if not self.household_sizes:
            raise SchemaError("household_sizes must be nonempty")
        if any(h < 1 for h in self.household_sizes):
            raise SchemaError("household sizes must be >= 1")
        if tuple(sorted(set(self.household_sizes))) != self.household_sizes:
            raise SchemaError("household_sizes must be sorted and unique")
        names = [v.name for v in self.household_vars + self.individual_vars]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate variable names")
        for v in self.household_vars:
            if v.scope != "household":
                raise SchemaError(f"{v.name} listed as household var with scope {v.scope}")
        for v in self.individual_vars:
            if v.scope != "individual":
                raise SchemaError(f"{v.name} listed as individual var with scope {v.scope}")
        size_vars = [v for v in self.household_vars if v.name == SIZE_VAR]
        if len(size_vars) != 1:
            raise SchemaError(f"exactly one household variable must be named {SIZE_VAR}")
        want = tuple(str(h) for h in self.household_sizes)
        if size_vars[0].levels != want:
            raise SchemaError(
                f"{SIZE_VAR} levels {size_vars[0].levels} must match sizes {want}"
            )
        if self.relationship_var is not None:
            rel = self.var(self.relationship_var)
            if rel.scope != "individual":
                raise SchemaError("relationship variable must be individual-level")
            if self.head_level is not None and not self.head_moved:
                rel.code(self.head_level)  # validates the label

    # -- layout ----------------------------------------------------------

    @property
    def q(self) -> int:
        return len(self.household_vars)

    @property
    def p(self) -> int:
        return len(self.individual_vars)

    @cached_property
    def size_index(self) -> int:
        return [v.name for v in self.household_vars].index(SIZE_VAR)

    @cached_property
    def hh_card(self) -> np.ndarray:
        return np.array([v.cardinality for v in self.household_vars], dtype=np.int32)

    @cached_property
    def ind_card(self) -> np.ndarray:
        return np.array([v.cardinality for v in self.individual_vars], dtype=np.int32)

    @cached_property
    def hh_offsets(self) -> np.ndarray:
        """Cumulative offsets of household-variable blocks in concatenated arrays."""
        return np.concatenate([[0], np.cumsum(self.hh_card)]).astype(np.int32)

    @cached_property
    def ind_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.ind_card)]).astype(np.int32)

    @cached_property
    def _hh_index(self) -> dict[str, int]:
        return {v.name: i for i, v in enumerate(self.household_vars)}

    @cached_property
    def _ind_index(self) -> dict[str, int]:
        return {v.name: i for i, v in enumerate(self.individual_vars)}

    def var(self, name: str) -> VariableSpec:
        if name in self._hh_index:
            return self.household_vars[self._hh_index[name]]
        if name in self._ind_index:
            return self.individual_vars[self._ind_index[name]]
        raise SchemaError(f"unknown variable {name!r}")

    def has_var(self, name: str) -> bool:
        return name in self._hh_index or name in self._ind_index

    def hh_var_index(self, name: str) -> int:
        if name not in self._hh_index:
            raise SchemaError(f"unknown household variable {name!r}")
        return self._hh_index[name]

    def ind_var_index(self, name: str) -> int:
        if name not in self._ind_index:
            raise SchemaError(f"unknown individual variable {name!r}")
        return self._ind_index[name]

    def stored_individuals(self, h: int) -> int:
        """Individual rows stored for a household of size h."""
        return h - 1 if self.head_moved else h

    def size_code(self, h: int) -> int:
        if h not in self.household_sizes:
            raise SchemaError(f"size {h} not in allowed sizes {self.household_sizes}")
        return self.household_sizes.index(h) + 1

    @cached_property
    def head_var_map(self) -> dict[str, str]:
        """Individual-variable name -> moved household-variable name.

        Derived by the ``*_of_HH`` naming convention so that schemas loaded
        from files in transformed layout still expose the mapping.
        """
        if not self.head_moved:
            return {}
        out = {}
        for v in self.individual_vars:
            moved = v.name + HEAD_SUFFIX
            if moved in self._hh_index:
                out[v.name] = moved
        return out


@dataclass(frozen=True)
class Household:
    """One household's values as 1-based level codes (0 = missing)."""

    id: str
    size: int
    household_values: tuple[int, ...]
    individuals: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class MissingnessMask:
    """Mask bits aligned with a household's values (1 = missing)."""

    household_mask: tuple[int, ...]
    individual_masks: tuple[tuple[int, ...], ...]

    def any(self) -> bool:
        return any(self.household_mask) or any(
            any(row) for row in self.individual_masks
        )

    def count(self) -> int:
        return sum(self.household_mask) + sum(sum(r) for r in self.individual_masks)


@dataclass
class SizeGroup:
    """Array view of all households of one size.

    hh: (n, q) int32, ind: (n, m, p) int32 where m is the stored individual
    count for this size; masks are boolean arrays of the same shapes.
    ``positions`` are indices into the owning dataset's household list.
    """

    size: int
    ids: tuple[str, ...]
    hh: np.ndarray
    ind: np.ndarray
    hh_mask: np.ndarray
    ind_mask: np.ndarray
    positions: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.hh.shape[0]


class Dataset:
    """An immutable collection of households with missingness masks."""

    def __init__(
        self,
        schema: DatasetSchema,
        households: Sequence[tuple[Household, MissingnessMask]],
        head_positions: dict[str, int] | None = None,
    ):
        self.schema = schema
        self.households = tuple(households)
        self.head_positions = head_positions
        self._validate()

    def _validate(self):
        s = self.schema
        seen = set()
        for hh, mask in self.households:
            if hh.id in seen:
                raise DataError(f"duplicate household id {hh.id!r}")
            seen.add(hh.id)
            if hh.size not in s.household_sizes:
                raise DataError(f"household {hh.id}: size {hh.size} outside allowed sizes")
            m = s.stored_individuals(hh.size)
            if len(hh.individuals) != m:
                raise DataError(
                    f"household {hh.id}: expected {m} individual rows, got {len(hh.individuals)}"
                )
            if len(hh.household_values) != s.q or len(mask.household_mask) != s.q:
                raise DataError(f"household {hh.id}: household vector length mismatch")
            if mask.household_mask[s.size_index]:
                raise DataError(f"household {hh.id}: {SIZE_VAR} may not be missing")
            if hh.household_values[s.size_index] != s.size_code(hh.size):
                raise DataError(f"household {hh.id}: {SIZE_VAR} value disagrees with size")
            for k, (val, miss) in enumerate(zip(hh.household_values, mask.household_mask)):
                self._check_cell(hh.id, s.household_vars[k], val, miss)
            if len(mask.individual_masks) != m:
                raise DataError(f"household {hh.id}: individual mask count mismatch")
            for row, mrow in zip(hh.individuals, mask.individual_masks):
                if len(row) != s.p or len(mrow) != s.p:
                    raise DataError(f"household {hh.id}: individual vector length mismatch")
                for k, (val, miss) in enumerate(zip(row, mrow)):
                    self._check_cell(hh.id, s.individual_vars[k], val, miss)

    @staticmethod
    def _check_cell(hid: str, var: VariableSpec, val: int, miss: int):
        if miss:
            if val != MISSING:
                raise DataError(f"household {hid}: masked cell of {var.name} has a value")
        elif not 1 <= val <= var.cardinality:
            raise DataError(
                f"household {hid}: value {val} out of range for {var.name}"
            )

    # -- counts ----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.households)

    @cached_property
    def N(self) -> int:
        return sum(hh.size for hh, _ in self.households)

    @cached_property
    def n_by_size(self) -> dict[int, int]:
        out = {h: 0 for h in self.schema.household_sizes}
        for hh, _ in self.households:
            out[hh.size] += 1
        return out

    def fully_observed(self) -> bool:
        return not any(mask.any() for _, mask in self.households)

    def missing_cells(self) -> int:
        return sum(mask.count() for _, mask in self.households)

    # -- grouped array view ------------------------------------------------

    @cached_property
    def _groups(self) -> dict[int, SizeGroup]:
        s = self.schema
        by_size: dict[int, list[int]] = {h: [] for h in s.household_sizes}
        for pos, (hh, _) in enumerate(self.households):
            by_size[hh.size].append(pos)
        out = {}
        for h, positions in by_size.items():
            m = s.stored_individuals(h)
            n = len(positions)
            hh_arr = np.zeros((n, s.q), dtype=np.int32)
            ind_arr = np.zeros((n, m, s.p), dtype=np.int32)
            hh_mask = np.zeros((n, s.q), dtype=bool)
            ind_mask = np.zeros((n, m, s.p), dtype=bool)
            ids = []
            for i, pos in enumerate(positions):
                rec, mask = self.households[pos]
                ids.append(rec.id)
                hh_arr[i] = rec.household_values
                hh_mask[i] = mask.household_mask
                if m:
                    ind_arr[i] = rec.individuals
                    ind_mask[i] = mask.individual_masks
            out[h] = SizeGroup(
                size=h, ids=tuple(ids), hh=hh_arr, ind=ind_arr,
                hh_mask=hh_mask, ind_mask=ind_mask, positions=tuple(positions),
            )
        return out

    def groups(self) -> dict[int, SizeGroup]:
        return self._groups

    def completed_with(self, values: dict[int, tuple[np.ndarray, np.ndarray]]) -> "Dataset":
        """New fully observed dataset with the given per-size value arrays."""
        s = self.schema
        records: list[tuple[Household, MissingnessMask] | None] = [None] * self.n
        for h, grp in self._groups.items():
            hh_arr, ind_arr = values[h]
            if hh_arr.shape != grp.hh.shape or ind_arr.shape != grp.ind.shape:
                raise ValueError(f"size-{h} replacement arrays have wrong shape")
            empty_mask = MissingnessMask(
                (0,) * s.q,
                tuple((0,) * s.p for _ in range(s.stored_individuals(h))),
            )
            for i, pos in enumerate(grp.positions):
                rec = Household(
                    id=grp.ids[i],
                    size=h,
                    household_values=tuple(int(v) for v in hh_arr[i]),
                    individuals=tuple(
                        tuple(int(v) for v in row) for row in ind_arr[i]
                    ),
                )
                records[pos] = (rec, empty_mask)
        return Dataset(s, records, head_positions=self.head_positions)


# ---------------------------------------------------------------------------
# Schema file parsing
# ---------------------------------------------------------------------------

def parse_levels(spec: str) -> tuple[str, ...]:
    """Parse a level list: comma separated labels or an integer range a..b."""
    spec = spec.strip()
    if ".." in spec and "," not in spec:
        lo_s, hi_s = spec.split("..", 1)
        lo, hi = int(lo_s), int(hi_s)
        if hi < lo:
            raise SchemaError(f"bad level range {spec!r}")
        return tuple(str(x) for x in range(lo, hi + 1))
    labels = tuple(tok.strip() for tok in spec.split(",") if tok.strip())
    if not labels:
        raise SchemaError("empty level list")
    return labels


def parse_schema(text: str) -> DatasetSchema:
    """Parse the line-oriented schema declaration format.

    Lines::

        var <name> scope=<household|individual> levels=<comma list|a..b> [ordinal]
        sizes=<comma list of integers>
        relationship=<variable name>
        head=<level label>
        head_moved=true
    """
    hh_vars: list[VariableSpec] = []
    ind_vars: list[VariableSpec] = []
    sizes: tuple[int, ...] | None = None
    relationship = None
    head = None
    head_moved = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith("var "):
                toks = line.split(None, 2)
                if len(toks) < 3:
                    raise SchemaError("var line needs a name and attributes")
                name = toks[1]
                attrs = toks[2]
                scope = None
                levels = None
                ordinal = False
                for tok in attrs.split():
                    if tok == "ordinal":
                        ordinal = True
                    elif tok.startswith("scope="):
                        scope = tok[len("scope="):]
                    elif tok.startswith("levels="):
                        levels = parse_levels(tok[len("levels="):])
                    else:
                        raise SchemaError(f"unknown attribute {tok!r}")
                if scope is None or levels is None:
                    raise SchemaError("var line needs scope= and levels=")
                v = VariableSpec(name, scope, levels, ordinal)
                (hh_vars if scope == "household" else ind_vars).append(v)
            elif line.startswith("sizes="):
                sizes = tuple(
                    sorted(int(tok) for tok in line[len("sizes="):].split(",") if tok.strip())
                )
            elif line.startswith("relationship="):
                relationship = line[len("relationship="):].strip()
            elif line.startswith("head="):
                head = line[len("head="):].strip()
            elif line.startswith("head_moved="):
                head_moved = line[len("head_moved="):].strip().lower() in ("true", "1", "yes")
            else:
                raise SchemaError(f"unrecognized line {line!r}")
        except SchemaError as e:
            raise SchemaError(f"schema line {lineno}: {e}") from None
    if sizes is None:
        raise SchemaError("schema must declare sizes=")
    return DatasetSchema(
        household_vars=tuple(hh_vars),
        individual_vars=tuple(ind_vars),
        household_sizes=sizes,
        relationship_var=relationship,
        head_level=head,
        head_moved=head_moved,
    )


def format_schema(schema: DatasetSchema) -> str:
    """Render a schema back to its file format."""
    lines = []
    for v in schema.household_vars + schema.individual_vars:
        levels = ",".join(v.levels)
        suffix = " ordinal" if v.ordinal else ""
        lines.append(f"var {v.name} scope={v.scope} levels={levels}{suffix}")
    lines.append("sizes=" + ",".join(str(h) for h in schema.household_sizes))
    if schema.relationship_var:
        lines.append(f"relationship={schema.relationship_var}")
    if schema.head_level and not schema.head_moved:
        lines.append(f"head={schema.head_level}")
    if schema.head_moved:
        lines.append("head_moved=true")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Data file loading / writing
# ---------------------------------------------------------------------------

def _read_text(source) -> str:
    if hasattr(source, "read"):
        return source.read()
    if isinstance(source, str) and ("\n" in source or "=" in source):
        if os.path.exists(source):
            with open(source) as f:
                return f.read()
        return source
    with open(source) as f:
        return f.read()


def load_dataset(schema_source, data_source) -> Dataset:
    """Load a dataset from schema text/path and a CSV row source.

    The CSV has a header ``hh_id,person_idx,<household vars...>,
    <individual vars...>`` with one row per stored individual (household
    columns repeated) and ``NA`` for missing cells.  ``person_idx`` 0 marks
    a household-only row for households that store no individuals.
    """
    if isinstance(schema_source, DatasetSchema):
        schema = schema_source
    else:
        schema = parse_schema(_read_text(schema_source))
    if hasattr(data_source, "read") or isinstance(data_source, str):
        text = _read_text(data_source)
        rows = csv.reader(io.StringIO(text))
    else:
        rows = iter(data_source)
    header = next(rows, None)
    if header is None:
        raise DataError("data source is empty")
    expected = (
        ["hh_id", "person_idx"]
        + [v.name for v in schema.household_vars]
        + [v.name for v in schema.individual_vars]
    )
    header = [c.strip() for c in header]
    if header != expected:
        raise DataError(f"bad header: expected {expected}, got {header}")

    q, p = schema.q, schema.p
    order: list[str] = []
    hh_rows: dict[str, tuple[list[int], list[int]]] = {}
    ind_rows: dict[str, list[tuple[int, list[int], list[int]]]] = {}
    for rownum, row in enumerate(rows, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(expected):
            raise DataError(f"row {rownum}: expected {len(expected)} columns")
        hid = row[0].strip()
        try:
            pidx = int(row[1])
        except ValueError:
            raise DataError(f"row {rownum}: bad person_idx {row[1]!r}") from None
        hh_part = row[2:2 + q]
        ind_part = row[2 + q:]
        vals, miss = _decode_cells(schema.household_vars, hh_part, rownum)
        if hid not in hh_rows:
            order.append(hid)
            hh_rows[hid] = (vals, miss)
            ind_rows[hid] = []
        elif (vals, miss) != hh_rows[hid]:
            raise DataError(
                f"row {rownum}: household columns disagree with earlier rows of {hid}"
            )
        if pidx == 0:
            if any(tok.strip() != NA_TOKEN for tok in ind_part):
                raise DataError(f"row {rownum}: person_idx 0 rows must have NA individuals")
            continue
        if any(pidx == seen for seen, _, _ in ind_rows[hid]):
            raise DataError(f"row {rownum}: duplicate household id/person {hid}/{pidx}")
        ivals, imiss = _decode_cells(schema.individual_vars, ind_part, rownum)
        ind_rows[hid].append((pidx, ivals, imiss))

    records = []
    for hid in order:
        hvals, hmiss = hh_rows[hid]
        size_cell = hvals[schema.size_index]
        if hmiss[schema.size_index] or size_cell == MISSING:
            raise DataError(f"household {hid}: missing {SIZE_VAR} value")
        size = schema.household_sizes[size_cell - 1]
        people = sorted(ind_rows[hid], key=lambda t: t[0])
        got = [pidx for pidx, _, _ in people]
        m = schema.stored_individuals(size)
        if got != list(range(1, m + 1)):
            raise DataError(
                f"household {hid}: person_idx values {got} do not match size {size}"
            )
        rec = Household(
            id=hid,
            size=size,
            household_values=tuple(hvals),
            individuals=tuple(tuple(iv) for _, iv, _ in people),
        )
        mask = MissingnessMask(
            household_mask=tuple(hmiss),
            individual_masks=tuple(tuple(im) for _, _, im in people),
        )
        records.append((rec, mask))
    return Dataset(schema, records)


def _decode_cells(variables, tokens, rownum):
    vals, miss = [], []
    for var, tok in zip(variables, tokens):
        tok = tok.strip()
        if tok == NA_TOKEN:
            vals.append(MISSING)
            miss.append(1)
        else:
            try:
                vals.append(var.code(tok))
            except SchemaError:
                raise DataError(
                    f"row {rownum}: unknown level {tok!r} for variable {var.name}"
                ) from None
            miss.append(0)
    return vals, miss


def write_dataset(dataset: Dataset, path_or_file) -> None:
    """Write a dataset in the long CSV format used by :func:`load_dataset`."""
    s = dataset.schema
    own = isinstance(path_or_file, (str, os.PathLike))
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f)
        w.writerow(
            ["hh_id", "person_idx"]
            + [v.name for v in s.household_vars]
            + [v.name for v in s.individual_vars]
        )
        for rec, mask in dataset.households:
            hh_cells = [
                NA_TOKEN if m else s.household_vars[k].levels[v - 1]
                for k, (v, m) in enumerate(zip(rec.household_values, mask.household_mask))
            ]
            if not rec.individuals:
                w.writerow([rec.id, 0] + hh_cells + [NA_TOKEN] * s.p)
                continue
            for j, (row, mrow) in enumerate(zip(rec.individuals, mask.individual_masks), 1):
                ind_cells = [
                    NA_TOKEN if m else s.individual_vars[k].levels[v - 1]
                    for k, (v, m) in enumerate(zip(row, mrow))
                ]
                w.writerow([rec.id, j] + hh_cells + ind_cells)
    finally:
        if own:
            f.close()


# ---------------------------------------------------------------------------
# Head-to-household transform
# ---------------------------------------------------------------------------

def transformed_schema(schema: DatasetSchema) -> DatasetSchema:
    """Schema produced by moving the head's attributes to household level."""
    if schema.head_moved:
        raise TransformError("schema is already in head-moved layout")
    if not schema.relationship_var or not schema.head_level:
        raise TransformError("transform requires relationship= and head= configuration")
    rel = schema.var(schema.relationship_var)
    rel.code(schema.head_level)  # validates the configured head label
    new_hh = list(schema.household_vars)
    for v in schema.individual_vars:
        if v.name == schema.relationship_var:
            continue
        moved = v.name + HEAD_SUFFIX
        if schema.has_var(moved):
            raise TransformError(f"variable name {moved!r} already taken")
        new_hh.append(VariableSpec(moved, "household", v.levels, v.ordinal))
    new_ind = []
    for v in schema.individual_vars:
        if v.name == schema.relationship_var:
            levels = tuple(l for l in v.levels if l != schema.head_level)
            new_ind.append(VariableSpec(v.name, "individual", levels, v.ordinal))
        else:
            new_ind.append(v)
    return DatasetSchema(
        household_vars=tuple(new_hh),
        individual_vars=tuple(new_ind),
        household_sizes=schema.household_sizes,
        relationship_var=schema.relationship_var,
        head_level=schema.head_level,
        head_moved=True,
        parent=schema,
    )


def head_to_household_transform(dataset: Dataset) -> Dataset:
    """Move each household head's attributes to household-level variables.

    The head is the unique individual whose relationship value equals the
    configured head level; it must be observed.  The head's row is removed,
    its other attributes become ``*_of_HH`` household variables (masks
    carried along), and the remaining individuals' relationship variable is
    recoded onto the reduced level set.
    """
    old = dataset.schema
    new_schema = transformed_schema(old)
    rel_idx = old.ind_var_index(old.relationship_var)
    head_code = old.var(old.relationship_var).code(old.head_level)
    moved_src = [k for k in range(old.p) if k != rel_idx]

    records = []
    head_positions: dict[str, int] = {}
    for rec, mask in dataset.households:
        heads = [
            j for j, row in enumerate(rec.individuals)
            if not mask.individual_masks[j][rel_idx] and row[rel_idx] == head_code
        ]
        if len(heads) > 1:
            raise TransformError(f"household {rec.id}: multiple household heads")
        if not heads:
            if any(m[rel_idx] for m in mask.individual_masks):
                raise TransformError(
                    f"household {rec.id}: cannot identify head "
                    "(a relationship value is missing)"
                )
            raise TransformError(f"household {rec.id}: no household head")
        hpos = heads[0]
        head_positions[rec.id] = hpos
        head_row = rec.individuals[hpos]
        head_mask = mask.individual_masks[hpos]
        new_hvals = list(rec.household_values) + [head_row[k] for k in moved_src]
        new_hmask = list(mask.household_mask) + [head_mask[k] for k in moved_src]
        new_ind = []
        new_imask = []
        for j, (row, mrow) in enumerate(zip(rec.individuals, mask.individual_masks)):
            if j == hpos:
                continue
            row = list(row)
            code = row[rel_idx]
            if not mrow[rel_idx]:
                if code == head_code:
                    raise TransformError(f"household {rec.id}: multiple household heads")
                row[rel_idx] = code - 1 if code > head_code else code
            new_ind.append(tuple(row))
            new_imask.append(tuple(mrow))
        records.append(
            (
                Household(rec.id, rec.size, tuple(new_hvals), tuple(new_ind)),
                MissingnessMask(tuple(new_hmask), tuple(new_imask)),
            )
        )
    return Dataset(new_schema, records, head_positions=head_positions)


def inverse_transform(dataset: Dataset) -> Dataset:
    """Reconstitute head rows, undoing :func:`head_to_household_transform`."""
    s = dataset.schema
    if not s.head_moved or s.parent is None:
        raise TransformError("dataset lacks head-move provenance; cannot invert")
    old = s.parent
    rel_idx = old.ind_var_index(old.relationship_var)
    head_code = old.var(old.relationship_var).code(old.head_level)
    moved_src = [k for k in range(old.p) if k != rel_idx]
    q0 = old.q
    head_positions = dataset.head_positions or {}

    records = []
    for rec, mask in dataset.households:
        head_row = [0] * old.p
        head_mask = [0] * old.p
        head_row[rel_idx] = head_code
        for col, k in enumerate(moved_src):
            head_row[k] = rec.household_values[q0 + col]
            head_mask[k] = mask.household_mask[q0 + col]
            if head_mask[k]:
                head_row[k] = MISSING
        new_ind = []
        new_imask = []
        for row, mrow in zip(rec.individuals, mask.individual_masks):
            row = list(row)
            code = row[rel_idx]
            if not mrow[rel_idx]:
                row[rel_idx] = code + 1 if code >= head_code else code
            new_ind.append(tuple(row))
            new_imask.append(tuple(mrow))
        hpos = head_positions.get(rec.id, 0)
        hpos = min(max(hpos, 0), len(new_ind))
        new_ind.insert(hpos, tuple(head_row))
        new_imask.insert(hpos, tuple(head_mask))
        records.append(
            (
                Household(rec.id, rec.size, rec.household_values[:q0], tuple(new_ind)),
                MissingnessMask(mask.household_mask[:q0], tuple(new_imask)),
            )
        )
    return Dataset(old, records)
