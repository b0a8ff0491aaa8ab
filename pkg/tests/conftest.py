from __future__ import annotations

import pytest

from nested_impute import schema as sc
from nested_impute import rules as ru


WORKED_EXAMPLE_SCHEMA = """
var household_size scope=household levels=2
var age scope=individual levels=0..99 ordinal
var relationship scope=individual levels=household_head,spouse,biological_child,adopted_child,stepchild,sibling,parent,grandchild,parent_in_law,child_in_law,other_relative,boarder_roommate_partner,other_nonrelative
sizes=2
relationship=relationship
head=household_head
"""

TINY_SCHEMA = """
var household_size scope=household levels=1
var a scope=individual levels=a1,a2
var b scope=individual levels=b1,b2
sizes=1
"""


@pytest.fixture(scope="session")
def worked_schema():
    return sc.parse_schema(WORKED_EXAMPLE_SCHEMA)


@pytest.fixture(scope="session")
def worked_rules(worked_schema):
    return ru.RuleSet.from_text(
        "count relationship {household_head} min=1 max=1", worked_schema
    )


@pytest.fixture(scope="session")
def tiny_schema():
    return sc.parse_schema(TINY_SCHEMA)


def make_household(schema, hid, size, hh_vals, ind_rows, hh_miss=None, ind_miss=None):
    """Build a (Household, MissingnessMask) pair from plain lists."""
    m = schema.stored_individuals(size)
    hh_miss = hh_miss or [0] * schema.q
    ind_miss = ind_miss or [[0] * schema.p for _ in range(m)]
    hh_vals = list(hh_vals)
    for k, miss in enumerate(hh_miss):
        if miss:
            hh_vals[k] = 0
    ind_rows = [list(r) for r in ind_rows]
    for j, row in enumerate(ind_miss):
        for k, miss in enumerate(row):
            if miss:
                ind_rows[j][k] = 0
    return (
        sc.Household(hid, size, tuple(hh_vals), tuple(tuple(r) for r in ind_rows)),
        sc.MissingnessMask(tuple(hh_miss), tuple(tuple(r) for r in ind_miss)),
    )
