"""Shipped study files: schemas, rule sets, and example estimand queries."""

from importlib.resources import files


def data_path(name: str) -> str:
    """Filesystem path of a shipped data file."""
    return str(files("nested_impute.data").joinpath(name))
