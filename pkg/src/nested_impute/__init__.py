"""Multiple imputation for categorical data nested within households.

A two-level latent class model with structural-zero support restriction:
household-level and individual-level categorical variables, rejection-based
data augmentation for the support constraint, rejection-based imputation of
missing cells, and pooled inference over the completed datasets.
"""

from .schema import (
    Dataset,
    DatasetSchema,
    Household,
    MissingnessMask,
    VariableSpec,
    head_to_household_transform,
    inverse_transform,
    load_dataset,
    parse_schema,
    write_dataset,
)
from .rules import (
    AttrBoundRule,
    CountRule,
    PairDiffRule,
    RuleSet,
    ValuePairRule,
    count_combinations,
    count_structural_zeros,
    enumerate_feasible,
    is_feasible,
)
from .model import (
    Hyperparams,
    ModelParams,
    infeasible_mass_bruteforce,
    init_from_prior,
    loglik_kernel,
    sample_household_untruncated,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetSchema",
    "Household",
    "MissingnessMask",
    "VariableSpec",
    "head_to_household_transform",
    "inverse_transform",
    "load_dataset",
    "parse_schema",
    "write_dataset",
    "AttrBoundRule",
    "CountRule",
    "PairDiffRule",
    "RuleSet",
    "ValuePairRule",
    "count_combinations",
    "count_structural_zeros",
    "enumerate_feasible",
    "is_feasible",
    "Hyperparams",
    "ModelParams",
    "infeasible_mass_bruteforce",
    "init_from_prior",
    "loglik_kernel",
    "sample_household_untruncated",
    "__version__",
]
