"""Search for the shared structural form of equations across similar systems.

The pipeline: genetic-programming symbolic regression proposes raw
candidates; a dimension-consistency transform inserts extrinsic parameters
(``x -> a*x + b``, operator ``O -> g*O``, freed constants, global offset);
each candidate template is fitted to every system's dataset; candidates are
ranked by ``L = L1 + L2`` where L1 is the mean fit residual and L2 the
held-out error of predicting each fitted parameter from its predecessors
across systems, a proxy for the number of independent hidden properties.
"""

__version__ = "0.1.0"

from .expr import (
    Binary,
    Const,
    DomainError,
    Expression,
    Param,
    ParseError,
    Power,
    Unary,
    Var,
    canonical_string,
    compile_expression,
    evaluate,
    parse,
    random_expression,
)
from .simplify import simplify
from .transform import Template, UnnormalizableTemplate, dimensionalize, unnormalize_params
from .fit import (
    AllFitsFailed,
    FitDiverged,
    FitOptions,
    FitResult,
    NormStats,
    fit_all,
    fit_dataset,
    lm_fit,
    pso_fit,
)
from .gp import CandidateRecord, GpConfig, crossover, evolve, mutate
from .lmetric import InsufficientSystems, L2Report, RegressionTree, l2_score, total_metric, tree_fit
from .data import (
    Dataset,
    DatasetCollection,
    EmptySystem,
    SchemaError,
    gen_exponential,
    gen_projectile,
    load_csv,
    make_dataset,
    projectile_height,
    write_csv,
)

__all__ = [
    "__version__",
    "Binary", "Const", "DomainError", "Expression", "Param", "ParseError",
    "Power", "Unary", "Var", "canonical_string", "compile_expression",
    "evaluate", "parse", "random_expression", "simplify",
    "Template", "UnnormalizableTemplate", "dimensionalize", "unnormalize_params",
    "AllFitsFailed", "FitDiverged", "FitOptions", "FitResult", "NormStats",
    "fit_all", "fit_dataset", "lm_fit", "pso_fit",
    "CandidateRecord", "GpConfig", "crossover", "evolve", "mutate",
    "InsufficientSystems", "L2Report", "RegressionTree", "l2_score",
    "total_metric", "tree_fit",
    "Dataset", "DatasetCollection", "EmptySystem", "SchemaError",
    "gen_exponential", "gen_projectile", "load_csv", "make_dataset",
    "projectile_height", "write_csv",
]
