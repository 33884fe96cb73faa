"""crossvi: joint latent modeling of scRNA-seq and spatial count data.

Fits a two-branch variational autoencoder over a shared latent space,
optionally domain-adapted with a kappa-weighted adversarial classifier,
and imputes spatial expression of genes measured only by scRNA-seq.
"""

from .data import (
    CountMatrix,
    GenePanel,
    SimulationTruth,
    load_counts,
    make_holdout,
    save_counts,
    simulate,
)
from .errors import (
    AlignmentError,
    ContractError,
    CrossviError,
    DataError,
    DegenerateMassError,
    DomainError,
    ParseError,
    TrainingDivergedError,
)
from .imputation import (
    ImputationResult,
    impute,
    knn_impute_baseline,
    linreg_impute,
    linreg_predictability,
)
from .metrics import (
    EvalReport,
    knn_graph,
    knn_purity_jaccard,
    mixing_kl,
    relative_change,
    spearman,
)
from .model import (
    ModelState,
    TrainConfig,
    decode_rho,
    encode,
    load_model,
    renormalize_rho,
    save_model,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "ContractError",
    "CountMatrix",
    "CrossviError",
    "DataError",
    "DegenerateMassError",
    "DomainError",
    "EvalReport",
    "GenePanel",
    "ImputationResult",
    "ModelState",
    "ParseError",
    "SimulationTruth",
    "TrainConfig",
    "TrainingDivergedError",
    "decode_rho",
    "encode",
    "impute",
    "knn_graph",
    "knn_impute_baseline",
    "knn_purity_jaccard",
    "linreg_impute",
    "linreg_predictability",
    "load_counts",
    "load_model",
    "make_holdout",
    "mixing_kl",
    "relative_change",
    "renormalize_rho",
    "save_counts",
    "save_model",
    "simulate",
    "spearman",
    "train",
    "__version__",
]
