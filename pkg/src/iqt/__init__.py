"""Volumetric image quality transfer with coupled sparse dictionaries.

Train paired feature/residual dictionaries on aligned volume pairs, enhance
low-quality volumes patch by patch through shared sparse codes, simulate the
degradations that produce such pairs, and score the results.
"""

from .degrade import (
    DegradationParams,
    PhantomSpec,
    REGIMES,
    SnrDistribution,
    build_dataset,
    contrast_remap,
    degrade,
    mahalanobis,
    make_phantom,
    sample_snr,
    tissue_means,
)
from .dictlearn import (
    CoupledDictionary,
    PatchGeometry,
    PcaProjection,
    extract_hq_residual,
    extract_lq_features,
    fit_pca,
    harvest_training_pairs,
    load_dictionary,
    save_dictionary,
    train_coupled,
)
from .enhance import EnhanceConfig, RunReport, enhance, enhance_patch, enhance_with_report
from .errors import (
    ConfigError,
    ConvergenceWarning,
    CorruptionError,
    DataError,
    FormatError,
    GeometryError,
    IqtError,
    ParameterError,
    SamplingError,
)
from .metrics import (
    EvalReport,
    EvalRow,
    ManifestEntry,
    binary_improvement_map,
    error_map,
    evaluate_run,
    nrmse,
    read_manifest,
    ssim,
    write_manifest,
)
from .sparse import Dictionary, SparseCode, kkt_residual, lasso_cd, lasso_objective, omp
from .volume import (
    Patch,
    PatchSpec,
    Volume3D,
    extract_patches,
    load_volume,
    patch_origins,
    reconstruct_from_patches,
    save_volume,
    upsample_cubic,
)

__version__ = "0.1.0"
