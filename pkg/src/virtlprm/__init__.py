"""Virtual sensing toolkit for BWR in-core power range detectors.

A small numpy-based stack: a reverse-mode differentiation engine, an
axial-attention block, the core/detector data model with a synthetic
plant-data generator, two detector-prediction network families, and the
training/evaluation machinery to run them end to end.
"""

from .autodiff import (
    DegenerateBatchError,
    Graph,
    RunningStats,
    ShapeError,
    Tensor,
    backward,
    batch_norm,
    batch_norm2d,
    concat,
    conv2d,
    gelu,
    grad_check,
    matmul,
    mse_loss,
    reshape,
    softmax,
    transpose,
    tsum,
    zero_grads,
)
from .attention import (
    AxialAttentionParams,
    affinity,
    aggregate,
    attention_map,
    axial_attention,
    axial_pass,
    pair_count,
)
from .coredata import (
    CoreGeometry,
    CoreState,
    DataError,
    DetectorId,
    GeometryError,
    LprmFrame,
    RodInputs,
    bypass_augment,
    default_geometry,
    derive_rod_variable,
    filter_transients,
    load_archive,
    load_geometry,
    save_archive,
    split_holdout_cycle,
    split_surrogate,
)
from .evaluation import (
    AxisDetectorPredictor,
    CompositePredictor,
    CoverageError,
    DriftReport,
    LprmNetPredictor,
    OraclePredictor,
    PairedSurrogatePredictor,
    RmseReport,
    SetSurrogatePredictor,
    VirtualSensor,
    drift_report,
    infer_virtual,
    rmse_report,
)
from .models import (
    LprmNet,
    LprmNetSpec,
    SurrogateNet,
    SurrogateSpec,
    axis_detector_arrays,
    axis_surrogate_spec,
    center_output_bias,
    load_checkpoint,
    lprmnet_arrays,
    paired_surrogate_spec,
    save_checkpoint,
    surrogate_arrays,
)
from .synthplant import (
    PlantScenario,
    generate_cycle,
    generate_plant,
    lprm_response_oracle,
    oracle_readings,
)
from .training import (
    AdamWState,
    DataSplit,
    DivergenceError,
    TrainConfig,
    TrainResult,
    adamw_step,
    batched_predict,
    history_from_csv,
    history_to_csv,
    one_cycle_lr,
    train,
)

__version__ = "0.1.0"
