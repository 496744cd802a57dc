"""Point-annotated crowd counting: density targets, focus maps,
occlusion-simulating augmentation, distillation losses, and a small
fully-checked reference network.
"""

from .annot import (
    ObjectDisc,
    Point,
    PointSet,
    estimate_sigmas,
    fixed_sigmas,
    load_annotations,
    make_point_set,
    neighbor_mean_distances,
    save_annotations,
)
from .density import apply_mask, count, render_density
from .errors import (
    BadMagicError,
    CenterOutOfBoundsError,
    DataError,
    EmptyDatasetError,
    EmptyPointSetError,
    EmptySetError,
    MalformedFileError,
    MalformedHeaderError,
    MassMismatchError,
    MissingAuxiliaryError,
    NonBinaryMaskError,
    NonFiniteError,
    NonFiniteValueError,
    NonNegativeViolationError,
    NonPositiveSigmaError,
    OutOfBoundsError,
    PasteOutOfBoundsError,
    ProbsNotNormalizedError,
    ShapeMismatchError,
    SizeMismatchError,
    TooFewRecordsError,
    TruncatedDataError,
    UnsupportedEndiannessError,
    UnsupportedMaxvalError,
    VersionMismatchError,
)
from .focus import (
    crowding_level,
    density_step,
    global_density_label,
    occlusion_level,
    occlusion_map,
    seg_mask,
)
from .losses import (
    CompositeLoss,
    GradcheckReport,
    LossResult,
    TransportPlan,
    auxiliary_loss,
    composite_loss,
    distillation_loss,
    dm_loss,
    focal_seg_loss,
    global_density_loss,
    gradcheck,
    lp_loss,
    sinkhorn,
    softmax,
    softmax_vjp,
)
from .metrics import (
    EvalRecord,
    bg_fg_error,
    crowding_split,
    mae_rmse,
    occlusion_split,
    oracle_mask_eval,
    read_records,
    write_records,
)
from .occsim import (
    AugmentResult,
    PastePlan,
    adaptive_budget,
    apply_occlusion,
    augment_sample,
    blend_mask,
    paste_position,
)
from .raster import map_sum, read_pfm, read_pgm, write_pfm, write_pgm
from .rng import CounterRng, derive_seed
from .toynet import (
    SceneSpec,
    ToyNet,
    ToySample,
    TrainConfig,
    TrainHistory,
    forward,
    image_to_input,
    init_toynet,
    load_model,
    predict_count,
    predict_density,
    save_model,
    synth_dataset,
    synth_scene,
    train,
    zero_toynet,
)

__version__ = "0.1.0"
