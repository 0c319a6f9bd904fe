"""Colorized radiance fields from posed monochrome images."""

from .color import (
    AbBinTable,
    OutOfGamutError,
    build_ab_bin_table,
    decode_argmax,
    lab_to_rgb,
    load_bin_table,
    rgb_to_lab,
    save_bin_table,
    soft_label,
    soft_label_batch,
)
from .colorize import (
    BaseSet,
    ColorizeError,
    ExternalColorizer,
    OracleColorizer,
    PaletteColorizer,
    PatchQuery,
    ab_histogram,
    colorize_query,
    hist_similarity,
    purify,
)
from .field import (
    FieldParams,
    GradBuffer,
    init_field,
    load_field,
    query_backward,
    query_field,
    save_field,
)
from .metrics import MetricReport, colorfulness, evaluate, psnr, ssim
from .rendering import (
    Camera,
    PatchSpec,
    RayBundle,
    importance_sample,
    render_image,
    render_rays,
    sample_patch_rays,
    stratified_sample,
)
from .scenes import (
    Blob,
    MultiViewDataset,
    SyntheticScene,
    analytic_field,
    generate_views,
    load_dataset,
    save_dataset,
)
from .training import (
    TrainConfig,
    loss_classification,
    loss_photometric,
    train_color,
    train_luminance,
)

__version__ = "0.1.0"
