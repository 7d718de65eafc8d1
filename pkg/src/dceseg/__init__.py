"""Liver segmentation on dynamic contrast-enhanced MR series.

The package bundles a small reverse-mode autodiff engine, a dilated FCN and a
compact U-net with three ways of wiring the contrast phases into the input,
the preprocessing and evaluation stack around them, and a synthetic
dynamic-contrast phantom for desk-scale experiments.
"""

from .autodiff import Tensor, backward
from .metrics import MetricsReport, dsc, hd95, summarize
from .models import (
    InputConfig,
    Network,
    build_dilated_fcn,
    build_network,
    build_unet,
    count_params,
    predict_volume,
    receptive_field,
    train,
)
from .nn import AdamState, adam_step, dice_loss, dice_similarity, glorot_uniform
from .phantom import (
    PhantomSpec,
    default_ambiguity_spec,
    default_separable_spec,
    generate_phantom,
)
from .postprocess import (
    fill_holes_3d,
    largest_component,
    postprocess_probabilities,
    threshold,
)
from .stats import PairedTestResult, paired_t_test, wilcoxon_signed_rank
from .volumes import (
    BinaryMask3D,
    BreathHoldGrouping,
    NormalizationParams,
    VolumeSeries,
    average_breath_holds,
    extract_slices,
    normalize,
    read_volume,
    split_dataset,
    write_volume,
)

__version__ = "0.1.0"
