"""Occlusion-aware disparity refinement guided by monocular inverse depth."""

__version__ = "0.1.0"

from .errors import (
    DegenerateFitError,
    DimensionMismatch,
    DisprefineError,
    EmptyDomainError,
    FormatError,
    OutOfInteriorError,
)
from .grid import (
    FlowMap,
    PixelPoint,
    ScalarMap,
    bilinear_sample,
    bilinear_sample_grad,
    forward_warp_left_to_right,
)
from .occlusion import OcclusionMask, lrc_mask, lrc_mask_single
from .align import (
    AffineFit,
    fit_affine_global,
    fit_affine_tiled,
    fuse,
    refine_inverse_depth,
)
from .flow import OfdInputs, OfdResult, adaptive_weight, ofd_loss, ofd_loss_grad, ofd_residual
from .metrics import (
    CompositeLossReport,
    MetricReport,
    bad3,
    composite_loss,
    dice_loss,
    disparity_to_depth,
    epe,
    evaluate,
    l1_loss,
    rmse_depth,
    weighted_bce,
)
from .posembed import PositionEmbedding, error_heatmap, position_maps
from .synth import SceneFramePair, SceneSpec, generate_scene, hidden_affine
