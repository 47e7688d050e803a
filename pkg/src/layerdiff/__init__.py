"""Layered, vision-guided diffusion sampling at desk scale."""

from .diffusion import (
    Schedule,
    build_schedule,
    cfg_direction,
    ddim_invert_step,
    ddim_step,
    forward_diffuse,
    reverse_step,
    sample,
)
from .editing import InversionResult, ddim_invert, edit_scene
from .guidance import (
    BoundingBox,
    RegionMask,
    VisionGuidance,
    build_dynamic_random,
    build_xi,
    compute_dynamic_delta,
    rasterize_box,
)
from .metrics import MetricsReport, evaluate_placement
from .renderer import (
    Layer,
    SceneSpec,
    background_layer,
    compose_masked_solution,
    fuse_layer_scores,
    layered_step,
    render,
)
from .scene import load_scene, parse_scene
from .scores import (
    AnalyticScoreModel,
    AttentionMap,
    ScoreEstimator,
    Template,
    TemplateDistribution,
    TokenSequence,
    analytic_attention,
    analytic_score,
    extract_attention,
)
from .world import BlobWorld, make_blob_world

__version__ = "0.1.0"
