"""Per-frame forward pass: cost volume creation, temporal fusion against the
carried volume, depth regression, and optional refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cost_volume as cv
from . import fusion, regression
from .autodiff import ParameterStore, Tensor
from .cost_volume import CostVolume
from .geometry import Pose, align_volume, make_planes, relative_pose, scale_intrinsics


@dataclass(eq=False)
class FrameState:
    """Recurrent state carried across frames: the fused volume at the
    previous viewpoint.  ``attached`` marks a live graph (2-frame BPTT)."""

    volume: CostVolume
    pose: Pose
    attached: bool = False


@dataclass(eq=False)
class FrameResult:
    regressed: regression.DepthMap
    refined: regression.DepthMap | None
    prob: regression.ProbabilityVolume
    confidence: Tensor
    fused: CostVolume

    @property
    def output(self):
        return self.refined if self.refined is not None else self.regressed


def planes_for(cfg):
    return make_planes(cfg.planes.count, cfg.planes.d_min, cfg.planes.d_max)


def init_parameters(cfg, seed=None):
    """All learnable parameters, deterministically seeded."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParameterStore()
    cv.add_image_encoder_params(store, rng, cfg.image_channels)
    cv.add_unet_params(store, rng, 2 + sum(cfg.image_channels), cfg.channels)
    fusion.add_fusion_params(store, rng, cfg.channels, cfg.share_self_attention)
    regression.add_regression_params(store, rng, cfg.channels, cfg.downscale)
    if cfg.refinement:
        regression.add_refine_params(store, rng, cfg.refine_channels)
    return store


def forward_frame(img, sparse, pose, state, params, cfg, K, mode=None):
    """Run one frame through the pipeline.

    Returns the frame's outputs and the state to carry to the next frame.
    ``state`` is None on the first frame; in single-view mode the previous
    volume is ignored and only self-attention runs.
    """
    mode = cfg.mode if mode is None else mode
    planes = planes_for(cfg)
    k_vol = scale_intrinsics(K, cfg.downscale)

    s_vol = cv.downsample_sparse(sparse, cfg.downscale)
    occupancy = cv.build_occupancy_volume(s_vol, planes)
    residual = cv.build_residual_volume(s_vol, planes)
    image_feat = cv.extract_image_features(img, params, cfg.image_channels, cfg.downscale)
    feat = cv.assemble_feature_volume(occupancy, residual, image_feat)
    current = cv.encode_cost_volume(feat, params, planes)

    previous = None
    if mode == "fused" and state is not None:
        cur_to_prev = relative_pose(state.pose, pose)
        previous = align_volume(state.volume, cur_to_prev, k_vol, planes)

    fused = fusion.fuse_volumes(
        current,
        previous,
        params,
        residual=cfg.residual,
        heads=cfg.heads,
        share_self_attention=cfg.share_self_attention,
        mask_invalid_previous=cfg.mask_invalid_previous,
    )

    logits = regression.to_unnormalized_probability(fused, params, cfg.downscale)
    depth, prob = regression.regress_depth(logits, planes)
    conf = regression.confidence_map(prob)
    refined = None
    if cfg.refinement:
        refined = regression.refine_depth(depth, conf, img, sparse, params, cfg.refine_iterations)

    carry_attached = cfg.temporal_grad and (state is None or not state.attached)
    if carry_attached:
        carried = fused
    else:
        carried = CostVolume(planes, fused.features.detach(), fused.validity)
    return (
        FrameResult(regressed=depth, refined=refined, prob=prob, confidence=conf, fused=fused),
        FrameState(carried, pose, attached=carry_attached),
    )
