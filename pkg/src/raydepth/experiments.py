"""Desk-scale experiment protocols shared by the runnable scripts and the
acceptance suite: single-frame overfitting, fused-vs-single-view comparison,
and sparsity robustness.  All of them run on the procedural scenes, so every
number is reproducible from a seed."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import synth, training
from .config import LossConfig, OptimizerConfig, PlanesConfig, RunConfig, validate_config
from .harness import sparse_inputs, sparse_sample_count
from .metrics import compute_metrics
from .pipeline import forward_frame, init_parameters

DESK_PLANES = PlanesConfig(count=8, d_min=1.0, d_max=6.0)


def desk_config(**overrides):
    """Small-but-trainable defaults: 8 planes over [1, 6] m, 8 channels,
    no refinement (the refinement module is exercised separately)."""
    base = dict(
        planes=DESK_PLANES,
        channels=8,
        image_channels=(2, 2, 2),
        downscale=4,
        refinement=False,
        optimizer=OptimizerConfig(learning_rate=1e-3, weight_decay=1e-4, epochs=40),
    )
    base.update(overrides)
    return validate_config(RunConfig(**base))


def render_frames(seed, width=64, height=48, count=8, step=0.04):
    """All frames of the default scene for a seed, with dense ground truth."""
    spec, K = synth.default_scene(seed, width=width, height=height, frame_count=count, step=step)
    frames = [synth.render_frame(spec, t, K) for t in range(count)]
    return [(img, dense, pose) for img, dense, pose in frames], K


def train_model(cfg, frames, K, init_seed=None, epochs=None):
    """Train on one rendered sequence with per-epoch sparse resampling."""
    epochs = cfg.optimizer.epochs if epochs is None else epochs
    gts = [dense for _, dense, _ in frames]
    params = init_parameters(cfg, seed=init_seed)
    state = training.init_optimizer(params, cfg.optimizer)
    trace = training.LossTrace()
    for epoch in range(epochs):
        inputs = sparse_inputs(cfg, frames, epoch=epoch)
        params, piece = training.train_sequence(inputs, gts, K, params, state, cfg, epochs=1)
        trace.rows.extend((epoch, f, l1, ce, tot) for _, f, l1, ce, tot in piece.rows)
        trace.epoch_means.extend(piece.epoch_means)
    return params, trace


def evaluate_sequence(cfg, params, frames, K, sample_count=None):
    """Stream the sequence through the trained model; per-frame MAE against
    the dense ground truth within the plane range."""
    state = None
    maes = []
    with ad.no_grad():
        for t, (img, dense, pose) in enumerate(frames):
            n = sample_count if sample_count is not None else sparse_sample_count(cfg, dense)
            sparse = synth.sample_sparse(dense, min(n, dense.valid_count), [cfg.seed, t])
            result, state = forward_frame(img, sparse, pose, state, params, cfg, K)
            maes.append(compute_metrics(result.output, dense, cfg.planes.d_min, cfg.planes.d_max).mae)
    return maes


# -- protocols -------------------------------------------------------------------


def overfit_run(seed=0, steps=500, loss=None, sparse_count=30):
    """One 32x32 frame, 8 planes, 8 channels, ``steps`` optimizer steps.

    Returns (final MAE on ground-truth pixels, per-step total-loss trace).
    """
    cfg = desk_config(
        sparse_count=sparse_count,
        loss=loss if loss is not None else LossConfig(),
        optimizer=OptimizerConfig(
            learning_rate=3e-4, weight_decay=1e-4, epochs=steps, milestones=(200, 300, 400, 450)
        ),
        seed=seed,
    )
    frames, K = render_frames(seed, width=32, height=32, count=1)
    img, dense, pose = frames[0]
    sparse = synth.sample_sparse(dense, sparse_count, [seed, 0])
    params = init_parameters(cfg, seed=seed)
    state = training.init_optimizer(params, cfg.optimizer)
    params, trace = training.train_sequence([(img, sparse, pose)], [dense], K, params, state, cfg, epochs=steps)
    with ad.no_grad():
        result, _ = forward_frame(img, sparse, pose, None, params, cfg, K)
    mae = compute_metrics(result.output, dense, cfg.planes.d_min, cfg.planes.d_max).mae
    return mae, [row[4] for row in trace.rows]


def fusion_benefit_run(seed, epochs=40):
    """Train fused and single-view models on one 8-frame sequence at 0.1%
    sparsity; mean MAE over frames 2..8 for each mode."""
    frames, K = render_frames(seed)
    out = {}
    for mode in ("fused", "single_view"):
        cfg = desk_config(
            mode=mode,
            sparse_count=None,
            sparse_fraction=0.001,
            optimizer=OptimizerConfig(
                learning_rate=1e-3, weight_decay=1e-4, epochs=epochs, milestones=(30 * 8,)
            ),
            seed=seed,
        )
        params, _ = train_model(cfg, frames, K, init_seed=seed, epochs=epochs)
        maes = evaluate_sequence(cfg, params, frames, K)
        out[mode] = float(np.mean(maes[1:]))
    return out["fused"], out["single_view"]


def sparsity_robustness_run(seeds=(0, 1), train_fraction=0.005, eval_fractions=(0.005, 0.0015, 0.0005), epochs=40):
    """Train at one sparsity, evaluate the same model at sparser inputs.
    Returns {fraction: mean MAE across seeds and frames}."""
    totals = {f: [] for f in eval_fractions}
    for seed in seeds:
        frames, K = render_frames(seed)
        cfg = desk_config(
            sparse_count=None,
            sparse_fraction=train_fraction,
            optimizer=OptimizerConfig(
                learning_rate=1e-3, weight_decay=1e-4, epochs=epochs, milestones=(30 * 8,)
            ),
            seed=seed,
        )
        params, _ = train_model(cfg, frames, K, init_seed=seed, epochs=epochs)
        for frac in eval_fractions:
            counts = [max(1, round(frac * dense.valid_count)) for _, dense, _ in frames]
            maes = []
            state = None
            with ad.no_grad():
                for t, (img, dense, pose) in enumerate(frames):
                    sparse = synth.sample_sparse(dense, counts[t], [cfg.seed, t])
                    result, state = forward_frame(img, sparse, pose, state, params, cfg, K)
                    maes.append(
                        compute_metrics(result.output, dense, cfg.planes.d_min, cfg.planes.d_max).mae
                    )
            totals[frac].extend(maes)
    return {f: float(np.mean(v)) for f, v in totals.items()}
