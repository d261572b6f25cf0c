"""Sequence-level drivers shared by the CLI and the test suite: streaming
inference over a sequence directory, the training driver with per-epoch
sparse resampling, and the full-pipeline gradient check."""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from . import synth, training
from .errors import ParameterError
from .fileio import write_pfm
from .metrics import compute_metrics, write_metrics_csv
from .pipeline import forward_frame, init_parameters, planes_for


def sparse_sample_count(cfg, dense):
    if cfg.sparse_count is not None:
        return min(cfg.sparse_count, dense.valid_count)
    return max(1, round(cfg.sparse_fraction * dense.valid_count))


def sparse_inputs(cfg, frames, epoch=None):
    """Per-frame sparse maps drawn from the dense ground truth; seeds are
    (seed, frame) for inference and (seed, epoch, frame) during training."""
    out = []
    for t, (img, dense, pose) in enumerate(frames):
        seed = [cfg.seed, t] if epoch is None else [cfg.seed, epoch, t]
        out.append((img, synth.sample_sparse(dense, sparse_sample_count(cfg, dense), seed), pose))
    return out


def eval_range(cfg):
    if cfg.eval_range is not None:
        return cfg.eval_range
    return (cfg.planes.d_min, cfg.planes.d_max)


def run_inference(cfg, params, seq_dir=None, out_dir=None, mode=None):
    """Stream a sequence through the pipeline, carrying the fused volume.

    Writes depth_%04d.pfm, conf_%04d.pfm, and metrics.csv when ``out_dir``
    is given.  Returns (per-frame metrics, per-frame output DepthMaps).
    """
    seq_dir = seq_dir or cfg.paths.sequence_dir
    if seq_dir is None:
        raise ParameterError("inference needs a sequence directory")
    frames, K = synth.load_sequence(seq_dir)
    inputs = sparse_inputs(cfg, frames)
    low, high = eval_range(cfg)
    state = None
    rows, outputs = [], []
    with ad.no_grad():
        for t, (img, sparse, pose) in enumerate(inputs):
            result, state = forward_frame(img, sparse, pose, state, params, cfg, K, mode=mode)
            out = result.output
            outputs.append(out)
            rows.append((t, compute_metrics(out, frames[t][1], low, high)))
            if out_dir is not None:
                os.makedirs(out_dir, exist_ok=True)
                write_pfm(os.path.join(out_dir, f"depth_{t:04d}.pfm"), out.depth.data)
                write_pfm(os.path.join(out_dir, f"conf_{t:04d}.pfm"), result.confidence.data)
    if out_dir is not None:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return rows, outputs


def run_training(cfg, seq_dir=None, mode=None, epochs=None):
    """Train on one sequence directory per the config; returns the params,
    optimizer state, and the concatenated loss trace."""
    seq_dir = seq_dir or cfg.paths.sequence_dir
    if seq_dir is None:
        raise ParameterError("training needs a sequence directory")
    frames, K = synth.load_sequence(seq_dir)
    gt = [dense for _, dense, _ in frames]
    params = init_parameters(cfg)
    opt_state = training.init_optimizer(params, cfg.optimizer)
    epochs = cfg.optimizer.epochs if epochs is None else epochs
    trace = training.LossTrace()
    if cfg.resample_sparse:
        for epoch in range(epochs):
            inputs = sparse_inputs(cfg, frames, epoch=epoch)
            params, piece = training.train_sequence(
                inputs, gt, K, params, opt_state, cfg, epochs=1, mode=mode
            )
            trace.rows.extend((epoch, f, l1, ce, tot) for _, f, l1, ce, tot in piece.rows)
            trace.epoch_means.extend(piece.epoch_means)
    else:
        inputs = sparse_inputs(cfg, frames)
        params, trace = training.train_sequence(
            inputs, gt, K, params, opt_state, cfg, epochs=epochs, mode=mode
        )
    return params, opt_state, trace


def gradcheck_loss_builder(cfg, n_frames=2, scene_seed=None):
    """Deterministic tiny clip plus a closure mapping params to the summed
    per-frame training loss; used by the full-pipeline gradient check.

    The carried volume stays attached (2-frame BPTT) so the reverse-mode
    gradient and the finite difference measure the same function; streaming
    training detaches it, which a finite-difference probe cannot see.
    """
    import dataclasses

    cfg = dataclasses.replace(cfg, temporal_grad=True)
    size = 4 * cfg.downscale
    spec, K = synth.default_scene(
        cfg.seed if scene_seed is None else scene_seed,
        width=size,
        height=size,
        frame_count=n_frames,
        step=0.05,
    )
    planes = planes_for(cfg)
    frames = []
    for t in range(n_frames):
        img, dense, pose = synth.render_frame(spec, t, K)
        sparse = synth.sample_sparse(dense, sparse_sample_count(cfg, dense), [cfg.seed, t])
        frames.append((img, sparse, dense, pose))

    def loss_fn(params):
        state = None
        total = None
        for img, sparse, dense, pose in frames:
            result, state = forward_frame(img, sparse, pose, state, params, cfg, K)
            loss, _ = training.frame_loss(result, dense, cfg.loss, planes)
            total = loss if total is None else total + loss
        return total

    return loss_fn


def run_gradcheck(cfg, n_frames=2, step=1e-5):
    """Max relative error between reverse-mode and central-difference
    gradients of the full pipeline loss, per parameter."""
    if n_frames > 2:
        raise ParameterError(
            "gradcheck supports at most 2 frames: beyond the 2-frame BPTT "
            "window the carried volume is detached, which finite differences "
            "cannot reproduce"
        )
    loss_fn = gradcheck_loss_builder(cfg, n_frames=n_frames)
    params = init_parameters(cfg)
    return ad.gradient_check_report(loss_fn, params, step=step)
