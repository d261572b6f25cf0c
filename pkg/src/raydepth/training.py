"""Losses with soft plane labels, decoupled-weight-decay Adam, the
per-sequence training loop, and the binary checkpoint format."""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .config import LossConfig, OptimizerConfig  # noqa: F401  (module surface)
from .errors import CheckpointError, EmptySupervisionError, TrainingError
from .pipeline import forward_frame, planes_for

CE_EPS = 1e-12

CHECKPOINT_MAGIC = b"RDCP"
CHECKPOINT_VERSION = 1


# -- soft labels ----------------------------------------------------------------


def soft_labels(values, planes):
    """Vectorized soft labels: mass split between the two planes bracketing
    each ground-truth depth.  Out-of-range depths clamp to an endpoint
    one-hot; returns (labels, clamped_count)."""
    values = np.asarray(values, dtype=np.float64)
    clamped = int(np.sum((values < planes.d_min) | (values > planes.d_max)))
    v = np.clip(values, planes.d_min, planes.d_max)
    frac = (v - planes.d_min) / planes.spacing
    i0 = np.clip(np.floor(frac).astype(np.int64), 0, planes.count - 2)
    left = planes.depths[i0]
    right = planes.depths[i0 + 1]
    w_hi = np.clip((v - left) / (right - left), 0.0, 1.0)
    labels = np.zeros((values.size, planes.count))
    rows = np.arange(values.size)
    labels[rows, i0] = 1.0 - w_hi
    labels[rows, i0 + 1] += w_hi
    return labels, clamped


def soft_label(gt_depth, planes):
    """Probability vector over planes for one ground-truth depth."""
    labels, clamped = soft_labels([gt_depth], planes)
    if clamped:
        warnings.warn(
            f"ground-truth depth {gt_depth} outside [{planes.d_min}, {planes.d_max}]; "
            "clamped to an endpoint plane",
            stacklevel=2,
        )
    return labels[0]


# -- losses -----------------------------------------------------------------------


def _supervision_mask(pred_shape, gt):
    if gt.depth.shape != pred_shape:
        from .errors import DimensionError

        raise DimensionError(f"prediction {pred_shape} vs ground truth {gt.depth.shape}")
    if gt.valid_count == 0:
        raise EmptySupervisionError("no valid ground-truth pixels to supervise")
    return gt.valid.astype(np.float64)


def l1_loss(pred, gt):
    """Mean absolute depth error over valid ground-truth pixels."""
    mask = _supervision_mask(pred.depth.shape, gt)
    diff = ad.tabs(pred.depth - Tensor(gt.depth)) * mask
    return diff.sum() / gt.valid_count


def l2_loss(pred, gt):
    """Mean squared depth error over valid ground-truth pixels."""
    mask = _supervision_mask(pred.depth.shape, gt)
    diff = pred.depth - Tensor(gt.depth)
    return (diff * diff * mask).sum() / gt.valid_count


def ce_loss(prob, gt, planes):
    """Soft-label cross entropy between predicted plane distributions and
    ground truth, averaged over valid pixels."""
    mask = _supervision_mask(prob.probs.shape[1:], gt)
    hh, ww = np.nonzero(gt.valid)
    labels, _ = soft_labels(gt.depth[hh, ww], planes)
    label_vol = np.zeros(prob.probs.shape)
    label_vol[:, hh, ww] = labels.T
    logp = ad.tlog(prob.probs + CE_EPS)
    return -(Tensor(label_vol) * logp).sum() / gt.valid_count


def total_loss(cfg, parts):
    """Unweighted sum of the enabled loss terms."""
    terms = cfg.enabled_terms()
    missing = [t for t in terms if t not in parts]
    if missing:
        raise TrainingError(f"loss components missing: {missing}")
    out = parts[terms[0]]
    for name in terms[1:]:
        out = out + parts[name]
    return out


def frame_loss(result, gt, loss_cfg, planes):
    """All loss parts for one frame plus their configured total.

    With ``spn_l1`` the depth losses see the refined depth while the cross
    entropy stays on the pre-refinement probability volume.
    """
    depth = result.regressed
    if loss_cfg.spn_l1 and result.refined is not None:
        depth = result.refined
    parts = {
        "l1": l1_loss(depth, gt),
        "l2": l2_loss(depth, gt),
        "ce": ce_loss(result.prob, gt, planes),
    }
    return total_loss(loss_cfg, parts), parts


# -- optimizer ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    learning_rate: float
    weight_decay: float
    milestones: frozenset = field(default_factory=frozenset)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(params, opt_cfg):
    state = OptimizerState(
        learning_rate=opt_cfg.learning_rate,
        weight_decay=opt_cfg.weight_decay,
        milestones=frozenset(opt_cfg.milestones),
    )
    for path, p in params.items():
        state.m[path] = np.zeros_like(p.data)
        state.v[path] = np.zeros_like(p.data)
    return state


def optimizer_step(params, state):
    """Bias-corrected adaptive-moment update with decoupled weight decay,
    halving the learning rate at configured step milestones."""
    state.step_count += 1
    if state.step_count in state.milestones:
        state.learning_rate *= 0.5
    lr, wd = state.learning_rate, state.weight_decay
    b1, b2 = state.beta1, state.beta2
    t = state.step_count
    for path, p in params.items():
        if p.grad is None:
            raise TrainingError(f"missing gradient for parameter {path!r}")
        g = p.grad
        p.data = p.data * (1.0 - lr * wd)
        state.m[path] = b1 * state.m[path] + (1.0 - b1) * g
        state.v[path] = b2 * state.v[path] + (1.0 - b2) * g * g
        m_hat = state.m[path] / (1.0 - b1**t)
        v_hat = state.v[path] / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# -- training loop --------------------------------------------------------------------


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)  # (epoch, frame, l1, ce, total)
    epoch_means: list = field(default_factory=list)


def train_sequence(frames, gt, K, params, opt_state, cfg, epochs=None, mode=None):
    """Stream the frame sequence in temporal order, one optimizer step per
    frame, carrying the fused volume across frames within each epoch.

    ``frames`` holds (RGBImage, SparseDepthMap, Pose) triples; ``gt`` the
    per-frame supervision maps.  Returns the params and a loss trace whose
    epoch_means has one entry per epoch.
    """
    if not frames:
        raise TrainingError("need at least one frame")
    if len(gt) != len(frames):
        raise TrainingError(f"{len(frames)} frames but {len(gt)} ground-truth maps")
    epochs = cfg.optimizer.epochs if epochs is None else epochs
    planes = planes_for(cfg)
    trace = LossTrace()
    for epoch in range(epochs):
        state = None
        totals = []
        for index, (img, sparse, pose) in enumerate(frames):
            params.zero_grad()
            result, state = forward_frame(img, sparse, pose, state, params, cfg, K, mode=mode)
            loss, parts = frame_loss(result, gt[index], cfg.loss, planes)
            loss.backward()
            for _, p in params.items():
                # params a frame never touches (cross attention at frame 1,
                # single-view mode) have an exactly-zero gradient
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            optimizer_step(params, opt_state)
            trace.rows.append(
                (epoch, index, parts["l1"].item(), parts["ce"].item(), loss.item())
            )
            totals.append(loss.item())
        trace.epoch_means.append(float(np.mean(totals)))
    return params, trace


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "frame", "l1", "ce", "total"])
        for row in trace.rows:
            writer.writerow([row[0], row[1], f"{row[2]:.12g}", f"{row[3]:.12g}", f"{row[4]:.12g}"])


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(path, params):
    """Flat binary dump: magic, version, count, then per parameter the path,
    rank, extents, and little-endian float64 data."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, p in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            f.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path):
    def read(f, n, what):
        buf = f.read(n)
        if len(buf) != n:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        return buf

    params = ParameterStore()
    with open(path, "rb") as f:
        if read(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, count = struct.unpack("<II", read(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", read(f, 4, "name length"))
            name = read(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", read(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}Q", read(f, 8 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(read(f, 8 * n, f"data of {name}"), dtype="<f8")
            params.add(name, data.reshape(shape))
    return params


def check_same_parameters(expected, loaded):
    """Raise unless the loaded checkpoint has exactly the expected paths."""
    missing = [p for p in expected.paths() if p not in loaded]
    unexpected = [p for p in loaded.paths() if p not in expected]
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match the configured model; missing={missing}, unexpected={unexpected}"
        )
    for path, p in expected.items():
        if loaded[path].data.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {path!r} has shape {loaded[path].data.shape}, expected {p.data.shape}"
            )
