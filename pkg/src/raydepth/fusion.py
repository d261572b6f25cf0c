"""Ray-wise fusion of cost volumes.

Each pixel's viewing ray crosses the volume once per hypothesis plane, so a
(D, C, H, W) volume holds H*W ray features of shape (D, C).  Fusion treats
the D plane features of a ray as tokens: self-attention refines each
volume's rays independently, then cross-attention (query = current ray)
pulls in the aligned previous volume.  Attention score buffers are therefore
D x D per ray -- D^2 * H * W entries per frame -- instead of the
(D*H*W)^2 entries a whole-volume attention would need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, leaky_relu, uniform_init
from .cost_volume import CostVolume
from .errors import DimensionError, ParameterError

_MASK_PENALTY = 1e30


class ScoreAllocationMeter:
    """Tracks attention score-buffer allocations (entries of Q K^T)."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.peak_entries = 0
        self.total_entries = 0
        self.calls = []

    def record(self, entries, rays):
        self.calls.append((entries, rays))
        self.total_entries += entries
        self.peak_entries = max(self.peak_entries, entries)

    @property
    def peak_bytes(self):
        return self.peak_entries * 8

    def peak_entries_per_ray(self):
        return max((e // max(r, 1) for e, r in self.calls), default=0)


score_meter = ScoreAllocationMeter()


def depth_positional_encoding(count, dim):
    """Sinusoidal encoding of plane indices 0..count-1 into ``dim`` channels."""
    if dim % 2 != 0:
        raise ParameterError(f"positional encoding needs an even channel count, got {dim}")
    pos = np.arange(count)[:, None]
    j = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * j / dim)
    pe = np.empty((count, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


@dataclass(eq=False)
class AttentionBlockParams:
    """Linear projections of one attention block; ``shared`` marks whether
    the two self-attention streams reuse the same tensors."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    shared: bool = False


def attention(q, k, v, params, heads=1, score_bias=None):
    """Single- or multi-head scaled dot-product attention with learned
    projections on queries, keys, values, and output.

    Inputs are (..., D, C); leading axes batch independent rays.
    """
    c = q.shape[-1]
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.shape[-1] != c:
            raise DimensionError(f"attention {name} channel {t.shape[-1]} != {c}")
    for name, w in (("wq", params.wq), ("wk", params.wk), ("wv", params.wv), ("wo", params.wo)):
        if w.shape != (c, c):
            raise DimensionError(f"attention {name} must be ({c}, {c}), got {w.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    if c % heads != 0:
        raise ParameterError(f"channels {c} not divisible by {heads} heads")
    q2 = ad.matmul(q, params.wq)
    k2 = ad.matmul(k, params.wk)
    v2 = ad.matmul(v, params.wv)
    if heads > 1:
        hd = c // heads
        lead = q.shape[:-2]
        nl = len(lead)

        def split(t, d):
            t = ad.reshape(t, lead + (d, heads, hd))
            return ad.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

        q2, k2, v2 = split(q2, q.shape[-2]), split(k2, k.shape[-2]), split(v2, k.shape[-2])
        scale = 1.0 / np.sqrt(hd)
    else:
        scale = 1.0 / np.sqrt(c)
    scores = ad.matmul(q2, ad.transpose(k2, tuple(range(k2.ndim - 2)) + (k2.ndim - 1, k2.ndim - 2)))
    scores = scores * scale
    score_meter.record(scores.size, int(np.prod(scores.shape[:-2], dtype=np.int64)))
    if score_bias is not None:
        scores = scores + Tensor(score_bias)
    weights = ad.softmax_lastdim(scores)
    out = ad.matmul(weights, v2)
    if heads > 1:
        lead = q.shape[:-2]
        nl = len(lead)
        out = ad.transpose(out, tuple(range(nl)) + (nl + 1, nl, nl + 2))
        out = ad.reshape(out, lead + (q.shape[-2], c))
    return ad.matmul(out, params.wo)


def attention_entry_count(d, h, w, mode):
    """Score-buffer entries needed to fuse one frame."""
    if d <= 0 or h <= 0 or w <= 0:
        raise ParameterError(f"extents must be positive, got {(d, h, w)}")
    if mode == "ray":
        return d * d * h * w
    if mode == "naive":
        return d * d * h * h * w * w
    raise ParameterError(f"unknown attention mode {mode!r}")


# -- parameters ---------------------------------------------------------------


def add_fusion_params(store, rng, channels, share_self_attention=False):
    c = channels
    for i in range(2):
        store.add(
            f"fusion.pre{i}.weight", uniform_init(rng, (c, c, 3, 3, 3), c * 27, c * 27)
        )
        store.add(f"fusion.pre{i}.bias", np.zeros(c))
    streams = ["self_cur", "cross"] if share_self_attention else ["self_cur", "self_prev", "cross"]
    for name in streams:
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"fusion.{name}.{w}", uniform_init(rng, (c, c), c, c))


def fusion_blocks(params, share_self_attention=False):
    def block(name, shared=False):
        return AttentionBlockParams(
            wq=params[f"fusion.{name}.wq"],
            wk=params[f"fusion.{name}.wk"],
            wv=params[f"fusion.{name}.wv"],
            wo=params[f"fusion.{name}.wo"],
            shared=shared,
        )

    cur = block("self_cur", shared=share_self_attention)
    prev = cur if share_self_attention else block("self_prev")
    return cur, prev, block("cross")


def pre_fusion_convs(v, params):
    """Two shared 3-D conv layers applied to a volume before fusion."""
    x = ad.transpose(v.features, (1, 0, 2, 3))
    x = leaky_relu(ad.conv3d(x, params["fusion.pre0.weight"], params["fusion.pre0.bias"]))
    x = ad.conv3d(x, params["fusion.pre1.weight"], params["fusion.pre1.bias"])
    return CostVolume(v.planes, ad.transpose(x, (1, 0, 2, 3)), validity=v.validity)


def _to_rays(features):
    d, c, h, w = features.shape
    return ad.reshape(ad.transpose(features, (2, 3, 0, 1)), (h * w, d, c))


def _from_rays(rays, shape):
    d, c, h, w = shape
    return ad.transpose(ad.reshape(rays, (h, w, d, c)), (2, 3, 0, 1))


def fuse_volumes(
    current,
    previous_aligned,
    params,
    *,
    residual=True,
    heads=1,
    share_self_attention=False,
    mask_invalid_previous=False,
    ray_order=None,
    ray_chunk=None,
):
    """Fuse the current cost volume with the aligned previous one, ray by ray.

    With ``previous_aligned`` None (first frame / single-view mode) only the
    current volume's self-attention runs.  ``ray_order`` permutes the ray
    processing order and ``ray_chunk`` bounds rays in flight; neither changes
    the result.
    """
    d, c, h, w = current.features.shape
    if previous_aligned is not None and previous_aligned.features.shape != (d, c, h, w):
        raise DimensionError(
            f"volume shapes disagree: {current.features.shape} vs {previous_aligned.features.shape}"
        )
    sa_block, sa_prev_block, cross_block = fusion_blocks(params, share_self_attention)
    g_cur = pre_fusion_convs(current, params)
    pe = depth_positional_encoding(d, c)
    x_cur = _to_rays(g_cur.features) + pe

    x_prev = None
    key_bias = None
    any_valid = None
    if previous_aligned is not None:
        g_prev = pre_fusion_convs(previous_aligned, params)
        x_prev = _to_rays(g_prev.features) + pe
        if mask_invalid_previous and previous_aligned.validity is not None:
            vmask = previous_aligned.validity.transpose(1, 2, 0).reshape(h * w, d)
            key_bias = np.where(vmask, 0.0, -_MASK_PENALTY)[:, None, :]
            any_valid = vmask.any(axis=1).astype(np.float64)[:, None, None]

    n = h * w
    if ray_order is None:
        ray_order = np.arange(n)
    else:
        ray_order = np.asarray(ray_order)
    inverse = np.argsort(ray_order)
    chunk = n if ray_chunk is None else int(ray_chunk)

    def run(rays_slice):
        xq = x_cur[ray_order[rays_slice]]
        sa_cur = attention(xq, xq, xq, sa_block, heads=heads)
        if x_prev is None:
            return sa_cur
        xp = x_prev[ray_order[rays_slice]]
        sa_prev = attention(xp, xp, xp, sa_prev_block, heads=heads)
        bias = None if key_bias is None else key_bias[ray_order[rays_slice]]
        ca = attention(sa_cur, sa_prev, sa_prev, cross_block, heads=heads, score_bias=bias)
        if any_valid is not None:
            ca = ca * Tensor(any_valid[ray_order[rays_slice]])
        return ca

    pieces = [run(slice(i, min(i + chunk, n))) for i in range(0, n, chunk)]
    fused = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    fused = fused[inverse]
    out = _from_rays(fused, (d, c, h, w))
    if residual:
        out = out + g_cur.features
    return CostVolume(current.planes, out)


def fuse_volumes_naive(current, previous_aligned, params, *, residual=True, heads=1, share_self_attention=False):
    """Whole-volume attention reference path: every voxel of a volume is a
    token, so score buffers hold (D*H*W)^2 entries.  Only meant for small
    benchmark sizes; numerically it is a different estimator, not an oracle
    for the ray-wise path."""
    d, c, h, w = current.features.shape
    sa_block, sa_prev_block, cross_block = fusion_blocks(params, share_self_attention)
    g_cur = pre_fusion_convs(current, params)
    pe_vox = np.repeat(depth_positional_encoding(d, c).data, h * w, axis=0)

    def tokens(volume):
        flat = ad.reshape(ad.transpose(volume.features, (0, 2, 3, 1)), (d * h * w, c))
        return ad.reshape(flat + Tensor(pe_vox), (1, d * h * w, c))

    x_cur = tokens(g_cur)
    sa_cur = attention(x_cur, x_cur, x_cur, sa_block, heads=heads)
    if previous_aligned is None:
        fused = sa_cur
    else:
        g_prev = pre_fusion_convs(previous_aligned, params)
        x_prev = tokens(g_prev)
        sa_prev = attention(x_prev, x_prev, x_prev, sa_prev_block, heads=heads)
        fused = attention(sa_cur, sa_prev, sa_prev, cross_block, heads=heads)
    out = ad.transpose(ad.reshape(ad.reshape(fused, (d * h * w, c)), (d, h, w, c)), (0, 3, 1, 2))
    if residual:
        out = out + g_cur.features
    return CostVolume(current.planes, out)
