"""Cross-scale similarity learning.

One shared linear projector maps region-level features and per-region
patch-mean features into a common space; the squared difference between
the two cosine-similarity matrices is the consistency loss. The region
branch is detached, so the loss trains the patch-level blocks and the
projector while leaving the region-level pathway untouched.
"""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

log = logging.getLogger("conslide.cssl")

_NORM_FLOOR = 1e-24  # added under the square root; floors each row norm at 1e-12


class CsslProjector:
    """Shared linear map used by both similarity branches."""

    def __init__(self, channels: int, dim: int, rng):
        self.channels = channels
        self.dim = dim
        self.weight = Tensor(0.02 * rng.standard_normal((channels, dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    @classmethod
    def identity(cls, channels: int) -> "CsslProjector":
        proj = cls(channels, channels, np.random.default_rng(0))
        proj.weight.data = np.eye(channels)
        proj.bias.data = np.zeros(channels)
        return proj

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(
                f"projector expects {self.channels} channels, got input shape {x.shape}"
            )
        return T.linear(x, self.weight, self.bias)


def similarity_matrix(vectors: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows of [M, D]; symmetric, ~unit diagonal.

    Row norms are floored at 1e-12 so zero rows yield zero similarity
    instead of a division failure; such rows are reported in the log.
    """
    if vectors.ndim != 2:
        raise ShapeError(f"similarity_matrix expects [M, D], got {vectors.shape}")
    sumsq = T.sum_axis(T.mul(vectors, vectors), axis=1, keepdims=True)
    if np.any(sumsq.data < 1e-18):
        log.warning("similarity_matrix: near-zero row norm guarded (min sumsq %.3e)", float(sumsq.data.min()))
    inv_norm = T.pow_scalar(T.add_scalar(sumsq, _NORM_FLOOR), -0.5)
    unit = T.mul(vectors, T.broadcast_to(inv_norm, vectors.shape))
    return T.matmul(unit, T.transpose_last2(unit))


def patch_scale_regions(pt_outputs: Tensor) -> Tensor:
    """Mean of the patch-level outputs within each region: [M, N, C] -> [M, C]."""
    if pt_outputs.ndim != 3:
        raise ShapeError(f"patch_scale_regions expects [M, N, C], got {pt_outputs.shape}")
    return T.mean_axis(pt_outputs, axis=1)


def cssl_loss(region_feats: Tensor, pt_outputs: Tensor, projector: CsslProjector) -> Tensor:
    """Sum of squared differences between the two cosine-similarity matrices.

    The region branch is detached (stop-gradient) before projection; the
    patch branch keeps its gradient. For a single region both matrices are
    the trivial [[1]], so the loss is a hard zero.
    """
    m = region_feats.shape[0]
    if pt_outputs.shape[0] != m or pt_outputs.shape[-1] != region_feats.shape[-1]:
        raise ShapeError(
            f"region features {region_feats.shape} and patch outputs {pt_outputs.shape} disagree"
        )
    if m == 1:
        return Tensor(0.0)
    region_side = similarity_matrix(projector(T.detach(region_feats)))
    patch_side = similarity_matrix(projector(patch_scale_regions(pt_outputs)))
    diff = T.sub(region_side, patch_side)
    return T.sum_all(T.mul(diff, diff))
