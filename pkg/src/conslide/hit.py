"""Hierarchical two-scale transformer over feature bags.

Each of the stacked layers runs three blocks: a patch-level transformer
shared across regions, an interaction block that feeds region context to
patches and pooled patch content back to regions, and a region-level
transformer over the region tokens plus one learnable class token. The
class token of the last layer feeds a linear head for the slide-level
prediction; its attention rows drive the rollout attribution scores.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import (
    BadMagicError,
    FeatureBag,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .tensor import AttentionParams, ConfigurationError, Tensor

CSCK_MAGIC = b"CSCK"
CSCK_VERSION = 1

INIT_STD = 0.02


class RolloutStateError(RuntimeError):
    """Rollout was requested without retained attention maps."""


@dataclass
class HitConfig:
    num_layers: int
    channels: int
    num_heads: int
    num_classes_total: int
    mlp_hidden: int = 0  # 0 means the default 4 * channels
    conv_kernel: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.channels < 1 or self.channels % self.num_heads != 0:
            raise ConfigurationError(
                f"channels {self.channels} must be a positive multiple of heads {self.num_heads}"
            )
        if self.num_classes_total < 2:
            raise ConfigurationError("need at least two output classes")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.mlp_hidden == 0:
            self.mlp_hidden = 4 * self.channels
        if self.mlp_hidden < 1:
            raise ConfigurationError(f"mlp_hidden must be positive, got {self.mlp_hidden}")
        if self.ln_eps <= 0:
            raise ConfigurationError(f"ln_eps must be > 0, got {self.ln_eps}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "channels": self.channels,
            "num_heads": self.num_heads,
            "num_classes_total": self.num_classes_total,
            "mlp_hidden": self.mlp_hidden,
            "conv_kernel": self.conv_kernel,
            "ln_eps": self.ln_eps,
        }


def _param(rng, shape, std=INIT_STD):
    return Tensor(std * rng.standard_normal(shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class BlockParams:
    """One pre-norm transformer layer: LN, attention, LN, two-layer MLP."""

    def __init__(self, channels: int, mlp_hidden: int, rng):
        c, h = channels, mlp_hidden
        self.ln1_gamma = _ones((c,))
        self.ln1_beta = _zeros((c,))
        self.attn = AttentionParams(
            wq=_param(rng, (c, c)), bq=_zeros((c,)),
            wk=_param(rng, (c, c)), bk=_zeros((c,)),
            wv=_param(rng, (c, c)), bv=_zeros((c,)),
            wo=_param(rng, (c, c)), bo=_zeros((c,)),
        )
        self.ln2_gamma = _ones((c,))
        self.ln2_beta = _zeros((c,))
        self.mlp_w1 = _param(rng, (c, h))
        self.mlp_b1 = _zeros((h,))
        self.mlp_w2 = _param(rng, (h, c))
        self.mlp_b2 = _zeros((c,))

    def named(self):
        a = self.attn
        yield "ln1.gamma", self.ln1_gamma
        yield "ln1.beta", self.ln1_beta
        yield "attn.wq", a.wq
        yield "attn.bq", a.bq
        yield "attn.wk", a.wk
        yield "attn.bk", a.bk
        yield "attn.wv", a.wv
        yield "attn.bv", a.bv
        yield "attn.wo", a.wo
        yield "attn.bo", a.bo
        yield "ln2.gamma", self.ln2_gamma
        yield "ln2.beta", self.ln2_beta
        yield "mlp.w1", self.mlp_w1
        yield "mlp.b1", self.mlp_b1
        yield "mlp.w2", self.mlp_w2
        yield "mlp.b2", self.mlp_b2


class HitLayer:
    def __init__(self, config: HitConfig, rng):
        c = config.channels
        self.pt = BlockParams(c, config.mlp_hidden, rng)
        self.conv_w = _param(rng, (config.conv_kernel, c, c))
        self.conv_b = _zeros((c,))
        self.rt = BlockParams(c, config.mlp_hidden, rng)


class HitModel:
    """Stacked layers plus class token and linear head.

    Parameters partition into disjoint groups keyed by name prefix:
    ``pt`` and ``rt`` transformer blocks, ``hi`` interaction convolutions,
    and ``head`` (class token plus classifier).
    """

    def __init__(self, config: HitConfig, rng):
        self.config = config
        self.layers = [HitLayer(config, rng) for _ in range(config.num_layers)]
        self.class_token = _param(rng, (1, config.channels))
        self.head_w = _param(rng, (config.channels, config.num_classes_total))
        self.head_b = _zeros((config.num_classes_total,))

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"pt.{i}.{n}", p) for n, p in layer.pt.named())
            out.append((f"hi.{i}.conv.w", layer.conv_w))
            out.append((f"hi.{i}.conv.b", layer.conv_b))
            out.extend((f"rt.{i}.{n}", p) for n, p in layer.rt.named())
        out.append(("head.class_token", self.class_token))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]


def _block_forward(block: BlockParams, x: Tensor, heads: int, eps: float, return_weights=False):
    normed = T.layer_norm(x, block.ln1_gamma, block.ln1_beta, eps)
    if return_weights:
        attended, weights = T.msa(normed, block.attn, heads, return_weights=True)
    else:
        attended = T.msa(normed, block.attn, heads)
        weights = None
    h = T.add(x, attended)
    normed2 = T.layer_norm(h, block.ln2_gamma, block.ln2_beta, eps)
    mlp = T.linear(T.relu(T.linear(normed2, block.mlp_w1, block.mlp_b1)), block.mlp_w2, block.mlp_b2)
    out = T.add(h, mlp)
    return (out, weights) if return_weights else out


def _check_layer(model: HitModel, layer: int):
    if not 1 <= layer <= model.config.num_layers:
        raise ConfigurationError(
            f"layer index {layer} outside 1..{model.config.num_layers}"
        )
    return model.layers[layer - 1]


def pt_forward(model: HitModel, layer: int, patches: Tensor) -> Tensor:
    """Patch-level transformer of one layer, applied per region (1-based layer)."""
    lay = _check_layer(model, layer)
    if patches.ndim != 3 or patches.shape[-1] != model.config.channels:
        raise T.ShapeError(
            f"pt_forward expects [M, N, {model.config.channels}], got {patches.shape}"
        )
    return _block_forward(lay.pt, patches, model.config.num_heads, model.config.ln_eps)


def hi_forward(model: HitModel, layer: int, patch_out: Tensor, regions: Tensor):
    """Interaction block: add region context to patches, pool patches into regions.

    Returns (patches + region vector per patch,
             regions + channelwise max over patches of conv(patch_out)).
    """
    lay = _check_layer(model, layer)
    m, n, c = patch_out.shape
    if regions.shape != (m, c):
        raise T.ShapeError(f"hi_forward: regions {regions.shape} do not match patches {patch_out.shape}")
    region_rows = T.broadcast_to(T.reshape(regions, (m, 1, c)), (m, n, c))
    patches = T.add(patch_out, region_rows)
    pooled = T.max_axis(T.conv1d_same(patch_out, lay.conv_w, lay.conv_b), axis=1)
    region_out = T.add(regions, pooled)
    return patches, region_out


def rt_forward(model: HitModel, layer: int, tokens: Tensor, return_weights: bool = False):
    """Region-level transformer over [class token; region tokens]."""
    lay = _check_layer(model, layer)
    if tokens.ndim != 2 or tokens.shape[-1] != model.config.channels:
        raise T.ShapeError(
            f"rt_forward expects [M+1, {model.config.channels}], got {tokens.shape}"
        )
    return _block_forward(
        lay.rt, tokens, model.config.num_heads, model.config.ln_eps, return_weights
    )


@dataclass
class HitOutput:
    logits: Tensor  # [num_classes_total]
    pt_last: Tensor  # final-layer patch-transformer output [M, N, C]
    region_features: Tensor  # final-layer region tokens [M, C], class token excluded
    attention: list | None = None  # per layer [heads, M+1, M+1] when retained


def hit_forward(model: HitModel, bag: FeatureBag, retain_attention: bool = False) -> HitOutput:
    """Run the full stack on one bag.

    The learnable class token is prepended once before layer 1 and carried
    through every region-level block; it never enters the interaction block.
    """
    cfg = model.config
    if bag.channels != cfg.channels:
        raise T.ShapeError(
            f"bag has {bag.channels} channels but the model expects {cfg.channels}"
        )
    patches = Tensor(bag.patch_features)
    regions = Tensor(bag.region_features)
    cls = model.class_token
    pt_out = None
    attention = [] if retain_attention else None
    for layer in range(1, cfg.num_layers + 1):
        pt_out = pt_forward(model, layer, patches)
        patches, region_mix = hi_forward(model, layer, pt_out, regions)
        tokens = T.concat_rows(cls, region_mix)
        if retain_attention:
            tokens, weights = rt_forward(model, layer, tokens, return_weights=True)
            attention.append(weights)
        else:
            tokens = rt_forward(model, layer, tokens)
        cls = T.slice_rows(tokens, 0, 1)
        regions = T.slice_rows(tokens, 1, tokens.shape[0])
    logits = T.reshape(T.linear(cls, model.head_w, model.head_b), (cfg.num_classes_total,))
    return HitOutput(logits=logits, pt_last=pt_out, region_features=regions, attention=attention)


def rollout_scores(attention_maps, num_regions: int) -> np.ndarray:
    """Attribution of the class token to regions via layered attention mixing.

    Per layer the head-averaged attention is mixed with the identity,
    A_bar = (A + I) / 2 row-renormalized; the product across layers is read
    at the class-token row, restricted to region columns, renormalized.
    """
    if not attention_maps:
        raise RolloutStateError("no retained attention maps; run a forward pass first")
    size = num_regions + 1
    rollout = np.eye(size)
    for weights in attention_maps:
        avg = weights.mean(axis=0)
        if avg.shape != (size, size):
            raise T.ShapeError(f"attention map {avg.shape} does not match {size} tokens")
        mixed = 0.5 * (avg + np.eye(size))
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        rollout = mixed @ rollout
    scores = rollout[0, 1:]
    return scores / scores.sum()


def attention_rollout(model: HitModel, bag: FeatureBag) -> np.ndarray:
    """Per-region probability scores for one bag (runs its own forward)."""
    with T.no_grad():
        out = hit_forward(model, bag, retain_attention=True)
    return rollout_scores(out.attention, bag.num_regions)


# ---------------------------------------------------------------------------
# checkpoints
#
# "CSCK": magic, u16 version, u32 entry count, then per entry a u16
# length-prefixed utf-8 name, u8 ndim, u32 dims, float64 little-endian data.
# Model/projector parameters and scalar "meta.*" entries share the format.


def _write_entry(f, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, model: HitModel, projector=None, meta: dict | None = None):
    """Write model (and optional projector) parameters plus scalar metadata."""
    cfg = model.config
    entries = [(f"model.{n}", p.data) for n, p in model.named_parameters()]
    if projector is not None:
        entries.extend((f"proj.{n}", p.data) for n, p in projector.named_parameters())
    meta_all = dict(cfg.to_dict())
    meta_all["has_projector"] = 1.0 if projector is not None else 0.0
    if projector is not None:
        meta_all["proj_dim"] = projector.dim
    if meta:
        meta_all.update(meta)
    entries.extend((f"meta.{k}", np.asarray(float(v))) for k, v in sorted(meta_all.items()))
    with open(path, "wb") as f:
        f.write(CSCK_MAGIC)
        f.write(struct.pack("<H", CSCK_VERSION))
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)


def _read_exact(f, n: int, path) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise TruncatedFileError(f"{path}: truncated checkpoint")
    return raw


def read_checkpoint(path):
    """Read a checkpoint into ({name: array}, {meta key: float})."""
    arrays, meta = {}, {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CSCK_MAGIC:
            raise BadMagicError(f"{path}: not a CSCK checkpoint")
        (version,) = struct.unpack("<H", _read_exact(f, 2, path))
        if version != CSCK_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, path))
            name = _read_exact(f, nlen, path).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, path))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, path))[0] for _ in range(ndim)
            )
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(_read_exact(f, size * 8, path), dtype="<f8").reshape(shape)
            if name.startswith("meta."):
                meta[name[5:]] = float(arr)
            else:
                arrays[name] = arr.astype(np.float64)
        if f.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after last entry")
    return arrays, meta


def load_checkpoint(path):
    """Reconstruct (model, projector-or-None, meta) from a checkpoint file."""
    from .cssl import CsslProjector  # local import: cssl depends on tensor only

    arrays, meta = read_checkpoint(path)
    cfg = HitConfig(
        num_layers=int(meta["num_layers"]),
        channels=int(meta["channels"]),
        num_heads=int(meta["num_heads"]),
        num_classes_total=int(meta["num_classes_total"]),
        mlp_hidden=int(meta["mlp_hidden"]),
        conv_kernel=int(meta["conv_kernel"]),
        ln_eps=float(meta["ln_eps"]),
    )
    model = HitModel(cfg, np.random.default_rng(0))
    for name, p in model.named_parameters():
        key = f"model.{name}"
        if key not in arrays:
            raise TruncatedFileError(f"{path}: missing parameter {key}")
        if arrays[key].shape != p.data.shape:
            raise UnsupportedVersionError(
                f"{path}: parameter {key} has shape {arrays[key].shape}, expected {p.data.shape}"
            )
        p.data = np.ascontiguousarray(arrays[key])
    projector = None
    if meta.get("has_projector"):
        projector = CsslProjector(cfg.channels, int(meta["proj_dim"]), np.random.default_rng(0))
        for name, p in projector.named_parameters():
            key = f"proj.{name}"
            if key not in arrays:
                raise TruncatedFileError(f"{path}: missing parameter {key}")
            p.data = np.ascontiguousarray(arrays[key])
    return model, projector, meta
