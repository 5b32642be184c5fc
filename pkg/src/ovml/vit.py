"""Trainable vision transformer backbone.

Pre-norm residual blocks: the token sequence is [cls, patches] plus a
position embedding, each block applies multi-head self-attention and a
two-layer GELU MLP, both on normalized inputs inside the residual
branch. The final sequence splits into a class row and patch rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor


class BadPatchSize(ValueError):
    pass


@dataclass
class PatchSequence:
    """Raster-order flattened patches: n rows of length patch_size**2 * channels."""

    patches: Tensor
    patch_size: int
    channels: int

    @property
    def count(self) -> int:
        return self.patches.shape[0]


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut a (C, H, W) image into non-overlapping flattened square patches.

    Patches are ordered row-major over the patch grid; each patch is
    flattened channel-major (all of channel 0, then channel 1, ...).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise BadPatchSize(f"patch size {patch_size} does not tile {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    rows = []
    for i in range(gh):
        for j in range(gw):
            block = image[:, i * patch_size:(i + 1) * patch_size, j * patch_size:(j + 1) * patch_size]
            rows.append(block.reshape(-1))
    return PatchSequence(ad.tensor(np.stack(rows)), patch_size, c)


@dataclass
class BlockParams:
    wq: list[Tensor]  # per head, D x d_h
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor        # D x D
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class VitParams:
    patch_proj: Tensor  # (P^2 * C) x D
    cls_token: Tensor   # 1 x D
    pos_embed: Tensor   # (1 + N) x D
    blocks: list[BlockParams] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.patch_proj.shape[1]

    @property
    def heads(self) -> int:
        return len(self.blocks[0].wq) if self.blocks else 1

    def named(self, prefix: str = "vit") -> dict[str, Tensor]:
        out = {
            f"{prefix}.patch_proj": self.patch_proj,
            f"{prefix}.cls_token": self.cls_token,
            f"{prefix}.pos_embed": self.pos_embed,
        }
        for i, blk in enumerate(self.blocks):
            for h, (q, k, v) in enumerate(zip(blk.wq, blk.wk, blk.wv)):
                out[f"{prefix}.b{i}.wq{h}"] = q
                out[f"{prefix}.b{i}.wk{h}"] = k
                out[f"{prefix}.b{i}.wv{h}"] = v
            out[f"{prefix}.b{i}.wo"] = blk.wo
            out[f"{prefix}.b{i}.mlp_w1"] = blk.mlp_w1
            out[f"{prefix}.b{i}.mlp_b1"] = blk.mlp_b1
            out[f"{prefix}.b{i}.mlp_w2"] = blk.mlp_w2
            out[f"{prefix}.b{i}.mlp_b2"] = blk.mlp_b2
            out[f"{prefix}.b{i}.ln1_gain"] = blk.ln1_gain
            out[f"{prefix}.b{i}.ln1_bias"] = blk.ln1_bias
            out[f"{prefix}.b{i}.ln2_gain"] = blk.ln2_gain
            out[f"{prefix}.b{i}.ln2_bias"] = blk.ln2_bias
        return out


@dataclass
class BackboneOutput:
    o_cls: Tensor    # 1 x D
    o_patch: Tensor  # N x D


INIT_STD = 0.02


def init_block(rng: np.random.Generator, width: int, heads: int, trainable: bool = True) -> BlockParams:
    if width % heads:
        raise ShapeMismatch(f"width {width} not divisible by {heads} heads")
    d_h = width // heads

    def w(*shape):
        return ad.tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=trainable)

    return BlockParams(
        wq=[w(width, d_h) for _ in range(heads)],
        wk=[w(width, d_h) for _ in range(heads)],
        wv=[w(width, d_h) for _ in range(heads)],
        wo=w(width, width),
        mlp_w1=w(width, width),
        mlp_b1=ad.tensor(np.zeros(width), requires_grad=trainable),
        mlp_w2=w(width, width),
        mlp_b2=ad.tensor(np.zeros(width), requires_grad=trainable),
        ln1_gain=ad.tensor(np.ones(width), requires_grad=trainable),
        ln1_bias=ad.tensor(np.zeros(width), requires_grad=trainable),
        ln2_gain=ad.tensor(np.ones(width), requires_grad=trainable),
        ln2_bias=ad.tensor(np.zeros(width), requires_grad=trainable),
    )


def init_vit(
    rng: np.random.Generator,
    patch_len: int,
    n_patches: int,
    width: int,
    heads: int,
    depth: int,
) -> VitParams:
    """Seeded normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    return VitParams(
        patch_proj=ad.tensor(rng.normal(0.0, INIT_STD, (patch_len, width)), requires_grad=True),
        cls_token=ad.tensor(rng.normal(0.0, INIT_STD, (1, width)), requires_grad=True),
        pos_embed=ad.tensor(rng.normal(0.0, INIT_STD, (1 + n_patches, width)), requires_grad=True),
        blocks=[init_block(rng, width, heads) for _ in range(depth)],
    )


def msa(x: Tensor, block: BlockParams) -> Tensor:
    """Multi-head self-attention: scaled dot-product per head, concat, project."""
    d_h = block.wq[0].shape[1]
    heads = []
    for wq, wk, wv in zip(block.wq, block.wk, block.wv):
        q = ad.matmul(x, wq)
        k = ad.matmul(x, wk)
        v = ad.matmul(x, wv)
        att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_h)))
        heads.append(ad.matmul(att, v))
    merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.matmul(merged, block.wo)


def _mlp(x: Tensor, block: BlockParams) -> Tensor:
    h = ad.gelu(ad.add_rowvec(ad.matmul(x, block.mlp_w1), block.mlp_b1))
    return ad.add_rowvec(ad.matmul(h, block.mlp_w2), block.mlp_b2)


def encoder_block(x: Tensor, block: BlockParams) -> Tensor:
    y = ad.add(x, msa(ad.layer_norm(x, block.ln1_gain, block.ln1_bias), block))
    return ad.add(y, _mlp(ad.layer_norm(y, block.ln2_gain, block.ln2_bias), block))


def vit_forward(seq: PatchSequence, params: VitParams) -> BackboneOutput:
    if seq.patches.shape[1] != params.patch_proj.shape[0]:
        raise ShapeMismatch(
            f"patch vectors of length {seq.patches.shape[1]} vs projection "
            f"input {params.patch_proj.shape[0]}"
        )
    n = seq.count
    if params.pos_embed.shape[0] != 1 + n:
        raise ShapeMismatch(f"position table rows {params.pos_embed.shape[0]} != 1 + {n}")
    projected = ad.matmul(seq.patches, params.patch_proj)
    x = ad.add(ad.concat([params.cls_token, projected], axis=0), params.pos_embed)
    for block in params.blocks:
        x = encoder_block(x, block)
    return BackboneOutput(o_cls=ad.slice_rows(x, 0, 1), o_patch=ad.slice_rows(x, 1, 1 + n))
