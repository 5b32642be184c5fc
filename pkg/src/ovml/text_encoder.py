"""Frozen surrogate text encoder.

Stands in for a pretrained text tower: a seeded, immutable token-mixing
transformer over [context vectors..., label token], pooled at the last
token position, projected into the shared embedding space, and
L2-normalized. Only the context vectors are ever trainable; every
surrogate weight stays a non-gradient leaf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .vit import BlockParams, encoder_block, init_block


@dataclass
class TextSurrogateParams:
    blocks: list[BlockParams]
    out_proj: Tensor               # D_t x D_e, frozen
    tokens: dict[int, Tensor]      # label id -> frozen (D_t,) token vector

    @property
    def token_width(self) -> int:
        return self.out_proj.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.out_proj.shape[1]

    def named(self, prefix: str = "surrogate") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {f"{prefix}.out_proj": self.out_proj}
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
        for label_id in sorted(self.tokens):
            out[f"{prefix}.token{label_id}"] = self.tokens[label_id]
        return out


def init_text_surrogate(
    rng: np.random.Generator,
    token_width: int,
    embed_dim: int,
    depth: int,
    heads: int,
    token_vectors: dict[int, np.ndarray],
) -> TextSurrogateParams:
    """Build the frozen tower; bit-identical for identical rng state and tokens."""
    blocks = [init_block(rng, token_width, heads, trainable=False) for _ in range(depth)]
    out_proj = ad.tensor(rng.normal(0.0, 0.02, (token_width, embed_dim)))
    tokens = {
        int(lid): ad.tensor(np.asarray(vec, dtype=np.float64))
        for lid, vec in token_vectors.items()
    }
    for t in tokens.values():
        if t.shape != (token_width,):
            raise ShapeMismatch(f"token vector shape {t.shape}, expected ({token_width},)")
    return TextSurrogateParams(blocks=blocks, out_proj=out_proj, tokens=tokens)


def text_surrogate_encode(context: Tensor, label_token: Tensor, params: TextSurrogateParams) -> Tensor:
    """Encode [context..., label token] into a unit-norm label embedding.

    Gradients reach only the context rows; all surrogate weights and the
    token vector are frozen leaves.
    """
    if context.data.ndim != 2 or context.shape[1] != params.token_width:
        raise ShapeMismatch(f"context shape {context.shape} vs token width {params.token_width}")
    if label_token.shape != (params.token_width,):
        raise ShapeMismatch(f"label token shape {label_token.shape}")
    x = ad.concat([context, ad.reshape(label_token, (1, params.token_width))], axis=0)
    for block in params.blocks:
        x = encoder_block(x, block)
    last = ad.slice_rows(x, x.shape[0] - 1, x.shape[0])
    projected = ad.reshape(ad.matmul(last, params.out_proj), (params.embed_dim,))
    return ad.l2_normalize(projected)
