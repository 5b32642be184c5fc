"""Two-stream scoring: global class-token embedding plus top-k pooled patch similarities.

Per label i the score is

    s_i = <z_i, e_cls> + topk_mean([<z_i, e_1>, ..., <z_i, e_N>], k)

with the global or local term dropped in the single-head ablation modes.
Image-side embeddings are left unnormalized; label rows are unit norm.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor_io
from .autodiff import KOutOfRange, ShapeMismatch, Tensor
from .labels import LabelEmbeddingTable
from .vit import BackboneOutput

HEAD_MODES = ("both", "global", "local")


@dataclass
class TwoStreamParams:
    """Global head: one linear layer. Local head: two linear layers with GELU."""

    global_w: Tensor  # D x D_e
    global_b: Tensor  # D_e
    local_w1: Tensor  # D x D
    local_b1: Tensor  # D
    local_w2: Tensor  # D x D_e
    local_b2: Tensor  # D_e

    @property
    def embed_dim(self) -> int:
        return self.global_w.shape[1]

    def named(self, prefix: str = "heads") -> dict[str, Tensor]:
        return {
            f"{prefix}.global_w": self.global_w,
            f"{prefix}.global_b": self.global_b,
            f"{prefix}.local_w1": self.local_w1,
            f"{prefix}.local_b1": self.local_b1,
            f"{prefix}.local_w2": self.local_w2,
            f"{prefix}.local_b2": self.local_b2,
        }


def init_two_stream(rng: np.random.Generator, width: int, embed_dim: int) -> TwoStreamParams:
    return TwoStreamParams(
        global_w=ad.tensor(rng.normal(0.0, 0.02, (width, embed_dim)), requires_grad=True),
        global_b=ad.tensor(np.zeros(embed_dim), requires_grad=True),
        local_w1=ad.tensor(rng.normal(0.0, 0.02, (width, width)), requires_grad=True),
        local_b1=ad.tensor(np.zeros(width), requires_grad=True),
        local_w2=ad.tensor(rng.normal(0.0, 0.02, (width, embed_dim)), requires_grad=True),
        local_b2=ad.tensor(np.zeros(embed_dim), requires_grad=True),
    )


@dataclass
class EmbeddingPair:
    e_cls: Tensor    # 1 x D_e
    e_patch: Tensor  # N x D_e


def two_stream(out: BackboneOutput, params: TwoStreamParams) -> EmbeddingPair:
    """Map the class row through the global head and every patch row through the local head."""
    e_cls = ad.add_rowvec(ad.matmul(out.o_cls, params.global_w), params.global_b)
    hidden = ad.gelu(ad.add_rowvec(ad.matmul(out.o_patch, params.local_w1), params.local_b1))
    e_patch = ad.add_rowvec(ad.matmul(hidden, params.local_w2), params.local_b2)
    return EmbeddingPair(e_cls=e_cls, e_patch=e_patch)


def score(emb: EmbeddingPair, labels: LabelEmbeddingTable, k: int, heads: str = "both") -> Tensor:
    """Per-label scores as a length-d tensor in table row order."""
    if heads not in HEAD_MODES:
        raise ValueError(f"heads must be one of {HEAD_MODES}, got {heads!r}")
    if emb.e_cls.shape[1] != labels.z.shape[1]:
        raise ShapeMismatch(
            f"embedding dim {emb.e_cls.shape[1]} vs label dim {labels.z.shape[1]}"
        )
    n = emb.e_patch.shape[0]
    if heads != "global" and not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}] patches")
    d = len(labels.label_ids)

    terms = []
    if heads != "local":
        terms.append(ad.reshape(ad.matmul(labels.z, ad.transpose(emb.e_cls)), (d,)))
    if heads != "global":
        sims = ad.matmul(emb.e_patch, ad.transpose(labels.z))  # N x d
        terms.append(ad.topk_mean_cols(sims, k))
    return terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])


@dataclass
class ScoreMatrix:
    """Per-image per-label scores; columns follow the label table row order."""

    scores: np.ndarray  # B x d
    label_ids: tuple[int, ...]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.label_ids):
            raise ShapeMismatch(
                f"score matrix {self.scores.shape} vs {len(self.label_ids)} labels"
            )


def save_score_matrix(base: str | Path, mat: ScoreMatrix) -> None:
    """Write base.csv (header of label ids) and a lossless base.mkt1 twin."""
    base = Path(base)
    with open(base.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([str(lid) for lid in mat.label_ids])
        for row in mat.scores:
            w.writerow([repr(float(v)) for v in row])
    tensor_io.write_tensor(base.with_suffix(".mkt1"), mat.scores)


def load_score_matrix(base: str | Path) -> ScoreMatrix:
    base = Path(base)
    with open(base.with_suffix(".csv"), newline="") as f:
        header = next(csv.reader(f))
    scores = tensor_io.read_tensor(base.with_suffix(".mkt1"))
    return ScoreMatrix(scores=scores, label_ids=tuple(int(h) for h in header))
