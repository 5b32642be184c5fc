"""Finite-difference verification of every differentiable path.

Each named check draws small random instances, rebuilds its scalar loss
from leaf data, and compares analytic against central-difference
gradients at relative tolerance 1e-4. Instance generators steer clear
of subgradient kinks (hinge margins at zero, top-k boundary ties, L1
ties); the exact-zero subgradient convention at those points is pinned
by unit tests instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .heads import EmbeddingPair, init_two_stream, score, two_stream
from .labels import LabelEmbeddingTable
from .losses import batch_mean, distill_loss, ranking_loss
from .seeds import substream
from .text_encoder import init_text_surrogate, text_surrogate_encode
from .vit import BackboneOutput, PatchSequence, init_block, init_vit, msa, vit_forward

GAP = 1e-3  # minimum distance from any kink


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    ok: bool

    def line(self) -> str:
        mark = "ok  " if self.ok else "FAIL"
        return f"{mark} {self.name:<28s} worst {self.worst:.3e} over {self.instances} instances"


def _param(rng, *shape) -> Tensor:
    return ad.tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def _randomize(leaves, rng, scale: float = 0.5) -> None:
    """Move init_* parameters to generic positions: nonzero biases, non-unit
    gains, and activations large enough that kink-gap conditions are
    satisfiable (0.02-scale init makes patch similarities ~1e-4, below GAP).
    """
    for t in leaves:
        t.data = rng.normal(0.0, scale, t.shape)


def _topk_safe_vector(rng, n: int, k: int) -> np.ndarray:
    """Values whose k-th/(k+1)-th sorted entries are separated by > GAP."""
    while True:
        v = rng.normal(0.0, 1.0, n)
        s = np.sort(v)[::-1]
        if k == n or s[k - 1] - s[k] > GAP:
            return v


def _scalarize(t: Tensor) -> Tensor:
    if t.data.shape == ():
        return t
    return ad.mean_all(t)


# --- single-op checks ---


def _check_matmul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    return lambda: _scalarize(ad.matmul(a, b)), [a, b]


def _check_softmax(rng):
    x = _param(rng, 4, 5)
    w = ad.tensor(rng.normal(0.0, 1.0, (4, 5)))  # constant shift keeps the instance generic
    return lambda: ad.mean_all(ad.softmax_rows(ad.add(x, w))), [x]


def _check_layernorm(rng):
    x, gain, bias = _param(rng, 4, 6), _param(rng, 6), _param(rng, 6)
    return lambda: ad.mean_all(ad.layer_norm(x, gain, bias)), [x, gain, bias]


def _check_gelu(rng):
    x = _param(rng, 3, 4)
    return lambda: ad.mean_all(ad.gelu(x)), [x]


def _check_topk_mean(rng):
    k = int(rng.integers(1, 6))
    v = ad.tensor(_topk_safe_vector(rng, 7, k), requires_grad=True)
    return lambda: ad.topk_mean(v, k), [v]


def _check_topk_mean_cols(rng):
    k = int(rng.integers(1, 4))
    cols = np.stack([_topk_safe_vector(rng, 5, k) for _ in range(3)], axis=1)
    x = ad.tensor(cols, requires_grad=True)
    return lambda: ad.mean_all(ad.topk_mean_cols(x, k)), [x]


def _check_linear_ops(rng):
    """concat / slice / transpose / reshape / add / add_rowvec / scale in one chain."""
    a, b, c = _param(rng, 3, 4), _param(rng, 2, 4), _param(rng, 4)
    def build():
        joined = ad.concat([a, b], axis=0)           # 5 x 4
        shifted = ad.add_rowvec(joined, c)
        cut = ad.slice_rows(shifted, 1, 4)           # 3 x 4
        flipped = ad.transpose(cut)                  # 4 x 3
        flat = ad.reshape(flipped, (2, 6))
        return ad.mean_all(ad.scale(ad.add(flat, flat), 0.5))
    return build, [a, b, c]


def _check_l2_normalize(rng):
    v = _param(rng, 6)
    return lambda: ad.mean_all(ad.l2_normalize(v)), [v]


# --- composite checks ---


def _check_msa(rng):
    block = init_block(rng, width=4, heads=2)
    x = _param(rng, 4, 4)
    leaves = [x, *block.wq, *block.wk, *block.wv, block.wo]
    _randomize(leaves, rng)
    return lambda: ad.mean_all(msa(x, block)), leaves


def _check_vit_forward(rng):
    params = init_vit(rng, patch_len=4, n_patches=3, width=4, heads=2, depth=1)
    seq = PatchSequence(ad.tensor(rng.normal(0.0, 1.0, (3, 4))), patch_size=2, channels=1)
    leaves = list(params.named().values())
    _randomize(leaves, rng)
    def build():
        out = vit_forward(seq, params)
        return ad.mean_all(ad.concat([out.o_cls, out.o_patch], axis=0))
    return build, leaves


def _check_two_stream(rng):
    params = init_two_stream(rng, width=4, embed_dim=3)
    o_cls, o_patch = _param(rng, 1, 4), _param(rng, 3, 4)
    leaves = [o_cls, o_patch, *params.named().values()]
    _randomize(leaves, rng)
    def build():
        emb = two_stream(BackboneOutput(o_cls=o_cls, o_patch=o_patch), params)
        return ad.mean_all(ad.concat([emb.e_cls, emb.e_patch], axis=0))
    return build, leaves


def _rows_unit(rng, d, dim):
    z = rng.normal(0.0, 1.0, (d, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _score_instance(rng, mode: str):
    """Embeddings + table with comfortable top-k gaps in the local stream."""
    d, dim, n, k = 4, 5, 6, 2
    table = LabelEmbeddingTable(
        z=ad.tensor(_rows_unit(rng, d, dim)), label_ids=tuple(range(d)), provenance="fixed"
    )
    while True:
        e_cls = _param(rng, 1, dim)
        e_patch = _param(rng, n, dim)
        sims = e_patch.data @ table.matrix().T
        gaps = np.sort(sims, axis=0)[::-1]
        if mode == "global" or (gaps[k - 1] - gaps[k]).min() > GAP:
            return e_cls, e_patch, table, k


def _check_score(rng, _modes=("both", "global", "local")):
    mode = _modes[int(rng.integers(0, len(_modes)))]
    e_cls, e_patch, table, k = _score_instance(rng, mode)
    def build():
        s = score(EmbeddingPair(e_cls=e_cls, e_patch=e_patch), table, k=k, heads=mode)
        return ad.mean_all(s)
    return build, [e_cls, e_patch]


def _ranking_instance(rng, d: int):
    """Score vector and positives with every pair margin away from the hinge."""
    while True:
        s = rng.normal(0.0, 1.5, d)
        n_pos = int(rng.integers(1, d - 1))
        pos = list(rng.choice(d, n_pos, replace=False))
        neg = [i for i in range(d) if i not in pos]
        margins = 1.0 + s[neg][None, :] - s[pos][:, None]
        if np.abs(margins).min() > GAP:
            return s, pos


def _check_ranking_loss(rng):
    s_data, pos = _ranking_instance(rng, 6)
    s = ad.tensor(s_data, requires_grad=True)
    return lambda: ranking_loss(s, pos), [s]


def _check_distill_loss(rng):
    while True:
        a = rng.normal(0.0, 1.0, 5)
        b = rng.normal(0.0, 1.0, 5)
        if np.abs(a - b).min() > GAP:
            break
    student = ad.tensor(a, requires_grad=True)
    return lambda: distill_loss(student, b), [student]


def _check_text_encode(rng):
    tokens = {i: rng.normal(0.0, 1.0, 6) for i in range(3)}
    surrogate = init_text_surrogate(rng, token_width=6, embed_dim=4, depth=1, heads=2, token_vectors=tokens)
    context = _param(rng, 3, 6)
    def build():
        parts = [
            ad.reshape(text_surrogate_encode(context, surrogate.tokens[i], surrogate), (1, 4))
            for i in range(3)
        ]
        return ad.mean_all(ad.concat(parts, axis=0))
    return build, [context]


def _check_stage1_loss(rng):
    """Full per-image pipeline: patches -> backbone -> heads -> rank + distill."""
    d, dim, k = 3, 3, 2
    vit = init_vit(rng, patch_len=4, n_patches=3, width=4, heads=2, depth=1)
    streams = init_two_stream(rng, width=4, embed_dim=dim)
    table = LabelEmbeddingTable(
        z=ad.tensor(_rows_unit(rng, d, dim)), label_ids=tuple(range(d)), provenance="fixed"
    )
    leaves = list(vit.named().values()) + list(streams.named().values())
    teacher = rng.normal(0.0, 1.0, dim)
    for attempt in range(1000):
        if attempt % 50 == 0:
            _randomize(leaves, rng)
        seqs = [
            PatchSequence(ad.tensor(rng.normal(0.0, 1.0, (3, 4))), patch_size=2, channels=1)
            for _ in range(2)
        ]
        positives = [sorted(rng.choice(d, int(rng.integers(1, 3)), replace=False)) for _ in range(2)]
        def build():
            rank_terms, dist_terms = [], []
            for seq, pos in zip(seqs, positives):
                emb = two_stream(vit_forward(seq, vit), streams)
                s = score(emb, table, k=k, heads="both")
                rank_terms.append(ranking_loss(s, list(pos)))
                dist_terms.append(distill_loss(ad.reshape(emb.e_cls, (dim,)), teacher))
            return ad.add(batch_mean(rank_terms), ad.scale(batch_mean(dist_terms), 0.7))
        if _stage1_kink_free(seqs, positives, vit, streams, table, teacher, k):
            return build, leaves
    raise RuntimeError("no kink-free instance found for the full pipeline loss")


def _stage1_kink_free(seqs, positives, vit, streams, table, teacher, k) -> bool:
    for seq, pos in zip(seqs, positives):
        emb = two_stream(vit_forward(seq, vit), streams)
        sims = emb.e_patch.data @ table.matrix().T
        gaps = np.sort(sims, axis=0)[::-1]
        if (gaps[k - 1] - gaps[k]).min() < GAP:
            return False
        s = score(emb, table, k=k, heads="both").data
        neg = [i for i in range(len(s)) if i not in pos]
        margins = 1.0 + s[neg][None, :] - s[np.asarray(pos)][:, None]
        if np.abs(margins).min() < GAP:
            return False
        if np.abs(emb.e_cls.data.reshape(-1) - teacher).min() < GAP:
            return False
    return True


def _check_stage2_loss(rng):
    """Ranking through a live label table: gradients reach only the context."""
    d, dim = 3, 4
    tokens = {i: rng.normal(0.0, 1.0, 6) for i in range(d)}
    surrogate = init_text_surrogate(rng, token_width=6, embed_dim=dim, depth=1, heads=2, token_vectors=tokens)
    context = _param(rng, 2, 6)
    e_patch = rng.normal(0.0, 1.0, (4, dim))
    e_cls = rng.normal(0.0, 1.0, (1, dim))
    k = 2

    def table():
        parts = [
            ad.reshape(text_surrogate_encode(context, surrogate.tokens[i], surrogate), (1, dim))
            for i in range(d)
        ]
        return LabelEmbeddingTable(z=ad.concat(parts, axis=0), label_ids=tuple(range(d)), provenance="prompt")

    for attempt in range(1000):
        pos = sorted(rng.choice(d, int(rng.integers(1, d)), replace=False))
        emb = EmbeddingPair(e_cls=ad.tensor(e_cls), e_patch=ad.tensor(e_patch))
        t = table()
        sims = e_patch @ t.matrix().T
        gaps = np.sort(sims, axis=0)[::-1]
        s = score(emb, t, k=k, heads="both").data
        neg = [i for i in range(d) if i not in pos]
        margins = 1.0 + s[neg][None, :] - s[np.asarray(pos)][:, None] if neg else np.array([[1.0]])
        if (gaps[k - 1] - gaps[k]).min() > GAP and np.abs(margins).min() > GAP and neg:
            break
        if attempt == 500:
            e_patch = rng.normal(0.0, 1.0, (4, dim))
            e_cls = rng.normal(0.0, 1.0, (1, dim))
    else:
        raise RuntimeError("no kink-free instance found for the prompt-tuning loss")

    def build():
        t = table()
        emb = EmbeddingPair(e_cls=ad.tensor(e_cls), e_patch=ad.tensor(e_patch))
        return ranking_loss(score(emb, t, k=k, heads="both"), list(pos))
    return build, [context]


CHECKS = [
    ("matmul", _check_matmul),
    ("softmax_rows", _check_softmax),
    ("layer_norm", _check_layernorm),
    ("gelu", _check_gelu),
    ("topk_mean", _check_topk_mean),
    ("topk_mean_cols", _check_topk_mean_cols),
    ("linear_ops", _check_linear_ops),
    ("l2_normalize", _check_l2_normalize),
    ("msa", _check_msa),
    ("vit_forward", _check_vit_forward),
    ("two_stream", _check_two_stream),
    ("score", _check_score),
    ("ranking_loss", _check_ranking_loss),
    ("distill_loss", _check_distill_loss),
    ("text_surrogate_encode", _check_text_encode),
    ("stage1_loss", _check_stage1_loss),
    ("stage2_loss", _check_stage2_loss),
]


def run_suite(instances: int = 20, rel_tol: float = 1e-4, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, maker in CHECKS:
        rng = substream(seed, f"gradcheck.{name}")
        worst, ok = 0.0, True
        for _ in range(instances):
            build, leaves = maker(rng)
            try:
                worst = max(worst, finite_difference_check(build, leaves, rel_tol))
            except AssertionError:
                ok = False
                worst = np.inf
                break
        results.append(CheckResult(name=name, instances=instances, worst=worst, ok=ok))
    return results
