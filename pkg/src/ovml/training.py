"""Two-stage optimization.

Stage 1 trains the backbone and scoring heads against a frozen label
table, minimizing pairwise ranking loss plus an optional L1 pull of the
global embedding toward the teacher embedding. Stage 2 freezes the
image side entirely and tunes only the prompt context, regenerating the
label table through the frozen surrogate inside every step's graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFinite, Tensor
from .heads import EmbeddingPair
from .labels import LabelEmbeddingTable
from .losses import batch_mean, distill_loss, ranking_loss
from .model import Model, encode, fixed_table, live_table, save_model, score_image
from .optim import AdamW
from .seeds import substream
from .synth import Dataset


class NonFiniteLoss(RuntimeError):
    pass


class FrozenViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_distill: float = 1.0
    lr_stage1: float = 1e-3
    lr_stage2: float = 3e-5
    weight_decay: float = 5e-3
    epochs_stage1: int = 12
    epochs_stage2: int = 8
    batch_size: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if min(self.epochs_stage1, self.epochs_stage2) < 0:
            raise ValueError("epoch counts cannot be negative")
        if self.lambda_distill < 0:
            raise ValueError("distillation weight cannot be negative")


LogFn = Callable[[dict], None]


def _positive_rows(table: LabelEmbeddingTable, positives: tuple[int, ...]) -> list[int]:
    col = {lid: i for i, lid in enumerate(table.label_ids)}
    return [col[lid] for lid in positives if lid in col]


def _stage1_params(model: Model, cfg: TrainConfig) -> dict[str, Tensor]:
    """Backbone always trains; each head only when something feeds it a
    gradient (its score stream, or distillation for the global head).
    """
    params = model.vit.named("vit")
    named = model.streams.named("heads")
    mode = model.config.head_mode
    use_global = mode in ("both", "global") or cfg.lambda_distill > 0
    use_local = mode in ("both", "local")
    for name, t in named.items():
        is_global = ".global_" in name
        if (is_global and use_global) or (not is_global and use_local):
            params[name] = t
    return params


def _total_loss(loss_rank: Tensor, loss_dist: Tensor | None, lam: float) -> Tensor:
    if loss_dist is None or lam == 0.0:
        return loss_rank
    return ad.add(loss_rank, ad.scale(loss_dist, lam))


def _check_finite(value: float, stage: int, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"stage {stage} epoch {epoch} step {step}: loss {value}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def run_stage1(model: Model, dataset: Dataset, cfg: TrainConfig, seed: int, log: LogFn) -> None:
    table = fixed_table(model)
    opt = AdamW(_stage1_params(model, cfg), lr=cfg.lr_stage1, weight_decay=cfg.weight_decay)
    rng = substream(seed, "train.stage1")
    embed_dim = table.matrix().shape[1]
    step = 0
    for epoch in range(cfg.epochs_stage1):
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            try:
                rank_terms, dist_terms = [], []
                for i in batch:
                    emb = encode(model, dataset.images[i])
                    scores = score_image(model, emb, table)
                    rank_terms.append(
                        ranking_loss(scores, _positive_rows(table, dataset.positives[i]))
                    )
                    dist_terms.append(
                        distill_loss(ad.reshape(emb.e_cls, (embed_dim,)), dataset.teacher[i])
                    )
                loss_rank = batch_mean(rank_terms)
                loss_dist = batch_mean(dist_terms)
                total = _total_loss(loss_rank, loss_dist, cfg.lambda_distill)
                _check_finite(float(total.data), 1, epoch, step)
                opt.zero_grad()
                ad.backward(total)
            except NonFinite as e:
                raise NonFiniteLoss(f"stage 1 epoch {epoch} step {step}: {e}") from e
            opt.step()
            log({
                "stage": 1, "epoch": epoch, "step": step,
                "loss_rank": float(loss_rank.data), "loss_dist": float(loss_dist.data),
                "lr": cfg.lr_stage1,
            })
            step += 1


def _frozen_snapshot(model: Model) -> dict[str, np.ndarray]:
    frozen = model.vit.named("vit")
    frozen.update(model.streams.named("heads"))
    frozen.update(model.surrogate.named("surrogate"))
    return {name: t.data.copy() for name, t in frozen.items()}


def _check_frozen(model: Model, snapshot: dict[str, np.ndarray]) -> None:
    frozen = model.vit.named("vit")
    frozen.update(model.streams.named("heads"))
    frozen.update(model.surrogate.named("surrogate"))
    for name, t in frozen.items():
        if not np.array_equal(t.data, snapshot[name]):
            raise FrozenViolation(f"{name} changed during prompt tuning")


def run_stage2(
    model: Model, dataset: Dataset, cfg: TrainConfig, seed: int, log: LogFn
) -> tuple[float, float]:
    """Prompt-only tuning over precomputed, constant image embeddings.

    Returns the whole-dataset ranking loss before the first and after the
    last step, so callers can verify tuning did not hurt.
    """
    snapshot = _frozen_snapshot(model)
    cached = []
    for i in range(len(dataset)):
        emb = encode(model, dataset.images[i])
        cached.append((emb.e_cls.data.copy(), emb.e_patch.data.copy()))

    def full_rank_loss() -> float:
        table = live_table(model)
        terms = []
        for i in range(len(dataset)):
            emb = EmbeddingPair(e_cls=ad.tensor(cached[i][0]), e_patch=ad.tensor(cached[i][1]))
            scores = score_image(model, emb, table)
            terms.append(ranking_loss(scores, _positive_rows(table, dataset.positives[i])))
        return float(batch_mean(terms).data)

    start_loss = full_rank_loss()
    opt = AdamW(
        {"prompt.context": model.prompt.context},
        lr=cfg.lr_stage2,
        weight_decay=cfg.weight_decay,
    )
    rng = substream(seed, "train.stage2")
    step = 0
    for epoch in range(cfg.epochs_stage2):
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            try:
                table = live_table(model)
                rank_terms = []
                for i in batch:
                    emb = EmbeddingPair(
                        e_cls=ad.tensor(cached[i][0]), e_patch=ad.tensor(cached[i][1])
                    )
                    scores = score_image(model, emb, table)
                    rank_terms.append(
                        ranking_loss(scores, _positive_rows(table, dataset.positives[i]))
                    )
                loss_rank = batch_mean(rank_terms)
                _check_finite(float(loss_rank.data), 2, epoch, step)
                opt.zero_grad()
                ad.backward(loss_rank)
            except NonFinite as e:
                raise NonFiniteLoss(f"stage 2 epoch {epoch} step {step}: {e}") from e
            opt.step()
            log({
                "stage": 2, "epoch": epoch, "step": step,
                "loss_rank": float(loss_rank.data), "loss_dist": None,
                "lr": cfg.lr_stage2,
            })
            step += 1
    _check_frozen(model, snapshot)
    end_loss = full_rank_loss()
    log({"stage": 2, "event": "full_rank_loss", "start": start_loss, "end": end_loss})
    return start_loss, end_loss


def train(model: Model, dataset: Dataset, cfg: TrainConfig, seed: int, out_dir: str | Path) -> dict:
    """Run both stages, streaming the step log and checkpointing each stage.

    Returns the artifact paths. Deterministic for fixed inputs: the log
    carries no timestamps and checkpoints serialize in sorted name order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w") as fh:
        def log(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        run_stage1(model, dataset, cfg, seed, log)
        save_model(out_dir / "stage1", model, fixed_table(model))
        run_stage2(model, dataset, cfg, seed, log)
        save_model(out_dir / "stage2", model, fixed_table(model, provenance="tuned"))
    return {
        "log": log_path,
        "stage1": out_dir / "stage1",
        "stage2": out_dir / "stage2",
    }
