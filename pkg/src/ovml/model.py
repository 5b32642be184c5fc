"""Full scoring model: backbone + two-stream heads + tunable prompt,
bundled with the frozen text surrogate and label split it was built
against, plus checkpoint save/load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .heads import (
    HEAD_MODES,
    EmbeddingPair,
    ScoreMatrix,
    TwoStreamParams,
    init_two_stream,
    score,
    two_stream,
)
from .labels import (
    LabelEmbeddingTable,
    LabelSplit,
    PromptState,
    build_label_table,
    init_prompt,
    read_vocabulary,
    write_vocabulary,
)
from .seeds import substream
from .synth import SynthWorld
from .tensor_io import directory_digest, load_checkpoint, save_checkpoint
from .text_encoder import TextSurrogateParams
from .vit import VitParams, init_vit, patchify, vit_forward


class BadCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 16
    heads: int = 2
    depth: int = 2
    k: int = 3
    head_mode: str = "both"

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head mode must be one of {HEAD_MODES}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")


@dataclass
class Model:
    vit: VitParams
    streams: TwoStreamParams
    prompt: PromptState
    surrogate: TextSurrogateParams
    split: LabelSplit
    categories: dict[int, int]
    config: ModelConfig
    patch_size: int

    def named_params(self) -> dict[str, Tensor]:
        out = self.vit.named("vit")
        out.update(self.streams.named("heads"))
        out["prompt.context"] = self.prompt.context
        return out


def init_model(seed: int, world: SynthWorld, config: ModelConfig | None = None) -> Model:
    config = config or ModelConfig()
    wc = world.config
    return Model(
        vit=init_vit(
            substream(seed, "model.vit"),
            patch_len=wc.patch_len,
            n_patches=wc.n_patches,
            width=config.width,
            heads=config.heads,
            depth=config.depth,
        ),
        streams=init_two_stream(substream(seed, "model.heads"), config.width, wc.embed_dim),
        prompt=init_prompt(
            substream(seed, "model.prompt"), wc.prompt_length, wc.token_width, trainable=True
        ),
        surrogate=world.surrogate,
        split=world.split,
        categories=dict(world.categories),
        config=config,
        patch_size=wc.patch_size,
    )


def encode(model: Model, image: np.ndarray) -> EmbeddingPair:
    """Image -> (global, per-patch) embeddings; differentiable end to end."""
    return two_stream(vit_forward(patchify(image, model.patch_size), model.vit), model.streams)


def live_table(model: Model, provenance: str = "prompt") -> LabelEmbeddingTable:
    """Label table regenerated through the surrogate; gradients reach the
    prompt context, so use this inside prompt-tuning steps.
    """
    return build_label_table(model.split, model.prompt, model.surrogate, provenance=provenance)


def fixed_table(model: Model, provenance: str = "fixed") -> LabelEmbeddingTable:
    """A constant snapshot of the current table; graphs built against it
    never touch the surrogate.
    """
    live = live_table(model)
    return LabelEmbeddingTable(
        z=ad.tensor(live.matrix()), label_ids=live.label_ids, provenance=provenance
    )


def score_image(model: Model, emb: EmbeddingPair, table: LabelEmbeddingTable) -> Tensor:
    return score(emb, table, k=model.config.k, heads=model.config.head_mode)


def score_batch(model: Model, images: np.ndarray, table: LabelEmbeddingTable) -> ScoreMatrix:
    """Evaluation-only scoring; gradients are discarded."""
    rows = [score_image(model, encode(model, images[i]), table).data for i in range(images.shape[0])]
    return ScoreMatrix(scores=np.stack(rows), label_ids=table.label_ids)


# --- checkpoints ---

_META = "meta.txt"
_VOCAB = "vocab.tsv"


def save_model(directory: str | Path, model: Model, table: LabelEmbeddingTable) -> None:
    directory = Path(directory)
    tensors = {name: t.data for name, t in model.named_params().items()}
    tensors["table.z"] = table.matrix()
    save_checkpoint(directory, tensors)
    meta = [
        f"width={model.config.width}",
        f"heads={model.config.heads}",
        f"depth={model.config.depth}",
        f"k={model.config.k}",
        f"head_mode={model.config.head_mode}",
        f"patch_size={model.patch_size}",
        "seen=" + " ".join(str(x) for x in model.split.seen),
        "unseen=" + " ".join(str(x) for x in model.split.unseen),
        "table_ids=" + " ".join(str(x) for x in table.label_ids),
        f"table_provenance={table.provenance}",
    ]
    (directory / _META).write_text("\n".join(meta) + "\n")
    write_vocabulary(directory / _VOCAB, model.categories)


def _parse_meta(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    return out


def load_table(directory: str | Path) -> tuple[LabelEmbeddingTable, dict[int, int]]:
    """Table + category map alone; enough for retrieval, no world needed."""
    directory = Path(directory)
    try:
        meta = _parse_meta((directory / _META).read_text())
        z = load_checkpoint(directory)["table.z"]
    except (FileNotFoundError, KeyError) as e:
        raise BadCheckpoint(f"{directory}: {e!r}") from None
    ids = tuple(int(x) for x in meta["table_ids"].split())
    table = LabelEmbeddingTable(
        z=ad.tensor(z), label_ids=ids, provenance=meta.get("table_provenance", "fixed")
    )
    return table, read_vocabulary(directory / _VOCAB)


def load_model(directory: str | Path, world: SynthWorld) -> tuple[Model, LabelEmbeddingTable]:
    """Rebuild a model around the world's surrogate and load saved weights."""
    directory = Path(directory)
    try:
        meta = _parse_meta((directory / _META).read_text())
        tensors = load_checkpoint(directory)
    except FileNotFoundError as e:
        raise BadCheckpoint(f"{directory}: {e!r}") from None
    config = ModelConfig(
        width=int(meta["width"]),
        heads=int(meta["heads"]),
        depth=int(meta["depth"]),
        k=int(meta["k"]),
        head_mode=meta["head_mode"],
    )
    saved_split = LabelSplit(
        seen=tuple(int(x) for x in meta["seen"].split()),
        unseen=tuple(int(x) for x in meta["unseen"].split()),
    )
    if saved_split != world.split:
        raise BadCheckpoint("checkpoint split disagrees with the dataset's world")
    model = init_model(seed=0, world=world, config=config)
    table_z = tensors.pop("table.z")
    named = model.named_params()
    if set(named) != set(tensors):
        missing = set(named) ^ set(tensors)
        raise BadCheckpoint(f"parameter names disagree: {sorted(missing)[:5]}")
    for name, param in named.items():
        if param.shape != tensors[name].shape:
            raise BadCheckpoint(f"{name}: shape {tensors[name].shape} vs expected {param.shape}")
        if not np.isfinite(tensors[name]).all():
            raise BadCheckpoint(f"{name}: non-finite values in checkpoint")
        param.data = tensors[name]
    ids = tuple(int(x) for x in meta["table_ids"].split())
    table = LabelEmbeddingTable(
        z=ad.tensor(table_z), label_ids=ids, provenance=meta.get("table_provenance", "fixed")
    )
    return model, table


def checkpoint_hash(directory: str | Path) -> str:
    return directory_digest(directory)
