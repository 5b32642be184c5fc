"""Seeded synthetic world: labels with category structure, pixel
prototypes tied to label embeddings through a linear teacher, and image
sampling with known positives.

Construction guarantees that make end-to-end behavior checkable:
  - flatten(q_c) @ W_T reproduces the label embedding z_c within 1e-6,
    so a clean single-label image has a known teacher embedding;
  - unseen label tokens are convex combinations of two seen tokens from
    the same category, so generalizing to them is structurally possible;
  - everything derives from named substreams of one seed, so worlds and
    datasets regenerate bit-identically.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .heads import ScoreMatrix
from .labels import (
    LabelEmbeddingTable,
    LabelSplit,
    PromptState,
    build_label_table,
    init_prompt,
    read_vocabulary,
    write_vocabulary,
)
from .metrics import GroundTruthMatrix
from .seeds import substream
from .tensor_io import read_tensor, write_tensor
from .text_encoder import TextSurrogateParams, init_text_surrogate
from .vit import patchify


class InfeasibleConstraint(ValueError):
    pass


class PoolTooSmall(ValueError):
    pass


class DatasetCorrupt(ValueError):
    pass


_BACKGROUNDS = ("zero", "noise")


@dataclass(frozen=True)
class SynthConfig:
    channels: int = 1
    image_size: int = 12
    patch_size: int = 4
    n_categories: int = 4
    max_labels: int = 3
    sigma: float = 0.1
    token_width: int = 16
    embed_dim: int = 8
    surrogate_depth: int = 1
    surrogate_heads: int = 2
    prompt_length: int = 4
    token_jitter: float = 0.25
    background: str = "zero"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"patch {self.patch_size} does not tile {self.image_size}")
        if self.background not in _BACKGROUNDS:
            raise ValueError(f"background must be one of {_BACKGROUNDS}")

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class SynthWorld:
    config: SynthConfig
    seed: int
    seen_fraction: float
    split: LabelSplit
    categories: dict[int, int]            # label id -> category id
    tokens: dict[int, np.ndarray]         # label id -> (D_t,)
    surrogate: TextSurrogateParams
    prompt: PromptState                   # the world's own frozen prompt
    z: np.ndarray                         # d x D_e, rows in split order
    w_teacher: np.ndarray                 # (P^2 C) x D_e
    prototypes: dict[int, np.ndarray]     # label id -> (C, P, P)

    @property
    def n_labels(self) -> int:
        return len(self.split.all_ids)

    def label_table(self) -> LabelEmbeddingTable:
        return build_label_table(self.split, self.prompt, self.surrogate, provenance="world")


def _pick_split(d: int, seen_fraction: float, n_categories: int) -> tuple[LabelSplit, dict[int, int]]:
    """Round-robin category assignment; unseen labels are taken one per
    category from the back, never leaving a category with fewer than two
    seen labels (the convex construction needs a pair).
    """
    if not 0.0 < seen_fraction <= 1.0:
        raise ValueError(f"seen fraction {seen_fraction} outside (0, 1]")
    categories = {lid: lid % n_categories for lid in range(d)}
    n_unseen = d - int(round(d * seen_fraction))
    by_cat: dict[int, list[int]] = {}
    for lid in range(d):
        by_cat.setdefault(categories[lid], []).append(lid)
    unseen: list[int] = []
    cat_cycle = sorted(by_cat)
    while len(unseen) < n_unseen:
        took = False
        for cat in cat_cycle:
            if len(unseen) == n_unseen:
                break
            members = [lid for lid in by_cat[cat] if lid not in unseen]
            if len(members) >= 3:  # keep two seen for the pair
                unseen.append(members[-1])
                took = True
        if not took:
            raise InfeasibleConstraint(
                f"cannot place {n_unseen} unseen labels over {n_categories} categories of {d}"
            )
    seen = tuple(lid for lid in range(d) if lid not in unseen)
    return LabelSplit(seen=seen, unseen=tuple(sorted(unseen))), categories


def build_world(d: int, seen_fraction: float, seed: int, config: SynthConfig | None = None) -> SynthWorld:
    """Deterministically construct the full generative world for one seed."""
    config = config or SynthConfig()
    split, categories = _pick_split(d, seen_fraction, config.n_categories)

    rng_tok = substream(seed, "world.tokens")
    centroids = rng_tok.normal(0.0, 1.0, (config.n_categories, config.token_width))
    tokens: dict[int, np.ndarray] = {}
    for lid in split.seen:
        tokens[lid] = centroids[categories[lid]] + config.token_jitter * rng_tok.normal(
            0.0, 1.0, config.token_width
        )
    rng_mix = substream(seed, "world.unseen")
    for lid in split.unseen:
        mates = [s for s in split.seen if categories[s] == categories[lid]]
        a, b = rng_mix.choice(len(mates), 2, replace=False)
        alpha = rng_mix.uniform(0.3, 0.7)
        tokens[lid] = alpha * tokens[mates[a]] + (1.0 - alpha) * tokens[mates[b]]

    surrogate = init_text_surrogate(
        substream(seed, "world.surrogate"),
        token_width=config.token_width,
        embed_dim=config.embed_dim,
        depth=config.surrogate_depth,
        heads=config.surrogate_heads,
        token_vectors=tokens,
    )
    prompt = init_prompt(
        substream(seed, "world.prompt"), config.prompt_length, config.token_width, trainable=False
    )
    z = build_label_table(split, prompt, surrogate, provenance="world").matrix()

    rng_teacher = substream(seed, "world.teacher")
    w_teacher = rng_teacher.normal(0.0, 1.0 / np.sqrt(config.patch_len), (config.patch_len, config.embed_dim))
    if np.linalg.matrix_rank(w_teacher) < config.embed_dim:
        raise InfeasibleConstraint(
            f"teacher map rank below embedding dim {config.embed_dim}"
        )

    prototypes: dict[int, np.ndarray] = {}
    for row, lid in enumerate(split.all_ids):
        flat, *_ = np.linalg.lstsq(w_teacher.T, z[row], rcond=None)
        residual = float(np.abs(flat @ w_teacher - z[row]).max())
        if residual > 1e-6:
            raise InfeasibleConstraint(f"prototype residual {residual:.3e} for label {lid}")
        prototypes[lid] = flat.reshape(config.channels, config.patch_size, config.patch_size)

    return SynthWorld(
        config=config,
        seed=seed,
        seen_fraction=seen_fraction,
        split=split,
        categories=categories,
        tokens=tokens,
        surrogate=surrogate,
        prompt=prompt,
        z=z,
        w_teacher=w_teacher,
        prototypes=prototypes,
    )


@dataclass
class Dataset:
    images: np.ndarray                  # B x C x H x W
    teacher: np.ndarray                 # B x D_e
    positives: list[tuple[int, ...]]    # label ids per image
    world: SynthWorld

    def __len__(self) -> int:
        return self.images.shape[0]

    def ground_truth(self, label_ids: tuple[int, ...] | None = None) -> GroundTruthMatrix:
        label_ids = label_ids or self.world.split.all_ids
        col = {lid: i for i, lid in enumerate(label_ids)}
        y = np.zeros((len(self), len(label_ids)), dtype=np.int64)
        for i, pos in enumerate(self.positives):
            for lid in pos:
                if lid in col:
                    y[i, col[lid]] = 1
        return GroundTruthMatrix(y=y, label_ids=tuple(label_ids))


def _mean_patch(image: np.ndarray, config: SynthConfig) -> np.ndarray:
    return patchify(image, config.patch_size).patches.data.mean(axis=0)


def sample(
    world: SynthWorld,
    n_images: int,
    label_pool: tuple[int, ...],
    seed: int,
    stream: str = "sample",
) -> Dataset:
    """Draw images with known positives from the world's prototypes.

    Each image holds 1..max_labels distinct pool labels; every positive
    occupies at least one patch cell, remaining cells draw uniformly from
    the positives plus background. The teacher embedding comes from the
    noisy pixels, not the clean layout. `stream` decorrelates draws that
    share a seed (train vs test split).
    """
    cfg = world.config
    pool = tuple(label_pool)
    if len(pool) < cfg.max_labels:
        raise PoolTooSmall(f"pool of {len(pool)} cannot support {cfg.max_labels} positives")
    unknown = set(pool) - set(world.split.all_ids)
    if unknown:
        raise PoolTooSmall(f"pool labels {sorted(unknown)} not in the world")
    rng = substream(seed, stream)
    grid = cfg.image_size // cfg.patch_size
    n_cells = grid * grid
    images = np.zeros((n_images, cfg.channels, cfg.image_size, cfg.image_size))
    teacher = np.zeros((n_images, cfg.embed_dim))
    positives: list[tuple[int, ...]] = []
    for i in range(n_images):
        n_pos = int(rng.integers(1, cfg.max_labels + 1))
        pos = tuple(sorted(int(pool[j]) for j in rng.choice(len(pool), n_pos, replace=False)))
        cells = np.full(n_cells, -1, dtype=np.int64)  # -1 = background
        anchor = rng.choice(n_cells, n_pos, replace=False)
        cells[anchor] = pos
        rest = cells == -1
        choices = np.array(pos + (-1,), dtype=np.int64)
        cells[rest] = choices[rng.integers(0, len(choices), int(rest.sum()))]
        img = np.zeros((cfg.channels, cfg.image_size, cfg.image_size))
        for cell, lid in enumerate(cells):
            if lid == -1:
                continue
            r, c = divmod(cell, grid)
            img[
                :,
                r * cfg.patch_size:(r + 1) * cfg.patch_size,
                c * cfg.patch_size:(c + 1) * cfg.patch_size,
            ] = world.prototypes[int(lid)]
        if cfg.background == "noise":
            bg = rng.normal(0.0, cfg.sigma, img.shape)
            img = np.where(img == 0.0, bg, img)
        if cfg.sigma > 0.0:
            img = img + rng.normal(0.0, cfg.sigma, img.shape)
        images[i] = img
        teacher[i] = _mean_patch(img, cfg) @ world.w_teacher
        positives.append(pos)
    return Dataset(images=images, teacher=teacher, positives=positives, world=world)


def oracle_scores(dataset: Dataset, k: int = 1) -> ScoreMatrix:
    """Score against the true generative quantities: top-k mean over patch
    embeddings (via the teacher map) of similarity to each label's z row.
    With sigma=0 and k=1 every positive outranks every negative.
    """
    world = dataset.world
    sims = []
    for i in range(len(dataset)):
        patches = patchify(dataset.images[i], world.config.patch_size).patches.data
        u = patches @ world.w_teacher  # N x D_e
        s = u @ world.z.T              # N x d
        top = -np.sort(-s, axis=0)[:k].mean(axis=0)
        sims.append(top)
    return ScoreMatrix(scores=np.stack(sims), label_ids=world.split.all_ids)


# --- dataset directory layout ---

_IMAGES = "images.mkt1"
_TEACHER = "teacher.mkt1"
_POSITIVES = "positives.txt"
_VOCAB = "vocab.tsv"
_WORLD_CONFIG = "world/config.txt"
_WORLD_TOKENS = "world/tokens.mkt1"
_WORLD_TEACHER = "world/wt.mkt1"
_WORLD_Z = "world/z.mkt1"
_WORLD_PROTO = "world/prototypes.mkt1"
_WORLD_SPLIT = "world/split.txt"
_MANIFEST = "manifest.txt"


def _world_config_text(world: SynthWorld) -> str:
    lines = [
        f"seed={world.seed}",
        f"n_labels={world.n_labels}",
        f"seen_fraction={world.seen_fraction!r}",
    ]
    for f in fields(SynthConfig):
        lines.append(f"{f.name}={getattr(world.config, f.name)!r}")
    return "\n".join(lines) + "\n"


def _parse_world_config(text: str) -> tuple[int, int, float, SynthConfig]:
    raw: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    try:
        seed = int(raw.pop("seed"))
        d = int(raw.pop("n_labels"))
        seen_fraction = float(raw.pop("seen_fraction"))
        kwargs = {}
        for f in fields(SynthConfig):
            v = raw.pop(f.name)
            t = f.type if isinstance(f.type, str) else f.type.__name__
            kwargs[f.name] = v.strip("'\"") if t == "str" else (float(v) if t == "float" else int(v))
    except KeyError as e:
        raise DatasetCorrupt(f"world config missing key {e}") from None
    if raw:
        raise DatasetCorrupt(f"world config has unknown keys {sorted(raw)}")
    return seed, d, seen_fraction, SynthConfig(**kwargs)


def dataset_hash(directory: str | Path) -> str:
    """sha256 over the sorted per-file digests named in the manifest."""
    directory = Path(directory)
    manifest = (directory / _MANIFEST).read_text()
    return hashlib.sha256(manifest.encode()).hexdigest()


def write_dataset(directory: str | Path, dataset: Dataset) -> str:
    """Write the directory layout and return its content hash."""
    directory = Path(directory)
    (directory / "world").mkdir(parents=True, exist_ok=True)
    world = dataset.world
    order = world.split.all_ids

    write_tensor(directory / _IMAGES, dataset.images)
    write_tensor(directory / _TEACHER, dataset.teacher)
    (directory / _POSITIVES).write_text(
        "".join(" ".join(str(lid) for lid in pos) + "\n" for pos in dataset.positives)
    )
    write_vocabulary(directory / _VOCAB, world.categories)
    (directory / _WORLD_CONFIG).write_text(_world_config_text(world))
    write_tensor(directory / _WORLD_TOKENS, np.stack([world.tokens[lid] for lid in order]))
    write_tensor(directory / _WORLD_TEACHER, world.w_teacher)
    write_tensor(directory / _WORLD_Z, world.z)
    write_tensor(directory / _WORLD_PROTO, np.stack([world.prototypes[lid] for lid in order]))
    (directory / _WORLD_SPLIT).write_text(
        "seen\t" + " ".join(str(x) for x in world.split.seen) + "\n"
        "unseen\t" + " ".join(str(x) for x in world.split.unseen) + "\n"
    )

    entries = []
    for rel in sorted(
        str(p.relative_to(directory)).replace("\\", "/")
        for p in directory.rglob("*")
        if p.is_file() and p.name != _MANIFEST
    ):
        digest = hashlib.sha256((directory / rel).read_bytes()).hexdigest()
        entries.append(f"{rel}\t{digest}")
    (directory / _MANIFEST).write_text("\n".join(entries) + "\n")
    return dataset_hash(directory)


def read_dataset(directory: str | Path, verify: bool = True) -> Dataset:
    """Rebuild the world from its recorded seed and load the samples.

    Regeneration is cross-checked against the stored teacher map and
    embeddings so a stale or edited directory fails loudly.
    """
    directory = Path(directory)
    if not directory.is_dir():
        # never generated at all: a usage problem, not corruption
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    try:
        seed, d, seen_fraction, config = _parse_world_config((directory / _WORLD_CONFIG).read_text())
    except FileNotFoundError:
        raise DatasetCorrupt(f"{directory} has no world config") from None
    world = build_world(d, seen_fraction, seed, config)

    if verify:
        manifest = (directory / _MANIFEST).read_text()
        for line in manifest.splitlines():
            rel, _, digest = line.partition("\t")
            actual = hashlib.sha256((directory / rel).read_bytes()).hexdigest()
            if actual != digest:
                raise DatasetCorrupt(f"digest mismatch for {rel}")
        stored_wt = read_tensor(directory / _WORLD_TEACHER)
        stored_z = read_tensor(directory / _WORLD_Z)
        if not (np.array_equal(stored_wt, world.w_teacher) and np.array_equal(stored_z, world.z)):
            raise DatasetCorrupt("regenerated world disagrees with stored tensors")
        stored_vocab = read_vocabulary(directory / _VOCAB)
        if stored_vocab != world.categories:
            raise DatasetCorrupt("stored vocabulary disagrees with regenerated world")

    images = read_tensor(directory / _IMAGES)
    teacher = read_tensor(directory / _TEACHER)
    positives = [
        tuple(int(x) for x in line.split())
        for line in (directory / _POSITIVES).read_text().splitlines()
    ]
    if images.shape[0] != teacher.shape[0] or images.shape[0] != len(positives):
        raise DatasetCorrupt(
            f"row counts disagree: {images.shape[0]} images, "
            f"{teacher.shape[0]} teacher rows, {len(positives)} positive lines"
        )
    return Dataset(images=images, teacher=teacher, positives=positives, world=world)
