"""Similarity index, threshold query, and training-group assembly.

The query returns every other image whose encoder cosine similarity to the
anchor clears a threshold; groups are the anchor plus N-1 draws (without
replacement) from a mode-dependent candidate pool. Scans are exact brute
force: datasets here are small and exactness keeps tests simple.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .data import ToyDataset, encode
from .errors import ValidationError

log = logging.getLogger("groupdiff.grouping")

INDEX_MAGIC = b"GDI1"

DEFAULT_TAU = 0.7

QUERY_MODES = ("random", "class", "similarity")


@dataclass
class DatasetIndex:
    ids: np.ndarray          # [count] int64, unique
    class_ids: np.ndarray    # [count] int64
    features: np.ndarray     # [count, F] float64, unit rows
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if len(self.ids) != len(set(int(i) for i in self.ids)):
            raise ValidationError("index ids must be unique")
        norms = np.linalg.norm(self.features, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValidationError("index feature rows must be unit-norm")
        self._pos = {int(i): p for p, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def position(self, image_id: int) -> int:
        try:
            return self._pos[int(image_id)]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id}") from None


@dataclass(frozen=True)
class GroupSpec:
    group_size: int = 4
    query_mode: str = "similarity"
    tau: float = DEFAULT_TAU
    seed: int = 0

    def validate(self):
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")
        if self.query_mode not in QUERY_MODES:
            raise ValidationError(f"query_mode must be one of {QUERY_MODES}")
        if not -1.0 <= self.tau <= 1.0:
            raise ValidationError("tau must lie in [-1, 1]")


def build_index(dataset: ToyDataset, encoder=encode, tau: float = DEFAULT_TAU) -> DatasetIndex:
    """One feature row per image, in dataset order."""
    if len(dataset) == 0:
        raise ValidationError("cannot index an empty dataset")
    feats = np.stack([encoder(im) for im in dataset.images])
    ids = np.array([im.id for im in dataset.images], dtype=np.int64)
    classes = np.array([im.class_id for im in dataset.images], dtype=np.int64)
    return DatasetIndex(ids=ids, class_ids=classes, features=feats, tau=tau)


def query(anchor_id: int, index: DatasetIndex, tau: float | None = None) -> set[int]:
    """All ids (anchor excluded) whose cosine to the anchor is >= tau."""
    if tau is None:
        tau = index.tau
    pos = index.position(anchor_id)
    sims = index.features @ index.features[pos]
    hits = np.nonzero(sims >= tau)[0]
    return {int(index.ids[p]) for p in hits if p != pos}


def _candidate_pool(anchor_id: int, mode: str, index: DatasetIndex, tau: float) -> list[int]:
    if mode == "similarity":
        pool = query(anchor_id, index, tau)
    elif mode == "class":
        pos = index.position(anchor_id)
        cls = index.class_ids[pos]
        pool = {int(i) for i, c in zip(index.ids, index.class_ids)
                if c == cls and int(i) != int(anchor_id)}
    elif mode == "random":
        pool = {int(i) for i in index.ids if int(i) != int(anchor_id)}
    else:
        raise ValidationError(f"unknown query mode {mode!r}")
    return sorted(pool)


def assemble_group(anchor_id: int, spec: GroupSpec, index: DatasetIndex,
                   rng: np.random.Generator) -> list[int]:
    """Ordered member ids: anchor first, then N-1 pool draws without replacement.

    Pools smaller than N-1 are padded by sampling with replacement; an
    empty pool falls back to class mode and then random mode (the
    downgrade is logged, never fatal).
    """
    spec.validate()
    index.position(anchor_id)  # raises on unknown anchor
    need = spec.group_size - 1
    if need == 0:
        return [int(anchor_id)]
    mode = spec.query_mode
    pool = _candidate_pool(anchor_id, mode, index, spec.tau)
    for fallback in ("class", "random"):
        if pool or mode == fallback:
            break
        log.warning("group pool empty for anchor %s in mode %s; falling back to %s",
                    anchor_id, mode, fallback)
        mode = fallback
        pool = _candidate_pool(anchor_id, mode, index, spec.tau)
    if not pool:
        raise ValidationError(
            f"no candidates for anchor {anchor_id} in any mode (dataset of size {len(index)})")
    if len(pool) >= need:
        picks = rng.choice(len(pool), size=need, replace=False)
    else:
        log.warning("group pool for anchor %s has %d < %d candidates; padding with replacement",
                    anchor_id, len(pool), need)
        picks = rng.choice(len(pool), size=need, replace=True)
    return [int(anchor_id)] + [pool[int(p)] for p in picks]


# -- index file format (GDI1) --------------------------------------------------
# magic | u32 count | u32 F | f64 tau | count i64 ids | count i64 classes
# | count*F f64 features

def save_index(index: DatasetIndex, path) -> None:
    count, dim = index.features.shape
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IId", count, dim, index.tau))
        f.write(np.asarray(index.ids, dtype="<i8").tobytes())
        f.write(np.asarray(index.class_ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(index.features, dtype="<f8").tobytes())


def load_index(path) -> DatasetIndex:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != INDEX_MAGIC:
            raise ValidationError(f"not an index file (magic {magic!r})")
        count, dim, tau = struct.unpack("<IId", f.read(16))
        ids = np.frombuffer(f.read(count * 8), dtype="<i8").copy()
        classes = np.frombuffer(f.read(count * 8), dtype="<i8").copy()
        feats = np.frombuffer(f.read(count * dim * 8), dtype="<f8").reshape(count, dim).copy()
    return DatasetIndex(ids=ids, class_ids=classes, features=feats, tau=tau)
