"""Reference feature banks built from k normal images.

A bank stores, per source tag, every cell vector of every reference image's
feature grid. Queries take the minimum half-cosine distance over the stored
vectors: exhaustive exact nearest neighbor, which is cheap at k <= 4 and
matches the conservative-minimum scoring rule literally.

Banks are immutable after build; concurrent reads are safe.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .backends import BackendBundle
from .core import FeatureGrid, SourceTag
from .errors import BankLookupError, InvalidArgumentError

_MAGIC = b"CFBK"
_VERSION = 1


@dataclass
class ReferenceBank:
    entries: Dict[SourceTag, np.ndarray]  # tag -> (N, D) float64
    shots: int
    category: str
    seed: int

    def __post_init__(self) -> None:
        self._units: Dict[SourceTag, np.ndarray] = {}
        for tag, vectors in self.entries.items():
            vectors = np.asarray(vectors, dtype=np.float64)
            if vectors.ndim != 2:
                raise InvalidArgumentError(f"bank entries for {tag.key()} must be (N, D)")
            norms = np.linalg.norm(vectors, axis=1, keepdims=True)
            if not np.all(norms > 0.0):
                raise InvalidArgumentError(f"zero-norm reference vector under {tag.key()}")
            self.entries[tag] = vectors
            # Pre-normalized rows: a pure speed optimization with identical
            # query results (cosine divides by the norms either way).
            self._units[tag] = vectors / norms

    def tags(self) -> List[SourceTag]:
        return list(self.entries)

    def vectors(self, tag: SourceTag) -> np.ndarray:
        try:
            return self.entries[tag]
        except KeyError:
            raise BankLookupError(f"tag {tag.key()} not in bank") from None

    def unit_vectors(self, tag: SourceTag) -> np.ndarray:
        try:
            return self._units[tag]
        except KeyError:
            raise BankLookupError(f"tag {tag.key()} not in bank") from None


def build_bank(
    references: Sequence[np.ndarray],
    clip_blocks: Sequence[int],
    diff_pairs: Sequence[Tuple[int, int]],
    backends: BackendBundle,
    category: str = "",
    seed: int = 0,
    preprocess_clip=None,
    preprocess_diffusion=None,
) -> ReferenceBank:
    """Extract and stack reference features for every requested tag.

    ``references`` are raw RGB images (H, W, 3); the preprocessing callables
    default to the standard per-backend transforms.
    """
    if len(references) == 0:
        raise InvalidArgumentError("at least one reference image is required")
    from .data import preprocess_clip as _pre_clip
    from .data import preprocess_diffusion as _pre_diff

    pre_clip = preprocess_clip or _pre_clip
    pre_diff = preprocess_diffusion or _pre_diff

    stacks: Dict[SourceTag, List[np.ndarray]] = {}

    def add(grid: FeatureGrid) -> None:
        stacks.setdefault(grid.tag, []).append(grid.grid.reshape(-1, grid.dim))

    for image in references:
        if backends.vl is not None and clip_blocks:
            for grid in backends.vl.block_features(pre_clip(image), clip_blocks):
                add(grid)
        if backends.diffusion is not None and diff_pairs:
            for grid in backends.diffusion.decoder_features(pre_diff(image), diff_pairs):
                add(grid)

    entries = {tag: np.concatenate(parts, axis=0) for tag, parts in stacks.items()}
    return ReferenceBank(entries=entries, shots=len(references), category=category, seed=seed)


def bank_min_distance(bank: ReferenceBank, tag: SourceTag, query_vector: np.ndarray) -> float:
    """Minimum half-cosine distance from the query to the stored references."""
    vectors = bank.vectors(tag)
    query_vector = np.asarray(query_vector, dtype=np.float64)
    if query_vector.ndim != 1 or query_vector.shape[0] != vectors.shape[1]:
        raise InvalidArgumentError(
            f"query dim {query_vector.shape} does not match bank dim {vectors.shape[1]}"
        )
    qn = np.linalg.norm(query_vector)
    if qn == 0.0:
        raise InvalidArgumentError("cosine distance undefined for zero vectors")
    return float(grid_min_distances(bank, tag, query_vector[None, :])[0])


def grid_min_distances(bank: ReferenceBank, tag: SourceTag, queries: np.ndarray) -> np.ndarray:
    """Vectorized bank_min_distance over (N_q, D) query rows."""
    units = bank.unit_vectors(tag)
    queries = np.asarray(queries, dtype=np.float64)
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    best_cos = ((queries / qn) @ units.T).max(axis=1)
    np.clip(best_cos, -1.0, 1.0, out=best_cos)
    return (1.0 - best_cos) / 2.0


# ---------------------------------------------------------------------------
# Persistence: one file = magic, version, JSON header, float32 vector blocks.
# ---------------------------------------------------------------------------


def save_bank(bank: ReferenceBank, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tags = sorted(bank.entries, key=lambda t: t.key())
    header = {
        "category": bank.category,
        "shots": bank.shots,
        "seed": bank.seed,
        "tags": [
            {"key": tag.key(), "count": int(bank.entries[tag].shape[0]),
             "dim": int(bank.entries[tag].shape[1])}
            for tag in tags
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(blob)))
        fh.write(blob)
        for tag in tags:
            fh.write(bank.entries[tag].astype("<f4").tobytes(order="C"))


def load_bank(path: Path) -> ReferenceBank:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise InvalidArgumentError(f"{path} is not a bank file")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != _VERSION:
        raise InvalidArgumentError(f"unsupported bank version {version}")
    header = json.loads(data[10 : 10 + header_len].decode("utf-8"))
    offset = 10 + header_len
    entries: Dict[SourceTag, np.ndarray] = {}
    for spec in header["tags"]:
        count, dim = spec["count"], spec["dim"]
        nbytes = count * dim * 4
        block = np.frombuffer(data[offset : offset + nbytes], dtype="<f4")
        entries[SourceTag.from_key(spec["key"])] = block.reshape(count, dim).astype(np.float64)
        offset += nbytes
    return ReferenceBank(
        entries=entries,
        shots=int(header["shots"]),
        category=header["category"],
        seed=int(header["seed"]),
    )
