"""On-disk embedding caches: binary tensor files plus a JSON manifest per directory.

Tensor file layout (little-endian)::

    b"CDTE" | version u32 | rows u64 | cols u64 | payload rows*cols, row-major

Version 1 payloads are float32 (embedding caches); version 2 payloads are
float64 (checkpoints, which must round-trip the engine's precision).

A cache directory holds ``manifest.json`` and either ``embeddings.cdte``
(RNA / Protein, one shared ``gene_count x dim`` matrix) or ``samples/<id>.cdte``
(DNA, one ``positions x dim`` matrix per sample).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"CDTE"
HEADER = struct.Struct("<4sIQQ")
VERSION_F32 = 1
VERSION_F64 = 2
_PAYLOAD_DTYPE = {VERSION_F32: np.dtype("<f4"), VERSION_F64: np.dtype("<f8")}

MODALITIES = ("DNA", "RNA", "Protein")
MANIFEST_NAME = "manifest.json"
SHARED_TENSOR_NAME = "embeddings.cdte"
SAMPLES_DIR = "samples"


class CacheFormatError(ValueError):
    """A tensor file or manifest is malformed, truncated, or inconsistent."""


# ---------------------------------------------------------------- tensor files

def write_tensor(path, array, version: int = VERSION_F32) -> None:
    """Write a 1-D or 2-D array; 1-D arrays are stored as a single row."""
    if version not in _PAYLOAD_DTYPE:
        raise CacheFormatError(f"unknown tensor format version {version}")
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise CacheFormatError(f"tensor files hold matrices, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise CacheFormatError(f"refusing to write non-finite values to {path}")
    rows, cols = arr.shape
    payload = np.ascontiguousarray(arr, dtype=_PAYLOAD_DTYPE[version]).tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, version, rows, cols))
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    """Read a tensor file into a float64 ``rows x cols`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise CacheFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version not in _PAYLOAD_DTYPE:
        raise CacheFormatError(f"{path}: unsupported format version {version}")
    dtype = _PAYLOAD_DTYPE[version]
    expected = rows * cols * dtype.itemsize
    payload = raw[HEADER.size:]
    if len(payload) != expected:
        kind = "truncated payload" if len(payload) < expected else "trailing bytes"
        raise CacheFormatError(f"{path}: {kind}: expected {expected} bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise CacheFormatError(f"{path}: NaN/Inf entries in payload")
    return arr


# ---------------------------------------------------------------- manifest & cache

@dataclass
class EmbeddingManifest:
    modality: str
    dim: int
    sample_count: int | None = None
    gene_count: int | None = None
    positions: int | None = None
    gene_symbols: list[str] | None = None
    dtype: str = "f32"
    endianness: str = "little"
    source_model: str = ""

    def validate(self) -> None:
        if self.modality not in MODALITIES:
            raise CacheFormatError(f"unknown modality {self.modality!r}")
        if self.dtype != "f32" or self.endianness != "little":
            raise CacheFormatError(f"unsupported storage {self.dtype}/{self.endianness}")
        if self.dim <= 0:
            raise CacheFormatError("dim must be positive")
        if self.modality == "DNA":
            if self.positions is None or self.positions <= 0:
                raise CacheFormatError("DNA manifest needs a positive positions count")
            if self.sample_count is None or self.sample_count <= 0:
                raise CacheFormatError("DNA manifest needs a positive sample_count")
            if self.gene_symbols is not None or self.gene_count is not None:
                raise CacheFormatError("DNA manifest must not carry gene fields")
        else:
            if self.positions is not None or self.sample_count is not None:
                raise CacheFormatError(f"{self.modality} manifest must not carry DNA fields")
            if not self.gene_symbols or self.gene_count != len(self.gene_symbols):
                raise CacheFormatError("gene_count must equal the number of gene_symbols (> 0)")
            check_canonical_order(self.gene_symbols)

    def to_json(self) -> dict:
        keys = ["modality"]
        if self.modality == "DNA":
            keys += ["sample_count", "positions"]
        else:
            keys += ["gene_count"]
        keys += ["dim", "dtype", "endianness"]
        if self.modality != "DNA":
            keys += ["gene_symbols"]
        keys += ["source_model"]
        return {k: getattr(self, k) for k in keys}

    @classmethod
    def from_json(cls, data: dict) -> "EmbeddingManifest":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise CacheFormatError(f"unknown manifest fields {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise CacheFormatError(f"bad manifest: {exc}") from None


def _sort_key(symbol: str) -> bytes:
    return symbol.encode("utf-8")


def check_canonical_order(symbols) -> None:
    """Gene symbols must be strictly ascending under bytewise comparison."""
    for i in range(1, len(symbols)):
        if _sort_key(symbols[i - 1]) >= _sort_key(symbols[i]):
            raise CacheFormatError(
                f"gene symbols not in canonical order at index {i}: "
                f"{symbols[i - 1]!r} before {symbols[i]!r}"
            )


def canonical_order(symbols) -> list[str]:
    return sorted(symbols, key=_sort_key)


@dataclass
class EmbeddingCache:
    """A loaded cache. DNA caches fill ``samples``; RNA/Protein fill ``matrix``."""

    manifest: EmbeddingManifest
    matrix: np.ndarray | None = None
    samples: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def gene_symbols(self) -> list[str]:
        return self.manifest.gene_symbols or []

    def validate(self) -> None:
        m = self.manifest
        m.validate()
        if m.modality == "DNA":
            if len(self.samples) != m.sample_count:
                raise CacheFormatError(
                    f"manifest says {m.sample_count} samples, cache holds {len(self.samples)}"
                )
            for key, arr in self.samples.items():
                _check_matrix(arr, (m.positions, m.dim), f"sample {key!r}")
        else:
            if self.matrix is None:
                raise CacheFormatError(f"{m.modality} cache has no matrix")
            _check_matrix(self.matrix, (m.gene_count, m.dim), f"{m.modality} matrix")


def _check_matrix(arr: np.ndarray, shape, what: str) -> None:
    if arr.shape != tuple(shape):
        raise CacheFormatError(f"{what}: shape {arr.shape} does not match manifest {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise CacheFormatError(f"{what}: NaN/Inf entries")


def write_cache(cache: EmbeddingCache, path) -> None:
    """Validate, then write the manifest and tensor files under directory ``path``.

    Values are stored as float32; caches built from float32-representable data
    round-trip exactly.
    """
    cache.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if cache.manifest.modality == "DNA":
        sdir = root / SAMPLES_DIR
        sdir.mkdir(exist_ok=True)
        for key in sorted(cache.samples):
            if not key or "/" in key or key.startswith("."):
                raise CacheFormatError(f"invalid sample id {key!r}")
            write_tensor(sdir / f"{key}.cdte", cache.samples[key])
    else:
        write_tensor(root / SHARED_TENSOR_NAME, cache.matrix)
    (root / MANIFEST_NAME).write_text(json.dumps(cache.manifest.to_json(), indent=2) + "\n")


def read_manifest(path) -> EmbeddingManifest:
    mpath = Path(path) / MANIFEST_NAME
    try:
        data = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise CacheFormatError(f"{mpath}: invalid JSON ({exc})") from None
    manifest = EmbeddingManifest.from_json(data)
    manifest.validate()
    return manifest


def list_samples(path) -> list[str]:
    return sorted(p.stem for p in (Path(path) / SAMPLES_DIR).glob("*.cdte"))


def load_sample(path, sample_id: str, manifest: EmbeddingManifest | None = None) -> np.ndarray:
    """Load a single DNA sample without reading the rest of the cache."""
    manifest = manifest or read_manifest(path)
    arr = read_tensor(Path(path) / SAMPLES_DIR / f"{sample_id}.cdte")
    _check_matrix(arr, (manifest.positions, manifest.dim), f"sample {sample_id!r}")
    return arr


def read_cache(path) -> EmbeddingCache:
    root = Path(path)
    manifest = read_manifest(root)
    if manifest.modality == "DNA":
        samples = {key: load_sample(root, key, manifest) for key in list_samples(root)}
        cache = EmbeddingCache(manifest, samples=samples)
    else:
        cache = EmbeddingCache(manifest, matrix=read_tensor(root / SHARED_TENSOR_NAME))
    cache.validate()
    return cache


# ---------------------------------------------------------------- alignment

@dataclass
class AlignmentReport:
    ok: bool
    checked: list[int]
    mismatches: list[tuple[int, str, str]]
    message: str = ""

    def __str__(self) -> str:
        return self.message


def verify_alignment(rna: EmbeddingCache, protein: EmbeddingCache, samples: int = 100,
                     seed: int = 0) -> AlignmentReport:
    """Spot-check that RNA and Protein caches name the same gene at random indices.

    Mismatches are reported, not raised.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    r_sym, p_sym = rna.gene_symbols, protein.gene_symbols
    if len(r_sym) != len(p_sym):
        msg = f"gene_count mismatch: RNA {len(r_sym)} vs Protein {len(p_sym)}"
        return AlignmentReport(False, [], [], msg)
    idx = np.random.default_rng(seed).integers(0, len(r_sym), size=samples)
    mismatches = []
    for i in sorted(set(int(i) for i in idx)):
        if r_sym[i] != p_sym[i]:
            mismatches.append((i, r_sym[i], p_sym[i]))
    # random draws may miss a lone mismatch; a full scan is cheap and makes the report exact
    full = [(i, a, b) for i, (a, b) in enumerate(zip(r_sym, p_sym)) if a != b]
    for item in full:
        if item not in mismatches:
            mismatches.append(item)
    mismatches.sort()
    if mismatches:
        i, a, b = mismatches[0]
        msg = f"gene symbol mismatch at index {i}: RNA {a!r} vs Protein {b!r}"
        if len(mismatches) > 1:
            msg += f" (+{len(mismatches) - 1} more)"
        return AlignmentReport(False, [int(i) for i in idx], mismatches, msg)
    msg = f"{samples} sampled indices agree across {len(r_sym)} genes"
    return AlignmentReport(True, [int(i) for i in idx], [], msg)


class IndexMap(dict):
    """Original dataset gene index -> aligned (canonical) index."""

    def __init__(self, pairs=(), gene_count: int | None = None):
        super().__init__(pairs)
        seen = set()
        for orig, aligned in self.items():
            if aligned in seen:
                raise ValueError(f"index map is not injective: {aligned} hit twice")
            if aligned < 0 or (gene_count is not None and aligned >= gene_count):
                raise ValueError(f"aligned index {aligned} out of range")
            seen.add(aligned)

    @classmethod
    def from_symbols(cls, original_symbols, aligned_symbols) -> "IndexMap":
        """Map positions in ``original_symbols`` onto their positions in ``aligned_symbols``.

        Originals absent from the aligned set are left unmapped.
        """
        where = {s: i for i, s in enumerate(aligned_symbols)}
        pairs = [(i, where[s]) for i, s in enumerate(original_symbols) if s in where]
        return cls(pairs, gene_count=len(aligned_symbols))


def apply_index_map(index_map: IndexMap, original: int) -> int:
    try:
        return index_map[original]
    except KeyError:
        raise KeyError(f"original gene index {original} has no aligned index") from None
