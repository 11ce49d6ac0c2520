"""Desk-scale data with a planted linear regulatory signal.

DNA embeddings are standard normal. The model has no positional encoding of
its own, so a target that depends on *which* position carries a feature is only
learnable when the embeddings themselves identify positions (real DNA
embeddings do). ``positional_channels > 0`` reserves that many leading channels
for a fixed per-position code, drawn once from N(0, 1) and shared by all
samples; the remaining channels are i.i.d. per sample. Either way every entry is
marginally standard normal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding_store import EmbeddingCache, EmbeddingManifest, write_cache
from .numerics import RngStream
from .training import TrainingSample, write_dataset


@dataclass
class SyntheticSpec:
    seed: int
    n_samples: int = 64
    dna_positions: int = 8
    d_dna: int = 12
    d_rna: int = 6
    d_protein: int = 8
    n_genes: int = 4
    planted_positions: list = field(default_factory=lambda: [(0, None)])
    noise_std: float = 0.0
    enhancers_per_group: int = 1
    positional_channels: int = 0

    def __post_init__(self):
        for name in ("n_samples", "dna_positions", "d_dna", "d_rna", "d_protein", "n_genes",
                     "enhancers_per_group"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 <= self.positional_channels < self.d_dna:
            raise ValueError("positional_channels must leave at least one content channel")
        planted = []
        for item in self.planted_positions:
            if isinstance(item, dict):
                pos, w = item["position"], item.get("weight")
            else:
                pos, w = item
            if not 0 <= int(pos) < self.dna_positions:
                raise ValueError(f"planted position {pos} outside [0, {self.dna_positions})")
            if w is not None:
                w = [float(v) for v in w]
                if len(w) != self.d_dna:
                    raise ValueError(f"planted weight has length {len(w)}, expected {self.d_dna}")
            planted.append((int(pos), w))
        self.planted_positions = planted

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        if "seed" not in data:
            raise KeyError("seed")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec fields {sorted(unknown)}")
        return cls(**data)


def gene_symbols(n: int) -> list[str]:
    return [f"G{i:04d}" for i in range(n)]


def sample_ids(n: int) -> list[str]:
    return [f"S{i:05d}" for i in range(n)]


def _f32_normal(rng: RngStream, shape) -> np.ndarray:
    # round through float32 so the in-memory cache equals what goes to disk
    return rng.normal(shape).astype(np.float32).astype(np.float64)


def gen_caches(spec: SyntheticSpec):
    """Returns ``(dna_cache, rna_cache, protein_cache)``, deterministic in ``spec.seed``."""
    root = RngStream(spec.seed)
    dna_rng, rna_rng, prot_rng = root.spawn(10), root.spawn(11), root.spawn(12)
    k = spec.positional_channels
    code = _f32_normal(dna_rng, (spec.dna_positions, k)) if k else None
    samples = {}
    for sid in sample_ids(spec.n_samples):
        x = _f32_normal(dna_rng, (spec.dna_positions, spec.d_dna))
        if k:
            x[:, :k] = code
        samples[sid] = x
    symbols = gene_symbols(spec.n_genes)
    dna = EmbeddingCache(
        EmbeddingManifest("DNA", spec.d_dna, sample_count=spec.n_samples,
                          positions=spec.dna_positions, source_model="synthetic"),
        samples=samples)
    rna = EmbeddingCache(
        EmbeddingManifest("RNA", spec.d_rna, gene_count=spec.n_genes, gene_symbols=symbols,
                          source_model="synthetic"),
        matrix=_f32_normal(rna_rng, (spec.n_genes, spec.d_rna)))
    protein = EmbeddingCache(
        EmbeddingManifest("Protein", spec.d_protein, gene_count=spec.n_genes,
                          gene_symbols=list(symbols), source_model="synthetic"),
        matrix=_f32_normal(prot_rng, (spec.n_genes, spec.d_protein)))
    return dna, rna, protein


def planted_weights(spec: SyntheticSpec) -> list[tuple[int, np.ndarray]]:
    """Resolve planted weights; unspecified ones become seeded unit vectors on content channels."""
    rng = RngStream(spec.seed).spawn(20)
    k = spec.positional_channels
    out = []
    for pos, w in spec.planted_positions:
        if w is None:
            v = np.zeros(spec.d_dna)
            v[k:] = rng.normal((spec.d_dna - k,))
            v /= np.linalg.norm(v)
        else:
            v = np.asarray(w, dtype=np.float64)
        out.append((pos, v))
    return out


def plant_signal(dna_cache: EmbeddingCache, spec: SyntheticSpec):
    """``beta_i = sum_(p, w) <x_{i,p}, w> + noise``; genes round-robin, enhancers in groups.

    Returns ``(samples, ground_truth)``.
    """
    if not spec.planted_positions:
        raise ValueError("need at least one planted position")
    weights = planted_weights(spec)
    noise = RngStream(spec.seed).spawn(21).normal((spec.n_samples,), scale=1.0) * spec.noise_std
    out = []
    for i, sid in enumerate(sample_ids(spec.n_samples)):
        x = dna_cache.samples[sid]
        beta = sum(float(x[p] @ w) for p, w in weights) + float(noise[i])
        out.append(TrainingSample(f"E{i // spec.enhancers_per_group:05d}", sid,
                                  i % spec.n_genes, beta))
    truth = {
        "seed": spec.seed,
        "noise_std": spec.noise_std,
        "positional_channels": spec.positional_channels,
        "planted": [{"position": p, "weight": w.tolist()} for p, w in weights],
    }
    return out, truth


def write_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write ``dna/ rna/ protein/`` caches, ``dataset.csv`` and ``ground_truth.json``."""
    out = Path(out_dir)
    dna, rna, protein = gen_caches(spec)
    samples, truth = plant_signal(dna, spec)
    write_cache(dna, out / "dna")
    write_cache(rna, out / "rna")
    write_cache(protein, out / "protein")
    write_dataset(samples, out / "dataset.csv")
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    return {"dna": out / "dna", "rna": out / "rna", "protein": out / "protein",
            "dataset": out / "dataset.csv", "ground_truth": out / "ground_truth.json",
            "n_samples": len(samples)}
