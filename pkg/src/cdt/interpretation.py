"""Attention maps, gradient importance and the statistics built on them.

Positions are 128-bp bins of a window centred on the enhancer; offsets are
measured from the enhancer centre to the centre of a bin.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M

LAYERS = {"DNA->RNA": "cross.dna_rna", "RNA->Protein": "cross.rna_protein"}
WITHIN_50KB = 50_000


@dataclass
class AttentionProfile:
    sample_id: str
    layer: str
    matrix: np.ndarray  # head-averaged, (n_query, n_key)
    heads: np.ndarray | None = None  # (heads, n_query, n_key)
    target_gene: int | None = None

    def row(self, gene: int) -> np.ndarray:
        if not 0 <= gene < self.matrix.shape[0]:
            raise IndexError(f"gene {gene} outside [0, {self.matrix.shape[0]})")
        return self.matrix[gene]

    def gene_mean(self) -> np.ndarray:
        return self.matrix.mean(axis=0)


@dataclass
class GradientProfile:
    sample_id: str
    gene_index: int
    importance: np.ndarray  # (positions,)


@dataclass
class BinMapping:
    enhancer_center: int = 0
    bin_width: int = 128
    positions: int = 896

    @property
    def half_span(self) -> float:
        return self.positions * self.bin_width / 2

    def offset(self, p: int) -> float:
        """Signed bp offset from the enhancer centre to the centre of bin ``p``."""
        if not 0 <= p < self.positions:
            raise IndexError(f"bin {p} outside [0, {self.positions})")
        return (p + 0.5) * self.bin_width - self.half_span

    def bin_of_offset(self, offset: float) -> int:
        p = math.floor((offset + self.half_span) / self.bin_width)
        if not 0 <= p < self.positions:
            raise ValueError(f"offset {offset} bp lies outside the window")
        return p

    def bin_of_coordinate(self, coordinate: int) -> int:
        return self.bin_of_offset(coordinate - self.enhancer_center)

    def interval(self, p: int) -> tuple[int, int]:
        """0-based half-open genomic interval covered by bin ``p``."""
        if not 0 <= p < self.positions:
            raise IndexError(f"bin {p} outside [0, {self.positions})")
        start = int(round(self.enhancer_center - self.half_span)) + p * self.bin_width
        return start, start + self.bin_width


# ---------------------------------------------------------------- extraction

def extract_cross_attention(record: M.ForwardRecord, layer: str = "DNA->RNA",
                            sample_id: str = "", target_gene: int | None = None,
                            keep_heads: bool = False) -> AttentionProfile:
    key = LAYERS.get(layer, layer)
    if key not in record.attention:
        raise KeyError(f"record has no attention layer {layer!r}")
    if record.batched:
        raise ValueError("extract from an unbatched record")
    w = record.attention[key]
    return AttentionProfile(sample_id, layer, w.mean(axis=0), w.copy() if keep_heads else None,
                            target_gene)


def gradient_importance(record: M.ForwardRecord, params, config: M.ModelConfig,
                        target_gene: int, sample_id: str = "") -> GradientProfile:
    """``I_p = || d y_hat[target] / d x_p ||_2`` over raw DNA input positions."""
    if record.training:
        raise ValueError("gradient importance needs an eval-mode record")
    if record.batched:
        raise ValueError("gradient importance works on a single-sample record")
    _, dX = M.output_gradient(record, params, config, target_gene)
    return GradientProfile(sample_id, target_gene, np.linalg.norm(dX["dna"], axis=-1))


def profile_sample(dna, rna, protein, params, config: M.ModelConfig, target_gene: int,
                   sample_id: str = "", keep_heads: bool = False):
    """Eval-mode forward, then the DNA->RNA attention profile and gradient profile."""
    rec = M.forward(dna, rna, protein, params, config, training=False)
    att = extract_cross_attention(rec, "DNA->RNA", sample_id, target_gene, keep_heads)
    grad = gradient_importance(rec, params, config, target_gene, sample_id)
    return att, grad


# ---------------------------------------------------------------- statistics

def top_k(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=np.float64)
    if k > scores.size:
        raise ValueError(f"k={k} exceeds length {scores.size}")
    if k < 0:
        raise ValueError("k must be >= 0")
    order = np.lexsort((np.arange(scores.size), -scores))
    return [int(i) for i in order[:k]]


def overlap_count(a, b) -> int:
    return len(set(a) & set(b))


def attention_peak_offset(profile: AttentionProfile, gene: int, mapping: BinMapping) -> float:
    row = profile.row(gene)
    return mapping.offset(int(np.argmax(row)))  # argmax keeps the first maximum


def distance_stats(offsets) -> dict:
    offsets = np.abs(np.asarray(offsets, dtype=np.float64))
    if offsets.size == 0:
        raise ValueError("no offsets")
    return {"n": int(offsets.size), "mean_abs_offset_bp": float(offsets.mean()),
            "fraction_within_50kb": float((offsets <= WITHIN_50KB).mean())}


def peak_distance_stats(profiles, mapping: BinMapping) -> dict:
    """Mean |offset| of attention peaks (target-gene row) and the share within 50 kb."""
    if not profiles:
        raise ValueError("no profiles")
    offsets = []
    for prof in profiles:
        gene = prof.target_gene if prof.target_gene is not None else 0
        offsets.append(attention_peak_offset(prof, gene, mapping))
    return distance_stats(offsets)


def temperature_scale(dist, T: float) -> np.ndarray:
    """Sharpen (T < 1) or flatten a distribution by ``p_i^(1/T)`` and renormalising."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("distribution has negative entries")
    # divide by the max first so large 1/T cannot underflow every entry
    scaled = (p / p.max(axis=-1, keepdims=True)) ** (1.0 / T)
    return scaled / scaled.sum(axis=-1, keepdims=True)


def recovery_rate(gradients, planted: int, k: int) -> float:
    """Fraction of gradient profiles ranking ``planted`` within their top ``k``."""
    if not gradients:
        raise ValueError("no gradient profiles")
    return sum(planted in top_k(g.importance, k) for g in gradients) / len(gradients)


# ---------------------------------------------------------------- reports

def _mapping_for(mappings, sample_id: str) -> BinMapping:
    if isinstance(mappings, BinMapping):
        return mappings
    return mappings[sample_id]


def _attention_vector(profile: AttentionProfile) -> np.ndarray:
    if profile.target_gene is None:
        return profile.gene_mean()
    return profile.row(profile.target_gene)


def export_report(profiles, gradients, mappings, fmt: str, path, chrom: str | None = None,
                  k: int = 20, temperature: float | None = None) -> Path:
    """Write paired attention/gradient profiles as ``json``, ``csv`` or ``bed``.

    ``mappings`` is one ``BinMapping`` or a dict keyed by sample id.
    """
    if fmt not in ("json", "csv", "bed"):
        raise ValueError(f"unknown report format {fmt!r}")
    if len(profiles) != len(gradients):
        raise ValueError("profiles and gradients must pair up")
    for prof, grad in zip(profiles, gradients):
        if prof.matrix.shape[-1] != grad.importance.shape[0]:
            raise ValueError(f"sample {prof.sample_id}: attention and gradient lengths differ")
    path = Path(path)
    if fmt == "json":
        _export_json(profiles, gradients, mappings, path, k, temperature)
    elif fmt == "csv":
        _export_csv(profiles, gradients, mappings, path)
    else:
        if not chrom:
            raise ValueError("BED export needs a chromosome name")
        _export_bed(profiles, gradients, mappings, path, chrom, k)
    return path


def _export_json(profiles, gradients, mappings, path, k, temperature):
    entries, overlaps, offsets = [], [], []
    for prof, grad in zip(profiles, gradients):
        mapping = _mapping_for(mappings, prof.sample_id)
        att = _attention_vector(prof)
        ta, tg = top_k(att, k), top_k(grad.importance, k)
        ov = overlap_count(ta, tg)
        off = mapping.offset(int(np.argmax(att)))
        overlaps.append(ov)
        offsets.append(off)
        entry = {
            "sample_id": prof.sample_id, "gene_index": grad.gene_index, "layer": prof.layer,
            "attention_matrix": prof.matrix.tolist(), "attention": att.tolist(),
            "gradient": grad.importance.tolist(), "top_k_attention": ta, "top_k_gradient": tg,
            "overlap": ov, "attention_peak_offset_bp": off,
            "gradient_peak_offset_bp": mapping.offset(int(np.argmax(grad.importance))),
        }
        if prof.heads is not None:
            entry["attention_heads"] = prof.heads.tolist()
        if temperature is not None:
            entry["attention_scaled"] = temperature_scale(att, temperature).tolist()
        entries.append(entry)
    stats = {"k": k, "overlap_mean": float(np.mean(overlaps)) if overlaps else None,
             "overlap_histogram": np.bincount(overlaps, minlength=k + 1).tolist() if overlaps else []}
    if offsets:
        stats.update(distance_stats(offsets))
    path.write_text(json.dumps({"samples": entries, "stats": stats}) + "\n")


def load_report_json(path) -> dict:
    data = json.loads(Path(path).read_text())
    for entry in data["samples"]:
        for key in ("attention_matrix", "attention", "gradient", "attention_heads",
                    "attention_scaled"):
            if key in entry:
                entry[key] = np.asarray(entry[key], dtype=np.float64)
    return data


def _export_csv(profiles, gradients, mappings, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "gene_index", "bin", "offset_bp", "attention", "gradient"])
        for prof, grad in zip(profiles, gradients):
            mapping = _mapping_for(mappings, prof.sample_id)
            att = _attention_vector(prof)
            for p in range(att.shape[0]):
                w.writerow([prof.sample_id, grad.gene_index, p, mapping.offset(p),
                            repr(float(att[p])), repr(float(grad.importance[p]))])


def _export_bed(profiles, gradients, mappings, path, chrom, k):
    lines = []
    for prof, grad in zip(profiles, gradients):
        mapping = _mapping_for(mappings, prof.sample_id)
        for source, scores in (("attention", _attention_vector(prof)),
                               ("gradient", grad.importance)):
            top = top_k(scores, min(k, scores.shape[0]))
            peak = float(scores[top[0]]) if top else 0.0
            for rank, p in enumerate(top, start=1):
                start, end = mapping.interval(p)
                score = int(round(1000 * float(scores[p]) / peak)) if peak > 0 else 0
                lines.append(f"{chrom}\t{start}\t{end}\t{prof.sample_id}|{source}|{rank}\t{score}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
