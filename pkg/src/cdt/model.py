"""Three-modality transformer with directional cross-attention and pooled fusion.

Stage order of the forward pass:

1. per-modality projection ``Dropout(LayerNorm(X W + b))``
2. per-modality self-attention stacks (post-norm, attention-only sublayers)
3. cross-attention DNA -> RNA, then fused RNA -> Protein (plain residual)
4. attention pooling of DNA, fused RNA and fused Protein with learned queries,
   concatenation and a GELU feed-forward fusion
5. task head ``Linear -> GELU -> Dropout -> Linear`` with one output per gene

Parameters live in a flat ``dict[str, np.ndarray]`` so the optimizer,
gradient checks and checkpoint I/O can treat them uniformly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .embedding_store import VERSION_F64, read_tensor, write_tensor
from .numerics import DTYPE, NumericalError, RngStream

logger = logging.getLogger(__name__)

ModelParams = dict  # name -> float64 ndarray

MODALITIES = ("dna", "rna", "protein")
CROSS_BLOCKS = ("dna_rna", "rna_protein")
_MHA_KEYS = ("Wq", "bq", "Wk", "Wv", "bv", "Wo", "bo")
REFERENCE_PARAM_COUNT = 60_000_000


@dataclass
class ModelConfig:
    n_genes: int
    dna_positions: int
    d_dna: int
    d_rna: int
    d_protein: int
    d: int = 768
    heads: int = 8
    dna_self_layers: int = 2
    rna_self_layers: int = 1
    protein_self_layers: int = 1
    dropout_p: float = 0.3
    d_ff: int | None = None
    head_hidden: int | None = None

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = self.d
        if self.head_hidden is None:
            self.head_hidden = self.d
        self.validate()

    def validate(self) -> None:
        for name in ("n_genes", "dna_positions", "d_dna", "d_rna", "d_protein", "d",
                     "heads", "d_ff", "head_hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("dna_self_layers", "rna_self_layers", "protein_self_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    def input_dim(self, modality: str) -> int:
        return {"dna": self.d_dna, "rna": self.d_rna, "protein": self.d_protein}[modality]

    def self_layers(self, modality: str) -> int:
        return {"dna": self.dna_self_layers, "rna": self.rna_self_layers,
                "protein": self.protein_self_layers}[modality]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """Full-size configuration: 768-wide, 8 heads, 2/1/1 self layers, 2,360 genes."""
        base = dict(n_genes=2360, dna_positions=896, d_dna=3072, d_rna=512, d_protein=768)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- parameters

def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered ``(name, shape, kind)`` for every trainable tensor.

    ``kind`` selects the initializer: ``weight``, ``bias``, ``gain``, ``shift``
    or ``query``.
    """
    d = config.d
    out = []
    for m in MODALITIES:
        out += [(f"proj.{m}.W", (config.input_dim(m), d), "weight"),
                (f"proj.{m}.b", (d,), "bias"),
                (f"proj.{m}.ln_g", (d,), "gain"),
                (f"proj.{m}.ln_b", (d,), "shift")]

    def mha(prefix):
        # no key bias: it shifts every logit of a query row equally
        items = []
        for w in ("q", "k", "v", "o"):
            items.append((f"{prefix}.W{w}", (d, d), "weight"))
            if w != "k":
                items.append((f"{prefix}.b{w}", (d,), "bias"))
        return items

    for m in MODALITIES:
        for layer in range(config.self_layers(m)):
            prefix = f"self.{m}.{layer}"
            out += mha(prefix)
            out += [(f"{prefix}.ln_g", (d,), "gain"), (f"{prefix}.ln_b", (d,), "shift")]
    for block in CROSS_BLOCKS:
        out += mha(f"cross.{block}")
    out += [(f"vce.q_{m}", (d,), "query") for m in MODALITIES]
    out += [("vce.W1", (3 * d, config.d_ff), "weight"), ("vce.b1", (config.d_ff,), "bias"),
            ("vce.W2", (config.d_ff, d), "weight"), ("vce.b2", (d,), "bias"),
            ("head.W1", (d, config.head_hidden), "weight"),
            ("head.b1", (config.head_hidden,), "bias"),
            ("head.W2", (config.head_hidden, config.n_genes), "weight"),
            ("head.b2", (config.n_genes,), "bias")]
    return out


def param_count(config: ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _ in param_shapes(config))


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and queries; zero biases; unit gains."""
    params = {}
    for name, shape, kind in param_shapes(config):
        if kind == "weight":
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, shape)
        elif kind == "query":
            bound = 1.0 / math.sqrt(config.d)
            params[name] = rng.uniform(-bound, bound, shape)
        elif kind == "gain":
            params[name] = np.ones(shape, dtype=DTYPE)
        else:
            params[name] = np.zeros(shape, dtype=DTYPE)
    return params


def check_params(params: ModelParams, config: ModelConfig) -> None:
    expected = {name: shape for name, shape, _ in param_shapes(config)}
    missing = expected.keys() - params.keys()
    extra = params.keys() - expected.keys()
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")


def _sub(params: ModelParams, prefix: str) -> dict:
    return {k: params[f"{prefix}.{k}"] for k in _MHA_KEYS}


def _guard(x: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values after stage {stage!r}")


# ---------------------------------------------------------------- stages

def project(X, modality: str, params: ModelParams, config: ModelConfig,
            rng: RngStream | None = None, training: bool = False):
    """``Dropout(LayerNorm(X W + b))``. Returns ``(H, cache)``."""
    X = np.asarray(X, dtype=DTYPE)
    W = params[f"proj.{modality}.W"]
    if X.shape[-1] != W.shape[0]:
        raise ValueError(f"{modality} input width {X.shape[-1]}, expected {W.shape[0]}")
    U, _ = nx.linear(X, W, params[f"proj.{modality}.b"])
    L, ln_cache = nx.layer_norm(U, params[f"proj.{modality}.ln_g"], params[f"proj.{modality}.ln_b"])
    H, mask = nx.dropout(L, config.dropout_p, rng, training)
    return H, (X, ln_cache, mask)


def project_backward(dH, cache, modality: str, params: ModelParams, grads: dict):
    X, ln_cache, mask = cache
    dU, dg, db_ln = nx.layer_norm_backward(nx.dropout_backward(dH, mask), ln_cache)
    dX, dW, db = nx.linear_backward(dU, X, params[f"proj.{modality}.W"])
    grads[f"proj.{modality}.W"] += dW
    grads[f"proj.{modality}.b"] += db
    grads[f"proj.{modality}.ln_g"] += dg
    grads[f"proj.{modality}.ln_b"] += db_ln
    return dX


def self_attention_stack(H, modality: str, params: ModelParams, config: ModelConfig,
                         rng: RngStream | None = None, training: bool = False,
                         layers: int | None = None):
    """Per layer ``H <- LayerNorm(H + Dropout(MultiHead(H, H, H)))``.

    Returns ``(H, weights_per_layer, cache)``.
    """
    H = np.asarray(H, dtype=DTYPE)
    if H.shape[-1] != config.d:
        raise ValueError(f"self-attention input width {H.shape[-1]}, expected {config.d}")
    layers = config.self_layers(modality) if layers is None else layers
    weights, caches = [], []
    for layer in range(layers):
        prefix = f"self.{modality}.{layer}"
        A, w, mha_cache = nx.multi_head_attention(H, H, H, _sub(params, prefix), config.heads)
        Ad, mask = nx.dropout(A, config.dropout_p, rng, training)
        H, ln_cache = nx.layer_norm(H + Ad, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
        weights.append(w)
        caches.append((mha_cache, mask, ln_cache))
    return H, weights, caches


def self_attention_stack_backward(dH, caches, modality: str, params: ModelParams, grads: dict):
    for layer in reversed(range(len(caches))):
        prefix = f"self.{modality}.{layer}"
        mha_cache, mask, ln_cache = caches[layer]
        dS, dg, db = nx.layer_norm_backward(dH, ln_cache)
        grads[f"{prefix}.ln_g"] += dg
        grads[f"{prefix}.ln_b"] += db
        dq, dk, dv, g = nx.multi_head_attention_backward(
            nx.dropout_backward(dS, mask), mha_cache, _sub(params, prefix))
        for key in _MHA_KEYS:
            grads[f"{prefix}.{key}"] += g[key]
        dH = dS + dq + dk + dv
    return dH


def cross_attend(query_H, context_H, block: str, params: ModelParams, config: ModelConfig,
                 rng: RngStream | None = None, training: bool = False):
    """``query_H + Dropout(MultiHead(Q=query_H, K=context_H, V=context_H))``.

    Returns ``(fused, weights, cache)``; ``weights`` is ``(..., heads, n_query, n_context)``.
    """
    query_H = np.asarray(query_H, dtype=DTYPE)
    context_H = np.asarray(context_H, dtype=DTYPE)
    if query_H.shape[-1] != config.d or context_H.shape[-1] != config.d:
        raise ValueError("cross-attention inputs must have width d")
    A, w, mha_cache = nx.multi_head_attention(
        query_H, context_H, context_H, _sub(params, f"cross.{block}"), config.heads)
    Ad, mask = nx.dropout(A, config.dropout_p, rng, training)
    return query_H + Ad, w, (mha_cache, mask)


def cross_attend_backward(dfused, cache, block: str, params: ModelParams, grads: dict):
    """Returns ``(d_query, d_context)``."""
    mha_cache, mask = cache
    dq, dk, dv, g = nx.multi_head_attention_backward(
        nx.dropout_backward(dfused, mask), mha_cache, _sub(params, f"cross.{block}"))
    for key in _MHA_KEYS:
        grads[f"cross.{block}.{key}"] += g[key]
    return dfused + dq, dk + dv


def vce_pool(H_dna, H_rna_fused, H_protein_fused, params: ModelParams, config: ModelConfig):
    """Attention pooling with a learned query per modality, then the fusion FFN.

    ``z_m = softmax(q_m H_m^T / sqrt(d)) H_m``; ``h = W2 GELU(W1 [z_dna; z_rna; z_protein] + b1) + b2``.
    Returns ``(h_vce, pool_weights, pooled, cache)``.
    """
    scale = 1.0 / math.sqrt(config.d)
    inputs = {"dna": H_dna, "rna": H_rna_fused, "protein": H_protein_fused}
    pool_weights, pooled = {}, {}
    for m, H in inputs.items():
        H = np.asarray(H, dtype=DTYPE)
        if H.shape[-1] != config.d:
            raise ValueError(f"VCE input {m} width {H.shape[-1]}, expected {config.d}")
        a = nx.softmax((H @ params[f"vce.q_{m}"]) * scale)
        pool_weights[m] = a
        pooled[m] = (a[..., None, :] @ H)[..., 0, :]
    x = np.concatenate([pooled[m] for m in MODALITIES], axis=-1)
    u, _ = nx.linear(x, params["vce.W1"], params["vce.b1"])
    g = nx.gelu(u)
    h, _ = nx.linear(g, params["vce.W2"], params["vce.b2"])
    return h, pool_weights, pooled, (inputs, pool_weights, x, u, g)


def vce_pool_backward(dh, cache, params: ModelParams, config: ModelConfig, grads: dict):
    """Returns ``{modality: dH_m}``."""
    inputs, pool_weights, x, u, g = cache
    scale = 1.0 / math.sqrt(config.d)
    dg, dW2, db2 = nx.linear_backward(dh, g, params["vce.W2"])
    du = dg * nx.gelu_grad(u)
    dx, dW1, db1 = nx.linear_backward(du, x, params["vce.W1"])
    grads["vce.W2"] += dW2
    grads["vce.b2"] += db2
    grads["vce.W1"] += dW1
    grads["vce.b1"] += db1
    d = config.d
    dH = {}
    for i, m in enumerate(MODALITIES):
        dz = dx[..., i * d:(i + 1) * d]
        H, a, q = inputs[m], pool_weights[m], params[f"vce.q_{m}"]
        da = (H @ dz[..., :, None])[..., 0]
        ds = nx.softmax_backward(da, a) * scale
        grads[f"vce.q_{m}"] += (ds[..., None, :] @ H).reshape(-1, d).sum(axis=0)
        dH[m] = a[..., :, None] * dz[..., None, :] + ds[..., :, None] * q
    return dH


def task_head(h_vce, params: ModelParams, config: ModelConfig,
              rng: RngStream | None = None, training: bool = False):
    """``Linear -> GELU -> Dropout -> Linear``, one output per gene. Returns ``(y_hat, cache)``."""
    h_vce = np.asarray(h_vce, dtype=DTYPE)
    if h_vce.shape[-1] != config.d:
        raise ValueError(f"task head input width {h_vce.shape[-1]}, expected {config.d}")
    u, _ = nx.linear(h_vce, params["head.W1"], params["head.b1"])
    g = nx.gelu(u)
    gd, mask = nx.dropout(g, config.dropout_p, rng, training)
    y, _ = nx.linear(gd, params["head.W2"], params["head.b2"])
    return y, (h_vce, u, gd, mask)


def task_head_backward(dy, cache, params: ModelParams, grads: dict):
    h_vce, u, gd, mask = cache
    dgd, dW2, db2 = nx.linear_backward(dy, gd, params["head.W2"])
    du = nx.dropout_backward(dgd, mask) * nx.gelu_grad(u)
    dh, dW1, db1 = nx.linear_backward(du, h_vce, params["head.W1"])
    grads["head.W2"] += dW2
    grads["head.b2"] += db2
    grads["head.W1"] += dW1
    grads["head.b1"] += db1
    return dh


# ---------------------------------------------------------------- full pass

@dataclass
class ForwardRecord:
    """Activations and attention maps from one forward pass.

    Arrays carry a leading batch axis only when the DNA input had one.
    Attention maps are keyed ``self.<modality>.<layer>`` and ``cross.<block>``
    with shape ``(heads, n_query, n_key)``.
    """

    H_DNA: np.ndarray
    H_RNA: np.ndarray
    H_RNA_fused: np.ndarray
    H_Protein: np.ndarray
    H_Protein_fused: np.ndarray
    z: dict
    h_vce: np.ndarray
    y_hat: np.ndarray
    attention: dict
    pool_weights: dict
    training: bool = False
    dropout_masks: dict = field(default_factory=dict)
    batched: bool = False
    _tape: dict | None = field(default=None, repr=False)

    @property
    def z_DNA(self):
        return self.z["dna"]

    @property
    def z_RNA(self):
        return self.z["rna"]

    @property
    def z_Protein(self):
        return self.z["protein"]


def forward(dna, rna, protein, params: ModelParams, config: ModelConfig,
            training: bool = False, rng: RngStream | None = None) -> ForwardRecord:
    """Run all stages for one DNA sample ``(positions, d_dna)`` or a batch ``(B, positions, d_dna)``.

    ``rna`` and ``protein`` are the shared ``(n_genes, d_m)`` gene matrices.
    Eval mode (``training=False``) is dropout-free and deterministic.
    """
    dna = np.asarray(dna, dtype=DTYPE)
    batched = dna.ndim == 3
    if not batched:
        dna = dna[None]
    B = dna.shape[0]
    expected = {"dna": (config.dna_positions, config.d_dna),
                "rna": (config.n_genes, config.d_rna),
                "protein": (config.n_genes, config.d_protein)}
    raw = {"dna": dna,
           "rna": np.asarray(rna, dtype=DTYPE),
           "protein": np.asarray(protein, dtype=DTYPE)}
    for m in MODALITIES:
        if raw[m].shape[-2:] != expected[m]:
            raise ValueError(f"{m} input shape {raw[m].shape[-2:]}, expected {expected[m]}")
    for m in ("rna", "protein"):
        if raw[m].ndim == 2:
            raw[m] = np.broadcast_to(raw[m], (B, *raw[m].shape))
    for m in MODALITIES:
        _guard(raw[m], f"input.{m}")

    tape = {}
    H, attention = {}, {}
    for m in MODALITIES:
        H0, tape[f"proj.{m}"] = project(raw[m], m, params, config, rng, training)
        _guard(H0, f"projection.{m}")
        H[m], weights, tape[f"self.{m}"] = self_attention_stack(H0, m, params, config, rng, training)
        _guard(H[m], f"self_attention.{m}")
        for layer, w in enumerate(weights):
            attention[f"self.{m}.{layer}"] = w

    rna_fused, attention["cross.dna_rna"], tape["cross.dna_rna"] = cross_attend(
        H["rna"], H["dna"], "dna_rna", params, config, rng, training)
    _guard(rna_fused, "cross_attention.dna_rna")
    protein_fused, attention["cross.rna_protein"], tape["cross.rna_protein"] = cross_attend(
        H["protein"], rna_fused, "rna_protein", params, config, rng, training)
    _guard(protein_fused, "cross_attention.rna_protein")

    h_vce, pool_weights, pooled, tape["vce"] = vce_pool(H["dna"], rna_fused, protein_fused,
                                                         params, config)
    _guard(h_vce, "vce")
    y_hat, tape["head"] = task_head(h_vce, params, config, rng, training)
    _guard(y_hat, "task_head")

    masks = {}
    if training:
        masks = _collect_masks(tape)

    unb = (lambda a: a) if batched else (lambda a: a[0])
    return ForwardRecord(
        H_DNA=unb(H["dna"]), H_RNA=unb(H["rna"]), H_RNA_fused=unb(rna_fused),
        H_Protein=unb(H["protein"]), H_Protein_fused=unb(protein_fused),
        z={m: unb(v) for m, v in pooled.items()},
        h_vce=unb(h_vce), y_hat=unb(y_hat),
        attention={k: unb(v) for k, v in attention.items()},
        pool_weights={m: unb(v) for m, v in pool_weights.items()},
        training=training, dropout_masks=masks, batched=batched, _tape=tape,
    )


def _collect_masks(tape: dict) -> dict:
    masks = {}
    for m in MODALITIES:
        masks[f"proj.{m}"] = tape[f"proj.{m}"][2]
        for layer, c in enumerate(tape[f"self.{m}"]):
            masks[f"self.{m}.{layer}"] = c[1]
    for block in CROSS_BLOCKS:
        masks[f"cross.{block}"] = tape[f"cross.{block}"][1]
    masks["head"] = tape["head"][3]
    return masks


def backward(record: ForwardRecord, params: ModelParams, config: ModelConfig, d_yhat):
    """Reverse-mode pass through a recorded forward.

    ``d_yhat`` is the gradient of a scalar objective w.r.t. ``record.y_hat``
    (same shape). Returns ``(param_grads, input_grads)``; training-mode records
    replay their stored dropout masks.
    """
    tape = record._tape
    if tape is None:
        raise RuntimeError("backward needs a record produced by forward()")
    d_yhat = np.asarray(d_yhat, dtype=DTYPE)
    if d_yhat.shape != record.y_hat.shape:
        raise ValueError(f"d_yhat shape {d_yhat.shape} != y_hat shape {record.y_hat.shape}")
    if not record.batched:
        d_yhat = d_yhat[None]
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dh = task_head_backward(d_yhat, tape["head"], params, grads)
    dH = vce_pool_backward(dh, tape["vce"], params, config, grads)

    d_prot, d_rna_fused = cross_attend_backward(dH["protein"], tape["cross.rna_protein"],
                                                "rna_protein", params, grads)
    d_rna_fused = d_rna_fused + dH["rna"]
    d_rna, d_dna_ctx = cross_attend_backward(d_rna_fused, tape["cross.dna_rna"],
                                             "dna_rna", params, grads)
    d_sa = {"dna": dH["dna"] + d_dna_ctx, "rna": d_rna, "protein": d_prot}

    dX = {}
    for m in MODALITIES:
        d0 = self_attention_stack_backward(d_sa[m], tape[f"self.{m}"], m, params, grads)
        dX[m] = project_backward(d0, tape[f"proj.{m}"], m, params, grads)
    # the shared gene matrices were broadcast over the batch
    dX["rna"] = dX["rna"].sum(axis=0)
    dX["protein"] = dX["protein"].sum(axis=0)
    if not record.batched:
        dX["dna"] = dX["dna"][0]
    return grads, dX


def output_gradient(record: ForwardRecord, params: ModelParams, config: ModelConfig, gene: int):
    """Gradient of the scalar ``y_hat[gene]`` (summed over any batch axis)."""
    if not 0 <= gene < config.n_genes:
        raise IndexError(f"gene index {gene} out of range [0, {config.n_genes})")
    seed = np.zeros_like(record.y_hat)
    seed[..., gene] = 1.0
    return backward(record, params, config, seed)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    seed: int | None = None
    epoch: int | None = None
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Manifest JSON plus one float64 tensor file per parameter."""
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    check_params(ckpt.params, ckpt.config)
    manifest = {
        "config": ckpt.config.to_dict(),
        "parameters": {name: list(arr.shape) for name, arr in ckpt.params.items()},
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "extra": ckpt.extra,
    }
    for name, arr in ckpt.params.items():
        write_tensor(root / "params" / f"{name}.cdte", arr, version=VERSION_F64)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    config = ModelConfig.from_dict(manifest["config"])
    params = {}
    for name, shape in manifest["parameters"].items():
        params[name] = read_tensor(root / "params" / f"{name}.cdte").reshape(shape)
    check_params(params, config)
    return Checkpoint(config, params, manifest.get("seed"), manifest.get("epoch"),
                      manifest.get("metrics", {}), manifest.get("extra", {}))
