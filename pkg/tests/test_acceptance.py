"""Acceptance checks, one test per criterion (``test_cNN_*``).

A PASS/FAIL line per criterion is printed in the terminal summary by conftest.
"""

import json
import math
import shutil
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest
import yaml

from cdt import cli
from cdt import interpretation as I
from cdt import model as M
from cdt import numerics as nx
from cdt import synthetic as S
from cdt import training as T
from cdt.numerics import RngStream
from conftest import toy_config, toy_inputs


# ---------------------------------------------------------------- 1

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    cfg = toy_config()
    params = M.init_params(cfg, RngStream(11))
    dna, rna, prot = toy_inputs(11, batch=2)
    batch = [T.TrainingSample("E0", "S0", 1, 0.7), T.TrainingSample("E1", "S1", 3, -1.9)]

    rec = M.forward(dna, rna, prot, params, cfg)
    _, dy = T.masked_loss(rec.y_hat, batch, return_grad=True)
    grads, dX = M.backward(rec, params, cfg, dy)
    loss = lambda: T.masked_loss(M.forward(dna, rna, prot, params, cfg).y_hat, batch)

    worst = 0.0
    groups = [(name, params[name], grads[name]) for name in params] + [("input.dna", dna, dX["dna"])]
    for name, arr, ana in groups:
        num = nx.central_difference(loss, arr, h=1e-5)
        rel = np.linalg.norm(ana - num) / (np.linalg.norm(ana) + 1e-8)
        worst = max(worst, rel)
        assert rel < 1e-4, f"{name}: relative error {rel:.2e}"
        np.testing.assert_allclose(ana, num, rtol=1e-4, atol=1e-9, err_msg=name)
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: {len(groups)} groups, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert elapsed < 30


# ---------------------------------------------------------------- 2

def test_c02_attention_normalization():
    rows = 0
    for i in range(100):
        rng = np.random.default_rng(i)
        cfg = toy_config(heads=int(rng.choice([1, 2, 4])), dna_positions=int(rng.integers(1, 12)),
                         n_genes=int(rng.integers(1, 6)))
        params = M.init_params(cfg, RngStream(i))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        dna, rna, prot = (a * scale for a in toy_inputs(i, batch=2, cfg=cfg))
        training = bool(i % 2)
        rec = M.forward(dna, rna, prot, params, cfg, training=training,
                        rng=RngStream(i) if training else None)
        maps = list(rec.attention.values()) + list(rec.pool_weights.values())
        assert len(rec.attention) == 6 and len(rec.pool_weights) == 3
        for w in maps:
            assert np.all(w >= 0)
            assert np.max(np.abs(w.sum(axis=-1) - 1)) <= 1e-9
            rows += w[..., 0].size
    print(f"criterion 2: {rows} attention rows over 100 forward passes")


# ---------------------------------------------------------------- 3

def test_c03_unidirectional_flow():
    cfg = toy_config()
    params = M.init_params(cfg, RngStream(3))
    dna, rna, prot = toy_inputs(3, batch=2)
    base = M.forward(dna, rna, prot, params, cfg)
    rng = np.random.default_rng(0)
    for scale in (0.0, 1.0, 1e3):
        other = M.forward(dna, rna, rng.normal(size=prot.shape) * scale + scale, params, cfg)
        assert other.H_RNA_fused.tobytes() == base.H_RNA_fused.tobytes()
        assert other.attention["cross.dna_rna"].tobytes() == base.attention["cross.dna_rna"].tobytes()
        other = M.forward(dna, rng.normal(size=rna.shape) * scale, rng.normal(size=prot.shape) * scale,
                          params, cfg)
        assert other.H_DNA.tobytes() == base.H_DNA.tobytes()
        for layer in range(cfg.dna_self_layers):
            key = f"self.dna.{layer}"
            assert other.attention[key].tobytes() == base.attention[key].tobytes()
    print("criterion 3: protein swaps leave RNA fusion fixed; RNA+protein swaps leave H_DNA fixed")


# ---------------------------------------------------------------- 4

def test_c04_zero_branch_identities():
    cfg = toy_config()
    params = M.init_params(cfg, RngStream(4))
    for block in M.CROSS_BLOCKS:
        params[f"cross.{block}.Wo"][:] = 0.0
        params[f"cross.{block}.bo"][:] = 0.0
    rng = np.random.default_rng(4)
    q, ctx = rng.normal(size=(3, 4, 16)), rng.normal(size=(3, 8, 16))
    for block in M.CROSS_BLOCKS:
        fused, _, _ = M.cross_attend(q, ctx, block, params, cfg)
        assert fused.tobytes() == q.tobytes()
    rec = M.forward(*toy_inputs(4), params, cfg)
    assert rec.H_RNA_fused.tobytes() == rec.H_RNA.tobytes()
    assert rec.H_Protein_fused.tobytes() == rec.H_Protein.tobytes()
    H = rng.normal(size=(2, 5, 16))
    for m in M.MODALITIES:
        out, w, _ = M.self_attention_stack(H, m, params, cfg, layers=0)
        assert out.tobytes() == H.tobytes() and w == []
    zero_cfg = toy_config(dna_self_layers=0, rna_self_layers=0, protein_self_layers=0)
    zp = M.init_params(zero_cfg, RngStream(4))
    dna, rna, prot = toy_inputs(4)
    rec = M.forward(dna, rna, prot, zp, zero_cfg)
    proj, _ = M.project(dna, "dna", zp, zero_cfg)
    assert rec.H_DNA.tobytes() == proj.tobytes()
    print("criterion 4: zeroed output projections and zero-layer stacks are exact identities")


# ---------------------------------------------------------------- 5

def test_c05_loss_and_optimizer_oracles():
    assert abs(T.huber(0.0, 1.0) - 0.0) <= 1e-12
    assert abs(T.huber(0.5, 1.0) - 0.125) <= 1e-12
    assert abs(T.huber(2.0, 1.0) - 1.5) <= 1e-12
    assert abs(T.huber(1.0, 1.0) - 0.5) <= 1e-12 and abs(T.huber(-1.0, 1.0) - 0.5) <= 1e-12

    cfg = T.TrainConfig(lr=0.1, weight_decay=0.0)
    p = {"w": np.array([1.0])}
    T.adamw_step(p, {"w": np.array([1.0])}, T.AdamState(), cfg)
    assert abs(p["w"][0] - (1 - 0.1 / (1 + 1e-8))) <= 1e-10

    cfg = T.TrainConfig(lr=0.1, weight_decay=0.1)
    p = {"w": np.array([1.0])}
    T.adamw_step(p, {"w": np.array([0.0])}, T.AdamState(), cfg)
    assert abs(p["w"][0] - 0.99) <= 1e-10

    theta = np.random.default_rng(5).normal(size=50)
    for lr, wd in ((0.1, 0.1), (1e-4, 1e-5), (3e-3, 0.25)):
        p = {"w": theta.copy()}
        steps = T.adamw_step(p, {"w": np.zeros(50)}, T.AdamState(),
                             T.TrainConfig(lr=lr, weight_decay=wd))
        np.testing.assert_array_equal(steps["w"], -lr * (wd * theta))
        np.testing.assert_array_equal(p["w"], theta + steps["w"])
    print("criterion 5: huber, adamw step and decoupled decay match hand values")


# ---------------------------------------------------------------- 6

def test_c06_overfit():
    t0 = time.perf_counter()
    spec = S.SyntheticSpec(seed=0, n_samples=32, dna_positions=8, d_dna=12, d_rna=6, d_protein=8,
                           n_genes=4, noise_std=0.0)
    dna, rna, prot = S.gen_caches(spec)
    samples, _ = S.plant_signal(dna, spec)
    cfg = toy_config(dropout_p=0.0)
    tc = T.TrainConfig(lr=3e-3, weight_decay=0.0, batch_size=8, max_epochs=500, patience=500,
                       scheduler_patience=20, seed=0)
    data = T.Data(dna.samples, rna.matrix, prot.matrix)
    ckpt, hist = T.train(cfg, tc, samples, samples, data)
    loss, r = T.evaluate(ckpt.params, cfg, data, samples)
    elapsed = time.perf_counter() - t0
    print(f"criterion 6: train r={r:.6f} huber={loss:.2e} after {hist.stop_epoch} epochs, "
          f"{elapsed:.1f}s")
    assert r > 0.99 and loss < 1e-3
    assert hist.stop_epoch <= 500
    assert elapsed < 120


# ---------------------------------------------------------------- 7

PLANTED = 23


def test_c07_planted_signal_attribution():
    t0 = time.perf_counter()
    spec = S.SyntheticSpec(seed=7, n_samples=640, dna_positions=64, d_dna=8, d_rna=6, d_protein=8,
                           n_genes=4, planted_positions=[(PLANTED, None)], noise_std=0.05,
                           positional_channels=4)
    dna, rna, prot = S.gen_caches(spec)
    samples, _ = S.plant_signal(dna, spec)
    train_set, val_set = T.split_by_enhancer(samples, 0.2, 0)
    assert (len(train_set), len(val_set)) == (512, 128)
    cfg = M.ModelConfig(n_genes=4, dna_positions=64, d_dna=8, d_rna=6, d_protein=8, d=16, heads=2,
                        dropout_p=0.0)
    tc = T.TrainConfig(lr=3e-3, weight_decay=1e-5, batch_size=8, max_epochs=60, patience=10,
                       scheduler_patience=1000, seed=7)
    data = T.Data(dna.samples, rna.matrix, prot.matrix)
    ckpt, hist = T.train(cfg, tc, train_set, val_set, data)

    grads = []
    for s in val_set:
        _, g = I.profile_sample(dna.samples[s.dna_index], rna.matrix, prot.matrix, ckpt.params, cfg,
                                s.gene_index, s.dna_index)
        grads.append(g)
    top1 = I.recovery_rate(grads, PLANTED, 1)
    top3 = I.recovery_rate(grads, PLANTED, 3)
    elapsed = time.perf_counter() - t0
    print(f"criterion 7: val r={hist.best_val_r:.4f} (epoch {hist.best_epoch}), "
          f"top-1={top1:.3f} top-3={top3:.3f}, {elapsed:.1f}s")
    assert top3 >= 0.90 and top1 >= 0.60
    assert elapsed < 600


# ---------------------------------------------------------------- 8

def test_c08_split_integrity():
    for corpus in range(200):
        rng = np.random.default_rng(corpus)
        n_enh = int(rng.integers(2, 60))
        frac = float(rng.uniform(0.05, 0.5))
        samples = []
        for e in range(n_enh):
            shift = float(rng.choice([-0.5, 0.2]))
            for j in range(int(rng.integers(1, 6))):
                samples.append(T.TrainingSample(f"E{e:03d}", f"S{e}_{j}", j % 4,
                                                shift + float(rng.normal(scale=0.2))))
        train, val = T.split_by_enhancer(samples, frac, corpus)
        te, ve = {s.enhancer_id for s in train}, {s.enhancer_id for s in val}
        assert not te & ve
        assert sorted(map(repr, train + val)) == sorted(map(repr, samples))
        labels = T.enhancer_labels(samples)
        for stratum in (True, False):
            members = [e for e, lab in labels.items() if lab is stratum]
            n_val = sum(e in ve for e in members)
            assert abs(n_val - frac * len(members)) <= 1, (corpus, stratum, n_val, len(members))
    print("criterion 8: 200 corpora split disjointly with stratum shares within one enhancer")


# ---------------------------------------------------------------- 9

def test_c09_interpretation_arithmetic():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        p = rng.dirichlet(np.full(int(rng.integers(2, 900)), float(rng.uniform(0.1, 5))))
        T_ = float(rng.uniform(0.05, 5.0))
        assert int(np.argmax(I.temperature_scale(p, T_))) == int(np.argmax(p))
    for _ in range(200):
        a = rng.integers(0, 100, size=int(rng.integers(0, 30))).tolist()
        b = rng.integers(0, 100, size=int(rng.integers(0, 30))).tolist()
        assert I.overlap_count(a, b) == len(set(a).intersection(b))
    mapping = I.BinMapping(enhancer_center=33_592_976, positions=896)
    assert mapping.bin_of_offset(-56_680) == 5
    assert mapping.bin_of_coordinate(33_536_296) == 5
    assert mapping.offset(447) == -64
    print("criterion 9: temperature argmax, overlap oracle, -56,680 bp -> bin 5, bin 447 -> -64 bp")


# ---------------------------------------------------------------- 10

def test_c10_determinism(tmp_path):
    spec = dict(seed=1, n_samples=40, dna_positions=8, d_dna=12, n_genes=4, positional_channels=4)
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec))
    assert cli.main(["gen", str(tmp_path / "spec.yaml"), str(tmp_path / "data")]) == 0
    run = {"seed": 2,
           "paths": {"dna": "data/dna", "rna": "data/rna", "protein": "data/protein",
                     "dataset": "data/dataset.csv", "output": "out"},
           "model": {"d": 16, "heads": 2},
           "train": {"lr": 1e-3, "max_epochs": 4}}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(run))

    def artifacts():
        assert cli.main(["train", str(tmp_path / "run.yaml")]) == 0
        out = tmp_path / "out"
        files = {str(p.relative_to(out)): p.read_bytes() for p in out.rglob("*")
                 if p.is_file() and not p.name.endswith("_meta.json")}
        shutil.rmtree(out)
        return files

    first, second = artifacts(), artifacts()
    assert "history.json" in first and "checkpoint/manifest.json" in first
    assert first == second

    cfg = toy_config()
    params = M.init_params(cfg, RngStream(10))
    inputs = toy_inputs(10, batch=3)
    a, b = M.forward(*inputs, params, cfg), M.forward(*inputs, params, cfg)
    for field in ("H_DNA", "H_RNA_fused", "H_Protein_fused", "h_vce", "y_hat"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()
    print(f"criterion 10: {len(first)} training artifacts byte-identical across runs")


# ---------------------------------------------------------------- 11

FULL_SCRIPT = textwrap.dedent("""
    import json, logging, resource, time
    import numpy as np
    from cdt import model as M
    from cdt.numerics import RngStream
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    t0 = time.perf_counter()
    cfg = M.ModelConfig.full()
    n = M.param_count(cfg)
    logging.info("parameter count %d vs approximately %d reported", n, M.REFERENCE_PARAM_COUNT)
    params = M.init_params(cfg, RngStream(0))
    rng = np.random.default_rng(0)
    dna = rng.normal(size=(cfg.dna_positions, cfg.d_dna))
    rna = rng.normal(size=(cfg.n_genes, cfg.d_rna))
    prot = rng.normal(size=(cfg.n_genes, cfg.d_protein))
    rec = M.forward(dna, rna, prot, params, cfg)
    out = {"params": n, "y_shape": list(rec.y_hat.shape),
           "attn_shape": list(rec.attention["cross.dna_rna"].shape),
           "finite": bool(np.all(np.isfinite(rec.y_hat))),
           "seconds": time.perf_counter() - t0,
           "max_rss_kb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss}
    print(json.dumps(out))
""")


def test_c11_full_scale_shape_contract():
    proc = subprocess.run([sys.executable, "-c", FULL_SCRIPT], capture_output=True, text=True,
                          timeout=300)
    assert proc.returncode == 0, proc.stderr
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    print(proc.stderr.strip())
    print(f"criterion 11: {res['params']:,} parameters (reference ~{M.REFERENCE_PARAM_COUNT:,}), "
          f"forward {res['seconds']:.1f}s, peak RSS {res['max_rss_kb'] / 2**20:.2f} GB")
    assert res["y_shape"] == [2360]
    assert res["attn_shape"] == [8, 2360, 896]
    assert res["finite"]
    assert res["seconds"] < 300
    assert res["max_rss_kb"] < 8 * 2**20
