"""Command line entry point: ``cdt gen | cache verify | train | eval | report | param-count``.

Exit codes: 0 success, 2 config error, 3 data or alignment error, 4 numerical failure.
Run configs are YAML; relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import interpretation as I
from . import model as M
from . import training as T
from .embedding_store import (CacheFormatError, MANIFEST_NAME, read_cache, verify_alignment)
from .numerics import NumericalError
from .synthetic import SyntheticSpec, write_synthetic

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_DIR = "checkpoint"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config_error(msg: str) -> CliError:
    return CliError(EXIT_CONFIG, msg)


def _data_error(msg: str) -> CliError:
    return CliError(EXIT_DATA, msg)


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    dna: Path
    rna: Path
    protein: Path
    dataset: Path
    output: Path
    val_dataset: Path | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)
    seed: int = 0


def _load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise _config_error(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise _config_error(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, dict):
        raise _config_error(f"{path}: expected a mapping at top level")
    return data


def load_run_config(path) -> RunConfig:
    path = Path(path)
    data = _load_yaml(path)
    unknown = set(data) - {"paths", "model", "train", "report", "seed"}
    if unknown:
        raise _config_error(f"unknown config sections {sorted(unknown)}")
    paths = data.get("paths") or {}
    base = path.resolve().parent

    def resolve(key, required=True, must_exist=True):
        if key not in paths:
            if required:
                raise _config_error(f"config is missing paths.{key}")
            return None
        p = Path(paths[key])
        p = (p if p.is_absolute() else base / p).resolve()
        if must_exist and not p.exists():
            raise _config_error(f"paths.{key}: {p} does not exist")
        return p

    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise _config_error("seed must be an integer")
    cfg = RunConfig(resolve("dna"), resolve("rna"), resolve("protein"), resolve("dataset"),
                    resolve("output", must_exist=False),
                    val_dataset=resolve("val_dataset", required=False),
                    model=dict(data.get("model") or {}), train=dict(data.get("train") or {}),
                    report=dict(data.get("report") or {}), seed=seed)
    _check_report_options(cfg.report.get("top_k", 20), cfg.report.get("temperature"))
    return cfg


def _check_report_options(k, temperature) -> None:
    if not isinstance(k, int) or k < 1:
        raise _config_error("top_k must be an integer >= 1")
    if temperature is not None and not temperature > 0:
        raise _config_error("temperature must be > 0")


def _load_caches(dna_path, rna_path, protein_path):
    try:
        dna, rna, protein = read_cache(dna_path), read_cache(rna_path), read_cache(protein_path)
    except (CacheFormatError, FileNotFoundError) as exc:
        raise _data_error(f"cache error: {exc}") from None
    for cache, want in ((dna, "DNA"), (rna, "RNA"), (protein, "Protein")):
        if cache.manifest.modality != want:
            raise _data_error(f"expected a {want} cache, found {cache.manifest.modality}")
    report = verify_alignment(rna, protein)
    if not report.ok:
        raise _data_error(f"alignment failure: {report.message}")
    return dna, rna, protein


def _read_dataset(path):
    try:
        samples = T.read_dataset(path)
    except (OSError, ValueError) as exc:
        raise _config_error(f"dataset error: {exc}") from None
    if not samples:
        raise _config_error(f"dataset {path} is empty")
    return samples


def _check_samples(samples, dna_cache, n_genes: int) -> None:
    for s in samples:
        if s.dna_index not in dna_cache.samples:
            raise _data_error(f"DNA sample {s.dna_index!r} (enhancer {s.enhancer_id}) not in cache")
        if not 0 <= s.gene_index < n_genes:
            raise _data_error(f"gene_index {s.gene_index} outside [0, {n_genes})")


def _model_config(overrides: dict, dna, rna, protein) -> M.ModelConfig:
    inferred = dict(n_genes=rna.manifest.gene_count, dna_positions=dna.manifest.positions,
                    d_dna=dna.manifest.dim, d_rna=rna.manifest.dim, d_protein=protein.manifest.dim)
    for key, value in inferred.items():
        if key in overrides and overrides[key] != value:
            raise _data_error(f"model.{key}={overrides[key]} disagrees with caches ({value})")
    try:
        return M.ModelConfig.from_dict({**overrides, **inferred})
    except (TypeError, ValueError) as exc:
        raise _config_error(f"model config: {exc}") from None


def _check_against_caches(config: M.ModelConfig, dna, rna, protein) -> None:
    got = dict(n_genes=rna.manifest.gene_count, dna_positions=dna.manifest.positions,
               d_dna=dna.manifest.dim, d_rna=rna.manifest.dim, d_protein=protein.manifest.dim)
    for key, value in got.items():
        if getattr(config, key) != value:
            raise _data_error(f"checkpoint {key}={getattr(config, key)} but caches have {value}")


def _write_meta(out: Path, command: str, started: float, **extra) -> None:
    """Wall-clock details kept apart from the deterministic artifacts."""
    meta = {"command": command, "started_unix": started, "finished_unix": time.time(),
            "elapsed_s": time.time() - started, "python": platform.python_version(),
            "numpy": np.__version__, **extra}
    (out / f"{command}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen(spec_file, out_dir) -> int:
    data = _load_yaml(spec_file)
    try:
        spec = SyntheticSpec.from_dict(data)
    except KeyError as exc:
        raise _config_error(f"synthetic spec is missing required field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise _config_error(f"invalid synthetic spec: {exc}") from None
    info = write_synthetic(spec, out_dir)
    print(f"seed={spec.seed} samples={info['n_samples']} dna=({spec.dna_positions}, {spec.d_dna}) "
          f"rna=({spec.n_genes}, {spec.d_rna}) protein=({spec.n_genes}, {spec.d_protein})")
    print(f"wrote {Path(out_dir)}")
    return EXIT_OK


def cmd_cache_verify(path) -> int:
    """Validate one cache directory, or a directory holding ``dna/ rna/ protein/``."""
    root = Path(path)
    if (root / MANIFEST_NAME).is_file():
        dirs = {"cache": root}
    else:
        dirs = {name: root / name for name in ("dna", "rna", "protein") if (root / name).is_dir()}
        if not dirs:
            raise _data_error(f"{root}: no manifest.json and no dna/ rna/ protein/ subdirectories")
    caches = {}
    for name, d in dirs.items():
        try:
            caches[name] = read_cache(d)
        except (CacheFormatError, FileNotFoundError) as exc:
            raise _data_error(f"{d}: {exc}") from None
        m = caches[name].manifest
        print(f"ok {d} modality={m.modality} dim={m.dim}")
    if "rna" in caches and "protein" in caches:
        report = verify_alignment(caches["rna"], caches["protein"])
        if not report.ok:
            raise _data_error(f"alignment failure: {report.message}")
        print(f"alignment ok: {report.message}")
    return EXIT_OK


def cmd_train(config_file) -> int:
    started = time.time()
    rc = load_run_config(config_file)
    dna, rna, protein = _load_caches(rc.dna, rc.rna, rc.protein)
    model_cfg = _model_config(rc.model, dna, rna, protein)
    try:
        train_cfg = T.TrainConfig.from_dict({"seed": rc.seed, **rc.train})
    except (TypeError, ValueError) as exc:
        raise _config_error(f"train config: {exc}") from None
    samples = _read_dataset(rc.dataset)
    _check_samples(samples, dna, model_cfg.n_genes)
    if rc.val_dataset is not None:
        train_set, val_set = samples, _read_dataset(rc.val_dataset)
        _check_samples(val_set, dna, model_cfg.n_genes)
    else:
        try:
            train_set, val_set = T.split_by_enhancer(samples, train_cfg.val_fraction, train_cfg.seed,
                                                     train_cfg.stratify_threshold)
        except ValueError as exc:
            raise _config_error(f"cannot split dataset: {exc}") from None
    print(f"train={len(train_set)} val={len(val_set)} params={M.param_count(model_cfg)}")

    def log(e):
        print(f"epoch {e.epoch:4d} train_loss={e.train_loss:.6g} val_loss={e.val_loss:.6g} "
              f"train_r={_fmt(e.train_r)} val_r={_fmt(e.val_r)} lr={e.lr:.3g}", flush=True)

    data = T.Data(dna.samples, rna.matrix, protein.matrix)
    ckpt, history = T.train(model_cfg, train_cfg, train_set, val_set, data, log=log)
    ckpt.extra = {"caches": {"dna": str(rc.dna), "rna": str(rc.rna), "protein": str(rc.protein)},
                  "train_config": train_cfg.__dict__.copy(), "history": history.summary()}
    out = rc.output
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(ckpt, out / CHECKPOINT_DIR)
    T.save_history(history, out / "history.json")
    split = {"train": sorted({s.enhancer_id for s in train_set}),
             "val": sorted({s.enhancer_id for s in val_set})}
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    print(f"best epoch {history.best_epoch} val_r={_fmt(history.best_val_r)}; "
          f"checkpoint at {out / CHECKPOINT_DIR}")
    _write_meta(out, "train", started, config=str(Path(config_file).resolve()))
    return EXIT_OK


def _fmt(r) -> str:
    return "nan" if r is None else f"{r:.4f}"


def _load_for_inference(checkpoint, dna_path, rna_path, protein_path):
    try:
        ckpt = M.load_checkpoint(checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise _data_error(f"cannot load checkpoint {checkpoint}: {exc}") from None
    stored = ckpt.extra.get("caches", {})
    paths = []
    for given, key in ((dna_path, "dna"), (rna_path, "rna"), (protein_path, "protein")):
        p = given or stored.get(key)
        if p is None:
            raise _config_error(f"no {key} cache given and none recorded in the checkpoint")
        paths.append(Path(p))
    dna, rna, protein = _load_caches(*paths)
    _check_against_caches(ckpt.config, dna, rna, protein)
    return ckpt, dna, rna, protein


def cmd_eval(checkpoint, dataset, out_dir=None, dna_path=None, rna_path=None,
             protein_path=None) -> int:
    started = time.time()
    samples = _read_dataset(dataset)
    ckpt, dna, rna, protein = _load_for_inference(checkpoint, dna_path, rna_path, protein_path)
    _check_samples(samples, dna, ckpt.config.n_genes)
    data = T.Data(dna.samples, rna.matrix, protein.matrix)
    preds = T.predict(ckpt.params, ckpt.config, data, samples)
    beta = np.array([s.beta for s in samples])
    delta = ckpt.extra.get("train_config", {}).get("huber_delta", 1.0)
    loss = float(T.huber(beta - preds, delta).mean())
    r = T._safe_pearson(preds, beta)
    print(f"n={len(samples)} pearson_r={_fmt(r)} huber_loss={loss:.6g}")
    out = Path(out_dir) if out_dir else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["enhancer_id", "gene_index", "beta", "beta_hat"])
        for s, p in zip(samples, preds):
            w.writerow([s.enhancer_id, s.gene_index, repr(float(s.beta)), repr(float(p))])
    (out / "eval.json").write_text(json.dumps({"n": len(samples), "pearson_r": r,
                                               "huber_loss": loss}, indent=2) + "\n")
    _write_meta(out, "eval", started)
    return EXIT_OK


def _load_centers(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise _config_error(f"enhancer centers file {path} not found")
    if path.suffix in (".csv", ".tsv"):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t" if path.suffix == ".tsv" else ",")
            return {row["enhancer_id"]: int(row["center"]) for row in reader}
    return {str(k): int(v) for k, v in _load_yaml(path).items()}


def cmd_report(checkpoint, dataset, out_dir, top_k: int = 20, temperature=None,
               formats=("json", "csv"), chrom=None, centers=None, ground_truth=None,
               max_samples=None, dna_path=None, rna_path=None, protein_path=None) -> int:
    started = time.time()
    _check_report_options(top_k, temperature)
    for fmt in formats:
        if fmt not in ("json", "csv", "bed"):
            raise _config_error(f"unknown report format {fmt!r}")
    if "bed" in formats and not chrom:
        raise _config_error("BED output needs --chrom")
    samples = _read_dataset(dataset)
    if max_samples is not None:
        samples = samples[:max_samples]
    ckpt, dna, rna, protein = _load_for_inference(checkpoint, dna_path, rna_path, protein_path)
    cfg = ckpt.config
    _check_samples(samples, dna, cfg.n_genes)
    if top_k > cfg.dna_positions:
        raise _config_error(f"top_k={top_k} exceeds {cfg.dna_positions} positions")
    center_of = _load_centers(centers) if centers else {}

    profiles, gradients, mappings = [], [], {}
    for i, s in enumerate(samples):
        sid = f"{i:05d}:{s.enhancer_id}:{s.dna_index}"
        att, grad = I.profile_sample(dna.samples[s.dna_index], rna.matrix, protein.matrix,
                                     ckpt.params, cfg, s.gene_index, sid)
        profiles.append(att)
        gradients.append(grad)
        mappings[sid] = I.BinMapping(center_of.get(s.enhancer_id, 0), positions=cfg.dna_positions)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in formats:
        I.export_report(profiles, gradients, mappings, fmt, out / f"report.{fmt}", chrom=chrom,
                        k=top_k, temperature=temperature)

    overlaps = [I.overlap_count(I.top_k(p.row(p.target_gene), top_k), I.top_k(g.importance, top_k))
                for p, g in zip(profiles, gradients)]
    summary = {"n": len(samples), "top_k": top_k,
               "overlap_mean": float(np.mean(overlaps)),
               "overlap_histogram": np.bincount(overlaps, minlength=top_k + 1).tolist(),
               "attention_peaks": I.peak_distance_stats(profiles, I.BinMapping(
                   positions=cfg.dna_positions))}
    print(f"overlap top-{top_k}: mean={summary['overlap_mean']:.3f} over {len(samples)} samples")
    peaks = summary["attention_peaks"]
    print(f"attention peaks: mean |offset|={peaks['mean_abs_offset_bp']:.1f} bp, "
          f"within 50 kb={peaks['fraction_within_50kb']:.3f}")
    if temperature is not None:
        kept = all(np.argmax(I.temperature_scale(p.matrix, temperature), axis=-1).tolist()
                   == np.argmax(p.matrix, axis=-1).tolist() for p in profiles)
        summary["temperature"] = {"T": temperature, "argmax_preserved": kept}
    if ground_truth:
        truth = json.loads(Path(ground_truth).read_text())
        rec = {}
        for item in truth["planted"]:
            pos = int(item["position"])
            rec[str(pos)] = {"top1": I.recovery_rate(gradients, pos, 1),
                             "top3": I.recovery_rate(gradients, pos, min(3, cfg.dna_positions))}
            print(f"recovery position {pos}: top-1={rec[str(pos)]['top1']:.3f} "
                  f"top-3={rec[str(pos)]['top3']:.3f}")
        summary["recovery"] = rec
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _write_meta(out, "report", started)
    return EXIT_OK


def cmd_param_count(config_file=None) -> int:
    if config_file:
        data = _load_yaml(config_file)
        try:
            cfg = M.ModelConfig.from_dict(data.get("model", data))
        except (TypeError, ValueError) as exc:
            raise _config_error(f"model config: {exc}") from None
    else:
        cfg = M.ModelConfig.full()
    n = M.param_count(cfg)
    print(f"parameters: {n:,} (reference figure: approximately {M.REFERENCE_PARAM_COUNT:,})")
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic planted-signal dataset")
    g.add_argument("spec")
    g.add_argument("out")

    c = sub.add_parser("cache", help="cache utilities")
    csub = c.add_subparsers(dest="cache_command", required=True)
    v = csub.add_parser("verify", help="validate cache files and RNA/Protein alignment")
    v.add_argument("path")

    t = sub.add_parser("train", help="train from a YAML run config")
    t.add_argument("config")

    def inference_args(p):
        p.add_argument("checkpoint")
        p.add_argument("dataset")
        p.add_argument("--out", default=None)
        p.add_argument("--dna", default=None)
        p.add_argument("--rna", default=None)
        p.add_argument("--protein", default=None)

    e = sub.add_parser("eval", help="predict a dataset and report Pearson r")
    inference_args(e)

    r = sub.add_parser("report", help="attention and gradient attribution report")
    inference_args(r)
    r.add_argument("--top-k", type=int, default=20)
    r.add_argument("--temperature", type=float, default=None)
    r.add_argument("--format", action="append", choices=["json", "csv", "bed"], dest="formats")
    r.add_argument("--chrom", default=None)
    r.add_argument("--centers", default=None, help="enhancer_id -> center coordinate (YAML/JSON/CSV)")
    r.add_argument("--ground-truth", default=None)
    r.add_argument("--max-samples", type=int, default=None)

    pc = sub.add_parser("param-count", help="parameter count (full-size config by default)")
    pc.add_argument("--config", default=None)
    return ap


def run(args) -> int:
    if args.command == "gen":
        return cmd_gen(args.spec, args.out)
    if args.command == "cache":
        return cmd_cache_verify(args.path)
    if args.command == "train":
        return cmd_train(args.config)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.dataset, args.out, args.dna, args.rna, args.protein)
    if args.command == "report":
        if args.out is None:
            raise _config_error("report needs --out")
        return cmd_report(args.checkpoint, args.dataset, args.out, args.top_k, args.temperature,
                          tuple(args.formats or ("json", "csv")), args.chrom, args.centers,
                          args.ground_truth, args.max_samples, args.dna, args.rna, args.protein)
    return cmd_param_count(args.config)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CacheFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
