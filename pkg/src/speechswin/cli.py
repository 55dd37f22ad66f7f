"""Command-line entry point: synth, extract, train, eval, featuremaps.

Exit codes: 0 success, 1 usage/config error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dsp
from .config import RunConfig, load_config
from .data import DataError, read_cache, read_manifest, write_cache, write_manifest
from .model import ConfigError, feature_maps
from .synth import synth_dataset
from .training import (
    EvalReport,
    LabeledDataset,
    TrainedModel,
    compute_metrics,
    evaluate,
    loso_splits,
    train_fold,
)
from .wavio import WavFormatError, read_wav

log = logging.getLogger("speechswin")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_report(out_dir: Path, stem: str, report: EvalReport) -> None:
    (out_dir / f"{stem}.txt").write_text(report.to_text())
    (out_dir / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    seed = args.seed if args.seed is not None else 0
    rows = synth_dataset(out, args.n_per_class, args.k, seed=seed, n_speakers=args.speakers)
    write_manifest(out / "manifest.csv", rows)
    print(f"wrote {len(rows)} clips, {len({r['speaker'] for r in rows})} speakers -> {out / 'manifest.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def _extract_one(job):
    path, dsp_cfg = job
    try:
        return dsp.extract_segments(read_wav(path), dsp_cfg), None
    except (WavFormatError, dsp.TooShortError, ValueError, OSError) as exc:
        return None, f"{path}: {exc}"


def _map(fn, jobs, n_jobs: int):
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_extract(args) -> int:
    cfg = _run_config(args)
    manifest = read_manifest(args.manifest)
    labels = sorted(manifest.label_map, key=manifest.label_map.get)
    speakers = manifest.speakers
    spk_index = {s: i for i, s in enumerate(speakers)}
    results = _map(_extract_one, [(r.path, cfg.dsp) for r in manifest.rows], args.jobs)

    failures = [err for _, err in results if err]
    for err in failures:
        print(f"error: {err}", file=sys.stderr)
    if failures:
        return EXIT_DATA

    feats, lab, spk, cids = [], [], [], []
    for row, (segs, _) in zip(manifest.rows, results):
        for seg in segs:
            feats.append(seg)
            lab.append(manifest.label_map[row.label])
            spk.append(spk_index[row.speaker])
            cids.append(row.clip_id)
    if not manifest.rows:
        log.warning("manifest %s lists no clips; writing an empty cache", args.manifest)
    shape = (0, 1, cfg.dsp.n_mels, cfg.dsp.seg_len)
    ds = LabeledDataset(
        np.stack(feats) if feats else np.zeros(shape, dtype=np.float32),
        lab,
        spk,
        cids,
        max(len(labels), 1),
        labels,
        speakers,
    )
    write_cache(args.out_cache, ds, cfg.dsp.digest())
    counts = np.bincount(ds.labels, minlength=len(labels)) if labels else []
    for name, n in zip(labels, counts):
        print(f"{name}\t{n} segments")
    print(f"total\t{len(ds)} segments from {len(manifest.rows)} clips -> {args.out_cache}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _train_one(job) -> dict:
    fold, train_idx, test_idx, cache_path, cfg_dict, out_dir = job
    cfg = RunConfig.from_dict(cfg_dict)
    ds, _ = read_cache(cache_path, cfg.dsp.digest())
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    speaker = ds.speaker_names[int(test.speakers[0])] if ds.speaker_names else str(int(test.speakers[0]))
    fold_dir = Path(out_dir) / f"fold_{fold:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    log_path = fold_dir / "log.jsonl"
    with open(log_path, "w") as fh:

        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()

        model = train_fold(train, cfg.model, cfg.train, fold=fold, on_epoch=on_epoch)
    extra = {
        "dsp": cfg.dsp.to_dict(),
        "dsp_hash": cfg.dsp.digest().hex(),
        "run_hash": cfg.digest(),
        "fold": fold,
        "test_speaker": speaker,
        "labels": ds.label_names,
    }
    model.save(fold_dir / "checkpoint.bin", extra)
    report = evaluate(model, test, cfg.vote, cfg.train.batch_size)
    report.label_names = ds.label_names
    _write_report(fold_dir, "report", report)
    return {"fold": fold, "speaker": speaker, "report": report.to_dict()}


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    ds, _ = read_cache(args.cache, cfg.dsp.digest())
    if len(ds) == 0:
        raise DataError(f"{args.cache} holds no segments")
    if ds.k != cfg.model.k:
        raise ConfigError(f"cache has {ds.k} classes but the model config expects k={cfg.model.k}")
    folds = loso_splits(ds)
    selected = range(len(folds)) if args.folds is None else args.folds
    for f in selected:
        if not 0 <= f < len(folds):
            raise UsageError(f"fold {f} out of range (cache has {len(folds)} speakers)")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(f, folds[f][0], folds[f][1], str(args.cache), cfg.to_dict(), str(out)) for f in selected]
    results = _map(_train_one, jobs, args.jobs)

    pooled = sum(np.asarray(r["report"]["confusion"]) for r in results)
    pooled_report = compute_metrics(pooled, ds.label_names)
    lines = ["fold  speaker      WAR     UAR"]
    for r in results:
        lines.append(f"{r['fold']:>4}  {r['speaker']:<10} {r['report']['war']:.4f}  {r['report']['uar']:.4f}")
    lines.append(f"pooled            {pooled_report.war:.4f}  {pooled_report.uar:.4f}")
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary + "\n" + pooled_report.to_text())
    (out / "summary.json").write_text(
        json.dumps({"folds": results, "pooled": pooled_report.to_dict(), "config": cfg.to_dict()}, indent=2) + "\n"
    )
    print(summary, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_checkpoint(path, args):
    try:
        model, extra = TrainedModel.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    dsp_cfg = dsp.DSPConfig(**extra["dsp"]) if "dsp" in extra else dsp.DSPConfig()
    if args.config:
        run = _run_config(args)
        if run.model != model.cfg or run.dsp.digest() != dsp_cfg.digest():
            raise DataError(f"checkpoint {path} was produced under a different configuration")
    return model, extra, dsp_cfg


def cmd_eval(args) -> int:
    model, extra, dsp_cfg = _load_checkpoint(args.checkpoint, args)
    ds, _ = read_cache(args.cache, dsp_cfg.digest())
    if ds.k != model.cfg.k:
        raise DataError(f"cache has {ds.k} classes, checkpoint expects k={model.cfg.k}")
    if args.split != "all":
        speaker = extra.get("test_speaker")
        if speaker is None or speaker not in ds.speaker_names:
            raise DataError("checkpoint does not record a held-out speaker present in this cache")
        held = ds.speakers == ds.speaker_names.index(speaker)
        ds = ds.subset(np.flatnonzero(held if args.split == "test" else ~held))
    if len(ds) == 0:
        raise DataError("no segments to evaluate")
    report = evaluate(model, ds, args.vote)
    out = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, f"eval_{args.split}_{args.vote}", report)
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# featuremaps


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Plain (P2) portable graymap, min-max normalized to 0..255."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros(values.shape, dtype=int) if hi <= lo else np.round((values - lo) / (hi - lo) * 255).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    path.write_text(f"P2\n{values.shape[1]} {values.shape[0]}\n255\n{rows}\n")


def write_matrix(path: Path, values: np.ndarray) -> None:
    np.savetxt(path, np.asarray(values, dtype=np.float64), fmt="%.17g")


def cmd_featuremaps(args) -> int:
    model, extra, dsp_cfg = _load_checkpoint(args.checkpoint, args)
    clip = read_wav(args.wav)
    segs = dsp.extract_segments(clip, dsp_cfg)
    if len(segs) == 0:
        raise DataError(f"{args.wav} is too short for one {dsp_cfg.seg_len}-frame segment")
    maps = feature_maps(model.normalize(segs), model.cfg, model.params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(segs)):
        write_pgm(out / f"seg{i:03d}_input.pgm", segs[i, 0])
        write_matrix(out / f"seg{i:03d}_input.txt", segs[i, 0])
        for s, stage_map in enumerate(maps):
            for part in range(model.cfg.N):
                stem = f"seg{i:03d}_part{part}_stage{s + 1}"
                write_pgm(out / f"{stem}.pgm", stage_map[i, part])
                write_matrix(out / f"{stem}.txt", stage_map[i, part])
    print(f"wrote {len(segs)} segment(s) x {model.cfg.N} parts x {len(maps)} stages -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration (JSON)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="speechswin", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None, help="run configuration (JSON)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic tone corpus")
    p.add_argument("out_dir")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n-per-class", type=int, default=16)
    p.add_argument("--speakers", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common], help="manifest -> log-Mel feature cache")
    p.add_argument("manifest")
    p.add_argument("out_cache")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="leave-one-speaker-out training")
    p.add_argument("cache")
    p.add_argument("out_dir")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--folds", type=lambda s: [int(v) for v in s.split(",")], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a cache")
    p.add_argument("checkpoint")
    p.add_argument("cache")
    p.add_argument("--vote", choices=("segment", "clip"), default="segment")
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("featuremaps", parents=[common], help="dump per-stage feature maps for one WAV")
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_featuremaps)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WavFormatError, dsp.TooShortError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
