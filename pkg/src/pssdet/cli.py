"""Command line entry point: ``pssdet <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime failure.
"""

import os

# single-threaded BLAS keeps runs bitwise reproducible; must precede numpy
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import hashlib  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from . import __version__  # noqa: E402
from .config import ConfigError, RunConfig, from_dict, load  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    """A step of the workflow failed; the message names the step."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- ablation sweeps

# each cell: (label, dotted overrides)
SWEEPS = {
    "stopgrad": [("with", {"model.use_stop_grad": True, "train.detach_partners": True}),
                 ("without", {"model.use_stop_grad": False, "train.detach_partners": False})],
    "pss-branch": [("regression", {"model.pss_branch": "regression"}),
                   ("classification", {"model.pss_branch": "classification"})],
    "pss-depth": [(f"{d} conv", {"model.pss_depth": d}) for d in (1, 2, 3)],
    "lambda1": [(f"lambda1={v}", {"train.lambda1": v}) for v in (0.5, 1.0, 2.0)],
    "match": [(f"{m} a={a}", {"train.quality_mode": m, "train.alpha": a})
              for m in ("add", "mul") for a in (0.2, 0.4, 0.6, 0.8)],
    "centerness": [("with", {"model.use_centerness": True}), ("without", {"model.use_centerness": False})],
    "ranking": [("with", {"train.lambda2": 0.25}), ("without", {"train.lambda2": 0.0})],
    "two-step": [("end-to-end", {"train.mode": "end_to_end"}), ("two-step", {"train.mode": "two_step"})],
}

# fields that cannot influence the FCOS-only first phase of two-step training
_PHASE2_ONLY = {
    "model": ("pss_depth", "pss_channels", "pss_branch", "use_stop_grad"),
    "train": ("lambda1", "lambda2", "alpha", "match", "quality_mode", "detach_partners", "pss_lr_scale",
              "rank_margin", "rank_num_neg", "eval_every"),
}


def _overridden(cfg: RunConfig, overrides: dict) -> RunConfig:
    doc = cfg.to_dict()
    for dotted, value in overrides.items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return from_dict(doc)


def _digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def phase1_key(cfg: RunConfig) -> str:
    """Configs with equal keys share the same phase-1 (FCOS-only) result."""
    doc = cfg.to_dict()
    for section, names in _PHASE2_ONLY.items():
        for n in names:
            doc[section].pop(n, None)
    doc["train"]["two_step_epochs"] = doc["train"]["two_step_epochs"][0]
    doc.pop("eval")
    doc.pop("paths")
    return _digest(doc)


# ---------------------------------------------------------------- data helpers

def _scenes(cfg: RunConfig, which: str):
    from .data import generate_scenes, load_dataset
    root = cfg.paths.train_data if which == "train" else cfg.paths.eval_data
    if root:
        try:
            return load_dataset(root)
        except (OSError, ValueError) as e:
            raise RuntimeFailure(f"loading {which} data from {root}: {e}") from e
    if which == "train":
        return generate_scenes(cfg.data.seed, cfg.data.count, cfg.data.synth)
    return generate_scenes(cfg.data.eval_seed, cfg.data.eval_count, cfg.data.synth)


def _load_checkpoint(path):
    from .checkpoint import CheckpointError, load as load_ckpt
    try:
        return load_ckpt(path)
    except (OSError, CheckpointError) as e:
        raise RuntimeFailure(f"loading checkpoint {path}: {e}") from e


def _eval_reports(params, scenes, cfg: RunConfig) -> dict:
    """NMS-free, one-to-many+NMS and raw one-to-many reports (as dicts)."""
    from .inference import evaluate_model
    out = {}
    if params.config.with_pss:
        out["end_to_end"] = evaluate_model(params, scenes, "end_to_end", None, cfg.eval.top_k)[0]
    out["one_to_many+nms"] = evaluate_model(params, scenes, "one_to_many", cfg.eval.nms_iou, cfg.eval.top_k)[0]
    out["one_to_many"] = evaluate_model(params, scenes, "one_to_many", None, cfg.eval.top_k)[0]
    return out


def _summary(name: str, r) -> str:
    return (f"{name:<16} mAP {r.mean_ap:.4f}  AP50 {r.ap50:.4f}  AP75 {r.ap75:.4f}  "
            f"AR100 {r.mean_ar100:.4f}  dup {r.duplicate_rate:.3f}  "
            f"fwd {r.forward_ms:.2f} ms  post {r.postprocess_ms:.2f} ms")


# ---------------------------------------------------------------- training core

def run_training(cfg: RunConfig, out_dir, phase1_cache=None, log=print) -> dict:
    """Train per ``cfg``, save checkpoint/log/curves in ``out_dir`` and
    evaluate on the eval split.  Returns a JSON-able record.

    With ``phase1_cache`` (a directory) two-step runs store or reuse the
    FCOS-only phase keyed by :func:`phase1_key`.
    """
    from . import checkpoint
    from .model import build
    from .report import training_curves
    from .trainer import TrainingDiverged, train

    out = Path(out_dir)
    cfg.write(out)
    train_set = _scenes(cfg, "train")
    eval_set = _scenes(cfg, "eval")
    tc = cfg.train
    params = build(cfg.model, tc.seed)
    provenance = "trained from scratch"
    t0 = time.perf_counter()

    def progress(phase, epoch, row):
        log(f"  [{phase}] epoch {epoch + 1}  total {row['total']:.4f}  lr {row['lr']:.2e}")

    start_phase = 0
    try:
        if tc.mode == "two_step" and phase1_cache is not None:
            cached = Path(phase1_cache) / f"phase1-{phase1_key(cfg)}.pssd"
            if cached.exists():
                provenance = f"phase 1 reused from {cached.name}"
            else:
                first = train(train_set, tc, params, None, progress=progress, stop_phase=1)
                Path(phase1_cache).mkdir(parents=True, exist_ok=True)
                tmp = cached.with_suffix(".tmp")
                checkpoint.save(tmp, first.params)
                os.replace(tmp, cached)
                provenance = f"phase 1 trained and stored as {cached.name}"
            # both branches continue from the stored (float32) arrays, so a
            # reused phase 1 gives the same result as a fresh one
            fcos = checkpoint.load(cached)
            params.arrays.update({n: a for n, a in fcos.arrays.items() if n in params.names(pss=False)})
            start_phase = 1
        result = train(train_set, tc, params, out, eval_set, progress, start_phase=start_phase)
    except TrainingDiverged as e:
        raise RuntimeFailure(f"training diverged ({e}); diagnostics in {out / 'divergence.json'}") from e
    elapsed = time.perf_counter() - t0
    if result.log:
        training_curves(result.log, out / "training_curves.png")
    reports = _eval_reports(result.params, eval_set, cfg)
    record = {"train_seconds": elapsed, "provenance": provenance,
              "checkpoint": str(out / "model.pssd"),
              "reports": {k: json.loads(r.to_json()) for k, r in reports.items()}}
    (out / "metrics.json").write_text(json.dumps(record, indent=1))
    for name, r in reports.items():
        log(_summary(name, r))
    return record


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .data import generate
    out = Path(args.out or cfg.paths.out)
    seed = cfg.data.seed if args.seed is None else args.seed
    count = cfg.data.count if args.count is None else args.count
    scenes = generate(seed, count, out, cfg.data.synth)
    cfg.data = replace(cfg.data, seed=seed, count=count)
    cfg.write(out)
    print(f"wrote {len(scenes)} images and annotations.json to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.paths.out)
    print(f"training ({cfg.train.mode}, seed {cfg.train.seed}) into {out}")
    run_training(cfg, out)
    return EXIT_OK


def _path_and_nms(args, params):
    if args.no_nms:
        path = "one_to_many" if args.head == "one-to-many" else "end_to_end"
        nms_iou = None
    else:
        path, nms_iou = "one_to_many", args.nms
        if args.head == "end-to-end":
            raise UsageError("--nms applies to the one-to-many head only; use --no-nms for end-to-end")
    if path == "end_to_end" and not params.config.with_pss:
        raise ConfigError("model.with_pss is false: the checkpoint has no PSS head for NMS-free inference")
    if nms_iou is not None and not 0 < nms_iou < 1:
        raise UsageError(f"--nms must lie in (0, 1), got {nms_iou}")
    return path, nms_iou


def cmd_eval(args, cfg: RunConfig) -> int:
    from .inference import evaluate_model
    params = _load_checkpoint(args.checkpoint)
    path, nms_iou = _path_and_nms(args, params)
    scenes = _scenes(cfg, "eval")
    report, _ = evaluate_model(params, scenes, path, nms_iou, cfg.eval.top_k)
    out = Path(cfg.paths.out)
    cfg.write(out)
    name = report.source.replace("+", "_")
    (out / f"eval_{name}.json").write_text(report.to_json() + "\n")
    print(_summary(report.source, report))
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    from .inference import run_inference
    params = _load_checkpoint(args.checkpoint)
    path, nms_iou = _path_and_nms(args, params)
    scenes = _scenes(cfg, "eval")
    dets, fwd, post = run_inference(params, scenes, path, nms_iou, cfg.eval.top_k)
    out = Path(cfg.paths.out)
    cfg.write(out)
    target = out / "detections.jsonl"
    with open(target, "w") as f:
        for s in scenes:
            for d in dets[s.image_id]:
                f.write(d.to_json(int(s.image_id)) + "\n")
    total = sum(len(v) for v in dets.values())
    print(f"{total} detections for {len(scenes)} images -> {target}  (fwd {fwd:.2f} ms, post {post:.2f} ms per image)")
    return EXIT_OK


def cmd_heatmap(args, cfg: RunConfig) -> int:
    from .inference import export_heatmap
    from .model import forward
    from .report import heatmap_png
    params = _load_checkpoint(args.checkpoint)
    if args.kind in ("pss", "product") and not params.config.with_pss:
        raise ConfigError(f"--kind {args.kind} needs a checkpoint with a PSS head")
    if not 0 <= args.level < len(params.config.strides):
        raise UsageError(f"--level must be in 0..{len(params.config.strides) - 1}")
    scenes = _scenes(cfg, "eval")
    match = [s for s in scenes if s.image_id == args.image_id]
    if not match:
        raise RuntimeFailure(f"image id {args.image_id} not in the eval split")
    scene = match[0]
    outputs = forward(params, scene.image[None])
    out = Path(cfg.paths.out)
    cfg.write(out)
    stem = out / f"heatmap_{scene.image_id}_L{args.level}_{args.kind}"
    values = export_heatmap(outputs, args.level, args.kind, stem.with_suffix(".pgm"))
    heatmap_png(values, stem.with_suffix(".png"),
                f"{args.kind}, stride {params.config.strides[args.level]}", scene.image)
    print(f"wrote {stem}.pgm and {stem}.png")
    return EXIT_OK


def cmd_describe(args, cfg: RunConfig) -> int:
    from .model import build, describe
    params = _load_checkpoint(args.checkpoint) if args.checkpoint else build(cfg.model, cfg.train.seed)
    print(describe(params))
    if not args.checkpoint:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def _cell_job(job):
    label, seed, doc, cell_dir, cache = job
    cfg = from_dict(doc)
    done = Path(cell_dir) / "metrics.json"
    resolved = Path(cell_dir) / "resolved_config.json"
    if done.exists() and resolved.exists() and json.loads(resolved.read_text()) == json.loads(cfg.to_json()):
        record = json.loads(done.read_text())
        record["provenance"] = "cached cell: " + record["provenance"]
    else:
        record = run_training(cfg, cell_dir, cache, log=lambda m: print(f"[{label} s{seed}] {m}", flush=True))
    return label, seed, record


def _ap(record, source, key="mean_ap"):
    rep = record["reports"].get(source)
    return None if rep is None else rep[key]


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .report import ablation_bars
    seeds = [cfg.train.seed] if args.seeds is None else args.seeds
    out = Path(cfg.paths.out)
    cfg.write(out)
    cache = out / "phase1"
    jobs = []
    for label, overrides in SWEEPS[args.sweep]:
        for seed in seeds:
            cell = _overridden(cfg, {**overrides, "train.seed": seed})
            cell.paths = replace(cell.paths, out=str(out / "cells" / _digest(cell.to_dict())))
            jobs.append((label, seed, cell.to_dict(), cell.paths.out, str(cache)))
    workers = max(1, int(os.environ.get("PSSDET_THREADS", "1") or 1))
    # two-step cells write the shared phase-1 checkpoint, so they run in order
    serial = [j for j in jobs if j[2]["train"]["mode"] == "two_step"]
    parallel = [j for j in jobs if j not in serial]
    results = []
    if workers > 1 and len(parallel) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results += list(pool.map(_cell_job, parallel))
    else:
        results += [_cell_job(j) for j in parallel]
    results += [_cell_job(j) for j in serial]
    order = {(lab, s): i for i, (lab, s, *_) in enumerate(jobs)}
    results.sort(key=lambda r: order[(r[0], r[1])])

    header = ["setting", "seed", "AP w/o NMS", "AP50 w/o NMS", "AP w/ NMS", "AP50 w/ NMS",
              "dup w/o NMS", "dup one-to-many raw", "train s", "provenance"]
    rows = []
    fmt = lambda v: "" if v is None else f"{100 * v:.2f}"
    for label, seed, rec in results:
        rows.append([label, seed, fmt(_ap(rec, "end_to_end")), fmt(_ap(rec, "end_to_end", "ap50")),
                     fmt(_ap(rec, "one_to_many+nms")), fmt(_ap(rec, "one_to_many+nms", "ap50")),
                     "" if _ap(rec, "end_to_end") is None else f"{_ap(rec, 'end_to_end', 'duplicate_rate'):.3f}",
                     f"{_ap(rec, 'one_to_many', 'duplicate_rate'):.3f}", f"{rec['train_seconds']:.0f}",
                     rec["provenance"]])
    labels = [lab for lab, _ in SWEEPS[args.sweep]]
    means = {}
    for lab in labels:
        recs = [rec for l2, _, rec in results if l2 == lab]
        free = [_ap(r, "end_to_end") for r in recs]
        means[lab] = (None if None in free else sum(free) / len(free),
                      sum(_ap(r, "one_to_many+nms") for r in recs) / len(recs))
        if len(seeds) > 1:
            rows.append([lab, "mean", fmt(means[lab][0]), "", fmt(means[lab][1]), "", "", "", "", ""])

    stem = out / f"ablate_{args.sweep}"
    footer = [f"# sweep {args.sweep}; seeds {seeds}; AP = mean AP over IoU 0.50:0.95, in percent",
              f"# base config digest {_digest(cfg.to_dict())}; cells under {out / 'cells'}",
              f"# phase-1 checkpoints shared through {cache}",
              f"# pssdet {__version__}"]
    for suffix, delim in ((".tsv", "\t"), (".csv", ",")):
        with open(stem.with_suffix(suffix), "w", newline="") as f:
            w = csv.writer(f, delimiter=delim, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
            for line in footer:
                f.write(line + "\n")
    ablation_bars(f"ablation: {args.sweep}", labels, [means[lab][0] for lab in labels],
                  [means[lab][1] for lab in labels], stem.with_suffix(".png"))
    print("\t".join(header[:8]))
    for r in rows:
        print("\t".join(str(v) for v in r[:8]))
    print(f"table: {stem}.tsv  figure: {stem}.png")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="RunConfig JSON file")
    common.add_argument("--out", metavar="DIR", help="output directory (paths.out)")
    common.add_argument("--seed", type=int, help="seed (train.seed; data.seed for gen-data)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable, applied after --config")

    parser = _Parser(prog="pssdet", description="NMS-free detector with a positive sample selector head")
    parser.add_argument("--version", action="version", version=f"pssdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.set_defaults(func=cmd_train)

    def inference_flags(p):
        p.add_argument("--checkpoint", required=True, metavar="PATH")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--nms", type=float, metavar="IOU", help="one-to-many head with greedy NMS at IOU")
        g.add_argument("--no-nms", action="store_true", help="NMS-free inference")
        p.add_argument("--head", choices=("auto", "end-to-end", "one-to-many"), default="auto",
                       help="with --no-nms, one-to-many gives the raw head output")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the eval split")
    inference_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="write detections as JSON lines")
    inference_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("heatmap", parents=[common], help="export a score heatmap (PGM and PNG)")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--kind", choices=("cls", "pss", "product"), default="product")
    p.add_argument("--image-id", type=int, default=0)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("sweep", choices=sorted(SWEEPS))
    p.add_argument("--seeds", type=lambda s: [int(v) for v in s.split(",")], metavar="N,N,...")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("describe", parents=[common], help="print the parameter table and resolved config")
    p.add_argument("--checkpoint", metavar="PATH")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:      # --help / --version
        return int(e.code or 0)
    try:
        cfg = load(args.config, args.overrides)
        if args.out:
            cfg.paths = replace(cfg.paths, out=args.out)
        if args.seed is not None and args.command != "gen-data":
            cfg.train = replace(cfg.train, seed=args.seed)
        if hasattr(args, "no_nms"):
            if args.nms is None and not args.no_nms:
                args.nms = cfg.eval.nms_iou
        return args.func(args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, OSError, ValueError, FloatingPointError) as e:
        print(f"error in {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
