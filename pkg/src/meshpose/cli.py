"""meshpose command line: generate / train / infer / eval / pipeline.

Exit codes: 0 success, 2 configuration or argument errors, 1 runtime
failures.  Every failure prints a single machine-parsable line
``meshpose: error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .adaptation import (
    PoseModel,
    adapt_unsupervised,
    finetune_fewshot,
    load_model,
    make_log_writer,
    pretrain_synthetic,
    save_model,
    write_run_manifest,
)
from .config import ConfigError, load_config, schema_help, write_default_config
from .datagen import domain_shift, generate_dataset
from .dataset_io import dataset_hash, entry_camera, load_split, read_manifest, write_split
from .evaluation import compare_reports, evaluate_run, prediction_record
from .features import extract, load_extractor
from .inference import InferenceFailure, batch_infer
from .neuralmesh import load_mesh

logger = logging.getLogger(__name__)


class CliError(RuntimeError):
    """Runtime failure with an error category for the one-line report."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_runconfig(args):
    cfg = load_config(getattr(args, "config", None), overrides=_overrides(getattr(args, "set", None)))
    if getattr(args, "threads", None):
        cfg.sections["run"]["threads"] = args.threads
    return cfg


def _require_absent(path: Path, force: bool, what: str) -> None:
    if path.exists() and not force:
        raise CliError("io", f"{what} already exists at {path}; pass --force to overwrite")


def _clear(path: Path) -> None:
    import shutil

    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_init_config(args) -> int:
    write_default_config(args.out)
    print(f"wrote default config to {args.out}")
    return 0


def cmd_generate(args) -> int:
    cfg = _load_runconfig(args)
    out = Path(args.out)
    _require_absent(out / "manifest.jsonl", args.force, "dataset")
    if args.force:
        _clear(out)
    categories = cfg.get("run", "categories")
    seed = cfg.get("run", "master_seed")
    shift = cfg.shift_config()

    t0 = time.time()
    n_train = write_split(
        generate_dataset(cfg.generator_config(cfg.get("generator", "train_per_category"), master_seed=seed), categories),
        out,
        "train",
    )
    adapt_gen = cfg.generator_config(cfg.get("generator", "adapt_per_category"), master_seed=seed + 1)
    n_adapt = write_split((domain_shift(s, shift) for s in generate_dataset(adapt_gen, categories)), out, "adapt")
    test_gen = cfg.generator_config(cfg.get("generator", "test_per_category"), master_seed=seed + 2)
    n_test = write_split((domain_shift(s, shift) for s in generate_dataset(test_gen, categories)), out, "test")

    (out / "generate.json").write_text(
        json.dumps({"config": cfg.as_dict(), "dataset_hash": dataset_hash(out)}, indent=2, sort_keys=True)
    )
    print(f"wrote {n_train} train / {n_adapt} adapt / {n_test} test samples to {out} in {time.time() - t0:.1f}s")
    return 0


def _predict_to_file(model: PoseModel, samples, inference_config, out_path, parallelism: int) -> None:
    records = []
    by_cat: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_cat.setdefault(s.category, []).append(i)
    results: list = [None] * len(samples)
    for cat, idxs in sorted(by_cat.items()):
        if cat not in model.meshes:
            raise CliError("data", f"no mesh for category {cat!r} in model")
        fms = [extract(model.extractor, samples[i].image) for i in idxs]
        t0 = time.time()
        outs = batch_infer(fms, model.meshes[cat], samples[idxs[0]].camera, inference_config, parallelism=parallelism)
        elapsed = (time.time() - t0) * 1000.0 / max(1, len(idxs))
        for i, est in zip(idxs, outs):
            results[i] = (est, elapsed)
    skipped = 0
    for sample, payload in zip(samples, results):
        est, elapsed = payload
        if isinstance(est, InferenceFailure):
            skipped += 1
            logger.warning("sample %s failed: %s", sample.sample_id, est.error)
            continue
        records.append(prediction_record(sample.sample_id, est, elapsed_ms=elapsed))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    if skipped:
        logger.warning("%d samples produced errors and were skipped", skipped)


def cmd_train(args) -> int:
    cfg = _load_runconfig(args)
    run_dir = Path(args.out)
    _require_absent(run_dir / "model", args.force, "trained model")
    if args.force:
        _clear(run_dir / "model")
    train_cfg = cfg.train_config(fewshot_count=args.count or 0)
    icfg = cfg.inference_config()
    threads = cfg.get("run", "threads")
    log = make_log_writer(run_dir / "train_log.jsonl")

    if args.phase == "pretrain":
        samples = load_split(args.data, "train")
        if not samples:
            raise CliError("data", f"no train split under {args.data}")
        model = pretrain_synthetic(samples, train_cfg, log=log)
    elif args.phase == "adapt":
        if not args.model:
            raise CliError("config", "--model is required for --phase adapt")
        model = load_model(Path(args.model))
        samples = load_split(args.data, "adapt")
        if not samples:
            raise CliError("data", f"no adapt split under {args.data}")
        model = adapt_unsupervised(
            model, samples, train_cfg, icfg, parallelism=threads, log=log, audit_dir=run_dir / "pseudo_labels"
        )
    elif args.phase == "fewshot":
        if not args.model:
            raise CliError("config", "--model is required for --phase fewshot")
        model = load_model(Path(args.model))
        pool = load_split(args.data, "adapt")
        count = args.count if args.count is not None else (cfg.get("fewshot", "counts") or [0])[0]
        labeled, unlabeled = [], []
        per_cat: dict[str, int] = {}
        for s in pool:
            if per_cat.get(s.category, 0) < count:
                per_cat[s.category] = per_cat.get(s.category, 0) + 1
                labeled.append(s)
            else:
                unlabeled.append(s)
        model = finetune_fewshot(
            model, labeled, unlabeled, train_cfg, icfg, parallelism=threads, log=log, audit_dir=run_dir / "pseudo_labels"
        )
    else:  # pragma: no cover - argparse restricts choices
        raise CliError("config", f"unknown phase {args.phase}")

    save_model(model, run_dir / "model")
    write_run_manifest(run_dir, train_cfg, {"data": dataset_hash(args.data)}, extra={"phase": args.phase})
    print(f"phase {args.phase} complete; model written to {run_dir / 'model'}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_runconfig(args)
    extractor = load_extractor(args.extractor)
    meshes = {}
    for mesh_path in args.mesh:
        mesh = load_mesh(mesh_path)
        meshes[mesh.category] = mesh
    model = PoseModel(extractor=extractor, meshes=meshes)

    samples = load_split(args.images, args.split)
    samples = [s for s in samples if s.category in meshes]
    if not samples:
        raise CliError("data", f"no samples for categories {sorted(meshes)} under {args.images}")
    _predict_to_file(model, samples, cfg.inference_config(), args.out, cfg.get("run", "threads"))
    print(f"wrote predictions for {len(samples)} samples to {args.out}")
    return 0


def cmd_eval(args) -> int:
    out_json = args.out or "report.json"
    report = evaluate_run(args.pred, args.manifest, out_json=out_json, out_csv=args.csv)
    if args.compare:
        other = json.loads(Path(args.compare).read_text())
        result = compare_reports(other, report.as_dict())
        print(json.dumps(result, indent=2, sort_keys=True))
    print(
        f"evaluated {report.overall.count} samples: "
        f"acc@pi/6 {report.overall.acc_pi_6:.3f} acc@pi/18 {report.overall.acc_pi_18:.3f} "
        f"median {report.overall.median_error_degrees:.2f} deg -> {out_json}"
    )
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_runconfig(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = cfg.get("run", "threads")
    data_dir = out / "dataset"
    pretrain_dir = out / "pretrain"
    adapt_dir = out / "adapt"

    def phase_done(marker: Path) -> bool:
        return marker.exists()

    # generate
    if args.force:
        for sub in (data_dir, pretrain_dir, adapt_dir):
            _clear(sub)
        for f in out.glob("*.json*"):
            f.unlink()
    if not phase_done(data_dir / "manifest.jsonl"):
        ns = argparse.Namespace(config=args.config, set=args.set, threads=args.threads, out=data_dir, force=False)
        cmd_generate(ns)
    else:
        print("generate: dataset exists, skipping")

    # pretrain
    train_cfg = cfg.train_config()
    icfg = cfg.inference_config()
    if not phase_done(pretrain_dir / "model" / "model.json"):
        samples = load_split(data_dir, "train")
        model = pretrain_synthetic(samples, train_cfg, log=make_log_writer(pretrain_dir / "train_log.jsonl"))
        save_model(model, pretrain_dir / "model")
        write_run_manifest(pretrain_dir, train_cfg, {"data": dataset_hash(data_dir)}, extra={"phase": "pretrain"})
    else:
        model = load_model(pretrain_dir / "model")
        print("pretrain: model exists, skipping")

    # adapt
    if not phase_done(adapt_dir / "model" / "model.json"):
        adapt_samples = load_split(data_dir, "adapt")
        adapted = adapt_unsupervised(
            model,
            adapt_samples,
            train_cfg,
            icfg,
            parallelism=threads,
            log=make_log_writer(adapt_dir / "train_log.jsonl"),
            audit_dir=adapt_dir / "pseudo_labels",
        )
        save_model(adapted, adapt_dir / "model")
        write_run_manifest(adapt_dir, train_cfg, {"data": dataset_hash(data_dir)}, extra={"phase": "adapt"})
    else:
        adapted = load_model(adapt_dir / "model")
        print("adapt: model exists, skipping")

    # infer + eval on the shifted test split, both before and after adaptation
    test_samples = load_split(data_dir, "test")
    for tag, mdl in (("pretrained", model), ("adapted", adapted)):
        pred_path = out / f"predictions_{tag}.jsonl"
        if not phase_done(pred_path):
            _predict_to_file(mdl, test_samples, icfg, pred_path, threads)
        else:
            print(f"infer[{tag}]: predictions exist, skipping")
        report_path = out / ("report.json" if tag == "adapted" else "report_pretrained.json")
        csv_path = out / ("report.csv" if tag == "adapted" else "report_pretrained.csv")
        evaluate_run(pred_path, data_dir / "manifest.jsonl", out_json=report_path, out_csv=csv_path, config_echo=cfg.as_dict())

    pre = json.loads((out / "report_pretrained.json").read_text())
    post = json.loads((out / "report.json").read_text())
    print(
        "pipeline complete: shifted-domain acc@pi/6 "
        f"pretrained {pre['overall']['acc_pi_6']:.3f} -> adapted {post['overall']['acc_pi_6']:.3f}"
    )
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshpose",
        description="Render-and-compare 3D pose estimation with neural mesh models.",
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"meshpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("init-config", help="write a fully commented default config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("generate", help="generate the synthetic/shifted dataset splits")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run a training phase")
    common(p)
    p.add_argument("--phase", required=True, choices=["pretrain", "adapt", "fewshot"])
    p.add_argument("--data", required=True, help="dataset directory from 'generate'")
    p.add_argument("--out", required=True, help="run directory for model/logs")
    p.add_argument("--model", help="input model directory (adapt/fewshot)")
    p.add_argument("--count", type=int, help="annotations per category (fewshot)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="estimate poses for a directory of images")
    common(p)
    p.add_argument("--mesh", action="append", required=True, help="mesh checkpoint (repeatable)")
    p.add_argument("--extractor", required=True, help="extractor checkpoint")
    p.add_argument("--images", required=True, help="dataset directory")
    p.add_argument("--split", default=None, help="restrict to one split")
    p.add_argument("--out", required=True, help="predictions.jsonl path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report.json path (default ./report.json)")
    p.add_argument("--csv", help="also write a flat CSV report")
    p.add_argument("--compare", help="prior report.json to diff against")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="generate -> pretrain -> adapt -> infer -> eval")
    common(p)
    p.add_argument("--out", required=True, help="pipeline output directory")
    p.add_argument("--force", action="store_true", help="redo all phases")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"meshpose: error: config: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"meshpose: error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"meshpose: error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
