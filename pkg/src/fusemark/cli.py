"""Command-line entry point: ``forge <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

from fusemark.data import DatasetError, dataset_info, ingest, load_dataset

log = logging.getLogger("fusemark")


def _gate(dataset: str, full_scale: bool) -> None:
    from fusemark.pipeline import FULL_SCALE_DATASETS

    if dataset in FULL_SCALE_DATASETS and not full_scale:
        raise SystemExit(f"forge: {dataset} runs are full-scale only; pass --full-scale")


def _write_json(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_triggers(args):
    from fusemark.triggers import TriggerSpec, build_watermark_key, save_key

    _gate(args.dataset, args.full_scale)
    splits = load_dataset(args.dataset)
    spec = TriggerSpec(args.src_a, args.src_b, args.target, mode=args.mode, transparency_r=args.r,
                       count=args.count, seed=args.seed)
    key = build_watermark_key(splits.train, spec, args.dataset)
    path = save_key(key, args.out)
    print(json.dumps({"key": str(path), "digest": key.digest(), "count": len(key)}))


def cmd_embed(args):
    from fusemark.masking import MaskConfig, MixSpec, TrainConfig, embed_watermark, training_manifest
    from fusemark.triggers import load_key
    from fusemark.zoo import evaluate, save_model

    _gate(args.dataset, args.full_scale)
    splits = load_dataset(args.dataset)
    key = load_key(args.key) if args.key else None
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                      optimizer=args.optimizer, weight_decay=args.weight_decay,
                      mask=MaskConfig(args.p, resample=args.resample, seed=args.seed),
                      mix=MixSpec(args.e) if key is not None else None, augment=args.augment, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = training_manifest(args.arch, args.dataset, key, cfg)
    _write_json(out / "train_manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    model, history = embed_watermark(args.arch, splits, key, cfg, log_path=out / "train_log.jsonl",
                                     train_limit=args.train_limit)
    save_model(model, out / "model.pt", manifest)
    summary = {"model": str(out / "model.pt"), "benign_accuracy": evaluate(model, splits.test)}
    if key is not None:
        summary["trigger_accuracy"] = history[-1].get("trigger_accuracy") if history else None
    print(json.dumps(summary))


def _oracle(model_ref: str, num_classes: int | None):
    from fusemark.verify import InProcessOracle, remote_oracle
    from fusemark.zoo import load_model

    if model_ref.startswith(("http://", "https://")):
        return remote_oracle(model_ref, num_classes=num_classes)
    return InProcessOracle(load_model(model_ref))


def cmd_verify(args):
    from fusemark.triggers import load_key
    from fusemark.verify import authenticate

    key = load_key(args.key)
    n_classes = args.num_classes or dataset_info(key.dataset_id).num_classes
    report = authenticate(_oracle(args.model, n_classes), key, args.threshold, n_classes=n_classes)
    text = report.to_json()
    if args.out:
        _write_json(Path(args.out), text)
    print(text)
    if not report.valid:
        return 3
    return 0 if report.decision else 1


def cmd_attack(args):
    import numpy as np

    from fusemark import attacks
    from fusemark.triggers import TriggerSpec, build_watermark_key, load_key
    from fusemark.zoo import load_model, save_model

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = args.dataset
    key = load_key(args.key) if args.key else None
    if dataset is None:
        if key is None:
            raise SystemExit("forge attack: --dataset is required without --key")
        dataset = key.dataset_id
    splits = load_dataset(dataset)
    if args.type == "detect":
        cm, meta = attacks.detectability_eval(splits.train, dataset, args.per_class, epochs=args.epochs or 10,
                                              seed=args.seed)
        text = json.dumps({**cm.to_dict(), "meta": meta}, indent=1, sort_keys=True)
        _write_json(out / "detect.json", text)
        print(text)
        return 0
    if key is None or args.model is None:
        raise SystemExit(f"forge attack --type {args.type}: --model and --key are required")
    model = load_model(args.model)
    attacked = None
    if args.type == "prune":
        ratios = [float(r) for r in args.ratios.split(",")]
        report = attacks.pruning_sweep(model, key, ratios, splits.test)
    elif args.type == "finetune":
        data = attacks.sample_finetune_set(splits.train, args.samples or 1000, args.seed)
        report, attacked = attacks.finetune_attack(model, key, data, splits.test, args.iterations,
                                                   args.epochs or 20, args.lr_start, args.lr_end, seed=args.seed)
    elif args.type == "transfer":
        if not args.target_dataset:
            raise SystemExit("forge attack --type transfer: --target-dataset is required")
        target = load_dataset(args.target_dataset)
        pool = target.train if args.samples is None else attacks.sample_finetune_set(target.train, args.samples,
                                                                                     args.seed)
        report, attacked = attacks.transfer_attack(model, key, pool, target.test, target.num_classes, splits.test,
                                                   args.class_subset, args.iterations, args.epochs or 20,
                                                   args.lr_start, args.lr_end, seed=args.seed)
    else:
        a, b, t = (int(x) for x in args.new_key.split(","))
        spec = TriggerSpec(a, b, t, mode=key.spec.mode, transparency_r=key.spec.transparency_r,
                           count=len(key), seed=args.seed)
        new_key = build_watermark_key(splits.train, spec, dataset)
        idx = np.random.default_rng(args.seed).choice(len(splits.train), size=args.samples or 6000, replace=False)
        report, attacked = attacks.overwrite_attack(model, key, new_key, splits.train.subset(np.sort(idx)),
                                                    splits.train, splits.test, args.epochs or 20,
                                                    args.trigger_fraction, args.lr_start, args.lr_end,
                                                    seed=args.seed)
    if attacked is not None and args.save_model:
        save_model(attacked, out / f"{args.type}_model.pt", {"attack": report.config})
        report.attacked_model_ref = str(out / f"{args.type}_model.pt")
    text = report.to_json()
    _write_json(out / f"{args.type}.json", text)
    print(text)
    return 0


def cmd_pipeline(args):
    from fusemark.pipeline import PipelineStageError, load_config, run_pipeline

    cfg = load_config(args.config)
    _gate(cfg.dataset, args.full_scale)
    try:
        bundle = run_pipeline(cfg, args.out, full_scale=args.full_scale, command=" ".join(sys.argv),
                              render=args.report)
    except PipelineStageError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 1
    run_dir = Path(args.out) / cfg.run_id
    print(json.dumps({"run_dir": str(run_dir), "complete": bundle.complete,
                      "effectiveness": bundle.effectiveness, "fidelity": bundle.fidelity}))
    return 0


def cmd_report(args):
    from fusemark.pipeline import ResultsBundle
    from fusemark.report import render_report, summary_row

    src = Path(args.results)
    if src.is_dir():
        src = src / "results.json"
    bundle = ResultsBundle.read(src)
    written = render_report(bundle, args.out)
    print((Path(args.out) / "results.csv").read_text(), end="")
    missing = bundle.missing_sections()
    if missing:
        print(f"forge: partial report, missing {', '.join(missing)}", file=sys.stderr)
    log.info("wrote %s", ", ".join(sorted(written)))
    log.debug("summary %s", summary_row(bundle))
    return 0


def cmd_fetch(args):
    dest = ingest(args.dataset, args.source)
    load_dataset(args.dataset)
    print(json.dumps({"dataset": args.dataset, "cache": str(dest)}))


def cmd_serve(args):
    from fusemark.verify import serve_model
    from fusemark.zoo import load_model

    server = serve_model(load_model(args.model), args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving POST http://{host}:{port}/predict", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.shutdown()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forge", description="Function-coupled watermarks for image classifiers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("triggers", help="build a watermark key archive")
    t.add_argument("--dataset", required=True)
    t.add_argument("--mode", choices=["direct", "invisible"], default="invisible")
    t.add_argument("--src-a", type=int, required=True)
    t.add_argument("--src-b", type=int, required=True)
    t.add_argument("--target", type=int, required=True)
    t.add_argument("--r", type=float, default=0.5)
    t.add_argument("--count", type=int, default=90)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--full-scale", action="store_true")
    t.set_defaults(fn=cmd_triggers)

    e = sub.add_parser("embed", help="train a watermarked (or, without --key, clean) model")
    e.add_argument("--arch", required=True, choices=["lenet5", "resnet18", "vgg16"])
    e.add_argument("--dataset", required=True)
    e.add_argument("--key", help="key archive; omit for a clean baseline")
    e.add_argument("--p", type=float, default=0.3, help="mask drop probability")
    e.add_argument("--e", type=float, default=0.0099, help="fraction of training samples replaced by triggers")
    e.add_argument("--epochs", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--lr", type=float, default=0.05)
    e.add_argument("--batch-size", type=int, default=128)
    e.add_argument("--optimizer", default="sgd_momentum", choices=["sgd", "sgd_momentum", "adam"])
    e.add_argument("--weight-decay", type=float, default=5e-4)
    e.add_argument("--resample", default="per_batch", choices=["per_batch", "per_epoch"])
    e.add_argument("--augment", action="store_true")
    e.add_argument("--train-limit", type=int)
    e.add_argument("--full-scale", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_embed)

    v = sub.add_parser("verify", help="query a model (file or URL) with a key and decide ownership")
    v.add_argument("--key", required=True)
    v.add_argument("--model", required=True, help="model file or http(s) URL of a prediction server")
    v.add_argument("--threshold", type=float, default=0.9)
    v.add_argument("--num-classes", type=int)
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    a = sub.add_parser("attack", help="run a removal attack or the detectability study")
    a.add_argument("--type", required=True, choices=["finetune", "transfer", "prune", "overwrite", "detect"])
    a.add_argument("--model")
    a.add_argument("--key")
    a.add_argument("--dataset", help="defaults to the key's dataset")
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.85,0.9,0.95")
    a.add_argument("--samples", type=int, help="attacker sample count")
    a.add_argument("--iterations", type=int, default=10)
    a.add_argument("--epochs", type=int, help="epochs per iteration (overwrite: total epochs)")
    a.add_argument("--lr-start", type=float, default=1e-4)
    a.add_argument("--lr-end", type=float, default=1e-5)
    a.add_argument("--target-dataset")
    a.add_argument("--class-subset", type=int)
    a.add_argument("--new-key", default="2,4,5", help="overwrite key as SRC_A,SRC_B,TARGET")
    a.add_argument("--trigger-fraction", type=float, default=0.05)
    a.add_argument("--per-class", type=int, default=1000, help="detect: samples per class")
    a.add_argument("--save-model", action="store_true")
    a.set_defaults(fn=cmd_attack)

    pl = sub.add_parser("pipeline", help="run a YAML-configured experiment end to end")
    pl.add_argument("--config", required=True)
    pl.add_argument("--out", default="runs")
    pl.add_argument("--full-scale", action="store_true")
    pl.add_argument("--no-report", dest="report", action="store_false")
    pl.set_defaults(fn=cmd_pipeline)

    r = sub.add_parser("report", help="render report.md, CSV tables and PNG plots from results.json")
    r.add_argument("--results", required=True, help="results.json or a run directory")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)

    f = sub.add_parser("fetch", help="copy a locally downloaded dataset into the cache and checksum it")
    f.add_argument("--dataset", required=True)
    f.add_argument("--source", required=True)
    f.set_defaults(fn=cmd_fetch)

    s = sub.add_parser("serve", help="serve a model over the HTTP prediction protocol")
    s.add_argument("--model", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = args.fn(args)
    except DatasetError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"forge: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
