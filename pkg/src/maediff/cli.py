"""
Command-line entry point: ``maediff {gen-data,train,reconstruct,evaluate,plot}``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .data import build_manifest, load_manifest, load_split, load_tensor, save_tensor
from .errors import ConfigError, MAEDiffError, NumericError

log = logging.getLogger("maediff")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration (merged over the preset)")
    p.add_argument("--preset", default="desk", choices=("desk", "full"))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.max_steps=300 (repeatable)")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.overrides, args.preset)
    out = Path(args.out)
    d = cfg.data
    manifest = build_manifest(out, d.n_train, d.n_val, d.n_test, d.seed, (cfg.plan.H, cfg.plan.W))
    (out / "config.json").write_text(cfg.to_json())
    counts = manifest["generator"]["counts"]
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    print(out / "manifest.json")
    return 0


def cmd_train(args) -> int:
    from .pipeline import build_model, parameter_report, train_from_manifest

    cfg = load_config(args.config, args.overrides, args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    log_path = out / "train_log.jsonl"
    print(json.dumps({"parameters": parameter_report(build_model(cfg))}))
    with open(log_path, "w") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            if rec["val"] is not None:
                log.info("step %d loss %s val %.5f", rec["step"], rec["loss"], rec["val"])

        best, result = train_from_manifest(cfg, manifest, out, args.resume, on_record)
    print(json.dumps({"checkpoint": str(best), "best_val": result.best_val, "best_step": result.best_step}))
    return 0


def _load_for_inference(args):
    from .config import apply_overrides
    from .pipeline import load_checkpoint

    cfg, model, _ = load_checkpoint(args.checkpoint)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides).validate()
    return cfg, model


def cmd_reconstruct(args) -> int:
    from .pipeline import build_plan, score_phantoms
    from .schedule import build_linear_schedule

    cfg, model = _load_for_inference(args)
    manifest = load_manifest(args.manifest)
    phantoms = load_split(manifest, args.split)
    ids = [e["id"] for e in manifest["entries"] if e["split"] == args.split]
    results = score_phantoms(phantoms, model, cfg, build_linear_schedule(cfg.diffusion), build_plan(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, ph, r in zip(ids, phantoms, results):
        rec = {"id": i}
        for key, arr in (("input", ph.image), ("reconstruction", r.x0_rec), ("score", r.score),
                         ("ground_truth", ph.anomaly_mask)):
            rec[key] = f"{i}_{key}.maed"
            save_tensor(out / rec[key], arr)
        index.append(rec)
    (out / "index.json").write_text(json.dumps({"split": args.split, "items": index}, indent=2))
    print(out / "index.json")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate, public_report
    from .plotting import save_panels

    cfg, model = _load_for_inference(args)
    manifest = load_manifest(args.manifest)
    report = evaluate(cfg, manifest, model, random_baseline=args.random_baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.panels:
        rows = [(ph.image, r.x0_rec, s, ph.anomaly_mask) for ph, r, s in report["_maps"]["test-unhealthy"]]
        save_panels(rows[: args.panels], out / "panels.png")
    path = out / "report.json"
    path.write_text(json.dumps(public_report(report), indent=2))
    print(path)
    return 0


def cmd_plot(args) -> int:
    from .plotting import save_panels

    root = Path(args.recon_dir)
    index = json.loads((root / "index.json").read_text())
    rows = []
    for item in index["items"][: args.max_rows]:
        rows.append(tuple(load_tensor(root / item[k]) for k in ("input", "reconstruction", "score", "ground_truth")))
    save_panels(rows, args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maediff", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset and manifest")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on the healthy splits of a manifest")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint with trainer state (last.pt) to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one split and write score maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test-unhealthy")
    p.add_argument("--out", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="threshold search on validation, metrics on test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--panels", type=int, default=0, metavar="N", help="also write N figure rows")
    p.add_argument("--random-baseline", action="store_true")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render input | reconstruction | score | ground truth panels")
    p.add_argument("--recon-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-rows", type=int, default=4)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (MAEDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
