"""``aavs`` command line: data generation, training, evaluation and reports.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path


from .metrics import MetricError
from .synthdata import ConfigError, DatasetValidationError, generate_split, preset_config, write_dataset
from .tensorio import CorruptDataError

CONFIG_ENV = "AAVS_CONFIG"
log = logging.getLogger("aavs.cli")


class UsageError(Exception):
    pass


INPUT_ERRORS = (UsageError, ValueError, ConfigError, DatasetValidationError, CorruptDataError, MetricError,
                FileNotFoundError, KeyError)


def _prepare_out(path: Path, force: bool, is_dir: bool) -> None:
    if is_dir:
        if path.exists() and any(path.iterdir()) and not force:
            raise UsageError(f"{path} exists and is not empty (use --force)")
        path.mkdir(parents=True, exist_ok=True)
    else:
        if path.exists() and not force:
            raise UsageError(f"{path} exists (use --force)")
        path.parent.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _config(args):
    from .pipeline import ExperimentConfig, load_config
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = load_config(path) if path else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _test_split(args, cfg):
    from .pipeline import load_split_dir, make_split
    if args.data:
        return load_split_dir(args.data, args.split)
    return make_split(cfg, args.split)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = _config(args) if (args.config or os.environ.get(CONFIG_ENV)) else None
    preset = args.preset or (cfg.data.preset or cfg.task if cfg else "avss")
    overrides = cfg.data.overrides if cfg and preset == (cfg.data.preset or cfg.task) else {}
    gen = preset_config(preset, **overrides)
    seed = args.seed if args.seed is not None else (cfg.data.seed if cfg else 0)
    if args.clips < 1:
        raise UsageError("--clips must be positive")
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    test_clips = args.test_clips if args.test_clips is not None else max(1, args.clips // 4)
    for split, n in (("train", args.clips), ("test", test_clips)):
        samples, manifest = generate_split(gen, n, seed, split)
        write_dataset(samples, manifest, out / split)
        log.info("wrote %d %s clips to %s", n, split, out / split)
    return 0


def _mode_for(stage: str, cfg):
    from .decoder import Mode
    return {"auto": cfg.mode, "stage1": Mode.AVS, "stage2": Mode.AVSS_STONES, "e2e": Mode.AVSS_E2E}[stage]


def cmd_train(args) -> int:
    from .pipeline import Trainer, load_split_dir, make_split
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(**{"train.steps": args.steps})
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)
    if args.data:
        samples, manifest = load_split_dir(args.data, "train")
    else:
        samples, manifest = make_split(cfg, "train")
    trainer = Trainer(cfg, samples, _mode_for(args.stage, cfg), manifest.C, manifest.D_a)
    trainer.train()
    trainer.checkpoint().save(out)
    log.info("saved %s checkpoint (step %d) to %s", trainer.mode.value, trainer.step_count, out)
    return 0


def cmd_eval(args) -> int:
    from .pipeline import Checkpoint, ExperimentConfig, evaluate, prior_provider, save_predictions
    ckpt = Checkpoint.load(args.ckpt)
    cfg = ExperimentConfig.from_dict(ckpt.config)
    seed = args.seed if args.seed is not None else cfg.seed
    samples, _ = _test_split(args, cfg)
    model = ckpt.build_model()
    source = args.prior or cfg.stones_source
    provider = prior_provider(source, seed) if model.uses_prior else None
    report, preds = evaluate(model, samples, provider, beta2=args.beta2, return_predictions=True)
    out = Path(args.json)
    pred_path = Path(args.predictions) if args.predictions else out.with_suffix(".predictions.bin")
    payload = {
        "kind": "eval", **report.to_dict(), "mode": ckpt.mode, "config_hash": ckpt.config_hash,
        "step": ckpt.step, "prior": source if model.uses_prior else None, "split": args.split,
        "num_clips": len(samples), "num_classes": ckpt.num_classes, "beta2": args.beta2,
        "predictions": pred_path.name,
    }
    save_predictions(pred_path, preds, [s.clip_id for s in samples])
    _write_json(out, payload)
    print(f"mIoU {report.miou:.4f}  F {report.fscore:.4f}")
    return 0


def cmd_sensitivity(args) -> int:
    from .pipeline import Checkpoint, ExperimentConfig, run_sensitivity
    ckpt = Checkpoint.load(args.ckpt)
    cfg = ExperimentConfig.from_dict(ckpt.config)
    if not ckpt.build_model().uses_prior:
        raise UsageError("sensitivity needs a prior-guided (stage-2) checkpoint")
    seed = args.seed if args.seed is not None else cfg.seed
    samples, _ = _test_split(args, cfg)
    levels = [float(x) if _is_number(x) else x for x in args.levels]
    rows = run_sensitivity(ckpt, samples, levels, seed)
    _write_json(Path(args.json), {"kind": "sensitivity", "config_hash": ckpt.config_hash, "split": args.split,
                                  "rows": rows})
    for r in rows:
        print(f"{r['level']:>20}  mIoU {r['miou']:.4f}  F {r['fscore']:.4f}")
    return 0


def cmd_ablation(args) -> int:
    import jsonschema
    from .pipeline import ablation_schema, load_split_dir, run_ablation
    cfg = _config(args)
    if args.steps is not None:
        cfg = cfg.replace(**{"train.steps": args.steps})
    data = None
    if args.data:
        data = (load_split_dir(args.data, "train"), load_split_dir(args.data, "test"))
    report = run_ablation(cfg, seeds=tuple(args.seeds), parts=tuple(args.parts),
                          actual_source=args.actual_source, data=data)
    jsonschema.validate(report, ablation_schema())
    _write_json(Path(args.json), report)
    return 0


def cmd_config_dump(args) -> int:
    cfg = _config(args)
    if args.format == "yaml":
        import yaml
        sys.stdout.write(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    else:
        sys.stdout.write(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# report

def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _quality(level) -> float:
    """Prior quality on the plot axis: target IoU, 1.0 for ground truth, NaN otherwise."""
    if level is None:
        return math.nan
    if level == "oracle":
        return 1.0
    if isinstance(level, str) and level.startswith("corrupted:"):
        return float(level.split(":", 1)[1])
    return math.nan


def report_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        p = Path(p)
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: malformed JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"{p}: expected a JSON object")
        try:
            if doc.get("kind") == "sensitivity":
                for r in doc["rows"]:
                    rows.append({"source": p.name, "label": r["level"], "quality": _quality(r["level"]),
                                 "miou": float(r["miou"]), "fscore": float(r["fscore"])})
            else:
                label = doc.get("prior") or doc.get("mode") or p.stem
                rows.append({"source": p.name, "label": label, "quality": _quality(doc.get("prior")),
                             "miou": float(doc["miou"]), "fscore": float(doc["fscore"])})
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{p}: missing or invalid field ({exc})") from exc
    return rows


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = report_rows(args.inputs)
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=True)

    lines = ["| source | label | quality | mIoU | F |", "|---|---|---|---|---|"]
    for r in rows:
        q = "" if math.isnan(r["quality"]) else f"{r['quality']:g}"
        lines.append(f"| {r['source']} | {r['label']} | {q} | {r['miou']:.4f} | {r['fscore']:.4f} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))

    with open(out / "sensitivity.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "label", "quality", "miou", "fscore"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "quality": "" if math.isnan(r["quality"]) else repr(r["quality"]),
                        "miou": repr(r["miou"]), "fscore": repr(r["fscore"])})

    curve = sorted((r for r in rows if not math.isnan(r["quality"])), key=lambda r: r["quality"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if curve:
        ax.plot([r["quality"] for r in curve], [r["miou"] for r in curve], "o-", label="prior-guided model")
    for r in rows:
        if math.isnan(r["quality"]):
            ax.axhline(r["miou"], ls="--", color="gray")
            ax.annotate(str(r["label"]), (0.02, r["miou"]), xycoords=("axes fraction", "data"), fontsize=8)
    ax.set_xlabel("prior IoU with ground truth")
    ax.set_ylabel("mIoU")
    ax.grid(alpha=0.3)
    if curve:
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "sensitivity.png", dpi=120)
    plt.close(fig)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"experiment config (JSON/YAML); default from ${CONFIG_ENV}")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = argparse.ArgumentParser(prog="aavs", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, required=True, help="training clips")
    g.add_argument("--test-clips", type=int, default=None, help="test clips (default clips/4)")
    g.add_argument("--preset", choices=("s4", "ms3", "avss"))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
    t.add_argument("--stage", choices=("auto", "stage1", "stage2", "e2e"), default="auto",
                   help="auto follows the config task/strategy")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("sensitivity", cmd_sensitivity, "evaluate under priors of varying quality")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data")
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--json", required=True)
        e.set_defaults(func=func)
        if name == "eval":
            e.add_argument("--prior", help="oracle | corrupted:<iou> | stage1:<ckpt> (default: config)")
            e.add_argument("--predictions", help="prediction archive path (default: next to --json)")
            e.add_argument("--beta2", type=float, default=0.3)
        else:
            e.add_argument("--levels", nargs="+", default=["oracle", "0.85", "0.4"])

    a = sub.add_parser("ablation", parents=[common], help="matched-budget component ablations")
    a.add_argument("--json", required=True)
    a.add_argument("--data")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--parts", nargs="+", choices=("queries", "stones"), default=["queries", "stones"])
    a.add_argument("--actual-source", default="corrupted:0.85")
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_ablation)

    r = sub.add_parser("report", parents=[common], help="table and plot from eval/sensitivity JSON")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("config", help="inspect configuration")
    csub = c.add_subparsers(dest="config_command", required=True)
    d = csub.add_parser("dump", parents=[common], help="print the effective config")
    d.add_argument("--format", choices=("json", "yaml"), default="json")
    d.set_defaults(func=cmd_config_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"aavs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"aavs {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
