"""Command-line entry point: ``abspose {gen-data,train,eval,ablate,compare-baseline}``.

Every command writes into one output directory laid out as::

    config.echo   effective configuration (defaults < --config file < flags)
    manifest.json command, config hash, output file digests, timestamp
    checkpoints/  reports/  logs/
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import ablation, plotting
from .config import ConfigParseError, RunConfig, load_config
from .evaluation import EvaluationError, make_report, write_ablation_csv, write_report_csv
from .neural import CheckpointError
from .pipeline import (ConfigConflict, PoseNet, TrainingData, baseline_predict_batch, predict_direct,
                       train_stage1, train_stage2)
from .synthdata import ConfigError, generate_dataset, read_dataset

log = logging.getLogger("abspose")

OUTPUT_ROOT_ENV = "ABSPOSE_OUTPUT_ROOT"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors become :class:`UsageError` so they share the one-line diagnostic."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = _parse_sets(getattr(args, "set", None))
    if extra:
        overrides.update(extra)
    return load_config(args.config, overrides)


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    elif os.environ.get(OUTPUT_ROOT_ENV):
        out = Path(os.environ[OUTPUT_ROOT_ENV]) / command
    else:
        raise UsageError(f"--out is required (or set {OUTPUT_ROOT_ENV})")
    for sub in ("checkpoints", "reports", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finish(out: Path, command: str, cfg: RunConfig, extra: dict | None = None):
    (out / "config.echo").write_text(cfg.to_text(), encoding="utf-8")
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = _sha256(p)
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "files": files,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_data(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such dataset: {p}")
    return read_dataset(p)


def cmd_gen_data(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be at least 1")
    cfg = _config(args, {"run.seed": str(args.seed)} if args.seed is not None else None)
    out = _out_dir(args, "gen-data")
    ds = generate_dataset(cfg.scene_config, args.scenes, cfg.run.seed, out)
    _finish(out, "gen-data", cfg, {"scenes": args.scenes, "poses": len(ds), "detected": int(ds.detected.sum())})
    print(f"wrote {len(ds)} poses from {args.scenes} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args, {"run.seed": str(args.seed)} if args.seed is not None else None)
    out = _out_dir(args, "train")
    data = TrainingData.from_dataset(_load_data(args.data))
    val = TrainingData.from_dataset(_load_data(args.val)) if args.val else None
    pcfg = cfg.posenet
    stage1_cfg = replace(pcfg, stage2=False)
    net, history = train_stage1(stage1_cfg, data, cfg.run.seed, val)
    if pcfg.stage2:
        net, history = train_stage2(pcfg, data, net, cfg.run.seed, val, history)
    net.save(out / "checkpoints" / "posenet.ckpt")
    history.to_csv(out / "logs" / "train_log.csv")
    plotting.plot_loss_curve(history, out / "reports" / "loss_curve.png")
    _finish(out, "train", cfg, {"train_poses": len(data), "steps": history.steps})
    print(f"trained on {len(data)} poses for {len(history.rows)} epochs; checkpoint in {out / 'checkpoints'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "eval")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"no such checkpoint: {ckpt}")
    net = PoseNet.load(ckpt)
    ds = _load_data(args.data)
    data = TrainingData.from_dataset(ds)
    if len(data) == 0:
        raise EvaluationError("no detected poses in the evaluation data")
    if net.config.relative_only:
        pred, label = baseline_predict_batch(net, data).xyz, "Baseline"
    else:
        pred, label = predict_direct(net, data), "Ours"
    report = make_report(pred, data.xyz, len(ds), ds.scene_id[data.index], ds.joints.root_index,
                         cfg.eval.bin_width_mm, cfg.eval.hist_cap_mm, label=label)
    report.write(out / "reports", "eval")
    plotting.plot_error_histograms({label: report.histogram}, out / "reports" / "error_histogram.png")
    _finish(out, "eval", cfg, {"checkpoint_sha256": _sha256(ckpt)})
    print(f"A-MPJPE {report.a_mpjpe:.1f} mm  R-MPJPE {report.r_mpjpe:.1f} mm  "
          f"detection rate {report.detection_rate:.3f}  n={report.n_poses}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "ablate")
    train, test = _load_data(args.train), _load_data(args.test)
    rows = ablation.run_ablation(train, test, cfg.posenet, cfg.run.seed_list, cfg.ablation.outlier_fraction,
                                 on_row=lambda r: print(f"{r.label:<36} {r.a_mpjpe:8.1f} mm", flush=True))
    write_ablation_csv(rows, out / "reports" / "ablation.csv")
    (out / "reports" / "ablation.json").write_text(
        json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    plotting.plot_ablation(rows, out / "reports" / "ablation.png")
    _finish(out, "ablate", cfg)
    return 0


def cmd_compare_baseline(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "compare-baseline")
    train, test = _load_data(args.train), _load_data(args.test)
    reports, nets = ablation.compare_baseline(train, test, cfg.posenet, cfg.run.seed,
                                              cfg.baseline.use_depth_features, cfg.eval.bin_width_mm,
                                              cfg.eval.hist_cap_mm)
    rep = out / "reports"
    write_report_csv(reports, rep / "compare.csv")
    (rep / "compare.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    for r in reports:
        r.histogram.to_csv(rep / f"histogram_{r.label.lower()}.csv")
    plotting.plot_error_histograms({r.label: r.histogram for r in reports}, rep / "compare_histogram.png")

    rows, summary = ablation.run_corruption_suite(nets["direct"], nets["baseline"], TrainingData.from_dataset(test),
                                                  seed=cfg.run.seed, threshold=cfg.eval.tail_threshold_mm)
    cols = ("corruption", "direct_median_root_error", "baseline_median_root_error", "direct_frac_above",
            "baseline_frac_above")
    lines = [",".join(cols)] + [",".join(r[c] if c == "corruption" else f"{r[c]:.6f}" for c in cols) for r in rows]
    (rep / "corruption_suite.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    plotting.plot_corruption_suite(rows, rep / "corruption_suite.png")

    nets["direct"].save(out / "checkpoints" / "direct.ckpt")
    nets["baseline"].save(out / "checkpoints" / "baseline_relative.ckpt")
    _finish(out, "compare-baseline", cfg)
    for r in reports:
        print(f"{r.label:<9} A-MPJPE {r.a_mpjpe:7.1f}  R-MPJPE {r.r_mpjpe:7.1f}  detection {r.detection_rate:.3f}")
    print(f"corruption suite: median root error direct {summary['direct_median_root_error']:.1f} mm, "
          f"baseline {summary['baseline_median_root_error']:.1f} mm")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="abspose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    common(p)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a PoseNet (stage 1, plus stage 2 if posenet.stage2)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component ablation ladder")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare-baseline", help="two-step baseline vs direct absolute prediction")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_compare_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"abspose: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "config", None) and not Path(args.config).exists():
        print(f"abspose: error: config file not found: {args.config}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigParseError) as exc:
        print(f"abspose: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, ConfigConflict, ConfigError, EvaluationError, ValueError,
            OSError) as exc:
        print(f"abspose: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
