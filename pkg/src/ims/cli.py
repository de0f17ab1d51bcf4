"""Command-line entry point: ``ims attack|defend|evaluate|sweep|config-reference``.

Exit codes: 0 success, 1 a result missed its threshold, 2 usage or
configuration error (including missing artifacts).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import pipeline
from .errors import CheckpointError, ConfigError, IdxError
from .experiment import ExperimentConfig, build_scenario, config_reference, load_config
from .masking import export_masks, heatmap_grid, load_masks
from .model import load_checkpoint, save_checkpoint

logger = logging.getLogger("ims")

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_USAGE = 2

_csv_lock = threading.Lock()


class UsageError(Exception):
    pass


def append_rows(path, columns: list, rows: list) -> Path:
    """Append dict rows to a CSV, writing the header only if the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _csv_lock:
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns, quoting=csv.QUOTE_MINIMAL)
            if new:
                writer.writeheader()
            writer.writerows(rows)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=float) + "\n", encoding="utf-8")


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "skip_mask_init", False):
        overrides["skip_mask_init"] = True
    return cfg.with_overrides(**overrides) if overrides else cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    manifest = Path(str(args.checkpoint))
    if not manifest.name.endswith(".manifest.json"):
        manifest = manifest.with_name(manifest.name + ".manifest.json")
    if not manifest.exists():
        raise UsageError(f"checkpoint not found: {manifest}")
    return load_checkpoint(args.checkpoint), manifest


def cmd_attack(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, "runs/attack")
    model, report = pipeline.attack(cfg)
    save_checkpoint(model, out / "backdoored")
    _write_json(out / "attack_report.json", {"scenario": pipeline.scenario_id(cfg), **asdict(report)})
    print(f"clean accuracy {report.clean_acc:.4f}  ASR {report.asr:.4f}  ({report.seconds:.1f}s)")
    if not report.passed:
        print("attack below calibration thresholds", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = _load_cfg(args)
    model, manifest = _require_checkpoint(args)
    out = _out_dir(args, "runs/defend")
    base = model.without_masks()
    result, seconds = pipeline.defend(cfg, base)
    export_masks(result.masks, out / "masks.json")
    save_checkpoint(base.with_baked_masks(result.mask), out / "defended")
    result.trace.write_csv(out / "trace.csv", lock=_csv_lock)
    summary = pipeline.defense_summary(result, seconds)
    summary["source_checkpoint"] = str(manifest)
    summary["scenario"] = pipeline.scenario_id(cfg)
    _write_json(out / "defense_report.json", summary)
    print(f"defense finished in {seconds:.1f}s, effective sparsity {summary['effective_sparsity']:.3f}")
    for note in summary["notes"]:
        print(f"note: {note}")
    return EXIT_OK


def _write_plot_data(out: Path, row: pipeline.ResultsRow, masks, trace_path: Path) -> None:
    if trace_path.exists():
        (out / "loss_curves.csv").write_text(trace_path.read_text(encoding="utf-8"), encoding="utf-8")
    grid = heatmap_grid(masks.k)
    with open(out / "mask_heatmap.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["a", "s", "mask", "inverse"])
        w.writerows(grid.tolist())
    with open(out / "mask_channels.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "channel", "a", "s", "mask", "inverse"])
        w.writerows(pipeline.mask_snapshot_rows(masks))
    append_rows(out / "asr_vs_target.csv", ["scenario", "target_proportion", "asr"],
                [{"scenario": row.scenario, "target_proportion": row.target_proportion, "asr": row.asr}])


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    model, manifest = _require_checkpoint(args)
    here = manifest.parent
    masks_path = here / "masks.json"
    masks = load_masks(masks_path) if masks_path.exists() else None
    if masks is None and model.baked_masks is not None:
        raise UsageError(f"{manifest} has baked masks but no masks.json beside it")
    out = _out_dir(args, str(here))
    row, _ = pipeline.evaluate(cfg, model, masks)
    if masks is None:
        from .masking import identity_masks

        masks = identity_masks(model.layer_channels)
    results = Path(args.out) / Path(cfg.evaluation.results).name if args.out else cfg.resolve(cfg.evaluation.results)
    append_rows(results, pipeline.ResultsRow.columns(), [row.as_dict()])
    _write_plot_data(out, row, masks, here / "trace.csv")
    print(f"ASR {row.asr:.4f}  ARR {row.arr:.4f}  RDR {row.rdr:.4f}  target proportion {row.target_proportion:.4f}")
    failures = pipeline.threshold_failures(cfg, row)
    for msg in failures:
        print(msg, file=sys.stderr)
    return EXIT_THRESHOLD if failures else EXIT_OK


def _sweep_worker(job):
    cfg, overrides, ckpt_dir = job
    point = cfg.with_overrides(**overrides)
    try:
        model = load_checkpoint(Path(ckpt_dir) / "backdoored") if ckpt_dir else None
        row, _ = pipeline.run_scenario(point, model)
        return row.as_dict()
    except Exception as exc:  # recorded in the row, the sweep goes on
        return pipeline.ResultsRow.failed(pipeline.scenario_id(point), point, f"error: {exc}").as_dict()


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    if cfg.sweep is None:
        raise ConfigError("sweep", "config has no [sweep] section")
    out = _out_dir(args, "runs/sweep")
    grid = cfg.sweep.grid()
    # attacks depend only on the poisoning ratio: train each once, up front
    ckpts = {}
    for ratio in sorted({g.get("ratio", cfg.attack.ratio) for g in grid}):
        point = cfg.with_overrides(ratio=ratio)
        ckpt_dir = out / f"attack-r{ratio:g}"
        try:
            model, report = pipeline.attack(point, build_scenario(point))
            save_checkpoint(model, ckpt_dir / "backdoored")
            _write_json(ckpt_dir / "attack_report.json", asdict(report))
            ckpts[ratio] = str(ckpt_dir)
        except Exception as exc:
            logger.error("attack at ratio %g failed: %s", ratio, exc)
            ckpts[ratio] = None
    jobs = []
    for g in grid:
        ratio = g.get("ratio", cfg.attack.ratio)
        jobs.append((cfg, g, ckpts[ratio]))
    results = out / Path(cfg.evaluation.results).name
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(j) for j in jobs]
    for g, row in zip(grid, rows):
        if ckpts[g.get("ratio", cfg.attack.ratio)] is None:
            row["status"] = "error: attack failed"
    append_rows(results, pipeline.ResultsRow.columns(), rows)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} scenarios, {len(failed)} failed; results in {results}")
    return EXIT_THRESHOLD if failed else EXIT_OK


def cmd_config_reference(args) -> int:
    text = config_reference()
    if args.out:
        path = Path(args.out)
        if path.is_dir():
            path = path / "config-reference.toml"
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ims", description="Backdoor mitigation by invertible channel masks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="TOML experiment config (defaults if omitted)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override attack and defense seeds")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path (without or with .manifest.json)")
        return p

    common(sub.add_parser("attack", help="train a backdoored model"))
    p = common(sub.add_parser("defend", help="learn masks for a backdoored checkpoint"), checkpoint=True)
    p.add_argument("--skip-mask-init", action="store_true", help="skip the mask initialisation phase")
    p = common(sub.add_parser("evaluate", help="score a checkpoint and its masks"), checkpoint=True)
    p.add_argument("--skip-mask-init", action="store_true", help=argparse.SUPPRESS)
    p = common(sub.add_parser("sweep", help="run the [sweep] grid"))
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--skip-mask-init", action="store_true", help="skip mask initialisation in every scenario")
    p = sub.add_parser("config-reference", help="print every config key with its default")
    p.add_argument("--out", help="write to this file instead of stdout")
    return parser


_COMMANDS = {
    "attack": cmd_attack,
    "defend": cmd_defend,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "config-reference": cmd_config_reference,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, IdxError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # argument errors from the pipeline, e.g. SPC larger than the pool
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
