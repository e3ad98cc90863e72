"""Command-line pipeline driver.

Commands: gen-phantoms, encode-targets, train-seg, train-det, infer, eval,
pipeline (all of the above in order). One YAML config plus dotted overrides
drives everything; each stage writes a provenance file with the fully
resolved config so reruns are reproducible and auditable.

Exit codes: 0 success, 1 runtime failure, 2 invalid config/usage, 3 missing
inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import __version__
from .config import (ConfigError, RunConfig, TEST_SEED_OFFSET, config_to_dict,
                     load_config)
from .core import read_annotations, read_detections, write_detections
from .eval import evaluation_report
from .infer import decode_peaks, nms, plan_windows, stitch
from .model import load_checkpoint
from .phantom import generate_dataset, load_dataset
from .targets import (ENCODER_VERSION, render_pseudo_mask,
                      render_regression_maps, save_targets)
from .train import train_det, train_seg

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3


class MissingInputError(FileNotFoundError):
    pass


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _provenance(config: RunConfig, command: str, extra: dict | None = None) -> dict:
    return {
        "command": command,
        "package_version": __version__,
        "encoder_version": ENCODER_VERSION,
        "seed": config.seed,
        "config": config_to_dict(config),
        **(extra or {}),
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} not found at {path}")
    return path


def _dirs(config: RunConfig) -> tuple[Path, Path]:
    return Path(config.paths.data_dir), Path(config.paths.out_dir)


def cmd_gen_phantoms(config: RunConfig) -> None:
    data_dir, out_dir = _dirs(config)
    generate_dataset(config.phantom.n_train, config.seed, config.phantom.config,
                     data_dir / "train")
    generate_dataset(config.phantom.n_test, config.seed + TEST_SEED_OFFSET,
                     config.phantom.config, data_dir / "test")
    _write_json(out_dir / "provenance-gen-phantoms.json",
                _provenance(config, "gen-phantoms"))


def cmd_encode_targets(config: RunConfig) -> None:
    data_dir, out_dir = _dirs(config)
    _require(data_dir / "train" / "manifest.json", "training dataset manifest")
    cache = data_dir / "targets"
    for volume, annotation in load_dataset(data_dir / "train"):
        maps = render_regression_maps(annotation, volume.grid, config.targets)
        pyramid = render_pseudo_mask(annotation, volume.grid, config.targets)
        save_targets(cache, annotation.volume_id, maps, pyramid)
    _write_json(out_dir / "provenance-encode-targets.json",
                _provenance(config, "encode-targets", {"cache": str(cache)}))


def cmd_train_seg(config: RunConfig) -> None:
    data_dir, out_dir = _dirs(config)
    _require(data_dir / "train" / "manifest.json", "training dataset manifest")
    dataset = load_dataset(data_dir / "train")
    train_seg(dataset, out_dir, config.model.seg, config.train, config.targets,
              config.loss.seg)
    _write_json(out_dir / "provenance-train-seg.json", _provenance(config, "train-seg"))


def cmd_train_det(config: RunConfig) -> None:
    data_dir, out_dir = _dirs(config)
    _require(data_dir / "train" / "manifest.json", "training dataset manifest")
    seg_ckpt = _require(out_dir / "seg.pt", "segmentation checkpoint")
    dataset = load_dataset(data_dir / "train")
    train_det(dataset, seg_ckpt, out_dir, config.model.det, config.train,
              config.targets, config.loss.det)
    _write_json(out_dir / "provenance-train-det.json", _provenance(config, "train-det"))


def cmd_infer(config: RunConfig, threshold: float | None = None) -> None:
    data_dir, out_dir = _dirs(config)
    _require(data_dir / "test" / "manifest.json", "test dataset manifest")
    seg_model, _ = load_checkpoint(_require(out_dir / "seg.pt", "segmentation checkpoint"),
                                   kind="seg")
    det_model, _ = load_checkpoint(_require(out_dir / "det.pt", "detection checkpoint"),
                                   kind="det")
    seg_model.eval()
    det_model.eval()
    thr = config.infer.threshold if threshold is None else float(threshold)

    per_volume = {}
    for volume, annotation in load_dataset(data_dir / "test"):
        plan = plan_windows(volume.grid.shape, config.train.patch_size,
                            config.infer.overlap)
        maps = stitch(volume, seg_model, det_model, plan,
                      avf_enabled=config.infer.avf_enabled)
        per_volume[annotation.volume_id] = nms(decode_peaks(maps, thr),
                                               config.infer.nms_iou)
    write_detections(out_dir / "detections.jsonl", per_volume)
    _write_json(out_dir / "provenance-infer.json",
                _provenance(config, "infer", {
                    "threshold": thr,
                    "nms_iou": config.infer.nms_iou,
                    "avf_enabled": config.infer.avf_enabled,
                    "num_volumes": len(per_volume),
                }))


def cmd_eval(config: RunConfig) -> None:
    data_dir, out_dir = _dirs(config)
    det_path = _require(out_dir / "detections.jsonl", "detections file")
    ann_path = _require(data_dir / "test" / "annotations.jsonl", "test annotations")
    per_volume_dets = read_detections(det_path)
    per_volume_gts = {a.volume_id: list(a.boxes) for a in read_annotations(ann_path)}

    scores = sorted({d.score for dets in per_volume_dets.values() for d in dets},
                    reverse=True)
    thresholds = scores or [1.0]
    report = evaluation_report(per_volume_dets, per_volume_gts, thresholds,
                               config.eval.fp_levels)

    infer_prov = out_dir / "provenance-infer.json"
    provenance = _provenance(config, "eval")
    if infer_prov.exists():
        infer_payload = json.loads(infer_prov.read_text())
        provenance["infer"] = {k: infer_payload.get(k)
                               for k in ("threshold", "nms_iou", "avf_enabled")}
    report["provenance"] = provenance
    _write_json(out_dir / "report.json", report)

    froc_csv = out_dir / "froc.csv"
    lines = ["avg_fp,recall,threshold"]
    lines += [f"{p['avg_fp']:.6f},{p['recall']:.6f},{p['threshold']:.6f}"
              for p in report["froc"]]
    froc_csv.write_text("\n".join(lines) + "\n")


_COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "encode-targets": cmd_encode_targets,
    "train-seg": cmd_train_seg,
    "train-det": cmd_train_det,
    "eval": cmd_eval,
}

_PIPELINE_ORDER = ["gen-phantoms", "encode-targets", "train-seg", "train-det",
                   "infer", "eval"]


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lndet",
        description="Hybrid 3D node detection on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _PIPELINE_ORDER + ["pipeline"]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
        if name in ("infer", "pipeline"):
            p.add_argument("--threshold", type=float, default=None,
                           help="decode threshold override")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set)
    except (ConfigError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stages = _PIPELINE_ORDER if args.command == "pipeline" else [args.command]
    for stage in stages:
        try:
            if stage == "infer":
                cmd_infer(config, getattr(args, "threshold", None))
            else:
                _COMMANDS[stage](config)
        except MissingInputError as exc:
            print(f"{stage}: missing input: {exc}", file=sys.stderr)
            return EXIT_MISSING
        except Exception as exc:  # noqa: BLE001 - stage diagnostics, nonzero exit
            print(f"{stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
