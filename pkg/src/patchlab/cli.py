"""Command-line interface tying the pipelines together.

Every subcommand reads one TOML config (all keys optional, strict names)
plus flag overrides, writes its artifacts into the configured output
directory, and drops a ``<command>-manifest.json`` recording the resolved
config, package versions, and input hashes so runs can be reproduced.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .blackbox import QueryBudget, QueryCountingVictim, shadow_pipeline, transfer_eval
from .colorsim import (
    correlate_success,
    extract_histogram,
    records_for_patches,
    records_from_csv,
    records_to_csv,
    summary_table,
)
from .config import (
    ConfigError,
    attack_spec_from,
    detector_configs_from,
    dump_config,
    eval_config_from,
    load_config,
    train_config_from,
)
from .core import AttackSpec, BoundingBox
from .data import (
    image_to_tensor,
    load_dataset,
    load_image,
    load_patch,
    parse_label_file,
    save_image,
    save_patch,
    synth_dataset,
)
from .detector import ToyDetectorConfig, ToyTrainConfig, load_checkpoint, save_checkpoint, train_toy_detector
from .evaluate import apply_patch_to_image, attack_report
from .metrics import Report, ReportRow
from .optimize import compute_convergence, final_success_rate, train_patch

__all__ = ["main"]

_REPORT_FIELDS = ("attack", "variant", "map", "mar", "cm", "ciou")


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}".rstrip())


def _build_parser() -> _Parser:
    parser = _Parser(prog="patchlab", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-config", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=10")
        p.add_argument("--output", help="output directory (overrides [output].dir)")
        p.add_argument("--dataset", help="dataset root (overrides [data].root)")
        return p

    add("synth-data", "generate the synthetic detection dataset")

    p = add("train-detector", "train the toy detector on a dataset")
    p.add_argument("--out", default="detector.pt", help="checkpoint filename")

    p = add("train-patch", "optimize an adversarial patch (white-box)")
    p.add_argument("--detector", help="detector checkpoint (default <output>/detector.pt)")
    p.add_argument("--attack", choices=["hiding", "creating", "altering"])
    p.add_argument("--target-class", type=int)
    p.add_argument("--seed", type=int)

    p = add("eval-patch", "evaluate a saved patch with baselines")
    p.add_argument("--patch", required=True, help="patch .npy file")
    p.add_argument("--detector", help="detector checkpoint (default <output>/detector.pt)")
    p.add_argument("--split", help="dataset split (default [eval].split)")

    p = add("apply-patch", "composite a patch into one image")
    p.add_argument("--patch", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--labels", help="annotation file for object placements")
    p.add_argument("--detector", help="also run detection on the result")
    p.add_argument("--seed", type=int)

    p = add("colorsim", "similarity-vs-success analysis over trained patches")
    p.add_argument("--records", help="existing records CSV to analyze")
    p.add_argument("--patches", nargs="*", default=[], help="patch .npy files with sidecars")
    p.add_argument("--reference-class", type=int)

    p = add("shadow-attack", "model-extraction attack against a victim detector")
    p.add_argument("--detector", required=True, help="victim checkpoint")
    p.add_argument("--attack", choices=["hiding", "creating", "altering"])
    p.add_argument("--target-class", type=int)

    p = add("transfer-eval", "evaluate a surrogate-trained patch on a victim")
    p.add_argument("--patch", required=True)
    p.add_argument("--detector", required=True, help="victim checkpoint")
    p.add_argument("--split", help="dataset split (default [blackbox].eval_split)")

    p = add("report", "merge evaluation CSVs into one aligned table")
    p.add_argument("--inputs", nargs="+", required=True, help="report CSV files")
    return parser


# ---------------------------------------------------------------------------
# shared helpers


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(
    out_dir: Path,
    command: str,
    cfg: dict,
    inputs: dict[str, Path],
    outputs: list[Path],
    extra: dict | None = None,
) -> Path:
    manifest = {
        "format_version": 1,
        "command": command,
        "config": cfg,
        "versions": {
            "patchlab": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "inputs": {
            name: {"path": str(p), "sha256": _sha256(p)}
            for name, p in sorted(inputs.items())
            if Path(p).is_file()
        },
        "outputs": sorted(str(Path(o).name) for o in outputs),
    }
    if extra:
        manifest["extra"] = extra
    path = out_dir / f"{command}-manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_detector(path_arg: str | None, cfg: dict):
    path = Path(path_arg) if path_arg else _out_dir(cfg) / "detector.pt"
    if not path.exists():
        raise FileNotFoundError(f"detector checkpoint {path} not found; run train-detector first")
    adapter, meta = load_checkpoint(path)
    return adapter, meta, path


def _spec_for_saved_patch(meta: dict, cfg: dict) -> AttackSpec:
    """Attack spec from a patch sidecar, falling back to the config."""
    if "attack" in meta:
        return AttackSpec.from_dict(meta["attack"])
    return attack_spec_from(cfg)


def _write_report_files(report: Report, out: Path, stem: str) -> list[Path]:
    paths = [out / f"{stem}.txt"]
    paths[0].write_text(report.to_text() + "\n")
    csv_path = out / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_REPORT_FIELDS)
        writer.writeheader()
        writer.writerows(report.to_csv_rows())
    paths.append(csv_path)
    per_class = report.per_class_csv_rows()
    if per_class:
        pc_path = out / f"{stem}_per_class.csv"
        with open(pc_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("attack", "variant", "class_id", "cm"))
            writer.writeheader()
            writer.writerows(per_class)
        paths.append(pc_path)
    return paths


def _read_report_csv(path: str | Path) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(_REPORT_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing report columns {sorted(missing)}")
        for rec in reader:
            rows.append(
                ReportRow(
                    label=rec["variant"],
                    attack=rec["attack"],
                    map=float(rec["map"]) if rec["map"] else None,
                    mar=float(rec["mar"]) if rec["mar"] else None,
                    cm=float(rec["cm"]) if rec["cm"] else None,
                    ciou=float(rec["ciou"]) if rec["ciou"] else None,
                )
            )
    return rows


def _crop_pixels(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    _, h, w = image.shape
    x1, y1, x2, y2 = box.corners()
    c0, c1 = int(np.floor(x1 * w)), int(np.ceil(x2 * w))
    r0, r1 = int(np.floor(y1 * h)), int(np.ceil(y2 * h))
    return image[:, max(r0, 0) : max(r1, r0 + 1), max(c0, 0) : max(c1, c0 + 1)]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth_data(cfg: dict, args) -> int:
    d = cfg["data"]
    root = Path(d["root"])
    ds = synth_dataset(
        root,
        counts={k: int(v) for k, v in d["counts"].items()},
        image_size=int(d["image_size"]),
        num_classes=int(d["num_classes"]),
        seed=int(d["seed"]),
    )
    for split in ds.splits():
        print(f"{split}: {ds.num_images(split)} images")
    _write_manifest(root, "synth-data", cfg, {}, [root / "manifest.json"])
    return 0


def _cmd_train_detector(cfg: dict, args) -> int:
    ds = load_dataset(cfg["data"]["root"])
    det_cfg, tr_cfg = detector_configs_from(cfg, ds.num_classes, ds.image_size)
    adapter, meta = train_toy_detector(ds, det_cfg, tr_cfg)
    out = _out_dir(cfg)
    ckpt = out / args.out
    save_checkpoint(adapter, ckpt, meta)
    print(
        f"trained {det_cfg.architecture_id}: val mAP@0.5 = "
        f"{meta.get('val_map50', float('nan')):.3f} -> {ckpt}"
    )
    inputs = {"dataset_manifest": Path(cfg["data"]["root"]) / "manifest.json"}
    _write_manifest(out, "train-detector", cfg, inputs, [ckpt], extra={"val_map50": meta.get("val_map50")})
    return 0


def _cmd_train_patch(cfg: dict, args) -> int:
    if args.attack:
        cfg["attack"]["type"] = args.attack
    if args.target_class is not None:
        cfg["attack"]["target_class"] = args.target_class
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    out = _out_dir(cfg)
    ds = load_dataset(cfg["data"]["root"])
    adapter, _meta, det_path = _load_detector(args.detector, cfg)
    spec = attack_spec_from(cfg)
    ckpt_dir = str(out / "checkpoints") if cfg["train"]["checkpoint_every"] else None
    tcfg = train_config_from(cfg, checkpoint_dir=ckpt_dir)
    patch, history = train_patch(adapter, ds, spec, tcfg)
    final_rs = final_success_rate(history) if len(history) else None
    convergence = compute_convergence(history) if len(history) >= 20 else None
    metadata = {
        "attack": spec.to_dict(),
        "seed": tcfg.seed,
        "epochs": tcfg.epochs,
        "lr": tcfg.lr,
        "detector_fingerprint": adapter.fingerprint(),
        "final_rs": final_rs,
        "convergence_epoch": convergence,
    }
    patch_path = out / f"patch_{spec.attack_type.value}.npy"
    sidecar = save_patch(patch_path, patch, metadata)
    hist_path = out / f"history_{spec.attack_type.value}.jsonl"
    history.to_jsonl(hist_path)
    rs_text = f"{final_rs:.3f}" if final_rs is not None else "n/a"
    print(f"trained {spec.attack_type.value} patch: final R_S = {rs_text} -> {patch_path}")
    inputs = {
        "detector": det_path,
        "dataset_manifest": Path(cfg["data"]["root"]) / "manifest.json",
    }
    _write_manifest(out, "train-patch", cfg, inputs, [patch_path, sidecar, hist_path])
    return 0


def _cmd_eval_patch(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    patch, meta = load_patch(args.patch)
    adapter, _m, det_path = _load_detector(args.detector, cfg)
    ds = load_dataset(cfg["data"]["root"])
    spec = _spec_for_saved_patch(meta, cfg)
    split = args.split or cfg["eval"]["split"]
    scenes = ds.load_split(split)
    report = attack_report(
        adapter,
        scenes,
        patch,
        spec,
        seed=int(cfg["eval"]["seed"]),
        cfg=eval_config_from(cfg),
        label=Path(args.patch).stem,
        image_ids=ds.image_ids(split),
    )
    paths = _write_report_files(report, out, f"report_{spec.attack_type.value}")
    print(report.to_text())
    inputs = {"patch": Path(args.patch), "detector": det_path}
    _write_manifest(out, "eval-patch", cfg, inputs, paths)
    return 0


def _cmd_apply_patch(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    patch, meta = load_patch(args.patch)
    spec = _spec_for_saved_patch(meta, cfg)
    image = load_image(args.image)
    boxes = parse_label_file(args.labels) if args.labels else []
    seed = args.seed if args.seed is not None else int(cfg["eval"]["seed"])
    rng = np.random.default_rng(seed)
    x_adv, _placement = apply_patch_to_image(
        image_to_tensor(image), boxes, patch, spec, rng, eval_config_from(cfg)
    )
    out_image = out / f"{Path(args.image).stem}_patched.png"
    save_image(out_image, x_adv)
    outputs = [out_image]
    print(f"patched image -> {out_image}")
    if args.detector:
        adapter, _m, _p = _load_detector(args.detector, cfg)
        with torch.no_grad():
            dets = adapter.detect(x_adv, cfg["eval"]["conf_thresh"], cfg["eval"]["nms_iou"])
        det_path = out / f"{Path(args.image).stem}_detections.txt"
        lines = [
            f"{d.class_id} {d.confidence:.6f} {d.box.cx:.6f} {d.box.cy:.6f} "
            f"{d.box.w:.6f} {d.box.h:.6f}"
            for d in dets
        ]
        det_path.write_text("\n".join(lines) + ("\n" if lines else ""))
        outputs.append(det_path)
        print(f"{len(dets)} detections -> {det_path}")
    _write_manifest(out, "apply-patch", cfg, {"patch": Path(args.patch), "image": Path(args.image)}, outputs)
    return 0


def _cmd_colorsim(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    outputs: list[Path] = []
    if args.records:
        records = records_from_csv(args.records)
        inputs = {"records": Path(args.records)}
    elif args.patches:
        ds = load_dataset(cfg["data"]["root"])
        ref_class = args.reference_class
        if ref_class is None:
            ref_class = cfg["colorsim"]["reference_class"]
        entries = []
        inputs = {}
        for p in args.patches:
            patch, meta = load_patch(p)
            rs = meta.get("final_rs")
            if rs is None:
                raise ConfigError(f"{p}: sidecar has no final_rs; was it trained via train-patch?")
            entries.append((Path(p).stem, patch, float(rs)))
            inputs[Path(p).stem] = Path(p)
            if ref_class is None:
                ref_class = meta.get("attack", {}).get("target_class")
        if ref_class is None:
            raise ConfigError("no reference class: set colorsim.reference_class or --reference-class")
        image, box = ds.reference_crop(int(ref_class))
        crop = _crop_pixels(image, box)
        records = records_for_patches(
            entries, extract_histogram(crop, "rgb"), extract_histogram(crop, "hsv")
        )
        rec_path = out / "colorsim_records.csv"
        records_to_csv(records, rec_path)
        outputs.append(rec_path)
    else:
        raise UsageError("colorsim requires --records or --patches")
    thr = float(cfg["colorsim"]["filter_threshold"])
    table = summary_table(
        {"all": correlate_success(records), f"R_S >= {thr:g}": correlate_success(records, thr)}
    )
    summary_path = out / "colorsim_summary.txt"
    summary_path.write_text(table + "\n")
    outputs.append(summary_path)
    print(table)
    _write_manifest(out, "colorsim", cfg, inputs, outputs)
    return 0


def _cmd_shadow_attack(cfg: dict, args) -> int:
    if args.attack:
        cfg["attack"]["type"] = args.attack
    if args.target_class is not None:
        cfg["attack"]["target_class"] = args.target_class
    out = _out_dir(cfg)
    budget_n = int(cfg["blackbox"]["budget"])
    if budget_n <= 0:
        raise ConfigError("blackbox.budget must be set to a positive query count for shadow-attack")
    victim, _meta, victim_path = _load_detector(args.detector, cfg)
    bb = QueryCountingVictim(victim)
    ds = load_dataset(cfg["data"]["root"])
    s = cfg["blackbox"]["shadow"]
    shadow_cfg = ToyDetectorConfig(
        num_classes=victim.num_classes,
        image_size=victim.input_size[0],
        widths=tuple(int(w) for w in s["widths"]),
        conf_thresh=float(cfg["detector"]["conf_thresh"]),
        nms_iou=float(cfg["detector"]["nms_iou"]),
    )
    shadow_tr = ToyTrainConfig(epochs=int(s["epochs"]), lr=float(s["lr"]), seed=int(s["seed"]))
    spec = attack_spec_from(cfg)
    result = shadow_pipeline(
        bb,
        shadow_cfg,
        ds,
        spec,
        train_config_from(cfg),
        QueryBudget(budget_n),
        shadow_train_cfg=shadow_tr,
        conf_thresh=float(cfg["blackbox"]["conf_thresh"]),
        seed=int(cfg["train"]["seed"]),
        eval_split=cfg["blackbox"]["eval_split"],
        eval_cfg=eval_config_from(cfg),
    )
    shadow_ckpt = out / "shadow_detector.pt"
    save_checkpoint(result.shadow, shadow_ckpt, {"pseudo_victim": result.pseudo.victim_id})
    patch_path = out / f"patch_shadow_{spec.attack_type.value}.npy"
    sidecar = save_patch(
        patch_path,
        result.patch,
        {
            "attack": spec.to_dict(),
            "seed": int(cfg["train"]["seed"]),
            "pipeline": "shadow",
            "victim_id": result.pseudo.victim_id,
            "queries": result.victim_queries,
            "gradient_accesses": result.gradient_accesses,
            "final_rs": final_success_rate(result.history) if len(result.history) else None,
        },
    )
    pseudo_dir = out / "pseudo_labels"
    result.pseudo.save(pseudo_dir)
    hist_path = out / "shadow_history.jsonl"
    result.history.to_jsonl(hist_path)
    paths = _write_report_files(result.report, out, f"shadow_report_{spec.attack_type.value}")
    print(result.report.to_text())
    print(
        f"victim queries: {result.victim_queries}, "
        f"gradient accesses: {result.gradient_accesses}"
    )
    _write_manifest(
        out,
        "shadow-attack",
        cfg,
        {"victim": victim_path},
        [shadow_ckpt, patch_path, sidecar, hist_path, *paths],
        extra={"queries": result.victim_queries, "gradient_accesses": result.gradient_accesses},
    )
    return 0


def _cmd_transfer_eval(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    patch, meta = load_patch(args.patch)
    victim, _m, victim_path = _load_detector(args.detector, cfg)
    ds = load_dataset(cfg["data"]["root"])
    spec = _spec_for_saved_patch(meta, cfg)
    report = transfer_eval(
        patch,
        victim,
        ds,
        spec,
        seed=int(cfg["eval"]["seed"]),
        cfg=eval_config_from(cfg),
        split=args.split or cfg["blackbox"]["eval_split"],
        label=Path(args.patch).stem,
        surrogate_fingerprint=meta.get("detector_fingerprint"),
    )
    paths = _write_report_files(report, out, f"transfer_report_{spec.attack_type.value}")
    print(report.to_text())
    _write_manifest(out, "transfer-eval", cfg, {"patch": Path(args.patch), "victim": victim_path}, paths)
    return 0


def _cmd_report(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    rows: list[ReportRow] = []
    inputs = {}
    for i, path in enumerate(args.inputs):
        rows.extend(_read_report_csv(path))
        inputs[f"report_{i}"] = Path(path)
    merged = Report(rows=rows)
    paths = _write_report_files(merged, out, "combined_report")
    print(merged.to_text())
    _write_manifest(out, "report", cfg, inputs, paths)
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train-detector": _cmd_train_detector,
    "train-patch": _cmd_train_patch,
    "eval-patch": _cmd_eval_patch,
    "apply-patch": _cmd_apply_patch,
    "colorsim": _cmd_colorsim,
    "shadow-attack": _cmd_shadow_attack,
    "transfer-eval": _cmd_transfer_eval,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if getattr(args, "dump_config", False) and args.command is None:
        print(dump_config(), end="")
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.set)
        if args.output:
            cfg["output"]["dir"] = args.output
        if getattr(args, "dataset", None):
            cfg["data"]["root"] = args.dataset
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
