"""Command-line entry point: ``camf synth | cv | eval | explain | plot``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Every command except ``synth`` writes into a fresh ``<out>/<timestamp>-<command>-<hash>``
directory; nothing existing is modified.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime
from pathlib import Path

import torch

from camf import metrics
from camf.config import ExperimentConfig, load_config
from camf.data import SYNTH_MODES, AtlasParcellation, DatasetManifest, SynthConfig, generate_synthetic, load_dataset, zscore_fc
from camf.errors import CAMFError, ConfigError, ShapeMismatchError
from camf.fusion import FUSION_MODES
from camf.interpret import explain
from camf.io import read_fc, read_nifti, write_fc, write_nifti
from camf.training import ablation_sweep, config_hash, cross_validate, evaluate, load_checkpoint

log = logging.getLogger("camf")


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _run_dir(base, command: str, chash: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    root = Path(base) / f"{stamp}-{command}-{chash}"
    path, k = root, 1
    while path.exists():
        path = Path(f"{root}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _grid(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_subjects=args.n,
        grid_shape=args.grid,
        roi_count=args.rois,
        sz_fraction=args.sz_fraction,
        mode=args.mode,
        noise=args.noise,
        seed=args.seed,
        timepoints=args.timepoints,
    )
    cfg.validate()
    out = Path(args.out)
    if (out / "manifest.json").exists():
        raise ConfigError(f"{out} already holds a dataset; choose a new --out")
    manifest, _ = generate_synthetic(cfg, out)
    print(f"manifest: {out / 'manifest.json'}")
    print(f"planted-signal metadata: {out / 'manifest.json'} (key 'metadata')")
    print(f"atlas: {out / manifest.atlas_path}")
    return 0


def _experiment(args) -> ExperimentConfig:
    overrides = {
        "data.manifest": args.manifest,
        "train.fusion_mode": args.fusion_mode,
        "train.seed": args.seed,
        "train.max_epochs": args.epochs,
        "train.learning_rate": args.lr,
        "train.batch_size": args.batch_size,
        "train.early_stop_patience": args.patience,
        "output.dir": args.out,
    }
    cfg = load_config(args.config, overrides)
    if not cfg.manifest:
        raise ConfigError("no dataset manifest: pass --manifest or set [data] manifest")
    return cfg


def cmd_cv(args) -> int:
    cfg = _experiment(args)
    dataset = load_dataset(cfg.manifest)
    manifest = DatasetManifest.read(cfg.manifest)
    model_cfg = cfg.model.build(manifest.roi_count, manifest.grid_shape, cfg.train.fusion_mode)
    chash = cfg.hash()
    run = _run_dir(cfg.output_dir, "ablation" if args.ablation else "cv", chash)
    (run / "config.ini").write_text(cfg.to_ini())
    if args.ablation:
        out = ablation_sweep(cfg.train, dataset, model_cfg)
        for report in out["reports"].values():
            report["config_hash"] = chash
        _dump({"config_hash": chash, **out}, run / "ablation.json")
        lines = ["fusion_mode,f1,acc,mcc"]
        lines += [f"{r['fusion_mode']},{r['f1']},{r['acc']},{r['mcc']}" for r in out["table"]]
        (run / "comparison.csv").write_text("\n".join(lines) + "\n")
        for row in out["table"]:
            print(f"{row['fusion_mode']:>16}  f1 {row['f1']}  acc {row['acc']}  mcc {row['mcc']}")
    else:
        ckpt_dir = run / "checkpoints"
        ckpt_dir.mkdir()
        report = cross_validate(cfg.train, dataset, model_cfg, checkpoint_dir=ckpt_dir)
        report["config_hash"] = chash
        _dump(report, run / "report.json")
        agg = report["aggregate"]
        print(f"{cfg.train.fusion_mode}: f1 {agg['f1']['formatted']}  acc {agg['acc']['formatted']}  "
              f"mcc {agg['mcc']['formatted']}")
    print(f"run directory: {run}")
    return 0


def _checked(checkpoint, manifest_path):
    model, meta = load_checkpoint(checkpoint)
    manifest = DatasetManifest.read(manifest_path)
    mc = model.config
    if manifest.roi_count != mc.roi_count or tuple(manifest.grid_shape) != tuple(mc.grid_shape):
        raise ShapeMismatchError(
            f"checkpoint expects R={mc.roi_count}, grid={tuple(mc.grid_shape)}; manifest has "
            f"R={manifest.roi_count}, grid={tuple(manifest.grid_shape)}"
        )
    dataset = load_dataset(manifest_path)
    train_cfg = meta.get("train_config", {})
    tf = zscore_fc if train_cfg.get("fc_zscore") else None
    return model, meta, dataset, tf, train_cfg.get("eval_batch_size")


def cmd_eval(args) -> int:
    model, meta, dataset, tf, eval_bs = _checked(args.checkpoint, args.manifest)
    chash = config_hash({"command": "eval", "checkpoint": meta.get("config_hash"), "manifest": str(args.manifest)})
    ev = evaluate(model, dataset, eval_bs, tf)
    counts = metrics.confusion(ev["predictions"], ev["labels"])
    scores = {"f1": metrics.f1(counts), "acc": metrics.accuracy(counts), "mcc": metrics.mcc(counts)}
    run = _run_dir(args.out, "eval", chash)
    _dump(scores, run / "metrics.json")
    _dump(
        {
            "config_hash": chash,
            "checkpoint_config_hash": meta.get("config_hash"),
            "confusion": dataclasses.asdict(counts),
            "degenerate": metrics.degenerate(counts),
            "fusion": ev["state"],
            "n_subjects": len(dataset),
        },
        run / "details.json",
    )
    print(json.dumps(scores, sort_keys=True))
    print(f"run directory: {run}")
    return 0


def _write_map(grid, path_stem: Path, chash: str) -> Path:
    if grid.ndim == 2:
        return write_fc(path_stem.with_suffix(".fc"), grid, extra={"config_hash": chash})
    return write_nifti(path_stem.with_suffix(".nii"), grid, description=f"camf {chash}")


def _plots(run: Path, fc_sym, smri_template, atlas) -> list[Path]:
    from camf import plots

    out = run / "plots"
    out.mkdir(exist_ok=True)
    made = []
    if fc_sym is not None:
        made.append(plots.plot_fc_template(fc_sym, out / "fc_template.png"))
    if smri_template is not None:
        made.append(plots.plot_volume_template(smri_template, out / "smri_template.png"))
        if atlas is not None:
            made.append(plots.plot_region_template(smri_template, atlas, out / "smri_regions.png"))
    return made


def cmd_explain(args) -> int:
    model, meta, dataset, tf, _ = _checked(args.checkpoint, args.manifest)
    atlas = None
    if args.atlas:
        atlas = AtlasParcellation.load(args.atlas)
        atlas.validate(model.config.grid_shape)
    else:
        log.warning("no atlas given: region ranking skipped, voxel maps still written")
    subjects = dataset[: args.subjects] if args.subjects else dataset
    chash = config_hash(
        {
            "command": "explain",
            "checkpoint": meta.get("config_hash"),
            "manifest": str(args.manifest),
            "atlas": str(args.atlas),
            "subjects": args.subjects,
            "refine_first": not args.refine_after_average,
        }
    )
    ex = explain(model, subjects, atlas, refine_first=not args.refine_after_average, fc_transform=tf)
    run = _run_dir(args.out, "explain", chash)
    maps = run / "maps"
    maps.mkdir()
    for mod, lst in ex.subject_maps.items():
        for smap in lst:
            _write_map(smap.grid, maps / f"{smap.subject_id}_{mod}", chash)
        for low in ex.low_maps[mod]:
            _write_map(low.grid, maps / f"{low.subject_id}_{mod}_low", chash)
    for mod, tmpl in ex.templates.items():
        _write_map(tmpl.grid, run / f"template_{mod}", chash)
    if ex.fc_symmetric is not None:
        _write_map(ex.fc_symmetric.grid, run / "template_fmri_sym", chash)
    summary = {
        "config_hash": chash,
        "subjects": [s.subject_id for s in subjects],
        "refine_first": not args.refine_after_average,
        "template_shapes": {m: list(t.grid.shape) for m, t in ex.templates.items()},
    }
    if ex.ranking is not None:
        ex.ranking.to_csv(run / "regions.csv")
        summary["top_regions"] = [list(e) for e in ex.ranking.entries[:10]]
    _dump(summary, run / "explain.json")
    _plots(
        run,
        ex.fc_symmetric.grid if ex.fc_symmetric is not None else None,
        ex.templates["smri"].grid if "smri" in ex.templates else None,
        atlas,
    )
    print(f"run directory: {run}")
    return 0


def cmd_plot(args) -> int:
    src = Path(args.run)
    if not src.is_dir():
        raise ConfigError(f"not a run directory: {src}")
    fc_path, vol_path = src / "template_fmri_sym.fc", src / "template_smri.nii"
    fc = read_fc(fc_path) if fc_path.is_file() else None
    vol = read_nifti(vol_path) if vol_path.is_file() else None
    if fc is None and vol is None:
        raise ConfigError(f"{src} holds no saliency templates")
    atlas = AtlasParcellation.load(args.atlas) if args.atlas else None
    if atlas is not None and vol is not None:
        atlas.validate(vol.shape)
    run = _run_dir(args.out, "plot", config_hash({"command": "plot", "run": str(src), "atlas": str(args.atlas)}))
    for p in _plots(run, fc, vol, atlas):
        print(p)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted signal")
    p.add_argument("--mode", choices=SYNTH_MODES, default="cross_modal")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--grid", type=_grid, default=(16, 20, 16), help="Dx,Dy,Dz")
    p.add_argument("--rois", type=int, default=32)
    p.add_argument("--sz-fraction", type=float, default=0.5)
    p.add_argument("--timepoints", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cv", help="5-fold cross-validation")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--fusion-mode", help=f"one of {', '.join(FUSION_MODES)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--ablation", action="store_true", help="run every fusion mode on the same folds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="gradient-guided Score-CAM saliency maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--atlas")
    p.add_argument("--subjects", type=int, help="explain only the first N subjects")
    p.add_argument("--refine-after-average", action="store_true")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("plot", help="redraw heatmaps from an explain run")
    p.add_argument("--run", required=True)
    p.add_argument("--atlas")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CAMFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
