"""Operator command line.

Subcommands: ``datagen``, ``gradcheck``, ``train-demo``, ``eval``,
``forward``.  Every subcommand honors ``--config`` (YAML or JSON file,
keyed per subcommand), ``--seed``, and ``--out``; flag values override
file values override defaults, and the resolved configuration is written
into the output directory so a run can be reproduced exactly.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import datagen as dg, gradsuite, metrics as me, model as mm, plots
from .errors import UavrisError
from .providers import HttpCaptionProvider, StubCaptionProvider
from .refcoco import load_annotations, rle_decode
from .tensor import Tensor


def _load_config_file(path, section):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UavrisError(f"config file does not exist: {p}")
    with open(p, encoding="utf-8") as fh:
        doc = json.load(fh) if p.suffix == ".json" else yaml.safe_load(fh)
    doc = doc or {}
    section_cfg = doc.get(section, {}) or {}
    merged = {k: v for k, v in doc.items()
              if not isinstance(v, dict) and k in ("seed", "out")}
    merged.update(section_cfg)
    return merged


def _resolve(args, section, keys):
    """Precedence: explicit flag > config file > parser default."""
    file_cfg = _load_config_file(args.config, section)
    resolved = {}
    for key in keys:
        flag_val = getattr(args, key)
        if key in args._explicit:
            resolved[key] = flag_val
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = flag_val
    return resolved


def _prepare_out(resolved, section):
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    record = {"subcommand": section, **{k: _plain(v) for k, v in resolved.items()}}
    with open(out / "run_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(record, fh, sort_keys=True)
    return out


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return list(v)
    return v


# ---------------------------------------------------------------------------
# datagen
# ---------------------------------------------------------------------------

def cmd_datagen(args):
    keys = ("images", "masks", "classes", "provider", "provider_url",
            "seed", "out", "min_classes", "min_fraction", "patch_size")
    r = _resolve(args, "datagen", keys)
    for name in ("images", "masks", "classes"):
        if r[name] is None:
            print(f"error: --{name} is required", file=sys.stderr)
            return 2
        if not Path(r[name]).exists():
            print(f"error: input path does not exist: {r[name]}", file=sys.stderr)
            return 2
    out = _prepare_out(r, "datagen")

    classes, conflicts = dg.load_class_table(r["classes"])
    cfg = dg.DatagenConfig(seed=int(r["seed"]), conflict_terms=conflicts,
                           min_classes=int(r["min_classes"]),
                           min_fraction=float(r["min_fraction"]),
                           patch_size=int(r["patch_size"]))
    if r["provider"] == "stub":
        provider = StubCaptionProvider(seed=cfg.seed)
    elif r["provider"] == "http":
        if not r["provider_url"]:
            print("error: --provider-url is required with --provider http",
                  file=sys.stderr)
            return 2
        provider = HttpCaptionProvider(r["provider_url"])
    else:
        print(f"error: unknown provider {r['provider']!r}", file=sys.stderr)
        return 2

    sources = dg.load_sources(r["images"], r["masks"], classes)
    result = dg.run_pipeline(sources, provider, cfg, out)

    print(f"patches: {len(result.patches)} total, {result.kept} kept")
    for reason in sorted(result.discarded):
        print(f"  discarded ({reason}): {result.discarded[reason]}")
    print(f"captions rejected: {result.rejected_captions}")
    print(f"annotations: {len(result.annotations)} -> {result.annotation_path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    keys = ("seeds", "tolerance", "seed", "out", "corrupt_op")
    r = _resolve(args, "gradcheck", keys)
    out = _prepare_out(r, "gradcheck")
    reports = gradsuite.run_suite(n_seeds=int(r["seeds"]),
                                  tolerance=float(r["tolerance"]),
                                  base_seed=int(r["seed"]),
                                  corrupt_op=r["corrupt_op"])
    width = max(len(rep.name) for rep in reports)
    lines = []
    for rep in reports:
        status = "ok" if rep.passed else "FAIL"
        lines.append(f"{rep.name:<{width}}  {rep.max_rel_err:12.3e}  {status}")
        print(lines[-1])
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out / "gradcheck.csv", "w", encoding="utf-8") as fh:
        fh.write("op,max_rel_err,tolerance,passed\n")
        for rep in reports:
            fh.write(f"{rep.name},{rep.max_rel_err:.6e},{rep.tolerance},{rep.passed}\n")
    plots.save_gradcheck_bars(out / "gradcheck.png", reports)
    failed = [rep.name for rep in reports if not rep.passed]
    if failed:
        print(f"FAILED ops: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(reports)} ops within tolerance {r['tolerance']}")
    return 0


# ---------------------------------------------------------------------------
# train-demo
# ---------------------------------------------------------------------------

def cmd_train_demo(args):
    keys = ("iters", "image_size", "lr", "weight_decay", "disable_vlcam",
            "disable_ramsf", "seed", "out")
    r = _resolve(args, "train_demo", keys)
    out = _prepare_out(r, "train_demo")
    cfg = mm.ModelConfig.smoke(
        image_size=int(r["image_size"]), seed=int(r["seed"]),
        enable_vlcam=not r["disable_vlcam"], enable_ramsf=not r["disable_ramsf"])
    sample = mm.make_synthetic_sample(cfg)
    try:
        losses, model = mm.train_smoke(cfg, sample, int(r["iters"]),
                                       lr=float(r["lr"]),
                                       weight_decay=float(r["weight_decay"]))
    except UavrisError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 1

    with open(out / "loss_history.csv", "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss:.10f}\n")
    plots.save_loss_curve(out / "loss_curve.png", losses)

    image, tokens, gt = sample
    logits = model.forward(Tensor(image), tokens)
    pred = mm.predict_mask(logits)
    Image.fromarray(pred * 255).save(out / "predicted_mask.png")
    final_iou = me.iou(pred, gt)
    print(f"loss: {losses[0]:.4f} -> {losses[-1]:.4f} "
          f"({100 * losses[-1] / losses[0]:.1f}% of initial)")
    print(f"final IoU vs synthetic ground truth: {final_iou:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_predictions(pred_path, annotations):
    """Masks from a directory of <ref_id>.png files (0/255) or from a JSON
    file of RLE records keyed by ref id."""
    pred_path = Path(pred_path)
    preds = {}
    missing = []
    if pred_path.is_dir():
        for ann in annotations:
            f = pred_path / f"{ann.ref_id}.png"
            if not f.exists():
                missing.append(ann.ref_id)
                continue
            arr = np.asarray(Image.open(f))
            if arr.ndim == 3:
                arr = arr[..., 0]
            preds[ann.ref_id] = (arr >= 128).astype(np.uint8)
    else:
        with open(pred_path, encoding="utf-8") as fh:
            records = json.load(fh)
        for ann in annotations:
            rec = records.get(str(ann.ref_id))
            if rec is None:
                missing.append(ann.ref_id)
                continue
            preds[ann.ref_id] = rle_decode(rec)
    return preds, missing


def cmd_eval(args):
    keys = ("pred", "annotations", "seed", "out")
    r = _resolve(args, "eval", keys)
    for name in ("pred", "annotations"):
        if r[name] is None or not Path(r[name]).exists():
            print(f"error: --{name} path does not exist: {r[name]}", file=sys.stderr)
            return 2
    out = _prepare_out(r, "eval")

    annotations, _, _ = load_annotations(r["annotations"])
    preds, missing = _load_predictions(r["pred"], annotations)
    if missing:
        print("error: missing predictions for ref ids: "
              + ", ".join(str(m) for m in missing), file=sys.stderr)
        return 1

    samples = [me.EvalSample(pred=preds[a.ref_id], gt=rle_decode(a.segmentation),
                             category=a.category, image_id=str(a.image_id))
               for a in annotations]
    report = me.build_report(samples)
    table = me.render_table(report)
    print(table)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.csv").write_text(me.render_csv(report), encoding="utf-8")
    plots.save_pr_curve(out / "pr_curve.png", report.pr)
    if report.per_class_iou:
        plots.save_class_iou(out / "class_iou.png", report.per_class_iou)
    return 0


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def cmd_forward(args):
    keys = ("image", "tokens", "checkpoint", "image_size", "disable_vlcam",
            "disable_ramsf", "seed", "out")
    r = _resolve(args, "forward", keys)
    if r["image"] is None or not Path(r["image"]).exists():
        print(f"error: --image path does not exist: {r['image']}", file=sys.stderr)
        return 2
    out = _prepare_out(r, "forward")

    cfg = mm.ModelConfig.smoke(
        image_size=int(r["image_size"]), seed=int(r["seed"]),
        enable_vlcam=not r["disable_vlcam"], enable_ramsf=not r["disable_ramsf"])
    model = mm.Model(cfg)
    if r["checkpoint"]:
        model.load_state(mm.load_checkpoint(r["checkpoint"]))

    img = Image.open(r["image"]).convert("RGB")
    if img.size != (cfg.image_size, cfg.image_size):
        img = img.resize((cfg.image_size, cfg.image_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0
    tokens = [int(t) for t in str(r["tokens"]).split(",") if t.strip() != ""]

    try:
        logits = model.forward(Tensor(arr), tokens)
    except UavrisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    pred = mm.predict_mask(logits)
    Image.fromarray(pred * 255).save(out / "mask.png")
    print(f"mask written to {out / 'mask.png'} "
          f"({int(pred.sum())}/{pred.size} foreground pixels)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _TrackingParser(argparse.ArgumentParser):
    """Records which options the user supplied, for precedence resolution."""

    def parse_args(self, argv=None):
        args = super().parse_args(argv)
        explicit = set()
        argv = list(sys.argv[1:] if argv is None else argv)
        for action in self._subparsers._group_actions[0].choices[args.command]._actions:
            for opt in action.option_strings:
                if opt in argv or any(a.startswith(opt + "=") for a in argv):
                    explicit.add(action.dest)
        args._explicit = explicit
        return args


def _add_common(p):
    p.add_argument("--config", default=None, help="YAML/JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")


def build_parser():
    parser = _TrackingParser(prog="uavris",
                             description="referring segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="run the dataset generation pipeline")
    p.add_argument("--images", default=None, help="directory of source images")
    p.add_argument("--masks", default=None, help="directory of class-id masks")
    p.add_argument("--classes", default=None, help="class table YAML")
    p.add_argument("--provider", default="stub", choices=("stub", "http"))
    p.add_argument("--provider-url", dest="provider_url", default=None)
    p.add_argument("--min-classes", dest="min_classes", type=int, default=2)
    p.add_argument("--min-fraction", dest="min_fraction", type=float, default=0.05)
    p.add_argument("--patch-size", dest="patch_size", type=int, default=1024)
    _add_common(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=gradsuite.DEFAULT_SEEDS)
    p.add_argument("--tolerance", type=float, default=gradsuite.DEFAULT_TOLERANCE)
    p.add_argument("--corrupt-op", dest="corrupt_op", default=None,
                   help=argparse.SUPPRESS)  # testing hook
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-demo", help="overfit one synthetic sample")
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--image-size", dest="image_size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=0.01)
    p.add_argument("--disable-vlcam", dest="disable_vlcam", action="store_true")
    p.add_argument("--disable-ramsf", dest="disable_ramsf", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("eval", help="score predictions against annotations")
    p.add_argument("--pred", default=None,
                   help="directory of <ref_id>.png masks or a JSON RLE file")
    p.add_argument("--annotations", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forward", help="run the model on one image")
    p.add_argument("--image", default=None)
    p.add_argument("--tokens", default="1,2,3", help="comma-separated token ids")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=64)
    p.add_argument("--disable-vlcam", dest="disable_vlcam", action="store_true")
    p.add_argument("--disable-ramsf", dest="disable_ramsf", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_forward)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UavrisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
