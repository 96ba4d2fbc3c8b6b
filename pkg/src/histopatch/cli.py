"""Command-line pipeline: fps, extract, augment, embed, search, probe, attn.

Batch stages run a slide-level worker pool with per-slide failure isolation:
one bad slide is reported as missed, never aborts the run.  Every command
writes its resolved configuration next to its outputs, and batch commands
write a report whose accounting always balances (missed + succeeded =
total).  Exit codes: 0 full success, 2 partial (some inputs missed),
1 fatal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment as aug
from . import model as mdl
from . import retrieval as ret
from . import sampling as smp
from .errors import HistopatchError
from .slide import (
    DEFAULT_THUMB_SIZE,
    RegionRequest,
    open_slide,
    parse_patch_filename,
    patch_filename,
    read_region,
)
from .tissue import find_contours, make_mask, save_contours_jsonl, save_pbm

SLIDE_SUFFIXES = (".png", ".tif", ".tiff")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def derive_seed(global_seed: int, item_id: str) -> int:
    """Stable per-item seed: same (seed, id) on any platform, any order."""
    digest = hashlib.sha256(f"{global_seed}|{item_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _worker_cap(requested: int | None) -> int:
    cap = os.cpu_count() or 1
    env = os.environ.get("HISTOPATCH_THREADS")
    if env:
        cap = min(cap, max(1, int(env)))
    if requested:
        cap = min(cap, max(1, requested))
    return cap


def _log(args, event: str, **fields) -> None:
    if getattr(args, "log", "text") == "json":
        print(json.dumps({"event": event, **fields}))
    else:
        detail = " ".join(f"{k}={v}" for k, v in fields.items())
        print(f"[{event}] {detail}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


def _write_run_config(out_dir: Path, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(out_dir / "run_config.json", {"command": args.command, **resolved})


def _list_slides(input_dir: Path) -> list[Path]:
    files = [p for p in sorted(input_dir.iterdir())
             if p.suffix.lower() in SLIDE_SUFFIXES]
    return files


def _run_batch(items, fn, workers: int) -> list[tuple[bool, object]]:
    """Run fn(item) over items in a pool; returns (ok, payload) per item.

    payload is fn's return value on success or the caught exception.  Only
    domain and I/O errors are isolated; programming errors propagate.
    """

    def guarded(item):
        try:
            return True, fn(item)
        except (HistopatchError, OSError, ValueError) as exc:
            return False, exc

    if workers <= 1 or len(items) <= 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, items))


def _finish_report(
    out_dir: Path,
    args,
    total: int,
    per_item: list[dict],
    missed: list[dict],
    started: float,
    succeeded_count: int | None = None,
) -> int:
    elapsed = time.time() - started
    report = {
        "total": total,
        "succeeded": len(per_item) if succeeded_count is None else succeeded_count,
        "missed": sorted(missed, key=lambda m: m["slide_id"]),
        "per_item": sorted(per_item, key=lambda m: m["slide_id"]),
        "total_seconds": elapsed,
        "total_minutes": elapsed / 60.0,
    }
    _write_json(out_dir / "report.json", report)
    _write_run_config(out_dir, args)
    for m in report["missed"]:
        _log(args, "missed", slide_id=m["slide_id"], reason=m["reason"])
    _log(args, "done", total=total, succeeded=report["succeeded"],
         missed=len(missed), seconds=round(elapsed, 3))
    return EXIT_PARTIAL if missed else EXIT_OK


# ---------------------------------------------------------------- fps


def cmd_fps(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    slides = _list_slides(Path(args.input))
    if not slides:
        print(f"no slide files under {args.input}", file=sys.stderr)
        return EXIT_FATAL

    def one(path: Path) -> dict:
        t0 = time.time()
        slide = open_slide(path, thumb_size=args.thumb_size)
        config = smp.FpsConfig(
            n_patches=args.n_patches,
            patch_size=args.patch_size,
            coverage_min=args.coverage,
            e_min="auto" if args.e_min == "AUTO" else float(args.e_min),
            stride="auto" if args.stride == "AUTO" else int(args.stride),
            bandwidth="scott" if args.bandwidth == "scott" else float(args.bandwidth),
            threshold="otsu" if args.threshold == "otsu" else int(args.threshold),
            min_contour_area=args.min_contour_area,
            seed=derive_seed(args.seed, slide.slide_id),
            replace=args.with_replacement,
        )
        plan = smp.run_fps(slide, config)
        smp.save_plan(plan, out_dir / f"{slide.slide_id}.jsonl")
        if args.save_mask:
            mask = make_mask(slide.thumbnail, threshold=config.threshold)
            save_pbm(mask, out_dir / f"{slide.slide_id}.pbm")
            save_contours_jsonl(
                find_contours(mask, min_area=config.min_contour_area),
                slide.slide_id,
                out_dir / f"{slide.slide_id}_contours.jsonl",
            )
        return {"slide_id": slide.slide_id, "seconds": time.time() - t0,
                **plan.stats}

    results = _run_batch(slides, one, _worker_cap(args.workers))
    succeeded, missed = [], []
    for path, (ok, payload) in zip(slides, results):
        if ok:
            succeeded.append(payload)
        else:
            missed.append({"slide_id": path.stem,
                           "reason": type(payload).__name__,
                           "error": str(payload)})
    return _finish_report(out_dir, args, len(slides), succeeded, missed, started)


# ---------------------------------------------------------------- extract


def cmd_extract(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    plans = sorted(Path(args.plans).glob("*.jsonl"))
    plans = [p for p in plans if not p.name.endswith("_contours.jsonl")]
    if not plans:
        print(f"no plan files under {args.plans}", file=sys.stderr)
        return EXIT_FATAL
    slides_dir = Path(args.slides)

    def one(plan_path: Path) -> dict:
        t0 = time.time()
        records = smp.load_plan_records(plan_path)
        if not records:
            raise HistopatchError("plan file is empty")
        slide_id = records[0]["slide_id"]
        slide_file = _find_slide_file(slides_dir, slide_id)
        slide = open_slide(slide_file)
        for rec in records:
            x, y, w, h = rec["slide_rect"]
            region = read_region(slide, RegionRequest(x, y, w, h, rec["level"]))
            Image.fromarray(region).save(out_dir / patch_filename(slide_id, (x, y, w, h)))
        return {"slide_id": slide_id, "patches": len(records),
                "seconds": time.time() - t0}

    results = _run_batch(plans, one, _worker_cap(args.workers))
    succeeded, missed = [], []
    for path, (ok, payload) in zip(plans, results):
        if ok:
            succeeded.append(payload)
        else:
            missed.append({"slide_id": path.stem, "reason": type(payload).__name__,
                           "error": str(payload)})
    return _finish_report(out_dir, args, len(plans), succeeded, missed, started)


def _find_slide_file(slides_dir: Path, slide_id: str) -> Path:
    for suffix in SLIDE_SUFFIXES:
        cand = slides_dir / f"{slide_id}{suffix}"
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no slide file for {slide_id!r} under {slides_dir}")


# ---------------------------------------------------------------- augment


def cmd_augment(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = [p for p in sorted(Path(args.input).iterdir())
              if p.suffix.lower() == ".png"]
    if not images:
        print(f"no images under {args.input}", file=sys.stderr)
        return EXIT_FATAL

    def one(path: Path) -> dict:
        t0 = time.time()
        img = np.asarray(Image.open(path).convert("RGB"))
        crop_set = aug.make_crop_set(
            img,
            n_local=args.n_local,
            seed=derive_seed(args.seed, path.stem),
            mode=args.mode,
            interpolation=args.interpolation,
            source_id=path.stem,
            global_spec=aug.CropSpec("global", aug.GLOBAL_SCALE, args.global_size),
            local_spec=aug.CropSpec("local", aug.LOCAL_SCALE, args.local_size),
        )
        names = []
        for i, crop in enumerate(crop_set.crops):
            tag = f"g{i}" if i < 2 else f"l{i - 2}"
            name = f"{path.stem}_{tag}.png"
            Image.fromarray(crop).save(out_dir / name)
            names.append(name)
        _write_json(out_dir / f"{path.stem}_crops.json", {
            "source_id": crop_set.source_id,
            "seed": crop_set.seed,
            "files": names,
            "provenance": crop_set.provenance,
        })
        return {"slide_id": path.stem, "crops": len(names),
                "seconds": time.time() - t0}

    results = _run_batch(images, one, _worker_cap(args.workers))
    succeeded, missed = [], []
    for path, (ok, payload) in zip(images, results):
        if ok:
            succeeded.append(payload)
        else:
            missed.append({"slide_id": path.stem, "reason": type(payload).__name__,
                           "error": str(payload)})
    return _finish_report(out_dir, args, len(images), succeeded, missed, started)


# ---------------------------------------------------------------- embed


def _load_labels(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _prepare_for_model(img: np.ndarray, side: int) -> np.ndarray:
    if img.shape[0] == side and img.shape[1] == side:
        return img
    return np.asarray(
        Image.fromarray(img).resize((side, side), Image.Resampling.BILINEAR)
    )


def cmd_embed(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = mdl.load_weights(args.weights)
    labels = _load_labels(args.labels)
    side = weights.config.input_size

    jobs: list[tuple[str, tuple[int, int, int, int], object]] = []
    if args.patches:
        for p in sorted(Path(args.patches).glob("*.png")):
            slide_id, rect = parse_patch_filename(p.name)
            jobs.append((slide_id, rect, p))
    elif args.plans and args.slides:
        slides_dir = Path(args.slides)
        opened: dict[str, object] = {}
        for plan_path in sorted(Path(args.plans).glob("*.jsonl")):
            if plan_path.name.endswith("_contours.jsonl"):
                continue
            for rec in smp.load_plan_records(plan_path):
                sid = rec["slide_id"]
                if sid not in opened:
                    opened[sid] = open_slide(_find_slide_file(slides_dir, sid))
                jobs.append((sid, tuple(rec["slide_rect"]),
                             (opened[sid], rec["level"])))
    else:
        print("embed needs --patches, or --plans with --slides", file=sys.stderr)
        return EXIT_FATAL
    if not jobs:
        print("no patches to embed", file=sys.stderr)
        return EXIT_FATAL

    def one(job) -> dict:
        slide_id, rect, src = job
        if isinstance(src, Path):
            img = np.asarray(Image.open(src).convert("RGB"))
        else:
            slide, level = src
            x, y, w, h = rect
            img = read_region(slide, RegionRequest(x, y, w, h, level))
        trace = mdl.forward(_prepare_for_model(img, side), weights)
        info = labels.get(slide_id, {})
        return {
            "vector": trace.embedding.astype(np.float32),
            "meta": {
                "slide_id": slide_id,
                "rect": list(rect),
                "label": info.get("label", "unknown"),
                "patient_id": info.get("patient_id"),
            },
        }

    results = _run_batch(jobs, one, _worker_cap(args.workers))
    missed = []
    rows, meta = [], []
    for job, (ok, payload) in zip(jobs, results):
        if ok:
            rows.append(payload["vector"])
            meta.append(payload["meta"])
        else:
            missed.append({"slide_id": job[0], "reason": type(payload).__name__,
                           "error": str(payload)})
    per_slide: list[dict] = []
    if rows:
        store = ret.EmbeddingStore(vectors=np.vstack(rows), meta=meta)
        ret.save_store(store, out_dir)
        by_slide: dict[str, int] = {}
        for m in meta:
            by_slide[m["slide_id"]] = by_slide.get(m["slide_id"], 0) + 1
        per_slide = [{"slide_id": sid, "patches": cnt}
                     for sid, cnt in sorted(by_slide.items())]
    return _finish_report(out_dir, args, len(jobs), per_slide, missed, started,
                          succeeded_count=len(rows))


# ---------------------------------------------------------------- search


def cmd_search(args) -> int:
    store = ret.load_store(args.store)
    # unset --exclude means self at patch level, patient at slide level
    exclude = args.exclude or ("self" if args.level == "patch" else "patient")
    exclusion = {"self": "self", "slide": "same_slide",
                 "patient": "same_patient"}[exclude]
    if args.level == "patch":
        result = ret.knn_leave_one_out(store, k=args.k, exclusion=exclusion)
    else:
        result = ret.wsi_leave_one_out(
            store, k=args.k, exclude_same_patient=(exclude == "patient")
        )
    payload = {
        "level": args.level,
        "k": args.k,
        "exclusion": exclusion,
        "rows": len(store),
        "accuracy": result.accuracy,
        "macro_f1": result.macro_f1,
    }
    report_path = Path(args.report)
    _write_json(report_path, payload)
    if report_path.parent.is_dir():
        _write_run_config(report_path.parent, args)
    _log(args, "search", **{k: v for k, v in payload.items()
                            if k in ("level", "k", "rows")})
    for name in sorted(result.accuracy):
        _log(args, "metric", name=name, accuracy=round(result.accuracy[name], 4),
             macro_f1=round(result.macro_f1[name], 4))
    return EXIT_OK


# ---------------------------------------------------------------- probe


def cmd_probe(args) -> int:
    store = ret.load_store(args.store)
    result = ret.linear_probe_cv(
        store, folds=args.folds, epochs=args.epochs, lr=args.lr, seed=args.seed
    )
    payload = {
        "folds": result.folds,
        "epochs": result.epochs,
        "lr": result.lr,
        "seed": result.seed,
        "fold_accuracy": result.fold_accuracy,
        "fold_macro_f1": result.fold_macro_f1,
        "accuracy": result.accuracy,
        "macro_f1": result.macro_f1,
    }
    if args.report:
        report_path = Path(args.report)
        _write_json(report_path, payload)
        if report_path.parent.is_dir():
            _write_run_config(report_path.parent, args)
    _log(args, "probe", accuracy=result.accuracy, macro_f1=result.macro_f1)
    return EXIT_OK


# ---------------------------------------------------------------- attn

# compact perceptual colormap: dark violet -> orange -> light yellow
_CMAP_STOPS = np.array(
    [(0, 0, 4), (40, 11, 84), (101, 21, 110), (159, 42, 99),
     (212, 72, 66), (245, 125, 21), (250, 193, 39), (252, 253, 191)],
    dtype=np.float64,
)


def _colormap_lut() -> np.ndarray:
    xs = np.linspace(0.0, 1.0, len(_CMAP_STOPS))
    grid = np.linspace(0.0, 1.0, 256)
    lut = np.stack(
        [np.interp(grid, xs, _CMAP_STOPS[:, c]) for c in range(3)], axis=1
    )
    return np.rint(lut).astype(np.uint8)


def cmd_attn(args) -> int:
    weights = mdl.load_weights(args.weights)
    side = weights.config.input_size
    img = np.asarray(Image.open(args.image).convert("RGB"))
    trace = mdl.forward(_prepare_for_model(img, side), weights,
                        capture_attention=True)
    grids = mdl.cls_attention_grid(trace, weights.config, block=args.block)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lut = _colormap_lut()
    stem = Path(args.image).stem
    for h in range(grids.shape[0]):
        g = grids[h]
        lo, hi = float(g.min()), float(g.max())
        norm = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
        idx = np.rint(norm * 255).astype(np.uint8)
        heat = Image.fromarray(lut[idx]).resize((side, side),
                                                Image.Resampling.BILINEAR)
        heat.save(out_dir / f"{stem}_head{h}.png")
    _write_run_config(out_dir, args)
    _log(args, "attn", image=stem, heads=int(grids.shape[0]))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=None,
                   help="worker pool size (HISTOPATCH_THREADS caps it)")
    p.add_argument("--log", choices=("text", "json"), default="text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histopatch",
        description="whole-slide patch selection, augmentation, embedding, "
                    "and retrieval evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fps", help="density-proportional patch selection")
    p.add_argument("--input", required=True, help="directory of slide files")
    p.add_argument("--out", required=True, help="output directory for plans")
    p.add_argument("--n-patches", type=int, default=40)
    p.add_argument("--patch-size", type=int, default=224)
    p.add_argument("--coverage", type=float, default=0.9)
    p.add_argument("--e-min", default="AUTO")
    p.add_argument("--stride", default="AUTO")
    p.add_argument("--bandwidth", default="scott")
    p.add_argument("--threshold", default="otsu")
    p.add_argument("--min-contour-area", type=int, default=32)
    p.add_argument("--thumb-size", type=int, default=DEFAULT_THUMB_SIZE)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--with-replacement", action="store_true")
    p.add_argument("--save-mask", action="store_true",
                   help="also write mask PBM and contour JSONL per slide")
    _add_common(p)
    p.set_defaults(func=cmd_fps)

    p = sub.add_parser("extract", help="cut planned patches into PNG files")
    p.add_argument("--plans", required=True)
    p.add_argument("--slides", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("augment", help="rotation multi-crop sets for images")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-local", type=int, default=8)
    p.add_argument("--mode", choices=("auto", "continuous", "discrete"),
                   default="auto")
    p.add_argument("--interpolation", choices=("bilinear", "nearest"),
                   default="bilinear")
    p.add_argument("--global-size", type=int, default=aug.GLOBAL_SIZE)
    p.add_argument("--local-size", type=int, default=aug.LOCAL_SIZE)
    p.add_argument("--seed", type=int, default=7)
    _add_common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("embed", help="run the encoder over patches")
    p.add_argument("--weights", required=True, help="model manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--patches", help="directory of extracted patch PNGs")
    p.add_argument("--plans", help="plan directory (with --slides)")
    p.add_argument("--slides", help="slide directory (with --plans)")
    p.add_argument("--labels", help="JSON map slide_id -> {label, patient_id}")
    _add_common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("search", help="leave-one-out retrieval evaluation")
    p.add_argument("--store", required=True)
    p.add_argument("--level", choices=("patch", "wsi"), default="patch")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--exclude", choices=("self", "slide", "patient"),
                   default=None,
                   help="leave-one-out exclusion; defaults to self for "
                        "patch level and patient for wsi level")
    p.add_argument("--report", default="report.json")
    _add_common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("probe", help="stratified k-fold linear probe")
    p.add_argument("--store", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--report", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("attn", help="per-head attention heatmaps for an image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=-1)
    _add_common(p)
    p.set_defaults(func=cmd_attn)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HistopatchError, OSError, ValueError, KeyError) as exc:
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
