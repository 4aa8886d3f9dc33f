"""``styleflow`` command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags or config file), 2 runtime failure.
Logs go to stderr as ``level ts msg key=val`` lines.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import parse_config, parse_config_text
from .contrastive import train_stage1
from .errors import ConfigError, StyleFlowError
from .evaluation import PerturbationSpec, evaluation_report, export_embeddings, score_dataset
from .flow import Band, first_clip_flow, level_variance_profile
from .fusion import export_sam_response
from .latents import (
    CLIP_LENGTH,
    CenterCropDetector,
    FaceClip,
    Label,
    LatentCache,
    MockLinearEncoder,
    StyleLatentSequence,
    VideoClip,
    clip_starts,
    detect_and_align,
    extract_style_latents,
    read_frame_dir,
)
from .runtime import configure_logging, set_determinism
from .stage2 import train_stage2
from .synthetic import VideoDataset, generate_synthetic_dataset

log = logging.getLogger("styleflow.cli")

CACHE_ENV = "SLF_CACHE_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; our contract reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---- helpers -----------------------------------------------------------------

def _cache_dir(args) -> Path:
    path = args.cache_dir or os.environ.get(CACHE_ENV)
    if not path:
        raise UsageError(f"--cache-dir is required (or set {CACHE_ENV})")
    return Path(path)


def _read_config(path, kind):
    """Returns (config, verbatim text)."""
    if path is None:
        return parse_config(None, kind), ""
    text = Path(path).read_text()
    return parse_config_text(text, kind), text


def _with_seed(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _file_manifest(out: Path, kind: str, args, configs=None, extra=None):
    return ckpt.write_manifest(Path(f"{out}.manifest.toml"), kind, seed=args.seed or 0,
                               configs=configs or {}, extra={"argv": sys.argv[1:], **(extra or {})})


def _dataset(args, split):
    return VideoDataset(_cache_dir(args), None if split == "all" else split)


def _write_index(root: Path, records, fingerprint=None, spec=None):
    index = {"spec": spec or {}, "encoder_fingerprint": fingerprint, "videos": records}
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


# ---- subcommands -------------------------------------------------------------

def cmd_synth(args):
    spec, text = _read_config(args.spec, "synth")
    spec = _with_seed(spec, args)
    out = generate_synthetic_dataset(spec, args.out, with_pixels=not args.no_pixels)
    ckpt.write_manifest(out / ckpt.MANIFEST, "dataset", seed=spec.seed, configs={"synth": spec},
                        fingerprints={"encoder": json.loads((out / "index.json").read_text())["encoder_fingerprint"]},
                        extra={"config_text": {"synth": text}})
    log.info("synth done", extra={"kv": {"out": out, "videos": 2 * spec.videos_per_class}})


def cmd_preprocess(args):
    """<input>/<real|fake|unlabeled>/<video_id>/<frames>.png -> aligned face arrays + index.json."""
    src, out = Path(args.input), Path(args.out)
    (out / "pixels").mkdir(parents=True, exist_ok=True)
    (out / "faces256").mkdir(parents=True, exist_ok=True)
    detector = CenterCropDetector()
    records = []
    for label_dir in sorted(p for p in src.iterdir() if p.is_dir()):
        label = Label.parse(label_dir.name)
        for video_dir in sorted(p for p in label_dir.iterdir() if p.is_dir()):
            frames = read_frame_dir(video_dir)
            starts = clip_starts(len(frames), args.clip_length)
            if not starts:
                log.warning("skipping short video", extra={"kv": {"id": video_dir.name, "frames": len(frames)}})
                continue
            big, small = [], []
            for s in starts:
                clip = detect_and_align(VideoClip(frames[s:s + args.clip_length], video_dir.name, s, label),
                                        detector, args.clip_length)
                big.append(clip.faces256)
                small.append(clip.faces224)
            np.save(out / "faces256" / f"{video_dir.name}.npy", np.concatenate(big))
            np.save(out / "pixels" / f"{video_dir.name}.npy", np.concatenate(small))
            n = len(starts) * args.clip_length
            records.append({"id": video_dir.name, "label": label.name, "frames": n, "split": args.split})
            log.info("aligned video", extra={"kv": {"id": video_dir.name, "frames": n}})
    _write_index(out, records)
    ckpt.write_manifest(out / ckpt.MANIFEST, "preprocess", seed=args.seed or 0,
                        configs={"preprocess": {"clip_length": args.clip_length, "detector": "center-crop"}},
                        extra={"input": str(src), "videos": len(records)})


def cmd_extract_latents(args):
    root = _cache_dir(args)
    index = json.loads((root / "index.json").read_text())
    encoder = MockLinearEncoder(args.encoder_seed)
    cache = LatentCache(root / "latents", encoder.fingerprint)
    for rec in index["videos"]:
        faces = np.load(root / "faces256" / f"{rec['id']}.npy")
        label = Label.parse(rec["label"])
        seq = extract_style_latents(FaceClip(faces, faces, label=label, source_id=rec["id"]), encoder)
        cache.store(StyleLatentSequence(seq.latents, rec["id"], label))
        log.info("encoded video", extra={"kv": {"id": rec["id"], "frames": len(seq)}})
    index["encoder_fingerprint"] = encoder.fingerprint
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    ckpt.write_manifest(root / ckpt.MANIFEST, "latents", seed=args.seed or 0,
                        configs={"encoder": {"name": encoder.name, "seed": args.encoder_seed}},
                        fingerprints={"encoder": encoder.fingerprint})


def cmd_analyze_variance(args):
    ds = _dataset(args, args.split)
    band = Band(args.band)
    flows = {Label.REAL: [], Label.FAKE: []}
    for rec in ds.videos:
        if rec.label in flows and rec.frames >= args.clip_length:
            flows[rec.label].append(first_clip_flow(ds.latents(rec.id), args.clip_length))
    profiles = {lab: level_variance_profile(f, args.mode, lab) for lab, f in flows.items() if f}
    if not profiles:
        raise StyleFlowError("no labelled videos long enough for one clip")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    real = profiles.get(Label.REAL)
    fake = profiles.get(Label.FAKE)
    lines = ["level,real_variance,fake_variance,ratio"]
    for lv in band.levels:
        r = float(real.per_level_variance[lv]) if real else float("nan")
        f = float(fake.per_level_variance[lv]) if fake else float("nan")
        ratio = f / r if real and fake and r > 0 else float("nan")
        lines.append(f"{lv},{r!r},{f!r},{ratio!r}")
    out.write_text("\n".join(lines) + "\n")

    plot = Path(args.plot) if args.plot else out.with_suffix(".png")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    for lab, prof in profiles.items():
        ax.plot(list(band.levels), prof.per_level_variance[band.levels.start:band.levels.stop], marker="o",
                label=lab.name.lower())
    ax.set_xlabel("style level")
    ax.set_ylabel("flow variance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot)
    plt.close(fig)
    _file_manifest(out, "variance", args, configs={"analysis": {"band": args.band, "mode": args.mode,
                                                                "clip_length": args.clip_length}})
    log.info("variance profile written", extra={"kv": {"csv": out, "plot": plot}})


def cmd_train_stage1(args):
    cfg, text = _read_config(args.config, "stage1")
    cfg = _with_seed(cfg, args)
    ds = _dataset(args, args.split)
    model, history = train_stage1(ds.sequences(), cfg)
    ckpt.save_stage1(args.out, model, cfg, history, fingerprints={"encoder": ds.index.get("encoder_fingerprint")},
                     config_text=text)
    log.info("stage1 checkpoint written", extra={"kv": {"out": args.out, "epochs": len(history)}})


def cmd_train_stage2(args):
    gru, s1, m1 = ckpt.load_stage1(args.stage1)
    cfg, text = _read_config(args.config, "stage2")
    cfg = _with_seed(cfg, args)
    frozen = ckpt.content_hash(gru)
    ds = _dataset(args, args.split)
    model, history = train_stage2(ds, gru, cfg, s1.band, s1.difference)
    ckpt.save_stage2(args.out, model, s1, cfg, history,
                     fingerprints={"encoder": ds.index.get("encoder_fingerprint"), "backbone": cfg.backbone.variant},
                     frozen_hash=frozen,
                     config_text={"stage1": m1.get("extra", {}).get("config_text", {}).get("stage1", ""),
                                  "stage2": text})
    log.info("stage2 checkpoint written", extra={"kv": {"out": args.out, "epochs": len(history)}})


def _score(args, collect=False):
    model, manifest = ckpt.load_detector(args.model)
    ds = _dataset(args, args.split)
    perturb = PerturbationSpec.parse(args.perturb) if args.perturb else None
    clip_length = manifest["configs"]["stage2"].get("clip_length", CLIP_LENGTH)
    res = score_dataset(model, ds, clip_length=clip_length, clip_stride=args.clip_stride,
                        aggregate=args.aggregate, perturbation=perturb, seed=args.seed or 0, collect=collect)
    echo = {
        "model_hashes": manifest.get("hashes", {}),
        "split": args.split,
        "perturb": args.perturb or "none",
        "aggregate": args.aggregate,
        "clip_length": clip_length,
        "clip_stride": args.clip_stride or clip_length,
        "seed": args.seed or 0,
    }
    return res, echo


def cmd_evaluate(args):
    results, echo = _score(args)
    echo["clip_level"] = args.clip_level
    report = evaluation_report(results, clip_level=args.clip_level, config_echo=echo)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _file_manifest(out, "evaluation", args, configs={"evaluate": echo})
    log.info("evaluation done", extra={"kv": {"auc": report["auc"], "videos": len(results), "out": out}})


def cmd_export_sam(args):
    (_, rows), echo = _score(args, collect=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_sam_response(((cid, score, resp) for cid, _, score, resp, _ in rows), out)
    _file_manifest(out, "sam-export", args, configs={"export": echo})


def cmd_export_embeddings(args):
    (_, rows), echo = _score(args, collect=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(rows, out)
    _file_manifest(out, "embedding-export", args, configs={"export": echo})


# ---- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="styleflow", description="Style-latent-flow deepfake detection toolkit.")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides config-file seeds)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cache(sp):
        sp.add_argument("--cache-dir", default=None, help=f"dataset directory (default: ${CACHE_ENV})")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--spec", default=None, help="TOML file with SyntheticSpec keys")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-pixels", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="detect and align faces from frame directories")
    sp.add_argument("--input", required=True, help="<input>/<label>/<video_id>/*.png")
    sp.add_argument("--out", required=True)
    sp.add_argument("--clip-length", type=int, default=CLIP_LENGTH)
    sp.add_argument("--split", default="train")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("extract-latents", help="encode aligned faces into the latent cache")
    cache(sp)
    sp.add_argument("--encoder-seed", type=int, default=0)
    sp.set_defaults(func=cmd_extract_latents)

    sp = sub.add_parser("analyze-variance", help="per-level style-flow variance by class")
    cache(sp)
    sp.add_argument("--band", default="total", choices=[b.value for b in Band])
    sp.add_argument("--mode", default="pooled", choices=["pooled", "per_clip"])
    sp.add_argument("--clip-length", type=int, default=CLIP_LENGTH)
    sp.add_argument("--split", default="all")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", default=None, help="plot file (default: <out> with .png suffix)")
    sp.set_defaults(func=cmd_analyze_variance)

    sp = sub.add_parser("train-stage1", help="contrastive StyleGRU training")
    cache(sp)
    sp.add_argument("--config", default=None)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("train-stage2", help="train backbone and fusion head with StyleGRU frozen")
    cache(sp)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_stage2)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "video-level AUC report"),
        ("export-sam", cmd_export_sam, "per-clip style-attention responses as CSV"),
        ("export-embeddings", cmd_export_embeddings, "per-clip pooled features as CSV"),
    ):
        sp = sub.add_parser(name, help=help_)
        cache(sp)
        sp.add_argument("--model", required=True)
        sp.add_argument("--split", default="test")
        sp.add_argument("--perturb", default=None, help="kind:severity, e.g. noise:3")
        sp.add_argument("--aggregate", default="mean", choices=["mean", "median", "max"])
        sp.add_argument("--clip-stride", type=int, default=None)
        sp.add_argument("--out", required=True)
        if name == "evaluate":
            sp.add_argument("--clip-level", action="store_true", help="AUC over clips instead of videos")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(getattr(logging, args.log_level))
    set_determinism(args.seed or 0, args.deterministic)
    if getattr(args, "perturb", None):
        try:
            PerturbationSpec.parse(args.perturb)
        except StyleFlowError as exc:
            print(f"styleflow: error: --perturb: {exc}", file=sys.stderr)
            return 1
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"styleflow: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures of any kind map to exit 2
        log.error("command failed", exc_info=exc, extra={"kv": {"command": args.command,
                                                               "error_type": type(exc).__name__}})
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
