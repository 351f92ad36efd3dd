"""Command-line entry point.

Every command takes its settings from three layers: built-in defaults, an
optional ``--config`` file of ``key=value`` lines, and explicit flags, later
layers winning.  The merged settings are written to ``effective_config.txt``
in the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .cleanse import cleanse_dataset
from .data import (
    DatasetManifest,
    ManifestError,
    SynthSpec,
    load_frame,
    load_manifest,
    read_gaze,
    save_gaze_map,
    save_image,
    synth_dataset,
    write_manifest,
)
from .model import (
    CheckpointError,
    ConfigError,
    CueingModel,
    ModelConfig,
    analytic_param_count,
    count_flops,
    load_checkpoint,
    save_checkpoint,
)
from .render import overlay, write_colormap_doc
from .tokenizer import DimensionError
from .train import RenderParams, TrainConfig, evaluate, predict_map, sample_finetune_subset, train

log = logging.getLogger("cueing")


class CliError(Exception):
    """A user-facing error; reported as one line with a nonzero exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{message} (see '{self.prog} --help')")


# -- settings -------------------------------------------------------------------

# (key, default, help); the flag is --key with underscores as dashes
_SYNTH_KEYS = [
    ("frames", 8, "number of frames"),
    ("width", 320, "frame width in pixels"),
    ("height", 192, "frame height in pixels"),
    ("objects_min", 2, "fewest objects per frame"),
    ("objects_max", 4, "most objects per frame"),
    ("distractor_prob", 0.0, "probability of a gaze blob outside every box"),
    ("align", 8, "alignment grid side (tokens per side the data is built for)"),
    ("block", 2, "alignment cells per object slot side"),
    ("blob_scale", 0.15, "gaze blob sigma as a fraction of an alignment cell"),
    ("focus_prob", 0.5, "probability that an object receives gaze"),
]

_SKIP_MODEL = {"seed"}
_MODEL_HELP = {
    "tokens": "number of tokens T (a power of 2)",
    "width": "input width in pixels",
    "height": "input height in pixels",
    "channels": "feature channels in the token convolutions",
    "conv_layers": "number of token convolutions",
    "kernel": "convolution kernel size",
    "stride": "convolution stride",
    "padding": "convolution zero padding",
    "pool_h": "pooled token height",
    "pool_w": "pooled token width",
    "layers": "encoder layers",
    "heads": "attention heads",
    "ffn_mult": "feed-forward width as a multiple of the token size",
    "symmetric_qk": "share the query and key projections",
    "plain_channel_attention": "replace the channel attention MLP with one learned weight per channel",
    "ca_reduction": "channel attention reduction ratio",
    "ln_eps": "layer norm epsilon",
}
_MODEL_KEYS = [
    (f.name, f.default, _MODEL_HELP.get(f.name, "model setting"))
    for f in dataclasses.fields(ModelConfig)
    if f.name not in _SKIP_MODEL
]
_TRAIN_KEYS = [
    ("epochs", 10, "passes over the data"),
    ("batch_size", 8, "frames per optimizer step"),
    ("lr", 1e-3, "Adam learning rate"),
    ("beta1", 0.9, "Adam first-moment decay"),
    ("beta2", 0.999, "Adam second-moment decay"),
    ("eps", 1e-8, "Adam denominator epsilon"),
    ("steps", None, "stop after this many optimizer steps"),
    ("freeze_mask", "none", "one of none, attention, all_except_linear"),
    ("drop_empty_gaze", False, "skip frames whose gaze map is all zero"),
]
_RENDER_KEYS = [
    ("sigma", None, "Gaussian smoothing sigma in pixels (default width/64)"),
    ("interp", "bilinear", "bilinear or bicubic"),
    ("normalize", True, "rescale each predicted map to peak 1"),
    ("threshold", 0.5, "focus threshold"),
    ("auc_variant", "roc_objects", "roc_objects or pixel_roc"),
]
_FINETUNE_KEYS = [("fraction", 0.02, "fraction of the manifest sampled for fine-tuning")]
_BENCH_KEYS = [("iters", 20, "timed forwards"), ("warmup", 2, "untimed forwards first")]

_TYPES = {"frames": int, "steps": int, "sigma": float}


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(key: str, default, value):
    if value is None or not isinstance(value, str):
        return value
    if value.strip().lower() in ("none", ""):
        return None
    typ = _TYPES.get(key) or (type(default) if default is not None else str)
    try:
        if typ is bool:
            return _parse_bool(value)
        return typ(value)
    except ValueError:
        raise CliError(f"setting {key}: cannot read {value!r} as {typ.__name__}") from None


def _add_keys(parser: argparse.ArgumentParser, keys):
    for key, default, help_text in keys:
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            parser.add_argument(flag, dest=key, default=None, type=_parse_bool, metavar="BOOL",
                                help=f"{help_text} (default {default})")
        else:
            typ = _TYPES.get(key) or (type(default) if default is not None else str)
            parser.add_argument(flag, dest=key, default=None, type=typ,
                                help=f"{help_text} (default {default})")


def read_config_file(path) -> Dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_settings(args, keys) -> Dict[str, object]:
    """defaults < --config file < flags."""
    table = {k: d for k, d, _ in keys}
    settings = dict(table)
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k not in table:
                raise CliError(f"{args.config}: unknown setting {k!r} for this command")
            settings[k] = _coerce(k, table[k], v)
    for k in table:
        v = getattr(args, k, None)
        if v is not None:
            settings[k] = v
    return settings


def write_effective_config(out: Path, command: str, settings: Dict[str, object], extra=()) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}", f"version={__version__}"]
    lines += [f"{k}={v}" for k, v in extra]
    lines += [f"{k}={settings[k]}" for k in sorted(settings)]
    path = out / "effective_config.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _model_config(settings, seed: int) -> ModelConfig:
    values = {k: settings[k] for k, _, _ in _MODEL_KEYS}
    return ModelConfig(seed=seed, **values).validate()


def _train_config(settings, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        lr=settings["lr"],
        beta1=settings["beta1"],
        beta2=settings["beta2"],
        eps=settings["eps"],
        seed=seed,
        steps=settings["steps"],
        drop_empty_gaze=bool(settings["drop_empty_gaze"]),
        freeze_mask=settings["freeze_mask"],
    ).validate()


def _render_params(settings) -> RenderParams:
    if settings["interp"] not in ("bilinear", "bicubic"):
        raise CliError(f"--interp must be bilinear or bicubic, got {settings['interp']!r}")
    return RenderParams(
        sigma=settings["sigma"],
        kind=settings["interp"],
        normalize=bool(settings["normalize"]),
        threshold=settings["threshold"],
        auc_variant=settings["auc_variant"],
    )


def _load_manifest(path) -> DatasetManifest:
    if not Path(path).is_file():
        raise CliError(f"manifest {path} does not exist")
    return load_manifest(path)


def _load_model(path) -> CueingModel:
    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _map_name(image_path: str) -> str:
    return str(Path(image_path).with_suffix(".png").as_posix())


def _write_history(path: Path, history: Sequence[float]) -> None:
    path.write_text("".join(f"{i + 1} {v!r}\n" for i, v in enumerate(history)), encoding="utf-8")


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    s = resolve_settings(args, _SYNTH_KEYS)
    spec = SynthSpec(
        n_frames=s["frames"],
        width=s["width"],
        height=s["height"],
        objects_per_frame=(s["objects_min"], s["objects_max"]),
        distractor_blob_prob=s["distractor_prob"],
        seed=args.seed,
        align=s["align"],
        block=s["block"],
        blob_scale=s["blob_scale"],
        focus_prob=s["focus_prob"],
    )
    out = Path(args.out)
    manifest = synth_dataset(spec, out)
    write_effective_config(out, "synth", s, [("seed", args.seed)])
    print(f"wrote {len(manifest)} frames to {out / 'manifest.txt'}")
    return 0


def cmd_cleanse(args) -> int:
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    cleansed, report = cleanse_dataset(manifest, out, drop_empty_gaze=args.drop_empty_gaze, threads=args.threads)
    write_effective_config(out, "cleanse", {"drop_empty_gaze": args.drop_empty_gaze, "threads": args.threads},
                           [("manifest", args.manifest)])
    print(f"cleansed {report.n_frames} frames ({report.n_empty_gaze} with empty gaze, "
          f"{report.n_dropped} dropped) into {out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    s = resolve_settings(args, _MODEL_KEYS + _TRAIN_KEYS)
    cfg = _model_config(s, args.seed)
    tcfg = _train_config(s, args.seed)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    write_effective_config(out, "train", s, [("seed", args.seed), ("manifest", args.manifest)])
    model = CueingModel.init(cfg, seed=args.seed)
    t0 = time.perf_counter()
    model, history = train(model, manifest, tcfg)
    save_checkpoint(model, out / "model.ckpt")
    _write_history(out / "loss_history.txt", history)
    print(f"trained {len(history)} epochs in {time.perf_counter() - t0:.1f}s, "
          f"final loss {history[-1]:.6f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    s = resolve_settings(args, _TRAIN_KEYS + _FINETUNE_KEYS)
    tcfg = _train_config(s, args.seed)
    model = _load_model(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    subset = sample_finetune_subset(manifest, s["fraction"], args.seed)
    out = Path(args.out)
    write_effective_config(out, "finetune", s, [("seed", args.seed), ("manifest", args.manifest),
                                                ("checkpoint", args.checkpoint)])
    # the subset keeps paths relative to the source manifest's directory
    write_manifest(subset, out / "finetune_subset.txt")
    model, history = train(model, subset, tcfg)
    save_checkpoint(model, out / "model.ckpt")
    _write_history(out / "loss_history.txt", history)
    print(f"fine-tuned on {len(subset)} of {len(manifest)} frames, final loss {history[-1]:.6f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    s = resolve_settings(args, _RENDER_KEYS)
    params = _render_params(s)
    model = _load_model(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    write_effective_config(out, "eval", s, [("checkpoint", args.checkpoint), ("manifest", args.manifest)])
    report = evaluate(model, manifest, params, threads=args.threads)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "frames.jsonl").write_text(report.frames_jsonl(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_predict(args) -> int:
    s = resolve_settings(args, _RENDER_KEYS)
    params = _render_params(s)
    model = _load_model(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    write_effective_config(out, "predict", s, [("checkpoint", args.checkpoint), ("manifest", args.manifest)])
    cfg = model.config

    def one(entry):
        frame = load_frame(entry, cfg.width, cfg.height, root=manifest.root)
        gaze = predict_map(model, frame.image.astype(model.dtype), params)
        save_gaze_map(np.clip(gaze, 0.0, 1.0), out / "maps" / _map_name(entry.image_path))

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(one, manifest.entries))
    else:
        for entry in manifest.entries:
            one(entry)
    print(f"wrote {len(manifest)} gaze maps to {out / 'maps'}")
    return 0


def cmd_render(args) -> int:
    manifest = _load_manifest(args.manifest)
    maps = Path(args.maps)
    if not maps.is_dir():
        raise CliError(f"map directory {maps} does not exist (run 'cueing predict' first)")
    if not 0.0 <= args.alpha <= 1.0:
        raise CliError(f"--alpha must lie in [0, 1], got {args.alpha}")
    out = Path(args.out)
    write_effective_config(out, "render", {"alpha": args.alpha}, [("manifest", args.manifest), ("maps", args.maps)])
    n = 0
    for entry in manifest.entries:
        map_path = maps / _map_name(entry.image_path)
        if not map_path.is_file():
            raise CliError(f"no predicted map {map_path} for {entry.image_path}")
        gaze = read_gaze(map_path)
        frame = load_frame(entry, gaze.shape[1], gaze.shape[0], root=manifest.root)
        save_image(overlay(frame.image, gaze, args.alpha), out / "overlays" / _map_name(entry.image_path))
        n += 1
    if args.colormap_doc:
        write_colormap_doc(out / "colormap.md")
    print(f"wrote {n} overlays to {out / 'overlays'}")
    return 0


def complexity_text(cfg: ModelConfig) -> str:
    model = CueingModel.init(cfg, seed=0)
    flops = count_flops(cfg)
    lines = [
        f"params={model.count_params()}",
        f"params_analytic={analytic_param_count(cfg)}",
        f"input={cfg.width}x{cfg.height}",
        f"tokens={cfg.tokens}",
    ]
    lines += [f"gmac.{name}={macs / 1e9:.6f}" for name, macs in flops.stages.items()]
    lines.append(f"gmac.total={flops.gmac:.6f}")
    return "\n".join(lines) + "\n"


def cmd_complexity(args) -> int:
    s = resolve_settings(args, _MODEL_KEYS)
    cfg = _model_config(s, 0)
    text = complexity_text(cfg)
    if args.out:
        out = Path(args.out)
        write_effective_config(out, "complexity", s)
        (out / "complexity.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    t0 = time.perf_counter()
    results = run_suite(seeds=args.seeds, model_seeds=args.model_seeds, start=args.seed)
    lines = []
    failed = 0
    for name, rep in results:
        status = "ok" if rep.passed else "FAIL"
        failed += not rep.passed
        lines.append(f"{status} {name} max_rel_error={rep.max_rel_error:.3e} tol={rep.tol:g}")
    lines.append(f"{len(results) - failed}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        write_effective_config(out, "gradcheck", {"seeds": args.seeds, "model_seeds": args.model_seeds},
                               [("seed", args.seed)])
        (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 1 if failed else 0


def peak_rss_mib() -> Optional[float]:
    try:
        import resource
    except ImportError:
        return None
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # bytes on macOS, KiB elsewhere
    return kb / (1024.0 * 1024.0) if sys.platform == "darwin" else kb / 1024.0


def cmd_bench(args) -> int:
    s = resolve_settings(args, _BENCH_KEYS)
    if s["iters"] < 1 or s["warmup"] < 0:
        raise CliError("--iters must be >= 1 and --warmup >= 0")
    model = _load_model(args.checkpoint)
    cfg = model.config
    image = np.random.default_rng(args.seed).uniform(0.0, 1.0, (3, cfg.height, cfg.width)).astype(model.dtype)
    for _ in range(s["warmup"]):
        model.predict(image)
    times = []
    for _ in range(s["iters"]):
        t0 = time.perf_counter()
        model.predict(image)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    rss = peak_rss_mib()
    lines = [
        f"input={cfg.width}x{cfg.height}",
        f"iters={s['iters']}",
        f"mean_ms={ms.mean():.3f}",
        f"p50_ms={np.percentile(ms, 50):.3f}",
        f"p95_ms={np.percentile(ms, 95):.3f}",
        f"peak_rss_mib={'absent' if rss is None else f'{rss:.1f}'}",
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        write_effective_config(out, "bench", s, [("seed", args.seed), ("checkpoint", args.checkpoint)])
        (out / "bench.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cueing", description="Token-based driver gaze prediction pipeline.")
    p.add_argument("--version", action="version", version=f"cueing {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, func, help_text, out_required=True, seed=False, config=True, threads=False):
        c = sub.add_parser(name, help=help_text, description=help_text)
        c.set_defaults(func=func)
        c.add_argument("--out", required=out_required, help="output root directory")
        if seed:
            c.add_argument("--seed", type=int, required=True, help="random seed (required)")
        if config:
            c.add_argument("--config", help="key=value settings file; flags override it")
        if threads:
            c.add_argument("--threads", type=int, default=1, help="worker threads for per-frame work")
        return c

    c = command("synth", cmd_synth, "write a seeded synthetic dataset", seed=True)
    _add_keys(c, _SYNTH_KEYS)

    c = command("cleanse", cmd_cleanse, "mask images and gaze maps to their bounding boxes", config=False,
                threads=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--drop-empty-gaze", action="store_true", help="drop frames left with an all-zero gaze map")

    c = command("train", cmd_train, "train a model from scratch", seed=True)
    c.add_argument("--manifest", required=True)
    _add_keys(c, _MODEL_KEYS + _TRAIN_KEYS)

    c = command("finetune", cmd_finetune, "fine-tune a checkpoint on a random subset", seed=True)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--manifest", required=True)
    _add_keys(c, _TRAIN_KEYS + _FINETUNE_KEYS)

    for name, func, text in (("eval", cmd_eval, "score a checkpoint and write a metric report"),
                             ("predict", cmd_predict, "write one predicted gaze-map PNG per frame")):
        c = command(name, func, text, threads=True)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--manifest", required=True)
        _add_keys(c, _RENDER_KEYS)

    c = command("render", cmd_render, "overlay predicted gaze maps on their images", config=False)
    c.add_argument("--manifest", required=True)
    c.add_argument("--maps", required=True, help="directory written by 'predict' (its maps/ folder)")
    c.add_argument("--alpha", type=float, default=0.5, help="heat-map opacity (default 0.5)")
    c.add_argument("--colormap-doc", action="store_true", help="also write the colormap table")

    c = command("complexity", cmd_complexity, "print parameter count and per-stage GMACs", out_required=False)
    _add_keys(c, _MODEL_KEYS)

    c = command("gradcheck", cmd_gradcheck, "run the finite-difference gradient suite", out_required=False,
                seed=True, config=False)
    c.add_argument("--seeds", type=int, default=20, help="seeds per primitive (default 20)")
    c.add_argument("--model-seeds", type=int, default=1, help="full-model seeds (default 1)")

    c = command("bench", cmd_bench, "time single-image inference", out_required=False, seed=True)
    c.add_argument("--checkpoint", required=True)
    _add_keys(c, _BENCH_KEYS)
    return p


_EXPECTED = (CliError, ConfigError, CheckpointError, ManifestError, DimensionError, ValueError, OSError, KeyError)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        return int(args.func(args))
    except _EXPECTED as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"cueing: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
