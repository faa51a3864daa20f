"""Command-line entry point: ``deskcache {train,sample,schedule,analyze,bench}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import adjacent_vs_distant, collect_features, frac_above, similarity_matrix, write_fraction_csv, write_matrix_csv
from .bench import BenchConfig, sweep, write_reports
from .caching import make_cache_schedule, run_sampler
from .config import ConfigError, RunConfig, load_config_file, resolve
from .diffusion import SamplerConfig, make_schedule, synthetic_images, train
from .plots import line_chart, similarity_heatmap
from .unet import ParameterSet, SpecError, init_params, load_checkpoint, save_checkpoint

log = logging.getLogger("deskcache")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SPEC_FIELDS = ("depth", "base_channels", "channel_mult", "image_size", "time_embed_dim", "in_channels")


# --------------------------------------------------------------------------- helpers


def write_manifest(path: Path, command: str, cfg: RunConfig, **extra) -> None:
    body = {"command": command, "version": __version__, "config": cfg.to_dict()}
    body.update(extra)
    path.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary greyscale PGM; [-1, 1] maps linearly onto [0, 255]."""
    h, w = image.shape
    pixels = np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def open_checkpoint(path: str | None, cfg: RunConfig, explicit: set[str]) -> ParameterSet:
    if not path:
        raise ConfigError("ckpt", "a checkpoint path is required")
    if not Path(path).is_file():
        raise ConfigError("ckpt", f"checkpoint not found: {path}")
    try:
        params = load_checkpoint(path)
    except (SpecError, ValueError, KeyError) as exc:
        raise ConfigError("ckpt", str(exc)) from None
    spec = params.spec
    for name in SPEC_FIELDS:
        if name in explicit and tuple(np.atleast_1d(getattr(cfg, name))) != tuple(np.atleast_1d(getattr(spec, name))):
            raise ConfigError(name, f"config says {getattr(cfg, name)}, checkpoint has {getattr(spec, name)}")
    if spec.num_timesteps != cfg.T:
        raise ConfigError("T", f"config uses T={cfg.T}, checkpoint was trained with {spec.num_timesteps}")
    return params


def _config_from(ns: argparse.Namespace, keys: tuple[str, ...]) -> tuple[RunConfig, set[str]]:
    file_values = load_config_file(ns.config) if ns.config else {}
    overrides = {k: getattr(ns, k, None) for k in keys}
    if getattr(ns, "zero_cache", False):
        overrides["zero_cache"] = True
    explicit = {k.replace("-", "_") for k in file_values} | {k for k, v in overrides.items() if v is not None}
    return resolve(file_values, overrides), explicit


# --------------------------------------------------------------------------- commands


def cmd_train(ns) -> int:
    cfg, _ = _config_from(ns, ("data_seed", "seed", "epochs", "lr", "optimizer", "data_count", "batch_size"))
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec = cfg.unet_spec()
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    data = synthetic_images(cfg.data_count, cfg.data_seed, cfg.image_size)
    params = init_params(spec, cfg.seed)
    params, history = train(params, sched, data, cfg.epochs, cfg.lr, cfg.seed,
                            batch_size=cfg.batch_size, optimizer=cfg.optimizer, momentum=cfg.momentum)
    save_checkpoint(params, out)
    loss_path = out.with_suffix(".loss.csv")
    with open(loss_path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v:.8f}\n")
    write_manifest(out.with_suffix(".manifest.json"), "train", cfg, checkpoint=out.name)
    log.info("wrote %s (%d parameters)", out, params.count())
    return 0


SAMPLE_KEYS = ("sampler", "steps", "cache_N", "cache_mode", "center", "power", "branch", "batch", "seed", "eta")


def cmd_sample(ns) -> int:
    cfg, explicit = _config_from(ns, SAMPLE_KEYS)
    params = open_checkpoint(ns.ckpt, cfg, explicit)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    sampler = SamplerConfig(cfg.sampler, cfg.steps, cfg.eta, cfg.seed, cfg.batch)
    cache = None
    if cfg.cache_N is not None:
        cache = make_cache_schedule(cfg.steps, cfg.cache_N, cfg.cache_mode, cfg.center, cfg.power, cfg.branch)
    run = run_sampler(params, sched, sampler, cache, cfg.zero_cache)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(run.samples):
        write_pgm(out / f"sample_{i:04d}.pgm", img[0])
    np.ascontiguousarray(run.samples, dtype="<f4").tofile(out / "samples.f32")
    (out / "trace.json").write_text(run.trace_json() + "\n")
    write_manifest(out / "manifest.json", "sample", cfg, checkpoint=str(ns.ckpt),
                   samples_shape=list(run.samples.shape),
                   cache_schedule=cache.to_dict() if cache is not None else None)
    log.info("wrote %d samples to %s (avg MACs/step %.0f)", len(run.samples), out, run.avg_macs)
    return 0


def cmd_schedule(ns) -> int:
    cfg, _ = _config_from(ns, ("steps", "cache_N", "cache_mode", "center", "power", "branch"))
    cache = make_cache_schedule(cfg.steps, cfg.cache_N or 1, cfg.cache_mode, cfg.center, cfg.power, cfg.branch)
    print(cache.to_json())
    return 0


def cmd_analyze(ns) -> int:
    cfg, explicit = _config_from(ns, ("sampler", "steps", "branch", "batch", "seed", "tau"))
    params = open_checkpoint(ns.ckpt, cfg, explicit)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    sampler = SamplerConfig(cfg.sampler, cfg.steps, cfg.eta, cfg.seed, cfg.batch)
    feats = collect_features(params, sched, sampler, cfg.branch)
    sim = similarity_matrix(feats)
    frac = frac_above(sim, cfg.tau)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(sim, out / "similarity.csv")
    write_fraction_csv(frac, out / "fraction.csv")
    similarity_heatmap(sim, out / "similarity.svg", f"u_{cfg.branch + 1} similarity across {cfg.steps} steps")
    adj, far = adjacent_vs_distant(sim)
    write_manifest(out / "manifest.json", "analyze", cfg, checkpoint=str(ns.ckpt),
                   adjacent_mean=adj, distant_mean=far)
    print(json.dumps({"adjacent_mean": adj, "distant_mean": far, "mean_fraction_above": float(frac.mean())}))
    return 0


def _parse_values(axis: str, text: str | None):
    defaults = {"N": "1,2,3,5,10", "branch": "1,2,3", "table6": "2,5,10", "cp": None}
    text = text or defaults[axis]
    if axis == "cp":
        return None if text is None else [tuple(float(x) for x in pair.split(":")) for pair in text.split(",")]
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError("values", f"cannot parse {text!r}") from None


def cmd_bench(ns) -> int:
    cfg, explicit = _config_from(ns, ("sampler", "steps", "branch", "seed", "samples", "cache_N", "cache_mode",
                                      "timing_batch", "trials", "warmup"))
    params = open_checkpoint(ns.ckpt, cfg, explicit)
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    bc = BenchConfig(cfg.sampler, cfg.steps, cfg.samples, cfg.seed, cfg.branch, cfg.cache_mode, cfg.center,
                     cfg.power, cfg.timing_batch, cfg.warmup, cfg.trials, cfg.reference_count, cfg.reference_seed,
                     measure=not ns.no_timing)
    values = _parse_values(ns.axis, ns.values)
    if ns.axis == "cp" and values is None:
        S = cfg.steps
        values = [(round(f * S), p) for f in (0.2, 0.4, 0.6) for p in (1.1, 1.3, 1.5)]
    reports = sweep(params, sched, ns.axis, values, bc, N=cfg.cache_N or 5)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "bench.csv", out / "bench.json")
    if ns.axis in ("N", "table6"):
        cached = [r for r in reports if r.mode != "plain"]
        series = {"DeepCache": [r.quality_fd for r in cached]}
        if ns.axis == "table6":
            series["plain, equal full passes"] = [r.quality_fd for r in reports if r.mode == "plain"]
        line_chart([r.N for r in cached], series, out / "quality_vs_N.svg", "caching interval N", "pixel FD")
    else:
        line_chart(list(range(len(reports))), {"DeepCache": [r.quality_fd for r in reports]},
                   out / "quality.svg", f"{ns.axis} grid point", "pixel FD")
    write_manifest(out / "manifest.json", "bench", cfg, checkpoint=str(ns.ckpt), axis=ns.axis,
                   values=[list(v) if isinstance(v, tuple) else v for v in values])
    for r in reports:
        print(json.dumps(r.row()))
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deskcache", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config or run manifest; flags override its values")

    def sampling(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--sampler", choices=("ddpm", "ddim"))
        p.add_argument("--steps", type=int)
        p.add_argument("--branch", type=int)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the denoiser on synthetic data")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--data-count", dest="data_count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate images, optionally with feature caching")
    common(p)
    sampling(p)
    p.add_argument("--cache-N", dest="cache_N", type=int)
    p.add_argument("--cache-mode", dest="cache_mode", choices=("uniform", "nonuniform"))
    p.add_argument("--center", type=float)
    p.add_argument("--power", type=float)
    p.add_argument("--zero-cache", dest="zero_cache", action="store_true")
    p.add_argument("--batch", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("schedule", help="print the full-inference step set as JSON")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--cache-N", dest="cache_N", type=int)
    p.add_argument("--cache-mode", dest="cache_mode", choices=("uniform", "nonuniform"))
    p.add_argument("--center", type=float)
    p.add_argument("--power", type=float)
    p.add_argument("--branch", type=int)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("analyze", help="step-to-step similarity of the cacheable feature")
    common(p)
    sampling(p)
    p.add_argument("--batch", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="throughput / MACs / quality sweeps")
    common(p)
    sampling(p)
    p.add_argument("--axis", choices=("N", "branch", "cp", "table6"), default="N")
    p.add_argument("--values", help="comma list; for cp use c:p pairs, e.g. 20:1.3,40:1.3")
    p.add_argument("--cache-N", dest="cache_N", type=int, help="interval for branch / cp sweeps")
    p.add_argument("--cache-mode", dest="cache_mode", choices=("uniform", "nonuniform"))
    p.add_argument("--samples", type=int)
    p.add_argument("--timing-batch", dest="timing_batch", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--no-timing", dest="no_timing", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
