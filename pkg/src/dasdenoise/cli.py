"""Command-line pipeline: synthesize -> noise -> train -> denoise / baseline -> snr, plot."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys

import numpy as np

from . import baselines, cpunet, metrics, noise, wavesim
from .cpunet import atomic_write
from .fileio import RunConfig, load_noise_pool, plot_heatmap, read_grid, write_grid
from .patching import PatchConfig

log = logging.getLogger("dasdenoise")

# flag name -> config key; every flag also has a --set form
FLAG_KEYS = {
    "seed": "run.seed",
    "epochs": "training.epochs",
    "batch_size": "training.batch_size",
    "alpha": "training.alpha",
    "lr": "training.lr",
    "train_overlap": "training.overlap",
    "model": "model.kind",
    "preset": "model.preset",
    "patch_size": "patching.size",
    "overlap": "patching.overlap",
    "target_snr": "noise.target_snr",
    "f0": "simulation.f0",
    "nt": "simulation.nt",
    "recording": "simulation.recording",
    "f_lo": "baselines.f_lo",
    "f_hi": "baselines.f_hi",
}


def _common(p: argparse.ArgumentParser, *flags):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key")
    for flag in flags:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None,
                       help=f"overrides {FLAG_KEYS[flag]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dasdenoise", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="elastic forward modelling of a clean shot gather")
    p.add_argument("--model-spec", help="layered model file (default: built-in benchmark model)")
    p.add_argument("--out", required=True)
    _common(p, "seed", "f0", "nt", "recording")

    p = sub.add_parser("noise", help="corrupt a clean gather to a target S/N")
    p.add_argument("clean")
    p.add_argument("--out", required=True)
    p.add_argument("--noise-pool", help="directory of external .dgrid noise records")
    _common(p, "seed", "target_snr")

    p = sub.add_parser("train", help="unsupervised training on a noisy record")
    p.add_argument("noisy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--history", help="per-epoch loss CSV")
    _common(p, "seed", "epochs", "batch_size", "alpha", "lr", "train_overlap", "model", "preset", "patch_size")

    p = sub.add_parser("denoise", help="apply a trained checkpoint to a record")
    p.add_argument("checkpoint")
    p.add_argument("noisy")
    p.add_argument("--out", required=True)
    _common(p, "overlap", "patch_size")

    p = sub.add_parser("baseline", help="classical / ablation denoisers")
    p.add_argument("method", choices=["bandpass", "median", "autoencoder"])
    p.add_argument("noisy")
    p.add_argument("--out", required=True)
    _common(p, "seed", "f_lo", "f_hi", "epochs", "alpha", "overlap", "train_overlap")

    p = sub.add_parser("snr", help="S/N of an estimate against a clean reference")
    p.add_argument("clean")
    p.add_argument("estimate")
    p.add_argument("--convention", choices=[metrics.STANDARD, metrics.LITERAL], default=metrics.STANDARD)

    p = sub.add_parser("plot", help="grayscale PGM preview of a grid")
    p.add_argument("grid")
    p.add_argument("--out", required=True)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return RunConfig(getattr(args, "config", None), overrides)


def _net_config(cfg: RunConfig, patch: int) -> cpunet.CPUNetConfig:
    tr, md = cfg["training"], cfg["model"]
    kw = dict(
        input_dim=patch * patch, dropout=md["dropout"], slope=md["slope"],
        epochs=tr["epochs"], batch_size=tr["batch_size"], alpha=tr["alpha"], lr=tr["lr"],
        seed=cfg["run"]["seed"],
    )
    if md["preset"] == "field":
        return cpunet.CPUNetConfig.field_preset(**kw)
    if md["preset"] != "synthetic":
        raise ValueError(f"unknown model preset {md['preset']!r}")
    return cpunet.CPUNetConfig(**kw)


def cmd_synthesize(args, cfg):
    sim = cfg["simulation"]
    if args.model_spec:
        layers, grid = wavesim.load_model_spec(args.model_spec)
    else:
        layers, grid = wavesim.benchmark_layers(), {}
    nx, nz, dx = grid.get("nx", sim["nx"]), grid.get("nz", sim["nz"]), grid.get("dx", sim["dx"])
    model = wavesim.build_layered_model(layers, nx, nz, dx)
    source = wavesim.SourceConfig(f0=sim["f0"], x=min(sim["source_x"], nx - 1), z=sim["source_z"])
    sc = wavesim.SimConfig(dt_out=sim["dt"], nt_out=sim["nt"], recording=sim["recording"])
    gather = wavesim.simulate_shot(model, source, sc)
    write_grid(args.out, gather.data, "float64")


def cmd_noise(args, cfg):
    clean = read_grid(args.clean).astype(np.float64)
    nc = cfg["noise"]
    pool = load_noise_pool(args.noise_pool) if args.noise_pool else []
    mix = noise.NoiseMix(nc["synthetic_fraction"], 1.0 - nc["synthetic_fraction"], pool)
    ecfg = noise.ErraticConfig(trace_prob=nc["trace_prob"], scale=nc["erratic_scale"])
    noisy, _ = noise.corrupt(clean, nc["target_snr"], cfg["run"]["seed"], mix, nc["corner"] or None, ecfg)
    write_grid(args.out, noisy, "float64")


def cmd_train(args, cfg):
    noisy = read_grid(args.noisy).astype(np.float64)
    size = cfg["patching"]["size"]
    ncfg = _net_config(cfg, size)
    kind = cfg["model"]["kind"]
    if kind == "cpunet":
        net = cpunet.CPUNet(ncfg)
    elif kind == "plain":
        net = baselines.PlainAutoencoder(ncfg)
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    def progress(epoch, loss):
        log.info("epoch %d loss %.6g", epoch, loss)

    _, history = cpunet.fit_record(net, noisy, PatchConfig(size, cfg["training"]["overlap"]), progress=progress)
    cpunet.save_checkpoint(net, args.checkpoint)
    if args.history:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history, 1):
            w.writerow([i, repr(loss)])
        atomic_write(args.history, buf.getvalue().encode())


def cmd_denoise(args, cfg):
    net = cpunet.load_checkpoint(args.checkpoint)
    noisy = read_grid(args.noisy).astype(np.float64)
    pc = cfg["patching"]
    size = int(round(math.sqrt(net.config.input_dim)))
    if size != pc["size"] and args.patch_size is not None:
        raise ValueError(f"checkpoint expects {size}x{size} patches")
    out = cpunet.denoise_record(net, noisy, PatchConfig(size, pc["overlap"]))
    write_grid(args.out, out, "float64")


def cmd_baseline(args, cfg):
    noisy = read_grid(args.noisy).astype(np.float64)
    bc = cfg["baselines"]
    if args.method == "bandpass":
        out = baselines.bandpass(noisy, baselines.BandpassConfig(bc["f_lo"], bc["f_hi"], bc["taper"],
                                                                 1.0 / cfg["simulation"]["dt"]))
    elif args.method == "median":
        out = baselines.median_filter(noisy, baselines.MedianConfig((bc["median_time"], bc["median_channels"])))
    else:
        size = cfg["patching"]["size"]
        out, _ = baselines.plain_autoencoder_denoise(
            noisy, _net_config(cfg, size), PatchConfig(size, cfg["patching"]["overlap"]),
            PatchConfig(size, cfg["training"]["overlap"]),
        )
    write_grid(args.out, out, "float64")


def cmd_snr(args, cfg):
    value = metrics.snr_db(read_grid(args.clean), read_grid(args.estimate), args.convention)
    text = "inf" if math.isinf(value) else f"{value:.6f}"
    print(f"S/N = {text} dB")
    print(f"snr_db={text}")


def cmd_plot(args, cfg):
    plot_heatmap(read_grid(args.grid), args.out)


COMMANDS = {
    "synthesize": cmd_synthesize,
    "noise": cmd_noise,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "baseline": cmd_baseline,
    "snr": cmd_snr,
    "plot": cmd_plot,
}


def _limit_threads():
    n = os.environ.get("DASDENOISE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    _limit_threads()
    try:
        cfg = _run_config(args) if args.command not in ("snr", "plot") else None
        COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"dasdenoise {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
