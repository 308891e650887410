"""Command-line entry point: ``prednet-music <command> ...``.

Configuration is resolved in this order, later sources winning: built-in
defaults, ``--config FILE`` (``key = value`` lines), environment variables
``PREDNET_MUSIC_<KEY>``, ``--set key=value``, then dedicated flags such as
``--seed`` and ``--workers``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis, dsp, stimuli, svg, training
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, PredNetMusicError, UsageError

log = logging.getLogger("prednet_music")

ENV_PREFIX = "PREDNET_MUSIC_"

_EXTRA_FIELDS = [
    ("val_fraction", "float", 0.1, "share of corpus clips held out for validation"),
    ("n_stimuli", "int", 50, "number of generated pitch sequences"),
    ("key", "str", "C:major", "key of generated stimuli, e.g. C:major or A:minor"),
    ("pitch_low", "int", stimuli.DEFAULT_RANGE[0], "lowest MIDI pitch of generated stimuli"),
    ("pitch_high", "int", stimuli.DEFAULT_RANGE[1], "highest MIDI pitch of generated stimuli"),
    ("note_duration", "float", stimuli.DEFAULT_NOTE_DURATION, "seconds per stimulus note"),
    ("group_size", "int", 10, "stimuli in each of the musical and non-musical groups"),
    ("context_x", "int", analysis.CONTEXT_X, "time lapse (columns) used by the context analysis"),
    ("eval_batch_size", "int", 10, "stimuli per evaluation batch"),
    ("workers", "int", 1, "process pool size; 1 is the deterministic path"),
]

_KEY_HELP = {
    "fft_size": "STFT window length in samples",
    "hop": "STFT hop in samples",
    "n_mels": "mel bands",
    "f_min": "lowest mel filter edge (Hz)",
    "f_max": "highest mel filter edge (Hz); must be Nyquist",
    "floor_db": "dB floor relative to the clip maximum",
    "sample_rate": "expected audio sample rate (Hz)",
    "frame_hop": "training frame hop in spectrogram columns",
    "sequence_length": "frames per training sequence",
    "batch_size": "sequences per optimizer step",
    "epochs": "training epochs (0 writes the initialized model)",
    "learning_rate": "Adam step size",
    "seed": "master seed for initialization, splits, shuffling and stimuli",
    "layer_loss_preset": "prediction or all",
    "channel_preset": "stock or desk",
    "early_stop_patience": "epochs without validation improvement before stopping",
    "frame_columns": "frame width in columns",
    "sequences_per_clip": "training sequences drawn per clip and epoch (0 = all)",
    **{name: text for name, _, _, text in _EXTRA_FIELDS},
}


def _run_fields():
    out = []
    for cls in (dsp.DspConfig, training.TrainConfig):
        for f in dataclasses.fields(cls):
            out.append((f.name, f.type, dataclasses.field(default=f.default)))
    out += [(name, kind, dataclasses.field(default=default)) for name, kind, default, _ in _EXTRA_FIELDS]
    return out


RunConfig = dataclasses.make_dataclass("RunConfig", _run_fields(), frozen=True)


def _subset(cfg, cls):
    return cls(**{f.name: getattr(cfg, f.name) for f in dataclasses.fields(cls)})


def dsp_config(cfg) -> dsp.DspConfig:
    return _subset(cfg, dsp.DspConfig)


def train_config(cfg) -> training.TrainConfig:
    return _subset(cfg, training.TrainConfig)


def resolve_config(config_path=None, overrides=(), env=None, **flags):
    """RunConfig from defaults, file, environment, ``key=value`` overrides and flags."""
    env = os.environ if env is None else env
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(training.parse_config_text(text, RunConfig, str(path)))
    for name, f in fields.items():
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            values[name] = training.coerce(raw, f, ENV_PREFIX + name.upper())
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = (s.strip() for s in item.split("=", 1))
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        values[key] = training.coerce(raw, fields[key], "--set")
    values.update({k: v for k, v in flags.items() if v is not None})
    cfg = RunConfig(**values)
    # validate the component configs eagerly
    dsp_config(cfg)
    train_config(cfg)
    if cfg.workers < 1:
        raise UsageError("workers must be >= 1")
    return cfg


def write_resolved(out_dir: Path, command: str, cfg) -> Path:
    path = Path(out_dir) / f"{command}.config.txt"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(training.format_config(cfg))
    tmp.replace(path)
    return path


# --------------------------------------------------------------------------
# commands


def _mels_job(args):
    src, dst, cfg = args
    spec = dsp.mel_spectrogram(dsp.load_audio(src), cfg, clip_id=src.stem)
    dsp.save_mels(dst, spec)
    return dst


def cmd_prepare(args, cfg):
    corpus, out = Path(args.corpus_dir), Path(args.out)
    if not corpus.is_dir():
        raise DataError(f"corpus directory {corpus} does not exist")
    wavs = sorted(p for p in corpus.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
    if not wavs:
        raise DataError(f"no WAV files under {corpus}")
    dcfg = dsp_config(cfg)
    jobs = []
    for p in wavs:
        dst = out / p.relative_to(corpus).with_suffix(".mels")
        dst.parent.mkdir(parents=True, exist_ok=True)
        jobs.append((p, dst, dcfg))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            list(pool.map(_mels_job, jobs))
    else:
        for job in jobs:
            _mels_job(job)
    manifest = training.build_manifest(out, cfg.val_fraction, cfg.seed)
    training.write_manifest(out / "manifest.csv", manifest)
    write_resolved(out, "prepare", cfg)
    print(f"cached {len(jobs)} spectrograms; manifest {out / 'manifest.csv'}")


def cmd_gen_stimuli(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sset = stimuli.generate_set(
        cfg.n_stimuli, cfg.key, (cfg.pitch_low, cfg.pitch_high), cfg.seed, cfg.note_duration
    )
    for seq in sset.sequences:
        dsp.write_wav(out / f"{seq.id}.wav", stimuli.synthesize(seq))
    stimuli.write_manifest(out / "manifest.csv", sset)
    write_resolved(out, "gen-stimuli", cfg)
    print(f"wrote {len(sset.sequences)} stimuli to {out}")


def cmd_train(args, cfg):
    manifest = training.read_manifest(args.manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tcfg = train_config(cfg)

    def report(entry):
        print(f"epoch {entry.epoch} train {entry.train_loss:.6f} val {entry.val_loss:.6f}", flush=True)

    result = training.train(manifest, tcfg, dsp_config(cfg), on_epoch=report)
    save_checkpoint(out, result.checkpoint)
    loss_log = Path(args.loss_log) if args.loss_log else out.with_name(out.stem + ".loss.csv")
    training.write_loss_log(loss_log, result.log)
    write_resolved(out.parent, out.stem + ".train", cfg)
    print(f"checkpoint {out}")


def _load_stimulus_dir(stim_dir: Path, dcfg):
    stim_dir = Path(stim_dir)
    manifest = stim_dir / "manifest.csv"
    if not manifest.is_file():
        raise DataError(f"{manifest} not found")
    sset = stimuli.read_manifest(manifest)
    specs = {}
    for sid in sset.ids():
        for suffix in (".mels", ".wav"):
            p = stim_dir / f"{sid}{suffix}"
            if p.is_file():
                specs[sid] = dsp.load_spectrogram(p, dcfg)
                break
        else:
            raise DataError(f"no audio for stimulus {sid!r} in {stim_dir}")
    return sset, specs


def _run_analysis(args, cfg, which):
    ckpt = load_checkpoint(args.checkpoint)
    dcfg = dsp_config(cfg)
    sset, specs = _load_stimulus_dir(args.stimulus_dir, dcfg)
    if args.ratings:
        sset = stimuli.load_ratings(args.ratings, sset)
    rank = stimuli.ranking(sset)
    res = analysis.analyze(
        ckpt.model,
        sset,
        specs,
        rank,
        which,
        dcfg,
        group_size=cfg.group_size,
        context_x=cfg.context_x,
        workers=cfg.workers,
        batch_size=cfg.eval_batch_size,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return res, out


def cmd_evaluate(args, cfg):
    res, out = _run_analysis(args, cfg, "musicality")
    analysis.write_csv(
        out / "per_sequence.csv",
        ["stimulus_id", "total_mse", "rank"],
        [(sid, res.totals[sid], res.rank.get(sid, "")) for sid in res.totals],
    )
    write_resolved(out, "evaluate", cfg)
    _, _, reg = res.regressions[0]
    print(f"musicality slope {reg.slope:.6g} p {reg.p_value:.3g} n {reg.n}")


def cmd_analyze(args, cfg):
    res, out = _run_analysis(args, cfg, args.which)
    written = analysis.write_results(out, res, args.which, cfg.group_size)
    write_resolved(out, "analyze", cfg)
    for name, x, reg in res.regressions:
        print(f"{name} {x} slope {reg.slope:.6g} p {reg.p_value:.3g} n {reg.n}")
    print("wrote " + ", ".join(p.name for p in written))


def cmd_plot(args, cfg):
    path = svg.plot_csv(args.csv, args.out, args.x, args.y, args.group, args.kind, args.title or "")
    print(f"plot {path}")


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def config_keys_help() -> str:
    lines = [f"config keys (env override: {ENV_PREFIX}<KEY>):"]
    for f in dataclasses.fields(RunConfig):
        lines.append(f"  {f.name + ' = ' + str(f.default):<34} {_KEY_HELP.get(f.name, '')}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="process pool size (1 = deterministic)")
    common.add_argument("--log-level", default="WARNING")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="prednet-music", description=__doc__, epilog=config_keys_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, epilog=config_keys_help(), formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("prepare", cmd_prepare, "cache mel spectrograms of a WAV corpus and write a manifest")
    p.add_argument("corpus_dir")
    p.add_argument("--out", required=True, help="directory for .mels files and manifest.csv")

    p = add("gen-stimuli", cmd_gen_stimuli, "synthesize random in-key pitch sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, dest="n_stimuli")
    p.add_argument("--key")

    p = add("train", cmd_train, "train a model on a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="per-epoch loss CSV (default: next to the checkpoint)")

    for name, func, text in (
        ("evaluate", cmd_evaluate, "total prediction error per stimulus"),
        ("analyze", cmd_analyze, "time-lapse, interval and context analyses"),
    ):
        p = add(name, func, text)
        p.add_argument("checkpoint")
        p.add_argument("stimulus_dir")
        p.add_argument("--out", required=True, help="output directory for CSVs")
        p.add_argument("--ratings", help="stimulus_id,mean_rating,rank CSV; default ranking is the interval proxy")
        if name == "analyze":
            p.add_argument("--which", default="all", choices=["all", "timelapse", "interval", "context"])

    p = add("plot", cmd_plot, "SVG line or scatter plot of a CSV")
    p.add_argument("csv")
    p.add_argument("out")
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--group")
    p.add_argument("--kind", default="line", choices=["line", "scatter"])
    p.add_argument("--title")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        flags = {"seed": args.seed, "workers": args.workers}
        for name in ("n_stimuli", "key"):
            flags[name] = getattr(args, name, None)
        cfg = resolve_config(args.config, args.set, **flags)
        args.func(args, cfg)
    except PredNetMusicError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except FileNotFoundError as exc:
        print(f"data: {exc.filename}: not found", file=sys.stderr)
        return DataError.exit_status
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return DataError.exit_status
    return 0
