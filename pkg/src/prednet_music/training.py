"""Corpus manifests, the training loop and experiment configuration."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .dsp import FRAME_COLS, DspConfig, FrameSequence, extract_frames, load_spectrogram
from .errors import DataError, DivergenceError, UsageError
from .model import CHANNEL_PRESETS, LAYER_LOSS_PRESETS, Adam, ModelConfig, PredNetModel, forward_sequence

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CORPUS_SUFFIXES = (".wav", ".mels")


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    split: str
    label: str


@dataclass
class Manifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be unique")
        bad = [e.split for e in self.entries if e.split not in SPLITS]
        if bad:
            raise DataError(f"unknown split {bad[0]!r}")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def build_manifest(corpus_dir, val_fraction: float = 0.1, seed: int = 0) -> Manifest:
    """Deterministic shuffled train/val split of every WAV or MELS file under ``corpus_dir``."""
    corpus_dir = Path(corpus_dir)
    if not 0.0 <= val_fraction < 1.0:
        raise UsageError("val_fraction must lie in [0, 1)")
    files = sorted(p for p in corpus_dir.rglob("*") if p.suffix.lower() in CORPUS_SUFFIXES and p.is_file())
    if not files:
        raise DataError(f"no WAV or MELS files under {corpus_dir}")
    order = np.random.default_rng(seed).permutation(len(files))
    n_val = int(round(val_fraction * len(files)))
    if n_val == 0:
        log.warning("val_fraction %.3g leaves no validation clips; all %d clips are train", val_fraction, len(files))
    val = set(order[:n_val].tolist())
    entries = []
    for i, p in enumerate(files):
        rel = p.relative_to(corpus_dir)
        label = rel.parts[0] if len(rel.parts) > 1 else corpus_dir.name
        entries.append(ManifestEntry(rel.as_posix(), "val" if i in val else "train", label))
    return Manifest(entries, corpus_dir)


def write_manifest(path, manifest: Manifest) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "split", "label"])
        for e in manifest.entries:
            w.writerow([e.path, e.split, e.label])
    tmp.replace(path)


def read_manifest(path) -> Manifest:
    """Relative paths resolve against the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "split", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: manifest needs columns path,split,label")
        entries = [ManifestEntry(r["path"], r["split"], r["label"]) for r in reader]
    return Manifest(entries, path.parent)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    frame_hop: int = 4
    sequence_length: int = 10
    batch_size: int = 4
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    layer_loss_preset: str = "prediction"
    channel_preset: str = "stock"
    early_stop_patience: int = 5
    frame_columns: int = FRAME_COLS
    sequences_per_clip: int = 0  # 0 = every non-overlapping sequence in the clip

    def __post_init__(self):
        if self.sequence_length < 2:
            raise UsageError("sequence_length must be >= 2")
        for name in ("frame_hop", "batch_size", "early_stop_patience", "frame_columns"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")
        if self.epochs < 0 or self.sequences_per_clip < 0:
            raise UsageError("epochs and sequences_per_clip must be non-negative")
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if self.layer_loss_preset not in LAYER_LOSS_PRESETS:
            raise UsageError(f"unknown layer_loss_preset {self.layer_loss_preset!r}")
        if self.channel_preset not in CHANNEL_PRESETS:
            raise UsageError(f"unknown channel_preset {self.channel_preset!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            a_channels=CHANNEL_PRESETS[self.channel_preset],
            layer_loss_weights=LAYER_LOSS_PRESETS[self.layer_loss_preset],
            frame_cols=self.frame_columns,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_text(text: str, cls=TrainConfig, source: str = "config"):
    """Flat ``key = value`` lines with ``#`` comments; unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = coerce(value, fields[key], source)
    return values


def coerce(value: str, f: dataclasses.Field, source: str = "config"):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("1", "true", "yes")
        return value
    except ValueError as exc:
        raise UsageError(f"{source}: bad value {value!r} for {f.name}") from exc


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    return TrainConfig(**parse_config_text(path.read_text(), TrainConfig, str(path)))


def format_config(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# --------------------------------------------------------------------------
# data


def load_frames(manifest: Manifest, split: str, hop: int, dsp_cfg: DspConfig = DspConfig(), width: int = FRAME_COLS) -> list:
    out = []
    for e in manifest.split(split):
        spec = load_spectrogram(manifest.resolve(e), dsp_cfg)
        if spec.n_columns < width:
            log.warning("skipping %s: %d columns is narrower than one frame", e.path, spec.n_columns)
            continue
        out.append(extract_frames(spec, hop, width))
    return out


def sequence_starts(clips: list, length: int, rng: np.random.Generator | None = None, per_clip: int = 0) -> list:
    """(clip index, first frame) pairs of non-overlapping sequences.

    With ``per_clip > 0`` at most that many starts are drawn per clip using ``rng``.
    """
    out = []
    for i, fs in enumerate(clips):
        starts = list(range(0, len(fs) - length + 1, length))
        if not starts:
            log.warning("skipping %s: %d frames is shorter than one sequence", fs.clip_id, len(fs))
            continue
        if per_clip and len(starts) > per_clip:
            if rng is None:
                starts = starts[:per_clip]
            else:
                starts = sorted(rng.choice(starts, size=per_clip, replace=False).tolist())
        out.extend((i, s) for s in starts)
    return out


def _gather(clips, picks, length) -> np.ndarray:
    return np.stack([clips[i].frames[s : s + length] for i, s in picks])


def mean_loss(model: PredNetModel, clips, picks, length: int, batch_size: int) -> float:
    """Mean per-sequence loss without recording gradients."""
    if not picks:
        return float("nan")
    total = 0.0
    for b in range(0, len(picks), batch_size):
        chunk = picks[b : b + batch_size]
        out = forward_sequence(model, _gather(clips, chunk, length), keep_predictions=False)
        total += out.loss.item() * len(chunk)
    return total / len(picks)


def mean_pixel_mse(model: PredNetModel, frame_batches) -> float:
    """Mean pixel MSE over every scored step of the given sequences."""
    vals = [forward_sequence(model, f, keep_predictions=False).mse for f in frame_batches]
    return float(np.mean(np.concatenate([v.ravel() for v in vals])))


def copy_last_frame_mse(frame_batches) -> float:
    """Baseline that predicts frame t-1 for frame t."""
    vals = []
    for f in frame_batches:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim == 3:
            f = f[None]
        vals.append(((f[:, 1:] - f[:, :-1]) ** 2).mean(axis=(2, 3)).ravel())
    return float(np.mean(np.concatenate(vals)))


# --------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best-validation state
    log: list
    final: Checkpoint  # state after the last epoch


def train(
    manifest: Manifest,
    cfg: TrainConfig = TrainConfig(),
    dsp_cfg: DspConfig = DspConfig(),
    on_epoch=None,
) -> TrainResult:
    """Next-frame training with a held-out validation split and early stopping."""
    model = PredNetModel(cfg.model_config(), seed=cfg.seed)
    opt = Adam(lr=cfg.learning_rate)
    ckpt = Checkpoint(model, opt, cfg.to_dict())
    if cfg.epochs == 0:
        return TrainResult(ckpt, [], ckpt)

    width = cfg.frame_columns
    train_clips = load_frames(manifest, "train", cfg.frame_hop, dsp_cfg, width)
    val_clips = load_frames(manifest, "val", cfg.frame_hop, dsp_cfg, width)
    if not train_clips:
        raise DataError("manifest has no usable train clips")
    L = cfg.sequence_length
    val_picks = sequence_starts(val_clips, L, np.random.default_rng([cfg.seed, 1]), cfg.sequences_per_clip)

    history = []
    best = (math.inf, None)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, 0, epoch])
        picks = sequence_starts(train_clips, L, rng, cfg.sequences_per_clip)
        if not picks:
            raise DataError("no train clip is long enough for one sequence")
        picks = [picks[i] for i in rng.permutation(len(picks))]
        total = 0.0
        for b in range(0, len(picks), cfg.batch_size):
            chunk = picks[b : b + cfg.batch_size]
            model.zero_grad()
            out = forward_sequence(model, _gather(train_clips, chunk, L), train=True)
            loss = out.loss.item()
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            out.loss.backward()
            for name, p in model.params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"non-finite gradient for {name} at epoch {epoch}")
            opt.step(model.params)
            total += loss * len(chunk)
        train_loss = total / len(picks)
        val_loss = mean_loss(model, val_clips, val_picks, L, cfg.batch_size)
        if val_picks and not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        entry = EpochLog(epoch, train_loss, val_loss, time.perf_counter() - t0)
        history.append(entry)
        log.info("epoch %d train %.6f val %.6f (%.1fs)", epoch, train_loss, val_loss, entry.wall_seconds)
        if on_epoch is not None:
            on_epoch(entry)
        score = val_loss if val_picks else train_loss
        if score < best[0]:
            best = (score, _snapshot(model, opt, cfg))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop after epoch %d", epoch)
                break
    return TrainResult(best[1], history, _snapshot(model, opt, cfg))


def _snapshot(model: PredNetModel, opt: Adam, cfg: TrainConfig) -> Checkpoint:
    clone = PredNetModel.__new__(PredNetModel)
    clone.config, clone.dtype = model.config, model.dtype
    clone.params = {}
    for name, p in model.params.items():
        clone._add(name, p.data.copy())
    return Checkpoint(clone, copy.deepcopy(opt), cfg.to_dict())


def write_loss_log(path, history: list) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
        for e in history:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), f"{e.wall_seconds:.3f}"])
    tmp.replace(path)
