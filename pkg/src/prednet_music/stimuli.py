"""Random in-key pitch sequences, additive synthesis and transition metadata."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioClip, DspConfig, mel_band_of_frequency
from .errors import DataError, UsageError

log = logging.getLogger(__name__)

NOTES_PER_SEQUENCE = 10
DEFAULT_NOTE_DURATION = 0.297
DEFAULT_RANGE = (60, 84)  # C4..C6 inclusive
DEFAULT_HARMONICS = (1.0, 0.5, 0.25)
FADE_SECONDS = 0.010
PEAK = 0.9

_PITCH_CLASSES = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}
_MODES = {
    "major": (0, 2, 4, 5, 7, 9, 11),
    "minor": (0, 2, 3, 5, 7, 8, 10),
}


def parse_key(key: str) -> tuple:
    """``"C:major"``, ``"F#:minor"`` or an explicit pitch-class list ``"0,2,4,5,7,9,11"``."""
    key = key.strip()
    if ":" in key:
        tonic, mode = key.split(":", 1)
        tonic = tonic.strip()
        if not tonic or tonic[0].upper() not in _PITCH_CLASSES or mode.strip() not in _MODES:
            raise UsageError(f"unknown key {key!r}")
        pc = _PITCH_CLASSES[tonic[0].upper()] + tonic[1:].count("#") - tonic[1:].count("b")
        return tuple(sorted((pc + step) % 12 for step in _MODES[mode.strip()]))
    try:
        pcs = tuple(sorted({int(p) % 12 for p in key.replace(";", ",").split(",") if p.strip()}))
    except ValueError as exc:
        raise UsageError(f"unknown key {key!r}") from exc
    if not pcs:
        raise UsageError("key must contain at least one pitch class")
    return pcs


def midi_to_hz(note) -> np.ndarray | float:
    return 440.0 * 2.0 ** ((np.asarray(note, dtype=np.float64) - 69.0) / 12.0)


@dataclass
class PitchSequence:
    id: str
    notes: tuple  # MIDI note numbers
    note_duration: float = DEFAULT_NOTE_DURATION
    key: tuple = _MODES["major"]
    seed: int = 0

    @property
    def fundamentals(self) -> np.ndarray:
        return midi_to_hz(self.notes)

    @property
    def duration(self) -> float:
        return len(self.notes) * self.note_duration


@dataclass
class Rating:
    mean_rating: float
    rank: int


@dataclass
class StimulusSet:
    sequences: list
    ratings: dict = field(default_factory=dict)  # id -> Rating

    def __len__(self):
        return len(self.sequences)

    def ids(self):
        return [s.id for s in self.sequences]

    def by_id(self, sid: str) -> PitchSequence:
        for s in self.sequences:
            if s.id == sid:
                return s
        raise KeyError(sid)


@dataclass
class Transition:
    sequence_id: str
    index: int  # 1-based
    onset_time: float
    onset_column: int
    interval_bands: int
    interval_semitones: int


def in_key_pitches(key, pitch_range=DEFAULT_RANGE) -> np.ndarray:
    lo, hi = pitch_range
    return np.array([n for n in range(lo, hi + 1) if n % 12 in set(key)], dtype=int)


def generate_set(
    n: int = 50,
    key="C:major",
    pitch_range=DEFAULT_RANGE,
    seed: int = 0,
    note_duration: float = DEFAULT_NOTE_DURATION,
    notes_per_sequence: int = NOTES_PER_SEQUENCE,
) -> StimulusSet:
    """``n`` sequences of i.i.d. uniform in-key pitches with fixed duration and loudness."""
    if isinstance(key, str):
        key = parse_key(key)
    key = tuple(key)
    if not key:
        raise UsageError("key must be non-empty")
    pool = in_key_pitches(key, pitch_range)
    if len(pool) < 8:
        raise UsageError(f"pitch range {pitch_range} holds only {len(pool)} in-key pitches; need >= 8")
    seeds = np.random.SeedSequence(seed).generate_state(n)
    width = max(3, len(str(n)))
    sequences = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        notes = tuple(int(p) for p in rng.choice(pool, size=notes_per_sequence))
        sequences.append(PitchSequence(f"stim_{i + 1:0{width}d}", notes, note_duration, key, int(s)))
    return StimulusSet(sequences)


def _envelope(n_samples: int, start: int, stop: int, half_fade: int) -> np.ndarray:
    """Trapezoid equal to 1 on [start + h, stop - h), linear ramps of 2h centred on each boundary."""
    idx = np.arange(n_samples, dtype=np.float64)
    if half_fade == 0:
        return ((idx >= start) & (idx < stop)).astype(np.float64)
    rise = (idx - (start - half_fade)) / (2 * half_fade)
    fall = ((stop + half_fade) - idx) / (2 * half_fade)
    return np.clip(np.minimum(rise, fall), 0.0, 1.0)


def render_notes(
    fundamentals,
    durations,
    harmonics=DEFAULT_HARMONICS,
    sample_rate: int = SAMPLE_RATE,
    total_samples: int | None = None,
) -> AudioClip:
    fundamentals = np.asarray(fundamentals, dtype=np.float64)
    durations = np.asarray(durations, dtype=np.float64)
    if len(fundamentals) == 0:
        raise DataError("cannot synthesize an empty sequence")
    harmonics = np.asarray(harmonics, dtype=np.float64)
    top = fundamentals.max() * len(harmonics)
    if top >= sample_rate / 2:
        raise DataError(f"harmonic at {top:.1f} Hz would alias above Nyquist {sample_rate / 2} Hz")
    bounds = np.round(np.concatenate([[0.0], np.cumsum(durations)]) * sample_rate).astype(int)
    n_samples = int(bounds[-1]) if total_samples is None else int(total_samples)
    half_fade = int(round(FADE_SECONDS * sample_rate / 2))
    out = np.zeros(n_samples)
    for f0, start, stop in zip(fundamentals, bounds[:-1], bounds[1:]):
        lo = max(0, start - half_fade)
        hi = min(n_samples, stop + half_fade)
        if hi <= lo:
            continue
        t = (np.arange(lo, hi) - start) / sample_rate
        tone = sum(a * np.sin(2 * np.pi * (k + 1) * f0 * t) for k, a in enumerate(harmonics))
        out[lo:hi] += tone * _envelope(n_samples, start, stop, half_fade)[lo:hi]
    peak = np.abs(out).max()
    if peak > 0:
        out *= PEAK / peak
    return AudioClip(out, sample_rate)


def synthesize(seq: PitchSequence, harmonics=DEFAULT_HARMONICS, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Additive synthesis with fixed partial amplitudes, 10 ms cross-fades, peak 0.9."""
    if len(seq.notes) == 0:
        raise DataError(f"sequence {seq.id!r} has no notes")
    return render_notes(
        seq.fundamentals, [seq.note_duration] * len(seq.notes), harmonics, sample_rate
    )


def transitions(seq: PitchSequence, cfg: DspConfig = DspConfig()) -> list:
    """Symbolic note-change metadata; onset columns follow the centred STFT grid."""
    bands = [mel_band_of_frequency(float(f), cfg) for f in seq.fundamentals]
    out = []
    for i in range(1, len(seq.notes)):
        onset = i * seq.note_duration
        out.append(
            Transition(
                seq.id,
                i,
                onset,
                int(round(onset / cfg.column_duration)),
                abs(bands[i] - bands[i - 1]),
                int(seq.notes[i] - seq.notes[i - 1]),
            )
        )
    return out


# --------------------------------------------------------------------------
# rankings and groups


def proxy_ranking(stimuli: StimulusSet) -> dict:
    """Rank by mean absolute interval: the smallest mean interval gets rank N (most musical).

    Ties are broken by sequence order so the result is always a permutation.
    """
    sizes = [np.mean(np.abs(np.diff(s.notes))) if len(s.notes) > 1 else 0.0 for s in stimuli.sequences]
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    return {stimuli.sequences[i].id: r + 1 for r, i in enumerate(order)}


def ranking(stimuli: StimulusSet) -> dict:
    """Human ranks when ratings are attached, otherwise the interval-size proxy."""
    if stimuli.ratings:
        return {sid: r.rank for sid, r in stimuli.ratings.items()}
    return proxy_ranking(stimuli)


def groups(rank: dict, size: int = 10):
    """(musical ids, non-musical ids): the ``size`` highest and lowest ranks."""
    if 2 * size > len(rank):
        raise UsageError(f"cannot form two groups of {size} from {len(rank)} ranked stimuli")
    ordered = sorted(rank, key=lambda sid: rank[sid])
    return ordered[-size:][::-1], ordered[:size]


# --------------------------------------------------------------------------
# CSV files


def write_manifest(path, stimuli: StimulusSet) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stimulus_id", "seed", "key", "notes", "note_duration"])
        for s in stimuli.sequences:
            w.writerow(
                [s.id, s.seed, ";".join(str(p) for p in s.key), ";".join(str(n) for n in s.notes), repr(s.note_duration)]
            )
    tmp.replace(path)


def read_manifest(path) -> StimulusSet:
    sequences = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"stimulus_id", "seed", "key", "notes", "note_duration"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: stimulus manifest needs columns {sorted(need)}")
        for row in reader:
            try:
                sequences.append(
                    PitchSequence(
                        row["stimulus_id"],
                        tuple(int(n) for n in row["notes"].split(";") if n),
                        float(row["note_duration"]),
                        parse_key(row["key"]),
                        int(row["seed"]),
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path}: bad row for {row.get('stimulus_id')!r}: {exc}") from exc
    return StimulusSet(sequences)


def load_ratings(path, stimuli: StimulusSet) -> StimulusSet:
    """Attach ``stimulus_id,mean_rating,rank`` rows; ranks must be a permutation of 1..N."""
    known = set(stimuli.ids())
    ratings = {}
    rank_owner = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"stimulus_id", "mean_rating", "rank"} <= set(reader.fieldnames):
            raise DataError(f"{path}: ratings CSV needs stimulus_id,mean_rating,rank")
        for row in reader:
            sid = row["stimulus_id"]
            if sid not in known:
                raise DataError(f"{path}: unknown stimulus id {sid!r}")
            if sid in ratings:
                raise DataError(f"{path}: duplicate stimulus id {sid!r}")
            try:
                mean_rating = float(row["mean_rating"])
                rank = int(row["rank"])
            except ValueError as exc:
                raise DataError(f"{path}: bad rating row for {sid!r}") from exc
            if not 1.0 <= mean_rating <= 5.0:
                raise DataError(f"{path}: mean_rating {mean_rating} for {sid!r} outside [1, 5]")
            if rank in rank_owner:
                raise DataError(f"{path}: rank {rank} assigned to both {rank_owner[rank]!r} and {sid!r}")
            rank_owner[rank] = sid
            ratings[sid] = Rating(mean_rating, rank)
    n = len(ratings)
    if sorted(rank_owner) != list(range(1, n + 1)):
        raise DataError(f"{path}: ranks are not a permutation of 1..{n}")
    return StimulusSet(list(stimuli.sequences), ratings)


# --------------------------------------------------------------------------
# synthetic training corpus

CORPUS_TIMBRES = (
    (1.0, 0.5, 0.25),
    (1.0, 0.3, 0.5, 0.1),
    (1.0, 0.7),
    (1.0,),
    (1.0, 0.2, 0.4, 0.2, 0.1),
)
CORPUS_DURATIONS = (0.2, 0.25, 0.297, 0.35, 0.4)
CORPUS_STEPS = (-4, -3, -2, -1, -1, 0, 1, 1, 2, 3, 4)  # scale-degree moves, stepwise-weighted
CORPUS_CLIP_SAMPLES = 131072


def corpus_melody(rng: np.random.Generator, key=_MODES["major"], pitch_range=(55, 88)):
    """A scale-degree random walk: mostly steps, occasional leaps, fixed tempo per clip."""
    pool = in_key_pitches(key, pitch_range)
    duration = float(rng.choice(CORPUS_DURATIONS))
    n_notes = int(np.ceil(CORPUS_CLIP_SAMPLES / SAMPLE_RATE / duration)) + 1
    pos = int(rng.integers(len(pool) // 4, 3 * len(pool) // 4))
    notes = []
    for _ in range(n_notes):
        notes.append(int(pool[pos]))
        pos = int(np.clip(pos + rng.choice(CORPUS_STEPS), 0, len(pool) - 1))
    return notes, duration


def corpus_clip(seed: int) -> AudioClip:
    rng = np.random.default_rng(seed)
    tonic = int(rng.integers(12))
    key = tuple(sorted((tonic + s) % 12 for s in _MODES[str(rng.choice(list(_MODES)))]))
    notes, duration = corpus_melody(rng, key)
    harmonics = CORPUS_TIMBRES[int(rng.integers(len(CORPUS_TIMBRES)))]
    return render_notes(
        midi_to_hz(notes), [duration] * len(notes), harmonics, total_samples=CORPUS_CLIP_SAMPLES
    )


def steady_tone_clip(seed: int, n_notes: int = 4) -> AudioClip:
    """A few long steady in-key tones; used as held-out material for baseline comparisons."""
    rng = np.random.default_rng(seed)
    pool = in_key_pitches(_MODES["major"], DEFAULT_RANGE)
    notes = rng.choice(pool, size=n_notes)
    duration = CORPUS_CLIP_SAMPLES / SAMPLE_RATE / n_notes
    return render_notes(midi_to_hz(notes), [duration] * n_notes, DEFAULT_HARMONICS, total_samples=CORPUS_CLIP_SAMPLES)
