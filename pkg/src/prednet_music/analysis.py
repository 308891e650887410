"""Prediction-error analyses over a stimulus set.

All analyses score layer-0 pixel MSE of frames cut at a one-column hop. With
that hop, frame ``k`` covers columns ``[k, k + 44)``, so the prediction whose
target ends ``x`` columns into a new note (onset column ``c``) is the one for
frame ``k = c + x - 44``.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import FRAME_COLS, DspConfig, MelSpectrogram, extract_frames
from .errors import DataError, DegenerateRegressionError, UsageError
from .model import PredNetModel, forward_sequence
from .stats import RegressionResult, ols_regress, spearman
from .stimuli import StimulusSet, groups, transitions

log = logging.getLogger(__name__)

EVAL_HOP = 1
TIMELAPSE_RANGE = tuple(range(1, 9))
INTERVAL_RANGE = tuple(range(1, 6))
CONTEXT_X = 3
MUSICAL, NON_MUSICAL = "musical", "non-musical"


def x_to_ms(x: int, column_duration: float = 0.01156) -> float:
    """Time lapse in milliseconds; defaults to the nominal 11.56 ms column."""
    return x * column_duration * 1000.0


@dataclass
class TransitionError:
    sequence_id: str
    transition: int
    x: int
    mse: float


@dataclass
class GroupCurve:
    group: str
    per_x: dict  # x -> mean mse over transitions
    per_index: dict  # x -> {k: (mean mse, mean interval_bands)}


@dataclass
class ContextEffect:
    x: int
    indices: list
    norm_musical: list
    norm_nonmusical: list
    diff: list
    excluded: list
    regression: RegressionResult | None


# --------------------------------------------------------------------------
# raw prediction errors


def _batch_errors(model: PredNetModel, frames: np.ndarray) -> np.ndarray:
    return forward_sequence(model, frames, keep_predictions=False).mse


def step_errors(model: PredNetModel, spectrograms: dict, batch_size: int = 10, workers: int = 1) -> dict:
    """Per-step pixel MSE at the evaluation hop for each spectrogram.

    Entry ``k - 1`` of each array is the error of the prediction for frame ``k``.
    Spectrograms of equal width are batched; results do not depend on batching.
    With ``workers > 1`` batches run in a process pool and are gathered in order.
    """
    width = model.config.frame_cols
    by_width = defaultdict(list)
    for sid, spec in spectrograms.items():
        if spec.n_columns < width + EVAL_HOP:
            raise DataError(f"stimulus {sid!r} is too short for two evaluation frames")
        by_width[spec.n_columns].append(sid)
    chunks = [ids[i : i + batch_size] for n in sorted(by_width) for ids in [by_width[n]] for i in range(0, len(ids), batch_size)]
    batches = (np.stack([extract_frames(spectrograms[s], EVAL_HOP, width).frames for s in c]) for c in chunks)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_batch_errors, [model] * len(chunks), batches))
    else:
        results = [_batch_errors(model, b) for b in batches]
    out = {sid: row for chunk, mse in zip(chunks, results) for sid, row in zip(chunk, mse)}
    return {sid: out[sid] for sid in spectrograms}


def total_error(model: PredNetModel, spec: MelSpectrogram) -> float:
    """Summed per-step pixel MSE over the clip."""
    return float(step_errors(model, {spec.clip_id: spec})[spec.clip_id].sum())


# --------------------------------------------------------------------------
# analyses


def musicality_regression(totals: dict, rank: dict) -> RegressionResult:
    """OLS of total error against rank (rank N = most musical)."""
    ids = sorted(rank, key=lambda s: rank[s])
    ranks = [rank[s] for s in ids]
    if sorted(ranks) != list(range(1, len(ranks) + 1)):
        raise DataError("ranking is not a permutation of 1..N")
    missing = [s for s in ids if s not in totals]
    if missing:
        raise DataError(f"no total error for {missing[:3]}")
    return ols_regress(ranks, [totals[s] for s in ids])


def musicality_spearman(totals: dict, rank: dict) -> tuple[float, float]:
    ids = sorted(rank)
    return spearman([rank[s] for s in ids], [totals[s] for s in ids])


def timelapse_frame(onset_column: int, x: int, width: int = FRAME_COLS) -> int:
    """Index of the target frame whose last column is the x-th column of the new note."""
    return onset_column + x - width


def error_by_timelapse(
    errors: dict, trans: dict, x_range=TIMELAPSE_RANGE, width: int = FRAME_COLS
) -> list:
    """Transition errors for every transition and every x that stays clear of clip edges
    and of the following transition."""
    out = []
    for sid, tlist in trans.items():
        mse = errors[sid]
        n_frames = len(mse) + 1
        for pos, tr in enumerate(tlist):
            next_onset = tlist[pos + 1].onset_column if pos + 1 < len(tlist) else None
            for x in x_range:
                if x < 1:
                    raise UsageError("time lapse x must be >= 1")
                last_col = tr.onset_column + x - 1
                if next_onset is not None and last_col >= next_onset:
                    log.debug("skip %s:%d x=%d: reaches the next transition", sid, tr.index, x)
                    continue
                k = timelapse_frame(tr.onset_column, x, width)
                if k < 1 or k >= n_frames:
                    log.debug("skip %s:%d x=%d: frame %d outside the clip", sid, tr.index, x, k)
                    continue
                out.append(TransitionError(sid, tr.index, x, float(mse[k - 1])))
    return out


def group_curve(tag: str, ids, terrors: list, trans: dict) -> GroupCurve:
    """Means over transitions (not over sequences first)."""
    ids = set(ids)
    interval = {(t.sequence_id, t.index): t.interval_bands for tl in trans.values() for t in tl}
    per_x = defaultdict(list)
    per_index = defaultdict(lambda: defaultdict(list))
    for te in terrors:
        if te.sequence_id not in ids:
            continue
        per_x[te.x].append(te.mse)
        per_index[te.x][te.transition].append((te.mse, interval[(te.sequence_id, te.transition)]))
    return GroupCurve(
        tag,
        {x: float(np.mean(v)) for x, v in sorted(per_x.items())},
        {
            x: {k: (float(np.mean([m for m, _ in v])), float(np.mean([b for _, b in v]))) for k, v in sorted(d.items())}
            for x, d in sorted(per_index.items())
        },
    )


def interval_regression(terrors: list, trans: dict, x: int) -> RegressionResult:
    """OLS of transition MSE against interval size in mel bands at a fixed x."""
    interval = {(t.sequence_id, t.index): t.interval_bands for tl in trans.values() for t in tl}
    rows = [(interval[(te.sequence_id, te.transition)], te.mse) for te in terrors if te.x == x]
    if len(rows) < 3:
        raise DegenerateRegressionError(f"only {len(rows)} transitions at x={x}")
    bands, mse = zip(*rows)
    return ols_regress(bands, mse)


def normalized_error(mean_mse: float, mean_interval: float) -> float:
    return mean_mse / mean_interval


def context_effect(terrors: list, trans: dict, musical, nonmusical, x: int, n_transitions: int = 9) -> ContextEffect:
    """Group-normalized error difference (non-musical minus musical) per transition index.

    At index k each group's mean MSE is divided by its mean interval in bands.
    Indices with a zero mean interval or without data in either group are
    excluded and listed in ``excluded``.
    """
    if not musical or not nonmusical:
        raise UsageError("both groups must be non-empty")
    gm = group_curve(MUSICAL, musical, terrors, trans).per_index.get(x, {})
    gn = group_curve(NON_MUSICAL, nonmusical, terrors, trans).per_index.get(x, {})
    indices, nm, nn, diff, excluded = [], [], [], [], []
    for k in range(1, n_transitions + 1):
        if k not in gm or k not in gn:
            log.info("context effect x=%d: transition %d has no data in one group; excluded", x, k)
            excluded.append(k)
            continue
        (mm, im), (mn, inn) = gm[k], gn[k]
        if im == 0 or inn == 0:
            log.warning("context effect x=%d: zero mean interval at transition %d; excluded", x, k)
            excluded.append(k)
            continue
        a, b = normalized_error(mm, im), normalized_error(mn, inn)
        indices.append(k)
        nm.append(a)
        nn.append(b)
        diff.append(b - a)
    reg = ols_regress(indices, diff) if len(indices) >= 3 else None
    return ContextEffect(x, indices, nm, nn, diff, excluded, reg)


# --------------------------------------------------------------------------
# pipeline and CSV output


@dataclass
class AnalysisResults:
    totals: dict = field(default_factory=dict)
    rank: dict = field(default_factory=dict)
    terrors: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)  # x -> RegressionResult
    context: ContextEffect | None = None
    regressions: list = field(default_factory=list)  # (analysis, x, RegressionResult)
    transitions: dict = field(default_factory=dict)  # id -> list of Transition


def analyze(
    model: PredNetModel,
    stimuli: StimulusSet,
    spectrograms: dict,
    rank: dict,
    which: str = "all",
    cfg: DspConfig = DspConfig(),
    group_size: int = 10,
    timelapse_range=TIMELAPSE_RANGE,
    interval_range=INTERVAL_RANGE,
    context_x: int = CONTEXT_X,
    workers: int = 1,
    batch_size: int = 10,
) -> AnalysisResults:
    if which not in ("all", "musicality", "timelapse", "interval", "context"):
        raise UsageError(f"unknown analysis {which!r}")
    errors = step_errors(model, spectrograms, batch_size, workers)
    res = AnalysisResults(rank=dict(rank))
    res.totals = {sid: float(errors[sid].sum()) for sid in spectrograms}
    if which in ("all", "musicality"):
        reg = musicality_regression(res.totals, rank)
        res.regressions.append(("musicality", "", reg))
    if which == "musicality":
        return res
    trans = {s.id: transitions(s, cfg) for s in stimuli.sequences if s.id in spectrograms}
    res.transitions = trans
    xs = sorted(set(timelapse_range) | set(interval_range) | {context_x})
    res.terrors = error_by_timelapse(errors, trans, xs, model.config.frame_cols)
    if which in ("all", "timelapse", "context"):
        musical, nonmusical = groups(rank, group_size)
    if which in ("all", "timelapse"):
        res.curves = {
            MUSICAL: group_curve(MUSICAL, musical, res.terrors, trans),
            NON_MUSICAL: group_curve(NON_MUSICAL, nonmusical, res.terrors, trans),
        }
    if which in ("all", "interval"):
        for x in interval_range:
            res.intervals[x] = interval_regression(res.terrors, trans, x)
            res.regressions.append(("interval", x, res.intervals[x]))
    if which in ("all", "context"):
        res.context = context_effect(res.terrors, trans, musical, nonmusical, context_x)
        if res.context.regression is not None:
            res.regressions.append(("context", context_x, res.context.regression))
    return res


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    """Write via a temporary file and rename, so a failure never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    tmp.replace(path)


def write_results(out_dir, res: AnalysisResults, which: str = "all", group_size: int = 10) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, header, rows):
        write_csv(out_dir / name, header, rows)
        written.append(out_dir / name)

    emit(
        "per_sequence.csv",
        ["stimulus_id", "total_mse", "rank"],
        [(sid, res.totals[sid], res.rank.get(sid, "")) for sid in res.totals],
    )
    if res.terrors and which in ("all", "timelapse"):
        musical, nonmusical = groups(res.rank, group_size)
        tag = {**{s: MUSICAL for s in musical}, **{s: NON_MUSICAL for s in nonmusical}}
        emit(
            "timelapse.csv",
            ["stimulus_id", "transition", "x", "mse", "group"],
            [(te.sequence_id, te.transition, te.x, te.mse, tag.get(te.sequence_id, "")) for te in res.terrors],
        )
    if res.intervals:
        interval = {(t.sequence_id, t.index): t.interval_bands for tl in res.transitions.values() for t in tl}
        emit(
            "interval.csv",
            ["transition_key", "x", "interval_bands", "mse"],
            [
                (f"{te.sequence_id}:{te.transition}", te.x, interval[(te.sequence_id, te.transition)], te.mse)
                for te in res.terrors
                if te.x in res.intervals
            ],
        )
    if res.context is not None:
        c = res.context
        emit(
            "context.csv",
            ["k", "norm_musical", "norm_nonmusical", "diff"],
            list(zip(c.indices, c.norm_musical, c.norm_nonmusical, c.diff)),
        )
    emit(
        "regressions.csv",
        ["analysis", "x", "slope", "intercept", "r2", "p", "n"],
        [(name, x, *reg.as_row()) for name, x, reg in res.regressions],
    )
    return written
