"""
RR-interval ingestion: pulse timestamps -> per-second RR series -> one-minute
epochs, plus the discontinuous (window-centre) view of a record and the
nested label tuples that go with it.

Epoch indices are 0-based in memory. The epoch file format stores them
1-based, so record ``k`` on disk is ``epochs[k - 1]``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fenet.errors import FormatError, InvalidInputError

EPOCH_SECONDS = 60
RR_MIN = 0.2
RR_MAX = 10.0
DROPOUT_GAP = 10.0
UNLABELED = -1

# sleeping adults breathe 12 to 20 times per minute
BREATH_BAND = (1.0 / 6.0, 1.0 / 3.0)


@dataclass(frozen=True)
class PulseTrain:
    patient_id: str
    timestamps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise InvalidInputError("a pulse train needs at least 2 timestamps")
        if not np.all(np.isfinite(t)) or t[0] < 0:
            raise InvalidInputError("pulse timestamps must be finite and >= 0")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("pulse timestamps must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "timestamps", t)


@dataclass(frozen=True)
class EpochMatrix:
    """Per-minute RR vectors for one patient.

    ``labels`` holds 0/1 per epoch, ``UNLABELED`` (-1) for unknown minutes,
    or is None when the record carries no annotation at all.
    """

    patient_id: str
    epochs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.epochs, dtype=float)
        if x.ndim != 2 or x.shape[1] != EPOCH_SECONDS:
            raise InvalidInputError(f"epochs must have shape (n, {EPOCH_SECONDS}), got {x.shape}")
        if not np.all(np.isfinite(x)) or np.any(x <= 0) or np.any(x > RR_MAX):
            raise InvalidInputError(f"RR values must lie in (0, {RR_MAX}] seconds")
        x.setflags(write=False)
        object.__setattr__(self, "epochs", x)
        if self.labels is not None:
            a = np.array(self.labels, dtype=np.int8)
            if a.shape != (x.shape[0],):
                raise InvalidInputError("labels must have one entry per epoch")
            if not np.all(np.isin(a, (0, 1, UNLABELED))):
                raise InvalidInputError("labels must be 0, 1 or unlabeled")
            a.setflags(write=False)
            object.__setattr__(self, "labels", a)

    @property
    def n_epochs(self) -> int:
        return self.epochs.shape[0]


@dataclass(frozen=True)
class DiscontinuousSequence:
    patient_id: str
    m: int
    kept: np.ndarray
    epochs: np.ndarray


@dataclass(frozen=True)
class NestedLabelSeq:
    """One row of ``2m+1`` labels per kept epoch, ordered ``a[i-m] .. a[i+m]``."""

    patient_id: str
    m: int
    entries: np.ndarray

    @property
    def kept(self) -> np.ndarray:
        return window_centers(self.entries.shape[0] * (2 * self.m + 1), self.m)


@dataclass
class IngestReport:
    n_clipped: int = 0
    dropout_epochs: list[int] = field(default_factory=list)


# ----------------------------------------------------------------------------
# Pulses -> RR
# ----------------------------------------------------------------------------


def rr_from_pulses(pulses, n_seconds: int) -> np.ndarray:
    """RR interval in force at each integer second ``1..n_seconds``.

    Second ``tau`` reports ``t[i] - t[i-1]`` for the pulse pair with
    ``t[i-1] <= tau < t[i]``. Before the first pulse the first interval is
    used; at or after the last pulse the last interval is held.
    """
    t = pulses.timestamps if isinstance(pulses, PulseTrain) else PulseTrain("", pulses).timestamps
    if int(n_seconds) != n_seconds or n_seconds < 1:
        raise InvalidInputError("n_seconds must be a positive integer")
    if n_seconds > math.floor(t[-1]):
        raise InvalidInputError(
            f"n_seconds={n_seconds} runs past the last pulse at {t[-1]:.3f} s"
        )
    tau = np.arange(1, int(n_seconds) + 1, dtype=float)
    idx = np.searchsorted(t, tau, side="right")
    idx = np.clip(idx, 1, t.size - 1)
    return t[idx] - t[idx - 1]


def clamp_rr(rr: np.ndarray) -> tuple[np.ndarray, int]:
    """Clip to the physiological range; returns the clipped series and how many values moved."""
    rr = np.asarray(rr, dtype=float)
    out = np.clip(rr, RR_MIN, RR_MAX)
    return out, int(np.count_nonzero(out != rr))


def epochize(rr, labels=None, patient_id: str = "") -> EpochMatrix:
    rr = np.asarray(rr, dtype=float)
    n = rr.size // EPOCH_SECONDS
    if n == 0:
        raise InvalidInputError(f"need at least {EPOCH_SECONDS} s of RR data, got {rr.size}")
    epochs = rr[: n * EPOCH_SECONDS].reshape(n, EPOCH_SECONDS)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.size < n:
            raise InvalidInputError(f"{labels.size} labels for {n} epochs")
        labels = labels[:n]
    return EpochMatrix(patient_id, epochs, labels)


def ingest_pulses(pulses: PulseTrain, labels=None) -> tuple[EpochMatrix, IngestReport]:
    """Interval lookup, clamp, epoch split and dropout flags in one pass."""
    n_seconds = math.floor(pulses.timestamps[-1])
    raw = rr_from_pulses(pulses, n_seconds)
    rr, n_clipped = clamp_rr(raw)
    matrix = epochize(rr, labels, pulses.patient_id)
    gaps = raw[: matrix.n_epochs * EPOCH_SECONDS].reshape(matrix.n_epochs, EPOCH_SECONDS)
    dropouts = np.flatnonzero((gaps > DROPOUT_GAP).any(axis=1)).tolist()
    return matrix, IngestReport(n_clipped, dropouts)


# ----------------------------------------------------------------------------
# Discontinuous view and nested labels
# ----------------------------------------------------------------------------


def window_centers(n_epochs: int, m: int) -> np.ndarray:
    """0-based centres of the non-overlapping ``2m+1`` windows tiling ``0..n_epochs-1``."""
    if m < 0:
        raise InvalidInputError("m must be non-negative")
    width = 2 * m + 1
    return m + width * np.arange(n_epochs // width)


def downsample(full: EpochMatrix, m: int) -> DiscontinuousSequence:
    if int(m) != m or m < 0:
        raise InvalidInputError("m must be a non-negative integer")
    m = int(m)
    if full.n_epochs < 2 * m + 1:
        raise InvalidInputError(f"{full.n_epochs} epochs cannot hold one window of {2 * m + 1}")
    kept = window_centers(full.n_epochs, m)
    return DiscontinuousSequence(full.patient_id, m, kept, full.epochs[kept])


def nest_labels(flat, m: int, patient_id: str = "") -> NestedLabelSeq:
    flat = np.asarray(flat, dtype=np.int8)
    if m < 0:
        raise InvalidInputError("m must be non-negative")
    width = 2 * m + 1
    count = flat.size // width
    return NestedLabelSeq(patient_id, m, flat[: count * width].reshape(count, width).copy())


def unfold_labels(nested: NestedLabelSeq) -> np.ndarray:
    entries = np.asarray(nested.entries)
    if entries.ndim != 2 or entries.shape[1] != 2 * nested.m + 1:
        raise FormatError(
            f"label tuples of width {entries.shape[-1]} do not match m={nested.m}"
        )
    return entries.reshape(-1).copy()


# ----------------------------------------------------------------------------
# Synthetic patients
# ----------------------------------------------------------------------------


def _apnea_seconds(rng, n_seconds, apnea_rate, mean_episode):
    state = np.zeros(n_seconds, dtype=bool)
    if apnea_rate == 0.0:
        return state
    if apnea_rate == 1.0:
        state[:] = True
        return state
    mean_on = mean_episode
    mean_off = mean_episode * (1.0 - apnea_rate) / apnea_rate
    on = rng.random() < apnea_rate
    # random phase into the first episode
    pos = -int(rng.uniform(0.0, 1.0) * (mean_on if on else mean_off))
    while pos < n_seconds:
        length = int(round((mean_on if on else mean_off) * rng.uniform(0.75, 1.25)))
        length = max(length, 1)
        if on and pos + length > 0:
            state[max(pos, 0):pos + length] = True
        pos += length
        on = not on
    return state


def synth_pulses(
    seed,
    n_minutes: int,
    apnea_rate: float = 0.5,
    breath_freq_band: tuple[float, float] = (0.2, 0.3),
    mean_episode_minutes: float = 10.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulated pulse times plus per-minute labels.

    Normal breathing modulates the beat-to-beat interval with a sinusoid in
    the respiratory band; during apnea the modulation mostly vanishes and the
    baseline interval lengthens. A minute is labelled apnea when at least
    half of its seconds fall inside an episode.
    """
    if not 0.0 <= apnea_rate <= 1.0:
        raise InvalidInputError("apnea_rate must lie in [0, 1]")
    lo, hi = breath_freq_band
    if not (BREATH_BAND[0] - 1e-12 <= lo <= hi <= BREATH_BAND[1] + 1e-12):
        raise InvalidInputError(
            f"breath band must lie within [{BREATH_BAND[0]:.4f}, {BREATH_BAND[1]:.4f}] Hz"
        )
    if n_minutes < 1:
        raise InvalidInputError("n_minutes must be positive")
    rng = np.random.default_rng(seed)
    n_seconds = n_minutes * EPOCH_SECONDS
    horizon = n_seconds + 2 * EPOCH_SECONDS
    apnea = _apnea_seconds(rng, horizon, apnea_rate, mean_episode_minutes * EPOCH_SECONDS)

    baseline = rng.uniform(0.8, 1.1)
    amplitude = rng.uniform(0.04, 0.08)
    freq = rng.uniform(lo, hi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    # slow drift in breathing rate, stays inside the band
    drift = rng.uniform(-1.0, 1.0, size=horizon // EPOCH_SECONDS + 2)
    noise = rng.normal(0.0, 0.01, size=int(horizon / 0.2) + 1)

    times = [0.0]
    t = 0.0
    k = 0
    while t < horizon - 1.0:
        sec = int(t)
        s = 1.0 if apnea[sec] else 0.0
        f = freq + 0.25 * (hi - lo) * drift[sec // EPOCH_SECONDS]
        f = min(max(f, lo), hi)
        rr = (
            baseline
            + 0.08 * s
            + amplitude * (1.0 - 0.85 * s) * np.sin(2.0 * np.pi * f * t + phase)
            + noise[k]
        )
        t += max(rr, 0.3)
        times.append(t)
        k += 1

    per_minute = apnea[:n_seconds].reshape(n_minutes, EPOCH_SECONDS).sum(axis=1)
    labels = (per_minute >= EPOCH_SECONDS // 2).astype(np.int8)
    return np.asarray(times), labels


def synth_patient(
    seed,
    n_minutes: int,
    apnea_rate: float = 0.5,
    breath_freq_band: tuple[float, float] = (0.2, 0.3),
    patient_id: str | None = None,
    mean_episode_minutes: float = 10.0,
) -> EpochMatrix:
    times, labels = synth_pulses(seed, n_minutes, apnea_rate, breath_freq_band, mean_episode_minutes)
    pid = patient_id if patient_id is not None else f"synth{seed}"
    rr = rr_from_pulses(PulseTrain(pid, times), n_minutes * EPOCH_SECONDS)
    rr, _ = clamp_rr(rr)
    return epochize(rr, labels, pid)


def synth_cohort(seed, n_patients: int, n_minutes: int, apnea_rate: float = 0.5, **kwargs):
    """Independent patients drawn from child seeds of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n_patients)
    return [
        synth_patient(child, n_minutes, apnea_rate, patient_id=f"synth{seed}_{i:03d}", **kwargs)
        for i, child in enumerate(children)
    ]


# ----------------------------------------------------------------------------
# Files
# ----------------------------------------------------------------------------


def read_pulse_file(path, patient_id: str | None = None) -> PulseTrain:
    path = Path(path)
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise FormatError(f"not a timestamp: {line!r}", lineno) from None
    try:
        return PulseTrain(patient_id or path.stem, np.asarray(values))
    except InvalidInputError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_pulse_file(pulses: PulseTrain, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# pulses for {pulses.patient_id}\n")
        for t in pulses.timestamps:
            fh.write(f"{float(t)!r}\n")


def read_label_file(path) -> np.ndarray:
    """One label per line, ``0``, ``1`` or ``?``."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            out.append(_parse_label(line, lineno))
    return np.asarray(out, dtype=np.int8)


def _parse_label(token, lineno):
    if token == "?":
        return UNLABELED
    if token in ("0", "1"):
        return int(token)
    raise FormatError(f"label must be 0, 1 or ?, got {token!r}", lineno)


def write_epoch_file(matrices, path) -> None:
    if isinstance(matrices, EpochMatrix):
        matrices = [matrices]
    with open(path, "w") as fh:
        for mat in matrices:
            if "\t" in mat.patient_id or not mat.patient_id:
                raise InvalidInputError(f"patient id {mat.patient_id!r} cannot be written")
            for i, row in enumerate(mat.epochs):
                if mat.labels is None or mat.labels[i] == UNLABELED:
                    lab = "?"
                else:
                    lab = str(int(mat.labels[i]))
                values = ",".join(repr(float(v)) for v in row)
                fh.write(f"{mat.patient_id}\t{i + 1}\t{lab}\t{values}\n")


def read_epoch_file(path) -> list[EpochMatrix]:
    """Parse an epoch file into one matrix per patient, in first-seen order."""
    rows: dict[str, list] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
            pid, idx, lab, values = parts
            try:
                idx = int(idx)
            except ValueError:
                raise FormatError(f"bad epoch index {idx!r}", lineno) from None
            label = _parse_label(lab.strip(), lineno)
            fields = values.split(",")
            if len(fields) != EPOCH_SECONDS:
                raise FormatError(
                    f"expected {EPOCH_SECONDS} RR values, got {len(fields)}", lineno
                )
            try:
                vec = [float(v) for v in fields]
            except ValueError:
                raise FormatError("RR values must be decimals", lineno) from None
            if not all(0.0 < v <= RR_MAX for v in vec):
                raise FormatError(f"RR values must lie in (0, {RR_MAX}]", lineno)
            seq = rows.setdefault(pid, [])
            if idx != len(seq) + 1:
                raise FormatError(
                    f"patient {pid}: epoch index {idx} out of order (expected {len(seq) + 1})",
                    lineno,
                )
            seq.append((label, vec))
    out = []
    for pid, seq in rows.items():
        labels = np.array([lab for lab, _ in seq], dtype=np.int8)
        out.append(EpochMatrix(
            pid,
            np.array([vec for _, vec in seq]),
            None if np.all(labels == UNLABELED) else labels,
        ))
    return out


def parse_epoch_file(path) -> EpochMatrix:
    """Single-patient convenience wrapper around :func:`read_epoch_file`."""
    mats = read_epoch_file(path)
    if len(mats) != 1:
        raise FormatError(f"{os.fspath(path)}: expected one patient, found {len(mats)}")
    return mats[0]
