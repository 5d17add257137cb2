"""Event-data ingestion, binning, padding, augmentation, and the
synthetic dataset used for desk-scale training checks.

Two little-endian binary containers:

SPKE (spike events)
    magic "SPKE", version u32 = 1, sample count u32, raw neuron count
    u16; per sample: label u16, duration_us u32, event count u32, then
    events as (time_us u32, neuron u16) pairs sorted by time.

SPKA (analog features)
    magic "SPKA", version u32 = 1, sample count u32, feature count u16;
    per sample: label u16, step count u32, then step*feature f32 values
    in time-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .attention import TemporalMask
from .tensor import ConfigError, SpikeTensor, Tensor

SPKE_MAGIC = b"SPKE"
SPKA_MAGIC = b"SPKA"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed container file."""


@dataclass
class EventSample:
    """One raw spike recording: parallel (time, neuron) arrays plus label."""

    times: np.ndarray  # u32 microseconds, sorted ascending
    neurons: np.ndarray  # u16 neuron ids
    label: int
    duration_us: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.uint32)
        self.neurons = np.asarray(self.neurons, dtype=np.uint16)
        if self.times.shape != self.neurons.shape:
            raise ValueError("times and neurons must be parallel arrays")
        if self.times.size and int(self.times.max()) > self.duration_us:
            raise ValueError("event beyond the recording duration")

    @property
    def num_events(self) -> int:
        return int(self.times.size)


@dataclass
class EventFile:
    samples: list[EventSample]
    num_neurons: int
    repaired: int = 0  # samples whose events arrived unsorted


@dataclass
class DenseSample:
    """Fixed-grid sample: (T, N) array, valid-step count, and label."""

    data: np.ndarray
    valid_steps: int
    label: int
    is_spike: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"dense sample must be (T, N), got {self.data.shape}")
        if not 1 <= self.valid_steps <= self.data.shape[0]:
            raise ValueError(
                f"valid_steps {self.valid_steps} outside [1, {self.data.shape[0]}]"
            )
        if np.any(self.data[self.valid_steps:]):
            raise ValueError("padding rows must be all-zero")


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the two augmentation families (percentages in [0, 100])."""

    drop_proportion_pct: float = 0.0
    time_drop_pct: float = 0.0
    neuron_drop_count: int = 0
    freq_masks: int = 0
    freq_mask_bins: int = 0
    time_masks: int = 0
    time_mask_pct: float = 0.0

    def __post_init__(self):
        for name in ("drop_proportion_pct", "time_drop_pct", "time_mask_pct"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ConfigError(f"{name} must be a percentage in [0, 100], got {v}")


def shd_augment() -> AugmentConfig:
    return AugmentConfig(drop_proportion_pct=50, time_drop_pct=20, neuron_drop_count=20)


def ssc_augment() -> AugmentConfig:
    return AugmentConfig(drop_proportion_pct=50, time_drop_pct=10, neuron_drop_count=10)


def gsc_augment() -> AugmentConfig:
    return AugmentConfig(freq_masks=1, freq_mask_bins=10, time_masks=1, time_mask_pct=25)


# ---------------------------------------------------------------------------
# container IO
# ---------------------------------------------------------------------------


def _read_exact(fh, size: int, path) -> bytes:
    raw = fh.read(size)
    if len(raw) != size:
        raise IOError(f"{path}: truncated payload (wanted {size} bytes)")
    return raw


def load_events(path) -> EventFile:
    """Parse an SPKE file; unsorted events are repaired by stable sort
    and counted in ``EventFile.repaired``."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != SPKE_MAGIC:
            raise FormatError(f"{path}: not an SPKE file (bad magic)")
        (version,) = struct.unpack("<I", head[4:])
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported SPKE version {version}")
        count, num_neurons = struct.unpack("<IH", _read_exact(fh, 6, path))
        samples, repaired = [], 0
        for _ in range(count):
            label, duration, n_events = struct.unpack(
                "<HII", _read_exact(fh, 10, path)
            )
            raw = np.frombuffer(
                _read_exact(fh, 6 * n_events, path),
                dtype=np.dtype([("t", "<u4"), ("n", "<u2")]),
            )
            times = raw["t"].astype(np.uint32)
            neurons = raw["n"].astype(np.uint16)
            if times.size and np.any(np.diff(times.astype(np.int64)) < 0):
                order = np.argsort(times, kind="stable")
                times, neurons = times[order], neurons[order]
                repaired += 1
            if neurons.size and int(neurons.max()) >= num_neurons:
                raise FormatError(
                    f"{path}: neuron id {int(neurons.max())} >= count {num_neurons}"
                )
            samples.append(
                EventSample(times=times, neurons=neurons, label=label,
                            duration_us=duration)
            )
    return EventFile(samples=samples, num_neurons=num_neurons, repaired=repaired)


def write_events(path, samples: Iterable[EventSample], num_neurons: int) -> None:
    samples = list(samples)
    with open(path, "wb") as fh:
        fh.write(SPKE_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<IH", len(samples), num_neurons))
        for s in samples:
            fh.write(struct.pack("<HII", s.label, s.duration_us, s.num_events))
            rec = np.empty(s.num_events, dtype=np.dtype([("t", "<u4"), ("n", "<u2")]))
            rec["t"], rec["n"] = s.times, s.neurons
            fh.write(rec.tobytes())


def load_features(path) -> tuple[list[DenseSample], int]:
    """Parse an SPKA file into analog DenseSamples; returns (samples, N)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != SPKA_MAGIC:
            raise FormatError(f"{path}: not an SPKA file (bad magic)")
        (version,) = struct.unpack("<I", head[4:])
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported SPKA version {version}")
        count, num_features = struct.unpack("<IH", _read_exact(fh, 6, path))
        samples = []
        for _ in range(count):
            label, steps = struct.unpack("<HI", _read_exact(fh, 6, path))
            raw = np.frombuffer(
                _read_exact(fh, 4 * steps * num_features, path), dtype="<f4"
            )
            data = raw.astype(np.float64).reshape(steps, num_features)
            samples.append(
                DenseSample(data=data, valid_steps=steps, label=label, is_spike=False)
            )
    return samples, num_features


def write_features(path, samples: Iterable[DenseSample], num_features: int) -> None:
    samples = list(samples)
    with open(path, "wb") as fh:
        fh.write(SPKA_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<IH", len(samples), num_features))
        for s in samples:
            rows = s.data[: s.valid_steps]
            fh.write(struct.pack("<HI", s.label, rows.shape[0]))
            fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def ingest_csv(src, dst, num_neurons: int) -> int:
    """Convert a sorted CSV event dump (time_us,neuron,label per line,
    samples separated by blank lines) into an SPKE file. Returns the
    number of samples written."""
    samples = []
    times: list[int] = []
    neurons: list[int] = []
    label: Optional[int] = None

    def flush():
        nonlocal times, neurons, label
        if label is None:
            return
        t = np.asarray(times, dtype=np.uint32)
        samples.append(
            EventSample(
                times=t,
                neurons=np.asarray(neurons, dtype=np.uint16),
                label=label,
                duration_us=int(t.max()) if t.size else 0,
            )
        )
        times, neurons, label = [], [], None

    with open(src, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                flush()
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise FormatError(f"{src}:{lineno}: expected time_us,neuron,label")
            t, n, lab = (int(p) for p in parts)
            if label is not None and lab != label:
                raise FormatError(f"{src}:{lineno}: label changed mid-sample")
            if n >= num_neurons:
                raise FormatError(f"{src}:{lineno}: neuron {n} >= count {num_neurons}")
            times.append(t)
            neurons.append(n)
            label = lab
    flush()
    write_events(dst, samples, num_neurons)
    return len(samples)


# ---------------------------------------------------------------------------
# binning / padding
# ---------------------------------------------------------------------------

FULL_SCALE_MS = 1000  # nominal recording length the step formula divides


def steps_for_resolution(delta_t_ms: float) -> int:
    """T = 1000 / delta_t for a full-scale recording."""
    t = FULL_SCALE_MS / delta_t_ms
    if abs(t - round(t)) > 1e-9:
        raise ConfigError(
            f"delta_t of {delta_t_ms} ms does not divide the {FULL_SCALE_MS} ms scale"
        )
    return int(round(t))


def bin_and_discretize(s: EventSample, neuron_bin: int, delta_t_ms: float,
                       num_neurons: int) -> DenseSample:
    """Spatio-temporal binning: OR all events that land in each
    (time bin, neuron bin) cell of a T x (num_neurons/neuron_bin) grid."""
    if num_neurons % neuron_bin != 0:
        raise ConfigError(
            f"{num_neurons} neurons not divisible by bin size {neuron_bin}"
        )
    t_steps = steps_for_resolution(delta_t_ms)
    n_bins = num_neurons // neuron_bin
    bin_us = delta_t_ms * 1000.0
    grid = np.zeros((t_steps, n_bins))
    last_bin = -1
    if s.num_events:
        ti = np.floor(s.times / bin_us).astype(np.int64)
        ni = (s.neurons // neuron_bin).astype(np.int64)
        keep = ti < t_steps  # events past the fixed grid are dropped
        grid[ti[keep], ni[keep]] = 1.0
        if keep.any():
            last_bin = int(ti[keep].max())
    valid = max(int(np.ceil(s.duration_us / bin_us)), last_bin + 1, 1)
    valid = min(valid, t_steps)
    return DenseSample(data=grid, valid_steps=valid, label=s.label, is_spike=True)


def pad_and_mask(d: DenseSample, target_t: int) -> tuple[DenseSample, np.ndarray, int]:
    """Pad (or trim all-zero rows) to ``target_t`` rows; returns the new
    sample, its boolean step mask, and a truncation counter that is
    nonzero when valid steps had to be cut."""
    truncated = 0
    data, valid = d.data, d.valid_steps
    if valid > target_t:
        truncated = valid - target_t
        valid = target_t
    if data.shape[0] >= target_t:
        data = data[:target_t]
    else:
        pad = np.zeros((target_t - data.shape[0], data.shape[1]))
        data = np.concatenate([data, pad], axis=0)
    if truncated:
        data = data.copy()
        data[valid:] = 0.0
    out = DenseSample(data=data, valid_steps=valid, label=d.label, is_spike=d.is_spike)
    mask = np.arange(target_t) < valid
    return out, mask, truncated


def collate(samples: list[DenseSample]) -> tuple[Tensor, TemporalMask, np.ndarray]:
    """Stack equal-length samples into a (T, B, N) tensor plus mask."""
    data = np.stack([s.data for s in samples], axis=1)
    lengths = np.array([s.valid_steps for s in samples])
    mask = TemporalMask.from_lengths(lengths, data.shape[0])
    labels = np.array([s.label for s in samples])
    if all(s.is_spike for s in samples):
        return SpikeTensor(data), mask, labels
    return Tensor(data), mask, labels


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def event_drop(s: EventSample, cfg: AugmentConfig, rng: np.random.Generator,
               num_neurons: int) -> EventSample:
    """With probability drop_proportion, remove either all events inside
    a random time window or all events on a random neuron band."""
    if rng.random() * 100.0 >= cfg.drop_proportion_pct:
        return s
    if rng.random() < 0.5:
        window = cfg.time_drop_pct / 100.0 * s.duration_us
        start = rng.uniform(0, max(s.duration_us - window, 0))
        keep = ~((s.times >= start) & (s.times < start + window))
    else:
        count = min(cfg.neuron_drop_count, num_neurons)
        start = int(rng.integers(0, num_neurons - count + 1))
        keep = ~((s.neurons >= start) & (s.neurons < start + count))
    return replace(s, times=s.times[keep], neurons=s.neurons[keep])


def spec_mask(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random frequency bands and time windows of a (T, N) feature
    map; regions outside the masks are untouched."""
    t, n = x.shape
    out = x.copy()
    for _ in range(cfg.freq_masks):
        width = int(rng.integers(0, min(cfg.freq_mask_bins, n) + 1))
        start = int(rng.integers(0, n - width + 1))
        out[:, start : start + width] = 0.0
    max_t = min(int(round(cfg.time_mask_pct / 100.0 * t)), t)
    for _ in range(cfg.time_masks):
        width = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = 0.0
    return out


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------


def synth_dataset(classes: int, samples_per_class: int, t: int, n: int,
                  rng: np.random.Generator, noise_p: float = 0.05) -> list[DenseSample]:
    """Desk-scale labeled data: each class plants a fixed subset of
    neurons firing in a fixed temporal order on top of Bernoulli noise."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    motifs = []
    motif_len = max(3, min(t, n) // 2)
    for _ in range(classes):
        neurons = rng.choice(n, size=motif_len, replace=False)
        steps = np.sort(rng.choice(t, size=motif_len, replace=False))
        motifs.append((steps, neurons))
    out = []
    for label in range(classes):
        steps, neurons = motifs[label]
        for _ in range(samples_per_class):
            grid = (rng.random((t, n)) < noise_p).astype(np.float64)
            grid[steps, neurons] = 1.0
            out.append(DenseSample(data=grid, valid_steps=t, label=label))
    return out


def dense_to_events(d: DenseSample, step_us: int = 1000) -> EventSample:
    """Reindex a binary grid as an event list, one step = ``step_us``."""
    ti, ni = np.nonzero(d.data)
    order = np.argsort(ti, kind="stable")
    return EventSample(
        times=(ti[order] * step_us).astype(np.uint32),
        neurons=ni[order].astype(np.uint16),
        label=d.label,
        duration_us=d.valid_steps * step_us,
    )
