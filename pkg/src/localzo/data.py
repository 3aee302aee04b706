"""Spike-train inputs: latency coding, a synthetic task and an event-file format.

Event files are CSV with one comment line declaring the tensor geometry,
followed by a fixed header::

    # T_max=50,d=100,num_classes=10
    sample_id,label,time_step,neuron_id
    0,3,12,7
    1,0,,

A row with empty ``time_step`` and ``neuron_id`` declares a sample with no
events.  An optional trailing ``polarity`` column is accepted and ignored.
"""

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, EventParseError, SchemaError

__all__ = [
    "SpikeBatch",
    "EventRecord",
    "latency_encode",
    "synth_task",
    "nearest_template_accuracy",
    "read_events",
    "write_events",
]

HEADER = ["sample_id", "label", "time_step", "neuron_id"]


@dataclass
class SpikeBatch:
    """Binary spikes ``(N, T, d)`` with one class id per sample."""

    spikes: np.ndarray
    labels: np.ndarray
    num_classes: int
    dropped_events: int = 0

    def __post_init__(self):
        self.spikes = np.asarray(self.spikes, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.spikes.ndim != 3:
            raise ConfigurationError("spikes must be N x T x d")
        if self.labels.shape != (self.spikes.shape[0],):
            raise ConfigurationError("one label per sample is required")
        if np.any(self.spikes > 1):
            raise DomainError("spikes must be binary")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.spikes.shape[0]

    @property
    def T(self):
        return self.spikes.shape[1]

    @property
    def d(self):
        return self.spikes.shape[2]

    def batches(self, batch_size, rng=None):
        """Yield ``(spikes, labels)`` minibatches, shuffled when ``rng`` is given."""
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.spikes[idx].astype(float), self.labels[idx]

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.spikes).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class EventRecord:
    sample_id: int
    label: int
    time_step: int
    neuron_id: int


def latency_encode(x, T, eps=0.0):
    """Time-to-first-spike code: brighter inputs fire earlier, at most once.

    >>> latency_encode(np.array([1.0, 0.5, 0.0]), 11)[:, :2].nonzero()
    (array([0, 5]), array([0, 1]))
    """
    x = np.asarray(x, dtype=float)
    if T < 2:
        raise ConfigurationError("T must be >= 2")
    if not 0.0 <= eps < 1.0:
        raise ConfigurationError("eps must lie in [0, 1)")
    if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
        raise DomainError("intensities must lie in [0, 1]")
    out = np.zeros((T, x.size), dtype=np.uint8)
    fire = np.flatnonzero(x > eps)
    t = np.rint((1.0 - x[fire]) * (T - 1)).astype(np.int64)
    out[t, fire] = 1
    return out


def _render(times, labels, T, d):
    """Dense spikes from per-sample spike times (-1 means silent)."""
    n = times.shape[0]
    out = np.zeros((n, T, d), dtype=np.uint8)
    s, j = np.nonzero(times >= 0)
    out[s, times[s, j], j] = 1
    return out


def _jittered(templates, labels, jitter_std, T, rng):
    base = templates[labels]
    noise = np.rint(rng.normal(0.0, jitter_std, size=base.shape)).astype(np.int64) if jitter_std > 0 else 0
    return np.where(base >= 0, np.clip(base + noise, 0, T - 1), -1)


def synth_task(num_classes=10, d=100, T=50, jitter_std=1.0, rate=0.2, rng=None, n_train=2000, n_test=500,
               return_templates=False):
    """Jittered spike-time templates, one per class.

    Each class template lets every input neuron fire once with probability
    ``rate`` at a uniform time in ``[0, T)``.  A sample shifts each template
    spike by a rounded Gaussian (clipped into the window).  Labels are
    balanced and in random order; the train and test sets use independent
    child streams of ``rng``.
    """
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    if d < 1 or T < 1 or n_train < 0 or n_test < 0:
        raise ConfigurationError("d, T must be >= 1 and sample counts >= 0")
    if not 0.0 <= rate <= 1.0 or jitter_std < 0:
        raise ConfigurationError("rate must lie in [0, 1] and jitter_std >= 0")
    if rng is None:
        rng = np.random.default_rng()
    fires = rng.random((num_classes, d)) < rate
    when = rng.integers(0, T, size=(num_classes, d))
    templates = np.where(fires, when, -1)
    out = []
    for child, n in zip(rng.spawn(2), (n_train, n_test)):
        labels = child.permutation(np.arange(n) % num_classes)
        times = _jittered(templates, labels, jitter_std, T, child)
        out.append(SpikeBatch(_render(times, labels, T, d), labels, num_classes))
    if return_templates:
        return out[0], out[1], templates
    return out[0], out[1]


def spike_times(batch):
    """First spike time per input neuron, ``-1`` when silent."""
    s = batch.spikes
    any_spike = s.any(axis=1)
    return np.where(any_spike, np.argmax(s, axis=1), -1)


def nearest_template_accuracy(batch, templates, T):
    """Accuracy of assigning each sample to the closest template in spike-time space.

    Silent neurons are placed at time ``T`` so that a missing spike costs
    more than any in-window displacement.
    """
    x = spike_times(batch).astype(float)
    x[x < 0] = T
    tmp = templates.astype(float)
    tmp[tmp < 0] = T
    dist = ((x[:, None, :] - tmp[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(dist, axis=1) == batch.labels))


# ---------------------------------------------------------------- event files


def _parse_header_comment(line, path):
    if not line.startswith("#"):
        raise SchemaError(f"{path}: first line must declare T_max, d and num_classes")
    fields = {}
    for part in line[1:].split(","):
        if "=" in part:
            key, val = part.split("=", 1)
            fields[key.strip()] = val.strip()
    try:
        return int(fields["T_max"]), int(fields["d"]), int(fields["num_classes"])
    except (KeyError, ValueError):
        raise SchemaError(f"{path}: header must give integer T_max, d and num_classes") from None


def _int_field(text, name, line_number, optional=False):
    text = text.strip()
    if optional and text == "":
        return None
    try:
        value = int(text)
    except ValueError:
        raise EventParseError(f"{name} {text!r} is not an integer", line_number) from None
    if value < 0:
        raise EventParseError(f"{name} must be non-negative, got {value}", line_number)
    return value


def read_events(path):
    """Load an event CSV into a :class:`SpikeBatch`.

    Events with ``time_step >= T_max`` are dropped; their number is kept in
    ``dropped_events``.
    """
    with open(path, newline="") as fh:
        first = fh.readline()
        T, d, num_classes = _parse_header_comment(first.strip(), path)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:4]] != HEADER:
            raise SchemaError(f"{path}: expected header {','.join(HEADER)}")
        extra = [h.strip() for h in header[4:]]
        if extra == ["polarity"]:
            warnings.warn(f"{path}: polarity column ignored", UserWarning, stacklevel=2)
        elif extra:
            raise SchemaError(f"{path}: unexpected columns {extra}")
        width = len(header)
        labels, events = {}, []
        dropped = 0
        for row in reader:
            line_number = reader.line_num + 1
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise EventParseError(f"expected {width} fields, got {len(row)}", line_number)
            sid = _int_field(row[0], "sample_id", line_number)
            label = _int_field(row[1], "label", line_number)
            t = _int_field(row[2], "time_step", line_number, optional=True)
            j = _int_field(row[3], "neuron_id", line_number, optional=True)
            if (t is None) != (j is None):
                raise EventParseError("time_step and neuron_id must both be present or both empty", line_number)
            if label >= num_classes:
                raise SchemaError(f"line {line_number}: label {label} >= num_classes {num_classes}")
            if labels.setdefault(sid, label) != label:
                raise SchemaError(f"line {line_number}: sample {sid} has conflicting labels")
            if j is not None:
                if j >= d:
                    raise SchemaError(f"line {line_number}: neuron_id {j} >= d {d}")
                if t >= T:
                    dropped += 1
                    continue
                events.append((sid, t, j))
    n = max(labels) + 1 if labels else 0
    missing = sorted(set(range(n)) - set(labels))
    if missing:
        raise SchemaError(f"{path}: sample ids {missing[:5]} have no rows")
    spikes = np.zeros((n, T, d), dtype=np.uint8)
    if events:
        ev = np.array(events, dtype=np.int64)
        spikes[ev[:, 0], ev[:, 1], ev[:, 2]] = 1
    lab = np.array([labels[i] for i in range(n)], dtype=np.int64)
    return SpikeBatch(spikes, lab, num_classes, dropped)


def write_events(path, batch):
    """Write ``batch`` so that :func:`read_events` reproduces it exactly."""
    n, T, d = batch.spikes.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# T_max={T},d={d},num_classes={batch.num_classes}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for i in range(n):
            ts, js = np.nonzero(batch.spikes[i])
            label = int(batch.labels[i])
            if ts.size == 0:
                writer.writerow([i, label, "", ""])
            else:
                writer.writerows([i, label, int(t), int(j)] for t, j in zip(ts, js))


def ceil_div(a, b):
    return int(math.ceil(a / b))
