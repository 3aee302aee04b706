"""Leaky integrate-and-fire network with tape-based sparse BPTT.

Hidden layers follow

    u[t] = beta * u[t-1] + W x_in[t] - x[t-1] * u_th,    x[t] = 1[u[t] > u_th]

and the readout is a leaky integrator with the same ``beta`` but no
threshold.  During the forward pass every hidden neuron gets a value for
``dx/du`` from the chosen backward mode; the value is written to a
:class:`LayerTape` (sparse modes keep only nonzero entries).  The backward
pass then unrolls the recurrence exactly, including the reset path, with
``dx/du`` read from the tape.

Two backward implementations are provided.  :func:`dense_backward` is the
textbook reverse-time adjoint sweep with dense matrices.
:func:`sparse_backward` rewrites the same gradient as
``dW = sum_t delta[t]^T trace[t]`` where ``delta`` lives only on tape
entries, so every matrix product is a sparse-times-dense product whose cost
is proportional to the number of active neurons.
"""

import struct
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import distributions as dists
from .errors import ConfigurationError, DomainError, NumericError, TrainingError
from .zo_surrogate import ZOConfig, ZODiagnostics, SurrogateFn, local_zo_grad

__all__ = [
    "LifConfig",
    "LifNetwork",
    "Surrogate",
    "SparseGrad",
    "LocalZO",
    "LayerTape",
    "SparseGradTape",
    "ForwardRecord",
    "lif_step",
    "forward",
    "predict",
    "loss_and_grad",
    "dense_backward",
    "sparse_backward",
    "Adam",
    "train_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"LZONET1"


@dataclass(frozen=True)
class LifConfig:
    beta: float = 0.9
    u_th: float = 1.0
    reset_mode: str = "subtract"

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in (0, 1), got {self.beta!r}")
        if not (np.isfinite(self.u_th) and self.u_th > 0):
            raise ConfigurationError(f"u_th must be > 0, got {self.u_th!r}")
        if self.reset_mode != "subtract":
            raise ConfigurationError("only subtract-by-threshold reset is supported")


@dataclass
class LifNetwork:
    """Dense feed-forward weights; the last matrix feeds the readout."""

    layers: list
    lif: LifConfig = field(default_factory=LifConfig)
    readout: bool = True

    def __post_init__(self):
        if not self.readout:
            raise ConfigurationError("a leaky-integrator readout is required")
        if len(self.layers) < 1:
            raise ConfigurationError("network needs at least one weight matrix")
        self.layers = [np.array(w, dtype=float) for w in self.layers]
        for i, w in enumerate(self.layers):
            if w.ndim != 2:
                raise ConfigurationError(f"layer {i} weights must be 2-D")
            if i and w.shape[1] != self.layers[i - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} has {self.layers[i - 1].shape[0]} outputs"
                )
            if not np.all(np.isfinite(w)):
                raise NumericError(f"layer {i} weights are not finite")

    @classmethod
    def init(cls, dims, rng, lif=None, gain=None):
        """Gaussian weights with std ``gain[i] / sqrt(fan_in)``.

        The default gains are large enough that sparse latency-coded input
        drives the first hidden layers above threshold.
        """
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigurationError(f"bad layer sizes {dims!r}")
        n = len(dims) - 1
        if gain is None:
            gain = [6.0] * (n - 1) + [1.0] if n > 1 else [1.0]
        elif np.isscalar(gain):
            gain = [float(gain)] * n
        if len(gain) != n:
            raise ConfigurationError("one gain per weight matrix is required")
        layers = [
            rng.normal(0.0, g / np.sqrt(fan_in), size=(fan_out, fan_in))
            for g, fan_in, fan_out in zip(gain, dims[:-1], dims[1:])
        ]
        return cls(layers, lif if lif is not None else LifConfig())

    @property
    def dims(self):
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers]

    @property
    def n_hidden(self):
        return len(self.layers) - 1

    def copy(self):
        return LifNetwork([w.copy() for w in self.layers], self.lif, self.readout)


# ---------------------------------------------------------------- modes


@dataclass(frozen=True)
class Surrogate:
    """Dense surrogate gradient: every neuron stores ``g(u - u_th)``."""

    g: SurrogateFn
    name = "surrogate"
    dense = True

    def tape_values(self, v, rng):
        return np.asarray(self.g(v), dtype=float)


@dataclass(frozen=True)
class SparseGrad:
    """Surrogate gradient gated to ``|u - u_th| < b_th``."""

    g: SurrogateFn
    b_th: float
    name = "sparsegrad"
    dense = False

    def __post_init__(self):
        if not (np.isfinite(self.b_th) and self.b_th > 0):
            raise ConfigurationError(f"b_th must be > 0, got {self.b_th!r}")

    def tape_values(self, v, rng):
        out = np.zeros_like(v)
        keep = np.abs(v) < self.b_th
        out[keep] = self.g(v[keep])
        return out


@dataclass(frozen=True)
class LocalZO:
    """Per-neuron zeroth-order estimate from ``cfg.m`` draws of ``dist``."""

    dist: dists.Distribution
    cfg: ZOConfig = field(default_factory=ZOConfig)
    diagnostics: ZODiagnostics = field(default_factory=ZODiagnostics, compare=False)
    name = "localzo"
    dense = False

    def __post_init__(self):
        if not self.dist.even:
            raise ConfigurationError(f"{self.dist!r} is not even about 0")

    def tape_values(self, v, rng):
        if rng is None:
            raise ConfigurationError("LocalZO needs a random generator")
        grad, _ = local_zo_grad(v, self.cfg, rng, self.dist, self.diagnostics)
        return np.asarray(grad, dtype=float)


# ---------------------------------------------------------------- tape


@dataclass
class LayerTape:
    """Stored ``dx/du`` of one hidden layer over all time steps.

    Entries are addressed by the flat index ``t*B*n + b*n + i``; within one
    step this is ``b*n + i``, so per-step indices are sorted row-major
    (batch, neuron) pairs.  ``spikes`` is the layer's binary output,
    time-major ``(T, B, n)``.
    """

    shape: tuple
    flat_idx: np.ndarray
    grad_vals: np.ndarray
    spikes: np.ndarray
    dense: bool = False

    @classmethod
    def from_values(cls, values, spikes, dense):
        shape = values.shape
        flat = values.reshape(-1)
        if dense:
            idx = np.arange(flat.size, dtype=np.int64)
            vals = flat.copy()
        else:
            idx = np.flatnonzero(flat).astype(np.int64)
            vals = flat[idx]
        return cls(shape, idx, vals, spikes, dense)

    @property
    def nnz(self):
        return int(self.flat_idx.size)

    @property
    def offsets(self):
        T, B, n = self.shape
        return np.searchsorted(self.flat_idx, np.arange(T + 1) * (B * n))

    def at(self, t):
        """``(active_idx, grad_vals)`` at step ``t``; ``active_idx`` is k x 2."""
        T, B, n = self.shape
        lo, hi = self.offsets[t], self.offsets[t + 1]
        local = self.flat_idx[lo:hi] - t * B * n
        return np.stack([local // n, local % n], axis=1), self.grad_vals[lo:hi]

    def to_dense(self):
        out = np.zeros(int(np.prod(self.shape)))
        out[self.flat_idx] = self.grad_vals
        return out.reshape(self.shape)

    def active_fraction(self):
        return self.nnz / float(np.prod(self.shape))


@dataclass
class SparseGradTape:
    """Per-layer tapes plus the input spikes needed for BPTT."""

    layers: list
    inputs: np.ndarray
    beta: float
    u_th: float

    @property
    def dense(self):
        return all(layer.dense for layer in self.layers)


@dataclass
class ForwardRecord:
    output_potentials: np.ndarray
    tape: SparseGradTape
    spike_counts: list
    mac_count_forward: int


# ---------------------------------------------------------------- forward


def lif_step(u_prev, x_prev, input_current, lif):
    """One step of the leaky integrate-and-fire update.

    >>> u, x = lif_step(np.array([0.5]), np.array([0.0]), np.array([0.6]), LifConfig())
    >>> round(float(u[0]), 12), int(x[0])
    (1.05, 1)
    """
    u_prev = np.asarray(u_prev, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    input_current = np.asarray(input_current, dtype=float)
    if not (np.all(np.isfinite(u_prev)) and np.all(np.isfinite(input_current))):
        raise NumericError("non-finite membrane potential or input current")
    if not np.all((x_prev == 0) | (x_prev == 1)):
        raise DomainError("previous spikes must be binary")
    return _step(u_prev, x_prev, input_current, lif.beta, lif.u_th)


def _step(u_prev, x_prev, current, beta, u_th):
    u = beta * u_prev + current - x_prev * u_th
    return u, (u > u_th).astype(float)


def _check_input(net, spikes_in):
    x = np.asarray(spikes_in)
    if x.ndim != 3:
        raise ConfigurationError("input spikes must be batch x T x d")
    if x.shape[1] < 1:
        raise ConfigurationError("need at least one time step")
    if x.shape[2] != net.dims[0]:
        raise ConfigurationError(f"input width {x.shape[2]} does not match network input {net.dims[0]}")
    if not np.all((x == 0) | (x == 1)):
        raise DomainError("input spikes must be binary")
    return np.ascontiguousarray(np.transpose(x, (1, 0, 2)), dtype=float)


def forward(net, spikes_in, mode=None, rng=None):
    """Run the network over ``spikes_in`` (batch x T x d).

    With ``mode=None`` no tape values are computed (inference).  Layers are
    simulated one after another over the full time window, which is
    equivalent to the step-major order because there are no recurrent or
    feedback weights.
    """
    xin = _check_input(net, spikes_in)
    T, B, _ = xin.shape
    beta, u_th = net.lif.beta, net.lif.u_th
    x_prev_layer = xin
    tapes, counts = [], []
    macs = 0
    for w in net.layers[:-1]:
        n_out, n_in = w.shape
        current = (x_prev_layer.reshape(T * B, n_in) @ w.T).reshape(T, B, n_out)
        macs += T * B * n_out * n_in
        u_all = np.empty((T, B, n_out))
        x_all = np.empty((T, B, n_out))
        u = np.zeros((B, n_out))
        x = np.zeros((B, n_out))
        for t in range(T):
            u, x = _step(u, x, current[t], beta, u_th)
            u_all[t], x_all[t] = u, x
        if not np.all(np.isfinite(u_all)):
            raise NumericError("membrane potential became non-finite")
        if mode is not None:
            vals = mode.tape_values(u_all - u_th, rng)
            tapes.append(LayerTape.from_values(vals, x_all, mode.dense))
        else:
            tapes.append(LayerTape((T, B, n_out), np.zeros(0, np.int64), np.zeros(0), x_all))
        counts.append(int(x_all.sum()))
        x_prev_layer = x_all
    w = net.layers[-1]
    n_out, n_in = w.shape
    current = (x_prev_layer.reshape(T * B, n_in) @ w.T).reshape(T, B, n_out)
    macs += T * B * n_out * n_in
    v = np.empty((T, B, n_out))
    acc = np.zeros((B, n_out))
    for t in range(T):
        acc = beta * acc + current[t]
        v[t] = acc
    tape = SparseGradTape(tapes, xin, beta, u_th)
    return ForwardRecord(np.transpose(v, (1, 0, 2)).copy(), tape, counts, int(macs))


def predict(net, spikes_in):
    rec = forward(net, spikes_in, None)
    return np.argmax(rec.output_potentials.max(axis=1), axis=1)


# ---------------------------------------------------------------- loss


def _loss_head(rec, labels):
    """Cross-entropy on max-over-time potentials and its time-resolved gradient.

    Returns ``(loss, direct)`` with ``direct`` time-major (T, B, C); it is
    nonzero only at each (sample, class) argmax time.
    """
    v = rec.output_potentials
    B, T, C = v.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ConfigurationError("one label per sample is required")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DomainError(f"labels must lie in [0, {C})")
    labels = labels.astype(np.int64)
    t_star = np.argmax(v, axis=1)
    logits = np.take_along_axis(v, t_star[:, None, :], axis=1)[:, 0, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(B), labels]))
    d_logits = np.exp(shifted - logz[:, None])
    d_logits[np.arange(B), labels] -= 1.0
    d_logits /= B
    direct = np.zeros((T, B, C))
    bi, ci = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
    direct[t_star, bi, ci] = d_logits
    return loss, direct


def _traces(x, beta):
    """``trace[t] = beta * trace[t-1] + x[t]`` along axis 0."""
    out = np.empty_like(x)
    acc = np.zeros(x.shape[1:])
    for t in range(x.shape[0]):
        acc = beta * acc + x[t]
        out[t] = acc
    return out


def dense_backward(rec, labels, net, values=None):
    """Reverse-time adjoint sweep with dense matrices.

    ``values`` optionally overrides the per-layer ``dx/du`` arrays
    (time-major); by default the tape is densified.
    """
    loss, direct = _loss_head(rec, labels)
    tape = rec.tape
    beta, u_th = tape.beta, tape.u_th
    T, B, C = direct.shape
    L = net.n_hidden
    if values is None:
        values = [layer.to_dense() for layer in tape.layers]
    xs = [tape.inputs] + [layer.spikes for layer in tape.layers]
    grads = [np.zeros_like(w) for w in net.layers]
    macs = 0
    q = np.zeros((B, C))
    e = [np.zeros((B, w.shape[0])) for w in net.layers[:-1]]
    for t in range(T - 1, -1, -1):
        q = beta * q + direct[t]
        grads[L] += q.T @ xs[L][t]
        upstream = q @ net.layers[L]
        macs += 2 * B * C * net.layers[L].shape[1]
        for h in range(L - 1, -1, -1):
            n_out, n_in = net.layers[h].shape
            e[h] = beta * e[h] + values[h][t] * (upstream - u_th * e[h])
            grads[h] += e[h].T @ xs[h][t]
            macs += B * n_out * n_in
            if h > 0:
                upstream = e[h] @ net.layers[h]
                macs += B * n_out * n_in
    return loss, grads, int(macs)


def sparse_backward(rec, labels, net):
    """Tape-driven BPTT whose matrix products touch only active entries."""
    loss, direct = _loss_head(rec, labels)
    tape = rec.tape
    beta, u_th = tape.beta, tape.u_th
    T, B, C = direct.shape
    L = net.n_hidden
    xs = [tape.inputs] + [layer.spikes for layer in tape.layers]
    grads = [None] * (L + 1)
    macs = 0

    flat = direct.reshape(T * B, C)
    d_rows, d_cols = np.nonzero(flat)
    delta = sparse.csr_matrix((flat[d_rows, d_cols], (d_rows, d_cols)), shape=(T * B, C))
    n_in = net.layers[L].shape[1]
    grads[L] = np.asarray(delta.T @ _traces(xs[L], beta).reshape(T * B, n_in))
    upstream = np.asarray(delta @ net.layers[L]).reshape(T, B, n_in)
    macs += 2 * delta.nnz * n_in

    for h in range(L - 1, -1, -1):
        layer = tape.layers[h]
        n_out, n_in = net.layers[h].shape
        offs = layer.offsets
        bn = B * n_out
        p = np.zeros(bn)
        e = np.zeros(bn)
        dvals = np.zeros(layer.nnz)
        for t in range(T - 1, -1, -1):
            p = beta * p + upstream[t].reshape(bn)
            lo, hi = offs[t], offs[t + 1]
            if hi > lo:
                idx = layer.flat_idx[lo:hi] - t * bn
                d = layer.grad_vals[lo:hi] * (p[idx] - u_th * e[idx])
                e *= beta
                e[idx] += d
                dvals[lo:hi] = d
            else:
                e *= beta
        keep = dvals != 0.0
        idx = layer.flat_idx[keep]
        delta = sparse.csr_matrix((dvals[keep], (idx // n_out, idx % n_out)), shape=(T * B, n_out))
        grads[h] = np.asarray(delta.T @ _traces(xs[h], beta).reshape(T * B, n_in))
        macs += delta.nnz * n_in
        if h > 0:
            upstream = np.asarray(delta @ net.layers[h]).reshape(T, B, n_in)
            macs += delta.nnz * n_in
    return loss, grads, int(macs)


def loss_and_grad(rec, labels, net, backend="auto"):
    """Loss, weight gradients and backward multiply-accumulate count.

    ``backend="auto"`` uses the dense sweep for dense tapes and the sparse
    one otherwise.
    """
    if len(rec.tape.layers) != net.n_hidden:
        raise ConfigurationError("record does not belong to this network")
    if backend == "auto":
        backend = "dense" if rec.tape.dense else "sparse"
    if backend == "dense":
        return dense_backward(rec, labels, net)
    if backend == "sparse":
        return sparse_backward(rec, labels, net)
    raise ConfigurationError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------- training


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError("learning rate must be >= 0")

    def update(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(net, batch, mode, opt, rng, backend="auto"):
    """One forward, backward and optimizer update on ``batch = (spikes, labels)``.

    Returns ``(loss, metrics)``.  A non-finite loss or gradient raises
    :class:`TrainingError` carrying the weights from before the step.
    """
    spikes, labels = batch
    snapshot = [w.copy() for w in net.layers]
    t0 = time.perf_counter()
    # overflow is detected by the finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            rec = forward(net, spikes, mode, rng)
        except NumericError as exc:
            raise TrainingError(str(exc), snapshot, opt.step + 1) from exc
        t1 = time.perf_counter()
        loss, grads, mac_bwd = loss_and_grad(rec, labels, net, backend)
        t2 = time.perf_counter()
    if not (np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads)):
        raise TrainingError("loss or gradient is not finite", snapshot, opt.step + 1)
    opt.update(net.layers, grads)
    metrics = {
        "loss": loss,
        "fwd_ms": 1e3 * (t1 - t0),
        "bwd_ms": 1e3 * (t2 - t1),
        "mac_fwd": rec.mac_count_forward,
        "mac_bwd": mac_bwd,
        "active_pct": [100.0 * layer.active_fraction() for layer in rec.tape.layers],
    }
    return loss, metrics


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(net, path):
    """Little-endian: magic, u64 layer count, u64 dims, f64 weights, beta, u_th."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        dims = net.dims
        fh.write(struct.pack("<Q", len(net.layers)))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        for w in net.layers:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(struct.pack("<dd", net.lif.beta, net.lif.u_th))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:7] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a network checkpoint")
    pos = 7
    (n,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    dims = struct.unpack_from(f"<{n + 1}Q", data, pos)
    pos += 8 * (n + 1)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        size = fan_in * fan_out
        w = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(fan_out, fan_in)
        layers.append(w.astype(float))
        pos += 8 * size
    beta, u_th = struct.unpack_from("<dd", data, pos)
    if pos + 16 != len(data):
        raise ConfigurationError(f"{path}: trailing or missing bytes")
    return LifNetwork(layers, LifConfig(beta, u_th))
