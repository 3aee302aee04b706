"""Experiment runner and command-line interface.

Subcommands::

    localzo train CONFIG.json [--output-dir DIR] [--baseline RUN_DIR]
    localzo thresholds [--mc-trials N]
    localzo curves --kind normal --delta 0.05,0.5,1
    localzo verify quick|full [--tamper a]

The default output directory for ``train`` is ``$LOCALZO_OUTPUT_DIR/<config
name>`` when the variable is set, else ``runs/<config name>``.
"""

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import distributions as dists
from . import rng as rngmod
from . import snn, thresholds
from . import zo_surrogate as zo
from .errors import ConfigurationError, ThresholdDivergenceWarning, TrainingError

OUTPUT_ENV = "LOCALZO_OUTPUT_DIR"
TIMING_COLUMNS = ("fwd_ms", "bwd_ms")
MODE_KINDS = ("surrogate", "sparsegrad", "localzo")
SURROGATE_KINDS = ("expected_normal", "expected_uniform", "expected_laplace", "sigmoid", "fastsigmoid")


@dataclass
class ModeSpec:
    kind: str
    delta: float = 0.05
    alpha: int = 1
    m: int = 1
    distribution: str = None
    surrogate_kind: str = None
    k: float = None
    b_th: float = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ConfigurationError(f"mode.kind must be one of {MODE_KINDS}, got {self.kind!r}")
        if self.surrogate_kind is not None and self.surrogate_kind not in SURROGATE_KINDS:
            raise ConfigurationError(f"surrogate_kind must be one of {SURROGATE_KINDS}")
        if self.distribution is not None and self.distribution not in ("normal", "uniform", "laplace"):
            raise ConfigurationError(f"unknown distribution {self.distribution!r}")
        zo.ZOConfig(self.delta, self.alpha, self.m)
        if self.kind == "localzo" and self.distribution and self.surrogate_kind:
            raise ConfigurationError("ambiguous localzo mode: give either distribution or surrogate_kind, not both")
        if self.kind == "localzo" and not (self.distribution or self.surrogate_kind):
            raise ConfigurationError("localzo mode needs a distribution or a surrogate_kind")
        if self.kind == "surrogate" and self.distribution and self.surrogate_kind:
            raise ConfigurationError("ambiguous surrogate mode: give either distribution or surrogate_kind")
        if self.kind != "localzo" and not (self.distribution or self.surrogate_kind):
            raise ConfigurationError(f"{self.kind} mode needs a surrogate_kind")
        if self.surrogate_kind in ("sigmoid", "fastsigmoid") and self.k is None:
            raise ConfigurationError(f"surrogate_kind {self.surrogate_kind!r} needs k")
        if self.b_th is not None and self.kind != "sparsegrad":
            raise ConfigurationError("b_th only applies to sparsegrad mode")


@dataclass
class DataSpec:
    kind: str = "synthetic"
    num_classes: int = 10
    d: int = 100
    T: int = 50
    jitter_std: float = 1.0
    rate: float = 0.2
    n_train: int = 2000
    n_test: int = 500
    train_path: str = None
    test_path: str = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "events"):
            raise ConfigurationError("data.kind must be 'synthetic' or 'events'")
        if self.kind == "events" and not (self.train_path and self.test_path):
            raise ConfigurationError("event data needs train_path and test_path")


@dataclass
class ExperimentConfig:
    mode: ModeSpec
    dims: list = field(default_factory=lambda: [100, 200, 200, 10])
    beta: float = 0.9
    u_th: float = 1.0
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 128
    data: DataSpec = field(default_factory=DataSpec)
    seed: int = 0
    init_gain: list = None
    output_dir: str = None
    baseline: str = None
    name: str = "run"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if len(self.dims) < 2:
            raise ConfigurationError("dims needs at least input and output sizes")
        snn.LifConfig(self.beta, self.u_th)

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        if "mode" not in raw:
            raise ConfigurationError("config needs a mode")
        try:
            raw["mode"] = ModeSpec(**raw["mode"])
            raw["data"] = DataSpec(**raw.get("data", {}))
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        return cls(**raw)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
        raw.setdefault("name", Path(path).stem)
        return cls.from_dict(raw)

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- modes


def _surrogate_fn(spec):
    kind = spec.surrogate_kind or f"expected_{spec.distribution}"
    if kind.startswith("expected_"):
        return zo.expected_surrogate_fn(kind[len("expected_"):], spec.delta)
    if kind == "sigmoid":
        return zo.SigmoidGrad(spec.k)
    return zo.FastSigmoidGrad(spec.k)


def paired_threshold(spec):
    """Expected threshold of the LocalZO configuration paired with ``spec``."""
    dist_name = spec.distribution
    if dist_name is None and spec.surrogate_kind.startswith("expected_"):
        dist_name = spec.surrogate_kind[len("expected_"):]
    if dist_name is not None:
        return thresholds.expected_threshold(dists.by_name(dist_name), spec.m, spec.delta)
    lam = zo.derive_lambda(_surrogate_fn(spec), spec.alpha, spec.delta)
    return thresholds.expected_threshold_tabulated(lam, lam.default_support(), spec.m, spec.delta)


def build_mode(spec):
    """Backward mode for ``spec`` plus the resolved parameters it used."""
    info = {}
    if spec.kind == "surrogate":
        return snn.Surrogate(_surrogate_fn(spec)), info
    if spec.kind == "sparsegrad":
        b_th = spec.b_th
        if b_th is None:
            b_th = paired_threshold(spec)
            info["b_th_source"] = "expected_threshold"
        info["b_th"] = float(b_th)
        return snn.SparseGrad(_surrogate_fn(spec), b_th), info
    if spec.distribution is not None or spec.surrogate_kind.startswith("expected_"):
        name = spec.distribution or spec.surrogate_kind[len("expected_"):]
        cfg = zo.ZOConfig(spec.delta, spec.alpha, spec.m)
        info["scale_c"] = 1.0
        return snn.LocalZO(dists.by_name(name), cfg), info
    lam = zo.derive_lambda(_surrogate_fn(spec), spec.alpha, spec.delta)
    info["scale_c"] = lam.scale_c
    info["support"] = list(lam.default_support())
    return snn.LocalZO(lam.distribution(), lam.zo_config(spec.m)), info


# ---------------------------------------------------------------- training


def load_data(spec, seed):
    if spec.kind == "synthetic":
        return datamod.synth_task(spec.num_classes, spec.d, spec.T, spec.jitter_std, spec.rate,
                                  rngmod.stream(seed, "synth"), spec.n_train, spec.n_test)
    return datamod.read_events(spec.train_path), datamod.read_events(spec.test_path)


def accuracy(net, batch, chunk=256):
    if len(batch) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(batch), chunk):
        x = batch.spikes[start:start + chunk].astype(float)
        hits += int(np.sum(snn.predict(net, x) == batch.labels[start:start + chunk]))
    return hits / len(batch)


def _metrics_header(n_hidden):
    return ["update", "loss", "fwd_ms", "bwd_ms", "mac_fwd", "mac_bwd"] + [
        f"active_pct_layer{i + 1}" for i in range(n_hidden)]


def metrics_digest(path):
    """SHA-256 of metrics.csv with the wall-clock columns removed."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, name in enumerate(rows[0]) if name not in TIMING_COLUMNS]
    text = "\n".join(",".join(row[i] for i in keep) for row in rows)
    return hashlib.sha256(text.encode()).hexdigest()


def _speedups(summary, baseline_dir):
    with open(Path(baseline_dir) / "summary.json") as fh:
        base = json.load(fh)
    for key in ("seed", "dims"):
        if base["config"][key] != summary["config"][key]:
            raise ConfigurationError(f"baseline run differs in {key}")
    if base["data_digest"] != summary["data_digest"]:
        raise ConfigurationError("baseline run consumed different data")
    mine, theirs = summary["totals"], base["totals"]

    def ratio(a, b):
        return a / b if b else None

    return {
        "baseline": str(baseline_dir),
        "backward_speedup": ratio(theirs["bwd_ms"], mine["bwd_ms"]),
        "overall_speedup": ratio(theirs["fwd_ms"] + theirs["bwd_ms"], mine["fwd_ms"] + mine["bwd_ms"]),
        "mac_ratio_backward": ratio(mine["mac_bwd"], theirs["mac_bwd"]),
    }


def run_training(cfg, output_dir, log=None):
    """Train per ``cfg``; writes metrics.csv, summary.json and network.lzonet.

    Returns the summary dictionary.  On divergence the partial metrics, the
    last good weights and a summary with ``status = "diverged"`` are written
    before :class:`TrainingError` propagates.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg.data, cfg.seed)
    if train.d != cfg.dims[0] or train.num_classes != cfg.dims[-1]:
        raise ConfigurationError(
            f"data is {train.d}-dimensional with {train.num_classes} classes but dims are {cfg.dims}")
    mode, info = build_mode(cfg.mode)
    lif = snn.LifConfig(cfg.beta, cfg.u_th)
    net = snn.LifNetwork.init(cfg.dims, rngmod.stream(cfg.seed, "init"), lif, cfg.init_gain)
    opt = snn.Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    data_rng = rngmod.stream(cfg.seed, "data")
    zo_rng = rngmod.stream(cfg.seed, "zo")
    digest = hashlib.sha256((train.digest() + test.digest()).encode())

    header = _metrics_header(net.n_hidden)
    totals = {"fwd_ms": 0.0, "bwd_ms": 0.0, "mac_fwd": 0, "mac_bwd": 0}
    active_sum = np.zeros(net.n_hidden)
    epochs, update, status = [], 0, "ok"
    error = None
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        try:
            for epoch in range(cfg.epochs):
                order = data_rng.permutation(len(train))
                digest.update(order.astype("<i8").tobytes())
                losses = []
                for start in range(0, len(train), cfg.batch_size):
                    idx = order[start:start + cfg.batch_size]
                    x, y = train.spikes[idx].astype(float), train.labels[idx]
                    loss, m = snn.train_step(net, (x, y), mode, opt, zo_rng)
                    update += 1
                    losses.append(loss)
                    for key in totals:
                        totals[key] += m[key]
                    active_sum += m["active_pct"]
                    writer.writerow([update, repr(loss), f"{m['fwd_ms']:.3f}", f"{m['bwd_ms']:.3f}", m["mac_fwd"],
                                     m["mac_bwd"]] + [repr(a) for a in m["active_pct"]])
                fh.flush()
                ep = {"epoch": epoch + 1, "mean_loss": float(np.mean(losses)),
                      "train_acc": accuracy(net, train), "test_acc": accuracy(net, test)}
                epochs.append(ep)
                if log:
                    log(f"epoch {ep['epoch']}: loss {ep['mean_loss']:.4f} train {ep['train_acc']:.3f} "
                        f"test {ep['test_acc']:.3f}")
        except TrainingError as exc:
            status, error = "diverged", exc
            net.layers = [w.copy() for w in exc.last_good_weights]

    snn.save_checkpoint(net, out / "network.lzonet")
    summary = {
        "status": status,
        "config": cfg.to_dict(),
        "mode_info": info,
        "num_updates": update,
        "epochs": epochs,
        "test_acc": epochs[-1]["test_acc"] if epochs else accuracy(net, test),
        "train_acc": epochs[-1]["train_acc"] if epochs else accuracy(net, train),
        "totals": totals,
        "mean_active_pct": (active_sum / update).tolist() if update else [None] * net.n_hidden,
        "data_digest": digest.hexdigest(),
        "metrics_digest": metrics_digest(metrics_path),
        "backward_speedup": None,
        "overall_speedup": None,
        "mac_ratio_backward": None,
    }
    if cfg.baseline:
        summary.update(_speedups(summary, cfg.baseline))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    if error is not None:
        raise error
    return summary


def default_output_dir(cfg):
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ENV)
    return Path(root if root else "runs") / cfg.name


# ---------------------------------------------------------------- analytic tables


def threshold_rows(mc_trials=1_000_000, seed=0):
    """Rows ``(family, m, delta, lo, hi, quadrature, mc, mc_se)``."""
    rows = []
    for i, ((name, m), val) in enumerate(sorted(thresholds.standard_thresholds().items())):
        dist = dists.by_name(name)
        mean, se = thresholds.empirical_threshold(dist, m, 1.0, mc_trials, rngmod.stream(seed, "mc", 10, i),
                                                  return_se=True)
        lo, hi = dist.support
        rows.append((name, m, 1.0, lo, hi, val, mean, se))
    delta = 0.05
    for j, (name, g, alpha, support) in enumerate([
        ("sigmoid", zo.SigmoidGrad(30.63), 1, None),
        ("fastsigmoid", zo.FastSigmoidGrad(100.0), -1, (-10.0, 10.0)),
    ]):
        lam = zo.derive_lambda(g, alpha, delta)
        support = support or lam.default_support()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ThresholdDivergenceWarning)
            val = thresholds.expected_threshold_tabulated(lam, support, 1, delta)
        mean, se = thresholds.empirical_threshold(lam.distribution(support), 1, delta, mc_trials,
                                                  rngmod.stream(seed, "mc", 11, j), return_se=True)
        rows.append((name, 1, delta, support[0], support[1], val, mean, se))
    return rows


def curve_rows(kind, deltas, u_min, u_max, points, mc_draws, seed=0, k=None, alpha=None):
    """Rows ``(kind, delta, u, value, mc_mean, mc_se)`` for one surrogate family."""
    rows = []
    for j, delta in enumerate(deltas):
        u = np.linspace(u_min, u_max, points)
        r = rngmod.stream(seed, "mc", 12, j)
        if kind in ("normal", "uniform", "laplace"):
            value = zo.expected_surrogate(kind, u, delta)
            sampler, cfg = dists.by_name(kind), zo.ZOConfig(delta)
        elif kind in ("sigmoid", "fastsigmoid"):
            if k is None:
                raise ConfigurationError(f"{kind} curves need --k")
            g = zo.SigmoidGrad(k) if kind == "sigmoid" else zo.FastSigmoidGrad(k)
            a = alpha if alpha is not None else (1 if kind == "sigmoid" else -1)
            lam = zo.derive_lambda(g, a, delta)
            from .verification import roundtrip_sampler
            value, sampler, cfg = g(u), roundtrip_sampler(lam), lam.zo_config()
        else:
            raise ConfigurationError(f"unknown curve kind {kind!r}")
        mean, se = zo.mc_expected_g2(u, sampler, cfg, mc_draws, r) if mc_draws else (u * np.nan, u * np.nan)
        rows.extend((kind, delta, float(a_), float(b), float(c), float(d)) for a_, b, c, d in zip(u, value, mean, se))
    return rows


@contextlib.contextmanager
def tampered(constant):
    """Temporarily corrupt a named constant (fault injection for ``verify``)."""
    if constant is None:
        yield
        return
    if constant != "a":
        raise ConfigurationError(f"unknown tamper target {constant!r}")
    saved = zo.SIGMOID_A
    zo.SIGMOID_A = saved * 1.05
    try:
        yield
    finally:
        zo.SIGMOID_A = saved


# ---------------------------------------------------------------- CLI


def _write_csv(header, rows, stream):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def cmd_train(args):
    cfg = ExperimentConfig.from_json(args.config)
    if args.baseline:
        cfg.baseline = args.baseline
    if args.epochs is not None:
        cfg.epochs = args.epochs
    out = Path(args.output_dir) if args.output_dir else default_output_dir(cfg)
    try:
        summary = run_training(cfg, out, log=lambda s: print(s, file=sys.stderr))
    except TrainingError as exc:
        print(f"error: training diverged at update {exc.update}: {exc}", file=sys.stderr)
        return 3
    print(json.dumps({k: summary[k] for k in ("test_acc", "train_acc", "num_updates", "backward_speedup",
                                               "mac_ratio_backward")}))
    print(f"wrote {out}", file=sys.stderr)
    return 0


def cmd_thresholds(args):
    rows = threshold_rows(args.mc_trials, args.seed)
    _write_csv(["family", "m", "delta", "support_lo", "support_hi", "quadrature", "monte_carlo", "mc_se"], rows,
               sys.stdout)
    return 0


def cmd_curves(args):
    deltas = [float(d) for d in args.delta.split(",")]
    rows = curve_rows(args.kind, deltas, args.u_min, args.u_max, args.points, args.mc_draws, args.seed, args.k,
                      args.alpha)
    _write_csv(["kind", "delta", "u", "value", "mc_mean", "mc_se"], rows, sys.stdout)
    return 0


def cmd_verify(args):
    from .verification import run_checks

    t0 = time.perf_counter()
    with tampered(args.tamper):
        results = run_checks(args.level, args.seed)
    failed = [r for r in results if r.gating and not r.passed]
    for r in results:
        print(r.line())
    print(f"{len(results) - len(failed)}/{len(results)} checks ok, {len(failed)} failed "
          f"({time.perf_counter() - t0:.1f} s)")
    if failed:
        print("failed: " + ", ".join(r.name for r in failed))
    return 1 if failed else 0


def build_parser():
    p = argparse.ArgumentParser(prog="localzo", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a JSON config")
    t.add_argument("config")
    t.add_argument("--output-dir")
    t.add_argument("--baseline", help="run directory of a paired surrogate run")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    th = sub.add_parser("thresholds", help="expected back-propagation thresholds as CSV")
    th.add_argument("--mc-trials", type=int, default=1_000_000)
    th.add_argument("--seed", type=int, default=0)
    th.set_defaults(func=cmd_thresholds)

    c = sub.add_parser("curves", help="expected surrogate curves with a Monte-Carlo column")
    c.add_argument("--kind", default="normal", choices=["normal", "uniform", "laplace", "sigmoid", "fastsigmoid"])
    c.add_argument("--delta", default="0.05,0.5,1")
    c.add_argument("--u-min", type=float, default=-3.0)
    c.add_argument("--u-max", type=float, default=3.0)
    c.add_argument("--points", type=int, default=121)
    c.add_argument("--mc-draws", type=int, default=100_000)
    c.add_argument("--k", type=float)
    c.add_argument("--alpha", type=int)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_curves)

    v = sub.add_parser("verify", help="run the invariant checks")
    v.add_argument("level", choices=["quick", "full"])
    v.add_argument("--tamper", choices=["a"], help="corrupt a constant to confirm the checks catch it")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
