"""Command-line experiment runner.

Usage::

    hfcl run CONFIG [--output-dir DIR] [--seed-override S ...]
    hfcl overhead CONFIG [--output-dir DIR]
    hfcl verify [--seed S]

Exit codes: 0 success, 1 verification checks failed, 2 configuration
error, 3 numeric error during training, 4 I/O or data-format error.

A config is a JSON object. Only ``scheme`` is required; every other key
has the default shown in :data:`DEFAULTS` (nested sections too). JSON has
no infinity, so ``null`` for ``snr_theta_db`` means a noise-free link and
``null`` for ``quant_bits`` means no quantization. See
``configs/`` and the README for annotated examples.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import difflib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import analysis, comms
from .data import Dataset, load_idx, partition, split_holdout, synth_classification
from .exceptions import ConfigurationError, DataFormatError, NumericError
from .model import ACTIVATIONS, ModelArch
from .schemes import SCHEMES, SNR_REFERENCES, SchemeConfig, make_clients, run_scheme
from .validation import check_choice, check_float, check_int, check_optional_bits

CSV_HEADER = ("t", "scheme", "seed", "accuracy_pct", "train_loss", "uplink_symbols",
              "downlink_symbols", "phase")
SWEEP_PARAMS = ("L", "quant_bits", "snr_theta_db", "snr_data_db", "scheme", "partition_mode",
                "eta0", "N", "mu")
DATASET_KINDS = ("synthetic", "idx", "geometry")

EXIT_OK, EXIT_CHECKS_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


@dataclass(frozen=True)
class DatasetSpec:
    """Where the samples come from.

    ``synthetic`` draws Gaussian clusters; ``idx`` reads MNIST-style files;
    ``geometry`` only describes sizes and is accepted by ``overhead`` alone.
    """

    kind: str = "synthetic"
    n: int = 5000
    classes: int = 10
    dim: int = 64
    mean_norm: float = 3.0
    n_test: int = 1000
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    input_shape: tuple[int, int] | None = None
    label_symbols: int = 1


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    labels_per_client: int | None = None


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple


@dataclass(frozen=True)
class OverheadSpec:
    """``P`` overrides the parameter count; ``per_client=False`` charges one model exchange per round."""

    P: int | None = None
    per_client: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    scheme: str
    K: int = 10
    L: int = 0
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    snr_theta_db: float = 20.0
    snr_data_db: float | None = None
    quant_bits: int | None = 5
    T: int = 100
    eta0: float = 0.001
    eta_halving_period: int | None = 30
    minibatch: int | None = 128
    Q: int | None = None
    N: int = 1
    mu: float | None = None
    gamma: float = 0.1
    snr_reference: str = "vector"
    mass_weighted_variance: bool = False
    seeds: tuple[int, ...] = (0,)
    output: str = "results"
    on_divergence: str = "error"
    sweep: SweepSpec | None = None
    overhead: OverheadSpec = field(default_factory=OverheadSpec)
    analysis: bool = False


DEFAULTS = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
            for f in dataclasses.fields(ExperimentConfig) if f.name != "scheme"}


# common spellings people reach for, mapped to the real key
ALIASES = {"learning_rate": "eta0", "lr": "eta0", "eta": "eta0", "rounds": "T", "iterations": "T",
           "clients": "K", "num_clients": "K", "inactive": "L", "bits": "quant_bits",
           "batch_size": "minibatch", "snr": "snr_theta_db", "seed": "seeds", "local_steps": "N"}


def _reject_unknown(section: str, raw: dict, allowed) -> None:
    for key in raw:
        if key not in allowed:
            known = {a: f for a, f in ALIASES.items() if f in allowed}
            hint = difflib.get_close_matches(key, list(allowed) + list(known), n=1)
            hint = [known.get(h, h) for h in hint]
            where = f"{section}.{key}" if section else key
            tip = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigurationError(f"unknown config key {where!r}{tip}")


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _opt(check, name, value, *args, **kw):
    return None if value is None else check(name, value, *args, **kw)


def _parse_dataset(raw) -> DatasetSpec:
    if not isinstance(raw, dict):
        raise ConfigurationError("dataset must be an object")
    _reject_unknown("dataset", raw, _field_names(DatasetSpec))
    spec = replace(DatasetSpec(), **raw)
    check_choice("dataset.kind", spec.kind, DATASET_KINDS)
    shape = spec.input_shape
    if shape is not None:
        if not isinstance(shape, (list, tuple)) or len(shape) != 2:
            raise ConfigurationError("dataset.input_shape must be [rows, cols]")
        shape = (check_int("dataset.input_shape[0]", shape[0], 1), check_int("dataset.input_shape[1]", shape[1], 1))
    spec = replace(
        spec,
        n=check_int("dataset.n", spec.n, 1),
        classes=check_int("dataset.classes", spec.classes, 2),
        dim=check_int("dataset.dim", spec.dim, 1),
        mean_norm=check_float("dataset.mean_norm", spec.mean_norm, 0.0, strict=True),
        n_test=check_int("dataset.n_test", spec.n_test, 1),
        input_shape=shape,
        label_symbols=check_int("dataset.label_symbols", spec.label_symbols, 0),
    )
    if spec.kind == "synthetic" and spec.dim < spec.classes:
        raise ConfigurationError("dataset.dim must be >= dataset.classes for synthetic data")
    if spec.kind == "idx" and not (spec.train_images and spec.train_labels):
        raise ConfigurationError("dataset.train_images and dataset.train_labels are required for kind 'idx'")
    if spec.kind == "geometry" and spec.input_shape is None:
        raise ConfigurationError("dataset.input_shape is required for kind 'geometry'")
    return spec


def _parse_partition(raw) -> PartitionSpec:
    if not isinstance(raw, dict):
        raise ConfigurationError("partition must be an object")
    _reject_unknown("partition", raw, _field_names(PartitionSpec))
    spec = replace(PartitionSpec(), **raw)
    check_choice("partition.mode", spec.mode, ("iid", "noniid"))
    return replace(spec, labels_per_client=_opt(check_int, "partition.labels_per_client",
                                                spec.labels_per_client, 1))


def _parse_sweep(raw) -> SweepSpec | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigurationError("sweep must be an object")
    _reject_unknown("sweep", raw, _field_names(SweepSpec))
    if "param" not in raw or "values" not in raw:
        raise ConfigurationError("sweep needs both 'param' and 'values'")
    check_choice("sweep.param", raw["param"], SWEEP_PARAMS)
    values = raw["values"]
    if not isinstance(values, (list, tuple)) or not values:
        raise ConfigurationError("sweep.values must be a nonempty list")
    return SweepSpec(raw["param"], tuple(values))


def _parse_overhead(raw) -> OverheadSpec:
    if not isinstance(raw, dict):
        raise ConfigurationError("overhead must be an object")
    _reject_unknown("overhead", raw, _field_names(OverheadSpec))
    spec = replace(OverheadSpec(), **raw)
    if not isinstance(spec.per_client, bool):
        raise ConfigurationError("overhead.per_client must be true or false")
    return replace(spec, P=_opt(check_int, "overhead.P", spec.P, 1))


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every field and cross-field constraint; returns a normalized copy."""
    check_choice("scheme", cfg.scheme, SCHEMES)
    K = check_int("K", cfg.K, 1)
    L = check_int("L", cfg.L, 0)
    if L > K:
        raise ConfigurationError(f"L must satisfy 0 <= L <= K, got L={L} > K={K}")
    if cfg.scheme in ("fl", "fedavg", "fedprox") and L != 0:
        raise ConfigurationError(f"scheme {cfg.scheme!r} needs every client active (L = 0); "
                                 "use 'fl_partial' to drop inactive clients")
    if cfg.scheme == "fl_partial" and L == K:
        raise ConfigurationError("fl_partial needs at least one active client (L < K)")
    hidden = cfg.hidden
    if not isinstance(hidden, (list, tuple)):
        raise ConfigurationError("hidden must be a list of layer widths")
    hidden = tuple(check_int(f"hidden[{i}]", h, 1) for i, h in enumerate(hidden))
    check_choice("activation", cfg.activation, ACTIVATIONS)
    if cfg.scheme in ("hfcl_icpc", "hfcl_sdt") and cfg.Q is None:
        raise ConfigurationError(f"scheme {cfg.scheme!r} requires Q (block size in symbols)")
    if cfg.scheme == "fedprox" and cfg.mu is None:
        raise ConfigurationError("scheme 'fedprox' requires mu (proximal weight)")
    seeds = cfg.seeds
    if not isinstance(seeds, (list, tuple)) or not seeds:
        raise ConfigurationError("seeds must be a nonempty list of integers")
    seeds = tuple(check_int(f"seeds[{i}]", s, 0) for i, s in enumerate(seeds))
    snr = math.inf if cfg.snr_theta_db is None else check_float("snr_theta_db", cfg.snr_theta_db,
                                                                 allow_inf=True)
    if not isinstance(cfg.mass_weighted_variance, bool) or not isinstance(cfg.analysis, bool):
        raise ConfigurationError("mass_weighted_variance and analysis must be true or false")
    if not isinstance(cfg.output, str) or not cfg.output:
        raise ConfigurationError("output must be a nonempty path")
    out = replace(
        cfg, K=K, L=L, hidden=hidden, seeds=seeds, snr_theta_db=snr,
        snr_data_db=_opt(check_float, "snr_data_db", cfg.snr_data_db),
        quant_bits=check_optional_bits("quant_bits", cfg.quant_bits),
        T=check_int("T", cfg.T, 1),
        eta0=check_float("eta0", cfg.eta0, 0.0, strict=True),
        eta_halving_period=_opt(check_int, "eta_halving_period", cfg.eta_halving_period, 1),
        minibatch=_opt(check_int, "minibatch", cfg.minibatch, 1),
        Q=_opt(check_int, "Q", cfg.Q, 1),
        N=check_int("N", cfg.N, 1),
        mu=_opt(check_float, "mu", cfg.mu, 0.0),
        gamma=check_float("gamma", cfg.gamma, 0.0, strict=True),
    )
    check_choice("snr_reference", out.snr_reference, SNR_REFERENCES)
    check_choice("on_divergence", out.on_divergence, ("error", "record"))
    if out.partition.mode == "noniid" and out.partition.labels_per_client is not None \
            and out.partition.labels_per_client > out.dataset.classes:
        raise ConfigurationError("partition.labels_per_client must be <= dataset.classes")
    if out.sweep is not None:
        for v in out.sweep.values:
            validate(apply_sweep(replace(out, sweep=None), out.sweep.param, v))
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    _reject_unknown("", raw, _field_names(ExperimentConfig))
    if "scheme" not in raw:
        raise ConfigurationError("missing required field 'scheme'")
    raw = dict(raw)
    if "dataset" in raw:
        raw["dataset"] = _parse_dataset(raw["dataset"])
    if "partition" in raw:
        raw["partition"] = _parse_partition(raw["partition"])
    if "sweep" in raw:
        raw["sweep"] = _parse_sweep(raw["sweep"])
    if "overhead" in raw:
        raw["overhead"] = _parse_overhead(raw["overhead"])
    return validate(ExperimentConfig(**raw))


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw)


def _plain(value):
    if isinstance(value, float) and math.isinf(value):
        return None
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def emit_config(cfg: ExperimentConfig) -> dict:
    """JSON-ready dict; ``config_from_dict(emit_config(c)) == c``."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = {k: _plain(v) for k, v in dataclasses.asdict(value).items()}
        out[f.name] = _plain(value)
    return out


def apply_sweep(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param == "partition_mode":
        return replace(cfg, partition=replace(cfg.partition, mode=value))
    return replace(cfg, **{param: value})


# ---------------------------------------------------------------- building runs

def load_datasets(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    spec = cfg.dataset
    if spec.kind == "synthetic":
        train = synth_classification(spec.n, spec.classes, spec.dim, seed, spec.mean_norm)
        test = synth_classification(spec.n_test, spec.classes, spec.dim, seed + 1000, spec.mean_norm,
                                    means_seed=seed)
        return train, test
    if spec.kind == "idx":
        train = load_idx(spec.train_images, spec.train_labels, spec.classes)
        if spec.test_images and spec.test_labels:
            return train, load_idx(spec.test_images, spec.test_labels, spec.classes)
        return split_holdout(train, spec.n_test, seed)
    raise ConfigurationError("dataset kind 'geometry' describes sizes only; use 'overhead' with it")


def scheme_config(cfg: ExperimentConfig, seed: int) -> SchemeConfig:
    return SchemeConfig(
        scheme=cfg.scheme, T=cfg.T, eta0=cfg.eta0, eta_halving_period=cfg.eta_halving_period,
        minibatch=cfg.minibatch, local_updates=cfg.N, Q=cfg.Q, gamma=cfg.gamma, mu=cfg.mu or 0.0,
        snr_theta_db=cfg.snr_theta_db, snr_data_db=cfg.snr_data_db, quant_bits=cfg.quant_bits,
        snr_reference=cfg.snr_reference, mass_weighted_variance=cfg.mass_weighted_variance, seed=seed,
    )


def build_arch(cfg: ExperimentConfig, train: Dataset) -> ModelArch:
    return ModelArch((train.inputs.shape[1], *cfg.hidden, train.n_classes), cfg.activation)


def run_single(cfg: ExperimentConfig, seed: int):
    """One seeded run; returns the scheme result and whether it diverged."""
    train, test = load_datasets(cfg, seed)
    arch = build_arch(cfg, train)
    part = partition(train, cfg.K, cfg.partition.mode, seed, cfg.partition.labels_per_client)
    n_inactive = cfg.K if cfg.scheme == "cl" else cfg.L
    clients = make_clients(train, part, n_inactive, arch.n_params, cfg.snr_theta_db, cfg.quant_bits)
    try:
        return run_scheme(scheme_config(cfg, seed), arch, train, clients, test), False
    except NumericError as exc:
        if cfg.on_divergence == "record" and getattr(exc, "partial", None) is not None:
            return exc.partial, True
        raise


@dataclass
class RunReport:
    config: ExperimentConfig
    rows: list[tuple]
    ledgers: dict[int, dict]
    csv_path: Path | None = None
    ledger_path: Path | None = None
    analysis_text: str | None = None


def _format_row(rec, scheme: str, seed: int) -> tuple:
    return (rec.t, scheme, seed, f"{rec.accuracy:.4f}", f"{rec.train_loss:.10g}",
            rec.symbols_uplink, rec.symbols_downlink, rec.phase)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_experiment(cfg: ExperimentConfig, output_dir=None, stem: str | None = None) -> list[RunReport]:
    """Run every seed (and sweep value); write one CSV and one ledger JSON per sweep point.

    Seeds run serially; rows are merged in seed order.
    """
    out_dir = Path(output_dir or cfg.output)
    points = [(None, cfg)] if cfg.sweep is None else [
        (v, validate(apply_sweep(replace(cfg, sweep=None), cfg.sweep.param, v))) for v in cfg.sweep.values
    ]
    reports = []
    for value, point in points:
        rows, ledgers = [], {}
        for seed in point.seeds:
            result, diverged = run_single(point, seed)
            rows.extend(_format_row(r, point.scheme, seed) for r in result.records)
            summary = result.ledger.summary()
            summary["rounds"] = len(result.records) - 1
            summary["diverged"] = diverged
            summary.update({k: v for k, v in result.details.items() if isinstance(v, (int, float))})
            ledgers[seed] = summary
        name = stem or point.scheme
        if cfg.sweep is not None:
            name = f"{name}_{cfg.sweep.param}={_plain(value)}"
        report = RunReport(point, rows, ledgers)
        report.csv_path = out_dir / f"{name}.csv"
        report.ledger_path = out_dir / f"{name}.ledger.json"
        if point.analysis:
            report.analysis_text, _ = analysis.verification_report()
        write_atomic(report.csv_path, _csv_text(rows))
        payload = {"config": emit_config(point), "ledger": {str(s): v for s, v in ledgers.items()}}
        if report.analysis_text is not None:
            payload["analysis"] = report.analysis_text
        write_atomic(report.ledger_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        reports.append(report)
    return reports


# ------------------------------------------------------------ overhead table

def _client_symbols(cfg: ExperimentConfig) -> tuple[list[int], int, int]:
    """Per-client dataset symbols (iid split sizes), symbols per sample, and P."""
    spec = cfg.dataset
    if spec.kind == "synthetic":
        n, sps, n_in = spec.n, spec.dim + spec.label_symbols, spec.dim
    elif spec.kind == "geometry":
        rows, cols = spec.input_shape
        n, sps, n_in = spec.n, rows * cols + spec.label_symbols, rows * cols
    else:
        train, _ = load_datasets(cfg, cfg.seeds[0])
        n, sps, n_in = len(train), train.symbols_per_sample, train.inputs.shape[1]
    if n < cfg.K:
        raise ConfigurationError(f"dataset.n = {n} is smaller than K = {cfg.K}")
    base, extra = divmod(n, cfg.K)
    sizes = [(base + (k < extra)) * sps for k in range(cfg.K)]
    P = cfg.overhead.P or ModelArch((n_in, *cfg.hidden, spec.classes)).n_params
    return sizes, sps, P


def emit_overhead_table(cfg: ExperimentConfig) -> list[dict]:
    """Closed-form symbol counts per scheme and phase; no training involved."""
    d, sps, P = _client_symbols(cfg)
    K, T = cfg.K, cfg.T
    model_K = (lambda k: k) if cfg.overhead.per_client else (lambda k: min(k, 1))
    Ls = [cfg.L]
    if cfg.sweep is not None and cfg.sweep.param == "L":
        Ls = [check_int("sweep L", v, 0, K) for v in cfg.sweep.values]

    def row(scheme, L, before, during):
        total = before + during
        return {"scheme": scheme, "L": L, "before_training": before, "during_training": during,
                "total_symbols": total, "blocks_1000": comms.blocks(total)}

    rows = [row("cl", K, comms.overhead_cl(sum(d)), 0),
            row("fl", 0, 0, comms.overhead_fl(T, P, model_K(K)))]
    for L in Ls:
        data = sum(d[:L])
        during = 2 * T * P * model_K(K - L)
        rows.append(row("hfcl", L, data, during))
        if cfg.Q is not None and L > 0:
            q = max(1, cfg.Q // sps)
            first = sum(min(q * sps, dk) for dk in d[:L])
            rows.append(row("hfcl_sdt", L, first, data - first + during))
    return rows


def format_overhead_table(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "blocks_1000": f"{r['blocks_1000']:.3f}"})
    return buf.getvalue()


# ---------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfcl", description="Hybrid federated/centralized learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train and write per-round CSV plus ledger JSON")
    run.add_argument("config")
    run.add_argument("--output-dir", default=None)
    run.add_argument("--seed-override", type=int, nargs="+", default=None,
                     help="replace the config's seed list")
    ovh = sub.add_parser("overhead", help="closed-form communication overhead table")
    ovh.add_argument("config")
    ovh.add_argument("--output-dir", default=None)
    ver = sub.add_parser("verify", help="numerical checks of the convergence theory")
    ver.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            text, ok = analysis.verification_report(seed=args.seed)
            sys.stdout.write(text)
            return EXIT_OK if ok else EXIT_CHECKS_FAILED
        cfg = parse_config(args.config)
        if args.command == "overhead":
            text = format_overhead_table(emit_overhead_table(cfg))
            sys.stdout.write(text)
            if args.output_dir:
                write_atomic(Path(args.output_dir) / "overhead.csv", text)
            return EXIT_OK
        if args.seed_override:
            cfg = validate(replace(cfg, seeds=tuple(args.seed_override)))
        for report in run_experiment(cfg, args.output_dir):
            final = {s: v["total"] for s, v in report.ledgers.items()}
            print(f"wrote {report.csv_path} ({len(report.rows)} rows); ledger totals {final}")
        return EXIT_OK
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
