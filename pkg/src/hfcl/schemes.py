"""Training protocols over a parameter server and K clients.

Every scheme is a seeded, round-synchronous state machine. One engine
(:func:`_run_rounds`) drives all the federated and hybrid variants; the
public ``run_*`` functions only configure it, which is what makes the
reduction identities (HFCL with no inactive clients is FL, and so on) hold
bit for bit.

Random streams are keyed by purpose and client id (see
:func:`hfcl.channel.rng_stream`), so adding or removing clients never
shifts another client's draws.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model as M
from .channel import (
    LinkSpec,
    NoiseBudget,
    aggregate,
    aggregated_uplink_variance,
    noise_variance_from_snr,
    perturb,
    quantize,
    rng_stream,
)
from .comms import BEFORE_TRAINING, DOWNLINK, DURING_TRAINING, UPLINK, OverheadLedger
from .data import Dataset, Partition, add_dataset_noise, dataset_symbols
from .exceptions import ConfigurationError, NumericError

SCHEMES = ("cl", "fl", "fedavg", "fedprox", "fl_partial", "hfcl", "hfcl_icpc", "hfcl_sdt")
ACTIVE = "active"
INACTIVE = "inactive"
SNR_REFERENCES = ("vector", "element")


@dataclass(frozen=True)
class SchemeConfig:
    """Knobs shared by every scheme.

    ``snr_reference`` decides how the variance from the model SNR is spread:
    ``"vector"`` treats it as the energy of the whole noise vector (each of
    the P entries gets ``var / P``), ``"element"`` applies it to every entry.
    ``noise_var`` bypasses the SNR and fixes the per-entry link variance.
    """

    scheme: str = "hfcl"
    T: int = 100
    eta0: float = 0.001
    eta_halving_period: int | None = 30
    minibatch: int | None = 128
    local_updates: int = 1
    Q: int | None = None
    gamma: float = 0.1
    mu: float = 0.0
    snr_theta_db: float = math.inf
    snr_data_db: float | None = None
    quant_bits: int | None = None
    noise_var: float | None = None
    snr_reference: str = "vector"
    mass_weighted_variance: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if not self.eta0 > 0:
            raise ConfigurationError("eta0 must be > 0")
        if self.eta_halving_period is not None and self.eta_halving_period < 1:
            raise ConfigurationError("eta_halving_period must be >= 1 or None")
        if self.minibatch is not None and self.minibatch < 1:
            raise ConfigurationError("minibatch must be >= 1 or None")
        if self.local_updates < 1:
            raise ConfigurationError("local_updates (N) must be >= 1")
        if self.Q is not None and self.Q < 1:
            raise ConfigurationError("Q must be >= 1")
        if self.mu < 0:
            raise ConfigurationError("mu must be >= 0")
        if self.snr_reference not in SNR_REFERENCES:
            raise ConfigurationError(f"snr_reference must be one of {SNR_REFERENCES}")
        if self.noise_var is not None and self.noise_var < 0:
            raise ConfigurationError("noise_var must be >= 0")
        if self.scheme in ("hfcl_icpc", "hfcl_sdt") and self.Q is None:
            raise ConfigurationError(f"scheme {self.scheme} needs Q (block size in symbols)")

    def eta(self, t: int) -> float:
        """Learning rate of round ``t`` (1-based), halved every period."""
        if self.eta_halving_period is None:
            return self.eta0
        return self.eta0 * 0.5 ** ((t - 1) // self.eta_halving_period)


@dataclass(frozen=True)
class ClientSpec:
    id: int
    role: str
    indices: np.ndarray
    link: LinkSpec = field(default_factory=LinkSpec)
    d_k: int = 0

    @property
    def size(self) -> int:
        return int(len(self.indices))


@dataclass
class RoundRecord:
    t: int
    theta_hash: str
    client_losses: dict[int, float]
    accuracy: float
    train_loss: float
    symbols_uplink: int
    symbols_downlink: int
    phase: str


@dataclass
class SchemeResult:
    scheme: str
    records: list[RoundRecord]
    ledger: OverheadLedger
    theta: np.ndarray
    arch: M.ModelArch
    details: dict = field(default_factory=dict)

    def accuracies(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.records])


def make_clients(dataset: Dataset, part: Partition, n_inactive: int, n_params: int,
                 snr_db: float = math.inf, quant_bits: int | None = None) -> list[ClientSpec]:
    """Clients ``0..L-1`` are inactive, the rest active."""
    K = part.k
    if not 0 <= n_inactive <= K:
        raise ConfigurationError(f"need 0 <= L <= K, got L={n_inactive}, K={K}")
    clients = []
    for k, idx in enumerate(part.assignments):
        role = INACTIVE if k < n_inactive else ACTIVE
        d_k = dataset_symbols(dataset, idx) if role == INACTIVE else n_params
        clients.append(ClientSpec(k, role, np.asarray(idx), LinkSpec(snr_db, quant_bits, f"client{k}"), d_k))
    return clients


def evaluate(arch: M.ModelArch, theta, testset: Dataset) -> float:
    """Percentage of test samples whose argmax class is right (ties -> lowest index)."""
    if arch.output_head != "softmax":
        raise ConfigurationError("evaluate needs a softmax classifier")
    pred = M.predict_labels(arch, theta, testset.inputs)
    return 100.0 * float(np.mean(pred == testset.labels))


def theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype=np.float64).tobytes()).hexdigest()[:16]


def initial_theta(arch: M.ModelArch, seed: int) -> np.ndarray:
    return arch.init_params(rng_stream(seed, "init"))


class _ClientData:
    """A client's samples as seen by whoever trains on them."""

    def __init__(self, dataset: Dataset, spec: ClientSpec, seed: int, noisy_snr: float | None,
                 per_element: bool):
        local = dataset.subset(spec.indices)
        if noisy_snr is not None:
            local = add_dataset_noise(local, noisy_snr, rng_stream(seed, "data", spec.id), per_element)
        self.X = local.inputs
        self.Y = local.targets()
        self.size = len(local)
        self.batch_rng = rng_stream(seed, "batch", spec.id)

    def batch(self, minibatch: int | None, available: int | None = None):
        n = self.size if available is None else min(available, self.size)
        if minibatch is None or minibatch >= n:
            return self.X[:n], self.Y[:n]
        idx = np.sort(self.batch_rng.choice(n, size=minibatch, replace=False))
        return self.X[idx], self.Y[idx]


def _link_variance(cfg: SchemeConfig, theta: np.ndarray) -> float:
    if cfg.noise_var is not None:
        return float(cfg.noise_var)
    var = noise_variance_from_snr(theta, cfg.snr_theta_db)
    if cfg.snr_reference == "vector":
        var /= theta.shape[0]
    return var


def _pooled_loss(arch: M.ModelArch, theta: np.ndarray, data: Sequence[_ClientData]) -> float:
    X = np.concatenate([d.X for d in data])
    Y = np.concatenate([d.Y for d in data])
    return M.loss(arch, theta, X, Y)


def _record(t, arch, theta, testset, train_data, losses, ledger, phase) -> RoundRecord:
    up, down = ledger.round_totals(t)
    acc = evaluate(arch, theta, testset) if testset is not None else float("nan")
    return RoundRecord(t, theta_hash(theta), losses, acc, _pooled_loss(arch, theta, train_data),
                       up, down, phase)


def sdt_block_samples(cfg: SchemeConfig, dataset: Dataset) -> int:
    """Samples per SDT block: ``floor(Q / symbols_per_sample)``, at least one."""
    return max(1, int(cfg.Q) // dataset.symbols_per_sample)


def sdt_blocks(cfg: SchemeConfig, dataset: Dataset, clients: Sequence[ClientSpec]) -> int:
    q = sdt_block_samples(cfg, dataset)
    sizes = [c.size for c in clients if c.role == INACTIVE]
    return max((math.ceil(s / q) for s in sizes), default=1)


def sdt_window(t: int, block_samples: int, size: int) -> int:
    """Samples of an inactive client available at the PS in round ``t``."""
    return min(t * block_samples, size)


def icpc_local_steps(cfg: SchemeConfig, clients: Sequence[ClientSpec]) -> int:
    d_max = max((c.d_k for c in clients if c.role == INACTIVE), default=0)
    if d_max == 0:
        return 1
    n = math.ceil(d_max / cfg.Q)
    if n < 1:
        raise ConfigurationError(f"ICpC needs N >= 1, got {n}")
    return n


def _run_rounds(cfg: SchemeConfig, arch: M.ModelArch, dataset: Dataset, clients: Sequence[ClientSpec],
                testset: Dataset | None, *, first_round_steps: int = 1, sdt: bool = False,
                fedprox: bool = False, theta0: np.ndarray | None = None) -> SchemeResult:
    P = arch.n_params
    seed = cfg.seed
    spans = arch.layer_spans()
    per_element = cfg.snr_reference == "element"
    active = [c for c in clients if c.role == ACTIVE]
    inactive = [c for c in clients if c.role == INACTIVE]
    data = {
        c.id: _ClientData(dataset, c, seed, cfg.snr_data_db if c.role == INACTIVE else None, per_element)
        for c in clients
    }
    sizes = {c.id: c.size for c in clients}
    d_total = float(sum(sizes.values()))
    up_rng = {c.id: rng_stream(seed, "uplink", c.id) for c in active}
    down_rng = {c.id: rng_stream(seed, "downlink", c.id) for c in active}
    prox_rng = {c.id: rng_stream(seed, "fedprox", c.id) for c in active}

    theta = initial_theta(arch, seed) if theta0 is None else np.array(theta0, dtype=np.float64)
    received = {c.id: theta.copy() for c in active}
    ledger = OverheadLedger()
    train_data = [data[c.id] for c in clients]

    block_q = sdt_block_samples(cfg, dataset) if sdt else 0
    for c in inactive:
        first = sdt_window(1, block_q, c.size) if sdt else c.size
        ledger.record(0, UPLINK, first * dataset.symbols_per_sample, BEFORE_TRAINING, c.id)
    records = [_record(0, arch, theta, testset, train_data, {}, ledger, BEFORE_TRAINING)]

    try:
        for t in range(1, cfg.T + 1):
            eta = cfg.eta(t)
            link_var = _link_variance(cfg, theta) if active else 0.0
            budget = NoiseBudget(
                aggregated_uplink_variance([(sizes[c.id], link_var) for c in active], d_total,
                                           cfg.mass_weighted_variance),
                link_var,
            )
            losses: dict[int, float] = {}
            local_models: list[tuple[float, np.ndarray]] = []

            for c in inactive:
                avail = sdt_window(t, block_q, c.size) if sdt else None
                if sdt and 2 <= t and (t - 1) * block_q < c.size:
                    new = avail - (t - 1) * block_q
                    ledger.record(t, UPLINK, new * dataset.symbols_per_sample, DURING_TRAINING, c.id)
                X, Y = data[c.id].batch(cfg.minibatch, avail)
                losses[c.id] = M.loss(arch, theta, X, Y)
                g = M.regularized_gradient(arch, theta, X, Y, budget.inactive_var)
                local_models.append((sizes[c.id], theta - eta * g))

            for c in active:
                start = received[c.id]
                if t == 1 and first_round_steps > 1:
                    steps = first_round_steps
                elif fedprox:
                    steps = int(prox_rng[c.id].integers(1, cfg.local_updates + 1))
                else:
                    steps = cfg.local_updates
                local = start.copy()
                for _ in range(steps):
                    X, Y = data[c.id].batch(cfg.minibatch)
                    g = M.regularized_gradient(arch, local, X, Y, budget.active_var)
                    if cfg.mu:
                        g = g + cfg.mu * (local - start)
                    local = local - eta * g
                losses[c.id] = M.loss(arch, local, X, Y)
                sent = perturb(quantize(local, cfg.quant_bits, spans), link_var, up_rng[c.id])
                ledger.record(t, UPLINK, P, DURING_TRAINING, c.id)
                local_models.append((sizes[c.id], sent))

            # inactive models first, then active, in client order; aggregate() anchors on the first
            theta = aggregate(local_models)
            M.check_theta(arch, theta)

            for c in active:
                received[c.id] = perturb(quantize(theta, cfg.quant_bits, spans), link_var,
                                         down_rng[c.id])
                ledger.record(t, DOWNLINK, P, DURING_TRAINING, c.id)
            records.append(_record(t, arch, theta, testset, train_data, losses, ledger, DURING_TRAINING))
    except NumericError as exc:
        # keep the finished rounds so callers can see how far a diverging run got
        exc.partial = SchemeResult(cfg.scheme, records, ledger, theta, arch, {"diverged_at": len(records)})
        raise

    return SchemeResult(cfg.scheme, records, ledger, theta, arch)


def _require_roles(clients, *, all_active=False):
    if not clients:
        raise ConfigurationError("need at least one client")
    if all_active and any(c.role != ACTIVE for c in clients):
        raise ConfigurationError("this scheme needs every client to be active")


def run_cl(cfg: SchemeConfig, arch: M.ModelArch, dataset: Dataset, clients: Sequence[ClientSpec] | None = None,
           testset: Dataset | None = None) -> SchemeResult:
    """Minibatch GD at the PS on the pooled data; every dataset is uploaded up front."""
    if clients is None:
        clients = [ClientSpec(0, INACTIVE, np.arange(len(dataset)))]
    per_element = cfg.snr_reference == "element"
    parts = [_ClientData(dataset, c, cfg.seed, cfg.snr_data_db, per_element) for c in clients]
    X = np.concatenate([p.X for p in parts])
    Y = np.concatenate([p.Y for p in parts])
    pooled_rng = rng_stream(cfg.seed, "batch", "cl")

    ledger = OverheadLedger()
    for c in clients:
        ledger.record(0, UPLINK, dataset_symbols(dataset, c.indices), BEFORE_TRAINING, c.id)
    theta = initial_theta(arch, cfg.seed)
    records = [_record(0, arch, theta, testset, parts, {}, ledger, BEFORE_TRAINING)]
    n = X.shape[0]
    for t in range(1, cfg.T + 1):
        if cfg.minibatch is None or cfg.minibatch >= n:
            Xb, Yb = X, Y
        else:
            idx = np.sort(pooled_rng.choice(n, size=cfg.minibatch, replace=False))
            Xb, Yb = X[idx], Y[idx]
        loss_value = M.loss(arch, theta, Xb, Yb)
        theta = theta - cfg.eta(t) * M.gradient(arch, theta, Xb, Yb)
        records.append(_record(t, arch, theta, testset, parts, {-1: loss_value}, ledger, DURING_TRAINING))
    return SchemeResult("cl", records, ledger, theta, arch)


def run_fl(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """One regularized GD step per client per round, noisy uplink and downlink."""
    _require_roles(clients, all_active=True)
    return _run_rounds(replace(cfg, local_updates=1, mu=0.0), arch, dataset, clients, testset)


def run_fedavg(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """``local_updates`` GD steps between aggregations."""
    _require_roles(clients, all_active=True)
    return _run_rounds(cfg, arch, dataset, clients, testset)


def run_fedprox(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """Local step count drawn from [1, N] per client and round, plus a proximal pull of weight mu."""
    _require_roles(clients, all_active=True)
    return _run_rounds(cfg, arch, dataset, clients, testset, fedprox=True)


def run_fl_partial(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """FL over the active clients only; inactive clients' data is never used."""
    active = [c for c in clients if c.role == ACTIVE]
    if not active:
        raise ConfigurationError("no active clients: FL cannot be performed (K - L = 0)")
    return _run_rounds(replace(cfg, local_updates=1, mu=0.0), arch, dataset, active, testset)


def run_hfcl(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """Active clients train locally; the PS trains for the inactive ones; PS aggregates all K."""
    _require_roles(clients)
    return _run_rounds(replace(cfg, local_updates=1, mu=0.0), arch, dataset, clients, testset)


def run_hfcl_icpc(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """HFCL where active clients take ``ceil(max d_k / Q)`` steps in the first round."""
    _require_roles(clients)
    if cfg.Q is None:
        raise ConfigurationError("hfcl_icpc needs Q")
    n = icpc_local_steps(cfg, clients)
    result = _run_rounds(replace(cfg, local_updates=1, mu=0.0), arch, dataset, clients, testset,
                         first_round_steps=n)
    result.details["N"] = n
    return result


def run_hfcl_sdt(cfg, arch, dataset, clients, testset=None) -> SchemeResult:
    """HFCL where inactive datasets arrive block by block and the PS trains on the prefix."""
    _require_roles(clients)
    if cfg.Q is None:
        raise ConfigurationError("hfcl_sdt needs Q")
    n = sdt_blocks(cfg, dataset, clients)
    if not n < cfg.gamma * cfg.T:
        raise ConfigurationError(
            f"SDT needs N = {n} blocks < gamma * T = {cfg.gamma} * {cfg.T}; increase Q or T"
        )
    result = _run_rounds(replace(cfg, local_updates=1, mu=0.0), arch, dataset, clients, testset, sdt=True)
    result.details["N"] = n
    result.details["block_samples"] = sdt_block_samples(cfg, dataset)
    return result


RUNNERS = {
    "cl": run_cl,
    "fl": run_fl,
    "fedavg": run_fedavg,
    "fedprox": run_fedprox,
    "fl_partial": run_fl_partial,
    "hfcl": run_hfcl,
    "hfcl_icpc": run_hfcl_icpc,
    "hfcl_sdt": run_hfcl_sdt,
}


def run_scheme(cfg: SchemeConfig, arch: M.ModelArch, dataset: Dataset, clients, testset=None) -> SchemeResult:
    return RUNNERS[cfg.scheme](cfg, arch, dataset, clients, testset)
