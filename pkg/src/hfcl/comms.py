"""Link delays, bandwidth allocation and symbol-exact overhead accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError

BEFORE_TRAINING = "before_training"
DURING_TRAINING = "during_training"
PHASES = (BEFORE_TRAINING, DURING_TRAINING)
UPLINK = "uplink"
DOWNLINK = "downlink"


def _linear_snr(snr_db) -> np.ndarray:
    return 10.0 ** (np.asarray(snr_db, dtype=np.float64) / 10.0)


def delay(d_k: float, bandwidth: float, snr_db: float) -> float:
    """Seconds to push ``d_k`` symbols at rate ``B ln(1 + SNR)``."""
    if bandwidth <= 0:
        raise ConfigurationError(f"bandwidth must be positive, got {bandwidth}")
    snr = float(_linear_snr(snr_db))
    if snr <= 0:
        raise ConfigurationError("SNR must be positive")
    return d_k / (bandwidth * math.log1p(snr))


@dataclass(frozen=True)
class LinkBudget:
    total_bandwidth: float
    snr_db: Sequence[float]
    d: Sequence[float]

    def __post_init__(self):
        if not self.total_bandwidth > 0:
            raise ConfigurationError("total bandwidth must be positive")
        if len(self.snr_db) != len(self.d) or not self.d:
            raise ConfigurationError("need one SNR per client and at least one client")
        if any(x < 1 for x in self.d):
            raise ConfigurationError("every client must send at least one symbol")
        if not all(math.isfinite(s) for s in self.snr_db):
            raise ConfigurationError("SNRs must be finite")


def allocate_bandwidth(budget: LinkBudget) -> np.ndarray:
    """Min-max delay split of the total bandwidth.

    Each delay is strictly decreasing in its own bandwidth, so the optimum
    under ``sum(B_k) = B`` equalizes all delays: ``B_k ∝ d_k / ln(1 + SNR_k)``.
    """
    w = np.asarray(budget.d, dtype=np.float64) / np.log1p(_linear_snr(budget.snr_db))
    return budget.total_bandwidth * w / w.sum()


def delays(budget: LinkBudget, bandwidths) -> np.ndarray:
    return np.array([delay(d, b, s) for d, b, s in zip(budget.d, bandwidths, budget.snr_db)])


def blocks(symbols: int, block_size: int = 1000) -> float:
    """Symbols expressed in transmission blocks of ``block_size`` symbols."""
    return symbols / block_size


def overhead_cl(dataset_symbols: int) -> int:
    return int(dataset_symbols)


def overhead_fl(T: int, P: int, K: int) -> int:
    return 2 * int(T) * int(P) * int(K)


def overhead_hfcl(L: int, d_inactive, T: int, P: int, K: int) -> int:
    """``L d + 2 T P (K - L)``.

    ``d_inactive`` is either the common per-client symbol count or a list of
    the L inactive clients' counts, in which case their sum replaces ``L d``.
    """
    if not 0 <= L <= K:
        raise ConfigurationError(f"need 0 <= L <= K, got L={L}, K={K}")
    if isinstance(d_inactive, (list, tuple, np.ndarray)):
        if len(d_inactive) != L:
            raise ConfigurationError("need one dataset size per inactive client")
        data = int(sum(int(d) for d in d_inactive))
    else:
        data = int(L) * int(d_inactive)
    return data + 2 * int(T) * int(P) * (int(K) - int(L))


@dataclass
class LedgerEntry:
    round: int
    direction: str
    symbols: int
    phase: str
    client: int | None = None


@dataclass
class OverheadLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    before_training: int = 0
    during_training: int = 0

    @property
    def total(self) -> int:
        return self.before_training + self.during_training

    def record(self, round: int, direction: str, symbols: int, phase: str, client: int | None = None):
        return ledger_record(self, round, direction, symbols, phase, client)

    def round_totals(self, round: int) -> tuple[int, int]:
        """(uplink, downlink) symbols charged to one round."""
        up = sum(e.symbols for e in self.entries if e.round == round and e.direction == UPLINK)
        down = sum(e.symbols for e in self.entries if e.round == round and e.direction == DOWNLINK)
        return up, down

    def summary(self) -> dict:
        return {
            "before_training": self.before_training,
            "during_training": self.during_training,
            "total": self.total,
            "blocks_1000": self.total / 1000.0,
        }


def ledger_record(ledger: OverheadLedger, round: int, direction: str, symbols: int,
                  phase: str, client: int | None = None) -> OverheadLedger:
    if symbols < 0:
        raise ConfigurationError("symbol counts are nonnegative")
    if phase not in PHASES:
        raise ConfigurationError(f"phase must be one of {PHASES}")
    if direction not in (UPLINK, DOWNLINK):
        raise ConfigurationError(f"direction must be {UPLINK!r} or {DOWNLINK!r}")
    ledger.entries.append(LedgerEntry(int(round), direction, int(symbols), phase, client))
    if phase == BEFORE_TRAINING:
        ledger.before_training += int(symbols)
    else:
        ledger.during_training += int(symbols)
    return ledger
