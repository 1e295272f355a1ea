"""scikit-learn wrapper around the training schemes."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import model as M
from .data import Dataset, partition
from .schemes import SCHEMES, SchemeConfig, make_clients, run_scheme
from .validation import check_choice, check_float, check_int, check_optional_bits


class HFCLClassifier(ClassifierMixin, BaseEstimator):
    """Dense softmax classifier trained by one of the distributed schemes.

    ``fit`` splits the rows over ``n_clients`` simulated clients, the first
    ``n_inactive`` of which ship their data to the server, and runs ``T``
    communication rounds. After fitting, ``history_`` holds the per-round
    records and ``ledger_`` the symbol counts.
    """

    def __init__(self, scheme="hfcl", n_clients=10, n_inactive=5, hidden=(32,), T=100, eta0=0.5,
                 eta_halving_period=30, minibatch=128, snr_theta_db=20.0, quant_bits=8,
                 partition_mode="iid", Q=None, random_state=0):
        self.scheme = scheme
        self.n_clients = n_clients
        self.n_inactive = n_inactive
        self.hidden = hidden
        self.T = T
        self.eta0 = eta0
        self.eta_halving_period = eta_halving_period
        self.minibatch = minibatch
        self.snr_theta_db = snr_theta_db
        self.quant_bits = quant_bits
        self.partition_mode = partition_mode
        self.Q = Q
        self.random_state = random_state

    def _check_params(self):
        check_choice("scheme", self.scheme, SCHEMES)
        K = check_int("n_clients", self.n_clients, 1)
        L = check_int("n_inactive", self.n_inactive, 0, K)
        hidden = tuple(check_int("hidden", h, 1) for h in self.hidden)
        snr = math.inf if self.snr_theta_db is None else check_float(
            "snr_theta_db", self.snr_theta_db, allow_inf=True)
        cfg = SchemeConfig(
            scheme=self.scheme, T=check_int("T", self.T, 1),
            eta0=check_float("eta0", self.eta0, 0.0, strict=True),
            eta_halving_period=self.eta_halving_period, minibatch=self.minibatch,
            Q=self.Q, snr_theta_db=snr, quant_bits=check_optional_bits("quant_bits", self.quant_bits),
            seed=check_int("random_state", self.random_state, 0),
        )
        return K, L, hidden, cfg

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        K, L, hidden, cfg = self._check_params()
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        labels = self._encoder.transform(y)
        n_classes = max(len(self.classes_), 2)
        self.n_features_in_ = X.shape[1]
        data = Dataset(X, labels.astype(np.int64), n_classes, (1, X.shape[1]))
        part = partition(data, K, self.partition_mode, cfg.seed)
        arch = M.ModelArch((X.shape[1], *hidden, n_classes))
        if self.scheme == "cl":
            L = K
        elif self.scheme in ("fl", "fedavg", "fedprox"):
            L = 0
        clients = make_clients(data, part, L, arch.n_params)
        result = run_scheme(cfg, arch, data, clients)
        self.arch_ = arch
        self.coef_ = result.theta
        self.history_ = result.records
        self.ledger_ = result.ledger
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        proba = M.forward(self.arch_, self.coef_, X)
        return proba[:, :len(self.classes_)]

    def predict(self, X):
        idx = np.argmax(self.predict_proba(X), axis=1)
        return self.classes_[idx]
