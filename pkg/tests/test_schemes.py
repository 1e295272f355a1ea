import math

import pytest

from hfcl.comms import overhead_cl, overhead_fl, overhead_hfcl
from hfcl.data import partition
from hfcl.exceptions import ConfigurationError, NumericError
from hfcl.model import ModelArch
from hfcl.schemes import (
    SchemeConfig,
    icpc_local_steps,
    make_clients,
    run_cl,
    run_fedavg,
    run_fedprox,
    run_fl,
    run_fl_partial,
    run_hfcl,
    run_hfcl_icpc,
    run_hfcl_sdt,
    run_scheme,
    sdt_blocks,
)

ARCH = ModelArch((8, 6, 4))


def setup(small_data, L, K=4, mode="iid", seed=0):
    train, test = small_data
    part = partition(train, K, mode, seed)
    return train, test, make_clients(train, part, L, ARCH.n_params)


def cfg(**kw):
    base = dict(T=6, eta0=0.3, minibatch=32, snr_theta_db=20.0, quant_bits=6, seed=1)
    base.update(kw)
    return SchemeConfig(**base)


def hashes(result):
    return [r.theta_hash for r in result.records]


def test_runs_are_deterministic_per_seed(small_data):
    train, test, clients = setup(small_data, 2)
    a = run_hfcl(cfg(), ARCH, train, clients, test)
    b = run_hfcl(cfg(), ARCH, train, clients, test)
    c = run_hfcl(cfg(seed=2), ARCH, train, clients, test)
    assert hashes(a) == hashes(b)
    assert hashes(a) != hashes(c)


def test_records_reconcile_with_ledger(small_data):
    train, test, clients = setup(small_data, 2)
    res = run_hfcl_sdt(cfg(Q=9 * 50, T=40), ARCH, train, clients, test)
    assert len(res.records) == 41 and res.records[0].phase == "before_training"
    total = sum(r.symbols_uplink + r.symbols_downlink for r in res.records)
    assert total == res.ledger.total


def test_ledger_matches_closed_forms(small_data):
    train, test, clients = setup(small_data, 2)
    P, T, K = ARCH.n_params, 6, 4
    d = [c.d_k for c in clients[:2]]
    assert run_hfcl(cfg(), ARCH, train, clients, test).ledger.total == overhead_hfcl(2, d, T, P, K)
    _, _, all_active = setup(small_data, 0)
    assert run_fl(cfg(), ARCH, train, all_active, test).ledger.total == overhead_fl(T, P, K)
    assert run_cl(cfg(), ARCH, train, None, test).ledger.total == overhead_cl(len(train) * 9)


def test_sdt_spreads_upload_but_keeps_total(small_data):
    train, test, clients = setup(small_data, 2)
    base = run_hfcl(cfg(T=40), ARCH, train, clients, test).ledger
    sdt = run_hfcl_sdt(cfg(T=40, Q=9 * 50 + 5), ARCH, train, clients, test)
    assert sdt.ledger.total == base.total
    assert sdt.ledger.before_training == 2 * 50 * 9
    assert sdt.details["N"] == 3 and sdt.details["block_samples"] == 50


def test_sdt_feasibility(small_data):
    train, test, clients = setup(small_data, 2)
    with pytest.raises(ConfigurationError, match="gamma"):
        run_hfcl_sdt(cfg(T=20, Q=9), ARCH, train, clients, test)


def test_icpc_step_count(small_data):
    train, _, clients = setup(small_data, 2)
    assert icpc_local_steps(cfg(Q=100), clients) == math.ceil(150 * 9 / 100)
    _, _, all_active = setup(small_data, 0)
    assert icpc_local_steps(cfg(Q=100), all_active) == 1
    assert sdt_blocks(cfg(Q=90), train, clients) == 15


def test_icpc_first_round_differs_then_follows_protocol(small_data):
    train, test, clients = setup(small_data, 2)
    plain = run_hfcl(cfg(), ARCH, train, clients, test)
    icpc = run_hfcl_icpc(cfg(Q=100), ARCH, train, clients, test)
    assert icpc.details["N"] == 14
    assert hashes(plain)[0] == hashes(icpc)[0]
    assert hashes(plain)[1] != hashes(icpc)[1]
    assert icpc.ledger.total == plain.ledger.total


def test_role_checks(small_data):
    train, test, clients = setup(small_data, 2)
    with pytest.raises(ConfigurationError):
        run_fl(cfg(), ARCH, train, clients, test)
    _, _, inactive = setup(small_data, 4)
    with pytest.raises(ConfigurationError, match="no active clients"):
        run_fl_partial(cfg(), ARCH, train, inactive, test)
    with pytest.raises(ConfigurationError, match="needs Q"):
        SchemeConfig(scheme="hfcl_sdt")


def test_fl_partial_ignores_inactive_data(small_data):
    train, test, clients = setup(small_data, 2)
    res = run_fl_partial(cfg(), ARCH, train, clients, test)
    assert res.ledger.before_training == 0
    assert res.ledger.total == overhead_fl(6, ARCH.n_params, 2)


def test_fedprox_and_fedavg_run(small_data):
    train, test, clients = setup(small_data, 0)
    a = run_fedavg(cfg(local_updates=3), ARCH, train, clients, test)
    b = run_fedprox(cfg(local_updates=3, mu=0.1), ARCH, train, clients, test)
    assert hashes(a) != hashes(b)
    assert a.ledger.total == b.ledger.total


def test_learning_rate_halves():
    c = SchemeConfig(eta0=0.8, eta_halving_period=10)
    assert [c.eta(1), c.eta(10), c.eta(11), c.eta(21)] == [0.8, 0.8, 0.4, 0.2]
    assert SchemeConfig(eta0=0.8, eta_halving_period=None).eta(500) == 0.8


def test_noise_override_and_snr_reference(small_data):
    train, test, clients = setup(small_data, 2)
    clean = run_hfcl(cfg(snr_theta_db=math.inf, quant_bits=None), ARCH, train, clients, test)
    zero = run_hfcl(cfg(noise_var=0.0, quant_bits=None), ARCH, train, clients, test)
    assert hashes(clean) == hashes(zero)
    vec = run_hfcl(cfg(), ARCH, train, clients, test)
    elem = run_hfcl(cfg(snr_reference="element", T=1), ARCH, train, clients, test)
    assert hashes(vec)[1] != hashes(elem)[1]


def test_training_improves_accuracy(small_data):
    train, test, clients = setup(small_data, 2)
    res = run_hfcl(cfg(T=40, eta0=0.5), ARCH, train, clients, test)
    assert res.records[-1].accuracy > res.records[0].accuracy + 20


def test_divergence_keeps_partial_history(small_data):
    train, test, clients = setup(small_data, 2)
    with pytest.raises(NumericError) as info:
        run_hfcl(cfg(eta0=1e6, T=30), ARCH, train, clients, test)
    partial = info.value.partial
    assert partial.details["diverged_at"] == len(partial.records) >= 1


def test_dataset_noise_only_on_uploaded_data(small_data):
    train, test, clients = setup(small_data, 2)
    a = run_hfcl(cfg(snr_data_db=5.0), ARCH, train, clients, test)
    b = run_hfcl(cfg(), ARCH, train, clients, test)
    assert hashes(a)[1] != hashes(b)[1]
    _, _, active = setup(small_data, 0)
    assert hashes(run_fl(cfg(snr_data_db=5.0), ARCH, train, active, test)) == \
        hashes(run_fl(cfg(), ARCH, train, active, test))


def test_run_scheme_dispatch(small_data):
    train, test, clients = setup(small_data, 2)
    assert run_scheme(cfg(scheme="hfcl"), ARCH, train, clients, test).scheme == "hfcl"
    with pytest.raises(ConfigurationError):
        SchemeConfig(scheme="gossip")
