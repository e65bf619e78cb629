import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hifgl import metrics as M
from hifgl.federation import TrainConfig, train
from hifgl.graph import normalize_structure, partition_random
from hifgl.secmp import CommLedger
from hifgl.synthetic import make_citation_graph

from conftest import toy_graph


def test_gain_table_values():
    assert round(M.graph_information_gain(0.8555, 0.5698, 0.8689), 4) == 0.9552
    assert round(M.graph_information_gain(0.8626, 0.8051, 0.8583), 4) == 1.0808


def test_gain_bounds_and_sign():
    assert M.graph_information_gain(0.6, 0.6, 0.9) == 0.0
    assert M.graph_information_gain(0.9, 0.6, 0.9) == 1.0
    assert M.graph_information_gain(0.5, 0.6, 0.9) < 0


def test_gain_degenerate():
    with pytest.raises(M.DegenerateGainError):
        M.graph_information_gain(0.7, 0.8, 0.8)


acc = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=200)
@given(a=acc, lo=acc, hi=acc, scale=st.floats(0.01, 100), shift=st.floats(-10, 10))
def test_gain_affine_invariant(a, lo, hi, scale, shift):
    assume(abs(hi - lo) > 1e-3)
    g1 = M.graph_information_gain(a, lo, hi)
    g2 = M.graph_information_gain(scale * a + shift, scale * lo + shift, scale * hi + shift)
    assert g2 == pytest.approx(g1, rel=1e-6, abs=1e-6)


def test_closed_form_single_edge():
    assert M.device_device_closed_form(1, [16], 1, 1) == 37


def test_zero_edge_graph_has_no_device_traffic():
    g = toy_graph(3, [], silo_of=[0, 1, 2], split_of=[0, 1, 2])
    assert M.device_device_closed_form(g.num_edges, [4], 1, M.param_request_pairs(g)) == 0


def test_silo_server_form():
    ledger = CommLedger(silo_server_scalars=7 * 2 * 100 * 5, rounds=7)
    cfg = TrainConfig(fed_scheme="fedavg", arch="mlp", num_layers=1)
    g = toy_graph(5, [], silo_of=[0, 1, 2, 3, 4], split_of=[0] * 5)
    rep = M.comm_report(ledger, g, cfg, xi=100)
    check = [c for c in rep.checks if c.name == "silo_server total"][0]
    assert check.ok and check.expected == 2 * 100 * 5 * 7


@pytest.fixture(scope="module")
def graph():
    g = make_citation_graph(num_nodes=120, num_features=25, num_classes=3, num_links=260, seed=6)
    return partition_random(g, 4, seed=2)


@pytest.mark.parametrize("scheme", ["hifgl", "fedavg", "fedprox", "local", "global"])
@pytest.mark.parametrize("arch", ["gcn", "sage", "mlp"])
def test_ledgers_conform(scheme, arch, graph):
    cfg = TrainConfig(arch=arch, fed_scheme=scheme, epochs=3, hidden_dim=8, t_privacy=2)
    r = train(cfg, graph)
    rep = M.comm_report(r.ledger, graph, cfg)
    assert rep.all_ok, [c for c in rep.checks if not c.ok]


def test_tampered_ledger_is_flagged(graph):
    cfg = TrainConfig(arch="gcn", fed_scheme="hifgl", epochs=2, hidden_dim=8)
    r = train(cfg, graph)
    r.ledger.device_device_scalars += 1
    assert not M.comm_report(r.ledger, graph, cfg).all_ok


def test_space_report_model_storage():
    g = toy_graph(10, [], silo_of=[0, 1, 2, 3, 4] * 2, split_of=[0] * 10)
    rep = M.space_report(g, TrainConfig(t_privacy=1), xi=100)
    assert rep.model_storage == 525


def test_space_one_silo():
    g = toy_graph(4, [(0, 1), (1, 2)], silo_of=[0, 0, 0, 0], split_of=[0] * 4)
    rep = M.space_report(g, TrainConfig(), xi=50)
    assert rep.delta == 50 and rep.cross_edges == 0


def test_space_three_cross_edges():
    g = toy_graph(4, [(0, 2), (1, 3), (0, 3), (0, 1)], silo_of=[0, 0, 1, 1], split_of=[0] * 4)
    g = normalize_structure(g)
    rep = M.space_report(g, TrainConfig(), xi=20)
    assert rep.cross_edges == 3
    assert rep.delta <= 2 * 20 + 3 and rep.within_bound


def test_text_table_alignment():
    text = M.text_table([{"name": "a", "acc": 0.5}, {"name": "longer", "acc": 0.25}])
    lines = text.splitlines()
    assert len({len(l) for l in lines}) == 1
    assert "0.2500" in text


def test_json_output_roundtrips():
    rep = M.gain_report(0.8, 0.5, 0.9)
    assert json.loads(M.to_json(rep))["gain"] == pytest.approx(0.75)
