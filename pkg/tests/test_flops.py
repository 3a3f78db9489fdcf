import numpy as np
import pytest

from stgssm import flops, kernels
from stgssm.tensor import ContractError


def test_hand_audit_of_unit_configuration():
    """Every shape argument 1, one encoder + one decoder block, filter only
    in the encoder (decoder reuses adjacencies). Counted by hand from the
    declared convention (matmul mkn; one MAC per elementwise product,
    activation, or division; layer norm four per element; adds free):

      embed: 1*1*1*(1*1)                                    = 1
      head:  1*1*(1*1)                                      = 1
      encoder block, length 1:
        two layer norms: 4*(1 + 1)                          = 8
        branch linears 2 + output projection 1
          + scan projections (1*(1+2) + 1 softplus)         = 7
        graph conv: gate product 1 + message matmul 1       = 2
        activations: two SiLU (2 each) + branch fuse        = 5
        filter step: pool (1+3) + GRU (3*(2+1)*1 + 6)
          + heads 1*(1+1) + predict (1+2*1*4)
          + update (2+3+1)                                  = 36
        scan edge terms: 2 + 1                              = 3
        scan node terms: 2+1+1+1+1                          = 6
      decoder block, length 2 (no filter): norms 16,
        linears 14, gconv 4, act 10, scan 6+12              = 62

      total = 1+1+8+7+2+5+36+3+6+62                         = 131
    """
    report = flops.count_flops_graph_ssm(
        1, 1, 1, 1, n_encoder=1, n_decoder=1, d_state=1, expansion_factor=1,
        gru_hidden=1, feat_dim=1, horizon_k=1)
    assert report.macs == 131
    assert report.flops == 262
    assert report.terms["kfgn"] == 36
    assert report.terms["scan_edge"] == 9
    assert report.terms["scan_node"] == 18


def test_counts_are_integers_and_positive():
    report = flops.count_flops_graph_ssm(4, 12, 16, 25)
    assert isinstance(report.macs, (int, np.integer))
    assert report.macs > 0
    assert all(v >= 0 for v in report.terms.values())
    assert sum(report.terms.values()) == report.macs


def test_doubling_length_doubles_scan_terms_exactly():
    e1, n1 = flops.count_flops_scan(2, 64, 10, 4, 8)
    e2, n2 = flops.count_flops_scan(2, 128, 10, 4, 8)
    assert e2 == 2 * e1
    assert n2 == 2 * n1


def test_node_scaling_splits_edge_and_node_terms():
    def terms(n):
        r = flops.count_flops_graph_ssm(1, 12, 8, n, d_state=4,
                                        expansion_factor=1, gru_hidden=8)
        return r.terms["scan_edge"], r.terms["scan_node"]

    e1, n1 = terms(10)
    e2, n2 = terms(20)
    assert e2 == 4 * e1   # edge-gated mixing grows with N^2
    assert n2 == 2 * n1   # per-node work grows with N


def test_monotone_in_each_argument():
    base = flops.count_flops_graph_ssm(2, 8, 8, 10).macs
    assert flops.count_flops_graph_ssm(4, 8, 8, 10).macs > base
    assert flops.count_flops_graph_ssm(2, 16, 8, 10).macs > base
    assert flops.count_flops_graph_ssm(2, 8, 16, 10).macs > base
    assert flops.count_flops_graph_ssm(2, 8, 8, 20).macs > base
    a = flops.count_flops_attention(1, 64, 8)
    assert flops.count_flops_attention(2, 64, 8).macs > a.macs
    assert flops.count_flops_attention(1, 128, 8).macs > a.macs
    assert flops.count_flops_attention(1, 64, 16).macs > a.macs


class TestAttentionCounter:
    def test_quadratic_term_quadruples(self):
        a = flops.count_flops_attention(3, 100, 8)
        b = flops.count_flops_attention(3, 200, 8)
        assert b.terms["quadratic"] == 4 * a.terms["quadratic"]

    def test_length_one_is_projections_plus_self(self):
        r = flops.count_flops_attention(2, 1, 8)
        assert r.terms["quadratic"] == 2 * 2 * 8  # the self-pair only
        assert r.terms["projections"] == 4 * 2 * 8 * 8
        assert r.macs == r.terms["quadratic"] + r.terms["projections"]

    def test_ratio_grows_linearly_in_length(self):
        d = 8
        ratios = []
        for L in (256, 512, 1024):
            attn = flops.count_flops_attention(1, L, d).macs
            edge, node = flops.count_flops_scan(1, L, 16, 8, d)
            ratios.append(attn / (edge + node))
        assert ratios[1] / ratios[0] == pytest.approx(2.0, rel=0.05)
        assert ratios[2] / ratios[1] == pytest.approx(2.0, rel=0.05)


class TestFits:
    def test_scan_flops_exponent_is_one(self):
        xs = [64, 128, 256, 512, 1024]
        ys = [2 * sum(flops.count_flops_scan(1, L, 16, 8, 16)) for L in xs]
        e, err = flops.fit_power_law(xs, ys)
        assert abs(e - 1.0) < 1e-9
        assert err < 1e-9

    def test_attention_flops_exponent_approaches_two(self):
        xs = [2 ** k for k in range(8, 16)]  # 256 .. 32768
        ys = [flops.count_flops_attention(1, L, 8).flops for L in xs]
        e, _ = flops.fit_power_law(xs, ys)
        assert abs(e - 2.0) < 0.02

    def test_fit_recovers_known_law(self):
        xs = np.array([10, 20, 40, 80])
        e, err = flops.fit_power_law(xs, 3.0 * xs ** 1.7)
        assert e == pytest.approx(1.7, abs=1e-12)
        assert err == pytest.approx(0.0, abs=1e-9)


class TestScalingExperiment:
    def test_requires_enough_points(self):
        with pytest.raises(ContractError):
            flops.scaling_experiment([32, 64, 128], mode="length")
        with pytest.raises(ContractError):
            flops.scaling_experiment([32, 64, 128, 256], trials=2)

    def test_length_mode(self):
        res = flops.scaling_experiment([16, 32, 64, 128], mode="length",
                                       n_nodes=6, d_model=4, d_state=2)
        assert abs(res.flops_exponent - 1.0) < 1e-9
        assert len(res.wall_times) == 4
        assert all(t > 0 for t in res.wall_times)

    def test_nodes_mode(self):
        res = flops.scaling_experiment([5, 8, 11, 14], mode="nodes", length=4,
                                       d_model=4, d_state=2, gru_hidden=4)
        assert len(res.flops) == 4
        assert res.flops == sorted(res.flops)
        assert 1.0 < res.flops_exponent < 2.0

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            flops.scaling_experiment([4, 5, 6, 7], mode="widgets")


def test_kernel_backend_comparison_rows():
    rows = flops.compare_kernel_backends([8, 16], n_nodes=5, d_state=2,
                                         channels=4, batch=2)
    assert len(rows) == 2
    assert rows[0]["length"] == 8
    for name in kernels.available_backends():
        assert f"{name}_seconds" in rows[0]
        assert rows[0][f"{name}_seconds"] > 0
