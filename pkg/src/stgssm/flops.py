"""Analytic operation counters and the complexity scaling experiments.

Counting convention (also stamped into every report): counts are exact
integer multiply-adds (1 MAC = 2 FLOPs). A matmul (m,k)x(k,n) costs m*k*n;
an elementwise product costs one MAC per element; exp / sigmoid / tanh /
softplus / sqrt / division each count as one MAC per element (SiLU is
two: one sigmoid, one product); layer norm is four per element. Plain
additions and copies are free. Attention's softmax bookkeeping is omitted
so the comparator carries exactly the score and value-mixing quadratic
terms plus the four projections.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kalman_graph import F_LOW_RANK
from .tensor import ContractError

MAC_CONVENTION = "1 MAC = 2 FLOPs; exact integer multiply-add counts"
LN_MACS_PER_ELT = 4


@dataclass
class FlopsReport:
    arch: str
    batch: int
    length: int
    d_model: int
    n_nodes: int
    macs: int
    memory_reads: int
    terms: dict = field(default_factory=dict)
    convention: str = MAC_CONVENTION

    @property
    def flops(self):
        return 2 * self.macs


def count_flops_scan(batch, length, n_nodes, d_state, channels):
    """MACs of one graph-gated scan over `length` steps (exactly linear
    in length). Returns (edge_term, node_term):

    edge_term: discretize + gate + state mixing, scaling with n_nodes^2
    node_term: input factor, injection, output, skip, scaling with n_nodes
    """
    n2 = n_nodes * n_nodes
    edge = batch * length * (2 * n2 + n2 * d_state * channels)
    node = batch * length * n_nodes * (
        2                       # zoh input factor: expm1 + divide
        + d_state               # bbar = factor * b_in
        + d_state * channels    # state injection bbar * x
        + d_state * channels    # output contraction C . h
        + channels              # skip D * x
    )
    return edge, node


def _count_selective_projections(batch, length, n_nodes, channels, d_state):
    # delta, B, C projections plus delta's softplus
    per = batch * length * n_nodes
    return per * channels * (1 + 2 * d_state) + per


def _count_kfgn_step(batch, n_nodes, channels, gru_hidden):
    """One filter step, batched: pooling, GRU, operator heads, predict,
    update (including its row softmax)."""
    n2 = n_nodes * n_nodes
    pool = batch * (n_nodes * channels + 3 * channels)
    gru_in = 2 * channels + gru_hidden
    gru = 3 * batch * gru_in * gru_hidden + 6 * batch * gru_hidden
    heads = batch * gru_hidden * (n2 + channels * n_nodes)
    predict = batch * (n2 + 2 * n2 * F_LOW_RANK)
    update = 2 * batch * n2 * channels + 3 * batch * n2 + 1
    return pool + gru + heads + predict + update


def _count_block(batch, length, n_nodes, d_model, channels, d_state,
                 gru_hidden, with_kfgn):
    n2 = n_nodes * n_nodes
    per_pos = batch * length * n_nodes
    terms = {
        "norms": LN_MACS_PER_ELT * per_pos * (d_model + channels),
        "linear": per_pos * d_model * channels * 2       # branch entries
        + per_pos * channels * d_model                   # output projection
        + _count_selective_projections(batch, length, n_nodes, channels, d_state),
        "gconv": batch * length * (n2 + n2 * channels),
        "act": 2 * per_pos * channels * 2 + per_pos * channels,  # two SiLUs + fuse
        "kfgn": length * _count_kfgn_step(batch, n_nodes, channels, gru_hidden)
        if with_kfgn else 0,
    }
    edge, node = count_flops_scan(batch, length, n_nodes, d_state, channels)
    terms["scan_edge"] = edge
    terms["scan_node"] = node
    return terms


def count_flops_graph_ssm(batch, length, d_model, n_nodes, n_encoder=1,
                          n_decoder=1, d_state=16, expansion_factor=2,
                          gru_hidden=64, feat_dim=1, horizon_k=1,
                          variant="full", decoder_alpha_mode="reuse_last"
                          ) -> FlopsReport:
    """Exact MAC count of one forecaster forward pass at the given shapes,
    mirroring the implemented architecture (encoder blocks at the history
    length, decoder blocks one position longer, filter skipped where the
    configuration skips it)."""
    for v in (batch, length, d_model, n_nodes):
        if v <= 0:
            raise ContractError("all shape arguments must be positive")
    channels = expansion_factor * d_model
    terms = {"embed": batch * length * n_nodes * feat_dim * d_model,
             "head": batch * n_nodes * d_model * horizon_k * feat_dim}

    enc = _count_block(batch, length, n_nodes, d_model, channels, d_state,
                       gru_hidden, with_kfgn=variant != "kfgn_off")
    dec_kfgn = variant != "kfgn_off" and decoder_alpha_mode == "recompute"
    dec = _count_block(batch, length + 1, n_nodes, d_model, channels, d_state,
                       gru_hidden, with_kfgn=dec_kfgn)
    for name in enc:
        terms[name] = n_encoder * enc[name] + n_decoder * dec[name]

    macs = sum(terms.values())
    reads = batch * length * d_model + n_nodes * d_model
    return FlopsReport(arch="graph_ssm", batch=batch, length=length,
                       d_model=d_model, n_nodes=n_nodes, macs=macs,
                       memory_reads=reads, terms=terms)


def count_flops_attention(batch, length, d_model) -> FlopsReport:
    """Dense self-attention comparator: quadratic score and value-mixing
    terms plus the four linear projections. Analytic only; no attention
    model is ever instantiated."""
    for v in (batch, length, d_model):
        if v <= 0:
            raise ContractError("all shape arguments must be positive")
    quad = 2 * batch * length * length * d_model
    proj = 4 * batch * length * d_model * d_model
    reads = batch * length * length * d_model
    return FlopsReport(arch="attention", batch=batch, length=length,
                       d_model=d_model, n_nodes=0, macs=quad + proj,
                       memory_reads=reads,
                       terms={"quadratic": quad, "projections": proj})


def fit_power_law(x_values, y_values):
    """Least-squares slope of log y against log x; returns (exponent,
    standard error)."""
    x = np.log(np.asarray(x_values, dtype=np.float64))
    y = np.log(np.asarray(y_values, dtype=np.float64))
    n = len(x)
    if n < 2:
        raise ContractError("power-law fit needs at least two points")
    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    if n > 2:
        sigma2 = float(np.dot(resid, resid) / (n - 2))
        stderr = float(np.sqrt(sigma2 / np.dot(xc, xc)))
    else:
        stderr = 0.0
    return slope, stderr


@dataclass
class ScalingResult:
    x_values: list
    flops: list
    wall_times: list
    flops_exponent: float
    flops_exponent_stderr: float
    time_exponent: float
    time_exponent_stderr: float
    mode: str


def _median_time(fn, trials):
    with kernels.single_thread_blas():
        fn()  # warm-up
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _scan_inputs(rng, batch, length, n_nodes, d_state, channels):
    x = rng.normal(size=(batch, length, n_nodes, channels))
    delta = rng.uniform(0.2, 1.0, size=(batch, length, n_nodes))
    b_in = rng.normal(size=(batch, length, n_nodes, d_state))
    c_out = rng.normal(size=(batch, length, n_nodes, d_state))
    a_mat = -rng.uniform(0.1, 1.0, size=(n_nodes, n_nodes))
    d_skip = rng.normal(size=channels)
    logits = rng.normal(size=(1, length, n_nodes, n_nodes))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    alpha = e / e.sum(axis=-1, keepdims=True)
    return x, delta, b_in, c_out, a_mat, d_skip, alpha


def time_scan_forward(length, n_nodes=16, d_state=8, channels=8, batch=1,
                      trials=3, seed=0, forward=None):
    """Median wall time of one scan kernel forward at the given shapes."""
    forward = forward or kernels.forward
    rng = np.random.default_rng(seed)
    args = _scan_inputs(rng, batch, length, n_nodes, d_state, channels)
    return _median_time(lambda: forward(*args, False), trials)


def scaling_experiment(x_values, mode="length", trials=3, d_model=16,
                       n_nodes=16, d_state=8, length=12, n_encoder=1,
                       n_decoder=1, expansion_factor=2, gru_hidden=16,
                       seed=0) -> ScalingResult:
    """Analytic FLOPs plus measured forward wall time across a sweep.

    mode="length" sweeps the scan kernel's sequence length (the linear-
    complexity claim); mode="nodes" sweeps the graph size through a full
    forecaster forward. Wall times are medians of >= 3 trials after one
    warm-up per point.
    """
    x_values = list(x_values)
    if len(x_values) < 4:
        raise ContractError(f"need at least 4 sweep points, got {len(x_values)}")
    if trials < 3:
        raise ContractError(f"need at least 3 trials per point, got {trials}")

    flops_list, times = [], []
    if mode == "length":
        channels = expansion_factor * d_model
        for L in x_values:
            edge, node = count_flops_scan(1, L, n_nodes, d_state, channels)
            flops_list.append(2 * (edge + node))
            times.append(time_scan_forward(L, n_nodes, d_state, channels,
                                           trials=trials, seed=seed))
    elif mode == "nodes":
        from . import model as model_mod
        for n in x_values:
            report = count_flops_graph_ssm(
                1, length, d_model, n, n_encoder=n_encoder, n_decoder=n_decoder,
                d_state=d_state, expansion_factor=expansion_factor,
                gru_hidden=gru_hidden)
            flops_list.append(report.flops)
            cfg = model_mod.ModelConfig(
                n_encoder=n_encoder, n_decoder=n_decoder, history_p=length,
                d_model=d_model, d_state=d_state,
                expansion_factor=expansion_factor, gru_hidden=gru_hidden)
            rng = np.random.default_rng(seed)
            weights = model_mod.init_model(rng, cfg, n, 1, 24)
            window = rng.normal(size=(1, length, n, 1))
            times.append(_median_time(
                lambda: model_mod.model_forward(window, weights, cfg), trials))
    else:
        raise ContractError(f"unknown sweep mode {mode!r}")

    fe, fe_err = fit_power_law(x_values, flops_list)
    te, te_err = fit_power_law(x_values, times)
    return ScalingResult(x_values=x_values, flops=flops_list, wall_times=times,
                         flops_exponent=fe, flops_exponent_stderr=fe_err,
                         time_exponent=te, time_exponent_stderr=te_err,
                         mode=mode)


def compare_kernel_backends(lengths, n_nodes=16, d_state=8, channels=16,
                            batch=4, trials=3, seed=0):
    """Benchmark every importable scan backend on the same inputs.

    Returns rows {"length": L, "<backend>_seconds": t, ...}; with both
    backends built this is the compiled-vs-fallback comparison.
    """
    backends = kernels.available_backends()
    rows = []
    for L in lengths:
        row = {"length": L}
        for name, (fwd, _) in sorted(backends.items()):
            row[f"{name}_seconds"] = time_scan_forward(
                L, n_nodes, d_state, channels, batch=batch, trials=trials,
                seed=seed, forward=fwd)
        rows.append(row)
    return rows
