"""Two-branch gated residual block.

Branch A: layer norm -> linear -> adjacency-gated graph convolution (with
the adjacency either filtered step by step or supplied) -> SiLU ->
graph-gated selective scan -> layer norm. Branch B: linear -> SiLU. The
branches fuse by elementwise product, pass through an output projection
(zero at init, so a fresh block is the identity map) and a residual add.

Ablation variants:
    full      adjacency from the Kalman filter everywhere
    kfgn_off  a static row-normalized adjacency replaces the filter
    gss_off   the scan's gating adjacency is uniform (all-ones,
              row-normalized); the graph convolution still uses the filter
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kalman_graph, kernels, scan
from . import tensor as tensor_mod
from .tensor import (ContractError, DimensionError, Tensor, as_tensor,
                     layer_norm, silu)

VARIANTS = ("full", "kfgn_off", "gss_off")


@dataclass
class BlockWeights:
    ln_in_gamma: Tensor
    ln_in_beta: Tensor
    lin_a_w: Tensor
    lin_a_b: Tensor
    lin_b_w: Tensor
    lin_b_b: Tensor
    kfgn: kalman_graph.DeepKalmanParams
    omega_gc: Tensor
    scan_params: scan.SSMParams
    proj: scan.ProjectionWeights
    ln_mid_gamma: Tensor
    ln_mid_beta: Tensor
    lin_out_w: Tensor
    lin_out_b: Tensor
    dim: int
    dim_inner: int
    n_nodes: int


def init_block(rng, dim, n_nodes, d_state=16, expansion_factor=2,
               gru_hidden=kalman_graph.GRU_HIDDEN_DEFAULT) -> BlockWeights:
    """Fresh block weights. The output projection starts at zero so the
    block is exactly the identity until training moves it."""
    if expansion_factor < 1:
        raise ContractError(f"expansion_factor must be >= 1, got {expansion_factor}")
    dim_inner = expansion_factor * dim

    def mat(rows, cols, s=None):
        s = s if s is not None else 1.0 / np.sqrt(rows)
        return Tensor(rng.normal(0.0, s, size=(rows, cols)), trainable=True)

    def vec(size, fill=0.0):
        return Tensor(np.full(size, fill), trainable=True)

    return BlockWeights(
        ln_in_gamma=vec(dim, 1.0),
        ln_in_beta=vec(dim),
        lin_a_w=mat(dim, dim_inner),
        lin_a_b=vec(dim_inner),
        lin_b_w=mat(dim, dim_inner),
        lin_b_b=vec(dim_inner),
        kfgn=kalman_graph.init_deep_kalman(rng, n_nodes, dim_inner, gru_hidden),
        omega_gc=Tensor(np.ones((n_nodes, n_nodes)), trainable=True),
        scan_params=scan.SSMParams(
            a_raw=Tensor(rng.normal(0.0, 0.5, size=(n_nodes, n_nodes)),
                         trainable=True),
            d_skip=Tensor(np.ones(dim_inner), trainable=True),
            state_dim=d_state,
        ),
        proj=scan.ProjectionWeights(
            w_delta=mat(dim_inner, 1),
            b_delta=vec(1),
            w_b=mat(dim_inner, d_state),
            b_b=vec(d_state),
            w_c=mat(dim_inner, d_state),
            b_c=vec(d_state),
        ),
        ln_mid_gamma=vec(dim_inner, 1.0),
        ln_mid_beta=vec(dim_inner),
        lin_out_w=Tensor(np.zeros((dim_inner, dim)), trainable=True),
        lin_out_b=vec(dim),
        dim=dim,
        dim_inner=dim_inner,
        n_nodes=n_nodes,
    )


def gated_graph_conv(omega, alphas, x):
    """Fused (omega ⊙ alpha_t) @ x_t over a whole window, differentiable
    in all three arguments. alphas is (L, N, N) or (B, L, N, N)."""
    omega, alphas, x = as_tensor(omega), as_tensor(alphas), as_tensor(x)
    alpha_k = alphas.data[None] if alphas.ndim == 3 else alphas.data
    out_data = kernels.gated_conv_forward(omega.data, alpha_k, x.data)
    tensor_mod._check_finite("gated_graph_conv", out_data)
    out = Tensor._wrap(out_data)
    if tensor_mod._active_tape is not None:
        alpha_shape = alphas.shape

        def vjp(g):
            gomega, galpha, gx = kernels.gated_conv_backward(
                np.ascontiguousarray(g), omega.data, alpha_k, x.data)
            return (gomega, galpha.reshape(alpha_shape), gx)

        tensor_mod._maybe_record(out, (omega, alphas, x), vjp)
    return out


def _filtered_alphas(pre_a, weights):
    alphas, _ = kalman_graph.filter_adjacency_sequence(pre_a, weights.kfgn)
    return alphas


def _static_alpha_tensor(static_alpha, n):
    if static_alpha is None:
        mat = np.full((n, n), 1.0 / n)
    else:
        mat = np.asarray(getattr(static_alpha, "alpha", static_alpha), dtype=np.float64)
        if mat.shape != (n, n):
            raise DimensionError(f"static adjacency shape {mat.shape} != {(n, n)}")
        rows = mat.sum(axis=1, keepdims=True)
        if np.any(rows <= 0):
            raise ContractError("static adjacency has a non-positive row sum")
        mat = mat / rows
    return Tensor(mat)


def block_forward(x, weights: BlockWeights, variant="full", static_alpha=None,
                  alphas_override=None):
    """Apply the block to x of shape (B, L, N, dim).

    Returns (y, alphas) with y shaped like x and alphas the (B, L, N, N)
    adjacency sequence the block used (handy for downstream reuse).
    ``alphas_override`` short-circuits the filter entirely, e.g. when a
    decoder reuses the encoder's adjacency sequence.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"block expects (batch, L, N, dim), got {x.shape}")
    B, L, N, dim = x.shape
    if dim != weights.dim or N != weights.n_nodes:
        raise DimensionError(
            f"input {x.shape} does not match block (dim={weights.dim}, "
            f"nodes={weights.n_nodes})"
        )

    u = layer_norm(x, weights.ln_in_gamma, weights.ln_in_beta)
    pre_a = u @ weights.lin_a_w + weights.lin_a_b

    if alphas_override is not None:
        alphas = as_tensor(alphas_override)
    elif variant == "kfgn_off":
        flat = _static_alpha_tensor(static_alpha, N)
        alphas = Tensor(np.broadcast_to(flat.data, (L, N, N)).copy())
        alphas._row_stochastic = True
    else:
        alphas = _filtered_alphas(pre_a, weights)

    gconv = gated_graph_conv(weights.omega_gc, alphas, pre_a)
    a_act = silu(gconv)

    if variant == "gss_off":
        # identity gating decouples the nodes: the scan degenerates to the
        # standard per-channel selective scan with no cross-node mixing
        scan_alphas = Tensor(np.broadcast_to(np.eye(N), (L, N, N)).copy())
        scan_alphas._row_stochastic = True
    else:
        scan_alphas = alphas
    scanned = scan.selective_graph_scan(a_act, scan_alphas, weights.scan_params,
                                        weights.proj)
    a_norm = layer_norm(scanned, weights.ln_mid_gamma, weights.ln_mid_beta)

    b_act = silu(u @ weights.lin_b_w + weights.lin_b_b)

    fused = a_norm * b_act
    y = fused @ weights.lin_out_w + weights.lin_out_b + x
    return y, alphas


def named_parameters(weights: BlockWeights, prefix=""):
    items = [
        ("ln_in_gamma", weights.ln_in_gamma), ("ln_in_beta", weights.ln_in_beta),
        ("lin_a_w", weights.lin_a_w), ("lin_a_b", weights.lin_a_b),
        ("lin_b_w", weights.lin_b_w), ("lin_b_b", weights.lin_b_b),
        ("omega_gc", weights.omega_gc),
        ("scan.a_raw", weights.scan_params.a_raw),
        ("scan.d_skip", weights.scan_params.d_skip),
        ("proj.w_delta", weights.proj.w_delta), ("proj.b_delta", weights.proj.b_delta),
        ("proj.w_b", weights.proj.w_b), ("proj.b_b", weights.proj.b_b),
        ("proj.w_c", weights.proj.w_c), ("proj.b_c", weights.proj.b_c),
        ("ln_mid_gamma", weights.ln_mid_gamma), ("ln_mid_beta", weights.ln_mid_beta),
        ("lin_out_w", weights.lin_out_w), ("lin_out_b", weights.lin_out_b),
    ]
    out = [(f"{prefix}{name}", t) for name, t in items]
    out.extend(kalman_graph.named_parameters(weights.kfgn, prefix=f"{prefix}kfgn."))
    return out
