"""State space scan core: ZOH discretization, the two equivalent scan
forms, and the graph-gated selective scan.

``recurrent_scan`` and ``conv_scan`` are the two classic views of a
time-invariant diagonal SSM and serve as each other's oracle. The model's
forward path uses ``selective_graph_scan``, whose parameters are
input-dependent (so the convolution view does not apply) and whose state
mixing is gated per edge by a row-stochastic adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, tensor
from .tensor import (ContractError, DimensionError, DomainError, Tensor,
                     as_tensor, softplus)

A_NEG_FLOOR = 1e-4  # state matrix entries are <= -A_NEG_FLOOR after mapping
ROW_SUM_TOL = 1e-6


@dataclass
class SSMParams:
    """Continuous-time operators; the state matrix is stored raw and mapped
    to strictly negative values on read."""

    a_raw: Tensor
    d_skip: Tensor
    b_in: Tensor | None = None
    c_out: Tensor | None = None
    state_dim: int = 0

    def state_matrix(self) -> Tensor:
        return -(softplus(self.a_raw) + A_NEG_FLOOR)


@dataclass
class DiscretizedParams:
    a_bar: np.ndarray
    b_bar: np.ndarray
    delta: np.ndarray


@dataclass
class ConvKernel:
    taps: np.ndarray


def discretize_zoh(a, b, delta) -> DiscretizedParams:
    """Entrywise zero-order-hold discretization.

    a_bar = exp(delta*a); b_bar = (exp(delta*a) - 1)/a * b, switching to
    the series limit delta*b when |delta*a| < 1e-8.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise DomainError(f"delta must be positive, got min {delta.min()}")
    a_bar = np.exp(delta * a)
    b_bar = kernels.zoh_input_factor(a, delta) * b
    return DiscretizedParams(a_bar=a_bar, b_bar=b_bar, delta=delta)


def recurrent_scan(disc: DiscretizedParams, c_out, d_skip, x, h0=None):
    """Left-to-right linear recurrence h_t = a_bar h_{t-1} + b_bar x_t,
    y_t = c h_t + d x_t, for a diagonal (entrywise) state operator."""
    x = np.asarray(x, dtype=np.float64)
    a_bar = np.atleast_1d(np.asarray(disc.a_bar, dtype=np.float64))
    b_bar = np.atleast_1d(np.asarray(disc.b_bar, dtype=np.float64))
    c_out = np.atleast_1d(np.asarray(c_out, dtype=np.float64))
    state_shape = np.broadcast_shapes(a_bar.shape, b_bar.shape, c_out.shape)
    h = np.zeros(state_shape) if h0 is None else np.broadcast_to(
        np.asarray(h0, dtype=np.float64), state_shape).copy()
    y = np.empty_like(x)
    for t in range(x.shape[0]):
        h = a_bar * h + b_bar * x[t]
        y[t] = np.sum(c_out * h) + d_skip * x[t]
    return y


def conv_kernel(disc: DiscretizedParams, c_out, length: int) -> ConvKernel:
    """taps_i = sum_s c_s a_bar_s^i b_bar_s for i = 0..length-1."""
    a_bar = np.atleast_1d(np.asarray(disc.a_bar, dtype=np.float64))
    b_bar = np.atleast_1d(np.asarray(disc.b_bar, dtype=np.float64))
    c_out = np.atleast_1d(np.asarray(c_out, dtype=np.float64))
    powers = a_bar[None, :] ** np.arange(length)[:, None]
    return ConvKernel(taps=powers @ (c_out * b_bar))


def conv_scan(kernel: ConvKernel, d_skip, x):
    """Causal convolution with the kernel taps plus the skip path.

    Kernels longer than the sequence are truncated to its length.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[0]
    taps = np.asarray(kernel.taps, dtype=np.float64)[:L]
    if L == 0:
        return x.copy()
    return np.convolve(x, taps)[:L] + d_skip * x


@dataclass
class ProjectionWeights:
    """The three per-step linear maps producing (delta, B_t, C_t)."""

    w_delta: Tensor
    b_delta: Tensor
    w_b: Tensor
    b_b: Tensor
    w_c: Tensor
    b_c: Tensor


def selective_parameterize(x: Tensor, proj: ProjectionWeights):
    """Input-dependent scan parameters from x of shape (..., dim).

    delta goes through softplus (positive, per step and node); B_t and C_t
    are plain affine maps to the state dimension.
    """
    x = as_tensor(x)
    delta = softplus(x @ proj.w_delta + proj.b_delta)
    delta = delta.reshape(delta.shape[:-1])
    b_t = x @ proj.w_b + proj.b_b
    c_t = x @ proj.w_c + proj.b_c
    return delta, b_t, c_t


def _alpha_array(alpha_seq):
    """Accept a Tensor / ndarray / sequence of adjacency states and return
    a Tensor shaped (L, N, N) or (B, L, N, N)."""
    if isinstance(alpha_seq, Tensor) or isinstance(alpha_seq, np.ndarray):
        return as_tensor(alpha_seq)
    mats = [getattr(a, "alpha", a) for a in alpha_seq]
    return tensor.stack([as_tensor(m) for m in mats], axis=0)


def graph_scan(x, delta, b_in, c_out, a_mat, d_skip, alpha):
    """Fused graph-gated scan: differentiable in every argument.

    x (B,L,N,C); delta (B,L,N) positive; b_in/c_out (B,L,N,S);
    a_mat (N,N) strictly negative; d_skip (C,);
    alpha (L,N,N) shared across the batch or (B,L,N,N) per element,
    rows summing to 1 within 1e-6.
    """
    x, delta = as_tensor(x), as_tensor(delta)
    b_in, c_out = as_tensor(b_in), as_tensor(c_out)
    a_mat, d_skip, alpha = as_tensor(a_mat), as_tensor(d_skip), as_tensor(alpha)

    if x.ndim != 4:
        raise DimensionError(f"graph_scan expects x of rank 4, got {x.shape}")
    B, L, N, C = x.shape
    if delta.shape != (B, L, N):
        raise DimensionError(f"delta shape {delta.shape} != {(B, L, N)}")
    if b_in.ndim != 4 or b_in.shape[:3] != (B, L, N) or c_out.shape != b_in.shape:
        raise DimensionError(
            f"b_in/c_out shapes {b_in.shape}/{c_out.shape} incompatible with x {x.shape}"
        )
    if a_mat.shape != (N, N):
        raise DimensionError(f"a_mat shape {a_mat.shape} != {(N, N)}")
    if d_skip.shape != (C,):
        raise DimensionError(f"d_skip shape {d_skip.shape} != {(C,)}")
    if alpha.shape == (L, N, N):
        alpha_k = alpha.data[None]
    elif alpha.shape == (B, L, N, N):
        alpha_k = alpha.data
    else:
        raise DimensionError(
            f"alpha shape {alpha.shape} is neither {(L, N, N)} nor {(B, L, N, N)}"
        )
    if np.any(delta.data <= 0):
        raise DomainError("graph_scan requires delta > 0 everywhere")
    if np.any(a_mat.data >= 0):
        raise ContractError("graph_scan requires a strictly negative state matrix")
    if L > 0 and not alpha.row_stochastic_hint:
        row_sums = alpha_k.sum(axis=-1)
        if np.max(np.abs(row_sums - 1.0)) > ROW_SUM_TOL:
            raise ContractError(
                "adjacency rows must sum to 1 within "
                f"{ROW_SUM_TOL}; worst deviation {np.max(np.abs(row_sums - 1.0)):.3e}"
            )

    recording = tensor._active_tape is not None
    args = (x.data, delta.data, b_in.data, c_out.data, a_mat.data,
            d_skip.data, alpha_k)
    prelude = kernels.scan_prelude(x.data, delta.data, b_in.data,
                                   a_mat.data) if L > 0 else None
    cache = {} if recording else None
    y_data, h_all = kernels.forward(*args, recording, prelude=prelude,
                                    cache=cache)
    tensor._check_finite("graph_scan", y_data)
    out = Tensor._wrap(y_data)

    if recording:
        alpha_shape = alpha.shape

        def vjp(g):
            gx, gdelta, gb, gc, ga, gd, galpha = kernels.backward(
                np.ascontiguousarray(g), *args, h_all, prelude=prelude,
                cache=cache
            )
            return (gx, gdelta, gb, gc, ga, gd, galpha.reshape(alpha_shape))

        tensor._maybe_record(out, (x, delta, b_in, c_out, a_mat, d_skip, alpha), vjp)
    return out


def selective_graph_scan(x, alpha_seq, params: SSMParams, proj: ProjectionWeights):
    """Selective scan over a node graph: per-step (delta, B, C) come from
    linear projections of the input, the state transition is discretized
    per edge and gated entrywise by the adjacency sequence."""
    x = as_tensor(x)
    alpha = _alpha_array(alpha_seq)
    delta, b_t, c_t = selective_parameterize(x, proj)
    a_mat = params.state_matrix()
    return graph_scan(x, delta, b_t, c_t, a_mat, params.d_skip, alpha)
