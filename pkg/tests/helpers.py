"""Shared test utilities: the central-difference gradient checker used
throughout, and a dense brute-force oracle for the graph-gated scan that
is written as plain loops, independent of the kernel implementations."""

import math

import numpy as np

from stgssm.tensor import Tape

FD_EPS = 1e-5
FD_RTOL = 1e-4


def finite_difference_grad(loss_fn, param, eps=FD_EPS, order=2):
    """Central differences of loss_fn() w.r.t. every element of param.

    order=2 is the classic two-point stencil; order=4 uses the five-point
    central formula, which cancels the O(eps^2) truncation term (useful
    for deeply composed functions with large higher derivatives).
    loss_fn must evaluate the loss with no tape active and return a float.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)

    def at(i, offset):
        orig = flat[i]
        flat[i] = orig + offset
        value = loss_fn()
        flat[i] = orig
        return value

    for i in range(flat.size):
        if order == 2:
            gflat[i] = (at(i, eps) - at(i, -eps)) / (2.0 * eps)
        else:
            gflat[i] = (-at(i, 2 * eps) + 8.0 * at(i, eps)
                        - 8.0 * at(i, -eps) + at(i, -2 * eps)) / (12.0 * eps)
    return grad


def assert_gradients_match(build_loss, params, eps=FD_EPS, rtol=FD_RTOL,
                           order=2):
    """Backward-pass gradients vs central differences, elementwise
    |analytic - fd| / (|fd| + 1e-8) < rtol."""
    named = list(params.items()) if isinstance(params, dict) else list(enumerate(params))
    tape = Tape()
    with tape:
        for _, p in named:
            tape.watch(p)
        loss = build_loss()
    analytic = tape.backward(loss)

    def loss_value():
        return build_loss().item()

    failures = []
    for name, p in named:
        fd = finite_difference_grad(loss_value, p, eps, order=order)
        rel = np.abs(analytic[p] - fd) / (np.abs(fd) + 1e-8)
        worst = float(rel.max()) if rel.size else 0.0
        if worst >= rtol:
            idx = np.unravel_index(int(np.argmax(rel)), rel.shape)
            failures.append(
                f"param {name}: rel err {worst:.3e} at {idx} "
                f"(analytic {analytic[p][idx]:.6e}, fd {fd[idx]:.6e})"
            )
    assert not failures, "gradient mismatches:\n" + "\n".join(failures)


def dense_graph_scan(x, delta, b_in, c_out, a_mat, d_skip, alpha):
    """Step-by-step dense recurrence, scalar loops only. alpha is either
    (L, N, N) shared or (B, L, N, N)."""
    B, L, N, C = x.shape
    S = b_in.shape[-1]
    per_batch_alpha = alpha.ndim == 4 and alpha.shape[0] == B
    y = np.zeros_like(x)
    for bi in range(B):
        h = np.zeros((N, S, C))
        for t in range(L):
            al = alpha[bi, t] if per_batch_alpha else (
                alpha[0, t] if alpha.ndim == 4 else alpha[t])
            hn = np.zeros((N, S, C))
            for i in range(N):
                dt = delta[bi, t, i]
                for j in range(N):
                    m = math.exp(dt * a_mat[i, j]) * al[i, j]
                    for s in range(S):
                        for c in range(C):
                            hn[i, s, c] += m * h[j, s, c]
                z = dt * a_mat[i, i]
                f = dt if abs(z) < 1e-8 else (math.exp(z) - 1.0) / a_mat[i, i]
                for s in range(S):
                    for c in range(C):
                        hn[i, s, c] += f * b_in[bi, t, i, s] * x[bi, t, i, c]
            h = hn
            for i in range(N):
                for c in range(C):
                    acc = d_skip[c] * x[bi, t, i, c]
                    for s in range(S):
                        acc += c_out[bi, t, i, s] * h[i, s, c]
                    y[bi, t, i, c] = acc
    return y


def random_row_stochastic(rng, shape):
    """Random strictly positive row-stochastic array; shape ends (N, N)."""
    logits = rng.normal(size=shape)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
