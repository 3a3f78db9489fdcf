"""NumPy backend and shared math for the graph-gated selective scan.

The scan decomposes into bulk elementwise work (discretization, input
injection, output equation, parameter gradients — vectorized here and
shared by every backend) plus two inherently sequential state recursions.
The NumPy backend materializes the gated mixing operator mix = abar *
alpha and steps it with batched matmuls; the compiled backend
(stgssm._scan_cy) reads abar and alpha directly inside its C loops, which
avoids the largest intermediate entirely. kernels.py composes the full
forward/backward pair per backend.

Shapes (C = channels, S = state dim, AB = 1 for a batch-shared adjacency):
    x       (B, L, N, C)
    delta   (B, L, N)         positive time-scale factors
    b_in    (B, L, N, S)      per-step input operators
    c_out   (B, L, N, S)      per-step output operators
    a_mat   (N, N)            strictly negative edge-decay parameters
    d_skip  (C,)              skip-path scale per channel
    alpha   (AB, L, N, N)     row-stochastic adjacency per step

Recurrence per step t (node n, state s, channel c):
    mix[n, j]   = exp(delta[n] * a_mat[n, j]) * alpha[n, j]
    bbar[n, s]  = zoh_input_factor(a_mat[n, n], delta[n]) * b_in[n, s]
    h[n, s, c]  = sum_j mix[n, j] * h_prev[j, s, c] + bbar[n, s] * x[n, c]
    y[n, c]     = sum_s c_out[n, s] * h[n, s, c] + d_skip[c] * x[n, c]
"""

import numpy as np

ZOH_SMALL = 1e-8


def zoh_input_factor(a, delta):
    """(exp(delta*a) - 1) / a, switching to the limit delta for |delta*a| small."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = delta * a
    small = np.abs(z) < ZOH_SMALL
    safe_a = np.where(small, 1.0, a)
    return np.where(small, delta, np.expm1(z) / safe_a)


def zoh_input_factor_partials(a, delta):
    """(f, df/ddelta, df/da) for the factor above, smooth across the branch."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = delta * a
    small = np.abs(z) < ZOH_SMALL
    safe_a = np.where(small, 1.0, a)
    ez = np.exp(z)
    f = np.where(small, delta, np.expm1(z) / safe_a)
    df_ddelta = ez
    df_da = np.where(small, 0.5 * delta * delta, (delta * ez - f) / safe_a)
    return f, df_ddelta, df_da


def scan_prelude(x, delta, b_in, a_mat):
    """Bulk elementwise work: edge decays and the input injection."""
    B, L, N, C = x.shape
    S = b_in.shape[-1]
    z = delta[..., None] * a_mat[None, None]
    abar = np.exp(z)  # exp on a bound array keeps numpy's SIMD path
    f = zoh_input_factor(np.diagonal(a_mat), delta)
    bbar = f[..., None] * b_in
    inject = (bbar[..., None] * x[..., None, :]).reshape(B, L, N, S * C)
    return abar, f, bbar, inject


def recurrence_forward(mix, inject):
    """h_t = mix_t @ h_{t-1} + inject_t over flattened (B, L, N, M) states."""
    B, L, N, M = inject.shape
    h_all = np.empty((B, L, N, M))
    h = np.zeros((B, N, M))
    for t in range(L):
        h = np.matmul(mix[:, t], h)
        h += inject[:, t]
        h_all[:, t] = h
    return h_all


def recurrence_backward(mix, ghy):
    """gh_t = ghy_t + mix_{t+1}^T @ gh_{t+1}, right to left."""
    B, L, N, M = ghy.shape
    gh_all = np.empty((B, L, N, M))
    gh = ghy[:, L - 1].copy()
    gh_all[:, L - 1] = gh
    for t in range(L - 2, -1, -1):
        gh = np.matmul(mix[:, t + 1].swapaxes(1, 2), gh)
        gh += ghy[:, t]
        gh_all[:, t] = gh
    return gh_all


def output_equation(c_out, h_all, d_skip, x):
    y = np.einsum("blns,blnsc->blnc", c_out, h_all)
    y += d_skip * x
    return y


def injection_grads(gy, x, b_in, c_out, d_skip, delta, a_mat, f, bbar, h_all,
                    gh_all):
    """Everything except the state-mixing path: output equation plus the
    discretized input injection. Returns (gx, gdelta, gb, gc, gd, ga)
    with ga carrying only the diagonal (self-decay) contribution."""
    N = a_mat.shape[0]
    _, df_dd, df_da = zoh_input_factor_partials(np.diagonal(a_mat), delta)

    gc = np.einsum("blnsc,blnc->blns", h_all, gy)
    gd = np.einsum("blnc,blnc->c", x, gy)
    gx = d_skip * gy

    gbb = np.einsum("blnsc,blnc->blns", gh_all, x)
    gb = gbb * f[..., None]
    gf = np.einsum("blns,blns->bln", gbb, b_in)
    gx += np.einsum("blns,blnsc->blnc", bbar, gh_all)
    gdelta = gf * df_dd
    ga = np.zeros_like(a_mat)
    idx = np.arange(N)
    ga[idx, idx] += (gf * df_da).sum(axis=(0, 1))
    return gx, gdelta, gb, gc, gd, ga


def state_mixing_grad(gh_flat, h_all_flat):
    """gmix[b,t] = gh_t h_{t-1}^T; the t = 0 block vanishes (h_{-1} = 0)."""
    B, L, N, M = gh_flat.shape
    gmix = np.empty((B, L, N, N))
    gmix[:, 0] = 0.0
    if L > 1:
        np.matmul(gh_flat[:, 1:], h_all_flat[:, :-1].swapaxes(-1, -2),
                  out=gmix[:, 1:])
    return gmix


def mixing_grads(gmix, abar, alpha, delta, a_mat):
    """Fold gmix through mix = abar * alpha: returns (galpha, gdelta_mix,
    ga_mix). galpha is batch-summed when the adjacency is shared."""
    gmix_abar = gmix * abar
    if alpha.shape[0] == 1:
        galpha = gmix_abar.sum(axis=0, keepdims=True)
        gab_abar = gmix_abar * alpha[0]
    else:
        galpha = gmix_abar
        gab_abar = gmix_abar * alpha
    gdelta_mix = np.einsum("blij,ij->bli", gab_abar, a_mat)
    ga_mix = np.einsum("blij,bli->ij", gab_abar, delta)
    return galpha, gdelta_mix, ga_mix


def forward(x, delta, b_in, c_out, a_mat, d_skip, alpha, with_hidden,
            prelude=None, cache=None):
    B, L, N, C = x.shape
    S = b_in.shape[-1]
    if L == 0:
        hidden = np.empty((B, 0, N, S, C)) if with_hidden else None
        return np.empty_like(x), hidden
    if prelude is None:
        prelude = scan_prelude(x, delta, b_in, a_mat)
    abar, _, _, inject = prelude
    mix = abar * alpha
    if cache is not None:
        cache["mix"] = mix
    h_all = recurrence_forward(mix, inject).reshape(B, L, N, S, C)
    y = output_equation(c_out, h_all, d_skip, x)
    return y, (h_all if with_hidden else None)


def backward(gy, x, delta, b_in, c_out, a_mat, d_skip, alpha, h_all,
             prelude=None, cache=None):
    B, L, N, C = x.shape
    S = b_in.shape[-1]
    if prelude is None:
        prelude = scan_prelude(x, delta, b_in, a_mat)
    abar, f, bbar, _ = prelude
    mix = cache.get("mix") if cache else None
    if mix is None:
        mix = abar * alpha

    ghy = (c_out[..., None] * gy[..., None, :]).reshape(B, L, N, S * C)
    gh_flat = recurrence_backward(mix, ghy)
    gh_all = gh_flat.reshape(B, L, N, S, C)

    gx, gdelta, gb, gc, gd, ga = injection_grads(
        gy, x, b_in, c_out, d_skip, delta, a_mat, f, bbar, h_all, gh_all)

    gmix = state_mixing_grad(gh_flat, h_all.reshape(B, L, N, S * C))
    galpha, gdelta_mix, ga_mix = mixing_grads(gmix, abar, alpha, delta, a_mat)
    gdelta += gdelta_mix
    ga += ga_mix
    return gx, gdelta, gb, gc, ga, gd, galpha
