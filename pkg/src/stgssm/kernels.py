"""Backend selection for the hot kernels.

The scan's sequential recursions, the fused mixing-gradient pass, the
gated graph convolution, and the streaming layer norm come from the
compiled extension when it is importable, with NumPy fallbacks. Force a
choice with the STGSSM_KERNEL environment variable ("cython" or
"numpy"); ``available_backends`` is what the benchmark uses to compare
the two scan implementations.
"""

import contextlib
import os

import numpy as np

from . import _scan_np

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits
except ImportError:  # pragma: no cover
    _threadpool_limits = None


def single_thread_blas():
    """Pin BLAS pools to one thread (training is specified single-threaded,
    and benchmark timing wants it); no-op when threadpoolctl is missing."""
    if _threadpool_limits is None:
        return contextlib.nullcontext()
    return _threadpool_limits(limits=1)


_forced = os.environ.get("STGSSM_KERNEL", "").lower()

_cy = None
if _forced != "numpy":
    try:
        from . import _scan_cy as _cy
    except ImportError:
        _cy = None
        if _forced == "cython":
            raise ImportError(
                "STGSSM_KERNEL=cython but the compiled extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )


def _compose_cython_scan(cy):
    def forward(x, delta, b_in, c_out, a_mat, d_skip, alpha, with_hidden,
                prelude=None, cache=None):
        B, L, N, C = x.shape
        S = b_in.shape[-1]
        if L == 0:
            hidden = np.empty((B, 0, N, S, C)) if with_hidden else None
            return np.empty_like(x), hidden
        if prelude is None:
            prelude = _scan_np.scan_prelude(x, delta, b_in, a_mat)
        abar, _, _, inject = prelude
        mix = np.ascontiguousarray(abar * alpha)
        if cache is not None:
            cache["mix"] = mix
        h_all = cy.recurrence_forward(mix, inject).reshape(B, L, N, S, C)
        y = _scan_np.output_equation(c_out, h_all, d_skip, x)
        return y, (h_all if with_hidden else None)

    def backward(gy, x, delta, b_in, c_out, a_mat, d_skip, alpha, h_all,
                 prelude=None, cache=None):
        B, L, N, C = x.shape
        S = b_in.shape[-1]
        if prelude is None:
            prelude = _scan_np.scan_prelude(x, delta, b_in, a_mat)
        abar, f, bbar, _ = prelude
        mix = cache.get("mix") if cache else None
        if mix is None:
            mix = np.ascontiguousarray(abar * alpha)

        ghy = (c_out[..., None] * gy[..., None, :]).reshape(B, L, N, S * C)
        gh_flat = cy.recurrence_backward(mix, np.ascontiguousarray(ghy))
        gh_all = gh_flat.reshape(B, L, N, S, C)

        gx, gdelta, gb, gc, gd, ga = _scan_np.injection_grads(
            gy, x, b_in, c_out, d_skip, delta, a_mat, f, bbar, h_all, gh_all)

        gmix = _scan_np.state_mixing_grad(gh_flat, h_all.reshape(B, L, N, S * C))
        galpha, gdelta_mix, ga_mix = cy.mixing_grads(
            gmix, abar, np.ascontiguousarray(alpha),
            np.ascontiguousarray(delta), np.ascontiguousarray(a_mat))
        gdelta += gdelta_mix
        ga += ga_mix
        return gx, gdelta, gb, gc, ga, gd, galpha

    return forward, backward


def _gated_conv_forward_np(omega, alpha, x):
    return np.matmul(omega * alpha, x)


def _gated_conv_backward_np(g, omega, alpha, x):
    gout = np.matmul(g, x.swapaxes(-1, -2))
    if alpha.shape[0] == 1 and g.shape[0] > 1:
        galpha = (gout * omega).sum(axis=0, keepdims=True)
    else:
        galpha = gout * omega
    gomega = (gout * alpha).sum(axis=(0, 1))
    gx = np.matmul((omega * alpha).swapaxes(-1, -2), g)
    return gomega, galpha, gx


gated_conv_forward = _gated_conv_forward_np  # BLAS matmul wins at all sizes
if _cy is not None:
    BACKEND = "cython"
    forward, backward = _compose_cython_scan(_cy)
    ln_forward = _cy.layer_norm_forward
    ln_backward = _cy.layer_norm_backward
    gated_conv_backward = _cy.gated_conv_backward
else:
    BACKEND = "numpy"
    forward = _scan_np.forward
    backward = _scan_np.backward
    ln_forward = None
    ln_backward = None
    gated_conv_backward = _gated_conv_backward_np

zoh_input_factor = _scan_np.zoh_input_factor
zoh_input_factor_partials = _scan_np.zoh_input_factor_partials
scan_prelude = _scan_np.scan_prelude
ZOH_SMALL = _scan_np.ZOH_SMALL


def available_backends():
    """Name -> (forward, backward) scan pair per importable backend."""
    out = {"numpy": (_scan_np.forward, _scan_np.backward)}
    if _cy is not None:
        out["cython"] = _compose_cython_scan(_cy)
    return out
