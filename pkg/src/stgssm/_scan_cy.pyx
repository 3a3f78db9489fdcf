# Compiled backend: the sequential state recursions of the graph-gated
# scan (reading the decay and adjacency factors directly, never
# materializing their product), the fused mixing-gradient pass, the gated
# graph convolution, and a streaming layer norm. The surrounding
# vectorized math is shared with the NumPy backend (stgssm._scan_np,
# which documents the shapes); kernels.py composes full forward/backward
# pairs. Built by setup.py; optional at runtime.

import numpy as np

cimport numpy as cnp

cnp.import_array()


def recurrence_forward_gated(double[:, :, :, ::1] abar,
                             double[:, :, :, ::1] alpha,
                             double[:, :, :, ::1] inject):
    # h_t = (abar_t * alpha_t) @ h_{t-1} + inject_t
    cdef Py_ssize_t B = inject.shape[0], L = inject.shape[1]
    cdef Py_ssize_t N = inject.shape[2], M = inject.shape[3]
    cdef Py_ssize_t AB = alpha.shape[0]
    h_arr = np.empty((B, L, N, M), dtype=np.float64)
    cdef double[:, :, :, ::1] h_all = h_arr
    cdef Py_ssize_t b, t, i, j, m, ab
    cdef double w
    with nogil:
        for b in range(B):
            ab = b if AB > 1 else 0
            for t in range(L):
                for i in range(N):
                    for m in range(M):
                        h_all[b, t, i, m] = inject[b, t, i, m]
                if t == 0:
                    continue
                for i in range(N):
                    for j in range(N):
                        w = abar[b, t, i, j] * alpha[ab, t, i, j]
                        if w != 0.0:
                            for m in range(M):
                                h_all[b, t, i, m] += w * h_all[b, t - 1, j, m]
    return h_arr


def recurrence_backward_gated(double[:, :, :, ::1] abar,
                              double[:, :, :, ::1] alpha,
                              double[:, :, :, ::1] ghy):
    # gh_t = ghy_t + mix_{t+1}^T @ gh_{t+1}, right to left
    cdef Py_ssize_t B = ghy.shape[0], L = ghy.shape[1]
    cdef Py_ssize_t N = ghy.shape[2], M = ghy.shape[3]
    cdef Py_ssize_t AB = alpha.shape[0]
    gh_arr = np.empty((B, L, N, M), dtype=np.float64)
    cdef double[:, :, :, ::1] gh_all = gh_arr
    cdef Py_ssize_t b, t, i, j, m, ab
    cdef double w
    with nogil:
        for b in range(B):
            ab = b if AB > 1 else 0
            for i in range(N):
                for m in range(M):
                    gh_all[b, L - 1, i, m] = ghy[b, L - 1, i, m]
            for t in range(L - 2, -1, -1):
                for j in range(N):
                    for m in range(M):
                        gh_all[b, t, j, m] = ghy[b, t, j, m]
                for i in range(N):
                    for j in range(N):
                        w = abar[b, t + 1, i, j] * alpha[ab, t + 1, i, j]
                        if w != 0.0:
                            for m in range(M):
                                gh_all[b, t, j, m] += w * gh_all[b, t + 1, i, m]
    return gh_arr


def mixing_grads(double[:, :, :, ::1] gmix, double[:, :, :, ::1] abar,
                 double[:, :, :, ::1] alpha, double[:, :, ::1] delta,
                 double[:, ::1] a_mat):
    # one pass folding gmix through mix = abar * alpha
    cdef Py_ssize_t B = gmix.shape[0], L = gmix.shape[1], N = gmix.shape[2]
    cdef Py_ssize_t AB = alpha.shape[0]
    galpha_arr = np.zeros((AB, L, N, N), dtype=np.float64)
    gdelta_arr = np.zeros((B, L, N), dtype=np.float64)
    ga_arr = np.zeros((N, N), dtype=np.float64)
    cdef double[:, :, :, ::1] galpha = galpha_arr
    cdef double[:, :, ::1] gdelta = gdelta_arr
    cdef double[:, ::1] ga = ga_arr
    cdef Py_ssize_t b, t, i, j, ab
    cdef double gma, gaa, dsum, dt
    with nogil:
        for b in range(B):
            ab = b if AB > 1 else 0
            for t in range(L):
                for i in range(N):
                    dt = delta[b, t, i]
                    dsum = 0.0
                    for j in range(N):
                        gma = gmix[b, t, i, j] * abar[b, t, i, j]
                        galpha[ab, t, i, j] += gma
                        gaa = gma * alpha[ab, t, i, j]
                        dsum += gaa * a_mat[i, j]
                        ga[i, j] += gaa * dt
                    gdelta[b, t, i] += dsum
    return galpha_arr, gdelta_arr, ga_arr


def gated_conv_forward(double[:, ::1] omega, double[:, :, :, ::1] alpha,
                       double[:, :, :, ::1] x):
    # out[b,l,i,c] = sum_j omega[i,j] alpha[b,l,i,j] x[b,l,j,c]
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], N = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t AB = alpha.shape[0]
    out_arr = np.empty((B, L, N, C), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, t, i, j, c, ab
    cdef double w
    with nogil:
        for b in range(B):
            ab = b if AB > 1 else 0
            for t in range(L):
                for i in range(N):
                    for c in range(C):
                        out[b, t, i, c] = 0.0
                    for j in range(N):
                        w = omega[i, j] * alpha[ab, t, i, j]
                        if w != 0.0:
                            for c in range(C):
                                out[b, t, i, c] += w * x[b, t, j, c]
    return out_arr


def gated_conv_backward(double[:, :, :, ::1] g, double[:, ::1] omega,
                        double[:, :, :, ::1] alpha, double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], N = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t AB = alpha.shape[0]
    gomega_arr = np.zeros((N, N), dtype=np.float64)
    galpha_arr = np.zeros((AB, L, N, N), dtype=np.float64)
    gx_arr = np.zeros((B, L, N, C), dtype=np.float64)
    cdef double[:, ::1] gomega = gomega_arr
    cdef double[:, :, :, ::1] galpha = galpha_arr
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, t, i, j, c, ab
    cdef double dot, w, om
    with nogil:
        for b in range(B):
            ab = b if AB > 1 else 0
            for t in range(L):
                for i in range(N):
                    for j in range(N):
                        dot = 0.0
                        for c in range(C):
                            dot += g[b, t, i, c] * x[b, t, j, c]
                        om = omega[i, j]
                        w = alpha[ab, t, i, j]
                        gomega[i, j] += dot * w
                        galpha[ab, t, i, j] += dot * om
                        w = om * w
                        if w != 0.0:
                            for c in range(C):
                                gx[b, t, j, c] += w * g[b, t, i, c]
    return gomega_arr, galpha_arr, gx_arr


def layer_norm_forward(double[:, ::1] x, double[::1] gamma, double[::1] beta,
                       double eps):
    # row-wise standardization in one streaming pass
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    y_arr = np.empty((R, D), dtype=np.float64)
    xhat_arr = np.empty((R, D), dtype=np.float64)
    inv_arr = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, d, iv
    with nogil:
        for i in range(R):
            mu = 0.0
            for j in range(D):
                mu += x[i, j]
            mu /= D
            var = 0.0
            for j in range(D):
                d = x[i, j] - mu
                var += d * d
            var /= D
            iv = 1.0 / ((var + eps) ** 0.5)
            inv[i] = iv
            for j in range(D):
                d = (x[i, j] - mu) * iv
                xhat[i, j] = d
                y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, inv_arr


def layer_norm_backward(double[:, ::1] g, double[:, ::1] xhat,
                        double[::1] inv, double[::1] gamma):
    cdef Py_ssize_t R = g.shape[0], D = g.shape[1]
    gx_arr = np.empty((R, D), dtype=np.float64)
    ggamma_arr = np.zeros(D, dtype=np.float64)
    gbeta_arr = np.zeros(D, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggamma = ggamma_arr
    cdef double[::1] gbeta = gbeta_arr
    cdef Py_ssize_t i, j
    cdef double s1, s2, gj, xh
    with nogil:
        for i in range(R):
            s1 = 0.0
            s2 = 0.0
            for j in range(D):
                gj = g[i, j] * gamma[j]
                xh = xhat[i, j]
                s1 += gj
                s2 += gj * xh
                ggamma[j] += g[i, j] * xh
                gbeta[j] += g[i, j]
            s1 /= D
            s2 /= D
            for j in range(D):
                gx[i, j] = inv[i] * (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return gx_arr, ggamma_arr, gbeta_arr


def recurrence_forward(double[:, :, :, ::1] mix, double[:, :, :, ::1] inject):
    # h_t = mix_t @ h_{t-1} + inject_t (materialized mixing operator)
    cdef Py_ssize_t B = inject.shape[0], L = inject.shape[1]
    cdef Py_ssize_t N = inject.shape[2], M = inject.shape[3]
    h_arr = np.empty((B, L, N, M), dtype=np.float64)
    cdef double[:, :, :, ::1] h_all = h_arr
    cdef Py_ssize_t b, t, i, j, m
    cdef double w
    with nogil:
        for b in range(B):
            for t in range(L):
                for i in range(N):
                    for m in range(M):
                        h_all[b, t, i, m] = inject[b, t, i, m]
                if t == 0:
                    continue
                for i in range(N):
                    for j in range(N):
                        w = mix[b, t, i, j]
                        if w != 0.0:
                            for m in range(M):
                                h_all[b, t, i, m] += w * h_all[b, t - 1, j, m]
    return h_arr


def recurrence_backward(double[:, :, :, ::1] mix, double[:, :, :, ::1] ghy):
    # gh_t = ghy_t + mix_{t+1}^T @ gh_{t+1}, right to left
    cdef Py_ssize_t B = ghy.shape[0], L = ghy.shape[1]
    cdef Py_ssize_t N = ghy.shape[2], M = ghy.shape[3]
    gh_arr = np.empty((B, L, N, M), dtype=np.float64)
    cdef double[:, :, :, ::1] gh_all = gh_arr
    cdef Py_ssize_t b, t, i, j, m
    cdef double w
    with nogil:
        for b in range(B):
            for i in range(N):
                for m in range(M):
                    gh_all[b, L - 1, i, m] = ghy[b, L - 1, i, m]
            for t in range(L - 2, -1, -1):
                for j in range(N):
                    for m in range(M):
                        gh_all[b, t, j, m] = ghy[b, t, j, m]
                for i in range(N):
                    for j in range(N):
                        w = mix[b, t + 1, i, j]
                        if w != 0.0:
                            for m in range(M):
                                gh_all[b, t, j, m] += w * gh_all[b, t + 1, i, m]
    return gh_arr
