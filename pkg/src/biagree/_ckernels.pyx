# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inference kernels; same contract as ``_kernels_py``."""
import numpy as np

from libc.math cimport exp, log, tanh


cdef void _gru(const double[::1] x, const double[::1] h,
               const double[:, ::1] Wz, const double[::1] bz,
               const double[:, ::1] Wr, const double[::1] br,
               const double[:, ::1] Wh, const double[::1] bh,
               double[::1] z, double[::1] r, double[::1] hc,
               double[::1] out) noexcept nogil:
    cdef Py_ssize_t nx = x.shape[0], nh = h.shape[0], k, j
    cdef double v
    for j in range(nh):
        z[j] = bz[j]
        r[j] = br[j]
        hc[j] = bh[j]
    for k in range(nx):
        v = x[k]
        for j in range(nh):
            z[j] += v * Wz[k, j]
            r[j] += v * Wr[k, j]
            hc[j] += v * Wh[k, j]
    for k in range(nh):
        v = h[k]
        for j in range(nh):
            z[j] += v * Wz[nx + k, j]
            r[j] += v * Wr[nx + k, j]
    for j in range(nh):
        z[j] = 1.0 / (1.0 + exp(-z[j]))
        r[j] = 1.0 / (1.0 + exp(-r[j]))
    for k in range(nh):
        v = r[k] * h[k]
        for j in range(nh):
            hc[j] += v * Wh[nx + k, j]
    for j in range(nh):
        out[j] = (1.0 - z[j]) * h[j] + z[j] * tanh(hc[j])


def encode(P, src_ids):
    cdef const double[:, ::1] emb = P["src_emb"]
    cdef const double[:, ::1] Wz = P["enc_Wz"]
    cdef const double[::1] bz = P["enc_bz"]
    cdef const double[:, ::1] Wr = P["enc_Wr"]
    cdef const double[::1] br = P["enc_br"]
    cdef const double[:, ::1] Wh = P["enc_Wh"]
    cdef const double[::1] bh = P["enc_bh"]
    cdef const double[:, ::1] Wk = P["att_Wk"]
    cdef const double[:, ::1] Wi = P["init_W"]
    cdef const double[::1] bi = P["init_b"]
    cdef Py_ssize_t[::1] ids = np.ascontiguousarray(src_ids, dtype=np.intp)
    cdef Py_ssize_t T = ids.shape[0], nh = bi.shape[0], na = Wk.shape[1], t, k, j
    states_arr = np.empty((T, nh))
    keys_arr = np.empty((T, na))
    s0_arr = np.empty(nh)
    cdef double[:, ::1] states = states_arr
    cdef double[:, ::1] keys = keys_arr
    cdef double[::1] s0 = s0_arr
    cdef double[::1] h = np.zeros(nh)
    cdef double[::1] z = np.empty(nh)
    cdef double[::1] r = np.empty(nh)
    cdef double[::1] hc = np.empty(nh)
    cdef double v
    with nogil:
        for t in range(T):
            _gru(emb[ids[t]], h, Wz, bz, Wr, br, Wh, bh, z, r, hc, states[t])
            for j in range(nh):
                h[j] = states[t, j]
            for j in range(na):
                keys[t, j] = 0.0
            for k in range(nh):
                v = h[k]
                for j in range(na):
                    keys[t, j] += v * Wk[k, j]
        for j in range(nh):
            s0[j] = bi[j]
        for k in range(nh):
            v = h[k]
            for j in range(nh):
                s0[j] += v * Wi[k, j]
        for j in range(nh):
            s0[j] = tanh(s0[j])
    return states_arr, keys_arr, s0_arr


cdef void _gemm_acc(const double* X, Py_ssize_t ldx, Py_ssize_t n, Py_ssize_t kdim,
                    const double* W, Py_ssize_t ncol, double* out) noexcept nogil:
    # out[n, ncol] += X[n, :kdim] @ W[kdim, ncol]; each weight row is read once for all n rows
    cdef Py_ssize_t k, i, j
    cdef double v
    cdef const double* w
    cdef double* o
    for k in range(kdim):
        w = W + k * ncol
        for i in range(n):
            v = X[i * ldx + k]
            o = out + i * ncol
            for j in range(ncol):
                o[j] += v * w[j]


cdef void _fill_rows(double[:, ::1] out, const double[::1] b) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = b[j]


def decoder_step(P, H_in, K_in, prev_ids, S_in):
    cdef const double[:, ::1] emb = P["tgt_emb"]
    cdef const double[:, ::1] Wz = P["dec_Wz"]
    cdef const double[::1] bz = P["dec_bz"]
    cdef const double[:, ::1] Wr = P["dec_Wr"]
    cdef const double[::1] br = P["dec_br"]
    cdef const double[:, ::1] Wh = P["dec_Wh"]
    cdef const double[::1] bh = P["dec_bh"]
    cdef const double[:, ::1] Wq = P["att_Wq"]
    cdef const double[:, ::1] Wo = P["out_Wo"]
    cdef const double[::1] bo = P["out_bo"]
    cdef const double[:, ::1] Wout = P["out_W"]
    cdef const double[::1] bout = P["out_b"]
    cdef const double[:, ::1] H = np.ascontiguousarray(H_in, dtype=np.float64)
    cdef const double[:, ::1] K = np.ascontiguousarray(K_in, dtype=np.float64)
    cdef const double[:, ::1] S = np.ascontiguousarray(S_in, dtype=np.float64)
    cdef Py_ssize_t[::1] prev = np.ascontiguousarray(prev_ids, dtype=np.intp)
    cdef Py_ssize_t n = prev.shape[0], nh = S.shape[1], na = Wq.shape[1], ne = emb.shape[1]
    cdef Py_ssize_t T = H.shape[0], V = bout.shape[0], i, j, t
    logp_arr = np.empty((n, V))
    snew_arr = np.empty((n, nh))
    cdef double[:, ::1] logp = logp_arr
    cdef double[:, ::1] snew = snew_arr
    cdef double[:, ::1] x = np.empty((n, ne))
    cdef double[:, ::1] z = np.empty((n, nh))
    cdef double[:, ::1] r = np.empty((n, nh))
    cdef double[:, ::1] hc = np.empty((n, nh))
    cdef double[:, ::1] q = np.zeros((n, na))
    cdef double[:, ::1] ctx = np.zeros((n, nh))
    cdef double[:, ::1] o = np.empty((n, nh))
    cdef double[::1] alpha = np.empty(T)
    cdef double v, mx, tot
    if n == 0:
        return logp_arr, snew_arr
    with nogil:
        for i in range(n):
            for j in range(ne):
                x[i, j] = emb[prev[i], j]
        # GRU over all rows
        _fill_rows(z, bz)
        _fill_rows(r, br)
        _fill_rows(hc, bh)
        _gemm_acc(&x[0, 0], ne, n, ne, &Wz[0, 0], nh, &z[0, 0])
        _gemm_acc(&S[0, 0], nh, n, nh, &Wz[ne, 0], nh, &z[0, 0])
        _gemm_acc(&x[0, 0], ne, n, ne, &Wr[0, 0], nh, &r[0, 0])
        _gemm_acc(&S[0, 0], nh, n, nh, &Wr[ne, 0], nh, &r[0, 0])
        _gemm_acc(&x[0, 0], ne, n, ne, &Wh[0, 0], nh, &hc[0, 0])
        for i in range(n):
            for j in range(nh):
                z[i, j] = 1.0 / (1.0 + exp(-z[i, j]))
                # r is no longer needed on its own, keep r * s in its place
                r[i, j] = S[i, j] / (1.0 + exp(-r[i, j]))
        _gemm_acc(&r[0, 0], nh, n, nh, &Wh[ne, 0], nh, &hc[0, 0])
        for i in range(n):
            for j in range(nh):
                snew[i, j] = (1.0 - z[i, j]) * S[i, j] + z[i, j] * tanh(hc[i, j])
        # attention
        _gemm_acc(&snew[0, 0], nh, n, nh, &Wq[0, 0], na, &q[0, 0])
        for i in range(n):
            mx = -1e300
            for t in range(T):
                v = 0.0
                for j in range(na):
                    v += K[t, j] * q[i, j]
                alpha[t] = v
                if v > mx:
                    mx = v
            tot = 0.0
            for t in range(T):
                alpha[t] = exp(alpha[t] - mx)
                tot += alpha[t]
            for t in range(T):
                v = alpha[t] / tot
                for j in range(nh):
                    ctx[i, j] += v * H[t, j]
        # output layer and log-softmax
        _fill_rows(o, bo)
        _gemm_acc(&snew[0, 0], nh, n, nh, &Wo[0, 0], nh, &o[0, 0])
        _gemm_acc(&ctx[0, 0], nh, n, nh, &Wo[nh, 0], nh, &o[0, 0])
        for i in range(n):
            for j in range(nh):
                o[i, j] = tanh(o[i, j])
        _fill_rows(logp, bout)
        _gemm_acc(&o[0, 0], nh, n, nh, &Wout[0, 0], V, &logp[0, 0])
        for i in range(n):
            mx = -1e300
            for j in range(V):
                if logp[i, j] > mx:
                    mx = logp[i, j]
            tot = 0.0
            for j in range(V):
                tot += exp(logp[i, j] - mx)
            tot = log(tot) + mx
            for j in range(V):
                logp[i, j] -= tot
    return logp_arr, snew_arr
