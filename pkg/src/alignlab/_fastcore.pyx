# Compiled batch kernels for the cross-attention classifier.
# Contract mirrors _purecore exactly; see that module for shape notation.

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs

cnp.import_array()

NAME = "fast"


def patchify(images, int patch):
    """(B, S, S) -> (B, N, patch*patch), row-major patches, row-major pixels."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] img = np.ascontiguousarray(images, dtype=np.float64)
    cdef int b = img.shape[0], s = img.shape[1]
    cdef int g = s // patch
    cdef int n = g * g, p2 = patch * patch
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((b, n, p2), dtype=np.float64)
    cdef double[:, :, ::1] iv = img
    cdef double[:, :, ::1] ov = out
    cdef int bi, gi, gj, pi, pj
    for bi in range(b):
        for gi in range(g):
            for gj in range(g):
                for pi in range(patch):
                    for pj in range(patch):
                        ov[bi, gi * g + gj, pi * patch + pj] = iv[bi, gi * patch + pi, gj * patch + pj]
    return out


def forward_batch(images, int patch, patch_proj, patch_bias, class_vec,
                  q_proj, k_proj, double gamma, double beta, cls_w, double cls_b):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] x = patchify(images, patch)
    # transposed copy so the reduction over p2 runs on contiguous memory
    cdef double[:, ::1] wpt = np.ascontiguousarray(
        np.asarray(patch_proj, dtype=np.float64).T)
    cdef double[::1] bp = np.ascontiguousarray(patch_bias, dtype=np.float64)
    cdef double[::1] t = np.ascontiguousarray(class_vec, dtype=np.float64)
    cdef double[:, ::1] qp = np.ascontiguousarray(q_proj, dtype=np.float64)
    cdef double[:, ::1] kp = np.ascontiguousarray(k_proj, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(cls_w, dtype=np.float64)

    cdef int b = x.shape[0], n = x.shape[1], p2 = x.shape[2]
    cdef int e = wpt.shape[0]
    cdef double scale = 1.0 / sqrt(<double>e)

    cdef cnp.ndarray[cnp.float64_t, ndim=3] v_arr = np.empty((b, n, e), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] k_arr = np.empty((b, n, e), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] q_arr = np.empty(e, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] attn_arr = np.empty((b, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aligned_arr = np.empty((b, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pooled_arr = np.zeros((b, e), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] logits_arr = np.empty(b, dtype=np.float64)

    cdef double[:, :, ::1] xv = x
    cdef double[:, :, ::1] vv = v_arr
    cdef double[:, :, ::1] kv = k_arr
    cdef double[::1] qv = q_arr
    cdef double[:, ::1] av = attn_arr
    cdef double[:, ::1] alv = aligned_arr
    cdef double[:, ::1] pv = pooled_arr
    cdef double[::1] lv = logits_arr

    cdef int bi, ni, ei, ki_
    cdef double acc, mx, tot, u, z

    # q = q_proj @ class_vec
    for ei in range(e):
        acc = 0.0
        for ki_ in range(e):
            acc += qp[ei, ki_] * t[ki_]
        qv[ei] = acc

    for bi in range(b):
        # v = x @ patch_proj + patch_bias ; k = v @ k_proj.T
        for ni in range(n):
            for ei in range(e):
                acc = bp[ei]
                for ki_ in range(p2):
                    acc += xv[bi, ni, ki_] * wpt[ei, ki_]
                vv[bi, ni, ei] = acc
            for ei in range(e):
                acc = 0.0
                for ki_ in range(e):
                    acc += vv[bi, ni, ki_] * kp[ei, ki_]
                kv[bi, ni, ei] = acc
        # scores -> softmax
        mx = -1e300
        for ni in range(n):
            acc = 0.0
            for ei in range(e):
                acc += kv[bi, ni, ei] * qv[ei]
            acc *= scale
            av[bi, ni] = acc
            if acc > mx:
                mx = acc
        tot = 0.0
        for ni in range(n):
            av[bi, ni] = exp(av[bi, ni] - mx)
            tot += av[bi, ni]
        for ni in range(n):
            av[bi, ni] /= tot
        # aligner head + pooled feature + logit
        for ni in range(n):
            u = gamma * (n * av[bi, ni]) + beta
            if u >= 0:
                alv[bi, ni] = 1.0 / (1.0 + exp(-u))
            else:
                alv[bi, ni] = exp(u) / (1.0 + exp(u))
            for ei in range(e):
                pv[bi, ei] += av[bi, ni] * vv[bi, ni, ei]
        z = cls_b
        for ei in range(e):
            z += pv[bi, ei] * w[ei]
        lv[bi] = z

    cache = (x, v_arr, k_arr, q_arr, attn_arr, aligned_arr, pooled_arr,
             np.asarray(t), np.asarray(qp), np.asarray(kp), np.asarray(w),
             gamma, scale, n)
    return logits_arr, attn_arr, aligned_arr, cache


def backward_batch(cache, d_logit, d_aligned):
    (x, v_arr, k_arr, q_arr, attn_arr, aligned_arr, pooled_arr,
     class_vec, q_proj, k_proj, cls_w, gamma_f, scale_f, n_tokens) = cache

    cdef double[:, :, ::1] xv = x
    cdef double[:, :, ::1] vv = v_arr
    cdef double[:, :, ::1] kv = k_arr
    cdef double[::1] qv = q_arr
    cdef double[:, ::1] av = attn_arr
    cdef double[:, ::1] alv = aligned_arr
    cdef double[:, ::1] pv = pooled_arr
    cdef double[::1] t = class_vec
    cdef double[:, ::1] qp = q_proj
    cdef double[:, ::1] kp = k_proj
    cdef double[::1] w = cls_w
    cdef double gamma = gamma_f, scale = scale_f
    cdef int n = n_tokens

    cdef double[::1] dl = np.ascontiguousarray(d_logit, dtype=np.float64)
    cdef double[:, ::1] dal = np.ascontiguousarray(d_aligned, dtype=np.float64)

    cdef int b = xv.shape[0], p2 = xv.shape[2], e = vv.shape[2]

    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_wp = np.zeros((p2, e), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d_bp = np.zeros(e, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d_t = np.zeros(e, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_qp = np.zeros((e, e), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d_kp = np.zeros((e, e), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d_w = np.zeros(e, dtype=np.float64)
    cdef double d_gamma = 0.0, d_beta = 0.0, d_b = 0.0

    cdef double[:, ::1] dwp = d_wp
    cdef double[::1] dbp = d_bp
    cdef double[::1] dt = d_t
    cdef double[:, ::1] dqp = d_qp
    cdef double[:, ::1] dkp = d_kp
    cdef double[::1] dw = d_w

    cdef cnp.ndarray[cnp.float64_t, ndim=1] d_q = np.zeros(e, dtype=np.float64)
    cdef double[::1] dqv = d_q
    cdef cnp.ndarray[cnp.float64_t, ndim=1] da_buf = np.empty(n, dtype=np.float64)
    cdef double[::1] da = da_buf
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dp_buf = np.empty(e, dtype=np.float64)
    cdef double[::1] dpool = dp_buf
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dv_buf = np.empty((n, e), dtype=np.float64)
    cdef double[:, ::1] dv = dv_buf

    cdef int bi, ni, ei, ki_
    cdef double du, inner, ds, dk_e, acc

    for bi in range(b):
        # aligner head
        for ni in range(n):
            du = dal[bi, ni] * alv[bi, ni] * (1.0 - alv[bi, ni])
            d_gamma += du * n * av[bi, ni]
            d_beta += du
            da[ni] = du * gamma * n
        # classifier head
        d_b += dl[bi]
        for ei in range(e):
            dw[ei] += pv[bi, ei] * dl[bi]
            dpool[ei] = dl[bi] * w[ei]
        # pooled = sum_j attn_j v_j
        for ni in range(n):
            acc = 0.0
            for ei in range(e):
                acc += vv[bi, ni, ei] * dpool[ei]
                dv[ni, ei] = av[bi, ni] * dpool[ei]
            da[ni] += acc
        # softmax backward
        inner = 0.0
        for ni in range(n):
            inner += da[ni] * av[bi, ni]
        for ni in range(n):
            ds = av[bi, ni] * (da[ni] - inner)
            # scores = scale * k . q
            for ei in range(e):
                dqv[ei] += scale * ds * kv[bi, ni, ei]
                dk_e = scale * ds * qv[ei]
                # k = v @ k_proj.T
                for ki_ in range(e):
                    dkp[ei, ki_] += dk_e * vv[bi, ni, ki_]
                    dv[ni, ki_] += dk_e * kp[ei, ki_]
        # v = x @ patch_proj + patch_bias
        for ni in range(n):
            for ei in range(e):
                dbp[ei] += dv[ni, ei]
            for ki_ in range(p2):
                acc = xv[bi, ni, ki_]
                for ei in range(e):
                    dwp[ki_, ei] += acc * dv[ni, ei]

    # q = q_proj @ class_vec
    for ei in range(e):
        for ki_ in range(e):
            dqp[ei, ki_] = dqv[ei] * t[ki_]
            dt[ki_] += qp[ei, ki_] * dqv[ei]

    return (d_wp, d_bp, d_t, d_qp, d_kp, d_gamma, d_beta, d_w, d_b)
