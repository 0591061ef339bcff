"""Pure-numpy batch kernels for the cross-attention classifier.

Same contract as the compiled `_fastcore` extension; this module is the
fallback selected at import when the extension is unavailable (or when
ALIGNLAB_BACKEND=pure). Shapes: B batch, N tokens (grid cells), P2 pixels
per patch, E embedding width.
"""
from __future__ import annotations

import numpy as np

NAME = "pure"


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S) -> (B, N, patch*patch), row-major patches, row-major pixels."""
    b, s, _ = images.shape
    g = s // patch
    return (
        images.reshape(b, g, patch, g, patch)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, g * g, patch * patch)
    )


def forward_batch(images, patch, patch_proj, patch_bias, class_vec,
                  q_proj, k_proj, gamma, beta, cls_w, cls_b):
    """Forward pass for one class over a batch.

    Returns (logits (B,), attn (B,N), aligned (B,N), cache).
    """
    x = patchify(np.ascontiguousarray(images, dtype=np.float64), patch)
    n = x.shape[1]
    embed = patch_proj.shape[1]
    scale = 1.0 / np.sqrt(embed)

    v = x @ patch_proj + patch_bias                       # (B, N, E)
    q = q_proj @ class_vec                                # (E,)
    k = v @ k_proj.T                                      # (B, N, E)
    scores = (k @ q) * scale                              # (B, N)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=1, keepdims=True)               # (B, N)

    u = gamma * (n * attn) + beta
    # stable sigmoid
    aligned = np.where(u >= 0, 1.0 / (1.0 + np.exp(-np.abs(u))),
                       np.exp(-np.abs(u)) / (1.0 + np.exp(-np.abs(u))))

    pooled = np.einsum("bn,bne->be", attn, v)             # (B, E)
    logits = pooled @ cls_w + cls_b                       # (B,)

    cache = (x, v, k, q, attn, aligned, pooled, class_vec,
             q_proj, k_proj, cls_w, float(gamma), scale, n)
    return logits, attn, aligned, cache


def backward_batch(cache, d_logit, d_aligned):
    """Backward pass; gradients summed over the batch.

    Returns (d_patch_proj, d_patch_bias, d_class_vec, d_q_proj, d_k_proj,
    d_gamma, d_beta, d_cls_w, d_cls_b).
    """
    (x, v, k, q, attn, aligned, pooled, class_vec,
     q_proj, k_proj, cls_w, gamma, scale, n) = cache
    d_logit = np.asarray(d_logit, dtype=np.float64)
    d_aligned = np.asarray(d_aligned, dtype=np.float64)

    # aligner head: aligned = sigmoid(gamma * n * attn + beta)
    du = d_aligned * aligned * (1.0 - aligned)            # (B, N)
    d_gamma = float(np.sum(du * n * attn))
    d_beta = float(np.sum(du))
    d_attn = du * (gamma * n)

    # classifier head: logit = pooled . w + b
    d_cls_w = pooled.T @ d_logit                          # (E,)
    d_cls_b = float(d_logit.sum())
    d_pooled = d_logit[:, None] * cls_w[None, :]          # (B, E)

    # pooled = sum_j attn_j v_j
    d_attn = d_attn + np.einsum("bne,be->bn", v, d_pooled)
    d_v = attn[:, :, None] * d_pooled[:, None, :]         # (B, N, E)

    # softmax over tokens
    inner = np.sum(d_attn * attn, axis=1, keepdims=True)
    d_scores = attn * (d_attn - inner)                    # (B, N)

    # scores = scale * k . q
    d_q = scale * np.einsum("bn,bne->e", d_scores, k)
    d_k = scale * d_scores[:, :, None] * q[None, None, :]

    # k = v @ k_proj.T
    d_k_proj = np.einsum("bne,bnf->ef", d_k, v)
    d_v += d_k @ k_proj

    # q = q_proj @ class_vec
    d_q_proj = np.outer(d_q, class_vec)
    d_class_vec = q_proj.T @ d_q

    # v = x @ patch_proj + patch_bias
    d_patch_proj = np.einsum("bnp,bne->pe", x, d_v)
    d_patch_bias = d_v.sum(axis=(0, 1))

    return (d_patch_proj, d_patch_bias, d_class_vec, d_q_proj, d_k_proj,
            d_gamma, d_beta, d_cls_w, d_cls_b)
