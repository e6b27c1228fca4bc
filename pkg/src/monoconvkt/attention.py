"""Attention mechanisms: vanilla scaled dot-product, exponential-decay
(monotonic) attention with a context-weighted distance, span-based dynamic
convolution, and the concatenated combination of the last two.

Shapes follow a heads-first layout: queries/keys/values are
``(..., L, D)`` per head, attention matrices are ``(..., L, L)`` with rows
indexed by query position t and columns by key position t'.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (Tensor, ShapeError, concat, exp, matmul, mul, neg,
                     reshape, softmax, softplus, stop_gradient, swap_axes,
                     transpose, _make)

VARIANTS = ("vanilla", "mono", "conv", "monoconv")


@dataclass
class AttentionParams:
    """Per-layer attention weights.

    delta_raw is mapped through softplus so every head's decay rate stays
    strictly positive. The SDC kernel generator is one linear map per head
    (head_dim -> kernel_size, plus bias). kernel_size must be odd.
    """

    w_q: Tensor            # (h, h)
    w_k: Tensor            # (h, h)
    w_v: Tensor            # (h, h)
    w_o: Tensor            # (h, h)
    delta_raw: Tensor      # (H,)
    sdc_w: Tensor          # (H, D, kernel_size)
    sdc_b: Tensor          # (H, 1, kernel_size)
    heads: int
    kernel_size: int

    def tensors(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o,
                self.delta_raw, self.sdc_w, self.sdc_b]


def scaled_scores(q: Tensor, k: Tensor) -> Tensor:
    """(q . k) / sqrt(D) for all position pairs."""
    d_k = q.shape[-1]
    return mul(matmul(q, swap_axes(k, -1, -2)), 1.0 / np.sqrt(d_k))


def _key_mask(mask: np.ndarray, score_ndim: int) -> np.ndarray:
    """Align a (..., L) valid-position mask against (..., [H,] L, L) scores.

    Head axes sit between the batch dims and the trailing L, so singleton
    axes are inserted there; the mask then broadcasts along query rows.
    """
    m = np.asarray(mask, dtype=bool)
    extra = score_ndim - m.ndim - 1
    if extra < 0:
        raise ShapeError(f"mask ndim {m.ndim} too large for scores ndim {score_ndim}")
    return m.reshape(m.shape[:-1] + (1,) * extra + (1, m.shape[-1]))


def _pad_keep(mask: np.ndarray, value_ndim: int) -> np.ndarray:
    """Align a (..., L) mask against (..., [H,] L, D) values as a 0/1 factor."""
    m = np.asarray(mask, dtype=np.float64)
    extra = value_ndim - m.ndim - 1
    if extra < 0:
        raise ShapeError(f"mask ndim {m.ndim} too large for values ndim {value_ndim}")
    return m.reshape(m.shape[:-1] + (1,) * extra + (m.shape[-1], 1))


def gamma(q: Tensor, k: Tensor, mask: Optional[np.ndarray] = None,
          causal: bool = False) -> Tensor:
    """Context weights: softmax over key positions of scaled dot products.

    ``mask`` is a boolean valid-key array of shape ``(..., L)``. With
    ``causal=True`` only keys at or before the query position participate.
    Every row sums to 1 over its valid span.
    """
    scores = scaled_scores(q, k)
    L = scores.shape[-1]
    key_valid = None
    if mask is not None:
        key_valid = _key_mask(mask, scores.ndim)
    if causal:
        tri = np.tril(np.ones((L, L), dtype=bool))
        key_valid = tri if key_valid is None else (key_valid & tri)
    return softmax(scores, axis=-1, mask=key_valid)


def distance_from_gamma(g: Tensor) -> Tensor:
    """Context-weighted positional distance.

    d[t, tau] = |t - tau| * sum of gamma[t, t'] for t' in the index span
    (min(t,tau), max(t,tau)]; the diagonal is exactly zero. Implemented with
    cumulative sums, so it costs O(L^2) rather than O(L^3).
    """
    G = g.data
    L = G.shape[-1]
    if G.shape[-2] != L:
        raise ShapeError(f"gamma must be square in its last two dims, got {G.shape}")
    S = np.cumsum(G, axis=-1)
    # Sum over the span (min(t,tau), max(t,tau)] equals the signed running
    # sum difference: |t-tau| * span_sum == (tau - t) * (S[t,tau] - S[t,t]).
    idx = np.arange(L)
    offset = (idx[None, :] - idx[:, None]).astype(np.float64)
    diag = S[..., idx, idx][..., :, np.newaxis]
    d = offset * (S - diag)

    def backward(grad):
        gS = grad * offset
        gS[..., idx, idx] -= gS.sum(axis=-1)
        # S = cumsum(gamma): adjoint is the reversed cumulative sum.
        gG = np.cumsum(gS[..., ::-1], axis=-1)[..., ::-1]
        g._accumulate(np.ascontiguousarray(gG), owned=True)

    return _make(d, (g,), backward)


def monotonic_attention(q: Tensor, k: Tensor, v: Tensor, delta,
                        mask: Optional[np.ndarray] = None, *,
                        literal: bool = False, causal: bool = False,
                        stop_gamma: bool = True,
                        capture: Optional[dict] = None) -> Tensor:
    """Scaled dot-product attention damped by exponential distance decay.

    Default scoring is exp(-delta * d) * (q.k)/sqrt(D); as delta -> 0 this
    reduces exactly to vanilla attention. ``literal=True`` switches to the
    alternative algebra (-delta * d) * (q.k)/sqrt(D). The distance is
    treated as a measurement: gamma is detached unless ``stop_gamma`` is
    False.
    """
    raw = scaled_scores(q, k)
    L = raw.shape[-1]
    gamma_valid = None
    if mask is not None:
        gamma_valid = _key_mask(mask, raw.ndim)
    if causal:
        tri = np.tril(np.ones((L, L), dtype=bool))
        gamma_valid = tri if gamma_valid is None else (gamma_valid & tri)
    gam = softmax(stop_gradient(raw) if stop_gamma else raw,
                  axis=-1, mask=gamma_valid)
    dist = distance_from_gamma(gam)
    if not isinstance(delta, Tensor):
        delta = Tensor(delta)
    if literal:
        scores = mul(mul(neg(delta), dist), raw)
    else:
        scores = mul(exp(mul(neg(delta), dist)), raw)
    key_valid = None
    if mask is not None:
        key_valid = _key_mask(mask, scores.ndim)
    weights = softmax(scores, axis=-1, mask=key_valid)
    if capture is not None:
        capture["weights"] = weights
        capture["distance"] = dist.data
    return matmul(weights, v)


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor,
                      mask: Optional[np.ndarray] = None,
                      capture: Optional[dict] = None) -> Tensor:
    scores = scaled_scores(q, k)
    key_valid = None
    if mask is not None:
        key_valid = _key_mask(mask, scores.ndim)
    weights = softmax(scores, axis=-1, mask=key_valid)
    if capture is not None:
        capture["weights"] = weights
    return matmul(weights, v)


def lightweight_conv(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-position convolution along the sequence axis with zero padding.

    out[i, :] = sum_j kernels[i, j] * x[i + j - (k-1)//2, :] for odd k.
    The kernel is shared across the feature dimension.
    """
    ksz = kernels.shape[-1]
    if ksz % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {ksz}")
    L = x.shape[-2]
    if kernels.shape[-2] != L:
        raise ShapeError(f"kernel rows {kernels.shape[-2]} != sequence length {L}")
    c = ksz // 2
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(c, c), (0, 0)]
    xpad = np.pad(x.data, pad_spec)
    out = np.zeros(np.broadcast_shapes(x.shape[:-2], kernels.shape[:-2]) + (L, x.shape[-1]),
                   dtype=np.float64)
    for j in range(ksz):
        out = out + kernels.data[..., :, j:j + 1] * xpad[..., j:j + L, :]

    def backward(g):
        if kernels.requires_grad:
            gk = np.empty(np.broadcast_shapes(g.shape[:-1], xpad.shape[:-2] + (L,)) + (ksz,))
            for j in range(ksz):
                gk[..., j] = (g * xpad[..., j:j + L, :]).sum(axis=-1)
            from .tensor import _unbroadcast
            kernels._accumulate(_unbroadcast(gk, kernels.shape))
        if x.requires_grad:
            gx_pad = np.zeros(np.broadcast_shapes(xpad.shape[:-2], kernels.shape[:-2])
                              + xpad.shape[-2:])
            for j in range(ksz):
                gx_pad[..., j:j + L, :] += kernels.data[..., :, j:j + 1] * g
            from .tensor import _unbroadcast
            x._accumulate(_unbroadcast(gx_pad[..., c:c + L, :], x.shape))

    return _make(out, (x, kernels), backward)


def span_dynamic_conv(q: Tensor, k: Tensor, v: Tensor, w: Tensor, b: Tensor,
                      pad_mask: Optional[np.ndarray] = None,
                      capture: Optional[dict] = None) -> Tensor:
    """Convolution whose kernel is generated from the local query-key product.

    kernel rows = softmax(W(q * k) + b), then applied to v with
    :func:`lightweight_conv`. Padding rows of v are zeroed so they cannot
    leak into neighbouring windows.
    """
    logits = matmul(mul(q, k), w) + b
    kernels = softmax(logits, axis=-1)
    if pad_mask is not None:
        v = mul(v, _pad_keep(pad_mask, v.ndim))
    if capture is not None:
        capture["kernels"] = kernels
    return lightweight_conv(v, kernels)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, h = x.shape
    return transpose(reshape(x, (B, L, heads, h // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, D = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, L, H * D))


def mono_conv_attention(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams,
                        pad_mask: Optional[np.ndarray] = None, *,
                        literal: bool = False, causal: bool = False,
                        stop_gamma: bool = True,
                        capture: Optional[dict] = None) -> Tensor:
    """Concatenation of the monotonic and convolutional branches.

    q, k, v arrive head-split as (B, H, L, D); the first H/2 heads feed the
    decay branch, the rest the convolution branch. Branch outputs are
    concatenated back to width h and projected by w_o.
    """
    H = params.heads
    if H % 2 != 0:
        raise ShapeError(f"combined attention needs an even head count, got {H}")
    half = H // 2
    delta = reshape(softplus(params.delta_raw[:half]), (half, 1, 1))
    ma_cap: Optional[dict] = {} if capture is not None else None
    ma = monotonic_attention(q[:, :half], k[:, :half], v[:, :half], delta,
                             mask=pad_mask, literal=literal, causal=causal,
                             stop_gamma=stop_gamma, capture=ma_cap)
    sdc_cap: Optional[dict] = {} if capture is not None else None
    sdc = span_dynamic_conv(q[:, half:], k[:, half:], v[:, half:],
                            params.sdc_w[half:], params.sdc_b[half:],
                            pad_mask=pad_mask, capture=sdc_cap)
    ma_out = _merge_heads(ma)
    sdc_out = _merge_heads(sdc)
    if capture is not None:
        ma_out.retain_grad = True
        sdc_out.retain_grad = True
        capture["ma_out"] = ma_out
        capture["sdc_out"] = sdc_out
        capture["ma_weights"] = ma_cap["weights"].data
        capture["sdc_kernels"] = sdc_cap["kernels"].data
    return matmul(concat([ma_out, sdc_out], axis=-1), params.w_o)


def attend(variant: str, z: Tensor, params: AttentionParams,
           pad_mask: Optional[np.ndarray] = None, *,
           literal: bool = False, causal: bool = False,
           stop_gamma: bool = True, capture: Optional[dict] = None) -> Tensor:
    """Dispatch one of the four attention variants on (B, L, h) input."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; choose from {VARIANTS}")
    q = _split_heads(matmul(z, params.w_q), params.heads)
    k = _split_heads(matmul(z, params.w_k), params.heads)
    v = _split_heads(matmul(z, params.w_v), params.heads)

    if variant == "monoconv":
        return mono_conv_attention(q, k, v, params, pad_mask, literal=literal,
                                   causal=causal, stop_gamma=stop_gamma,
                                   capture=capture)

    cap: Optional[dict] = {} if capture is not None else None
    if variant == "vanilla":
        out = vanilla_attention(q, k, v, mask=pad_mask, capture=cap)
    elif variant == "mono":
        delta = reshape(softplus(params.delta_raw), (params.heads, 1, 1))
        out = monotonic_attention(q, k, v, delta, mask=pad_mask, literal=literal,
                                  causal=causal, stop_gamma=stop_gamma, capture=cap)
    else:  # conv
        out = span_dynamic_conv(q, k, v, params.sdc_w, params.sdc_b,
                                pad_mask=pad_mask, capture=cap)
    merged = _merge_heads(out)
    if capture is not None:
        merged.retain_grad = True
        capture["ma_out" if variant in ("vanilla", "mono") else "sdc_out"] = merged
        if variant in ("vanilla", "mono"):
            capture["ma_weights"] = cap["weights"].data
        else:
            capture["sdc_kernels"] = cap["kernels"].data
    return matmul(merged, params.w_o)
