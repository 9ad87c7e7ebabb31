"""Brute-force reference implementations for tests and verification.

Nothing here imports the optimized paths: every routine is written as
explicit Python loops over float64 values so that agreement with the
vectorized code is meaningful. Inputs may be numpy arrays or anything
with a ``.data`` array attribute.
"""
import math

import numpy as np

from coherdiff.errors import DimensionError, MaskingError, ParameterError


def _arr(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def matmul_oracle(a, b):
    a, b = _arr(a), _arr(b)
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError("inner extents disagree")
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def softmax_oracle(row):
    row = [float(v) for v in _arr(row)]
    weights = [0.0 if v == -math.inf else math.exp(v) for v in row]
    total = sum(weights)
    if total == 0.0:
        raise MaskingError("all entries masked")
    return np.array([w / total for w in weights])


def ss_oracle(q_r, k):
    """Self-similarity map by literal nested loops.

    Zero-pads ``q_r`` (``C x H x W``) by ``(k-1)//2``, then for every pixel
    flattens its ``k x k`` padded neighbourhood row-major and takes the
    channel-summed product with the centre pixel.
    """
    q = _arr(q_r)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"window length must be odd and positive, got {k}")
    C, H, W = q.shape
    half = (k - 1) // 2
    padded = np.zeros((C, H + k - 1, W + k - 1))
    for c in range(C):
        for i in range(H):
            for j in range(W):
                padded[c, i + half, j + half] = q[c, i, j]
    ss = np.zeros((k * k, H, W))
    for i in range(H):
        for j in range(W):
            # flattened local region O in R^{C x k^2}, row-major over the window
            region = np.zeros((C, k * k))
            for c in range(C):
                t = 0
                for di in range(k):
                    for dj in range(k):
                        region[c, t] = padded[c, i + di, j + dj]
                        t += 1
            for t in range(k * k):
                acc = 0.0
                for c in range(C):
                    acc += q[c, i, j] * region[c, t]
                ss[t, i, j] = acc
    return ss


def attn_oracle(q, k, v, mask=None, scale=None):
    """Row-by-row softmax attention; masked logits are dropped and the rest renormalized."""
    q, k, v = _arr(q), _arr(k), _arr(v)
    nq, c = q.shape
    nk = k.shape[0]
    if nk == 0:
        raise ParameterError("empty context")
    scale = 1.0 / math.sqrt(c) if scale is None else scale
    out = np.zeros((nq, v.shape[1]))
    weights = np.zeros((nq, nk))
    for i in range(nq):
        logits = []
        for j in range(nk):
            if mask is not None and not mask[i][j]:
                logits.append(-math.inf)
                continue
            acc = 0.0
            for p in range(c):
                acc += q[i, p] * k[j, p]
            logits.append(acc * scale)
        w = softmax_oracle(logits)
        weights[i] = w
        for j in range(nk):
            for p in range(v.shape[1]):
                out[i, p] += w[j] * v[j, p]
    return out, weights


def linear_oracle(x, weight, bias=None):
    """Row-wise ``x @ weight + bias``."""
    out = matmul_oracle(x, weight)
    if bias is not None:
        b = _arr(bias)
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] += b[j]
    return out


def conv_oracle(x, w, bias=None, padding="same"):
    """Cross-correlation with six nested loops over an unbatched ``C x H x W`` input."""
    x, w = _arr(x), _arr(w)
    cin, H, W = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError("channel mismatch")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("'same' padding needs odd kernels")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        ph = pw = int(padding)
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    b = np.zeros(cout) if bias is None else _arr(bias)
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            si, sj = i + di - ph, j + dj - pw
                            if 0 <= si < H and 0 <= sj < W:
                                acc += x[c, si, sj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def expand_oracle(ss, w1, b1, w2, b2):
    """Two chained 'same' convolutions with ReLU after each."""
    hidden = np.maximum(conv_oracle(ss, w1, b1), 0.0)
    return np.maximum(conv_oracle(hidden, w2, b2), 0.0)


def sca_oracle(m, v):
    """Per-pixel softmax over token logits ``m`` (``N_t x H x W``) weighting rows of ``v``."""
    m, v = _arr(m), _arr(v)
    nt, H, W = m.shape
    out = np.zeros((H * W, v.shape[1]))
    for i in range(H):
        for j in range(W):
            w = softmax_oracle([m[t, i, j] for t in range(nt)])
            for t in range(nt):
                for p in range(v.shape[1]):
                    out[i * W + j, p] += w[t] * v[t, p]
    return out


def resize_oracle(labels, height, width):
    labels = np.asarray(labels)
    h, w = labels.shape
    out = np.zeros((height, width), dtype=labels.dtype)
    for i in range(height):
        for j in range(width):
            out[i, j] = labels[math.floor(i * h / height), math.floor(j * w / width)]
    return out


def ancestral_oracle(x_T, betas, noises, eps_fn=None, clip=False):
    """Scalar-by-scalar DDPM reverse recursion.

    ``noises[t]`` is the Gaussian draw injected when leaving step ``t``
    (ignored at ``t == 0``); ``eps_fn(x, t)`` defaults to predicting zero noise.
    """
    x = _arr(x_T).copy()
    T = len(betas)
    abar = []
    acc = 1.0
    for b in betas:
        acc *= 1.0 - b
        abar.append(acc)
    flat = x.reshape(-1)
    for t in reversed(range(T)):
        eps = np.zeros_like(x) if eps_fn is None else _arr(eps_fn(x, t))
        eps_flat = eps.reshape(-1)
        abar_prev = abar[t - 1] if t > 0 else 1.0
        noise = _arr(noises[t]).reshape(-1) if t > 0 else None
        for n in range(flat.size):
            x0 = (flat[n] - math.sqrt(1 - abar[t]) * eps_flat[n]) / math.sqrt(abar[t])
            if clip:
                x0 = min(1.0, max(-1.0, x0))
            c0 = math.sqrt(abar_prev) * betas[t] / (1 - abar[t])
            ct = math.sqrt(1 - betas[t]) * (1 - abar_prev) / (1 - abar[t])
            mean = c0 * x0 + ct * flat[n]
            if t > 0:
                var = betas[t] * (1 - abar_prev) / (1 - abar[t])
                mean += math.sqrt(var) * noise[n]
            flat[n] = mean
    return x
