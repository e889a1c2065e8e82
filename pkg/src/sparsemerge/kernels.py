"""Hot inner loops, each in a numba and a numpy flavour.

Both flavours accumulate in the same order (or round exactly), so they agree
bitwise. The public
names at the bottom of the module are bound to one flavour at import time
according to ``SPARSEMERGE_NUMBA`` (see ``_accel``).
"""

from fractions import Fraction

import numpy as np

from ._accel import USE_NUMBA, njit

# --------------------------------------------------------------------------
# numpy flavour
# --------------------------------------------------------------------------


def np_topk_indices(flat, k):
    """Indices of the k largest entries, ties to the lower index, returned sorted."""
    order = np.argsort(-flat, kind="stable")[:k]
    return np.sort(order)


def np_block_sums(scores, block):
    nbr, nbc = scores.shape[0] // block, scores.shape[1] // block
    out = np.zeros((nbr, nbc))
    for i in range(block):
        for j in range(block):
            out += scores[i::block, j::block]
    return out


def np_masked_adam(param, grad, m, v, mask, lr, beta1, beta2, eps, bc1, bc2):
    g = grad[mask]
    mm = beta1 * m[mask] + (1.0 - beta1) * g
    vv = beta2 * v[mask] + (1.0 - beta2) * (g * g)
    m[mask] = mm
    v[mask] = vv
    param[mask] = param[mask] - lr * (mm / bc1) / (np.sqrt(vv / bc2) + eps)


def np_dense_adam(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def np_overlap_average(deltas, masks):
    """Correctly rounded ``sum(deltas) / max(count, 1)`` per column."""
    counts = masks.sum(axis=0)
    out = deltas.sum(axis=0) / np.maximum(counts, 1)
    for j in np.flatnonzero(counts > 1):
        exact = sum((Fraction(float(v)) for v in deltas[:, j]), Fraction(0))
        out[j] = float(exact / int(counts[j]))
    for j in np.flatnonzero(counts <= 1):
        # at most one selecting input: every other row is zero here
        nz = deltas[:, j][deltas[:, j] != 0.0]
        out[j] = float(sum((Fraction(float(v)) for v in nz), Fraction(0)) / max(int(counts[j]), 1))
    return out + 0.0


def np_sign_elect_mean(trimmed):
    total = np.zeros(trimmed.shape[1])
    for i in range(trimmed.shape[0]):
        total += trimmed[i]
    sign = np.where(total >= 0.0, 1.0, -1.0)
    acc = np.zeros(trimmed.shape[1])
    cnt = np.zeros(trimmed.shape[1])
    for i in range(trimmed.shape[0]):
        agree = trimmed[i] * sign > 0.0
        acc += np.where(agree, trimmed[i], 0.0)
        cnt += agree
    out = np.zeros(trimmed.shape[1])
    np.divide(acc, cnt, out=out, where=cnt > 0)
    return out


# --------------------------------------------------------------------------
# numba flavour
# --------------------------------------------------------------------------


@njit
def nb_topk_indices(flat, k):
    order = np.argsort(-flat, kind="mergesort")[:k]
    return np.sort(order)


@njit
def nb_block_sums(scores, block):
    nbr = scores.shape[0] // block
    nbc = scores.shape[1] // block
    out = np.zeros((nbr, nbc))
    for br in range(nbr):
        for bc in range(nbc):
            acc = 0.0
            for i in range(block):
                for j in range(block):
                    acc += scores[br * block + i, bc * block + j]
            out[br, bc] = acc
    return out


@njit
def nb_masked_adam(param, grad, m, v, mask, lr, beta1, beta2, eps, bc1, bc2):
    p = param.ravel()
    gr = grad.ravel()
    mf = m.ravel()
    vf = v.ravel()
    mk = mask.ravel()
    for i in range(p.size):
        if mk[i]:
            g = gr[i]
            mm = beta1 * mf[i] + (1.0 - beta1) * g
            vv = beta2 * vf[i] + (1.0 - beta2) * (g * g)
            mf[i] = mm
            vf[i] = vv
            p[i] = p[i] - lr * (mm / bc1) / (np.sqrt(vv / bc2) + eps)


@njit
def nb_dense_adam(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    p = param.ravel()
    gr = grad.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(p.size):
        g = gr[i]
        mf[i] = mf[i] * beta1 + (1.0 - beta1) * g
        vf[i] = vf[i] * beta2 + (1.0 - beta2) * (g * g)
        p[i] -= lr * (mf[i] / bc1) / (np.sqrt(vf[i] / bc2) + eps)


@njit
def _grow(parts, n, x):
    # add x to a non-overlapping expansion of n partials (Shewchuk / msum)
    i = 0
    for j in range(n):
        y = parts[j]
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo != 0.0:
            parts[i] = lo
            i += 1
        x = hi
    parts[i] = x
    return i + 1


@njit
def _expansion_sign(parts, n):
    for j in range(n - 1, -1, -1):
        if parts[j] > 0.0:
            return 1
        if parts[j] < 0.0:
            return -1
    return 0


@njit
def _rounded_quotient(parts, n, count):
    """Correctly rounded (exact expansion sum) / count, count a small positive int."""
    approx = 0.0
    for j in range(n):
        approx += parts[j]
    q = approx / count
    c = float(count)
    work = np.empty(n + 4)
    for _ in range(64):
        # R = S - q*c exactly, using a Veltkamp split of q (c < 2**26 needs none)
        p = q * c
        t = 134217729.0 * q
        qh = t - (t - q)
        ql = q - qh
        err = (qh * c - p) + ql * c
        m = n
        for j in range(n):
            work[j] = parts[j]
        m = _grow(work, m, -p)
        m = _grow(work, m, -err)
        sgn = _expansion_sign(work, m)
        if sgn == 0:
            return q
        nxt = np.nextafter(q, np.inf if sgn > 0 else -np.inf)
        gap = abs(nxt - q)
        # compare 2|R| with c * gap exactly
        for j in range(m):
            work[j] = 2.0 * work[j]
        m = _grow(work, m, -sgn * c * gap)
        cmp = _expansion_sign(work, m) * sgn
        if cmp < 0:
            return q
        if cmp == 0:
            # tie: keep the candidate with an even significand
            buf = np.empty(1)
            buf[0] = q
            if buf.view(np.int64)[0] & 1 == 0:
                return q
            return nxt
        q = nxt
    return q


@njit
def nb_overlap_average(deltas, masks):
    """Correctly rounded ``sum(deltas) / max(count, 1)`` per column."""
    n_in, n = deltas.shape
    out = np.zeros(n)
    parts = np.empty(n_in + 1)
    for j in range(n):
        cnt = 0
        m = 0
        for i in range(n_in):
            if deltas[i, j] != 0.0:
                m = _grow(parts, m, deltas[i, j])
            if masks[i, j]:
                cnt += 1
        if m > 0:
            out[j] = _rounded_quotient(parts, m, max(cnt, 1)) + 0.0
    return out


@njit
def nb_sign_elect_mean(trimmed):
    n_in, n = trimmed.shape
    out = np.zeros(n)
    for j in range(n):
        total = 0.0
        for i in range(n_in):
            total += trimmed[i, j]
        sign = 1.0 if total >= 0.0 else -1.0
        acc = 0.0
        cnt = 0.0
        for i in range(n_in):
            x = trimmed[i, j]
            if x * sign > 0.0:
                acc += x
                cnt += 1.0
        if cnt > 0.0:
            out[j] = acc / cnt
    return out


if USE_NUMBA:
    topk_indices = nb_topk_indices
    block_sums = nb_block_sums
    masked_adam = nb_masked_adam
    dense_adam = nb_dense_adam
    overlap_average = nb_overlap_average
    sign_elect_mean = nb_sign_elect_mean
else:
    topk_indices = np_topk_indices
    block_sums = np_block_sums
    masked_adam = np_masked_adam
    dense_adam = np_dense_adam
    overlap_average = np_overlap_average
    sign_elect_mean = np_sign_elect_mean


# --------------------------------------------------------------------------
# layer kernels used by the gradient tape (agree with numpy to rounding)
# --------------------------------------------------------------------------

GELU_C = 0.7978845608028654
GELU_A = 0.044715


def np_gelu_fwd(x):
    th = np.tanh(GELU_C * (x + GELU_A * (x * x * x)))
    return 0.5 * x * (1.0 + th), th


def np_gelu_bwd(g, x, th):
    dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + th) + 0.5 * x * dth)


def np_layernorm_fwd(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def np_layernorm_bwd(g, y, inv):
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * y).mean(axis=-1, keepdims=True)
    return inv * (g - gm - y * gy)


def np_attention_fwd(qkv, num_heads):
    b, t, d3 = qkv.shape
    d = d3 // 3
    hd = d // num_heads
    sc = 1.0 / np.sqrt(hd)
    split = qkv.reshape(b, t, 3, num_heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = split[0], split[1], split[2]
    s = np.matmul(q, k.transpose(0, 1, 3, 2)) * sc
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    o = np.matmul(p, v)
    return o.transpose(0, 2, 1, 3).reshape(b, t, d), p


def np_attention_bwd(g, qkv, p, num_heads):
    b, t, d3 = qkv.shape
    d = d3 // 3
    hd = d // num_heads
    sc = 1.0 / np.sqrt(hd)
    split = qkv.reshape(b, t, 3, num_heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = split[0], split[1], split[2]
    go = g.reshape(b, t, num_heads, hd).transpose(0, 2, 1, 3)
    gp = np.matmul(go, v.transpose(0, 1, 3, 2))
    gv = np.matmul(p.transpose(0, 1, 3, 2), go)
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * sc
    gq = np.matmul(gs, k)
    gk = np.matmul(gs.transpose(0, 1, 3, 2), q)
    return np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4).reshape(b, t, d3)


@njit
def _nb_gelu_arg(x):
    xf = x.ravel()
    u = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        u[i] = GELU_C * (v + GELU_A * (v * v * v))
    return u.reshape(x.shape)


@njit
def _nb_gelu_out(x, th):
    xf = x.ravel()
    tf = th.ravel()
    y = np.empty_like(xf)
    for i in range(xf.size):
        y[i] = 0.5 * xf[i] * (1.0 + tf[i])
    return y.reshape(x.shape)


def nb_gelu_fwd(x):
    # numpy's SIMD tanh is several times faster than the scalar libm call numba emits
    th = np.tanh(_nb_gelu_arg(x))
    return _nb_gelu_out(x, th), th


@njit
def nb_gelu_bwd(g, x, th):
    gf = g.ravel()
    xf = x.ravel()
    tf = th.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        t = tf[i]
        dth = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * dth)
    return out.reshape(x.shape)


@njit
def nb_layernorm_fwd(x, eps):
    n = x.shape[-1]
    x2 = x.reshape(-1, n)
    rows = x2.shape[0]
    y = np.empty((rows, n))
    inv = np.empty((rows, 1))
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x2[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            c = x2[r, j] - mu
            var += c * c
        iv = 1.0 / np.sqrt(var / n + eps)
        inv[r, 0] = iv
        for j in range(n):
            y[r, j] = (x2[r, j] - mu) * iv
    shp = x.shape[:-1] + (1,)
    return y.reshape(x.shape), inv.reshape(shp)


@njit
def nb_layernorm_bwd(g, y, inv):
    n = y.shape[-1]
    g2 = g.reshape(-1, n)
    y2 = y.reshape(-1, n)
    iv = inv.reshape(-1)
    rows = y2.shape[0]
    out = np.empty((rows, n))
    for r in range(rows):
        gm = 0.0
        gy = 0.0
        for j in range(n):
            gm += g2[r, j]
            gy += g2[r, j] * y2[r, j]
        gm /= n
        gy /= n
        for j in range(n):
            out[r, j] = iv[r] * (g2[r, j] - gm - y2[r, j] * gy)
    return out.reshape(y.shape)


@njit
def nb_attention_fwd(qkv, num_heads):
    b, t, d3 = qkv.shape
    d = d3 // 3
    hd = d // num_heads
    sc = 1.0 / np.sqrt(hd)
    out = np.zeros((b, t, d))
    p = np.empty((b, num_heads, t, t))
    for bi in range(b):
        for h in range(num_heads):
            qo = h * hd
            ko = d + h * hd
            vo = 2 * d + h * hd
            for i in range(t):
                m = -np.inf
                for j in range(t):
                    acc = 0.0
                    for c in range(hd):
                        acc += qkv[bi, i, qo + c] * qkv[bi, j, ko + c]
                    acc *= sc
                    p[bi, h, i, j] = acc
                    if acc > m:
                        m = acc
                tot = 0.0
                for j in range(t):
                    e = np.exp(p[bi, h, i, j] - m)
                    p[bi, h, i, j] = e
                    tot += e
                for j in range(t):
                    w = p[bi, h, i, j] / tot
                    p[bi, h, i, j] = w
                    for c in range(hd):
                        out[bi, i, qo + c] += w * qkv[bi, j, vo + c]
    return out, p


@njit
def nb_attention_bwd(g, qkv, p, num_heads):
    b, t, d3 = qkv.shape
    d = d3 // 3
    hd = d // num_heads
    sc = 1.0 / np.sqrt(hd)
    gq = np.zeros((b, t, d3))
    gp = np.empty(t)
    for bi in range(b):
        for h in range(num_heads):
            qo = h * hd
            ko = d + h * hd
            vo = 2 * d + h * hd
            for i in range(t):
                dot = 0.0
                for j in range(t):
                    acc = 0.0
                    for c in range(hd):
                        acc += g[bi, i, qo + c] * qkv[bi, j, vo + c]
                    gp[j] = acc
                    dot += acc * p[bi, h, i, j]
                for j in range(t):
                    w = p[bi, h, i, j]
                    gs = w * (gp[j] - dot) * sc
                    for c in range(hd):
                        gq[bi, j, vo + c] += w * g[bi, i, qo + c]
                        gq[bi, i, qo + c] += gs * qkv[bi, j, ko + c]
                        gq[bi, j, ko + c] += gs * qkv[bi, i, qo + c]
    return gq


if USE_NUMBA:
    gelu_fwd, gelu_bwd = nb_gelu_fwd, nb_gelu_bwd
    layernorm_fwd, layernorm_bwd = nb_layernorm_fwd, nb_layernorm_bwd
    attention_fwd, attention_bwd = nb_attention_fwd, nb_attention_bwd
else:
    gelu_fwd, gelu_bwd = np_gelu_fwd, np_gelu_bwd
    layernorm_fwd, layernorm_bwd = np_layernorm_fwd, np_layernorm_bwd
    attention_fwd, attention_bwd = np_attention_fwd, np_attention_bwd
