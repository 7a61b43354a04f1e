"""Compiled per-pixel loops for blending, replay and the blending backward pass."""
import numpy as np
from numba import njit


@njit(cache=True)
def _grow(arr, n):
    out = np.empty(max(2 * len(arr), n), dtype=arr.dtype)
    out[: len(arr)] = arr
    return out


@njit(cache=True)
def blend_forward(order, mean2d, conic, opac, radius, colors, feats, bg, H, W,
                  alpha_min, alpha_max, t_floor):
    """Front-to-back compositing, visiting Gaussians in ``order`` (already depth sorted).

    Returns the image, features, final transmittance and the raw contribution
    records in visiting order: pixel, gaussian, alpha, transmittance-before, clamped.
    """
    P = H * W
    D = feats.shape[1]
    T = np.ones(P)
    C = np.zeros((P, 3))
    F = np.zeros((P, D))
    cap = 1024
    pix = np.empty(cap, np.int64)
    gid = np.empty(cap, np.int64)
    alp = np.empty(cap, np.float64)
    tb = np.empty(cap, np.float64)
    clamp = np.empty(cap, np.bool_)
    n = 0
    for k in range(len(order)):
        g = order[k]
        mx = mean2d[g, 0]
        my = mean2d[g, 1]
        r = radius[g]
        u0 = max(0, int(np.ceil(mx - r)))
        u1 = min(W - 1, int(np.floor(mx + r)))
        v0 = max(0, int(np.ceil(my - r)))
        v1 = min(H - 1, int(np.floor(my + r)))
        a = conic[g, 0]
        b = conic[g, 1]
        c = conic[g, 2]
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                p = v * W + u
                if T[p] < t_floor:
                    continue
                dx = u - mx
                dy = v - my
                power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
                araw = opac[g] * np.exp(power)
                if araw < alpha_min:
                    continue
                al = araw
                clamped = False
                if araw > alpha_max:
                    al = alpha_max
                    clamped = True
                w = al * T[p]
                for ch in range(3):
                    C[p, ch] += w * colors[g, ch]
                for d in range(D):
                    F[p, d] += w * feats[g, d]
                if n >= len(pix):
                    pix = _grow(pix, n + 1)
                    gid = _grow(gid, n + 1)
                    alp = _grow(alp, n + 1)
                    tb = _grow(tb, n + 1)
                    clamp = _grow(clamp, n + 1)
                pix[n] = p
                gid[n] = g
                alp[n] = al
                tb[n] = T[p]
                clamp[n] = clamped
                n += 1
                T[p] *= 1.0 - al
    for p in range(P):
        for ch in range(3):
            C[p, ch] += T[p] * bg[ch]
    return C, F, T, pix[:n], gid[:n], alp[:n], tb[:n], clamp[:n]


@njit(cache=True)
def replay(offsets, gid, alp, values, bg):
    """Re-blend per-Gaussian ``values`` (N x K) through a pixel-major contribution log.

    Uses the same operation order as :func:`blend_forward`, so outputs match
    it bit for bit.  ``bg`` (length K) is composited with the final transmittance.
    """
    P = len(offsets) - 1
    K = values.shape[1]
    out = np.zeros((P, K))
    for p in range(P):
        T = 1.0
        for e in range(offsets[p], offsets[p + 1]):
            g = gid[e]
            w = alp[e] * T
            for k in range(K):
                out[p, k] += w * values[g, k]
            T *= 1.0 - alp[e]
        for k in range(K):
            out[p, k] += T * bg[k]
    return out


@njit(cache=True)
def replay_weights_transpose(offsets, gid, alp, tb, grad, n_gaussians):
    """Adjoint of :func:`replay` with respect to ``values``: sum_p w_pi * grad_p."""
    K = grad.shape[1]
    out = np.zeros((n_gaussians, K))
    P = len(offsets) - 1
    for p in range(P):
        for e in range(offsets[p], offsets[p + 1]):
            w = alp[e] * tb[e]
            g = gid[e]
            for k in range(K):
                out[g, k] += w * grad[p, k]
    return out


@njit(cache=True)
def blend_backward(offsets, gid, alp, tb, clamp, t_final, W, mean2d, conic, opac,
                   colors, feats, bg, grad_c, grad_f):
    """Gradients of the blended image and features w.r.t. per-Gaussian 2D quantities.

    Returns (d_color, d_feature, d_opacity, d_mean2d, d_conic) where d_opacity
    is w.r.t. the activated opacity and d_conic holds (a, b, c) of
    ``[[a, b], [b, c]]`` with ``b`` counted once.
    """
    N = len(colors)
    D = feats.shape[1]
    P = len(offsets) - 1
    d_col = np.zeros((N, 3))
    d_feat = np.zeros((N, D))
    d_op = np.zeros(N)
    d_mean = np.zeros((N, 2))
    d_con = np.zeros((N, 3))
    acc_c = np.zeros(3)
    acc_f = np.zeros(D)
    for p in range(P):
        s = offsets[p]
        e_end = offsets[p + 1]
        for ch in range(3):
            acc_c[ch] = t_final[p] * bg[ch]
        for d in range(D):
            acc_f[d] = 0.0
        u = p % W
        v = p // W
        for e in range(e_end - 1, s - 1, -1):
            g = gid[e]
            al = alp[e]
            w = al * tb[e]
            direct = 0.0
            behind = 0.0
            for ch in range(3):
                d_col[g, ch] += w * grad_c[p, ch]
                direct += colors[g, ch] * grad_c[p, ch]
                behind += acc_c[ch] * grad_c[p, ch]
                acc_c[ch] += w * colors[g, ch]
            for d in range(D):
                d_feat[g, d] += w * grad_f[p, d]
                direct += feats[g, d] * grad_f[p, d]
                behind += acc_f[d] * grad_f[p, d]
                acc_f[d] += w * feats[g, d]
            d_alpha = tb[e] * direct - behind / (1.0 - al)
            if clamp[e]:
                continue
            dx = u - mean2d[g, 0]
            dy = v - mean2d[g, 1]
            a = conic[g, 0]
            b = conic[g, 1]
            c = conic[g, 2]
            d_op[g] += d_alpha * al / opac[g]
            d_pow = d_alpha * al
            d_mean[g, 0] += d_pow * (a * dx + b * dy)
            d_mean[g, 1] += d_pow * (b * dx + c * dy)
            d_con[g, 0] += d_pow * (-0.5 * dx * dx)
            d_con[g, 1] += d_pow * (-dx * dy)
            d_con[g, 2] += d_pow * (-0.5 * dy * dy)
    return d_col, d_feat, d_op, d_mean, d_con
