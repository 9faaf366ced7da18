"""Compiled inner loop for the photometric term.

Fuses bilinear 3x3 patch sampling, the SSIM/L1 mix and its derivative with
respect to the continuous patch center. Matches ``losses.bilinear_patch``
followed by ``losses.photometric_grad``.
"""
import numba
import numpy as np

from .losses import SSIM_C1, SSIM_C2


@numba.njit(cache=True)
def photometric_samples(images, tgt, src_patch, uv, alpha_pm):
    M, H, W, C = images.shape
    R, N = uv.shape[0], uv.shape[1]
    value = np.zeros((R, N))
    g_uv = np.zeros((R, N, 2))
    valid = np.zeros((R, N), dtype=np.bool_)
    patch = np.empty((3, 3, C))
    pdu = np.empty((3, 3, C))
    pdv = np.empty((3, 3, C))
    n = 9.0
    per_patch = 9.0 * C
    for r in range(R):
        img = images[tgt[r]]
        a = src_patch[r]
        for k in range(N):
            u = uv[r, k, 0]
            v = uv[r, k, 1]
            if not (np.isfinite(u) and np.isfinite(v)):
                continue
            u0 = int(np.floor(u))
            v0 = int(np.floor(v))
            if u0 < 1 or u0 + 2 > W - 1 or v0 < 1 or v0 + 2 > H - 1:
                continue
            fu = u - u0
            fv = v - v0
            for i in range(3):
                for j in range(3):
                    for c in range(C):
                        tl = img[v0 - 1 + i, u0 - 1 + j, c]
                        tr = img[v0 - 1 + i, u0 + j, c]
                        bl = img[v0 + i, u0 - 1 + j, c]
                        br = img[v0 + i, u0 + j, c]
                        patch[i, j, c] = (1 - fu) * (1 - fv) * tl + fu * (1 - fv) * tr + (1 - fu) * fv * bl + fu * fv * br
                        pdu[i, j, c] = (1 - fv) * (tr - tl) + fv * (br - bl)
                        pdv[i, j, c] = (1 - fu) * (bl - tl) + fu * (br - tr)
            val = 0.0
            gu = 0.0
            gv = 0.0
            for c in range(C):
                mu_a = 0.0
                mu_b = 0.0
                for i in range(3):
                    for j in range(3):
                        mu_a += a[i, j, c]
                        mu_b += patch[i, j, c]
                mu_a /= n
                mu_b /= n
                var_a = 0.0
                var_b = 0.0
                cov = 0.0
                for i in range(3):
                    for j in range(3):
                        da = a[i, j, c] - mu_a
                        db = patch[i, j, c] - mu_b
                        var_a += da * da
                        var_b += db * db
                        cov += da * db
                var_a /= n
                var_b /= n
                cov /= n
                A = 2 * mu_a * mu_b + SSIM_C1
                B = 2 * cov + SSIM_C2
                Cc = mu_a * mu_a + mu_b * mu_b + SSIM_C1
                D = var_a + var_b + SSIM_C2
                S = A * B / (Cc * D)
                val += alpha_pm * (1.0 - S) / (2.0 * C)
                for i in range(3):
                    for j in range(3):
                        da = a[i, j, c] - mu_a
                        db = patch[i, j, c] - mu_b
                        dS = S * (2 * mu_a / (n * A) + 2 * da / (n * B) - 2 * mu_b / (n * Cc) - 2 * db / (n * D))
                        diff = patch[i, j, c] - a[i, j, c]
                        val += (1.0 - alpha_pm) * abs(diff) / per_patch
                        g = -alpha_pm / (2.0 * C) * dS + (1.0 - alpha_pm) * np.sign(diff) / per_patch
                        gu += g * pdu[i, j, c]
                        gv += g * pdv[i, j, c]
            value[r, k] = val
            g_uv[r, k, 0] = gu
            g_uv[r, k, 1] = gv
            valid[r, k] = True
    return value, g_uv, valid


@numba.njit(cache=True)
def scatter_add(grad_out, idx, wts, num_voxels):
    """Adjoint of the 8-corner stencil gather; flat (P, C), (P, 8), (P, 8)."""
    P, C = grad_out.shape
    out = np.zeros((num_voxels, C))
    for p in range(P):
        for k in range(8):
            i = idx[p, k]
            w = wts[p, k]
            for c in range(C):
                out[i, c] += w * grad_out[p, c]
    return out


@numba.njit(cache=True)
def gather_values(values, idx, wts):
    P = idx.shape[0]
    C = values.shape[1]
    out = np.zeros((P, C))
    for p in range(P):
        for k in range(8):
            i = idx[p, k]
            w = wts[p, k]
            for c in range(C):
                out[p, c] += w * values[i, c]
    return out
