# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused emission-absorption compositing scan (forward + backward).

Operates on flattened (num_rays, num_samples) buffers. Accumulation runs in
double precision regardless of the buffer dtype; the pure-torch fallback in
``ctrl3d.compositing`` computes the same quantities with stock tensor ops.
"""

from libc.math cimport exp

cimport cython
from cython cimport floating


def composite_forward(
    floating[:, ::1] sigma,
    floating[:, :, ::1] colors,
    floating[:, ::1] deltas,
    floating[:, ::1] depths,
    floating[::1] background,
    floating[:, ::1] out_rgb,
    floating[::1] out_depth,
    floating[:, ::1] out_weights,
    floating[:, ::1] out_trans,
):
    """Fill rgb (N,3), depth (N,), weights (N,S) and the post-sample
    transmittance exp(-sum_{j<=k} sigma_j*delta_j) needed by the backward pass."""
    cdef Py_ssize_t n_rays = sigma.shape[0]
    cdef Py_ssize_t n_samples = sigma.shape[1]
    cdef Py_ssize_t r, k
    cdef double trans, alpha, w, acc_w, acc_depth, optical_sum
    cdef double rgb0, rgb1, rgb2

    for r in range(n_rays):
        trans = 1.0
        optical_sum = 0.0
        acc_w = 0.0
        acc_depth = 0.0
        rgb0 = 0.0
        rgb1 = 0.0
        rgb2 = 0.0
        for k in range(n_samples):
            alpha = 1.0 - exp(-<double> sigma[r, k] * <double> deltas[r, k])
            w = trans * alpha
            out_weights[r, k] = <floating> w
            rgb0 += w * <double> colors[r, k, 0]
            rgb1 += w * <double> colors[r, k, 1]
            rgb2 += w * <double> colors[r, k, 2]
            acc_depth += w * <double> depths[r, k]
            acc_w += w
            optical_sum += <double> sigma[r, k] * <double> deltas[r, k]
            trans = exp(-optical_sum)
            out_trans[r, k] = <floating> trans
        out_rgb[r, 0] = <floating> (rgb0 + (1.0 - acc_w) * <double> background[0])
        out_rgb[r, 1] = <floating> (rgb1 + (1.0 - acc_w) * <double> background[1])
        out_rgb[r, 2] = <floating> (rgb2 + (1.0 - acc_w) * <double> background[2])
        out_depth[r] = <floating> acc_depth


def composite_backward(
    floating[:, ::1] grad_rgb,
    floating[::1] grad_depth,
    floating[:, ::1] grad_weights,
    floating[:, ::1] weights,
    floating[:, ::1] trans,
    floating[:, :, ::1] colors,
    floating[:, ::1] deltas,
    floating[:, ::1] depths,
    floating[::1] background,
    floating[:, ::1] grad_sigma,
    floating[:, :, ::1] grad_colors,
):
    """Gradients w.r.t. sigma and colors.

    With o_k = sigma_k*delta_k: dw_k/do_k = exp(-sum_{j<=k} o_j) (the stored
    ``trans``) and dw_k/do_j = -w_k for j < k, so the per-ray reverse scan
    accumulates the suffix sum of g_k*w_k, where g_k folds the upstream
    gradients of every output that touches w_k.
    """
    cdef Py_ssize_t n_rays = weights.shape[0]
    cdef Py_ssize_t n_samples = weights.shape[1]
    cdef Py_ssize_t r, k
    cdef double suffix, g, w

    for r in range(n_rays):
        suffix = 0.0
        for k in range(n_samples - 1, -1, -1):
            w = <double> weights[r, k]
            g = (
                <double> grad_weights[r, k]
                + <double> grad_rgb[r, 0] * (<double> colors[r, k, 0] - <double> background[0])
                + <double> grad_rgb[r, 1] * (<double> colors[r, k, 1] - <double> background[1])
                + <double> grad_rgb[r, 2] * (<double> colors[r, k, 2] - <double> background[2])
                + <double> grad_depth[r] * <double> depths[r, k]
            )
            grad_sigma[r, k] = <floating> (
                <double> deltas[r, k] * (g * <double> trans[r, k] - suffix)
            )
            grad_colors[r, k, 0] = <floating> (<double> grad_rgb[r, 0] * w)
            grad_colors[r, k, 1] = <floating> (<double> grad_rgb[r, 1] * w)
            grad_colors[r, k, 2] = <floating> (<double> grad_rgb[r, 2] * w)
            suffix += g * w
