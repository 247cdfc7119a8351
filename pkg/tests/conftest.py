"""Shared independent oracles: naive convolution, naive rectangle sums, and a
brute-force worst-case certifier. These deliberately avoid the library's fast
paths so every dual-route check stays honest."""

import numpy as np
import pytest


def naive_conv2d(x, kernel, stride=1, padding=0):
    """Reference cross-correlation with explicit loops over every output."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    b, h, w, ci = x.shape
    kh, kw, _, co = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, ho, wo, co), dtype=np.float64)
    for n in range(b):
        for i in range(ho):
            for j in range(wo):
                window = xp[n, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                for o in range(co):
                    out[n, i, j, o] = np.sum(window * kernel[:, :, :, o])
    return out


def naive_rect_sum(delta, r0, r1, c0, c1):
    """Per-class sum over a half-open rectangle by direct slicing."""
    return np.asarray(delta)[r0:r1, c0:c1, :].sum(axis=(0, 1))


def brute_force_certified(s, c_t, masks):
    """Condition-1 reference: materialize the worst case for every region mask
    and demand the summed true-class score strictly dominates every rival."""
    s = np.asarray(s, dtype=np.int64)
    h, w, c = s.shape
    pred_sums = s.sum(axis=(0, 1))
    top = pred_sums.max()
    if pred_sums.argmax() != c_t or (pred_sums == top).sum() > 1:
        return False
    for mask in masks:
        s_wc = s.copy()
        s_wc[mask, :] = 1
        s_wc[mask, c_t] = 0
        sums = s_wc.sum(axis=(0, 1))
        for cc in range(c):
            if cc != c_t and sums[c_t] <= sums[cc]:
                return False
    return True


def positive_chain_forward(x, kernels, strides, paddings):
    """Forward through a stack of positive-weight convolutions with ReLU; with
    positive inputs a perturbation always propagates to exactly the outputs
    whose receptive fields cover it."""
    h = x
    for kernel, stride, padding in zip(kernels, strides, paddings):
        h = naive_conv2d(h, kernel, stride=stride, padding=padding)
        h = np.maximum(h, 0.0)
    return h


@pytest.fixture
def rng():
    return np.random.default_rng(0)
