"""Numpy implementations of the conv2d patch kernels (fallback backend)."""

import numpy as np


def im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    B, C = xp.shape[:2]
    cols = np.empty((B, C, k, k, oh, ow), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols


def col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    B, C, k, _, oh, ow = cols.shape
    dx = np.zeros((B, C, hp, wp), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[:, :, ki, kj]
    return dx


def pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + H, pad : pad + W] = x
    return xp
