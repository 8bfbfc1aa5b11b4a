"""Pure numpy versions of the compiled segment kernels."""

import numpy as np


def scatter_add_rows(src, index, n_rows):
    out = np.zeros((n_rows, src.shape[1]), dtype=np.float64)
    np.add.at(out, index, src)
    return out


def segment_max(values, segment, n_segments):
    out = np.full(n_segments, -np.inf, dtype=np.float64)
    np.maximum.at(out, segment, values)
    return out


def segment_softmax(values, segment, n_segments):
    shifted = np.exp(values - segment_max(values, segment, n_segments)[segment])
    totals = np.bincount(segment, weights=shifted, minlength=n_segments)
    return shifted / totals[segment]


def segment_softmax_backward(prob, grad, segment, n_segments):
    dots = np.bincount(segment, weights=prob * grad, minlength=n_segments)
    return prob * (grad - dots[segment])


def scatter_add_rows_into(out, src, index):
    np.add.at(out, index, src)
