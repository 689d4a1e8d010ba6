"""NumPy implementations of the convolution kernels.

Fallback backend used when the compiled extension is unavailable. All
kernels take contiguous float32 arrays, accumulate in float64, and return
float32.
"""

import numpy as np

BACKEND = "numpy"


def conv1d_forward(x, w):
    """Valid cross-correlation. x: (B, Cin, L), w: (Cout, Cin, K) -> (B, Cout, L-K+1)."""
    k = w.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)
    out = np.einsum("bilk,oik->bol", windows.astype(np.float64), w.astype(np.float64))
    return np.ascontiguousarray(out, dtype=np.float32)


def conv1d_grad_input(gout, w, length):
    """Gradient w.r.t. x. gout: (B, Cout, Lout), w: (Cout, Cin, K) -> (B, Cin, length)."""
    k = w.shape[2]
    gp = np.pad(gout, ((0, 0), (0, 0), (k - 1, k - 1)))
    windows = np.lib.stride_tricks.sliding_window_view(gp, k, axis=2)  # (B, Cout, length, K)
    w_flip = w[:, :, ::-1]
    gx = np.einsum("bosk,oik->bis", windows.astype(np.float64), w_flip.astype(np.float64))
    return np.ascontiguousarray(gx, dtype=np.float32)


def conv1d_grad_weight(gout, x, kernel):
    """Gradient w.r.t. w. gout: (B, Cout, Lout), x: (B, Cin, L) -> (Cout, Cin, kernel)."""
    windows = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)  # (B, Cin, Lout, K)
    gw = np.einsum("bot,bitk->oik", gout.astype(np.float64), windows.astype(np.float64))
    return np.ascontiguousarray(gw, dtype=np.float32)
