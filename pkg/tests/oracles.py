"""Brute-force reference implementations used by the tests."""
import numpy as np


def naive_cost_volume(f_t: np.ndarray, f_next: np.ndarray, d: int, s: int, eps: float = 1e-12) -> np.ndarray:
    """Five nested loops: displacement (dy, dx) row-major, then y, x, channel."""
    C, H, W = f_t.shape
    r = d // s
    shifts = [(dy * s, dx * s) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    out = np.zeros((len(shifts), H, W))
    for m, (dy, dx) in enumerate(shifts):
        for y in range(H):
            for x in range(W):
                y2, x2 = y + dy, x + dx
                if not (0 <= y2 < H and 0 <= x2 < W):
                    continue
                dot = na = nb = 0.0
                for c in range(C):
                    a, b = f_t[c, y, x], f_next[c, y2, x2]
                    dot += a * b
                    na += a * a
                    nb += b * b
                na, nb = np.sqrt(na), np.sqrt(nb)
                out[m, y, x] = 0.0 if na < eps or nb < eps else dot / (na * nb)
    return out


def translate(img: np.ndarray, u: int, v: int) -> np.ndarray:
    """Content moved by (u, v) pixels; exposed border pixels copy the edge."""
    H, W = img.shape[-2:]
    ys = np.clip(np.arange(H) - v, 0, H - 1)
    xs = np.clip(np.arange(W) - u, 0, W - 1)
    return img[..., ys[:, None], xs[None, :]]
