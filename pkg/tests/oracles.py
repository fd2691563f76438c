"""Slow reference implementations used as test oracles."""
import itertools
import math

import numpy as np


def brute_density_weights(p, k=8):
    n = len(p)
    kk = min(k, n - 1)
    if kk <= 0:
        return np.ones(n)
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    r = np.sort(d, axis=1)[:, kk]
    w = 4.0 / 3.0 * math.pi * r ** 3 / kk
    return w if np.any(w > 0) else np.ones(n)


def brute_gpsnr(ref_p, ref_c, tst_p, tst_c, diag, lambda_geo=0.8, lambda_col=0.2):
    """O(n^2) geometric PSNR without alignment (inputs already aligned)."""
    def direction(sp, sc, dp, dc):
        w = brute_density_weights(sp)
        d2 = ((sp[:, None, :] - dp[None, :, :]) ** 2).sum(-1)
        j = d2.argmin(axis=1)
        geo = d2[np.arange(len(sp)), j]
        col = ((sc - dc[j]) ** 2).sum(-1)
        return (w * geo).sum() / w.sum(), (w * col).sum() / w.sum()
    g1, c1 = direction(tst_p, tst_c, ref_p, ref_c)
    g2, c2 = direction(ref_p, ref_c, tst_p, tst_c)
    peak = max(diag, 1e-9)
    mse = lambda_geo * max(g1, g2) / peak ** 2 + lambda_col * max(c1, c2) / 4.0
    return 100.0 if mse <= 0 else min(100.0, 10 * math.log10(1 / mse))


def brute_mckp(options, budget, gran=1024):
    """Exhaustive multiple-choice knapsack over the same discretisation.

    Returns (utility, -bytes, 0-based levels). All-top wins when it fits; other
    ties go to fewer bytes, then higher levels on earlier tiles.
    """
    cap = budget // gran
    top = tuple(len(o) - 1 for o in options)
    if sum(-(-o[-1][0] // gran) for o in options) <= cap:
        return (sum(round(o[-1][1] * 1e9) for o in options), None, top)
    best = None
    for choice in itertools.product(*[range(len(o)) for o in options]):
        units = sum(-(-options[t][c][0] // gran) for t, c in enumerate(choice))
        if units > cap:
            continue
        u = sum(round(options[t][c][1] * 1e9) for t, c in enumerate(choice))
        b = sum(options[t][c][0] for t, c in enumerate(choice))
        key = (u, -b, choice)
        if best is None or key > best:
            best = key
    return best


def pixel_loop_psnr(a, b):
    h, w, _ = a.shape
    s = 0.0
    for y in range(h):
        for x in range(w):
            for c in range(3):
                s += (a[y, x, c] - b[y, x, c]) ** 2
    mse = s / (h * w * 3)
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1 / mse))
