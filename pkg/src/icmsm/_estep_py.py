"""Pure numpy forward/backward sweep over observation intervals.

Vectorised across intervals, looping over bins. Used when the compiled
extension is unavailable or ``ICMSM_PURE_PYTHON`` is set.
"""
import numpy as np

RESCALE_BELOW = 1e-250
RESCALE_BY = 1e250
LOG_RESCALE = float(np.log(RESCALE_BY))
LOG_FLOOR = float(np.log(1e-300))


class _Layout:
    """(interval, bin) pairs grouped by bin."""

    def __init__(self, iv):
        n = len(iv)
        lengths = iv.end - iv.start
        offsets = np.concatenate(([0], np.cumsum(lengths)))
        total = int(offsets[-1])
        pi = np.repeat(np.arange(n), lengths)
        pk = iv.start[pi] + (np.arange(total) - offsets[:-1][pi])
        order = np.argsort(pk, kind="stable")
        bounds = np.searchsorted(pk[order], np.arange(iv.K + 1))
        self.total = total
        self.groups = []
        for kk in range(iv.K):
            rows = order[bounds[kk]:bounds[kk + 1]]
            ints = pi[rows]
            last = pk[rows] == iv.end[ints] - 1
            keep_stay = ~(last & (iv.exact[ints] != 0))
            self.groups.append((rows, ints, last, keep_stay))


def _layout(iv):
    lay = getattr(iv, "_py_layout", None)
    if lay is None:
        lay = _Layout(iv)
        iv._py_layout = lay
    return lay


def estep(alpha, stay, iv, want_counts=True):
    """Return ``(d, y, loglik, bad)``; ``bad`` is the first failing interval or -1."""
    K, H, _ = alpha.shape
    n = len(iv)
    d = np.zeros((K, H, H))
    y = np.zeros((K, H))
    if n == 0:
        return d, y, 0.0, -1
    lay = _layout(iv)
    mats = alpha.copy()
    idx = np.arange(H)
    mats[:, idx, idx] = stay

    cur = np.zeros((n, H))
    cur[np.arange(n), iv.a] = 1.0
    logscale = np.zeros(n)
    fpre = np.empty((lay.total, H))
    last_scale = np.zeros(n)
    for kk, (rows, ints, last, _) in enumerate(lay.groups):
        if len(rows) == 0:
            continue
        f = cur[ints]
        fpre[rows] = f
        last_scale[ints[last]] = logscale[ints[last]]
        f = f @ mats[kk]
        tot = f.sum(axis=1)
        small = tot < RESCALE_BELOW
        if small.any():
            f[small] *= RESCALE_BY
            logscale[ints[small]] += LOG_RESCALE
        cur[ints] = f

    beta = np.zeros((n, H))
    loglik = 0.0
    bad = -1
    for kk in range(K - 1, -1, -1):
        rows, ints, last, keep_stay = lay.groups[kk]
        if len(rows) == 0:
            continue
        lints = ints[last]
        beta[lints] = 0.0
        beta[lints, iv.b[lints]] = 1.0
        bk = beta[ints]
        tmp = bk @ alpha[kk].T
        tmp[keep_stay] += stay[kk] * bk[keep_stay]
        f = fpre[rows]
        z = np.einsum("ij,ij->i", f, tmp)
        zl = z[last]
        with np.errstate(divide="ignore"):
            ll = np.log(zl) - last_scale[lints]
        fail = ~(zl > 0) | ~(ll >= LOG_FLOOR)
        if fail.any():
            cand = int(lints[fail].min())
            bad = cand if bad < 0 else min(bad, cand)
            return d, y, loglik, bad
        loglik += float(ll.sum())
        if want_counts:
            fz = f / z[:, None]
            y[kk] += (fz * tmp).sum(axis=0)
            d[kk] += (fz.T @ bk) * alpha[kk]
        tot = tmp.sum(axis=1)
        small = tot < RESCALE_BELOW
        if small.any():
            tmp[small] *= RESCALE_BY
        beta[ints] = tmp
    return d, y, loglik, bad
