"""Pure-numpy fallback for the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def sqeuclidean(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _softmin(logw, pot, C, eps):
    # -eps * logsumexp over the last axis of (logw + (pot - C) / eps)
    t = logw[None, :] + (pot[None, :] - C) / eps
    mx = t.max(axis=1)
    return -eps * (mx + np.log(np.exp(t - mx[:, None]).sum(axis=1)))


def sinkhorn_log(C, loga, logb, eps, max_iter, tol, check_every, f_init=None, g_init=None):
    C = np.asarray(C, dtype=np.float64)
    Ct = np.ascontiguousarray(C.T)
    f = np.zeros(C.shape[0]) if f_init is None else np.array(f_init, dtype=np.float64)
    g = np.zeros(C.shape[1]) if g_init is None else np.array(g_init, dtype=np.float64)
    a = np.exp(loga)
    b = np.exp(logb)
    err = np.inf
    it = 0
    while it < max_iter:
        it += 1
        f = _softmin(logb, g, C, eps)
        g = _softmin(loga, f, Ct, eps)
        if it == 1 or it % check_every == 0 or it == max_iter:
            P = np.exp(loga[:, None] + logb[None, :] + (f[:, None] + g[None, :] - C) / eps)
            err = float(np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum())
            if err <= tol:
                break
    return f, g, it, err
