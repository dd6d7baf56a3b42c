"""Compiled inner loops for stochastic training.

Both kernels apply updates strictly in the order given by ``order`` so a run
is reproducible from its seed.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def log_sigmoid(z):
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@njit(cache=True)
def sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def lbp_sgd_pass(U, VLU, VLI, VIL, rho, alpha, gate_rows, users, prevs, pos, neg, ctx_rows, G,
                 inv_dm, inv_dn, order, lr, lam, update_gate):
    """One pass of E-step + stochastic M-step over the triples in ``order``.

    ``alpha`` is (A, K, F); triple t uses gate row ``gate_rows[t]`` and
    context row ``ctx_rows[t]`` of ``G``. Returns -1 on success or the
    position in ``order`` where a non-finite value appeared.
    """
    K = U.shape[0]
    D = U.shape[2]
    F = G.shape[1]
    delta = np.empty(K)
    logit = np.empty(K)
    p = np.empty(K)
    gamma = np.empty(K)
    for step in range(order.shape[0]):
        t = order[step]
        u = users[t]
        i = prevs[t]
        m = pos[t]
        n = neg[t]
        a = gate_rows[t]
        c = ctx_rows[t]
        dinv = inv_dm[t] - inv_dn[t]

        # E-step
        for s in range(K):
            acc = 0.0
            for j in range(F):
                acc += alpha[a, s, j] * G[c, j]
            logit[s] = acc
            x = 0.0
            for d in range(D):
                x += U[s, u, d] * (VLU[s, m, d] - VLU[s, n, d])
                x += (VLI[s, m, d] - VLI[s, n, d]) * VIL[s, i, d]
            delta[s] = x + rho[s] * dinv
        mx = logit[0]
        for s in range(1, K):
            mx = max(mx, logit[s])
        tot = 0.0
        for s in range(K):
            p[s] = math.exp(logit[s] - mx)
            tot += p[s]
        for s in range(K):
            p[s] /= tot
        mx = log_sigmoid(delta[0]) + logit[0]
        for s in range(K):
            gamma[s] = log_sigmoid(delta[s]) + logit[s]
            mx = max(mx, gamma[s])
        tot = 0.0
        for s in range(K):
            gamma[s] = math.exp(gamma[s] - mx)
            tot += gamma[s]
        for s in range(K):
            gamma[s] /= tot

        # M-step
        bad = False
        for s in range(K):
            g = gamma[s]
            if g > 0.0:
                dl = 1.0 - sigmoid(delta[s])
                eta = lr * g
                for d in range(D):
                    uu = U[s, u, d]
                    vm = VLU[s, m, d]
                    vn = VLU[s, n, d]
                    lm = VLI[s, m, d]
                    ln_ = VLI[s, n, d]
                    ii = VIL[s, i, d]
                    U[s, u, d] = uu + eta * (dl * (vm - vn) - lam * uu)
                    VIL[s, i, d] = ii + eta * (dl * (lm - ln_) - lam * ii)
                    VLU[s, m, d] = vm + eta * (dl * uu - lam * vm)
                    VLU[s, n, d] = vn + eta * (-dl * uu - lam * vn)
                    VLI[s, m, d] = lm + eta * (dl * ii - lam * lm)
                    VLI[s, n, d] = ln_ + eta * (-dl * ii - lam * ln_)
                    if not (math.isfinite(U[s, u, d]) and math.isfinite(VIL[s, i, d])
                            and math.isfinite(VLU[s, m, d]) and math.isfinite(VLU[s, n, d])
                            and math.isfinite(VLI[s, m, d]) and math.isfinite(VLI[s, n, d])):
                        bad = True
                rho[s] = rho[s] + eta * (dl * dinv - lam * rho[s])
                if not math.isfinite(rho[s]):
                    bad = True
            if update_gate:
                for j in range(F):
                    w = alpha[a, s, j]
                    alpha[a, s, j] = w + lr * ((g - p[s]) * G[c, j] - lam * g * w)
                    if not math.isfinite(alpha[a, s, j]):
                        bad = True
        if bad:
            return step
    return -1


@njit(cache=True)
def mf_bpr_pass(P, Q, b, users, pos, neg, order, lr, lam):
    """Plain matrix-factorisation BPR over (user, visited, unvisited)."""
    D = P.shape[1]
    for step in range(order.shape[0]):
        t = order[step]
        u = users[t]
        m = pos[t]
        n = neg[t]
        x = b[m] - b[n]
        for d in range(D):
            x += P[u, d] * (Q[m, d] - Q[n, d])
        dl = 1.0 - sigmoid(x)
        for d in range(D):
            pu = P[u, d]
            qm = Q[m, d]
            qn = Q[n, d]
            P[u, d] = pu + lr * (dl * (qm - qn) - lam * pu)
            Q[m, d] = qm + lr * (dl * pu - lam * qm)
            Q[n, d] = qn + lr * (-dl * pu - lam * qn)
        b[m] += lr * (dl - lam * b[m])
        b[n] += lr * (-dl - lam * b[n])
        if not (math.isfinite(b[m]) and math.isfinite(b[n]) and math.isfinite(P[u, 0])):
            return step
    return -1
