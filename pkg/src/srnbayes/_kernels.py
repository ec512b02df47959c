"""Compiled inner loops.

A network is passed around as a flat tuple of arrays (see
``ReactionNetwork.packed``):

    C       float64 (n_s, n_r)  stoichiometry
    kind    int64   (n_r,)      0 mass action, 1 combinatorial, 2 conserved
                                complement, 3 Michaelis-Menten
    pidx    int64   (n_r,)      scale / Vmax parameter index
    coef    float64 (n_r,)      prefactor (kinds 0, 1) or conservation constant (2)
    fptr    int64   (n_r + 1,)  factor slice offsets into fsp/fval
    fsp     int64   (n_f,)      factor species
    fval    int64   (n_f,)      multiplicity (0), order (1), Km index (3)
    omega   float               system size
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def rates(C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta):
    v = np.zeros(kind.shape[0])
    rates_into(v, C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta)
    return v


@njit(cache=True)
def rates_into(v, C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta):
    n_r = kind.shape[0]
    for k in range(n_r):
        p = theta[pidx[k]]
        K = kind[k]
        if K == 0:
            val = coef[k] * p
            for f in range(fptr[k], fptr[k + 1]):
                x = max(s[fsp[f]], 0.0)
                for _ in range(fval[f]):
                    val *= x
            v[k] = val
        elif K == 1:
            f = fptr[k]
            x = max(s[fsp[f]], 0.0)
            val = coef[k] * p
            for i in range(fval[f]):
                val *= max(x - i / omega, 0.0)
            v[k] = val
        elif K == 2:
            f = fptr[k]
            v[k] = p * max(coef[k] - max(s[fsp[f]], 0.0), 0.0)
        else:
            val = p
            for f in range(fptr[k], fptr[k + 1]):
                x = max(s[fsp[f]], 0.0)
                val *= x / (theta[fval[f]] + x)
            v[k] = val


@njit(cache=True)
def rates_jacobian(C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta):
    """d v / d s, shape (n_r, n_s)."""
    J = np.zeros((kind.shape[0], C.shape[0]))
    jacobian_into(J, C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta)
    return J


@njit(cache=True)
def jacobian_into(J, C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta):
    n_r = kind.shape[0]
    for k in range(n_r):
        for i in range(J.shape[1]):
            J[k, i] = 0.0
    for k in range(n_r):
        p = theta[pidx[k]]
        K = kind[k]
        if K == 0:
            for f in range(fptr[k], fptr[k + 1]):
                m = fval[f]
                if m == 0:
                    continue
                d = coef[k] * p * m
                xs = max(s[fsp[f]], 0.0)
                for _ in range(m - 1):
                    d *= xs
                for g in range(fptr[k], fptr[k + 1]):
                    if g != f:
                        x = max(s[fsp[g]], 0.0)
                        for _ in range(fval[g]):
                            d *= x
                J[k, fsp[f]] += d
        elif K == 1:
            f = fptr[k]
            x = max(s[fsp[f]], 0.0)
            n = fval[f]
            tot = 0.0
            for i in range(n):
                if x - i / omega <= 0.0:
                    continue
                prod = 1.0
                for j in range(n):
                    if j != i:
                        prod *= max(x - j / omega, 0.0)
                tot += prod
            J[k, fsp[f]] = coef[k] * p * tot
        elif K == 2:
            f = fptr[k]
            if coef[k] - max(s[fsp[f]], 0.0) > 0.0:
                J[k, fsp[f]] = -p
        else:
            for f in range(fptr[k], fptr[k + 1]):
                x = max(s[fsp[f]], 0.0)
                km = theta[fval[f]]
                d = p * km / ((km + x) * (km + x))
                for g in range(fptr[k], fptr[k + 1]):
                    if g != f:
                        y = max(s[fsp[g]], 0.0)
                        d *= y / (theta[fval[g]] + y)
                J[k, fsp[f]] += d


@njit(cache=True)
def _lna_rhs(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, m, G, dm, dG, F, v, Jv):
    # writes dm = C v and dG = G F^T + F G + C diag(v) C^T into the buffers
    n_s = C.shape[0]
    n_r = C.shape[1]
    rates_into(v, C, kind, pidx, coef, fptr, fsp, fval, omega, m, theta)
    jacobian_into(Jv, C, kind, pidx, coef, fptr, fsp, fval, omega, m, theta)
    for i in range(n_s):
        acc = 0.0
        for k in range(n_r):
            acc += C[i, k] * v[k]
        dm[i] = acc
        for j in range(n_s):
            f = 0.0
            for k in range(n_r):
                f += C[i, k] * Jv[k, j]
            F[i, j] = f
    for i in range(n_s):
        for j in range(i, n_s):
            acc = 0.0
            for k in range(n_r):
                acc += C[i, k] * v[k] * C[j, k]
            for q in range(n_s):
                acc += F[i, q] * G[q, j] + G[i, q] * F[j, q]
            dG[i, j] = acc
            dG[j, i] = acc


@njit(cache=True)
def lna_propagate(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, m0, G0, dt, substeps):
    """RK4 on the mean and scaled covariance ODEs over ``dt``.

    Returns (m, G, ok, n_clamp) where n_clamp counts substeps with a negative
    mean component.
    """
    n = m0.shape[0]
    m = m0.copy()
    G = G0.copy()
    n_clamp = 0
    if dt <= 0.0:
        return m, G, True, 0
    h = dt / substeps
    F = np.empty((n, n))
    v = np.empty(kind.shape[0])
    Jv = np.empty((kind.shape[0], n))
    k1m = np.empty(n)
    k2m = np.empty(n)
    k3m = np.empty(n)
    k4m = np.empty(n)
    k1G = np.empty((n, n))
    k2G = np.empty((n, n))
    k3G = np.empty((n, n))
    k4G = np.empty((n, n))
    tm = np.empty(n)
    tG = np.empty((n, n))
    for _ in range(substeps):
        _lna_rhs(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, m, G, k1m, k1G, F, v, Jv)
        for i in range(n):
            tm[i] = m[i] + 0.5 * h * k1m[i]
            for j in range(n):
                tG[i, j] = G[i, j] + 0.5 * h * k1G[i, j]
        _lna_rhs(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, tm, tG, k2m, k2G, F, v, Jv)
        for i in range(n):
            tm[i] = m[i] + 0.5 * h * k2m[i]
            for j in range(n):
                tG[i, j] = G[i, j] + 0.5 * h * k2G[i, j]
        _lna_rhs(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, tm, tG, k3m, k3G, F, v, Jv)
        for i in range(n):
            tm[i] = m[i] + h * k3m[i]
            for j in range(n):
                tG[i, j] = G[i, j] + h * k3G[i, j]
        _lna_rhs(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, tm, tG, k4m, k4G, F, v, Jv)
        ok = True
        neg = False
        for i in range(n):
            m[i] += (h / 6.0) * (k1m[i] + 2.0 * k2m[i] + 2.0 * k3m[i] + k4m[i])
            if not np.isfinite(m[i]):
                ok = False
            if m[i] < 0.0:
                neg = True
            for j in range(n):
                G[i, j] += (h / 6.0) * (k1G[i, j] + 2.0 * k2G[i, j] + 2.0 * k3G[i, j] + k4G[i, j])
        for i in range(n):
            for j in range(i + 1, n):
                a = 0.5 * (G[i, j] + G[j, i])
                G[i, j] = a
                G[j, i] = a
            for j in range(n):
                if not np.isfinite(G[i, j]):
                    ok = False
        if not ok:
            return m, G, False, n_clamp
        if neg:
            n_clamp += 1
    return m, G, True, n_clamp


@njit(cache=True)
def chol_jitter(A):
    """Cholesky with the 0, 1e-12*s, ..., 1e-4*s jitter ladder (s = trace/dim).

    Returns (L, jitter, ok).
    """
    n = A.shape[0]
    allzero = True
    for i in range(n):
        for j in range(n):
            if A[i, j] != 0.0:
                allzero = False
    if allzero:
        return np.zeros((n, n)), 0.0, True
    tr = 0.0
    for i in range(n):
        tr += A[i, i]
    scale = abs(tr) / n
    if scale == 0.0:
        scale = 1.0
    scale = max(scale, 1e-280)
    L = np.zeros((n, n))
    j = 0.0
    step = 1e-12 * scale
    top = 1e-4 * scale * (1.0 + 1e-12)
    while True:
        ok = True
        for c in range(n):
            acc = A[c, c] + j
            for q in range(c):
                acc -= L[c, q] * L[c, q]
            if not (acc > 0.0):
                ok = False
                break
            d = math.sqrt(acc)
            L[c, c] = d
            for r in range(c + 1, n):
                a = A[r, c]
                for q in range(c):
                    a -= L[r, q] * L[c, q]
                L[r, c] = a / d
        if ok:
            return L, j, True
        if j == 0.0:
            j = step
        else:
            j *= 10.0
        if j > top:
            return L, j, False
        for r in range(n):
            for c in range(n):
                L[r, c] = 0.0


@njit(cache=True)
def _tri_solve(L, b):
    n = L.shape[0]
    x = np.zeros(n)
    for i in range(n):
        acc = b[i]
        for q in range(i):
            acc -= L[i, q] * x[q]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True)
def _tri_solve_T(L, b):
    n = L.shape[0]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for q in range(i + 1, n):
            acc -= L[q, i] * x[q]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True)
def update_indexed(m, G, idx, y, noise_var, omega):
    """Bayesian update observing components ``idx`` of the state.

    ``noise_var`` is the observation noise variance per observed component on
    the count scale. Returns (m_new, G_new, loglik, jitter, ok).
    """
    k = idx.shape[0]
    n = m.shape[0]
    S = np.empty((k, k))
    for a in range(k):
        for b in range(k):
            S[a, b] = G[idx[a], idx[b]]
        S[a, a] += omega * noise_var[a]
    L, jit, ok = chol_jitter(S)
    for a in range(k):
        if not L[a, a] > 0.0:
            ok = False
    if not ok:
        return m, G, -np.inf, jit, False
    r = np.empty(k)
    for a in range(k):
        r[a] = y[a] - m[idx[a]]
    z = _tri_solve(L, r)
    w = _tri_solve_T(L, z)
    # K = G[:, idx] S^-1 ; alpha = m + K r ; beta = G - K G[idx, :]
    m_new = m.copy()
    for i in range(n):
        acc = 0.0
        for a in range(k):
            acc += G[i, idx[a]] * w[a]
        m_new[i] += acc
    # S^-1 G[idx, :] column by column
    SinvGi = np.empty((k, n))
    col = np.empty(k)
    for j in range(n):
        for a in range(k):
            col[a] = G[idx[a], j]
        sol = _tri_solve_T(L, _tri_solve(L, col))
        for a in range(k):
            SinvGi[a, j] = sol[a]
    G_new = G.copy()
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for a in range(k):
                acc += G[i, idx[a]] * SinvGi[a, j]
            G_new[i, j] -= acc
    G_new = 0.5 * (G_new + G_new.T)
    logdet = 0.0
    for a in range(k):
        logdet += 2.0 * math.log(L[a, a])
    # predictive covariance is S / omega
    quad = 0.0
    for a in range(k):
        quad += z[a] * z[a]
    ll = -0.5 * (k * LOG_2PI + logdet - k * math.log(omega) + omega * quad)
    return m_new, G_new, ll, jit, True


@njit(cache=True)
def filter_loglik(C, kind, pidx, coef, fptr, fsp, fval, omega, theta,
                  m0, G0, times, mask, values, noise_var, substeps):
    """Sum of predictive log densities over one observed trajectory.

    The initial moments refer to ``times[0]``. Returns
    (loglik, ok, n_clamp, max_jitter).
    """
    m = m0.copy()
    G = G0.copy()
    n_t = times.shape[0]
    n_s = m.shape[0]
    total = 0.0
    n_clamp = 0
    max_jit = 0.0
    for h in range(n_t):
        if h > 0:
            m, G, ok, nc = lna_propagate(C, kind, pidx, coef, fptr, fsp, fval, omega,
                                         theta, m, G, times[h] - times[h - 1], substeps)
            n_clamp += nc
            if not ok:
                return -np.inf, False, n_clamp, max_jit
        k = 0
        for i in range(n_s):
            if mask[h, i]:
                k += 1
        if k == 0:
            continue
        idx = np.empty(k, dtype=np.int64)
        y = np.empty(k)
        nv = np.empty(k)
        a = 0
        for i in range(n_s):
            if mask[h, i]:
                idx[a] = i
                y[a] = values[h, i]
                nv[a] = noise_var[h, i]
                a += 1
        m, G, ll, jit, ok = update_indexed(m, G, idx, y, nv, omega)
        if jit > max_jit:
            max_jit = jit
        if not ok or not np.isfinite(ll):
            return -np.inf, False, n_clamp, max_jit
        total += ll
    return total, True, n_clamp, max_jit


@njit(cache=True)
def em_transition_loglik(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, states, dt):
    """Sum of Euler-Maruyama transition log densities along a dense path."""
    total = 0.0
    n = states.shape[0]
    for h in range(n - 1):
        s = states[h]
        v = rates(C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta)
        mean = s + (C @ v) * dt
        cov = ((C * v) @ C.T) * (dt / omega)
        L, jit, ok = chol_jitter(cov)
        for a in range(L.shape[0]):
            if not L[a, a] > 0.0:
                ok = False
        if not ok:
            return -np.inf
        z = _tri_solve(L, states[h + 1] - mean)
        logdet = 0.0
        quad = 0.0
        for a in range(z.shape[0]):
            logdet += 2.0 * math.log(L[a, a])
            quad += z[a] * z[a]
        total += -0.5 * (z.shape[0] * LOG_2PI + logdet + quad)
        if not np.isfinite(total):
            return -np.inf
    return total


@njit(cache=True)
def euler_maruyama(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, s0, dt, z):
    """Clamped Euler-Maruyama path with pre-drawn standard normals ``z``.

    ``z`` has shape (n_steps, n_s). Returns (path, ok, fail_step, n_clamp)
    where ``n_clamp`` counts components reset from negative values to 0.
    """
    n_steps = z.shape[0]
    n_clamp = 0
    n_s = s0.shape[0]
    path = np.empty((n_steps + 1, n_s))
    path[0] = s0
    s = s0.copy()
    for h in range(n_steps):
        v = rates(C, kind, pidx, coef, fptr, fsp, fval, omega, s, theta)
        cov = ((C * v) @ C.T) * (dt / omega)
        L, jit, ok = chol_jitter(cov)
        if not ok:
            return path[: h + 1], False, h, n_clamp
        s = s + (C @ v) * dt + L @ z[h]
        for i in range(n_s):
            if s[i] < 0.0:
                s[i] = 0.0
                n_clamp += 1
            if not np.isfinite(s[i]) or s[i] > 1e12:
                path[h + 1] = s
                return path[: h + 2], False, h + 1, n_clamp
        path[h + 1] = s
    return path, True, n_steps, n_clamp


@njit(cache=True)
def _seed(seed):
    np.random.seed(seed)


@njit(cache=True)
def _ssa_step(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, x, t):
    conc = x / omega
    a = rates(C, kind, pidx, coef, fptr, fsp, fval, omega, conc, theta) * omega
    a0 = 0.0
    for k in range(a.shape[0]):
        a0 += a[k]
    if a0 <= 0.0:
        return np.inf, -1
    tau = -math.log(1.0 - np.random.random()) / a0
    u = np.random.random() * a0
    acc = 0.0
    j = a.shape[0] - 1
    for k in range(a.shape[0]):
        acc += a[k]
        if u < acc and a[k] > 0.0:
            j = k
            break
    while a[j] <= 0.0:
        j -= 1
    return t + tau, j


@njit(cache=True)
def gillespie_path(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, x0, t_end, seed,
                   max_events):
    """Direct-method SSA. Returns (times, states, n_events, truncated)."""
    _seed(seed)
    n_s = x0.shape[0]
    cap = 1024
    times = np.empty(cap)
    states = np.empty((cap, n_s))
    times[0] = 0.0
    states[0] = x0
    x = x0.copy()
    t = 0.0
    n = 1
    while True:
        t_new, j = _ssa_step(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, x, t)
        if j < 0 or t_new > t_end:
            break
        if n - 1 >= max_events:
            return times[:n], states[:n], n - 1, True
        t = t_new
        for i in range(n_s):
            x[i] += C[i, j]
        if n == cap:
            cap *= 2
            nt = np.empty(cap)
            ns = np.empty((cap, n_s))
            nt[:n] = times[:n]
            ns[:n] = states[:n]
            times = nt
            states = ns
        times[n] = t
        states[n] = x
        n += 1
    return times[:n], states[:n], n - 1, False


@njit(cache=True)
def gillespie_at(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, x0, obs_times, seed,
                 max_events):
    """SSA sampled at ``obs_times`` (left-continuous). Returns (states, ok)."""
    _seed(seed)
    n_s = x0.shape[0]
    n_t = obs_times.shape[0]
    out = np.empty((n_t, n_s))
    x = x0.copy()
    t = 0.0
    h = 0
    events = 0
    while h < n_t:
        t_new, j = _ssa_step(C, kind, pidx, coef, fptr, fsp, fval, omega, theta, x, t)
        while h < n_t and obs_times[h] < t_new:
            out[h] = x
            h += 1
        if h >= n_t or j < 0:
            break
        events += 1
        if events > max_events:
            return out, False
        t = t_new
        for i in range(n_s):
            x[i] += C[i, j]
    while h < n_t:
        out[h] = x
        h += 1
    return out, True
