"""Compiled inner loops: episode sampling and the two projection solvers.

Everything here works on plain arrays so the callers in ``mdp``, ``occupancy``
and ``omd`` can stay readable.
"""
import numpy as np
from numba import njit

# status codes returned by the solvers
OK = 0
MAXITER = 1
BREAKDOWN = 2
STALLED = 3


@njit(cache=True)
def _pick(cum, lo, hi, u):
    for j in range(lo, hi):
        if u < cum[j]:
            return j
    return hi - 1


@njit(cache=True)
def simulate_batch(seed, n_episodes, s0, sa_start, next_cum, stat_cum,
                   layer_cum, cap, record_layers):
    """Sample episodes of a (possibly layered) policy.

    ``next_cum`` holds cumulative next-state probabilities per pair with the
    goal in the last column. ``layer_cum[h]`` is used for step h+1 while
    h < len(layer_cum); afterwards ``stat_cum`` takes over.
    """
    np.random.seed(seed)
    n_sa = next_cum.shape[0]
    goal = next_cum.shape[1] - 1
    H1 = layer_cum.shape[0]
    visits = np.zeros((n_episodes, n_sa), np.int64)
    steps = np.zeros(n_episodes, np.int64)
    truncated = np.zeros(n_episodes, np.bool_)
    tail = np.zeros(n_episodes, np.bool_)
    n_rec = n_episodes if record_layers else 0
    layered = np.zeros((n_rec, H1, n_sa), np.uint8)
    for e in range(n_episodes):
        s = s0
        t = 0
        while s != goal:
            if t >= cap:
                truncated[e] = True
                break
            lo = sa_start[s]
            hi = sa_start[s + 1]
            u = np.random.random()
            if t < H1:
                j = _pick(layer_cum[t], lo, hi, u)
                if record_layers:
                    layered[e, t, j] = 1
                if t == H1 - 1:
                    tail[e] = True
            else:
                j = _pick(stat_cum, lo, hi, u)
            visits[e, j] += 1
            t += 1
            u = np.random.random()
            row = next_cum[j]
            s = goal
            for k in range(goal + 1):
                if u < row[k]:
                    s = k
                    break
        steps[e] = t
    return visits, steps, truncated, tail, layered


@njit(cache=True)
def _chol_solve(H, g):
    """Solve H x = g for symmetric H, adding ridge if Cholesky fails."""
    n = H.shape[0]
    ridge = 0.0
    scale = 0.0
    for i in range(n):
        scale = max(scale, abs(H[i, i]))
    if scale == 0.0:
        scale = 1.0
    for _ in range(30):
        M = H.copy()
        for i in range(n):
            M[i, i] += ridge
        ok = True
        L = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1):
                acc = M[i, j]
                for k in range(j):
                    acc -= L[i, k] * L[j, k]
                if i == j:
                    if acc <= 1e-300:
                        ok = False
                        break
                    L[i, i] = np.sqrt(acc)
                else:
                    L[i, j] = acc / L[j, j]
            if not ok:
                break
        if ok:
            y = np.zeros(n)
            for i in range(n):
                acc = g[i]
                for k in range(i):
                    acc -= L[i, k] * y[k]
                y[i] = acc / L[i, i]
            x = np.zeros(n)
            for i in range(n - 1, -1, -1):
                acc = y[i]
                for k in range(i + 1, n):
                    acc -= L[k, i] * x[k]
                x[i] = acc / L[i, i]
            return x
        ridge = scale * 1e-14 if ridge == 0.0 else ridge * 10.0
    return np.full(n, np.nan)


@njit(cache=True)
def _entropy_eval(A, b, w, T, r, logy, v, mu, joint):
    m, n = A.shape
    logx = logy.copy()
    for i in range(n):
        z = 0.0
        for k in range(m):
            z += A[k, i] * v[k]
        if joint:
            z -= mu * w[i]
        logx[i] += z / r[i]
        if logx[i] > 700.0:
            logx[i] = 700.0
    x = np.exp(logx)
    phi = 0.0
    for i in range(n):
        phi += r[i] * x[i]
    for k in range(m):
        phi -= b[k] * v[k]
    if joint:
        phi += mu * T
    g = A @ x - b
    gm = 0.0
    if joint:
        gm = T - np.dot(w, x)
    return logx, x, phi, g, gm


@njit(cache=True)
def _entropy_newton(A, b, w, T, r, logy, v, mu, joint, tol, maxit):
    m, n = A.shape
    dim = m + 1 if joint else m
    logx, x, phi, g, gm = _entropy_eval(A, b, w, T, r, logy, v, mu, joint)
    it = 0
    status = MAXITER
    while it < maxit:
        res = 0.0
        for k in range(m):
            res = max(res, abs(g[k]))
        if joint:
            res = max(res, abs(gm))
        if res <= tol:
            status = OK
            break
        d = x / r
        H = np.zeros((dim, dim))
        for k in range(m):
            for l in range(k, m):
                acc = 0.0
                for i in range(n):
                    acc += A[k, i] * A[l, i] * d[i]
                H[k, l] = acc
                H[l, k] = acc
        grad = np.zeros(dim)
        grad[:m] = g
        if joint:
            for k in range(m):
                acc = 0.0
                for i in range(n):
                    acc -= A[k, i] * w[i] * d[i]
                H[k, m] = acc
                H[m, k] = acc
            acc = 0.0
            for i in range(n):
                acc += w[i] * w[i] * d[i]
            H[m, m] = acc
            grad[m] = gm
        step = _chol_solve(H, -grad)
        if np.isnan(step[0]):
            status = BREAKDOWN
            break
        slope = np.dot(grad, step)
        t = 1.0
        accepted = False
        for _ in range(60):
            v_new = v + t * step[:m]
            mu_new = mu + t * step[m] if joint else mu
            lx2, x2, phi2, g2, gm2 = _entropy_eval(A, b, w, T, r, logy, v_new,
                                                   mu_new, joint)
            if phi2 <= phi + 0.25 * t * slope:
                accepted = True
            else:
                # near the optimum rounding hides the decrease; fall back to
                # the gradient norm
                r_old = 0.0
                r_new = 0.0
                for k in range(m):
                    r_old = max(r_old, abs(g[k]))
                    r_new = max(r_new, abs(g2[k]))
                if joint:
                    r_old = max(r_old, abs(gm))
                    r_new = max(r_new, abs(gm2))
                if r_new < 0.5 * r_old and abs(phi2 - phi) <= 1e-10 * (1.0 + abs(phi)):
                    accepted = True
            if accepted:
                v = v_new
                mu = mu_new
                logx, x, phi, g, gm = lx2, x2, phi2, g2, gm2
                break
            t *= 0.5
        it += 1
        if not accepted:
            status = BREAKDOWN
            break
    return logx, v, mu, it, status


@njit(cache=True)
def entropy_projection(A, b, w, T, r, logy, v0, mu0, tol, maxit):
    """Weighted-KL projection of y onto {Ax=b, w.x <= T, x >= 0}.

    Minimizes sum_i r_i (x_i ln(x_i/y_i) - x_i + y_i) through Newton's method
    on the dual; x_i = y_i exp(((A^T v)_i - mu w_i) / r_i).
    Returns (logx, v, mu, iterations, status).
    """
    total = 0
    if mu0 > 0.0:
        logx, v, mu, it, st = _entropy_newton(A, b, w, T, r, logy, v0.copy(),
                                              mu0, True, tol, maxit)
        total += it
        if st == OK and mu >= 0.0:
            return logx, v, mu, total, st
    logx, v, mu, it, st = _entropy_newton(A, b, w, T, r, logy, v0.copy(), 0.0,
                                          False, tol, maxit)
    total += it
    if st != OK:
        return logx, v, 0.0, total, st
    size = np.dot(w, np.exp(logx))
    if size <= T + tol:
        return logx, v, 0.0, total, st
    start = mu0 if mu0 > 0.0 else 1e-3
    logx, v, mu, it, st = _entropy_newton(A, b, w, T, r, logy, v, start, True,
                                          tol, maxit)
    total += it
    return logx, v, mu, total, st


@njit(cache=True)
def entropy_kkt(A, b, w, T, r, logy, logx, v, mu):
    """x = exp(logx) and the KKT residuals of an entropy projection.

    Returns (x, flow, size, nonneg, complementarity, stationarity, dual_sign);
    stationarity is relative to 1 + max |r logy|.
    """
    m, n = A.shape
    x = np.exp(logx)
    flow = 0.0
    for i in range(m):
        acc = -b[i]
        for j in range(n):
            acc += A[i, j] * x[j]
        flow = max(flow, abs(acc))
    sz = 0.0
    nonneg = 0.0
    scale = 0.0
    stat = 0.0
    for j in range(n):
        sz += w[j] * x[j]
        nonneg = max(nonneg, -x[j])
        scale = max(scale, abs(r[j] * logy[j]))
        g = r[j] * (logx[j] - logy[j]) + mu * w[j]
        for i in range(m):
            g -= A[i, j] * v[i]
        stat = max(stat, abs(g))
    finite = T < 1e300
    size = max(0.0, sz - T) if finite else 0.0
    compl = abs(mu * (T - sz)) if finite else 0.0
    return (x, flow, size, nonneg, compl, stat / (1.0 + scale),
            max(0.0, -mu))


@njit(cache=True)
def _barrier_grad(x, grp, W, a, beta):
    ng = a.shape[0]
    n = x.shape[0]
    phi = np.zeros(ng)
    for i in range(n):
        phi[grp[i]] += W[i] * x[i]
    for j in range(ng):
        if phi[j] < 1e-300:
            phi[j] = 1e-300
    grad = np.empty(n)
    for i in range(n):
        j = grp[i]
        grad[i] = W[i] * (a[j] - beta[j] / phi[j])
    return phi, grad


@njit(cache=True)
def _pd_residual(A, b, G, x, sg, lx, lg, nu, grad, t):
    rd = grad - lx + G.T @ lg + A.T @ nu
    rcx = lx * x - 1.0 / t
    rcg = lg * sg - 1.0 / t
    rp = A @ x - b
    return rd, rcx, rcg, rp, sg


@njit(cache=True)
def logbarrier_ipm(A, b, G, h, grp, W, a, beta, x0, nu0, gap0, tol, maxit,
                   stall_tol):
    """Primal-dual interior point for min sum_j a_j phi_j - beta_j ln phi_j.

    phi_j = sum over i in group j of W_i x_i; constraints Ax = b, Gx <= h,
    x >= 0. ``x0`` must be strictly inside the inequalities. Once all
    residuals are below ``stall_tol``, 5 iterations without halving them
    end the run with status STALLED.
    Returns (x, nu, iterations, status, primal_res, dual_res, gap).
    """
    m, n = A.shape
    p = G.shape[0]
    x = x0.copy()
    nu = nu0.copy()
    sg = h - G @ x
    t0 = (n + p) / gap0
    lx = 1.0 / (t0 * x)
    lg = 1.0 / (t0 * sg)
    mu_fac = 10.0
    status = MAXITER
    it = 0
    pres = 0.0
    dres = 0.0
    gap = 0.0
    best = np.inf
    since = 0
    while it < maxit:
        phi, grad = _barrier_grad(x, grp, W, a, beta)
        gap = np.dot(x, lx) + np.dot(sg, lg)
        t = mu_fac * (n + p) / max(gap, 1e-300)
        rd, rcx, rcg, rp, sg = _pd_residual(A, b, G, x, sg, lx, lg, nu, grad, t)
        gscale = 1.0
        for i in range(n):
            gscale = max(gscale, abs(grad[i]))
        pres = np.max(np.abs(rp)) if m > 0 else 0.0
        dres = np.max(np.abs(rd)) / gscale
        if pres <= tol and dres <= tol and gap <= tol:
            status = OK
            break
        # stop once roundoff keeps the residuals from shrinking
        cur = max(pres, dres, gap)
        if cur < 0.5 * best:
            best = cur
            since = 0
        elif cur <= stall_tol:
            since += 1
            if since >= 5:
                status = STALLED
                break
        # reduced Newton system
        K = np.zeros((n + m, n + m))
        for i in range(n):
            ji = grp[i]
            ci = W[i] * beta[ji] / (phi[ji] * phi[ji])
            for k in range(n):
                if grp[k] == ji:
                    K[i, k] = ci * W[k]
            K[i, i] += lx[i] / x[i]
        for q in range(p):
            dq = lg[q] / sg[q]
            for i in range(n):
                gi = G[q, i]
                if gi != 0.0:
                    for k in range(n):
                        K[i, k] += dq * gi * G[q, k]
        for r in range(m):
            for i in range(n):
                K[n + r, i] = A[r, i]
                K[i, n + r] = A[r, i]
        rhs = np.zeros(n + m)
        rhs[:n] = -rd - rcx / x + G.T @ (rcg / sg)
        rhs[n:] = -rp
        sol = np.linalg.solve(K, rhs)
        dx = sol[:n]
        dnu = sol[n:]
        dlx = (-rcx - lx * dx) / x
        Gdx = G @ dx
        dlg = (-rcg + lg * Gdx) / sg
        smax = 1.0
        for i in range(n):
            if dlx[i] < 0.0:
                smax = min(smax, -lx[i] / dlx[i])
        for q in range(p):
            if dlg[q] < 0.0:
                smax = min(smax, -lg[q] / dlg[q])
        s = 0.99 * smax
        for _ in range(100):
            ok = True
            for i in range(n):
                if x[i] + s * dx[i] <= 0.0:
                    ok = False
                    break
            if ok:
                for q in range(p):
                    if sg[q] - s * Gdx[q] <= 0.0:
                        ok = False
                        break
            if ok:
                break
            s *= 0.5
        rnorm = np.sqrt(np.sum(rd ** 2) + np.sum(rcx ** 2) + np.sum(rcg ** 2)
                        + np.sum(rp ** 2))
        for _ in range(60):
            xn = x + s * dx
            lxn = lx + s * dlx
            lgn = lg + s * dlg
            nun = nu + s * dnu
            phin, gradn = _barrier_grad(xn, grp, W, a, beta)
            sgn = sg - s * Gdx
            rd2, rcx2, rcg2, rp2, sg2 = _pd_residual(A, b, G, xn, sgn, lxn, lgn,
                                                      nun, gradn, t)
            rn2 = np.sqrt(np.sum(rd2 ** 2) + np.sum(rcx2 ** 2)
                          + np.sum(rcg2 ** 2) + np.sum(rp2 ** 2))
            if rn2 <= (1.0 - 0.01 * s) * rnorm or s < 1e-12:
                break
            s *= 0.5
        x = xn
        lx = lxn
        lg = lgn
        nu = nun
        # slack is carried along the steps: recomputing h - G x can round
        # to zero on a tight bound
        sg = sgn
        it += 1
    return x, nu, it, status, pres, dres, gap
