"""Independent reference implementations used only to verify the package.

Everything here is deliberately brute force or first principles, sharing no
code with the library paths it checks.
"""

import numpy as np
from scipy.integrate import quad


def isochromat_cpmg(t2, t1, delta_te, n_echoes, refocus_fa_deg, n_spins=10000):
    """Bloch simulation of a CPMG train over a uniformly dephased ensemble.

    Each spin carries a fixed precession angle per half echo spacing,
    uniformly spaced over [0, 2pi). Magnetization starts along +x after an
    ideal 90 degree pulse; refocusing pulses rotate about x. Longitudinal
    regrowth is neglected, matching the unit-magnetization convention.
    Returns echo magnitudes |mean(Mxy)| at times n*delta_te.
    """
    phi = 2.0 * np.pi * np.arange(n_spins) / n_spins
    cphi, sphi = np.cos(phi), np.sin(phi)
    e2 = np.exp(-0.5 * delta_te / t2)
    e1 = np.exp(-0.5 * delta_te / t1)
    a = np.deg2rad(refocus_fa_deg)
    ca, sa = np.cos(a), np.sin(a)

    mx = np.ones(n_spins)
    my = np.zeros(n_spins)
    mz = np.zeros(n_spins)

    def half_interval(mx, my, mz):
        mx, my = mx * cphi - my * sphi, mx * sphi + my * cphi
        return mx * e2, my * e2, mz * e1

    echoes = np.empty(n_echoes)
    for n in range(n_echoes):
        mx, my, mz = half_interval(mx, my, mz)
        my, mz = ca * my - sa * mz, sa * my + ca * mz  # rotate about +x
        mx, my, mz = half_interval(mx, my, mz)
        echoes[n] = abs(complex(mx.mean(), my.mean()))
    return echoes


def nnls_exhaustive(A, b):
    """Best feasible objective ||Ax - b||^2 over all sign-support candidates.

    For every subset S of columns, solves the unconstrained least squares
    on S and keeps it if the solution is non-negative. Exponential in the
    number of columns; intended for n <= ~12.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[1]
    best_obj = float(b @ b)  # empty support: x = 0
    best_x = np.zeros(n)
    for mask_bits in range(1, 2 ** n):
        cols = [j for j in range(n) if mask_bits >> j & 1]
        xs, *_ = np.linalg.lstsq(A[:, cols], b, rcond=None)
        if np.any(xs < -1e-12):
            continue
        r = A[:, cols] @ xs - b
        obj = float(r @ r)
        if obj < best_obj:
            best_obj = obj
            best_x = np.zeros(n)
            best_x[cols] = np.clip(xs, 0.0, None)
    return best_obj, best_x


def edt_brute_force(mask):
    """Exact Euclidean distance to the nearest True voxel, all-pairs O(n^2)."""
    mask = np.asarray(mask, dtype=bool)
    true_pts = np.argwhere(mask).astype(np.float64)
    if true_pts.shape[0] == 0:
        raise ValueError("empty mask")
    coords = np.argwhere(np.ones(mask.shape, dtype=bool)).astype(np.float64)
    out = np.empty(coords.shape[0])
    chunk = 4096
    for start in range(0, coords.shape[0], chunk):
        c = coords[start:start + chunk]
        d2 = ((c[:, None, :] - true_pts[None, :, :]) ** 2).sum(axis=2)
        out[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return out.reshape(mask.shape)


def tv_seminorm(u):
    """Isotropic total variation with forward differences, Neumann edges."""
    u = np.asarray(u, dtype=np.float64)
    g2 = np.zeros_like(u)
    for ax in range(u.ndim):
        d = np.zeros_like(u)
        sl = [slice(None)] * u.ndim
        sl[ax] = slice(0, -1)
        d[tuple(sl)] = np.diff(u, axis=ax)
        g2 += d * d
    return float(np.sqrt(g2).sum())


def tv_objective(u, f, weight):
    return 0.5 * float(((u - f) ** 2).sum()) + weight * tv_seminorm(u)


def _smoothed_tv_grad(u, weight, eps):
    """Gradient and value of the eps-smoothed energy 0.5||u-f||^2 + w*TV_eps."""
    nd = u.ndim
    grads = []
    g2 = np.zeros_like(u)
    for ax in range(nd):
        d = np.zeros_like(u)
        sl = [slice(None)] * nd
        sl[ax] = slice(0, -1)
        d[tuple(sl)] = np.diff(u, axis=ax)
        grads.append(d)
        g2 += d * d
    mag = np.sqrt(g2 + eps * eps)
    div = np.zeros_like(u)
    for ax, d in enumerate(grads):
        nrm = d / mag
        sl_fwd = [slice(None)] * nd
        sl_fwd[ax] = slice(0, -1)
        div[tuple(sl_fwd)] += nrm[tuple(sl_fwd)]
        sl_bwd = [slice(None)] * nd
        sl_bwd[ax] = slice(1, None)
        sl_src = [slice(None)] * nd
        sl_src[ax] = slice(0, -1)
        div[tuple(sl_bwd)] -= nrm[tuple(sl_src)]
    tv_eps = float((mag - eps).sum())
    return -weight * div, weight * tv_eps


def tv_gradient_descent(f, weight, n_iters=20000, eps=1e-6):
    """Slow reference minimizer of 0.5||u-f||^2 + weight*TV(u).

    Gradient descent with momentum and backtracking on the eps-smoothed
    energy; keeps the best unsmoothed objective seen. Independent of the
    dual-projection solver under test.
    """
    f = np.asarray(f, dtype=np.float64)
    u = f.copy()
    v = u.copy()  # momentum point
    t = 1.0
    step = 1.0
    best_u = u.copy()
    best_obj = tv_objective(u, f, weight)

    def energy_eps(z):
        g, tv_val = _smoothed_tv_grad(z, weight, eps)
        return 0.5 * float(((z - f) ** 2).sum()) + tv_val, (z - f) + g

    e_v, g_v = energy_eps(v)
    for _ in range(n_iters):
        # backtracking line search from the momentum point
        while True:
            u_next = v - step * g_v
            e_next = 0.5 * float(((u_next - f) ** 2).sum()) \
                + _smoothed_tv_grad(u_next, weight, eps)[1]
            quad = e_v - step * float((g_v * g_v).sum()) \
                + 0.5 * step * float((g_v * g_v).sum())
            if e_next <= quad + 1e-12 * abs(quad) or step < 1e-12:
                break
            step *= 0.5
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        v = u_next + ((t - 1.0) / t_next) * (u_next - u)
        u, t = u_next, t_next
        e_v, g_v = energy_eps(v)
        obj = tv_objective(u, f, weight)
        if obj < best_obj:
            best_obj = obj
            best_u = u.copy()
        step *= 1.1  # allow the step to grow back
    return best_u, best_obj


def sphere_mean_quadrature(fn, tol=1e-10):
    """Mean over the unit sphere of fn(cos_theta) for an axisymmetric signal.

    By symmetry the spherical average reduces to the integral of fn(t) over
    t = |cos(angle to the axis)| in [0, 1].
    """
    val, _ = quad(fn, 0.0, 1.0, epsabs=tol, epsrel=tol, limit=200)
    return val


def stick_mean_quadrature(b, lambda_par):
    return sphere_mean_quadrature(lambda t: np.exp(-b * lambda_par * t * t))


def zeppelin_mean_quadrature(b, lambda_par, lambda_perp):
    return sphere_mean_quadrature(
        lambda t: np.exp(-b * (lambda_perp + (lambda_par - lambda_perp) * t * t))
    )


def lcurve_curvature(log_rho, log_eta, d_frac=0.12):
    """Signed Menger curvature along the discrete L-curve.

    Curvature at point i uses the triangle with the nearest points at least
    d_frac of the total arc length away on each side, so the value measures
    the corner at a fixed physical scale regardless of how densely the
    curve is sampled. Near the curve ends the stencil arm clamps to the
    endpoint; an arm shorter than half a stencil is rejected. Positive
    values mark the L-corner side (the curve turning from falling seminorm
    to growing residual as the regularization grows). Points without a
    stencil get -inf.
    """
    x = np.asarray(log_rho, dtype=np.float64)
    y = np.asarray(log_eta, dtype=np.float64)
    n = x.size
    arc = np.zeros(n)
    for i in range(1, n):
        arc[i] = arc[i - 1] + np.hypot(x[i] - x[i - 1], y[i] - y[i - 1])
    d_min = d_frac * arc[-1]
    kappa = np.full(n, -np.inf)
    for i in range(1, n - 1):
        j = i
        while j > 0 and arc[i] - arc[j] < d_min:
            j -= 1
        k = i
        while k < n - 1 and arc[k] - arc[i] < d_min:
            k += 1
        if arc[i] - arc[j] < 0.5 * d_min or arc[k] - arc[i] < 0.5 * d_min:
            continue
        ax, ay = x[i] - x[j], y[i] - y[j]
        bx, by = x[k] - x[i], y[k] - y[i]
        cx, cy = x[k] - x[j], y[k] - y[j]
        la = np.hypot(ax, ay)
        lb = np.hypot(bx, by)
        lc = np.hypot(cx, cy)
        if min(la, lb, lc) < 1e-30:
            continue
        cross = ax * by - ay * bx
        kappa[i] = 2.0 * cross / (la * lb * lc)
    return kappa


def cart_best_stump(X, y, w, n_classes, min_leaf=1):
    """Exhaustive weighted-Gini stump search over every (feature, midpoint).

    Returns (best_decrease, feature, threshold) with the unnormalized
    decrease sum(m_l^2)/W_l + sum(m_r^2)/W_r - sum(m^2)/W; (0, None, None)
    when no candidate improves on the parent.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    w = np.asarray(w, dtype=np.float64)
    total = np.bincount(y, weights=w, minlength=n_classes)
    big_w = total.sum()
    base = (total ** 2).sum() / big_w
    best = (0.0, None, None)
    for f in range(X.shape[1]):
        values = np.unique(X[:, f])
        for lo, hi in zip(values[:-1], values[1:]):
            thr = 0.5 * (lo + hi)
            left = X[:, f] <= thr
            if left.sum() < min_leaf or (~left).sum() < min_leaf:
                continue
            w_left = w[left].sum()
            w_right = big_w - w_left
            if w_left <= 0.0 or w_right <= 0.0:
                continue
            m_left = np.bincount(y[left], weights=w[left], minlength=n_classes)
            m_right = total - m_left
            dec = ((m_left ** 2).sum() / w_left
                   + (m_right ** 2).sum() / w_right - base)
            if dec > best[0]:
                best = (dec, f, thr)
    return best
