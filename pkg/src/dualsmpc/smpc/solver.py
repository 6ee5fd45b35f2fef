"""Built-in SQP solver for the scenario-tree NLP.

Each outer iteration builds a Gauss-Newton quadratic model of the
least-squares objective, linearizes the human-action equality ties and the
slack-relaxed failure inequalities, and solves the resulting convex QP
with a dense primal-dual interior-point method. Steps are accepted by a
backtracking line search on an l1 merit function (so merit values of
accepted iterates never increase); Levenberg-style identity damping scales
up on rejected steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve, solve_triangular


class SolverNumericsError(RuntimeError):
    """NaN or Inf in problem functions; message names the offending rows."""


class QpError(RuntimeError):
    """Interior-point subproblem failed to converge."""


@dataclass(frozen=True)
class SolverReport:
    converged: bool
    iterations: int
    merit: float
    max_violation: float
    wall_time: float
    kkt_residual: float
    message: str = ""
    merit_history: tuple = ()


def _max_step(v, dv, cap: float = 1.0):
    neg = dv < 0
    if not np.any(neg):
        return cap
    return min(cap, float(np.min(-v[neg] / dv[neg])))


def solve_qp(B, g, A=None, a=None, G=None, h=None, tol: float = 1e-10,
             max_iter: int = 60):
    """min 1/2 d'Bd + g'd  s.t.  A d = a,  G d <= h  (B positive definite).

    Infeasible-start Mehrotra predictor-corrector on the reduced KKT system;
    returns (d, y, lam) with equality and inequality multipliers.
    """
    n = g.shape[0]
    p = 0 if A is None else A.shape[0]
    m = 0 if G is None else G.shape[0]
    if m == 0 and p == 0:
        L = np.linalg.cholesky(B)
        return _chol_solve(L, -g), np.zeros(0), np.zeros(0)
    if m == 0:
        K = np.block([[B, A.T], [A, np.zeros((p, p))]])
        sol = np.linalg.solve(K, np.concatenate([-g, a]))
        return sol[:n], sol[n:], np.zeros(0)

    d = np.zeros(n)
    y = np.zeros(p)
    s = np.maximum(h - G @ d, 1.0)
    lam = np.ones(m)
    g_scale = 1.0 + float(np.abs(g).max())
    best = None
    for _ in range(max_iter):
        r_d = B @ d + g + G.T @ lam + (A.T @ y if p else 0.0)
        r_p = G @ d + s - h
        r_e = (A @ d - a) if p else np.zeros(0)
        mu = s @ lam / m
        err = max(np.max(np.abs(r_d)) / g_scale,
                  np.max(np.abs(r_p), initial=0.0),
                  np.max(np.abs(r_e), initial=0.0), mu / g_scale)
        if best is None or err < best[0]:
            best = (err, d.copy(), y.copy(), lam.copy())
        if err < tol:
            return d, y, lam
        w = lam / s

        M = B + (G.T * w) @ G
        if p:
            # small dual regularization keeps the KKT factorable when the
            # barrier weights are extreme
            K = np.block([[M, A.T], [A, -1e-12 * np.eye(p)]])
        else:
            K = M
        # Ruiz equilibration tames the 1e8-scale tie-penalty curvature
        D = np.ones(K.shape[0])
        Ks = K
        for _ in range(3):
            norms = np.sqrt(np.maximum(np.max(np.abs(Ks), axis=0), 1e-300))
            D = D / norms
            Ks = K * D[:, None] * D[None, :]
        if not np.all(np.isfinite(Ks)):
            break
        try:
            lu = lu_factor(Ks)
        except (ValueError, np.linalg.LinAlgError):
            break

        def kkt_solve(rc):
            rhs_d = -r_d - G.T @ ((rc + lam * r_p) / s)
            rhs = np.concatenate([rhs_d, -r_e]) if p else rhs_d
            sol = D * lu_solve(lu, D * rhs)
            resid = rhs - K @ sol
            if np.all(np.isfinite(resid)):
                sol = sol + D * lu_solve(lu, D * resid)
            dd = sol[:n]
            dy = sol[n:] if p else np.zeros(0)
            ds = -r_p - G @ dd
            dlam = (rc - lam * ds) / s
            return dd, dy, ds, dlam

        # predictor
        dd_a, dy_a, ds_a, dlam_a = kkt_solve(-s * lam)
        if not (np.all(np.isfinite(dd_a)) and np.all(np.isfinite(dlam_a))):
            break
        alpha_p = _max_step(s, ds_a)
        alpha_d = _max_step(lam, dlam_a)
        mu_aff = ((s + alpha_p * ds_a) @ (lam + alpha_d * dlam_a)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dd, dy, ds, dlam = kkt_solve(-s * lam + sigma * mu - ds_a * dlam_a)
        if not (np.all(np.isfinite(dd)) and np.all(np.isfinite(dlam))):
            break
        alpha = 0.99 * min(_max_step(s, ds), _max_step(lam, dlam), 1.0 / 0.99)
        d = d + alpha * dd
        y = y + alpha * dy
        s = np.maximum(s + alpha * ds, 1e-306)
        lam = np.maximum(lam + alpha * dlam, 1e-306)
    if best is not None and best[0] < 1e-6:
        return best[1], best[2], best[3]
    raise QpError("interior-point iteration did not reach tolerance")


def _chol_solve(L, b):
    return solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)


def _check_finite(arr, what: str, labels=None):
    if np.all(np.isfinite(arr)):
        return
    bad = np.where(~np.isfinite(np.atleast_1d(np.asarray(arr)).ravel()))[0]
    names = ""
    if labels is not None and len(bad):
        names = "; ".join(str(labels[i]) for i in bad[:5] if i < len(labels))
        names = f" ({names})"
    raise SolverNumericsError(f"NaN/Inf in {what} at rows {bad[:5].tolist()}{names}")


def solve_sqp(problem, z0: np.ndarray, tol: float = 1e-4, max_iter: int = 100,
              constraint_tol: float = 1e-8, damping: float = 1e-6,
              ls_max_backtracks: int = 30) -> tuple[np.ndarray, SolverReport]:
    """Gauss-Newton SQP with an l1 merit line search.

    ``problem`` provides objective/gradient/residuals/residual_jacobian,
    equalities/equality_jacobian, constraints/constraint_jacobian, and box
    bounds. Returns the best iterate by merit and a report; ``converged``
    is False when the line search stalls or the iteration limit is hit.
    """
    t_start = time.perf_counter()
    lb, ub = problem.bounds()
    z = np.clip(np.asarray(z0, dtype=float), lb, ub)
    nu = 1.0
    lam_damp = damping
    merit_history = []
    n = z.shape[0]
    eye = np.eye(n)
    finite_lo = np.isfinite(lb)
    finite_hi = np.isfinite(ub)

    def infeasibility(e, c):
        terms = [np.abs(e).max(initial=0.0), np.max(c, initial=0.0)]
        return float(max(max(terms), 0.0))

    def merit_value(F, e, c):
        return F + nu * (np.sum(np.abs(e)) + np.sum(np.maximum(c, 0.0)))

    F = problem.objective(z)
    e = problem.equalities(z)
    c = problem.constraints(z)
    _check_finite([F], "objective")
    _check_finite(e, "equalities", getattr(problem, "equality_labels", None))
    _check_finite(c, "constraints", getattr(problem, "constraint_labels", None))
    merit_history.append((F, np.sum(np.abs(e)) + np.sum(np.maximum(c, 0.0))))
    best = (merit_value(F, e, c), z.copy(), infeasibility(e, c))
    converged = False
    kkt = np.inf
    message = ""
    iterations = 0

    for it in range(max_iter):
        iterations = it + 1
        g = problem.gradient(z)
        J = problem.residual_jacobian(z)
        _check_finite(g, "gradient")
        _check_finite(J, "residual jacobian", getattr(problem, "residual_labels", None))
        A = problem.equality_jacobian(z)
        Jc = problem.constraint_jacobian(z)
        _check_finite(A, "equality jacobian", getattr(problem, "equality_labels", None))
        _check_finite(Jc, "constraint jacobian",
                      getattr(problem, "constraint_labels", None))
        B = 2.0 * J.T @ J

        rows_G, rows_h = [], []
        if Jc.shape[0]:
            rows_G.append(Jc)
            rows_h.append(-c)
        if np.any(finite_lo):
            rows_G.append(-eye[finite_lo])
            rows_h.append((z - lb)[finite_lo])
        if np.any(finite_hi):
            rows_G.append(eye[finite_hi])
            rows_h.append((ub - z)[finite_hi])
        G = np.concatenate(rows_G, axis=0) if rows_G else None
        h = np.concatenate(rows_h) if rows_h else None
        A_eq = A if A.shape[0] else None
        a_eq = -e if A.shape[0] else None

        step_ok = False
        for _ in range(10):  # damping escalation loop
            try:
                d, y_qp, lam_qp = solve_qp(B + lam_damp * eye, g, A_eq, a_eq, G, h)
            except (QpError, np.linalg.LinAlgError):
                lam_damp *= 100.0
                if lam_damp > 1e12:
                    message = "QP subproblem unsolvable at maximum damping"
                    break
                continue
            mult_max = 0.0
            if y_qp.size:
                mult_max = max(mult_max, float(np.abs(y_qp).max()))
            n_c = Jc.shape[0]
            if n_c and lam_qp.size:
                mult_max = max(mult_max, float(np.max(lam_qp[:n_c], initial=0.0)))
            nu = max(nu, 1.5 * mult_max + 1.0)
            infeas0 = np.sum(np.abs(e)) + np.sum(np.maximum(c, 0.0))
            phi0 = F + nu * infeas0
            dphi = float(g @ d) - nu * infeas0
            step_norm = float(np.max(np.abs(d), initial=0.0))
            kkt = float(np.max(np.abs(B @ d), initial=0.0)) + infeasibility(e, c)
            if step_norm < tol and infeasibility(e, c) < constraint_tol:
                converged = True
                break
            if dphi > -1e-12 * (1.0 + abs(F)):
                # no merit descent left beyond numerical precision: with the
                # constraints satisfied this is a first-order optimum
                converged = infeasibility(e, c) < constraint_tol
                message = "" if converged else "no descent direction while infeasible"
                break
            alpha = 1.0
            accepted = False
            for _ in range(ls_max_backtracks):
                z_try = np.clip(z + alpha * d, lb, ub)
                F_try = problem.objective(z_try)
                e_try = problem.equalities(z_try)
                c_try = problem.constraints(z_try)
                if (np.isfinite(F_try) and np.all(np.isfinite(e_try))
                        and np.all(np.isfinite(c_try))):
                    if merit_value(F_try, e_try, c_try) <= phi0 + 1e-4 * alpha * dphi:
                        accepted = True
                        break
                alpha *= 0.5
            if accepted:
                z, F, e, c = z_try, F_try, e_try, c_try
                m_now = merit_value(F, e, c)
                merit_history.append((F, np.sum(np.abs(e)) + np.sum(np.maximum(c, 0.0))))
                if m_now <= best[0]:
                    best = (m_now, z.copy(), infeasibility(e, c))
                lam_damp = max(damping, lam_damp / 3.0)
                step_ok = True
                break
            lam_damp *= 10.0
            if lam_damp > 1e12:
                message = "line search failed at maximum damping"
                break
        if converged or not step_ok:
            break

    if not converged and not message and iterations >= max_iter:
        message = "iteration limit reached"

    if converged:
        # polish: one undamped full QP step, kept only if merit holds; on
        # convex instances this reaches interior-point residual accuracy
        try:
            z_p = best[1]
            g = problem.gradient(z_p)
            J = problem.residual_jacobian(z_p)
            e_p = problem.equalities(z_p)
            c_p = problem.constraints(z_p)
            A = problem.equality_jacobian(z_p)
            Jc = problem.constraint_jacobian(z_p)
            rows_G, rows_h = [], []
            if Jc.shape[0]:
                rows_G.append(Jc)
                rows_h.append(-c_p)
            if np.any(finite_lo):
                rows_G.append(-eye[finite_lo])
                rows_h.append((z_p - lb)[finite_lo])
            if np.any(finite_hi):
                rows_G.append(eye[finite_hi])
                rows_h.append((ub - z_p)[finite_hi])
            G = np.concatenate(rows_G, axis=0) if rows_G else None
            h = np.concatenate(rows_h) if rows_h else None
            d, _, _ = solve_qp(2.0 * J.T @ J + 1e-12 * eye, g,
                               A if A.shape[0] else None,
                               -e_p if A.shape[0] else None, G, h)
            z_try = np.clip(z_p + d, lb, ub)
            F_try = problem.objective(z_try)
            e_try = problem.equalities(z_try)
            c_try = problem.constraints(z_try)
            if (np.isfinite(F_try)
                    and merit_value(F_try, e_try, c_try) <= best[0] + 1e-10 * (1 + abs(best[0]))
                    and infeasibility(e_try, c_try) <= constraint_tol):
                best = (merit_value(F_try, e_try, c_try), z_try,
                        infeasibility(e_try, c_try))
        except (QpError, np.linalg.LinAlgError, SolverNumericsError):
            pass

    merit_final, z_best, infeas_best = best
    # report the history under the final penalty parameter, a single
    # well-defined merit function
    history = tuple(Fk + nu * Ik for Fk, Ik in merit_history)
    return z_best, SolverReport(
        converged=converged, iterations=iterations, merit=float(merit_final),
        max_violation=float(infeas_best), wall_time=time.perf_counter() - t_start,
        kkt_residual=float(kkt), message=message,
        merit_history=history)
