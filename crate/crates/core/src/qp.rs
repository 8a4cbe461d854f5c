//! Convex quadratic programs with optimal-control stage structure, solved
//! by a primal-dual interior point method whose Newton systems are
//! factorized stage-wise with a Riccati recursion. Cost per iteration is
//! linear in the horizon length.
//!
//! Problem form, with `x_0` fixed:
//!
//! ```text
//! min  Σ_{k=0}^{N-1} (½ u_kᵀ R_k u_k + r_kᵀ u_k)
//!    + Σ_{k=1}^{N}   (½ x_kᵀ Q_k x_k + q_kᵀ x_k)
//!    + Σ_{k=1}^{N-1} x_kᵀ S_k u_k
//! s.t. x_{k+1} = A_k x_k + B_k u_k + g_k          k = 0..N-1
//!      Cx_k x_k + Cu_k u_k ≤ e_k                  per-stage rows
//! ```

use crate::error::Result;
use crate::linalg::{max_abs, Cholesky, Mat};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct QpStage<T> {
    /// Dynamics to the next state: `x_{k+1} = a x_k + b u_k + g`.
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub g: Vec<T>,
    /// Input cost `½ uᵀ R u + r_linᵀ u`.
    pub r: Mat<T>,
    pub r_lin: Vec<T>,
    /// State cost on `x_k` (ignored at stage 0, where the state is fixed).
    pub q: Mat<T>,
    pub q_lin: Vec<T>,
    /// Cross cost `x_kᵀ S u_k` (ignored at stage 0).
    pub s: Mat<T>,
    /// Inequality rows `cx x_k + cu u_k ≤ rhs`.
    pub cx: Mat<T>,
    pub cu: Mat<T>,
    pub rhs: Vec<T>,
}

impl<T: Real> QpStage<T> {
    pub fn new(nx: usize, nu: usize) -> Self {
        QpStage {
            a: Mat::zeros(nx, nx),
            b: Mat::zeros(nx, nu),
            g: vec![T::zero(); nx],
            r: Mat::zeros(nu, nu),
            r_lin: vec![T::zero(); nu],
            q: Mat::zeros(nx, nx),
            q_lin: vec![T::zero(); nx],
            s: Mat::zeros(nx, nu),
            cx: Mat::zeros(0, nx),
            cu: Mat::zeros(0, nu),
            rhs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpTerminal<T> {
    pub q: Mat<T>,
    pub q_lin: Vec<T>,
    pub cx: Mat<T>,
    pub rhs: Vec<T>,
}

impl<T: Real> QpTerminal<T> {
    pub fn new(nx: usize) -> Self {
        QpTerminal {
            q: Mat::zeros(nx, nx),
            q_lin: vec![T::zero(); nx],
            cx: Mat::zeros(0, nx),
            rhs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem<T> {
    pub nx: usize,
    pub nu: usize,
    pub x0: Vec<T>,
    pub stages: Vec<QpStage<T>>,
    pub terminal: QpTerminal<T>,
}

impl<T: Real> QpProblem<T> {
    pub fn new(nx: usize, nu: usize, horizon: usize, x0: Vec<T>) -> Self {
        assert!(horizon >= 1);
        assert_eq!(x0.len(), nx);
        QpProblem {
            nx,
            nu,
            x0,
            stages: (0..horizon).map(|_| QpStage::new(nx, nu)).collect(),
            terminal: QpTerminal::new(nx),
        }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// Objective value of a candidate trajectory (constants from the fixed
    /// initial state are excluded, matching the decision-variable form).
    pub fn objective(&self, xs: &[Vec<T>], us: &[Vec<T>]) -> T {
        let n = self.horizon();
        let half = T::lit(0.5);
        let mut acc = T::zero();
        let mut tmp_u = vec![T::zero(); self.nu];
        let mut tmp_x = vec![T::zero(); self.nx];
        for k in 0..n {
            let st = &self.stages[k];
            st.r.mul_vec(&us[k], &mut tmp_u);
            acc += half * crate::linalg::dot(&us[k], &tmp_u) + crate::linalg::dot(&st.r_lin, &us[k]);
            if k >= 1 {
                st.q.mul_vec(&xs[k], &mut tmp_x);
                acc += half * crate::linalg::dot(&xs[k], &tmp_x)
                    + crate::linalg::dot(&st.q_lin, &xs[k]);
                st.s.mul_vec(&us[k], &mut tmp_x);
                acc += crate::linalg::dot(&xs[k], &tmp_x);
            }
        }
        self.terminal.q.mul_vec(&xs[n], &mut tmp_x);
        acc += half * crate::linalg::dot(&xs[n], &tmp_x)
            + crate::linalg::dot(&self.terminal.q_lin, &xs[n]);
        acc
    }

    /// Signed worst margin of the stage inequalities (`lhs − rhs`) over a
    /// candidate trajectory; negative means strictly interior.
    pub fn max_constraint_violation(&self, xs: &[Vec<T>], us: &[Vec<T>]) -> T {
        self.max_constraint_violation_where(xs, us).0
    }

    /// Same with the (stage, row) of the worst margin.
    pub fn max_constraint_violation_where(&self, xs: &[Vec<T>], us: &[Vec<T>]) -> (T, usize, usize) {
        let n = self.horizon();
        let mut where_at = (0usize, 0usize);
        let mut worst = T::neg_infinity();
        for k in 0..n {
            let st = &self.stages[k];
            for row in 0..st.rhs.len() {
                let mut v = -st.rhs[row];
                if k >= 1 {
                    v += crate::linalg::dot(st.cx.row(row), &xs[k]);
                } else {
                    v += crate::linalg::dot(st.cx.row(row), &self.x0);
                }
                v += crate::linalg::dot(st.cu.row(row), &us[k]);
                if v > worst {
                    worst = v;
                    where_at = (k, row);
                }
            }
        }
        let term = &self.terminal;
        for row in 0..term.rhs.len() {
            let v = crate::linalg::dot(term.cx.row(row), &xs[n]) - term.rhs[row];
            if v > worst {
                worst = v;
                where_at = (n, row);
            }
        }
        (worst, where_at.0, where_at.1)
    }

    /// Worst dynamics defect of a candidate trajectory.
    pub fn max_dynamics_defect(&self, xs: &[Vec<T>], us: &[Vec<T>]) -> T {
        let n = self.horizon();
        let mut worst = T::zero();
        let mut pred = vec![T::zero(); self.nx];
        for k in 0..n {
            let st = &self.stages[k];
            let xk: &[T] = if k == 0 { &self.x0 } else { &xs[k] };
            st.a.mul_vec(xk, &mut pred);
            st.b.mul_vec_add(&us[k], &mut pred);
            for i in 0..self.nx {
                worst = worst.max((pred[i] + st.g[i] - xs[k + 1][i]).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T> {
    /// States including the fixed `x_0` at index 0; length N+1.
    pub xs: Vec<Vec<T>>,
    /// Inputs; length N.
    pub us: Vec<Vec<T>>,
    pub status: QpStatus,
    /// Max of scaled stationarity, feasibility and complementarity norms.
    pub kkt_residual: T,
    pub objective: T,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct QpSettings<T> {
    pub tol: T,
    pub max_iter: usize,
    /// Diagonal regularization added to the condensed stage Hessians.
    pub reg: T,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        QpSettings { tol: T::lit(1e-8), max_iter: 60, reg: T::lit(1e-10) }
    }
}

struct Workspace<T> {
    // iterates
    xs: Vec<Vec<T>>, // index 1..=N used; [0] mirrors x0
    us: Vec<Vec<T>>,
    pi: Vec<Vec<T>>,
    lam: Vec<Vec<T>>,   // per stage 0..=N (terminal last)
    slack: Vec<Vec<T>>, // same shape as lam
    // per-iteration factorization
    p_mats: Vec<Mat<T>>, // P_1..P_N at [1..=N]
    f_chols: Vec<Option<Cholesky<T>>>,
    k_gains: Vec<Mat<T>>,
    h_mats: Vec<Mat<T>>,
    // deltas
    dx: Vec<Vec<T>>,
    du: Vec<Vec<T>>,
    dpi: Vec<Vec<T>>,
    dlam: Vec<Vec<T>>,
    dslack: Vec<Vec<T>>,
}

/// Solve the stage-structured QP. `init` optionally seeds the primal
/// iterate with `(xs[1..=N], us[0..N])`.
pub fn solve<T: Real>(
    problem: &QpProblem<T>,
    settings: &QpSettings<T>,
    init: Option<(&[Vec<T>], &[Vec<T>])>,
) -> Result<QpSolution<T>> {
    let n = problem.horizon();
    let nx = problem.nx;
    let nu = problem.nu;

    // fold the fixed x0 into stage 0: dynamics offset and constraint rhs
    let mut g0 = problem.stages[0].g.clone();
    problem.stages[0].a.mul_vec_add(&problem.x0, &mut g0);
    let mut rhs0 = problem.stages[0].rhs.clone();
    for row in 0..rhs0.len() {
        rhs0[row] -= crate::linalg::dot(problem.stages[0].cx.row(row), &problem.x0);
    }

    let stage_g = |k: usize| -> &[T] {
        if k == 0 {
            &g0
        } else {
            &problem.stages[k].g
        }
    };
    let stage_rhs = |k: usize| -> &[T] {
        if k == 0 {
            &rhs0
        } else if k == n {
            &problem.terminal.rhs
        } else {
            &problem.stages[k].rhs
        }
    };
    let stage_cx = |k: usize| -> &Mat<T> {
        if k == n {
            &problem.terminal.cx
        } else {
            &problem.stages[k].cx
        }
    };
    let m_of = |k: usize| stage_rhs(k).len();
    let m_total: usize = (0..=n).map(m_of).sum();

    // residual magnitudes are judged relative to the data scale
    let mut scale = T::one();
    for k in 0..n {
        let st = &problem.stages[k];
        scale = scale
            .max(max_abs(&st.r_lin))
            .max(max_abs(&st.q_lin))
            .max(max_abs(stage_rhs(k)))
            .max(max_abs(stage_g(k)));
    }
    scale = scale.max(max_abs(&problem.terminal.q_lin)).max(max_abs(&problem.terminal.rhs));

    let mut ws = Workspace {
        xs: vec![vec![T::zero(); nx]; n + 1],
        us: vec![vec![T::zero(); nu]; n],
        pi: vec![vec![T::zero(); nx]; n],
        lam: (0..=n).map(|k| vec![T::one(); m_of(k)]).collect(),
        slack: (0..=n).map(|k| vec![T::one(); m_of(k)]).collect(),
        p_mats: vec![Mat::zeros(nx, nx); n + 1],
        f_chols: (0..n).map(|_| None).collect(),
        k_gains: vec![Mat::zeros(nu, nx); n],
        h_mats: vec![Mat::zeros(nx, nu); n],
        dx: vec![vec![T::zero(); nx]; n + 1],
        du: vec![vec![T::zero(); nu]; n],
        dpi: vec![vec![T::zero(); nx]; n],
        dlam: (0..=n).map(|k| vec![T::zero(); m_of(k)]).collect(),
        dslack: (0..=n).map(|k| vec![T::zero(); m_of(k)]).collect(),
    };
    ws.xs[0].copy_from_slice(&problem.x0);

    if let Some((xs_init, us_init)) = init {
        assert_eq!(xs_init.len(), n);
        assert_eq!(us_init.len(), n);
        for k in 0..n {
            if xs_init[k].iter().all(|v| v.is_finite()) {
                ws.xs[k + 1].copy_from_slice(&xs_init[k]);
            }
            if us_init[k].iter().all(|v| v.is_finite()) {
                ws.us[k].copy_from_slice(&us_init[k]);
            }
        }
    }

    // slack/multiplier start: positive, loosely matched to the margins
    for k in 0..=n {
        let cx = stage_cx(k);
        let rhs = stage_rhs(k);
        for row in 0..m_of(k) {
            let mut v = rhs[row];
            if k < n {
                v -= crate::linalg::dot(problem.stages[k].cu.row(row), &ws.us[k]);
            }
            if k >= 1 {
                v -= crate::linalg::dot(cx.row(row), &ws.xs[k]);
            }
            ws.slack[k][row] = v.max(T::one());
            ws.lam[k][row] = T::one();
        }
    }

    let tau = T::lit(0.995);
    let mut tiny_step_strikes = 0usize;
    let mut stall_strikes = 0usize;
    let mut status = QpStatus::MaxIter;
    let mut kkt = T::infinity();
    let mut best_kkt = T::infinity();
    let mut best_xs: Option<Vec<Vec<T>>> = None;
    let mut best_us: Option<Vec<Vec<T>>> = None;
    let mut iterations = 0;

    // residual buffers
    let mut r_eq: Vec<Vec<T>> = vec![vec![T::zero(); nx]; n];
    let mut r_u: Vec<Vec<T>> = vec![vec![T::zero(); nu]; n];
    let mut r_x: Vec<Vec<T>> = vec![vec![T::zero(); nx]; n + 1];
    let mut r_ineq: Vec<Vec<T>> = (0..=n).map(|k| vec![T::zero(); m_of(k)]).collect();

    for iter in 0..settings.max_iter {
        iterations = iter + 1;

        // ---- residuals at the current iterate ----
        for k in 0..n {
            let st = &problem.stages[k];
            let xk: &[T] = if k == 0 { &ws.xs[0] } else { &ws.xs[k] };
            let buf = &mut r_eq[k];
            if k == 0 {
                buf.copy_from_slice(&g0);
            } else {
                buf.copy_from_slice(&st.g);
                st.a.mul_vec_add(xk, buf);
            }
            st.b.mul_vec_add(&ws.us[k], buf);
            for i in 0..nx {
                buf[i] -= ws.xs[k + 1][i];
            }
        }
        for k in 0..=n {
            let cx = stage_cx(k);
            let rhs = stage_rhs(k);
            let buf = &mut r_ineq[k];
            for row in 0..m_of(k) {
                let mut v = ws.slack[k][row] - rhs[row];
                if k >= 1 {
                    v += crate::linalg::dot(cx.row(row), &ws.xs[k]);
                }
                if k < n {
                    v += crate::linalg::dot(problem.stages[k].cu.row(row), &ws.us[k]);
                }
                buf[row] = v;
            }
        }
        for k in 0..n {
            let st = &problem.stages[k];
            let buf = &mut r_u[k];
            st.r.mul_vec(&ws.us[k], buf);
            for i in 0..nu {
                buf[i] += st.r_lin[i];
            }
            if k >= 1 {
                // Sᵀ x_k
                for i in 0..nu {
                    let mut acc = T::zero();
                    for j in 0..nx {
                        acc += st.s[(j, i)] * ws.xs[k][j];
                    }
                    buf[i] += acc;
                }
            }
            st.b.tr_mul_vec_add(&ws.pi[k], buf);
            st.cu.tr_mul_vec_add(&ws.lam[k], buf);
        }
        for k in 1..=n {
            let buf = &mut r_x[k];
            if k < n {
                let st = &problem.stages[k];
                st.q.mul_vec(&ws.xs[k], buf);
                for i in 0..nx {
                    buf[i] += st.q_lin[i];
                }
                st.s.mul_vec_add(&ws.us[k], buf);
                st.a.tr_mul_vec_add(&ws.pi[k], buf);
                st.cx.tr_mul_vec_add(&ws.lam[k], buf);
            } else {
                problem.terminal.q.mul_vec(&ws.xs[k], buf);
                for i in 0..nx {
                    buf[i] += problem.terminal.q_lin[i];
                }
                problem.terminal.cx.tr_mul_vec_add(&ws.lam[k], buf);
            }
            for i in 0..nx {
                buf[i] -= ws.pi[k - 1][i];
            }
        }

        let stat_norm = r_u.iter().map(|v| max_abs(v)).fold(T::zero(), T::max).max(
            r_x[1..].iter().map(|v| max_abs(v)).fold(T::zero(), T::max),
        );
        let eq_norm = r_eq.iter().map(|v| max_abs(v)).fold(T::zero(), T::max);
        // primal inequality violation independent of the slack variables
        let mut ineq_viol = T::zero();
        for k in 0..=n {
            for row in 0..m_of(k) {
                let v = r_ineq[k][row] - ws.slack[k][row];
                ineq_viol = ineq_viol.max(v);
            }
        }
        let mu = if m_total == 0 {
            T::zero()
        } else {
            let mut acc = T::zero();
            for k in 0..=n {
                acc += crate::linalg::dot(&ws.lam[k], &ws.slack[k]);
            }
            acc / T::from_usize(m_total).unwrap()
        };

        kkt = (stat_norm / scale).max(eq_norm).max(ineq_viol).max(mu / scale);
        log::trace!(
            "qp iter {iter}: stat {:.2e} eq {:.2e} ineq {:.2e} mu {:.2e} lam_max {:.2e}",
            (stat_norm / scale).to_f64_lossy(),
            eq_norm.to_f64_lossy(),
            ineq_viol.to_f64_lossy(),
            mu.to_f64_lossy(),
            ws.lam.iter().map(|v| max_abs(v)).fold(T::zero(), T::max).to_f64_lossy()
        );
        if kkt < best_kkt {
            best_kkt = kkt;
            best_xs = Some(ws.xs.clone());
            best_us = Some(ws.us.clone());
            stall_strikes = 0;
        } else {
            stall_strikes += 1;
        }
        if kkt <= settings.tol {
            status = QpStatus::Optimal;
            break;
        }
        // infeasibility signature: the primal violation stagnates well away
        // from zero while the multipliers explode
        let viol_large = ineq_viol > T::lit(1e-4) * scale;
        let lam_max = ws.lam.iter().map(|v| max_abs(v)).fold(T::zero(), T::max);

        // diverging or stalled: return the best iterate seen
        if stall_strikes >= 6 {
            status = if viol_large && lam_max > T::lit(1e6) {
                QpStatus::Infeasible
            } else {
                QpStatus::MaxIter
            };
            break;
        }
        if lam_max > T::lit(1e10) && viol_large {
            status = QpStatus::Infeasible;
            break;
        }

        // ---- factorize with the current barrier weights ----
        let mut w_diag: Vec<Vec<T>> = (0..=n)
            .map(|k| {
                (0..m_of(k))
                    .map(|row| ws.lam[k][row] / ws.slack[k][row].max(T::lit(1e-300)))
                    .collect()
            })
            .collect();
        // clamp to keep the Riccati blocks finite
        for wk in w_diag.iter_mut() {
            for w in wk.iter_mut() {
                *w = (*w).min(T::lit(1e12));
            }
        }

        let factorize_ok = factorize(problem, settings, &w_diag, &g0, &mut ws, n);
        if factorize_ok.is_err() {
            status = QpStatus::MaxIter;
            break;
        }

        // ---- affine (predictor) direction ----
        let mut r_c: Vec<Vec<T>> = (0..=n)
            .map(|k| {
                (0..m_of(k)).map(|row| ws.lam[k][row] * ws.slack[k][row]).collect()
            })
            .collect();
        solve_newton(problem, &w_diag, &r_c, &r_eq, &r_u, &r_x, &r_ineq, &mut ws, n);

        let (mut alpha_p, mut alpha_d) = (T::one(), T::one());
        for k in 0..=n {
            for row in 0..m_of(k) {
                if ws.dslack[k][row] < T::zero() {
                    alpha_p = alpha_p.min(-ws.slack[k][row] / ws.dslack[k][row]);
                }
                if ws.dlam[k][row] < T::zero() {
                    alpha_d = alpha_d.min(-ws.lam[k][row] / ws.dlam[k][row]);
                }
            }
        }
        alpha_p = alpha_p.min(T::one());
        alpha_d = alpha_d.min(T::one());

        let sigma = if m_total == 0 {
            T::zero()
        } else {
            let mut acc = T::zero();
            for k in 0..=n {
                for row in 0..m_of(k) {
                    acc += (ws.lam[k][row] + alpha_d * ws.dlam[k][row])
                        * (ws.slack[k][row] + alpha_p * ws.dslack[k][row]);
                }
            }
            let mu_aff = acc / T::from_usize(m_total).unwrap();
            let ratio = (mu_aff / mu.max(T::lit(1e-300))).max(T::zero()).min(T::one());
            ratio * ratio * ratio
        };

        // ---- corrector with centering, reusing the factorization ----
        if m_total > 0 {
            let target = sigma * mu;
            for k in 0..=n {
                for row in 0..m_of(k) {
                    r_c[k][row] = ws.lam[k][row] * ws.slack[k][row]
                        + ws.dlam[k][row] * ws.dslack[k][row]
                        - target;
                }
            }
            solve_newton(problem, &w_diag, &r_c, &r_eq, &r_u, &r_x, &r_ineq, &mut ws, n);
        }

        let mut alpha = T::one();
        for k in 0..=n {
            for row in 0..m_of(k) {
                if ws.dslack[k][row] < T::zero() {
                    alpha = alpha.min(-tau * ws.slack[k][row] / ws.dslack[k][row]);
                }
                if ws.dlam[k][row] < T::zero() {
                    alpha = alpha.min(-tau * ws.lam[k][row] / ws.dlam[k][row]);
                }
            }
        }
        alpha = alpha.min(T::one());

        // backtrack when a step would blow complementarity back up
        if m_total > 0 {
            for _ in 0..6 {
                let mut acc = T::zero();
                for k in 0..=n {
                    for row in 0..m_of(k) {
                        acc += (ws.lam[k][row] + alpha * ws.dlam[k][row]).max(T::lit(1e-300))
                            * (ws.slack[k][row] + alpha * ws.dslack[k][row]).max(T::lit(1e-300));
                    }
                }
                let mu_new = acc / T::from_usize(m_total).unwrap();
                if mu_new <= (T::lit(10.0) * mu).max(settings.tol) {
                    break;
                }
                alpha *= T::lit(0.5);
            }
        }

        log::trace!("qp iter {iter}: alpha {:.2e} sigma {:.2e}",
            alpha.to_f64_lossy(), sigma.to_f64_lossy());
        if alpha < T::lit(1e-9) {
            tiny_step_strikes += 1;
            if tiny_step_strikes >= 3 {
                status = if viol_large { QpStatus::Infeasible } else { QpStatus::MaxIter };
                break;
            }
        } else {
            tiny_step_strikes = 0;
        }

        for k in 0..n {
            crate::linalg::axpy(alpha, &ws.du[k], &mut ws.us[k]);
            crate::linalg::axpy(alpha, &ws.dx[k + 1], &mut ws.xs[k + 1]);
            crate::linalg::axpy(alpha, &ws.dpi[k], &mut ws.pi[k]);
        }
        for k in 0..=n {
            crate::linalg::axpy(alpha, &ws.dslack[k], &mut ws.slack[k]);
            crate::linalg::axpy(alpha, &ws.dlam[k], &mut ws.lam[k]);
            for row in 0..m_of(k) {
                ws.slack[k][row] = ws.slack[k][row].max(T::lit(1e-300));
                ws.lam[k][row] = ws.lam[k][row].max(T::lit(1e-300));
            }
        }

        if !ws.xs.iter().chain(ws.us.iter()).all(|v| v.iter().all(|x| x.is_finite())) {
            status = QpStatus::MaxIter;
            break;
        }
    }

    // return the best iterate seen, not the last one
    if best_kkt < kkt {
        if let (Some(xs), Some(us)) = (best_xs, best_us) {
            ws.xs = xs;
            ws.us = us;
            kkt = best_kkt;
        }
    }
    let finite = ws.xs.iter().chain(ws.us.iter()).all(|v| v.iter().all(|x| x.is_finite()));
    if !finite {
        log::debug!("qp returned non-finite iterate: status {status:?}, iters {iterations}, kkt {}", kkt.to_f64_lossy());
    }
    let objective = problem.objective(&ws.xs, &ws.us);
    Ok(QpSolution {
        xs: ws.xs,
        us: ws.us,
        status,
        kkt_residual: kkt,
        objective,
        iterations,
    })
}

/// Backward Riccati factorization with the barrier-augmented stage blocks.
fn factorize<T: Real>(
    problem: &QpProblem<T>,
    settings: &QpSettings<T>,
    w_diag: &[Vec<T>],
    _g0: &[T],
    ws: &mut Workspace<T>,
    n: usize,
) -> Result<()> {
    let nx = problem.nx;
    let nu = problem.nu;

    // terminal
    let mut p = problem.terminal.q.clone();
    p.add_weighted_gram(&problem.terminal.cx, &w_diag[n]);
    for i in 0..nx {
        p[(i, i)] += settings.reg;
    }
    p.symmetrize();
    ws.p_mats[n] = p;

    for k in (0..n).rev() {
        let st = &problem.stages[k];
        let pk1 = ws.p_mats[k + 1].clone();

        // R̂ = R + Cuᵀ W Cu (+reg)
        let mut r_hat = st.r.clone();
        r_hat.add_weighted_gram(&st.cu, &w_diag[k]);
        for i in 0..nu {
            r_hat[(i, i)] += settings.reg;
        }

        // F = R̂ + Bᵀ P⁺ B
        let pb = pk1.mul(&st.b);
        let mut f = st.b.tr_mul(&pb);
        f.add_scaled(&r_hat, T::one());
        f.symmetrize();
        let chol = Cholesky::new_regularized(&f, settings.reg.max(T::lit(1e-12)))?;

        if k == 0 {
            ws.f_chols[0] = Some(chol);
            // no state at stage 0
            continue;
        }

        // Ŝ = S + Cxᵀ W Cu;  H = Ŝ + Aᵀ P⁺ B
        let mut h = st.s.clone();
        h.add_weighted_cross(&st.cx, &st.cu, &w_diag[k]);
        let atpb = st.a.tr_mul(&pb);
        h.add_scaled(&atpb, T::one());

        // K = -F⁻¹ Hᵀ
        let mut k_gain = h.transpose();
        chol.solve_mat_in_place(&mut k_gain);
        for i in 0..k_gain.rows() {
            for j in 0..k_gain.cols() {
                let v = -k_gain[(i, j)];
                k_gain[(i, j)] = v;
            }
        }

        // P = Q̂ + Aᵀ P⁺ A + H K
        let mut q_hat = st.q.clone();
        q_hat.add_weighted_gram(&st.cx, &w_diag[k]);
        for i in 0..nx {
            q_hat[(i, i)] += settings.reg;
        }
        let pa = pk1.mul(&st.a);
        let mut p = st.a.tr_mul(&pa);
        p.add_scaled(&q_hat, T::one());
        let hk = h.mul(&k_gain);
        p.add_scaled(&hk, T::one());
        p.symmetrize();

        ws.p_mats[k] = p;
        ws.h_mats[k] = h;
        ws.k_gains[k] = k_gain;
        ws.f_chols[k] = Some(chol);
    }
    Ok(())
}

/// Vector backward/forward pass for one Newton right-hand side, reusing the
/// factorization in the workspace. Writes dx/du/dpi/dlam/dslack.
#[allow(clippy::too_many_arguments)]
fn solve_newton<T: Real>(
    problem: &QpProblem<T>,
    w_diag: &[Vec<T>],
    r_c: &[Vec<T>],
    r_eq: &[Vec<T>],
    r_u: &[Vec<T>],
    r_x: &[Vec<T>],
    r_ineq: &[Vec<T>],
    ws: &mut Workspace<T>,
    n: usize,
) {
    let nx = problem.nx;
    let nu = problem.nu;

    // w_vec_k = (λ ∘ r_ineq − r_c)/s, folded into the stage gradients
    let w_vec: Vec<Vec<T>> = (0..=n)
        .map(|k| {
            (0..r_c[k].len())
                .map(|row| {
                    (ws.lam[k][row] * r_ineq[k][row] - r_c[k][row])
                        / ws.slack[k][row].max(T::lit(1e-300))
                })
                .collect()
        })
        .collect();

    // augmented gradients r̂
    let mut ru_hat: Vec<Vec<T>> = (0..n).map(|k| r_u[k].clone()).collect();
    for k in 0..n {
        problem.stages[k].cu.tr_mul_vec_add(&w_vec[k], &mut ru_hat[k]);
    }
    let mut rx_hat: Vec<Vec<T>> = (0..=n).map(|k| r_x[k].clone()).collect();
    for k in 1..n {
        problem.stages[k].cx.tr_mul_vec_add(&w_vec[k], &mut rx_hat[k]);
    }
    problem.terminal.cx.tr_mul_vec_add(&w_vec[n], &mut rx_hat[n]);

    // backward vector pass: p_k and feedforward terms
    let mut p_vecs: Vec<Vec<T>> = vec![vec![T::zero(); nx]; n + 1];
    let mut kff: Vec<Vec<T>> = vec![vec![T::zero(); nu]; n];
    p_vecs[n].copy_from_slice(&rx_hat[n]);
    let mut tmp_x = vec![T::zero(); nx];
    for k in (0..n).rev() {
        let st = &problem.stages[k];
        // β = r̂_u + Bᵀ (P⁺ c + p⁺), c = r_eq
        ws.p_mats[k + 1].mul_vec(&r_eq[k], &mut tmp_x);
        for i in 0..nx {
            tmp_x[i] += p_vecs[k + 1][i];
        }
        let mut beta = ru_hat[k].clone();
        st.b.tr_mul_vec_add(&tmp_x, &mut beta);
        let chol = ws.f_chols[k].as_ref().expect("factorized");
        let mut kf = beta;
        chol.solve_in_place(&mut kf);
        for v in kf.iter_mut() {
            *v = -*v;
        }

        if k >= 1 {
            // p_k = r̂_x + Aᵀ(P⁺c + p⁺) + H kff
            let mut pk = rx_hat[k].clone();
            st.a.tr_mul_vec_add(&tmp_x, &mut pk);
            ws.h_mats[k].mul_vec_add(&kf, &mut pk);
            p_vecs[k] = pk;
        }
        kff[k] = kf;
    }

    // forward pass
    for v in ws.dx[0].iter_mut() {
        *v = T::zero();
    }
    for k in 0..n {
        let st = &problem.stages[k];
        if k == 0 {
            ws.du[0].copy_from_slice(&kff[0]);
        } else {
            let (dus, dxs) = (&mut ws.du, &ws.dx);
            let du = &mut dus[k];
            du.copy_from_slice(&kff[k]);
            ws.k_gains[k].mul_vec_add(&dxs[k], du);
        }
        // dx_{k+1} = A dx_k + B du_k + c
        let mut nxt = r_eq[k].to_vec();
        if k >= 1 {
            st.a.mul_vec_add(&ws.dx[k], &mut nxt);
        }
        st.b.mul_vec_add(&ws.du[k], &mut nxt);
        ws.dx[k + 1] = nxt;
    }

    // costates: dπ_{k-1} = P_k dx_k + p_k
    for k in 1..=n {
        let mut dpi = p_vecs[k].clone();
        ws.p_mats[k].mul_vec_add(&ws.dx[k], &mut dpi);
        ws.dpi[k - 1] = dpi;
    }

    // slack and multiplier deltas
    for k in 0..=n {
        let m = r_c[k].len();
        for row in 0..m {
            let mut cz = T::zero();
            if k >= 1 {
                if k == n {
                    cz += crate::linalg::dot(problem.terminal.cx.row(row), &ws.dx[k]);
                } else {
                    cz += crate::linalg::dot(problem.stages[k].cx.row(row), &ws.dx[k]);
                }
            }
            if k < n {
                cz += crate::linalg::dot(problem.stages[k].cu.row(row), &ws.du[k]);
            }
            let ds = -r_ineq[k][row] - cz;
            ws.dslack[k][row] = ds;
            ws.dlam[k][row] = w_diag[k][row] * cz + w_vec[k][row];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (u-3)^2 s.t. u <= 1 -> active bound u = 1.
    #[test]
    fn box_bound_toy() {
        let mut p = QpProblem::<f64>::new(1, 1, 1, vec![0.0]);
        p.stages[0].b = Mat::from_rows(&[&[1.0]]);
        p.stages[0].r = Mat::from_rows(&[&[2.0]]);
        p.stages[0].r_lin = vec![-6.0];
        p.stages[0].cu = Mat::from_rows(&[&[1.0]]);
        p.stages[0].cx = Mat::zeros(1, 1);
        p.stages[0].rhs = vec![1.0];
        let sol = solve(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.us[0][0] - 1.0).abs() < 1e-7, "u = {}", sol.us[0][0]);
    }

    /// Unconstrained horizon-1 problem matches the closed form.
    #[test]
    fn unconstrained_matches_closed_form() {
        // min ½ uᵀRu + rᵀu + ½ x1ᵀQx1 + qᵀx1, x1 = Bu + g
        // substitute: H = R + BᵀQB, f = r + Bᵀ(Qg + q), u* = -H⁻¹ f
        let mut p = QpProblem::<f64>::new(2, 2, 1, vec![0.5, -0.5]);
        p.stages[0].a = Mat::from_rows(&[&[0.9, 0.1], &[0.0, 0.8]]);
        p.stages[0].b = Mat::from_rows(&[&[1.0, 0.2], &[-0.1, 1.0]]);
        p.stages[0].g = vec![0.05, -0.02];
        p.stages[0].r = Mat::from_rows(&[&[2.0, 0.1], &[0.1, 1.5]]);
        p.stages[0].r_lin = vec![0.3, -0.4];
        p.terminal.q = Mat::from_rows(&[&[3.0, 0.2], &[0.2, 2.0]]);
        p.terminal.q_lin = vec![-1.0, 0.5];

        let sol = solve(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);

        // closed form (x0 folded into g)
        let b = &p.stages[0].b;
        let q = &p.terminal.q;
        let mut g_eff = p.stages[0].g.clone();
        p.stages[0].a.mul_vec_add(&p.x0, &mut g_eff);
        let qb = q.mul(b);
        let mut h = b.tr_mul(&qb);
        h.add_scaled(&p.stages[0].r, 1.0);
        let mut qg = vec![0.0; 2];
        q.mul_vec(&g_eff, &mut qg);
        for i in 0..2 {
            qg[i] += p.terminal.q_lin[i];
        }
        let mut f = p.stages[0].r_lin.clone();
        b.tr_mul_vec_add(&qg, &mut f);
        let chol = Cholesky::new(&h).unwrap();
        let mut u_star = f.clone();
        chol.solve_in_place(&mut u_star);
        for v in u_star.iter_mut() {
            *v = -*v;
        }
        for i in 0..2 {
            assert!(
                (sol.us[0][i] - u_star[i]).abs() < 1e-7,
                "u[{i}] = {} vs {}",
                sol.us[0][i],
                u_star[i]
            );
        }
    }

    /// Multi-stage equality-only problem: dynamics defect must vanish and
    /// one Newton step suffices (no inequalities).
    #[test]
    fn equality_constrained_exact() {
        let mut p = QpProblem::<f64>::new(2, 1, 3, vec![1.0, 0.0]);
        for k in 0..3 {
            p.stages[k].a = Mat::from_rows(&[&[1.0, 0.1], &[0.0, 1.0]]);
            p.stages[k].b = Mat::from_rows(&[&[0.0], &[0.1]]);
            p.stages[k].r = Mat::from_rows(&[&[0.5]]);
            if k >= 1 {
                p.stages[k].q = Mat::from_rows(&[&[1.0, 0.0], &[0.0, 0.5]]);
            }
        }
        p.terminal.q = Mat::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let sol = solve(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.iterations <= 2, "iterations = {}", sol.iterations);
        assert!(p.max_dynamics_defect(&sol.xs, &sol.us) < 1e-10);
    }

    #[test]
    fn detects_infeasible_rows() {
        // u <= -1 and -u <= -2 (u >= 2) cannot both hold
        let mut p = QpProblem::<f64>::new(1, 1, 1, vec![0.0]);
        p.stages[0].b = Mat::from_rows(&[&[1.0]]);
        p.stages[0].r = Mat::from_rows(&[&[1.0]]);
        p.stages[0].cu = Mat::from_rows(&[&[1.0], &[-1.0]]);
        p.stages[0].cx = Mat::zeros(2, 1);
        p.stages[0].rhs = vec![-1.0, -2.0];
        let sol = solve(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn cross_terms_and_state_constraints() {
        // two-stage problem with an active state bound x1[0] <= 0.2
        let mut p = QpProblem::<f64>::new(1, 1, 2, vec![0.0]);
        for k in 0..2 {
            p.stages[k].a = Mat::from_rows(&[&[1.0]]);
            p.stages[k].b = Mat::from_rows(&[&[1.0]]);
            p.stages[k].r = Mat::from_rows(&[&[1.0]]);
        }
        // reward large x1 so the bound becomes active
        p.stages[1].q = Mat::from_rows(&[&[0.1]]);
        p.stages[1].q_lin = vec![-5.0];
        p.stages[1].cx = Mat::from_rows(&[&[1.0]]);
        p.stages[1].cu = Mat::zeros(1, 1);
        p.stages[1].rhs = vec![0.2];
        p.terminal.q = Mat::from_rows(&[&[1.0]]);
        let sol = solve(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.xs[1][0] - 0.2).abs() < 1e-6, "x1 = {}", sol.xs[1][0]);
        assert!(p.max_constraint_violation(&sol.xs, &sol.us) < 1e-8);
    }

    #[test]
    fn determinism() {
        let mut p = QpProblem::<f64>::new(1, 1, 2, vec![0.3]);
        for k in 0..2 {
            p.stages[k].a = Mat::from_rows(&[&[0.9]]);
            p.stages[k].b = Mat::from_rows(&[&[0.5]]);
            p.stages[k].r = Mat::from_rows(&[&[1.0]]);
            p.stages[k].cu = Mat::from_rows(&[&[1.0]]);
            p.stages[k].cx = Mat::zeros(1, 1);
            p.stages[k].rhs = vec![0.4];
        }
        p.terminal.q = Mat::from_rows(&[&[4.0]]);
        p.terminal.q_lin = vec![-2.0];
        let a = solve(&p, &QpSettings::default(), None).unwrap();
        let b = solve(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(a.us, b.us);
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.objective, b.objective);
    }
}
