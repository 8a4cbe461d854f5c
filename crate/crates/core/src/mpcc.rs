//! Receding-horizon contouring control: linearize the vehicle dynamics and
//! track constraints about a warmstart trajectory, assemble a stage QP, and
//! iterate solve/damp until the KKT residual settles (an SQP loop).
//!
//! Modes restrict the lateral search space through signed contouring-error
//! constraints with a penalized nonnegative slack per stage, so a plan is
//! always available even when the restriction starts out violated.

use serde::{Deserialize, Serialize};

use crate::config::KeyValueFile;
use crate::dynamics::{
    self, ControlInput, VehicleParams, VehicleState, IDX_D, IDX_DELTA, IDX_THETA, IDX_VX, NU, NX,
};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::qp::{self, QpProblem, QpSettings, QpStatus};
use crate::scalar::Real;
use crate::track::Track;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    DriveLeft,
    DriveRight,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Normal => "normal",
            Mode::DriveLeft => "drive_left",
            Mode::DriveRight => "drive_right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpccConfig<T> {
    pub n_horizon: usize,
    pub dt: T,
    pub qc: T,
    pub ql: T,
    pub q_theta: T,
    pub r_d: T,
    pub r_delta: T,
    pub r_theta: T,
    pub b_lower: [T; NX],
    pub b_upper: [T; NX],
    pub l_lower: [T; NU],
    pub l_upper: [T; NU],
    pub obstacle_radius: T,
    pub slack_weight: T,
    /// Violation of the mode constraint tolerated when auditing executed
    /// states; the planner itself only pays for slack, it never caps it.
    pub slack_budget: T,
    /// Penalty on the per-stage state-box slack.
    pub box_slack_weight: T,
    pub sqp_iters: usize,
    pub kkt_tol: T,
    /// Track half-width shrink absorbing the halfspace linearization error.
    pub track_margin: T,
    /// RK4 substep cap for integration and linearization.
    pub max_substep: T,
    /// Obstacle rows are generated only within this distance.
    pub obstacle_active_dist: T,
}

impl<T: Real> Default for MpccConfig<T> {
    fn default() -> Self {
        let inf = T::infinity();
        let mut b_lower = [-inf; NX];
        let mut b_upper = [inf; NX];
        b_lower[IDX_VX] = T::lit(1.0);
        b_upper[IDX_VX] = T::lit(21.0);
        b_lower[6] = T::zero(); // drive command in [0, 1]
        b_upper[6] = T::one();
        b_lower[7] = T::lit(-0.38); // steering angle, rad
        b_upper[7] = T::lit(0.38);
        MpccConfig {
            n_horizon: 35,
            dt: T::lit(0.08),
            qc: T::lit(0.8),
            ql: T::lit(4.0),
            q_theta: T::lit(1.5),
            r_d: T::lit(0.4),
            r_delta: T::lit(2.0),
            r_theta: T::lit(1e-4),
            b_lower,
            b_upper,
            l_lower: [T::lit(-1.5), T::lit(-0.6), T::zero()],
            l_upper: [T::lit(1.5), T::lit(0.6), T::lit(30.0)],
            obstacle_radius: T::lit(2.6),
            slack_weight: T::lit(40.0),
            slack_budget: T::lit(0.5),
            box_slack_weight: T::lit(300.0),
            sqp_iters: 3,
            kkt_tol: T::lit(2e-4),
            track_margin: T::lit(0.25),
            max_substep: T::lit(0.02),
            obstacle_active_dist: T::lit(40.0),
        }
    }
}

impl<T: Real> MpccConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_horizon < 2 {
            return Err(Error::input("horizon N must be >= 2"));
        }
        if !(self.dt > T::zero()) {
            return Err(Error::input("dt must be positive"));
        }
        for (name, w) in [
            ("Qc", self.qc),
            ("Ql", self.ql),
            ("Qtheta", self.q_theta),
            ("R_d", self.r_d),
            ("R_delta", self.r_delta),
            ("R_theta", self.r_theta),
            ("slack_weight", self.slack_weight),
            ("box_slack_weight", self.box_slack_weight),
        ] {
            if !(w >= T::zero()) {
                return Err(Error::input(format!("weight {name} must be >= 0")));
            }
        }
        for i in 0..NX {
            if self.b_lower[i] > self.b_upper[i] {
                return Err(Error::input(format!("state bound {i} inverted")));
            }
        }
        for i in 0..NU {
            if self.l_lower[i] > self.l_upper[i] {
                return Err(Error::input(format!("input bound {i} inverted")));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValueFile) -> Result<Self> {
        let defaults = MpccConfig::<T>::default();
        let mut cfg = MpccConfig {
            n_horizon: kv.usize_or("N", defaults.n_horizon)?,
            dt: T::lit(kv.f64_or("dt", defaults.dt.to_f64_lossy())?),
            qc: T::lit(kv.f64_or("Qc", defaults.qc.to_f64_lossy())?),
            ql: T::lit(kv.f64_or("Ql", defaults.ql.to_f64_lossy())?),
            q_theta: T::lit(kv.f64_or("Qtheta", defaults.q_theta.to_f64_lossy())?),
            r_d: T::lit(kv.f64_or("R_d", defaults.r_d.to_f64_lossy())?),
            r_delta: T::lit(kv.f64_or("R_delta", defaults.r_delta.to_f64_lossy())?),
            r_theta: T::lit(kv.f64_or("R_theta", defaults.r_theta.to_f64_lossy())?),
            obstacle_radius: T::lit(
                kv.f64_or("obstacle_radius", defaults.obstacle_radius.to_f64_lossy())?,
            ),
            slack_weight: T::lit(kv.f64_or("slack_weight", defaults.slack_weight.to_f64_lossy())?),
            slack_budget: T::lit(kv.f64_or("slack_budget", defaults.slack_budget.to_f64_lossy())?),
            box_slack_weight: T::lit(
                kv.f64_or("box_slack_weight", defaults.box_slack_weight.to_f64_lossy())?,
            ),
            sqp_iters: kv.usize_or("sqp_iters", defaults.sqp_iters)?,
            kkt_tol: T::lit(kv.f64_or("kkt_tol", defaults.kkt_tol.to_f64_lossy())?),
            track_margin: T::lit(kv.f64_or("track_margin", defaults.track_margin.to_f64_lossy())?),
            max_substep: T::lit(kv.f64_or("max_substep", defaults.max_substep.to_f64_lossy())?),
            obstacle_active_dist: T::lit(
                kv.f64_or("obstacle_active_dist", defaults.obstacle_active_dist.to_f64_lossy())?,
            ),
            b_lower: defaults.b_lower,
            b_upper: defaults.b_upper,
            l_lower: defaults.l_lower,
            l_upper: defaults.l_upper,
        };
        for (key, arr) in [("b_lower", &mut cfg.b_lower), ("b_upper", &mut cfg.b_upper)] {
            if kv.contains(key) {
                let list = kv.f64_list(key)?;
                if list.len() != NX {
                    return Err(Error::input(format!("{key} needs {NX} entries")));
                }
                for (slot, v) in arr.iter_mut().zip(list) {
                    *slot = T::lit(v);
                }
            }
        }
        for (key, arr) in [("l_lower", &mut cfg.l_lower), ("l_upper", &mut cfg.l_upper)] {
            if kv.contains(key) {
                let list = kv.f64_list(key)?;
                if list.len() != NU {
                    return Err(Error::input(format!("{key} needs {NU} entries")));
                }
                for (slot, v) in arr.iter_mut().zip(list) {
                    *slot = T::lit(v);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_kv(&KeyValueFile::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpccSolution<T> {
    pub states: Vec<VehicleState<T>>,
    pub inputs: Vec<ControlInput<T>>,
    pub u_star: ControlInput<T>,
    pub status: SolveStatus,
    /// Max of the QP residual, the linearized-constraint violation of the
    /// returned iterate, and the nonlinear dynamics defect.
    pub kkt_residual: T,
    /// Violation of the last subproblem's inequality rows by the returned
    /// iterate (negative = strictly interior).
    pub linear_violation: T,
    pub objective: T,
    /// Largest mode-constraint slack in the final subproblem solution.
    pub slack_used: T,
    /// Largest state-box slack in the final subproblem solution.
    pub box_slack_used: T,
    pub sqp_iterations: usize,
    /// Per SQP iteration: worst gap between the linearization progress and
    /// the accepted iterate's progress.
    pub theta_gap: Vec<T>,
}

/// Quadratic stage cost at a linearization progress value, in the form
/// `cost(x, u) = ½ xᵀQx + q_linᵀx + ½ uᵀRu + r_linᵀu + constant`.
pub struct StageCost<T> {
    pub q: Mat<T>,
    pub q_lin: Vec<T>,
    pub r: Mat<T>,
    pub r_lin: Vec<T>,
    pub constant: T,
}

impl<T: Real> StageCost<T> {
    pub fn eval(&self, state: &VehicleState<T>, input: &ControlInput<T>) -> T {
        let x = state.to_array();
        let u = input.to_array();
        let half = T::lit(0.5);
        let mut qx = vec![T::zero(); NX];
        self.q.mul_vec(&x, &mut qx);
        let mut ru = vec![T::zero(); NU];
        // r may carry a slack column; only the physical block is evaluated
        for i in 0..NU {
            let mut acc = T::zero();
            for j in 0..NU {
                acc += self.r[(i, j)] * u[j];
            }
            ru[i] = acc;
        }
        half * crate::linalg::dot(&x, &qx)
            + crate::linalg::dot(&self.q_lin, &x)
            + half * crate::linalg::dot(&u, &ru)
            + crate::linalg::dot(&self.r_lin[..NU], &u)
            + self.constant
    }
}

/// Contouring/lag error rows over the 9-component state at `theta_hat`:
/// `eps = row · x + constant`, with the progress variable kept unwrapped.
fn error_rows<T: Real>(
    track: &Track<T>,
    theta_hat: T,
) -> ([T; NX], T, [T; NX], T) {
    let tp = track.lookup(theta_hat);
    let (sin_phi, cos_phi) = tp.phi.sin_cos();
    let mut row_c = [T::zero(); NX];
    row_c[0] = -sin_phi;
    row_c[1] = cos_phi;
    let const_c = sin_phi * tp.x - cos_phi * tp.y;
    let mut row_l = [T::zero(); NX];
    row_l[0] = -cos_phi;
    row_l[1] = -sin_phi;
    row_l[IDX_THETA] = T::one();
    let const_l = cos_phi * tp.x + sin_phi * tp.y - theta_hat;
    (row_c, const_c, row_l, const_l)
}

/// Stage cost assembled at a warmstart progress value.
pub fn stage_cost<T: Real>(track: &Track<T>, theta_hat: T, config: &MpccConfig<T>) -> StageCost<T> {
    let dt = config.dt;
    let (row_c, const_c, row_l, const_l) = error_rows(track, theta_hat);
    let two = T::lit(2.0);

    let mut q = Mat::zeros(NX, NX);
    let mut q_lin = vec![T::zero(); NX];
    for i in 0..NX {
        for j in 0..NX {
            q[(i, j)] = two * dt * (config.qc * row_c[i] * row_c[j] + config.ql * row_l[i] * row_l[j]);
        }
        q_lin[i] = two * dt * (config.qc * const_c * row_c[i] + config.ql * const_l * row_l[i]);
    }
    let constant = dt * (config.qc * const_c * const_c + config.ql * const_l * const_l);

    let mut r = Mat::zeros(NU, NU);
    r[(0, 0)] = two * dt * config.r_d;
    r[(1, 1)] = two * dt * config.r_delta;
    r[(2, 2)] = two * dt * config.r_theta;
    let mut r_lin = vec![T::zero(); NU];
    r_lin[2] = -config.q_theta * dt;

    StageCost { q, q_lin, r, r_lin, constant }
}

/// One assembled SQP subproblem plus the data needed to audit it.
pub struct AssembledProblem<T> {
    pub qp: QpProblem<T>,
    /// QP input dimensions: the physical inputs, one state-box slack, and
    /// one mode slack when a mode is active.
    pub nu_qp: usize,
}

/// QP input slot of the state-box slack.
pub const SLOT_BOX_SLACK: usize = NU;
/// QP input slot of the mode slack (only when a mode is active).
pub const SLOT_MODE_SLACK: usize = NU + 1;

/// Linearize dynamics, costs, and constraints about a guess trajectory.
///
/// State-box rows are written on the predicted next state through the
/// dynamics and share a penalized per-stage slack, so a subproblem can never
/// be infeasible just because the measured state drifted past a bound. Track
/// and obstacle halfspaces stay hard.
#[allow(clippy::too_many_arguments)]
pub fn assemble_problem<T: Real>(
    track: &Track<T>,
    guess_states: &[VehicleState<T>],
    guess_inputs: &[ControlInput<T>],
    mode: Mode,
    obstacle_pred: Option<&[(T, T)]>,
    config: &MpccConfig<T>,
    params: &VehicleParams<T>,
) -> Result<AssembledProblem<T>> {
    let n = config.n_horizon;
    assert_eq!(guess_states.len(), n + 1);
    assert_eq!(guess_inputs.len(), n);
    if let Some(pred) = obstacle_pred {
        assert_eq!(pred.len(), n + 1);
    }

    let mode_active = mode != Mode::Normal;
    let nu_qp = if mode_active { NU + 2 } else { NU + 1 };
    let mut qp = QpProblem::new(NX, nu_qp, n, guess_states[0].to_array().to_vec());

    for k in 0..n {
        let step = dynamics::discretize_linearize(
            &guess_states[k],
            &guess_inputs[k],
            params,
            config.dt,
            config.max_substep,
        )?;

        // widen B with zero columns for the slack inputs
        let mut b = Mat::zeros(NX, nu_qp);
        for i in 0..NX {
            for j in 0..NU {
                b[(i, j)] = step.b[(i, j)];
            }
        }
        let a = step.a;
        let g = step.g;

        // input cost plus the slack penalties (L1 with a small quadratic to
        // keep the stage Hessian positive definite)
        let cost = stage_cost(track, guess_states[k].theta, config);
        let mut r = Mat::zeros(nu_qp, nu_qp);
        for i in 0..NU {
            for j in 0..NU {
                r[(i, j)] = cost.r[(i, j)];
            }
        }
        let mut r_lin = vec![T::zero(); nu_qp];
        r_lin[..NU].copy_from_slice(&cost.r_lin);
        r[(SLOT_BOX_SLACK, SLOT_BOX_SLACK)] = config.box_slack_weight * T::lit(0.1) + T::lit(1e-3);
        r_lin[SLOT_BOX_SLACK] = config.box_slack_weight;
        if mode_active {
            r[(SLOT_MODE_SLACK, SLOT_MODE_SLACK)] =
                config.slack_weight * T::lit(0.1) + T::lit(1e-3);
            r_lin[SLOT_MODE_SLACK] = config.slack_weight;
        }

        let mut rows_cx: Vec<[T; NX]> = Vec::new();
        let mut rows_cu: Vec<Vec<T>> = Vec::new();
        let mut rhs: Vec<T> = Vec::new();
        let zero_u = || vec![T::zero(); nu_qp];

        // input box on the physical inputs
        for j in 0..NU {
            if config.l_upper[j].is_finite() {
                let mut cu = zero_u();
                cu[j] = T::one();
                rows_cx.push([T::zero(); NX]);
                rows_cu.push(cu);
                rhs.push(config.l_upper[j]);
            }
            if config.l_lower[j].is_finite() {
                let mut cu = zero_u();
                cu[j] = -T::one();
                rows_cx.push([T::zero(); NX]);
                rows_cu.push(cu);
                rhs.push(-config.l_lower[j]);
            }
        }
        // slack nonnegativity
        for slot in [Some(SLOT_BOX_SLACK), mode_active.then_some(SLOT_MODE_SLACK)]
            .into_iter()
            .flatten()
        {
            let mut cu = zero_u();
            cu[slot] = -T::one();
            rows_cx.push([T::zero(); NX]);
            rows_cu.push(cu);
            rhs.push(T::zero());
        }

        // substitute x_{k+1} = A x_k + B u_k + g into a row over the next
        // state: returns (cx, cu, offset) for `row · x_{k+1}`
        let through_dynamics = |row: &[T; NX]| -> ([T; NX], Vec<T>, T) {
            let mut cx = [T::zero(); NX];
            for j in 0..NX {
                let mut acc = T::zero();
                for i in 0..NX {
                    acc += row[i] * a[(i, j)];
                }
                cx[j] = acc;
            }
            let mut cu = vec![T::zero(); nu_qp];
            for j in 0..NU {
                let mut acc = T::zero();
                for i in 0..NX {
                    acc += row[i] * b[(i, j)];
                }
                cu[j] = acc;
            }
            let mut off = T::zero();
            for i in 0..NX {
                off += row[i] * g[i];
            }
            (cx, cu, off)
        };

        // state box on the predicted next state. Actuator states (drive
        // command, steering) integrate their rate inputs exactly, so their
        // boxes are hard; the velocity states can overshoot through model
        // error between plans, so those rows get the penalized slack.
        for i in 0..NX {
            let hard = i == IDX_D || i == IDX_DELTA;
            let mut e = [T::zero(); NX];
            e[i] = T::one();
            if config.b_upper[i].is_finite() {
                let (cx, mut cu, off) = through_dynamics(&e);
                if !hard {
                    cu[SLOT_BOX_SLACK] = -T::one();
                }
                rows_cx.push(cx);
                rows_cu.push(cu);
                rhs.push(config.b_upper[i] - off);
            }
            if config.b_lower[i].is_finite() {
                let (cx, cu, off) = through_dynamics(&e);
                let mut ncx = [T::zero(); NX];
                for j in 0..NX {
                    ncx[j] = -cx[j];
                }
                let mut ncu: Vec<T> = cu.iter().map(|v| -*v).collect();
                if !hard {
                    ncu[SLOT_BOX_SLACK] = -T::one();
                }
                rows_cx.push(ncx);
                rows_cu.push(ncu);
                rhs.push(off - config.b_lower[i]);
            }
        }

        // mode restriction on the predicted next state
        if mode_active {
            let (row_c, const_c, _, _) = error_rows(track, guess_states[k + 1].theta);
            let sign = match mode {
                Mode::DriveLeft => -T::one(), // -eps_c - sigma <= const_c
                Mode::DriveRight => T::one(), // +eps_c - sigma <= -const_c
                Mode::Normal => unreachable!(),
            };
            let mut srow = [T::zero(); NX];
            for j in 0..NX {
                srow[j] = sign * row_c[j];
            }
            let (cx, mut cu, off) = through_dynamics(&srow);
            cu[SLOT_MODE_SLACK] = -T::one();
            rows_cx.push(cx);
            rows_cu.push(cu);
            rhs.push(-sign * const_c - off);
        }

        // hard track and obstacle halfspaces on this stage's own state
        if k >= 1 {
            let sref = &guess_states[k];
            push_track_row(track, config, sref, &mut rows_cx, &mut rhs, || zero_u())
                .map(|cu| rows_cu.push(cu));
            if let Some(pred) = obstacle_pred {
                push_obstacle_row(config, sref, pred[k], track, &mut rows_cx, &mut rhs, || {
                    zero_u()
                })
                .map(|cu| rows_cu.push(cu));
            }
        }

        let m = rhs.len();
        let st = &mut qp.stages[k];
        st.a = a;
        st.b = b;
        st.g = g;
        st.r = r;
        st.r_lin = r_lin;
        if k >= 1 {
            st.q = cost.q;
            st.q_lin = cost.q_lin;
        }
        let mut cx_mat = Mat::zeros(m, NX);
        let mut cu_mat = Mat::zeros(m, nu_qp);
        for (row_i, (cx, cu)) in rows_cx.iter().zip(&rows_cu).enumerate() {
            for j in 0..NX {
                cx_mat.row_mut(row_i)[j] = cx[j];
            }
            for j in 0..nu_qp {
                cu_mat.row_mut(row_i)[j] = cu[j];
            }
        }
        st.cx = cx_mat;
        st.cu = cu_mat;
        st.rhs = rhs;
    }

    // terminal stage: contouring cost plus hard track/obstacle rows (the box
    // on the terminal state is covered by the last substituted stage)
    {
        let cost = stage_cost(track, guess_states[n].theta, config);
        qp.terminal.q = cost.q;
        qp.terminal.q_lin = cost.q_lin;

        let mut rows_cx: Vec<[T; NX]> = Vec::new();
        let mut rows_cu: Vec<Vec<T>> = Vec::new();
        let mut rhs: Vec<T> = Vec::new();
        let sref = &guess_states[n];
        push_track_row(track, config, sref, &mut rows_cx, &mut rhs, Vec::new)
            .map(|cu| rows_cu.push(cu));
        if let Some(pred) = obstacle_pred {
            push_obstacle_row(config, sref, pred[n], track, &mut rows_cx, &mut rhs, Vec::new)
                .map(|cu| rows_cu.push(cu));
        }
        let m = rhs.len();
        let mut cx_mat = Mat::zeros(m, NX);
        for (row_i, cx) in rows_cx.iter().enumerate() {
            for j in 0..NX {
                cx_mat.row_mut(row_i)[j] = cx[j];
            }
        }
        qp.terminal.cx = cx_mat;
        qp.terminal.rhs = rhs;
    }

    Ok(AssembledProblem { qp, nu_qp })
}

/// Track disk linearized to a halfspace at the warmstart point; returns the
/// matching (zero) `cu` row when one was added.
fn push_track_row<T: Real, F: Fn() -> Vec<T>>(
    track: &Track<T>,
    config: &MpccConfig<T>,
    sref: &VehicleState<T>,
    rows_cx: &mut Vec<[T; NX]>,
    rhs: &mut Vec<T>,
    zero_u: F,
) -> Option<Vec<T>> {
    let tp = track.lookup(sref.theta);
    let r_eff = (tp.r - config.track_margin).max(T::lit(0.5));
    let dx = sref.x - tp.x;
    let dy = sref.y - tp.y;
    let h_bar = dx * dx + dy * dy - r_eff * r_eff;
    let (sin_phi, cos_phi) = tp.phi.sin_cos();
    let two = T::lit(2.0);
    let gx = two * dx;
    let gy = two * dy;
    let gtheta = -two * (dx * cos_phi + dy * sin_phi);
    if (gx * gx + gy * gy).sqrt() <= T::lit(1e-9) {
        return None;
    }
    let mut cx = [T::zero(); NX];
    cx[0] = gx;
    cx[1] = gy;
    cx[IDX_THETA] = gtheta;
    let dot = gx * sref.x + gy * sref.y + gtheta * sref.theta;
    rows_cx.push(cx);
    rhs.push(dot - h_bar);
    Some(zero_u())
}

/// Obstacle keep-out disk `R² − ‖p − o‖² ≤ 0` linearized at the warmstart.
fn push_obstacle_row<T: Real, F: Fn() -> Vec<T>>(
    config: &MpccConfig<T>,
    sref: &VehicleState<T>,
    obstacle: (T, T),
    track: &Track<T>,
    rows_cx: &mut Vec<[T; NX]>,
    rhs: &mut Vec<T>,
    zero_u: F,
) -> Option<Vec<T>> {
    let (ox, oy) = obstacle;
    let mut dirx = sref.x - ox;
    let mut diry = sref.y - oy;
    let mut dist = (dirx * dirx + diry * diry).sqrt();
    if dist >= config.obstacle_active_dist {
        return None;
    }
    if dist <= T::lit(1e-6) {
        // degenerate overlap: push out along the left normal
        let tp = track.lookup(sref.theta);
        let (sin_phi, cos_phi) = tp.phi.sin_cos();
        dirx = -sin_phi;
        diry = cos_phi;
        dist = T::one();
    }
    let two = T::lit(2.0);
    let mut cx = [T::zero(); NX];
    cx[0] = -two * dirx;
    cx[1] = -two * diry;
    let h_bar = config.obstacle_radius * config.obstacle_radius - dist * dist;
    let dot = cx[0] * sref.x + cx[1] * sref.y;
    rows_cx.push(cx);
    rhs.push(dot - h_bar);
    Some(zero_u())
}

/// Planner with owned warmstart memory; one instance per simulated vehicle.
pub struct Planner<T> {
    config: MpccConfig<T>,
    params: VehicleParams<T>,
    warmstart: Option<(Vec<VehicleState<T>>, Vec<ControlInput<T>>)>,
}

impl<T: Real> Planner<T> {
    pub fn new(config: MpccConfig<T>, params: VehicleParams<T>) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Planner { config, params, warmstart: None })
    }

    pub fn config(&self) -> &MpccConfig<T> {
        &self.config
    }

    pub fn reset(&mut self) {
        self.warmstart = None;
    }

    /// Roll the centerline forward at the current speed for a cold start.
    fn cold_start(
        &self,
        ego: &VehicleState<T>,
        track: &Track<T>,
    ) -> (Vec<VehicleState<T>>, Vec<ControlInput<T>>) {
        let n = self.config.n_horizon;
        let v = ego.vx.max(T::lit(2.0));
        let mut states = Vec::with_capacity(n + 1);
        states.push(*ego);
        let mut phi_cont = ego.phi;
        let mut prev_phi_lut = track.lookup(ego.theta).phi;
        for k in 1..=n {
            let theta = ego.theta + T::from_usize(k).unwrap() * self.config.dt * v;
            let tp = track.lookup(theta);
            // keep the heading continuous across the +-pi seam
            let dphi = crate::track::wrap_angle(tp.phi - prev_phi_lut);
            phi_cont += dphi;
            prev_phi_lut = tp.phi;
            let kappa = tp.kappa;
            let wheelbase = self.params.lf + self.params.lr;
            states.push(VehicleState {
                x: tp.x,
                y: tp.y,
                phi: phi_cont,
                vx: v,
                vy: T::zero(),
                omega: v * kappa,
                d: sustain_drive(v, &self.params),
                delta: (wheelbase * kappa).atan(),
                theta,
            });
        }
        let inputs = vec![ControlInput { d_dot: T::zero(), delta_dot: T::zero(), theta_dot: v }; n];
        (states, inputs)
    }

    /// Shift the previous solution one stage and re-anchor it at the ego.
    /// A warmstart whose trajectory no longer matches the ego (stale after
    /// failed solves) is discarded in favor of a cold start.
    fn shifted_warmstart(
        &self,
        ego: &VehicleState<T>,
    ) -> Option<(Vec<VehicleState<T>>, Vec<ControlInput<T>>)> {
        let (prev_states, prev_inputs) = self.warmstart.as_ref()?;
        let drift = (prev_states[1].theta - ego.theta)
            .abs()
            .max(((prev_states[1].x - ego.x).powi(2) + (prev_states[1].y - ego.y).powi(2)).sqrt());
        if drift > self.config.dt * T::lit(3.0) * self.config.l_upper[2].max(T::lit(10.0)) {
            return None;
        }
        let n = self.config.n_horizon;
        let mut states = Vec::with_capacity(n + 1);
        states.push(*ego);
        for k in 1..n {
            states.push(prev_states[k + 1]);
        }
        let last = prev_states[n];
        // roll the tail with a neutral input; repeating an aggressive last
        // input (hard braking) pushes the seed out of the box bounds
        let tail_input = ControlInput {
            d_dot: T::zero(),
            delta_dot: T::zero(),
            theta_dot: prev_inputs[n - 1].theta_dot.max(T::zero()),
        };
        let rolled = dynamics::integrate_substeps(
            &last,
            &tail_input,
            &self.params,
            self.config.dt,
            self.config.max_substep,
        )
        .unwrap_or(last);
        states.push(rolled);
        let mut inputs = Vec::with_capacity(n);
        for k in 1..n {
            inputs.push(prev_inputs[k]);
        }
        inputs.push(prev_inputs[n - 1]);
        Some((states, inputs))
    }

    /// Nonlinear rollout of an input sequence from the current state; None
    /// when the integration leaves the model's valid region.
    fn rollout(
        &self,
        x0: &VehicleState<T>,
        inputs: &[ControlInput<T>],
    ) -> Option<Vec<VehicleState<T>>> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(*x0);
        for u in inputs {
            match dynamics::integrate_substeps(
                states.last().unwrap(),
                u,
                &self.params,
                self.config.dt,
                self.config.max_substep,
            ) {
                Ok(s) if s.is_finite() => states.push(s),
                _ => return None,
            }
        }
        Some(states)
    }

    /// Penalized merit of a candidate trajectory under the true (nonlinear)
    /// dynamics and constraints.
    fn merit(
        &self,
        track: &Track<T>,
        states: &[VehicleState<T>],
        inputs: &[ControlInput<T>],
        mode: Mode,
        obstacle_pred: Option<&[(T, T)]>,
    ) -> T {
        let cfg = &self.config;
        let n = cfg.n_horizon;
        let rho = T::lit(1e4);
        let mut total = T::zero();
        for k in 0..n {
            // true stage cost at the state's own progress
            let s1 = &states[k + 1];
            let (ec, el) = track.contouring_errors(s1.theta, s1.x, s1.y);
            total += cfg.dt * (cfg.qc * ec * ec + cfg.ql * el * el);
            let u = &inputs[k];
            total += cfg.dt
                * (cfg.r_d * u.d_dot * u.d_dot
                    + cfg.r_delta * u.delta_dot * u.delta_dot
                    + cfg.r_theta * u.theta_dot * u.theta_dot
                    - cfg.q_theta * u.theta_dot);

            // true track containment (lateral excursion at own progress)
            let tp = track.lookup(s1.theta);
            let r_eff = (tp.r - cfg.track_margin).max(T::lit(0.5));
            total += rho * (ec.abs() - r_eff).max(T::zero());

            // obstacle clearance
            if let Some(pred) = obstacle_pred {
                let (ox, oy) = pred[k + 1];
                let dist = ((s1.x - ox) * (s1.x - ox) + (s1.y - oy) * (s1.y - oy)).sqrt();
                total += rho * (cfg.obstacle_radius - dist).max(T::zero());
            }

            // mode restriction, exact-penalty form
            match mode {
                Mode::DriveLeft => total += cfg.slack_weight * (-ec).max(T::zero()),
                Mode::DriveRight => total += cfg.slack_weight * ec.max(T::zero()),
                Mode::Normal => {}
            }

            // boxes: the state box is soft with the same exact-penalty
            // weight the subproblem pays for its slack
            let xa = s1.to_array();
            for i in 0..NX {
                total += cfg.box_slack_weight * (xa[i] - cfg.b_upper[i]).max(T::zero());
                total += cfg.box_slack_weight * (cfg.b_lower[i] - xa[i]).max(T::zero());
            }
            let ua = u.to_array();
            for i in 0..NU {
                total += rho * (ua[i] - cfg.l_upper[i]).max(T::zero());
                total += rho * (cfg.l_lower[i] - ua[i]).max(T::zero());
            }
        }
        total
    }

    /// One receding-horizon plan. `obstacle_pred` carries predicted obstacle
    /// positions for stages 0..=N when an opponent is present.
    pub fn plan(
        &mut self,
        ego: &VehicleState<T>,
        track: &Track<T>,
        obstacle_pred: Option<&[(T, T)]>,
        mode: Mode,
    ) -> Result<MpccSolution<T>> {
        let cfg = self.config.clone();
        let n = cfg.n_horizon;
        if !(ego.vx > self.params.vx_min) {
            return Err(Error::DegenerateVelocity {
                vx: ego.vx.to_f64_lossy(),
                floor: self.params.vx_min.to_f64_lossy(),
            });
        }

        let (mut states, mut inputs) =
            self.shifted_warmstart(ego).unwrap_or_else(|| self.cold_start(ego, track));
        sanitize_guess(&mut states, &self.params);

        let mut status = SolveStatus::MaxIter;
        let mut kkt_residual = T::infinity();
        let mut linear_violation = T::infinity();
        let mut slack_used = T::zero();
        let mut box_slack_used = T::zero();
        let mut theta_gap = Vec::new();
        let mut sqp_iterations = 0;
        let mut last_alpha_full = false;
        let mut last_qp_optimal = false;
        let mut merit_curr = self.merit(track, &states, &inputs, mode, obstacle_pred);

        for _ in 0..cfg.sqp_iters {
            sqp_iterations += 1;
            let assembled =
                assemble_problem(track, &states, &inputs, mode, obstacle_pred, &cfg, &self.params)?;
            let nu_qp = assembled.nu_qp;

            // seed the QP at the current guess
            let xs_init: Vec<Vec<T>> =
                (1..=n).map(|k| states[k].to_array().to_vec()).collect();
            let us_init: Vec<Vec<T>> = (0..n)
                .map(|k| {
                    let mut u = inputs[k].to_array().to_vec();
                    u.resize(nu_qp, T::lit(0.1));
                    u
                })
                .collect();
            let settings = QpSettings { tol: T::lit(1e-8), max_iter: 60, reg: T::lit(1e-9) };
            let qp_sol = qp::solve(&assembled.qp, &settings, Some((&xs_init, &us_init)))?;

            if qp_sol.status == QpStatus::Infeasible {
                status = SolveStatus::Infeasible;
                kkt_residual = qp_sol.kkt_residual;
                let xs_full: Vec<Vec<T>> =
                    (0..=n).map(|k| states[k].to_array().to_vec()).collect();
                let us_full: Vec<Vec<T>> = (0..n)
                    .map(|k| {
                        let mut u = inputs[k].to_array().to_vec();
                        u.resize(nu_qp, T::zero());
                        u
                    })
                    .collect();
                linear_violation = assembled.qp.max_constraint_violation(&xs_full, &us_full);
                break;
            }

            // damped step toward the QP inputs; states are re-rolled
            // through the nonlinear dynamics so every iterate is a real
            // trajectory and the first input is always physically sound
            let mut best_states = states.clone();
            let mut best_inputs = inputs.clone();
            let mut best_merit = T::infinity();
            let mut best_alpha = 0.0f64;
            let mut gap_this_iter = T::zero();
            for &alpha_num in &[1.0, 0.5, 0.25, 0.125, 0.0625] {
                let alpha = T::lit(alpha_num);
                let mut cand_inputs = inputs.clone();
                for k in 0..n {
                    let cur = inputs[k].to_array();
                    let tgt = &qp_sol.us[k];
                    let mut next = [T::zero(); NU];
                    for i in 0..NU {
                        next[i] = cur[i] + alpha * (tgt[i] - cur[i]);
                    }
                    cand_inputs[k] = ControlInput::from_array(&next);
                }
                let Some(cand_states) = self.rollout(&states[0], &cand_inputs) else {
                    continue;
                };
                let m = self.merit(track, &cand_states, &cand_inputs, mode, obstacle_pred);
                if m < best_merit {
                    best_merit = m;
                    best_states = cand_states;
                    best_inputs = cand_inputs;
                    best_alpha = alpha_num;
                }
                if m <= merit_curr + T::lit(1e-10) * (T::one() + merit_curr.abs()) {
                    break;
                }
            }
            if !best_merit.is_finite() {
                // every damped rollout diverged; keep the previous iterate
                status = SolveStatus::MaxIter;
                break;
            }
            merit_curr = best_merit;
            last_alpha_full = best_alpha == 1.0;
            last_qp_optimal = qp_sol.status == QpStatus::Optimal;

            // worst progress gap between linearization point and new iterate
            for k in 1..=n {
                gap_this_iter = gap_this_iter.max((best_states[k].theta - states[k].theta).abs());
            }
            theta_gap.push(gap_this_iter);

            // step norm for convergence
            let mut step_inf = T::zero();
            for k in 1..=n {
                let a = states[k].to_array();
                let b = best_states[k].to_array();
                for i in 0..NX {
                    step_inf = step_inf.max((a[i] - b[i]).abs());
                }
            }
            states = best_states;
            inputs = best_inputs;

            slack_used = T::zero();
            box_slack_used = T::zero();
            for k in 0..n {
                box_slack_used = box_slack_used.max(qp_sol.us[k][SLOT_BOX_SLACK]);
                if nu_qp > SLOT_MODE_SLACK {
                    slack_used = slack_used.max(qp_sol.us[k][SLOT_MODE_SLACK]);
                }
            }

            // violation of this subproblem's inequality rows by the new
            // iterate (slack components taken from the QP solution)
            let xs_full: Vec<Vec<T>> =
                (0..=n).map(|k| states[k].to_array().to_vec()).collect();
            let us_full: Vec<Vec<T>> = (0..n)
                .map(|k| {
                    let mut u = inputs[k].to_array().to_vec();
                    for slot in NU..nu_qp {
                        u.push(qp_sol.us[k][slot]);
                    }
                    u
                })
                .collect();
            let (lv, lv_stage, lv_row) = assembled.qp.max_constraint_violation_where(&xs_full, &us_full);
            linear_violation = lv;
            if lv.to_f64_lossy() > 1.0 {
                log::debug!(
                    "large subproblem violation {:.2} at stage {} row {}",
                    lv.to_f64_lossy(), lv_stage, lv_row
                );
            }

            kkt_residual = qp_sol.kkt_residual.max(linear_violation.max(T::zero()));
            if last_qp_optimal
                && last_alpha_full
                && kkt_residual <= cfg.kkt_tol
                && step_inf <= T::lit(1e-4) * (T::one() + cfg.l_upper[2].abs())
            {
                status = SolveStatus::Optimal;
                break;
            }
        }

        if status == SolveStatus::MaxIter
            && last_qp_optimal
            && last_alpha_full
            && kkt_residual <= cfg.kkt_tol
        {
            status = SolveStatus::Optimal;
        }

        let objective = {
            let mut obj = T::zero();
            for k in 0..n {
                let s1 = &states[k + 1];
                let (ec, el) = track.contouring_errors(s1.theta, s1.x, s1.y);
                let u = &inputs[k];
                obj += cfg.dt
                    * (cfg.qc * ec * ec + cfg.ql * el * el + cfg.r_d * u.d_dot * u.d_dot
                        + cfg.r_delta * u.delta_dot * u.delta_dot
                        + cfg.r_theta * u.theta_dot * u.theta_dot
                        - cfg.q_theta * u.theta_dot);
            }
            obj
        };

        let solution = MpccSolution {
            u_star: inputs[0],
            states: states.clone(),
            inputs: inputs.clone(),
            status,
            kkt_residual,
            linear_violation,
            objective,
            slack_used,
            box_slack_used,
            sqp_iterations,
            theta_gap,
        };
        if status != SolveStatus::Infeasible {
            self.warmstart = Some((states, inputs));
        }
        Ok(solution)
    }
}

fn sustain_drive<T: Real>(v: T, params: &VehicleParams<T>) -> T {
    let denom = params.cm1 - params.cm2 * v;
    if denom <= T::zero() {
        return T::one();
    }
    ((params.croll + params.cd * v * v) / denom).max(T::zero()).min(T::one())
}

fn sanitize_guess<T: Real>(states: &mut [VehicleState<T>], params: &VehicleParams<T>) {
    let floor = params.vx_min * T::lit(4.0);
    for s in states.iter_mut().skip(1) {
        if !(s.vx > floor) {
            s.vx = floor;
        }
    }
}

fn max_defect<T: Real>(
    states: &[VehicleState<T>],
    inputs: &[ControlInput<T>],
    params: &VehicleParams<T>,
    cfg: &MpccConfig<T>,
) -> T {
    let mut worst = T::zero();
    for k in 0..inputs.len() {
        match dynamics::integrate_substeps(&states[k], &inputs[k], params, cfg.dt, cfg.max_substep)
        {
            Ok(pred) => {
                let pa = pred.to_array();
                let sa = states[k + 1].to_array();
                for i in 0..NX {
                    worst = worst.max((pa[i] - sa[i]).abs());
                }
            }
            Err(_) => return T::infinity(),
        }
    }
    worst
}
