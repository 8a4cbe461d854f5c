//! Single-track bicycle model with Pacejka lateral tire forces and a
//! resistive drivetrain, plus the fixed-step RK4 integrator and the exact
//! Jacobians of the discrete step used by the planner.
//!
//! State layout (index order is shared with the solver):
//! `[x, y, phi, vx, vy, omega, d, delta, theta]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

pub const NX: usize = 9;
pub const NU: usize = 3;

pub const IDX_X: usize = 0;
pub const IDX_Y: usize = 1;
pub const IDX_PHI: usize = 2;
pub const IDX_VX: usize = 3;
pub const IDX_VY: usize = 4;
pub const IDX_OMEGA: usize = 5;
pub const IDX_D: usize = 6;
pub const IDX_DELTA: usize = 7;
pub const IDX_THETA: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub x: T,
    pub y: T,
    pub phi: T,
    pub vx: T,
    pub vy: T,
    pub omega: T,
    /// Integrated motor torque command, nominally in `[0, 1]`.
    pub d: T,
    pub delta: T,
    /// Advancing (progress) parameter along the track, in meters. Kept
    /// unwrapped; track lookups wrap it.
    pub theta: T,
}

impl<T: Real> VehicleState<T> {
    pub fn to_array(&self) -> [T; NX] {
        [
            self.x, self.y, self.phi, self.vx, self.vy, self.omega, self.d, self.delta,
            self.theta,
        ]
    }

    pub fn from_array(a: &[T; NX]) -> Self {
        VehicleState {
            x: a[0],
            y: a[1],
            phi: a[2],
            vx: a[3],
            vy: a[4],
            omega: a[5],
            d: a[6],
            delta: a[7],
            theta: a[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput<T> {
    /// Rate of the drive command, 1/s.
    pub d_dot: T,
    /// Steering rate, rad/s.
    pub delta_dot: T,
    /// Virtual progress rate, m/s.
    pub theta_dot: T,
}

impl<T: Real> ControlInput<T> {
    pub fn zero() -> Self {
        ControlInput { d_dot: T::zero(), delta_dot: T::zero(), theta_dot: T::zero() }
    }

    pub fn to_array(&self) -> [T; NU] {
        [self.d_dot, self.delta_dot, self.theta_dot]
    }

    pub fn from_array(a: &[T; NU]) -> Self {
        ControlInput { d_dot: a[0], delta_dot: a[1], theta_dot: a[2] }
    }
}

/// Vehicle parameters, SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams<T> {
    pub m: T,
    pub iz: T,
    pub lf: T,
    pub lr: T,
    pub bf: T,
    pub cf: T,
    pub df: T,
    pub br: T,
    pub cr: T,
    pub dr: T,
    pub cm1: T,
    pub cm2: T,
    /// Combined rolling/engine-drag force at zero throttle, N.
    pub croll: T,
    /// Aerodynamic drag coefficient, N·s²/m².
    pub cd: T,
    /// Slip angles divide by vx; below this floor the model is rejected.
    pub vx_min: T,
}

impl<T: Real> Default for VehicleParams<T> {
    fn default() -> Self {
        // Full-scale race-car magnitudes. The peak lateral force per axle is
        // close to m*g; zero-throttle drag is strong enough to shed speed for
        // corner entry since the model has no brake input.
        VehicleParams {
            m: T::lit(1200.0),
            iz: T::lit(1600.0),
            lf: T::lit(1.6),
            lr: T::lit(1.6),
            bf: T::lit(10.0),
            cf: T::lit(1.9),
            df: T::lit(11000.0),
            br: T::lit(10.0),
            cr: T::lit(1.9),
            dr: T::lit(11000.0),
            cm1: T::lit(9000.0),
            cm2: T::lit(80.0),
            croll: T::lit(2000.0),
            cd: T::lit(3.0),
            vx_min: T::lit(0.1),
        }
    }
}

impl<T: Real> VehicleParams<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("m", self.m),
            ("Iz", self.iz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("Bf", self.bf),
            ("Cf", self.cf),
            ("Df", self.df),
            ("Br", self.br),
            ("Cr", self.cr),
            ("Dr", self.dr),
        ];
        for (name, v) in pos {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::input(format!("vehicle parameter {name} must be > 0")));
            }
        }
        if !(self.vx_min > T::zero()) {
            return Err(Error::input("vehicle parameter vx_min must be > 0"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &crate::config::KeyValueFile) -> Result<Self> {
        let g = |key: &str| -> Result<T> { kv.f64(key).map(T::lit) };
        let p = VehicleParams {
            m: g("m")?,
            iz: g("Iz")?,
            lf: g("lf")?,
            lr: g("lr")?,
            bf: g("Bf")?,
            cf: g("Cf")?,
            df: g("Df")?,
            br: g("Br")?,
            cr: g("Cr")?,
            dr: g("Dr")?,
            cm1: g("Cm1")?,
            cm2: g("Cm2")?,
            croll: g("Croll")?,
            cd: g("Cd")?,
            vx_min: g("vx_min")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_kv(&crate::config::KeyValueFile::load(path)?)
    }
}

fn check_vx<T: Real>(vx: T, params: &VehicleParams<T>) -> Result<()> {
    if vx > params.vx_min {
        Ok(())
    } else {
        Err(Error::DegenerateVelocity { vx: vx.to_f64_lossy(), floor: params.vx_min.to_f64_lossy() })
    }
}

/// Front and rear slip angles. Requires `vx` above the configured floor.
pub fn slip_angles<T: Real>(
    state: &VehicleState<T>,
    params: &VehicleParams<T>,
) -> Result<(T, T)> {
    check_vx(state.vx, params)?;
    let alpha_f = -((state.omega * params.lf + state.vy) / state.vx).atan() + state.delta;
    let alpha_r = ((state.omega * params.lr - state.vy) / state.vx).atan();
    Ok((alpha_f, alpha_r))
}

/// Lateral Pacejka forces on both axles and the longitudinal drivetrain
/// force on the rear axle.
pub fn tire_and_drive_forces<T: Real>(
    state: &VehicleState<T>,
    alpha_f: T,
    alpha_r: T,
    params: &VehicleParams<T>,
) -> (T, T, T) {
    let ffy = params.df * (params.cf * (params.bf * alpha_f).atan()).sin();
    let fry = params.dr * (params.cr * (params.br * alpha_r).atan()).sin();
    let frx = (params.cm1 - params.cm2 * state.vx) * state.d
        - params.croll
        - params.cd * state.vx * state.vx;
    (ffy, fry, frx)
}

/// Continuous-time state derivative.
pub fn derivative<T: Real>(
    state: &VehicleState<T>,
    input: &ControlInput<T>,
    params: &VehicleParams<T>,
) -> Result<[T; NX]> {
    let (alpha_f, alpha_r) = slip_angles(state, params)?;
    let (ffy, fry, frx) = tire_and_drive_forces(state, alpha_f, alpha_r, params);
    let (sin_phi, cos_phi) = state.phi.sin_cos();
    let (sin_delta, cos_delta) = state.delta.sin_cos();
    let m = params.m;
    Ok([
        state.vx * cos_phi - state.vy * sin_phi,
        state.vx * sin_phi + state.vy * cos_phi,
        state.omega,
        (frx - ffy * sin_delta + m * state.vy * state.omega) / m,
        (fry + ffy * cos_delta - m * state.vx * state.omega) / m,
        (ffy * params.lf * cos_delta - fry * params.lr) / params.iz,
        input.d_dot,
        input.delta_dot,
        input.theta_dot,
    ])
}

/// One classical RK4 step with the input held constant (zero-order hold).
pub fn integrate<T: Real>(
    state: &VehicleState<T>,
    input: &ControlInput<T>,
    params: &VehicleParams<T>,
    dt: T,
) -> Result<VehicleState<T>> {
    debug_assert!(dt > T::zero());
    let half = T::lit(0.5);
    let sixth = T::lit(1.0 / 6.0);
    let two = T::lit(2.0);

    let x0 = state.to_array();
    let k1 = derivative(state, input, params)?;
    let x1 = add_scaled(&x0, &k1, half * dt);
    let k2 = derivative(&VehicleState::from_array(&x1), input, params)?;
    let x2 = add_scaled(&x0, &k2, half * dt);
    let k3 = derivative(&VehicleState::from_array(&x2), input, params)?;
    let x3 = add_scaled(&x0, &k3, dt);
    let k4 = derivative(&VehicleState::from_array(&x3), input, params)?;

    let mut out = x0;
    for i in 0..NX {
        out[i] += dt * sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    Ok(VehicleState::from_array(&out))
}

/// Integrate over `dt` split into equal RK4 substeps no longer than
/// `max_substep`. Used when the planner period exceeds the integration step
/// the model is accurate at.
pub fn integrate_substeps<T: Real>(
    state: &VehicleState<T>,
    input: &ControlInput<T>,
    params: &VehicleParams<T>,
    dt: T,
    max_substep: T,
) -> Result<VehicleState<T>> {
    let n = substep_count(dt, max_substep);
    let h = dt / T::from_usize(n).unwrap();
    let mut s = *state;
    for _ in 0..n {
        s = integrate(&s, input, params, h)?;
    }
    Ok(s)
}

pub fn substep_count<T: Real>(dt: T, max_substep: T) -> usize {
    if max_substep <= T::zero() || dt <= max_substep {
        return 1;
    }
    let ratio = (dt / max_substep).to_f64_lossy();
    ratio.ceil().max(1.0) as usize
}

fn add_scaled<T: Real>(x: &[T; NX], k: &[T; NX], h: T) -> [T; NX] {
    let mut out = *x;
    for i in 0..NX {
        out[i] += h * k[i];
    }
    out
}

/// Jacobians of the continuous dynamics, `fx = ∂f/∂x` (9×9) and
/// `fu = ∂f/∂u` (9×3).
pub fn continuous_jacobians<T: Real>(
    state: &VehicleState<T>,
    params: &VehicleParams<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    check_vx(state.vx, params)?;
    let one = T::one();
    let two = T::lit(2.0);
    let m = params.m;
    let (sin_phi, cos_phi) = state.phi.sin_cos();
    let (sin_delta, cos_delta) = state.delta.sin_cos();

    let vx = state.vx;
    let vy = state.vy;
    let omega = state.omega;

    // slip angles and their partials
    let nf = omega * params.lf + vy;
    let nr = omega * params.lr - vy;
    let df2 = vx * vx + nf * nf;
    let dr2 = vx * vx + nr * nr;
    let alpha_f = -(nf / vx).atan() + state.delta;
    let alpha_r = (nr / vx).atan();
    let daf_dvx = nf / df2;
    let daf_dvy = -vx / df2;
    let daf_domega = -vx * params.lf / df2;
    // d alpha_f / d delta = 1
    let dar_dvx = -nr / dr2;
    let dar_dvy = -vx / dr2;
    let dar_domega = vx * params.lr / dr2;

    // forces and their slopes w.r.t. slip angle
    let ffy = params.df * (params.cf * (params.bf * alpha_f).atan()).sin();
    let gf = params.df * params.cf * params.bf * (params.cf * (params.bf * alpha_f).atan()).cos()
        / (one + params.bf * params.bf * alpha_f * alpha_f);
    let gr = params.dr * params.cr * params.br * (params.cr * (params.br * alpha_r).atan()).cos()
        / (one + params.br * params.br * alpha_r * alpha_r);

    let dfrx_dvx = -params.cm2 * state.d - two * params.cd * vx;
    let dfrx_dd = params.cm1 - params.cm2 * vx;

    let mut fx = Mat::zeros(NX, NX);
    // xdot = vx cos(phi) - vy sin(phi)
    fx[(IDX_X, IDX_PHI)] = -vx * sin_phi - vy * cos_phi;
    fx[(IDX_X, IDX_VX)] = cos_phi;
    fx[(IDX_X, IDX_VY)] = -sin_phi;
    // ydot = vx sin(phi) + vy cos(phi)
    fx[(IDX_Y, IDX_PHI)] = vx * cos_phi - vy * sin_phi;
    fx[(IDX_Y, IDX_VX)] = sin_phi;
    fx[(IDX_Y, IDX_VY)] = cos_phi;
    // phidot = omega
    fx[(IDX_PHI, IDX_OMEGA)] = one;
    // vxdot = (Frx - Ffy sin(delta) + m vy omega)/m
    fx[(IDX_VX, IDX_VX)] = (dfrx_dvx - sin_delta * gf * daf_dvx) / m;
    fx[(IDX_VX, IDX_VY)] = (-sin_delta * gf * daf_dvy) / m + omega;
    fx[(IDX_VX, IDX_OMEGA)] = (-sin_delta * gf * daf_domega) / m + vy;
    fx[(IDX_VX, IDX_D)] = dfrx_dd / m;
    fx[(IDX_VX, IDX_DELTA)] = (-ffy * cos_delta - sin_delta * gf) / m;
    // vydot = (Fry + Ffy cos(delta) - m vx omega)/m
    fx[(IDX_VY, IDX_VX)] = (gr * dar_dvx + cos_delta * gf * daf_dvx) / m - omega;
    fx[(IDX_VY, IDX_VY)] = (gr * dar_dvy + cos_delta * gf * daf_dvy) / m;
    fx[(IDX_VY, IDX_OMEGA)] = (gr * dar_domega + cos_delta * gf * daf_domega) / m - vx;
    fx[(IDX_VY, IDX_DELTA)] = (-ffy * sin_delta + cos_delta * gf) / m;
    // omegadot = (Ffy lf cos(delta) - Fry lr)/Iz
    fx[(IDX_OMEGA, IDX_VX)] =
        (params.lf * cos_delta * gf * daf_dvx - params.lr * gr * dar_dvx) / params.iz;
    fx[(IDX_OMEGA, IDX_VY)] =
        (params.lf * cos_delta * gf * daf_dvy - params.lr * gr * dar_dvy) / params.iz;
    fx[(IDX_OMEGA, IDX_OMEGA)] =
        (params.lf * cos_delta * gf * daf_domega - params.lr * gr * dar_domega) / params.iz;
    fx[(IDX_OMEGA, IDX_DELTA)] =
        params.lf * (-ffy * sin_delta + cos_delta * gf) / params.iz;

    let mut fu = Mat::zeros(NX, NU);
    fu[(IDX_D, 0)] = one;
    fu[(IDX_DELTA, 1)] = one;
    fu[(IDX_THETA, 2)] = one;

    Ok((fx, fu))
}

/// Jacobians of one RK4 step, obtained by the chain rule through the four
/// stages. Returns `(A, B)` with `x⁺ ≈ A·x + B·u + g` around the reference.
fn rk4_step_jacobians<T: Real>(
    state: &VehicleState<T>,
    input: &ControlInput<T>,
    params: &VehicleParams<T>,
    dt: T,
) -> Result<(Mat<T>, Mat<T>)> {
    let half = T::lit(0.5);
    let sixth = T::lit(1.0 / 6.0);
    let two = T::lit(2.0);

    let x0 = state.to_array();
    let k1 = derivative(state, input, params)?;
    let s1 = *state;
    let s2 = VehicleState::from_array(&add_scaled(&x0, &k1, half * dt));
    let k2 = derivative(&s2, input, params)?;
    let s3 = VehicleState::from_array(&add_scaled(&x0, &k2, half * dt));
    let k3 = derivative(&s3, input, params)?;
    let s4 = VehicleState::from_array(&add_scaled(&x0, &k3, dt));

    let (j1x, j1u) = continuous_jacobians(&s1, params)?;
    let (f2x, f2u) = continuous_jacobians(&s2, params)?;
    let (f3x, f3u) = continuous_jacobians(&s3, params)?;
    let (f4x, f4u) = continuous_jacobians(&s4, params)?;

    // dk_i/dx and dk_i/du by forward accumulation
    let eye = Mat::identity(NX);
    let mut t = eye.clone();
    t.add_scaled(&j1x, half * dt); // I + h/2 J1x
    let j2x = f2x.mul(&t);
    let mut j2u = f2x.mul(&j1u);
    scale_mat(&mut j2u, half * dt);
    j2u.add_scaled(&f2u, T::one());

    let mut t = eye.clone();
    t.add_scaled(&j2x, half * dt);
    let j3x = f3x.mul(&t);
    let mut j3u = f3x.mul(&j2u);
    scale_mat(&mut j3u, half * dt);
    j3u.add_scaled(&f3u, T::one());

    let mut t = eye.clone();
    t.add_scaled(&j3x, dt);
    let j4x = f4x.mul(&t);
    let mut j4u = f4x.mul(&j3u);
    scale_mat(&mut j4u, dt);
    j4u.add_scaled(&f4u, T::one());

    let mut a = eye;
    let w = dt * sixth;
    a.add_scaled(&j1x, w);
    a.add_scaled(&j2x, w * two);
    a.add_scaled(&j3x, w * two);
    a.add_scaled(&j4x, w);

    let mut b = Mat::zeros(NX, NU);
    b.add_scaled(&j1u, w);
    b.add_scaled(&j2u, w * two);
    b.add_scaled(&j3u, w * two);
    b.add_scaled(&j4u, w);

    Ok((a, b))
}

fn scale_mat<T: Real>(m: &mut Mat<T>, s: T) {
    for i in 0..m.rows() {
        for v in m.row_mut(i) {
            *v *= s;
        }
    }
}

/// Affine model of the (possibly multi-substep) RK4 step at a reference
/// point: `x⁺ ≈ A x + B u + g`, exact at the reference.
pub struct AffineStep<T> {
    pub a: Mat<T>,
    pub b: Mat<T>,
    pub g: Vec<T>,
    /// Nonlinear endpoint `integrate(x_ref, u_ref, dt)`.
    pub next: VehicleState<T>,
}

pub fn discretize_linearize<T: Real>(
    state: &VehicleState<T>,
    input: &ControlInput<T>,
    params: &VehicleParams<T>,
    dt: T,
    max_substep: T,
) -> Result<AffineStep<T>> {
    let n = substep_count(dt, max_substep);
    let h = dt / T::from_usize(n).unwrap();
    let mut a_total = Mat::identity(NX);
    let mut b_total = Mat::zeros(NX, NU);
    let mut s = *state;
    for _ in 0..n {
        let (a_s, b_s) = rk4_step_jacobians(&s, input, params, h)?;
        // compose: A <- A_s A, B <- A_s B + B_s
        b_total = {
            let mut nb = a_s.mul(&b_total);
            nb.add_scaled(&b_s, T::one());
            nb
        };
        a_total = a_s.mul(&a_total);
        s = integrate(&s, input, params, h)?;
    }
    // g = x_next - A x_ref - B u_ref  (affine consistency at the reference)
    let xr = state.to_array();
    let ur = input.to_array();
    let xn = s.to_array();
    let mut g = vec![T::zero(); NX];
    let mut ax = vec![T::zero(); NX];
    a_total.mul_vec(&xr, &mut ax);
    let mut bu = vec![T::zero(); NX];
    b_total.mul_vec(&ur, &mut bu);
    for i in 0..NX {
        g[i] = xn[i] - ax[i] - bu[i];
    }
    Ok(AffineStep { a: a_total, b: b_total, g, next: s })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parameter set shared by the frozen-value tests; the slip-angle example
    /// uses lf = lr = 1.0, so the whole set uses it.
    fn oracle_params() -> VehicleParams<f64> {
        VehicleParams { lf: 1.0, lr: 1.0, ..VehicleParams::default() }
    }

    fn oracle_state() -> VehicleState<f64> {
        VehicleState {
            x: 3.2,
            y: -1.7,
            phi: 0.6,
            vx: 6.0,
            vy: 0.3,
            omega: 0.8,
            d: 0.55,
            delta: 0.05,
            theta: 12.0,
        }
    }

    #[test]
    fn slip_angles_zero_cases() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState { vx: 5.0, ..Default::default() };
        let (af, ar) = slip_angles(&s, &p).unwrap();
        assert_eq!(af, 0.0);
        assert_eq!(ar, 0.0);

        let s = VehicleState { vx: 5.0, delta: 0.1, ..Default::default() };
        let (af, ar) = slip_angles(&s, &p).unwrap();
        assert_eq!(af, 0.1);
        assert_eq!(ar, 0.0);
    }

    #[test]
    fn slip_angles_frozen_values() {
        // Frozen from an independent scalar transcription of the formulas.
        let (af, ar) = slip_angles(&oracle_state(), &oracle_params()).unwrap();
        assert!((af - (-0.13131977440149023)).abs() < 1e-15, "alpha_f = {af}");
        assert!((ar - 0.083141231888441219).abs() < 1e-15, "alpha_r = {ar}");
    }

    #[test]
    fn slip_angles_reject_degenerate_velocity() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState { vx: 0.05, ..Default::default() };
        assert!(matches!(
            slip_angles(&s, &p),
            Err(Error::DegenerateVelocity { .. })
        ));
    }

    #[test]
    fn forces_zero_slip_and_standstill() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState { vx: 5.0, d: 0.0, ..Default::default() };
        let (ffy, fry, _) = tire_and_drive_forces(&s, 0.0, 0.0, &p);
        assert_eq!(ffy, 0.0);
        assert_eq!(fry, 0.0);

        let standstill = VehicleState { vx: 0.0, d: 0.0, ..Default::default() };
        let (_, _, frx) = tire_and_drive_forces(&standstill, 0.0, 0.0, &p);
        assert_eq!(frx, -p.croll);
    }

    #[test]
    fn forces_frozen_values() {
        let p = oracle_params();
        let s = oracle_state();
        let (af, ar) = slip_angles(&s, &p).unwrap();
        let (ffy, fry, frx) = tire_and_drive_forces(&s, af, ar, &p);
        assert!((ffy - (-10827.834352681175)).abs() < 1e-9, "Ffy = {ffy}");
        assert!((fry - 10649.962859620759).abs() < 1e-9, "Fry = {fry}");
        assert!((frx - 2578.0).abs() < 1e-12, "Frx = {frx}");
    }

    #[test]
    fn derivative_frozen_values() {
        let p = oracle_params();
        let s = oracle_state();
        let u = ControlInput { d_dot: 0.3, delta_dot: -0.1, theta_dot: 5.5 };
        let dx = derivative(&s, &u, &p).unwrap();
        let expect = [
            4.7826209474395593,
            3.635455524843116,
            0.8,
            2.8393051382895984,
            -4.9369495996942714,
            -13.415165774296652,
            0.3,
            -0.1,
            5.5,
        ];
        for i in 0..NX {
            assert!(
                (dx[i] - expect[i]).abs() < 1e-11,
                "component {i}: {} vs {}",
                dx[i],
                expect[i]
            );
        }
    }

    #[test]
    fn derivative_straight_line_coast() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState { vx: 20.0, phi: 0.3, ..Default::default() };
        let dx = derivative(&s, &ControlInput::zero(), &p).unwrap();
        assert_eq!(dx[IDX_VY], 0.0);
        assert_eq!(dx[IDX_OMEGA], 0.0);
        assert!((dx[IDX_X] - 20.0 * 0.3f64.cos()).abs() < 1e-15);
        // drag + rolling resistance decelerate
        assert!(dx[IDX_VX] < 0.0);
    }

    #[test]
    fn derivative_pure_rotation_frame() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState {
            phi: std::f64::consts::FRAC_PI_2,
            vx: 5.0,
            ..Default::default()
        };
        let dx = derivative(&s, &ControlInput::zero(), &p).unwrap();
        assert!(dx[IDX_X].abs() < 1e-14);
        assert!((dx[IDX_Y] - 5.0).abs() < 1e-14);
    }

    /// Independent transcription of the model used as a randomized oracle.
    /// Written against the equations directly, structured differently from
    /// the implementation on purpose.
    fn oracle_derivative(s: &VehicleState<f64>, u: &ControlInput<f64>, p: &VehicleParams<f64>) -> [f64; 9] {
        let af = p.df * (p.cf * (p.bf * (s.delta - ((s.omega * p.lf + s.vy) / s.vx).atan())).atan()).sin();
        let ar = p.dr * (p.cr * (p.br * (((s.omega * p.lr - s.vy) / s.vx).atan())).atan()).sin();
        let fx = (p.cm1 - p.cm2 * s.vx) * s.d - p.croll - p.cd * s.vx.powi(2);
        [
            s.vx * s.phi.cos() - s.vy * s.phi.sin(),
            s.vx * s.phi.sin() + s.vy * s.phi.cos(),
            s.omega,
            (fx - af * s.delta.sin() + p.m * s.vy * s.omega) / p.m,
            (ar + af * s.delta.cos() - p.m * s.vx * s.omega) / p.m,
            (af * p.lf * s.delta.cos() - ar * p.lr) / p.iz,
            u.d_dot,
            u.delta_dot,
            u.theta_dot,
        ]
    }

    fn lcg(seed: &mut u64) -> f64 {
        // deterministic unit-interval samples for randomized checks
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn random_state(seed: &mut u64) -> (VehicleState<f64>, ControlInput<f64>) {
        let r = |seed: &mut u64, lo: f64, hi: f64| lo + (hi - lo) * lcg(seed);
        (
            VehicleState {
                x: r(seed, -50.0, 50.0),
                y: r(seed, -50.0, 50.0),
                phi: r(seed, -3.0, 3.0),
                vx: r(seed, 3.0, 35.0),
                vy: r(seed, -3.0, 3.0),
                omega: r(seed, -1.5, 1.5),
                d: r(seed, 0.0, 1.0),
                delta: r(seed, -0.4, 0.4),
                theta: r(seed, 0.0, 500.0),
            },
            ControlInput {
                d_dot: r(seed, -1.0, 1.0),
                delta_dot: r(seed, -0.5, 0.5),
                theta_dot: r(seed, 0.0, 40.0),
            },
        )
    }

    #[test]
    fn derivative_matches_independent_transcription() {
        let p = VehicleParams::<f64>::default();
        let mut seed = 0x5eed_0001;
        for _ in 0..200 {
            let (s, u) = random_state(&mut seed);
            let got = derivative(&s, &u, &p).unwrap();
            let expect = oracle_derivative(&s, &u, &p);
            for i in 0..NX {
                let scale = 1.0 + expect[i].abs();
                assert!(
                    ((got[i] - expect[i]) / scale).abs() < 1e-12,
                    "component {i}: {} vs {}",
                    got[i],
                    expect[i]
                );
            }
        }
    }

    #[test]
    fn lateral_mirror_symmetry() {
        let p = VehicleParams::<f64>::default();
        let mut seed = 0x5eed_0002;
        for _ in 0..100 {
            let (s, _) = random_state(&mut seed);
            let mirrored = VehicleState {
                y: -s.y,
                phi: -s.phi,
                vy: -s.vy,
                omega: -s.omega,
                delta: -s.delta,
                ..s
            };
            let u = ControlInput::zero();
            let d0 = derivative(&s, &u, &p).unwrap();
            let d1 = derivative(&mirrored, &u, &p).unwrap();
            assert!((d0[IDX_VX] - d1[IDX_VX]).abs() < 1e-12);
            assert!((d0[IDX_VY] + d1[IDX_VY]).abs() < 1e-12);
            assert!((d0[IDX_OMEGA] + d1[IDX_OMEGA]).abs() < 1e-12);
            assert!((d0[IDX_X] - d1[IDX_X]).abs() < 1e-12);
            assert!((d0[IDX_Y] + d1[IDX_Y]).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_is_deterministic() {
        let p = VehicleParams::<f64>::default();
        let s = oracle_state();
        let u = ControlInput { d_dot: 0.3, delta_dot: -0.1, theta_dot: 5.5 };
        let a = derivative(&s, &u, &oracle_params()).unwrap();
        let b = derivative(&s, &u, &oracle_params()).unwrap();
        assert_eq!(a, b);
        let _ = p;
    }

    #[test]
    fn integrate_straight_line() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState { vx: 10.0, phi: 0.4, d: 0.3, ..Default::default() };
        let dt = 0.01;
        let out = integrate(&s, &ControlInput::zero(), &p, dt).unwrap();
        // position advances ~ vx*dt along heading; vx changes slightly so
        // allow the O(dt^2) displacement correction
        let dist = ((out.x - s.x).powi(2) + (out.y - s.y).powi(2)).sqrt();
        assert!((dist - 10.0 * dt).abs() < 1e-3);
        assert!((out.y - s.y) / (out.x - s.x) - 0.4f64.tan() < 1e-9);
        assert_eq!(out.vy, 0.0);
        assert_eq!(out.omega, 0.0);
    }

    #[test]
    fn rk4_step_doubling() {
        // one step vs two half-steps: the local-error gap is O(h^5), so it
        // shrinks ~32x when dt halves
        let p = VehicleParams::<f64>::default();
        let s = VehicleState { vx: 15.0, vy: 0.2, omega: 0.1, d: 0.4, delta: 0.05, ..Default::default() };
        let u = ControlInput { d_dot: 0.2, delta_dot: 0.1, theta_dot: 15.0 };
        let gap = |dt: f64| -> f64 {
            let full = integrate(&s, &u, &p, dt).unwrap();
            let half =
                integrate(&integrate(&s, &u, &p, dt / 2.0).unwrap(), &u, &p, dt / 2.0).unwrap();
            full.to_array()
                .iter()
                .zip(half.to_array())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let g1 = gap(0.02);
        let g2 = gap(0.01);
        assert!(g1 < 2e-3, "half-step gap at dt=0.02: {g1}");
        let ratio = g1 / g2;
        assert!((22.0..=42.0).contains(&ratio), "ratio {ratio} (gaps {g1}, {g2})");
    }

    /// Piecewise-constant slalom schedule indexed by integer step count so
    /// the ZOH input is bit-identical at every tested resolution.
    fn run_slalom(steps_per_piece: usize, pieces: usize) -> VehicleState<f64> {
        let p = VehicleParams::default();
        let piece_len = 0.2;
        let dt = piece_len / steps_per_piece as f64;
        let mut s = VehicleState { vx: 15.0, d: 0.4, ..Default::default() };
        for k in 0..steps_per_piece * pieces {
            let piece = k / steps_per_piece;
            let sign = if piece % 2 == 0 { 1.0 } else { -1.0 };
            let u = ControlInput { d_dot: 0.05, delta_dot: 0.35 * sign, theta_dot: 15.0 };
            s = integrate(&s, &u, &p, dt).unwrap();
        }
        s
    }

    #[test]
    fn rk4_observed_convergence_order() {
        let pieces = 5; // 1.0 s slalom
        let reference = run_slalom(640, pieces);
        let mut errs = Vec::new();
        for &m in &[20usize, 40, 80] {
            let s = run_slalom(m, pieces);
            let e: f64 = s
                .to_array()
                .iter()
                .zip(reference.to_array())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(e);
        }
        // log-log slope between successive halvings
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((3.7..=4.3).contains(&slope), "slope {slope}, errs {errs:?}");
        }
    }

    #[test]
    fn step_jacobians_match_finite_differences() {
        let p = VehicleParams::<f64>::default();
        let s = VehicleState {
            x: 1.0,
            y: -2.0,
            phi: 0.3,
            vx: 18.0,
            vy: 0.4,
            omega: 0.2,
            d: 0.5,
            delta: 0.04,
            theta: 30.0,
        };
        let u = ControlInput { d_dot: 0.1, delta_dot: -0.05, theta_dot: 18.0 };
        let dt = 0.04;
        let max_substep = 0.02;
        let step = discretize_linearize(&s, &u, &p, dt, max_substep).unwrap();

        let h = 1e-5;
        for j in 0..NX {
            let mut sp = s.to_array();
            let mut sm = s.to_array();
            sp[j] += h;
            sm[j] -= h;
            let fp = integrate_substeps(&VehicleState::from_array(&sp), &u, &p, dt, max_substep)
                .unwrap()
                .to_array();
            let fm = integrate_substeps(&VehicleState::from_array(&sm), &u, &p, dt, max_substep)
                .unwrap()
                .to_array();
            for i in 0..NX {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = step.a[(i, j)];
                let scale = 1.0 + fd.abs().max(an.abs());
                assert!(
                    ((fd - an) / scale).abs() < 1e-4,
                    "A[{i}][{j}]: fd {fd} analytic {an}"
                );
            }
        }
        for j in 0..NU {
            let mut up = u.to_array();
            let mut um = u.to_array();
            up[j] += h;
            um[j] -= h;
            let fp = integrate_substeps(&s, &ControlInput::from_array(&up), &p, dt, max_substep)
                .unwrap()
                .to_array();
            let fm = integrate_substeps(&s, &ControlInput::from_array(&um), &p, dt, max_substep)
                .unwrap()
                .to_array();
            for i in 0..NX {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = step.b[(i, j)];
                let scale = 1.0 + fd.abs().max(an.abs());
                assert!(
                    ((fd - an) / scale).abs() < 1e-4,
                    "B[{i}][{j}]: fd {fd} analytic {an}"
                );
            }
        }

        // affine consistency at the reference
        let xr = s.to_array();
        let ur = u.to_array();
        let mut tmp = vec![0.0; NX];
        step.a.mul_vec(&xr, &mut tmp);
        let mut bu = vec![0.0; NX];
        step.b.mul_vec(&ur, &mut bu);
        let nxt = step.next.to_array();
        for i in 0..NX {
            assert!((tmp[i] + bu[i] + step.g[i] - nxt[i]).abs() < 1e-12);
        }

        // progress channel of a single RK4 step: d theta+ / d u_theta = dt
        let single = discretize_linearize(&s, &u, &p, 0.02, 0.02).unwrap();
        assert!((single.b[(IDX_THETA, 2)] - 0.02).abs() < 1e-14);
    }

    #[test]
    fn params_file_roundtrip() {
        let text = "m = 1200\nIz = 1600\nlf = 1.6\nlr = 1.6\nBf = 10\nCf = 1.9\nDf = 11000\nBr = 10\nCr = 1.9\nDr = 11000\nCm1 = 9000\nCm2 = 80\nCroll = 2000\nCd = 3.0\nvx_min = 0.1\n";
        let kv = crate::config::KeyValueFile::parse(text).unwrap();
        let p = VehicleParams::<f64>::from_kv(&kv).unwrap();
        assert_eq!(p, VehicleParams::default());
    }

    #[test]
    fn params_reject_nonpositive() {
        let bad = VehicleParams::<f64> { m: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
