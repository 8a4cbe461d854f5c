//! Offline policy learning: run the design-of-experiments grid per track
//! portion, detect overtakes inside the portion corridors, aggregate
//! per-region probabilities, and emit the policy map.
//!
//! The trial loop here is the single simulation code path; the race module
//! drives the same loop with a policy-backed mode rule, so policy-OFF races
//! reproduce these trials bit for bit.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KeyValueFile;
use crate::dynamics::{self, ControlInput, VehicleParams, VehicleState};
use crate::error::{Error, Result};
use crate::mpcc::{Mode, MpccConfig, Planner, SolveStatus};
use crate::opponent::{self, ObstacleState, Raceline};
use crate::track::{classify_portion, region_of, PortionKind, PortionSpec, Region, Track};

/// Deterministic lateral × longitudinal × speed grid of initial conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoeGrid {
    /// Lateral offsets as fractions of the local half-width, in (-1, 1).
    pub x_offsets: Vec<f64>,
    /// Longitudinal offsets as fractions of half the sampling-box length.
    pub y_offsets: Vec<f64>,
    /// Obstacle speed scales s, with speed `v_baseline * (1 + s)`.
    pub speed_scales: Vec<f64>,
    /// Sampling-box length behind the portion entry, m.
    pub box_length: f64,
    /// Ego start speed = obstacle scaled speed × this factor.
    pub ego_speed_factor: f64,
    /// Margin on the corridor-traversal time budget.
    pub t_sim_margin: f64,
    /// Minimum clearance to the track edge for a start to be valid, m.
    pub lateral_margin: f64,
}

impl Default for DoeGrid {
    fn default() -> Self {
        // 16 lateral, 12 longitudinal, 3 speed variations
        let x_offsets = (0..16).map(|i| -0.8 + 0.1 * i as f64).collect();
        let y_offsets = (0..12).map(|i| -0.6 + 0.1 * i as f64).collect();
        DoeGrid {
            x_offsets,
            y_offsets,
            speed_scales: vec![-0.2, 0.0, 0.2],
            box_length: 30.0,
            ego_speed_factor: 1.0,
            t_sim_margin: 0.2,
            lateral_margin: 1.2,
        }
    }
}

impl DoeGrid {
    pub fn trials_per_portion(&self) -> usize {
        self.x_offsets.len() * self.y_offsets.len() * self.speed_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_offsets.is_empty() || self.y_offsets.is_empty() || self.speed_scales.is_empty() {
            return Err(Error::input("grid must be nonempty in every dimension"));
        }
        if self.x_offsets.iter().chain(&self.y_offsets).any(|v| v.abs() >= 1.0) {
            return Err(Error::input("grid offsets must lie in (-1, 1)"));
        }
        if self.speed_scales.iter().any(|s| 1.0 + s <= 0.0) {
            return Err(Error::input("speed scale must keep 1 + s positive"));
        }
        if self.box_length <= 0.0 {
            return Err(Error::input("box_length must be positive"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValueFile) -> Result<Self> {
        let d = DoeGrid::default();
        let grid = DoeGrid {
            x_offsets: kv.f64_list_or("x_offsets", &d.x_offsets)?,
            y_offsets: kv.f64_list_or("y_offsets", &d.y_offsets)?,
            speed_scales: kv.f64_list_or("speed_scales", &d.speed_scales)?,
            box_length: kv.f64_or("box_length", d.box_length)?,
            ego_speed_factor: kv.f64_or("ego_speed_factor", d.ego_speed_factor)?,
            t_sim_margin: kv.f64_or("t_sim_margin", d.t_sim_margin)?,
            lateral_margin: kv.f64_or("lateral_margin", d.lateral_margin)?,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_kv(&KeyValueFile::load(path)?)
    }
}

/// One grid cell: the prepared initial condition of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInit {
    pub index: usize,
    pub tau: u32,
    pub x_frac: f64,
    pub y_frac: f64,
    pub speed_scale: f64,
    pub ego: VehicleState<f64>,
    pub obstacle: ObstacleState<f64>,
    pub region: Option<Region>,
    pub valid: bool,
    pub invalid_reason: Option<String>,
}

/// Raceline progress whose pose projects closest to the given track
/// progress; used to anchor the obstacle at a portion entry.
pub fn raceline_progress_at<T: crate::scalar::Real>(
    raceline: &Raceline<T>,
    track: &Track<T>,
    theta: T,
) -> Result<T> {
    let mut best_s = T::zero();
    let mut best_abs = T::infinity();
    let mut best_delta = T::zero();
    let mut hint: Option<T> = None;
    for p in raceline.samples() {
        let proj = track.project(p.x, p.y, hint)?;
        hint = Some(proj);
        let delta = track.signed_delta(proj, theta);
        if delta.abs() < best_abs {
            best_abs = delta.abs();
            best_s = p.s;
            best_delta = delta;
        }
    }
    // first-order refinement: raceline progress tracks arc length closely
    Ok(raceline.wrap(best_s + best_delta))
}

/// Generate the grid of initial conditions for one portion: the obstacle at
/// the portion entry on its raceline, the ego behind it inside the sampling
/// box, heading along the track tangent.
pub fn generate_initial_conditions(
    portion: &PortionSpec<f64>,
    grid: &DoeGrid,
    track: &Track<f64>,
    raceline: &Raceline<f64>,
    params: &VehicleParams<f64>,
) -> Result<Vec<TrialInit>> {
    grid.validate()?;
    let entry = track.wrap(portion.span.a);
    let obstacle_s = raceline_progress_at(raceline, track, entry)?;
    let mut out = Vec::with_capacity(grid.trials_per_portion());
    let mut index = 0;
    for &scale in &grid.speed_scales {
        for &y in &grid.y_offsets {
            for &x in &grid.x_offsets {
                let obstacle = opponent::obstacle_init(raceline, obstacle_s, scale);
                let theta_e = track.wrap(portion.theta_mid + y * grid.box_length * 0.5);
                let tp = track.lookup(theta_e);
                let lateral = x * tp.r;
                let (sin_phi, cos_phi) = tp.phi.sin_cos();
                let px = tp.x - lateral * sin_phi;
                let py = tp.y + lateral * cos_phi;
                let vx = (obstacle.v * grid.ego_speed_factor).max(params.vx_min * 4.0);
                let wheelbase = params.lf + params.lr;
                let ego = VehicleState {
                    x: px,
                    y: py,
                    phi: tp.phi,
                    vx,
                    vy: 0.0,
                    omega: vx * tp.kappa,
                    d: sustain_drive(vx, params),
                    delta: (wheelbase * tp.kappa).atan(),
                    theta: theta_e,
                };
                let (valid, invalid_reason, region) =
                    if lateral.abs() > tp.r - grid.lateral_margin {
                        (false, Some(format!("start {lateral:.2} m off-center exceeds the track margin")), None)
                    } else {
                        match region_of(track, portion, px, py) {
                            Ok(r) => (true, None, Some(r)),
                            Err(e) => (false, Some(e.to_string()), None),
                        }
                    };
                out.push(TrialInit {
                    index,
                    tau: portion.tau,
                    x_frac: x,
                    y_frac: y,
                    speed_scale: scale,
                    ego,
                    obstacle,
                    region,
                    valid,
                    invalid_reason,
                });
                index += 1;
            }
        }
    }
    Ok(out)
}

fn sustain_drive(v: f64, params: &VehicleParams<f64>) -> f64 {
    let denom = params.cm1 - params.cm2 * v;
    if denom <= 0.0 {
        return 1.0;
    }
    ((params.croll + params.cd * v * v) / denom).clamp(0.0, 1.0)
}

/// True iff the ego is ahead of the obstacle (cyclic, unwrapped across the
/// seam) while the obstacle's projection lies inside the corridor.
pub fn check_overtake(
    track: &Track<f64>,
    corridor: &crate::track::ThetaInterval<f64>,
    theta_ego: f64,
    theta_obs: f64,
) -> bool {
    corridor.contains(track, theta_obs) && track.signed_delta(theta_obs, theta_ego) > 0.0
}

/// One logged simulation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStep {
    pub t: f64,
    pub ego: [f64; dynamics::NX],
    /// Obstacle `[x, y, phi, s, v]`.
    pub obs: [f64; 5],
    pub mode: Mode,
    pub theta_ego: f64,
    pub theta_obs: f64,
    pub eps_c: f64,
    pub solver: SolveStatus,
    pub slack_used: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub n_steps: usize,
    pub n_optimal: usize,
    pub n_maxiter: usize,
    pub n_infeasible: usize,
    pub n_fallback: usize,
    pub max_kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub tau: u32,
    pub x_frac: f64,
    pub y_frac: f64,
    pub speed_scale: f64,
    pub region: Option<Region>,
    pub valid: bool,
    pub failed: bool,
    pub failure: Option<String>,
    pub overtake: bool,
    pub t_overtake: Option<f64>,
    pub stop_reason: String,
    pub solver: SolverStats,
    pub trajectory: Vec<LogStep>,
}

/// Everything a trial needs besides its initial condition.
pub struct SimSetup<'a> {
    pub track: &'a Track<f64>,
    pub portions: &'a [PortionSpec<f64>],
    pub raceline: &'a Raceline<f64>,
    pub params: &'a VehicleParams<f64>,
    pub mpcc: &'a MpccConfig<f64>,
}

/// How the mode is chosen each step.
#[derive(Clone, Copy)]
pub enum ModeRule<'a> {
    /// Plain obstacle-avoiding contouring control.
    Normal,
    /// Force one mode for the whole trial (test instrumentation).
    Fixed(Mode),
    /// Switched control: look up the learned policy for the portion the ego
    /// is in (optionally looking ahead along the track).
    Policy { policy: &'a PolicyMap, lookahead: f64 },
}

/// Time budget: obstacle traversal of entry→corridor-end at its scaled
/// speed, padded by the grid margin.
pub fn default_t_sim(
    track: &Track<f64>,
    portion: &PortionSpec<f64>,
    raceline: &Raceline<f64>,
    speed_scale: f64,
    margin: f64,
) -> f64 {
    let dist = {
        let d = track.wrap(portion.corridor.b - portion.span.a);
        if d == 0.0 {
            track.length()
        } else {
            d
        }
    };
    // integrate ds/v along the baseline profile, sampled every meter
    let s0 = raceline_progress_at(raceline, track, portion.span.a).unwrap_or(portion.span.a);
    let steps = dist.ceil() as usize;
    let mut t = 0.0;
    for i in 0..steps {
        let v = raceline.interp(s0 + i as f64).v;
        t += 1.0 / v.max(1.0);
    }
    t / (1.0 + speed_scale) * (1.0 + margin)
}

/// Simulate one trial: plan, apply the first input, advance the obstacle,
/// re-plan, until the corridor is decided or the budget runs out.
pub fn run_trial(
    setup: &SimSetup<'_>,
    init: &TrialInit,
    rule: ModeRule<'_>,
    t_sim: f64,
) -> TrialRecord {
    let mut record = TrialRecord {
        index: init.index,
        tau: init.tau,
        x_frac: init.x_frac,
        y_frac: init.y_frac,
        speed_scale: init.speed_scale,
        region: init.region,
        valid: init.valid,
        failed: false,
        failure: None,
        overtake: false,
        t_overtake: None,
        stop_reason: String::new(),
        solver: SolverStats::default(),
        trajectory: Vec::new(),
    };
    if !init.valid {
        record.stop_reason = "invalid initial condition".into();
        return record;
    }
    let portion = setup
        .portions
        .iter()
        .find(|p| p.tau == init.tau)
        .expect("trial portion exists");

    let mut planner = match Planner::new(setup.mpcc.clone(), setup.params.clone()) {
        Ok(p) => p,
        Err(e) => {
            record.failed = true;
            record.failure = Some(e.to_string());
            return record;
        }
    };
    let dt = setup.mpcc.dt;
    let n = setup.mpcc.n_horizon;
    let steps = (t_sim / dt).ceil() as usize;
    let mut ego = init.ego;
    let mut obs = init.obstacle;
    let mut ego_hint = ego.theta;
    let mut obs_hint = obs.s;
    let mut consecutive_bad = 0usize;
    let mut last_input = ControlInput::<f64>::zero();
    let mut obs_was_inside = false;

    for step_idx in 0..steps {
        let t = step_idx as f64 * dt;

        let theta_ego = match setup.track.project(ego.x, ego.y, Some(ego_hint)) {
            Ok(v) => v,
            Err(e) => {
                record.failed = true;
                record.failure = Some(format!("ego left the track band: {e}"));
                record.stop_reason = "off-track".into();
                break;
            }
        };
        ego_hint = theta_ego;
        let theta_obs = match setup.track.project(obs.x, obs.y, Some(obs_hint)) {
            Ok(v) => v,
            Err(e) => {
                record.failed = true;
                record.failure = Some(format!("obstacle projection failed: {e}"));
                record.stop_reason = "obstacle-off-track".into();
                break;
            }
        };
        obs_hint = theta_obs;

        let mode = match rule {
            ModeRule::Normal => Mode::Normal,
            ModeRule::Fixed(m) => m,
            ModeRule::Policy { policy, lookahead } => {
                let probe = theta_ego + lookahead;
                match classify_portion(setup.track, setup.portions, probe) {
                    Some(p) => {
                        let (eps_c, _) =
                            setup.track.contouring_errors(theta_ego, ego.x, ego.y);
                        policy.mode_for(p.tau, eps_c >= 0.0)
                    }
                    None => Mode::Normal,
                }
            }
        };

        let pred = opponent::predict_horizon(setup.raceline, &obs, init.speed_scale, dt, n);
        let plan = planner.plan(&ego, setup.track, Some(&pred), mode);
        record.solver.n_steps += 1;

        let (input, status, slack_used) = match plan {
            Ok(sol) => {
                record.solver.max_kkt_residual =
                    record.solver.max_kkt_residual.max(sol.kkt_residual);
                match sol.status {
                    SolveStatus::Optimal => record.solver.n_optimal += 1,
                    SolveStatus::MaxIter => record.solver.n_maxiter += 1,
                    SolveStatus::Infeasible => record.solver.n_infeasible += 1,
                }
                // a best-effort iterate with a moderate residual still
                // steers better than braking blind
                let usable = sol.status != SolveStatus::Infeasible
                    && sol.kkt_residual.is_finite()
                    && sol.kkt_residual <= 0.5
                    && sol.u_star.to_array().iter().all(|v| v.is_finite());
                if usable {
                    consecutive_bad = 0;
                    last_input = sol.u_star;
                    (sol.u_star, sol.status, sol.slack_used)
                } else {
                    record.solver.n_fallback += 1;
                    consecutive_bad += 1;
                    // brake-off fallback: bleed the drive command
                    let fb = ControlInput {
                        d_dot: (-0.2 * ego.d / dt).max(-2.0),
                        delta_dot: 0.0,
                        theta_dot: last_input.theta_dot.max(0.0),
                    };
                    (fb, sol.status, sol.slack_used)
                }
            }
            Err(e) => {
                record.failed = true;
                record.failure = Some(format!("planner error: {e}"));
                record.stop_reason = "planner-error".into();
                break;
            }
        };
        if consecutive_bad >= 25 {
            record.failed = true;
            record.failure = Some("solver failed 25 consecutive steps".into());
            record.stop_reason = "solver-stuck".into();
            break;
        }

        // steer the ego with the first input, advance the obstacle
        ego = match dynamics::integrate_substeps(
            &ego,
            &input,
            setup.params,
            dt,
            setup.mpcc.max_substep,
        ) {
            Ok(s) if s.is_finite() => s,
            _ => {
                record.failed = true;
                record.failure = Some("ego integration diverged".into());
                record.stop_reason = "integration-error".into();
                break;
            }
        };
        obs = opponent::obstacle_step(setup.raceline, &obs, init.speed_scale, dt);

        let (eps_c, _) = setup.track.contouring_errors(theta_ego, ego.x, ego.y);
        record.trajectory.push(LogStep {
            t,
            ego: ego.to_array(),
            obs: [obs.x, obs.y, obs.phi, obs.s, obs.v],
            mode,
            theta_ego,
            theta_obs,
            eps_c,
            solver: status,
            slack_used,
        });

        // outcome bookkeeping on the post-step states
        let theta_ego_post = setup.track.project(ego.x, ego.y, Some(ego_hint)).unwrap_or(theta_ego);
        let theta_obs_post = setup.track.project(obs.x, obs.y, Some(obs_hint)).unwrap_or(theta_obs);
        let inside = portion.corridor.contains(setup.track, theta_obs_post);
        if inside {
            obs_was_inside = true;
        }
        if check_overtake(setup.track, &portion.corridor, theta_ego_post, theta_obs_post) {
            record.overtake = true;
            record.t_overtake = Some(t + dt);
            record.stop_reason = "overtake".into();
            break;
        }
        if obs_was_inside && !inside {
            record.stop_reason = "corridor-exit".into();
            break;
        }
    }
    if record.stop_reason.is_empty() {
        record.stop_reason = "time-budget".into();
    }
    record
}

/// Run every grid cell of one portion (rayon-parallel, output ordered by
/// trial index regardless of the worker count).
pub fn run_portion_trials(
    setup: &SimSetup<'_>,
    portion: &PortionSpec<f64>,
    grid: &DoeGrid,
    rule: ModeRule<'_>,
) -> Result<Vec<TrialRecord>> {
    let inits = generate_initial_conditions(portion, grid, setup.track, setup.raceline, setup.params)?;
    let records: Vec<TrialRecord> = inits
        .par_iter()
        .map(|init| {
            let t_sim = default_t_sim(
                setup.track,
                portion,
                setup.raceline,
                init.speed_scale,
                grid.t_sim_margin,
            );
            run_trial(setup, init, rule, t_sim)
        })
        .collect();
    Ok(records)
}

// ---------------------------------------------------------------------------
// Policy learning
// ---------------------------------------------------------------------------

pub const POLICY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub tau: u32,
    pub kind: PortionKind,
    /// Empirical overtake probability per region; None where no valid trial
    /// landed in the region.
    pub p: [Option<f64>; 4],
    pub overtakes: [u32; 4],
    pub totals: [u32; 4],
    /// Failed-solver trials per region, excluded from the denominators.
    pub failed: [u32; 4],
    /// Argmax region (ties break to the lowest region index); None when the
    /// portion had no usable trials at all.
    pub chosen: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMap {
    pub schema_version: u32,
    pub entries: BTreeMap<u32, PolicyEntry>,
}

impl PolicyMap {
    pub fn target_region(&self, tau: u32) -> Option<Region> {
        self.entries.get(&tau).and_then(|e| e.chosen)
    }

    /// Mode for the switched controller: the lateral half of the target
    /// region drives the restriction; Normal once the ego is already there
    /// or when no policy exists for the portion.
    pub fn mode_for(&self, tau: u32, ego_is_left: bool) -> Mode {
        match self.target_region(tau) {
            None => Mode::Normal,
            Some(region) => {
                if region.is_left() {
                    if ego_is_left {
                        Mode::Normal
                    } else {
                        Mode::DriveLeft
                    }
                } else if ego_is_left {
                    Mode::DriveRight
                } else {
                    Mode::Normal
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::numerical(format!("policy serialization: {e}")))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        let map: PolicyMap = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("malformed policy file: {e}")))?;
        if map.schema_version != POLICY_SCHEMA_VERSION {
            return Err(Error::input(format!(
                "policy schema version {} unsupported (expected {})",
                map.schema_version, POLICY_SCHEMA_VERSION
            )));
        }
        Ok(map)
    }
}

/// Aggregate per-region empirical overtake probabilities and the argmax
/// policy. Failed-solver trials are excluded from the denominators.
pub fn learn_policy(records: &[(u32, PortionKind, &[TrialRecord])]) -> PolicyMap {
    let mut entries = BTreeMap::new();
    for &(tau, kind, recs) in records {
        let mut overtakes = [0u32; 4];
        let mut totals = [0u32; 4];
        let mut failed = [0u32; 4];
        for r in recs {
            let Some(region) = r.region else { continue };
            if !r.valid {
                continue;
            }
            let i = region.index();
            if r.failed {
                failed[i] += 1;
                continue;
            }
            totals[i] += 1;
            if r.overtake {
                overtakes[i] += 1;
            }
        }
        let mut p = [None; 4];
        for i in 0..4 {
            if totals[i] > 0 {
                p[i] = Some(overtakes[i] as f64 / totals[i] as f64);
            }
        }
        let chosen = p
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|pv| (i, pv)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| Region::from_index(i));
        entries.insert(tau, PolicyEntry { tau, kind, p, overtakes, totals, failed, chosen });
    }
    PolicyMap { schema_version: POLICY_SCHEMA_VERSION, entries }
}
