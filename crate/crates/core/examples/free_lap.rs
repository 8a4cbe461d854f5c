//! Drive one free lap of the fixture track and print progress/violation
//! diagnostics. `cargo run --release -p contour-race --example free_lap`

use std::time::Instant;

use contour_race::dynamics::{self, VehicleParams, VehicleState};
use contour_race::mpcc::{Mode, MpccConfig, Planner, SolveStatus};
use contour_race::opponent;
use contour_race::track::Track;

fn main() {
    let data = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let track = Track::<f64>::load_centerline_csv(data.join("fixture_track.csv"), 0.5).unwrap();
    let params = VehicleParams::<f64>::from_file(data.join("fixture_vehicle.cfg")).unwrap();
    let config = MpccConfig::<f64>::from_file(data.join("fixture_solver.cfg")).unwrap();
    println!(
        "track: L = {:.1} m, closure {:.2e} m, arc dev {:.2e}",
        track.length(),
        track.diagnostics().closure_position,
        track.diagnostics().max_arc_deviation
    );

    let profile = opponent::fallback_speed_profile(&track, 11.0, 21.0, 5.0);
    println!(
        "fallback profile: v in [{:.1}, {:.1}] m/s",
        profile.min_speed(),
        profile.samples().iter().fold(0.0f64, |m, p| m.max(p.v))
    );

    let mut planner = Planner::new(config.clone(), params.clone()).unwrap();
    let tp = track.lookup(0.0);
    let mut ego = VehicleState {
        x: tp.x,
        y: tp.y,
        phi: tp.phi,
        vx: 12.0,
        vy: 0.0,
        omega: 0.0,
        d: 0.3,
        delta: 0.0,
        theta: 0.0,
    };

    let dt = config.dt;
    let mut t = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut min_margin_theta = 0.0;
    let mut n_optimal = 0usize;
    let mut n_other = 0usize;
    let mut max_solve_ms = 0.0f64;
    let mut total_solve_ms = 0.0f64;
    let mut steps = 0usize;
    let mut theta_prev = 0.0f64;
    let mut monotone = true;
    let mut vmax_seen = 0.0f64;
    let mut vmin_seen = f64::INFINITY;
    let start = Instant::now();

    while ego.theta < track.length() && t < 120.0 {
        let t0 = Instant::now();
        let sol = planner.plan(&ego, &track, None, Mode::Normal).unwrap();
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        max_solve_ms = max_solve_ms.max(ms);
        total_solve_ms += ms;
        match sol.status {
            SolveStatus::Optimal => n_optimal += 1,
            _ => {
                n_other += 1;
                if n_other < 8 {
                    println!(
                        "t={t:.2} status {:?} kkt {:.2e} theta {:.1} vx {:.1}",
                        sol.status, sol.kkt_residual, ego.theta, ego.vx
                    );
                }
            }
        }
        ego = dynamics::integrate_substeps(&ego, &sol.u_star, &params, dt, config.max_substep)
            .unwrap();
        t += dt;
        steps += 1;

        let theta_proj = track.project(ego.x, ego.y, Some(ego.theta)).unwrap();
        let tp = track.lookup(theta_proj);
        let dist = ((ego.x - tp.x).powi(2) + (ego.y - tp.y).powi(2)).sqrt();
        let excess = dist - tp.r;
        if excess > worst_excess {
            worst_excess = excess;
            min_margin_theta = theta_proj;
        }
        if ego.theta < theta_prev - 1e-9 {
            monotone = false;
        }
        theta_prev = ego.theta;
        vmax_seen = vmax_seen.max(ego.vx);
        vmin_seen = vmin_seen.min(ego.vx);
    }

    println!(
        "lap: {} steps, {:.1} s simulated, theta {:.1}/{:.1}",
        steps,
        t,
        ego.theta,
        track.length()
    );
    println!("speeds: vx in [{vmin_seen:.1}, {vmax_seen:.1}] m/s");
    println!(
        "boundary: worst (dist - r) = {:.3} m at theta {:.1}",
        worst_excess, min_margin_theta
    );
    println!("theta monotone: {monotone}");
    println!(
        "solver: {} optimal / {} other, mean {:.2} ms, max {:.2} ms, wall {:.1} s",
        n_optimal,
        n_other,
        total_solve_ms / steps.max(1) as f64,
        max_solve_ms,
        start.elapsed().as_secs_f64()
    );
}
