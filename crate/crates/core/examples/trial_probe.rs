use contour_race::dynamics::VehicleParams;
use contour_race::experiments::{self, DoeGrid, ModeRule, SimSetup};
use contour_race::mpcc::MpccConfig;
use contour_race::opponent;
use contour_race::track::{PortionSpec, Track};

fn main() {
    let data = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let track = Track::<f64>::load_centerline_csv(data.join("fixture_track.csv"), 0.5).unwrap();
    let params = VehicleParams::<f64>::from_file(data.join("fixture_vehicle.cfg")).unwrap();
    let mpcc = MpccConfig::<f64>::from_file(data.join("fixture_solver.cfg")).unwrap();
    let grid = DoeGrid::from_file(data.join("fixture_grid.cfg")).unwrap();
    let portions_text = std::fs::read_to_string(data.join("fixture_portions.csv")).unwrap();
    let portions = PortionSpec::parse_csv(&track, &portions_text, grid.box_length).unwrap();
    let raceline = opponent::fallback_speed_profile(&track, 10.0, 18.0, 4.0);
    println!("raceline v in [{:.1}, {:.1}]", raceline.min_speed(),
        raceline.samples().iter().fold(0.0f64, |m, p| m.max(p.v)));

    let setup = SimSetup { track: &track, portions: &portions, raceline: &raceline, params: &params, mpcc: &mpcc };

    let t0 = std::time::Instant::now();
    for portion in &portions {
        let inits = experiments::generate_initial_conditions(portion, &grid, &track, &raceline, &params).unwrap();
        // subsample: one lateral sweep at y=-0.2, all 3 speeds
        let subset: Vec<_> = inits.iter().filter(|i| (i.y_frac - 0.2).abs() < 1e-9).collect();
        let mut lines = Vec::new();
        for init in &subset {
            let t_sim = experiments::default_t_sim(&track, portion, &raceline, init.speed_scale, grid.t_sim_margin);
            let rec = experiments::run_trial(&setup, init, ModeRule::Normal, t_sim);
            lines.push(format!(
                "  x={:+.2} s={:+.1} region {:?} -> ot={} ({}) steps {} opt {} fallb {} maxkkt {:.1e}{}",
                init.x_frac, init.speed_scale,
                init.region.map(|r| r.label()).unwrap_or("-"),
                rec.overtake as u8, rec.stop_reason, rec.solver.n_steps,
                rec.solver.n_optimal, rec.solver.n_fallback, rec.solver.max_kkt_residual,
                if rec.failed { format!(" FAILED: {}", rec.failure.clone().unwrap_or_default()) } else { String::new() },
            ));
        }
        println!("portion {} ({:?}):", portion.tau, portion.kind);
        for l in lines { println!("{l}"); }
    }
    println!("wall: {:.1} s", t0.elapsed().as_secs_f64());
}
