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
    let raceline = opponent::offset_raceline(&track, 0.45, 0.85, 0.02, 0.03, 11.5, 20.0, 4.5);
    let setup = SimSetup { track: &track, portions: &portions, raceline: &raceline, params: &params, mpcc: &mpcc };
    let hairpin = portions.iter().find(|p| p.tau == 4).unwrap();
    let inits = experiments::generate_initial_conditions(hairpin, &grid, &track, &raceline, &params).unwrap();

    // fake policy: target R1 (left) for portion 4
    let mut policy = experiments::learn_policy(&[]);
    policy.entries.insert(4, experiments::PolicyEntry {
        tau: 4, kind: contour_race::track::PortionKind::Hairpin,
        p: [Some(1.0), None, None, None], overtakes: [1,0,0,0], totals: [1,0,0,0], failed: [0;4],
        chosen: Some(contour_race::track::Region::R1),
    });

    for init in inits.iter().filter(|i| i.valid && i.speed_scale == 0.0 && i.x_frac > 0.3 && i.x_frac < 0.6) {
        let t_sim = experiments::default_t_sim(&track, hairpin, &raceline, init.speed_scale, grid.t_sim_margin);
        for (name, rule) in [("OFF", ModeRule::Normal), ("ON ", ModeRule::Policy { policy: &policy, lookahead: 25.0 })] {
            let rec = experiments::run_trial(&setup, init, rule, t_sim);
            let modes: Vec<&str> = rec.trajectory.iter().map(|l| match l.mode {
                contour_race::mpcc::Mode::Normal => "N",
                contour_race::mpcc::Mode::DriveLeft => "L",
                contour_race::mpcc::Mode::DriveRight => "R",
            }).collect();
            let ecs: Vec<f64> = rec.trajectory.iter().map(|l| (l.eps_c * 10.0).round() / 10.0).collect();
            println!("x={:+.2} y={:+.2} {name}: ot={} ({}), fallb {}, modes {}", init.x_frac, init.y_frac,
                rec.overtake as u8, rec.stop_reason, rec.solver.n_fallback, modes.join(""));
            println!("   eps_c: {:?}", &ecs[..ecs.len().min(40)]);
        }
    }
}
