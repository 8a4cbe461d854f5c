use contour_race::dynamics::VehicleParams;
use contour_race::experiments::{self, DoeGrid, ModeRule, SimSetup};
use contour_race::mpcc::MpccConfig;
use contour_race::opponent;
use contour_race::race::{self, RaceConfig};
use contour_race::track::{PortionSpec, Region, Track};

fn main() {
    let data = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let track = Track::<f64>::load_centerline_csv(data.join("fixture_track.csv"), 0.5).unwrap();
    let params = VehicleParams::<f64>::from_file(data.join("fixture_vehicle.cfg")).unwrap();
    let mpcc = MpccConfig::<f64>::from_file(data.join("fixture_solver.cfg")).unwrap();
    let grid = DoeGrid::from_file(data.join("fixture_grid.cfg")).unwrap();
    let portions_text = std::fs::read_to_string(data.join("fixture_portions.csv")).unwrap();
    let portions = PortionSpec::parse_csv(&track, &portions_text, grid.box_length).unwrap();
    let raceline = opponent::offset_raceline(&track, 0.45, 0.85, 0.02, 0.03, 11.5, 20.0, 4.5);
    raceline.save_csv(data.join("fixture_raceline.csv")).unwrap();
    let setup = SimSetup { track: &track, portions: &portions, raceline: &raceline, params: &params, mpcc: &mpcc };

    let t0 = std::time::Instant::now();
    let mut per_portion = Vec::new();
    for portion in &portions {
        let recs = experiments::run_portion_trials(&setup, portion, &grid, ModeRule::Normal).unwrap();
        per_portion.push((portion.tau, portion.kind, recs));
    }
    println!("DoE wall: {:.1} s", t0.elapsed().as_secs_f64());

    // per-region tables + speed monotonicity
    for (tau, kind, recs) in &per_portion {
        let mut by_scale = std::collections::BTreeMap::new();
        for r in recs {
            if !r.valid || r.failed { continue; }
            let e = by_scale.entry((r.speed_scale * 10.0) as i64).or_insert((0u32, 0u32));
            e.1 += 1;
            if r.overtake { e.0 += 1; }
        }
        println!("portion {tau} ({kind:?}): per-scale ot/total {:?}", by_scale);
    }
    let refs: Vec<(u32, contour_race::track::PortionKind, &[experiments::TrialRecord])> =
        per_portion.iter().map(|(t, k, r)| (*t, *k, r.as_slice())).collect();
    let policy = experiments::learn_policy(&refs);
    for (tau, e) in &policy.entries {
        println!(
            "policy {tau}: p {:?} totals {:?} failed {:?} chosen {:?}",
            e.p.iter().map(|p| p.map(|v| (v * 100.0).round() / 100.0)).collect::<Vec<_>>(),
            e.totals, e.failed, e.chosen.map(|r| r.label())
        );
    }

    let t1 = std::time::Instant::now();
    let cmp = race::compare_policies(&setup, &grid, &policy, &RaceConfig { lookahead: 25.0 }).unwrap();
    println!("comparison wall: {:.1} s", t1.elapsed().as_secs_f64());
    println!("{}", race::comparison_csv(&cmp.rows));
    let _ = Region::ALL;
}
