//! Online switched contouring control: race trials with per-portion policy
//! lookup, and batch comparisons of overtake counts with the policy on and
//! off. Policy-off batches share the trial code path with the experiments
//! module, so they reproduce its results exactly.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiments::{
    run_portion_trials, DoeGrid, ModeRule, PolicyMap, SimSetup, TrialInit, TrialRecord,
};
use crate::mpcc::Mode;
use crate::track::{PortionKind, PortionSpec, Region};

/// Mode for the switched controller given the learned target region and the
/// ego's current lateral half. Only the lateral component of the target is
/// commandable by a side restriction.
pub fn mode_from_policy(target: Region, ego_is_left: bool) -> Mode {
    if target.is_left() {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    /// Distance ahead of the ego at which the portion is identified for the
    /// policy lookup; 0 uses the portion the ego is currently in.
    pub lookahead: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig { lookahead: 0.0 }
    }
}

/// One race trial. With a policy the mode switches per portion; without one
/// this is exactly an experiments trial.
pub fn run_race(
    setup: &SimSetup<'_>,
    init: &TrialInit,
    policy: Option<&PolicyMap>,
    config: &RaceConfig,
    t_sim: f64,
) -> TrialRecord {
    let rule = match policy {
        Some(p) => ModeRule::Policy { policy: p, lookahead: config.lookahead },
        None => ModeRule::Normal,
    };
    crate::experiments::run_trial(setup, init, rule, t_sim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub tau: u32,
    pub kind: PortionKind,
    pub overtakes_off: u32,
    pub overtakes_on: u32,
    pub trials: u32,
    pub failed_off: u32,
    pub failed_on: u32,
}

#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub rows: Vec<ComparisonRow>,
    pub records_off: Vec<(u32, Vec<TrialRecord>)>,
    pub records_on: Vec<(u32, Vec<TrialRecord>)>,
}

/// Run the full grid twice per portion (policy off, then on) and tabulate
/// the overtake counts.
pub fn compare_policies(
    setup: &SimSetup<'_>,
    grid: &DoeGrid,
    policy: &PolicyMap,
    config: &RaceConfig,
) -> Result<ComparisonOutcome> {
    let mut rows = Vec::new();
    let mut records_off = Vec::new();
    let mut records_on = Vec::new();
    for portion in setup.portions {
        let off = run_portion_trials(setup, portion, grid, ModeRule::Normal)?;
        let on = run_portion_trials(
            setup,
            portion,
            grid,
            ModeRule::Policy { policy, lookahead: config.lookahead },
        )?;
        rows.push(tabulate(portion, &off, &on));
        records_off.push((portion.tau, off));
        records_on.push((portion.tau, on));
    }
    Ok(ComparisonOutcome { rows, records_off, records_on })
}

fn tabulate(portion: &PortionSpec<f64>, off: &[TrialRecord], on: &[TrialRecord]) -> ComparisonRow {
    let count = |records: &[TrialRecord]| -> (u32, u32, u32) {
        let mut overtakes = 0;
        let mut trials = 0;
        let mut failed = 0;
        for r in records {
            if !r.valid {
                continue;
            }
            if r.failed {
                failed += 1;
                continue;
            }
            trials += 1;
            if r.overtake {
                overtakes += 1;
            }
        }
        (overtakes, trials, failed)
    };
    let (off_ov, off_trials, off_failed) = count(off);
    let (on_ov, on_trials, on_failed) = count(on);
    ComparisonRow {
        tau: portion.tau,
        kind: portion.kind,
        overtakes_off: off_ov,
        overtakes_on: on_ov,
        trials: off_trials.min(on_trials),
        failed_off: off_failed,
        failed_on: on_failed,
    }
}

/// Comparison table in the `tau,kind,overtakes_off,overtakes_on,trials` CSV
/// layout.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("tau,kind,overtakes_off,overtakes_on,trials\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.tau,
            r.kind.name(),
            r.overtakes_off,
            r.overtakes_on,
            r.trials
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_rule_application() {
        // target R1 (front-left), ego on the right half -> DriveLeft
        assert_eq!(mode_from_policy(Region::R1, false), Mode::DriveLeft);
        // target R2 (front-right), ego already right -> Normal
        assert_eq!(mode_from_policy(Region::R2, false), Mode::Normal);
        assert_eq!(mode_from_policy(Region::R2, true), Mode::DriveRight);
        // back regions drive the same lateral halves
        assert_eq!(mode_from_policy(Region::R4, false), Mode::DriveLeft);
        assert_eq!(mode_from_policy(Region::R3, true), Mode::DriveRight);
    }

    #[test]
    fn comparison_csv_layout() {
        let rows = vec![ComparisonRow {
            tau: 4,
            kind: PortionKind::Hairpin,
            overtakes_off: 10,
            overtakes_on: 20,
            trials: 72,
            failed_off: 0,
            failed_on: 0,
        }];
        let csv = comparison_csv(&rows);
        assert_eq!(
            csv,
            "tau,kind,overtakes_off,overtakes_on,trials\n4,hairpin,10,20,72\n"
        );
    }
}
