//! Shared helpers for the integration tests: deterministic pseudo-random
//! numbers, a dense LU for test-side oracles, and fixture loading.

use std::path::PathBuf;

use contour_race::track::Track;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn fixture_track() -> Track<f64> {
    Track::load_centerline_csv(data_dir().join("fixture_track.csv"), 0.5)
        .expect("fixture track builds")
}

/// Deterministic unit-interval sample (LCG); good enough for test sweeps.
pub fn lcg_uniform(seed: &mut u64) -> f64 {
    *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
}

/// Dense LU with partial pivoting, used only inside test oracles.
pub struct Lu;

impl Lu {
    /// Solve `A x = b`; returns None on (near-)singularity.
    pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for (i, row) in a.iter().enumerate() {
            debug_assert_eq!(row.len(), n, "row {i} length");
        }
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col][col].abs();
            for r in (col + 1)..n {
                if a[r][col].abs() > best {
                    best = a[r][col].abs();
                    piv = r;
                }
            }
            if best < 1e-11 {
                return None;
            }
            if piv != col {
                a.swap(col, piv);
                b.swap(col, piv);
            }
            let diag = a[col][col];
            for r in (col + 1)..n {
                let factor = a[r][col] / diag;
                if factor == 0.0 {
                    continue;
                }
                for c in col..n {
                    a[r][c] -= factor * a[col][c];
                }
                b[r] -= factor * b[col];
            }
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in (i + 1)..n {
                acc -= a[i][j] * b[j];
            }
            b[i] = acc / a[i][i];
        }
        Some(b)
    }
}
