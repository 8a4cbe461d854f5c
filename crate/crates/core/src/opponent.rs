//! Non-interactive opponent: a kinematic vehicle tracking a pre-computed
//! raceline at a scaled speed. Also provides the curvature-capped speed
//! profile used when no optimized raceline file is supplied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::track::{wrap_angle, Track};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RacelineSample<T> {
    pub s: T,
    pub x: T,
    pub y: T,
    pub phi: T,
    pub v: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raceline<T> {
    samples: Vec<RacelineSample<T>>,
    /// Cyclic total length: last sample progress plus the closing gap.
    length: T,
}

impl<T: Real> Raceline<T> {
    pub fn new(samples: Vec<RacelineSample<T>>) -> Result<Self> {
        if samples.len() < 4 {
            return Err(Error::input("raceline needs at least 4 samples"));
        }
        let s0 = samples[0].s;
        let mut normalized = samples;
        for smp in normalized.iter_mut() {
            smp.s = smp.s - s0;
        }
        let mut max_gap = T::zero();
        for w in normalized.windows(2) {
            if !(w[1].s > w[0].s) {
                return Err(Error::input("raceline progress must be strictly increasing"));
            }
            max_gap = max_gap.max(w[1].s - w[0].s);
        }
        if normalized.iter().any(|p| !(p.v > T::zero())) {
            return Err(Error::input("raceline baseline speed must be positive"));
        }
        let first = normalized[0];
        let last = *normalized.last().unwrap();
        let closing =
            ((last.x - first.x) * (last.x - first.x) + (last.y - first.y) * (last.y - first.y))
                .sqrt();
        if closing > T::lit(3.0) * max_gap {
            return Err(Error::input(
                "raceline does not close: gap between last and first sample is too large",
            ));
        }
        let length = last.s + closing.max(T::lit(1e-9));
        Ok(Raceline { samples: normalized, length })
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn samples(&self) -> &[RacelineSample<T>] {
        &self.samples
    }

    pub fn wrap(&self, s: T) -> T {
        let mut w = s % self.length;
        if w < T::zero() {
            w += self.length;
        }
        if w >= self.length {
            w -= self.length;
        }
        w
    }

    /// Interpolated pose and baseline speed at progress `s` (wrapped).
    pub fn interp(&self, s: T) -> RacelineSample<T> {
        let w = self.wrap(s);
        let n = self.samples.len();
        // binary search for the segment containing w
        let mut lo = 0usize;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.samples[mid].s <= w {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = &self.samples[lo];
        let (b, seg_end) = if lo + 1 < n {
            (&self.samples[lo + 1], self.samples[lo + 1].s)
        } else {
            (&self.samples[0], self.length)
        };
        let seg = (seg_end - a.s).max(T::lit(1e-12));
        let frac = ((w - a.s) / seg).max(T::zero()).min(T::one());
        RacelineSample {
            s: w,
            x: a.x + (b.x - a.x) * frac,
            y: a.y + (b.y - a.y) * frac,
            phi: wrap_angle(a.phi + wrap_angle(b.phi - a.phi) * frac),
            v: a.v + (b.v - a.v) * frac,
        }
    }

    /// Parse the raceline CSV `s_m,x_m,y_m,psi_rad,vx_mps`.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        let expect = "s_m,x_m,y_m,psi_rad,vx_mps";
        if header.split(',').map(|c| c.trim()).collect::<Vec<_>>()
            != expect.split(',').collect::<Vec<_>>()
        {
            return Err(Error::input(format!("raceline CSV header must be `{expect}`")));
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
            if fields.len() != 5 {
                return Err(Error::input(format!(
                    "raceline CSV line {}: need 5 fields",
                    lineno + 1
                )));
            }
            let mut vals = [0.0f64; 5];
            for (i, f) in fields.iter().enumerate() {
                vals[i] = f
                    .parse::<f64>()
                    .map_err(|e| Error::input(format!("raceline CSV line {}: {e}", lineno + 1)))?;
            }
            samples.push(RacelineSample {
                s: T::lit(vals[0]),
                x: T::lit(vals[1]),
                y: T::lit(vals[2]),
                phi: T::lit(vals[3]),
                v: T::lit(vals[4]),
            });
        }
        Raceline::new(samples)
    }

    pub fn load_csv(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("s_m,x_m,y_m,psi_rad,vx_mps\n");
        for p in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.s.to_f64_lossy(),
                p.x.to_f64_lossy(),
                p.y.to_f64_lossy(),
                p.phi.to_f64_lossy(),
                p.v.to_f64_lossy()
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_csv())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
    }

    /// Slowest baseline speed along the whole line.
    pub fn min_speed(&self) -> T {
        self.samples.iter().fold(T::infinity(), |m, p| m.min(p.v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState<T> {
    pub x: T,
    pub y: T,
    pub phi: T,
    /// Progress along the raceline, m.
    pub s: T,
    /// Current (scaled) speed, m/s.
    pub v: T,
}

/// Place the obstacle on the raceline at progress `s0`.
pub fn obstacle_init<T: Real>(raceline: &Raceline<T>, s0: T, speed_scale: T) -> ObstacleState<T> {
    let p = raceline.interp(s0);
    ObstacleState { x: p.x, y: p.y, phi: p.phi, s: p.s, v: p.v * (T::one() + speed_scale) }
}

/// Advance the obstacle along its raceline by one step: the progress rate is
/// the local baseline speed times `(1 + speed_scale)`; the path itself is
/// unchanged.
pub fn obstacle_step<T: Real>(
    raceline: &Raceline<T>,
    state: &ObstacleState<T>,
    speed_scale: T,
    dt: T,
) -> ObstacleState<T> {
    debug_assert!(dt > T::zero());
    let v_base = raceline.interp(state.s).v;
    let s_new = raceline.wrap(state.s + v_base * (T::one() + speed_scale) * dt);
    let p = raceline.interp(s_new);
    ObstacleState { x: p.x, y: p.y, phi: p.phi, s: s_new, v: p.v * (T::one() + speed_scale) }
}

/// Predicted obstacle positions over a planner horizon (constant scale),
/// including the current position at index 0.
pub fn predict_horizon<T: Real>(
    raceline: &Raceline<T>,
    state: &ObstacleState<T>,
    speed_scale: T,
    dt: T,
    n: usize,
) -> Vec<(T, T)> {
    let mut out = Vec::with_capacity(n + 1);
    let mut cur = *state;
    out.push((cur.x, cur.y));
    for _ in 0..n {
        cur = obstacle_step(raceline, &cur, speed_scale, dt);
        out.push((cur.x, cur.y));
    }
    out
}

/// Curvature-capped speed profile over the track centerline, smoothed by
/// forward/backward acceleration-limited passes (run twice around for the
/// cyclic boundary). Returns a raceline on the centerline.
pub fn fallback_speed_profile<T: Real>(
    track: &Track<T>,
    a_lat_max: T,
    v_max: T,
    a_long_max: T,
) -> Raceline<T> {
    let entries = track.entries();
    let n = entries.len();
    let ds = track.step();
    let kappa_floor = T::lit(1e-4);
    let mut v: Vec<T> = entries
        .iter()
        .map(|e| {
            let k = e.kappa.abs().max(kappa_floor);
            (a_lat_max / k).sqrt().min(v_max)
        })
        .collect();
    // forward pass (acceleration limit), two laps for the wrap
    for lap in 0..2 {
        for i in 0..n {
            let j = (i + 1) % n;
            let cap = (v[i] * v[i] + T::lit(2.0) * a_long_max * ds).sqrt();
            if v[j] > cap {
                v[j] = cap;
            }
            let _ = lap;
        }
    }
    // backward pass (braking limit), two laps
    for _ in 0..2 {
        for i in (0..n).rev() {
            let j = (i + 1) % n;
            let cap = (v[j] * v[j] + T::lit(2.0) * a_long_max * ds).sqrt();
            if v[i] > cap {
                v[i] = cap;
            }
        }
    }
    let samples: Vec<RacelineSample<T>> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| RacelineSample {
            s: T::from_usize(i).unwrap() * ds,
            x: e.x,
            y: e.y,
            phi: e.phi,
            v: v[i],
        })
        .collect();
    Raceline::new(samples).expect("centerline profile is a valid raceline")
}

/// Synthesize an apex-style raceline: centered on straights, swinging wide
/// on corner entry and exit, and cutting to the inside near the apex of
/// tight corners. The speed profile is curvature-capped and smoothed along
/// the offset path. `wide_gain`/`apex_gain` are fractions of the usable
/// half-width; the widely-smoothed curvature drives the outside swing and
/// the narrowly-smoothed curvature the apex pull.
#[allow(clippy::too_many_arguments)]
pub fn offset_raceline<T: Real>(
    track: &Track<T>,
    wide_gain: T,
    apex_gain: T,
    kappa_ref: T,
    apex_kappa_ref: T,
    a_lat_max: T,
    v_max: T,
    a_long_max: T,
) -> Raceline<T> {
    let entries = track.entries();
    let n = entries.len();
    let ds = track.step();

    // circular moving averages of the signed curvature
    let smooth = |halfwidth_m: T| -> Vec<T> {
        let w = ((halfwidth_m / ds).to_f64_lossy().round() as usize).clamp(1, n / 4);
        let norm = T::from_usize(2 * w + 1).unwrap();
        (0..n)
            .map(|i| {
                let mut acc = T::zero();
                for j in 0..=(2 * w) {
                    acc += entries[(i + n + j - w) % n].kappa;
                }
                acc / norm
            })
            .collect()
    };
    let kappa_wide = smooth(T::lit(14.0));
    let kappa_tight = smooth(T::lit(4.0));
    // the apex pull leads the corner so the line defends the inside on the
    // way in, the way a driver closes the door before a tight turn
    let lead = ((T::lit(8.0) / ds).to_f64_lossy().round() as usize).max(1);

    // positive lateral = left of the centerline; a left corner (kappa > 0)
    // swings right (outside) on entry/exit and pulls left near the apex
    let margin = T::lit(1.0);
    let pts: Vec<(T, T)> = (0..n)
        .map(|i| {
            let e = &entries[i];
            let usable = e.r - margin;
            let wide = (kappa_wide[i] / kappa_ref).max(-T::one()).min(T::one());
            let tight_here = kappa_tight[i];
            let tight_ahead = kappa_tight[(i + lead) % n];
            let tight = if tight_ahead.abs() > tight_here.abs() { tight_ahead } else { tight_here };
            let apex = (tight / apex_kappa_ref).max(-T::one()).min(T::one());
            let lateral = (usable * (apex_gain * apex - wide_gain * wide))
                .max(-T::lit(0.7) * usable)
                .min(T::lit(0.7) * usable);
            let (sin_phi, cos_phi) = e.phi.sin_cos();
            (e.x - lateral * sin_phi, e.y + lateral * cos_phi)
        })
        .collect();

    // arc length, heading and curvature of the offset path by central
    // differences over the closed polyline
    let mut s_acc = vec![T::zero(); n];
    for i in 1..n {
        let (x0, y0) = pts[i - 1];
        let (x1, y1) = pts[i];
        s_acc[i] = s_acc[i - 1] + ((x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0)).sqrt();
    }
    let mut phi = vec![T::zero(); n];
    let mut kappa = vec![T::zero(); n];
    for i in 0..n {
        let prev = pts[(i + n - 1) % n];
        let next = pts[(i + 1) % n];
        let dx = next.0 - prev.0;
        let dy = next.1 - prev.1;
        phi[i] = dy.atan2(dx);
        let a = pts[i];
        // turn angle over the two adjacent chords
        let h1 = ((a.0 - prev.0) * (a.0 - prev.0) + (a.1 - prev.1) * (a.1 - prev.1)).sqrt();
        let h2 = ((next.0 - a.0) * (next.0 - a.0) + (next.1 - a.1) * (next.1 - a.1)).sqrt();
        let phi1 = (a.1 - prev.1).atan2(a.0 - prev.0);
        let phi2 = (next.1 - a.1).atan2(next.0 - a.0);
        kappa[i] = wrap_angle(phi2 - phi1) / (T::lit(0.5) * (h1 + h2)).max(T::lit(1e-9));
    }

    let kappa_floor = T::lit(1e-4);
    let mut v: Vec<T> = kappa
        .iter()
        .map(|k| (a_lat_max / k.abs().max(kappa_floor)).sqrt().min(v_max))
        .collect();
    for _ in 0..2 {
        for i in 0..n {
            let j = (i + 1) % n;
            let cap = (v[i] * v[i] + T::lit(2.0) * a_long_max * ds).sqrt();
            if v[j] > cap {
                v[j] = cap;
            }
        }
    }
    for _ in 0..2 {
        for i in (0..n).rev() {
            let j = (i + 1) % n;
            let cap = (v[j] * v[j] + T::lit(2.0) * a_long_max * ds).sqrt();
            if v[i] > cap {
                v[i] = cap;
            }
        }
    }

    let samples: Vec<RacelineSample<T>> = (0..n)
        .map(|i| RacelineSample { s: s_acc[i], x: pts[i].0, y: pts[i].1, phi: phi[i], v: v[i] })
        .collect();
    Raceline::new(samples).expect("offset raceline is a valid raceline")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_raceline(radius: f64, n: usize, speed: f64) -> Raceline<f64> {
        let samples: Vec<RacelineSample<f64>> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                RacelineSample {
                    s: radius * a,
                    x: radius * a.cos(),
                    y: radius * a.sin(),
                    phi: wrap_angle(a + std::f64::consts::FRAC_PI_2),
                    v: speed,
                }
            })
            .collect();
        Raceline::new(samples).unwrap()
    }

    fn circle_track(radius: f64, n: usize) -> Track<f64> {
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                (radius * a.cos(), radius * a.sin())
            })
            .collect();
        Track::build(&pts, &vec![6.0; n], 0.5).unwrap()
    }

    #[test]
    fn circle_length_within_half_percent() {
        let r = 40.0;
        let line = circle_raceline(r, 128, 15.0);
        let expect = std::f64::consts::TAU * r;
        assert!((line.length() - expect).abs() / expect < 0.005);
    }

    #[test]
    fn shuffled_rows_rejected() {
        let mut csv = String::from("s_m,x_m,y_m,psi_rad,vx_mps\n");
        csv.push_str("0,10,0,1.57,15\n");
        csv.push_str("5,9,4,1.9,15\n");
        csv.push_str("2,7,7,2.3,15\n"); // out of order
        csv.push_str("8,4,9,2.8,15\n");
        assert!(Raceline::<f64>::parse_csv(&csv).is_err());
    }

    #[test]
    fn open_polyline_rejected() {
        let samples: Vec<RacelineSample<f64>> = (0..16)
            .map(|i| RacelineSample { s: i as f64, x: i as f64, y: 0.0, phi: 0.0, v: 10.0 })
            .collect();
        assert!(Raceline::new(samples).is_err());
    }

    #[test]
    fn csv_roundtrip_lossless() {
        let line = circle_raceline(33.3, 64, 17.123456789012345);
        let text = line.to_csv();
        let back = Raceline::<f64>::parse_csv(&text).unwrap();
        assert_eq!(line, back);
    }

    #[test]
    fn step_advances_exactly_at_constant_speed() {
        let line = circle_raceline(40.0, 256, 12.0);
        let mut st = obstacle_init(&line, 0.0, 0.0);
        let dt = 0.05;
        for k in 1..=100 {
            st = obstacle_step(&line, &st, 0.0, dt);
            assert!((st.s - 12.0 * dt * k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn speed_scale_covariance() {
        let line = circle_raceline(40.0, 256, 12.0);
        let dt = 0.04;
        let window = 120;
        let progress = |scale: f64| {
            let mut st = obstacle_init(&line, 3.0, scale);
            for _ in 0..window {
                st = obstacle_step(&line, &st, scale, dt);
            }
            // unwrapped progress
            let raw = st.s - 3.0;
            if raw < 0.0 {
                raw + line.length()
            } else {
                raw
            }
        };
        let base = progress(0.0);
        for scale in [-0.2, 0.2] {
            let got = progress(scale);
            assert!(
                (got - (1.0 + scale) * base).abs() / base < 1e-12,
                "scale {scale}: {got} vs {}",
                (1.0 + scale) * base
            );
        }
    }

    #[test]
    fn full_lap_returns_to_start() {
        let line = circle_raceline(40.0, 512, 12.0);
        let dt = 0.02;
        let lap_time = line.length() / 12.0;
        let steps = (lap_time / dt).round() as usize;
        let start = obstacle_init(&line, 0.0, 0.0);
        let mut st = start;
        for _ in 0..steps {
            st = obstacle_step(&line, &st, 0.0, dt);
        }
        let pos_err = ((st.x - start.x).powi(2) + (st.y - start.y).powi(2)).sqrt();
        // lap time doesn't divide dt exactly; allow one step of drift plus
        // interpolation error
        assert!(pos_err < 12.0 * dt + 0.05, "lap closure error {pos_err}");
    }

    #[test]
    fn pose_stays_on_the_interpolant() {
        let line = circle_raceline(40.0, 256, 12.0);
        let mut st = obstacle_init(&line, 7.0, 0.1);
        for _ in 0..50 {
            st = obstacle_step(&line, &st, 0.1, 0.03);
            let p = line.interp(st.s);
            assert!((p.x - st.x).abs() < 1e-9);
            assert!((p.y - st.y).abs() < 1e-9);
        }
    }

    #[test]
    fn fallback_profile_straight_and_circle() {
        // circle: v = min(v_max, sqrt(a_lat * R)) everywhere
        let r = 40.0;
        let track = circle_track(r, 64);
        let line = fallback_speed_profile(&track, 10.0, 30.0, 6.0);
        let expect = (10.0 * r).sqrt();
        for p in line.samples() {
            assert!((p.v - expect).abs() < 0.1, "v {} vs {expect}", p.v);
        }
        // large circle where the cap binds
        let track = circle_track(400.0, 128);
        let line = fallback_speed_profile(&track, 10.0, 30.0, 6.0);
        for p in line.samples() {
            assert!((p.v - 30.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fallback_profile_respects_longitudinal_limit() {
        // non-circular track: curvature varies, smoothing must bound dv²/ds
        let pts: Vec<(f64, f64)> = (0..96)
            .map(|i| {
                let a = i as f64 / 96.0 * std::f64::consts::TAU;
                let r = 60.0 + 25.0 * (2.0 * a).cos();
                (r * a.cos(), r * a.sin())
            })
            .collect();
        let track = Track::build(&pts, &vec![6.0; 96], 0.5).unwrap();
        let a_long = 6.0;
        let line = fallback_speed_profile(&track, 10.0, 30.0, a_long);
        let ds = track.step();
        let samples = line.samples();
        for i in 0..samples.len() {
            let j = (i + 1) % samples.len();
            let dv2 = samples[j].v * samples[j].v - samples[i].v * samples[i].v;
            assert!(
                dv2.abs() <= 2.0 * a_long * ds + 1e-9,
                "dv²/ds limit violated at {i}: {dv2}"
            );
        }
    }
}
