//! Arc-length track parametrization built from centerline waypoints.
//!
//! The centerline is fit with cyclic cubic splines, reparametrized to arc
//! length by quadrature, and tabulated into a dense lookup table carrying
//! position, tangent heading, half-width and curvature. Everything the
//! planner needs at runtime comes from the table; the spline itself is only
//! used while building.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spline::PeriodicSpline;

/// 8-point Gauss–Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.9602898564975363,
    -0.7966664774136267,
    -0.5255324099163290,
    -0.1834346424956498,
    0.1834346424956498,
    0.5255324099163290,
    0.7966664774136267,
    0.9602898564975363,
];
const GL_WEIGHTS: [f64; 8] = [
    0.1012285362903763,
    0.2223810344533745,
    0.3137066458778873,
    0.3626837833783620,
    0.3626837833783620,
    0.3137066458778873,
    0.2223810344533745,
    0.1012285362903763,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutEntry<T> {
    pub x: T,
    pub y: T,
    /// Tangent heading, rad.
    pub phi: T,
    /// Track half-width, m.
    pub r: T,
    /// Signed curvature, 1/m (positive = turning left).
    pub kappa: T,
}

/// Interpolated sample of the parametrization at a wrapped progress value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint<T> {
    pub x: T,
    pub y: T,
    pub phi: T,
    pub r: T,
    pub kappa: T,
    /// Wrapped progress in `[0, L)`.
    pub theta: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackDiagnostics<T> {
    pub length: T,
    /// Seam position mismatch of the spline, m.
    pub closure_position: T,
    /// Seam heading mismatch, rad.
    pub closure_heading: T,
    /// Max relative deviation of tabulated spacing from exact arc length.
    pub max_arc_deviation: T,
    pub min_half_width: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track<T> {
    length: T,
    step: T,
    entries: Vec<LutEntry<T>>,
    max_half_width: T,
    diagnostics: TrackDiagnostics<T>,
}

impl<T: Real> Track<T> {
    /// Fit the cyclic spline through `waypoints` (closed circuit implied, no
    /// duplicated endpoint) and tabulate it at roughly `lut_step` spacing.
    pub fn build(waypoints: &[(T, T)], half_widths: &[T], lut_step: T) -> Result<Self> {
        let n = waypoints.len();
        if n < 4 {
            return Err(Error::input("need at least 4 waypoints"));
        }
        if half_widths.len() != n {
            return Err(Error::input("one half-width per waypoint required"));
        }
        if half_widths.iter().any(|w| !(*w > T::zero())) {
            return Err(Error::input("half-widths must be positive"));
        }
        if !(lut_step > T::zero()) {
            return Err(Error::input("lut_step must be positive"));
        }

        // chord lengths, including the closing chord
        let mut chords = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + 1) % n;
            let dx = waypoints[j].0 - waypoints[i].0;
            let dy = waypoints[j].1 - waypoints[i].1;
            chords.push((dx * dx + dy * dy).sqrt());
        }
        let closing = chords[n - 1];
        if closing < T::lit(1e-9) {
            return Err(Error::input(
                "duplicated endpoint: the circuit closes implicitly, drop the repeated point",
            ));
        }
        let max_open_chord =
            chords[..n - 1].iter().fold(T::zero(), |m, &c| m.max(c));
        if chords.iter().any(|c| !(*c > T::zero())) {
            return Err(Error::input("coincident consecutive waypoints"));
        }
        if closing > T::lit(3.0) * max_open_chord {
            return Err(Error::input(
                "open centerline: gap between last and first waypoint is too large for a closed circuit",
            ));
        }
        if polyline_self_intersects(waypoints) {
            return Err(Error::input("self-intersecting centerline"));
        }

        // chordal parameter knots
        let mut knots = Vec::with_capacity(n + 1);
        let mut acc = T::zero();
        knots.push(acc);
        for c in &chords {
            acc += *c;
            knots.push(acc);
        }
        let xs: Vec<T> = waypoints.iter().map(|p| p.0).collect();
        let ys: Vec<T> = waypoints.iter().map(|p| p.1).collect();
        let sx = PeriodicSpline::new(knots.clone(), xs)?;
        let sy = PeriodicSpline::new(knots.clone(), ys)?;

        let speed = |t: T| -> T {
            let (_, dx, _) = sx.eval(t);
            let (_, dy, _) = sy.eval(t);
            (dx * dx + dy * dy).sqrt()
        };
        let seg_len = |a: T, b: T| -> T {
            // Gauss–Legendre over [a, b]
            let half = T::lit(0.5);
            let mid = half * (a + b);
            let rad = half * (b - a);
            let mut acc = T::zero();
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
                acc += T::lit(weight) * speed(mid + rad * T::lit(*node));
            }
            acc * rad
        };

        // cumulative arc length at the knots
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(T::zero());
        for i in 0..n {
            let s = seg_len(knots[i], knots[i + 1]);
            cum.push(cum[i] + s);
        }
        let length = cum[n];

        // invert s -> t inside an interval with safeguarded Newton
        let invert = |target: T| -> T {
            let mut lo = 0usize;
            let mut hi = n;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if cum[mid] <= target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let i = lo.min(n - 1);
            let want = target - cum[i];
            let (ta, tb) = (knots[i], knots[i + 1]);
            let mut t = ta + (tb - ta) * (want / (cum[i + 1] - cum[i])).max(T::zero()).min(T::one());
            for _ in 0..20 {
                let g = seg_len(ta, t) - want;
                let dg = speed(t);
                if dg <= T::zero() {
                    break;
                }
                let step = g / dg;
                t = (t - step).max(ta).min(tb);
                if step.abs() < T::lit(1e-13) * (tb - ta).max(T::one()) {
                    break;
                }
            }
            t
        };

        let n_lut = {
            let raw = (length / lut_step).to_f64_lossy().round();
            (raw.max(8.0)) as usize
        };
        let step = length / T::from_usize(n_lut).unwrap();

        // min(left, right) already folded by the loader; interpolate width
        // linearly in the chord parameter
        let width_at = |t: T| -> T {
            let mut lo = 0usize;
            let mut hi = n;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if knots[mid] <= t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let i = lo.min(n - 1);
            let frac = (t - knots[i]) / (knots[i + 1] - knots[i]);
            let wa = half_widths[i];
            let wb = half_widths[(i + 1) % n];
            wa + (wb - wa) * frac
        };

        let mut entries = Vec::with_capacity(n_lut);
        for j in 0..n_lut {
            let s = step * T::from_usize(j).unwrap();
            let t = invert(s);
            let (px, d1x, d2x) = sx.eval(t);
            let (py, d1y, d2y) = sy.eval(t);
            let sp = (d1x * d1x + d1y * d1y).sqrt();
            let phi = d1y.atan2(d1x);
            let kappa = (d1x * d2y - d1y * d2x) / (sp * sp * sp);
            entries.push(LutEntry { x: px, y: py, phi, r: width_at(t), kappa });
        }

        // diagnostics: seam continuity from the left limit of the last
        // interval vs the value at t = 0
        let period = sx.period();
        let (xl, dxl, _) = sx.eval_in_interval(n - 1, period);
        let (yl, dyl, _) = sy.eval_in_interval(n - 1, period);
        let (x0, dx0, _) = sx.eval(T::zero());
        let (y0, dy0, _) = sy.eval(T::zero());
        let closure_position = ((xl - x0) * (xl - x0) + (yl - y0) * (yl - y0)).sqrt();
        let phi_l = dyl.atan2(dxl);
        let phi_0 = dy0.atan2(dx0);
        let closure_heading = wrap_angle(phi_l - phi_0).abs();

        let mut max_arc_dev = T::zero();
        for j in 0..n_lut {
            let a = &entries[j];
            let b = &entries[(j + 1) % n_lut];
            let chord = ((b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y)).sqrt();
            let dev = (chord / step - T::one()).abs();
            max_arc_dev = max_arc_dev.max(dev);
        }

        let min_half_width = entries.iter().fold(entries[0].r, |m, e| m.min(e.r));
        let max_half_width = entries.iter().fold(T::zero(), |m, e| m.max(e.r));

        Ok(Track {
            length,
            step,
            entries,
            max_half_width,
            diagnostics: TrackDiagnostics {
                length,
                closure_position,
                closure_heading,
                max_arc_deviation: max_arc_dev,
                min_half_width,
            },
        })
    }

    /// Parse the common `x_m,y_m,w_tr_left_m,w_tr_right_m` centerline CSV.
    /// The usable half-width at a waypoint is `min(left, right)`.
    pub fn parse_centerline_csv(text: &str) -> Result<(Vec<(T, T)>, Vec<T>)> {
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((_, l)) => break l,
                None => return Err(Error::input("empty track file")),
            }
        };
        let cols: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
        if cols != ["x_m", "y_m", "w_tr_left_m", "w_tr_right_m"] {
            return Err(Error::input(format!(
                "track CSV header must be `x_m,y_m,w_tr_left_m,w_tr_right_m`, got `{header}`"
            )));
        }
        let mut waypoints = Vec::new();
        let mut widths = Vec::new();
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
            if fields.len() != 4 {
                return Err(Error::input(format!("track CSV line {}: need 4 fields", lineno + 1)));
            }
            let mut vals = [0.0f64; 4];
            for (i, f) in fields.iter().enumerate() {
                vals[i] = f
                    .parse::<f64>()
                    .map_err(|e| Error::input(format!("track CSV line {}: {e}", lineno + 1)))?;
            }
            waypoints.push((T::lit(vals[0]), T::lit(vals[1])));
            widths.push(T::lit(vals[2].min(vals[3])));
        }
        Ok((waypoints, widths))
    }

    pub fn load_centerline_csv(path: impl AsRef<std::path::Path>, lut_step: T) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let (wp, hw) = Self::parse_centerline_csv(&text)?;
        Self::build(&wp, &hw, lut_step)
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn entries(&self) -> &[LutEntry<T>] {
        &self.entries
    }

    pub fn max_half_width(&self) -> T {
        self.max_half_width
    }

    pub fn diagnostics(&self) -> &TrackDiagnostics<T> {
        &self.diagnostics
    }

    /// Wrap any real progress value into `[0, L)`.
    pub fn wrap(&self, theta: T) -> T {
        let mut w = theta % self.length;
        if w < T::zero() {
            w += self.length;
        }
        // guard against -0.0 and w == L from rounding
        if w >= self.length {
            w -= self.length;
        }
        w
    }

    /// Signed cyclic progress from `a` to `b`, in `(-L/2, L/2]`.
    pub fn signed_delta(&self, a: T, b: T) -> T {
        let half = self.length * T::lit(0.5);
        let mut d = self.wrap(b - a);
        if d > half {
            d -= self.length;
        }
        d
    }

    /// Interpolated parametrization sample; wrapping happens here, outside
    /// the solver.
    pub fn lookup(&self, theta: T) -> TrackPoint<T> {
        let w = self.wrap(theta);
        let n = self.entries.len();
        let u = w / self.step;
        let j = (u.to_f64_lossy().floor() as usize).min(n - 1);
        let frac = u - T::from_usize(j).unwrap();
        let a = &self.entries[j];
        let b = &self.entries[(j + 1) % n];
        let lerp = |p: T, q: T| p + (q - p) * frac;
        let phi = wrap_angle(a.phi + wrap_angle(b.phi - a.phi) * frac);
        TrackPoint {
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            phi,
            r: lerp(a.r, b.r),
            kappa: lerp(a.kappa, b.kappa),
            theta: w,
        }
    }

    /// Progress value minimizing the squared distance to `(x, y)`. With a
    /// hint the search is restricted to a local window (monotonic tracking);
    /// otherwise a coarse-to-fine pass over the whole table runs.
    pub fn project(&self, x: T, y: T, hint: Option<T>) -> Result<T> {
        let n = self.entries.len();
        let d2_at = |j: usize| -> T {
            let e = &self.entries[j % n];
            (e.x - x) * (e.x - x) + (e.y - y) * (e.y - y)
        };

        let best = match hint {
            Some(h) => {
                let center = (self.wrap(h) / self.step).to_f64_lossy().round() as usize % n;
                let window_m = T::lit(30.0);
                let w = ((window_m / self.step).to_f64_lossy().ceil() as usize).max(2).min(n / 2);
                let mut best_j = center % n;
                let mut best_d = d2_at(best_j);
                for k in 1..=w {
                    for j in [(center + k) % n, (center + n - k) % n] {
                        let d = d2_at(j);
                        if d < best_d {
                            best_d = d;
                            best_j = j;
                        }
                    }
                }
                best_j
            }
            None => {
                let mut best_j = 0;
                let mut best_d = d2_at(0);
                for j in 1..n {
                    let d = d2_at(j);
                    if d < best_d {
                        best_d = d;
                        best_j = j;
                    }
                }
                best_j
            }
        };

        // parabolic refinement on the squared distance
        let dm = d2_at((best + n - 1) % n);
        let d0 = d2_at(best);
        let dp = d2_at((best + 1) % n);
        let denom = dm - d0 - d0 + dp;
        let offset = if denom > T::lit(1e-12) {
            let raw = T::lit(0.5) * (dm - dp) / denom;
            raw.max(-T::one()).min(T::one()) * self.step
        } else {
            T::zero()
        };
        let theta = self.wrap(T::from_usize(best).unwrap() * self.step + offset);

        let tp = self.lookup(theta);
        let dist = ((tp.x - x) * (tp.x - x) + (tp.y - y) * (tp.y - y)).sqrt();
        if dist > T::lit(2.0) * self.max_half_width {
            return Err(Error::input(format!(
                "point ({}, {}) is {} m from the centerline, beyond the track band",
                x.to_f64_lossy(),
                y.to_f64_lossy(),
                dist.to_f64_lossy()
            )));
        }
        Ok(theta)
    }

    /// Linearized contouring and lag errors of `(x, y)` about the reference
    /// point at `theta_hat`. Positive contouring error means left of the
    /// centerline w.r.t. the direction of travel.
    pub fn contouring_errors(&self, theta_hat: T, x: T, y: T) -> (T, T) {
        let tp = self.lookup(theta_hat);
        let (sin_phi, cos_phi) = tp.phi.sin_cos();
        let dx = tp.x - x;
        let dy = tp.y - y;
        let eps_l = cos_phi * dx + sin_phi * dy;
        let eps_c = sin_phi * dx - cos_phi * dy;
        (eps_c, eps_l)
    }
}

pub fn wrap_angle<T: Real>(a: T) -> T {
    let pi = T::PI();
    let tau = pi + pi;
    let mut w = (a + pi) % tau;
    if w < T::zero() {
        w += tau;
    }
    w - pi
}

fn orient<T: Real>(a: (T, T), b: (T, T), c: (T, T)) -> T {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_intersect<T: Real>(p1: (T, T), p2: (T, T), q1: (T, T), q2: (T, T)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > T::zero() && d2 < T::zero()) || (d1 < T::zero() && d2 > T::zero()))
        && ((d3 > T::zero() && d4 < T::zero()) || (d3 < T::zero() && d4 > T::zero()))
    {
        return true;
    }
    false
}

fn polyline_self_intersects<T: Real>(points: &[(T, T)]) -> bool {
    let n = points.len();
    for i in 0..n {
        let i2 = (i + 1) % n;
        for j in (i + 1)..n {
            let j2 = (j + 1) % n;
            // skip segments sharing an endpoint
            if i == j || i2 == j || j2 == i {
                continue;
            }
            if segments_intersect(points[i], points[i2], points[j], points[j2]) {
                return true;
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Portions and regions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortionKind {
    Straight,
    Sweeper,
    Hairpin,
    Chicane,
}

impl PortionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "straight" => Ok(PortionKind::Straight),
            "sweeper" => Ok(PortionKind::Sweeper),
            "hairpin" => Ok(PortionKind::Hairpin),
            "chicane" => Ok(PortionKind::Chicane),
            other => Err(Error::input(format!("unknown portion kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PortionKind::Straight => "straight",
            PortionKind::Sweeper => "sweeper",
            PortionKind::Hairpin => "hairpin",
            PortionKind::Chicane => "chicane",
        }
    }
}

/// Quadrant of a portion's start-sampling box, longitudinal halves crossed
/// with lateral halves: R1 front-left, R2 front-right, R3 back-right,
/// R4 back-left (relative to the track direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum Region {
    R1,
    R2,
    R3,
    R4,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::R1, Region::R2, Region::R3, Region::R4];

    pub fn index(&self) -> usize {
        match self {
            Region::R1 => 0,
            Region::R2 => 1,
            Region::R3 => 2,
            Region::R4 => 3,
        }
    }

    pub fn from_index(i: usize) -> Region {
        Region::ALL[i]
    }

    pub fn from_halves(front: bool, left: bool) -> Region {
        match (front, left) {
            (true, true) => Region::R1,
            (true, false) => Region::R2,
            (false, false) => Region::R3,
            (false, true) => Region::R4,
        }
    }

    pub fn is_front(&self) -> bool {
        matches!(self, Region::R1 | Region::R2)
    }

    pub fn is_left(&self) -> bool {
        matches!(self, Region::R1 | Region::R4)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Region::R1 => "R1",
            Region::R2 => "R2",
            Region::R3 => "R3",
            Region::R4 => "R4",
        }
    }
}

/// Cyclic θ-interval `[a, b)`; `a > b` means the interval wraps the seam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaInterval<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> ThetaInterval<T> {
    pub fn contains(&self, track: &Track<T>, theta: T) -> bool {
        let t = track.wrap(theta);
        let a = track.wrap(self.a);
        let b = track.wrap(self.b);
        if a <= b {
            t >= a && t < b
        } else {
            t >= a || t < b
        }
    }

    pub fn span(&self, track: &Track<T>) -> T {
        let d = track.wrap(self.b - self.a);
        if d == T::zero() {
            track.length()
        } else {
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortionSpec<T> {
    pub tau: u32,
    pub kind: PortionKind,
    pub span: ThetaInterval<T>,
    /// Interval within which an overtake must complete to count.
    pub corridor: ThetaInterval<T>,
    /// Start-sampling box behind the portion entry.
    pub sample_box: ThetaInterval<T>,
    /// Longitudinal midpoint of the sampling box (region split).
    pub theta_mid: T,
}

impl<T: Real> PortionSpec<T> {
    pub fn new(
        track: &Track<T>,
        tau: u32,
        kind: PortionKind,
        span: ThetaInterval<T>,
        corridor: ThetaInterval<T>,
        box_length: T,
    ) -> Result<Self> {
        if span.span(track) <= T::zero() || span.span(track) >= track.length() {
            return Err(Error::input(format!("portion {tau}: empty or full span")));
        }
        if corridor.span(track) <= T::zero() {
            return Err(Error::input(format!("portion {tau}: empty corridor")));
        }
        // corridor must live in the neighborhood of the span
        let margin = span.span(track) + track.length() * T::lit(0.25);
        let da = track.signed_delta(span.a, corridor.a).abs();
        let db = track.signed_delta(span.b, corridor.b).abs();
        if da > margin || db > margin {
            return Err(Error::input(format!(
                "portion {tau}: corridor is not in the neighborhood of the span"
            )));
        }
        if !(box_length > T::zero()) {
            return Err(Error::input("sampling box length must be positive"));
        }
        let entry = track.wrap(span.a);
        let sample_box = ThetaInterval { a: track.wrap(entry - box_length), b: entry };
        let theta_mid = track.wrap(entry - box_length * T::lit(0.5));
        Ok(PortionSpec { tau, kind, span, corridor, sample_box, theta_mid })
    }

    /// Parse the portion CSV `tau,kind,theta_a,theta_b,corridor_a,corridor_b`.
    pub fn parse_csv(track: &Track<T>, text: &str, box_length: T) -> Result<Vec<Self>> {
        let mut out: Vec<PortionSpec<T>> = Vec::new();
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        let expect = "tau,kind,theta_a,theta_b,corridor_a,corridor_b";
        if header.split(',').map(|c| c.trim()).collect::<Vec<_>>()
            != expect.split(',').collect::<Vec<_>>()
        {
            return Err(Error::input(format!("portion CSV header must be `{expect}`")));
        }
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(|x| x.trim()).collect();
            if f.len() != 6 {
                return Err(Error::input(format!("portion CSV line {}: need 6 fields", lineno + 1)));
            }
            let tau = f[0]
                .parse::<u32>()
                .map_err(|e| Error::input(format!("portion CSV line {}: {e}", lineno + 1)))?;
            let kind = PortionKind::parse(f[1])?;
            let num = |s: &str| -> Result<T> {
                s.parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::input(format!("portion CSV line {}: {e}", lineno + 1)))
            };
            let spec = PortionSpec::new(
                track,
                tau,
                kind,
                ThetaInterval { a: num(f[2])?, b: num(f[3])? },
                ThetaInterval { a: num(f[4])?, b: num(f[5])? },
                box_length,
            )?;
            out.push(spec);
        }
        // spans must be pairwise disjoint
        for i in 0..out.len() {
            for j in (i + 1)..out.len() {
                let a = &out[i].span;
                let b = &out[j].span;
                if a.contains(track, b.a) || b.contains(track, a.a) {
                    return Err(Error::input(format!(
                        "portions {} and {} have overlapping spans",
                        out[i].tau, out[j].tau
                    )));
                }
            }
        }
        Ok(out)
    }
}

/// The unique portion whose span contains `theta`, if any.
pub fn classify_portion<'a, T: Real>(
    track: &Track<T>,
    portions: &'a [PortionSpec<T>],
    theta: T,
) -> Option<&'a PortionSpec<T>> {
    portions.iter().find(|p| p.span.contains(track, theta))
}

/// Region of `(x, y)` within a portion's sampling box: longitudinal half by
/// projection vs the box midpoint, lateral half by the sign of the
/// contouring error (left positive).
pub fn region_of<T: Real>(
    track: &Track<T>,
    portion: &PortionSpec<T>,
    x: T,
    y: T,
) -> Result<Region> {
    let theta = track.project(x, y, Some(portion.theta_mid))?;
    let tol = track.step() * T::lit(2.0);
    let in_box = portion.sample_box.contains(track, theta)
        || track.signed_delta(theta, portion.sample_box.a).abs() < tol
        || track.signed_delta(theta, portion.sample_box.b).abs() < tol;
    if !in_box {
        return Err(Error::input(format!(
            "point projects to theta {} outside the sampling box of portion {}",
            theta.to_f64_lossy(),
            portion.tau
        )));
    }
    let front = track.signed_delta(portion.theta_mid, theta) >= T::zero();
    let (eps_c, _) = track.contouring_errors(theta, x, y);
    let left = eps_c >= T::zero();
    Ok(Region::from_halves(front, left))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_track(radius: f64, n: usize, width: f64) -> Track<f64> {
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                (radius * a.cos(), radius * a.sin())
            })
            .collect();
        let widths = vec![width; n];
        Track::build(&pts, &widths, 0.5).unwrap()
    }

    #[test]
    fn circle_length_and_tangent() {
        let r = 50.0;
        let track = circle_track(r, 32, 6.0);
        let expect = std::f64::consts::TAU * r;
        assert!(
            (track.length() - expect).abs() / expect < 0.005,
            "L = {}, expected {expect}",
            track.length()
        );
        // tangent perpendicular to the radius everywhere
        for e in track.entries() {
            let radial = e.y.atan2(e.x);
            let tangent_expected = wrap_angle(radial + std::f64::consts::FRAC_PI_2);
            assert!(wrap_angle(e.phi - tangent_expected).abs() < 5e-3);
            // curvature of a CCW circle is +1/r
            assert!((e.kappa - 1.0 / r).abs() < 2e-4);
        }
    }

    #[test]
    fn closure_and_arc_deviation() {
        let track = circle_track(50.0, 32, 6.0);
        let d = track.diagnostics();
        assert!(d.closure_position < 1e-6);
        assert!(d.closure_heading < 1e-6);
        assert!(d.max_arc_deviation < 0.01);
    }

    #[test]
    fn lookup_anchors_and_cyclic_boundary() {
        let track = circle_track(50.0, 32, 6.0);
        let p0 = track.lookup(0.0);
        assert!((p0.x - 50.0).abs() < 1e-9);
        assert!(p0.y.abs() < 1e-9);

        let pl = track.lookup(track.length());
        assert_eq!(p0.x, pl.x);
        assert_eq!(p0.y, pl.y);

        // antipodal point halfway around
        let ph = track.lookup(track.length() / 2.0);
        assert!((ph.x + 50.0).abs() < 0.05, "x = {}", ph.x);
        assert!(ph.y.abs() < 0.05, "y = {}", ph.y);
    }

    #[test]
    fn lookup_refinement_order() {
        // halving the lut step changes lookups by O(step^2)
        let r = 40.0;
        let pts: Vec<(f64, f64)> = (0..48)
            .map(|i| {
                let a = i as f64 / 48.0 * std::f64::consts::TAU;
                // slightly non-circular so interpolation error is nonzero
                ((r + 2.0 * (3.0 * a).cos()) * a.cos(), (r + 2.0 * (3.0 * a).cos()) * a.sin())
            })
            .collect();
        let widths = vec![6.0; 48];
        let coarse = Track::build(&pts, &widths, 1.0).unwrap();
        let fine = Track::build(&pts, &widths, 0.5).unwrap();
        let mut seed = 7u64;
        let mut max_diff = 0.0f64;
        for _ in 0..100 {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let t = ((seed >> 11) as f64) / ((1u64 << 53) as f64) * coarse.length();
            let a = coarse.lookup(t);
            let b = fine.lookup(t * fine.length() / coarse.length());
            let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
            max_diff = max_diff.max(d);
        }
        // O(step^2) with a modest constant
        assert!(max_diff < 0.05, "max lookup shift {max_diff}");
    }

    #[test]
    fn project_identity_and_lateral_offsets() {
        let track = circle_track(50.0, 32, 6.0);
        let l = track.length();
        for k in 0..40 {
            let theta = k as f64 / 40.0 * l;
            let tp = track.lookup(theta);
            // exact centerline point
            let p = track.project(tp.x, tp.y, None).unwrap();
            assert!(track.signed_delta(theta, p).abs() <= track.step());
            // purely lateral offset preserves the projection
            let off = 2.5;
            let (xn, yn) = (tp.x - off * tp.phi.sin(), tp.y + off * tp.phi.cos());
            let p = track.project(xn, yn, Some(theta)).unwrap();
            assert!(track.signed_delta(theta, p).abs() <= track.step());
        }
    }

    #[test]
    fn project_matches_brute_force() {
        let track = circle_track(35.0, 40, 6.0);
        let l = track.length();
        let mut seed = 99u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..50 {
            let theta = rnd() * l;
            let lat = (rnd() - 0.5) * 8.0;
            let tp = track.lookup(theta);
            let (x, y) = (tp.x - lat * tp.phi.sin(), tp.y + lat * tp.phi.cos());
            let got = track.project(x, y, None).unwrap();
            // exhaustive fine-grid minimization as the oracle
            let mut best = 0.0;
            let mut best_d = f64::INFINITY;
            let n = 20000;
            for i in 0..n {
                let t = i as f64 / n as f64 * l;
                let e = track.lookup(t);
                let d = (e.x - x).powi(2) + (e.y - y).powi(2);
                if d < best_d {
                    best_d = d;
                    best = t;
                }
            }
            assert!(
                track.signed_delta(best, got).abs() <= track.step(),
                "project {got} vs brute force {best}"
            );
        }
    }

    #[test]
    fn project_rejects_far_points() {
        let track = circle_track(50.0, 32, 6.0);
        assert!(track.project(0.0, 0.0, None).is_err());
    }

    #[test]
    fn contouring_error_basics() {
        let track = circle_track(50.0, 32, 6.0);
        let theta = 20.0;
        let tp = track.lookup(theta);
        let (ec, el) = track.contouring_errors(theta, tp.x, tp.y);
        assert!(ec.abs() < 1e-12);
        assert!(el.abs() < 1e-12);

        // displaced along the tangent: lag magnitude 1, contour 0
        let (x, y) = (tp.x + tp.phi.cos(), tp.y + tp.phi.sin());
        let (ec, el) = track.contouring_errors(theta, x, y);
        assert!((el.abs() - 1.0).abs() < 1e-12);
        assert!(ec.abs() < 1e-12);

        // displaced to the left: positive contouring error
        let (x, y) = (tp.x - tp.phi.sin(), tp.y + tp.phi.cos());
        let (ec, el) = track.contouring_errors(theta, x, y);
        assert!((ec - 1.0).abs() < 1e-12);
        assert!(el.abs() < 1e-12);
    }

    #[test]
    fn contouring_error_roundtrip_against_forward_form() {
        // compose the forward linearization x_t = x + eps_l cos + eps_c sin,
        // y_t = y + eps_l sin - eps_c cos and recover the errors exactly
        let track = circle_track(50.0, 32, 6.0);
        let mut seed = 1234u64;
        let mut rnd = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..100 {
            let theta = rnd() * track.length();
            let eps_l = (rnd() - 0.5) * 4.0;
            let eps_c = (rnd() - 0.5) * 4.0;
            let tp = track.lookup(theta);
            let (s, c) = tp.phi.sin_cos();
            let x = tp.x - eps_l * c - eps_c * s;
            let y = tp.y - eps_l * s + eps_c * c;
            let (ec, el) = track.contouring_errors(theta, x, y);
            assert!((ec - eps_c).abs() < 1e-9);
            assert!((el - eps_l).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0)];
        assert!(Track::build(&pts, &[5.0; 3], 0.5).is_err());

        // duplicated endpoint
        let mut dup: Vec<(f64, f64)> = (0..16)
            .map(|i| {
                let a = i as f64 / 16.0 * std::f64::consts::TAU;
                (30.0 * a.cos(), 30.0 * a.sin())
            })
            .collect();
        dup.push(dup[0]);
        assert!(Track::build(&dup, &vec![5.0; dup.len()], 0.5).is_err());

        // open polyline
        let open: Vec<(f64, f64)> = (0..16).map(|i| (i as f64 * 5.0, (i as f64).sin())).collect();
        assert!(Track::build(&open, &vec![5.0; 16], 0.5).is_err());

        // figure-eight self-intersection
        let eight: Vec<(f64, f64)> = (0..32)
            .map(|i| {
                let a = i as f64 / 32.0 * std::f64::consts::TAU;
                (30.0 * a.sin(), 15.0 * (2.0 * a).sin())
            })
            .collect();
        assert!(Track::build(&eight, &vec![5.0; 32], 0.5).is_err());

        // nonpositive width
        let pts: Vec<(f64, f64)> = (0..16)
            .map(|i| {
                let a = i as f64 / 16.0 * std::f64::consts::TAU;
                (30.0 * a.cos(), 30.0 * a.sin())
            })
            .collect();
        let mut widths = vec![5.0; 16];
        widths[3] = 0.0;
        assert!(Track::build(&pts, &widths, 0.5).is_err());
    }

    fn ring_portions(track: &Track<f64>) -> Vec<PortionSpec<f64>> {
        let csv = "tau,kind,theta_a,theta_b,corridor_a,corridor_b\n\
                   1,hairpin,50,90,45,110\n\
                   2,straight,150,200,145,220\n";
        PortionSpec::parse_csv(track, csv, 30.0).unwrap()
    }

    #[test]
    fn classify_portion_containment_and_gaps() {
        let track = circle_track(50.0, 32, 6.0);
        let portions = ring_portions(&track);
        assert_eq!(classify_portion(&track, &portions, 70.0).unwrap().tau, 1);
        assert_eq!(classify_portion(&track, &portions, 175.0).unwrap().tau, 2);
        assert!(classify_portion(&track, &portions, 120.0).is_none());
        // exhaustive sweep agrees with interval arithmetic
        for j in 0..track.entries().len() {
            let theta = j as f64 * track.step();
            let got = classify_portion(&track, &portions, theta).map(|p| p.tau);
            let expect = if (50.0..90.0).contains(&theta) {
                Some(1)
            } else if (150.0..200.0).contains(&theta) {
                Some(2)
            } else {
                None
            };
            assert_eq!(got, expect, "theta {theta}");
        }
    }

    #[test]
    fn seam_wrapping_portion() {
        let track = circle_track(50.0, 32, 6.0);
        let l = track.length();
        let csv = format!(
            "tau,kind,theta_a,theta_b,corridor_a,corridor_b\n1,sweeper,{},20,{},30\n",
            l - 20.0,
            l - 25.0
        );
        let portions = PortionSpec::parse_csv(&track, &csv, 25.0).unwrap();
        assert_eq!(classify_portion(&track, &portions, l - 5.0).unwrap().tau, 1);
        assert_eq!(classify_portion(&track, &portions, 5.0).unwrap().tau, 1);
        assert!(classify_portion(&track, &portions, 100.0).is_none());
    }

    #[test]
    fn regions_partition_the_box() {
        let track = circle_track(50.0, 32, 6.0);
        let portions = ring_portions(&track);
        let p = &portions[0]; // box [20, 50), mid 35
        let lateral = 2.0;
        let cases = [
            (42.0, lateral, Region::R1),  // front-left
            (42.0, -lateral, Region::R2), // front-right
            (28.0, -lateral, Region::R3), // back-right
            (28.0, lateral, Region::R4),  // back-left
        ];
        for (theta, lat, expect) in cases {
            let tp = track.lookup(theta);
            let (x, y) = (tp.x - lat * tp.phi.sin(), tp.y + lat * tp.phi.cos());
            assert_eq!(region_of(&track, p, x, y).unwrap(), expect, "theta {theta} lat {lat}");
        }
        // outside the box errors out
        let tp = track.lookup(10.0);
        assert!(region_of(&track, p, tp.x, tp.y).is_err());
    }
}
