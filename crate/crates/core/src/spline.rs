//! Cyclic (periodic) cubic spline interpolation for closed centerlines.
//!
//! The spline is C² across the seam; moments come from the cyclic
//! tridiagonal system solved with the Sherman–Morrison correction.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One scalar channel interpolated periodically over knots `t_0 .. t_{n-1}`
/// with period `t_n - t_0`.
#[derive(Debug, Clone)]
pub struct PeriodicSpline<T> {
    /// Knot parameters, length n+1: the last entry closes the period and
    /// maps back to value[0].
    knots: Vec<T>,
    values: Vec<T>,
    /// Second derivatives at the knots, length n+1 (cyclic: m[n] = m[0]).
    moments: Vec<T>,
}

impl<T: Real> PeriodicSpline<T> {
    /// `knots` has one more entry than `values`; interval i spans
    /// `[knots[i], knots[i+1])` and the closing interval interpolates
    /// `values[n-1] -> values[0]`.
    pub fn new(knots: Vec<T>, values: Vec<T>) -> Result<Self> {
        let n = values.len();
        if n < 3 {
            return Err(Error::input("periodic spline needs at least 3 points"));
        }
        if knots.len() != n + 1 {
            return Err(Error::input("knot count must be point count + 1"));
        }
        for w in knots.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::input("spline knots must be strictly increasing"));
            }
        }

        // interval lengths h_i, i = 0..n-1 (h_{n-1} closes the loop)
        let h: Vec<T> = (0..n).map(|i| knots[i + 1] - knots[i]).collect();

        // cyclic tridiagonal system for the moments:
        //   (h_{i-1}/6) M_{i-1} + (h_{i-1}+h_i)/3 M_i + (h_i/6) M_{i+1} = rhs_i
        let six = T::lit(6.0);
        let three = T::lit(3.0);
        let mut sub = vec![T::zero(); n]; // a_i multiplies M_{i-1}
        let mut diag = vec![T::zero(); n];
        let mut sup = vec![T::zero(); n]; // c_i multiplies M_{i+1}
        let mut rhs = vec![T::zero(); n];
        for i in 0..n {
            let im1 = (i + n - 1) % n;
            let ip1 = (i + 1) % n;
            sub[i] = h[im1] / six;
            diag[i] = (h[im1] + h[i]) / three;
            sup[i] = h[i] / six;
            let d1 = (values[ip1] - values[i]) / h[i];
            let d0 = (values[i] - values[im1]) / h[im1];
            rhs[i] = d1 - d0;
        }

        let moments_core = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs)?;
        let mut moments = moments_core;
        moments.push(moments[0]);

        Ok(PeriodicSpline { knots, values, moments })
    }

    pub fn period(&self) -> T {
        *self.knots.last().unwrap() - self.knots[0]
    }

    fn wrap(&self, t: T) -> T {
        let t0 = self.knots[0];
        let p = self.period();
        let mut w = (t - t0) % p;
        if w < T::zero() {
            w += p;
        }
        w + t0
    }

    fn interval_of(&self, t: T) -> usize {
        // binary search over knots; t is wrapped into [t0, t0+p)
        let n = self.values.len();
        let mut lo = 0usize;
        let mut hi = n; // intervals 0..n-1; knots has n+1 entries
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo.min(n - 1)
    }

    /// Value, first and second derivative at parameter `t` (wrapped).
    pub fn eval(&self, t: T) -> (T, T, T) {
        let t = self.wrap(t);
        let i = self.interval_of(t);
        self.eval_in_interval(i, t)
    }

    /// Evaluate the polynomial of interval `i` at `t` without wrapping;
    /// exposed so closure diagnostics can probe the seam from the left.
    pub fn eval_in_interval(&self, i: usize, t: T) -> (T, T, T) {
        let n = self.values.len();
        let six = T::lit(6.0);
        let h = self.knots[i + 1] - self.knots[i];
        let a = self.knots[i + 1] - t;
        let b = t - self.knots[i];
        let yi = self.values[i];
        let yip = self.values[(i + 1) % n];
        let mi = self.moments[i];
        let mip = self.moments[i + 1];

        let v = mi * a * a * a / (six * h)
            + mip * b * b * b / (six * h)
            + (yi / h - mi * h / six) * a
            + (yip / h - mip * h / six) * b;
        let d1 = -mi * a * a / (T::lit(2.0) * h)
            + mip * b * b / (T::lit(2.0) * h)
            - (yi / h - mi * h / six)
            + (yip / h - mip * h / six);
        let d2 = mi * a / h + mip * b / h;
        (v, d1, d2)
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }
}

/// Thomas algorithm with Sherman–Morrison corner correction.
fn solve_cyclic_tridiagonal<T: Real>(
    sub: &[T],
    diag: &[T],
    sup: &[T],
    rhs: &[T],
) -> Result<Vec<T>> {
    let n = diag.len();
    assert!(n >= 3);

    // A = A' + u vᵀ with u = (gamma, 0, .., beta_n), v = (1, 0, .., alpha/gamma)
    // where alpha = sub[0] (corner top-right... we use the standard NR form)
    let alpha = sub[0]; // A[0][n-1]
    let beta = sup[n - 1]; // A[n-1][0]
    let gamma = -diag[0];

    let mut dd = vec![T::zero(); n];
    dd[0] = diag[0] - gamma;
    dd[n - 1] = diag[n - 1] - alpha * beta / gamma;
    for i in 1..n - 1 {
        dd[i] = diag[i];
    }

    let solve_tri = |d: &[T], r: &[T]| -> Result<Vec<T>> {
        let mut c = vec![T::zero(); n];
        let mut x = vec![T::zero(); n];
        let mut denom = d[0];
        if denom == T::zero() {
            return Err(Error::numerical("tridiagonal pivot breakdown"));
        }
        x[0] = r[0] / denom;
        for i in 1..n {
            c[i - 1] = sup[i - 1] / denom;
            denom = d[i] - sub[i] * c[i - 1];
            if denom == T::zero() {
                return Err(Error::numerical("tridiagonal pivot breakdown"));
            }
            x[i] = (r[i] - sub[i] * x[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            let xi = x[i] - c[i] * x[i + 1];
            x[i] = xi;
        }
        Ok(x)
    };

    let x = solve_tri(&dd, rhs)?;
    let mut u = vec![T::zero(); n];
    u[0] = gamma;
    u[n - 1] = beta;
    let z = solve_tri(&dd, &u)?;

    let fact = (x[0] + alpha * x[n - 1] / gamma) / (T::one() + z[0] + alpha * z[n - 1] / gamma);
    let mut out = x;
    for i in 0..n {
        out[i] = out[i] - fact * z[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knot_values() {
        let n = 12;
        let knots: Vec<f64> = (0..=n).map(|i| i as f64).collect();
        let values: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7).sin()).collect();
        let sp = PeriodicSpline::new(knots, values.clone()).unwrap();
        for (i, &v) in values.iter().enumerate() {
            let (y, _, _) = sp.eval(i as f64);
            assert!((y - v).abs() < 1e-12);
        }
        // periodic wrap
        let (y0, d0, s0) = sp.eval(0.0);
        let (yn, dn, sn) = sp.eval(n as f64);
        assert!((y0 - yn).abs() < 1e-12);
        assert!((d0 - dn).abs() < 1e-12);
        assert!((s0 - sn).abs() < 1e-12);
    }

    #[test]
    fn seam_is_c2_from_the_left() {
        let n = 16;
        let knots: Vec<f64> = (0..=n).map(|i| i as f64 * 0.5).collect();
        let values: Vec<f64> = (0..n)
            .map(|i| (i as f64 / n as f64 * std::f64::consts::TAU).cos())
            .collect();
        let sp = PeriodicSpline::new(knots, values).unwrap();
        let period = sp.period();
        let (vl, dl, sl) = sp.eval_in_interval(n - 1, period);
        let (vr, dr, sr) = sp.eval(0.0);
        assert!((vl - vr).abs() < 1e-10);
        assert!((dl - dr).abs() < 1e-10);
        assert!((sl - sr).abs() < 1e-9);
    }

    #[test]
    fn reproduces_smooth_function_between_knots() {
        // dense knots on a sine: interior error should be tiny (O(h^4))
        let n = 64;
        let period = std::f64::consts::TAU;
        let knots: Vec<f64> = (0..=n).map(|i| i as f64 / n as f64 * period).collect();
        let values: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64 * period).sin()).collect();
        let sp = PeriodicSpline::new(knots, values).unwrap();
        for k in 0..200 {
            let t = k as f64 / 200.0 * period;
            let (y, d1, _) = sp.eval(t);
            assert!((y - t.sin()).abs() < 1e-5);
            assert!((d1 - t.cos()).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PeriodicSpline::new(vec![0.0, 1.0, 2.0], vec![1.0, 2.0]).is_err());
        assert!(PeriodicSpline::new(vec![0.0, 1.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]).is_err());
    }
}
