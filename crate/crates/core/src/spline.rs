//! Natural cubic spline interpolation on non-uniform samples.

/// Cubic spline through `(x_i, y_i)` with natural boundary conditions.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// `xs` must be strictly increasing with at least two points.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(xs.len() >= 2);
        let n = xs.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal solve (Thomas algorithm) for the natural spline
            let mut sub = vec![0.0; n];
            let mut diag = vec![0.0; n];
            let mut sup = vec![0.0; n];
            let mut rhs = vec![0.0; n];
            diag[0] = 1.0;
            diag[n - 1] = 1.0;
            for i in 1..n - 1 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                sub[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                sup[i] = h1 / 6.0;
                rhs[i] = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
            }
            for i in 1..n {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[n - 1] = rhs[n - 1] / diag[n - 1];
            for i in (0..n - 1).rev() {
                m[i] = (rhs[i] - sup[i] * m[i + 1]) / diag[i];
            }
        }
        Self { xs, ys, m }
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return 0;
        }
        if x >= self.xs[n - 2] {
            return n - 2;
        }
        // binary search for the panel containing x
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn eval(&self, x: f64) -> f64 {
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_smooth_function() {
        let n = 400;
        let xs: Vec<f64> = (0..n).map(|i| -5.0 + 10.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| (x as f64).tanh()).collect();
        let sp = CubicSpline::new(xs, ys);
        for i in 0..200 {
            let x = -4.9 + 9.8 * i as f64 / 199.0;
            assert!((sp.eval(x) - x.tanh()).abs() < 1e-7);
        }
    }

    #[test]
    fn exact_on_linear_data() {
        let sp = CubicSpline::new(vec![0.0, 1.0, 3.0], vec![1.0, 3.0, 7.0]);
        assert!((sp.eval(2.0) - 5.0).abs() < 1e-12);
        assert!((sp.eval(0.5) - 2.0).abs() < 1e-12);
    }
}
