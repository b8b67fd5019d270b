//! Embedded adaptive Runge–Kutta integration on complex state vectors.
//!
//! Dormand–Prince 5(4): fifth-order propagation with a fourth-order embedded
//! error estimate and a PI step controller. The state is a flat `Vec<C64>` so
//! matrix ODEs (parallel transport) and coefficient ODEs share one driver.

use crate::linalg::C64;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("state became non-finite at t = {t:.6e}")]
    NonFinite { t: f64 },
    #[error("step limit {0} exceeded")]
    TooManySteps(usize),
    #[error("right-hand side evaluation failed at t = {t:.6e}: {msg}")]
    RhsFailure { t: f64, msg: String },
}

/// Dormand–Prince coefficients.
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
/// 5th-order weights (same as the last A row; FSAL scheme).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Hard cap on |h| (0 disables).
    pub h_max: f64,
    pub h_init: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1.0e-10,
            atol: 1.0e-12,
            h_max: 0.0,
            h_init: 1.0e-3,
            max_steps: 50_000_000,
        }
    }
}

pub struct StepRecord {
    pub t: f64,
    pub y: Vec<C64>,
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// `observer` is called after every accepted step (including the initial
/// state). The RHS may fail (e.g. a degenerate frame); the failure aborts
/// integration.
pub fn integrate<F, O>(
    f: &mut F,
    t0: f64,
    t1: f64,
    y0: Vec<C64>,
    opts: &OdeOptions,
    observer: &mut O,
) -> Result<Vec<C64>, OdeError>
where
    F: FnMut(f64, &[C64]) -> Result<Vec<C64>, String>,
    O: FnMut(f64, &[C64]),
{
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let total = (t1 - t0).abs();
    if total == 0.0 {
        observer(t0, &y0);
        return Ok(y0);
    }
    let dim = y0.len();
    let mut t = t0;
    let mut y = y0;
    observer(t, &y);

    let mut h = opts.h_init.min(total).max(1e-300) * dir;
    if opts.h_max > 0.0 {
        h = h.clamp(-opts.h_max, opts.h_max);
    }
    let mut k: Vec<Vec<C64>> = vec![vec![C64::new(0.0, 0.0); dim]; 7];
    k[0] = f(t, &y).map_err(|msg| OdeError::RhsFailure { t, msg })?;
    let mut err_prev: f64 = 1.0;
    let mut steps = 0usize;

    while (t1 - t) * dir > 0.0 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(OdeError::TooManySteps(opts.max_steps));
        }
        // snap to the endpoint once the remainder is at rounding level
        if (t1 - t).abs() <= 1e-13 * (1.0 + t1.abs().max(t.abs())) {
            break;
        }
        let mut final_step = false;
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
            final_step = true;
        }
        if !final_step && h.abs() < 1e-14 * (1.0 + t.abs()) {
            return Err(OdeError::StepUnderflow { t, h });
        }

        // stages
        let mut ok = true;
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                let a = if s < 6 { A[s - 1][j] } else { B5[j] };
                if a == 0.0 {
                    continue;
                }
                for (yi, ki) in ys.iter_mut().zip(kj) {
                    *yi += *ki * (a * h);
                }
            }
            let ts = if s < 6 { t + C[s - 1] * h } else { t + h };
            match f(ts, &ys) {
                Ok(v) => k[s] = v,
                Err(msg) => {
                    // retry with a smaller step before giving up
                    if h.abs() > 1e-12 * (1.0 + t.abs()) {
                        h *= 0.3;
                        ok = false;
                        break;
                    }
                    return Err(OdeError::RhsFailure { t: ts, msg });
                }
            }
        }
        if !ok {
            continue;
        }

        // 5th-order solution and embedded error
        let mut y5 = y.clone();
        let mut err2 = 0.0f64;
        for i in 0..dim {
            let mut dy5 = C64::new(0.0, 0.0);
            let mut dy4 = C64::new(0.0, 0.0);
            for s in 0..7 {
                if B5[s] != 0.0 {
                    dy5 += k[s][i] * B5[s];
                }
                if B4[s] != 0.0 {
                    dy4 += k[s][i] * B4[s];
                }
            }
            y5[i] += dy5 * h;
            let scale = opts.atol + opts.rtol * y[i].norm().max(y5[i].norm());
            let e = ((dy5 - dy4) * h).norm() / scale;
            err2 += e * e;
        }
        let err = (err2 / dim as f64).sqrt().max(1e-30);

        if err <= 1.0 {
            t += h;
            y = y5;
            if y.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(OdeError::NonFinite { t });
            }
            observer(t, &y);
            // FSAL
            k[0] = k[6].clone();
            // PI controller (Gustafsson)
            let fac = 0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0);
            let fac = fac.clamp(0.2, 5.0);
            h *= fac;
            err_prev = err;
        } else {
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            h *= fac;
            // re-evaluate k0 not needed: state unchanged
        }
        if opts.h_max > 0.0 && h.abs() > opts.h_max {
            h = opts.h_max * dir;
        }
    }
    Ok(y)
}
