//! Analytic generator families and hypothesis validation.
//!
//! A [`GeneratorModel`] is an analytic map `z ↦ H(z)` on a strip
//! `|Im z| ≤ strip_alpha`, with decaying limits `H(±)` at `Re z → ±∞`, real
//! non-degenerate spectrum on the real axis, an optional indefinite metric J
//! and optional avoided-crossing metadata for the perturbed families.
//!
//! Models expose the derivative `H'(z)` in closed form: downstream projector
//! derivatives need `H'` to full precision, and finite differences of `H`
//! would cap the global accuracy of every later stage.

use crate::expr::Expr;
use crate::linalg::{self, CMatrix, LinalgError, SpectralFrame, C64};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("parameter {name} = {value} outside valid range {range}")]
    Domain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("U(t) = E - V(t) is not positive definite at t = {t}")]
    PositivityViolated { t: f64 },
    #[error("channel momenta collide at t = {t}: {0}", .source)]
    DegenerateChannels { t: f64, source: LinalgError },
    #[error("expression matrix must be {expected}x{expected}, got row of length {got}")]
    BadShape { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A real crossing of the unperturbed (δ = 0) eigenvalue diagram.
/// `pair` holds 0-based analytic labels in the initial (t → -∞) ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub t: f64,
    pub pair: (usize, usize),
}

type MatFn = Arc<dyn Fn(C64) -> CMatrix + Send + Sync>;

#[derive(Clone)]
pub struct GeneratorModel {
    pub name: String,
    pub dim: usize,
    /// Analyticity half-width α of the strip.
    pub strip_alpha: f64,
    /// Decay exponent a of H2 (power-law bound; tanh families decay faster).
    pub decay_a: f64,
    pub h_minus: CMatrix,
    pub h_plus: CMatrix,
    /// Invertible self-adjoint metric J with H = J⁻¹ H* J, when present.
    pub metric_j: Option<CMatrix>,
    pub coupling_delta: Option<f64>,
    /// δ = 0 crossing points, for the perturbed families.
    pub crossings: Vec<Crossing>,
    /// Permutation σ of the δ = 0 diagram: the analytic level starting j-th
    /// from below ends ranked σ(j) at +∞ (0-based).
    pub diagram_sigma: Option<Vec<usize>>,
    eval_fn: MatFn,
    deriv_fn: MatFn,
}

impl std::fmt::Debug for GeneratorModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("strip_alpha", &self.strip_alpha)
            .field("decay_a", &self.decay_a)
            .field("coupling_delta", &self.coupling_delta)
            .finish()
    }
}

/// Default strip half-width for tanh-based models: below π/2, away from the
/// tanh poles at ±iπ/2.
pub const TANH_STRIP_ALPHA: f64 = 1.2;

impl GeneratorModel {
    pub fn eval(&self, z: C64) -> CMatrix {
        (self.eval_fn)(z)
    }

    pub fn deriv(&self, z: C64) -> CMatrix {
        (self.deriv_fn)(z)
    }

    pub fn default_gap_tol(&self) -> f64 {
        let scale = self
            .eval(C64::new(0.0, 0.0))
            .max_abs()
            .max(self.h_plus.max_abs());
        1.0e-8 * scale.max(1.0)
    }

    /// Spectral frame at a point of the strip.
    pub fn frame_at(&self, z: C64, gap_tol: f64) -> Result<SpectralFrame, LinalgError> {
        let mut f = linalg::eig_simple(&self.eval(z), gap_tol)?;
        f.point = z;
        Ok(f)
    }

    /// `H(z) = [[tanh z, δ], [δ, -tanh z]]`.
    ///
    /// Eigenvalues `∓√(tanh²z + δ²)`; the lowest degeneracies sit at
    /// `z = ±i·arctan δ`.
    pub fn two_level_avoided(delta: f64) -> Result<Self, ModelError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(ModelError::Domain {
                name: "delta",
                value: delta,
                range: "(0, 1)",
            });
        }
        let d = C64::new(delta, 0.0);
        let eval = move |z: C64| {
            let th = z.tanh();
            CMatrix::from_rows(&[vec![th, d], vec![d, -th]])
        };
        let deriv = move |z: C64| {
            let s2 = sech2(z);
            let zero = C64::new(0.0, 0.0);
            CMatrix::from_rows(&[vec![s2, zero], vec![zero, -s2]])
        };
        let one = C64::new(1.0, 0.0);
        let h_plus = CMatrix::from_rows(&[vec![one, d], vec![d, -one]]);
        let h_minus = CMatrix::from_rows(&[vec![-one, d], vec![d, one]]);
        Ok(Self {
            name: format!("two_level_avoided(delta={delta})"),
            dim: 2,
            strip_alpha: TANH_STRIP_ALPHA,
            decay_a: 1.0,
            h_minus,
            h_plus,
            metric_j: Some(CMatrix::identity(2)),
            coupling_delta: Some(delta),
            crossings: vec![Crossing { t: 0.0, pair: (0, 1) }],
            diagram_sigma: Some(vec![1, 0]),
            eval_fn: Arc::new(eval),
            deriv_fn: Arc::new(deriv),
        })
    }

    /// `H(z, δ) = diag(3·tanh z, -1, 1) + δ·V` with `V_jk = 1 - δ_jk`.
    ///
    /// At δ = 0 the level `3 tanh t` crosses `-1` at `t₁ = artanh(-1/3)` and
    /// `+1` at `t₂ = artanh(1/3)`, both with positive derivative difference;
    /// the resulting diagram permutation is σ = (1→3, 2→1, 3→2).
    pub fn three_level_adiabatic(delta: f64) -> Result<Self, ModelError> {
        if !(0.0..=0.3).contains(&delta) {
            return Err(ModelError::Domain {
                name: "delta",
                value: delta,
                range: "[0, 0.3]",
            });
        }
        let d = C64::new(delta, 0.0);
        let eval = move |z: C64| {
            let th = z.tanh() * 3.0;
            CMatrix::from_rows(&[
                vec![th, d, d],
                vec![d, C64::new(-1.0, 0.0), d],
                vec![d, d, C64::new(1.0, 0.0)],
            ])
        };
        let deriv = move |z: C64| {
            let s2 = sech2(z) * 3.0;
            let mut m = CMatrix::zeros(3);
            m[(0, 0)] = s2;
            m
        };
        let limit = |sign: f64| {
            CMatrix::from_rows(&[
                vec![C64::new(3.0 * sign, 0.0), d, d],
                vec![d, C64::new(-1.0, 0.0), d],
                vec![d, d, C64::new(1.0, 0.0)],
            ])
        };
        let t1 = -(1.0f64 / 3.0).atanh();
        Ok(Self {
            name: format!("three_level_adiabatic(delta={delta})"),
            dim: 3,
            strip_alpha: TANH_STRIP_ALPHA,
            decay_a: 1.0,
            h_minus: limit(-1.0),
            h_plus: limit(1.0),
            metric_j: Some(CMatrix::identity(3)),
            coupling_delta: Some(delta),
            crossings: vec![
                Crossing { t: t1, pair: (0, 1) },
                Crossing { t: -t1, pair: (0, 2) },
            ],
            diagram_sigma: Some(vec![2, 0, 1]),
            eval_fn: Arc::new(eval),
            deriv_fn: Arc::new(deriv),
        })
    }

    /// Two-channel stationary Schrödinger generator
    /// `H(z) = [[0, I], [U(z), 0]]`, `U = E - V`, with the indefinite metric
    /// `J = [[0, I], [I, 0]]`. Eigenvalues come in pairs `±k_j(t)`.
    ///
    /// `v_entries` is the m×m symmetric potential matrix as expression trees
    /// in z (real on the real axis by construction).
    pub fn two_channel_schrodinger(
        energy: f64,
        v_entries: &[Vec<Expr>],
        strip_alpha: f64,
        decay_a: f64,
    ) -> Result<Self, ModelError> {
        let m = v_entries.len();
        for row in v_entries {
            if row.len() != m {
                return Err(ModelError::BadShape {
                    expected: m,
                    got: row.len(),
                });
            }
        }
        let v: Vec<Vec<Expr>> = v_entries.to_vec();
        let vp: Vec<Vec<Expr>> = v.iter().map(|r| r.iter().map(Expr::derivative).collect()).collect();
        let e = energy;
        let eval_u = move |z: C64, v: &[Vec<Expr>]| -> CMatrix {
            CMatrix::from_fn(m, |i, j| {
                let val = v[i][j].eval(z);
                if i == j {
                    C64::new(e, 0.0) - val
                } else {
                    -val
                }
            })
        };
        Self::assemble_two_channel(
            energy,
            m,
            Arc::new(move |z| eval_u(z, &v)),
            Arc::new(move |z| CMatrix::from_fn(m, |i, j| -vp[i][j].eval(z))),
            strip_alpha,
            decay_a,
            format!("two_channel_schrodinger(E={energy}, m={m})"),
        )
    }

    /// The default two-channel model used throughout:
    /// `V(t) = 0.3·diag(1 + tanh t, -1 - tanh t) + 0.1·offdiag`, E = 4.
    pub fn two_channel_default(energy: f64) -> Result<Self, ModelError> {
        let v11 = Expr::parse("0.3 * (1 + tanh(z))").unwrap();
        let v22 = Expr::parse("-0.3 * (1 + tanh(z))").unwrap();
        let v12 = Expr::parse("0.1").unwrap();
        Self::two_channel_schrodinger(
            energy,
            &[vec![v11, v12.clone()], vec![v12, v22]],
            TANH_STRIP_ALPHA,
            1.0,
        )
    }

    /// Negative-control variant: complex Hermitian (non-real) V. Keeps the
    /// J-self-adjointness of the generator but breaks the realness symmetry
    /// behind the block identities.
    pub fn two_channel_hermitian_control(energy: f64) -> Result<Self, ModelError> {
        let m = 2;
        let e = energy;
        let u = move |z: C64| -> CMatrix {
            let th = z.tanh();
            let d11 = (C64::new(1.0, 0.0) + th) * 0.3;
            let off = C64::new(0.0, 0.1);
            CMatrix::from_rows(&[
                vec![C64::new(e, 0.0) - d11, -off],
                vec![-off.conj(), C64::new(e, 0.0) + d11],
            ])
        };
        let up = move |z: C64| -> CMatrix {
            let s2 = sech2(z) * 0.3;
            let zero = C64::new(0.0, 0.0);
            CMatrix::from_rows(&[vec![-s2, zero], vec![zero, s2]])
        };
        Self::assemble_two_channel(
            energy,
            m,
            Arc::new(u),
            Arc::new(up),
            TANH_STRIP_ALPHA,
            1.0,
            format!("two_channel_hermitian_control(E={energy})"),
        )
    }

    fn assemble_two_channel(
        energy: f64,
        m: usize,
        u_fn: MatFn,
        up_fn: MatFn,
        strip_alpha: f64,
        decay_a: f64,
        name: String,
    ) -> Result<Self, ModelError> {
        let n = 2 * m;
        // positivity and channel-distinctness check on a real grid
        for i in 0..=200 {
            let t = -10.0 + 0.1 * i as f64;
            let u = u_fn(C64::new(t, 0.0));
            let fu = match linalg::eig_simple(&u, 1.0e-10 * energy.abs().max(1.0)) {
                Ok(f) => f,
                Err(err @ LinalgError::DegenerateSpectrum { .. }) => {
                    return Err(ModelError::DegenerateChannels { t, source: err })
                }
                Err(err) => return Err(ModelError::Linalg(err)),
            };
            if fu.eigenvalues.iter().any(|k2| k2.re <= 0.0) {
                return Err(ModelError::PositivityViolated { t });
            }
        }
        let assemble = move |u: CMatrix| -> CMatrix {
            CMatrix::from_fn(n, |i, j| {
                if i < m && j >= m && j - m == i {
                    C64::new(1.0, 0.0)
                } else if i >= m && j < m {
                    u[(i - m, j)]
                } else {
                    C64::new(0.0, 0.0)
                }
            })
        };
        let assemble_d = move |up: CMatrix| -> CMatrix {
            CMatrix::from_fn(n, |i, j| {
                if i >= m && j < m {
                    up[(i - m, j)]
                } else {
                    C64::new(0.0, 0.0)
                }
            })
        };
        let big = 1.0e7;
        let h_minus = assemble(u_fn(C64::new(-big, 0.0)));
        let h_plus = assemble(u_fn(C64::new(big, 0.0)));
        let metric = CMatrix::from_fn(n, |i, j| {
            if (i < m && j == i + m) || (i >= m && j == i - m) {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let u2 = u_fn.clone();
        Ok(Self {
            name,
            dim: n,
            strip_alpha,
            decay_a,
            h_minus,
            h_plus,
            metric_j: Some(metric),
            coupling_delta: None,
            crossings: Vec::new(),
            diagram_sigma: None,
            eval_fn: Arc::new(move |z| assemble(u2(z))),
            deriv_fn: Arc::new(move |z| assemble_d(up_fn(z))),
        })
    }

    /// Constant generator (trivial dynamics; useful as a control).
    pub fn constant(h: CMatrix) -> Self {
        let dim = h.dim();
        let h2 = h.clone();
        let h3 = h.clone();
        Self {
            name: "constant".into(),
            dim,
            strip_alpha: TANH_STRIP_ALPHA,
            decay_a: 1.0,
            h_minus: h.clone(),
            h_plus: h.clone(),
            metric_j: None,
            coupling_delta: None,
            crossings: Vec::new(),
            diagram_sigma: None,
            eval_fn: Arc::new(move |_| h2.clone()),
            deriv_fn: Arc::new(move |_| CMatrix::zeros(h3.dim())),
        }
    }

    /// Custom model from an expression-tree entry matrix.
    pub fn custom(
        entries: &[Vec<Expr>],
        strip_alpha: f64,
        decay_a: f64,
        metric_j: Option<CMatrix>,
    ) -> Result<Self, ModelError> {
        let n = entries.len();
        for row in entries {
            if row.len() != n {
                return Err(ModelError::BadShape {
                    expected: n,
                    got: row.len(),
                });
            }
        }
        if strip_alpha <= 0.0 {
            return Err(ModelError::Domain {
                name: "strip_alpha",
                value: strip_alpha,
                range: "(0, inf)",
            });
        }
        let exprs: Vec<Vec<Expr>> = entries.to_vec();
        let dexprs: Vec<Vec<Expr>> = exprs
            .iter()
            .map(|r| r.iter().map(Expr::derivative).collect())
            .collect();
        let big = 1.0e7;
        let eval = move |z: C64, table: &[Vec<Expr>]| CMatrix::from_fn(n, |i, j| table[i][j].eval(z));
        let h_minus = eval(C64::new(-big, 0.0), &exprs);
        let h_plus = eval(C64::new(big, 0.0), &exprs);
        let e2 = exprs.clone();
        Ok(Self {
            name: format!("custom(dim={n})"),
            dim: n,
            strip_alpha,
            decay_a,
            h_minus,
            h_plus,
            metric_j,
            coupling_delta: None,
            crossings: Vec::new(),
            diagram_sigma: None,
            eval_fn: Arc::new(move |z| eval(z, &e2)),
            deriv_fn: Arc::new(move |z| CMatrix::from_fn(n, |i, j| dexprs[i][j].eval(z))),
        })
    }
}

fn sech2(z: C64) -> C64 {
    let c = z.cosh();
    C64::new(1.0, 0.0) / (c * c)
}

/// Grid specification for [`validate`].
#[derive(Debug, Clone, Copy)]
pub struct ValidateGrid {
    pub t_max: f64,
    pub n_real: usize,
    pub n_imag: usize,
}

impl Default for ValidateGrid {
    fn default() -> Self {
        Self {
            t_max: 20.0,
            n_real: 401,
            n_imag: 9,
        }
    }
}

/// One detected real crossing of the δ = 0 diagram: (t_r, j, k, d/dt(e_j - e_k)).
#[derive(Debug, Clone)]
pub struct CrossingEntry {
    pub t: f64,
    pub pair: (usize, usize),
    pub derivative_difference: f64,
}

/// Diagnostics for hypotheses H1–H3 (and the crossing structure of H5).
#[derive(Debug, Clone)]
pub struct HypothesisReport {
    /// Minimal real-axis spectral gap over the grid.
    pub gap_min: f64,
    /// Power-law exponent fitted to ‖H(t) - H(±)‖ (log-log fit).
    pub decay_fit_exponent: f64,
    /// Exponential rate fitted to ‖H(t) - H(±)‖ (semilog fit).
    pub decay_exp_rate: f64,
    /// True when the semilog fit is the better model of the tail.
    pub decay_is_exponential: bool,
    /// Fitted tail amplitude C (for the better-fitting model).
    pub decay_amplitude: f64,
    /// Max Cauchy–Riemann residual of the entries over the strip grid.
    pub analyticity_residual: f64,
    /// δ = 0 crossings (empty unless the model has zero coupling).
    pub crossing_table: Vec<CrossingEntry>,
}

/// Validate H1–H3 diagnostics on a grid; failures are carried as report
/// fields, not errors.
pub fn validate(model: &GeneratorModel, grid: &ValidateGrid) -> HypothesisReport {
    let gap_min = real_axis_min_gap(model, grid);
    let (decay_fit_exponent, decay_exp_rate, decay_is_exponential, decay_amplitude) =
        fit_decay(model, grid.t_max);
    let analyticity_residual = cauchy_riemann_residual(model, grid);
    let crossing_table = if model.coupling_delta == Some(0.0) {
        detect_crossings(model, grid)
    } else {
        Vec::new()
    };
    HypothesisReport {
        gap_min,
        decay_fit_exponent,
        decay_exp_rate,
        decay_is_exponential,
        decay_amplitude,
        analyticity_residual,
        crossing_table,
    }
}

fn real_axis_min_gap(model: &GeneratorModel, grid: &ValidateGrid) -> f64 {
    let mut gap_min = f64::INFINITY;
    for i in 0..grid.n_real {
        let t = -grid.t_max + 2.0 * grid.t_max * i as f64 / (grid.n_real - 1) as f64;
        match model.frame_at(C64::new(t, 0.0), 0.0) {
            Ok(f) => gap_min = gap_min.min(f.min_gap),
            Err(_) => gap_min = 0.0,
        }
    }
    gap_min
}

/// Least-squares slope/intercept of y against x.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    (slope, intercept, rss)
}

/// Fit the decay of ‖H(t) - H(±)‖ on |t| ∈ [t_max/2, t_max]: a power law
/// (log-log) against an exponential (semilog); the better-fitting model wins.
/// Returns (power exponent, exponential rate, exponential_is_better, amplitude C).
fn fit_decay(model: &GeneratorModel, t_max: f64) -> (f64, f64, bool, f64) {
    let mut ts = Vec::new();
    let mut norms = Vec::new();
    let m = 16;
    for i in 0..m {
        let t = t_max / 2.0 + (t_max / 2.0) * i as f64 / (m - 1) as f64;
        for sign in [-1.0, 1.0] {
            let limit = if sign < 0.0 { &model.h_minus } else { &model.h_plus };
            let d = model.eval(C64::new(sign * t, 0.0)).sub(limit).norm_fro();
            if d > 1e-290 {
                ts.push(t);
                norms.push(d);
            }
        }
    }
    if ts.len() < 4 {
        // constant model or below double-precision tail: decay trivially passes
        return (f64::INFINITY, f64::INFINITY, true, 0.0);
    }
    let logn: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let logt: Vec<f64> = ts.iter().map(|v| v.ln()).collect();
    let (p_slope, p_icpt, p_rss) = linear_fit(&logt, &logn);
    let (e_slope, e_icpt, e_rss) = linear_fit(&ts, &logn);
    let exponential = e_rss < p_rss;
    let amplitude = if exponential { e_icpt.exp() } else { p_icpt.exp() };
    (-p_slope, -e_slope, exponential, amplitude)
}

/// Max Cauchy–Riemann residual over the strip grid: the horizontal and
/// vertical difference quotients of an analytic entry must agree. Also checks
/// the closed-form `H'` against the horizontal quotient.
fn cauchy_riemann_residual(model: &GeneratorModel, grid: &ValidateGrid) -> f64 {
    let h = 1.0e-6;
    let mut worst: f64 = 0.0;
    let ni = grid.n_imag.max(3);
    let nr = 41.min(grid.n_real);
    for ii in 0..ni {
        let s = -model.strip_alpha + 2.0 * model.strip_alpha * ii as f64 / (ni - 1) as f64;
        for ir in 0..nr {
            let t = -grid.t_max + 2.0 * grid.t_max * ir as f64 / (nr - 1) as f64;
            let z = C64::new(t, s);
            let dx = model
                .eval(z + C64::new(h, 0.0))
                .sub(&model.eval(z - C64::new(h, 0.0)))
                .scale(C64::new(1.0 / (2.0 * h), 0.0));
            let dy = model
                .eval(z + C64::new(0.0, h))
                .sub(&model.eval(z - C64::new(0.0, h)))
                .scale(C64::new(0.0, -1.0 / (2.0 * h)));
            worst = worst.max(dx.sub(&dy).max_abs());
            worst = worst.max(dx.sub(&model.deriv(z)).max_abs());
        }
    }
    worst
}

/// Track the analytic (δ = 0) eigenvalue branches across the real axis by
/// linear prediction and record their pairwise sign changes.
fn detect_crossings(model: &GeneratorModel, grid: &ValidateGrid) -> Vec<CrossingEntry> {
    let n = model.dim;
    let steps = (grid.n_real - 1).max(400);
    let dt = 2.0 * grid.t_max / steps as f64;
    let eig_at = |t: f64| -> Vec<f64> {
        // δ = 0 spectra may be exactly degenerate at crossings; eig_simple's
        // gap guard is disabled here on purpose
        let f = linalg::eig_simple(&model.eval(C64::new(t, 0.0)), 0.0);
        match f {
            Ok(f) => f.eigenvalues.iter().map(|e| e.re).collect(),
            Err(_) => charpoly_real_roots(&model.eval(C64::new(t, 0.0))),
        }
    };

    let t0 = -grid.t_max;
    let mut labels = eig_at(t0);
    labels.sort_by(f64::total_cmp);
    let mut slopes = vec![0.0f64; n];
    let mut out: Vec<CrossingEntry> = Vec::new();

    let mut prev = labels.clone();
    for step in 1..=steps {
        let t = t0 + dt * step as f64;
        let mut vals = eig_at(t);
        vals.sort_by(f64::total_cmp);
        // assign sorted values to analytic labels by linear prediction
        let predicted: Vec<f64> = labels
            .iter()
            .zip(&slopes)
            .map(|(v, s)| v + s * dt)
            .collect();
        let mut assigned = vec![usize::MAX; n];
        let mut used = vec![false; n];
        // greedy closest-pair assignment (n ≤ ~12)
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
        for (i, &p) in predicted.iter().enumerate() {
            for (j, &v) in vals.iter().enumerate() {
                pairs.push(((p - v).abs(), i, j));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, i, j) in pairs {
            if assigned[i] == usize::MAX && !used[j] {
                assigned[i] = j;
                used[j] = true;
            }
        }
        let new_labels: Vec<f64> = assigned.iter().map(|&j| vals[j]).collect();
        for i in 0..n {
            slopes[i] = (new_labels[i] - labels[i]) / dt;
        }
        // detect sign changes of label differences
        for a in 0..n {
            for b in (a + 1)..n {
                let before = prev[a] - prev[b];
                let after = new_labels[a] - new_labels[b];
                if before.signum() != after.signum() && before != 0.0 {
                    // refine by secant on the tracked difference
                    let tr = t - dt + dt * before.abs() / (before - after).abs().max(1e-300);
                    let ddiff = (after - before) / dt;
                    let (j, k) = if ddiff > 0.0 { (a, b) } else { (b, a) };
                    out.push(CrossingEntry {
                        t: tr,
                        pair: (j, k),
                        derivative_difference: ddiff.abs(),
                    });
                }
            }
        }
        prev = new_labels.clone();
        labels = new_labels;
    }
    out.sort_by(|x, y| x.t.total_cmp(&y.t));
    out
}

/// Real parts of the characteristic polynomial roots via companion-matrix
/// eigenvalues of the polynomial; fallback for exactly degenerate points.
fn charpoly_real_roots(h: &CMatrix) -> Vec<f64> {
    let coeffs = h.charpoly();
    let n = h.dim();
    let mut comp = CMatrix::zeros(n);
    for i in 1..n {
        comp[(i, i - 1)] = C64::new(1.0, 0.0);
    }
    for i in 0..n {
        comp[(i, n - 1)] = -coeffs[n - i];
    }
    // companion matrices of multiple roots are defective but the QR sweep
    // still returns the diagonal of the Schur form
    match linalg::schur(&comp) {
        Ok((t, _)) => (0..n).map(|i| t[(i, i)].re).collect(),
        Err(_) => vec![0.0; n],
    }
}
