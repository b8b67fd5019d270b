//! Parallel transport of the eigenframe along piecewise-linear paths in the
//! strip: `W'(z) = K(z) W(z)` with `K = Σ_j P_j' P_j`, eigenvalue label
//! continuation, coupling functions `a_jk`, accumulated phase integrals
//! `Δ_jk = ∫ (e_j - e_k) dz`, and loop monodromy data (σ₀, θ_j).
//!
//! `W`, `W⁻¹` and the n phase integrals are integrated as one ODE system, so
//! frame and phases share the same adaptive step sequence. Labels continue by
//! nearest-eigenvalue matching with a guard: a step whose best match exceeds
//! half the local gap is rejected and halved, which prevents silent branch
//! swaps near the degeneracy set.

use crate::linalg::{self, CMatrix, LinalgError, SpectralFrame, C64};
use crate::model::GeneratorModel;
use crate::ode::{self, OdeError, OdeOptions};
use std::cell::RefCell;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("path passes too close to a degeneracy near z = {re:.6} + {im:.6}i (gap {gap:.3e})")]
    PathThroughDegeneracy { re: f64, im: f64, gap: f64 },
    #[error("adaptive step control failed: {0}")]
    StepFailure(String),
    #[error("monodromy proportionality residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    NonProportional { residual: f64, tol: f64 },
    #[error("invalid path: {0}")]
    BadPath(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Piecewise-linear path in the strip.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub vertices: Vec<C64>,
    pub closed: bool,
    /// +1 or -1; meaningful for closed loops only.
    pub orientation: i8,
}

impl PathSpec {
    pub fn polyline(vertices: Vec<C64>) -> Self {
        Self {
            vertices,
            closed: false,
            orientation: 1,
        }
    }

    pub fn real_segment(a: f64, b: f64) -> Self {
        Self::polyline(vec![C64::new(a, 0.0), C64::new(b, 0.0)])
    }

    pub fn closed_loop(vertices: Vec<C64>, orientation: i8) -> Self {
        Self {
            vertices,
            closed: true,
            orientation,
        }
    }

    /// Loop based at `base` on the real axis around the box
    /// `[t_lo, t_hi] × [y_lo, y_hi]` (upper half plane when `upper`).
    /// Negative orientation walks the box clockwise, as seen from above.
    pub fn based_box_loop(
        base: f64,
        t_lo: f64,
        t_hi: f64,
        y_lo: f64,
        y_hi: f64,
        upper: bool,
        orientation: i8,
    ) -> Self {
        let s = if upper { 1.0 } else { -1.0 };
        let b = C64::new(base, 0.0);
        let entry = C64::new(t_lo, 0.0);
        let c_ll = C64::new(t_lo, s * y_lo);
        let c_ul = C64::new(t_lo, s * y_hi);
        let c_ur = C64::new(t_hi, s * y_hi);
        let c_lr = C64::new(t_hi, s * y_lo);
        // clockwise in the upper half plane: up the left edge, across the
        // top, down the right edge, back along the bottom
        let mut box_walk = vec![c_ll, c_ul, c_ur, c_lr, c_ll];
        let effective_cw = if upper { orientation == -1 } else { orientation == 1 };
        if !effective_cw {
            box_walk.reverse();
        }
        let mut v = vec![b];
        if (base - t_lo).abs() > 1e-12 {
            v.push(entry);
        }
        v.push(c_ll);
        v.extend(box_walk.into_iter().skip(1));
        if (base - t_lo).abs() > 1e-12 {
            v.push(entry);
        }
        v.push(b);
        // drop consecutive duplicates
        v.dedup_by(|a, b| (*a - *b).norm() < 1e-14);
        Self::closed_loop(v, orientation)
    }

    pub fn length(&self) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .sum()
    }

    pub fn validate(&self, strip_alpha: f64) -> Result<(), TransportError> {
        if self.vertices.len() < 2 {
            return Err(TransportError::BadPath("need at least two vertices".into()));
        }
        for w in self.vertices.windows(2) {
            if (w[1] - w[0]).norm() < 1e-14 {
                return Err(TransportError::BadPath(
                    "consecutive vertices must be distinct".into(),
                ));
            }
        }
        if self
            .vertices
            .iter()
            .any(|z| z.im.abs() > strip_alpha + 1e-12)
        {
            return Err(TransportError::BadPath(format!(
                "path leaves the strip |Im z| <= {strip_alpha}"
            )));
        }
        if self.closed {
            let first = self.vertices.first().unwrap();
            let last = self.vertices.last().unwrap();
            if (first - last).norm() > 1e-12 {
                return Err(TransportError::BadPath(
                    "closed path must end at its start".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One accepted transport step.
#[derive(Debug, Clone)]
pub struct FrameSample {
    pub z: C64,
    /// Eigenvalues in transport labels (continuations of the start labels).
    pub eigenvalues: Vec<C64>,
    pub w: CMatrix,
    pub winv: CMatrix,
    /// Phase integrals `I_j = ∫ e_j dz` from the path start, transport labels.
    pub phases: Vec<C64>,
    /// Spectral gap at this point.
    pub min_gap: f64,
}

/// Transport solution along a path.
#[derive(Debug, Clone)]
pub struct FramePath {
    pub path: PathSpec,
    pub start_frame: SpectralFrame,
    pub samples: Vec<FrameSample>,
    /// `label_map[j] = k`: the continued branch j coincides with start
    /// branch k at the path end (σ₀ for closed loops).
    pub label_map: Vec<usize>,
    pub min_gap_along: f64,
}

impl FramePath {
    pub fn end(&self) -> &FrameSample {
        self.samples.last().unwrap()
    }

    /// `∮ e_j dz` accumulated along the whole path for start label j.
    pub fn phase_integral(&self, j: usize) -> C64 {
        self.end().phases[j]
    }

    /// Intertwining residual `‖W P_j(start) - P_j(z) W‖` at a sample.
    pub fn intertwining_residual(
        &self,
        model: &GeneratorModel,
        idx: usize,
    ) -> Result<f64, TransportError> {
        let s = &self.samples[idx];
        let frame = model.frame_at(s.z, 0.0)?;
        // match the local frame's projectors to transport labels
        let perm = match_labels(&s.eigenvalues, &frame.eigenvalues)
            .ok_or(TransportError::PathThroughDegeneracy {
                re: s.z.re,
                im: s.z.im,
                gap: frame.min_gap,
            })?;
        let n = self.start_frame.dim();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let lhs = s.w.matmul(&self.start_frame.projectors[j]);
            let rhs = frame.projectors[perm[j]].matmul(&s.w);
            worst = worst.max(lhs.sub(&rhs).norm_fro());
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransportOptions {
    pub tol: f64,
    /// Cap on the step in arc length.
    pub h_max: f64,
    pub gap_tol: f64,
}

impl TransportOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            h_max: 0.25,
            gap_tol: 0.0,
        }
    }
}

/// Greedy globally-consistent assignment of `vals` to `refs`; `None` if any
/// match is worse than half the reference gap.
fn match_labels(refs: &[C64], vals: &[C64]) -> Option<Vec<usize>> {
    let n = refs.len();
    let mut ref_gap = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            ref_gap = ref_gap.min((refs[i] - refs[j]).norm());
        }
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, r) in refs.iter().enumerate() {
        for (j, v) in vals.iter().enumerate() {
            pairs.push(((r - v).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut assign = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for (d, i, j) in pairs {
        if assign[i] == usize::MAX && !used[j] {
            if d > 0.5 * ref_gap {
                return None;
            }
            assign[i] = j;
            used[j] = true;
        }
    }
    Some(assign)
}

struct LabelState {
    /// Eigenvalues in transport labels at the last accepted step.
    ref_eigs: Vec<C64>,
    min_gap_along: f64,
    /// Frame cached from the most recent RHS evaluation (FSAL reuse).
    cached: Option<(f64, SpectralFrame, Vec<usize>)>,
    degenerate_hit: Option<(C64, f64)>,
}

/// Transport the frame along `path`, integrating `(W, W⁻¹, I)` with shared
/// adaptive steps.
pub fn transport_frame(
    model: &GeneratorModel,
    path: &PathSpec,
    tol: f64,
) -> Result<FramePath, TransportError> {
    transport_frame_opts(model, path, &TransportOptions::new(tol))
}

pub fn transport_frame_opts(
    model: &GeneratorModel,
    path: &PathSpec,
    opts: &TransportOptions,
) -> Result<FramePath, TransportError> {
    path.validate(model.strip_alpha)?;
    let n = model.dim;
    let gap_tol = if opts.gap_tol > 0.0 {
        opts.gap_tol
    } else {
        model.default_gap_tol()
    };

    let z0 = path.vertices[0];
    let mut start_frame = model.frame_at(z0, gap_tol).map_err(|e| match e {
        LinalgError::DegenerateSpectrum { min_gap, .. } => TransportError::PathThroughDegeneracy {
            re: z0.re,
            im: z0.im,
            gap: min_gap,
        },
        other => TransportError::Linalg(other),
    })?;
    start_frame.point = z0;

    let state = RefCell::new(LabelState {
        ref_eigs: start_frame.eigenvalues.clone(),
        min_gap_along: start_frame.min_gap,
        cached: None,
        degenerate_hit: None,
    });

    // flat state: W (n²), W⁻¹ (n²), I (n)
    let dim = 2 * n * n + n;
    let mut y = vec![C64::new(0.0, 0.0); dim];
    for i in 0..n {
        y[i * n + i] = C64::new(1.0, 0.0);
        y[n * n + i * n + i] = C64::new(1.0, 0.0);
    }

    let mut samples: Vec<FrameSample> = vec![FrameSample {
        z: z0,
        eigenvalues: start_frame.eigenvalues.clone(),
        w: CMatrix::identity(n),
        winv: CMatrix::identity(n),
        phases: vec![C64::new(0.0, 0.0); n],
        min_gap: start_frame.min_gap,
    }];

    for seg in path.vertices.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let dz = b - a;
        let seg_len = dz.norm();

        let mut rhs = |u: f64, y: &[C64]| -> Result<Vec<C64>, String> {
            let z = a + dz * u;
            let frame = match model.frame_at(z, gap_tol) {
                Ok(f) => f,
                Err(LinalgError::DegenerateSpectrum { min_gap, .. }) => {
                    state.borrow_mut().degenerate_hit = Some((z, min_gap));
                    return Err(format!("degenerate spectrum at {z}"));
                }
                Err(e) => return Err(e.to_string()),
            };
            let perm = {
                let st = state.borrow();
                match_labels(&st.ref_eigs, &frame.eigenvalues)
                    .ok_or_else(|| format!("label continuity lost at {z}"))?
            };
            let derivs = linalg::projector_derivative(&model.deriv(z), &frame)
                .map_err(|e| e.to_string())?;
            let k = linalg::k_matrix(&frame, &derivs).map_err(|e| e.to_string())?;

            let mut w = CMatrix::zeros(n);
            let mut winv = CMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    w[(i, j)] = y[i * n + j];
                    winv[(i, j)] = y[n * n + i * n + j];
                }
            }
            let dw = k.matmul(&w).scale(dz);
            let dwinv = winv.matmul(&k).scale(-dz);
            let mut dy = vec![C64::new(0.0, 0.0); dim];
            for i in 0..n {
                for j in 0..n {
                    dy[i * n + j] = dw[(i, j)];
                    dy[n * n + i * n + j] = dwinv[(i, j)];
                }
            }
            for j in 0..n {
                dy[2 * n * n + j] = frame.eigenvalues[perm[j]] * dz;
            }
            state.borrow_mut().cached = Some((u, frame, perm));
            Ok(dy)
        };

        let mut observer = |u: f64, y: &[C64]| {
            let z = a + dz * u;
            // reuse the FSAL frame when the cache matches this point
            let (frame, perm) = {
                let mut st = state.borrow_mut();
                match st.cached.take() {
                    Some((uc, f, p)) if uc == u => (f, p),
                    _ => {
                        drop(st);
                        let f = match model.frame_at(z, gap_tol) {
                            Ok(f) => f,
                            Err(_) => return,
                        };
                        let p = {
                            let st = state.borrow();
                            match match_labels(&st.ref_eigs, &f.eigenvalues) {
                                Some(p) => p,
                                None => return,
                            }
                        };
                        (f, p)
                    }
                }
            };
            let labeled: Vec<C64> = perm.iter().map(|&p| frame.eigenvalues[p]).collect();
            let mut st = state.borrow_mut();
            st.ref_eigs = labeled.clone();
            st.min_gap_along = st.min_gap_along.min(frame.min_gap);
            drop(st);
            let mut w = CMatrix::zeros(n);
            let mut winv = CMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    w[(i, j)] = y[i * n + j];
                    winv[(i, j)] = y[n * n + i * n + j];
                }
            }
            let phases: Vec<C64> = (0..n).map(|j| y[2 * n * n + j]).collect();
            if u > 0.0 {
                samples.push(FrameSample {
                    z,
                    eigenvalues: labeled,
                    w,
                    winv,
                    phases,
                    min_gap: frame.min_gap,
                });
            }
        };

        let ode_opts = OdeOptions {
            rtol: opts.tol,
            atol: opts.tol * 1e-2,
            h_max: (opts.h_max / seg_len).min(0.5),
            h_init: (opts.h_max / seg_len).min(0.1),
            max_steps: 2_000_000,
        };
        y = ode::integrate(&mut rhs, 0.0, 1.0, y, &ode_opts, &mut observer).map_err(|e| {
            let st = state.borrow();
            if let Some((z, gap)) = st.degenerate_hit {
                TransportError::PathThroughDegeneracy {
                    re: z.re,
                    im: z.im,
                    gap,
                }
            } else {
                match e {
                    OdeError::RhsFailure { t, msg } => {
                        TransportError::StepFailure(format!("at segment u={t}: {msg}"))
                    }
                    other => TransportError::StepFailure(other.to_string()),
                }
            }
        })?;
    }

    // end labels vs start labels
    let end_eigs = samples.last().unwrap().eigenvalues.clone();
    let label_map = match_labels(&end_eigs, &start_frame.eigenvalues).ok_or_else(|| {
        TransportError::StepFailure("could not align end labels with start labels".into())
    })?;

    let min_gap_along = state.borrow().min_gap_along;
    Ok(FramePath {
        path: path.clone(),
        start_frame,
        samples,
        label_map,
        min_gap_along,
    })
}

/// Coupling matrix `a_jk(z) = -⟨φ_j(0)| P_j(0) W⁻¹ K W φ_k(0)⟩ / ‖φ_j(0)‖²`
/// at a sample, with `a_jj = 0` zeroed by construction (the phase condition
/// `P_j φ_j' = 0` makes the diagonal vanish identically).
pub fn couplings(
    model: &GeneratorModel,
    fp: &FramePath,
    at_index: usize,
) -> Result<CMatrix, TransportError> {
    let s = &fp.samples[at_index];
    let n = fp.start_frame.dim();
    // guard against a numerically singular W
    let det = linalg::determinant(&s.w)?;
    if det.norm() < 1e-12 {
        return Err(TransportError::StepFailure(format!(
            "transport matrix singular at z = {}",
            s.z
        )));
    }
    let frame = model.frame_at(s.z, 0.0)?;
    let derivs = linalg::projector_derivative(&model.deriv(s.z), &frame)?;
    let k = linalg::k_matrix(&frame, &derivs)?;
    let m = s.winv.matmul(&k).matmul(&s.w);
    let mut a = CMatrix::zeros(n);
    for j in 0..n {
        // row vector φ_j(0)† P_j(0)
        let pj = &fp.start_frame.projectors[j];
        let phi_j = &fp.start_frame.right_vectors[j];
        let norm2: f64 = phi_j.iter().map(|c| c.norm_sqr()).sum();
        let mut row = vec![C64::new(0.0, 0.0); n];
        for col in 0..n {
            let mut sum = C64::new(0.0, 0.0);
            for i in 0..n {
                sum += phi_j[i].conj() * pj[(i, col)];
            }
            row[col] = sum;
        }
        for kk in 0..n {
            if kk == j {
                continue;
            }
            let mphi = m.matvec(&fp.start_frame.right_vectors[kk]);
            let mut val = C64::new(0.0, 0.0);
            for i in 0..n {
                val += row[i] * mphi[i];
            }
            a[(j, kk)] = -val / norm2;
        }
    }
    Ok(a)
}

/// Accumulated `Δ_jk = ∫ (e_j - e_k) dz` over the whole path.
pub fn delta_phase(fp: &FramePath, j: usize, k: usize) -> C64 {
    if j == k {
        return C64::new(0.0, 0.0);
    }
    fp.phase_integral(j) - fp.phase_integral(k)
}

/// Monodromy data of a closed loop.
#[derive(Debug, Clone)]
pub struct MonodromyResult {
    pub loop_spec: PathSpec,
    /// σ₀ as a bijection: continued branch j lands on start branch σ₀(j).
    pub sigma0: Vec<usize>,
    /// θ_j with `W_loop φ_j(0) = e^{-iθ_j} φ_{σ₀(j)}(0)`; the real part is
    /// unwound along the loop, the imaginary part is branch-free.
    pub thetas: Vec<C64>,
    pub w_loop: CMatrix,
    /// Worst proportionality residual over j.
    pub residual: f64,
    /// `∮ e_j dz` per start label.
    pub loop_integrals: Vec<C64>,
}

/// Transport around a closed loop and extract (σ₀, θ_j, W_loop).
pub fn monodromy(
    model: &GeneratorModel,
    loop_spec: &PathSpec,
    tol: f64,
) -> Result<MonodromyResult, TransportError> {
    if !loop_spec.closed {
        return Err(TransportError::BadPath("monodromy needs a closed loop".into()));
    }
    let fp = transport_frame(model, loop_spec, tol)?;
    monodromy_of(&fp, tol)
}

/// Extract monodromy data from an already-transported closed loop.
pub fn monodromy_of(fp: &FramePath, tol: f64) -> Result<MonodromyResult, TransportError> {
    let n = fp.start_frame.dim();
    let w_loop = fp.end().w.clone();
    let sigma0 = fp.label_map.clone();
    {
        // σ₀ must be a bijection
        let mut seen = vec![false; n];
        for &s in &sigma0 {
            if s >= n || seen[s] {
                return Err(TransportError::StepFailure(
                    "label map is not a permutation".into(),
                ));
            }
            seen[s] = true;
        }
    }

    let mut thetas = Vec::with_capacity(n);
    let mut residual: f64 = 0.0;
    for j in 0..n {
        let target = &fp.start_frame.right_vectors[sigma0[j]];
        let image = w_loop.matvec(&fp.start_frame.right_vectors[j]);
        // λ from least squares onto the target direction
        let mut num = C64::new(0.0, 0.0);
        let mut den = 0.0f64;
        for i in 0..n {
            num += target[i].conj() * image[i];
            den += target[i].norm_sqr();
        }
        let lambda = num / den;
        let mut res2 = 0.0f64;
        for i in 0..n {
            res2 += (image[i] - lambda * target[i]).norm_sqr();
        }
        residual = residual.max(res2.sqrt() / lambda.norm().max(1e-300));

        // unwind arg λ by tracking ⟨ref, W(z)φ_j(0)⟩ along the samples
        let arg = unwound_argument(fp, j, sigma0[j]);
        let theta = C64::new(-arg, lambda.norm().ln());
        thetas.push(theta);
    }
    let check_tol = (tol * 1.0e4).max(1e-9);
    if residual > check_tol {
        return Err(TransportError::NonProportional {
            residual,
            tol: check_tol,
        });
    }
    let loop_integrals = (0..n).map(|j| fp.phase_integral(j)).collect();
    Ok(MonodromyResult {
        loop_spec: fp.path.clone(),
        sigma0,
        thetas,
        w_loop,
        residual,
        loop_integrals,
    })
}

/// Accumulate the argument of the proportionality scalar continuously along
/// the loop so that Re θ_j carries no mod-2π ambiguity. The tracked scalar is
/// `u(m) = ⟨ref, W(z_m) φ_j(0)⟩` for a reference vector switched away from
/// zero crossings.
fn unwound_argument(fp: &FramePath, j: usize, sigma_j: usize) -> f64 {
    let n = fp.start_frame.dim();
    let mut ref_idx = j;
    let scalar = |m: usize, r: usize| -> C64 {
        let img = fp.samples[m].w.matvec(&fp.start_frame.right_vectors[j]);
        let rv = &fp.start_frame.right_vectors[r];
        let mut s = C64::new(0.0, 0.0);
        for i in 0..n {
            s += rv[i].conj() * img[i];
        }
        s
    };
    let mut prev = scalar(0, ref_idx);
    let mut total = prev.arg();
    for m in 1..fp.samples.len() {
        let cur = scalar(m, ref_idx);
        if cur.norm() < 0.05 {
            // switch the reference vector, preserving accumulated phase
            let img = fp.samples[m].w.matvec(&fp.start_frame.right_vectors[j]);
            let best = (0..n)
                .max_by(|&a, &b| {
                    let sa: C64 = fp.start_frame.right_vectors[a]
                        .iter()
                        .zip(&img)
                        .map(|(r, v)| r.conj() * v)
                        .sum();
                    let sb: C64 = fp.start_frame.right_vectors[b]
                        .iter()
                        .zip(&img)
                        .map(|(r, v)| r.conj() * v)
                        .sum();
                    sa.norm().total_cmp(&sb.norm())
                })
                .unwrap();
            if best != ref_idx && prev.norm() > 1e-300 {
                let old_cur = cur;
                let new_cur = scalar(m, best);
                // jump the accumulated argument to the new scalar's branch
                total += (old_cur / prev).arg();
                total += (new_cur / old_cur).arg();
                prev = new_cur;
                ref_idx = best;
                continue;
            }
        }
        total += (cur / prev).arg();
        prev = cur;
    }
    // final correction: λ = u_end / ⟨ref, φ_{σ(j)}(0)⟩
    let mut denom = C64::new(0.0, 0.0);
    for i in 0..n {
        denom += fp.start_frame.right_vectors[ref_idx][i].conj()
            * fp.start_frame.right_vectors[sigma_j][i];
    }
    total - denom.arg()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GeneratorModel;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn constant_generator_transports_trivially() {
        let h = CMatrix::from_rows(&[
            vec![c(0.3, 0.0), c(0.1, 0.05)],
            vec![c(0.1, -0.05), c(-0.4, 0.0)],
        ]);
        let m = GeneratorModel::constant(h);
        let path = PathSpec::polyline(vec![c(0.0, 0.0), c(2.0, 0.5), c(4.0, -0.3)]);
        let fp = transport_frame(&m, &path, 1e-10).unwrap();
        let end = fp.end();
        assert!(end.w.sub(&CMatrix::identity(2)).norm_fro() < 1e-10);
        assert_eq!(fp.label_map, vec![0, 1]);
        // couplings vanish for a constant generator
        let a = couplings(&m, &fp, fp.samples.len() - 1).unwrap();
        assert!(a.norm_fro() < 1e-12);
    }

    #[test]
    fn two_level_real_axis_intertwining() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        let path = PathSpec::real_segment(-10.0, 10.0);
        let fp = transport_frame(&m, &path, 1e-10).unwrap();
        for idx in [0, fp.samples.len() / 2, fp.samples.len() - 1] {
            let res = fp.intertwining_residual(&m, idx).unwrap();
            assert!(res < 1e-8, "intertwining residual {res} at {idx}");
        }
        // W stays invertible and W·W⁻¹ ≈ I
        let end = fp.end();
        let prod = end.w.matmul(&end.winv);
        assert!(prod.sub(&CMatrix::identity(2)).norm_fro() < 1e-8);
    }

    #[test]
    fn trivial_loop_has_identity_monodromy() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        // small loop far from ±i·arctan(0.5)
        let loop_spec = PathSpec::closed_loop(
            vec![c(2.0, 0.0), c(2.5, 0.2), c(3.0, 0.0), c(2.5, -0.2), c(2.0, 0.0)],
            1,
        );
        let mono = monodromy(&m, &loop_spec, 1e-10).unwrap();
        assert_eq!(mono.sigma0, vec![0, 1]);
        assert!(mono.w_loop.sub(&CMatrix::identity(2)).norm_fro() < 1e-8);
        for th in &mono.thetas {
            assert!(th.norm() < 1e-7, "theta = {th}");
        }
        for li in &mono.loop_integrals {
            assert!(li.norm() < 1e-9);
        }
    }

    #[test]
    fn two_level_branch_point_monodromy_swaps_labels() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        // negatively oriented box loop around z0 = i·arctan(0.5) ≈ 0.4636i
        let h0 = 0.5f64.atan();
        let loop_spec =
            PathSpec::based_box_loop(0.0, -0.4, 0.4, 0.5 * h0, 1.5 * h0, true, -1);
        let mono = monodromy(&m, &loop_spec, 1e-10).unwrap();
        assert_eq!(mono.sigma0, vec![1, 0], "expected the (1 2) transposition");
        // independent oracle: continue e_1 along the loop by small steps and
        // confirm it lands on e_2
        let fp = transport_frame(&m, &loop_spec, 1e-10).unwrap();
        let end = fp.end();
        let start = &fp.start_frame;
        assert!((end.eigenvalues[0] - start.eigenvalues[1]).norm() < 1e-7);
        assert!((end.eigenvalues[1] - start.eigenvalues[0]).norm() < 1e-7);
    }

    #[test]
    fn couplings_diagonal_is_exactly_zero_and_matches_fd() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        let path = PathSpec::real_segment(0.0, 1.0e-9);
        let fp = transport_frame(&m, &path, 1e-12).unwrap();
        let a = couplings(&m, &fp, 0).unwrap();
        assert_eq!(a[(0, 0)], c(0.0, 0.0));
        assert_eq!(a[(1, 1)], c(0.0, 0.0));

        // finite-difference oracle at t = 0:
        // a_jk = -⟨φ_j|P_j φ_k'⟩/‖φ_j‖², φ_k' from the transported frame
        let h = 1e-6;
        let seg = PathSpec::real_segment(0.0, h);
        let fph = transport_frame(&m, &seg, 1e-13).unwrap();
        let endw = &fph.end().w;
        let f0 = &fph.start_frame;
        let n = 2;
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    continue;
                }
                let phi_k_h = endw.matvec(&f0.right_vectors[k]);
                let phi_k_prime: Vec<C64> = phi_k_h
                    .iter()
                    .zip(&f0.right_vectors[k])
                    .map(|(a, b)| (a - b) / h)
                    .collect();
                let pj_phi = f0.projectors[j].matvec(&phi_k_prime);
                let mut val = C64::new(0.0, 0.0);
                for i in 0..n {
                    val += f0.right_vectors[j][i].conj() * pj_phi[i];
                }
                let fd = -val;
                assert!(
                    (a[(j, k)] - fd).norm() < 1e-5,
                    "a[{j}{k}] = {}, fd = {}",
                    a[(j, k)],
                    fd
                );
            }
        }
    }

    #[test]
    fn delta_phase_antisymmetry_and_quadrature() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        let t_end = 2.0;
        let path = PathSpec::real_segment(0.0, t_end);
        let fp = transport_frame(&m, &path, 1e-11).unwrap();
        assert_eq!(delta_phase(&fp, 0, 0), c(0.0, 0.0));
        let d01 = delta_phase(&fp, 0, 1);
        let d10 = delta_phase(&fp, 1, 0);
        assert!((d01 + d10).norm() < 1e-12);
        // closed form: Δ_12(t) = -2 ∫_0^t √(tanh² + δ²), Simpson quadrature
        let mut integral = 0.0;
        let steps = 20000;
        let dt = t_end / steps as f64;
        for i in 0..steps {
            let f = |t: f64| (t.tanh().powi(2) + 0.25).sqrt();
            let t = i as f64 * dt;
            integral += dt / 6.0 * (f(t) + 4.0 * f(t + dt / 2.0) + f(t + dt));
        }
        assert!(
            (d01.re + 2.0 * integral).abs() < 1e-8,
            "Δ01 = {}, expected {}",
            d01.re,
            -2.0 * integral
        );
    }

    #[test]
    fn homotopic_loops_agree() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        let h0 = 0.5f64.atan();
        let a = PathSpec::based_box_loop(0.0, -0.3, 0.3, 0.5 * h0, 1.4 * h0, true, -1);
        let b = PathSpec::based_box_loop(0.0, -0.55, 0.45, 0.35 * h0, 1.6 * h0, true, -1);
        let ma = monodromy(&m, &a, 1e-11).unwrap();
        let mb = monodromy(&m, &b, 1e-11).unwrap();
        assert_eq!(ma.sigma0, mb.sigma0);
        for j in 0..2 {
            let da = ma.loop_integrals[j] - mb.loop_integrals[j];
            assert!(da.norm() < 1e-8, "loop integral mismatch {da}");
            let dth = ma.thetas[j] - mb.thetas[j];
            // θ agrees mod 2π; the unwound real parts may differ by full turns
            let wrapped = (dth.re / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            assert!((dth.re - wrapped).abs() < 1e-6, "theta re mismatch {dth}");
            assert!(dth.im.abs() < 1e-6, "theta im mismatch {dth}");
        }
    }

    #[test]
    fn conjugate_loop_gives_conjugate_monodromy() {
        let m = GeneratorModel::two_level_avoided(0.5).unwrap();
        let h0 = 0.5f64.atan();
        let up = PathSpec::based_box_loop(0.0, -0.4, 0.4, 0.5 * h0, 1.5 * h0, true, -1);
        let down = PathSpec::based_box_loop(0.0, -0.4, 0.4, 0.5 * h0, 1.5 * h0, false, 1);
        let mu = monodromy(&m, &up, 1e-11).unwrap();
        let md = monodromy(&m, &down, 1e-11).unwrap();
        assert_eq!(mu.sigma0, md.sigma0);
        for j in 0..2 {
            let conj_int = C64::new(md.loop_integrals[j].re, -md.loop_integrals[j].im);
            assert!((mu.loop_integrals[j] - conj_int).norm() < 1e-8);
        }
    }

    #[test]
    fn j_metric_products_constant_along_real_transport() {
        // two-channel model: (φ_j(t), φ_k(t))_J must equal its value at 0
        let m = GeneratorModel::two_channel_default(4.0).unwrap();
        let j = m.metric_j.clone().unwrap();
        let path = PathSpec::real_segment(0.0, 6.0);
        let fp = transport_frame(&m, &path, 1e-10).unwrap();
        let f0 = &fp.start_frame;
        let n = 4;
        let end = fp.end();
        for a in 0..n {
            for b in 0..n {
                let va = end.w.matvec(&f0.right_vectors[a]);
                let vb = end.w.matvec(&f0.right_vectors[b]);
                let jvb = j.matvec(&vb);
                let mut prod_t = C64::new(0.0, 0.0);
                for i in 0..n {
                    prod_t += va[i].conj() * jvb[i];
                }
                let jv0 = j.matvec(&f0.right_vectors[b]);
                let mut prod_0 = C64::new(0.0, 0.0);
                for i in 0..n {
                    prod_0 += f0.right_vectors[a][i].conj() * jv0[i];
                }
                assert!(
                    (prod_t - prod_0).norm() < 1e-8,
                    "J-product drift at ({a},{b}): {} vs {}",
                    prod_t,
                    prod_0
                );
            }
        }
    }
}
