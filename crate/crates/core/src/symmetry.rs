//! Indefinite-metric structure of the S-matrix and the two-channel block
//! identities.
//!
//! A generator self-adjoint with respect to `(·,·)_J = ⟨·|J·⟩` has an
//! S-matrix unitary with respect to the sign matrix `R = diag(ρ_j)` once the
//! frame at the base point is J-normalized, `(φ_j, φ_j)_J = ρ_j ∈ {±1}`:
//! `S* R S = R`. For two-channel generators with real-symmetric potential the
//! blocks further satisfy `S_++ = conj(S_--)` and `S_+- = conj(S_-+)`.

use crate::linalg::{CMatrix, SpectralFrame, C64};
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum SymmetryError {
    #[error("eigenvector {index} has vanishing J-norm ({value:.3e}); J-unitarity is inapplicable")]
    NullVector { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// J-normalized frame data: `(φ_j, φ_k)_J = δ_jk ρ_j`.
#[derive(Debug, Clone)]
pub struct MetricData {
    pub j: CMatrix,
    /// Signs ρ_j ∈ {−1, +1}.
    pub r_signs: Vec<f64>,
    pub normalized_frame: SpectralFrame,
    /// The real diagonal values (φ_j, φ_j)_J before normalization.
    pub raw_j_norms: Vec<f64>,
}

impl MetricData {
    pub fn r_matrix(&self) -> CMatrix {
        CMatrix::diag(
            &self
                .r_signs
                .iter()
                .map(|&s| C64::new(s, 0.0))
                .collect::<Vec<_>>(),
        )
    }
}

/// Indefinite product `(x, y)_J = ⟨x|J y⟩`.
pub fn j_product(j: &CMatrix, x: &[C64], y: &[C64]) -> C64 {
    let jy = j.matvec(y);
    x.iter().zip(&jy).map(|(a, b)| a.conj() * b).sum()
}

/// Rescale each frame vector to unit |J-norm| and record the signs.
///
/// Requires `(φ_j, φ_j)_J ≠ 0` (real for a J-self-adjoint generator with a
/// simple real spectrum); the scaling is real positive so any phase
/// convention on the input frame survives.
pub fn j_normalize(frame: &SpectralFrame, j: &CMatrix) -> Result<MetricData, SymmetryError> {
    let n = frame.dim();
    if j.dim() != n {
        return Err(SymmetryError::DimensionMismatch {
            expected: n,
            got: j.dim(),
        });
    }
    let jnorm = j.max_abs().max(1.0);
    let mut out = frame.clone();
    let mut signs = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    for idx in 0..n {
        let phi = &frame.right_vectors[idx];
        let p = j_product(j, phi, phi);
        let phi_norm2: f64 = phi.iter().map(|c| c.norm_sqr()).sum();
        raw.push(p.re);
        if p.norm() < 1.0e-10 * phi_norm2 * jnorm {
            return Err(SymmetryError::NullVector {
                index: idx,
                value: p.norm(),
            });
        }
        let mu = 1.0 / p.norm().sqrt();
        signs.push(p.re.signum());
        for c in out.right_vectors[idx].iter_mut() {
            *c *= mu;
        }
        // keep ⟨l|r⟩ = 1 and the rank-one projectors unchanged
        for c in out.left_vectors[idx].iter_mut() {
            *c /= mu;
        }
    }
    Ok(MetricData {
        j: j.clone(),
        r_signs: signs,
        normalized_frame: out,
        raw_j_norms: raw,
    })
}

/// `‖S* R S - R‖` (Frobenius); zero for an S-matrix computed in the
/// J-normalized frame of a J-self-adjoint generator.
pub fn verify_s_unitarity(s: &CMatrix, metric: &MetricData) -> f64 {
    let r = metric.r_matrix();
    s.adjoint().matmul(&r).matmul(s).sub(&r).norm_fro()
}

/// Residuals of the two-channel block identities for a 2m×2m S-matrix given
/// in energy ordering `(-k_m .. -k_1, k_1 .. k_m)`.
#[derive(Debug, Clone)]
pub struct BlockSymmetryReport {
    /// ‖S_++ - conj(S_--)‖
    pub transmission_conj: f64,
    /// ‖S_+- - conj(S_-+)‖
    pub reflection_conj: f64,
    /// ‖S_++ S_++* - S_+- S_+-* - I‖
    pub unitarity_pp: f64,
    /// ‖S_++ S_-+* - S_+- S_--*‖
    pub unitarity_pm: f64,
    /// ‖S_-- S_--* - S_-+ S_-+* - I‖
    pub unitarity_mm: f64,
}

impl BlockSymmetryReport {
    pub fn max_conj_residual(&self) -> f64 {
        self.transmission_conj.max(self.reflection_conj)
    }
}

/// Split an energy-ordered two-channel S into ± blocks (+ block first).
pub fn to_block_order(s: &CMatrix, m: usize) -> Result<CMatrix, SymmetryError> {
    let n = 2 * m;
    if s.dim() != n {
        return Err(SymmetryError::DimensionMismatch {
            expected: n,
            got: s.dim(),
        });
    }
    // + block j ↔ energy index m+j (k_{j+1}); − block j ↔ energy m-1-j (−k_{j+1})
    let perm: Vec<usize> = (0..n)
        .map(|b| if b < m { m + b } else { 2 * m - 1 - b })
        .collect();
    Ok(CMatrix::from_fn(n, |a, b| s[(perm[a], perm[b])]))
}

fn block(s: &CMatrix, m: usize, row: usize, col: usize) -> CMatrix {
    CMatrix::from_fn(m, |i, j| s[(row * m + i, col * m + j)])
}

pub fn verify_block_symmetries(
    s_energy: &CMatrix,
    m: usize,
) -> Result<BlockSymmetryReport, SymmetryError> {
    let sb = to_block_order(s_energy, m)?;
    let spp = block(&sb, m, 0, 0);
    let spm = block(&sb, m, 0, 1);
    let smp = block(&sb, m, 1, 0);
    let smm = block(&sb, m, 1, 1);
    let id = CMatrix::identity(m);
    Ok(BlockSymmetryReport {
        transmission_conj: spp.sub(&smm.conj()).norm_fro(),
        reflection_conj: spm.sub(&smp.conj()).norm_fro(),
        unitarity_pp: spp
            .matmul(&spp.adjoint())
            .sub(&spm.matmul(&spm.adjoint()))
            .sub(&id)
            .norm_fro(),
        unitarity_pm: spp
            .matmul(&smp.adjoint())
            .sub(&spm.matmul(&smm.adjoint()))
            .norm_fro(),
        unitarity_mm: smm
            .matmul(&smm.adjoint())
            .sub(&smp.matmul(&smp.adjoint()))
            .sub(&id)
            .norm_fro(),
    })
}

#[derive(Debug, Clone, Error)]
pub enum DerivedElementError {
    #[error("|s_22| = {0:.3e} below 0.5; the derived-element formulas assume a near-identity diagonal")]
    DivisionGuard(f64),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
}

/// Agreement report for the unitarity-derived element relations.
#[derive(Debug, Clone)]
pub struct DerivedElementsReport {
    /// 3-level: |s21 + conj(s12)·s11/conj(s22)| / |s21|.
    pub s21_relative_residual: Option<f64>,
    /// 3-level: |s32 + conj(s23)·s33/conj(s22)| / |s32|.
    pub s32_relative_residual: Option<f64>,
    /// Two-channel: ‖S_++ S_+-ᵀ - (S_++ S_+-ᵀ)ᵀ‖.
    pub symmetric_product_residual: Option<f64>,
}

/// Evaluate the derived-element relations appropriate for the matrix shape:
/// the 3×3 adiabatic relations, and for 2m×2m two-channel matrices the
/// symmetric-product identity.
pub fn derived_elements(s: &CMatrix, two_channel_m: Option<usize>) -> Result<DerivedElementsReport, DerivedElementError> {
    let mut rep = DerivedElementsReport {
        s21_relative_residual: None,
        s32_relative_residual: None,
        symmetric_product_residual: None,
    };
    if let Some(m) = two_channel_m {
        let sb = to_block_order(s, m)?;
        let spp = block(&sb, m, 0, 0);
        let spm = block(&sb, m, 0, 1);
        let prod = spp.matmul(&spm.transpose());
        rep.symmetric_product_residual = Some(prod.sub(&prod.transpose()).norm_fro());
        return Ok(rep);
    }
    if s.dim() == 3 {
        let s22 = s[(1, 1)];
        if s22.norm() < 0.5 {
            return Err(DerivedElementError::DivisionGuard(s22.norm()));
        }
        let d21 = s[(1, 0)] + s[(0, 1)].conj() * s[(0, 0)] / s22.conj();
        let d32 = s[(2, 1)] + s[(1, 2)].conj() * s[(2, 2)] / s22.conj();
        rep.s21_relative_residual = Some(d21.norm() / s[(1, 0)].norm().max(1e-300));
        rep.s32_relative_residual = Some(d32.norm() / s[(2, 1)].norm().max(1e-300));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use crate::model::GeneratorModel;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn identity_metric_gives_positive_signs() {
        let h = CMatrix::from_rows(&[vec![c(0.0, 0.0), c(0.5, 0.0)], vec![c(0.5, 0.0), c(0.0, 0.0)]]);
        let f = linalg::eig_simple(&h, 1e-10).unwrap();
        let md = j_normalize(&f, &CMatrix::identity(2)).unwrap();
        assert_eq!(md.r_signs, vec![1.0, 1.0]);
        assert!(verify_s_unitarity(&CMatrix::identity(2), &md) < 1e-15);
    }

    #[test]
    fn two_channel_frame_signs_split() {
        let m = GeneratorModel::two_channel_default(4.0).unwrap();
        let f = m.frame_at(c(0.0, 0.0), m.default_gap_tol()).unwrap();
        let md = j_normalize(&f, m.metric_j.as_ref().unwrap()).unwrap();
        // energy order (-k2, -k1, k1, k2): J-norms ±2k_j‖u_j‖² → signs (-,-,+,+)
        assert_eq!(md.r_signs, vec![-1.0, -1.0, 1.0, 1.0]);
        // raw J-norms match ±2k_j for unit-norm χ (‖u‖² = 1/(1+k²) scaling)
        for (idx, &raw) in md.raw_j_norms.iter().enumerate() {
            let k = f.eigenvalues[idx].re;
            let expect = 2.0 * k / (1.0 + k * k);
            assert!(
                (raw - expect).abs() < 1e-9,
                "raw J-norm {raw} vs {expect} at {idx}"
            );
        }
    }

    #[test]
    fn null_vector_rejected() {
        // J = diag(1, -1), φ = (1, 1)/√2 has vanishing J-norm
        let jm = CMatrix::diag(&[c(1.0, 0.0), c(-1.0, 0.0)]);
        let h = CMatrix::from_rows(&[vec![c(0.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]]);
        let f = linalg::eig_simple(&h, 1e-10).unwrap();
        match j_normalize(&f, &jm) {
            Err(SymmetryError::NullVector { .. }) => {}
            other => panic!("expected NullVector, got {other:?}"),
        }
    }

    #[test]
    fn block_identities_for_identity() {
        let s = CMatrix::identity(4);
        let rep = verify_block_symmetries(&s, 2).unwrap();
        assert!(rep.transmission_conj < 1e-15);
        assert!(rep.reflection_conj < 1e-15);
        assert!(rep.unitarity_pp < 1e-15);
        assert!(rep.unitarity_pm < 1e-15);
        assert!(rep.unitarity_mm < 1e-15);
        let der = derived_elements(&s, Some(2)).unwrap();
        assert!(der.symmetric_product_residual.unwrap() < 1e-15);
    }

    #[test]
    fn derived_elements_guard() {
        let mut s = CMatrix::identity(3);
        s[(1, 1)] = c(0.1, 0.0);
        match derived_elements(&s, None) {
            Err(DerivedElementError::DivisionGuard(_)) => {}
            other => panic!("expected DivisionGuard, got {other:?}"),
        }
    }

    #[test]
    fn g_symmetry_of_two_channel_generator() {
        // G H G = -H and conj(H) = H on a grid
        let m = GeneratorModel::two_channel_default(4.0).unwrap();
        let g = CMatrix::diag(&[c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(-1.0, 0.0)]);
        for i in 0..11 {
            let t = -5.0 + i as f64;
            let h = m.eval(c(t, 0.0));
            let ghg = g.matmul(&h).matmul(&g);
            assert!(ghg.add(&h).norm_fro() < 1e-12, "GHG != -H at t={t}");
            assert!(h.conj().sub(&h).norm_fro() < 1e-12, "H not real at t={t}");
        }
        // the Hermitian control keeps J-self-adjointness but is not real
        let mc = GeneratorModel::two_channel_hermitian_control(4.0).unwrap();
        let h = mc.eval(c(0.3, 0.0));
        assert!(h.conj().sub(&h).norm_fro() > 0.05);
        let j = mc.metric_j.clone().unwrap();
        let jinv = linalg::invert(&j).unwrap();
        let rhs = jinv.matmul(&h.adjoint()).matmul(&j);
        assert!(h.sub(&rhs).norm_fro() < 1e-12);
    }
}
