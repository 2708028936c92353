//! Marginal Gaussian likelihood evaluation with low-rank structure.
//!
//! The sampler repeatedly needs the density of a residual vector under
//! N(0, σ_μ² C̃C̃ᵀ + S + σ_e² I_N), where C̃ is a tall design (leaf indicators
//! or a fixed regression design) and S is the spatial covariance at
//! observation level. Everything here is phrased in terms of the "middle"
//! operator M = σ_e² I + S, which has three concrete forms:
//!
//! * no spatial term (M diagonal),
//! * the sparse GMRF approximation S = Ã Q⁻¹ Ãᵀ, inverted with the Woodbury
//!   identity through a sparse factor of Q + σ_e⁻² ÃᵀÃ,
//! * the exact dense form S = E K Eᵀ with a cluster-level kernel K, inverted
//!   through an n×n dense Cholesky (observations enter only via cluster
//!   means, so no N×N factorization is ever formed).
//!
//! The design layer C̃ is then folded in with a b×b application of the
//! Sherman-Morrison-Woodbury identity and the matrix determinant lemma.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::data::IncidenceMap;
use crate::error::{Error, Result};
use crate::solver::factor::SparseFactor;
use crate::sparse::SparseMatrix;

/// Middle operator M = σ_e² I + (spatial covariance), in one of three forms.
pub enum MarginalOp<'a> {
    /// M = σ_e² I_N.
    Nugget { n_obs: usize, sigma_e2: f64 },
    /// M = σ_e² I + Ã Q⁻¹ Ãᵀ with `inner` a factor of Q + σ_e⁻² ÃᵀÃ.
    Gmrf {
        /// Observation-level projection Ã (N x n_v).
        a: &'a SparseMatrix,
        /// log det Q at the current spatial hyperparameters.
        q_logdet: f64,
        /// Sparse factor of Q + σ_e⁻² ÃᵀÃ.
        inner: &'a SparseFactor,
        sigma_e2: f64,
    },
    /// M = σ_e² I + E K Eᵀ with `chol` the dense factor of
    /// W = σ_e² I_n + D^{1/2} K D^{1/2}, D = diag(cluster sizes).
    Cluster {
        incidence: &'a IncidenceMap,
        chol: &'a Cholesky<f64, Dyn>,
        w_logdet: f64,
        sigma_e2: f64,
    },
}

impl MarginalOp<'_> {
    pub fn n_obs(&self) -> usize {
        match self {
            MarginalOp::Nugget { n_obs, .. } => *n_obs,
            MarginalOp::Gmrf { a, .. } => a.nrows(),
            MarginalOp::Cluster { incidence, .. } => incidence.n_obs(),
        }
    }

    pub fn sigma_e2(&self) -> f64 {
        match self {
            MarginalOp::Nugget { sigma_e2, .. }
            | MarginalOp::Gmrf { sigma_e2, .. }
            | MarginalOp::Cluster { sigma_e2, .. } => *sigma_e2,
        }
    }

    /// M⁻¹ v.
    pub fn apply_inv(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_obs(), "apply_inv dimension mismatch");
        match self {
            MarginalOp::Nugget { sigma_e2, .. } => v.iter().map(|x| x / sigma_e2).collect(),
            MarginalOp::Gmrf { a, inner, sigma_e2, .. } => {
                // (σ_e²I + AQ⁻¹Aᵀ)⁻¹ = σ_e⁻²I − σ_e⁻⁴ A (Q + σ_e⁻²AᵀA)⁻¹ Aᵀ.
                let at_v = a.tmatvec(v);
                let w = inner.solve(&at_v);
                let aw = a.matvec(&w);
                let s2 = *sigma_e2;
                v.iter().zip(&aw).map(|(x, y)| x / s2 - y / (s2 * s2)).collect()
            }
            MarginalOp::Cluster { incidence, chol, sigma_e2, .. } => {
                // With Ẽ = E D^{-1/2} (orthonormal columns):
                // M⁻¹ = σ_e⁻² I + Ẽ (W⁻¹ − σ_e⁻² I) Ẽᵀ.
                let s2 = *sigma_e2;
                let counts = incidence.counts();
                let mut et_v = incidence.reduce_sum(v);
                for (i, t) in et_v.iter_mut().enumerate() {
                    *t /= (counts[i] as f64).sqrt();
                }
                let sol = chol.solve(&DVector::from_column_slice(&et_v));
                let inner_vec: Vec<f64> = (0..et_v.len())
                    .map(|i| (sol[i] - et_v[i] / s2) / (counts[i] as f64).sqrt())
                    .collect();
                let lifted = incidence.expand(&inner_vec);
                v.iter().zip(&lifted).map(|(x, y)| x / s2 + y).collect()
            }
        }
    }

    /// log det M.
    pub fn logdet(&self) -> f64 {
        match self {
            MarginalOp::Nugget { n_obs, sigma_e2 } => *n_obs as f64 * sigma_e2.ln(),
            MarginalOp::Gmrf { a, q_logdet, inner, sigma_e2 } => {
                a.nrows() as f64 * sigma_e2.ln() + inner.logdet() - q_logdet
            }
            MarginalOp::Cluster { incidence, w_logdet, sigma_e2, .. } => {
                (incidence.n_obs() - incidence.n_clusters()) as f64 * sigma_e2.ln() + w_logdet
            }
        }
    }
}

/// Tall design matrix C̃ (N x b): leaf-membership indicators for a tree, or a
/// dense regression design for the linear comparators.
#[derive(Debug, Clone)]
pub enum TallDesign {
    /// One indicator column per leaf; `leaf_of_obs[k]` is the column with a 1
    /// in row k.
    Indicator { leaf_of_obs: Vec<usize>, n_leaves: usize },
    /// Arbitrary dense design.
    Dense(DMatrix<f64>),
}

impl TallDesign {
    pub fn nrows(&self) -> usize {
        match self {
            TallDesign::Indicator { leaf_of_obs, .. } => leaf_of_obs.len(),
            TallDesign::Dense(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            TallDesign::Indicator { n_leaves, .. } => *n_leaves,
            TallDesign::Dense(m) => m.ncols(),
        }
    }

    /// Column t as a dense vector.
    pub fn column(&self, t: usize) -> Vec<f64> {
        match self {
            TallDesign::Indicator { leaf_of_obs, .. } => {
                leaf_of_obs.iter().map(|&l| if l == t { 1.0 } else { 0.0 }).collect()
            }
            TallDesign::Dense(m) => m.column(t).iter().cloned().collect(),
        }
    }

    /// C̃ μ.
    pub fn matvec(&self, mu: &[f64]) -> Vec<f64> {
        assert_eq!(mu.len(), self.ncols(), "design matvec mismatch");
        match self {
            TallDesign::Indicator { leaf_of_obs, .. } => {
                leaf_of_obs.iter().map(|&l| mu[l]).collect()
            }
            TallDesign::Dense(m) => {
                (m * DVector::from_column_slice(mu)).as_slice().to_vec()
            }
        }
    }

    /// C̃ᵀ v.
    pub fn tmatvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.nrows(), "design tmatvec mismatch");
        match self {
            TallDesign::Indicator { leaf_of_obs, n_leaves } => {
                let mut out = vec![0.0; *n_leaves];
                for (k, &l) in leaf_of_obs.iter().enumerate() {
                    out[l] += v[k];
                }
                out
            }
            TallDesign::Dense(m) => {
                (m.transpose() * DVector::from_column_slice(v)).as_slice().to_vec()
            }
        }
    }
}

fn design_cross_products(
    design: &TallDesign,
    op: &MarginalOp,
    r: &[f64],
) -> (DMatrix<f64>, DVector<f64>, Vec<Vec<f64>>) {
    let b = design.ncols();
    let minv_cols: Vec<Vec<f64>> =
        (0..b).map(|t| op.apply_inv(&design.column(t))).collect();
    let mut s = DMatrix::zeros(b, b);
    let mut u = DVector::zeros(b);
    for t in 0..b {
        let col_t = design.column(t);
        for w in t..b {
            let v: f64 = col_t.iter().zip(&minv_cols[w]).map(|(a, b)| a * b).sum();
            s[(t, w)] = v;
            s[(w, t)] = v;
        }
        u[t] = r.iter().zip(&minv_cols[t]).map(|(a, b)| a * b).sum();
    }
    (s, u, minv_cols)
}

/// Log density of N(0, σ_μ² C̃C̃ᵀ + M) evaluated at `r`, where M is the
/// spatial middle operator. Pass `None` (or σ_μ² = 0) to drop the design
/// layer entirely.
pub fn lowrank_gaussian_logpdf(
    r: &[f64],
    design: Option<&TallDesign>,
    sigma_mu2: f64,
    op: &MarginalOp,
) -> Result<f64> {
    let n = op.n_obs();
    if r.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "residual length {} vs {} observations",
            r.len(),
            n
        )));
    }
    if sigma_mu2 < 0.0 {
        return Err(Error::InvalidConfig("negative design prior variance".into()));
    }
    if op.sigma_e2() <= 0.0 {
        return Err(Error::InvalidConfig("nugget variance must be positive".into()));
    }
    let minv_r = op.apply_inv(r);
    let quad0: f64 = r.iter().zip(&minv_r).map(|(a, b)| a * b).sum();
    let ld0 = op.logdet();
    const LN_2PI: f64 = 1.837877066409345483560659472811;
    let base = -0.5 * (n as f64 * LN_2PI);
    let skip_design = match design {
        None => true,
        Some(d) => {
            if d.nrows() != n {
                return Err(Error::ShapeMismatch(format!(
                    "design has {} rows for {} observations",
                    d.nrows(),
                    n
                )));
            }
            d.ncols() == 0 || sigma_mu2 == 0.0
        }
    };
    if skip_design {
        return Ok(base - 0.5 * (ld0 + quad0));
    }
    let design = design.unwrap();
    let (s, u, _) = design_cross_products(design, op, r);
    let b = design.ncols();
    // Matrix determinant lemma: det(M + σ_μ² C̃C̃ᵀ) = det M · det(I_b + σ_μ² S),
    // and Woodbury for the quadratic form.
    let w2 = DMatrix::identity(b, b) + sigma_mu2 * &s;
    let chol = Cholesky::new(w2).ok_or_else(|| {
        Error::NotPositiveDefinite("design Woodbury block".into())
    })?;
    let ld2: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let y = chol.solve(&u);
    let quad = quad0 - sigma_mu2 * u.dot(&y);
    Ok(base - 0.5 * (ld0 + ld2 + quad))
}

/// Posterior mean and covariance of the design coefficients μ given residual
/// `r`: V = (C̃ᵀM⁻¹C̃ + σ_μ⁻²I)⁻¹, m = V C̃ᵀ M⁻¹ r.
pub fn leaf_posterior(
    r: &[f64],
    design: &TallDesign,
    sigma_mu2: f64,
    op: &MarginalOp,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let b = design.ncols();
    if r.len() != op.n_obs() || design.nrows() != op.n_obs() {
        return Err(Error::ShapeMismatch("leaf posterior dimension mismatch".into()));
    }
    if sigma_mu2 == 0.0 {
        // Degenerate prior pins every coefficient at zero.
        return Ok((DVector::zeros(b), DMatrix::zeros(b, b)));
    }
    let (s, u, _) = design_cross_products(design, op, r);
    let vinv = s + DMatrix::identity(b, b) / sigma_mu2;
    let chol = Cholesky::new(vinv)
        .ok_or_else(|| Error::NotPositiveDefinite("leaf posterior precision".into()))?;
    let v = chol.inverse();
    let m = &v * u;
    Ok((m, v))
}

/// Applies the Woodbury identity (σ_e²I + ÃQ⁻¹Ãᵀ)⁻¹ v through the factored
/// inner matrix Q + σ_e⁻² ÃᵀÃ.
pub fn woodbury_inverse_apply(
    a: &SparseMatrix,
    inner: &SparseFactor,
    sigma_e2: f64,
    v: &[f64],
) -> Result<Vec<f64>> {
    if v.len() != a.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "vector length {} vs {} rows of A",
            v.len(),
            a.nrows()
        )));
    }
    if sigma_e2 <= 0.0 {
        return Err(Error::InvalidConfig("nugget variance must be positive".into()));
    }
    let op = MarginalOp::Gmrf { a, q_logdet: 0.0, inner, sigma_e2 };
    Ok(op.apply_inv(v))
}

/// Draws the latent mesh field u given the total residual: the conditional is
/// N(μ_u, P⁻¹) with P = Q + σ_e⁻²ÃᵀÃ (the factored `inner` matrix) and
/// μ_u = σ_e⁻² P⁻¹ Ãᵀ r.
pub fn conditional_field_draw<R: Rng + ?Sized>(
    r_total: &[f64],
    a: &SparseMatrix,
    inner: &SparseFactor,
    sigma_e2: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if r_total.len() != a.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "residual length {} vs {} rows of A",
            r_total.len(),
            a.nrows()
        )));
    }
    if sigma_e2 <= 0.0 {
        return Err(Error::InvalidConfig("nugget variance must be positive".into()));
    }
    let mut at_r = a.tmatvec(r_total);
    for v in &mut at_r {
        *v /= sigma_e2;
    }
    let mean = inner.solve(&at_r);
    let noise = inner.draw_gaussian(rng);
    Ok(mean.iter().zip(&noise).map(|(m, z)| m + z).collect())
}

/// Builds W = σ_e² I_n + D^{1/2} K D^{1/2} for the dense cluster operator.
pub fn cluster_weight_matrix(
    kernel: &DMatrix<f64>,
    counts: &[usize],
    sigma_e2: f64,
) -> DMatrix<f64> {
    let n = counts.len();
    assert_eq!(kernel.nrows(), n, "kernel dimension mismatch");
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let di = (counts[i] as f64).sqrt();
        for j in 0..n {
            w[(i, j)] = di * (counts[j] as f64).sqrt() * kernel[(i, j)];
        }
        w[(i, i)] += sigma_e2;
    }
    w
}

/// Dense Cholesky with a jitter ladder: on failure, adds
/// `jitter * mean(diag)` to the diagonal, jitter from 1e-10 to 1e-6 tenfold.
/// Returns the factorization and its log determinant.
pub fn dense_chol_jitter(mut m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let mean_diag = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
    let mut jitter = 0.0;
    loop {
        match Cholesky::new(m.clone()) {
            Some(chol) => {
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                return Ok((chol, logdet));
            }
            None => {
                let next = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
                if next > 1e-6 {
                    return Err(Error::NotPositiveDefinite(format!(
                        "dense {n}x{n} matrix failed Cholesky after jitter ladder"
                    )));
                }
                let bump = (next - jitter) * mean_diag.max(f64::MIN_POSITIVE);
                for i in 0..n {
                    m[(i, i)] += bump;
                }
                jitter = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::factor::FillOrdering;

    #[test]
    fn identity_woodbury_halves() {
        // A = I, Q = I, σ_e² = 1: M = 2I so M⁻¹v = v/2.
        let n = 4;
        let eye = SparseMatrix::from_diagonal(&vec![1.0; n]);
        let inner = SparseFactor::new(
            &SparseMatrix::from_diagonal(&vec![2.0; n]),
            FillOrdering::Natural,
        )
        .unwrap();
        let v = vec![1.0, -2.0, 3.0, 0.5];
        let out = woodbury_inverse_apply(&eye, &inner, 1.0, &v).unwrap();
        for i in 0..n {
            assert!((out[i] - v[i] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nugget_logpdf_is_iid_normal() {
        let r = vec![0.3, -1.1, 0.7];
        let sigma_e2 = 1.7;
        let op = MarginalOp::Nugget { n_obs: 3, sigma_e2 };
        let got = lowrank_gaussian_logpdf(&r, None, 0.0, &op).unwrap();
        let want: f64 = r
            .iter()
            .map(|x| {
                -0.5 * ((2.0 * std::f64::consts::PI * sigma_e2).ln() + x * x / sigma_e2)
            })
            .sum();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn design_layer_logdet_scaling() {
        // Scalar check of the determinant lemma with a single ones column.
        let n = 5;
        let op = MarginalOp::Nugget { n_obs: n, sigma_e2: 1.0 };
        let design = TallDesign::Indicator { leaf_of_obs: vec![0; n], n_leaves: 1 };
        let r = vec![0.1, 0.2, -0.3, 0.4, -0.5];
        let f = |smu2: f64| lowrank_gaussian_logpdf(&r, Some(&design), smu2, &op).unwrap();
        // s = 1ᵀM⁻¹1 = n; doubling σ_μ² must shift the logdet part by
        // -0.5 ln((1+2σ_μ²n)/(1+σ_μ²n)) plus the quadratic change.
        let smu2 = 0.3;
        let s = n as f64;
        let quad_term = |v: f64| {
            let u: f64 = r.iter().sum();
            v * u * u / (1.0 + v * s)
        };
        let expect = -0.5
            * (((1.0 + 2.0 * smu2 * s) / (1.0 + smu2 * s)).ln()
                - (quad_term(2.0 * smu2) - quad_term(smu2)));
        assert!((f(2.0 * smu2) - f(smu2) - expect).abs() < 1e-10);
    }

    #[test]
    fn leaf_posterior_matches_scalar_formula() {
        // Single leaf, no spatial field: textbook normal-normal update.
        let n = 6;
        let sigma_e2 = 0.8;
        let sigma_mu2 = 0.5;
        let r = vec![1.0, 0.5, -0.2, 0.3, 0.9, -1.4];
        let op = MarginalOp::Nugget { n_obs: n, sigma_e2 };
        let design = TallDesign::Indicator { leaf_of_obs: vec![0; n], n_leaves: 1 };
        let (m, v) = leaf_posterior(&r, &design, sigma_mu2, &op).unwrap();
        let vinv = n as f64 / sigma_e2 + 1.0 / sigma_mu2;
        let want_v = 1.0 / vinv;
        let want_m = want_v * r.iter().sum::<f64>() / sigma_e2;
        assert!((v[(0, 0)] - want_v).abs() < 1e-12);
        assert!((m[0] - want_m).abs() < 1e-12);
    }

    #[test]
    fn zero_prior_variance_pins_coefficients() {
        let op = MarginalOp::Nugget { n_obs: 2, sigma_e2: 1.0 };
        let design = TallDesign::Indicator { leaf_of_obs: vec![0, 1], n_leaves: 2 };
        let (m, v) = leaf_posterior(&[5.0, -3.0], &design, 0.0, &op).unwrap();
        assert_eq!(m[0], 0.0);
        assert_eq!(v[(1, 1)], 0.0);
    }

    #[test]
    fn cluster_op_matches_direct_dense_inverse() {
        // Small exact check of the cluster-level algebra against an explicit
        // N x N covariance built with the incidence expansion.
        let incidence = IncidenceMap::from_counts(&[2, 1, 3]).unwrap();
        let n = 3;
        let big_n = 6;
        let kernel = DMatrix::from_row_slice(
            n,
            n,
            &[1.0, 0.4, 0.2, 0.4, 1.3, 0.1, 0.2, 0.1, 0.9],
        );
        let sigma_e2 = 0.6;
        let w = cluster_weight_matrix(&kernel, incidence.counts(), sigma_e2);
        let (chol, w_logdet) = dense_chol_jitter(w).unwrap();
        let op = MarginalOp::Cluster { incidence: &incidence, chol: &chol, w_logdet, sigma_e2 };

        // Dense oracle: M = σ_e² I_N + E K Eᵀ.
        let mut e = DMatrix::zeros(big_n, n);
        for k in 0..big_n {
            e[(k, incidence.cluster_of(k))] = 1.0;
        }
        let m_full = DMatrix::identity(big_n, big_n) * sigma_e2 + &e * &kernel * e.transpose();
        let m_chol = Cholesky::new(m_full.clone()).unwrap();
        let oracle_logdet =
            2.0 * m_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert!((op.logdet() - oracle_logdet).abs() < 1e-10);

        let v = vec![0.3, -0.4, 1.2, 0.8, -0.1, 0.05];
        let got = op.apply_inv(&v);
        let want = m_chol.solve(&DVector::from_column_slice(&v));
        for k in 0..big_n {
            assert!((got[k] - want[k]).abs() < 1e-10, "row {k}");
        }
    }

    #[test]
    fn conditional_draw_mean_matches_solve() {
        use rand::SeedableRng;
        let a = SparseMatrix::from_triplets(
            4,
            2,
            &[(0, 0, 1.0), (1, 0, 0.5), (1, 1, 0.5), (2, 1, 1.0), (3, 1, 1.0)],
        )
        .unwrap();
        let sigma_e2 = 0.5;
        let q = SparseMatrix::from_triplets(
            2,
            2,
            &[(0, 0, 3.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 3.0)],
        )
        .unwrap();
        let ata = a.transpose().matmul(&a).unwrap();
        let inner_mat = q.add_scaled(1.0 / sigma_e2, &ata).unwrap();
        let inner = SparseFactor::new(&inner_mat, FillOrdering::Natural).unwrap();
        let r = vec![1.0, -0.5, 0.25, 2.0];
        // Monte Carlo mean over draws should converge to the analytic mean.
        let mut at_r = a.tmatvec(&r);
        for v in &mut at_r {
            *v /= sigma_e2;
        }
        let mean = inner.solve(&at_r);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut acc = vec![0.0; 2];
        let m = 20_000;
        for _ in 0..m {
            let d = conditional_field_draw(&r, &a, &inner, sigma_e2, &mut rng).unwrap();
            acc[0] += d[0];
            acc[1] += d[1];
        }
        for j in 0..2 {
            assert!((acc[j] / m as f64 - mean[j]).abs() < 0.02);
        }
    }
}
