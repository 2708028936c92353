//! Matern covariance, hyperparameter priors, and the exact (dense) marginal
//! likelihood used by the exact-comparator model and prior calibration.

use nalgebra::DMatrix;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};
use statrs::function::gamma::gamma as gamma_fn;

use crate::data::{IncidenceMap, Point, SpatialDataset};
use crate::error::{Error, Result};
use crate::solver::{
    cluster_weight_matrix, dense_chol_jitter, lowrank_gaussian_logpdf, MarginalOp, TallDesign,
};

/// Hyperparameters of the Matern spatial field. `rho` is the spatial range
/// (the distance at which correlation drops to roughly 0.13), related to the
/// scale parameter by κ = sqrt(8ν)/ρ.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaternParams {
    /// Marginal variance σ_m² of the field.
    pub sigma_m2: f64,
    /// Spatial range ρ > 0.
    pub rho: f64,
    /// Smoothness ν > 0 (the SPDE machinery fixes ν = 1).
    pub nu: f64,
}

impl MaternParams {
    pub fn kappa(&self) -> f64 {
        (8.0 * self.nu).sqrt() / self.rho
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_m2 >= 0.0 && self.sigma_m2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_m2 = {}", self.sigma_m2)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho = {}", self.rho)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidConfig(format!("nu = {}", self.nu)));
        }
        Ok(())
    }
}

mod bessel {
    //! Modified Bessel function of the second kind K_ν(x) for real ν ≥ 0,
    //! via the Temme series for x ≤ 2 and the CF2 continued fraction for
    //! x > 2, with upward recurrence in the order.

    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;
    const EULER_GAMMA: f64 = 0.577215664901532860606512090082;

    /// 1/Γ(1+µ) for |µ| ≤ 1/2.
    fn inv_gamma_1p(mu: f64) -> f64 {
        1.0 / super::gamma_fn(1.0 + mu)
    }

    /// Γ₁(µ) = [1/Γ(1−µ) − 1/Γ(1+µ)] / (2µ), continuous at µ = 0.
    fn gam1(mu: f64) -> f64 {
        if mu.abs() < 1e-6 {
            // Series limit: −γ + O(µ²) with a tiny µ² coefficient.
            -EULER_GAMMA - 0.042002635034095236 * mu * mu
        } else {
            (inv_gamma_1p(-mu) - inv_gamma_1p(mu)) / (2.0 * mu)
        }
    }

    /// Γ₂(µ) = [1/Γ(1−µ) + 1/Γ(1+µ)] / 2.
    fn gam2(mu: f64) -> f64 {
        (inv_gamma_1p(-mu) + inv_gamma_1p(mu)) / 2.0
    }

    /// (K_µ(x), K_{µ+1}(x)) for |µ| ≤ 1/2, 0 < x ≤ 2 (Temme's series).
    fn k_temme(mu: f64, x: f64) -> (f64, f64) {
        let x1 = 0.5 * x;
        let pimu = std::f64::consts::PI * mu;
        let fact = if pimu.abs() < 1e-12 { 1.0 } else { pimu / pimu.sin() };
        let d = -x1.ln();
        let e = mu * d;
        let fact2 = if e.abs() < 1e-12 { 1.0 } else { e.sinh() / e };
        let mut ff = fact * (gam1(mu) * e.cosh() + gam2(mu) * fact2 * d);
        let mut sum = ff;
        // p₀ = ½ (x/2)^{−µ} Γ(1+µ),  q₀ = ½ (x/2)^{µ} Γ(1−µ),  (x/2)^{−µ} = e^e.
        let e_exp = e.exp();
        let mut p = 0.5 * e_exp / inv_gamma_1p(mu);
        let mut q = 0.5 / (e_exp * inv_gamma_1p(-mu));
        let mut c = 1.0;
        let d2 = x1 * x1;
        let mut sum1 = p;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu * mu);
            c *= d2 / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            let del1 = c * (p - fi * ff);
            sum1 += del1;
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        (sum, sum1 * (2.0 / x))
    }

    /// (K_µ(x), K_{µ+1}(x)) for |µ| ≤ 1/2, x > 2 (Steed's CF2 algorithm).
    fn k_cf2(mu: f64, x: f64) -> (f64, f64) {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu * mu;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=MAX_ITER {
            a -= 2.0 * (i as f64 - 1.0);
            c = -a * c / i as f64;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        let h = a1 * h;
        let rkmu = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        let rk1 = rkmu * (mu + x + 0.5 - h) / x;
        (rkmu, rk1)
    }

    /// K_ν(x) for ν ≥ 0, x > 0.
    pub fn bessel_k(nu: f64, x: f64) -> f64 {
        debug_assert!(nu >= 0.0 && x > 0.0);
        let nl = (nu + 0.5).floor() as usize;
        let mu = nu - nl as f64;
        let (mut kmu, mut k1) = if x <= 2.0 { k_temme(mu, x) } else { k_cf2(mu, x) };
        for i in 1..=nl {
            let knew = 2.0 * (mu + i as f64) / x * k1 + kmu;
            kmu = k1;
            k1 = knew;
        }
        kmu
    }
}

/// Modified Bessel function of the second kind, K_ν(x). Accepts any real
/// order (K_{−ν} = K_ν) and requires x > 0.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidConfig(format!("bessel_k needs x > 0, got {x}")));
    }
    if !nu.is_finite() {
        return Err(Error::InvalidConfig(format!("bessel_k order {nu}")));
    }
    Ok(bessel::bessel_k(nu.abs(), x))
}

/// Matern correlation 2^{1−ν}/Γ(ν) (κd)^ν K_ν(κd) at distance `d`, with
/// closed forms for ν = 1/2 and ν = 3/2.
pub fn matern_corr(d: f64, params: &MaternParams) -> f64 {
    debug_assert!(d >= 0.0);
    let x = params.kappa() * d;
    if x < 1e-10 {
        return 1.0;
    }
    if (params.nu - 0.5).abs() < 1e-12 {
        return (-x).exp();
    }
    if (params.nu - 1.5).abs() < 1e-12 {
        return (1.0 + x) * (-x).exp();
    }
    let nu = params.nu;
    let corr = 2.0_f64.powf(1.0 - nu) / gamma_fn(nu) * x.powf(nu) * bessel::bessel_k(nu, x);
    // Clamp roundoff just outside [0, 1].
    corr.clamp(0.0, 1.0)
}

/// Dense Matern covariance matrix σ_m² R(d_ij) over a set of locations.
pub fn covariance_matrix(locations: &[Point], params: &MaternParams) -> DMatrix<f64> {
    let n = locations.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = params.sigma_m2;
        for j in 0..i {
            let v = params.sigma_m2 * matern_corr(locations[i].distance(&locations[j]), params);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Penalised-complexity prior on (σ_m, ρ): the spec'd joint density
/// p(ψ) = (d/2) λ̃₁ λ̃₂ ρ^{−d/2−1} exp(−λ̃₁ ρ^{−d/2} − λ̃₂ σ_m) with d = 2,
/// calibrated so P(ρ < ρ0) = α_rho and P(σ_m > σ0) = α_sigma.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PcPriorConfig {
    pub rho0: f64,
    pub sigma0: f64,
    pub alpha_rho: f64,
    pub alpha_sigma: f64,
}

impl PcPriorConfig {
    pub fn lambda_rho(&self) -> f64 {
        // d = 2: λ̃₁ = −ln(α_rho) ρ0^{d/2} = −ln(α_rho) ρ0.
        -self.alpha_rho.ln() * self.rho0
    }

    pub fn lambda_sigma(&self) -> f64 {
        -self.alpha_sigma.ln() / self.sigma0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rho0 > 0.0
            && self.sigma0 > 0.0
            && (0.0..1.0).contains(&self.alpha_rho)
            && self.alpha_rho > 0.0
            && (0.0..1.0).contains(&self.alpha_sigma)
            && self.alpha_sigma > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("pc prior {self:?}")));
        }
        Ok(())
    }
}

/// Log of the PC prior density over (σ_m, ρ).
pub fn pc_log_prior(params: &MaternParams, cfg: &PcPriorConfig) -> f64 {
    let sigma_m = params.sigma_m2.sqrt();
    let rho = params.rho;
    if sigma_m <= 0.0 || rho <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let l1 = cfg.lambda_rho();
    let l2 = cfg.lambda_sigma();
    // d = 2: (d/2) = 1, exponent −d/2 − 1 = −2 on ρ.
    l1.ln() + l2.ln() - 2.0 * rho.ln() - l1 / rho - l2 * sigma_m
}

/// Scaled inverse chi-squared prior σ_e² ~ ν λ / χ²_ν.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmaEPrior {
    /// Degrees of freedom ν.
    pub df: f64,
    /// Scale λ.
    pub scale: f64,
}

/// Log density of the scaled inverse chi-squared prior at σ_e² = `s2`.
pub fn sigma_e_log_prior(s2: f64, prior: &SigmaEPrior) -> f64 {
    if s2 <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let half_nu = prior.df / 2.0;
    let nl2 = prior.df * prior.scale / 2.0;
    half_nu * nl2.ln() - statrs::function::gamma::ln_gamma(half_nu)
        - (half_nu + 1.0) * s2.ln()
        - nl2 / s2
}

/// Sets λ so that the prior's `q` quantile equals `sigma_r2_hat`:
/// P(σ_e² ≤ σ̂_r²) = q ⟺ λ = σ̂_r² χ²_ν^{-1}(1 − q) / ν.
pub fn calibrate_sigma_e_prior(sigma_r2_hat: f64, df: f64, q: f64) -> Result<SigmaEPrior> {
    if !(sigma_r2_hat > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "residual variance estimate {sigma_r2_hat} must be positive"
        )));
    }
    if !(df > 0.0) || !(0.0 < q && q < 1.0) {
        return Err(Error::InvalidConfig(format!("sigma_e prior df {df}, q {q}")));
    }
    let chi2 = ChiSquared::new(df)
        .map_err(|e| Error::InvalidConfig(format!("chi-squared df {df}: {e}")))?;
    // The library quantile is a coarse numeric root-find; polish it with a
    // few Newton steps on the exact CDF.
    let mut x = chi2.inverse_cdf(1.0 - q);
    for _ in 0..6 {
        let f = chi2.cdf(x) - (1.0 - q);
        let d = chi2.pdf(x);
        if d <= 0.0 {
            break;
        }
        let step = f / d;
        x -= step;
        if step.abs() < 1e-14 * x.abs() {
            break;
        }
    }
    let scale = sigma_r2_hat * x / df;
    Ok(SigmaEPrior { df, scale })
}

/// Exact marginal log likelihood of the residual vector under
/// N(0, σ_μ² C̃C̃ᵀ + σ_m² Σ̃ + σ_e² I_N), with Σ the Matern covariance over
/// cluster locations and tildes marking incidence expansion. Computed through
/// the cluster-level dense Cholesky (see [`MarginalOp::Cluster`]).
#[allow(clippy::too_many_arguments)]
pub fn exact_marginal_loglik(
    residuals: &[f64],
    design: Option<&TallDesign>,
    sigma_mu2: f64,
    sigma_e2: f64,
    locations: &[Point],
    params: &MaternParams,
    incidence: &IncidenceMap,
) -> Result<f64> {
    if locations.len() != incidence.n_clusters() {
        return Err(Error::ShapeMismatch(format!(
            "{} locations for {} clusters",
            locations.len(),
            incidence.n_clusters()
        )));
    }
    params.validate()?;
    let kernel = covariance_matrix(locations, params);
    let w = cluster_weight_matrix(&kernel, incidence.counts(), sigma_e2);
    let (chol, w_logdet) = dense_chol_jitter(w)?;
    let op = MarginalOp::Cluster { incidence, chol: &chol, w_logdet, sigma_e2 };
    lowrank_gaussian_logpdf(residuals, design, sigma_mu2, &op)
}

/// Data-derived prior settings for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibratedPriors {
    /// Residual-variance estimate σ̂_r² from the linear working model, on the
    /// internal response scale.
    pub sigma_r2_hat: f64,
    /// Calibrated scaled-inverse-χ² prior for σ_e².
    pub sigma_e: SigmaEPrior,
    /// PC prior with ρ0/σ0 at the intercept-only working model's estimates.
    pub pc: PcPriorConfig,
    /// True when the working-model fit failed and moment fallbacks were used.
    pub used_fallback: bool,
}

/// Settings for [`calibrate_priors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    /// Prior mass below σ̂_r² (default 0.9).
    pub q: f64,
    /// Degrees of freedom of the σ_e² prior (default 3).
    pub df: f64,
    pub alpha_rho: f64,
    pub alpha_sigma: f64,
    /// Prior variance for working-model regression coefficients.
    pub sigma_beta2: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { q: 0.9, df: 3.0, alpha_rho: 0.5, alpha_sigma: 0.5, sigma_beta2: 10.0 }
    }
}

fn log_space(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..k)
        .map(|i| (llo + (lhi - llo) * i as f64 / (k - 1) as f64).exp())
        .collect()
}

/// Marginal-likelihood profile over a (σ_e², σ_m², ρ) grid for a fixed
/// cluster-level design with N(0, σ_β²I) coefficients integrated out.
/// Returns the best grid point, or None if every evaluation failed.
fn grid_ml_fit(
    residuals: &[f64],
    design: Option<&TallDesign>,
    sigma_beta2: f64,
    locations: &[Point],
    incidence: &IncidenceMap,
    se2_grid: &[f64],
    sm2_grid: &[f64],
    rho_grid: &[f64],
) -> Option<(f64, f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &rho in rho_grid {
        let params1 = MaternParams { sigma_m2: 1.0, rho, nu: 1.0 };
        let corr = covariance_matrix(locations, &params1);
        for &sm2 in sm2_grid {
            let kernel = &corr * sm2;
            for &se2 in se2_grid {
                let w = cluster_weight_matrix(&kernel, incidence.counts(), se2);
                let Ok((chol, w_logdet)) = dense_chol_jitter(w) else { continue };
                let op = MarginalOp::Cluster { incidence, chol: &chol, w_logdet, sigma_e2: se2 };
                let Ok(ll) = lowrank_gaussian_logpdf(residuals, design, sigma_beta2, &op) else {
                    continue;
                };
                if ll.is_finite() && best.map_or(true, |(b, _, _, _)| ll > b) {
                    best = Some((ll, se2, sm2, rho));
                }
            }
        }
    }
    best
}

/// Refines a grid maximum with a second, tighter grid around the argmax.
#[allow(clippy::too_many_arguments)]
fn refined_ml_fit(
    residuals: &[f64],
    design: Option<&TallDesign>,
    sigma_beta2: f64,
    locations: &[Point],
    incidence: &IncidenceMap,
    var_scale: f64,
    diameter: f64,
) -> Option<(f64, f64, f64)> {
    let se2_grid = log_space(0.05 * var_scale, 1.5 * var_scale, 7);
    let sm2_grid = log_space(0.02 * var_scale, 2.0 * var_scale, 7);
    let rho_grid = log_space(0.04 * diameter, 0.8 * diameter, 7);
    let (_, se2, sm2, rho) = grid_ml_fit(
        residuals, design, sigma_beta2, locations, incidence, &se2_grid, &sm2_grid, &rho_grid,
    )?;
    // One refinement pass: a factor-of-two window around the coarse argmax.
    let fine =
        |c: f64| -> Vec<f64> { log_space(c / 2.0, c * 2.0, 5) };
    let (_, se2, sm2, rho) = grid_ml_fit(
        residuals, design, sigma_beta2, locations, incidence, &fine(se2), &fine(sm2), &fine(rho),
    )?;
    Some((se2, sm2, rho))
}

/// Derives the σ_e² and PC prior settings from working-model fits on the
/// internally scaled response: an intercept-only spatial model for (ρ0, σ0)
/// and a linear-in-covariates spatial model for σ̂_r². Falls back to moment
/// estimates (sample variance; domain diameter / 5) when the fits fail.
pub fn calibrate_priors(
    dataset: &SpatialDataset,
    cfg: &CalibrationConfig,
) -> Result<CalibratedPriors> {
    let r = dataset.scaled_responses();
    let n_obs = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n_obs;
    let var = (r.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n_obs).max(1e-12);
    let locations = dataset.locations();
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in locations {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let diameter = ((xmax - xmin).powi(2) + (ymax - ymin).powi(2)).sqrt().max(1e-9);
    let incidence = dataset.incidence();
    let n = dataset.n_clusters();

    // Intercept-only fit for the spatial hyperparameter anchors.
    let intercept = TallDesign::Dense(DMatrix::from_element(n, 1, 1.0));
    let expanded_intercept = expand_design(&intercept, incidence);
    let spatial_fit = refined_ml_fit(
        r,
        Some(&expanded_intercept),
        cfg.sigma_beta2,
        locations,
        incidence,
        var,
        diameter,
    );

    // Linear working model for the residual-variance anchor.
    let p = dataset.n_covariates();
    let mut design = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for j in 0..p {
            design[(i, j + 1)] = dataset.scaled_covariates()[(i, j)];
        }
    }
    let linear = expand_design(&TallDesign::Dense(design), incidence);
    let linear_fit = refined_ml_fit(
        r,
        Some(&linear),
        cfg.sigma_beta2,
        locations,
        incidence,
        var,
        diameter,
    );

    let mut used_fallback = false;
    let (rho0, sigma0) = match spatial_fit {
        Some((_, sm2, rho)) => (rho, sm2.sqrt().max(1e-6)),
        None => {
            used_fallback = true;
            log::warn!("intercept-only working model failed; using moment fallbacks");
            (diameter / 5.0, var.sqrt())
        }
    };
    let sigma_r2_hat = match linear_fit {
        Some((se2, _, _)) => se2,
        None => {
            used_fallback = true;
            log::warn!("linear working model failed; using sample variance for sigma_r2");
            var
        }
    };
    let sigma_e = calibrate_sigma_e_prior(sigma_r2_hat, cfg.df, cfg.q)?;
    let pc = PcPriorConfig {
        rho0,
        sigma0,
        alpha_rho: cfg.alpha_rho,
        alpha_sigma: cfg.alpha_sigma,
    };
    pc.validate()?;
    Ok(CalibratedPriors { sigma_r2_hat, sigma_e, pc, used_fallback })
}

/// Expands a cluster-level dense design to observation level.
pub fn expand_design(design: &TallDesign, incidence: &IncidenceMap) -> TallDesign {
    match design {
        TallDesign::Indicator { leaf_of_obs, n_leaves } => {
            let mut out = Vec::with_capacity(incidence.n_obs());
            for k in 0..incidence.n_obs() {
                out.push(leaf_of_obs[incidence.cluster_of(k)]);
            }
            TallDesign::Indicator { leaf_of_obs: out, n_leaves: *n_leaves }
        }
        TallDesign::Dense(m) => {
            let mut out = DMatrix::zeros(incidence.n_obs(), m.ncols());
            for k in 0..incidence.n_obs() {
                let i = incidence.cluster_of(k);
                for j in 0..m.ncols() {
                    out[(k, j)] = m[(i, j)];
                }
            }
            TallDesign::Dense(out)
        }
    }
}
