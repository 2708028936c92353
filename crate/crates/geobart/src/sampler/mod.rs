//! Metropolis-within-Gibbs samplers for the five model variants.
//!
//! Every variant shares one skeleton: a mean structure (a sum of trees or a
//! fixed linear design) whose coefficients are drawn exactly from their
//! Gaussian conditional with the spatial field and noise integrated out, a
//! random-walk update on ln σ_e², and (for spatial models) a joint
//! random-walk update on (ln σ_m², ln ρ) under the penalised-complexity
//! prior. Tree-structure moves are accepted with the leaf values integrated
//! out, so the chain never conditions on them during a structural step.
//!
//! The spatial field never appears as a sampled state: the marginal
//! likelihood operators in [`crate::solver`] integrate it out, through the
//! sparse mesh precision (the default), a dense cluster-level kernel (the
//! exact variant), or no field at all.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    CovariateTransform, IncidenceMap, Point, ResponseTransform, SpatialDataset,
};
use crate::error::{Error, Result};
use crate::gp::{
    calibrate_priors, pc_log_prior, sigma_e_log_prior, CalibratedPriors, CalibrationConfig,
    MaternParams,
};
use crate::parallel;
use crate::solver::{
    cluster_weight_matrix, dense_chol_jitter, leaf_posterior, lowrank_gaussian_logpdf,
    FillOrdering, MarginalOp, SparseFactor, TallDesign,
};
use crate::sparse::SparseMatrix;
use crate::spde::{build_mesh, fem_matrices, precision_matrix, projection_matrix, Mesh, MeshConfig};
use crate::tree::{
    propose_move, tree_log_prior, DecisionTree, Forest, MoveKind, MoveProbs, SplitCandidates,
    TreePriorConfig,
};

/// Which model to fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Sum of trees plus the sparse-mesh spatial field (the default).
    Bartsimp,
    /// Sum of trees plus the dense cluster-level spatial kernel.
    BartsimpExact,
    /// Sum of trees, no spatial field.
    BartOnly,
    /// Intercept + linear covariates plus the sparse-mesh field.
    SpdeLinear,
    /// Intercept only plus the sparse-mesh field.
    Spde0,
}

impl ModelKind {
    pub fn has_trees(&self) -> bool {
        matches!(self, ModelKind::Bartsimp | ModelKind::BartsimpExact | ModelKind::BartOnly)
    }

    pub fn has_field(&self) -> bool {
        !matches!(self, ModelKind::BartOnly)
    }

    /// True when fitting goes through the sparse mesh approximation.
    pub fn uses_mesh(&self) -> bool {
        matches!(self, ModelKind::Bartsimp | ModelKind::SpdeLinear | ModelKind::Spde0)
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Bartsimp => "bartsimp",
            ModelKind::BartsimpExact => "bartsimp_exact",
            ModelKind::BartOnly => "bart_only",
            ModelKind::SpdeLinear => "spde_linear",
            ModelKind::Spde0 => "spde0",
        }
    }
}

/// When the hyperparameter updates run relative to the tree updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSchedule {
    /// Once per sweep, after all trees (the default).
    PerSweep,
    /// After every single tree update.
    PerTree,
}

/// Full sampler configuration. Unknown JSON keys are rejected; omitted keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Number of trees in the sum (tree models only).
    pub trees: usize,
    /// Total sweeps, including burn-in.
    pub iterations: usize,
    /// Sweeps discarded before recording draws.
    pub burnin: usize,
    /// Keep one draw per `thin` post-burn-in sweeps.
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    /// Credible level for intervals: (1 − alpha) coverage.
    pub alpha: f64,
    pub tree_alpha: f64,
    pub tree_beta: f64,
    /// k in the leaf prior sd 0.5 / (k sqrt(trees)).
    pub leaf_scale_k: f64,
    pub sigma_e_df: f64,
    pub sigma_e_quantile: f64,
    pub pc_alpha_rho: f64,
    pub pc_alpha_sigma: f64,
    /// Prior variance of linear-model coefficients.
    pub sigma_beta2: f64,
    /// Mesh edge length (internal coordinates); None picks rho0 / 8 capped
    /// at 64 cells per side.
    pub mesh_edge: Option<f64>,
    /// Mesh margin as a fraction of each bounding-box side; None targets a
    /// margin of 1.5 rho0.
    pub mesh_extension: Option<f64>,
    pub update_schedule: UpdateSchedule,
    /// Optional lower bound on the practical range ρ (prior support
    /// truncation). Ranges below a few mesh edges are not representable by
    /// the sparse field, so mesh-aware fits may want a floor here.
    pub rho_min: Option<f64>,
    /// Optional upper bound on ρ. Ranges far beyond the domain are only
    /// weakly identified and push the truncated mesh toward its intrinsic
    /// limit; a cap of about the domain diameter keeps the field proper.
    pub rho_max: Option<f64>,
    /// Initial random-walk sd on ln σ_e².
    pub step_sigma_e: f64,
    /// Initial random-walk sd on (ln σ_m², ln ρ).
    pub step_psi: f64,
    pub move_probs: MoveProbs,
    /// Write a checkpoint every this many sweeps (0 = off); used by the
    /// command-line driver.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Bartsimp,
            trees: 20,
            iterations: 4000,
            burnin: 2000,
            thin: 1,
            seed: 0,
            chains: 1,
            alpha: 0.05,
            tree_alpha: 0.95,
            tree_beta: 2.0,
            leaf_scale_k: 2.0,
            sigma_e_df: 3.0,
            sigma_e_quantile: 0.9,
            pc_alpha_rho: 0.5,
            pc_alpha_sigma: 0.5,
            sigma_beta2: 10.0,
            mesh_edge: None,
            mesh_extension: None,
            rho_min: None,
            rho_max: None,
            update_schedule: UpdateSchedule::PerSweep,
            step_sigma_e: 0.3,
            step_psi: 0.3,
            move_probs: MoveProbs::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.burnin >= self.iterations {
            return Err(Error::InvalidConfig(format!(
                "iterations {} must exceed burnin {}",
                self.iterations, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidConfig("chains must be at least 1".into()));
        }
        if self.model.has_trees() && self.trees == 0 {
            return Err(Error::InvalidConfig("tree models need at least one tree".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {}", self.alpha)));
        }
        if !(self.leaf_scale_k > 0.0) || !(self.sigma_beta2 > 0.0) {
            return Err(Error::InvalidConfig("scale parameters must be positive".into()));
        }
        if !(self.step_sigma_e > 0.0) || !(self.step_psi > 0.0) {
            return Err(Error::InvalidConfig("step sizes must be positive".into()));
        }
        if let Some(e) = self.mesh_edge {
            if !(e > 0.0) {
                return Err(Error::InvalidConfig(format!("mesh_edge {e}")));
            }
        }
        if let Some(x) = self.mesh_extension {
            if !(x >= 0.0) {
                return Err(Error::InvalidConfig(format!("mesh_extension {x}")));
            }
        }
        let lo = self.rho_min.unwrap_or(0.0);
        let hi = self.rho_max.unwrap_or(f64::INFINITY);
        if !(lo >= 0.0) || !(hi > lo) {
            return Err(Error::InvalidConfig(format!("rho bounds [{lo}, {hi}]")));
        }
        TreePriorConfig { alpha: self.tree_alpha, beta: self.tree_beta }.validate()?;
        self.move_probs.validate()?;
        Ok(())
    }

    /// Leaf prior variance (0.5 / (k sqrt(m)))².
    pub fn sigma_mu2(&self) -> f64 {
        let s = 0.5 / (self.leaf_scale_k * (self.trees as f64).sqrt());
        s * s
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            q: self.sigma_e_quantile,
            df: self.sigma_e_df,
            alpha_rho: self.pc_alpha_rho,
            alpha_sigma: self.pc_alpha_sigma,
            sigma_beta2: self.sigma_beta2,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One retained posterior draw (all values on the internal scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub sweep: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub forest: Option<Forest>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<Vec<f64>>,
    pub sigma_e2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma_m2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<f64>,
    /// Marginal log likelihood of the residual (coefficients conditioned
    /// on, field integrated out) at this state.
    pub loglik: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPair {
    pub proposed: usize,
    pub accepted: usize,
}

impl CountPair {
    fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Proposal and acceptance counts for one chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub grow: CountPair,
    pub prune: CountPair,
    pub change: CountPair,
    pub swap: CountPair,
    /// Structural proposals rejected outright (empty leaf or zero reverse
    /// probability).
    pub invalid_proposals: usize,
    /// Sweeps in which a tree had no feasible structural move.
    pub no_feasible_move: usize,
    pub sigma_e: CountPair,
    pub psi: CountPair,
    pub final_step_sigma_e: f64,
    pub final_step_psi: f64,
}

impl AcceptanceStats {
    pub fn summary(&self) -> String {
        format!(
            "grow {:.2} prune {:.2} change {:.2} swap {:.2} sigma_e {:.2} psi {:.2}",
            self.grow.rate(),
            self.prune.rate(),
            self.change.rate(),
            self.swap.rate(),
            self.sigma_e.rate(),
            self.psi.rate()
        )
    }

    fn pair_mut(&mut self, kind: MoveKind) -> &mut CountPair {
        match kind {
            MoveKind::Grow => &mut self.grow,
            MoveKind::Prune => &mut self.prune,
            MoveKind::Change => &mut self.change,
            MoveKind::Swap => &mut self.swap,
        }
    }
}

/// The sampled state, small enough to checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub mean: MeanState,
    pub sigma_e2: f64,
    pub sigma_m2: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanState {
    Trees { forest: Forest },
    Linear { beta: Vec<f64> },
}

/// Robbins-Monro scale adaptation toward a target acceptance probability,
/// active during burn-in only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStep {
    pub ln_step: f64,
    pub target: f64,
    pub t: usize,
}

impl AdaptiveStep {
    fn new(step: f64, target: f64) -> Self {
        Self { ln_step: step.ln(), target, t: 0 }
    }

    fn step(&self) -> f64 {
        self.ln_step.exp()
    }

    fn adapt(&mut self, accept_prob: f64) {
        self.t += 1;
        let gamma = (self.t as f64).powf(-0.6);
        self.ln_step = (self.ln_step + gamma * (accept_prob - self.target)).clamp(-11.5, 2.5);
    }
}

/// Everything needed to resume a chain mid-run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Canonical JSON of the config; mismatches refuse to resume.
    pub config_fingerprint: String,
    pub chain_index: usize,
    /// First sweep still to run.
    pub next_sweep: usize,
    pub state: SamplerState,
    pub rng: ChaCha8Rng,
    pub step_sigma_e: AdaptiveStep,
    pub step_psi: AdaptiveStep,
    pub draws: Vec<Draw>,
    pub acceptance: AcceptanceStats,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Where and how often to checkpoint a running chain.
pub struct CheckpointSpec<'p> {
    pub path: &'p Path,
    pub every: usize,
}

/// Draws and statistics from one chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainOutput {
    pub chain_index: usize,
    pub draws: Vec<Draw>,
    pub acceptance: AcceptanceStats,
}

/// Shared per-fit context: calibration, mesh machinery, and split
/// candidates, built once and reused by every chain.
pub struct FitContext {
    pub calibration: CalibratedPriors,
    pub mesh: Option<Mesh>,
    pub mesh_config: Option<MeshConfig>,
    pub sigma_mu2: f64,
    cands: SplitCandidates,
    tree_prior: TreePriorConfig,
    mass: Option<SparseMatrix>,
    stiffness: Option<SparseMatrix>,
    a_obs: Option<SparseMatrix>,
    ata: Option<SparseMatrix>,
    linear_design_obs: Option<DMatrix<f64>>,
}

/// A full fit: every chain plus the shared context needed for prediction.
pub struct FitResult {
    pub config: RunConfig,
    pub chains: Vec<ChainOutput>,
    pub calibration: CalibratedPriors,
    pub mesh: Option<Mesh>,
    pub mesh_config: Option<MeshConfig>,
    pub sigma_mu2: f64,
}

impl FitResult {
    pub fn all_draws(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }
}

/// Fit metadata written beside the draws, sufficient to reproduce
/// predictions without refitting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub calibration: CalibratedPriors,
    pub sigma_mu2: f64,
    pub mesh_config: Option<MeshConfig>,
    pub mesh: Option<Mesh>,
    pub response_transform: ResponseTransform,
    pub covariate_transforms: Vec<CovariateTransform>,
    pub covariate_names: Vec<String>,
    pub n_clusters: usize,
    pub n_obs: usize,
    pub acceptance: Vec<AcceptanceStats>,
}

impl Manifest {
    pub fn from_fit(dataset: &SpatialDataset, fit: &FitResult) -> Self {
        Self {
            config: fit.config.clone(),
            calibration: fit.calibration,
            sigma_mu2: fit.sigma_mu2,
            mesh_config: fit.mesh_config,
            mesh: fit.mesh.clone(),
            response_transform: *dataset.response_transform(),
            covariate_transforms: dataset.covariate_transforms().to_vec(),
            covariate_names: dataset.covariate_names().to_vec(),
            n_clusters: dataset.n_clusters(),
            n_obs: dataset.n_obs(),
            acceptance: fit.chains.iter().map(|c| c.acceptance.clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes draws as JSON lines (one draw per line).
pub fn write_draws(path: &Path, draws: &[Draw]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in draws {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines draw file.
pub fn read_draws(path: &Path) -> Result<Vec<Draw>> {
    let text = std::fs::read_to_string(path)?;
    let mut draws = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        draws.push(serde_json::from_str(line)?);
    }
    Ok(draws)
}

/// Picks the mesh resolution: margin ≈ 1.5 ρ0 (capped at the domain extent)
/// and edge ≈ ρ0 / 8, floored so the extended domain keeps at most 64 cells
/// per side. Explicit config values override either piece.
pub fn resolve_mesh_config(
    cfg: &RunConfig,
    cal: &CalibratedPriors,
    locations: &[Point],
) -> MeshConfig {
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in locations {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let wx = (xmax - xmin).max(1e-9);
    let wy = (ymax - ymin).max(1e-9);
    let wmin = wx.min(wy);
    let wmax = wx.max(wy);
    let rho0 = cal.pc.rho0;
    // Floored at a quarter of the domain width so that a short calibrated
    // range cannot collapse the pad: the mesh must keep covering prediction
    // points a little beyond the data hull.
    let margin = (1.5 * rho0).clamp(0.25 * wmax, wmax);
    let extension = cfg.mesh_extension.unwrap_or(margin / wmin);
    let extended = wmax * (1.0 + 2.0 * extension);
    let edge = cfg.mesh_edge.unwrap_or((rho0 / 8.0).max(extended / 64.0));
    MeshConfig { edge, extension }
}

/// Builds the shared fit context: prior calibration, mesh and projection
/// machinery (sparse models), and tree split candidates.
pub fn prepare(dataset: &SpatialDataset, cfg: &RunConfig) -> Result<FitContext> {
    cfg.validate()?;
    let calibration = calibrate_priors(dataset, &cfg.calibration_config())?;
    let cands = SplitCandidates::from_matrix(dataset.scaled_covariates());
    let tree_prior = TreePriorConfig { alpha: cfg.tree_alpha, beta: cfg.tree_beta };

    let (mesh, mesh_config, mass, stiffness, a_obs, ata) = if cfg.model.uses_mesh() {
        let mc = resolve_mesh_config(cfg, &calibration, dataset.locations());
        let mesh = build_mesh(dataset.locations(), &mc)?;
        let (c, g) = fem_matrices(&mesh)?;
        let a_cluster = projection_matrix(&mesh, dataset.locations())?;
        let a_obs = a_cluster.select_rows(dataset.incidence().cluster_of_obs());
        let ata = a_obs.transpose().matmul(&a_obs)?;
        (Some(mesh), Some(mc), Some(c), Some(g), Some(a_obs), Some(ata))
    } else {
        (None, None, None, None, None, None)
    };

    let linear_design_obs = if cfg.model.has_trees() {
        None
    } else {
        let n = dataset.n_clusters();
        let p = if cfg.model == ModelKind::Spde0 { 0 } else { dataset.n_covariates() };
        let mut x = DMatrix::zeros(n, p + 1);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for j in 0..p {
                x[(i, j + 1)] = dataset.scaled_covariates()[(i, j)];
            }
        }
        let inc = dataset.incidence();
        let mut obs = DMatrix::zeros(inc.n_obs(), p + 1);
        for k in 0..inc.n_obs() {
            let i = inc.cluster_of(k);
            for j in 0..=p {
                obs[(k, j)] = x[(i, j)];
            }
        }
        Some(obs)
    };

    Ok(FitContext {
        calibration,
        mesh,
        mesh_config,
        sigma_mu2: if cfg.model.has_trees() { cfg.sigma_mu2() } else { cfg.sigma_beta2 },
        cands,
        tree_prior,
        mass,
        stiffness,
        a_obs,
        ata,
        linear_design_obs,
    })
}

/// Marginal-operator cache; `set` rebuilds the factors for new
/// hyperparameters, `op` borrows the current view. The sampler keeps two of
/// these and proposes into the spare one, so rejections cost nothing and
/// acceptances are a swap.
#[derive(Clone)]
enum OpCache {
    Nugget,
    Gmrf {
        a_obs: SparseMatrix,
        ata: SparseMatrix,
        mass: SparseMatrix,
        stiffness: SparseMatrix,
        /// Field precision for the ψ the factors were built from.
        q: SparseMatrix,
        q_factor: SparseFactor,
        inner_factor: SparseFactor,
        q_logdet: f64,
    },
    Cluster {
        corr_unit: DMatrix<f64>,
        rho_cached: f64,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        w_logdet: f64,
    },
}

impl OpCache {
    fn new(
        model: ModelKind,
        ctx: &FitContext,
        dataset: &SpatialDataset,
        sigma_e2: f64,
        psi: &MaternParams,
    ) -> Result<Self> {
        if model.uses_mesh() {
            let mass = ctx.mass.clone().expect("mesh context");
            let stiffness = ctx.stiffness.clone().expect("mesh context");
            let a_obs = ctx.a_obs.clone().expect("mesh context");
            let ata = ctx.ata.clone().expect("mesh context");
            let q = precision_matrix(&mass, &stiffness, psi)?;
            let q_factor = SparseFactor::new(&q, FillOrdering::MinimumDegree)?;
            let q_logdet = q_factor.logdet();
            let inner = q.add_scaled(1.0 / sigma_e2, &ata)?;
            let inner_factor = SparseFactor::new(&inner, FillOrdering::MinimumDegree)?;
            Ok(OpCache::Gmrf { a_obs, ata, mass, stiffness, q, q_factor, inner_factor, q_logdet })
        } else if model.has_field() {
            let mut cache = OpCache::Cluster {
                corr_unit: DMatrix::zeros(0, 0),
                rho_cached: f64::NAN,
                chol: nalgebra::Cholesky::new(DMatrix::identity(1, 1)).unwrap(),
                w_logdet: 0.0,
            };
            cache.set(dataset, sigma_e2, psi)?;
            Ok(cache)
        } else {
            Ok(OpCache::Nugget)
        }
    }

    /// Rebuilds factors for the given hyperparameters.
    fn set(&mut self, dataset: &SpatialDataset, sigma_e2: f64, psi: &MaternParams) -> Result<()> {
        match self {
            OpCache::Nugget => Ok(()),
            OpCache::Gmrf { ata, mass, stiffness, q, q_factor, inner_factor, q_logdet, .. } => {
                *q = precision_matrix(mass, stiffness, psi)?;
                q_factor.refactor(q)?;
                *q_logdet = q_factor.logdet();
                let inner = q.add_scaled(1.0 / sigma_e2, ata)?;
                inner_factor.refactor(&inner)?;
                Ok(())
            }
            OpCache::Cluster { corr_unit, rho_cached, chol, w_logdet } => {
                if (*rho_cached - psi.rho).abs() > 0.0 || corr_unit.nrows() == 0 {
                    let unit = MaternParams { sigma_m2: 1.0, rho: psi.rho, nu: psi.nu };
                    *corr_unit = crate::gp::covariance_matrix(dataset.locations(), &unit);
                    *rho_cached = psi.rho;
                }
                let kernel = &*corr_unit * psi.sigma_m2;
                let w = cluster_weight_matrix(&kernel, dataset.incidence().counts(), sigma_e2);
                let (c, ld) = dense_chol_jitter(w)?;
                *chol = c;
                *w_logdet = ld;
                Ok(())
            }
        }
    }

    /// Rebuilds only what a new σ_e² needs, with ψ unchanged and its
    /// derived state taken from `from` (the accepted cache): the field
    /// precision, its log determinant, and the unit cluster correlation are
    /// copied instead of recomputed, and only the σ_e²-dependent factor is
    /// redone.
    fn set_sigma_from(
        &mut self,
        from: &OpCache,
        dataset: &SpatialDataset,
        sigma_e2: f64,
        psi: &MaternParams,
    ) -> Result<()> {
        match (self, from) {
            (OpCache::Nugget, OpCache::Nugget) => Ok(()),
            (
                OpCache::Gmrf { ata, q, inner_factor, q_logdet, .. },
                OpCache::Gmrf { q: q_from, q_logdet: ld_from, .. },
            ) => {
                q.clone_from(q_from);
                *q_logdet = *ld_from;
                let inner = q.add_scaled(1.0 / sigma_e2, ata)?;
                inner_factor.refactor(&inner)?;
                Ok(())
            }
            (
                OpCache::Cluster { corr_unit, rho_cached, chol, w_logdet },
                OpCache::Cluster { corr_unit: corr_from, rho_cached: rho_from, .. },
            ) => {
                if *rho_cached != *rho_from {
                    corr_unit.clone_from(corr_from);
                    *rho_cached = *rho_from;
                }
                let kernel = &*corr_unit * psi.sigma_m2;
                let w = cluster_weight_matrix(&kernel, dataset.incidence().counts(), sigma_e2);
                let (c, ld) = dense_chol_jitter(w)?;
                *chol = c;
                *w_logdet = ld;
                Ok(())
            }
            _ => unreachable!("mismatched operator cache variants"),
        }
    }

    /// Current operator view; factors must already match `sigma_e2`.
    fn op<'s>(&'s self, incidence: &'s IncidenceMap, sigma_e2: f64) -> MarginalOp<'s> {
        match self {
            OpCache::Nugget => MarginalOp::Nugget { n_obs: incidence.n_obs(), sigma_e2 },
            OpCache::Gmrf { a_obs, q_logdet, inner_factor, .. } => MarginalOp::Gmrf {
                a: a_obs,
                q_logdet: *q_logdet,
                inner: inner_factor,
                sigma_e2,
            },
            OpCache::Cluster { chol, w_logdet, .. } => MarginalOp::Cluster {
                incidence,
                chol,
                w_logdet: *w_logdet,
                sigma_e2,
            },
        }
    }
}

/// Runtime mean structure: the checkpointable state plus caches.
enum MeanRuntime {
    Trees {
        forest: Forest,
        /// Cluster-to-leaf-position map per tree.
        assignments: Vec<Vec<usize>>,
    },
    Linear {
        beta: Vec<f64>,
    },
}

impl MeanRuntime {
    fn to_state(&self) -> MeanState {
        match self {
            MeanRuntime::Trees { forest, .. } => MeanState::Trees { forest: forest.clone() },
            MeanRuntime::Linear { beta } => MeanState::Linear { beta: beta.clone() },
        }
    }
}

struct SamplerCore<'a> {
    dataset: &'a SpatialDataset,
    cfg: &'a RunConfig,
    ctx: &'a FitContext,
    y: &'a [f64],
    mean: MeanRuntime,
    sigma_e2: f64,
    psi: MaternParams,
    op: OpCache,
    /// Spare cache the hyperparameter proposals are built into; swapped with
    /// `op` on acceptance so rejections never refactorize.
    op_prop: OpCache,
    r_total: Vec<f64>,
    step_sigma_e: AdaptiveStep,
    step_psi: AdaptiveStep,
    stats: AcceptanceStats,
    adapting: bool,
}

impl<'a> SamplerCore<'a> {
    fn new(
        dataset: &'a SpatialDataset,
        cfg: &'a RunConfig,
        ctx: &'a FitContext,
        resume: Option<(SamplerState, AdaptiveStep, AdaptiveStep, AcceptanceStats)>,
    ) -> Result<Self> {
        let y = dataset.scaled_responses();
        let (state, step_sigma_e, step_psi, stats) = match resume {
            Some((s, a, b, st)) => (Some(s), a, b, st),
            None => (
                None,
                AdaptiveStep::new(cfg.step_sigma_e, 0.44),
                AdaptiveStep::new(cfg.step_psi, 0.23),
                AcceptanceStats::default(),
            ),
        };
        let (mean, sigma_e2, psi) = match state {
            Some(s) => {
                let mean = match s.mean {
                    MeanState::Trees { forest } => {
                        let assignments = forest
                            .trees
                            .iter()
                            .map(|t| t.leaf_assignment(dataset.scaled_covariates()))
                            .collect();
                        MeanRuntime::Trees { forest, assignments }
                    }
                    MeanState::Linear { beta } => MeanRuntime::Linear { beta },
                };
                (mean, s.sigma_e2, MaternParams { sigma_m2: s.sigma_m2, rho: s.rho, nu: 1.0 })
            }
            None => {
                let mean = if cfg.model.has_trees() {
                    let trees = vec![DecisionTree::stump(); cfg.trees];
                    let leaf_values = vec![vec![0.0]; cfg.trees];
                    let assignments =
                        vec![vec![0usize; dataset.n_clusters()]; cfg.trees];
                    MeanRuntime::Trees { forest: Forest { trees, leaf_values }, assignments }
                } else {
                    let b = ctx
                        .linear_design_obs
                        .as_ref()
                        .expect("linear context")
                        .ncols();
                    MeanRuntime::Linear { beta: vec![0.0; b] }
                };
                let psi = MaternParams {
                    sigma_m2: ctx.calibration.pc.sigma0 * ctx.calibration.pc.sigma0,
                    rho: ctx
                        .calibration
                        .pc
                        .rho0
                        .clamp(cfg.rho_min.unwrap_or(0.0), cfg.rho_max.unwrap_or(f64::INFINITY)),
                    nu: 1.0,
                };
                (mean, ctx.calibration.sigma_r2_hat, psi)
            }
        };
        let op = OpCache::new(cfg.model, ctx, dataset, sigma_e2, &psi)?;
        let op_prop = op.clone();
        let mut core = Self {
            dataset,
            cfg,
            ctx,
            y,
            mean,
            sigma_e2,
            psi,
            op,
            op_prop,
            r_total: Vec::new(),
            step_sigma_e,
            step_psi,
            stats,
            adapting: true,
        };
        core.r_total = core.fresh_residual();
        Ok(core)
    }

    /// y minus the mean structure, recomputed from state.
    fn fresh_residual(&self) -> Vec<f64> {
        let inc = self.dataset.incidence();
        let fitted_cluster: Vec<f64> = match &self.mean {
            MeanRuntime::Trees { forest, .. } => forest.evaluate(self.dataset.scaled_covariates()),
            MeanRuntime::Linear { beta } => {
                let x = self.ctx.linear_design_obs.as_ref().expect("linear context");
                // Design is observation-level already; return obs-level here.
                let v = x * DVector::from_column_slice(beta);
                return self.y.iter().zip(v.iter()).map(|(y, f)| y - f).collect();
            }
        };
        let fitted = inc.expand(&fitted_cluster);
        self.y.iter().zip(&fitted).map(|(y, f)| y - f).collect()
    }

    fn state(&self) -> SamplerState {
        SamplerState {
            mean: self.mean.to_state(),
            sigma_e2: self.sigma_e2,
            sigma_m2: self.psi.sigma_m2,
            rho: self.psi.rho,
        }
    }

    /// Marginal log likelihood of the current residual (no design layer).
    fn current_loglik(&self) -> Result<f64> {
        let op = self.op.op(self.dataset.incidence(), self.sigma_e2);
        lowrank_gaussian_logpdf(&self.r_total, None, 0.0, &op)
    }

    fn update_tree<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) -> Result<()> {
        let sigma_mu2 = self.ctx.sigma_mu2;
        let covs = self.dataset.scaled_covariates();
        let inc = self.dataset.incidence();

        let MeanRuntime::Trees { forest, assignments } = &mut self.mean else {
            unreachable!("tree update on linear model")
        };
        // Residual with tree j's contribution added back.
        let contrib = {
            let vals = &forest.leaf_values[j];
            let asg = &assignments[j];
            (0..inc.n_obs()).map(|k| vals[asg[inc.cluster_of(k)]]).collect::<Vec<f64>>()
        };
        let r_j: Vec<f64> =
            self.r_total.iter().zip(&contrib).map(|(r, c)| r + c).collect();

        let op = self.op.op(inc, self.sigma_e2);
        let tree = &forest.trees[j];
        let design_cur = {
            let asg = &assignments[j];
            let leaf_of_obs =
                (0..inc.n_obs()).map(|k| asg[inc.cluster_of(k)]).collect::<Vec<_>>();
            TallDesign::Indicator { leaf_of_obs, n_leaves: tree.n_leaves() }
        };

        if let Some(p) = propose_move(tree, covs, &self.ctx.cands, &self.cfg.move_probs, rng) {
            self.stats.pair_mut(p.kind).proposed += 1;
            if !p.valid {
                self.stats.invalid_proposals += 1;
            } else {
                let ll_cur = lowrank_gaussian_logpdf(&r_j, Some(&design_cur), sigma_mu2, &op)?;
                let lp_cur = tree_log_prior(tree, &self.ctx.tree_prior, &self.ctx.cands);
                let asg_new = p.tree.leaf_assignment(covs);
                let design_new = {
                    let leaf_of_obs = (0..inc.n_obs())
                        .map(|k| asg_new[inc.cluster_of(k)])
                        .collect::<Vec<_>>();
                    TallDesign::Indicator { leaf_of_obs, n_leaves: p.tree.n_leaves() }
                };
                let ll_new =
                    lowrank_gaussian_logpdf(&r_j, Some(&design_new), sigma_mu2, &op)?;
                let lp_new = tree_log_prior(&p.tree, &self.ctx.tree_prior, &self.ctx.cands);
                let log_alpha = (ll_new - ll_cur) + (lp_new - lp_cur) + p.log_q_ratio;
                if rng.gen::<f64>().ln() < log_alpha {
                    self.stats.pair_mut(p.kind).accepted += 1;
                    forest.trees[j] = p.tree;
                    assignments[j] = asg_new;
                }
            }
        } else {
            self.stats.no_feasible_move += 1;
        }

        // Gibbs draw of the leaf values for the (possibly new) tree.
        let tree = &forest.trees[j];
        let asg = &assignments[j];
        let n_leaves = tree.n_leaves();
        let design = {
            let leaf_of_obs =
                (0..inc.n_obs()).map(|k| asg[inc.cluster_of(k)]).collect::<Vec<_>>();
            TallDesign::Indicator { leaf_of_obs, n_leaves }
        };
        let (mean_vec, cov) = leaf_posterior(&r_j, &design, sigma_mu2, &op)?;
        let mu = if sigma_mu2 == 0.0 {
            vec![0.0; n_leaves]
        } else {
            let (chol, _) = dense_chol_jitter(cov)?;
            let z = DVector::from_iterator(
                n_leaves,
                (0..n_leaves).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
            );
            let draw = mean_vec + chol.l() * z;
            draw.iter().copied().collect()
        };
        let contrib_new = {
            (0..inc.n_obs()).map(|k| mu[asg[inc.cluster_of(k)]]).collect::<Vec<f64>>()
        };
        forest.leaf_values[j] = mu;
        self.r_total =
            r_j.iter().zip(&contrib_new).map(|(r, c)| r - c).collect();
        Ok(())
    }

    fn update_linear<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let x = self.ctx.linear_design_obs.as_ref().expect("linear context").clone();
        let design = TallDesign::Dense(x.clone());
        let op = self.op.op(self.dataset.incidence(), self.sigma_e2);
        let (mean_vec, cov) = leaf_posterior(self.y, &design, self.ctx.sigma_mu2, &op)?;
        let b = mean_vec.len();
        let (chol, _) = dense_chol_jitter(cov)?;
        let z = DVector::from_iterator(
            b,
            (0..b).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        );
        let draw = mean_vec + chol.l() * z;
        let beta: Vec<f64> = draw.iter().copied().collect();
        let fitted = &x * DVector::from_column_slice(&beta);
        self.r_total = self.y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect();
        let MeanRuntime::Linear { beta: state_beta } = &mut self.mean else {
            unreachable!("linear update on tree model")
        };
        *state_beta = beta;
        Ok(())
    }

    fn update_sigma_e<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.stats.sigma_e.proposed += 1;
        let prior = &self.ctx.calibration.sigma_e;
        let theta = self.sigma_e2.ln();
        let ll_cur = self.current_loglik()?;
        let post_cur = ll_cur + sigma_e_log_prior(self.sigma_e2, prior) + theta;
        let theta_new =
            theta + self.step_sigma_e.step() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let s2_new = theta_new.exp();
        match self.op_prop.set_sigma_from(&self.op, self.dataset, s2_new, &self.psi) {
            Ok(()) => {}
            Err(Error::NotPositiveDefinite(_)) => {
                // A proposal the solver cannot factor is rejected outright:
                // the chain's support is truncated to evaluable states.
                if self.adapting {
                    self.step_sigma_e.adapt(0.0);
                }
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        let op = self.op_prop.op(self.dataset.incidence(), s2_new);
        let ll_new = lowrank_gaussian_logpdf(&self.r_total, None, 0.0, &op)?;
        let post_new = ll_new + sigma_e_log_prior(s2_new, prior) + theta_new;
        let log_alpha = post_new - post_cur;
        let accept = rng.gen::<f64>().ln() < log_alpha;
        if accept {
            self.sigma_e2 = s2_new;
            self.stats.sigma_e.accepted += 1;
            std::mem::swap(&mut self.op, &mut self.op_prop);
        }
        if self.adapting {
            self.step_sigma_e.adapt(log_alpha.min(0.0).exp());
        }
        Ok(())
    }

    fn update_psi<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.stats.psi.proposed += 1;
        let pc = &self.ctx.calibration.pc;
        // Log posterior in (ln σ_m², ln ρ), with the change-of-variables
        // Jacobian ln σ_m + ln ρ (constants cancel).
        let log_post = |ll: f64, psi: &MaternParams| {
            ll + pc_log_prior(psi, pc) + 0.5 * psi.sigma_m2.ln() + psi.rho.ln()
        };
        let ll_cur = self.current_loglik()?;
        let post_cur = log_post(ll_cur, &self.psi);
        let step = self.step_psi.step();
        let psi_new = MaternParams {
            sigma_m2: (self.psi.sigma_m2.ln()
                + step * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .exp(),
            rho: (self.psi.rho.ln()
                + step * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .exp(),
            nu: 1.0,
        };
        // Truncated prior support: proposals outside the configured range
        // window are rejected, never evaluated.
        if psi_new.rho < self.cfg.rho_min.unwrap_or(0.0)
            || psi_new.rho > self.cfg.rho_max.unwrap_or(f64::INFINITY)
        {
            if self.adapting {
                self.step_psi.adapt(0.0);
            }
            return Ok(());
        }
        match self.op_prop.set(self.dataset, self.sigma_e2, &psi_new) {
            Ok(()) => {}
            Err(Error::NotPositiveDefinite(_)) => {
                // Hyperparameters far outside the identifiable region (for
                // example a range orders of magnitude beyond the domain)
                // yield a numerically singular field precision. Rejecting
                // such proposals truncates the support to evaluable states
                // instead of aborting the chain.
                if self.adapting {
                    self.step_psi.adapt(0.0);
                }
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        let op = self.op_prop.op(self.dataset.incidence(), self.sigma_e2);
        let ll_new = lowrank_gaussian_logpdf(&self.r_total, None, 0.0, &op)?;
        let post_new = log_post(ll_new, &psi_new);
        let log_alpha = post_new - post_cur;
        if rng.gen::<f64>().ln() < log_alpha {
            self.psi = psi_new;
            self.stats.psi.accepted += 1;
            std::mem::swap(&mut self.op, &mut self.op_prop);
        }
        if self.adapting {
            self.step_psi.adapt(log_alpha.min(0.0).exp());
        }
        Ok(())
    }

    fn update_hyper<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.update_sigma_e(rng)?;
        if self.cfg.model.has_field() {
            self.update_psi(rng)?;
        }
        Ok(())
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        // Start every sweep from the canonically recomputed residual so
        // incremental rounding never accumulates and a resumed chain
        // reproduces an uninterrupted one exactly.
        self.r_total = self.fresh_residual();
        if self.cfg.model.has_trees() {
            let per_tree = self.cfg.update_schedule == UpdateSchedule::PerTree;
            for j in 0..self.cfg.trees {
                self.update_tree(j, rng)?;
                if per_tree {
                    self.update_hyper(rng)?;
                }
            }
            if !per_tree {
                self.update_hyper(rng)?;
            }
        } else {
            self.update_linear(rng)?;
            self.update_hyper(rng)?;
        }
        #[cfg(debug_assertions)]
        self.check_residual_cache();
        Ok(())
    }

    #[cfg(debug_assertions)]
    fn check_residual_cache(&self) {
        let fresh = self.fresh_residual();
        let max_err = fresh
            .iter()
            .zip(&self.r_total)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        debug_assert!(max_err < 1e-8, "residual cache drift {max_err}");
    }
}

/// Deterministic per-chain RNG stream.
fn chain_rng(seed: u64, chain_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (chain_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

/// Runs one chain to completion (or resumes one from a checkpoint).
pub fn run_chain(
    dataset: &SpatialDataset,
    cfg: &RunConfig,
    ctx: &FitContext,
    chain_index: usize,
    resume: Option<Checkpoint>,
    checkpoint: Option<&CheckpointSpec>,
) -> Result<ChainOutput> {
    let fingerprint = serde_json::to_string(cfg)?;
    let (mut rng, start_sweep, mut draws, resume_state) = match resume {
        Some(cp) => {
            if cp.config_fingerprint != fingerprint {
                return Err(Error::CheckpointMismatch(
                    "checkpoint was written under a different configuration".into(),
                ));
            }
            if cp.chain_index != chain_index {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint is for chain {} not {}",
                    cp.chain_index, chain_index
                )));
            }
            (
                cp.rng,
                cp.next_sweep,
                cp.draws,
                Some((cp.state, cp.step_sigma_e, cp.step_psi, cp.acceptance)),
            )
        }
        None => (chain_rng(cfg.seed, chain_index), 0, Vec::new(), None),
    };
    let mut core = SamplerCore::new(dataset, cfg, ctx, resume_state)?;

    for sweep in start_sweep..cfg.iterations {
        core.adapting = sweep < cfg.burnin;
        core.sweep(&mut rng)?;
        if sweep >= cfg.burnin && (sweep - cfg.burnin) % cfg.thin == 0 {
            let loglik = core.current_loglik()?;
            let (forest, beta) = match &core.mean {
                MeanRuntime::Trees { forest, .. } => (Some(forest.clone()), None),
                MeanRuntime::Linear { beta } => (None, Some(beta.clone())),
            };
            let has_field = cfg.model.has_field();
            draws.push(Draw {
                sweep,
                forest,
                beta,
                sigma_e2: core.sigma_e2,
                sigma_m2: has_field.then_some(core.psi.sigma_m2),
                rho: has_field.then_some(core.psi.rho),
                loglik,
            });
        }
        if let Some(spec) = checkpoint {
            if spec.every > 0 && (sweep + 1) % spec.every == 0 {
                Checkpoint {
                    config_fingerprint: fingerprint.clone(),
                    chain_index,
                    next_sweep: sweep + 1,
                    state: core.state(),
                    rng: rng.clone(),
                    step_sigma_e: core.step_sigma_e,
                    step_psi: core.step_psi,
                    draws: draws.clone(),
                    acceptance: core.stats.clone(),
                }
                .save(spec.path)?;
            }
        }
    }
    let mut acceptance = core.stats.clone();
    acceptance.final_step_sigma_e = core.step_sigma_e.step();
    acceptance.final_step_psi = core.step_psi.step();
    Ok(ChainOutput { chain_index, draws, acceptance })
}

/// Fits a model: calibrates priors, builds the shared context, and runs all
/// requested chains (in parallel when the `parallel` feature is on).
pub fn fit(dataset: &SpatialDataset, cfg: &RunConfig) -> Result<FitResult> {
    let ctx = prepare(dataset, cfg)?;
    let chains: Vec<Result<ChainOutput>> = parallel::par_map(
        (0..cfg.chains).collect::<Vec<_>>(),
        |i| run_chain(dataset, cfg, &ctx, i, None, None),
    );
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        config: cfg.clone(),
        chains,
        calibration: ctx.calibration,
        mesh: ctx.mesh,
        mesh_config: ctx.mesh_config,
        sigma_mu2: ctx.sigma_mu2,
    })
}
