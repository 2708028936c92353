//! Synthetic-benchmark scenario generator.
//!
//! Builds the simulation design used throughout the benchmark suite: a unit
//! square divided into a grid of cells, each carrying two independent
//! uniform covariates; a true surface that blends a covariate-driven step
//! function with a draw of a Matérn random field,
//! f = (1 − ω) z* + ω f₀; and a clustered sample — cells drawn without
//! replacement, one cluster per cell at a uniform location inside it, with
//! several noisy observations of the cell's (constant) surface value.
//! ω = 1 is a pure covariate signal, ω = 0 a pure spatial one.
//!
//! The step surface f₀ takes values 3, 0, −2 with cell probabilities
//! ½, ¼, ¼, so E[f₀] = 1 and Var(f₀) = 4.5.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{save_dataset, Point, SpatialDataset};
use crate::error::{Error, Result};
use crate::gp::{covariance_matrix, MaternParams};
use crate::predict::PredictionPoints;
use crate::solver::{FillOrdering, SparseFactor};
use crate::spde::{build_mesh, fem_matrices, precision_matrix, projection_matrix, MeshConfig};

/// Scenario parameters. Defaults reproduce the benchmark design: a 50 × 50
/// grid, 250 clusters of 5–10 observations, unit noise variance, and a
/// Matérn field with κ = 2.5 (ρ = √8 / 2.5) and σ_m² = 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Weight on the covariate surface: f = (1 − ω) z* + ω f₀.
    pub omega: f64,
    pub grid_side: usize,
    pub n_clusters: usize,
    pub min_cluster_size: usize,
    pub max_cluster_size: usize,
    pub sigma_e2: f64,
    pub field_sigma_m2: f64,
    pub field_rho: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            grid_side: 50,
            n_clusters: 250,
            min_cluster_size: 5,
            max_cluster_size: 10,
            sigma_e2: 1.0,
            field_sigma_m2: 0.5,
            field_rho: 8f64.sqrt() / 2.5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidScenario(format!("omega {} not in [0, 1]", self.omega)));
        }
        if self.grid_side == 0 {
            return Err(Error::InvalidScenario("grid_side must be positive".into()));
        }
        if self.n_clusters == 0 || self.n_clusters > self.grid_side * self.grid_side {
            return Err(Error::InvalidScenario(format!(
                "{} clusters do not fit a {0}x{0} grid of {1} cells",
                self.n_clusters,
                self.grid_side * self.grid_side
            )));
        }
        if self.min_cluster_size == 0 || self.min_cluster_size > self.max_cluster_size {
            return Err(Error::InvalidScenario(format!(
                "cluster sizes {}..{}",
                self.min_cluster_size, self.max_cluster_size
            )));
        }
        if !(self.sigma_e2 > 0.0) || !(self.field_sigma_m2 > 0.0) || !(self.field_rho > 0.0) {
            return Err(Error::InvalidScenario("variance/range parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn field_params(&self) -> MaternParams {
        MaternParams { sigma_m2: self.field_sigma_m2, rho: self.field_rho, nu: 1.0 }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A generated scenario: the clustered dataset plus the full grid truth.
#[derive(Clone, Debug)]
pub struct SimulatedScenario {
    pub config: ScenarioConfig,
    pub dataset: SpatialDataset,
    /// Grid cells as prediction points (ids `g0`, `g1`, … row-major from the
    /// lower-left cell).
    pub grid: PredictionPoints,
    /// True surface f at each cell.
    pub truth: Vec<f64>,
    /// Field component z* at each cell.
    pub field: Vec<f64>,
    /// Covariate surface f₀ at each cell.
    pub f0: Vec<f64>,
    /// Grid-cell index each cluster was drawn from.
    pub cluster_cells: Vec<usize>,
}

/// The covariate step surface: 3 when x1 ≥ ½ (probability ½ under uniform
/// covariates), else 0 when x2 ≥ ½, else −2.
pub fn baseline_covariate_surface(x1: f64, x2: f64) -> f64 {
    if x1 >= 0.5 {
        3.0
    } else if x2 >= 0.5 {
        0.0
    } else {
        -2.0
    }
}

/// Draws a zero-mean Matérn field at `points` from the dense covariance
/// matrix. Exact, but cubic in the number of points.
pub fn sample_field_dense<R: Rng + ?Sized>(
    points: &[Point],
    params: &MaternParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let cov = covariance_matrix(points, params);
    let (chol, _) = crate::solver::dense_chol_jitter(cov)?;
    let n = points.len();
    let z = nalgebra::DVector::from_iterator(
        n,
        (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
    );
    Ok((chol.l() * z).iter().copied().collect())
}

/// Draws a zero-mean Matérn field at `points` through the sparse mesh
/// approximation: one precision-factor draw at the mesh vertices, projected
/// onto the points. Scales to large grids.
pub fn sample_field_gmrf<R: Rng + ?Sized>(
    points: &[Point],
    params: &MaternParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let wmin = (xmax - xmin).min(ymax - ymin).max(1e-9);
    let wmax = (xmax - xmin).max(ymax - ymin).max(1e-9);
    let margin = (1.5 * params.rho).clamp(0.25 * wmax, wmax);
    let extension = margin / wmin;
    let extended = wmax * (1.0 + 2.0 * extension);
    let edge = (params.rho / 8.0).max(extended / 64.0);
    let mesh = build_mesh(points, &MeshConfig { edge, extension })?;
    let (c, g) = fem_matrices(&mesh)?;
    let q = precision_matrix(&c, &g, params)?;
    let factor = SparseFactor::new(&q, FillOrdering::MinimumDegree)?;
    let u = factor.draw_gaussian(rng);
    let a = projection_matrix(&mesh, points)?;
    Ok(a.matvec(&u))
}

/// Draws the scenario's baseline field, choosing the dense exact path for
/// small point sets and the sparse mesh path for large ones.
pub fn sample_baseline_field<R: Rng + ?Sized>(
    points: &[Point],
    params: &MaternParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if points.len() <= 1600 {
        sample_field_dense(points, params, rng)
    } else {
        sample_field_gmrf(points, params, rng)
    }
}

/// Generates one scenario realization. Everything — covariates, field,
/// cell sample, in-cell locations, cluster sizes, and noise — is drawn from
/// a single seeded stream, so a (config, seed) pair fully determines the
/// output.
pub fn simulate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<SimulatedScenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.grid_side;
    let n_cells = side * side;
    let h = 1.0 / side as f64;

    // Grid cells: centers, ids, covariates.
    let mut ids = Vec::with_capacity(n_cells);
    let mut centers = Vec::with_capacity(n_cells);
    for gy in 0..side {
        for gx in 0..side {
            ids.push(format!("g{}", gy * side + gx));
            centers.push(Point::new((gx as f64 + 0.5) * h, (gy as f64 + 0.5) * h));
        }
    }
    let covariates =
        DMatrix::from_fn(n_cells, 2, |_, _| rng.gen::<f64>());

    // Surface components.
    let f0: Vec<f64> = (0..n_cells)
        .map(|i| baseline_covariate_surface(covariates[(i, 0)], covariates[(i, 1)]))
        .collect();
    let field = sample_baseline_field(&centers, &cfg.field_params(), &mut rng)?;
    let truth: Vec<f64> = (0..n_cells)
        .map(|i| (1.0 - cfg.omega) * field[i] + cfg.omega * f0[i])
        .collect();

    // Cluster sample: cells without replacement, uniform location in cell.
    let mut cells: Vec<usize> = (0..n_cells).collect();
    cells.shuffle(&mut rng);
    cells.truncate(cfg.n_clusters);
    let sigma_e = cfg.sigma_e2.sqrt();
    let mut cluster_ids = Vec::with_capacity(cfg.n_clusters);
    let mut locations = Vec::with_capacity(cfg.n_clusters);
    let mut cluster_covs = DMatrix::zeros(cfg.n_clusters, 2);
    let mut responses = Vec::with_capacity(cfg.n_clusters);
    for (c, &cell) in cells.iter().enumerate() {
        cluster_ids.push(format!("c{c}"));
        let center = centers[cell];
        locations.push(Point::new(
            center.x + (rng.gen::<f64>() - 0.5) * h,
            center.y + (rng.gen::<f64>() - 0.5) * h,
        ));
        cluster_covs[(c, 0)] = covariates[(cell, 0)];
        cluster_covs[(c, 1)] = covariates[(cell, 1)];
        let size = rng.gen_range(cfg.min_cluster_size..=cfg.max_cluster_size);
        responses.push(
            (0..size)
                .map(|_| {
                    truth[cell] + sigma_e * rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
                .collect::<Vec<f64>>(),
        );
    }
    let dataset = SpatialDataset::from_parts(
        cluster_ids,
        locations,
        cluster_covs,
        responses,
        vec!["x1".into(), "x2".into()],
    )?;
    let grid = PredictionPoints { ids, points: centers, covariates };
    Ok(SimulatedScenario {
        config: *cfg,
        dataset,
        grid,
        truth,
        field,
        f0,
        cluster_cells: cells,
    })
}

/// Writes a scenario to `dir` as `data.csv` (the clustered sample),
/// `grid.csv` (cell_id,x,y,x1,x2), `truth.csv` (cell_id,truth), and
/// `scenario.json` (the generating configuration).
pub fn write_scenario(dir: &Path, scenario: &SimulatedScenario) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_dataset(&scenario.dataset, &dir.join("data.csv"))?;

    let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
    w.write_record(["cell_id", "x", "y", "x1", "x2"])?;
    for i in 0..scenario.grid.ids.len() {
        w.write_record(&[
            scenario.grid.ids[i].clone(),
            format!("{}", scenario.grid.points[i].x),
            format!("{}", scenario.grid.points[i].y),
            format!("{}", scenario.grid.covariates[(i, 0)]),
            format!("{}", scenario.grid.covariates[(i, 1)]),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
    w.write_record(["cell_id", "truth"])?;
    for i in 0..scenario.grid.ids.len() {
        w.write_record(&[scenario.grid.ids[i].clone(), format!("{}", scenario.truth[i])])?;
    }
    w.flush()?;

    std::fs::write(
        dir.join("scenario.json"),
        serde_json::to_string_pretty(&scenario.config)?,
    )?;
    Ok(())
}
