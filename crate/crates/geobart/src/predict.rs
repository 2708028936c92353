//! Posterior prediction of the regression surface, areal aggregation, and
//! partial dependence.
//!
//! Prediction works draw by draw: the mean structure (forest or linear
//! design) is evaluated at the target points, and for spatial models one
//! draw of the latent field conditional on that draw's residual and
//! hyperparameters is added. Sparse-mesh models draw the field jointly at
//! every mesh vertex and project; the dense cluster-level path uses the
//! closed-form conditional moments
//! E[u_g | r] = K_gc Eᵀ M⁻¹ r and V[u_g | r] = K_gg − K_gc Eᵀ M⁻¹ E K_cg,
//! where Eᵀ M⁻¹ E = D^{1/2} W⁻¹ D^{1/2} collapses to one dense solve.
//! Per-point posterior summaries use equal-tailed quantiles, so joint
//! correlation across points only matters for areal aggregates — which is
//! exactly why aggregation consumes joint per-draw surfaces rather than
//! per-point summaries.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{IncidenceMap, Point, SpatialDataset};
use crate::error::{Error, Result};
use crate::gp::{matern_corr, MaternParams};
use crate::parallel;
use crate::sampler::{Draw, ModelKind, RunConfig};
use crate::solver::{
    cluster_weight_matrix, conditional_field_draw, dense_chol_jitter, FillOrdering, SparseFactor,
};
use crate::sparse::SparseMatrix;
use crate::spde::{fem_matrices, precision_matrix, projection_matrix, Mesh};

/// Target points for prediction: ids, coordinates, and original-scale
/// covariates with the same columns as the training data.
#[derive(Clone, Debug)]
pub struct PredictionPoints {
    pub ids: Vec<String>,
    pub points: Vec<Point>,
    pub covariates: DMatrix<f64>,
}

/// Per-draw surface values at each prediction point, on the original
/// response scale. Row t is draw t; column j is point j.
#[derive(Clone, Debug)]
pub struct SurfaceDraws {
    pub ids: Vec<String>,
    pub points: Vec<Point>,
    pub values: DMatrix<f64>,
}

/// Pointwise posterior summary of a predicted surface.
#[derive(Clone, Debug)]
pub struct SurfaceSummary {
    pub ids: Vec<String>,
    pub points: Vec<Point>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Interval level: `lower`/`upper` are the α/2 and 1 − α/2 quantiles.
    pub alpha: f64,
}

/// Linear-interpolation quantile of an ascending-sorted slice (the common
/// "type 7" convention: index h = (n−1)p).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let p = p.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

fn summarize_columns(values: &DMatrix<f64>, alpha: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = values.ncols();
    let t = values.nrows();
    let mut mean = Vec::with_capacity(n);
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut col = vec![0.0; t];
    for j in 0..n {
        for i in 0..t {
            col[i] = values[(i, j)];
        }
        mean.push(col.iter().sum::<f64>() / t as f64);
        col.sort_by(f64::total_cmp);
        lower.push(quantile(&col, alpha / 2.0));
        upper.push(quantile(&col, 1.0 - alpha / 2.0));
    }
    (mean, lower, upper)
}

/// Reduces per-draw surfaces to pointwise mean and equal-tailed interval.
pub fn summarize_surface(draws: &SurfaceDraws, alpha: f64) -> SurfaceSummary {
    let (mean, lower, upper) = summarize_columns(&draws.values, alpha);
    SurfaceSummary {
        ids: draws.ids.clone(),
        points: draws.points.clone(),
        mean,
        lower,
        upper,
        alpha,
    }
}

/// Conditional mean and covariance of the field at prediction locations for
/// the dense cluster-level model, given the observation-level residual `r`.
/// `k_cc`, `k_gc`, `k_gg` are the σ_m²-scaled kernel blocks over
/// (train × train), (pred × train), (pred × pred).
pub fn cluster_field_conditional(
    r: &[f64],
    incidence: &IncidenceMap,
    k_cc: &DMatrix<f64>,
    k_gc: &DMatrix<f64>,
    k_gg: &DMatrix<f64>,
    sigma_e2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let counts = incidence.counts();
    let n = counts.len();
    if k_cc.nrows() != n || k_gc.ncols() != n || k_gg.nrows() != k_gc.nrows() {
        return Err(Error::ShapeMismatch("cluster conditional kernel blocks".into()));
    }
    let w = cluster_weight_matrix(k_cc, counts, sigma_e2);
    let (chol, _) = dense_chol_jitter(w)?;
    let d_sqrt: Vec<f64> = counts.iter().map(|&c| (c as f64).sqrt()).collect();
    // Eᵀ M⁻¹ r = D^{1/2} W⁻¹ D^{−1/2} (Eᵀ r).
    let s = incidence.reduce_sum(r);
    let rhs = DVector::from_fn(n, |i, _| s[i] / d_sqrt[i]);
    let sol = chol.solve(&rhs);
    let t = DVector::from_fn(n, |i, _| d_sqrt[i] * sol[i]);
    let mean = k_gc * t;
    // Eᵀ M⁻¹ E = D^{1/2} W⁻¹ D^{1/2}; with B = D^{1/2} K_cg the covariance
    // correction is Bᵀ W⁻¹ B.
    let mut b = k_gc.transpose();
    for i in 0..n {
        for j in 0..b.ncols() {
            b[(i, j)] *= d_sqrt[i];
        }
    }
    let winv_b = chol.solve(&b);
    let cov = k_gg - b.transpose() * winv_b;
    Ok((mean, cov))
}

fn pairwise_distances(a: &[Point], b: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].distance(&b[j]))
}

fn kernel_from_distances(d: &DMatrix<f64>, params: &MaternParams) -> DMatrix<f64> {
    d.map(|dist| params.sigma_m2 * matern_corr(dist, params))
}

/// Observation-level linear design [1(, X)] for a cluster-level design.
fn expand_linear_design(x: &DMatrix<f64>, incidence: &IncidenceMap) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(incidence.n_obs(), x.ncols());
    for k in 0..incidence.n_obs() {
        let i = incidence.cluster_of(k);
        for j in 0..x.ncols() {
            out[(k, j)] = x[(i, j)];
        }
    }
    out
}

fn linear_design(scaled_covs: &DMatrix<f64>, intercept_only: bool) -> DMatrix<f64> {
    let n = scaled_covs.nrows();
    let p = if intercept_only { 0 } else { scaled_covs.ncols() };
    let mut x = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 0..p {
            x[(i, j + 1)] = scaled_covs[(i, j)];
        }
    }
    x
}

/// Splits draw indices into at most `max_chunks` contiguous chunks.
fn chunk_indices(n: usize, max_chunks: usize) -> Vec<Vec<usize>> {
    let n_chunks = n.min(max_chunks).max(1);
    let base = n / n_chunks;
    let extra = n % n_chunks;
    let mut out = Vec::with_capacity(n_chunks);
    let mut start = 0;
    for c in 0..n_chunks {
        let len = base + usize::from(c < extra);
        out.push((start..start + len).collect());
        start += len;
    }
    out
}

struct GmrfPredictCtx {
    mass: SparseMatrix,
    stiffness: SparseMatrix,
    a_obs: SparseMatrix,
    ata: SparseMatrix,
    a_pred: SparseMatrix,
    template: SparseFactor,
}

struct ClusterPredictCtx {
    d_cc: DMatrix<f64>,
    d_gc: DMatrix<f64>,
    d_gg: DMatrix<f64>,
}

/// Predicts the regression surface (mean structure plus latent field, no
/// observation noise) at `pts` for every retained draw. Output values are on
/// the original response scale. `mesh` must be the mesh the model was fitted
/// with (sparse models only). Field draws are seeded deterministically from
/// `seed` per draw index, so results do not depend on thread count.
pub fn predict_surface(
    dataset: &SpatialDataset,
    cfg: &RunConfig,
    mesh: Option<&Mesh>,
    draws: &[Draw],
    pts: &PredictionPoints,
    seed: u64,
) -> Result<SurfaceDraws> {
    if draws.is_empty() {
        return Err(Error::EmptyInput("no posterior draws to predict from".into()));
    }
    let n_pts = pts.points.len();
    if pts.ids.len() != n_pts || pts.covariates.nrows() != n_pts {
        return Err(Error::ShapeMismatch(format!(
            "{} ids, {} points, {} covariate rows",
            pts.ids.len(),
            n_pts,
            pts.covariates.nrows()
        )));
    }
    let model = cfg.model;
    let scaled_pred = dataset.scale_external_covariates(&pts.covariates)?;
    for d in draws {
        if d.forest.is_some() != model.has_trees() || d.beta.is_some() == model.has_trees() {
            return Err(Error::InvalidConfig(
                "draws do not match the configured model's mean structure".into(),
            ));
        }
        if model.has_field() && (d.sigma_m2.is_none() || d.rho.is_none()) {
            return Err(Error::InvalidConfig(
                "draws lack spatial hyperparameters required by the model".into(),
            ));
        }
    }

    // Mean-structure designs (linear models only).
    let (pred_design, train_design) = if model.has_trees() {
        (None, None)
    } else {
        let intercept_only = model == ModelKind::Spde0;
        let xp = linear_design(&scaled_pred, intercept_only);
        let xc = linear_design(dataset.scaled_covariates(), intercept_only);
        (Some(xp), Some(expand_linear_design(&xc, dataset.incidence())))
    };

    // Field machinery.
    let gmrf_ctx = if model.has_field() && model.uses_mesh() {
        let mesh = mesh.ok_or_else(|| {
            Error::InvalidConfig("sparse spatial model requires the fitted mesh".into())
        })?;
        let (mass, stiffness) = fem_matrices(mesh)?;
        let a_cluster = projection_matrix(mesh, dataset.locations())?;
        let a_obs = a_cluster.select_rows(dataset.incidence().cluster_of_obs());
        let ata = a_obs.transpose().matmul(&a_obs)?;
        let a_pred = projection_matrix(mesh, &pts.points)?;
        let psi0 = MaternParams {
            sigma_m2: draws[0].sigma_m2.unwrap(),
            rho: draws[0].rho.unwrap(),
            nu: 1.0,
        };
        let q0 = precision_matrix(&mass, &stiffness, &psi0)?;
        let inner0 = q0.add_scaled(1.0 / draws[0].sigma_e2, &ata)?;
        let template = SparseFactor::new(&inner0, FillOrdering::MinimumDegree)?;
        Some(GmrfPredictCtx { mass, stiffness, a_obs, ata, a_pred, template })
    } else {
        None
    };
    let cluster_ctx = if model.has_field() && !model.uses_mesh() {
        Some(ClusterPredictCtx {
            d_cc: pairwise_distances(dataset.locations(), dataset.locations()),
            d_gc: pairwise_distances(&pts.points, dataset.locations()),
            d_gg: pairwise_distances(&pts.points, &pts.points),
        })
    } else {
        None
    };

    let y = dataset.scaled_responses();
    let inc = dataset.incidence();
    let chunks = chunk_indices(draws.len(), 32);
    let results: Vec<Result<Vec<(usize, Vec<f64>)>>> = parallel::par_map(chunks, |chunk| {
        let mut out = Vec::with_capacity(chunk.len());
        let mut factor = gmrf_ctx.as_ref().map(|c| c.template.clone());
        let mut cached: Option<(f64, f64, f64)> = None;
        for t in chunk {
            let d = &draws[t];
            // Mean structure at the prediction points (internal scale).
            let mut f_int: Vec<f64> = match (&d.forest, &d.beta, &pred_design) {
                (Some(forest), _, _) => forest.evaluate(&scaled_pred),
                (_, Some(beta), Some(xp)) => {
                    let v = xp * DVector::from_column_slice(beta);
                    v.iter().copied().collect()
                }
                _ => unreachable!("validated above"),
            };
            if model.has_field() {
                // Residual at the training observations under this draw.
                let fitted: Vec<f64> = match (&d.forest, &d.beta, &train_design) {
                    (Some(forest), _, _) => {
                        inc.expand(&forest.evaluate(dataset.scaled_covariates()))
                    }
                    (_, Some(beta), Some(xt)) => {
                        let v = xt * DVector::from_column_slice(beta);
                        v.iter().copied().collect()
                    }
                    _ => unreachable!("validated above"),
                };
                let r: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
                let psi = MaternParams {
                    sigma_m2: d.sigma_m2.unwrap(),
                    rho: d.rho.unwrap(),
                    nu: 1.0,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let field = if let Some(ctx) = &gmrf_ctx {
                    let factor = factor.as_mut().unwrap();
                    let key = (d.sigma_e2, psi.sigma_m2, psi.rho);
                    if cached != Some(key) {
                        let q = precision_matrix(&ctx.mass, &ctx.stiffness, &psi)?;
                        let inner = q.add_scaled(1.0 / d.sigma_e2, &ctx.ata)?;
                        factor.refactor(&inner)?;
                        cached = Some(key);
                    }
                    let u = conditional_field_draw(&r, &ctx.a_obs, factor, d.sigma_e2, &mut rng)?;
                    ctx.a_pred.matvec(&u)
                } else {
                    let ctx = cluster_ctx.as_ref().unwrap();
                    let k_cc = kernel_from_distances(&ctx.d_cc, &psi);
                    let k_gc = kernel_from_distances(&ctx.d_gc, &psi);
                    let k_gg = kernel_from_distances(&ctx.d_gg, &psi);
                    let (mean, cov) =
                        cluster_field_conditional(&r, inc, &k_cc, &k_gc, &k_gg, d.sigma_e2)?;
                    let (chol, _) = dense_chol_jitter(cov)?;
                    let z = DVector::from_iterator(
                        n_pts,
                        (0..n_pts).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
                    );
                    let u = mean + chol.l() * z;
                    u.iter().copied().collect()
                };
                for (f, u) in f_int.iter_mut().zip(&field) {
                    *f += u;
                }
            }
            let transform = dataset.response_transform();
            let row: Vec<f64> = f_int.iter().map(|&v| transform.to_original(v)).collect();
            out.push((t, row));
        }
        Ok(out)
    });

    let mut values = DMatrix::zeros(draws.len(), n_pts);
    for chunk in results {
        for (t, row) in chunk? {
            for (j, v) in row.into_iter().enumerate() {
                values[(t, j)] = v;
            }
        }
    }
    Ok(SurfaceDraws { ids: pts.ids.clone(), points: pts.points.clone(), values })
}

/// One region's membership row: a surface cell, its region, and its
/// population-density weight.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRow {
    pub cell_id: String,
    pub region: String,
    pub density: f64,
}

/// Cell-to-region assignment with density weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionSpec {
    pub rows: Vec<RegionRow>,
}

/// Posterior summary of one region's density-weighted average.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Density-weighted regional averages of each per-draw surface, summarized
/// over draws. Region order follows first appearance in the spec; every
/// spec cell must exist in the surface, and each region needs positive total
/// density.
pub fn aggregate_areal(
    surface: &SurfaceDraws,
    spec: &RegionSpec,
    alpha: f64,
) -> Result<Vec<RegionSummary>> {
    if spec.rows.is_empty() {
        return Err(Error::EmptyInput("region specification has no rows".into()));
    }
    let col_of: HashMap<&str, usize> =
        surface.ids.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
    let mut region_order: Vec<&str> = Vec::new();
    let mut members: HashMap<&str, Vec<(usize, f64)>> = HashMap::new();
    for row in &spec.rows {
        let j = *col_of.get(row.cell_id.as_str()).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "region cell `{}` is not in the predicted surface",
                row.cell_id
            ))
        })?;
        if !(row.density >= 0.0) || !row.density.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cell `{}` has invalid density {}",
                row.cell_id, row.density
            )));
        }
        if !members.contains_key(row.region.as_str()) {
            region_order.push(row.region.as_str());
        }
        members.entry(row.region.as_str()).or_default().push((j, row.density));
    }
    let t = surface.values.nrows();
    let mut out = Vec::with_capacity(region_order.len());
    for region in region_order {
        let cells = &members[region];
        let total: f64 = cells.iter().map(|(_, d)| d).sum();
        if total <= 0.0 {
            return Err(Error::ZeroDensityRegion(region.to_string()));
        }
        let mut samples: Vec<f64> = (0..t)
            .map(|i| {
                cells.iter().map(|&(j, d)| surface.values[(i, j)] * d).sum::<f64>() / total
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / t as f64;
        samples.sort_by(f64::total_cmp);
        out.push(RegionSummary {
            region: region.to_string(),
            mean,
            lower: quantile(&samples, alpha / 2.0),
            upper: quantile(&samples, 1.0 - alpha / 2.0),
        });
    }
    Ok(out)
}

/// Partial-dependence curve for one covariate of a tree model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdCurve {
    pub covariate: String,
    /// Grid on the original covariate scale.
    pub values: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
}

/// Evenly spaced grid over the observed range of covariate `var` (original
/// scale).
pub fn pd_grid(dataset: &SpatialDataset, var: usize, n: usize) -> Vec<f64> {
    let col = dataset.covariates().column(var);
    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n <= 1 || hi <= lo {
        return vec![(lo + hi) / 2.0];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Partial dependence of the sum-of-trees component on covariate `var`:
/// for each grid value v, the average forest prediction over the training
/// clusters with that covariate forced to v, per posterior draw. The latent
/// field and noise play no part. Output is on the original response scale.
pub fn partial_dependence(
    dataset: &SpatialDataset,
    draws: &[Draw],
    var: usize,
    grid: &[f64],
    alpha: f64,
) -> Result<PdCurve> {
    if draws.is_empty() || grid.is_empty() {
        return Err(Error::EmptyInput("partial dependence needs draws and a grid".into()));
    }
    if var >= dataset.n_covariates() {
        return Err(Error::InvalidConfig(format!(
            "covariate index {var} out of range ({} covariates)",
            dataset.n_covariates()
        )));
    }
    if draws.iter().any(|d| d.forest.is_none()) {
        return Err(Error::InvalidConfig(
            "partial dependence requires a tree-based model".into(),
        ));
    }
    let transform = dataset.covariate_transforms()[var];
    let rt = dataset.response_transform();
    let n = dataset.n_clusters();
    let per_value: Vec<Vec<f64>> = parallel::par_map(grid.to_vec(), |v| {
        let mut covs = dataset.scaled_covariates().clone();
        let scaled_v = transform.to_internal(v);
        for i in 0..n {
            covs[(i, var)] = scaled_v;
        }
        draws
            .iter()
            .map(|d| {
                let vals = d.forest.as_ref().unwrap().evaluate(&covs);
                let avg = vals.iter().sum::<f64>() / n as f64;
                rt.to_original(avg)
            })
            .collect()
    });
    let mut mean = Vec::with_capacity(grid.len());
    let mut lower = Vec::with_capacity(grid.len());
    let mut upper = Vec::with_capacity(grid.len());
    for mut samples in per_value {
        mean.push(samples.iter().sum::<f64>() / samples.len() as f64);
        samples.sort_by(f64::total_cmp);
        lower.push(quantile(&samples, alpha / 2.0));
        upper.push(quantile(&samples, 1.0 - alpha / 2.0));
    }
    Ok(PdCurve {
        covariate: dataset.covariate_names()[var].clone(),
        values: grid.to_vec(),
        mean,
        lower,
        upper,
        alpha,
    })
}

/// Pointwise accuracy and interval-calibration metrics against a known
/// truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    /// Root mean squared error of the posterior mean.
    pub rmse: f64,
    /// Average interval length.
    pub ail: f64,
    /// Average coverage rate: fraction of truths inside their interval.
    pub acr: f64,
    /// Average interval score at level α:
    /// (u − l) + (2/α)(l − y)₊ + (2/α)(y − u)₊.
    pub ais: f64,
}

/// Computes RMSE/AIL/ACR/AIS of a summary against `truth` (aligned with the
/// summary's points).
pub fn compute_metrics(truth: &[f64], summary: &SurfaceSummary) -> Result<PredictionMetrics> {
    let n = summary.mean.len();
    if truth.len() != n || n == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} truth values for {} predicted points",
            truth.len(),
            n
        )));
    }
    let alpha = summary.alpha;
    let mut se = 0.0;
    let mut len_sum = 0.0;
    let mut covered = 0usize;
    let mut score = 0.0;
    for j in 0..n {
        let (y, m, l, u) = (truth[j], summary.mean[j], summary.lower[j], summary.upper[j]);
        se += (m - y) * (m - y);
        len_sum += u - l;
        if y >= l && y <= u {
            covered += 1;
        }
        let mut s = u - l;
        if y < l {
            s += 2.0 / alpha * (l - y);
        }
        if y > u {
            s += 2.0 / alpha * (y - u);
        }
        score += s;
    }
    let nf = n as f64;
    Ok(PredictionMetrics {
        rmse: (se / nf).sqrt(),
        ail: len_sum / nf,
        acr: covered as f64 / nf,
        ais: score / nf,
    })
}

/// Reorders `pairs` (cell id, truth) to match the surface's point order.
pub fn align_truth(ids: &[String], pairs: &[(String, f64)]) -> Result<Vec<f64>> {
    let by_id: HashMap<&str, f64> =
        pairs.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::ShapeMismatch(format!("no truth value for cell `{id}`"))
            })
        })
        .collect()
}

/// Loads prediction points from CSV with columns `cell_id,x,y` plus every
/// training covariate by name (any column order).
pub fn load_prediction_points(
    path: &Path,
    covariate_names: &[String],
) -> Result<PredictionPoints> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col("cell_id")?;
    let x_col = col("x")?;
    let y_col = col("y")?;
    let cov_cols: Vec<usize> =
        covariate_names.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let mut ids = Vec::new();
    let mut points = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let get = |c: usize, what: &str| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.trim().parse().map_err(|_| Error::NonFinite {
                context: format!("{what} (unparseable `{raw}`)"),
                row: row_no,
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { context: what.into(), row: row_no });
            }
            Ok(v)
        };
        ids.push(record.get(id_col).unwrap_or("").trim().to_string());
        points.push(Point::new(get(x_col, "x")?, get(y_col, "y")?));
        rows.push(
            cov_cols
                .iter()
                .map(|&c| get(c, "covariate"))
                .collect::<Result<_>>()?,
        );
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput(format!("no rows in {}", path.display())));
    }
    let covariates =
        DMatrix::from_fn(ids.len(), covariate_names.len(), |i, j| rows[i][j]);
    Ok(PredictionPoints { ids, points, covariates })
}

/// Loads a region specification from CSV with columns `cell_id,region` and
/// an optional `density` column (default weight 1).
pub fn load_regions(path: &Path) -> Result<RegionSpec> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("cell_id").ok_or_else(|| Error::MissingColumn("cell_id".into()))?;
    let region_col = col("region").ok_or_else(|| Error::MissingColumn("region".into()))?;
    let density_col = col("density");
    let mut rows = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let density = match density_col {
            None => 1.0,
            Some(c) => {
                let raw = record.get(c).unwrap_or("").trim();
                raw.parse().map_err(|_| Error::NonFinite {
                    context: format!("density (unparseable `{raw}`)"),
                    row: row_no,
                })?
            }
        };
        rows.push(RegionRow {
            cell_id: record.get(id_col).unwrap_or("").trim().to_string(),
            region: record.get(region_col).unwrap_or("").trim().to_string(),
            density,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("no rows in {}", path.display())));
    }
    Ok(RegionSpec { rows })
}

/// Loads truth values from CSV with columns `cell_id,truth`.
pub fn load_truth(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col("cell_id")?;
    let truth_col = col("truth")?;
    let mut out = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let raw = record.get(truth_col).unwrap_or("").trim();
        let v: f64 = raw.parse().map_err(|_| Error::NonFinite {
            context: format!("truth (unparseable `{raw}`)"),
            row: row_no,
        })?;
        out.push((record.get(id_col).unwrap_or("").trim().to_string(), v));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("no rows in {}", path.display())));
    }
    Ok(out)
}

/// Writes a surface summary as CSV `cell_id,x,y,mean,q025,q975` (the
/// quantile columns hold the α/2 and 1 − α/2 bounds at the summary's level).
pub fn write_surface_csv(path: &Path, s: &SurfaceSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell_id", "x", "y", "mean", "q025", "q975"])?;
    for j in 0..s.ids.len() {
        w.write_record(&[
            s.ids[j].clone(),
            format!("{}", s.points[j].x),
            format!("{}", s.points[j].y),
            format!("{}", s.mean[j]),
            format!("{}", s.lower[j]),
            format!("{}", s.upper[j]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes regional summaries as CSV `region,mean,q025,q975`.
pub fn write_regions_csv(path: &Path, regions: &[RegionSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["region", "mean", "q025", "q975"])?;
    for r in regions {
        w.write_record(&[
            r.region.clone(),
            format!("{}", r.mean),
            format!("{}", r.lower),
            format!("{}", r.upper),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a partial-dependence curve as CSV `value,mean,q025,q975`.
pub fn write_pd_csv(path: &Path, pd: &PdCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["value", "mean", "q025", "q975"])?;
    for i in 0..pd.values.len() {
        w.write_record(&[
            format!("{}", pd.values[i]),
            format!("{}", pd.mean[i]),
            format!("{}", pd.lower[i]),
            format!("{}", pd.upper[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{fit, Draw, ModelKind, RunConfig};
    use crate::tree::{DecisionTree, Forest};

    fn grid_points(side: usize) -> PredictionPoints {
        let mut ids = Vec::new();
        let mut points = Vec::new();
        let mut covs = Vec::new();
        for gy in 0..side {
            for gx in 0..side {
                ids.push(format!("g{}", gy * side + gx));
                let x = (gx as f64 + 0.5) / side as f64;
                let y = (gy as f64 + 0.5) / side as f64;
                points.push(Point::new(x, y));
                covs.push([x, y]);
            }
        }
        let m = DMatrix::from_fn(points.len(), 2, |i, j| covs[i][j]);
        PredictionPoints { ids, points, covariates: m }
    }

    fn smooth_dataset(n: usize, seed: u64) -> SpatialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut locs = Vec::new();
        let mut covs = DMatrix::zeros(n, 2);
        let mut resp = Vec::new();
        for i in 0..n {
            ids.push(format!("c{i}"));
            let p = Point::new(rng.gen::<f64>(), rng.gen::<f64>());
            locs.push(p);
            covs[(i, 0)] = p.x;
            covs[(i, 1)] = p.y;
            resp.push(vec![(2.0 * p.x).sin() + p.y]);
        }
        SpatialDataset::from_parts(ids, locs, covs, resp, vec!["x1".into(), "x2".into()])
            .unwrap()
    }

    #[test]
    fn quantile_interpolates_type7() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 5.0);
        // h = 4 * 0.25 = 1.0 exactly.
        assert_eq!(quantile(&s, 0.25), 2.0);
        // h = 4 * 0.1 = 0.4 -> 1.0 + 0.4 * (2.0 - 1.0).
        assert!((quantile(&s, 0.1) - 1.4).abs() < 1e-14);
    }

    #[test]
    fn cluster_conditional_matches_dense_oracle() {
        // Small problem solved two ways: the W-based closed form against a
        // brute-force dense M = σ_e²I + E K Eᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let g = 3;
        let counts = [2usize, 3, 1, 2, 4];
        let inc = IncidenceMap::from_counts(&counts).unwrap();
        let n_obs = inc.n_obs();
        let train: Vec<Point> =
            (0..n).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let pred: Vec<Point> =
            (0..g).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let params = MaternParams { sigma_m2: 1.3, rho: 0.6, nu: 1.0 };
        let sigma_e2 = 0.7;
        let k_cc = kernel_from_distances(&pairwise_distances(&train, &train), &params);
        let k_gc = kernel_from_distances(&pairwise_distances(&pred, &train), &params);
        let k_gg = kernel_from_distances(&pairwise_distances(&pred, &pred), &params);
        let r: Vec<f64> = (0..n_obs).map(|_| rng.gen::<f64>() - 0.5).collect();

        let (mean, cov) =
            cluster_field_conditional(&r, &inc, &k_cc, &k_gc, &k_gg, sigma_e2).unwrap();

        // Dense oracle.
        let mut e = DMatrix::zeros(n_obs, n);
        for k in 0..n_obs {
            e[(k, inc.cluster_of(k))] = 1.0;
        }
        let m = DMatrix::identity(n_obs, n_obs) * sigma_e2 + &e * &k_cc * e.transpose();
        let m_inv = m.try_inverse().unwrap();
        let rv = DVector::from_column_slice(&r);
        let mean_o = &k_gc * e.transpose() * &m_inv * rv;
        let cov_o = &k_gg - &k_gc * e.transpose() * &m_inv * &e * k_gc.transpose();
        for i in 0..g {
            assert!((mean[i] - mean_o[i]).abs() < 1e-8, "mean[{i}]");
            for j in 0..g {
                assert!((cov[(i, j)] - cov_o[(i, j)]).abs() < 1e-8, "cov[{i},{j}]");
            }
        }
    }

    #[test]
    fn gmrf_prediction_interpolates_data_when_noise_vanishes() {
        // Pure-field model with tiny noise: the predicted surface at the
        // training locations must come back to the observed values.
        let ds = smooth_dataset(40, 3);
        let cfg = RunConfig {
            model: ModelKind::Spde0,
            iterations: 2,
            burnin: 0,
            mesh_edge: Some(0.08),
            mesh_extension: Some(0.3),
            ..RunConfig::default()
        };
        let ctx = crate::sampler::prepare(&ds, &cfg).unwrap();
        let mesh = ctx.mesh.clone().unwrap();
        // Hand-built draws: intercept 0, strong smooth field, tiny noise.
        let draws: Vec<Draw> = (0..60)
            .map(|t| Draw {
                sweep: t,
                forest: None,
                beta: Some(vec![0.0]),
                sigma_e2: 1e-6,
                sigma_m2: Some(1.0),
                rho: Some(0.8),
                loglik: 0.0,
            })
            .collect();
        let pts = PredictionPoints {
            ids: ds.cluster_ids().to_vec(),
            points: ds.locations().to_vec(),
            covariates: ds.covariates().clone(),
        };
        let surface = predict_surface(&ds, &cfg, Some(&mesh), &draws, &pts, 11).unwrap();
        let summary = summarize_surface(&surface, 0.05);
        for i in 0..ds.n_clusters() {
            let y = ds.responses()[i][0];
            assert!(
                (summary.mean[i] - y).abs() < 0.05,
                "cluster {i}: predicted {} vs observed {y}",
                summary.mean[i]
            );
        }
    }

    #[test]
    fn prediction_is_deterministic_in_seed_not_threads() {
        let ds = smooth_dataset(25, 4);
        let cfg = RunConfig {
            model: ModelKind::Bartsimp,
            trees: 3,
            iterations: 30,
            burnin: 15,
            mesh_edge: Some(0.15),
            mesh_extension: Some(0.3),
            ..RunConfig::default()
        };
        let out = fit(&ds, &cfg).unwrap();
        let draws: Vec<Draw> = out.all_draws().cloned().collect();
        let pts = grid_points(6);
        let mesh = out.mesh.as_ref();
        let a = predict_surface(&ds, &cfg, mesh, &draws, &pts, 5).unwrap();
        let b = predict_surface(&ds, &cfg, mesh, &draws, &pts, 5).unwrap();
        assert_eq!(a.values, b.values);
        let c = predict_surface(&ds, &cfg, mesh, &draws, &pts, 6).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn bart_only_surface_is_forest_average() {
        let ds = smooth_dataset(20, 5);
        let cfg = RunConfig {
            model: ModelKind::BartOnly,
            trees: 3,
            iterations: 20,
            burnin: 10,
            ..RunConfig::default()
        };
        let out = fit(&ds, &cfg).unwrap();
        let draws: Vec<Draw> = out.all_draws().cloned().collect();
        let pts = grid_points(4);
        let surface = predict_surface(&ds, &cfg, None, &draws, &pts, 1).unwrap();
        // Direct recomputation: per draw, forest at scaled grid covariates.
        let scaled = ds.scale_external_covariates(&pts.covariates).unwrap();
        let rt = ds.response_transform();
        for (t, d) in draws.iter().enumerate() {
            let f = d.forest.as_ref().unwrap().evaluate(&scaled);
            for j in 0..pts.points.len() {
                let want = rt.to_original(f[j]);
                assert!((surface.values[(t, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_of_constant_surface_is_constant() {
        let ids: Vec<String> = (0..4).map(|i| format!("g{i}")).collect();
        let points: Vec<Point> = (0..4).map(|i| Point::new(i as f64, 0.0)).collect();
        let values = DMatrix::from_element(10, 4, 2.5);
        let surface = SurfaceDraws { ids, points, values };
        let spec = RegionSpec {
            rows: vec![
                RegionRow { cell_id: "g0".into(), region: "A".into(), density: 1.0 },
                RegionRow { cell_id: "g1".into(), region: "A".into(), density: 3.0 },
                RegionRow { cell_id: "g2".into(), region: "B".into(), density: 1.0 },
                RegionRow { cell_id: "g3".into(), region: "B".into(), density: 1.0 },
            ],
        };
        let regions = aggregate_areal(&surface, &spec, 0.05).unwrap();
        assert_eq!(regions.len(), 2);
        for r in &regions {
            assert!((r.mean - 2.5).abs() < 1e-12);
            assert!((r.lower - 2.5).abs() < 1e-12);
            assert!((r.upper - 2.5).abs() < 1e-12);
        }
        assert_eq!(regions[0].region, "A");
        assert_eq!(regions[1].region, "B");
    }

    #[test]
    fn aggregation_weights_by_density() {
        // One draw, cells valued 1, 2, 4 with densities 1, 1, 2:
        // weighted mean = (1 + 2 + 8) / 4 = 2.75.
        let ids: Vec<String> = (0..3).map(|i| format!("g{i}")).collect();
        let points: Vec<Point> = (0..3).map(|i| Point::new(i as f64, 0.0)).collect();
        let values = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]);
        let surface = SurfaceDraws { ids, points, values };
        let spec = RegionSpec {
            rows: vec![
                RegionRow { cell_id: "g0".into(), region: "R".into(), density: 1.0 },
                RegionRow { cell_id: "g1".into(), region: "R".into(), density: 1.0 },
                RegionRow { cell_id: "g2".into(), region: "R".into(), density: 2.0 },
            ],
        };
        let regions = aggregate_areal(&surface, &spec, 0.05).unwrap();
        assert!((regions[0].mean - 2.75).abs() < 1e-12);
    }

    #[test]
    fn aggregation_rejects_zero_density_and_unknown_cells() {
        let surface = SurfaceDraws {
            ids: vec!["g0".into()],
            points: vec![Point::new(0.0, 0.0)],
            values: DMatrix::from_element(2, 1, 1.0),
        };
        let zero = RegionSpec {
            rows: vec![RegionRow { cell_id: "g0".into(), region: "Z".into(), density: 0.0 }],
        };
        assert!(matches!(
            aggregate_areal(&surface, &zero, 0.05),
            Err(Error::ZeroDensityRegion(_))
        ));
        let unknown = RegionSpec {
            rows: vec![RegionRow { cell_id: "nope".into(), region: "Z".into(), density: 1.0 }],
        };
        assert!(aggregate_areal(&surface, &unknown, 0.05).is_err());
    }

    #[test]
    fn partial_dependence_of_single_split_tree_is_a_step() {
        // One tree splitting covariate 0 at its scaled median: the PD curve
        // is exactly the leaf values (shifted to the original scale), because
        // every averaged row routes to the same leaf.
        let ds = smooth_dataset(12, 9);
        let split = ds.scaled_covariates()[(5, 0)];
        let tree = DecisionTree::stump().split_leaf(0, 0, split);
        let forest = Forest { trees: vec![tree], leaf_values: vec![vec![-0.2, 0.3]] };
        let draws = vec![Draw {
            sweep: 0,
            forest: Some(forest),
            beta: None,
            sigma_e2: 1.0,
            sigma_m2: None,
            rho: None,
            loglik: 0.0,
        }];
        let t = ds.covariate_transforms()[0];
        let below = t.mean + t.sd * (split - 1.0);
        let above = t.mean + t.sd * (split + 1.0);
        let pd = partial_dependence(&ds, &draws, 0, &[below, above], 0.05).unwrap();
        let rt = ds.response_transform();
        assert!((pd.mean[0] - rt.to_original(-0.2)).abs() < 1e-12);
        assert!((pd.mean[1] - rt.to_original(0.3)).abs() < 1e-12);
        assert_eq!(pd.covariate, "x1");
    }

    #[test]
    fn metrics_match_hand_computed_values() {
        let summary = SurfaceSummary {
            ids: vec!["a".into()],
            points: vec![Point::new(0.0, 0.0)],
            mean: vec![1.5],
            lower: vec![1.0],
            upper: vec![2.0],
            alpha: 0.05,
        };
        // Truth 0 below the interval (1, 2): interval score
        // 1 + (2 / 0.05) * 1 = 41.
        let m = compute_metrics(&[0.0], &summary).unwrap();
        assert!((m.ais - 41.0).abs() < 1e-12);
        assert!((m.rmse - 1.5).abs() < 1e-12);
        assert!((m.ail - 1.0).abs() < 1e-12);
        assert_eq!(m.acr, 0.0);
        // Truth inside: score equals the length, coverage 1.
        let m2 = compute_metrics(&[1.25], &summary).unwrap();
        assert!((m2.ais - m2.ail).abs() < 1e-12);
        assert_eq!(m2.acr, 1.0);
    }

    #[test]
    fn metrics_ais_equals_ail_under_total_coverage() {
        let n = 20;
        let summary = SurfaceSummary {
            ids: (0..n).map(|i| format!("p{i}")).collect(),
            points: (0..n).map(|i| Point::new(i as f64, 0.0)).collect(),
            mean: vec![0.0; n],
            lower: vec![-1.0; n],
            upper: vec![2.0; n],
            alpha: 0.1,
        };
        let truth: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) - 0.3).collect();
        let m = compute_metrics(&truth, &summary).unwrap();
        assert_eq!(m.acr, 1.0);
        assert!((m.ais - m.ail).abs() < 1e-12);
        assert!((m.ail - 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_io_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        // Prediction points.
        let grid_path = dir.path().join("grid.csv");
        std::fs::write(
            &grid_path,
            "cell_id,x,y,x2,x1\na,0.1,0.2,5.0,1.0\nb,0.3,0.4,6.0,2.0\n",
        )
        .unwrap();
        let pts =
            load_prediction_points(&grid_path, &["x1".to_string(), "x2".to_string()]).unwrap();
        assert_eq!(pts.ids[0], "a");
        // Column order follows the requested names, not the file.
        assert_eq!(pts.covariates[(0, 0)], 1.0);
        assert_eq!(pts.covariates[(0, 1)], 5.0);

        // Regions with and without density.
        let reg_path = dir.path().join("regions.csv");
        std::fs::write(&reg_path, "cell_id,region\na,north\nb,north\n").unwrap();
        let spec = load_regions(&reg_path).unwrap();
        assert_eq!(spec.rows[0].density, 1.0);
        let reg2 = dir.path().join("regions2.csv");
        std::fs::write(&reg2, "cell_id,region,density\na,n,2.5\n").unwrap();
        assert_eq!(load_regions(&reg2).unwrap().rows[0].density, 2.5);

        // Truth.
        let truth_path = dir.path().join("truth.csv");
        std::fs::write(&truth_path, "cell_id,truth\nb,2.0\na,1.0\n").unwrap();
        let pairs = load_truth(&truth_path).unwrap();
        let aligned = align_truth(&pts.ids, &pairs).unwrap();
        assert_eq!(aligned, vec![1.0, 2.0]);

        // Surface out.
        let surf_path = dir.path().join("surface.csv");
        let summary = SurfaceSummary {
            ids: pts.ids.clone(),
            points: pts.points.clone(),
            mean: vec![1.0, 2.0],
            lower: vec![0.5, 1.5],
            upper: vec![1.5, 2.5],
            alpha: 0.05,
        };
        write_surface_csv(&surf_path, &summary).unwrap();
        let text = std::fs::read_to_string(&surf_path).unwrap();
        assert!(text.starts_with("cell_id,x,y,mean,q025,q975\n"));
        assert!(text.contains("a,0.1,0.2,1,0.5,1.5"));
    }

    #[test]
    fn exact_and_sparse_field_predictions_agree_statistically() {
        // The same hand-built pure-field draws pushed through the dense
        // cluster path and the sparse mesh path should give similar surfaces
        // at the training locations.
        let ds = smooth_dataset(30, 12);
        let cfg_exact = RunConfig {
            model: ModelKind::BartsimpExact,
            trees: 1,
            iterations: 2,
            burnin: 0,
            ..RunConfig::default()
        };
        let cfg_sparse = RunConfig {
            model: ModelKind::Bartsimp,
            trees: 1,
            iterations: 2,
            burnin: 0,
            mesh_edge: Some(0.06),
            mesh_extension: Some(0.4),
            ..RunConfig::default()
        };
        let ctx = crate::sampler::prepare(&ds, &cfg_sparse).unwrap();
        let mesh = ctx.mesh.clone().unwrap();
        let stump_forest = Forest {
            trees: vec![DecisionTree::stump()],
            leaf_values: vec![vec![0.0]],
        };
        let draws: Vec<Draw> = (0..80)
            .map(|t| Draw {
                sweep: t,
                forest: Some(stump_forest.clone()),
                beta: None,
                sigma_e2: 0.005,
                sigma_m2: Some(0.3),
                rho: Some(0.9),
                loglik: 0.0,
            })
            .collect();
        let pts = PredictionPoints {
            ids: ds.cluster_ids().to_vec(),
            points: ds.locations().to_vec(),
            covariates: ds.covariates().clone(),
        };
        let exact = summarize_surface(
            &predict_surface(&ds, &cfg_exact, None, &draws, &pts, 3).unwrap(),
            0.05,
        );
        let sparse = summarize_surface(
            &predict_surface(&ds, &cfg_sparse, Some(&mesh), &draws, &pts, 3).unwrap(),
            0.05,
        );
        let rmse: f64 = (0..ds.n_clusters())
            .map(|i| (exact.mean[i] - sparse.mean[i]).powi(2))
            .sum::<f64>()
            / ds.n_clusters() as f64;
        let spread: f64 = exact.mean.iter().map(|v| v * v).sum::<f64>()
            / ds.n_clusters() as f64;
        assert!(
            rmse.sqrt() < 0.35 * spread.sqrt().max(0.2),
            "exact vs sparse mean rmse {} (spread {})",
            rmse.sqrt(),
            spread.sqrt()
        );
    }
}
