//! Clustered spatial dataset: cluster locations, cluster-level covariates,
//! and repeated observations per cluster.
//!
//! On load, covariates are standardized (zero mean, unit standard deviation
//! over clusters) and the response is min-max scaled to [-0.5, 0.5]; the
//! sampler works entirely on the scaled quantities while the original values
//! are retained for output and round-tripping. Both affine transforms are
//! stored on the dataset so predictions and variance parameters can be mapped
//! back to the original scale.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A planar coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Affine map taking the original response to the internal [-0.5, 0.5] scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTransform {
    /// Minimum of the observed response.
    pub offset: f64,
    /// Observed range (max - min), or 1 when the response is constant.
    pub scale: f64,
}

impl ResponseTransform {
    pub fn to_internal(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale - 0.5
    }

    pub fn to_original(&self, z: f64) -> f64 {
        (z + 0.5) * self.scale + self.offset
    }

    /// Maps a variance on the internal scale back to the original scale.
    pub fn variance_to_original(&self, v: f64) -> f64 {
        v * self.scale * self.scale
    }
}

/// Affine map standardizing one covariate over clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateTransform {
    pub mean: f64,
    /// Standard deviation over clusters, or 1 when constant.
    pub sd: f64,
}

impl CovariateTransform {
    pub fn to_internal(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }
}

/// Observation-to-cluster incidence: which cluster each of the N observations
/// belongs to, in cluster-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceMap {
    cluster_of_obs: Vec<usize>,
    counts: Vec<usize>,
}

impl IncidenceMap {
    /// Builds the map from per-cluster observation counts.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::EmptyInput("cluster with zero observations".into()));
        }
        let mut cluster_of_obs = Vec::with_capacity(counts.iter().sum());
        for (i, &c) in counts.iter().enumerate() {
            cluster_of_obs.extend(std::iter::repeat(i).take(c));
        }
        Ok(Self { cluster_of_obs, counts: counts.to_vec() })
    }

    pub fn n_obs(&self) -> usize {
        self.cluster_of_obs.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Cluster index of observation `k`.
    pub fn cluster_of(&self, k: usize) -> usize {
        self.cluster_of_obs[k]
    }

    pub fn cluster_of_obs(&self) -> &[usize] {
        &self.cluster_of_obs
    }

    /// Lifts a cluster-level vector to observation level by repetition.
    pub fn expand(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_clusters(), "expand dimension mismatch");
        self.cluster_of_obs.iter().map(|&i| v[i]).collect()
    }

    /// Sums an observation-level vector into cluster totals (adjoint of
    /// [`expand`](Self::expand)).
    pub fn reduce_sum(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_obs(), "reduce dimension mismatch");
        let mut out = vec![0.0; self.n_clusters()];
        for (k, &i) in self.cluster_of_obs.iter().enumerate() {
            out[i] += v[k];
        }
        out
    }
}

/// A clustered spatial dataset, holding both original and internally scaled
/// views of the covariates and response.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    cluster_ids: Vec<String>,
    locations: Vec<Point>,
    covariates: DMatrix<f64>,
    responses: Vec<Vec<f64>>,
    covariate_names: Vec<String>,
    scaled_covariates: DMatrix<f64>,
    scaled_responses: Vec<f64>,
    response_transform: ResponseTransform,
    covariate_transforms: Vec<CovariateTransform>,
    incidence: IncidenceMap,
}

impl SpatialDataset {
    /// Assembles a dataset from already-grouped parts and derives the scaled
    /// views. `covariates` is n_clusters x n_covariates on the original scale.
    pub fn from_parts(
        cluster_ids: Vec<String>,
        locations: Vec<Point>,
        covariates: DMatrix<f64>,
        responses: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = cluster_ids.len();
        if n == 0 {
            return Err(Error::EmptyInput("dataset has no clusters".into()));
        }
        if locations.len() != n || covariates.nrows() != n || responses.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "clusters {n}, locations {}, covariate rows {}, response groups {}",
                locations.len(),
                covariates.nrows(),
                responses.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        for (i, loc) in locations.iter().enumerate() {
            if !loc.x.is_finite() || !loc.y.is_finite() {
                return Err(Error::NonFinite { context: "location".into(), row: i });
            }
        }
        for (i, v) in covariates.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "covariate".into(), row: i });
            }
        }
        for (i, group) in responses.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::EmptyInput(format!(
                    "cluster `{}` has no observations",
                    cluster_ids[i]
                )));
            }
            if group.iter().any(|y| !y.is_finite()) {
                return Err(Error::NonFinite { context: "response".into(), row: i });
            }
        }
        let counts: Vec<usize> = responses.iter().map(|g| g.len()).collect();
        let incidence = IncidenceMap::from_counts(&counts)?;

        // Covariate standardization over clusters.
        let p = covariates.ncols();
        let mut covariate_transforms = Vec::with_capacity(p);
        let mut scaled_covariates = covariates.clone();
        for j in 0..p {
            let col = covariates.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            let t = CovariateTransform { mean, sd };
            for i in 0..n {
                scaled_covariates[(i, j)] = t.to_internal(covariates[(i, j)]);
            }
            covariate_transforms.push(t);
        }

        // Response min-max scaling to [-0.5, 0.5].
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for group in &responses {
            for &y in group {
                lo = lo.min(y);
                hi = hi.max(y);
            }
        }
        let scale = if hi > lo { hi - lo } else { 1.0 };
        let response_transform = ResponseTransform { offset: lo, scale };
        let scaled_responses: Vec<f64> = responses
            .iter()
            .flat_map(|g| g.iter().map(|&y| response_transform.to_internal(y)))
            .collect();

        Ok(Self {
            cluster_ids,
            locations,
            covariates,
            responses,
            covariate_names,
            scaled_covariates,
            scaled_responses,
            response_transform,
            covariate_transforms,
            incidence,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.incidence.n_obs()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.cluster_ids
    }

    pub fn locations(&self) -> &[Point] {
        &self.locations
    }

    /// Original-scale cluster covariates (n x P).
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    /// Original-scale responses grouped by cluster.
    pub fn responses(&self) -> &[Vec<f64>] {
        &self.responses
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Standardized cluster covariates (n x P).
    pub fn scaled_covariates(&self) -> &DMatrix<f64> {
        &self.scaled_covariates
    }

    /// Min-max scaled responses, flattened in cluster-major order (length N).
    pub fn scaled_responses(&self) -> &[f64] {
        &self.scaled_responses
    }

    pub fn response_transform(&self) -> &ResponseTransform {
        &self.response_transform
    }

    pub fn covariate_transforms(&self) -> &[CovariateTransform] {
        &self.covariate_transforms
    }

    pub fn incidence(&self) -> &IncidenceMap {
        &self.incidence
    }

    /// Applies the stored covariate transforms to an external matrix with the
    /// same column layout (e.g. prediction-grid covariates).
    pub fn scale_external_covariates(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if m.ncols() != self.n_covariates() {
            return Err(Error::ShapeMismatch(format!(
                "external covariates have {} columns, dataset has {}",
                m.ncols(),
                self.n_covariates()
            )));
        }
        let mut out = m.clone();
        for j in 0..m.ncols() {
            let t = self.covariate_transforms[j];
            for i in 0..m.nrows() {
                out[(i, j)] = t.to_internal(m[(i, j)]);
            }
        }
        Ok(out)
    }
}

/// Maps CSV column names onto dataset roles; read from a JSON manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    #[serde(default = "default_cluster_id")]
    pub cluster_id: String,
    #[serde(default = "default_x")]
    pub x: String,
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default = "default_response")]
    pub response: String,
    /// Covariate columns, in order. When absent, every remaining column is a
    /// covariate in header order.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

fn default_cluster_id() -> String {
    "cluster_id".into()
}
fn default_x() -> String {
    "x".into()
}
fn default_y() -> String {
    "y".into()
}
fn default_response() -> String {
    "response".into()
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            cluster_id: default_cluster_id(),
            x: default_x(),
            y: default_y(),
            response: default_response(),
            covariates: None,
        }
    }
}

impl ColumnMapping {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_field(raw: &str, context: &str, row: usize) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::NonFinite {
        context: format!("{context} (unparseable `{raw}`)"),
        row,
    })?;
    if !v.is_finite() {
        return Err(Error::NonFinite { context: context.into(), row });
    }
    Ok(v)
}

/// Loads a dataset from CSV with columns
/// `cluster_id,x,y,response,cov_1,...,cov_P` (or as remapped by `mapping`).
/// Rows of one cluster may appear anywhere in the file; coordinates and
/// covariates must agree across a cluster's rows.
pub fn load_dataset(path: &Path, mapping: Option<&ColumnMapping>) -> Result<SpatialDataset> {
    let default_mapping = ColumnMapping::default();
    let mapping = mapping.unwrap_or(&default_mapping);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col_index(&mapping.cluster_id)?;
    let x_col = col_index(&mapping.x)?;
    let y_col = col_index(&mapping.y)?;
    let resp_col = col_index(&mapping.response)?;
    let covariate_names: Vec<String> = match &mapping.covariates {
        Some(names) => {
            for n in names {
                col_index(n)?;
            }
            names.clone()
        }
        None => {
            let fixed = [id_col, x_col, y_col, resp_col];
            headers
                .iter()
                .enumerate()
                .filter(|(i, _)| !fixed.contains(i))
                .map(|(_, h)| h.clone())
                .collect()
        }
    };
    let cov_cols: Vec<usize> =
        covariate_names.iter().map(|n| col_index(n)).collect::<Result<_>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut locations: Vec<Point> = Vec::new();
    let mut cov_rows: Vec<Vec<f64>> = Vec::new();
    let mut responses: Vec<Vec<f64>> = Vec::new();

    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let id = record
            .get(id_col)
            .ok_or_else(|| Error::MissingColumn(mapping.cluster_id.clone()))?
            .trim()
            .to_string();
        let x = parse_field(record.get(x_col).unwrap_or(""), "x", row_no)?;
        let y = parse_field(record.get(y_col).unwrap_or(""), "y", row_no)?;
        let resp = parse_field(record.get(resp_col).unwrap_or(""), "response", row_no)?;
        let covs: Vec<f64> = cov_cols
            .iter()
            .map(|&c| parse_field(record.get(c).unwrap_or(""), "covariate", row_no))
            .collect::<Result<_>>()?;
        match index.get(&id) {
            None => {
                index.insert(id.clone(), order.len());
                order.push(id);
                locations.push(Point::new(x, y));
                cov_rows.push(covs);
                responses.push(vec![resp]);
            }
            Some(&i) => {
                if locations[i].x != x || locations[i].y != y {
                    return Err(Error::InconsistentCluster {
                        cluster: order[i].clone(),
                        what: "coordinates".into(),
                    });
                }
                if cov_rows[i] != covs {
                    return Err(Error::InconsistentCluster {
                        cluster: order[i].clone(),
                        what: "covariates".into(),
                    });
                }
                responses[i].push(resp);
            }
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyInput(format!("no data rows in {}", path.display())));
    }
    let n = order.len();
    let p = covariate_names.len();
    let covariates = DMatrix::from_fn(n, p, |i, j| cov_rows[i][j]);
    SpatialDataset::from_parts(order, locations, covariates, responses, covariate_names)
}

/// Writes a dataset back to CSV in the canonical column order. Numeric fields
/// use shortest round-trip formatting, so `load(save(d))` reproduces `d`.
pub fn save_dataset(dataset: &SpatialDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "cluster_id".to_string(),
        "x".to_string(),
        "y".to_string(),
        "response".to_string(),
    ];
    header.extend(dataset.covariate_names().iter().cloned());
    writer.write_record(&header)?;
    for i in 0..dataset.n_clusters() {
        let loc = dataset.locations()[i];
        for y in &dataset.responses()[i] {
            let mut rec = vec![
                dataset.cluster_ids()[i].clone(),
                format!("{}", loc.x),
                format!("{}", loc.y),
                format!("{y}"),
            ];
            for j in 0..dataset.n_covariates() {
                rec.push(format!("{}", dataset.covariates()[(i, j)]));
            }
            writer.write_record(&rec)?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> SpatialDataset {
        SpatialDataset::from_parts(
            vec!["a".into(), "b".into(), "c".into()],
            vec![Point::new(0.1, 0.2), Point::new(0.5, 0.9), Point::new(0.8, 0.3)],
            DMatrix::from_row_slice(3, 2, &[0.0, 10.0, 1.0, 20.0, 2.0, 30.0]),
            vec![vec![1.0, 2.0], vec![3.0], vec![4.0, 5.0, 6.0]],
            vec!["cov_1".into(), "cov_2".into()],
        )
        .unwrap()
    }

    #[test]
    fn expansion_repeats_by_count() {
        let inc = IncidenceMap::from_counts(&[2, 3]).unwrap();
        assert_eq!(inc.expand(&[7.0, -1.0]), vec![7.0, 7.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn expansion_sum_identity() {
        let inc = IncidenceMap::from_counts(&[3, 1, 4]).unwrap();
        let v = [0.5, -2.0, 1.25];
        let total: f64 = inc.expand(&v).iter().sum();
        let direct: f64 = inc.counts().iter().zip(&v).map(|(&c, &x)| c as f64 * x).sum();
        assert!((total - direct).abs() < 1e-12);
    }

    #[test]
    fn reduce_is_adjoint_of_expand() {
        let inc = IncidenceMap::from_counts(&[2, 3]).unwrap();
        let u = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(inc.reduce_sum(&u), vec![3.0, 12.0]);
    }

    #[test]
    fn response_scaled_to_unit_interval() {
        let d = toy_dataset();
        let scaled = d.scaled_responses();
        let lo = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo + 0.5).abs() < 1e-15);
        assert!((hi - 0.5).abs() < 1e-15);
        // Round-trip through the transform.
        let t = d.response_transform();
        assert!((t.to_original(t.to_internal(3.7)) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn covariates_standardized_over_clusters() {
        let d = toy_dataset();
        for j in 0..2 {
            let col = d.scaled_covariates().column(j);
            let mean: f64 = col.sum() / 3.0;
            let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_covariate_maps_to_zero() {
        let d = SpatialDataset::from_parts(
            vec!["a".into(), "b".into()],
            vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0)],
            DMatrix::from_row_slice(2, 1, &[5.0, 5.0]),
            vec![vec![1.0], vec![2.0]],
            vec!["cov_1".into()],
        )
        .unwrap();
        assert_eq!(d.scaled_covariates()[(0, 0)], 0.0);
        assert_eq!(d.scaled_covariates()[(1, 0)], 0.0);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let d = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        save_dataset(&d, &path).unwrap();
        let d2 = load_dataset(&path, None).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "cluster_id,x,response\na,0.0,1.0\n").unwrap();
        match load_dataset(&path, None) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "y"),
            other => panic!("expected missing column, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "cluster_id,x,y,response,cov_1\na,0.0,0.0,NaN,1.0\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&path, None), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn inconsistent_cluster_coordinates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "cluster_id,x,y,response,cov_1\na,0.0,0.0,1.0,1.0\na,0.5,0.0,2.0,1.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path, None),
            Err(Error::InconsistentCluster { .. })
        ));
    }

    #[test]
    fn inconsistent_cluster_covariates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "cluster_id,x,y,response,cov_1\na,0.0,0.0,1.0,1.0\na,0.0,0.0,2.0,9.0\n",
        )
        .unwrap();
        assert!(matches!(
            load_dataset(&path, None),
            Err(Error::InconsistentCluster { .. })
        ));
    }

    #[test]
    fn column_mapping_remaps_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapped.csv");
        std::fs::write(
            &path,
            "cid,lon,lat,whz,temp\nc1,0.0,0.5,1.0,3.0\nc2,1.0,0.25,2.0,4.0\n",
        )
        .unwrap();
        let mapping = ColumnMapping {
            cluster_id: "cid".into(),
            x: "lon".into(),
            y: "lat".into(),
            response: "whz".into(),
            covariates: Some(vec!["temp".into()]),
        };
        let d = load_dataset(&path, Some(&mapping)).unwrap();
        assert_eq!(d.n_clusters(), 2);
        assert_eq!(d.covariate_names(), &["temp".to_string()]);
        assert_eq!(d.covariates()[(1, 0)], 4.0);
    }
}
