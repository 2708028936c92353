//! Randomized invariant checks. Each property states a structural contract
//! of the public API and hammers it with generated instances; shrinking
//! reports the smallest violating case.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use geobart::data::{IncidenceMap, Point, SpatialDataset};
use geobart::gp::{calibrate_sigma_e_prior, exact_marginal_loglik, MaternParams};
use geobart::sampler::{fit, ModelKind, RunConfig};
use geobart::solver::{factor_spd, FillOrdering, TallDesign};
use geobart::sparse::SparseMatrix;
use geobart::spde::{build_mesh, fem_matrices, projection_matrix, MeshConfig};
use geobart::tree::{
    propose_move, sample_tree_from_prior, DecisionTree, MoveProbs, SplitCandidates, TreeNode,
    TreePriorConfig,
};

/// Random symmetric positive definite sparse matrix: banded off-diagonals
/// with a dominant diagonal.
fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SparseMatrix {
    let mut tri = Vec::new();
    let mut row_abs = vec![0.0f64; n];
    for i in 0..n {
        for j in (i + 1)..(i + 3).min(n) {
            if rng.gen::<f64>() < 0.7 {
                let v: f64 = rng.gen_range(-0.5..0.5);
                tri.push((i, j, v));
                tri.push((j, i, v));
                row_abs[i] += v.abs();
                row_abs[j] += v.abs();
            }
        }
    }
    for (i, ra) in row_abs.iter().enumerate() {
        tri.push((i, i, ra + rng.gen_range(0.5..1.5)));
    }
    SparseMatrix::from_triplets(n, n, &tri).expect("triplet shape")
}

/// Walks the tree, asserting child depths and recording leaf ids in order.
fn walk_depths(tree: &DecisionTree, at: usize, depth: usize, leaves: &mut Vec<usize>) {
    match tree.node(at) {
        TreeNode::Leaf => leaves.push(at),
        TreeNode::Internal { left, right, .. } => {
            walk_depths(tree, *left, depth + 1, leaves);
            walk_depths(tree, *right, depth + 1, leaves);
        }
    }
}

proptest! {
    /// Reordering clusters (with their observations, locations, and design
    /// rows) leaves the exact marginal log likelihood unchanged.
    #[test]
    fn exact_marginal_is_exchangeable(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_clusters = rng.gen_range(2..=6);
        let counts: Vec<usize> = (0..n_clusters).map(|_| rng.gen_range(1..=3)).collect();
        let incidence = IncidenceMap::from_counts(&counts).unwrap();
        let n_obs = incidence.n_obs();
        let locations: Vec<Point> =
            (0..n_clusters).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let params = MaternParams {
            sigma_m2: rng.gen_range(0.2..1.2),
            rho: rng.gen_range(0.3..1.2),
            nu: 1.0,
        };
        let sigma_e2 = rng.gen_range(0.3..2.0);
        let sigma_mu2 = rng.gen_range(0.05..0.8);
        let b = rng.gen_range(1..=3usize);
        let leaf_of_cluster: Vec<usize> =
            (0..n_clusters).map(|_| rng.gen_range(0..b)).collect();
        let r: Vec<f64> = (0..n_obs).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let leaf_of_obs: Vec<usize> =
            (0..n_obs).map(|k| leaf_of_cluster[incidence.cluster_of(k)]).collect();
        let design = TallDesign::Indicator { leaf_of_obs, n_leaves: b };
        let base = exact_marginal_loglik(
            &r, Some(&design), sigma_mu2, sigma_e2, &locations, &params, &incidence,
        ).unwrap();

        // Random permutation of cluster order; observations move in blocks.
        let mut perm: Vec<usize> = (0..n_clusters).collect();
        for i in (1..n_clusters).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let counts_p: Vec<usize> = perm.iter().map(|&c| counts[c]).collect();
        let incidence_p = IncidenceMap::from_counts(&counts_p).unwrap();
        let locations_p: Vec<Point> = perm.iter().map(|&c| locations[c]).collect();
        let mut starts = vec![0usize; n_clusters];
        for c in 1..n_clusters {
            starts[c] = starts[c - 1] + counts[c - 1];
        }
        let mut r_p = Vec::with_capacity(n_obs);
        let mut leaf_p = Vec::with_capacity(n_obs);
        for &c in &perm {
            for k in starts[c]..starts[c] + counts[c] {
                r_p.push(r[k]);
                leaf_p.push(leaf_of_cluster[c]);
            }
        }
        let design_p = TallDesign::Indicator { leaf_of_obs: leaf_p, n_leaves: b };
        let permuted = exact_marginal_loglik(
            &r_p, Some(&design_p), sigma_mu2, sigma_e2, &locations_p, &params, &incidence_p,
        ).unwrap();
        prop_assert!(
            (base - permuted).abs() <= 1e-9 * base.abs().max(1.0),
            "loglik changed under permutation: {base} vs {permuted}"
        );
    }

    /// Every observation maps to exactly one cluster, and incidence
    /// expansion of a constant vector is that constant everywhere.
    #[test]
    fn incidence_expansion_is_faithful(
        counts in prop::collection::vec(1usize..5, 1..8),
        c in -10.0f64..10.0,
    ) {
        let incidence = IncidenceMap::from_counts(&counts).unwrap();
        prop_assert_eq!(incidence.n_obs(), counts.iter().sum::<usize>());
        let mut seen = vec![0usize; counts.len()];
        for k in 0..incidence.n_obs() {
            seen[incidence.cluster_of(k)] += 1;
        }
        prop_assert_eq!(&seen, &counts);
        let expanded = incidence.expand(&vec![c; counts.len()]);
        prop_assert!(expanded.iter().all(|&v| v == c));
    }

    /// Trees drawn from the prior satisfy the structural contract: child
    /// depth is parent depth plus one, split values come from the observed
    /// distinct values of the split variable, and leaf assignment routes
    /// every cluster to exactly one non-empty leaf. The contract survives
    /// valid Metropolis proposals.
    #[test]
    fn tree_structure_invariants(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..=12);
        let p = rng.gen_range(1..=3);
        // Small integer levels force duplicate values per variable.
        let covs = DMatrix::from_fn(n, p, |_, _| rng.gen_range(0..4) as f64);
        let cands = SplitCandidates::from_matrix(&covs);
        let prior = TreePriorConfig::default();
        let mut tree = sample_tree_from_prior(&cands, &covs, &prior, &mut rng).unwrap();
        let probs = MoveProbs::default();
        for step in 0..12 {
            if step > 0 {
                if let Some(prop) = propose_move(&tree, &covs, &cands, &probs, &mut rng) {
                    if prop.valid {
                        tree = prop.tree;
                    }
                }
            }
            let depths = tree.depths();
            let mut leaves = Vec::new();
            walk_depths(&tree, 0, 0, &mut leaves);
            for at in 0..tree.n_nodes() {
                if let TreeNode::Internal { var, value, left, right } = tree.node(at) {
                    prop_assert_eq!(depths[*left], depths[at] + 1);
                    prop_assert_eq!(depths[*right], depths[at] + 1);
                    prop_assert!(
                        cands.values(*var).contains(value),
                        "split value {} not an observed value of variable {}", value, var
                    );
                }
            }
            let asg = tree.leaf_assignment(&covs);
            prop_assert_eq!(asg.len(), n);
            let mut hit = vec![0usize; tree.n_leaves()];
            for &t in &asg {
                prop_assert!(t < tree.n_leaves());
                hit[t] += 1;
            }
            prop_assert!(
                hit.iter().all(|&h| h > 0),
                "empty leaf in {:?} after step {}", hit, step
            );
            prop_assert_eq!(leaves.len(), tree.n_leaves());
        }
    }

    /// The sparse Cholesky agrees with a dense factorization: solutions and
    /// log determinants match to 1e-8 relative on random SPD systems.
    #[test]
    fn sparse_factor_matches_dense(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=30);
        let q = random_spd(n, &mut rng);
        let factor = factor_spd(&q, FillOrdering::MinimumDegree).unwrap();
        let dense = q.to_dense();
        let chol = nalgebra::Cholesky::new(dense).expect("dense SPD");
        let logdet_dense = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        prop_assert!(
            (factor.logdet() - logdet_dense).abs() <= 1e-8 * logdet_dense.abs().max(1.0)
        );
        let rhs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = DVector::from_vec(factor.solve(&rhs));
        let want = chol.solve(&DVector::from_column_slice(&rhs));
        prop_assert!((got - &want).norm() <= 1e-8 * want.norm().max(1.0));
    }

    /// Finite-element matrices on a random mesh: the lumped mass matrix is
    /// a positive diagonal, the stiffness matrix is symmetric with zero row
    /// sums, and barycentric projection weights sum to one at every data
    /// location.
    #[test]
    fn fem_matrices_structural(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_pts = rng.gen_range(3..=15);
        let pts: Vec<Point> = (0..n_pts).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let cfg = MeshConfig {
            edge: rng.gen_range(0.15..0.5),
            extension: rng.gen_range(0.3..1.0),
        };
        let mesh = build_mesh(&pts, &cfg).unwrap();
        let (c, g) = fem_matrices(&mesh).unwrap();
        for i in 0..mesh.n_vertices() {
            let (cols, vals) = c.row(i);
            prop_assert_eq!(cols, &[i][..]);
            prop_assert!(vals[0] > 0.0);
            let (gcols, gvals) = g.row(i);
            let row_sum: f64 = gvals.iter().sum();
            prop_assert!(row_sum.abs() <= 1e-10, "stiffness row {} sums to {}", i, row_sum);
            for (&j, &v) in gcols.iter().zip(gvals) {
                let (jc, jv) = g.row(j);
                let back = jc.iter().position(|&k| k == i).map(|p| jv[p]);
                prop_assert_eq!(back, Some(v));
            }
        }
        let proj = projection_matrix(&mesh, &pts).unwrap();
        for k in 0..n_pts {
            let (_, w) = proj.row(k);
            let s: f64 = w.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-10, "projection row {} sums to {}", k, s);
        }
    }

    /// The calibrated noise prior places exactly probability `q` below the
    /// residual-variance estimate.
    #[test]
    fn noise_prior_quantile_calibration(
        sigma_r2 in 0.1f64..5.0,
        df in 1.0f64..10.0,
        q in 0.05f64..0.95,
    ) {
        let prior = calibrate_sigma_e_prior(sigma_r2, df, q).unwrap();
        // sigma_e^2 = df * scale / X with X chi-squared(df), so
        // P(sigma_e^2 <= s) = 1 - F(df * scale / s).
        let chi2 = ChiSquared::new(df).unwrap();
        let p = 1.0 - chi2.cdf(df * prior.scale / sigma_r2);
        prop_assert!((p - q).abs() <= 1e-9, "calibrated quantile {} target {}", p, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The sampler records exactly (iterations - burnin) / thin draws per
    /// chain when thin divides the post-burn-in span.
    #[test]
    fn draw_count_matches_schedule(
        seed in 0u64..1000,
        kept in 2usize..8,
        thin in 1usize..4,
        burnin in 2usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6usize;
        let covs = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(0.0..1.0));
        let dataset = SpatialDataset::from_parts(
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..n).map(|_| Point::new(rng.gen(), rng.gen())).collect(),
            covs,
            (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
            vec!["x1".into(), "x2".into()],
        ).unwrap();
        let cfg = RunConfig {
            model: ModelKind::BartOnly,
            trees: 2,
            iterations: burnin + kept * thin,
            burnin,
            thin,
            seed,
            ..RunConfig::default()
        };
        let fitted = fit(&dataset, &cfg).unwrap();
        prop_assert_eq!(fitted.all_draws().count(), kept);
    }
}
