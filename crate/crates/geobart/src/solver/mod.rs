//! Sparse factorization and marginal-likelihood machinery.
//!
//! [`factor`] provides the simplicial sparse Cholesky used on GMRF precision
//! matrices; [`marginal`] layers the Woodbury/determinant-lemma identities on
//! top so the latent field and design coefficients can be integrated out of
//! every Metropolis acceptance ratio without forming dense N x N matrices.
mod factor;
mod marginal;

pub use factor::{factor_spd, FillOrdering, SparseFactor};
pub use marginal::{
    cluster_weight_matrix, conditional_field_draw, dense_chol_jitter, leaf_posterior,
    lowrank_gaussian_logpdf, woodbury_inverse_apply, MarginalOp, TallDesign,
};
