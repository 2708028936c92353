//! Regression trees: structure, depth-based prior, and the reversible
//! GROW / PRUNE / CHANGE / SWAP proposal kernel.
//!
//! Covariate matrices here are cluster-level and on the internal scale:
//! one row per cluster, one column per covariate. The routing rule sends
//! `x[var] < value` to the left child and ties to the right child, and every
//! leaf of a valid tree holds at least one cluster.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A node in the arena representation of a [`DecisionTree`]. Child fields
/// are indices into the same arena.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal { var: usize, value: f64, left: usize, right: usize },
    Leaf,
}

/// Binary decision tree stored as an arena with the root at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

/// Hard recursion cap for prior simulation; the depth prior makes trees
/// this deep astronomically unlikely.
const MAX_PRIOR_DEPTH: usize = 40;

impl DecisionTree {
    /// The single-leaf tree.
    pub fn stump() -> Self {
        Self { nodes: vec![TreeNode::Leaf] }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }

    /// Leaf node ids in left-to-right (depth-first) order. This ordering
    /// defines the leaf positions used by [`Self::leaf_assignment`] and by
    /// per-tree leaf-value vectors.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(0, 0, &mut |id, _, node| {
            if matches!(node, TreeNode::Leaf) {
                out.push(id);
            }
        });
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf)).count()
    }

    /// Internal node ids in depth-first order.
    pub fn internal_nodes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(0, 0, &mut |id, _, node| {
            if matches!(node, TreeNode::Internal { .. }) {
                out.push(id);
            }
        });
        out
    }

    /// Internal nodes whose children are both leaves ("no grandchildren").
    pub fn nog_nodes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(0, 0, &mut |id, _, node| {
            if let TreeNode::Internal { left, right, .. } = node {
                if matches!(self.nodes[*left], TreeNode::Leaf)
                    && matches!(self.nodes[*right], TreeNode::Leaf)
                {
                    out.push(id);
                }
            }
        });
        out
    }

    /// (parent, child) pairs where both are internal, in depth-first order.
    pub fn swap_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.walk(0, 0, &mut |id, _, node| {
            if let TreeNode::Internal { left, right, .. } = node {
                for &c in &[*left, *right] {
                    if matches!(self.nodes[c], TreeNode::Internal { .. }) {
                        out.push((id, c));
                    }
                }
            }
        });
        out
    }

    /// Depth of every node (root at 0); unreachable slots keep usize::MAX.
    pub fn depths(&self) -> Vec<usize> {
        let mut d = vec![usize::MAX; self.nodes.len()];
        self.walk(0, 0, &mut |id, depth, _| d[id] = depth);
        d
    }

    pub fn max_depth(&self) -> usize {
        let mut m = 0;
        self.walk(0, 0, &mut |_, depth, _| m = m.max(depth));
        m
    }

    /// Depth-first walk (node, then left subtree, then right subtree).
    fn walk<F: FnMut(usize, usize, &TreeNode)>(&self, id: usize, depth: usize, f: &mut F) {
        let node = &self.nodes[id];
        f(id, depth, node);
        if let TreeNode::Internal { left, right, .. } = node {
            self.walk(*left, depth + 1, f);
            self.walk(*right, depth + 1, f);
        }
    }

    /// Routes a single covariate row (as an accessor by variable index) to a
    /// leaf node id. Ties (`x == value`) go right.
    pub fn route<F: Fn(usize) -> f64>(&self, x: F) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf => return at,
                TreeNode::Internal { var, value, left, right } => {
                    at = if x(*var) < *value { *left } else { *right };
                }
            }
        }
    }

    /// Maps each cluster (row of `covs`) to its leaf position in
    /// [`Self::leaves`] order.
    pub fn leaf_assignment(&self, covs: &DMatrix<f64>) -> Vec<usize> {
        let leaves = self.leaves();
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (p, &id) in leaves.iter().enumerate() {
            pos[id] = p;
        }
        (0..covs.nrows()).map(|i| pos[self.route(|j| covs[(i, j)])]).collect()
    }

    /// Cluster indices routed through every node (each cluster appears at
    /// every node on its root-to-leaf path, in ascending cluster order).
    pub fn subsets_per_node(&self, covs: &DMatrix<f64>) -> Vec<Vec<usize>> {
        let mut subsets = vec![Vec::new(); self.nodes.len()];
        for i in 0..covs.nrows() {
            let mut at = 0;
            loop {
                subsets[at].push(i);
                match &self.nodes[at] {
                    TreeNode::Leaf => break,
                    TreeNode::Internal { var, value, left, right } => {
                        at = if covs[(i, *var)] < *value { *left } else { *right };
                    }
                }
            }
        }
        subsets
    }

    /// New tree with leaf `leaf` split on (`var`, `value`). Panics when the
    /// target is not a leaf. Intended for building reference trees by hand.
    pub fn split_leaf(&self, leaf: usize, var: usize, value: f64) -> Self {
        assert!(
            matches!(self.nodes[leaf], TreeNode::Leaf),
            "split_leaf target {leaf} is not a leaf"
        );
        self.grown(leaf, var, value)
    }

    /// New tree with `leaf` replaced by an internal node over two fresh
    /// leaves.
    fn grown(&self, leaf: usize, var: usize, value: f64) -> Self {
        debug_assert!(matches!(self.nodes[leaf], TreeNode::Leaf));
        let mut nodes = self.nodes.clone();
        let left = nodes.len();
        nodes.push(TreeNode::Leaf);
        let right = nodes.len();
        nodes.push(TreeNode::Leaf);
        nodes[leaf] = TreeNode::Internal { var, value, left, right };
        Self { nodes }
    }

    /// New tree with the subtree at `node` collapsed to a leaf, re-compacted
    /// into depth-first storage order.
    fn pruned(&self, node: usize) -> Self {
        fn copy(src: &DecisionTree, at: usize, cut: usize, out: &mut Vec<TreeNode>) -> usize {
            let idx = out.len();
            match src.nodes[at] {
                TreeNode::Leaf => out.push(TreeNode::Leaf),
                TreeNode::Internal { var, value, left, right } => {
                    if at == cut {
                        out.push(TreeNode::Leaf);
                    } else {
                        out.push(TreeNode::Internal { var, value, left: 0, right: 0 });
                        let l = copy(src, left, cut, out);
                        let r = copy(src, right, cut, out);
                        if let TreeNode::Internal { left, right, .. } = &mut out[idx] {
                            *left = l;
                            *right = r;
                        }
                    }
                }
            }
            idx
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        copy(self, 0, node, &mut nodes);
        Self { nodes }
    }

    /// New tree with the split rule at `node` replaced.
    fn with_rule(&self, node: usize, var: usize, value: f64) -> Self {
        let mut nodes = self.nodes.clone();
        match &mut nodes[node] {
            TreeNode::Internal { var: v, value: c, .. } => {
                *v = var;
                *c = value;
            }
            TreeNode::Leaf => unreachable!("rule change on a leaf"),
        }
        Self { nodes }
    }

    /// New tree with the split rules of two internal nodes exchanged.
    fn with_swapped(&self, a: usize, b: usize) -> Self {
        let rule = |n: &TreeNode| match n {
            TreeNode::Internal { var, value, .. } => (*var, *value),
            TreeNode::Leaf => unreachable!("swap on a leaf"),
        };
        let (va, ca) = rule(&self.nodes[a]);
        let (vb, cb) = rule(&self.nodes[b]);
        self.with_rule(a, vb, cb).with_rule(b, va, ca)
    }
}

/// Global sorted-distinct covariate values, one list per variable. Split
/// values in the prior (and in CHANGE proposals) are drawn uniformly from
/// these lists.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitCandidates {
    values: Vec<Vec<f64>>,
}

impl SplitCandidates {
    pub fn from_matrix(covs: &DMatrix<f64>) -> Self {
        let values = (0..covs.ncols())
            .map(|j| {
                let mut v: Vec<f64> = covs.column(j).iter().copied().collect();
                distinct_sorted(&mut v);
                v
            })
            .collect();
        Self { values }
    }

    pub fn n_vars(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self, var: usize) -> &[f64] {
        &self.values[var]
    }

    pub fn n_values(&self, var: usize) -> usize {
        self.values[var].len()
    }
}

fn distinct_sorted(v: &mut Vec<f64>) {
    v.sort_unstable_by(f64::total_cmp);
    v.dedup();
}

/// Depth prior: a node at depth `d` splits with probability α(1+d)^{−β}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreePriorConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TreePriorConfig {
    fn default() -> Self {
        Self { alpha: 0.95, beta: 2.0 }
    }
}

impl TreePriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "tree prior alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    fn split_prob(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

/// Log prior of a tree: depth factors for every node, plus a uniform draw
/// over variables and over that variable's global distinct values for every
/// split rule.
pub fn tree_log_prior(
    tree: &DecisionTree,
    cfg: &TreePriorConfig,
    cands: &SplitCandidates,
) -> f64 {
    let depths = tree.depths();
    let p = cands.n_vars() as f64;
    let mut lp = 0.0;
    for (id, node) in (0..tree.n_nodes()).map(|i| (i, tree.node(i))) {
        let d = depths[id];
        if d == usize::MAX {
            continue;
        }
        match node {
            TreeNode::Internal { var, .. } => {
                lp += cfg.split_prob(d).ln() - p.ln() - (cands.n_values(*var) as f64).ln();
            }
            TreeNode::Leaf => lp += (1.0 - cfg.split_prob(d)).ln(),
        }
    }
    lp
}

/// Base proposal probabilities for the four tree moves, renormalized at each
/// state over the feasible subset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveProbs {
    #[serde(default = "default_grow")]
    pub grow: f64,
    #[serde(default = "default_prune")]
    pub prune: f64,
    #[serde(default = "default_change")]
    pub change: f64,
    #[serde(default = "default_swap")]
    pub swap: f64,
}

fn default_grow() -> f64 {
    0.25
}
fn default_prune() -> f64 {
    0.25
}
fn default_change() -> f64 {
    0.40
}
fn default_swap() -> f64 {
    0.10
}

impl Default for MoveProbs {
    fn default() -> Self {
        Self { grow: 0.25, prune: 0.25, change: 0.40, swap: 0.10 }
    }
}

impl MoveProbs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.grow, self.prune, self.change, self.swap];
        if all.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidConfig(format!("move probabilities {self:?}")));
        }
        if self.grow <= 0.0 || self.prune <= 0.0 {
            return Err(Error::InvalidConfig(
                "grow and prune probabilities must be positive".into(),
            ));
        }
        Ok(())
    }

    fn get(&self, kind: MoveKind) -> f64 {
        match kind {
            MoveKind::Grow => self.grow,
            MoveKind::Prune => self.prune,
            MoveKind::Change => self.change,
            MoveKind::Swap => self.swap,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
    Swap,
}

pub const ALL_MOVES: [MoveKind; 4] = [MoveKind::Grow, MoveKind::Prune, MoveKind::Change, MoveKind::Swap];

/// A proposed tree together with the log proposal ratio
/// ln q(T | T') − ln q(T' | T). Proposals that create an empty leaf, or
/// whose reverse move has probability zero, carry `valid = false` and must
/// be rejected.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub tree: DecisionTree,
    pub kind: MoveKind,
    pub log_q_ratio: f64,
    pub valid: bool,
}

/// Per-state bookkeeping shared by the move constructors.
struct Analysis {
    subsets: Vec<Vec<usize>>,
    /// (leaf node id, variables with ≥ 2 distinct routed values), leaves in
    /// depth-first order, only entries with at least one splittable variable.
    growable: Vec<(usize, Vec<usize>)>,
    nogs: Vec<usize>,
    internals: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    has_empty_leaf: bool,
}

fn analyze(tree: &DecisionTree, covs: &DMatrix<f64>) -> Analysis {
    let subsets = tree.subsets_per_node(covs);
    let mut growable = Vec::new();
    let mut has_empty_leaf = false;
    for id in tree.leaves() {
        if subsets[id].is_empty() {
            has_empty_leaf = true;
            continue;
        }
        let vars = splittable_vars(covs, &subsets[id]);
        if !vars.is_empty() {
            growable.push((id, vars));
        }
    }
    Analysis {
        subsets,
        growable,
        nogs: tree.nog_nodes(),
        internals: tree.internal_nodes(),
        pairs: tree.swap_pairs(),
        has_empty_leaf,
    }
}

/// Variables whose routed subset has at least two distinct values.
fn splittable_vars(covs: &DMatrix<f64>, subset: &[usize]) -> Vec<usize> {
    (0..covs.ncols())
        .filter(|&j| subset_distinct(covs, subset, j).len() >= 2)
        .collect()
}

/// Sorted distinct values of one variable over a cluster subset.
fn subset_distinct(covs: &DMatrix<f64>, subset: &[usize], var: usize) -> Vec<f64> {
    let mut v: Vec<f64> = subset.iter().map(|&i| covs[(i, var)]).collect();
    distinct_sorted(&mut v);
    v
}

fn feasible(a: &Analysis, kind: MoveKind) -> bool {
    match kind {
        MoveKind::Grow => !a.growable.is_empty(),
        MoveKind::Prune | MoveKind::Change => !a.internals.is_empty(),
        MoveKind::Swap => !a.pairs.is_empty(),
    }
}

fn feasible_mass(a: &Analysis, probs: &MoveProbs) -> f64 {
    ALL_MOVES.iter().filter(|&&k| feasible(a, k)).map(|&k| probs.get(k)).sum()
}

/// ln of the renormalized probability of choosing `kind` at the given state.
fn log_pi(a: &Analysis, probs: &MoveProbs, kind: MoveKind) -> f64 {
    debug_assert!(feasible(a, kind));
    (probs.get(kind) / feasible_mass(a, probs)).ln()
}

/// Draws one move kind (by renormalized base probability over feasible
/// moves) and builds its proposal. Returns None when no move is feasible.
pub fn propose_move<R: Rng + ?Sized>(
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    cands: &SplitCandidates,
    probs: &MoveProbs,
    rng: &mut R,
) -> Option<Proposal> {
    debug_assert_eq!(covs.ncols(), cands.n_vars());
    let a = analyze(tree, covs);
    debug_assert!(!a.has_empty_leaf, "current tree must have non-empty leaves");
    let mass = feasible_mass(&a, probs);
    if mass <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * mass;
    let mut chosen = None;
    for &k in &ALL_MOVES {
        if feasible(&a, k) {
            u -= probs.get(k);
            if u <= 0.0 {
                chosen = Some(k);
                break;
            }
        }
    }
    let kind = chosen.unwrap_or(MoveKind::Swap);
    build_proposal(&a, tree, covs, cands, probs, rng, kind)
}

/// Builds a proposal of one specific kind (None if infeasible). Exposed for
/// diagnostics and tests; [`propose_move`] is the sampling entry point.
pub fn propose_move_of_kind<R: Rng + ?Sized>(
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    cands: &SplitCandidates,
    probs: &MoveProbs,
    rng: &mut R,
    kind: MoveKind,
) -> Option<Proposal> {
    let a = analyze(tree, covs);
    build_proposal(&a, tree, covs, cands, probs, rng, kind)
}

fn build_proposal<R: Rng + ?Sized>(
    a: &Analysis,
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    cands: &SplitCandidates,
    probs: &MoveProbs,
    rng: &mut R,
    kind: MoveKind,
) -> Option<Proposal> {
    if !feasible(a, kind) {
        return None;
    }
    Some(match kind {
        MoveKind::Grow => propose_grow(a, tree, covs, probs, rng),
        MoveKind::Prune => propose_prune(a, tree, covs, probs, rng),
        MoveKind::Change => propose_change(a, tree, covs, cands, probs, rng),
        MoveKind::Swap => propose_swap(a, tree, covs, probs, rng),
    })
}

fn invalid(tree: DecisionTree, kind: MoveKind) -> Proposal {
    Proposal { tree, kind, log_q_ratio: f64::NEG_INFINITY, valid: false }
}

fn propose_grow<R: Rng + ?Sized>(
    a: &Analysis,
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    probs: &MoveProbs,
    rng: &mut R,
) -> Proposal {
    let (leaf, vars) = &a.growable[rng.gen_range(0..a.growable.len())];
    let var = vars[rng.gen_range(0..vars.len())];
    let distinct = subset_distinct(covs, &a.subsets[*leaf], var);
    // Values below exclude the subset minimum so the left child is non-empty;
    // the chosen value itself routes right, so both children hold data.
    let candidates = &distinct[1..];
    let value = candidates[rng.gen_range(0..candidates.len())];
    let t2 = tree.grown(*leaf, var, value);
    let log_q_fwd = log_pi(a, probs, MoveKind::Grow)
        - (a.growable.len() as f64).ln()
        - (vars.len() as f64).ln()
        - (candidates.len() as f64).ln();
    let a2 = analyze(&t2, covs);
    debug_assert!(!a2.has_empty_leaf);
    let log_q_rev = log_pi(&a2, probs, MoveKind::Prune) - (a2.nogs.len() as f64).ln();
    Proposal { tree: t2, kind: MoveKind::Grow, log_q_ratio: log_q_rev - log_q_fwd, valid: true }
}

fn propose_prune<R: Rng + ?Sized>(
    a: &Analysis,
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    probs: &MoveProbs,
    rng: &mut R,
) -> Proposal {
    let node = a.nogs[rng.gen_range(0..a.nogs.len())];
    let (var_p, value_p) = match tree.node(node) {
        TreeNode::Internal { var, value, .. } => (*var, *value),
        TreeNode::Leaf => unreachable!(),
    };
    let t2 = tree.pruned(node);
    let log_q_fwd = log_pi(a, probs, MoveKind::Prune) - (a.nogs.len() as f64).ln();
    let a2 = analyze(&t2, covs);
    // Locate the collapsed leaf in the re-compacted tree by its routed
    // subset; leaf subsets partition the clusters, so the match is unique.
    let target = &a.subsets[node];
    let Some((_, vars2)) = a2.growable.iter().find(|(id, _)| &a2.subsets[*id] == target) else {
        return invalid(t2, MoveKind::Prune);
    };
    if !vars2.contains(&var_p) {
        return invalid(t2, MoveKind::Prune);
    }
    let distinct = subset_distinct(covs, target, var_p);
    let candidates = &distinct[1..];
    // The reverse GROW must be able to draw the pruned rule exactly; a rule
    // installed by CHANGE may carry a value outside this subset.
    if !candidates.contains(&value_p) {
        return invalid(t2, MoveKind::Prune);
    }
    let log_q_rev = log_pi(&a2, probs, MoveKind::Grow)
        - (a2.growable.len() as f64).ln()
        - (vars2.len() as f64).ln()
        - (candidates.len() as f64).ln();
    Proposal { tree: t2, kind: MoveKind::Prune, log_q_ratio: log_q_rev - log_q_fwd, valid: true }
}

fn propose_change<R: Rng + ?Sized>(
    a: &Analysis,
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    cands: &SplitCandidates,
    probs: &MoveProbs,
    rng: &mut R,
) -> Proposal {
    let node = a.internals[rng.gen_range(0..a.internals.len())];
    let var_old = match tree.node(node) {
        TreeNode::Internal { var, .. } => *var,
        TreeNode::Leaf => unreachable!(),
    };
    let var_new = rng.gen_range(0..cands.n_vars());
    let values = cands.values(var_new);
    let value_new = values[rng.gen_range(0..values.len())];
    let t2 = tree.with_rule(node, var_new, value_new);
    let a2 = analyze(&t2, covs);
    if a2.has_empty_leaf {
        return invalid(t2, MoveKind::Change);
    }
    // Shared factors (node choice, variable choice) cancel; the value draw
    // uses state-independent global lists, so both directions are positive.
    let log_q_ratio = log_pi(&a2, probs, MoveKind::Change) - log_pi(a, probs, MoveKind::Change)
        + (cands.n_values(var_new) as f64).ln()
        - (cands.n_values(var_old) as f64).ln();
    Proposal { tree: t2, kind: MoveKind::Change, log_q_ratio, valid: true }
}

fn propose_swap<R: Rng + ?Sized>(
    a: &Analysis,
    tree: &DecisionTree,
    covs: &DMatrix<f64>,
    probs: &MoveProbs,
    rng: &mut R,
) -> Proposal {
    let (parent, child) = a.pairs[rng.gen_range(0..a.pairs.len())];
    let t2 = tree.with_swapped(parent, child);
    let a2 = analyze(&t2, covs);
    if a2.has_empty_leaf {
        return invalid(t2, MoveKind::Swap);
    }
    debug_assert_eq!(a.pairs.len(), a2.pairs.len());
    let log_q_ratio = log_pi(&a2, probs, MoveKind::Swap) - log_pi(a, probs, MoveKind::Swap)
        + (a.pairs.len() as f64).ln()
        - (a2.pairs.len() as f64).ln();
    Proposal { tree: t2, kind: MoveKind::Swap, log_q_ratio, valid: true }
}

/// Samples a tree from the prior restricted to trees whose every leaf holds
/// at least one cluster, by forward simulation with rejection.
pub fn sample_tree_from_prior<R: Rng + ?Sized>(
    cands: &SplitCandidates,
    covs: &DMatrix<f64>,
    cfg: &TreePriorConfig,
    rng: &mut R,
) -> Result<DecisionTree> {
    fn gen<R: Rng + ?Sized>(
        depth: usize,
        cfg: &TreePriorConfig,
        cands: &SplitCandidates,
        rng: &mut R,
        out: &mut Vec<TreeNode>,
    ) -> usize {
        let idx = out.len();
        if depth < MAX_PRIOR_DEPTH && rng.gen::<f64>() < cfg.split_prob(depth) {
            let var = rng.gen_range(0..cands.n_vars());
            let values = cands.values(var);
            let value = values[rng.gen_range(0..values.len())];
            out.push(TreeNode::Internal { var, value, left: 0, right: 0 });
            let l = gen(depth + 1, cfg, cands, rng, out);
            let r = gen(depth + 1, cfg, cands, rng, out);
            if let TreeNode::Internal { left, right, .. } = &mut out[idx] {
                *left = l;
                *right = r;
            }
        } else {
            out.push(TreeNode::Leaf);
        }
        idx
    }

    for _ in 0..100_000 {
        let mut nodes = Vec::new();
        gen(0, cfg, cands, rng, &mut nodes);
        let tree = DecisionTree { nodes };
        let mut seen = vec![false; tree.n_leaves()];
        for p in tree.leaf_assignment(covs) {
            seen[p] = true;
        }
        if seen.iter().all(|&s| s) {
            return Ok(tree);
        }
    }
    Err(Error::InvalidConfig(
        "could not sample a prior tree with non-empty leaves".into(),
    ))
}

/// A sum-of-trees function: trees plus per-tree leaf values (indexed in
/// [`DecisionTree::leaves`] order), everything on the internal scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub leaf_values: Vec<Vec<f64>>,
}

impl Forest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Sum of per-tree leaf values at each row of `covs`.
    pub fn evaluate(&self, covs: &DMatrix<f64>) -> Vec<f64> {
        let mut out = vec![0.0; covs.nrows()];
        for (tree, values) in self.trees.iter().zip(&self.leaf_values) {
            for (i, p) in tree.leaf_assignment(covs).into_iter().enumerate() {
                out[i] += values[p];
            }
        }
        out
    }
}
