//! Random forest over code vectors with Gini splitting.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sub_seed;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Tree depth cap; the production range is 16..=64. Tests may relax the
    /// range check via `allow_shallow`.
    pub max_depth: usize,
    /// Minimum node size to split, as a fraction of the per-class sample
    /// count m (smallest class), per the 0.02*m rule.
    pub min_split_fraction: f64,
    /// Overrides the computed minimum split count when set.
    pub min_split_override: Option<usize>,
    /// Features sampled per split; None = floor(sqrt(n_features)).
    pub features_per_split: Option<usize>,
    pub seed: u64,
    /// Permits max_depth outside [16, 64] for desk-scale experiments.
    pub allow_shallow: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 16,
            min_split_fraction: 0.02,
            min_split_override: None,
            features_per_split: None,
            seed: 0,
            allow_shallow: false,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Parameter("forest needs at least one tree".into()));
        }
        if !self.allow_shallow && !(16..=64).contains(&self.max_depth) {
            return Err(Error::Parameter(format!(
                "max_depth {} outside [16, 64]",
                self.max_depth
            )));
        }
        if self.max_depth == 0 {
            return Err(Error::Parameter("max_depth must be positive".into()));
        }
        if !(self.min_split_fraction > 0.0) {
            return Err(Error::Parameter("min_split_fraction must be > 0".into()));
        }
        Ok(())
    }
}

/// Gini impurity 1 - sum p_i^2 of a label multiset.
pub fn gini(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Parameter("gini of an empty node".into()));
    }
    let max = labels.iter().max().copied().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    Ok(gini_from_counts(&counts, labels.len()))
}

fn gini_from_counts(counts: &[usize], total: usize) -> f64 {
    let n = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p
        })
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        probs: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { probs } => return probs,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub n_classes: usize,
    pub n_features: usize,
    /// Out-of-bag sample indices per tree.
    pub oob: Vec<Vec<u32>>,
}

/// Best (feature, threshold, gain) over the sampled feature subset, scanning
/// midpoints of consecutive distinct values. Ties break to the lower feature
/// index then the lower threshold; None when no split has positive gain.
pub fn best_split(
    xs: &[&[f64]],
    ys: &[usize],
    feature_subset: &[usize],
    n_classes: usize,
) -> Option<(usize, f64, f64)> {
    let n = ys.len();
    if n < 2 {
        return None;
    }
    let mut parent_counts = vec![0usize; n_classes];
    for &y in ys {
        parent_counts[y] += 1;
    }
    let parent_gini = gini_from_counts(&parent_counts, n);
    let mut best: Option<(usize, f64, f64)> = None;

    let mut order: Vec<usize> = (0..n).collect();
    for &f in feature_subset {
        order.sort_by(|&a, &b| xs[a][f].partial_cmp(&xs[b][f]).unwrap());
        let mut left_counts = vec![0usize; n_classes];
        let mut left_n = 0usize;
        let mut right_counts = parent_counts.clone();
        for w in 0..n - 1 {
            let i = order[w];
            left_counts[ys[i]] += 1;
            right_counts[ys[i]] -= 1;
            left_n += 1;
            let (a, b) = (xs[order[w]][f], xs[order[w + 1]][f]);
            if a == b {
                continue;
            }
            let threshold = 0.5 * (a + b);
            let right_n = n - left_n;
            let weighted = (left_n as f64 * gini_from_counts(&left_counts, left_n)
                + right_n as f64 * gini_from_counts(&right_counts, right_n))
                / n as f64;
            let gain = parent_gini - weighted;
            let better = match best {
                None => gain > 1e-12,
                Some((bf, bt, bg)) => {
                    gain > bg + 1e-12
                        || ((gain - bg).abs() <= 1e-12 && (f < bf || (f == bf && threshold < bt)))
                }
            };
            if better {
                best = Some((f, threshold, gain));
            }
        }
    }
    best
}

struct TreeBuilder<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [usize],
    n_classes: usize,
    n_features: usize,
    features_per_split: usize,
    max_depth: usize,
    min_split: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let mut counts = vec![0.0f64; self.n_classes];
        for &i in idx {
            counts[self.ys[i]] += 1.0;
        }
        let n = idx.len() as f64;
        for c in counts.iter_mut() {
            *c /= n;
        }
        self.nodes.push(TreeNode::Leaf { probs: counts });
        self.nodes.len() - 1
    }

    fn build(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pure = idx.iter().all(|&i| self.ys[i] == self.ys[idx[0]]);
        if pure || depth >= self.max_depth || idx.len() < self.min_split {
            return self.leaf(idx);
        }

        // sample a feature subset without replacement
        let mut pool: Vec<usize> = (0..self.n_features).collect();
        let k = self.features_per_split.min(self.n_features).max(1);
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut subset: Vec<usize> = pool[..k].to_vec();
        subset.sort_unstable();

        let node_xs: Vec<&[f64]> = idx.iter().map(|&i| self.xs[i]).collect();
        let node_ys: Vec<usize> = idx.iter().map(|&i| self.ys[i]).collect();
        let Some((feature, threshold, _gain)) =
            best_split(&node_xs, &node_ys, &subset, self.n_classes)
        else {
            return self.leaf(idx);
        };

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.xs[i][feature] <= threshold);
        debug_assert!(!left_idx.is_empty() && !right_idx.is_empty());

        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { probs: Vec::new() }); // placeholder
        let left = self.build(&left_idx, depth + 1, rng);
        let right = self.build(&right_idx, depth + 1, rng);
        self.nodes[slot] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Trains `params.n_trees` trees, each on a bootstrap resample (with
/// replacement, size |X|), with features_per_split = floor(sqrt(K)) by
/// default. The effective minimum split size is 0.02*m with m the smallest
/// class count, unless overridden. Deterministic: each tree's RNG stream
/// derives from (seed, tree index).
pub fn fit(xs: &[Vec<f64>], ys: &[usize], params: &ForestParams) -> Result<Forest> {
    params.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Parameter(format!(
            "need matching non-empty X ({}) and y ({})",
            xs.len(),
            ys.len()
        )));
    }
    let n_features = xs[0].len();
    if xs.iter().any(|x| x.len() != n_features) {
        return Err(Error::Shape("inconsistent feature dimensions".into()));
    }
    let n_classes = ys.iter().max().unwrap() + 1;

    let mut class_counts = vec![0usize; n_classes];
    for &y in ys {
        class_counts[y] += 1;
    }
    let m_min = class_counts
        .iter()
        .filter(|&&c| c > 0)
        .min()
        .copied()
        .unwrap_or(0);
    let min_split = params
        .min_split_override
        .unwrap_or_else(|| ((params.min_split_fraction * m_min as f64).round() as usize).max(2));
    let features_per_split = params
        .features_per_split
        .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
        .max(1);

    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let results: Vec<(DecisionTree, Vec<u32>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(params.seed, &format!("tree-{t}")));
            let n = xs.len();
            let mut in_bag = vec![false; n];
            let sample: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.gen_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            let mut builder = TreeBuilder {
                xs: &refs,
                ys,
                n_classes,
                n_features,
                features_per_split,
                max_depth: params.max_depth,
                min_split,
                nodes: Vec::new(),
            };
            let root = builder.build(&sample, 0, &mut rng);
            debug_assert_eq!(root, 0);
            let oob: Vec<u32> = (0..n).filter(|&i| !in_bag[i]).map(|i| i as u32).collect();
            (DecisionTree {
                nodes: builder.nodes,
            }, oob)
        })
        .collect();

    let (trees, oob): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Forest {
        trees,
        params: *params,
        n_classes,
        n_features,
        oob,
    })
}

/// Averaged leaf distributions; the label is the argmax with ties to the
/// lower class index.
pub fn predict(forest: &Forest, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    if x.len() != forest.n_features {
        return Err(Error::Shape(format!(
            "input has {} features, forest expects {}",
            x.len(),
            forest.n_features
        )));
    }
    let mut probs = vec![0.0f64; forest.n_classes];
    for tree in &forest.trees {
        for (p, v) in probs.iter_mut().zip(tree.predict(x)) {
            *p += v;
        }
    }
    let nt = forest.trees.len() as f64;
    for p in probs.iter_mut() {
        *p /= nt;
    }
    let mut label = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[label] {
            label = i;
        }
    }
    Ok((label, probs))
}

/// Mann-Whitney (midrank) AUC of `scores` against binary labels.
pub fn binary_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&i| positives[i]).map(|i| ranks[i]).sum();
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Macro-averaged one-vs-rest AUC over the classes present in `ys`.
pub fn macro_ovr_auc(probs: &[Vec<f64>], ys: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = ys.iter().map(|&y| y == c).collect();
        if let Some(auc) = binary_auc(&scores, &pos) {
            total += auc;
            counted += 1;
        }
    }
    if counted == 0 {
        0.5
    } else {
        total / counted as f64
    }
}

/// Picks the tree count from `grid` maximizing the cross-validated macro
/// one-vs-rest AUC; ties go to the smaller count.
pub fn select_n_trees(
    xs: &[Vec<f64>],
    ys: &[usize],
    grid: &[usize],
    folds: usize,
    base: &ForestParams,
) -> Result<usize> {
    if grid.is_empty() {
        return Err(Error::Parameter("tree grid is empty".into()));
    }
    if folds < 2 || xs.len() < folds {
        return Err(Error::Parameter("need at least 2 folds and enough samples".into()));
    }
    let n_classes = ys.iter().max().unwrap() + 1;
    // deterministic round-robin fold assignment per class for balance
    let mut fold_of = vec![0usize; xs.len()];
    let mut per_class_counter = vec![0usize; n_classes];
    for (i, &y) in ys.iter().enumerate() {
        fold_of[i] = per_class_counter[y] % folds;
        per_class_counter[y] += 1;
    }

    let mut best: Option<(usize, f64)> = None;
    for &n in grid {
        let mut auc_sum = 0.0;
        for fold in 0..folds {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..xs.len() {
                if fold_of[i] == fold {
                    vx.push(xs[i].clone());
                    vy.push(ys[i]);
                } else {
                    tx.push(xs[i].clone());
                    ty.push(ys[i]);
                }
            }
            let params = ForestParams {
                n_trees: n,
                ..*base
            };
            let forest = fit(&tx, &ty, &params)?;
            let probs: Vec<Vec<f64>> = vx
                .iter()
                .map(|x| predict(&forest, x).map(|r| r.1))
                .collect::<Result<_>>()?;
            auc_sum += macro_ovr_auc(&probs, &vy, n_classes);
        }
        let mean_auc = auc_sum / folds as f64;
        let replace = match best {
            None => true,
            Some((_, bauc)) => mean_auc > bauc + 1e-12,
        };
        if replace {
            best = Some((n, mean_auc));
        }
    }
    Ok(best.expect("grid checked non-empty").0)
}

const MODEL_MAGIC: &[u8; 4] = b"RFST";
const MODEL_VERSION: u32 = 1;

/// Versioned binary model: magic `RFST`, version, params block, class and
/// feature counts, then per-tree node arrays (little-endian).
pub fn save_forest(forest: &Forest, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MODEL_MAGIC)?;
    f.write_all(&MODEL_VERSION.to_le_bytes())?;
    f.write_all(&(forest.params.n_trees as u32).to_le_bytes())?;
    f.write_all(&(forest.params.max_depth as u32).to_le_bytes())?;
    f.write_all(&forest.params.min_split_fraction.to_le_bytes())?;
    f.write_all(&forest.params.seed.to_le_bytes())?;
    f.write_all(&(forest.n_classes as u32).to_le_bytes())?;
    f.write_all(&(forest.n_features as u32).to_le_bytes())?;
    f.write_all(&(forest.trees.len() as u32).to_le_bytes())?;
    for tree in &forest.trees {
        f.write_all(&(tree.nodes.len() as u32).to_le_bytes())?;
        for node in &tree.nodes {
            match node {
                TreeNode::Leaf { probs } => {
                    f.write_all(&[1u8])?;
                    for p in probs {
                        f.write_all(&p.to_le_bytes())?;
                    }
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    f.write_all(&[0u8])?;
                    f.write_all(&(*feature as u32).to_le_bytes())?;
                    f.write_all(&threshold.to_le_bytes())?;
                    f.write_all(&(*left as u32).to_le_bytes())?;
                    f.write_all(&(*right as u32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn load_forest(path: &Path) -> Result<Forest> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Data(format!("{}: bad model magic", path.display())));
    }
    if read_u32(&mut f)? != MODEL_VERSION {
        return Err(Error::Data("unsupported model version".into()));
    }
    let n_trees = read_u32(&mut f)? as usize;
    let max_depth = read_u32(&mut f)? as usize;
    let min_split_fraction = read_f64(&mut f)?;
    let seed = read_u64(&mut f)?;
    let n_classes = read_u32(&mut f)? as usize;
    let n_features = read_u32(&mut f)? as usize;
    let tree_count = read_u32(&mut f)? as usize;
    let mut trees = Vec::with_capacity(tree_count);
    for _ in 0..tree_count {
        let node_count = read_u32(&mut f)? as usize;
        let mut nodes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let mut tag = [0u8; 1];
            f.read_exact(&mut tag)?;
            if tag[0] == 1 {
                let mut probs = vec![0.0f64; n_classes];
                for p in probs.iter_mut() {
                    *p = read_f64(&mut f)?;
                }
                nodes.push(TreeNode::Leaf { probs });
            } else {
                let feature = read_u32(&mut f)? as usize;
                let threshold = read_f64(&mut f)?;
                let left = read_u32(&mut f)? as usize;
                let right = read_u32(&mut f)? as usize;
                nodes.push(TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                });
            }
        }
        trees.push(DecisionTree { nodes });
    }
    Ok(Forest {
        trees,
        params: ForestParams {
            n_trees,
            max_depth,
            min_split_fraction,
            seed,
            allow_shallow: true,
            ..ForestParams::default()
        },
        n_classes,
        n_features,
        oob: Vec::new(),
    })
}

/// Human-readable JSON export for debugging.
pub fn export_forest_json(forest: &Forest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(forest)
        .map_err(|e| Error::Data(format!("serialize forest: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
