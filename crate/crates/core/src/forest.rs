//! Random forest over sparse count vectors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::fingerprint::Fingerprint;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `None` means floor(sqrt(V)).
    pub mtry: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 12, min_leaf: 5, mtry: None }
    }
}

impl ForestParams {
    pub fn mtry_for(&self, n_features: usize) -> usize {
        let m = self.mtry.unwrap_or_else(|| libm::floor(libm::sqrt(n_features as f64)) as usize);
        m.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Rows with `count(feature) > threshold` go right.
    Split { feature: u32, threshold: u32, left: u32, right: u32 },
    Leaf { positive_fraction: f64 },
}

/// A tree as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value(&self, x: &FeatureVector) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { positive_fraction } => return positive_fraction,
                Node::Split { feature, threshold, left, right } => {
                    i = if x.count(feature) > threshold { right as usize } else { left as usize };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left as usize).max(go(nodes, right as usize)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub seed: u64,
    pub vocab_fingerprint: Fingerprint,
}

/// Anything that turns a feature vector into a probability of the positive
/// class. The forest is the built-in implementation.
pub trait Classifier {
    fn vocab_fingerprint(&self) -> Fingerprint;

    /// Score without checking the vector's vocabulary.
    fn score_unchecked(&self, x: &FeatureVector) -> f64;

    fn predict_proba(&self, x: &FeatureVector) -> Result<f64> {
        let expected = self.vocab_fingerprint();
        if x.vocab_fingerprint != expected {
            return Err(Error::VocabularyMismatch { expected, actual: x.vocab_fingerprint });
        }
        Ok(self.score_unchecked(x))
    }
}

impl Classifier for Forest {
    fn vocab_fingerprint(&self) -> Fingerprint {
        self.vocab_fingerprint
    }

    fn score_unchecked(&self, x: &FeatureVector) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.leaf_value(x)).sum();
        sum / self.trees.len() as f64
    }
}

impl Forest {
    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::Integrity("forest has no trees".into()));
        }
        for (ti, t) in self.trees.iter().enumerate() {
            if t.nodes.is_empty() {
                return Err(Error::Integrity(format!("tree {ti} is empty")));
            }
            for (ni, n) in t.nodes.iter().enumerate() {
                let ok = match *n {
                    Node::Leaf { positive_fraction: p } => (0.0..=1.0).contains(&p),
                    Node::Split { feature, left, right, .. } => {
                        (feature as usize) < self.n_features
                            && (left as usize) < t.nodes.len()
                            && (right as usize) < t.nodes.len()
                            && left as usize > ni
                            && right as usize > ni
                    }
                };
                if !ok {
                    return Err(Error::Integrity(format!("tree {ti} node {ni} is malformed")));
                }
            }
        }
        Ok(())
    }
}

/// Impurity decrease of splitting `(pos, n)` into left `(lp, ln)` and the
/// remainder, weighted by child size: G(parent) - nL/n G(L) - nR/n G(R).
pub fn gini_decrease(pos: usize, n: usize, left_pos: usize, left_n: usize) -> f64 {
    let g = |p: usize, m: usize| {
        if m == 0 {
            return 0.0;
        }
        let f = p as f64 / m as f64;
        2.0 * f * (1.0 - f)
    };
    let right_n = n - left_n;
    let right_pos = pos - left_pos;
    let nf = n as f64;
    g(pos, n) - (left_n as f64 / nf) * g(left_pos, left_n) - (right_n as f64 / nf) * g(right_pos, right_n)
}

/// Column-major dense copy of the training matrix.
struct Columns {
    data: Vec<u32>,
    n_rows: usize,
}

impl Columns {
    fn new(x: &[FeatureVector], n_features: usize) -> Result<Self> {
        let n_rows = x.len();
        let mut data = vec![0u32; n_rows * n_features];
        for (r, v) in x.iter().enumerate() {
            for &(i, c) in &v.entries {
                if i as usize >= n_features {
                    return Err(Error::InvalidInput(format!("feature index {i} out of range for {n_features} features")));
                }
                data[i as usize * n_rows + r] = c;
            }
        }
        Ok(Self { data, n_rows })
    }

    fn get(&self, feature: usize, row: usize) -> u32 {
        self.data[feature * self.n_rows + row]
    }
}

struct Builder<'a, R> {
    cols: &'a Columns,
    y: &'a [bool],
    params: ForestParams,
    mtry: usize,
    n_features: usize,
    rng: R,
    nodes: Vec<Node>,
    hist: Vec<(u32, u32)>,
}

impl<R: Rng> Builder<'_, R> {
    fn leaf(&mut self, rows: &[u32]) -> u32 {
        let pos = rows.iter().filter(|&&r| self.y[r as usize]).count();
        self.nodes.push(Node::Leaf { positive_fraction: pos as f64 / rows.len() as f64 });
        (self.nodes.len() - 1) as u32
    }

    fn best_split(&mut self, rows: &[u32], pos: usize) -> Option<(usize, u32)> {
        let n = rows.len();
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<(f64, usize, u32)> = None;
        let candidates = index::sample(&mut self.rng, self.n_features, self.mtry);
        for f in candidates.iter() {
            // Per-count histogram of (rows, positives).
            self.hist.clear();
            let mut max_count = 0u32;
            for &r in rows {
                let c = self.cols.get(f, r as usize);
                if c as usize >= self.hist.len() {
                    self.hist.resize(c as usize + 1, (0, 0));
                }
                let h = &mut self.hist[c as usize];
                h.0 += 1;
                h.1 += self.y[r as usize] as u32;
                max_count = max_count.max(c);
            }
            let (mut left_n, mut left_pos) = (0usize, 0usize);
            for t in 0..max_count {
                let (hn, hp) = self.hist[t as usize];
                left_n += hn as usize;
                left_pos += hp as usize;
                if hn == 0 {
                    continue;
                }
                if left_n < min_leaf || n - left_n < min_leaf {
                    continue;
                }
                let d = gini_decrease(pos, n, left_pos, left_n);
                if d > 1e-12 && best.is_none_or(|b| d > b.0) {
                    best = Some((d, f, t));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, rows: &mut [u32], depth: usize) -> u32 {
        let pos = rows.iter().filter(|&&r| self.y[r as usize]).count();
        let n = rows.len();
        if depth >= self.params.max_depth || pos == 0 || pos == n || n < 2 * self.params.min_leaf.max(1) {
            return self.leaf(rows);
        }
        let Some((feature, threshold)) = self.best_split(rows, pos) else {
            return self.leaf(rows);
        };
        // Stable partition: left rows first, original order kept on each side.
        let cols = self.cols;
        let (mut left, mut right): (Vec<u32>, Vec<u32>) =
            rows.iter().partition(|&&r| cols.get(feature, r as usize) <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { positive_fraction: 0.0 });
        let l = self.grow(&mut left, depth + 1);
        let r = self.grow(&mut right, depth + 1);
        self.nodes[at] = Node::Split { feature: feature as u32, threshold, left: l, right: r };
        at as u32
    }
}

/// Fit a forest. Tree `i` draws its bootstrap and its feature candidates
/// from a stream derived from `(seed, i)` only.
pub fn train_forest(x: &[FeatureVector], y: &[bool], n_features: usize, params: ForestParams, seed: u64) -> Result<Forest> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("{} vectors but {} labels", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("need at least two training rows".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::InvalidConfig("n_trees must be at least 1".into()));
    }
    let pos = y.iter().filter(|&&b| b).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::DegenerateLabels("training labels contain a single class".into()));
    }
    if n_features == 0 {
        return Err(Error::InvalidInput("no features".into()));
    }
    let fp = x[0].vocab_fingerprint;
    if let Some(v) = x.iter().find(|v| v.vocab_fingerprint != fp) {
        return Err(Error::VocabularyMismatch { expected: fp, actual: v.vocab_fingerprint });
    }
    let cols = Columns::new(x, n_features)?;
    let n = x.len();
    let trees = (0..params.n_trees)
        .map(|ti| {
            let mut r = rng::stream(seed, "tree", ti as u64);
            let mut rows: Vec<u32> = (0..n).map(|_| r.random_range(0..n as u32)).collect();
            rows.sort_unstable();
            let mut b = Builder {
                cols: &cols,
                y,
                params,
                mtry: params.mtry_for(n_features),
                n_features,
                rng: r,
                nodes: Vec::new(),
                hist: Vec::new(),
            };
            b.grow(&mut rows, 0);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(Forest { trees, n_features, seed, vocab_fingerprint: fp })
}
