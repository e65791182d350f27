//! Multiclass gradient-boosted regression trees with second-order
//! (Newton) updates and exact greedy split search.
//!
//! Each round fits one tree per class to the softmax gradients
//! `g = p_k - [y = k]` and hessians `h = p_k (1 - p_k)` computed from the raw
//! scores at the start of the round. A split is scored by
//!
//! ```text
//! gain = ½ [G_L²/(H_L+λ) + G_R²/(H_R+λ) - G²/(H+λ)] - γ
//! ```
//!
//! and a leaf gets `-G/(H+λ)`. Stored leaf values already include the
//! learning rate.

use std::fmt::Write as _;
use std::path::Path;

use crate::csvio;
use crate::error::{Error, Result};
use crate::labels::Subtype;

pub const FORMAT_HEADER: &str = "histotype-gbdt v1";
const NODE_HEADER: &str = "round,class,node_id,kind,feature,split,left,right,weight";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_rounds: 100,
            learning_rate: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            max_depth: 3,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning_rate {} not in (0, 1]", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return Err(Error::Config(format!(
                "min_child_weight {} must be >= 0",
                self.min_child_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] < split` go left.
    Split {
        feature: usize,
        split: f64,
        left: usize,
        right: usize,
    },
    Leaf { weight: f64 },
}

/// Nodes stored flat; the root is node 0 and children follow their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(weight: f64) -> Tree {
        Tree {
            nodes: vec![TreeNode::Leaf { weight }],
        }
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split {
                    feature,
                    split,
                    left,
                    right,
                } => i = if row[feature] < split { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// The root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes[0] {
            TreeNode::Split { feature, split, .. } => Some((feature, split)),
            TreeNode::Leaf { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel {
    pub n_classes: usize,
    pub n_features: usize,
    pub config: TrainConfig,
    pub base_score: f64,
    /// One tree per class per round.
    pub rounds: Vec<Vec<Tree>>,
}

/// Split-search regularisation shared by all nodes of a tree.
struct Grower<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    cfg: &'a TrainConfig,
    nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub split: f64,
    pub gain: f64,
}

fn score(g: f64, h: f64, lambda: f64) -> f64 {
    let d = h + lambda;
    if d <= 0.0 {
        0.0
    } else {
        g * g / d
    }
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (score(gl, hl, lambda) + score(gr, hr, lambda) - score(gl + gr, hl + hr, lambda)) - gamma
}

/// Best split of `rows` by exact enumeration of midpoints between adjacent
/// distinct feature values. Ties keep the lowest feature, then the lowest
/// split value.
pub fn best_split(
    x: &[Vec<f64>],
    g: &[f64],
    h: &[f64],
    rows: &[usize],
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
) -> Option<SplitCandidate> {
    let n_features = x.first().map_or(0, Vec::len);
    let g_tot: f64 = rows.iter().map(|&i| g[i]).sum();
    let h_tot: f64 = rows.iter().map(|&i| h[i]).sum();
    let mut best: Option<SplitCandidate> = None;
    let mut order = rows.to_vec();
    for f in 0..n_features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for w in 0..order.len().saturating_sub(1) {
            let i = order[w];
            gl += g[i];
            hl += h[i];
            let (a, b) = (x[i][f], x[order[w + 1]][f]);
            if a == b {
                continue;
            }
            let hr = h_tot - hl;
            if hl < min_child_weight || hr < min_child_weight {
                continue;
            }
            let mid = 0.5 * (a + b);
            let split = if mid > a { mid } else { b };
            let gain = split_gain(gl, hl, g_tot - gl, hr, lambda, gamma);
            if best.is_none_or(|bst| gain > bst.gain) {
                best = Some(SplitCandidate { feature: f, split, gain });
            }
        }
    }
    best
}

impl Grower<'_> {
    fn leaf_weight(&self, rows: &[usize]) -> f64 {
        let gs: f64 = rows.iter().map(|&i| self.g[i]).sum();
        let hs: f64 = rows.iter().map(|&i| self.h[i]).sum();
        let d = hs + self.cfg.lambda;
        if d <= 0.0 {
            0.0
        } else {
            -gs / d * self.cfg.learning_rate
        }
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { weight: 0.0 });
        let cand = if depth < self.cfg.max_depth {
            best_split(
                self.x,
                self.g,
                self.h,
                rows,
                self.cfg.lambda,
                self.cfg.gamma,
                self.cfg.min_child_weight,
            )
            .filter(|c| c.gain > 0.0)
        } else {
            None
        };
        match cand {
            None => {
                self.nodes[id] = TreeNode::Leaf {
                    weight: self.leaf_weight(rows),
                };
            }
            Some(c) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| self.x[i][c.feature] < c.split);
                let left = self.grow(&l, depth + 1);
                let right = self.grow(&r, depth + 1);
                self.nodes[id] = TreeNode::Split {
                    feature: c.feature,
                    split: c.split,
                    left,
                    right,
                };
            }
        }
        id
    }
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or_else(|| Error::Invalid("empty training set".into()))?;
    if d == 0 {
        return Err(Error::Invalid("rows have no features".into()));
    }
    for (i, r) in x.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Invalid(format!("row {i} has {} features, expected {d}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("row {i} has a non-finite feature")));
        }
    }
    Ok(d)
}

/// Trains on class indices `y` in `0..n_classes`.
pub fn train(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &TrainConfig) -> Result<GbdtModel> {
    cfg.validate()?;
    let d = check_matrix(x)?;
    if y.len() != x.len() {
        return Err(Error::Invalid(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if n_classes < 2 {
        return Err(Error::Invalid("need at least two classes".into()));
    }
    if let Some(bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::UnknownLabel(format!("class index {bad}")));
    }
    let n = x.len();
    let base_score = 0.0;
    let mut raw = vec![vec![base_score; n_classes]; n];
    let rows: Vec<usize> = (0..n).collect();
    let mut rounds = Vec::with_capacity(cfg.n_rounds);
    for _ in 0..cfg.n_rounds {
        let probs: Vec<Vec<f64>> = raw.iter().map(|r| softmax(r)).collect();
        let mut trees = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            let g: Vec<f64> = (0..n).map(|i| probs[i][k] - (y[i] == k) as u8 as f64).collect();
            let h: Vec<f64> = (0..n).map(|i| probs[i][k] * (1.0 - probs[i][k])).collect();
            let mut grower = Grower {
                x,
                g: &g,
                h: &h,
                cfg,
                nodes: Vec::new(),
            };
            grower.grow(&rows, 0);
            trees.push(Tree { nodes: grower.nodes });
        }
        for (i, r) in raw.iter_mut().enumerate() {
            for (k, t) in trees.iter().enumerate() {
                r[k] += t.eval(&x[i]);
            }
        }
        rounds.push(trees);
    }
    Ok(GbdtModel {
        n_classes,
        n_features: d,
        config: *cfg,
        base_score,
        rounds,
    })
}

/// Trains the four-class subtype model.
pub fn train_subtypes(x: &[Vec<f64>], y: &[Subtype], cfg: &TrainConfig) -> Result<GbdtModel> {
    let idx: Vec<usize> = y.iter().map(|s| s.index()).collect();
    train(x, &idx, Subtype::ALL.len(), cfg)
}

impl GbdtModel {
    /// A model with no rounds predicts the uniform distribution.
    pub fn empty(n_classes: usize, n_features: usize) -> GbdtModel {
        GbdtModel {
            n_classes,
            n_features,
            config: TrainConfig {
                n_rounds: 0,
                ..TrainConfig::default()
            },
            base_score: 0.0,
            rounds: Vec::new(),
        }
    }

    /// The model after its first `n` rounds.
    pub fn prefix(&self, n: usize) -> GbdtModel {
        GbdtModel {
            rounds: self.rounds[..n.min(self.rounds.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn raw_scores(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_features {
            return Err(Error::Invalid(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features
            )));
        }
        let mut raw = vec![self.base_score; self.n_classes];
        for trees in &self.rounds {
            for (k, t) in trees.iter().enumerate() {
                raw[k] += t.eval(row);
            }
        }
        Ok(raw)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.raw_scores(row)?))
    }

    /// Arg-max class index; ties go to the lower index.
    pub fn predict(&self, row: &[f64]) -> Result<usize> {
        let p = self.predict_proba(row)?;
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn predict_subtype(&self, row: &[f64]) -> Result<Subtype> {
        let k = self.predict(row)?;
        Subtype::from_index(k).ok_or_else(|| Error::Invalid(format!("class index {k} is not a subtype")))
    }

    /// Mean softmax cross-entropy.
    pub fn cross_entropy(&self, x: &[Vec<f64>], y: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for (r, &c) in x.iter().zip(y) {
            let p = self.predict_proba(r)?;
            total -= p[c].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / x.len().max(1) as f64)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(s, "n_classes {}", self.n_classes);
        let _ = writeln!(s, "n_features {}", self.n_features);
        let _ = writeln!(s, "n_rounds {}", self.rounds.len());
        let _ = writeln!(s, "learning_rate {:.16e}", c.learning_rate);
        let _ = writeln!(s, "lambda {:.16e}", c.lambda);
        let _ = writeln!(s, "gamma {:.16e}", c.gamma);
        let _ = writeln!(s, "max_depth {}", c.max_depth);
        let _ = writeln!(s, "min_child_weight {:.16e}", c.min_child_weight);
        let _ = writeln!(s, "seed {}", c.seed);
        let _ = writeln!(s, "base_score {:.16e}", self.base_score);
        let _ = writeln!(s, "{NODE_HEADER}");
        for (r, trees) in self.rounds.iter().enumerate() {
            for (k, t) in trees.iter().enumerate() {
                for (id, node) in t.nodes.iter().enumerate() {
                    let _ = match node {
                        TreeNode::Split {
                            feature,
                            split,
                            left,
                            right,
                        } => writeln!(s, "{r},{k},{id},split,{feature},{split:.16e},{left},{right},"),
                        TreeNode::Leaf { weight } => writeln!(s, "{r},{k},{id},leaf,,,,,{weight:.16e}"),
                    };
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<GbdtModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|(line, msg)| Error::parse(path, line, msg))
    }

    /// Parses the text format; errors carry a 1-based line number.
    pub fn from_text(text: &str) -> std::result::Result<GbdtModel, (usize, String)> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let mut next = |what: &str| lines.next().ok_or((0, format!("truncated before {what}")));
        let (ln, head) = next("header")?;
        if head != FORMAT_HEADER {
            return Err((ln, format!("unsupported model format `{head}`")));
        }
        fn field<T: std::str::FromStr>(item: (usize, &str), key: &str) -> std::result::Result<T, (usize, String)> {
            let (ln, l) = item;
            let v = l
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or((ln, format!("expected `{key}`")))?;
            v.parse().map_err(|_| (ln, format!("bad value for `{key}`")))
        }
        let n_classes: usize = field(next("n_classes")?, "n_classes")?;
        let n_features: usize = field(next("n_features")?, "n_features")?;
        let n_rounds: usize = field(next("n_rounds")?, "n_rounds")?;
        let config = TrainConfig {
            n_rounds,
            learning_rate: field(next("learning_rate")?, "learning_rate")?,
            lambda: field(next("lambda")?, "lambda")?,
            gamma: field(next("gamma")?, "gamma")?,
            max_depth: field(next("max_depth")?, "max_depth")?,
            min_child_weight: field(next("min_child_weight")?, "min_child_weight")?,
            seed: field(next("seed")?, "seed")?,
        };
        let base_score: f64 = field(next("base_score")?, "base_score")?;
        let (ln, nh) = next("node header")?;
        if nh != NODE_HEADER {
            return Err((ln, "bad node header".into()));
        }
        let mut rounds: Vec<Vec<Tree>> = (0..n_rounds)
            .map(|_| (0..n_classes).map(|_| Tree { nodes: Vec::new() }).collect())
            .collect();
        let mut ended = false;
        let mut last_line = ln;
        for (ln, l) in lines {
            last_line = ln;
            if ended {
                if l.is_empty() {
                    continue;
                }
                return Err((ln, "content after `end`".into()));
            }
            if l == "end" {
                ended = true;
                continue;
            }
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err((ln, format!("expected 9 fields, found {}", f.len())));
            }
            let num = |i: usize| f[i].parse::<usize>().map_err(|_| (ln, format!("bad integer `{}`", f[i])));
            let real = |i: usize| f[i].parse::<f64>().map_err(|_| (ln, format!("bad number `{}`", f[i])));
            let (r, k, id) = (num(0)?, num(1)?, num(2)?);
            if r >= n_rounds || k >= n_classes {
                return Err((ln, format!("tree ({r}, {k}) out of range")));
            }
            let tree = &mut rounds[r][k];
            if id != tree.nodes.len() {
                return Err((ln, format!("node {id} out of sequence")));
            }
            let node = match f[3] {
                "leaf" => TreeNode::Leaf { weight: real(8)? },
                "split" => {
                    let (feature, left, right) = (num(4)?, num(6)?, num(7)?);
                    if feature >= n_features || left <= id || right <= id {
                        return Err((ln, "invalid split node".into()));
                    }
                    TreeNode::Split {
                        feature,
                        split: real(5)?,
                        left,
                        right,
                    }
                }
                other => return Err((ln, format!("unknown node kind `{other}`"))),
            };
            tree.nodes.push(node);
        }
        if !ended {
            return Err((last_line, "truncated model (missing `end`)".into()));
        }
        for (r, trees) in rounds.iter().enumerate() {
            for (k, t) in trees.iter().enumerate() {
                let n = t.nodes.len();
                let ok = n > 0
                    && t.nodes.iter().all(|nd| match nd {
                        TreeNode::Split { left, right, .. } => *left < n && *right < n,
                        TreeNode::Leaf { .. } => true,
                    });
                if !ok {
                    return Err((last_line, format!("tree ({r}, {k}) is incomplete")));
                }
            }
        }
        Ok(GbdtModel {
            n_classes,
            n_features,
            config,
            base_score,
            rounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_model_uniform() {
        let m = GbdtModel::empty(4, 8);
        let p = m.predict_proba(&[0.0; 8]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
        assert_eq!(m.predict(&[3.0; 8]).unwrap(), 0);
        assert!(m.predict_proba(&[0.0; 7]).is_err());
    }

    #[test]
    fn single_leaf_softmax() {
        let mut m = GbdtModel::empty(4, 8);
        m.rounds.push(vec![Tree::leaf(1.0), Tree::leaf(0.0), Tree::leaf(0.0), Tree::leaf(0.0)]);
        let p = m.predict_proba(&[0.0; 8]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 3.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn constant_labels_converge() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y = vec![2usize; 30];
        let cfg = TrainConfig {
            n_rounds: 10,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let m = train(&x, &y, 4, &cfg).unwrap();
        for r in &x {
            assert!(m.predict_proba(r).unwrap()[2] >= 0.9);
        }
        let m0 = train(&x, &y, 4, &TrainConfig { n_rounds: 0, ..cfg }).unwrap();
        assert_eq!(m0.predict_proba(&x[0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = TrainConfig::default();
        assert!(train(&[], &[], 4, &cfg).is_err());
        assert!(train(&[vec![1.0]], &[4], 4, &cfg).is_err());
        assert!(train(&[vec![1.0], vec![1.0, 2.0]], &[0, 1], 4, &cfg).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert!(train(&[vec![1.0]], &[0], 4, &bad).is_err());
    }

    #[test]
    fn min_child_weight_blocks_splits() {
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let y = vec![0, 0, 1, 1];
        let cfg = TrainConfig {
            n_rounds: 1,
            min_child_weight: 10.0,
            ..TrainConfig::default()
        };
        let m = train(&x, &y, 2, &cfg).unwrap();
        assert!(m.rounds[0].iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn text_round_trip_and_corruption() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i * 13 % 11) as f64]).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let cfg = TrainConfig {
            n_rounds: 5,
            min_child_weight: 0.1,
            ..TrainConfig::default()
        };
        let m = train(&x, &y, 3, &cfg).unwrap();
        let text = m.to_text();
        let back = GbdtModel::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);

        let cut = &text[..text.len() / 2];
        assert!(GbdtModel::from_text(cut).is_err());
        assert!(GbdtModel::from_text(&text.replace("v1", "v9")).is_err());
        assert!(GbdtModel::from_text(&text.replacen(",leaf,", ",twig,", 1)).is_err());
        let no_end = text.trim_end_matches("end\n");
        assert!(GbdtModel::from_text(no_end).is_err());
    }
}
