//! Graph loading, validation, splits and synthetic fixtures.
//!
//! A bundle directory holds `meta.json`, `edges.tsv`, `features.tsv`,
//! `labels.tsv` and optionally `splits.json`. All edges are interpreted as
//! undirected and symmetrized at load; the context index for node `v` always
//! contains `v` itself plus its neighbors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("inconsistent feature arity at {file}:{line}: expected {expected}, got {got}")]
    FeatureArity {
        file: String,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("edge ({0}, {1}) has a dangling endpoint (num_nodes = {2})")]
    DanglingEdge(usize, usize, usize),
    #[error("self-loop edge ({0}, {0}) not allowed in bundle files")]
    SelfLoop(usize),
    #[error("duplicate undirected edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("meta.json mismatch: {0}")]
    MetaMismatch(String),
    #[error("invalid split: {0}")]
    InfeasibleSplit(String),
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("bad json in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Meta {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// Compressed row structure over the local contexts `C_v = {v} ∪ N(v)`.
///
/// `members` is the concatenation of every context row (ascending within a
/// row, self included); `offsets[v]..offsets[v+1]` delimits row `v`. The
/// flattened per-context-edge views `edge_src`/`edge_dst` list one entry per
/// `(u ∈ C_v, v)` pair in row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextIndex {
    offsets: Vec<usize>,
    members: Vec<usize>,
    edge_src: Vec<usize>,
    edge_dst: Vec<usize>,
}

impl ContextIndex {
    pub fn build(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut neigh: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_nodes];
        for &(u, v) in edges {
            neigh[u].insert(v);
            neigh[v].insert(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut members = Vec::new();
        offsets.push(0);
        for (v, set) in neigh.iter_mut().enumerate() {
            set.insert(v);
            members.extend(set.iter().copied());
            offsets.push(members.len());
        }
        let mut edge_src = Vec::with_capacity(members.len());
        let mut edge_dst = Vec::with_capacity(members.len());
        for v in 0..num_nodes {
            for &u in &members[offsets[v]..offsets[v + 1]] {
                edge_src.push(u);
                edge_dst.push(v);
            }
        }
        ContextIndex {
            offsets,
            members,
            edge_src,
            edge_dst,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `C_v` as a sorted slice (contains `v`).
    pub fn context(&self, v: usize) -> &[usize] {
        &self.members[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Total context-edge count `E' = Σ_v |C_v|`.
    pub fn num_context_edges(&self) -> usize {
        self.members.len()
    }

    /// Source node `u` of every context edge `(u -> v)`, row order.
    pub fn edge_src(&self) -> &[usize] {
        &self.edge_src
    }

    /// Target node `v` of every context edge `(u -> v)`, row order.
    pub fn edge_dst(&self) -> &[usize] {
        &self.edge_dst
    }

    /// |C_v| per node, i.e. degree + 1.
    pub fn context_size(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    FixedFile,
    SeededRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSpec {
    pub per_class_train: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            per_class_train: 20,
            val_size: 500,
            test_size: 1000,
            seed: 0,
            mode: SplitMode::SeededRandom,
        }
    }
}

/// Immutable loaded graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Unique undirected edges as `(u, v)` with `u < v`, sorted.
    pub undirected_edges: Vec<(usize, usize)>,
    /// Symmetrized directed edge list: both `(u, v)` and `(v, u)`.
    pub edges: Vec<(usize, usize)>,
    pub ctx: ContextIndex,
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub splits: Option<Splits>,
    /// Whether `splits` came from a `splits.json` file.
    pub fixed_splits: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Normalize each feature row to sum one (standard for bag-of-words
    /// citation features).
    pub row_normalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { row_normalize: true }
    }
}

impl GraphBundle {
    pub fn degree(&self, v: usize) -> usize {
        self.ctx.context_size(v) - 1
    }

    pub fn splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| GraphError::InfeasibleSplit("no splits installed".into()))
    }

    /// Install train/val/test masks. Fixed-file mode requires splits already
    /// loaded from `splits.json`; seeded-random mode samples
    /// `per_class_train` nodes per class, then validation, then test nodes
    /// from the remainder.
    pub fn make_splits(&mut self, spec: &SplitSpec) -> Result<()> {
        match spec.mode {
            SplitMode::FixedFile => {
                if !self.fixed_splits {
                    return Err(GraphError::InfeasibleSplit(
                        "fixed-file mode requested but bundle has no splits.json".into(),
                    ));
                }
                Ok(())
            }
            SplitMode::SeededRandom => {
                let need = spec.per_class_train * self.num_classes;
                if need + spec.val_size + spec.test_size > self.num_nodes {
                    return Err(GraphError::InfeasibleSplit(format!(
                        "requested {} train + {} val + {} test from {} nodes",
                        need, spec.val_size, spec.test_size, self.num_nodes
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
                for (v, &y) in self.labels.iter().enumerate() {
                    by_class[y].push(v);
                }
                let mut train = Vec::new();
                for (c, nodes) in by_class.iter().enumerate() {
                    if nodes.len() < spec.per_class_train {
                        return Err(GraphError::InfeasibleSplit(format!(
                            "class {} has only {} nodes, need {}",
                            c,
                            nodes.len(),
                            spec.per_class_train
                        )));
                    }
                    let mut pool = nodes.clone();
                    pool.shuffle(&mut rng);
                    train.extend_from_slice(&pool[..spec.per_class_train]);
                }
                train.sort_unstable();
                let taken: BTreeSet<usize> = train.iter().copied().collect();
                let mut rest: Vec<usize> =
                    (0..self.num_nodes).filter(|v| !taken.contains(v)).collect();
                rest.shuffle(&mut rng);
                let val: Vec<usize> = {
                    let mut v: Vec<usize> = rest[..spec.val_size].to_vec();
                    v.sort_unstable();
                    v
                };
                let test: Vec<usize> = {
                    let mut t: Vec<usize> =
                        rest[spec.val_size..spec.val_size + spec.test_size].to_vec();
                    t.sort_unstable();
                    t
                };
                self.splits = Some(Splits { train, val, test });
                Ok(())
            }
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load and validate a bundle directory.
pub fn load_bundle(dir: &Path, opts: LoadOptions) -> Result<GraphBundle> {
    let meta_path = dir.join("meta.json");
    let meta: Meta =
        serde_json::from_str(&read_to_string(&meta_path)?).map_err(|e| GraphError::Json {
            path: meta_path.display().to_string(),
            source: e,
        })?;

    // edges
    let edges_path = dir.join("edges.tsv");
    let mut undirected = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in read_to_string(&edges_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.trim().parse().ok())
                .ok_or_else(|| GraphError::Parse {
                    file: "edges.tsv".into(),
                    line: lineno + 1,
                    msg: line.to_string(),
                })
        };
        let u = parse(it.next())?;
        let v = parse(it.next())?;
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        if u >= meta.num_nodes || v >= meta.num_nodes {
            return Err(GraphError::DanglingEdge(u, v, meta.num_nodes));
        }
        let key = (u.min(v), u.max(v));
        if !seen.insert(key) {
            return Err(GraphError::DuplicateEdge(key.0, key.1));
        }
        undirected.push(key);
    }
    undirected.sort_unstable();

    // features
    let feat_path = dir.join("features.tsv");
    let mut feat_data = Vec::with_capacity(meta.num_nodes * meta.feature_dim);
    let mut feat_rows = 0usize;
    for (lineno, line) in read_to_string(&feat_path)?.lines().enumerate() {
        let vals: Vec<f64> = line
            .split('\t')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GraphError::Parse {
                file: "features.tsv".into(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        if vals.len() != meta.feature_dim {
            return Err(GraphError::FeatureArity {
                file: "features.tsv".into(),
                line: lineno + 1,
                expected: meta.feature_dim,
                got: vals.len(),
            });
        }
        feat_data.extend(vals);
        feat_rows += 1;
    }
    if feat_rows != meta.num_nodes {
        return Err(GraphError::MetaMismatch(format!(
            "features.tsv has {} rows, meta says {}",
            feat_rows, meta.num_nodes
        )));
    }
    let mut features =
        Matrix::from_vec(meta.num_nodes, meta.feature_dim, feat_data).expect("sized above");
    if opts.row_normalize {
        for i in 0..meta.num_nodes {
            let sum: f64 = features.row(i).iter().sum();
            if sum != 0.0 {
                for x in features.row_mut(i) {
                    *x /= sum;
                }
            }
        }
    }

    // labels
    let labels_path = dir.join("labels.tsv");
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (lineno, line) in read_to_string(&labels_path)?.lines().enumerate() {
        let y: usize = line.trim().parse().map_err(|_| GraphError::Parse {
            file: "labels.tsv".into(),
            line: lineno + 1,
            msg: line.to_string(),
        })?;
        if y >= meta.num_classes {
            return Err(GraphError::LabelOutOfRange(y, meta.num_classes));
        }
        labels.push(y);
    }
    if labels.len() != meta.num_nodes {
        return Err(GraphError::MetaMismatch(format!(
            "labels.tsv has {} rows, meta says {}",
            labels.len(),
            meta.num_nodes
        )));
    }

    // optional splits
    let splits_path = dir.join("splits.json");
    let (splits, fixed) = if splits_path.exists() {
        let s: Splits = serde_json::from_str(&read_to_string(&splits_path)?).map_err(|e| {
            GraphError::Json {
                path: splits_path.display().to_string(),
                source: e,
            }
        })?;
        for part in [&s.train, &s.val, &s.test] {
            for &v in part {
                if v >= meta.num_nodes {
                    return Err(GraphError::DanglingEdge(v, v, meta.num_nodes));
                }
            }
        }
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != total {
            return Err(GraphError::InfeasibleSplit(
                "splits.json masks overlap".into(),
            ));
        }
        (Some(s), true)
    } else {
        (None, false)
    };

    let edges: Vec<(usize, usize)> = undirected
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .collect();
    let ctx = ContextIndex::build(meta.num_nodes, &undirected);

    Ok(GraphBundle {
        name: meta.name,
        num_nodes: meta.num_nodes,
        num_classes: meta.num_classes,
        feature_dim: meta.feature_dim,
        undirected_edges: undirected,
        edges,
        ctx,
        features,
        labels,
        splits,
        fixed_splits: fixed,
    })
}

/// Serialize a bundle back to the on-disk layout.
pub fn save_bundle(bundle: &GraphBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GraphError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(contents.as_bytes()).map_err(|e| GraphError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    let meta = Meta {
        name: bundle.name.clone(),
        num_nodes: bundle.num_nodes,
        num_classes: bundle.num_classes,
        feature_dim: bundle.feature_dim,
    };
    write(
        "meta.json",
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )?;
    let mut edges = String::new();
    for &(u, v) in &bundle.undirected_edges {
        edges.push_str(&format!("{}\t{}\n", u, v));
    }
    write("edges.tsv", edges)?;
    let mut feats = String::new();
    for i in 0..bundle.num_nodes {
        let row: Vec<String> = bundle.features.row(i).iter().map(|x| x.to_string()).collect();
        feats.push_str(&row.join("\t"));
        feats.push('\n');
    }
    write("features.tsv", feats)?;
    let mut labels = String::new();
    for &y in &bundle.labels {
        labels.push_str(&format!("{}\n", y));
    }
    write("labels.tsv", labels)?;
    if bundle.fixed_splits {
        if let Some(s) = &bundle.splits {
            write(
                "splits.json",
                serde_json::to_string_pretty(s).expect("splits serialize") + "\n",
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub undirected_edges: usize,
    pub raw_cite_lines: usize,
    pub dropped_unknown: usize,
    pub dropped_self: usize,
    pub dropped_duplicate: usize,
}

/// Convert the classic citation-network raw format (`.content` + `.cites`)
/// into a bundle directory.
///
/// Content lines are `id<TAB>f1..fd<TAB>label`; cites lines are
/// `cited<TAB>citing`. String ids map to dense indices in first-appearance
/// order, labels map alphabetically. Citations naming unknown ids are dropped
/// and counted.
pub fn ingest_content_cites(
    content_path: &Path,
    cites_path: &Path,
    out_dir: &Path,
    name: &str,
) -> Result<IngestReport> {
    let content = read_to_string(content_path)?;
    if content.trim().is_empty() {
        return Err(GraphError::EmptyInput(content_path.display().to_string()));
    }
    let mut id_index: std::collections::HashMap<String, usize> = Default::default();
    let mut feat_rows: Vec<Vec<f64>> = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut feature_dim = None;
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(GraphError::Parse {
                file: content_path.display().to_string(),
                line: lineno + 1,
                msg: "expected id, features, label".into(),
            });
        }
        let id = fields[0].to_string();
        let label = fields[fields.len() - 1].trim().to_string();
        let feats: Vec<f64> = fields[1..fields.len() - 1]
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| GraphError::Parse {
                file: content_path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        match feature_dim {
            None => feature_dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(GraphError::FeatureArity {
                    file: content_path.display().to_string(),
                    line: lineno + 1,
                    expected: d,
                    got: feats.len(),
                })
            }
            _ => {}
        }
        let idx = feat_rows.len();
        id_index.insert(id, idx);
        feat_rows.push(feats);
        label_names.push(label);
    }
    let num_nodes = feat_rows.len();
    let feature_dim = feature_dim.unwrap_or(0);

    let mut classes: Vec<String> = label_names.iter().cloned().collect();
    classes.sort();
    classes.dedup();
    let labels: Vec<usize> = label_names
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();

    let cites = read_to_string(cites_path)?;
    let mut report = IngestReport {
        num_nodes,
        num_classes: classes.len(),
        feature_dim,
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    let mut undirected = Vec::new();
    for (lineno, line) in cites.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let (a, b) = match (it.next(), it.next()) {
            (Some(a), Some(b)) => (a.trim(), b.trim()),
            _ => {
                return Err(GraphError::Parse {
                    file: cites_path.display().to_string(),
                    line: lineno + 1,
                    msg: line.to_string(),
                })
            }
        };
        report.raw_cite_lines += 1;
        let (Some(&u), Some(&v)) = (id_index.get(a), id_index.get(b)) else {
            report.dropped_unknown += 1;
            continue;
        };
        if u == v {
            report.dropped_self += 1;
            continue;
        }
        let key = (u.min(v), u.max(v));
        if !seen.insert(key) {
            report.dropped_duplicate += 1;
            continue;
        }
        undirected.push(key);
    }
    undirected.sort_unstable();
    report.undirected_edges = undirected.len();

    let features = Matrix::from_vec(
        num_nodes,
        feature_dim,
        feat_rows.into_iter().flatten().collect(),
    )
    .expect("arity validated");
    let edges: Vec<(usize, usize)> = undirected
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .collect();
    let ctx = ContextIndex::build(num_nodes, &undirected);
    let bundle = GraphBundle {
        name: name.to_string(),
        num_nodes,
        num_classes: classes.len(),
        feature_dim,
        undirected_edges: undirected,
        edges,
        ctx,
        features,
        labels,
        splits: None,
        fixed_splits: false,
    };
    save_bundle(&bundle, out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// Erdős–Rényi with edge probability `p`.
    Er { p: f64 },
    /// Two-block stochastic block model.
    Sbm { p_in: f64, p_out: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

/// Deterministic synthetic graph with class-informative Gaussian features.
pub fn synthetic_graph(spec: &SyntheticSpec) -> Result<GraphBundle> {
    let check_p = |p: f64| -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::InvalidProbability(p));
        }
        Ok(())
    };
    match spec.kind {
        SyntheticKind::Er { p } => check_p(p)?,
        SyntheticKind::Sbm { p_in, p_out } => {
            check_p(p_in)?;
            check_p(p_out)?;
        }
    }
    if spec.n < 2 {
        return Err(GraphError::EmptyInput("synthetic graph needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let num_classes = match spec.kind {
        SyntheticKind::Er { .. } => spec.num_classes.max(2),
        SyntheticKind::Sbm { .. } => 2,
    };

    let labels: Vec<usize> = match spec.kind {
        SyntheticKind::Er { .. } => (0..spec.n).map(|_| rng.gen_range(0..num_classes)).collect(),
        SyntheticKind::Sbm { .. } => (0..spec.n).map(|v| if v < spec.n / 2 { 0 } else { 1 }).collect(),
    };

    let mut undirected = Vec::new();
    for u in 0..spec.n {
        for v in (u + 1)..spec.n {
            let p = match spec.kind {
                SyntheticKind::Er { p } => p,
                SyntheticKind::Sbm { p_in, p_out } => {
                    if labels[u] == labels[v] {
                        p_in
                    } else {
                        p_out
                    }
                }
            };
            if rng.gen_range(0.0..1.0) < p {
                undirected.push((u, v));
            }
        }
    }

    // class-dependent means make the labels learnable from features alone
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut feat = Vec::with_capacity(spec.n * spec.feature_dim);
    for &y in &labels {
        for j in 0..spec.feature_dim {
            feat.push(means[y][j] + 0.4 * gaussian(&mut rng));
        }
    }
    let features = Matrix::from_vec(spec.n, spec.feature_dim, feat).expect("sized");
    let edges: Vec<(usize, usize)> = undirected
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .collect();
    let ctx = ContextIndex::build(spec.n, &undirected);
    Ok(GraphBundle {
        name: match spec.kind {
            SyntheticKind::Er { p } => format!("synthetic-er-{}-{p}", spec.n),
            SyntheticKind::Sbm { p_in, p_out } => {
                format!("synthetic-sbm-{}-{p_in}-{p_out}", spec.n)
            }
        },
        num_nodes: spec.n,
        num_classes,
        feature_dim: spec.feature_dim,
        undirected_edges: undirected,
        edges,
        ctx,
        features,
        labels,
        splits: None,
        fixed_splits: false,
    })
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
