//! Response matrices, standardization, PCA and the summaries built on top of them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BigramStats;
use crate::estimators::{mean, std_error, PerTokenEstimate, SusceptibilityEstimate, TokenKey};
use crate::patterns::{classify_token, LabelSet, PatternConfig, PatternError, PatternFrequencies, TokenDecoder};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no estimates supplied")]
    Empty,
    #[error("duplicate cell ({row}, {component})")]
    DuplicateCell { row: String, component: String },
    #[error("missing cell ({row}, {component})")]
    MissingCell { row: String, component: String },
    #[error("dataset {dataset}: requested {requested} tokens, {available} available")]
    SampleSize { dataset: String, requested: usize, available: usize },
    #[error("dataset {dataset}: component {component} covers different tokens")]
    TokenMismatch { dataset: String, component: String },
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("k = {k} outside 1..={max}")]
    ComponentCount { k: usize, max: usize },
    #[error("matrix is not standardized")]
    NotStandardized,
    #[error("matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("checkpoint {0} has different component columns")]
    ColumnMismatch(String),
    #[error("checkpoint {checkpoint} lacks dataset {dataset}")]
    MissingDataset { checkpoint: String, dataset: String },
    #[error("principal component {index} not among the {k} computed")]
    PcIndex { index: usize, k: usize },
    #[error("PCA has {pca} score rows, matrix has {matrix}")]
    RowMismatch { pca: usize, matrix: usize },
    #[error("quantile {0} must lie in (0, 1]")]
    Quantile(f64),
    #[error("selection is empty")]
    EmptySelection,
    #[error("dataset {dataset} has {rows} rows, need at least 2")]
    DatasetTooSmall { dataset: String, rows: usize },
    #[error("row has no token provenance")]
    NoProvenance,
    #[error("no contexts for dataset {0}")]
    UnknownDataset(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Provenance of one response-matrix row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowLabel {
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<TokenKey>,
}

impl RowLabel {
    pub fn dataset(name: &str) -> Self {
        Self {
            dataset: name.to_string(),
            checkpoint: None,
            token: None,
        }
    }

    fn describe(&self) -> String {
        let mut s = self.dataset.clone();
        if let Some(c) = &self.checkpoint {
            let _ = write!(s, "@{c}");
        }
        if let Some(t) = &self.token {
            let _ = write!(s, "[{}:{}]", t.context, t.position);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub rows: Vec<RowLabel>,
    pub cols: Vec<String>,
    pub values: DMatrix<f64>,
    pub standardized: bool,
    pub col_means: Vec<f64>,
    pub col_stds: Vec<f64>,
    /// Columns with zero spread; centered but not scaled.
    pub constant_cols: Vec<bool>,
}

impl ResponseMatrix {
    /// Wraps raw values; every entry must be finite.
    pub fn new(rows: Vec<RowLabel>, cols: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        assert_eq!(values.shape(), (rows.len(), cols.len()), "labels must match matrix shape");
        if let Some((i, j)) = (0..values.nrows())
            .flat_map(|i| (0..values.ncols()).map(move |j| (i, j)))
            .find(|&(i, j)| !values[(i, j)].is_finite())
        {
            return Err(AnalysisError::NonFinite(i, j));
        }
        let c = cols.len();
        Ok(Self {
            rows,
            cols,
            values,
            standardized: false,
            col_means: vec![0.0; c],
            col_stds: vec![1.0; c],
            constant_cols: vec![false; c],
        })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ROW_HEADER);
        for c in &self.cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&row_fields(r));
            for j in 0..self.ncols() {
                let _ = write!(out, ",{}", self.values[(i, j)]);
            }
            out.push('\n');
        }
        out
    }
}

const ROW_HEADER: &str = "dataset,checkpoint,context,position,token";

fn row_fields(r: &RowLabel) -> String {
    let (c, p, t) = match &r.token {
        Some(k) => (k.context.to_string(), k.position.to_string(), k.token.to_string()),
        None => Default::default(),
    };
    format!("{},{},{c},{p},{t}", r.dataset, r.checkpoint.as_deref().unwrap_or(""))
}

fn push_unique(list: &mut Vec<String>, s: &str) {
    if !list.iter().any(|x| x == s) {
        list.push(s.to_string());
    }
}

/// One row per probe dataset, one column per component, in first-seen order.
pub fn build_response_matrix(estimates: &[SusceptibilityEstimate]) -> Result<ResponseMatrix> {
    if estimates.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (mut datasets, mut comps) = (Vec::new(), Vec::new());
    for e in estimates {
        push_unique(&mut datasets, &e.probe);
        push_unique(&mut comps, &e.component);
    }
    let mut cells: Vec<Vec<Option<f64>>> = vec![vec![None; comps.len()]; datasets.len()];
    for e in estimates {
        let i = datasets.iter().position(|d| *d == e.probe).unwrap();
        let j = comps.iter().position(|c| *c == e.component).unwrap();
        if cells[i][j].replace(e.value).is_some() {
            return Err(AnalysisError::DuplicateCell {
                row: e.probe.clone(),
                component: e.component.clone(),
            });
        }
    }
    let mut values = DMatrix::zeros(datasets.len(), comps.len());
    for (i, row) in cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            values[(i, j)] = cell.ok_or_else(|| AnalysisError::MissingCell {
                row: datasets[i].clone(),
                component: comps[j].clone(),
            })?;
        }
    }
    ResponseMatrix::new(datasets.iter().map(|d| RowLabel::dataset(d)).collect(), comps, values)
}

/// Rows are `sample_size` token instances per dataset, drawn without
/// replacement and kept in instance order.
pub fn build_pertoken_matrix(per_token: &[PerTokenEstimate], sample_size: usize, seed: u64) -> Result<ResponseMatrix> {
    if per_token.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let (mut datasets, mut comps) = (Vec::new(), Vec::new());
    for e in per_token {
        push_unique(&mut datasets, &e.dataset);
        push_unique(&mut comps, &e.component);
    }
    let mut grid: BTreeMap<(usize, usize), &PerTokenEstimate> = BTreeMap::new();
    for e in per_token {
        let key = (
            datasets.iter().position(|d| *d == e.dataset).unwrap(),
            comps.iter().position(|c| *c == e.component).unwrap(),
        );
        if grid.insert(key, e).is_some() {
            return Err(AnalysisError::DuplicateCell {
                row: e.dataset.clone(),
                component: e.component.clone(),
            });
        }
    }

    let mut rows = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (d, name) in datasets.iter().enumerate() {
        let cell = |j: usize| {
            grid.get(&(d, j)).copied().ok_or_else(|| AnalysisError::MissingCell {
                row: name.clone(),
                component: comps[j].clone(),
            })
        };
        let first = cell(0)?;
        for j in 1..comps.len() {
            let other = cell(j)?;
            let same = other.tokens.len() == first.tokens.len()
                && other.tokens.iter().zip(&first.tokens).all(|(a, b)| a.key == b.key);
            if !same {
                return Err(AnalysisError::TokenMismatch {
                    dataset: name.clone(),
                    component: comps[j].clone(),
                });
            }
        }
        let available = first.tokens.len();
        if sample_size > available || sample_size == 0 {
            return Err(AnalysisError::SampleSize {
                dataset: name.clone(),
                requested: sample_size,
                available,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64);
        let mut picked = sample(&mut rng, available, sample_size).into_vec();
        picked.sort_unstable();
        for k in picked {
            rows.push(RowLabel {
                dataset: name.clone(),
                checkpoint: None,
                token: Some(first.tokens[k].key),
            });
            data.push((0..comps.len()).map(|j| grid[&(d, j)].tokens[k].value).collect());
        }
    }
    let values = DMatrix::from_fn(rows.len(), comps.len(), |i, j| data[i][j]);
    ResponseMatrix::new(rows, comps, values)
}

/// Centers every column and scales it to unit population standard deviation.
/// Columns with zero spread are centered only and flagged.
pub fn standardize_columns(x: &ResponseMatrix) -> Result<ResponseMatrix> {
    let n = x.nrows();
    if n < 2 {
        return Err(AnalysisError::TooFewRows(n));
    }
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.values.column(j).iter().copied().collect();
        let m = mean(&col);
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        let constant = sd <= 1e-12 * m.abs().max(1.0);
        let scale = if constant { 1.0 } else { sd };
        for i in 0..n {
            out.values[(i, j)] = (x.values[(i, j)] - m) / scale;
        }
        out.col_means[j] = m;
        out.col_stds[j] = scale;
        out.constant_cols[j] = constant;
    }
    out.standardized = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// All singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// `U·Σ` restricted to the first k components, one row per matrix row.
    pub scores: DMatrix<f64>,
    /// First k rows of `Vᵀ`; the largest-magnitude entry of each row is positive.
    pub loadings: DMatrix<f64>,
    /// Share of the total squared singular values for each of the first k components.
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaResult {
    pub fn k(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.scores * &self.loadings
    }

    pub fn score(&self, row: usize, pc: usize) -> f64 {
        self.scores[(row, pc)]
    }

    fn check_pc(&self, pc: usize) -> Result<()> {
        if pc >= self.k() {
            return Err(AnalysisError::PcIndex { index: pc, k: self.k() });
        }
        Ok(())
    }

    /// Coordinates of an already transformed row in the first k components.
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|p| row.iter().enumerate().map(|(j, v)| v * self.loadings[(p, j)]).sum())
            .collect()
    }

    pub fn variance_csv(&self) -> String {
        let mut out = String::from("pc,singular_value,explained_variance_ratio\n");
        for (p, r) in self.explained_variance_ratio.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", p + 1, self.singular_values[p], r);
        }
        out
    }

    pub fn loadings_csv(&self, cols: &[String]) -> String {
        let mut out = String::from("pc");
        for c in cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for p in 0..self.k() {
            let _ = write!(out, "{}", p + 1);
            for j in 0..self.loadings.ncols() {
                let _ = write!(out, ",{}", self.loadings[(p, j)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn scores_csv(&self, rows: &[RowLabel]) -> String {
        let mut out = String::from(ROW_HEADER);
        for p in 0..self.k() {
            let _ = write!(out, ",pc{}", p + 1);
        }
        out.push('\n');
        for (i, r) in rows.iter().enumerate() {
            out.push_str(&row_fields(r));
            for p in 0..self.k() {
                let _ = write!(out, ",{}", self.scores[(i, p)]);
            }
            out.push('\n');
        }
        out
    }
}

/// Thin SVD of an arbitrary matrix, keeping the first `k` components.
pub fn pca_matrix(x: &DMatrix<f64>, k: usize) -> Result<PcaResult> {
    let max = x.nrows().min(x.ncols());
    if k == 0 || k > max {
        return Err(AnalysisError::ComponentCount { k, max });
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v_t = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut scores = DMatrix::zeros(x.nrows(), k);
    let mut loadings = DMatrix::zeros(k, x.ncols());
    for (p, &i) in order.iter().take(k).enumerate() {
        let row = v_t.row(i);
        let lead = (0..row.len()).fold(0, |best, j| if row[j].abs() > row[best].abs() { j } else { best });
        let sign = if row[lead] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..x.ncols() {
            loadings[(p, j)] = sign * row[j];
        }
        for r in 0..x.nrows() {
            scores[(r, p)] = sign * u[(r, i)] * singular_values[p];
        }
    }
    let explained_variance_ratio = singular_values
        .iter()
        .take(k)
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();
    Ok(PcaResult {
        singular_values,
        scores,
        loadings,
        explained_variance_ratio,
    })
}

/// PCA of a standardized response matrix.
pub fn pca(x: &ResponseMatrix, k: usize) -> Result<PcaResult> {
    if !x.standardized {
        return Err(AnalysisError::NotStandardized);
    }
    pca_matrix(&x.values, k)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub dataset: String,
    pub checkpoint: String,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryPca {
    /// The stacked matrix after standardization.
    pub matrix: ResponseMatrix,
    pub pca: PcaResult,
    pub projections: Vec<TrajectoryPoint>,
}

impl TrajectoryPca {
    /// Projects a raw response vector with the stacked matrix's column statistics.
    pub fn project(&self, raw: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(j, v)| (v - self.matrix.col_means[j]) / self.matrix.col_stds[j])
            .collect();
        self.pca.project(&z)
    }

    pub fn projections_csv(&self) -> String {
        let mut out = String::from("dataset,checkpoint");
        for p in 0..self.pca.k() {
            let _ = write!(out, ",pc{}", p + 1);
        }
        out.push('\n');
        for t in &self.projections {
            let _ = write!(out, "{},{}", t.dataset, t.checkpoint);
            for c in &t.coords {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Stacks each dataset's rows across the ordered checkpoints, standardizes the
/// stack and projects every (dataset, checkpoint) vector into the shared PCs.
pub fn trajectory_pca(per_checkpoint: &[(String, ResponseMatrix)], k: usize) -> Result<TrajectoryPca> {
    let (_, first) = per_checkpoint.first().ok_or(AnalysisError::Empty)?;
    let cols = first.cols.clone();
    for (name, m) in per_checkpoint {
        if m.cols != cols {
            return Err(AnalysisError::ColumnMismatch(name.clone()));
        }
    }
    let mut datasets = Vec::new();
    for r in &first.rows {
        push_unique(&mut datasets, &r.dataset);
    }

    let mut rows = Vec::new();
    let mut raw: Vec<Vec<f64>> = Vec::new();
    for d in &datasets {
        for (name, m) in per_checkpoint {
            let i = m.rows.iter().position(|r| r.dataset == *d).ok_or_else(|| AnalysisError::MissingDataset {
                checkpoint: name.clone(),
                dataset: d.clone(),
            })?;
            rows.push(RowLabel {
                dataset: d.clone(),
                checkpoint: Some(name.clone()),
                token: None,
            });
            raw.push(m.row(i));
        }
    }
    let stacked = ResponseMatrix::new(rows, cols.clone(), DMatrix::from_fn(raw.len(), cols.len(), |i, j| raw[i][j]))?;
    let matrix = standardize_columns(&stacked)?;
    let pca = pca(&matrix, k)?;
    let mut out = TrajectoryPca {
        matrix,
        pca,
        projections: Vec::new(),
    };
    out.projections = out
        .matrix
        .rows
        .iter()
        .zip(&raw)
        .map(|(r, v)| TrajectoryPoint {
            dataset: r.dataset.clone(),
            checkpoint: r.checkpoint.clone().unwrap_or_default(),
            coords: out.project(v),
        })
        .collect();
    Ok(out)
}

/// How many rows go into each bucket of a top-token profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopSelection {
    pub quantile: f64,
    pub min_tokens: usize,
}

impl Default for TopSelection {
    fn default() -> Self {
        Self {
            quantile: 0.01,
            min_tokens: 50,
        }
    }
}

impl TopSelection {
    /// `max(ceil(quantile * n), min_tokens)`, capped at `n`.
    pub fn count(&self, n: usize) -> Result<usize> {
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(AnalysisError::Quantile(self.quantile));
        }
        let c = ((self.quantile * n as f64).ceil() as usize).max(self.min_tokens).min(n);
        if c == 0 {
            return Err(AnalysisError::EmptySelection);
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopTokenProfile {
    pub pc_index: usize,
    pub selected: usize,
    pub positive: PatternFrequencies,
    pub negative: PatternFrequencies,
}

impl TopTokenProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pc,bucket,pattern,fraction,selected\n");
        for (bucket, f) in [("positive", &self.positive), ("negative", &self.negative)] {
            for (l, v) in &f.fractions {
                let _ = writeln!(out, "{},{bucket},{},{v},{}", self.pc_index + 1, l.name(), self.selected);
            }
        }
        out
    }
}

fn ensure_rows(matrix: &ResponseMatrix, pca: &PcaResult) -> Result<()> {
    if pca.scores.nrows() != matrix.nrows() {
        return Err(AnalysisError::RowMismatch {
            pca: pca.scores.nrows(),
            matrix: matrix.nrows(),
        });
    }
    Ok(())
}

/// Pattern fractions among the rows with the largest and the smallest scores
/// on principal component `pc_index` (zero-based).
pub fn top_token_pattern_profile<F>(
    pc_index: usize,
    matrix: &ResponseMatrix,
    pca: &PcaResult,
    classify: F,
    selection: TopSelection,
) -> Result<TopTokenProfile>
where
    F: Fn(&RowLabel) -> Result<LabelSet>,
{
    pca.check_pc(pc_index)?;
    ensure_rows(matrix, pca)?;
    let n = matrix.nrows();
    let count = selection.count(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pca.score(b, pc_index).total_cmp(&pca.score(a, pc_index)).then(a.cmp(&b)));
    let labels = |idx: &[usize]| -> Result<Vec<LabelSet>> { idx.iter().map(|&i| classify(&matrix.rows[i])).collect() };
    let top = labels(&order[..count])?;
    order.sort_by(|&a, &b| pca.score(a, pc_index).total_cmp(&pca.score(b, pc_index)).then(a.cmp(&b)));
    let bottom = labels(&order[..count])?;
    Ok(TopTokenProfile {
        pc_index,
        selected: count,
        positive: PatternFrequencies::from_label_sets(&top),
        negative: PatternFrequencies::from_label_sets(&bottom),
    })
}

/// A row classifier that looks each token up in its dataset's probe contexts.
pub fn context_classifier<'a>(
    contexts: &'a BTreeMap<String, Vec<Vec<u32>>>,
    stats: &'a BigramStats,
    decoder: &'a TokenDecoder,
    config: &'a PatternConfig,
) -> impl Fn(&RowLabel) -> Result<LabelSet> + 'a {
    move |row| {
        let key = row.token.ok_or(AnalysisError::NoProvenance)?;
        let ctxs = contexts
            .get(&row.dataset)
            .ok_or_else(|| AnalysisError::UnknownDataset(row.dataset.clone()))?;
        let ctx = ctxs.get(key.context).ok_or_else(|| AnalysisError::UnknownDataset(row.describe()))?;
        Ok(classify_token(ctx, key.position, stats, decoder, config)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetContribution {
    pub dataset: String,
    pub rows: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Mean PC score and its standard error over each dataset's rows.
pub fn dataset_pc_contributions(pc_index: usize, matrix: &ResponseMatrix, pca: &PcaResult) -> Result<Vec<DatasetContribution>> {
    pca.check_pc(pc_index)?;
    ensure_rows(matrix, pca)?;
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, r) in matrix.rows.iter().enumerate() {
        let s = pca.score(i, pc_index);
        match groups.iter_mut().find(|(d, _)| *d == r.dataset) {
            Some((_, v)) => v.push(s),
            None => groups.push((r.dataset.clone(), vec![s])),
        }
    }
    groups
        .into_iter()
        .map(|(dataset, v)| {
            let se = std_error(&v).ok_or_else(|| AnalysisError::DatasetTooSmall {
                dataset: dataset.clone(),
                rows: v.len(),
            })?;
            Ok(DatasetContribution {
                rows: v.len(),
                mean: mean(&v),
                std_error: se,
                dataset,
            })
        })
        .collect()
}

pub fn contributions_to_csv(pc_index: usize, rows: &[DatasetContribution]) -> String {
    let mut out = String::from("pc,dataset,rows,mean,std_error\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", pc_index + 1, r.dataset, r.rows, r.mean, r.std_error);
    }
    out
}
