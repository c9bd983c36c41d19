//! Top-N ranking metrics on the sequence-only inference path, and a 2-D SVD
//! projection of item embeddings.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::corpus::{write_file, EvalCase, TrainSample, Vocab};
use crate::error::{Error, Result};
use crate::model::{current_interest, ForwardOptions, ModelParams};

/// Ranks items by `scores` descending (ties to the smaller index) after
/// removing `exclude`, and returns at most `n` of them.
pub fn top_n_scores(scores: ArrayView1<'_, f64>, n: usize, exclude: &[usize]) -> Vec<usize> {
    let mut excluded = exclude.to_vec();
    excluded.sort_unstable();
    let mut cands: Vec<usize> = (0..scores.len())
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n < cands.len() {
        cands.select_nth_unstable_by(n, by_rank);
        cands.truncate(n);
    }
    cands.sort_unstable_by(by_rank);
    cands
}

/// Items ranked by inner product with `query`.
pub fn top_n(query: ArrayView1<'_, f64>, item_emb: ArrayView2<'_, f64>, n: usize, exclude: &[usize]) -> Vec<usize> {
    top_n_scores(item_emb.dot(&query).view(), n, exclude)
}

fn hits<'a>(ranked: &'a [usize], gt: &[usize], n: usize) -> impl Iterator<Item = usize> + 'a {
    let gt = gt.to_vec();
    ranked
        .iter()
        .take(n)
        .enumerate()
        .filter(move |(_, item)| gt.contains(item))
        .map(|(rank, _)| rank)
}

pub fn recall_at(ranked: &[usize], gt: &[usize], n: usize) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    hits(ranked, gt, n).count() as f64 / gt.len() as f64
}

/// Binary-relevance NDCG with the ideal list holding `min(n, |gt|)` hits.
pub fn ndcg_at(ranked: &[usize], gt: &[usize], n: usize) -> f64 {
    let gain = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = hits(ranked, gt, n).map(gain).sum();
    let idcg: f64 = (0..n.min(gt.len())).map(gain).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn hit_at(ranked: &[usize], gt: &[usize], n: usize) -> f64 {
    if hits(ranked, gt, n).next().is_some() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricValues {
    pub cutoff: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub hit: f64,
}

/// Per-user averaged metrics, stored as fractions in `[0, 1]`. CSV output
/// scales them by 100.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub values: Vec<MetricValues>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl MetricsReport {
    pub fn at(&self, cutoff: usize) -> Option<&MetricValues> {
        self.values.iter().find(|v| v.cutoff == cutoff)
    }

    pub fn recall(&self, cutoff: usize) -> f64 {
        self.at(cutoff).map_or(0.0, |v| v.recall)
    }

    /// `metric,cutoff,value` rows, values in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,cutoff,value\n");
        for v in &self.values {
            for (name, x) in [("recall", v.recall), ("ndcg", v.ndcg), ("hit", v.hit)] {
                let _ = writeln!(out, "{name},{},{:.6}", v.cutoff, 100.0 * x);
            }
        }
        let _ = writeln!(out, "evaluated_users,0,{}", self.evaluated);
        let _ = writeln!(out, "skipped_users,0,{}", self.skipped);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub cutoffs: Vec<usize>,
    /// Keep already-consumed prefix items among the candidates.
    pub allow_repeats: bool,
    pub forward: ForwardOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            cutoffs: vec![20, 50],
            allow_repeats: false,
            forward: ForwardOptions::default(),
        }
    }
}

/// Scores each case with its current interest only; no user embedding or
/// graph feature is involved, so unseen users are handled the same way.
pub fn evaluate(params: &ModelParams, cases: &[EvalCase], skipped: usize, opts: &EvalOptions) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Precondition("no evaluation cases".into()));
    }
    if opts.cutoffs.is_empty() || opts.cutoffs.contains(&0) {
        return Err(Error::Param("cutoffs must be non-empty and positive".into()));
    }
    let max_n = *opts.cutoffs.iter().max().expect("non-empty");
    let mut sums = vec![(0.0, 0.0, 0.0); opts.cutoffs.len()];
    for case in cases {
        let (is, _) = current_interest(params, case.encoding_prefix(), opts.forward)?;
        let exclude: &[usize] = if opts.allow_repeats { &[] } else { &case.prefix };
        let ranked = top_n(is.view(), params.item_emb.view(), max_n, exclude);
        for (acc, &n) in sums.iter_mut().zip(&opts.cutoffs) {
            acc.0 += recall_at(&ranked, &case.ground_truth, n);
            acc.1 += ndcg_at(&ranked, &case.ground_truth, n);
            acc.2 += hit_at(&ranked, &case.ground_truth, n);
        }
    }
    let count = cases.len() as f64;
    Ok(MetricsReport {
        values: opts
            .cutoffs
            .iter()
            .zip(sums)
            .map(|(&cutoff, (r, nd, h))| MetricValues {
                cutoff,
                recall: r / count,
                ndcg: nd / count,
                hit: h / count,
            })
            .collect(),
        evaluated: cases.len(),
        skipped,
    })
}

/// Turns training samples into single-target cases (next-item accuracy on
/// the training data).
pub fn next_item_cases(samples: &[TrainSample]) -> Vec<EvalCase> {
    samples
        .iter()
        .map(|s| EvalCase {
            user: s.user,
            prefix: s.prefix.clone(),
            ground_truth: vec![s.target],
        })
        .collect()
}

/// Item embeddings projected onto their top two right-singular directions.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdProjection {
    pub coords: Array2<f64>,
    pub singular_values: [f64; 2],
    pub warnings: Vec<String>,
}

/// Relative size below which a singular value is treated as zero.
const RANK_TOL: f64 = 1e-10;

/// Projects rows of `x` on the two leading eigenvectors of `xᵀx`.
pub fn svd_project(x: ArrayView2<'_, f64>) -> Result<SvdProjection> {
    if x.nrows() < 2 {
        return Err(Error::Precondition("need at least two items".into()));
    }
    let d = x.ncols();
    let gram = x.t().dot(&x);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| gram[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    // Singular values are re-measured as norms of the projected columns;
    // square roots of Gram eigenvalues lose half the precision near zero.
    let mut singular_values = [0.0; 2];
    let mut coords = Array2::zeros((x.nrows(), 2));
    for k in 0..2.min(d) {
        let v = eig.eigenvectors.column(order[k]);
        let dir = ndarray::Array1::from_iter(v.iter().copied());
        let col = x.dot(&dir);
        singular_values[k] = col.dot(&col).sqrt();
        coords.column_mut(k).assign(&col);
    }
    let mut warnings = Vec::new();
    for k in 0..2 {
        let s = singular_values[k];
        if s == 0.0 || s <= RANK_TOL * singular_values[0] {
            warnings.push(format!("rank-deficient embeddings: component {} set to zero", k + 1));
            coords.column_mut(k).fill(0.0);
            singular_values[k] = 0.0;
        }
    }
    Ok(SvdProjection {
        coords,
        singular_values,
        warnings,
    })
}

/// Writes `item-id<TAB>x<TAB>y` per item and returns the projection.
pub fn svd_export(item_emb: ArrayView2<'_, f64>, items: &Vocab, path: &Path) -> Result<SvdProjection> {
    if items.len() != item_emb.nrows() {
        return Err(Error::Shape(format!(
            "{} item ids for {} embedding rows",
            items.len(),
            item_emb.nrows()
        )));
    }
    let proj = svd_project(item_emb)?;
    let mut out = String::new();
    for (i, row) in proj.coords.rows().into_iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{}", items.id(i), row[0], row[1]);
    }
    write_file(path, out.as_bytes())?;
    Ok(proj)
}
