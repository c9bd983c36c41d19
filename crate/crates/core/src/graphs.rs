//! Interaction matrix, the three graph views and weight-free propagation.
//!
//! All graphs are built from training users only. Co-action graphs keep the
//! strongest `k` neighbors per node and are then symmetrized by union, taking
//! the larger weight when both directions survive.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Which index ranges of a view hold users and which hold items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeLayout {
    pub users: Range<usize>,
    pub items: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphView {
    pub adjacency: SparseMatrix,
    /// `w_ij / sqrt(d_i d_j)` on the adjacency's sparsity pattern.
    pub normalized: SparseMatrix,
    pub layout: NodeLayout,
    isolated: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

impl GraphView {
    /// Wraps a symmetric adjacency and computes its normalization.
    pub fn from_adjacency(adjacency: SparseMatrix, layout: NodeLayout) -> Result<Self> {
        if adjacency.rows() != adjacency.cols() {
            return Err(Error::Shape(format!(
                "adjacency must be square, got {}x{}",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Precondition("adjacency is not symmetric".into()));
        }
        let degree = adjacency.row_sums();
        let normalized = adjacency.map_values(|i, j, w| w / (degree[i] * degree[j]).sqrt());
        let isolated = degree.iter().map(|&d| d == 0.0).collect();
        Ok(GraphView {
            adjacency,
            normalized,
            layout,
            isolated,
        })
    }

    pub fn size(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.adjacency.row_sums()
    }

    pub fn is_isolated(&self, node: usize) -> bool {
        self.isolated[node]
    }

    /// Writes `i<TAB>j<TAB>weight` lines with node labels in place of dense
    /// indices, sorted, so that the file does not depend on index order.
    pub fn dump(&self, path: &Path, label: impl Fn(usize) -> String) -> Result<()> {
        let mut lines: Vec<(String, String, f64)> = self
            .adjacency
            .entries()
            .map(|(i, j, w)| (label(i), label(j), w))
            .collect();
        lines.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        let f = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = BufWriter::new(f);
        for (i, j, w) in lines {
            writeln!(out, "{i}\t{j}\t{w}")
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        out.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// `|U| x |V|` counts of each item in each training user's sequence.
pub fn interaction_matrix(corpus: &Corpus) -> Result<SparseMatrix> {
    let train = corpus.users_in(Split::Train);
    if train.is_empty() {
        return Err(Error::Precondition("corpus has no training users".into()));
    }
    SparseMatrix::from_triplets(
        corpus.num_users(),
        corpus.num_items(),
        train
            .into_iter()
            .flat_map(|u| corpus.sequences[u].iter().map(move |&i| (u, i, 1.0))),
    )
}

/// Bipartite graph over `|U| + |V|` nodes, users first.
pub fn user_item_graph(m: &SparseMatrix) -> Result<GraphView> {
    let (nu, nv) = (m.rows(), m.cols());
    let mt = m.transpose();
    let rows = (0..nu)
        .map(|u| {
            let (idx, val) = m.row(u);
            idx.iter().zip(val).map(|(&i, &w)| (nu + i, w)).collect()
        })
        .chain((0..nv).map(|i| {
            let (idx, val) = mt.row(i);
            idx.iter().zip(val).map(|(&u, &w)| (u, w)).collect()
        }));
    GraphView::from_adjacency(
        SparseMatrix::from_rows(nu + nv, rows),
        NodeLayout {
            users: 0..nu,
            items: nu..nu + nv,
        },
    )
}

/// `M Mᵀ` (user side) or `Mᵀ M` (item side). The diagonal is dropped unless
/// `keep_diagonal` is set.
pub fn co_action_matrix(m: &SparseMatrix, side: Side, keep_diagonal: bool) -> SparseMatrix {
    let mt = m.transpose();
    match side {
        Side::User => m.gram(&mt, keep_diagonal),
        Side::Item => mt.gram(m, keep_diagonal),
    }
}

/// Keeps each row's `k` heaviest entries (ties go to the smaller column),
/// then symmetrizes by union with max weight.
pub fn topk_filter(c: &SparseMatrix, k: usize, layout: NodeLayout) -> Result<GraphView> {
    if k < 1 {
        return Err(Error::Param("top-k neighbors must be at least 1".into()));
    }
    if c.rows() != c.cols() {
        return Err(Error::Shape(format!(
            "co-action matrix must be square, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    let n = c.rows();
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for r in 0..n {
        let (idx, val) = c.row(r);
        let mut row: Vec<(usize, f64)> = idx.iter().copied().zip(val.iter().copied()).collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        row.truncate(k);
        kept.extend(row.into_iter().map(|(col, w)| (r, col, w)));
    }
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(r, col, w) in &kept {
        rows[r].push((col, w));
        rows[col].push((r, w));
    }
    let rows = rows.into_iter().map(|mut row| {
        row.sort_by_key(|&(col, _)| col);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (col, w) in row {
            match merged.last_mut() {
                Some(last) if last.0 == col => last.1 = last.1.max(w),
                _ => merged.push((col, w)),
            }
        }
        merged
    });
    GraphView::from_adjacency(SparseMatrix::from_rows(n, rows), layout)
}

/// Applies the normalized adjacency `layers` times. Isolated nodes keep their
/// input row.
pub fn propagate(view: &GraphView, x: ArrayView2<'_, f64>, layers: usize) -> Result<Array2<f64>> {
    if x.nrows() != view.size() {
        return Err(Error::Shape(format!(
            "features have {} rows, graph has {} nodes",
            x.nrows(),
            view.size()
        )));
    }
    let mut cur = x.to_owned();
    for _ in 0..layers {
        let mut next = view.normalized.mul_dense(cur.view())?;
        for (node, &iso) in view.isolated.iter().enumerate() {
            if iso {
                next.row_mut(node).assign(&cur.row(node));
            }
        }
        cur = next;
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    pub topk_neighbors: usize,
    pub keep_diagonal: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            topk_neighbors: 50,
            keep_diagonal: false,
        }
    }
}

/// The three graph views used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Graphs {
    pub user_item: GraphView,
    pub user_user: GraphView,
    pub item_item: GraphView,
}

impl Graphs {
    pub fn build(corpus: &Corpus, opts: GraphOptions) -> Result<Self> {
        let m = interaction_matrix(corpus)?;
        let (nu, nv) = (m.rows(), m.cols());
        let user_item = user_item_graph(&m)?;
        let user_user = topk_filter(
            &co_action_matrix(&m, Side::User, opts.keep_diagonal),
            opts.topk_neighbors,
            NodeLayout {
                users: 0..nu,
                items: nu..nu,
            },
        )?;
        let item_item = topk_filter(
            &co_action_matrix(&m, Side::Item, opts.keep_diagonal),
            opts.topk_neighbors,
            NodeLayout {
                users: 0..0,
                items: 0..nv,
            },
        )?;
        Ok(Graphs {
            user_item,
            user_user,
            item_item,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_user.size()
    }

    pub fn num_items(&self) -> usize {
        self.item_item.size()
    }

    /// Writes `user_item.tsv`, `user_user.tsv` and `item_item.tsv` into `dir`,
    /// labelling nodes with their original ids.
    pub fn dump(&self, corpus: &Corpus, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let nu = corpus.num_users();
        self.user_item.dump(&dir.join("user_item.tsv"), |n| {
            if n < nu {
                format!("u:{}", corpus.users.id(n))
            } else {
                format!("i:{}", corpus.items.id(n - nu))
            }
        })?;
        self.user_user
            .dump(&dir.join("user_user.tsv"), |n| corpus.users.id(n).to_string())?;
        self.item_item
            .dump(&dir.join("item_item.tsv"), |n| corpus.items.id(n).to_string())
    }
}

/// Splits a stacked `[users; items]` matrix back into its two blocks.
pub fn split_rows(x: &Array2<f64>, users: usize) -> (Array2<f64>, Array2<f64>) {
    (
        x.slice(s![..users, ..]).to_owned(),
        x.slice(s![users.., ..]).to_owned(),
    )
}
