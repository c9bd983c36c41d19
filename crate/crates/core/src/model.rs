//! Trainable parameters and the forward pieces: sequence attention (current
//! interest), graph-feature attention (general interest), node features from
//! the three views and the two projection heads.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::corpus::MAX_PREFIX;
use crate::error::{Error, Result};
use crate::graphs::{propagate, split_rows, Graphs};

/// Logit assigned to padded positions before the softmax.
pub const MASK_LOGIT: f64 = -1e9;

/// Two-layer MLP `W2 · elu(W1 x + b1) + b2`, all `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `|U| x d`
    pub user_emb: Array2<f64>,
    /// `|V| x d`
    pub item_emb: Array2<f64>,
    /// `MAX_PREFIX x d`
    pub pos_emb: Array2<f64>,
    /// `4d x d`
    pub attn_w1: Array2<f64>,
    /// `4d`
    pub attn_w2: Array1<f64>,
    /// `d x d`
    pub general_w3: Array2<f64>,
    pub interest_head: ProjectionHead,
    pub feature_head: ProjectionHead,
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        ProjectionHead {
            w1: xavier(dim, dim, rng),
            b1: Array1::zeros(dim),
            w2: xavier(dim, dim, rng),
            b2: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        ProjectionHead {
            w1: Array2::zeros((dim, dim)),
            b1: Array1::zeros(dim),
            w2: Array2::zeros((dim, dim)),
            b2: Array1::zeros(dim),
        }
    }

    /// Projects every row of `x`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let hidden = (x.dot(&self.w1.t()) + &self.b1).mapv(elu);
        hidden.dot(&self.w2.t()) + &self.b2
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(users: usize, items: usize, dim: usize, rng: &mut R) -> Self {
        let hidden = 4 * dim;
        ModelParams {
            user_emb: gaussian(users, dim, 0.01, rng),
            item_emb: gaussian(items, dim, 0.01, rng),
            pos_emb: gaussian(MAX_PREFIX, dim, 0.01, rng),
            attn_w1: xavier(hidden, dim, rng),
            attn_w2: gaussian(1, hidden, 0.01, rng).remove_axis(Axis(0)),
            general_w3: xavier(dim, dim, rng),
            interest_head: ProjectionHead::init(dim, rng),
            feature_head: ProjectionHead::init(dim, rng),
        }
    }

    pub fn zeros(users: usize, items: usize, dim: usize) -> Self {
        ModelParams {
            user_emb: Array2::zeros((users, dim)),
            item_emb: Array2::zeros((items, dim)),
            pos_emb: Array2::zeros((MAX_PREFIX, dim)),
            attn_w1: Array2::zeros((4 * dim, dim)),
            attn_w2: Array1::zeros(4 * dim),
            general_w3: Array2::zeros((dim, dim)),
            interest_head: ProjectionHead::zeros(dim),
            feature_head: ProjectionHead::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_users(), self.num_items(), self.dim())
    }

    pub fn dim(&self) -> usize {
        self.item_emb.ncols()
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    /// Every tensor as `(name, shape, values)` in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn t<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a ndarray::Array<f64, D>,
        ) -> (&'static str, Vec<usize>, &'a [f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        vec![
            t("user_emb", &self.user_emb),
            t("item_emb", &self.item_emb),
            t("pos_emb", &self.pos_emb),
            t("attn_w1", &self.attn_w1),
            t("attn_w2", &self.attn_w2),
            t("general_w3", &self.general_w3),
            t("interest_head.w1", &self.interest_head.w1),
            t("interest_head.b1", &self.interest_head.b1),
            t("interest_head.w2", &self.interest_head.w2),
            t("interest_head.b2", &self.interest_head.b2),
            t("feature_head.w1", &self.feature_head.w1),
            t("feature_head.b1", &self.feature_head.b1),
            t("feature_head.w2", &self.feature_head.w2),
            t("feature_head.b2", &self.feature_head.b2),
        ]
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        fn t<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a mut ndarray::Array<f64, D>,
        ) -> (&'static str, &'a mut [f64]) {
            (name, a.as_slice_mut().expect("standard layout"))
        }
        vec![
            t("user_emb", &mut self.user_emb),
            t("item_emb", &mut self.item_emb),
            t("pos_emb", &mut self.pos_emb),
            t("attn_w1", &mut self.attn_w1),
            t("attn_w2", &mut self.attn_w2),
            t("general_w3", &mut self.general_w3),
            t("interest_head.w1", &mut self.interest_head.w1),
            t("interest_head.b1", &mut self.interest_head.b1),
            t("interest_head.w2", &mut self.interest_head.w2),
            t("interest_head.b2", &mut self.interest_head.b2),
            t("feature_head.w1", &mut self.feature_head.w1),
            t("feature_head.b1", &mut self.feature_head.b1),
            t("feature_head.w2", &mut self.feature_head.w2),
            t("feature_head.b2", &mut self.feature_head.b2),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .into_iter()
            .find(|(_, _, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(name, _, _)| name)
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// Gathered item rows for one prefix, optionally padded to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoding {
    pub item_rows: Array2<f64>,
    pub positioned: Array2<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Attend over position-augmented rows instead of the raw item rows.
    pub attend_positioned: bool,
}

fn check_prefix(prefix: &[usize], items: usize) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::Precondition("empty prefix".into()));
    }
    if prefix.len() > MAX_PREFIX {
        return Err(Error::Precondition(format!(
            "prefix of length {} exceeds {MAX_PREFIX}",
            prefix.len()
        )));
    }
    if let Some(&bad) = prefix.iter().find(|&&i| i >= items) {
        return Err(Error::Index(format!("item {bad} >= {items}")));
    }
    Ok(())
}

/// Softmax over unmasked entries; masked entries get [`MASK_LOGIT`].
pub(crate) fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let shifted: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l } else { MASK_LOGIT })
        .collect();
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl SequenceEncoding {
    /// Gathers `prefix` rows and adds position rows, padding with zero rows
    /// up to `pad_to` (which must be at least the prefix length).
    pub fn encode(params: &ModelParams, prefix: &[usize], pad_to: usize) -> Result<Self> {
        check_prefix(prefix, params.num_items())?;
        if pad_to < prefix.len() || pad_to > MAX_PREFIX {
            return Err(Error::Param(format!(
                "cannot pad prefix of {} to {pad_to}",
                prefix.len()
            )));
        }
        let d = params.dim();
        let mut item_rows = Array2::zeros((pad_to, d));
        let mut positioned = Array2::zeros((pad_to, d));
        for (j, &item) in prefix.iter().enumerate() {
            let row = params.item_emb.row(item);
            item_rows.row_mut(j).assign(&row);
            positioned.row_mut(j).assign(&(&row + &params.pos_emb.row(j)));
        }
        let mask = (0..pad_to).map(|j| j < prefix.len()).collect();
        Ok(SequenceEncoding {
            item_rows,
            positioned,
            mask,
        })
    }
}

/// Current interest from an encoded (possibly padded) sequence.
pub fn current_interest_encoded(
    params: &ModelParams,
    enc: &SequenceEncoding,
    opts: ForwardOptions,
) -> (Array1<f64>, Vec<f64>) {
    let hidden = enc.positioned.dot(&params.attn_w1.t()).mapv(f64::tanh);
    let logits = hidden.dot(&params.attn_w2);
    let weights = masked_softmax(logits.as_slice().expect("contiguous"), &enc.mask);
    let values = if opts.attend_positioned {
        &enc.positioned
    } else {
        &enc.item_rows
    };
    let interest = Array1::from(weights.clone()).dot(values);
    (interest, weights)
}

/// Attention-pooled sequence interest. Depends only on item and position
/// embeddings and the attention weights, never on the user.
pub fn current_interest(
    params: &ModelParams,
    prefix: &[usize],
    opts: ForwardOptions,
) -> Result<(Array1<f64>, Vec<f64>)> {
    let enc = SequenceEncoding::encode(params, prefix, prefix.len())?;
    Ok(current_interest_encoded(params, &enc, opts))
}

/// Propagated node features from the three views.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub ui_users: Array2<f64>,
    pub ui_items: Array2<f64>,
    pub uu_users: Array2<f64>,
    pub vv_items: Array2<f64>,
}

/// Node features passed through the feature-level projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures {
    pub ui_users: Array2<f64>,
    pub uu_users: Array2<f64>,
    pub ui_items: Array2<f64>,
    pub vv_items: Array2<f64>,
}

impl NodeFeatures {
    pub fn compute(params: &ModelParams, graphs: &Graphs, layers: usize) -> Result<Self> {
        let (nu, nv) = (params.num_users(), params.num_items());
        if graphs.num_users() != nu || graphs.num_items() != nv {
            return Err(Error::Shape(format!(
                "graphs cover {}/{} users/items, parameters {nu}/{nv}",
                graphs.num_users(),
                graphs.num_items()
            )));
        }
        let stacked = ndarray::concatenate(Axis(0), &[params.user_emb.view(), params.item_emb.view()])
            .expect("equal widths");
        let ui = propagate(&graphs.user_item, stacked.view(), layers)?;
        let (ui_users, ui_items) = split_rows(&ui, nu);
        Ok(NodeFeatures {
            ui_users,
            ui_items,
            uu_users: propagate(&graphs.user_user, params.user_emb.view(), layers)?,
            vv_items: propagate(&graphs.item_item, params.item_emb.view(), layers)?,
        })
    }

    pub fn project(&self, head: &ProjectionHead) -> ProjectedFeatures {
        ProjectedFeatures {
            ui_users: head.forward(self.ui_users.view()),
            uu_users: head.forward(self.uu_users.view()),
            ui_items: head.forward(self.ui_items.view()),
            vv_items: head.forward(self.vv_items.view()),
        }
    }
}

/// Attention of the propagated user row over the propagated prefix item rows.
pub fn general_interest(
    params: &ModelParams,
    feats: &NodeFeatures,
    user: usize,
    prefix: &[usize],
) -> Result<(Array1<f64>, Vec<f64>)> {
    if user >= feats.ui_users.nrows() {
        return Err(Error::Index(format!(
            "user {user} >= {}",
            feats.ui_users.nrows()
        )));
    }
    check_prefix(prefix, feats.ui_items.nrows())?;
    let query = params.general_w3.dot(&feats.ui_users.row(user)).mapv(f64::tanh);
    let rows = feats.ui_items.select(Axis(0), prefix);
    let logits = rows.dot(&query);
    let weights = masked_softmax(logits.as_slice().expect("contiguous"), &vec![true; prefix.len()]);
    let interest = Array1::from(weights.clone()).dot(&rows);
    Ok((interest, weights))
}

/// Single-vector projection helper.
pub fn project_vector(head: &ProjectionHead, x: ArrayView1<'_, f64>) -> Array1<f64> {
    head.forward(x.insert_axis(Axis(0))).remove_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn params(users: usize, items: usize, dim: usize) -> ModelParams {
        ModelParams::init(users, items, dim, &mut substream(5, Stream::Init, 0))
    }

    #[test]
    fn singleton_prefix_returns_item_row() {
        let p = params(2, 5, 4);
        let (is, a) = current_interest(&p, &[3], ForwardOptions::default()).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(is, p.item_emb.row(3).to_owned());
    }

    #[test]
    fn zero_w1_gives_uniform_attention() {
        let mut p = params(2, 6, 4);
        p.attn_w1.fill(0.0);
        let prefix = [0, 2, 4, 5];
        let (is, a) = current_interest(&p, &prefix, ForwardOptions::default()).unwrap();
        for w in &a {
            assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-15);
        }
        let mean = p.item_emb.select(Axis(0), &prefix).mean_axis(Axis(0)).unwrap();
        for (x, y) in is.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn padding_gets_zero_weight() {
        let p = params(2, 6, 4);
        let enc = SequenceEncoding::encode(&p, &[1, 2, 3], 8).unwrap();
        assert_eq!(enc.item_rows.row(5).sum(), 0.0);
        let (is_padded, a) = current_interest_encoded(&p, &enc, ForwardOptions::default());
        assert!(a[3..].iter().all(|&w| w == 0.0));
        assert_abs_diff_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let (is, _) = current_interest(&p, &[1, 2, 3], ForwardOptions::default()).unwrap();
        for (x, y) in is.iter().zip(is_padded.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn empty_or_long_prefix_rejected() {
        let p = params(1, 30, 2);
        assert!(matches!(
            current_interest(&p, &[], ForwardOptions::default()),
            Err(Error::Precondition(_))
        ));
        let long: Vec<usize> = (0..21).collect();
        assert!(current_interest(&p, &long, ForwardOptions::default()).is_err());
    }

    fn raw_features(p: &ModelParams) -> NodeFeatures {
        NodeFeatures {
            ui_users: p.user_emb.clone(),
            ui_items: p.item_emb.clone(),
            uu_users: p.user_emb.clone(),
            vv_items: p.item_emb.clone(),
        }
    }

    #[test]
    fn general_interest_edge_cases() {
        let mut p = params(3, 6, 4);
        let f = raw_features(&p);
        let (ic, a) = general_interest(&p, &f, 1, &[4]).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(ic, f.ui_items.row(4).to_owned());

        let (ic, _) = general_interest(&p, &f, 0, &[2, 2, 2]).unwrap();
        for (x, y) in ic.iter().zip(f.ui_items.row(2)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }

        p.general_w3.fill(0.0);
        let (ic, a) = general_interest(&p, &f, 0, &[0, 1, 5]).unwrap();
        assert!(a.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let mean = f.ui_items.select(Axis(0), &[0, 1, 5]).mean_axis(Axis(0)).unwrap();
        for (x, y) in ic.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert!(matches!(
            general_interest(&p, &f, 3, &[0]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn projection_closed_forms() {
        let d = 3;
        let mut head = ProjectionHead::zeros(d);
        head.w1 = Array2::eye(d);
        head.w2 = Array2::eye(d);
        let x = array![[0.5, 0.0, 2.0], [1.0, 3.0, 0.25]];
        assert_eq!(head.forward(x.view()), x);

        head.b1 = array![-1.0, 0.5, 0.0];
        head.b2 = array![0.1, 0.2, 0.3];
        let y = head.forward(Array2::zeros((1, d)).view());
        let expected = [(-1.0f64).exp_m1() + 0.1, 0.5 + 0.2, 0.0 + 0.3];
        for (a, b) in y.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }

        let mut zero = ProjectionHead::zeros(d);
        zero.b2 = array![1.0, -2.0, 3.0];
        let y = zero.forward(x.view());
        assert_eq!(y.row(0), zero.b2);
        assert_eq!(y.row(1), zero.b2);
    }

    #[test]
    fn tensor_listing_covers_every_parameter() {
        let p = params(3, 5, 4);
        let total: usize = p.tensors().iter().map(|(_, _, v)| v.len()).sum();
        let d = 4;
        let expected = 3 * d + 5 * d + 20 * d + 4 * d * d + 4 * d + d * d + 2 * (2 * d * d + 2 * d);
        assert_eq!(total, expected);
        assert!(p.first_non_finite().is_none());
    }
}
