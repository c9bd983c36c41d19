//! Losses and their exact gradients.
//!
//! The joint objective is `Lp + beta * LIL + gamma * LFL` where `Lp` is a
//! sampled-softmax next-item loss on the combined interest, `LIL` contrasts
//! each sample's sequence interest against its graph interest, and `LFL`
//! contrasts user (item) features from the user-item graph against those
//! from the user-user (item-item) graph.
//!
//! Gradients are derived by hand and checked against central differences in
//! the tests.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::corpus::{TrainSample, MAX_PREFIX};
use crate::error::{Error, Result};
use crate::graphs::{propagate, split_rows, Graphs};
use crate::model::{elu, elu_grad, ModelParams, ProjectionHead};

/// Guard on vector norms inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub negatives: usize,
    pub layers: usize,
    pub attend_positioned: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.05,
            tau: 0.5,
            negatives: 1280,
            layers: 2,
            attend_positioned: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub lp: f64,
    pub lil: f64,
    pub lfl: f64,
    pub joint: f64,
    pub grads: ModelParams,
}

fn row_norms(x: ArrayView2<'_, f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn normalize_rows(x: ArrayView2<'_, f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms) {
        row /= n.max(COSINE_EPS);
    }
    out
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("temperature must be positive, got {tau}")))
    }
}

/// InfoNCE with in-batch negatives drawn from both the positives and the
/// other anchors:
///
/// `sum_i -log( psi(a_i, p_i) / (sum_j psi(a_i, p_j) + sum_{j != i} psi(a_i, a_j)) )`
///
/// with `psi(x, y) = exp(cos(x, y) / tau)`.
pub fn info_nce(anchor: ArrayView2<'_, f64>, positive: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    info_nce_with_grad(anchor, positive, tau).map(|(l, _, _)| l)
}

/// [`info_nce`] plus its gradients with respect to the anchor and positive
/// rows.
pub fn info_nce_with_grad(
    anchor: ArrayView2<'_, f64>,
    positive: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_tau(tau)?;
    if anchor.dim() != positive.dim() || anchor.nrows() == 0 {
        return Err(Error::Shape(format!(
            "anchor {:?} vs positive {:?}",
            anchor.dim(),
            positive.dim()
        )));
    }
    let b = anchor.nrows();
    let a_norm = row_norms(anchor);
    let p_norm = row_norms(positive);
    let na = normalize_rows(anchor, &a_norm);
    let np = normalize_rows(positive, &p_norm);
    let s_ap = na.dot(&np.t()) / tau;
    let s_aa = na.dot(&na.t()) / tau;

    let mut loss = 0.0;
    let mut d_ap = Array2::<f64>::zeros((b, b));
    let mut d_aa = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let terms = s_ap
            .row(i)
            .iter()
            .copied()
            .chain((0..b).filter(|&j| j != i).map(|j| s_aa[[i, j]]))
            .collect::<Vec<_>>();
        let lse = logsumexp(terms.iter().copied());
        loss += lse - s_ap[[i, i]];
        for j in 0..b {
            d_ap[[i, j]] = (s_ap[[i, j]] - lse).exp();
            if j != i {
                d_aa[[i, j]] = (s_aa[[i, j]] - lse).exp();
            }
        }
        d_ap[[i, i]] -= 1.0;
    }

    // S_ap = Na Npᵀ / tau, S_aa = Na Naᵀ / tau
    let dna = (d_ap.dot(&np) + d_aa.dot(&na) + d_aa.t().dot(&na)) / tau;
    let dnp = d_ap.t().dot(&na) / tau;
    Ok((
        loss,
        normalize_backward(&na, &a_norm, dna),
        normalize_backward(&np, &p_norm, dnp),
    ))
}

fn normalize_backward(n: &Array2<f64>, norms: &Array1<f64>, mut dn: Array2<f64>) -> Array2<f64> {
    for ((mut g, row), &len) in dn.rows_mut().into_iter().zip(n.rows()).zip(norms) {
        if len > COSINE_EPS {
            let proj = row.dot(&g);
            g.scaled_add(-proj, &row);
            g /= len;
        } else {
            g /= COSINE_EPS;
        }
    }
    dn
}

/// Interest-level loss: sequence-view projections are the anchors.
pub fn interest_loss(ts: ArrayView2<'_, f64>, tc: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    info_nce(ts, tc, tau)
}

fn dedup_sorted(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Feature-level loss over the given users and items (deduplicated first).
/// Anchors are the user-item view rows; positives the co-action view rows.
pub fn feature_loss(
    projected: &crate::model::ProjectedFeatures,
    users: &[usize],
    items: &[usize],
    tau: f64,
) -> Result<f64> {
    if users.is_empty() || items.is_empty() {
        return Err(Error::Param("feature loss needs users and items".into()));
    }
    let users = dedup_sorted(users);
    let items = dedup_sorted(items);
    let uc = info_nce(
        projected.ui_users.select(Axis(0), &users).view(),
        projected.uu_users.select(Axis(0), &users).view(),
        tau,
    )?;
    let ic = info_nce(
        projected.ui_items.select(Axis(0), &items).view(),
        projected.vv_items.select(Axis(0), &items).view(),
        tau,
    )?;
    Ok(uc + ic)
}

/// Draws `k` distinct items uniformly from those that are not targets of
/// the batch.
pub fn sample_negatives<R: Rng + ?Sized>(
    num_items: usize,
    targets: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let excluded = dedup_sorted(targets);
    let candidates: Vec<usize> = (0..num_items)
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    if k > candidates.len() {
        return Err(Error::Param(format!(
            "{k} negatives requested but only {} non-target items exist",
            candidates.len()
        )));
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Sampled-softmax negative log-likelihood summed over the batch, with a
/// shared negative set.
pub fn prediction_loss(
    icomb: ArrayView2<'_, f64>,
    targets: &[usize],
    item_emb: ArrayView2<'_, f64>,
    negatives: &[usize],
) -> f64 {
    prediction_loss_impl(icomb, targets, item_emb, negatives, None).0
}

/// Returns the loss and `d loss / d icomb`; item-row gradients are added into
/// `item_grad` when given.
fn prediction_loss_impl(
    icomb: ArrayView2<'_, f64>,
    targets: &[usize],
    item_emb: ArrayView2<'_, f64>,
    negatives: &[usize],
    item_grad: Option<&mut Array2<f64>>,
) -> (f64, Array2<f64>) {
    let target_rows = item_emb.select(Axis(0), targets);
    let neg_rows = item_emb.select(Axis(0), negatives);
    let pos_logit = (&icomb * &target_rows).sum_axis(Axis(1));
    let neg_logit = icomb.dot(&neg_rows.t());

    let mut loss = 0.0;
    let mut d_pos = Array1::<f64>::zeros(targets.len());
    let mut d_neg = Array2::<f64>::zeros(neg_logit.dim());
    for b in 0..targets.len() {
        let row = neg_logit.row(b);
        let lse = logsumexp(std::iter::once(pos_logit[b]).chain(row.iter().copied()));
        loss += lse - pos_logit[b];
        d_pos[b] = (pos_logit[b] - lse).exp() - 1.0;
        for (k, &z) in row.iter().enumerate() {
            d_neg[[b, k]] = (z - lse).exp();
        }
    }

    let mut d_icomb = d_neg.dot(&neg_rows);
    for b in 0..targets.len() {
        d_icomb.row_mut(b).scaled_add(d_pos[b], &target_rows.row(b));
    }
    if let Some(g) = item_grad {
        for (b, &t) in targets.iter().enumerate() {
            g.row_mut(t).scaled_add(d_pos[b], &icomb.row(b));
        }
        let d_neg_rows = d_neg.t().dot(&icomb);
        for (k, &n) in negatives.iter().enumerate() {
            g.row_mut(n).scaled_add(1.0, &d_neg_rows.row(k));
        }
    }
    (loss, d_icomb)
}

/// `alpha * is + (1 - alpha) * ic`.
pub fn combine_interest(is: ArrayView1<'_, f64>, ic: ArrayView1<'_, f64>, alpha: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(&is * alpha + &ic * (1.0 - alpha))
}

struct HeadCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

fn head_forward(head: &ProjectionHead, x: Array2<f64>) -> (Array2<f64>, HeadCache) {
    let pre = x.dot(&head.w1.t()) + &head.b1;
    let hidden = pre.mapv(elu);
    let out = hidden.dot(&head.w2.t()) + &head.b2;
    (out, HeadCache { input: x, pre, hidden })
}

fn head_backward(head: &ProjectionHead, cache: &HeadCache, dy: &Array2<f64>, grad: &mut ProjectionHead) -> Array2<f64> {
    grad.w2 += &dy.t().dot(&cache.hidden);
    grad.b2 += &dy.sum_axis(Axis(0));
    let mut dpre = dy.dot(&head.w2);
    dpre.zip_mut_with(&cache.pre, |g, &p| *g *= elu_grad(p));
    grad.w1 += &dpre.t().dot(&cache.input);
    grad.b1 += &dpre.sum_axis(Axis(0));
    dpre.dot(&head.w1)
}

/// Softmax within each segment of a flat logit vector.
fn segment_softmax(logits: &Array1<f64>, segs: &[Range<usize>]) -> Array1<f64> {
    let mut out = Array1::zeros(logits.len());
    for seg in segs {
        let part = logits.slice(s![seg.clone()]);
        let max = part.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps = part.mapv(|v| (v - max).exp());
        let sum = exps.sum();
        out.slice_mut(s![seg.clone()]).assign(&(exps / sum));
    }
    out
}

/// `d logits` from `d weights` for per-segment softmax.
fn segment_softmax_backward(weights: &Array1<f64>, dweights: &Array1<f64>, segs: &[Range<usize>]) -> Array1<f64> {
    let mut out = Array1::zeros(weights.len());
    for seg in segs {
        let w = weights.slice(s![seg.clone()]);
        let dw = dweights.slice(s![seg.clone()]);
        let inner = w.dot(&dw);
        out.slice_mut(s![seg.clone()])
            .assign(&(&w * &(&dw - inner)));
    }
    out
}

/// Weighted sum of `rows` within each segment.
fn segment_pool(weights: &Array1<f64>, rows: &Array2<f64>, segs: &[Range<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros((segs.len(), rows.ncols()));
    for (b, seg) in segs.iter().enumerate() {
        let mut acc = out.row_mut(b);
        for r in seg.clone() {
            acc.scaled_add(weights[r], &rows.row(r));
        }
    }
    out
}

fn scatter_add(dst: &mut Array2<f64>, rows: &[usize], src: &Array2<f64>, offset: usize) {
    for (k, &r) in rows.iter().enumerate() {
        dst.row_mut(r - offset).scaled_add(1.0, &src.row(k));
    }
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(name.to_string()))
    }
}

fn validate_batch(params: &ModelParams, batch: &[TrainSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let (nu, nv) = (params.num_users(), params.num_items());
    for s in batch {
        if s.prefix.is_empty() || s.prefix.len() > MAX_PREFIX {
            return Err(Error::Precondition(format!(
                "prefix length {} outside 1..={MAX_PREFIX}",
                s.prefix.len()
            )));
        }
        if s.user >= nu {
            return Err(Error::Index(format!("user {} >= {nu}", s.user)));
        }
        if let Some(&bad) = s.prefix.iter().chain([&s.target]).find(|&&i| i >= nv) {
            return Err(Error::Index(format!("item {bad} >= {nv}")));
        }
    }
    Ok(())
}

/// Weights applied to the three terms.
#[derive(Debug, Clone, Copy)]
struct TermWeights {
    interest: f64,
    feature: f64,
}

/// Full forward and backward pass for one batch. Negatives are drawn from
/// `rng` once per call.
pub fn joint_loss_and_grads<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[TrainSample],
    graphs: &Graphs,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<LossBundle> {
    loss_and_grads(
        params,
        batch,
        graphs,
        hyper,
        TermWeights {
            interest: hyper.beta,
            feature: hyper.gamma,
        },
        rng,
    )
}

/// Prediction term alone (the contrastive weights in `hyper` are ignored).
pub fn prediction_loss_and_grads<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[TrainSample],
    graphs: &Graphs,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<LossBundle> {
    loss_and_grads(
        params,
        batch,
        graphs,
        hyper,
        TermWeights {
            interest: 0.0,
            feature: 0.0,
        },
        rng,
    )
}

fn loss_and_grads<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &[TrainSample],
    graphs: &Graphs,
    hyper: &Hyper,
    weights: TermWeights,
    rng: &mut R,
) -> Result<LossBundle> {
    validate_batch(params, batch)?;
    check_tau(hyper.tau)?;
    if !(0.0..=1.0).contains(&hyper.alpha) {
        return Err(Error::Param(format!("alpha must lie in [0, 1], got {}", hyper.alpha)));
    }
    let (nu, nv) = (params.num_users(), params.num_items());
    if graphs.num_users() != nu || graphs.num_items() != nv {
        return Err(Error::Shape("graphs do not match parameter vocabularies".into()));
    }
    let alpha = hyper.alpha;
    let use_general = alpha < 1.0 || weights.interest != 0.0;
    let use_feature = weights.feature != 0.0;

    let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
    let negatives = sample_negatives(nv, &targets, hyper.negatives, rng)?;
    let mut grads = params.zeros_like();

    // graph features
    let stacked = concatenate(Axis(0), &[params.user_emb.view(), params.item_emb.view()])
        .expect("equal widths");
    let ui = if use_general || use_feature {
        Some(propagate(&graphs.user_item, stacked.view(), hyper.layers)?)
    } else {
        None
    };
    let (uu, vv) = if use_feature {
        (
            Some(propagate(&graphs.user_user, params.user_emb.view(), hyper.layers)?),
            Some(propagate(&graphs.item_item, params.item_emb.view(), hyper.layers)?),
        )
    } else {
        (None, None)
    };
    let mut d_ui = ui.as_ref().map(|m| Array2::<f64>::zeros(m.dim()));
    let mut d_uu = uu.as_ref().map(|m| Array2::<f64>::zeros(m.dim()));
    let mut d_vv = vv.as_ref().map(|m| Array2::<f64>::zeros(m.dim()));

    // flattened prefixes
    let mut segs = Vec::with_capacity(batch.len());
    let mut flat_items = Vec::new();
    let mut flat_pos = Vec::new();
    for s in batch {
        let start = flat_items.len();
        flat_items.extend_from_slice(&s.prefix);
        flat_pos.extend(0..s.prefix.len());
        segs.push(start..flat_items.len());
    }
    let users: Vec<usize> = batch.iter().map(|s| s.user).collect();

    // current interest
    let item_rows = params.item_emb.select(Axis(0), &flat_items);
    let positioned = &item_rows + &params.pos_emb.select(Axis(0), &flat_pos);
    let hidden = positioned.dot(&params.attn_w1.t()).mapv(f64::tanh);
    let att_logits = hidden.dot(&params.attn_w2);
    let att_s = segment_softmax(&att_logits, &segs);
    let values_s = if hyper.attend_positioned { &positioned } else { &item_rows };
    let is = segment_pool(&att_s, values_s, &segs);

    // general interest
    let general = if use_general {
        let ui = ui.as_ref().expect("computed");
        let hu = ui.select(Axis(0), &users);
        let ui_item_idx: Vec<usize> = flat_items.iter().map(|&i| nu + i).collect();
        let e = ui.select(Axis(0), &ui_item_idx);
        let q = hu.dot(&params.general_w3.t()).mapv(f64::tanh);
        let mut logits = Array1::zeros(flat_items.len());
        for (b, seg) in segs.iter().enumerate() {
            for r in seg.clone() {
                logits[r] = q.row(b).dot(&e.row(r));
            }
        }
        let att = segment_softmax(&logits, &segs);
        let ic = segment_pool(&att, &e, &segs);
        Some((hu, ui_item_idx, e, q, att, ic))
    } else {
        None
    };
    let ic = match &general {
        Some(g) => g.5.clone(),
        None => Array2::zeros(is.dim()),
    };

    // prediction
    let icomb = &is * alpha + &ic * (1.0 - alpha);
    let (lp, d_icomb) =
        prediction_loss_impl(icomb.view(), &targets, params.item_emb.view(), &negatives, Some(&mut grads.item_emb));
    let lp = check_finite("prediction loss", lp)?;
    let mut d_is = &d_icomb * alpha;
    let mut d_ic = &d_icomb * (1.0 - alpha);

    // interest-level contrast
    let mut lil = 0.0;
    if weights.interest != 0.0 {
        let (ts, cache_s) = head_forward(&params.interest_head, is.clone());
        let (tc, cache_c) = head_forward(&params.interest_head, ic.clone());
        let (l, dts, dtc) = info_nce_with_grad(ts.view(), tc.view(), hyper.tau)?;
        lil = check_finite("interest-level contrastive loss", l)?;
        let dts = dts * weights.interest;
        let dtc = dtc * weights.interest;
        d_is += &head_backward(&params.interest_head, &cache_s, &dts, &mut grads.interest_head);
        d_ic += &head_backward(&params.interest_head, &cache_c, &dtc, &mut grads.interest_head);
    }

    // feature-level contrast
    let mut lfl = 0.0;
    if use_feature {
        let ui = ui.as_ref().expect("computed");
        let uu = uu.as_ref().expect("computed");
        let vv = vv.as_ref().expect("computed");
        let fusers = dedup_sorted(&users);
        let fitems = dedup_sorted(&[flat_items.as_slice(), targets.as_slice()].concat());
        let ui_item_rows: Vec<usize> = fitems.iter().map(|&i| nu + i).collect();
        let head = &params.feature_head;

        let (t_uv, c_uv) = head_forward(head, ui.select(Axis(0), &fusers));
        let (t_uu, c_uu) = head_forward(head, uu.select(Axis(0), &fusers));
        let (l_uc, d_tuv, d_tuu) = info_nce_with_grad(t_uv.view(), t_uu.view(), hyper.tau)?;
        let (t_iv, c_iv) = head_forward(head, ui.select(Axis(0), &ui_item_rows));
        let (t_vv, c_vv) = head_forward(head, vv.select(Axis(0), &fitems));
        let (l_ic, d_tiv, d_tvv) = info_nce_with_grad(t_iv.view(), t_vv.view(), hyper.tau)?;
        lfl = check_finite("feature-level contrastive loss", l_uc + l_ic)?;

        let w = weights.feature;
        let g = &mut grads.feature_head;
        let d_ui = d_ui.as_mut().expect("allocated");
        scatter_add(d_ui, &fusers, &head_backward(head, &c_uv, &(d_tuv * w), g), 0);
        scatter_add(d_uu.as_mut().expect("allocated"), &fusers, &head_backward(head, &c_uu, &(d_tuu * w), g), 0);
        scatter_add(d_ui, &ui_item_rows, &head_backward(head, &c_iv, &(d_tiv * w), g), 0);
        scatter_add(d_vv.as_mut().expect("allocated"), &fitems, &head_backward(head, &c_vv, &(d_tvv * w), g), 0);
    }

    // current interest backward
    {
        let mut d_values = Array2::<f64>::zeros(values_s.dim());
        let mut d_att = Array1::<f64>::zeros(att_s.len());
        for (b, seg) in segs.iter().enumerate() {
            let g = d_is.row(b);
            for r in seg.clone() {
                d_values.row_mut(r).scaled_add(att_s[r], &g);
                d_att[r] = g.dot(&values_s.row(r));
            }
        }
        let d_logits = segment_softmax_backward(&att_s, &d_att, &segs);
        grads.attn_w2 += &hidden.t().dot(&d_logits);
        let mut d_hidden = Array2::<f64>::zeros(hidden.dim());
        for (r, mut row) in d_hidden.rows_mut().into_iter().enumerate() {
            row.scaled_add(d_logits[r], &params.attn_w2);
        }
        d_hidden.zip_mut_with(&hidden, |g, &t| *g *= 1.0 - t * t);
        grads.attn_w1 += &d_hidden.t().dot(&positioned);
        let mut d_positioned = d_hidden.dot(&params.attn_w1);
        let mut d_items = d_positioned.clone();
        if hyper.attend_positioned {
            d_positioned += &d_values;
            d_items += &d_values;
        } else {
            d_items += &d_values;
        }
        scatter_add(&mut grads.item_emb, &flat_items, &d_items, 0);
        scatter_add(&mut grads.pos_emb, &flat_pos, &d_positioned, 0);
    }

    // general interest backward
    if let Some((hu, ui_item_idx, e, q, att, _)) = &general {
        let d_ui = d_ui.as_mut().expect("allocated");
        let mut d_e = Array2::<f64>::zeros(e.dim());
        let mut d_att = Array1::<f64>::zeros(att.len());
        for (b, seg) in segs.iter().enumerate() {
            let g = d_ic.row(b);
            for r in seg.clone() {
                d_e.row_mut(r).scaled_add(att[r], &g);
                d_att[r] = g.dot(&e.row(r));
            }
        }
        let d_logits = segment_softmax_backward(att, &d_att, &segs);
        let mut d_q = Array2::<f64>::zeros(q.dim());
        for (b, seg) in segs.iter().enumerate() {
            for r in seg.clone() {
                d_q.row_mut(b).scaled_add(d_logits[r], &e.row(r));
                d_e.row_mut(r).scaled_add(d_logits[r], &q.row(b));
            }
        }
        d_q.zip_mut_with(q, |g, &t| *g *= 1.0 - t * t);
        grads.general_w3 += &d_q.t().dot(hu);
        let d_hu = d_q.dot(&params.general_w3);
        scatter_add(d_ui, &users, &d_hu, 0);
        scatter_add(d_ui, ui_item_idx, &d_e, 0);
    }

    // propagation backward; the normalized adjacency is symmetric
    if let Some(d) = d_ui {
        let back = propagate(&graphs.user_item, d.view(), hyper.layers)?;
        let (du, dv) = split_rows(&back, nu);
        grads.user_emb += &du;
        grads.item_emb += &dv;
    }
    if let Some(d) = d_uu {
        grads.user_emb += &propagate(&graphs.user_user, d.view(), hyper.layers)?;
    }
    if let Some(d) = d_vv {
        grads.item_emb += &propagate(&graphs.item_item, d.view(), hyper.layers)?;
    }

    let joint = lp + weights.interest * lil + weights.feature * lfl;
    check_finite("joint loss", joint)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numerical(format!("gradient of {name}")));
    }
    Ok(LossBundle {
        lp,
        lil,
        lfl,
        joint,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the InfoNCE sum, term by term.
    fn info_nce_oracle(a: &Array2<f64>, p: &Array2<f64>, tau: f64) -> f64 {
        let cos = |x: ArrayView1<f64>, y: ArrayView1<f64>| x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt());
        let psi = |x, y| (cos(x, y) / tau).exp();
        let b = a.nrows();
        let mut total = 0.0;
        for i in 0..b {
            let mut denom = 0.0;
            for j in 0..b {
                denom += psi(a.row(i), p.row(j));
                if j != i {
                    denom += psi(a.row(i), a.row(j));
                }
            }
            total += -(psi(a.row(i), p.row(i)) / denom).ln();
        }
        total
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let a = array![[1.0, 2.0, -0.5]];
        let p = array![[-3.0, 0.1, 4.0]];
        assert_abs_diff_eq!(info_nce(a.view(), p.view(), 0.5).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn orthonormal_pair_value() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        let oracle = info_nce_oracle(&a, &a, 1.0);
        // 2 * ln(1 + 2/e)
        assert_abs_diff_eq!(oracle, 1.102_88, epsilon = 1e-4);
        assert_abs_diff_eq!(info_nce(a.view(), a.view(), 1.0).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(interest_loss(a.view(), a.view(), 1.0).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn matches_oracle_and_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
        let p = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
        let l = info_nce(a.view(), p.view(), 0.5).unwrap();
        assert_abs_diff_eq!(l, info_nce_oracle(&a, &p, 0.5), epsilon = 1e-10);
        let scaled = info_nce((&a * 5.0).view(), (&p * 5.0).view(), 0.5).unwrap();
        assert_abs_diff_eq!(l, scaled, epsilon = 1e-10);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let a = array![[1.0]];
        assert!(matches!(info_nce(a.view(), a.view(), 0.0), Err(Error::Param(_))));
        assert!(matches!(info_nce(a.view(), a.view(), -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn zero_rows_stay_finite() {
        let a = array![[0.0, 0.0], [1.0, 0.0]];
        let (l, ga, gp) = info_nce_with_grad(a.view(), a.view(), 0.5).unwrap();
        assert!(l.is_finite());
        assert!(ga.iter().chain(gp.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn info_nce_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let p = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let (_, ga, gp) = info_nce_with_grad(a.view(), p.view(), 0.5).unwrap();
        let h = 1e-5;
        for (which, grad) in [(0, &ga), (1, &gp)] {
            for idx in 0..12 {
                let (r, c) = (idx / 4, idx % 4);
                let mut plus = [a.clone(), p.clone()];
                let mut minus = [a.clone(), p.clone()];
                plus[which][[r, c]] += h;
                minus[which][[r, c]] -= h;
                let fd = (info_nce(plus[0].view(), plus[1].view(), 0.5).unwrap()
                    - info_nce(minus[0].view(), minus[1].view(), 0.5).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(grad[[r, c]], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn feature_loss_singletons_and_dedup() {
        let proj = crate::model::ProjectedFeatures {
            ui_users: array![[1.0, 0.0], [0.0, 1.0]],
            uu_users: array![[1.0, 0.0], [0.0, 1.0]],
            ui_items: array![[1.0, 1.0], [1.0, -1.0]],
            vv_items: array![[0.5, 1.0], [1.0, 0.0]],
        };
        assert_abs_diff_eq!(feature_loss(&proj, &[0], &[1], 0.5).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(
            feature_loss(&proj, &[1, 0, 1], &[0, 1, 1], 0.5).unwrap(),
            feature_loss(&proj, &[0, 1], &[0, 1], 0.5).unwrap()
        );
        assert!(matches!(feature_loss(&proj, &[], &[0], 0.5), Err(Error::Param(_))));
    }

    #[test]
    fn prediction_loss_degenerate_cases() {
        let items = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.5, 0.5]];
        let icomb = array![[0.3, -0.2], [1.0, 1.0]];
        assert_eq!(prediction_loss(icomb.view(), &[0, 1], items.view(), &[]), 0.0);
        // item 2 duplicates item 0, so its logit equals the target's
        let l = prediction_loss(icomb.slice(s![0..1, ..]), &[0], items.view(), &[2]);
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn prediction_loss_decreases_in_target_logit() {
        let items = array![[1.0, 0.0], [0.0, 1.0], [0.3, 0.3]];
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let icomb = array![[0.2 * step as f64, 0.0]];
            let l = prediction_loss(icomb.view(), &[0], items.view(), &[1, 2]);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn negatives_exclude_targets_and_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = sample_negatives(10, &[2, 5, 5], 7, &mut rng).unwrap();
        assert_eq!(neg.len(), 7);
        assert!(neg.iter().all(|n| *n != 2 && *n != 5));
        let mut d = neg.clone();
        d.dedup();
        assert_eq!(d.len(), 7);
        assert!(sample_negatives(10, &[2, 5], 9, &mut rng).is_err());
        assert!(sample_negatives(3, &[0, 1, 2], 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn combine_endpoints() {
        let is = array![1.0, 2.0];
        let ic = array![-3.0, 0.5];
        assert_eq!(combine_interest(is.view(), ic.view(), 1.0).unwrap(), is);
        assert_eq!(combine_interest(is.view(), ic.view(), 0.0).unwrap(), ic);
        assert_eq!(combine_interest(is.view(), ic.view(), 0.5).unwrap(), array![-1.0, 1.25]);
        assert!(combine_interest(is.view(), ic.view(), 1.5).is_err());
    }

    #[test]
    fn disabled_terms_leave_their_heads_untouched() {
        use crate::corpus::{Corpus, Split, Vocab};
        use crate::graphs::GraphOptions;
        let corpus = Corpus::from_parts(
            Vocab::from_ids(vec!["a".into(), "b".into(), "c".into()]),
            Vocab::from_ids((0..6).map(|i| i.to_string()).collect()),
            vec![vec![0, 1, 2, 3], vec![1, 2, 4], vec![3, 5, 0, 1]],
            vec![Split::Train; 3],
        )
        .unwrap();
        let graphs = Graphs::build(&corpus, GraphOptions::default()).unwrap();
        let params = ModelParams::init(3, 6, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let mut batch = corpus.make_train_samples();
        batch.truncate(3);
        let run = |beta, gamma| {
            let hyper = Hyper { beta, gamma, negatives: 1, ..Hyper::default() };
            joint_loss_and_grads(&params, &batch, &graphs, &hyper, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
        };
        let zero = ProjectionHead::zeros(4);
        let no_interest = run(0.0, 0.05);
        assert_eq!(no_interest.lil, 0.0);
        assert_eq!(no_interest.grads.interest_head, zero);
        assert_ne!(no_interest.grads.feature_head, zero);
        let no_feature = run(1.0, 0.0);
        assert_eq!(no_feature.lfl, 0.0);
        assert_eq!(no_feature.grads.feature_head, zero);
        assert_ne!(no_feature.grads.interest_head, zero);
    }
}
