//! The on-device recommender.
//!
//! Each device owns a [`DeviceModel`] holding embeddings for the POIs of the
//! regions it has visited, one embedding per category and a bilinear matrix
//! `W` that scores POI/category pairs. Next-step prediction uses a
//! parameter-free attention encoder:
//!
//! ```text
//! q   = x_T                                  (last item of the prefix)
//! a_t = softmax_t(q . x_t / sqrt(d))
//! s   = (sum_t a_t x_t + q) / 2              (inverted dropout on s when training)
//! p   = softmax_j(s . e_j)                   over the support items j
//! ```
//!
//! The same encoder runs over category embeddings to give the lightweight
//! category predictor. All gradients are derived by hand; see
//! [`DeviceModel::backprop`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng;

use crate::data::{CatId, PoiId, UserId};
use crate::error::{Error, Result};
use crate::rng::SimRng;

pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A probability vector over an ordered support.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDecision<T> {
    pub support: Vec<T>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DeviceModel {
    owner: UserId,
    dim: usize,
    poi_rows: BTreeMap<PoiId, usize>,
    poi_emb: Vec<f64>,
    cat_emb: Vec<f64>,
    mi: Vec<f64>,
    dropout: f64,
    rng: SimRng,
}

/// Sparse gradient of a scalar loss with respect to a [`DeviceModel`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    pub poi: BTreeMap<PoiId, Vec<f64>>,
    pub cat: BTreeMap<CatId, Vec<f64>>,
    pub mi: Option<Vec<f64>>,
}

impl GradientSet {
    fn poi_row(&mut self, p: PoiId, dim: usize) -> &mut [f64] {
        self.poi.entry(p).or_insert_with(|| vec![0.0; dim])
    }

    fn cat_row(&mut self, c: CatId, dim: usize) -> &mut [f64] {
        self.cat.entry(c).or_insert_with(|| vec![0.0; dim])
    }

    fn mi_mut(&mut self, dim: usize) -> &mut [f64] {
        self.mi.get_or_insert_with(|| vec![0.0; dim * dim])
    }

    pub fn add(&mut self, other: &GradientSet) {
        for (p, g) in &other.poi {
            axpy(1.0, g, self.poi_row(*p, g.len()));
        }
        for (c, g) in &other.cat {
            axpy(1.0, g, self.cat_row(*c, g.len()));
        }
        if let Some(g) = &other.mi {
            let d = (g.len() as f64).sqrt() as usize;
            axpy(1.0, g, self.mi_mut(d));
        }
    }

    pub fn scale(&mut self, factor: f64) {
        let rows = self
            .poi
            .values_mut()
            .chain(self.cat.values_mut())
            .chain(self.mi.iter_mut());
        for row in rows {
            row.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Returns the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<String> {
        for (p, g) in &self.poi {
            if g.iter().any(|v| !v.is_finite()) {
                return Some(format!("poi embedding {p}"));
            }
        }
        for (c, g) in &self.cat {
            if g.iter().any(|v| !v.is_finite()) {
                return Some(format!("category embedding {c}"));
            }
        }
        if let Some(g) = &self.mi {
            if g.iter().any(|v| !v.is_finite()) {
                return Some("mi matrix".into());
            }
        }
        None
    }

    pub fn max_abs(&self) -> f64 {
        self.poi
            .values()
            .chain(self.cat.values())
            .chain(self.mi.iter())
            .flat_map(|r| r.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One differentiable component of a device objective.
#[derive(Clone, Debug)]
pub enum LossTerm<'a> {
    /// Cross-entropy of predicting `target` from `prefix` over `support`.
    NextPoi {
        prefix: &'a [PoiId],
        support: &'a [PoiId],
        target: PoiId,
    },
    /// Mean squared distance between the model's POI prediction for
    /// `prefix` and each teacher vector (aligned with `support`).
    PoiDistill {
        prefix: &'a [PoiId],
        support: &'a [PoiId],
        teachers: Vec<&'a [f64]>,
    },
    /// Same as `PoiDistill` for the category predictor, whose support is
    /// every category.
    CatDistill {
        prefix: &'a [CatId],
        teachers: Vec<&'a [f64]>,
    },
    /// Contrastive bilinear loss tying each POI embedding to its category:
    /// `-sum_p log( exp f(p,c_p) / sum_{c' != c_p} exp f(p,c') )` with
    /// `f(p,c) = sigmoid(e_p^T W e_c)`.
    MutualInfo { pairs: &'a [(PoiId, CatId)] },
}

#[derive(Clone, Debug)]
pub struct WeightedTerm<'a> {
    pub weight: f64,
    pub term: LossTerm<'a>,
}

impl<'a> WeightedTerm<'a> {
    pub fn new(weight: f64, term: LossTerm<'a>) -> Self {
        WeightedTerm { weight, term }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass through softmax: given `dL/dp`, returns `dL/dz`.
fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, dprobs);
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Forward record of the attention encoder for one prefix.
struct Encoded {
    attn: Vec<f64>,
    mask: Option<Vec<f64>>,
    /// Encoder state after dropout; this is what scores the support.
    state: Vec<f64>,
}

fn encode(prefix: &[&[f64]], mask: Option<Vec<f64>>) -> Encoded {
    let q = prefix[prefix.len() - 1];
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = prefix.iter().map(|x| dot(q, x) * scale).collect();
    let attn = softmax(&logits);
    let mut state: Vec<f64> = q.iter().map(|v| 0.5 * v).collect();
    for (a, x) in attn.iter().zip(prefix) {
        axpy(0.5 * a, x, &mut state);
    }
    if let Some(m) = &mask {
        state.iter_mut().zip(m).for_each(|(s, m)| *s *= m);
    }
    Encoded { attn, mask, state }
}

/// Gradient of the loss w.r.t. every prefix row, given `dL/dstate`.
fn encode_backward(prefix: &[&[f64]], enc: &Encoded, d_state: &[f64]) -> Vec<Vec<f64>> {
    let dim = d_state.len();
    let q = prefix[prefix.len() - 1];
    let scale = 1.0 / (dim as f64).sqrt();
    let ds: Vec<f64> = match &enc.mask {
        Some(m) => d_state.iter().zip(m).map(|(g, m)| g * m).collect(),
        None => d_state.to_vec(),
    };
    // s = (h + q) / 2
    let dh: Vec<f64> = ds.iter().map(|g| 0.5 * g).collect();
    let mut dq = dh.clone();
    let mut dx: Vec<Vec<f64>> = enc
        .attn
        .iter()
        .map(|a| dh.iter().map(|g| a * g).collect())
        .collect();
    // h = sum_t a_t x_t ; a = softmax(l) ; l_t = q . x_t * scale
    let da: Vec<f64> = prefix.iter().map(|x| dot(x, &dh)).collect();
    let dl = softmax_backward(&enc.attn, &da);
    for (t, x) in prefix.iter().enumerate() {
        axpy(dl[t] * scale, x, &mut dq);
        axpy(dl[t] * scale, q, &mut dx[t]);
    }
    let last = dx.len() - 1;
    axpy(1.0, &dq, &mut dx[last]);
    dx
}

impl DeviceModel {
    /// Creates a model storing embeddings for `stored_pois`. All parameters
    /// are drawn uniformly from `[-1/sqrt(d), 1/sqrt(d)]`, POI rows first (in
    /// id order), then categories, then `W`.
    pub fn new(
        owner: UserId,
        dim: usize,
        stored_pois: impl IntoIterator<Item = PoiId>,
        num_categories: usize,
        dropout: f64,
        mut rng: SimRng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let ids: BTreeSet<PoiId> = stored_pois.into_iter().collect();
        let poi_rows = ids.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let bound = 1.0 / (dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let poi_emb = draw(ids.len() * dim);
        let cat_emb = draw(num_categories * dim);
        let mi = draw(dim * dim);
        Ok(DeviceModel {
            owner,
            dim,
            poi_rows,
            poi_emb,
            cat_emb,
            mi,
            dropout,
            rng,
        })
    }

    pub fn owner(&self) -> UserId {
        self.owner
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.cat_emb.len() / self.dim
    }

    pub fn num_stored_pois(&self) -> usize {
        self.poi_rows.len()
    }

    pub fn stores(&self, p: PoiId) -> bool {
        self.poi_rows.contains_key(&p)
    }

    pub fn stored_pois(&self) -> impl Iterator<Item = PoiId> + '_ {
        self.poi_rows.keys().copied()
    }

    pub fn poi_embedding(&self, p: PoiId) -> Result<&[f64]> {
        let row = *self
            .poi_rows
            .get(&p)
            .ok_or_else(|| Error::Model(format!("device {}: no embedding for POI {p}", self.owner)))?;
        Ok(&self.poi_emb[row * self.dim..(row + 1) * self.dim])
    }

    pub fn poi_embedding_mut(&mut self, p: PoiId) -> Result<&mut [f64]> {
        let row = *self
            .poi_rows
            .get(&p)
            .ok_or_else(|| Error::Model(format!("device {}: no embedding for POI {p}", self.owner)))?;
        Ok(&mut self.poi_emb[row * self.dim..(row + 1) * self.dim])
    }

    pub fn cat_embedding(&self, c: CatId) -> &[f64] {
        &self.cat_emb[c.index() * self.dim..(c.index() + 1) * self.dim]
    }

    pub fn cat_embedding_mut(&mut self, c: CatId) -> &mut [f64] {
        let d = self.dim;
        &mut self.cat_emb[c.index() * d..(c.index() + 1) * d]
    }

    /// Row-major `W` (`W[a][b]` at `a * d + b`).
    pub fn mi_matrix(&self) -> &[f64] {
        &self.mi
    }

    pub fn mi_matrix_mut(&mut self) -> &mut [f64] {
        &mut self.mi
    }

    /// Bytes needed for all parameters as 32-bit floats:
    /// `4 * (stored_pois * d + |C| * d + d^2)`.
    pub fn model_size_bytes(&self) -> usize {
        4 * (self.poi_rows.len() * self.dim + self.cat_emb.len() + self.dim * self.dim)
    }

    fn poi_rows_for(&self, ids: &[PoiId]) -> Result<Vec<&[f64]>> {
        ids.iter().map(|&p| self.poi_embedding(p)).collect()
    }

    fn cat_rows_for(&self, ids: &[CatId]) -> Result<Vec<&[f64]>> {
        let n = self.num_categories();
        ids.iter()
            .map(|&c| {
                if c.index() < n {
                    Ok(self.cat_embedding(c))
                } else {
                    Err(Error::Model(format!("unknown category {c}")))
                }
            })
            .collect()
    }

    fn all_cats(&self) -> Vec<CatId> {
        (0..self.num_categories() as u32).map(CatId).collect()
    }

    fn draw_mask(&mut self, mode: Mode) -> Option<Vec<f64>> {
        if mode == Mode::Eval || self.dropout == 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout;
        let rate = self.dropout;
        Some(
            (0..self.dim)
                .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
                .collect(),
        )
    }

    /// Raw support scores `s . e_j` in eval mode (used for ranking).
    pub fn poi_scores(&self, prefix: &[PoiId], support: &[PoiId]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Model("empty prefix".into()));
        }
        let rows = self.poi_rows_for(prefix)?;
        let enc = encode(&rows, None);
        support
            .iter()
            .map(|&p| Ok(dot(&enc.state, self.poi_embedding(p)?)))
            .collect()
    }

    /// Eval-mode POI prediction; usable concurrently from shared references.
    pub fn predict_poi(&self, prefix: &[PoiId], support: &[PoiId]) -> Result<Vec<f64>> {
        Ok(softmax(&self.poi_scores(prefix, support)?))
    }

    /// Eval-mode category prediction over every category.
    pub fn predict_cat(&self, prefix: &[CatId]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Model("empty category prefix".into()));
        }
        let rows = self.cat_rows_for(prefix)?;
        let enc = encode(&rows, None);
        let scores: Vec<f64> = (0..self.num_categories())
            .map(|c| dot(&enc.state, self.cat_embedding(CatId(c as u32))))
            .collect();
        Ok(softmax(&scores))
    }

    pub fn forward_poi(&mut self, prefix: &[PoiId], support: &[PoiId], mode: Mode) -> Result<SoftDecision<PoiId>> {
        if prefix.is_empty() {
            return Err(Error::Model("empty prefix".into()));
        }
        let mask = self.draw_mask(mode);
        let rows = self.poi_rows_for(prefix)?;
        let enc = encode(&rows, mask);
        let scores = support
            .iter()
            .map(|&p| Ok(dot(&enc.state, self.poi_embedding(p)?)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(SoftDecision {
            support: support.to_vec(),
            probs: softmax(&scores),
        })
    }

    pub fn forward_cat(&mut self, prefix: &[CatId], mode: Mode) -> Result<SoftDecision<CatId>> {
        if prefix.is_empty() {
            return Err(Error::Model("empty category prefix".into()));
        }
        let mask = self.draw_mask(mode);
        let rows = self.cat_rows_for(prefix)?;
        let enc = encode(&rows, mask);
        let support = self.all_cats();
        let scores: Vec<f64> = support
            .iter()
            .map(|&c| dot(&enc.state, self.cat_embedding(c)))
            .collect();
        Ok(SoftDecision {
            support,
            probs: softmax(&scores),
        })
    }

    /// Value of `sum_k weight_k * term_k` without gradients.
    pub fn loss(&mut self, terms: &[WeightedTerm<'_>], mode: Mode) -> Result<f64> {
        Ok(self.backprop(terms, mode)?.0)
    }

    /// Evaluates `sum_k weight_k * term_k` and its exact gradient with respect
    /// to every trainable tensor. Dropout (in train mode) applies to
    /// next-POI terms only; distillation and mutual-information terms always
    /// run the encoder deterministically. Teacher vectors are constants.
    pub fn backprop(&mut self, terms: &[WeightedTerm<'_>], mode: Mode) -> Result<(f64, GradientSet)> {
        let mut grads = GradientSet::default();
        let mut total = 0.0;
        for WeightedTerm { weight, term } in terms {
            if *weight == 0.0 {
                // Still consume a dropout mask so that gating a term off does
                // not shift the random stream of the remaining terms.
                if matches!(term, LossTerm::NextPoi { .. }) {
                    self.draw_mask(mode);
                }
                continue;
            }
            total += weight
                * match term {
                    LossTerm::NextPoi {
                        prefix,
                        support,
                        target,
                    } => {
                        let mask = self.draw_mask(mode);
                        self.next_poi_term(prefix, support, *target, mask, *weight, &mut grads)?
                    }
                    LossTerm::PoiDistill {
                        prefix,
                        support,
                        teachers,
                    } => self.poi_distill_term(prefix, support, teachers, *weight, &mut grads)?,
                    LossTerm::CatDistill { prefix, teachers } => {
                        self.cat_distill_term(prefix, teachers, *weight, &mut grads)?
                    }
                    LossTerm::MutualInfo { pairs } => self.mutual_info_term(pairs, *weight, &mut grads)?,
                };
        }
        if !total.is_finite() {
            return Err(Error::Numerical {
                component: "loss value".into(),
            });
        }
        if let Some(component) = grads.non_finite() {
            return Err(Error::Numerical { component });
        }
        Ok((total, grads))
    }

    /// Shared backward for POI-support predictions: given `dL/dscores`,
    /// accumulates into prefix and support POI rows.
    fn poi_prediction_backward(
        &self,
        prefix: &[PoiId],
        support: &[PoiId],
        rows: &[&[f64]],
        enc: &Encoded,
        dscores: &[f64],
        grads: &mut GradientSet,
    ) -> Result<()> {
        let d = self.dim;
        let mut d_state = vec![0.0; d];
        for (&p, &g) in support.iter().zip(dscores) {
            let e = self.poi_embedding(p)?;
            axpy(g, e, &mut d_state);
            axpy(g, &enc.state, grads.poi_row(p, d));
        }
        let dx = encode_backward(rows, enc, &d_state);
        for (&p, g) in prefix.iter().zip(&dx) {
            axpy(1.0, g, grads.poi_row(p, d));
        }
        Ok(())
    }

    fn next_poi_term(
        &self,
        prefix: &[PoiId],
        support: &[PoiId],
        target: PoiId,
        mask: Option<Vec<f64>>,
        weight: f64,
        grads: &mut GradientSet,
    ) -> Result<f64> {
        if prefix.is_empty() {
            return Err(Error::Model("empty prefix".into()));
        }
        let t = support.iter().position(|&p| p == target).ok_or_else(|| {
            Error::Model(format!(
                "device {}: target POI {target} is not in the prediction support",
                self.owner
            ))
        })?;
        let rows = self.poi_rows_for(prefix)?;
        let enc = encode(&rows, mask);
        let scores = support
            .iter()
            .map(|&p| Ok(dot(&enc.state, self.poi_embedding(p)?)))
            .collect::<Result<Vec<f64>>>()?;
        let probs = softmax(&scores);
        let loss = -probs[t].ln();
        let mut dscores: Vec<f64> = probs.iter().map(|p| weight * p).collect();
        dscores[t] -= weight;
        self.poi_prediction_backward(prefix, support, &rows, &enc, &dscores, grads)?;
        Ok(loss)
    }

    fn poi_distill_term(
        &self,
        prefix: &[PoiId],
        support: &[PoiId],
        teachers: &[&[f64]],
        weight: f64,
        grads: &mut GradientSet,
    ) -> Result<f64> {
        if teachers.is_empty() {
            return Ok(0.0);
        }
        let rows = self.poi_rows_for(prefix)?;
        let enc = encode(&rows, None);
        let scores = support
            .iter()
            .map(|&p| Ok(dot(&enc.state, self.poi_embedding(p)?)))
            .collect::<Result<Vec<f64>>>()?;
        let probs = softmax(&scores);
        let (loss, dprobs) = distill_value(&probs, teachers, weight)?;
        let dscores = softmax_backward(&probs, &dprobs);
        self.poi_prediction_backward(prefix, support, &rows, &enc, &dscores, grads)?;
        Ok(loss)
    }

    fn cat_distill_term(
        &self,
        prefix: &[CatId],
        teachers: &[&[f64]],
        weight: f64,
        grads: &mut GradientSet,
    ) -> Result<f64> {
        if teachers.is_empty() {
            return Ok(0.0);
        }
        let d = self.dim;
        let rows = self.cat_rows_for(prefix)?;
        let enc = encode(&rows, None);
        let support = self.all_cats();
        let scores: Vec<f64> = support
            .iter()
            .map(|&c| dot(&enc.state, self.cat_embedding(c)))
            .collect();
        let probs = softmax(&scores);
        let (loss, dprobs) = distill_value(&probs, teachers, weight)?;
        let dscores = softmax_backward(&probs, &dprobs);
        let mut d_state = vec![0.0; d];
        for (&c, &g) in support.iter().zip(&dscores) {
            axpy(g, self.cat_embedding(c), &mut d_state);
            axpy(g, &enc.state, grads.cat_row(c, d));
        }
        let dx = encode_backward(&rows, &enc, &d_state);
        for (&c, g) in prefix.iter().zip(&dx) {
            axpy(1.0, g, grads.cat_row(c, d));
        }
        Ok(loss)
    }

    fn mutual_info_term(&self, pairs: &[(PoiId, CatId)], weight: f64, grads: &mut GradientSet) -> Result<f64> {
        let n_cat = self.num_categories();
        if n_cat < 2 {
            return Ok(0.0);
        }
        let d = self.dim;
        let mut loss = 0.0;
        for &(p, cp) in pairs {
            if cp.index() >= n_cat {
                return Err(Error::Model(format!("unknown category {cp}")));
            }
            let ep = self.poi_embedding(p)?.to_vec();
            // v = W^T e_p, so u_c = v . e_c
            let mut v = vec![0.0; d];
            for a in 0..d {
                axpy(ep[a], &self.mi[a * d..(a + 1) * d], &mut v);
            }
            let f: Vec<f64> = (0..n_cat)
                .map(|c| sigmoid(dot(&v, self.cat_embedding(CatId(c as u32)))))
                .collect();
            let neg_max = f
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != cp.index())
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let neg_sum: f64 = f
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != cp.index())
                .map(|(_, &x)| (x - neg_max).exp())
                .sum();
            loss += -f[cp.index()] + neg_max + neg_sum.ln();

            // dL/df: -1 on the positive, softmax weights on the negatives.
            let mut du = vec![0.0; n_cat];
            for c in 0..n_cat {
                let dl_df = if c == cp.index() {
                    -1.0
                } else {
                    (f[c] - neg_max).exp() / neg_sum
                };
                du[c] = weight * dl_df * f[c] * (1.0 - f[c]);
            }
            // g = sum_c du_c e_c ; de_p = W g ; dW = e_p g^T ; de_c = du_c v
            let mut g = vec![0.0; d];
            for c in 0..n_cat {
                axpy(du[c], self.cat_embedding(CatId(c as u32)), &mut g);
            }
            let mut dep = vec![0.0; d];
            for a in 0..d {
                dep[a] = dot(&self.mi[a * d..(a + 1) * d], &g);
            }
            axpy(1.0, &dep, grads.poi_row(p, d));
            let dw = grads.mi_mut(d);
            for a in 0..d {
                axpy(ep[a], &g, &mut dw[a * d..(a + 1) * d]);
            }
            for (c, &duc) in du.iter().enumerate() {
                axpy(duc, &v, grads.cat_row(CatId(c as u32), d));
            }
        }
        Ok(loss)
    }

    /// `params <- params - lr * grads`.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if let Some(component) = grads.non_finite() {
            return Err(Error::Numerical { component });
        }
        let d = self.dim;
        for (p, g) in &grads.poi {
            if g.len() != d {
                return Err(Error::Model(format!("gradient for POI {p} has wrong length")));
            }
            axpy(-lr, g, self.poi_embedding_mut(*p)?);
        }
        let n_cat = self.num_categories();
        for (c, g) in &grads.cat {
            if c.index() >= n_cat || g.len() != d {
                return Err(Error::Model(format!("gradient for unknown category {c}")));
            }
            axpy(-lr, g, self.cat_embedding_mut(*c));
        }
        if let Some(g) = &grads.mi {
            if g.len() != d * d {
                return Err(Error::Model("gradient for W has wrong shape".into()));
            }
            axpy(-lr, g, &mut self.mi);
        }
        Ok(())
    }

    /// Visits every trainable scalar in a fixed order (POI rows by id, then
    /// categories, then `W`). Used by finite-difference checks.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamRef, &mut f64)) {
        let d = self.dim;
        let ids: Vec<PoiId> = self.poi_rows.keys().copied().collect();
        for p in ids {
            let row = self.poi_rows[&p];
            for k in 0..d {
                f(ParamRef::Poi(p, k), &mut self.poi_emb[row * d + k]);
            }
        }
        for (i, v) in self.cat_emb.iter_mut().enumerate() {
            f(ParamRef::Cat(CatId((i / d) as u32), i % d), v);
        }
        for (i, v) in self.mi.iter_mut().enumerate() {
            f(ParamRef::Mi(i / d, i % d), v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.poi_emb
            .iter()
            .chain(&self.cat_emb)
            .chain(&self.mi)
            .all(|v| v.is_finite())
    }
}

/// Address of a single trainable scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRef {
    Poi(PoiId, usize),
    Cat(CatId, usize),
    Mi(usize, usize),
}

impl GradientSet {
    pub fn get(&self, at: ParamRef) -> f64 {
        match at {
            ParamRef::Poi(p, k) => self.poi.get(&p).map_or(0.0, |g| g[k]),
            ParamRef::Cat(c, k) => self.cat.get(&c).map_or(0.0, |g| g[k]),
            ParamRef::Mi(a, b) => self.mi.as_ref().map_or(0.0, |g| {
                let d = (g.len() as f64).sqrt() as usize;
                g[a * d + b]
            }),
        }
    }
}

/// `(1/|T|) sum_j ||p - t_j||^2` and its weighted derivative w.r.t. `p`.
fn distill_value(probs: &[f64], teachers: &[&[f64]], weight: f64) -> Result<(f64, Vec<f64>)> {
    let inv = 1.0 / teachers.len() as f64;
    let mut loss = 0.0;
    let mut dprobs = vec![0.0; probs.len()];
    for t in teachers {
        if t.len() != probs.len() {
            return Err(Error::Model(format!(
                "teacher decision has {} entries, expected {}",
                t.len(),
                probs.len()
            )));
        }
        for (k, (&p, &q)) in probs.iter().zip(t.iter()).enumerate() {
            let diff = p - q;
            loss += inv * diff * diff;
            dprobs[k] += weight * 2.0 * inv * diff;
        }
    }
    Ok((loss, dprobs))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MACM";
const CHECKPOINT_VERSION: u32 = 1;

impl DeviceModel {
    /// Writes a checkpoint. Layout (all little-endian):
    ///
    /// ```text
    /// "MACM" | version u32 | owner u32 | d u32 | n_pois u32 | n_cats u32   (24 bytes)
    /// n_pois x u32 POI ids, ascending
    /// f32 tensors: POI rows (n_pois x d), category rows (n_cats x d), W (d x d, row-major)
    /// ```
    ///
    /// The tensor block is exactly [`model_size_bytes`](Self::model_size_bytes) long.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            self.owner.0,
            self.dim as u32,
            self.poi_rows.len() as u32,
            self.num_categories() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in self.poi_rows.keys() {
            w.write_all(&p.0.to_le_bytes())?;
        }
        for v in self.poi_emb.iter().chain(&self.cat_emb).chain(&self.mi) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R, dropout: f64, rng: SimRng) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Model("not a model checkpoint".into()));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Model(format!("unsupported checkpoint version {version}")));
        }
        let owner = UserId(word()?);
        let dim = word()? as usize;
        let n_pois = word()? as usize;
        let n_cats = word()? as usize;
        let ids: Vec<PoiId> = (0..n_pois).map(|_| word().map(PoiId)).collect::<Result<_>>()?;
        let mut floats = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| word().map(|b| f32::from_bits(b) as f64))
                .collect()
        };
        let poi_emb = floats(n_pois * dim)?;
        let cat_emb = floats(n_cats * dim)?;
        let mi = floats(dim * dim)?;
        Ok(DeviceModel {
            owner,
            dim,
            poi_rows: ids.into_iter().enumerate().map(|(i, p)| (p, i)).collect(),
            poi_emb,
            cat_emb,
            mi,
            dropout,
            rng,
        })
    }
}
