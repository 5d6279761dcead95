//! One forward pass over a mini-batch, producing every loss term on a tape.

use rand::Rng;

use super::config::{Reduction, TrainConfig};
use super::losses::LossReport;
use crate::apog::{dirichlet_strength, feature_align_loss, transfer_loss, TransferTerm};
use crate::autograd::{Tape, Var};
use crate::backbone::{decode, extract_common, extract_special, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Session;
use crate::ofd::{compensate_vars, correlation_map, decouple};
use crate::tensor::Tensor;
use crate::vdg::{cycle_loss, discretize_group, discretize_loss, logit_distance_matrix, reconstruction_loss};

/// Network-layout clips `[N, C, T, H, W]` with labels and view indices.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub views: Vec<usize>,
}

/// Per-view intermediate results for the samples of that view.
pub(crate) struct ViewPass {
    /// Positions of this view's samples in the batch.
    pub rows: Vec<usize>,
    pub x: Var,
    pub labels: Vec<usize>,
    pub f_c: Var,
    pub f_s: Var,
    pub action: Var,
    pub view: Var,
    pub pooled_action: Var,
    pub pooled_common: Var,
}

pub struct StepTerms {
    pub ce: Var,
    pub kt: Var,
    pub fd: Var,
    pub vg: Var,
    pub rec: Var,
    pub cyc: Var,
    pub total: Var,
    /// Cross-entropy of the auxiliary per-view heads, trained alongside.
    pub probe: Var,
    pub objective: Var,
    /// Batch-mean auxiliary logits per view (`None` for views absent from the batch).
    pub view_logits: Vec<Option<Vec<f64>>>,
    pub distances: Tensor,
    /// Batch-mean pooled view features, used to seed the graph weights.
    pub pooled_view: Vec<Option<Tensor>>,
    /// Per-view, per-class batch means of pooled action features `[1, C]`.
    pub class_means: Vec<Vec<Option<Tensor>>>,
}

impl StepTerms {
    pub fn report(&self, tape: &Tape, cfg: &TrainConfig) -> LossReport {
        LossReport::new(
            [tape.item(self.ce), tape.item(self.kt), tape.item(self.fd), tape.item(self.vg), tape.item(self.rec), tape.item(self.cyc)],
            cfg.loss_weights,
        )
    }
}

/// Running per-view, per-class centres of pooled action features.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    momentum: f64,
    centres: Vec<Vec<Option<Tensor>>>,
}

impl PrototypeBank {
    pub fn new(views: usize, classes: usize, momentum: f64) -> Self {
        Self { momentum, centres: vec![vec![None; classes]; views] }
    }

    pub fn centre(&self, view: usize, class: usize) -> Option<&Tensor> {
        self.centres.get(view)?.get(class)?.as_ref()
    }

    /// Folds the batch class means of every view into the running centres.
    pub fn update(&mut self, means: &[Vec<Option<Tensor>>]) {
        for (centres, means) in self.centres.iter_mut().zip(means) {
            for (c, m) in centres.iter_mut().zip(means) {
                let Some(m) = m else { continue };
                *c = Some(match c.take() {
                    Some(old) => old.zip_map(m, |o, x| self.momentum * o + (1.0 - self.momentum) * x),
                    None => m.clone(),
                });
            }
        }
    }
}

/// Applies the configured reduction to a term whose samples look like `like`.
fn reduce(tape: &Tape, cfg: &TrainConfig, term: Var, like: Var) -> Var {
    match cfg.loss_reduction {
        Reduction::Sum => term,
        Reduction::Mean => tape.scale(term, 1.0 / tape.shape(like)[1..].iter().product::<usize>() as f64),
    }
}

pub(crate) fn zero(tape: &Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn row_mean(rows: &Tensor) -> Vec<f64> {
    let n = rows.dim(0) as f64;
    let mut out = vec![0.0; rows.row_len()];
    for r in 0..rows.dim(0) {
        for (o, x) in out.iter_mut().zip(rows.row(r)) {
            *o += x / n;
        }
    }
    out
}

/// Mean of the samples whose label is `class`, keeping a leading axis of 1.
fn class_mean(tape: &Tape, x: Var, labels: &[usize], class: usize) -> Option<Var> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == class).collect();
    if idx.is_empty() {
        return None;
    }
    let m = tape.mean_rows(tape.select_rows(x, &idx));
    let mut shape = vec![1];
    shape.extend(tape.shape(m));
    Some(tape.reshape(m, &shape))
}

pub(crate) fn dropout(tape: &Tape, x: Var, p: f64, rng: Option<&mut dyn rand::RngCore>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let shape = tape.shape(x);
    let len: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mul(x, tape.constant(Tensor::from_vec(&shape, mask)))
}

/// Shared encoder, special encoders and decoupling for every view present.
pub(crate) fn encode_views(s: &Session, model: &ModelConfig, batch: &BatchInput) -> Result<Vec<Option<ViewPass>>> {
    let n = batch.x.dim(0);
    if batch.labels.len() != n || batch.views.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} clips with {} labels and {} views",
            batch.labels.len(),
            batch.views.len()
        )));
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::LabelOutOfRange { label, classes: model.num_classes });
    }
    if let Some(&view) = batch.views.iter().find(|&&v| v >= model.views) {
        return Err(Error::UnknownView { view, views: model.views });
    }
    let t = s.tape;
    let x_all = t.constant(batch.x.clone());
    let f_c_all = extract_common(s, model, x_all)?;
    let mut passes = Vec::with_capacity(model.views);
    for v in 0..model.views {
        let idx: Vec<usize> = (0..n).filter(|&r| batch.views[r] == v).collect();
        if idx.is_empty() {
            passes.push(None);
            continue;
        }
        let x = t.select_rows(x_all, &idx);
        let f_c = t.select_rows(f_c_all, &idx);
        let f_s = extract_special(s, model, x, v)?;
        let r = correlation_map(s, f_c, f_s)?;
        let (action, view) = decouple(t, f_s, r)?;
        passes.push(Some(ViewPass {
            x,
            labels: idx.iter().map(|&r| batch.labels[r]).collect(),
            rows: idx,
            f_c,
            f_s,
            action,
            view,
            pooled_action: t.global_avg_pool(action),
            pooled_common: t.global_avg_pool(f_c),
        }));
    }
    Ok(passes)
}

/// Builds every loss term for one batch. `missing` lists `(view, class)`
/// pairs absent from the training partition; `rng` enables dropout. Transfer
/// targets come from `bank` when it holds a centre, else from the batch.
pub fn forward_batch(
    s: &Session,
    cfg: &TrainConfig,
    batch: &BatchInput,
    missing: &[(usize, usize)],
    bank: Option<&PrototypeBank>,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<StepTerms> {
    let t = s.tape;
    let model = &cfg.model;
    let n_views = model.views;
    let passes = encode_views(s, model, batch)?;
    let present: Vec<(usize, &ViewPass)> = passes.iter().enumerate().filter_map(|(v, p)| p.as_ref().map(|p| (v, p))).collect();

    // Classification on the fused action feature. Each sample is seen from a
    // single view, so fusion reduces to that view's pooled action feature.
    let mut rows: Vec<Var> = present.iter().map(|(_, p)| p.pooled_action).collect();
    let mut labels: Vec<usize> = present.iter().flat_map(|(_, p)| p.labels.iter().copied()).collect();
    if cfg.compensate {
        for &(view, class) in missing {
            let protos: Vec<Var> = present
                .iter()
                .filter(|(v, _)| *v != view)
                .filter_map(|(_, p)| class_mean(t, p.pooled_common, &p.labels, class))
                .collect();
            if !protos.is_empty() {
                rows.push(compensate_vars(t, &protos)?);
                labels.push(class);
            }
        }
    }
    let fused = dropout(t, t.concat_rows(&rows), cfg.dropout, rng);
    let logits = s.linear("head", fused);
    let ce = t.cross_entropy(logits, &labels);

    // Auxiliary per-view heads on detached view-specific features.
    let mut probe_terms = Vec::with_capacity(present.len());
    let mut view_logits = vec![None; n_views];
    for &(v, p) in &present {
        let pooled = t.detach(t.global_avg_pool(p.f_s));
        let z = s.linear(&format!("probe.{v}"), pooled);
        probe_terms.push(t.cross_entropy(z, &p.labels));
        view_logits[v] = Some(row_mean(&t.value(t.detach(z))));
    }
    let probe = t.scale(t.add_n(&probe_terms), 1.0 / probe_terms.len() as f64);

    let (kt, fd) = if cfg.apog {
        let plan = cfg.plan()?;
        let mut terms = Vec::new();
        for &(src, tgt) in &plan.pairs {
            let (Some(sp), Some(tp), Some(z)) = (&passes[src], &passes[tgt], &view_logits[tgt]) else { continue };
            let c_t = n_views as f64 / dirichlet_strength(z);
            let mut matched = Vec::new();
            let mut protos = Vec::new();
            for (r, &label) in tp.labels.iter().enumerate() {
                let proto = match bank.and_then(|b| b.centre(src, label)) {
                    Some(c) => Some(t.constant(c.clone())),
                    None => class_mean(t, sp.pooled_action, &sp.labels, label),
                };
                if let Some(m) = proto {
                    matched.push(r);
                    protos.push(m);
                }
            }
            if matched.is_empty() {
                continue;
            }
            terms.push(TransferTerm {
                source: t.concat_rows(&protos),
                target: t.select_rows(tp.pooled_action, &matched),
                weight: c_t,
            });
        }
        let kt = match terms.first() {
            Some(first) => reduce(t, cfg, transfer_loss(t, &terms, plan.pairs.len())?, first.target),
            None => zero(t),
        };
        let pairs: Vec<(Var, Var)> = present.iter().map(|(_, p)| (p.action, p.f_c)).collect();
        (kt, reduce(t, cfg, feature_align_loss(t, &pairs)?, pairs[0].0))
    } else {
        (zero(t), zero(t))
    };

    let mut distances = Tensor::zeros(&[n_views, n_views]);
    let present_logits: Vec<Vec<f64>> = present.iter().map(|(v, _)| view_logits[*v].clone().expect("present view")).collect();
    if present_logits.len() >= 2 {
        let e = logit_distance_matrix(&present_logits)?;
        let k = present.len();
        for (a, (va, _)) in present.iter().enumerate() {
            for (b, (vb, _)) in present.iter().enumerate() {
                distances.data_mut()[va * n_views + vb] = e.data()[a * k + b];
            }
        }
    }
    let pooled_view: Vec<Option<Tensor>> = passes
        .iter()
        .map(|p| p.as_ref().map(|p| Tensor::from_vec(&[model.width2], row_mean(&t.value(t.global_avg_pool(p.view))))))
        .collect();

    let class_means: Vec<Vec<Option<Tensor>>> = passes
        .iter()
        .map(|p| {
            (0..model.num_classes)
                .map(|k| p.as_ref().and_then(|p| class_mean(t, p.pooled_action, &p.labels, k)).map(|m| t.value(m).clone()))
                .collect()
        })
        .collect();

    let (vg, rec, cyc) = if cfg.vdg {
        let w = t.softmax_rows(s.param("graph.w_raw"));
        let vg = discretize_loss(t, w, &distances)?;
        let means: Vec<Option<Var>> = passes
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    let m = t.mean_rows(p.view);
                    let mut shape = vec![1];
                    shape.extend(t.shape(m));
                    t.reshape(m, &shape)
                })
            })
            .collect();
        let mut rec_pairs = Vec::with_capacity(present.len());
        let mut cyc_pairs = Vec::with_capacity(present.len());
        for &(v, p) in &present {
            let v_hat = discretize_group(t, w, v, p.view, &means)?;
            let recon = decode(s, model, p.action, v_hat, v)?;
            rec_pairs.push((p.x, recon));
            let again = s.without_stats(|| s.with_frozen_params(|| extract_special(s, model, recon, v)))?;
            cyc_pairs.push((t.detach(p.f_s), again));
        }
        let rec = reduce(t, cfg, reconstruction_loss(t, &rec_pairs)?, rec_pairs[0].0);
        let cyc = reduce(t, cfg, cycle_loss(t, &cyc_pairs)?, cyc_pairs[0].0);
        (vg, rec, cyc)
    } else {
        (zero(t), zero(t), zero(t))
    };

    let g = cfg.loss_weights;
    let dn = t.add(rec, cyc);
    let gn = t.add_n(&[kt, fd, vg]);
    let total = t.add_n(&[t.scale(ce, g.ce), t.scale(dn, g.dn), t.scale(gn, g.gn)]);
    let objective = t.add(total, probe);
    Ok(StepTerms { ce, kt, fd, vg, rec, cyc, total, probe, objective, view_logits, distances, pooled_view, class_means })
}
