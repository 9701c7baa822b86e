//! End-to-end optimization: softmax pre-training, triplet-context batch
//! construction with mining, momentum-SGD updates of the extractor and
//! the metric weight jointly, and the epoch loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, ImageSample, Split};
use crate::error::{Error, Result};
use crate::extractor::{
    bind_params, forward, forward_prenorm, init_params, read_grads, ExtractorParams, FEATURE_DIM,
};
use crate::graph::Graph;
use crate::metric::{constraint_gradient, constraint_penalty, FeatureVector, MetricLayer};
use crate::mining::{
    hard_negative_select, moderate_positive_select, Candidate, MiningConfig, NegativeCandidate,
    PositivePool,
};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::Real;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub extractor: crate::extractor::ExtractorConfig,
    pub learning_rate: Real,
    pub lr_decay: Real,
    pub lr_decay_interval: usize,
    pub momentum: Real,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: Real,
    pub seed: u64,
    /// Augmentation translation bound in pixels.
    pub translation: usize,
    /// Optional hinge margin; `None` keeps the plain d_pos − d_neg loss.
    pub margin: Option<Real>,
    pub positive_mining: bool,
    pub negative_mining: bool,
    pub mining: MiningConfig<Real>,
    pub grad_clip: Real,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            extractor: Default::default(),
            learning_rate: 0.01,
            lr_decay: 0.5,
            lr_decay_interval: 20,
            momentum: 0.9,
            batch_size: 16,
            epochs: 30,
            lambda: 1e-2,
            seed: 0,
            translation: 3,
            margin: None,
            positive_mining: true,
            negative_mining: true,
            mining: MiningConfig::default(),
            grad_clip: 10.0,
            pretrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Precondition("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Precondition("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor, mined positive and mined negative, as dataset sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletContext {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletContext {
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let a = &dataset.samples[self.anchor];
        let p = &dataset.samples[self.positive];
        let n = &dataset.samples[self.negative];
        if a.identity != p.identity || a.camera == p.camera {
            return Err(Error::Precondition(
                "positive must share identity but not camera with anchor".into(),
            ));
        }
        if a.identity == n.identity {
            return Err(Error::IdentityCollision(a.identity));
        }
        Ok(())
    }
}

/// Random integer translation with edge replication. Labels unchanged.
pub fn augment(image: &ImageSample, bound: usize, rng: &mut ChaCha8Rng) -> ImageSample {
    ImageSample {
        pixels: translate(&image.pixels, bound, rng),
        ..image.clone()
    }
}

pub fn translate(pixels: &Tensor<Real>, bound: usize, rng: &mut ChaCha8Rng) -> Tensor<Real> {
    if bound == 0 {
        return pixels.clone();
    }
    let t = bound as i64;
    let dy = rng.gen_range(-t..=t);
    let dx = rng.gen_range(-t..=t);
    translate_by(pixels, dy, dx)
}

pub fn translate_by(pixels: &Tensor<Real>, dy: i64, dx: i64) -> Tensor<Real> {
    let shape = pixels.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let src = pixels.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for r in 0..h {
            let sr = (r as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for col in 0..w {
                let sc = (col as i64 - dx).clamp(0, w as i64 - 1) as usize;
                out[ch * h * w + r * w + col] = src[ch * h * w + sr * w + sc];
            }
        }
    }
    Tensor::from_vec(&shape, out).expect("same shape")
}

/// Builds one batch of triplet contexts from cached features.
///
/// `features[i]` must hold the feature of `dataset.samples[indices[i]]`
/// under the current model; distances are computed against those, so
/// mining sees the model state of the feature snapshot.
pub fn build_batch(
    dataset: &Dataset,
    indices: &[usize],
    features: &[FeatureVector<Real>],
    metric: &MetricLayer<Real>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TripletContext>> {
    assert_eq!(indices.len(), features.len());
    let pos_of = |i: usize| -> &ImageSample { &dataset.samples[indices[i]] };

    // anchors need at least one cross-camera positive
    let eligible: Vec<usize> = (0..indices.len())
        .filter(|&i| {
            let a = pos_of(i);
            (0..indices.len())
                .any(|j| j != i && pos_of(j).identity == a.identity && pos_of(j).camera != a.camera)
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset(
            "no identity has cross-camera positives".into(),
        ));
    }

    let mut order = eligible.clone();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.truncate(cfg.batch_size.min(order.len()));

    let mut contexts = Vec::with_capacity(order.len());
    for &ai in &order {
        let anchor = pos_of(ai);
        let pool_members: Vec<usize> = (0..indices.len())
            .filter(|&j| {
                j != ai && pos_of(j).identity == anchor.identity && pos_of(j).camera != anchor.camera
            })
            .collect();
        let candidates: Vec<Candidate<Real>> = pool_members
            .iter()
            .map(|&j| {
                Ok(Candidate {
                    sample: indices[j],
                    distance: crate::metric::distance(&features[ai], &features[j], metric)?,
                })
            })
            .collect::<Result<_>>()?;
        let pool = PositivePool::new(indices[ai], candidates)?;
        let positive = if cfg.positive_mining {
            pool.candidates[moderate_positive_select(&pool, &cfg.mining)?].sample
        } else {
            pool.candidates[rng.gen_range(0..pool.candidates.len())].sample
        };

        let neg_members: Vec<usize> = (0..indices.len())
            .filter(|&j| {
                pos_of(j).identity != anchor.identity && pos_of(j).camera != anchor.camera
            })
            .collect();
        if neg_members.is_empty() {
            return Err(Error::Dataset("no cross-camera negatives available".into()));
        }
        let mut neg_order = neg_members.clone();
        for i in (1..neg_order.len()).rev() {
            let j = rng.gen_range(0..=i);
            neg_order.swap(i, j);
        }
        neg_order.truncate(cfg.mining.negative_pool_size.min(neg_order.len()));
        let negative = if cfg.negative_mining {
            let negs: Vec<NegativeCandidate<Real>> = neg_order
                .iter()
                .map(|&j| {
                    Ok(NegativeCandidate {
                        sample: indices[j],
                        identity: pos_of(j).identity,
                        distance: crate::metric::distance(&features[ai], &features[j], metric)?,
                    })
                })
                .collect::<Result<_>>()?;
            hard_negative_select(anchor.identity, &negs, 1)?[0]
        } else {
            indices[neg_order[rng.gen_range(0..neg_order.len())]]
        };

        let ctx = TripletContext { anchor: indices[ai], positive, negative };
        ctx.check(dataset)?;
        contexts.push(ctx);
    }
    Ok(contexts)
}

/// One context's images after augmentation, ready for the forward pass.
#[derive(Debug, Clone)]
pub struct TripletImages {
    pub anchor: Tensor<Real>,
    pub positive: Tensor<Real>,
    pub negative: Tensor<Real>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub loss: Real,
    pub mean_d_pos: Real,
    pub mean_d_neg: Real,
    pub penalty: Real,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: Real,
    pub mean_d_pos: Real,
    pub mean_d_neg: Real,
    pub penalty: Real,
}

/// Holds the model plus the momentum buffers between steps.
pub struct Trainer {
    pub model: Model,
    cfg: TrainConfig,
    vel: Vec<Tensor<Real>>,
    vel_w: Tensor<Real>,
    pub clip_events: usize,
}

struct ContextGrads {
    loss: Real,
    d_pos: Real,
    d_neg: Real,
    extractor: ExtractorParams<Real>,
    metric_w: Tensor<Real>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vel = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let vel_w = Tensor::zeros(model.metric.weight().shape());
        Ok(Trainer { model, cfg, vel, vel_w, clip_events: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn context_grads(&self, images: &TripletImages) -> Result<ContextGrads> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.model.params);
        let wv = g.leaf(self.model.metric.weight());
        let fa = forward(&mut g, &self.model.config, &bound, &images.anchor)?;
        let fp = forward(&mut g, &self.model.config, &bound, &images.positive)?;
        let fneg = forward(&mut g, &self.model.config, &bound, &images.negative)?;
        let diff_p = g.sub(fa, fp)?;
        let proj_p = g.project_t(wv, diff_p)?;
        let d_pos = g.l2norm(proj_p);
        let diff_n = g.sub(fa, fneg)?;
        let proj_n = g.project_t(wv, diff_n)?;
        let d_neg = g.l2norm(proj_n);
        let pair = g.sub(d_pos, d_neg)?;
        let loss = match self.cfg.margin {
            None => pair,
            Some(m) => {
                let mv = g.leaf(&Tensor::scalar(m));
                let shifted = g.add(pair, mv)?;
                g.relu(shifted)
            }
        };
        g.backward(loss);
        Ok(ContextGrads {
            loss: g.scalar_value(loss),
            d_pos: g.scalar_value(d_pos),
            d_neg: g.scalar_value(d_neg),
            extractor: read_grads(&g, &bound, &self.model.params),
            metric_w: Tensor::from_vec(
                self.model.metric.weight().shape(),
                g.grad(wv).to_vec(),
            )?,
        })
    }

    /// One momentum-SGD update from a batch of triplet images.
    pub fn train_step(&mut self, batch: &[TripletImages], lr: Real) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let results: Vec<Result<ContextGrads>> =
            batch.par_iter().map(|imgs| self.context_grads(imgs)).collect();

        let inv_b = 1.0 / batch.len() as Real;
        let mut acc_ext: Option<ExtractorParams<Real>> = None;
        let mut acc_w: Tensor<Real> = Tensor::zeros(self.model.metric.weight().shape());
        let mut stats = StepStats::default();
        for r in results {
            let cg = r?;
            stats.loss += cg.loss * inv_b;
            stats.mean_d_pos += cg.d_pos * inv_b;
            stats.mean_d_neg += cg.d_neg * inv_b;
            match &mut acc_ext {
                None => acc_ext = Some(cg.extractor),
                Some(acc) => {
                    for (a, c) in acc.tensors_mut().into_iter().zip(cg.extractor.tensors()) {
                        for (av, cv) in a.data_mut().iter_mut().zip(c.data()) {
                            *av += *cv;
                        }
                    }
                }
            }
            for (av, cv) in acc_w.data_mut().iter_mut().zip(cg.metric_w.data()) {
                *av += *cv;
            }
        }
        let mut acc_ext = acc_ext.expect("non-empty batch");
        for t in acc_ext.tensors_mut() {
            for v in t.data_mut() {
                *v *= inv_b;
            }
        }
        for v in acc_w.data_mut() {
            *v *= inv_b;
        }

        // regularizer: loss += (λ/2)‖WWᵀ−I‖²_F, grad += 2λ(WWᵀ−I)W
        let lambda = self.model.metric.lambda;
        stats.penalty = constraint_penalty(self.model.metric.weight(), lambda);
        stats.loss += stats.penalty;
        let w_reg = constraint_gradient(self.model.metric.weight(), lambda);
        for (av, rv) in acc_w.data_mut().iter_mut().zip(w_reg.data()) {
            *av += *rv;
        }

        if !stats.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss (d_pos {}, d_neg {}, penalty {})",
                stats.mean_d_pos, stats.mean_d_neg, stats.penalty
            )));
        }

        // global-norm clip over all gradients
        let mut sq = 0.0;
        for t in acc_ext.tensors() {
            sq += t.data().iter().map(|v| v * v).sum::<Real>();
        }
        sq += acc_w.data().iter().map(|v| v * v).sum::<Real>();
        let norm = sq.sqrt();
        if norm > self.cfg.grad_clip {
            let scale = self.cfg.grad_clip / norm;
            for t in acc_ext.tensors_mut() {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
            for v in acc_w.data_mut() {
                *v *= scale;
            }
            self.clip_events += 1;
        }

        // momentum update; biases are parameters too, the metric bias is
        // simply never part of the update so it stays pinned at zero
        let mu = self.cfg.momentum;
        for ((param, vel), grad) in self
            .model
            .params
            .tensors_mut()
            .into_iter()
            .zip(&mut self.vel)
            .zip(acc_ext.tensors())
        {
            for i in 0..param.len() {
                let v = mu * vel.data()[i] - lr * grad.data()[i];
                vel.data_mut()[i] = v;
                param.data_mut()[i] += v;
            }
        }
        {
            let w = self.model.metric.weight_mut();
            for i in 0..w.len() {
                let v = mu * self.vel_w.data()[i] - lr * acc_w.data()[i];
                self.vel_w.data_mut()[i] = v;
                w.data_mut()[i] += v;
            }
        }
        debug_assert!(self.model.metric.bias_is_zero());
        Ok(stats)
    }
}

pub struct PretrainReport {
    pub params: ExtractorParams<Real>,
    pub initial_loss: Real,
    pub loss_trace: Vec<Real>,
    pub final_accuracy: Real,
}

/// Softmax-classification pre-training of the extractor over identity
/// labels. The classification head is dropped from the returned params.
pub fn pretrain_softmax(dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let train_idx = dataset.indices_of(Split::Train);
    let mut ids: Vec<u32> = train_idx
        .iter()
        .map(|&i| dataset.samples[i].identity)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::Dataset(
            "softmax pre-training needs at least 2 identities".into(),
        ));
    }
    let class_of = |identity: u32| ids.binary_search(&identity).expect("identity present");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut params = init_params::<Real>(&cfg.extractor, cfg.seed)?;
    // small head init keeps init logits near zero, so the first-epoch
    // loss starts at ln(n) as a sanity anchor
    let head_bound = 0.05 * (6.0 / (FEATURE_DIM + ids.len()) as f64).sqrt();
    let head_data: Vec<Real> = (0..ids.len() * FEATURE_DIM)
        .map(|_| rng.gen_range(-head_bound..head_bound))
        .collect();
    let mut head_w = Tensor::from_vec(&[ids.len(), FEATURE_DIM], head_data)?;
    let mut head_b = Tensor::zeros(&[ids.len()]);

    let mut vel: Vec<Tensor<Real>> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut vel_head_w = Tensor::zeros(head_w.shape());
    let mut vel_head_b = Tensor::zeros(head_b.shape());

    struct SampleGrads {
        loss: Real,
        correct: bool,
        extractor: ExtractorParams<Real>,
        head_w: Tensor<Real>,
        head_b: Tensor<Real>,
    }

    let run_sample = |params: &ExtractorParams<Real>,
                      head_w: &Tensor<Real>,
                      head_b: &Tensor<Real>,
                      image: &Tensor<Real>,
                      label: usize|
     -> Result<SampleGrads> {
        let mut g = Graph::new();
        let bound = bind_params(&mut g, params);
        let hw = g.leaf(head_w);
        let hb = g.leaf(head_b);
        let feat = forward_prenorm(&mut g, &cfg.extractor, &bound, image)?;
        let logits = g.linear(feat, hw, hb)?;
        let loss = g.softmax_ce(logits, label)?;
        g.backward(loss);
        let logit_vals = g.value(logits).data();
        let pred = logit_vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty logits");
        Ok(SampleGrads {
            loss: g.scalar_value(loss),
            correct: pred == label,
            extractor: read_grads(&g, &bound, params),
            head_w: Tensor::from_vec(head_w.shape(), g.grad(hw).to_vec())?,
            head_b: Tensor::from_vec(head_b.shape(), g.grad(hb).to_vec())?,
        })
    };

    // mean loss at init over the un-augmented training set
    let init_losses: Vec<Result<Real>> = train_idx
        .par_iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &params);
            let hw = g.leaf(&head_w);
            let hb = g.leaf(&head_b);
            let feat = forward_prenorm(&mut g, &cfg.extractor, &bound, &s.pixels)?;
            let logits = g.linear(feat, hw, hb)?;
            let loss = g.softmax_ce(logits, class_of(s.identity))?;
            Ok(g.scalar_value(loss))
        })
        .collect();
    let mut initial_loss = 0.0;
    for l in init_losses {
        initial_loss += l? / train_idx.len() as Real;
    }
    let mut loss_trace = Vec::new();
    let mut final_accuracy = 0.0;
    for epoch in 0..cfg.pretrain_epochs.max(1) {
        let lr = cfg.learning_rate
            * cfg.lr_decay.powi((epoch / cfg.lr_decay_interval.max(1)) as i32);
        let mut order = train_idx.clone();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<(Tensor<Real>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    (
                        translate(&s.pixels, cfg.translation, &mut rng),
                        class_of(s.identity),
                    )
                })
                .collect();
            let results: Vec<Result<SampleGrads>> = inputs
                .par_iter()
                .map(|(img, label)| run_sample(&params, &head_w, &head_b, img, *label))
                .collect();
            let inv = 1.0 / chunk.len() as Real;
            let mut acc: Option<SampleGrads> = None;
            for r in results {
                let sg = r?;
                epoch_loss += sg.loss;
                if sg.correct {
                    correct += 1;
                }
                match &mut acc {
                    None => acc = Some(sg),
                    Some(a) => {
                        for (av, cv) in a
                            .extractor
                            .tensors_mut()
                            .into_iter()
                            .zip(sg.extractor.tensors())
                        {
                            for (x, y) in av.data_mut().iter_mut().zip(cv.data()) {
                                *x += *y;
                            }
                        }
                        for (x, y) in a.head_w.data_mut().iter_mut().zip(sg.head_w.data()) {
                            *x += *y;
                        }
                        for (x, y) in a.head_b.data_mut().iter_mut().zip(sg.head_b.data()) {
                            *x += *y;
                        }
                    }
                }
            }
            let acc = acc.expect("non-empty chunk");
            let update = |param: &mut Tensor<Real>, vel: &mut Tensor<Real>, grad: &Tensor<Real>| {
                for i in 0..param.len() {
                    let v = cfg.momentum * vel.data()[i] - lr * grad.data()[i] * inv;
                    vel.data_mut()[i] = v;
                    param.data_mut()[i] += v;
                }
            };
            for ((param, vel), grad) in params
                .tensors_mut()
                .into_iter()
                .zip(&mut vel)
                .zip(acc.extractor.tensors())
            {
                update(param, vel, grad);
            }
            update(&mut head_w, &mut vel_head_w, &acc.head_w);
            update(&mut head_b, &mut vel_head_b, &acc.head_b);
        }
        loss_trace.push(epoch_loss / train_idx.len() as Real);
        final_accuracy = correct as Real / train_idx.len() as Real;
    }
    Ok(PretrainReport {
        params,
        initial_loss,
        loss_trace,
        final_accuracy,
    })
}

/// Full pipeline: init (or adopt) extractor params, optional softmax
/// pre-training, then epochs of mining + pairwise fine-tuning.
/// Deterministic given the config seed.
pub fn fit(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<ExtractorParams<Real>>,
) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    let params = match init {
        Some(p) => p,
        None if cfg.pretrain_epochs > 0 => pretrain_softmax(dataset, cfg)?.params,
        None => init_params(&cfg.extractor, cfg.seed)?,
    };
    let model = Model {
        config: cfg.extractor.clone(),
        params,
        metric: MetricLayer::identity(FEATURE_DIM, cfg.lambda),
    };
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            * cfg.lr_decay.powi((epoch / cfg.lr_decay_interval.max(1)) as i32);
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x517c_c1b7_2722_0a95),
        );
        // mining distances refresh once per epoch, under the current model
        let features = trainer.model.features(dataset, &train_idx)?;
        let steps = (train_idx.len() / cfg.batch_size).max(1);
        let mut epoch_stats = EpochStats {
            epoch,
            mean_loss: 0.0,
            mean_d_pos: 0.0,
            mean_d_neg: 0.0,
            penalty: 0.0,
        };
        for _ in 0..steps {
            let contexts = build_batch(
                dataset,
                &train_idx,
                &features,
                &trainer.model.metric,
                cfg,
                &mut rng,
            )?;
            let batch: Vec<TripletImages> = contexts
                .iter()
                .map(|c| TripletImages {
                    anchor: translate(
                        &dataset.samples[c.anchor].pixels,
                        cfg.translation,
                        &mut rng,
                    ),
                    positive: translate(
                        &dataset.samples[c.positive].pixels,
                        cfg.translation,
                        &mut rng,
                    ),
                    negative: translate(
                        &dataset.samples[c.negative].pixels,
                        cfg.translation,
                        &mut rng,
                    ),
                })
                .collect();
            let s = trainer.train_step(&batch, lr)?;
            epoch_stats.mean_loss += s.loss / steps as Real;
            epoch_stats.mean_d_pos += s.mean_d_pos / steps as Real;
            epoch_stats.mean_d_neg += s.mean_d_neg / steps as Real;
            epoch_stats.penalty = s.penalty;
        }
        trace.push(epoch_stats);
    }
    Ok((trainer.model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::extractor::ExtractorConfig;

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            extractor: ExtractorConfig::tiny(),
            epochs: 2,
            batch_size: 4,
            translation: 1,
            ..Default::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        generate_synthetic(&SynthSpec {
            identities: 4,
            images_per_camera: 2,
            cameras: 2,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn augment_zero_bound_is_identity() {
        let ds = tiny_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&ds.samples[0], 0, &mut rng);
        assert_eq!(out.pixels.data(), ds.samples[0].pixels.data());
        assert_eq!(out.identity, ds.samples[0].identity);
        assert_eq!(out.camera, ds.samples[0].camera);
    }

    #[test]
    fn translate_moves_content_and_keeps_shape() {
        // image with column index as value
        let mut data = vec![0.0; 3 * 128 * 64];
        for ch in 0..3 {
            for r in 0..128 {
                for c in 0..64 {
                    data[ch * 128 * 64 + r * 64 + c] = c as f64;
                }
            }
        }
        let img = Tensor::from_vec(&[3, 128, 64], data).unwrap();
        let out = translate_by(&img, 0, 5);
        assert_eq!(out.shape(), &[3, 128, 64]);
        // interior pixel shifted right by 5
        assert_eq!(out.data()[30 * 64 + 30], 25.0);
        // left edge replicated
        assert_eq!(out.data()[30 * 64], 0.0);
    }

    #[test]
    fn translate_is_seed_reproducible() {
        let ds = tiny_dataset();
        let a = translate(
            &ds.samples[0].pixels,
            4,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let b = translate(
            &ds.samples[0].pixels,
            4,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn forced_combinatorics_of_minimal_dataset() {
        let ds = generate_synthetic(&SynthSpec {
            identities: 2,
            images_per_camera: 1,
            cameras: 2,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let cfg = quick_cfg();
        let model = Model::init(cfg.extractor.clone(), cfg.lambda, 1).unwrap();
        let idx = ds.indices_of(Split::Train);
        let features = model.features(&ds, &idx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let contexts =
            build_batch(&ds, &idx, &features, &model.metric, &cfg, &mut rng).unwrap();
        for c in &contexts {
            c.check(&ds).unwrap();
            // only one possible positive and negative camera-B sample each
            let a = &ds.samples[c.anchor];
            let p = &ds.samples[c.positive];
            assert_eq!(a.identity, p.identity);
            assert_ne!(a.camera, p.camera);
        }
    }

    #[test]
    fn batch_invariants_on_random_datasets() {
        for seed in 0..30u64 {
            let ds = generate_synthetic(&SynthSpec {
                identities: 3 + (seed % 4) as usize,
                images_per_camera: 1 + (seed % 3) as usize,
                cameras: 2,
                seed,
                ..Default::default()
            })
            .unwrap();
            let cfg = quick_cfg();
            let model = Model::init(cfg.extractor.clone(), cfg.lambda, seed).unwrap();
            let idx = ds.indices_of(Split::Train);
            let features = model.features(&ds, &idx).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let contexts =
                build_batch(&ds, &idx, &features, &model.metric, &cfg, &mut rng).unwrap();
            assert!(!contexts.is_empty());
            for c in &contexts {
                c.check(&ds).unwrap();
            }
        }
    }

    #[test]
    fn mining_changes_positive_selection() {
        // distinct distances: mining picks moderately, uniform picks anything
        let ds = generate_synthetic(&SynthSpec {
            identities: 3,
            images_per_camera: 4,
            cameras: 2,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        let cfg_mined = TrainConfig { batch_size: 64, ..quick_cfg() };
        let cfg_uniform = TrainConfig {
            positive_mining: false,
            negative_mining: false,
            batch_size: 64,
            ..quick_cfg()
        };
        let model = Model::init(cfg_mined.extractor.clone(), 1e-2, 7).unwrap();
        let idx = ds.indices_of(Split::Train);
        let features = model.features(&ds, &idx).unwrap();
        let mut rng1 = ChaCha8Rng::seed_from_u64(1);
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let a = build_batch(&ds, &idx, &features, &model.metric, &cfg_mined, &mut rng1).unwrap();
        let b = build_batch(&ds, &idx, &features, &model.metric, &cfg_uniform, &mut rng2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_lambda_identical_images_give_zero_loss() {
        let ds = tiny_dataset();
        let cfg = TrainConfig { lambda: 0.0, ..quick_cfg() };
        let model = Model::init(cfg.extractor.clone(), 0.0, 5).unwrap();
        let w_before = model.metric.weight().clone();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let img = ds.samples[0].pixels.clone();
        let batch = vec![TripletImages {
            anchor: img.clone(),
            positive: img.clone(),
            negative: img.clone(),
        }];
        let stats = trainer.train_step(&batch, 0.01).unwrap();
        assert_eq!(stats.loss, 0.0);
        assert_eq!(trainer.model.metric.weight().data(), w_before.data());
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        // 1-context batch, tiny net: check d(loss)/d(W) through the
        // analytic path against finite differences of the full objective
        let ds = tiny_dataset();
        let cfg = TrainConfig { lambda: 0.05, ..quick_cfg() };
        let model = Model::init(cfg.extractor.clone(), 0.05, 11).unwrap();
        let images = TripletImages {
            anchor: ds.samples[0].pixels.clone(),
            positive: ds.samples[2].pixels.clone(),
            negative: ds.samples[1].pixels.clone(),
        };
        let objective = |m: &Model| -> Real {
            let fa = crate::extractor::extract(&images.anchor, &m.params, &m.config).unwrap();
            let fp = crate::extractor::extract(&images.positive, &m.params, &m.config).unwrap();
            let fneg = crate::extractor::extract(&images.negative, &m.params, &m.config).unwrap();
            let dp = crate::metric::distance(&fa, &fp, &m.metric).unwrap();
            let dn = crate::metric::distance(&fa, &fneg, &m.metric).unwrap();
            dp - dn + constraint_penalty(m.metric.weight(), m.metric.lambda)
        };
        let trainer = Trainer::new(model.clone(), cfg).unwrap();
        let cg = trainer.context_grads(&images).unwrap();
        let mut w_total = cg.metric_w.clone();
        let reg = constraint_gradient(model.metric.weight(), model.metric.lambda);
        for (a, b) in w_total.data_mut().iter_mut().zip(reg.data()) {
            *a += *b;
        }
        let eps = 1e-6;
        let mut probe = model.clone();
        for i in (0..w_total.len()).step_by(97) {
            let orig = probe.metric.weight().data()[i];
            probe.metric.weight_mut().data_mut()[i] = orig + eps;
            let fp = objective(&probe);
            probe.metric.weight_mut().data_mut()[i] = orig - eps;
            let fm = objective(&probe);
            probe.metric.weight_mut().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = w_total.data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(err <= 1e-4, "W[{i}]: analytic {analytic} numeric {numeric} err {err}");
        }
        // also spot-check one extractor tensor (fc2 weight)
        let g_fc2 = &cg.extractor.fc2_w;
        let mut probe = model.clone();
        for i in (0..g_fc2.len()).step_by(211) {
            let orig = probe.params.fc2_w.data()[i];
            probe.params.fc2_w.data_mut()[i] = orig + eps;
            let fp = objective(&probe);
            probe.params.fc2_w.data_mut()[i] = orig - eps;
            let fm = objective(&probe);
            probe.params.fc2_w.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = g_fc2.data()[i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(err <= 1e-4, "fc2[{i}]: err {err}");
        }
    }

    #[test]
    fn joint_learning_updates_both_parts() {
        let ds = tiny_dataset();
        let cfg = quick_cfg();
        let model = Model::init(cfg.extractor.clone(), 1e-2, 13).unwrap();
        let w_before = model.metric.weight().clone();
        let fc1_before = model.params.fc1_w.clone();
        let mut trainer = Trainer::new(model, cfg).unwrap();
        let batch = vec![TripletImages {
            anchor: ds.samples[0].pixels.clone(),
            positive: ds.samples[2].pixels.clone(),
            negative: ds.samples[5].pixels.clone(),
        }];
        trainer.train_step(&batch, 0.01).unwrap();
        assert_ne!(trainer.model.metric.weight().data(), w_before.data());
        assert_ne!(trainer.model.params.fc1_w.data(), fc1_before.data());
        assert!(trainer.model.metric.bias_is_zero());
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = quick_cfg();
        let (m1, t1) = fit(&ds, &cfg, None).unwrap();
        let (m2, t2) = fit(&ds, &cfg, None).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(m1.metric.weight().data(), m2.metric.weight().data());
        for (a, b) in t1.iter().zip(&t2) {
            assert_eq!(a.mean_loss, b.mean_loss);
        }
        assert!(t1.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn tied_branches_train() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            extractor: ExtractorConfig { tied_branches: true, ..ExtractorConfig::tiny() },
            ..quick_cfg()
        };
        let (model, trace) = fit(&ds, &cfg, None).unwrap();
        assert_eq!(model.params.branches.len(), 1);
        assert!(trace.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn pretrain_reduces_loss_and_discards_head() {
        let ds = generate_synthetic(&SynthSpec {
            identities: 2,
            images_per_camera: 4,
            cameras: 2,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            extractor: ExtractorConfig::tiny(),
            pretrain_epochs: 12,
            batch_size: 4,
            translation: 0,
            ..Default::default()
        };
        let report = pretrain_softmax(&ds, &cfg).unwrap();
        // ln(2) ± 10% at random init
        let ln2 = (2.0f64).ln();
        assert!(
            (report.initial_loss - ln2).abs() <= 0.1 * ln2,
            "initial loss {} vs ln 2 {}",
            report.initial_loss,
            ln2
        );
        assert!(report.final_accuracy >= 0.95, "accuracy {}", report.final_accuracy);
        assert!(report.loss_trace.last().unwrap() < &report.loss_trace[0]);
        // returned params carry no head tensors
        let names: Vec<String> = report
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(names.iter().all(|n| !n.contains("head")));
    }

    #[test]
    fn pretrain_rejects_single_identity() {
        let ds = generate_synthetic(&SynthSpec {
            identities: 1,
            images_per_camera: 2,
            cameras: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = quick_cfg();
        assert!(pretrain_softmax(&ds, &cfg).is_err());
    }
}
