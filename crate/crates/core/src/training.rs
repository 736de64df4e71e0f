//! End-to-end training with SGD and momentum.
//!
//! A step splits the network across tapes: every distinct image in the
//! batch (and every padding image in use) runs the backbone on its own
//! graph, and one head graph holds the comparison, predictor and embedding
//! losses over feature leaves. After the head's backward pass, the
//! gradients at those leaves seed each image graph's backward pass.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::NUM_LAYERS;
use crate::checkpoint::Checkpoint;
use crate::comparison::{emb_l2, mask_l1, normalize_train, BatchMoments, TypeId, NUM_TYPES};
use crate::data::{mean_images, pad_outfit, sample_negative, Dataset, Item, Outfit, Slot, Split};
use crate::error::{Error, Result};
use crate::evaluation::outfits_auc;
use crate::model::{Model, ModelConfig, Scorer};
use crate::param::seeded_rng;
use crate::predictor::{bce_loss, score, LossTerms, LossWeights};
use crate::tensor::{Graph, Tensor};
use crate::vse::{text_embed, visual_embed, vse_loss, Vocabulary};

const SHUFFLE_STREAM: u64 = 0x7a;
const VAL_STREAM: u64 = 0x7b;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Learning-rate factor applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    /// Positive outfits per batch; each brings its sampled negatives.
    pub batch: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub negatives_per_positive: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-2,
            decay: 0.2,
            decay_every: 10,
            momentum: 0.9,
            batch: 32,
            epochs: 50,
            weights: LossWeights::default(),
            seed: 0,
            negatives_per_positive: 1,
            clip_norm: 5.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 || self.decay_every == 0 || self.negatives_per_positive == 0 {
            return bad("batch, decay_every and negatives_per_positive must be at least 1".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad(format!("clip_norm must be non-negative, got {}", self.clip_norm));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One outfit of a batch: its items and label.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub items: Vec<&'a Item>,
    pub label: u8,
}

/// Loss values and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct StepResult {
    /// `(clf, emb, mask, vse)`
    pub terms: [f64; 4],
    pub total: f64,
    /// In [`Model::params`] order; frozen groups get zeros.
    pub grads: Vec<Vec<f64>>,
    pub moments: BatchMoments,
    /// Hash of the activation pattern over every tape of the step; steps
    /// with equal patterns share one smooth piece of the loss.
    pub kink_pattern: u64,
}

enum ImageKey<'a> {
    Item(&'a Item),
    Mean(TypeId),
}

/// Loss of a batch; with `grad`, also the gradient of every parameter.
pub fn batch_step(model: &Model, batch: &[Example], weights: &LossWeights, grad: bool) -> Result<StepResult> {
    let cfg = &model.config;
    let layers = &cfg.layers;

    // distinct images, in first-use order
    let mut keys: Vec<ImageKey> = Vec::new();
    let mut item_slot: HashMap<&str, usize> = HashMap::new();
    let mut mean_slot: [Option<usize>; NUM_TYPES] = [None; NUM_TYPES];
    let mut outfit_slots: Vec<[usize; NUM_TYPES]> = Vec::with_capacity(batch.len());
    let mut outfit_present: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    for ex in batch {
        let padded = pad_outfit(&ex.items)?;
        let mut slots = [0; NUM_TYPES];
        let mut present = Vec::new();
        for (k, s) in padded.slots.iter().enumerate() {
            slots[k] = match s {
                Slot::Item(item) => {
                    let idx = *item_slot.entry(item.id.as_str()).or_insert_with(|| {
                        keys.push(ImageKey::Item(item));
                        keys.len() - 1
                    });
                    present.push(idx);
                    idx
                }
                Slot::Mean(t) => *mean_slot[t.index()].get_or_insert_with(|| {
                    keys.push(ImageKey::Mean(*t));
                    keys.len() - 1
                }),
            };
        }
        outfit_slots.push(slots);
        outfit_present.push(present);
    }

    // backbone, one tape per image
    let mut image_runs = Vec::with_capacity(keys.len());
    for key in &keys {
        let pixels = match key {
            ImageKey::Item(item) => item.pixels(),
            ImageKey::Mean(t) => model.mean_images[t.index()].clone(),
        };
        let graph = Graph::new();
        let (feats, vars) = model.extract_on(&graph, pixels, grad)?;
        image_runs.push((graph, feats, vars));
    }

    // heads
    let head_graph = Graph::new();
    let head = model.bind_head(&head_graph, grad)?;
    let leaves: Vec<Vec<Tensor>> = image_runs
        .iter()
        .map(|(_, feats, _)| {
            feats
                .iter()
                .map(|f| head_graph.tensor(&f.shape(), f.values(), grad))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut raws = Vec::with_capacity(batch.len());
    for slots in &outfit_slots {
        let s: [&[Tensor]; NUM_TYPES] = std::array::from_fn(|k| leaves[slots[k]].as_slice());
        raws.push(model.raw_similarities(&head, &s)?);
    }
    let stacked = Tensor::concat(&raws)?.reshape(&[batch.len(), cfg.flat_len()])?;
    let (normalized, moments) = normalize_train(&stacked, &model.norm)?;
    let scores = score(&normalized, &head.mlp)?;
    let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
    let clf = bce_loss(&scores, &labels)?;

    let per_outfit: Vec<Vec<&[Tensor]>> =
        outfit_present.iter().map(|p| p.iter().map(|&i| leaves[i].as_slice()).collect()).collect();
    let emb = Some(emb_l2(&per_outfit, layers)?);
    let mask = if cfg.use_projection { Some(mask_l1(&head.masks)?) } else { None };
    let vse = match &head.vse {
        Some(vars) => {
            let mut u = Vec::new();
            let mut v = Vec::new();
            for (i, key) in keys.iter().enumerate() {
                if let ImageKey::Item(item) = key {
                    u.push(visual_embed(&leaves[i][NUM_LAYERS - 1], vars)?);
                    v.push(text_embed(&model.vocab.ids(&item.tokens)?, vars)?);
                }
            }
            Some(vse_loss(&u, &v, vars.margin)?)
        }
        None => None,
    };
    let terms = LossTerms { clf, emb, mask, vse };
    let total = terms.total(weights)?;

    let names = model.params();
    let mut grads: Vec<Vec<f64>> = names.iter().map(|(_, _, p)| vec![0.0; p.len()]).collect();
    if grad {
        total.backward()?;
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, (n, _, _))| (n.as_str(), i)).collect();
        let mut add = |name: &str, t: &Tensor| {
            if let Some(g) = t.grad() {
                grads[index[name]].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        };
        for ((graph, feats, vars), leaf) in image_runs.iter().zip(&leaves) {
            let seeds: Vec<(Vec<f64>, &Tensor)> =
                leaf.iter().zip(feats).filter_map(|(l, f)| l.grad().map(|g| (g, f))).collect();
            if seeds.is_empty() {
                continue;
            }
            let refs: Vec<(&Tensor, &[f64])> = seeds.iter().map(|(g, f)| (*f, g.as_slice())).collect();
            graph.backward_seeded(&refs)?;
            for k in 0..NUM_LAYERS {
                add(&format!("backbone.conv{}.weight", k + 1), &vars.kernels[k]);
                add(&format!("backbone.conv{}.bias", k + 1), &vars.biases[k]);
            }
        }
        if cfg.use_projection {
            for (k, bank) in head.masks.banks.iter().enumerate() {
                add(&format!("masks.layer{}", k + 1), bank);
            }
        }
        add("mlp.w1", &head.mlp.w1);
        add("mlp.b", &head.mlp.b);
        add("mlp.w2", &head.mlp.w2);
        if let Some(vars) = &head.vse {
            add("vse.word", &vars.word);
            add("vse.image", &vars.image);
        }
    }
    let mut pattern = std::collections::hash_map::DefaultHasher::new();
    head_graph.hash_kink_pattern(&mut pattern);
    for (g, _, _) in &image_runs {
        g.hash_kink_pattern(&mut pattern);
    }
    Ok(StepResult {
        kink_pattern: std::hash::Hasher::finish(&pattern),
        terms: terms.values(),
        total: total.item(),
        grads,
        moments,
    })
}

/// Momentum buffers, one per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: model.params().iter().map(|(_, _, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// `v ← μ·v − lr·g; θ ← θ + v` for every trainable array.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], lr: f64) {
        let trains: Vec<bool> = model.params().iter().map(|(_, g, _)| model.trains(*g)).collect();
        for (((_, _, p), (v, g)), train) in model.params_mut().into_iter().zip(self.velocity.iter_mut().zip(grads)).zip(trains) {
            if !train {
                continue;
            }
            for ((x, vi), gi) in p.values.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi - lr * gi;
                *x += *vi;
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Finite even after the `f32` rounding of a checkpoint.
fn storable(v: f64) -> bool {
    (v as f32).is_finite()
}

fn first_non_finite(model: &Model, grads: Option<&[Vec<f64>]>) -> String {
    for (i, (name, _, p)) in model.params().iter().enumerate() {
        if p.values.iter().any(|v| !storable(*v)) {
            return format!("parameter {name} is not finite in f32");
        }
        if grads.is_some_and(|g| g[i].iter().any(|v| !v.is_finite())) {
            return format!("gradient of {name} is not finite");
        }
    }
    let (name, size) = model
        .params()
        .iter()
        .map(|(n, _, p)| (n.clone(), p.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_default();
    format!("loss is not finite; largest parameter is {name} (|x| = {size:e})")
}

/// Per-epoch summary, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub clf: f64,
    pub emb: f64,
    pub mask: f64,
    pub vse: f64,
    pub val_auc: f64,
    pub seconds: f64,
}

/// Validation outfits: every positive plus one negative per positive drawn
/// once from a fixed stream.
pub fn validation_set(split: &Split, seed: u64) -> Result<Vec<Outfit>> {
    let pool = split.pool();
    let mut rng = seeded_rng(seed, VAL_STREAM);
    let mut out = Vec::with_capacity(2 * split.outfits.len());
    for o in &split.outfits {
        out.push(o.clone());
        out.push(sample_negative(o, &split.items, &pool, &mut rng)?);
    }
    Ok(out)
}

/// AUC of `model` over labelled outfits of `split`.
pub fn outfit_auc(model: &Model, split: &Split, outfits: &[Outfit]) -> Result<f64> {
    outfits_auc(&Scorer::new(model)?, split, outfits)
}

/// A fresh model for `ds` under `cfg`: vocabulary and padding images come
/// from the training split.
pub fn initial_model(ds: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let vocab = Vocabulary::new(ds.train.items.iter().flat_map(|i| i.tokens.iter().cloned()));
    Model::new(&cfg.model, cfg.seed, vocab, mean_images(&ds.train.items)?)
}

pub struct TrainOutcome {
    /// Best-on-validation model, rounded as stored on disk.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Trains from scratch. `on_epoch` sees every epoch summary as it happens.
pub fn train(ds: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let side = cfg.model.backbone.input_side;
    if ds.train.side != side {
        return Err(Error::Config(format!("model expects {side}px images, data has {}px", ds.train.side)));
    }
    let mut model = initial_model(ds, cfg)?;
    let mut sgd = Sgd::new(&model, cfg.momentum);
    let pool = ds.train.pool();
    let val = validation_set(&ds.val, cfg.seed)?;
    let mut rng = seeded_rng(cfg.seed, SHUFFLE_STREAM);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..ds.train.outfits.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Vec::with_capacity(chunk.len() * (1 + cfg.negatives_per_positive));
            for &i in chunk {
                let pos = &ds.train.outfits[i];
                batch.push(Example { items: ds.train.outfit_items(pos), label: 1 });
                for _ in 0..cfg.negatives_per_positive {
                    let neg = sample_negative(pos, &ds.train.items, &pool, &mut rng)?;
                    batch.push(Example { items: ds.train.outfit_items(&neg), label: 0 });
                }
            }
            let mut step = match batch_step(&model, &batch, &cfg.weights, true) {
                Err(Error::Numeric(_)) => return Err(Error::Divergence(first_non_finite(&model, None))),
                other => other?,
            };
            if !step.total.is_finite() || step.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence(first_non_finite(&model, Some(&step.grads))));
            }
            clip_global_norm(&mut step.grads, cfg.clip_norm);
            sgd.step(&mut model, &step.grads, lr);
            model.norm.update(&cfg.model.layers, &step.moments);
            if model.params().iter().any(|(_, _, p)| p.values.iter().any(|v| !storable(*v))) {
                return Err(Error::Divergence(first_non_finite(&model, None)));
            }
            for (s, v) in sums.iter_mut().zip(std::iter::once(step.total).chain(step.terms)) {
                *s += v;
            }
            steps += 1;
        }
        let snapshot = model.quantized();
        let val_auc = outfit_auc(&snapshot, &ds.val, &val)?;
        let n = steps.max(1) as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sums[0] / n,
            clf: sums[1] / n,
            emb: sums[2] / n,
            mask: sums[3] / n,
            vse: sums[4] / n,
            val_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            best = Some((val_auc, epoch + 1, snapshot));
        }
    }
    let (best_val_auc, best_epoch, best_model) = match best {
        Some((a, e, m)) => (Some(a), Some(e), m),
        None => (None, None, model.quantized()),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: best_model,
            train_config: Some(cfg.clone()),
            best_val_auc,
            best_epoch,
        },
        history,
    })
}

/// Uniformly random perturbation helper for property tests and benches.
pub fn jitter(model: &mut Model, scale: f64, rng: &mut impl Rng) {
    for (_, _, p) in model.params_mut() {
        p.values.iter_mut().for_each(|v| *v += rng.gen_range(-scale..=scale));
    }
}
