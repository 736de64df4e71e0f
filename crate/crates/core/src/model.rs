//! The assembled network: backbone, condition masks, predictor and
//! embedding heads, plus the state needed to score a single outfit
//! (normalization statistics, vocabulary, padding images).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract, init_backbone, BackboneConfig, BackboneParams, LayerFeatures, NUM_LAYERS};
use crate::comparison::{check_layers, compare_outfit, normalize_eval, MaskBank, MaskVars, NormStats, TypeId, NUM_CONDITIONS, NUM_TYPES};
use crate::data::{pad_outfit, Item, Slot};
use crate::error::{Error, Result};
use crate::param::{seeded_rng, Param};
use crate::predictor::{score, MlpParams, MlpVars};
use crate::tensor::{Graph, Tensor};
use crate::vse::{Vocabulary, VseParams, VseVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub hidden: usize,
    pub joint_dim: usize,
    pub margin: f64,
    /// Enabled feature layers, 1-based and increasing.
    pub layers: Vec<usize>,
    pub use_projection: bool,
    pub use_vse: bool,
    pub shared_side_masks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            hidden: 32,
            joint_dim: 64,
            margin: 0.2,
            layers: vec![1, 2, 3, 4],
            use_projection: true,
            use_vse: true,
            shared_side_masks: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        check_layers(&self.layers)?;
        if self.hidden == 0 || self.joint_dim == 0 {
            return Err(Error::Config("hidden and joint dimensions must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }

    /// Length of the comparison vector fed to the predictor.
    pub fn flat_len(&self) -> usize {
        self.layers.len() * NUM_CONDITIONS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub masks: MaskBank,
    pub mlp: MlpParams,
    pub vse: VseParams,
    pub vocab: Vocabulary,
    pub norm: NormStats,
    /// Per type, the `[3, S, S]` image used to fill a missing slot.
    pub mean_images: Vec<Vec<f64>>,
}

/// Parameter groups, for deciding which ones an ablation freezes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Backbone,
    Masks,
    Mlp,
    Vse,
}

impl Model {
    /// Fresh model; every parameter group draws from its own stream of
    /// `seed`.
    pub fn new(config: &ModelConfig, seed: u64, vocab: Vocabulary, mean_images: Vec<Vec<f64>>) -> Result<Model> {
        config.validate()?;
        let mut config = config.clone();
        config.backbone.seed = seed;
        let side = config.backbone.input_side;
        let pixels = config.backbone.input_channels * side * side;
        if mean_images.len() != NUM_TYPES || mean_images.iter().any(|m| m.len() != pixels) {
            return Err(Error::Data(format!("need {NUM_TYPES} padding images of {pixels} values")));
        }
        if vocab.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let dims = config.backbone.stage_channels;
        Ok(Model {
            backbone: init_backbone(&config.backbone)?,
            masks: MaskBank::ones(&dims, config.shared_side_masks),
            mlp: MlpParams::init(config.flat_len(), config.hidden, &mut seeded_rng(seed, 0x31)),
            vse: VseParams::init(config.joint_dim, vocab.len(), dims[NUM_LAYERS - 1], config.margin, &mut seeded_rng(seed, 0x32))?,
            vocab,
            norm: NormStats::default(),
            mean_images,
            config,
        })
    }

    /// Every parameter array with its checkpoint name and group.
    pub fn params(&self) -> Vec<(String, Group, &Param)> {
        let mut out = Vec::new();
        for k in 0..NUM_LAYERS {
            out.push((format!("backbone.conv{}.weight", k + 1), Group::Backbone, &self.backbone.kernels[k]));
            out.push((format!("backbone.conv{}.bias", k + 1), Group::Backbone, &self.backbone.biases[k]));
        }
        for (k, p) in self.masks.layers.iter().enumerate() {
            out.push((format!("masks.layer{}", k + 1), Group::Masks, p));
        }
        out.push(("mlp.w1".into(), Group::Mlp, &self.mlp.w1));
        out.push(("mlp.b".into(), Group::Mlp, &self.mlp.b));
        out.push(("mlp.w2".into(), Group::Mlp, &self.mlp.w2));
        out.push(("vse.word".into(), Group::Vse, &self.vse.word));
        out.push(("vse.image".into(), Group::Vse, &self.vse.image));
        out
    }

    /// Mutable view in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<(String, Group, &mut Param)> {
        let mut out = Vec::new();
        for (k, (w, b)) in self.backbone.kernels.iter_mut().zip(self.backbone.biases.iter_mut()).enumerate() {
            out.push((format!("backbone.conv{}.weight", k + 1), Group::Backbone, w));
            out.push((format!("backbone.conv{}.bias", k + 1), Group::Backbone, b));
        }
        for (k, p) in self.masks.layers.iter_mut().enumerate() {
            out.push((format!("masks.layer{}", k + 1), Group::Masks, p));
        }
        out.push(("mlp.w1".into(), Group::Mlp, &mut self.mlp.w1));
        out.push(("mlp.b".into(), Group::Mlp, &mut self.mlp.b));
        out.push(("mlp.w2".into(), Group::Mlp, &mut self.mlp.w2));
        out.push(("vse.word".into(), Group::Vse, &mut self.vse.word));
        out.push(("vse.image".into(), Group::Vse, &mut self.vse.image));
        out
    }

    /// Whether training updates this group under the model's ablation flags.
    pub fn trains(&self, group: Group) -> bool {
        match group {
            Group::Masks => self.config.use_projection,
            Group::Vse => self.config.use_vse,
            Group::Backbone | Group::Mlp => true,
        }
    }

    /// Binds the heads onto `graph`. With projection disabled the masks are
    /// pinned to ones and never receive a gradient.
    pub fn bind_head(&self, graph: &Graph, train: bool) -> Result<Head> {
        let masks = if self.config.use_projection {
            self.masks.bind(graph, train)?
        } else {
            MaskBank::ones(&self.config.backbone.stage_channels, self.config.shared_side_masks).bind(graph, false)?
        };
        Ok(Head {
            masks,
            mlp: self.mlp.bind(graph, train)?,
            vse: if self.config.use_vse { Some(self.vse.bind(graph, train)?) } else { None },
        })
    }

    /// Raw comparison vector of five type-ordered slots.
    pub fn raw_similarities(&self, head: &Head, slots: &[&[Tensor]; NUM_TYPES]) -> Result<Tensor> {
        let typed: Vec<(TypeId, &[Tensor])> = TypeId::ALL.iter().zip(slots).map(|(&t, f)| (t, *f)).collect();
        compare_outfit(&typed, &head.masks, &self.config.layers)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let b = &self.config.backbone;
        [b.input_channels, b.input_side, b.input_side]
    }

    /// Forward-only features of one image.
    pub fn features_of(&self, pixels: &[f64]) -> Result<LayerFeatures> {
        crate::backbone::extract_values(&self.backbone, &self.config.backbone, pixels)
    }

    /// Runs the backbone on `pixels` inside `graph`, with parameters that
    /// require gradients when `train`.
    pub fn extract_on(&self, graph: &Graph, pixels: Vec<f64>, train: bool) -> Result<(Vec<Tensor>, crate::backbone::BackboneVars)> {
        let vars = self.backbone.bind(graph, train)?;
        let image = graph.constant(&self.image_shape(), pixels)?;
        Ok((extract(&image, &vars, &self.config.backbone)?, vars))
    }

    /// Copy with every parameter and padding image rounded through `f32`,
    /// as a checkpoint stores them.
    pub fn quantized(&self) -> Model {
        let mut q = self.clone();
        for (_, _, p) in q.params_mut() {
            p.values.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        q.mean_images.iter_mut().flatten().for_each(|v| *v = f64::from(*v as f32));
        q
    }
}

/// Head parameters bound onto a graph.
pub struct Head {
    pub masks: MaskVars,
    pub mlp: MlpVars,
    pub vse: Option<VseVars>,
}

/// The forward pass of one outfit, kept for inspection.
pub struct Forward {
    pub graph: Graph,
    pub raw: Tensor,
    /// Normalized similarities; a watch-point when requested.
    pub normalized: Tensor,
    pub score: Tensor,
    /// Slot flags in type order: `true` where a mean image fills the slot.
    pub padded: [bool; NUM_TYPES],
}

/// Evaluation-mode scoring with per-item feature caching.
///
/// Features are cached by item id, so ids must identify images uniquely.
pub struct Scorer<'m> {
    model: &'m Model,
    means: Vec<Rc<LayerFeatures>>,
    cache: RefCell<HashMap<String, Rc<LayerFeatures>>>,
}

impl<'m> Scorer<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let means = model
            .mean_images
            .iter()
            .map(|m| model.features_of(m).map(Rc::new))
            .collect::<Result<_>>()?;
        Ok(Scorer {
            model,
            means,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Computes missing features for `items` in parallel on the current
    /// rayon pool.
    pub fn prefetch(&self, items: &[&Item]) -> Result<()> {
        let missing: Vec<&Item> = {
            let cache = self.cache.borrow();
            let mut seen = std::collections::HashSet::new();
            items
                .iter()
                .filter(|i| !cache.contains_key(&i.id) && seen.insert(i.id.as_str()))
                .copied()
                .collect()
        };
        let model = self.model;
        let computed: Vec<(String, LayerFeatures)> = missing
            .par_iter()
            .map(|item| Ok((item.id.clone(), model.features_of(&item.pixels())?)))
            .collect::<Result<_>>()?;
        let mut cache = self.cache.borrow_mut();
        for (id, f) in computed {
            cache.insert(id, Rc::new(f));
        }
        Ok(())
    }

    pub fn features(&self, item: &Item) -> Result<Rc<LayerFeatures>> {
        if let Some(f) = self.cache.borrow().get(&item.id) {
            return Ok(f.clone());
        }
        let f = Rc::new(self.model.features_of(&item.pixels())?);
        self.cache.borrow_mut().insert(item.id.clone(), f.clone());
        Ok(f)
    }

    pub fn mean_features(&self, t: TypeId) -> Rc<LayerFeatures> {
        self.means[t.index()].clone()
    }

    /// Forward pass of one outfit (1 to 5 items of distinct types). With
    /// `watch`, gradients of the score are retained at the normalized
    /// similarities.
    pub fn forward(&self, items: &[&Item], watch: bool) -> Result<Forward> {
        let padded = pad_outfit(items)?;
        let graph = Graph::new();
        let mut feats: Vec<Vec<Tensor>> = Vec::with_capacity(NUM_TYPES);
        for slot in &padded.slots {
            let f = match slot {
                Slot::Item(item) => self.features(item)?,
                Slot::Mean(t) => self.mean_features(*t),
            };
            feats.push(
                f.per_layer
                    .iter()
                    .map(|v| graph.constant(&[v.len()], v.clone()))
                    .collect::<Result<_>>()?,
            );
        }
        let head = self.model.bind_head(&graph, false)?;
        let slots: [&[Tensor]; NUM_TYPES] = std::array::from_fn(|k| feats[k].as_slice());
        let raw = self.model.raw_similarities(&head, &slots)?;
        let normalized = normalize_eval(&raw, &self.model.norm, &self.model.config.layers)?;
        if watch {
            normalized.watch();
        }
        let score = score(&normalized, &head.mlp)?;
        Ok(Forward {
            graph,
            raw,
            normalized,
            score,
            padded: padded.padded_flags(),
        })
    }

    /// Compatibility logit of an outfit.
    pub fn score(&self, items: &[&Item]) -> Result<f64> {
        Ok(self.forward(items, false)?.score.item())
    }
}
