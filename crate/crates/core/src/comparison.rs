//! Type-conditioned pairwise comparison of item features.
//!
//! For every unordered pair of item types (a *condition*) and every feature
//! layer there are two learnable masks, one per side of the pair. An item's
//! feature is gated by its side's mask and rectified; the similarity of two
//! items is the cosine of their gated features. Collecting all pairs of a
//! padded five-slot outfit over the enabled layers gives the flat comparison
//! vector the predictor consumes, ordered layer-major and then by
//! [`CondId::index`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::NUM_LAYERS;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{Graph, Tensor};

/// Item types, in slot order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeId {
    Top,
    Bottom,
    Shoe,
    Bag,
    Accessory,
}

pub const NUM_TYPES: usize = 5;
pub const NUM_CONDITIONS: usize = NUM_TYPES * (NUM_TYPES - 1) / 2;

impl TypeId {
    pub const ALL: [TypeId; NUM_TYPES] = [TypeId::Top, TypeId::Bottom, TypeId::Shoe, TypeId::Bag, TypeId::Accessory];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TypeId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TypeId::Top => "top",
            TypeId::Bottom => "bottom",
            TypeId::Shoe => "shoe",
            TypeId::Bag => "bag",
            TypeId::Accessory => "accessory",
        }
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which member of a condition's type pair an item plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

/// An unordered pair of distinct types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CondId {
    first: TypeId,
    second: TypeId,
}

impl CondId {
    pub fn new(a: TypeId, b: TypeId) -> Result<Self> {
        if a == b {
            return Err(Error::Type(format!("no condition pairs {a} with itself")));
        }
        let (first, second) = if a < b { (a, b) } else { (b, a) };
        Ok(CondId { first, second })
    }

    /// All conditions in enumeration order: `(Top,Bottom), (Top,Shoe), …,
    /// (Bag,Accessory)`.
    pub fn all() -> Vec<CondId> {
        let mut out = Vec::with_capacity(NUM_CONDITIONS);
        for i in 0..NUM_TYPES {
            for j in i + 1..NUM_TYPES {
                out.push(CondId {
                    first: TypeId::ALL[i],
                    second: TypeId::ALL[j],
                });
            }
        }
        out
    }

    pub fn index(self) -> usize {
        let (i, j) = (self.first.index(), self.second.index());
        // pairs before row i, then the offset inside row i
        i * (2 * NUM_TYPES - i - 1) / 2 + (j - i - 1)
    }

    pub fn types(self) -> (TypeId, TypeId) {
        (self.first, self.second)
    }

    pub fn side_of(self, t: TypeId) -> Result<Side> {
        if t == self.first {
            Ok(Side::First)
        } else if t == self.second {
            Ok(Side::Second)
        } else {
            Err(Error::Type(format!("{t} is not part of condition {self}")))
        }
    }

    pub fn name(self) -> String {
        format!("{}-{}", self.first, self.second)
    }
}

impl fmt::Display for CondId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.second)
    }
}

/// Condition names in enumeration order, as written to checkpoints and
/// reports.
pub fn condition_order() -> Vec<String> {
    CondId::all().into_iter().map(CondId::name).collect()
}

/// Learnable masks: per layer a `[10, sides, D_k]` array, where `sides` is 2
/// (one mask per type of the pair) or 1 when both sides share a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBank {
    pub layers: Vec<Param>,
}

impl MaskBank {
    /// All-ones masks, so the projection starts out as a plain `relu`.
    pub fn ones(dims: &[usize; NUM_LAYERS], shared_sides: bool) -> Self {
        let sides = if shared_sides { 1 } else { 2 };
        MaskBank {
            layers: dims.iter().map(|&d| Param::filled(&[NUM_CONDITIONS, sides, d], 1.0)).collect(),
        }
    }

    pub fn sides(&self) -> usize {
        self.layers[0].shape[1]
    }

    pub fn bind(&self, graph: &Graph, requires_grad: bool) -> Result<MaskVars> {
        let sides = self.sides();
        let mut banks = Vec::with_capacity(self.layers.len());
        let mut slices = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let dim = p.shape[2];
            let bank = p.bind(graph, requires_grad)?;
            let mut per_layer = Vec::with_capacity(NUM_CONDITIONS * sides);
            for row in 0..NUM_CONDITIONS * sides {
                let idx: Vec<usize> = (row * dim..(row + 1) * dim).collect();
                per_layer.push(bank.gather(&idx)?);
            }
            banks.push(bank);
            slices.push(per_layer);
        }
        Ok(MaskVars { banks, slices, sides })
    }
}

/// A [`MaskBank`] bound onto a graph, with every mask vector pre-sliced.
pub struct MaskVars {
    pub banks: Vec<Tensor>,
    slices: Vec<Vec<Tensor>>,
    sides: usize,
}

impl MaskVars {
    pub fn mask(&self, layer: usize, cond: CondId, side: Side) -> &Tensor {
        let s = if self.sides == 1 || side == Side::First { 0 } else { 1 };
        &self.slices[layer][cond.index() * self.sides + s]
    }
}

/// `relu(x ⊙ m)`.
pub fn project(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.mul(mask)?.relu())
}

/// Cosine similarity of the two items' projections under their condition.
/// Zero-norm projections give 0. Swapping the arguments gives the same
/// value.
pub fn pair_similarity(masks: &MaskVars, layer: usize, a: (&Tensor, TypeId), b: (&Tensor, TypeId)) -> Result<Tensor> {
    let cond = CondId::new(a.1, b.1)?;
    let pa = project(a.0, masks.mask(layer, cond, cond.side_of(a.1)?))?;
    let pb = project(b.0, masks.mask(layer, cond, cond.side_of(b.1)?))?;
    // fixed operand order keeps the result bit-identical under swapping
    if cond.side_of(a.1)? == Side::First {
        pa.cosine(&pb)
    } else {
        pb.cosine(&pa)
    }
}

/// 1-based enabled layers, validated and sorted.
pub fn check_layers(layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("at least one layer must be enabled".into()));
    }
    if layers.iter().any(|&l| l == 0 || l > NUM_LAYERS) {
        return Err(Error::Config(format!("layers must lie in 1..={NUM_LAYERS}, got {layers:?}")));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("layers must be strictly increasing, got {layers:?}")));
    }
    Ok(())
}

/// Raw similarities of a five-slot outfit: for each enabled layer (outer)
/// and each condition (inner), the similarity of the two items holding that
/// condition's types. `slots[i].1` are the item's per-layer features.
pub fn compare_outfit(slots: &[(TypeId, &[Tensor])], masks: &MaskVars, layers: &[usize]) -> Result<Tensor> {
    if slots.len() != NUM_TYPES {
        return Err(Error::shape(format!("comparison needs {NUM_TYPES} slots, got {}", slots.len())));
    }
    for (i, (t, _)) in slots.iter().enumerate() {
        if slots[..i].iter().any(|(u, _)| u == t) {
            return Err(Error::Type(format!("type {t} appears twice in one outfit")));
        }
    }
    let mut parts = Vec::with_capacity(layers.len() * NUM_CONDITIONS);
    for &layer in layers {
        let k = layer - 1;
        let mut row: Vec<Option<Tensor>> = vec![None; NUM_CONDITIONS];
        for i in 0..NUM_TYPES {
            for j in i + 1..NUM_TYPES {
                let (ti, fi) = slots[i];
                let (tj, fj) = slots[j];
                let sim = pair_similarity(masks, k, (&fi[k], ti), (&fj[k], tj))?;
                row[CondId::new(ti, tj)?.index()] = Some(sim);
            }
        }
        parts.extend(row.into_iter().map(|s| s.expect("every condition is covered by five distinct types")));
    }
    Tensor::concat(&parts)
}

/// Plain-number view of one outfit's comparison vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonStack {
    pub layers: Vec<usize>,
    pub flat: Vec<f64>,
}

impl ComparisonStack {
    /// The symmetric 5×5 matrix of one enabled layer (by position in
    /// `layers`), slots in type order. The diagonal is set to 1 and never
    /// fed to the predictor.
    pub fn matrix(&self, pos: usize) -> [[f64; NUM_TYPES]; NUM_TYPES] {
        let mut m = [[1.0; NUM_TYPES]; NUM_TYPES];
        for cond in CondId::all() {
            let (a, b) = cond.types();
            let v = self.flat[pos * NUM_CONDITIONS + cond.index()];
            m[a.index()][b.index()] = v;
            m[b.index()][a.index()] = v;
        }
        m
    }
}

/// Running statistics of every `(layer, condition)` similarity slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: vec![0.0; NUM_LAYERS * NUM_CONDITIONS],
            var: vec![1.0; NUM_LAYERS * NUM_CONDITIONS],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-slot batch moments, to be folded into [`NormStats`] after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn slot_indices(layers: &[usize]) -> impl Iterator<Item = usize> + '_ {
    layers
        .iter()
        .flat_map(|&l| ((l - 1) * NUM_CONDITIONS..l * NUM_CONDITIONS).collect::<Vec<_>>())
}

impl NormStats {
    /// Folds batch moments in with `running ← (1 − momentum)·running +
    /// momentum·batch`.
    pub fn update(&mut self, layers: &[usize], batch: &BatchMoments) {
        for (pos, slot) in slot_indices(layers).enumerate() {
            self.mean[slot] = (1.0 - self.momentum) * self.mean[slot] + self.momentum * batch.mean[pos];
            self.var[slot] = (1.0 - self.momentum) * self.var[slot] + self.momentum * batch.var[pos];
        }
    }

    /// `(scale, shift)` such that eval-mode normalization is `x·scale + shift`.
    pub fn eval_coefficients(&self, layers: &[usize]) -> (Vec<f64>, Vec<f64>) {
        slot_indices(layers)
            .map(|slot| {
                let scale = 1.0 / (self.var[slot] + self.eps).sqrt();
                (scale, -self.mean[slot] * scale)
            })
            .unzip()
    }
}

/// Train-mode normalization of a `[B, F]` batch of raw comparison vectors:
/// each column is standardized by its own batch mean and population
/// variance. Returns the batch moments for the running statistics.
pub fn normalize_train(batch: &Tensor, stats: &NormStats) -> Result<(Tensor, BatchMoments)> {
    let shape = batch.shape();
    let &[rows, cols] = shape.as_slice() else {
        return Err(Error::shape(format!("normalize expects a [B, F] batch, got {shape:?}")));
    };
    if rows < 2 {
        return Err(Error::Batch(format!("train-mode normalization needs at least 2 outfits, got {rows}")));
    }
    let (mean, var) = batch.with_values(|v| crate::tensor::column_moments(v, rows, cols));
    Ok((batch.standardize_columns(stats.eps)?, BatchMoments { mean, var }))
}

/// Eval-mode normalization of one `[F]` comparison vector (or a `[B, F]`
/// batch) by the running statistics.
pub fn normalize_eval(flat: &Tensor, stats: &NormStats, layers: &[usize]) -> Result<Tensor> {
    let (scale, shift) = stats.eval_coefficients(layers);
    let f = scale.len();
    let n = flat.numel();
    if f == 0 || !n.is_multiple_of(f) {
        return Err(Error::shape(format!("{n} similarities do not fit {f} slots")));
    }
    let reps = n / f;
    let scale: Vec<f64> = scale.iter().copied().cycle().take(n).collect();
    let shift: Vec<f64> = shift.iter().copied().cycle().take(f * reps).collect();
    flat.affine(&scale, &shift)
}

/// Sum of absolute values of every mask.
pub fn mask_l1(masks: &MaskVars) -> Result<Tensor> {
    let parts: Vec<Tensor> = masks.banks.iter().map(|b| b.abs().sum()).collect();
    Ok(Tensor::concat(&parts)?.sum())
}

/// Sum of feature-vector norms over the items (and given layers) of every
/// outfit, divided by the number of outfits.
pub fn emb_l2(outfits: &[Vec<&[Tensor]>], layers: &[usize]) -> Result<Tensor> {
    let mut norms = Vec::new();
    for items in outfits {
        for feats in items {
            for &l in layers {
                norms.push(feats[l - 1].l2_norm());
            }
        }
    }
    if outfits.is_empty() || norms.is_empty() {
        return Err(Error::Batch("embedding regularizer over an empty batch".into()));
    }
    Ok(Tensor::concat(&norms)?.sum().scale(1.0 / outfits.len() as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const ALL_LAYERS: [usize; 4] = [1, 2, 3, 4];

    fn dims() -> [usize; 4] {
        [3, 4, 2, 5]
    }

    fn feats(g: &Graph, seed: f64) -> Vec<Tensor> {
        dims()
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let v = (0..d).map(|i| ((i + 7 * k) as f64 * 1.37 + seed).sin()).collect();
                g.constant(&[d], v).unwrap()
            })
            .collect()
    }

    fn flat_of(g: &Graph, masks: &MaskVars, order: &[usize], items: &[Vec<Tensor>]) -> Vec<f64> {
        let slots: Vec<(TypeId, &[Tensor])> =
            order.iter().map(|&i| (TypeId::ALL[i], items[i].as_slice())).collect();
        let _ = g;
        compare_outfit(&slots, masks, &ALL_LAYERS).unwrap().values()
    }

    #[test]
    fn condition_enumeration() {
        let all = CondId::all();
        assert_eq!(all.len(), 10);
        for (i, c) in all.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
        assert_eq!(CondId::new(TypeId::Bag, TypeId::Top).unwrap(), CondId::new(TypeId::Top, TypeId::Bag).unwrap());
        assert!(matches!(CondId::new(TypeId::Shoe, TypeId::Shoe), Err(Error::Type(_))));
        assert_eq!(condition_order()[0], "top-bottom");
        assert_eq!(condition_order()[9], "bag-accessory");
    }

    #[test]
    fn project_examples() {
        let g = Graph::new();
        let x = g.constant(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let ones = g.constant(&[3], vec![1.0; 3]).unwrap();
        let zeros = g.constant(&[3], vec![0.0; 3]).unwrap();
        let m = g.constant(&[3], vec![2.0, 5.0, 0.0]).unwrap();
        assert_eq!(project(&x, &ones).unwrap().values(), vec![1.0, 0.0, 3.0]);
        assert_eq!(project(&x, &zeros).unwrap().values(), vec![0.0; 3]);
        assert_eq!(project(&x, &m).unwrap().values(), vec![2.0, 0.0, 0.0]);
        let short = g.constant(&[2], vec![1.0; 2]).unwrap();
        assert!(matches!(project(&x, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn pair_similarity_examples() {
        let g = Graph::new();
        let masks = MaskBank::ones(&[3, 3, 3, 3], false).bind(&g, false).unwrap();
        let sim = |a: &[f64], b: &[f64]| {
            let ta = g.constant(&[3], a.to_vec()).unwrap();
            let tb = g.constant(&[3], b.to_vec()).unwrap();
            pair_similarity(&masks, 0, (&ta, TypeId::Top), (&tb, TypeId::Shoe)).unwrap().item()
        };
        assert!((sim(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(sim(&[1.0, 0.0, 0.0], &[0.0, 4.0, 0.0]), 0.0);
        assert!((sim(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]) - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(sim(&[-1.0, -2.0, -3.0], &[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn identical_items_share_values_per_condition() {
        let g = Graph::new();
        let mut bank = MaskBank::ones(&dims(), false);
        for (k, p) in bank.layers.iter_mut().enumerate() {
            for (i, v) in p.values.iter_mut().enumerate() {
                *v = 0.5 + ((i * 3 + k) % 7) as f64 * 0.2;
            }
        }
        let masks = bank.bind(&g, false).unwrap();
        let item = feats(&g, 0.3);
        let items = vec![item.clone(), item.clone(), item.clone(), item.clone(), item];
        let flat = flat_of(&g, &masks, &[0, 1, 2, 3, 4], &items);
        assert_eq!(flat.len(), 40);
        // same masks on both sides would give 1; distinct side masks give
        // the cosine between the two gated copies of the same vector
        assert!(flat.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn duplicate_types_rejected() {
        let g = Graph::new();
        let masks = MaskBank::ones(&dims(), false).bind(&g, false).unwrap();
        let item = feats(&g, 0.3);
        let slots: Vec<(TypeId, &[Tensor])> = vec![
            (TypeId::Top, &item),
            (TypeId::Top, &item),
            (TypeId::Shoe, &item),
            (TypeId::Bag, &item),
            (TypeId::Accessory, &item),
        ];
        assert!(matches!(compare_outfit(&slots, &masks, &ALL_LAYERS), Err(Error::Type(_))));
    }

    #[test]
    fn changing_one_condition_mask_only_moves_that_condition() {
        let g = Graph::new();
        let items: Vec<_> = (0..5).map(|i| feats(&g, i as f64)).collect();
        let base = MaskBank::ones(&dims(), false);
        let before = flat_of(&g, &base.bind(&g, false).unwrap(), &[0, 1, 2, 3, 4], &items);
        let mut edited = base.clone();
        let target = CondId::new(TypeId::Shoe, TypeId::Bag).unwrap();
        let d = dims()[2];
        for s in 0..2 {
            for i in 0..d {
                edited.layers[2].values[(target.index() * 2 + s) * d + i] = 0.3 + i as f64;
            }
        }
        let after = flat_of(&g, &edited.bind(&g, false).unwrap(), &[0, 1, 2, 3, 4], &items);
        for (slot, (a, b)) in before.iter().zip(&after).enumerate() {
            if slot == 2 * 10 + target.index() {
                continue;
            }
            assert_eq!(a.to_bits(), b.to_bits(), "slot {slot} moved");
        }
    }

    #[test]
    fn normalize_examples() {
        let g = Graph::new();
        let stats = NormStats::default();
        let flat = g.constant(&[40], (0..40).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = normalize_eval(&flat, &stats, &ALL_LAYERS).unwrap().values();
        for (i, v) in out.iter().enumerate() {
            assert!((v - i as f64 * 0.1).abs() < 1e-5 * (1.0 + i as f64));
        }

        // slot 0 takes {1, 3}; slot 1 is constant
        let mut rows = vec![0.0; 80];
        rows[0] = 1.0;
        rows[40] = 3.0;
        rows[1] = 0.7;
        rows[41] = 0.7;
        let batch = g.constant(&[2, 40], rows).unwrap();
        let (norm, moments) = normalize_train(&batch, &stats).unwrap();
        let v = norm.values();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[40] - 1.0).abs() < 1e-5);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[41], 0.0);
        assert_eq!(moments.mean[0], 2.0);
        assert_eq!(moments.var[0], 1.0);

        let single = g.constant(&[1, 40], vec![0.0; 40]).unwrap();
        assert!(matches!(normalize_train(&single, &stats), Err(Error::Batch(_))));
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut stats = NormStats::default();
        let moments = BatchMoments {
            mean: vec![1.0; 10],
            var: vec![3.0; 10],
        };
        stats.update(&[2], &moments);
        assert!((stats.mean[10] - 0.1).abs() < 1e-15);
        assert!((stats.var[10] - 1.2).abs() < 1e-15);
        assert_eq!(stats.mean[0], 0.0);
        assert_eq!(stats.var[39], 1.0);
    }

    #[test]
    fn regularizer_examples() {
        let g = Graph::new();
        let zero = MaskBank {
            layers: dims().iter().map(|&d| Param::zeros(&[10, 2, d])).collect(),
        };
        assert_eq!(mask_l1(&zero.bind(&g, false).unwrap()).unwrap().item(), 0.0);
        let one = MaskBank {
            layers: vec![Param {
                shape: vec![1, 1, 2],
                values: vec![1.0, -2.0],
            }],
        };
        let g2 = Graph::new();
        let banks = vec![one.layers[0].bind(&g2, false).unwrap()];
        let masks = MaskVars {
            banks,
            slices: vec![],
            sides: 1,
        };
        assert_eq!(mask_l1(&masks).unwrap().item(), 3.0);

        let mut scaled = MaskBank::ones(&dims(), false);
        let base = mask_l1(&scaled.bind(&g, false).unwrap()).unwrap().item();
        scaled.layers.iter_mut().for_each(|p| p.values.iter_mut().for_each(|v| *v *= -2.5));
        let after = mask_l1(&scaled.bind(&g, false).unwrap()).unwrap().item();
        assert!((after - 2.5 * base).abs() < 1e-12);

        let z = vec![g.constant(&[2], vec![0.0; 2]).unwrap()];
        assert_eq!(emb_l2(&[vec![z.as_slice()]], &[1]).unwrap().item(), 0.0);
        let v = vec![g.constant(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(emb_l2(&[vec![v.as_slice()]], &[1]).unwrap().item(), 5.0);
        let v2 = vec![g.constant(&[2], vec![6.0, 8.0]).unwrap()];
        assert_eq!(emb_l2(&[vec![v2.as_slice()]], &[1]).unwrap().item(), 10.0);
    }

    #[test]
    fn mask_gradients_match_finite_differences() {
        use crate::tensor::{max_relative_error, numerical_gradient};
        let d = dims();
        let mut bank = MaskBank::ones(&d, false);
        for p in bank.layers.iter_mut() {
            for (i, v) in p.values.iter_mut().enumerate() {
                *v = 0.4 + (i % 5) as f64 * 0.3;
            }
        }
        let positive_feats = |g: &Graph, seed: f64| -> Vec<Tensor> {
            d.iter()
                .map(|&n| g.constant(&[n], (0..n).map(|i| 0.2 + ((i as f64) * 2.1 + seed).sin().abs()).collect()).unwrap())
                .collect()
        };
        let eval = |bank: &MaskBank, grad: bool| -> (f64, Option<Vec<f64>>) {
            let g = Graph::new();
            let masks = bank.bind(&g, grad).unwrap();
            let items: Vec<_> = (0..5).map(|i| positive_feats(&g, i as f64 * 0.7)).collect();
            let slots: Vec<(TypeId, &[Tensor])> =
                (0..5).map(|i| (TypeId::ALL[i], items[i].as_slice())).collect();
            let flat = compare_outfit(&slots, &masks, &ALL_LAYERS).unwrap();
            let w = g.constant(&[40], (0..40).map(|i| (i as f64 * 0.9).cos()).collect()).unwrap();
            let out = flat.mul(&w).unwrap().sum();
            if grad {
                out.backward().unwrap();
                return (out.item(), masks.banks[1].grad());
            }
            (out.item(), None)
        };
        let analytic = eval(&bank, true).1.unwrap();
        let base = bank.layers[1].values.clone();
        let numeric = numerical_gradient(
            |v| {
                let mut b = bank.clone();
                b.layers[1].values = v.to_vec();
                Ok(eval(&b, false).0)
            },
            &base,
            1e-6,
        )
        .unwrap();
        bank.layers[1].values = base;
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        /// Shuffling items never changes the condition-indexed vector, and
        /// every similarity stays within [-1, 1].
        #[test]
        fn order_invariance_and_range(
            perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(),
            feat_vals in proptest::collection::vec(-2.0f64..2.0, 5 * 14),
            mask_vals in proptest::collection::vec(-1.5f64..1.5, 10 * 2 * 14),
        ) {
            let g = Graph::new();
            let d = dims();
            let mut bank = MaskBank::ones(&d, false);
            let mut off = 0;
            for (k, p) in bank.layers.iter_mut().enumerate() {
                for c in 0..20 {
                    for i in 0..d[k] {
                        p.values[c * d[k] + i] = mask_vals[c * 14 + off + i];
                    }
                }
                off += d[k];
            }
            let masks = bank.bind(&g, false).unwrap();
            let items: Vec<Vec<Tensor>> = (0..5)
                .map(|it| {
                    let mut off = 0;
                    d.iter()
                        .map(|&n| {
                            let v = feat_vals[it * 14 + off..it * 14 + off + n].to_vec();
                            off += n;
                            g.constant(&[n], v).unwrap()
                        })
                        .collect()
                })
                .collect();
            let a = flat_of(&g, &masks, &[0, 1, 2, 3, 4], &items);
            let b = flat_of(&g, &masks, &perm, &items);
            prop_assert_eq!(a.len(), 40);
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
                prop_assert!((-1.0..=1.0).contains(x));
            }
        }
    }
}
