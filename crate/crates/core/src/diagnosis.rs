//! Gradient diagnosis of an outfit and greedy revision.
//!
//! Importance of a similarity is `−∂s/∂r` at the normalized similarities:
//! with compatible outfits labelled 1, a similarity whose increase would
//! lower the score is the one to blame.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::comparison::{condition_order, CondId, TypeId, NUM_CONDITIONS, NUM_TYPES};
use crate::data::{pad_outfit, Item};
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::param::seeded_rng;
use crate::predictor::{probability, score};
use crate::tensor::Graph;

/// Default acceptance threshold on `σ(s)` for revision.
pub const THR: f64 = 0.9;

/// Per-edge importances and the values they were taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGradients {
    pub layers: Vec<usize>,
    /// `−∂s/∂r`, flat order (layers outer, conditions inner)
    pub importance: Vec<f64>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub score: f64,
    pub padded: [bool; NUM_TYPES],
}

pub fn similarity_gradients(scorer: &Scorer, items: &[&Item]) -> Result<EdgeGradients> {
    let fwd = scorer.forward(items, true)?;
    fwd.score.backward()?;
    let grad = fwd
        .normalized
        .grad()
        .ok_or_else(|| Error::Model("score does not depend on the similarities".into()))?;
    Ok(EdgeGradients {
        layers: scorer.model().config.layers.clone(),
        importance: grad.iter().map(|g| -g).collect(),
        raw: fwd.raw.values(),
        normalized: fwd.normalized.values(),
        score: fwd.score.item(),
        padded: fwd.padded,
    })
}

/// Whether flat entry `idx` compares two present items.
pub fn edge_is_present(idx: usize, padded: &[bool; NUM_TYPES]) -> bool {
    let (a, b) = CondId::all()[idx % NUM_CONDITIONS].types();
    !padded[a.index()] && !padded[b.index()]
}

/// `ω` per type slot: the sum of importances of every edge between the
/// slot's item and another present item, over all layers. Padded slots get
/// `None`.
pub fn item_importance(importance: &[f64], padded: &[bool; NUM_TYPES]) -> [Option<f64>; NUM_TYPES] {
    let conds = CondId::all();
    let mut out: [Option<f64>; NUM_TYPES] = std::array::from_fn(|k| (!padded[k]).then_some(0.0));
    for (idx, w) in importance.iter().enumerate() {
        if !edge_is_present(idx, padded) {
            continue;
        }
        let (a, b) = conds[idx % NUM_CONDITIONS].types();
        for t in [a, b] {
            if let Some(o) = out[t.index()].as_mut() {
                *o += w;
            }
        }
    }
    out
}

/// Present slot with the largest `ω`; ties go to the lower slot.
pub fn most_problematic(omega: &[Option<f64>; NUM_TYPES]) -> Option<TypeId> {
    let mut best: Option<(usize, f64)> = None;
    for (k, w) in omega.iter().enumerate() {
        if let Some(w) = *w {
            if best.is_none_or(|(_, b)| w > b) {
                best = Some((k, w));
            }
        }
    }
    best.map(|(k, _)| TypeId::ALL[k])
}

/// Slots touched by the `n` largest present-present edges (ties to the
/// lower flat index).
pub fn top_edge_slots(importance: &[f64], padded: &[bool; NUM_TYPES], n: usize) -> Vec<TypeId> {
    let mut edges: Vec<usize> = (0..importance.len()).filter(|&i| edge_is_present(i, padded)).collect();
    edges.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut slots = Vec::new();
    for &e in edges.iter().take(n) {
        let (a, b) = CondId::all()[e % NUM_CONDITIONS].types();
        for t in [a, b] {
            if !slots.contains(&t) {
                slots.push(t);
            }
        }
    }
    slots
}

/// `|s(x+δ) − s(x) − ∇s·δ|` at the outfit's normalized similarities `x`.
pub fn taylor_residual(scorer: &Scorer, items: &[&Item], delta: &[f64]) -> Result<f64> {
    let base = similarity_gradients(scorer, items)?;
    if delta.len() != base.normalized.len() {
        return Err(Error::shape(format!("delta has {} entries, expected {}", delta.len(), base.normalized.len())));
    }
    let moved: Vec<f64> = base.normalized.iter().zip(delta).map(|(x, d)| x + d).collect();
    let shifted = mlp_score(scorer, moved)?;
    // importance is −∇s
    let linear: f64 = base.importance.iter().zip(delta).map(|(g, d)| -g * d).sum();
    Ok((shifted - base.score - linear).abs())
}

/// Predictor output for a given normalized similarity vector.
pub fn mlp_score(scorer: &Scorer, normalized: Vec<f64>) -> Result<f64> {
    let g = Graph::new();
    let mlp = scorer.model().mlp.bind(&g, false)?;
    let x = g.constant(&[normalized.len()], normalized)?;
    Ok(score(&x, &mlp)?.item())
}

/// Affine map of values onto `[0, 1]` for display.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Display {
    pub min: f64,
    pub max: f64,
    /// `1 / (max − min)`; zero when every value is equal
    pub scale: f64,
}

impl Display {
    pub fn fit(values: &[f64]) -> Display {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > min { 1.0 / (max - min) } else { 0.0 };
        Display { min, max, scale }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.min) * self.scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub layer: usize,
    pub condition: String,
    /// Whether both ends are real items rather than padding.
    pub present: bool,
    pub importance: f64,
    pub normalized_importance: f64,
    pub raw_similarity: f64,
    pub normalized_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub importance: f64,
    pub normalized_importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub condition_order: Vec<String>,
    pub layers: Vec<usize>,
    pub score: f64,
    pub probability: f64,
    pub edges: Vec<EdgeReport>,
    /// Present items only, most problematic first.
    pub items: Vec<ItemReport>,
    pub edge_display: Display,
    pub item_display: Display,
}

pub fn diagnose(scorer: &Scorer, items: &[&Item]) -> Result<DiagnosisReport> {
    let g = similarity_gradients(scorer, items)?;
    let edge_display = Display::fit(&g.importance);
    let conds = CondId::all();
    let edges = g
        .importance
        .iter()
        .enumerate()
        .map(|(i, &w)| EdgeReport {
            layer: g.layers[i / NUM_CONDITIONS],
            condition: conds[i % NUM_CONDITIONS].name(),
            present: edge_is_present(i, &g.padded),
            importance: w,
            normalized_importance: edge_display.apply(w),
            raw_similarity: g.raw[i],
            normalized_similarity: g.normalized[i],
        })
        .collect();
    let omega = item_importance(&g.importance, &g.padded);
    let padded = pad_outfit(items)?;
    let mut present: Vec<(&Item, f64)> = padded
        .present()
        .into_iter()
        .map(|it| (it, omega[it.type_id.index()].expect("present slot has a score")))
        .collect();
    present.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.type_id.cmp(&b.0.type_id)));
    let values: Vec<f64> = present.iter().map(|p| p.1).collect();
    let item_display = Display::fit(&values);
    Ok(DiagnosisReport {
        condition_order: condition_order(),
        layers: g.layers.clone(),
        score: g.score,
        probability: probability(g.score),
        edges,
        items: present
            .into_iter()
            .map(|(it, w)| ItemReport {
                id: it.id.clone(),
                type_name: it.type_id.name().to_string(),
                importance: w,
                normalized_importance: item_display.apply(w),
            })
            .collect(),
        edge_display,
        item_display,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub iteration: usize,
    #[serde(rename = "type")]
    pub type_name: String,
    pub removed: String,
    pub added: String,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct Revision<'a> {
    pub items: Vec<&'a Item>,
    pub substitutions: Vec<Substitution>,
    /// `σ(s)` at the start and after every accepted substitution.
    pub trajectory: Vec<f64>,
    pub reached: bool,
}

/// Greedy revision: for each of N rounds (N = outfit size), find the most
/// problematic item and scan its same-type candidates in a seeded random
/// order, keeping any swap that raises `σ(s)`. Stops once `σ(s) > thr`.
pub fn revise<'a>(
    scorer: &Scorer,
    outfit: &[&'a Item],
    candidates: &[&'a Item],
    thr: f64,
    seed: u64,
) -> Result<Revision<'a>> {
    if !(0.0..=1.0).contains(&thr) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {thr}")));
    }
    pad_outfit(outfit)?;
    let mut rng = seeded_rng(seed, 0xe1);
    let mut items = outfit.to_vec();
    let mut current = probability(scorer.score(&items)?);
    let mut trajectory = vec![current];
    let mut substitutions = Vec::new();
    if current > thr {
        return Ok(Revision { items, substitutions, trajectory, reached: true });
    }
    for iteration in 1..=outfit.len() {
        let g = similarity_gradients(scorer, &items)?;
        let Some(t) = most_problematic(&item_importance(&g.importance, &g.padded)) else {
            break;
        };
        let slot = items.iter().position(|i| i.type_id == t).expect("problematic type is present");
        let mut pool: Vec<&Item> = candidates
            .iter()
            .copied()
            .filter(|c| c.type_id == t && !items.iter().any(|i| i.id == c.id))
            .collect();
        if pool.is_empty() {
            return Err(Error::Pool(format!("no candidate {t} items to substitute")));
        }
        pool.shuffle(&mut rng);
        for cand in pool {
            let mut trial = items.clone();
            trial[slot] = cand;
            let p = probability(scorer.score(&trial)?);
            if p > current {
                substitutions.push(Substitution {
                    iteration,
                    type_name: t.name().to_string(),
                    removed: items[slot].id.clone(),
                    added: cand.id.clone(),
                    probability: p,
                });
                items = trial;
                current = p;
                trajectory.push(p);
            }
            if current > thr {
                return Ok(Revision { items, substitutions, trajectory, reached: true });
            }
        }
    }
    Ok(Revision { items, substitutions, trajectory, reached: false })
}
