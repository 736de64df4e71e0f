//! Compatibility AUC, fill-in-the-blank accuracy, per-layer retrieval and
//! planted-fault diagnosis hit rates.

use serde::{Deserialize, Serialize};

use crate::backbone::NUM_LAYERS;
use crate::data::{make_fitb, sample_negative, FitbQuestion, Item, Outfit, Split};
use crate::diagnosis::{item_importance, most_problematic, similarity_gradients, top_edge_slots};
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::param::seeded_rng;

/// Mann-Whitney AUC: `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)`, via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Index of the best of four scores; the lowest index wins ties.
pub fn fitb_choice(scores: &[f64; 4]) -> usize {
    let mut best = 0;
    for k in 1..4 {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    best
}

/// Fraction of questions whose top-scoring completion is the answer, under
/// an arbitrary scoring function.
pub fn fitb_accuracy_with(
    split: &Split,
    questions: &[FitbQuestion],
    mut score: impl FnMut(&[&Item]) -> Result<f64>,
) -> Result<f64> {
    if questions.is_empty() {
        return Err(Error::Metric("no questions".into()));
    }
    let mut right = 0;
    for q in questions {
        let mut s = [0.0; 4];
        for (k, v) in s.iter_mut().enumerate() {
            let items: Vec<&Item> = q.completed(k).iter().map(|&i| &split.items[i]).collect();
            *v = score(&items)?;
        }
        right += usize::from(fitb_choice(&s) == q.answer);
    }
    Ok(right as f64 / questions.len() as f64)
}

pub fn fitb_accuracy(scorer: &Scorer, split: &Split, questions: &[FitbQuestion]) -> Result<f64> {
    let items: Vec<&Item> = split.items.iter().collect();
    scorer.prefetch(&items)?;
    fitb_accuracy_with(split, questions, |o| scorer.score(o))
}

/// One FITB question per positive of `split`, from a seeded stream.
pub fn fitb_questions(split: &Split, seed: u64) -> Result<Vec<FitbQuestion>> {
    let pool = split.pool();
    let mut rng = seeded_rng(seed, 0xf1);
    split.outfits.iter().map(|o| make_fitb(o, &split.items, &pool, &mut rng)).collect()
}

/// Every positive of `split` plus one sampled negative each (1:1).
pub fn auc_outfits(split: &Split, seed: u64) -> Result<Vec<Outfit>> {
    let pool = split.pool();
    let mut rng = seeded_rng(seed, 0xa1);
    let mut out = Vec::with_capacity(2 * split.outfits.len());
    for o in &split.outfits {
        out.push(o.clone());
        out.push(sample_negative(o, &split.items, &pool, &mut rng)?);
    }
    Ok(out)
}

pub fn outfits_auc(scorer: &Scorer, split: &Split, outfits: &[Outfit]) -> Result<f64> {
    let items: Vec<&Item> = outfits.iter().flat_map(|o| split.outfit_items(o)).collect();
    scorer.prefetch(&items)?;
    let scores = outfits
        .iter()
        .map(|o| scorer.score(&split.outfit_items(o)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = outfits.iter().map(|o| o.label).collect();
    auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Corpus items ranked by cosine similarity of their unprojected layer-`layer`
/// features to the query's; ties keep corpus order.
pub fn retrieve(scorer: &Scorer, query: &Item, layer: usize, corpus: &[Item], k: usize) -> Result<Vec<Neighbor>> {
    if !(1..=NUM_LAYERS).contains(&layer) {
        return Err(Error::Config(format!("layer must be 1..={NUM_LAYERS}, got {layer}")));
    }
    if corpus.is_empty() {
        return Err(Error::Input("empty retrieval corpus".into()));
    }
    let refs: Vec<&Item> = std::iter::once(query).chain(corpus).collect();
    scorer.prefetch(&refs)?;
    let q = scorer.features(query)?;
    let q = &q.per_layer[layer - 1];
    let mut out = Vec::with_capacity(corpus.len());
    for (index, item) in corpus.iter().enumerate() {
        let f = scorer.features(item)?;
        let score = if item.id == query.id { 1.0 } else { cosine(q, &f.per_layer[layer - 1]) };
        out.push(Neighbor { index, id: item.id.clone(), score });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    out.truncate(k);
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(crate::tensor::NORM_GUARD)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisHits {
    pub hit_at_1: f64,
    pub hit_at_3: f64,
    pub n: usize,
}

/// Hit rates over negatives that carry a fault position.
pub fn diagnosis_metrics(scorer: &Scorer, split: &Split, negatives: &[Outfit]) -> Result<DiagnosisHits> {
    let mut hit1 = 0;
    let mut hit3 = 0;
    let mut n = 0;
    for o in negatives {
        let Some(fault) = o.fault else { continue };
        let items = split.outfit_items(o);
        let fault_type = items[fault].type_id;
        let g = similarity_gradients(scorer, &items)?;
        hit1 += usize::from(most_problematic(&item_importance(&g.importance, &g.padded)) == Some(fault_type));
        hit3 += usize::from(top_edge_slots(&g.importance, &g.padded, 3).contains(&fault_type));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("no negatives with a known fault".into()));
    }
    Ok(DiagnosisHits {
        hit_at_1: hit1 as f64 / n as f64,
        hit_at_3: hit3 as f64 / n as f64,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Auc,
    Fitb,
    Diagnosis,
    All,
}

impl Task {
    fn includes(self, other: Task) -> bool {
        self == Task::All || self == other
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "auc" => Ok(Task::Auc),
            "fitb" => Ok(Task::Fitb),
            "diagnosis" => Ok(Task::Diagnosis),
            "all" => Ok(Task::All),
            _ => Err(Error::Config(format!("unknown task {s:?}; expected auc, fitb, diagnosis or all"))),
        }
    }
}

/// Mean over repetitions; `std` (sample) only with two or more.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Stat { mean, std, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub seed: u64,
    pub reps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitb_accuracy: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitb_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_hit_at_1: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_hit_at_3: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_samples: Option<usize>,
}

/// Runs `task` `reps` times; repetition `r` samples negatives and questions
/// with seed `seed + r`.
pub fn evaluate(scorer: &Scorer, split: &Split, task: Task, reps: usize, seed: u64) -> Result<EvalReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let all: Vec<&Item> = split.items.iter().collect();
    scorer.prefetch(&all)?;
    let mut aucs = Vec::new();
    let mut fitbs = Vec::new();
    let mut h1 = Vec::new();
    let mut h3 = Vec::new();
    let (mut n_auc, mut n_fitb, mut n_diag) = (0, 0, 0);
    for r in 0..reps as u64 {
        let s = seed.wrapping_add(r);
        if task.includes(Task::Auc) || task.includes(Task::Diagnosis) {
            let outfits = auc_outfits(split, s)?;
            if task.includes(Task::Auc) {
                aucs.push(outfits_auc(scorer, split, &outfits)?);
                n_auc = outfits.len();
            }
            if task.includes(Task::Diagnosis) {
                let negatives: Vec<Outfit> = outfits.into_iter().filter(|o| o.label == 0).collect();
                let hits = diagnosis_metrics(scorer, split, &negatives)?;
                h1.push(hits.hit_at_1);
                h3.push(hits.hit_at_3);
                n_diag = hits.n;
            }
        }
        if task.includes(Task::Fitb) {
            let qs = fitb_questions(split, s)?;
            fitbs.push(fitb_accuracy(scorer, split, &qs)?);
            n_fitb = qs.len();
        }
    }
    let stat = |v: Vec<f64>| (!v.is_empty()).then(|| Stat::of(v));
    let count = |v: &Option<Stat>, n| v.as_ref().map(|_| n);
    let auc = stat(aucs);
    let fitb_accuracy = stat(fitbs);
    let hit1 = stat(h1);
    Ok(EvalReport {
        split: split.name.clone(),
        seed,
        reps,
        auc_samples: count(&auc, n_auc),
        auc,
        fitb_samples: count(&fitb_accuracy, n_fitb),
        fitb_accuracy,
        diagnosis_samples: count(&hit1, n_diag),
        diagnosis_hit_at_1: hit1,
        diagnosis_hit_at_3: stat(h3),
    })
}
