//! Synthetic outfits with a planted compatibility rule.
//!
//! Every generated outfit is compatible: its items share one palette and
//! one texture. Incompatible outfits are made on demand by swapping one item
//! for a same-type item that breaks the rule, which also records which item
//! is at fault.

mod io;
mod render;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    load_dataset, load_outfit_file, load_split, read_ppm, save_dataset, save_outfit_file, save_split, write_ppm,
    ItemRecord, OutfitFile, OutfitRecord, SplitManifest,
};
pub use render::{palette_name, render_item, silhouette, texture_name, MAX_PALETTES, MAX_TEXTURES};

use crate::comparison::{TypeId, NUM_TYPES};
use crate::error::{Error, Result};
use crate::param::seeded_rng;

/// Ground-truth attributes behind an item's appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attrs {
    pub palette: usize,
    pub texture: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub type_id: TypeId,
    /// `[3, side, side]`, values in `[0, 1]`
    pub image: Vec<f32>,
    pub tokens: Vec<String>,
    pub attrs: Option<Attrs>,
}

impl Item {
    pub fn pixels(&self) -> Vec<f64> {
        self.image.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Item indices into the owning split, with a label (1 compatible, 0 not)
/// and, for sampled negatives, the position of the substituted item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outfit {
    pub items: Vec<usize>,
    pub label: u8,
    pub fault: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub name: String,
    pub side: usize,
    pub items: Vec<Item>,
    pub outfits: Vec<Outfit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub palettes: usize,
    pub textures: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train: 2000,
            val: 300,
            test: 500,
            palettes: 4,
            textures: 3,
            side: 32,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one outfit".into()));
        }
        if !(2..=MAX_PALETTES).contains(&self.palettes) {
            return Err(Error::Config(format!("palettes must lie in 2..={MAX_PALETTES}, got {}", self.palettes)));
        }
        if !(2..=MAX_TEXTURES).contains(&self.textures) {
            return Err(Error::Config(format!("textures must lie in 2..={MAX_TEXTURES}, got {}", self.textures)));
        }
        if self.side == 0 || !self.side.is_multiple_of(16) {
            return Err(Error::Config(format!("image side must be a positive multiple of 16, got {}", self.side)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn splits(&self) -> [&Split; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Generates all three splits. Each split draws from its own seeded stream,
/// so changing one split's size leaves the others untouched.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        config: cfg.clone(),
        train: generate_split("train", cfg.train, cfg, 1)?,
        val: generate_split("val", cfg.val, cfg, 2)?,
        test: generate_split("test", cfg.test, cfg, 3)?,
    })
}

fn generate_split(name: &str, outfits: usize, cfg: &GenConfig, stream: u64) -> Result<Split> {
    let mut rng = seeded_rng(cfg.seed, stream);
    let mut split = Split {
        name: name.to_string(),
        side: cfg.side,
        items: Vec::new(),
        outfits: Vec::with_capacity(outfits),
    };
    for o in 0..outfits {
        let palette = rng.gen_range(0..cfg.palettes);
        let texture = rng.gen_range(0..cfg.textures);
        let size = rng.gen_range(3..=NUM_TYPES);
        let mut types = TypeId::ALL.to_vec();
        types.shuffle(&mut rng);
        types.truncate(size);
        types.sort();
        let mut indices = Vec::with_capacity(size);
        for t in types {
            let image = render_item(t, palette, cfg.palettes, texture, cfg.side, &mut rng);
            indices.push(split.items.len());
            split.items.push(Item {
                id: format!("{name}-{o:05}-{t}"),
                type_id: t,
                image,
                tokens: vec![
                    palette_name(palette, cfg.palettes).to_string(),
                    texture_name(texture).to_string(),
                    t.name().to_string(),
                ],
                attrs: Some(Attrs { palette, texture }),
            });
        }
        split.outfits.push(Outfit {
            items: indices,
            label: 1,
            fault: None,
        });
    }
    Ok(split)
}

/// The planted rule: every item has the same palette and texture. Items
/// without ground truth never satisfy it.
pub fn satisfies_rule(items: &[&Item]) -> bool {
    let mut attrs = items.iter().map(|i| i.attrs);
    match attrs.next() {
        Some(Some(first)) => attrs.all(|a| a == Some(first)),
        _ => false,
    }
}

/// Item indices of a split grouped by type.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub by_type: Vec<Vec<usize>>,
}

impl Pool {
    pub fn new(items: &[Item]) -> Self {
        let mut by_type = vec![Vec::new(); NUM_TYPES];
        for (i, item) in items.iter().enumerate() {
            by_type[item.type_id.index()].push(i);
        }
        Pool { by_type }
    }

    pub fn of(&self, t: TypeId) -> &[usize] {
        &self.by_type[t.index()]
    }
}

impl Split {
    pub fn pool(&self) -> Pool {
        Pool::new(&self.items)
    }

    pub fn outfit_items(&self, outfit: &Outfit) -> Vec<&Item> {
        outfit.items.iter().map(|&i| &self.items[i]).collect()
    }
}

const MAX_REDRAWS: usize = 100;

/// Replaces one uniformly chosen item with a different same-type pool item
/// that breaks the planted rule, redrawing up to 100 times.
pub fn sample_negative(positive: &Outfit, items: &[Item], pool: &Pool, rng: &mut impl Rng) -> Result<Outfit> {
    if positive.items.is_empty() {
        return Err(Error::Sampling("cannot corrupt an empty outfit".into()));
    }
    let slot = rng.gen_range(0..positive.items.len());
    let original = positive.items[slot];
    let candidates = pool.of(items[original].type_id);
    if candidates.len() < 2 {
        return Err(Error::Sampling(format!(
            "pool holds {} {} item(s); need at least 2",
            candidates.len(),
            items[original].type_id
        )));
    }
    for _ in 0..MAX_REDRAWS {
        let pick = candidates[rng.gen_range(0..candidates.len())];
        if pick == original {
            continue;
        }
        let mut out = positive.items.clone();
        out[slot] = pick;
        let refs: Vec<&Item> = out.iter().map(|&i| &items[i]).collect();
        if !satisfies_rule(&refs) {
            return Ok(Outfit {
                items: out,
                label: 0,
                fault: Some(slot),
            });
        }
    }
    Err(Error::Sampling(format!("no rule-breaking replacement found in {MAX_REDRAWS} draws")))
}

/// A fill-in-the-blank question built from a compatible outfit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FitbQuestion {
    /// The full outfit; position `blank` is the one to fill.
    pub items: Vec<usize>,
    pub blank: usize,
    pub options: [usize; 4],
    pub answer: usize,
}

impl FitbQuestion {
    /// The outfit with option `k` in the blank.
    pub fn completed(&self, k: usize) -> Vec<usize> {
        let mut out = self.items.clone();
        out[self.blank] = self.options[k];
        out
    }
}

/// Blanks a uniform slot and offers the true item plus three distinct
/// same-type distractors that break the rule with the remainder, shuffled.
pub fn make_fitb(positive: &Outfit, items: &[Item], pool: &Pool, rng: &mut impl Rng) -> Result<FitbQuestion> {
    if positive.items.is_empty() {
        return Err(Error::Pool("cannot blank an empty outfit".into()));
    }
    let blank = rng.gen_range(0..positive.items.len());
    let truth = positive.items[blank];
    let rest: Vec<&Item> = positive
        .items
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != blank)
        .map(|(_, &j)| &items[j])
        .collect();
    let fits = |cand: usize| {
        let mut all = rest.clone();
        all.push(&items[cand]);
        satisfies_rule(&all)
    };
    let candidates: Vec<usize> =
        pool.of(items[truth].type_id).iter().copied().filter(|&c| c != truth && !fits(c)).collect();
    if candidates.len() < 3 {
        return Err(Error::Pool(format!(
            "only {} usable {} distractors; need 3",
            candidates.len(),
            items[truth].type_id
        )));
    }
    let mut options: Vec<usize> = candidates.choose_multiple(rng, 3).copied().collect();
    options.push(truth);
    options.shuffle(rng);
    let answer = options.iter().position(|&o| o == truth).expect("truth is an option");
    Ok(FitbQuestion {
        items: positive.items.clone(),
        blank,
        options: [options[0], options[1], options[2], options[3]],
        answer,
    })
}

/// Pixelwise mean image of every type over `items`, in type order.
pub fn mean_images(items: &[Item]) -> Result<Vec<Vec<f64>>> {
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; NUM_TYPES];
    for item in items {
        let entry = sums[item.type_id.index()].get_or_insert_with(|| (vec![0.0; item.image.len()], 0));
        if entry.0.len() != item.image.len() {
            return Err(Error::Data(format!("item {} has a differently sized image", item.id)));
        }
        entry.0.iter_mut().zip(&item.image).for_each(|(s, &v)| *s += f64::from(v));
        entry.1 += 1;
    }
    sums.into_iter()
        .enumerate()
        .map(|(t, s)| {
            let (sum, n) = s.ok_or_else(|| Error::Data(format!("no {} items to average", TypeId::ALL[t])))?;
            Ok(sum.into_iter().map(|v| v / n as f64).collect())
        })
        .collect()
}

/// One slot of a padded outfit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Slot<'a> {
    Item(&'a Item),
    /// Filled with the type's mean image.
    Mean(TypeId),
}

impl Slot<'_> {
    pub fn is_padded(&self) -> bool {
        matches!(self, Slot::Mean(_))
    }
}

/// Five slots in type order; missing types hold their mean image.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedOutfit<'a> {
    pub slots: [Slot<'a>; NUM_TYPES],
}

impl<'a> PaddedOutfit<'a> {
    pub fn padded_flags(&self) -> [bool; NUM_TYPES] {
        self.slots.map(|s| s.is_padded())
    }

    pub fn present(&self) -> Vec<&'a Item> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Item(i) => Some(*i),
                Slot::Mean(_) => None,
            })
            .collect()
    }
}

pub fn pad_outfit<'a>(items: &[&'a Item]) -> Result<PaddedOutfit<'a>> {
    if items.is_empty() || items.len() > NUM_TYPES {
        return Err(Error::Input(format!("an outfit holds 1 to {NUM_TYPES} items, got {}", items.len())));
    }
    let mut slots = TypeId::ALL.map(Slot::Mean);
    for item in items {
        let k = item.type_id.index();
        if !slots[k].is_padded() {
            return Err(Error::Type(format!("type {} appears twice in one outfit", item.type_id)));
        }
        slots[k] = Slot::Item(item);
    }
    Ok(PaddedOutfit { slots })
}

/// Checks an outfit's item list: 1..=5 items, types pairwise distinct.
pub fn check_outfit(items: &[&Item]) -> Result<()> {
    pad_outfit(items).map(|_| ())
}

/// Splits share no outfit (no item id appears in two splits).
pub fn splits_disjoint(ds: &Dataset) -> bool {
    let mut seen = HashSet::new();
    ds.splits().iter().all(|s| s.items.iter().all(|i| seen.insert(i.id.as_str())))
}
