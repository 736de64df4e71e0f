//! On-disk layout: `<dir>/<split>/manifest.json` plus one binary PPM per
//! item under `<dir>/<split>/items/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Attrs, Dataset, GenConfig, Item, Outfit, Split};
use crate::comparison::TypeId;
use crate::error::{Error, Result};

const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub file: String,
    #[serde(rename = "type")]
    pub type_id: TypeId,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<Attrs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutfitRecord {
    pub items: Vec<String>,
    pub label: u8,
    pub fault: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub split: String,
    pub generator: GenConfig,
    pub items: Vec<ItemRecord>,
    pub outfits: Vec<OutfitRecord>,
}

/// A single outfit described by its items, as consumed by diagnosis and
/// revision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutfitFile {
    pub items: Vec<ItemRecord>,
}

/// Writes a `[3, side, side]` planar image as binary PPM, quantizing each
/// channel with `round(v·255)`.
pub fn write_ppm(path: &Path, image: &[f32], side: usize) -> Result<()> {
    let plane = side * side;
    if image.len() != 3 * plane {
        return Err(Error::shape(format!("image of {} values is not 3x{side}x{side}", image.len())));
    }
    let mut bytes = format!("P6\n{side} {side}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push((image[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

/// Parses a binary PPM into a planar `[3, h, w]` image and its side.
/// Only square images with maxval ≤ 255 are accepted.
pub fn parse_ppm(bytes: &[u8]) -> Result<(Vec<f32>, usize)> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::format(0, "missing P6 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let max_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if w == 0 || w != h {
        return Err(Error::format(max_at, format!("expected a non-empty square image, got {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(max_at, format!("unsupported maxval {maxval}")));
    }
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(cur.pos, "expected whitespace before pixel data"));
    }
    let start = cur.pos + 1;
    let plane = w * h;
    let need = 3 * plane;
    let data = &bytes[start.min(bytes.len())..];
    if data.len() < need {
        return Err(Error::format(bytes.len(), format!("pixel data truncated: {} of {need} bytes", data.len())));
    }
    if data.len() > need {
        return Err(Error::format(start + need, "trailing bytes after pixel data"));
    }
    let mut image = vec![0.0f32; need];
    for p in 0..plane {
        for c in 0..3 {
            image[c * plane + p] = f32::from(data[3 * p + c]) / maxval as f32;
        }
    }
    Ok((image, w))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset: usize = text.split_inclusive('\n').take(e.line().saturating_sub(1)).map(str::len).sum::<usize>()
            + e.column().saturating_sub(1);
        Error::format(offset, e.to_string())
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn item_file(item: &Item) -> String {
    format!("items/{}.ppm", item.id)
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn record(item: &Item, file: String) -> ItemRecord {
    ItemRecord {
        id: item.id.clone(),
        file,
        type_id: item.type_id,
        tokens: item.tokens.clone(),
        attrs: item.attrs,
    }
}

fn load_item(base: &Path, rec: &ItemRecord, side: Option<usize>) -> Result<Item> {
    if rec.tokens.is_empty() {
        return Err(Error::Data(format!("item {} has no tokens", rec.id)));
    }
    let (image, s) = read_ppm(&resolve(base, &rec.file))?;
    if side.is_some_and(|want| want != s) {
        return Err(Error::Data(format!("item {} is {s}x{s}, expected {}", rec.id, side.unwrap_or(0))));
    }
    Ok(Item {
        id: rec.id.clone(),
        type_id: rec.type_id,
        image,
        tokens: rec.tokens.clone(),
        attrs: rec.attrs,
    })
}

/// Writes one split to `dir` (the split's own directory).
pub fn save_split(split: &Split, generator: &GenConfig, dir: &Path) -> Result<()> {
    create_dir(&dir.join("items"))?;
    let mut records = Vec::with_capacity(split.items.len());
    for item in &split.items {
        let file = item_file(item);
        write_ppm(&dir.join(&file), &item.image, split.side)?;
        records.push(record(item, file));
    }
    let outfits = split
        .outfits
        .iter()
        .map(|o| OutfitRecord {
            items: o.items.iter().map(|&i| split.items[i].id.clone()).collect(),
            label: o.label,
            fault: o.fault,
        })
        .collect();
    write_json(
        &dir.join("manifest.json"),
        &SplitManifest {
            split: split.name.clone(),
            generator: generator.clone(),
            items: records,
            outfits,
        },
    )
}

/// Reads one split directory; returns it with the generator configuration
/// recorded in its manifest.
pub fn load_split(dir: &Path) -> Result<(Split, GenConfig)> {
    let manifest: SplitManifest = read_json(&dir.join("manifest.json"))?;
    let side = manifest.generator.side;
    let mut items = Vec::with_capacity(manifest.items.len());
    let mut index = std::collections::HashMap::new();
    for rec in &manifest.items {
        if index.insert(rec.id.clone(), items.len()).is_some() {
            return Err(Error::Data(format!("duplicate item id {}", rec.id)));
        }
        items.push(load_item(dir, rec, Some(side))?);
    }
    let mut outfits = Vec::with_capacity(manifest.outfits.len());
    for rec in &manifest.outfits {
        let idx = rec
            .items
            .iter()
            .map(|id| index.get(id).copied().ok_or_else(|| Error::Data(format!("outfit references unknown item {id}"))))
            .collect::<Result<Vec<_>>>()?;
        if rec.label > 1 {
            return Err(Error::Data(format!("outfit label {} is not 0 or 1", rec.label)));
        }
        super::check_outfit(&idx.iter().map(|&i| &items[i]).collect::<Vec<_>>())
            .map_err(|e| Error::Data(e.to_string()))?;
        outfits.push(Outfit {
            items: idx,
            label: rec.label,
            fault: rec.fault,
        });
    }
    let split = Split {
        name: manifest.split,
        side,
        items,
        outfits,
    };
    Ok((split, manifest.generator))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for (name, split) in SPLITS.iter().zip(ds.splits()) {
        save_split(split, &ds.config, &dir.join(name))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (train, config) = load_split(&dir.join("train"))?;
    let (val, _) = load_split(&dir.join("val"))?;
    let (test, _) = load_split(&dir.join("test"))?;
    Ok(Dataset { config, train, val, test })
}

/// Reads an outfit file; image paths resolve against its directory.
pub fn load_outfit_file(path: &Path) -> Result<Vec<Item>> {
    let file: OutfitFile = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let items = file.items.iter().map(|r| load_item(base, r, None)).collect::<Result<Vec<_>>>()?;
    super::check_outfit(&items.iter().collect::<Vec<_>>())?;
    Ok(items)
}

/// Writes an outfit file whose items point at the given image paths.
pub fn save_outfit_file(path: &Path, items: &[(&Item, String)]) -> Result<()> {
    let file = OutfitFile {
        items: items.iter().map(|(item, f)| record(item, f.clone())).collect(),
    };
    write_json(path, &file)
}
