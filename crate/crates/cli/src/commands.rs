use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use mcn_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mcn_core::comparison::TypeId;
use mcn_core::data::{
    generate, load_dataset, load_split, read_ppm, save_dataset, GenConfig, Item, OutfitFile, SplitManifest,
};
use mcn_core::diagnosis::{diagnose, revise};
use mcn_core::evaluation::{evaluate, retrieve, Task};
use mcn_core::model::Scorer;
use mcn_core::training::{train, TrainConfig};

use crate::args::{self, Cli, Command};
use crate::{Failure, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_IO, EXIT_THRESHOLD};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Revise(a) => revise_cmd(cli, a),
        Command::Retrieve(a) => retrieve_cmd(a),
    }
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| match e {
        mcn_core::Error::Io { .. } => Failure::new(EXIT_IO, e.to_string()),
        _ => Failure::new(EXIT_CHECKPOINT, format!("{}: {e}", path.display())),
    })
}

fn gen_data(cli: &Cli, a: &args::GenData) -> Result<(), Failure> {
    let d = GenConfig::default();
    let cfg = GenConfig {
        train: a.train.unwrap_or(d.train),
        val: a.val.unwrap_or(d.val),
        test: a.test.unwrap_or(d.test),
        palettes: a.palettes.unwrap_or(d.palettes),
        textures: a.textures.unwrap_or(d.textures),
        side: a.side.unwrap_or(d.side),
        seed: cli.global.seed.unwrap_or(d.seed),
    };
    cfg.validate()?;
    let ds = generate(&cfg)?;
    save_dataset(&ds, &a.out)?;
    let counts: serde_json::Map<String, serde_json::Value> = ds
        .splits()
        .iter()
        .map(|s| (s.name.clone(), json!({ "outfits": s.outfits.len(), "items": s.items.len() })))
        .collect();
    print_json(&json!({ "out": a.out, "generator": cfg, "splits": counts }))
}

fn train_cmd(cli: &Cli, a: &args::Train) -> Result<(), Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.decay {
        cfg.decay = v;
    }
    if let Some(v) = a.decay_every {
        cfg.decay_every = v;
    }
    if let Some(v) = a.negatives {
        cfg.negatives_per_positive = v;
    }
    if let Some(v) = a.clip {
        cfg.clip_norm = v;
    }
    if let Some(v) = &a.layers {
        cfg.model.layers = v.clone();
    }
    cfg.model.use_vse = !a.no_vse;
    cfg.model.use_projection = !a.no_projection;
    cfg.seed = cli.global.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    cfg.model.backbone.input_side = ds.train.side;
    cfg.validate()?;
    let quiet = cli.global.quiet;
    let outcome = train(&ds, &cfg, |log| {
        if !quiet {
            eprintln!("{}", serde_json::to_string(log).expect("log serializes"));
        }
    })?;
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    print_json(&json!({
        "checkpoint": a.out,
        "epochs": outcome.history.len(),
        "best_epoch": outcome.checkpoint.best_epoch,
        "best_val_auc": outcome.checkpoint.best_val_auc,
    }))
}

fn eval(cli: &Cli, a: &args::Eval) -> Result<(), Failure> {
    let task: Task = a.task.parse()?;
    if a.reps == 0 {
        return Err(Failure::new(EXIT_CONFIG, "--reps must be at least 1"));
    }
    if !["train", "val", "test"].contains(&a.split.as_str()) {
        return Err(Failure::new(EXIT_CONFIG, format!("unknown split {:?}", a.split)));
    }
    let ck = open_checkpoint(&a.ckpt)?;
    let (split, _) = load_split(&a.data.join(&a.split))?;
    let scorer = Scorer::new(&ck.model)?;
    let report = evaluate(&scorer, &split, task, a.reps, cli.global.seed.unwrap_or(0))?;
    if !cli.global.quiet {
        if let Some(s) = &report.auc {
            eprintln!("auc {:.4} ± {:.4}", s.mean, s.std.unwrap_or(0.0));
        }
        if let Some(s) = &report.fitb_accuracy {
            eprintln!("fitb {:.4} ± {:.4}", s.mean, s.std.unwrap_or(0.0));
        }
    }
    print_json(&report)
}

/// Items of an outfit file with the absolute path of each image.
fn read_outfit(path: &Path) -> Result<Vec<(Item, PathBuf)>, Failure> {
    let items = mcn_core::data::load_outfit_file(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    let file: OutfitFile = serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    let base = absolute(path.parent().unwrap_or(Path::new(".")));
    Ok(items.into_iter().zip(file.items).map(|(i, r)| (i, base.join(r.file))).collect())
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn diagnose_cmd(a: &args::Diagnose) -> Result<(), Failure> {
    let ck = open_checkpoint(&a.ckpt)?;
    let items = read_outfit(&a.outfit)?;
    let refs: Vec<&Item> = items.iter().map(|(i, _)| i).collect();
    let scorer = Scorer::new(&ck.model)?;
    print_json(&diagnose(&scorer, &refs)?)
}

fn revise_cmd(cli: &Cli, a: &args::Revise) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.thr) {
        return Err(Failure::new(EXIT_CONFIG, format!("--thr must lie in [0, 1], got {}", a.thr)));
    }
    let ck = open_checkpoint(&a.ckpt)?;
    let outfit = read_outfit(&a.outfit)?;
    let (pool, _) = load_split(&a.pool)?;
    let manifest: SplitManifest = {
        let p = a.pool.join("manifest.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?
    };
    let pool_dir = absolute(&a.pool);
    let mut paths: HashMap<String, PathBuf> =
        manifest.items.iter().map(|r| (r.id.clone(), pool_dir.join(&r.file))).collect();
    for (item, p) in &outfit {
        paths.insert(item.id.clone(), p.clone());
    }
    let refs: Vec<&Item> = outfit.iter().map(|(i, _)| i).collect();
    let candidates: Vec<&Item> = pool.items.iter().collect();
    let scorer = Scorer::new(&ck.model)?;
    let result = revise(&scorer, &refs, &candidates, a.thr, cli.global.seed.unwrap_or(0))?;
    let records: Vec<(&Item, String)> =
        result.items.iter().map(|i| (*i, paths[&i.id].to_string_lossy().into_owned())).collect();
    mcn_core::data::save_outfit_file(&a.out, &records)?;
    print_json(&json!({
        "reached": result.reached,
        "threshold": a.thr,
        "items": result.items.iter().map(|i| &i.id).collect::<Vec<_>>(),
        "substitutions": result.substitutions,
        "trajectory": result.trajectory,
        "out": a.out,
    }))?;
    if result.reached {
        Ok(())
    } else {
        Err(Failure::new(EXIT_THRESHOLD, format!("no revision reached probability above {}", a.thr)))
    }
}

fn retrieve_cmd(a: &args::Retrieve) -> Result<(), Failure> {
    if !(1..=4).contains(&a.layer) {
        return Err(Failure::new(EXIT_CONFIG, format!("--layer must be 1..=4, got {}", a.layer)));
    }
    let ck = open_checkpoint(&a.ckpt)?;
    let (corpus, _) = load_split(&a.corpus)?;
    let query = match corpus.items.iter().find(|i| i.id == a.query) {
        Some(i) => i.clone(),
        None => {
            let path = Path::new(&a.query);
            if !path.is_file() {
                return Err(Failure::new(EXIT_IO, format!("{} is neither a corpus item nor an image file", a.query)));
            }
            let (image, side) = read_ppm(path)?;
            if side != corpus.side {
                return Err(Failure::new(EXIT_CONFIG, format!("query is {side}px, corpus is {}px", corpus.side)));
            }
            // the type plays no part in unprojected retrieval
            Item { id: a.query.clone(), type_id: TypeId::Top, image, tokens: Vec::new(), attrs: None }
        }
    };
    let scorer = Scorer::new(&ck.model)?;
    let hits = retrieve(&scorer, &query, a.layer, &corpus.items, a.k)?;
    print_json(&json!({ "query": a.query, "layer": a.layer, "results": hits }))
}
