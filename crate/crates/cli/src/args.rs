use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::{Failure, EXIT_CONFIG, EXIT_IO};

#[derive(Debug, Parser)]
#[command(name = "mcn", version, about = "Outfit compatibility prediction, diagnosis and revision")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file of flag values; keys are flag names, explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads for feature extraction (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic outfit dataset.
    GenData(GenData),
    /// Train a model and write its best checkpoint.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Explain the score of one outfit.
    Diagnose(Diagnose),
    /// Greedily substitute items until the outfit scores above a threshold.
    Revise(Revise),
    /// Rank a corpus by feature similarity to a query item.
    Retrieve(Retrieve),
}

pub const COMMANDS: [&str; 6] = ["gen-data", "train", "eval", "diagnose", "revise", "retrieve"];

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    /// Outfits in the training split (default 2000).
    #[arg(long)]
    pub train: Option<usize>,
    /// Outfits in the validation split (default 300).
    #[arg(long)]
    pub val: Option<usize>,
    /// Outfits in the test split (default 500).
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub palettes: Option<usize>,
    #[arg(long)]
    pub textures: Option<usize>,
    /// Image side in pixels, a multiple of 16.
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Learning-rate factor applied every `--decay-every` epochs.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    /// Negatives sampled per positive outfit.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Global gradient-norm bound (0 disables clipping).
    #[arg(long)]
    pub clip: Option<f64>,
    /// Comma-separated backbone layers whose similarities are compared.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub no_vse: bool,
    #[arg(long)]
    pub no_projection: bool,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// auc, fitb, diagnosis or all.
    #[arg(long, default_value = "all")]
    pub task: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Which split to evaluate on.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct Diagnose {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub outfit: PathBuf,
}

#[derive(Debug, Args)]
pub struct Revise {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub outfit: PathBuf,
    /// Split directory whose items are the substitution candidates.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = mcn_core::diagnosis::THR)]
    pub thr: f64,
    /// Where to write the revised outfit (image paths become absolute).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Retrieve {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Item id from the corpus, or a PPM image path.
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub layer: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Split directory to rank.
    #[arg(long)]
    pub corpus: PathBuf,
}

/// Splices the flags of a `--config` file in right after the subcommand, so
/// that flags given on the command line (which come later) override them.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::new(EXIT_IO, format!("cannot read {path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{path}: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(Failure::new(EXIT_CONFIG, format!("{path}: expected a JSON object")));
    };
    let mut flags = Vec::new();
    for (key, v) in map {
        if key == "config" {
            return Err(Failure::new(EXIT_CONFIG, format!("{path}: a config file cannot name another")));
        }
        let flag = format!("--{key}");
        match v {
            serde_json::Value::Bool(true) => flags.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(xs) => {
                let parts: Vec<String> = xs.iter().map(scalar).collect::<Result<_, _>>().map_err(|m| bad(&path, &key, m))?;
                flags.push(flag);
                flags.push(parts.join(","));
            }
            other => {
                flags.push(flag);
                flags.push(scalar(&other).map_err(|m| bad(&path, &key, m))?);
            }
        }
    }
    let Some(at) = argv.iter().position(|a| COMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let mut out = argv[..=at].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[at + 1..]);
    Ok(out)
}

fn scalar(v: &serde_json::Value) -> Result<String, String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("unsupported value {other}")),
    }
}

fn bad(path: &str, key: &str, m: String) -> Failure {
    Failure::new(EXIT_CONFIG, format!("{path}: key {key:?}: {m}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_flags_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epochs": 3, "no-vse": true, "no-projection": false, "layers": [1, 4]}"#).unwrap();
        let argv = strings(&["mcn", "--config", p.to_str().unwrap(), "train", "--data", "d", "--out", "o", "--epochs", "7"]);
        let out = expand_config(argv).unwrap();
        let cli = Cli::try_parse_from(&out).unwrap();
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.epochs, Some(7));
        assert!(t.no_vse && !t.no_projection);
        assert_eq!(t.layers, Some(vec![1, 4]));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"bogus": 1}"#).unwrap();
        let argv = strings(&["mcn", "--config", p.to_str().unwrap(), "train", "--data", "d", "--out", "o"]);
        assert!(Cli::try_parse_from(expand_config(argv).unwrap()).is_err());
        std::fs::write(&p, "[1]").unwrap();
        let argv = strings(&["mcn", "--config", p.to_str().unwrap(), "train"]);
        assert_eq!(expand_config(argv).unwrap_err().code, EXIT_CONFIG);
    }
}
