use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const VOCAB_SIZES: [usize; 7] = [12, 25, 50, 100, 200, 350, 600];
pub const BALANCE_RATES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Parser, Debug)]
#[command(name = "vinebud", version, about = "Grapevine bud patch classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract SIFT descriptors for every usable corpus patch and fix the train/test split
    Extract(ExpArgs),
    /// Build a bag-of-features vocabulary per vocabulary size
    Vocab(ExpArgs),
    /// Cross-validated grid search over C and gamma
    Tune(ExpArgs),
    /// Train one classifier per vocabulary size and balance rate
    Train(ExpArgs),
    /// Repeated training with redrawn non-bud undersamples, scored on the test split
    Evaluate(ExpArgs),
    /// Recall over realistic patches binned by kept and relative bud area
    Heatmap(HeatmapArgs),
    /// Classify sliding windows over an image
    Scan(ScanArgs),
    /// Run the annotation HTTP backend
    Serve(ServeArgs),
    /// Write a synthetic desk-scale corpus
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ExpArgs {
    /// Corpus root holding manifest.jsonl
    #[arg(long, env = "VINEBUD_CORPUS", value_parser = existing_path)]
    pub corpus: PathBuf,
    /// Output directory for artifacts
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads, 0 for one per core
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Vocabulary sizes, comma separated
    #[arg(long = "vocab-size", value_delimiter = ',', value_parser = positive, default_values_t = VOCAB_SIZES)]
    pub vocab_size: Vec<usize>,
    /// Non-bud to bud balance rates, comma separated
    #[arg(long = "balance-rate", value_delimiter = ',', value_parser = positive, default_values_t = BALANCE_RATES)]
    pub balance_rate: Vec<usize>,
    /// Test split as BUD,NON_BUD counts [default: a quarter of the smaller class, for each]
    #[arg(long, value_parser = parse_pair)]
    pub test: Option<(usize, usize)>,
    /// Gamma grid as log2 exponents, e.g. -14..-7 or -9,-8,-7
    #[arg(long = "grid-gamma", value_parser = parse_exponents, allow_hyphen_values = true)]
    pub grid_gamma: Option<Exponents>,
    /// C grid as log2 exponents, e.g. 5..14
    #[arg(long = "grid-c", value_parser = parse_exponents, allow_hyphen_values = true)]
    pub grid_c: Option<Exponents>,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    pub folds: usize,
    #[arg(long, default_value_t = 10, value_parser = positive)]
    pub repetitions: usize,
    /// Fixed SVM C, skipping the grid search (needs --gamma)
    #[arg(long, requires = "gamma")]
    pub c: Option<f64>,
    /// Fixed RBF gamma, skipping the grid search (needs --c)
    #[arg(long, requires = "c")]
    pub gamma: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    /// Use at most this many test buds
    #[arg(long)]
    pub buds: Option<usize>,
    /// Generated patches per bud and cell
    #[arg(long = "per-cell", default_value_t = 4, value_parser = positive)]
    pub per_cell: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ScanArgs {
    #[command(flatten)]
    pub exp: ExpArgs,
    /// Image to scan
    #[arg(long, value_parser = existing_path)]
    pub image: PathBuf,
    /// Window size as WxH or a single side
    #[arg(long, default_value = "100x100", value_parser = parse_dims)]
    pub window: (usize, usize),
    /// Window step as WxH or a single value
    #[arg(long, default_value = "50x50", value_parser = parse_dims)]
    pub stride: (usize, usize),
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    /// Directory of source images to annotate
    #[arg(long, env = "VINEBUD_CORPUS", value_parser = existing_path)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    /// Annotation log directory [default: <corpus>/.annot]
    #[arg(long)]
    pub state: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2014)]
    pub seed: u64,
    #[arg(long, default_value_t = 80)]
    pub buds: usize,
    #[arg(long = "non-bud-images", default_value_t = 10)]
    pub non_bud_images: usize,
    #[arg(long = "non-bud-per-image", default_value_t = 14)]
    pub non_bud_per_image: usize,
    #[arg(long = "image-size", default_value_t = 384)]
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exponents(pub Vec<i32>);

fn existing_path(s: &str) -> Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.exists() { Ok(p) } else { Err(format!("{s} does not exist")) }
}

fn positive(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected BUD,NON_BUD, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(a)?, n(b)?))
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((positive(w)?, positive(h)?)),
        None => positive(s).map(|v| (v, v)),
    }
}

fn parse_exponents(s: &str) -> Result<Exponents, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let n = |v: &str| v.trim().parse::<i32>().map_err(|e| format!("{v:?}: {e}"));
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (n(a)?, n(b)?);
                if a > b {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(n(part)?),
        }
    }
    if out.iter().any(|e| e.abs() > 60) {
        return Err("exponents must lie within -60..60".into());
    }
    Ok(Exponents(out))
}
