//! `vinebud` command line: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 when a stage fails.

pub mod args;
pub mod experiment;

use std::ffi::OsString;
use std::io::Write;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;
use vinebud::scanwin::ScanConfig;
use vinebud::synth::{generate_desk_corpus, DeskCorpusConfig};

pub use args::{Cli, Command};
use experiment::{write_json, Experiment};

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            2
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers).build()?)
}

fn pairs(exp: &Experiment) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in &exp.cfg.vocab_sizes {
        for r in &exp.cfg.balance_rates {
            out.push((*s, *r));
        }
    }
    out
}

fn run_manifest(exp: &Experiment, subcommand: &str, extra: serde_json::Value) -> Result<()> {
    write_json(
        &exp.out(&format!("run-{subcommand}.json")),
        &json!({"subcommand": subcommand, "version": env!("CARGO_PKG_VERSION"), "config": exp.cfg, "extra": extra}),
    )
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Serve(a) => {
            let cfg = vinebud_annot::ServeConfig {
                root: a.corpus,
                state_dir: a.state,
                listen: a.listen,
            };
            let rt = tokio::runtime::Runtime::new()?;
            return Ok(rt.block_on(vinebud_annot::serve(&cfg))?);
        }
        Command::Synth(a) => {
            let cfg = DeskCorpusConfig {
                buds: a.buds,
                non_bud_images: a.non_bud_images,
                non_bud_per_image: a.non_bud_per_image,
                image_size: a.image_size,
                seed: a.seed,
            };
            let desk = generate_desk_corpus(&cfg)?;
            desk.write(&a.out).with_context(|| format!("writing corpus to {}", a.out.display()))?;
            write_json(&a.out.join("run-synth.json"), &json!({"subcommand": "synth", "version": env!("CARGO_PKG_VERSION"), "config": cfg}))?;
            let stats = desk.corpus.stats();
            log::info!("wrote {} bud and {} non-bud patches to {}", stats.bud, stats.non_bud, a.out.display());
            return Ok(());
        }
        _ => {}
    }

    let (exp_args, name) = match &cmd {
        Command::Extract(a) => (a, "extract"),
        Command::Vocab(a) => (a, "vocab"),
        Command::Tune(a) => (a, "tune"),
        Command::Train(a) => (a, "train"),
        Command::Evaluate(a) => (a, "evaluate"),
        Command::Heatmap(h) => (&h.exp, "heatmap"),
        Command::Scan(s) => (&s.exp, "scan"),
        Command::Serve(_) | Command::Synth(_) => unreachable!(),
    };
    let pool = pool(exp_args.workers)?;
    let workers = pool.current_num_threads();
    pool.install(|| {
        let mut exp = Experiment::open(exp_args, workers)?;
        let extra = match &cmd {
            Command::Heatmap(h) => json!({"buds": h.buds, "per_cell": h.per_cell}),
            Command::Scan(s) => json!({"image": s.image, "window": s.window, "stride": s.stride}),
            _ => json!(null),
        };
        run_manifest(&exp, name, extra)?;
        exp.write_split()?;
        match &cmd {
            Command::Extract(_) => {
                exp.descriptors()?;
            }
            Command::Vocab(_) => {
                let set = exp.descriptors()?;
                for s in exp.cfg.vocab_sizes.clone() {
                    exp.vocabulary(s, &set)?;
                }
            }
            Command::Tune(_) => {
                for (s, r) in pairs(&exp) {
                    let (_, enc) = exp.prepared(s)?;
                    exp.tune(s, r, &enc)?;
                }
            }
            Command::Train(_) => {
                for (s, r) in pairs(&exp) {
                    exp.train(s, r)?;
                }
            }
            Command::Evaluate(_) => {
                let mut table = String::from("vocab_size\tbalance_rate\tmetric\tmean\tsd\n");
                for (s, r) in pairs(&exp) {
                    let (summary, _) = exp.evaluate(s, r)?;
                    for m in summary {
                        table.push_str(&format!("{s}\t{r}\t{}\t{:.6}\t{:.6}\n", m.metric, m.mean, m.sd));
                    }
                }
                std::fs::write(exp.out("metrics.tsv"), &table)?;
                print!("{table}");
            }
            Command::Heatmap(h) => {
                for (s, r) in pairs(&exp) {
                    let hm = exp.heatmap(s, r, h.buds, h.per_cell)?;
                    log::info!("S={s} R={r}: {} of 100 cells populated", hm.populated());
                }
            }
            Command::Scan(a) => {
                let cfg = ScanConfig::new(a.window, a.stride);
                for (s, r) in pairs(&exp) {
                    let buds = exp.scan(s, r, &a.image, &cfg)?;
                    log::info!("S={s} R={r}: {buds} windows classified as bud");
                }
            }
            Command::Serve(_) | Command::Synth(_) => unreachable!(),
        }
        Ok(())
    })
}
