//! Pipeline stages over a corpus, with artifacts cached under the output directory.
//!
//! `cache.json` maps each artifact to a digest of everything it was built from; a
//! stage reuses a file only when the digest still matches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use vinebud::bof::{encode, load_vocabulary, save_vocabulary, Vocabulary};
use vinebud::corpus::{
    balance, load_manifest, split, BalanceConfig, Corpus, DiskImageStore, Label, Patch, Split, MANIFEST_FILE,
};
use vinebud::evaluation::{
    cross_validate_grid, derive_seed, heatmap_experiment, repeated_training, subcategory_recall, GridResult, Heatmap,
    HeatmapConfig, MetricSummary, Metrics, RepeatedConfig, TuningGrid,
};
use vinebud::imaging::{encode_png_gray, read_image, to_grayscale};
use vinebud::pipeline::{build_vocabulary, extract_patches, Classifier, DescriptorSet, VocabConfig};
use vinebud::scanwin::{scan_classify, ScanConfig};
use vinebud::sift::SiftConfig;
use vinebud::svm::{load_model, save_model, train, SvmConfig, SvmModel};

use crate::args::ExpArgs;

const CACHE_FILE: &str = "cache.json";
const IMAGE_CACHE: usize = 32;

pub fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Histograms of the split, for one vocabulary.
pub struct Encoded {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<Label>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<Label>,
}

#[derive(Serialize)]
pub struct Resolved {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub vocab_sizes: Vec<usize>,
    pub balance_rates: Vec<usize>,
    pub test: (usize, usize),
    pub grid: TuningGrid,
    pub repetitions: usize,
    pub fixed_svm: Option<(f64, f64)>,
    pub sift: SiftConfig<f64>,
}

pub struct Experiment {
    pub cfg: Resolved,
    pub patches: Vec<Patch>,
    pub split: Split,
    store: DiskImageStore<f64>,
    corpus_key: String,
    cache: BTreeMap<String, String>,
}

impl Experiment {
    pub fn open(args: &ExpArgs, workers: usize) -> Result<Self> {
        let corpus: Corpus = load_manifest(&args.corpus).with_context(|| format!("loading corpus {}", args.corpus.display()))?;
        let root = if args.corpus.is_dir() {
            args.corpus.clone()
        } else {
            args.corpus.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let manifest = std::fs::read(root.join(MANIFEST_FILE)).unwrap_or_default();
        let patches: Vec<Patch> = corpus.usable_patches().into_iter().cloned().collect();
        let count = |l: Label| patches.iter().filter(|p| p.label == l).count();
        let (buds, non_buds) = (count(Label::Bud), count(Label::NonBud));
        if buds == 0 || non_buds == 0 {
            bail!("corpus needs usable patches of both classes ({buds} bud, {non_buds} non-bud)");
        }
        let test = args.test.unwrap_or_else(|| {
            let t = buds.min(non_buds) / 4;
            (t, t)
        });
        let refs: Vec<&Patch> = patches.iter().collect();
        let split = split(&refs, args.seed, test)?;
        let mut grid = TuningGrid {
            folds: args.folds,
            ..TuningGrid::default()
        };
        if let Some(g) = &args.grid_gamma {
            grid.gammas = g.0.iter().map(|e| 2f64.powi(*e)).collect();
        }
        if let Some(c) = &args.grid_c {
            grid.cs = c.0.iter().map(|e| 2f64.powi(*e)).collect();
        }
        let sift = SiftConfig::default();
        let corpus_key = digest(&[&String::from_utf8_lossy(&manifest), &serde_json::to_string(&sift)?]);
        let cache = std::fs::read(args.out.join(CACHE_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        Ok(Experiment {
            cfg: Resolved {
                corpus: args.corpus.clone(),
                out: args.out.clone(),
                seed: args.seed,
                workers,
                vocab_sizes: args.vocab_size.clone(),
                balance_rates: args.balance_rate.clone(),
                test,
                grid,
                repetitions: args.repetitions,
                fixed_svm: args.c.zip(args.gamma),
                sift,
            },
            store: DiskImageStore::new(&root, &corpus, IMAGE_CACHE),
            patches,
            split,
            corpus_key,
            cache,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn fresh(&self, name: &str, key: &str) -> bool {
        self.cache.get(name).is_some_and(|k| k == key) && self.out(name).exists()
    }

    fn record(&mut self, name: &str, key: &str) -> Result<()> {
        self.cache.insert(name.to_string(), key.to_string());
        write_json(&self.out(CACHE_FILE), &self.cache)
    }

    fn split_key(&self) -> String {
        digest(&[&self.corpus_key, &self.cfg.seed.to_string(), &format!("{:?}", self.cfg.test)])
    }

    pub fn write_split(&self) -> Result<()> {
        let ids = |idx: &[usize]| idx.iter().map(|i| self.patches[*i].id.clone()).collect::<Vec<_>>();
        write_json(
            &self.out("split.json"),
            &json!({"seed": self.cfg.seed, "test_counts": self.cfg.test, "train": ids(&self.split.train), "test": ids(&self.split.test)}),
        )
    }

    pub fn descriptors(&mut self) -> Result<DescriptorSet<f64>> {
        let name = "descriptors.bin";
        let key = self.corpus_key.clone();
        if self.fresh(name, &key) {
            let set = DescriptorSet::<f64>::load(&self.out(name))?;
            if set.entries.iter().map(|e| &e.0).eq(self.patches.iter().map(|p| &p.id)) {
                return Ok(set);
            }
        }
        let refs: Vec<&Patch> = self.patches.iter().collect();
        let set = extract_patches(&refs, &self.store, &self.cfg.sift)?;
        log::info!("extracted {} descriptors from {} patches", set.total_descriptors(), refs.len());
        set.save(&self.out(name))?;
        self.record(name, &key)?;
        Ok(set)
    }

    pub fn vocabulary(&mut self, size: usize, set: &DescriptorSet<f64>) -> Result<Vocabulary<f64>> {
        let name = format!("vocab-S{size}.bin");
        let key = digest(&[&self.split_key(), &size.to_string()]);
        if self.fresh(&name, &key) {
            return Ok(load_vocabulary(&self.out(&name))?);
        }
        let train: Vec<&[Vec<f64>]> = self.split.train.iter().map(|i| set.entries[*i].1.as_slice()).collect();
        let vocab = build_vocabulary(&train, &VocabConfig::new(size, derive_seed(self.cfg.seed, &[size as u64])))?;
        save_vocabulary(&vocab, &self.out(&name))?;
        self.record(&name, &key)?;
        Ok(vocab)
    }

    pub fn encode(&self, vocab: &Vocabulary<f64>, set: &DescriptorSet<f64>) -> Result<Encoded> {
        let hist = |idx: &[usize]| -> Result<Vec<Vec<f64>>> { idx.iter().map(|i| Ok(encode(vocab, &set.entries[*i].1)?.bins)).collect() };
        let labels = |idx: &[usize]| idx.iter().map(|i| self.patches[*i].label).collect();
        Ok(Encoded {
            train_x: hist(&self.split.train)?,
            train_y: labels(&self.split.train),
            test_x: hist(&self.split.test)?,
            test_y: labels(&self.split.test),
        })
    }

    /// Descriptors, vocabulary and histograms for one vocabulary size.
    pub fn prepared(&mut self, size: usize) -> Result<(Vocabulary<f64>, Encoded)> {
        let set = self.descriptors()?;
        let vocab = self.vocabulary(size, &set)?;
        let enc = self.encode(&vocab, &set)?;
        Ok((vocab, enc))
    }

    fn tune_key(&self, size: usize, rate: usize) -> Result<String> {
        Ok(digest(&[&self.split_key(), &size.to_string(), &rate.to_string(), &serde_json::to_string(&self.cfg.grid)?]))
    }

    pub fn tune(&mut self, size: usize, rate: usize, enc: &Encoded) -> Result<GridResult> {
        let name = format!("tune-S{size}-R{rate}.json");
        let key = self.tune_key(size, rate)?;
        if self.fresh(&name, &key) {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(self.out(&name))?)?;
            return Ok(serde_json::from_value(v["result"].clone())?);
        }
        let seed = derive_seed(self.cfg.seed, &[size as u64, rate as u64, 0]);
        let result = cross_validate_grid(&enc.train_x, &enc.train_y, &self.cfg.grid, rate, seed, &SvmConfig::new(1.0, 1.0))?;
        log::info!("S={size} R={rate}: best gamma 2^{} C 2^{} (error {:.4})", result.best_gamma.log2(), result.best_c.log2(), result.best_error);
        write_json(&self.out(&name), &json!({"vocab_size": size, "balance_rate": rate, "grid": self.cfg.grid, "result": result}))?;
        self.record(&name, &key)?;
        Ok(result)
    }

    pub fn svm_config(&mut self, size: usize, rate: usize, enc: &Encoded) -> Result<SvmConfig> {
        Ok(match self.cfg.fixed_svm {
            Some((c, gamma)) => SvmConfig::new(c, gamma),
            None => {
                let r = self.tune(size, rate, enc)?;
                SvmConfig::new(r.best_c, r.best_gamma)
            }
        })
    }

    fn model_key(&self, size: usize, rate: usize, svm: &SvmConfig) -> Result<String> {
        Ok(digest(&[&self.split_key(), &size.to_string(), &rate.to_string(), &serde_json::to_string(svm)?, &self.cfg.repetitions.to_string()]))
    }

    /// One classifier on the balanced training split.
    pub fn train(&mut self, size: usize, rate: usize) -> Result<Classifier<f64>> {
        let (vocab, enc) = self.prepared(size)?;
        let svm = self.svm_config(size, rate, &enc)?;
        let name = format!("model-S{size}-R{rate}.bin");
        let key = self.model_key(size, rate, &svm)?;
        let model = if self.fresh(&name, &key) {
            load_model(&self.out(&name))?
        } else {
            let by_label = |l: Label| (0..enc.train_y.len()).filter(|i| enc.train_y[*i] == l).collect::<Vec<_>>();
            let cfg = BalanceConfig {
                rate,
                seed: derive_seed(self.cfg.seed, &[size as u64, rate as u64, 1]),
            };
            let b = balance(&by_label(Label::Bud), &by_label(Label::NonBud), &cfg)?;
            let idx: Vec<usize> = b.bud.iter().chain(&b.non_bud).copied().collect();
            let xs: Vec<&Vec<f64>> = idx.iter().map(|i| &enc.train_x[*i]).collect();
            let ys: Vec<Label> = idx.iter().map(|i| enc.train_y[*i]).collect();
            let model = train(&xs, &ys, &svm)?;
            save_model(&model, &self.out(&name))?;
            write_json(
                &self.out(&format!("train-S{size}-R{rate}.json")),
                &json!({"vocab_size": size, "balance_rate": rate, "svm": svm, "train_bud": b.bud.len(), "train_non_bud": b.non_bud.len(), "support_vectors": model.support_vectors.len()}),
            )?;
            self.record(&name, &key)?;
            model
        };
        Ok(Classifier {
            vocab,
            model,
            sift: self.cfg.sift.clone(),
        })
    }

    /// Repeated training for one (size, rate); writes the models and a metrics file.
    pub fn evaluate(&mut self, size: usize, rate: usize) -> Result<(Vec<MetricSummary>, Vec<Classifier<f64>>)> {
        let (vocab, enc) = self.prepared(size)?;
        let svm = self.svm_config(size, rate, &enc)?;
        let dir = format!("models/S{size}-R{rate}");
        let key = self.model_key(size, rate, &svm)?;
        let reps = self.cfg.repetitions;
        let model_path = |i: usize| format!("{dir}/model-{i:02}.bin");
        let metrics_name = format!("metrics-S{size}-R{rate}.json");
        if self.fresh(&dir, &key) && self.fresh(&metrics_name, &key) {
            let models = (0..reps).map(|i| load_model(&self.out(&model_path(i)))).collect::<vinebud::Result<Vec<SvmModel<f64>>>>()?;
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(self.out(&metrics_name))?)?;
            let summary = serde_json::from_value(v["summary"].clone())?;
            return Ok((summary, self.classifiers(&vocab, models)));
        }
        let cfg = RepeatedConfig {
            balance_rate: rate,
            seeds: (0..reps).map(|i| derive_seed(self.cfg.seed, &[size as u64, rate as u64, 2, i as u64])).collect(),
            bud_seed: derive_seed(self.cfg.seed, &[size as u64, rate as u64, 3]),
            svm,
        };
        let result = repeated_training(&enc.train_x, &enc.train_y, &enc.test_x, &enc.test_y, &cfg)?;
        std::fs::create_dir_all(self.out(&dir))?;
        for (i, m) in result.models.iter().enumerate() {
            save_model(m, &self.out(&model_path(i)))?;
        }
        // per-tag non-bud recall, averaged over the repetitions
        let mut tags: BTreeMap<String, f64> = BTreeMap::new();
        for m in &result.models {
            let items = self
                .split
                .test
                .iter()
                .zip(&enc.test_x)
                .filter(|(i, _)| self.patches[**i].label == Label::NonBud)
                .map(|(i, x)| Ok((self.patches[*i].subcategory, m.predict(x)?)))
                .collect::<vinebud::Result<Vec<_>>>()?;
            for (tag, r) in subcategory_recall(&items)? {
                *tags.entry(tag.to_string()).or_default() += r.recall / result.models.len() as f64;
            }
        }
        let runs: &[Metrics] = &result.runs;
        write_json(
            &self.out(&metrics_name),
            &json!({
                "vocab_size": size,
                "balance_rate": rate,
                "repeated": cfg,
                "runs": runs,
                "summary": result.summary,
                "subcategory_recall": tags,
            }),
        )?;
        self.record(&dir, &key)?;
        self.record(&metrics_name, &key)?;
        Ok((result.summary, self.classifiers(&vocab, result.models)))
    }

    fn classifiers(&self, vocab: &Vocabulary<f64>, models: Vec<SvmModel<f64>>) -> Vec<Classifier<f64>> {
        models
            .into_iter()
            .map(|model| Classifier {
                vocab: vocab.clone(),
                model,
                sift: self.cfg.sift.clone(),
            })
            .collect()
    }

    pub fn heatmap(&mut self, size: usize, rate: usize, max_buds: Option<usize>, per_cell: usize) -> Result<Heatmap> {
        let (_, classifiers) = self.evaluate(size, rate)?;
        let buds: Vec<&Patch> = self
            .split
            .test
            .iter()
            .map(|i| &self.patches[*i])
            .filter(|p| p.label == Label::Bud)
            .take(max_buds.unwrap_or(usize::MAX))
            .collect();
        let cfg = HeatmapConfig {
            per_cell,
            seed: derive_seed(self.cfg.seed, &[size as u64, rate as u64, 4]),
            ..HeatmapConfig::default()
        };
        let hm = heatmap_experiment(&classifiers, &buds, &self.store, &cfg)?;
        let stem = format!("heatmap-S{size}-R{rate}");
        write_json(&self.out(&format!("{stem}.json")), &json!({"config": cfg, "heatmap": hm}))?;
        let png = encode_png_gray(&hm.render(20))?;
        std::fs::write(self.out(&format!("{stem}.png")), png)?;
        Ok(hm)
    }

    pub fn scan(&mut self, size: usize, rate: usize, image: &Path, cfg: &ScanConfig) -> Result<usize> {
        let classifier = self.train(size, rate)?;
        let img = to_grayscale::<f64>(&read_image(image)?);
        let windows = scan_classify(&img, &classifier, cfg)?;
        let buds = windows.iter().filter(|w| w.label == Label::Bud).count();
        let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        write_json(
            &self.out(&format!("scan-{stem}-S{size}-R{rate}.json")),
            &json!({"image": image, "width": img.width(), "height": img.height(), "scan": cfg, "bud_windows": buds, "windows": windows}),
        )?;
        Ok(buds)
    }
}
