//! The run stages. Each reads its inputs from the output directory, writes
//! its artifacts there and records them in the manifest.
//!
//! Layout under the output directory (`v{n}` is the taxonomy version):
//!
//! ```text
//! manifest.json
//! victim/         victim.afck train_log.csv eval.json
//! pool-v{n}/      patch.afpt patch.json summary.json {train,test}/records.json + blobs
//! fingerprints/v{n}/{method}/   {train,test}.afpt {train,test}.json
//! splits/v{n}/    splits.json
//! models/v{n}/{method}/         replicate-{r}.afck history-{r}.csv
//! eval/v{n}/{method}/           summary.json confusion-{r}.csv per_class-{r}.csv per_class_mean.csv
//! analysis/v{n}/  quality_scatter.csv label_distribution.csv analysis.json
//! report/v{n}/    report.json report.csv
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::blob;
use super::config::{DataSource, RunConfig};
use super::manifest::{Artifact, Manifest, StageEntry};
use super::store::{load_fingerprints, load_metas, load_records, save_fingerprints, save_records};
use crate::analysis::{label_distribution, quality_csv, quality_scatter, spearman, top1_agreement};
use crate::attacks::{
    generate_classes, generate_pool, patch_attack_train, AdversarialRecord, Pool, PoolSummary, Taxonomy, TrainedPatch,
};
use crate::attribution::{assemble, choose_sources, evaluate, history_to_csv, train_attributor, EvalSummary, SplitSources, Splits};
use crate::data::{load_idx_dataset, synth_dataset, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::fingerprints::{extract, Method};
use crate::io::{read_file, write_file};
use crate::nn::{ModelCheckpoint, Network};
use crate::seed::derive_seed;
use crate::victim::{evaluate_victim, log_to_csv, train_victim};

/// Rows of the combined report, in order.
pub const REPORT_METHODS: [&str; 5] = ["true-delta", "raw-image", "jpeg-q75", "jpeg-q25", "cs"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub present: bool,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub replicates: usize,
    /// Change in mean accuracy against the base taxonomy (expanded runs only).
    pub change_vs_base: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub taxonomy_version: u32,
    pub classes: usize,
    pub rows: Vec<ReportRow>,
    /// true-delta > jpeg-q75 > raw-image; `None` if a row is absent.
    pub ordering_holds: Option<bool>,
}

impl Report {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.present)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,present,mean_accuracy,std_accuracy,replicates,change_vs_base\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.method,
                r.present,
                f(r.mean_accuracy),
                f(r.std_accuracy),
                r.replicates,
                f(r.change_vs_base)
            );
        }
        s
    }

    /// Plain-text table for the terminal.
    pub fn render(&self) -> String {
        let mut s = format!("attribution accuracy, taxonomy v{} ({} classes)\n", self.taxonomy_version, self.classes);
        let _ = writeln!(s, "{:<12} {:>9} {:>8} {:>5} {:>10}", "method", "mean %", "std", "reps", "vs base");
        for r in &self.rows {
            match (r.mean_accuracy, r.std_accuracy) {
                (Some(m), Some(sd)) => {
                    let change = r.change_vs_base.map(|c| format!("{:+.2}", c * 100.0)).unwrap_or_default();
                    let _ = writeln!(s, "{:<12} {:>9.2} {:>8.2} {:>5} {:>10}", r.method, m * 100.0, sd * 100.0, r.replicates, change);
                }
                _ => {
                    let _ = writeln!(s, "{:<12} {:>9}", r.method, "absent");
                }
            }
        }
        let verdict = match self.ordering_holds {
            Some(true) => "pass",
            Some(false) => "fail",
            None => "n/a (missing rows)",
        };
        let _ = writeln!(s, "ordering true-delta > jpeg-q75 > raw-image: {verdict}");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub taxonomy_version: u32,
    pub records: usize,
    pub spearman_mse_ssim: f64,
    /// Successful untargeted records whose post-attack label is the true label.
    pub untargeted_true_label_hits: usize,
    pub untargeted_records: usize,
    /// PGD-L∞ vs Square-L∞ top-1 label agreement over true labels.
    pub top1_agree: usize,
    pub top1_compared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatchMeta {
    target: usize,
    side: usize,
    objective_log: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolFile {
    taxonomy: Taxonomy,
    train: PoolSummary,
    test: PoolSummary,
}

pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
    manifest: Manifest,
}

fn rel(parts: &[&str]) -> String {
    parts.join("/")
}

fn stage_name(stage: &str, version: u32, method: Option<&str>) -> String {
    match method {
        Some(m) => format!("{stage}-v{version}-{m}"),
        None => format!("{stage}-v{version}"),
    }
}

impl Pipeline {
    /// Open (or start) the run in `cfg.out_dir`.
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        let manifest = Manifest::open(&root, &cfg)?;
        Ok(Pipeline { cfg, root, manifest })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn has_stage(&self, name: &str) -> bool {
        self.manifest.stages.contains_key(name)
    }

    fn require(&self, name: &str, hint: &str) -> Result<&StageEntry> {
        self.manifest
            .stages
            .get(name)
            .ok_or_else(|| Error::Config(format!("{hint} (stage '{name}' not found in {})", self.root.display())))
    }

    fn finish(
        &mut self,
        name: String,
        seed: u64,
        files: Vec<String>,
        info: serde_json::Value,
        warnings: Vec<String>,
        started: Instant,
    ) -> Result<()> {
        let artifacts = files.iter().map(|f| Artifact::of(&self.root, f)).collect::<Result<Vec<_>>>()?;
        for w in &warnings {
            log::warn!("{name}: {w}");
        }
        let seconds = started.elapsed().as_secs_f64();
        log::info!("{name}: {} artifacts in {seconds:.1}s", artifacts.len());
        self.manifest.stages.insert(name, StageEntry { seed, artifacts, info, warnings, seconds });
        self.manifest.save(&self.root)
    }

    pub fn taxonomy(&self, version: u32) -> Result<Taxonomy> {
        let grids = &self.cfg.attacks.attack.grids;
        match version {
            1 => Ok(Taxonomy::base(grids)),
            2 => Ok(Taxonomy::expanded(grids)),
            v => Err(Error::Config(format!("unknown taxonomy version {v}"))),
        }
    }

    /// The fingerprint method named `name`, with CS parameters from the config.
    pub fn method(&self, name: &str) -> Result<Method> {
        Ok(match name.parse::<Method>()? {
            Method::Cs(_) => Method::Cs(self.cfg.fingerprints.cs),
            m => m,
        })
    }

    /// Train or test images as configured.
    pub fn load_data(&self, split: Split) -> Result<LabeledDataset> {
        let d = &self.cfg.data;
        match d.source {
            DataSource::Synth => {
                let n = if split == Split::Test { d.synth_test_per_class } else { d.synth_train_per_class };
                synth_dataset(n, self.cfg.stage_seed("data"), split)
            }
            DataSource::Idx => {
                let (images, labels) = match split {
                    Split::Test => (&d.test_images, &d.test_labels),
                    _ => (&d.train_images, &d.train_labels),
                };
                let mut paths = Vec::with_capacity(2);
                for p in [images, labels] {
                    let p = p.as_ref().ok_or_else(|| Error::Config(format!("no {split} dataset path configured")))?;
                    if !p.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                    paths.push(p);
                }
                load_idx_dataset(paths[0], paths[1], split)
            }
        }
    }

    pub fn train_victim(&mut self) -> Result<f64> {
        let started = Instant::now();
        let train = self.load_data(Split::Train)?;
        let test = self.load_data(Split::Test)?;
        let (ck, log) = train_victim(&train, Some(&test), &self.cfg.victim)?;
        let net = ck.network::<f32>()?;
        let eval = evaluate_victim(&net, &test)?;
        let files = vec![rel(&["victim", "victim.afck"]), rel(&["victim", "train_log.csv"]), rel(&["victim", "eval.json"])];
        ck.save(&self.root.join(&files[0]))?;
        write_file(&self.root.join(&files[1]), log_to_csv(&log).as_bytes())?;
        let eval_json = json!({
            "accuracy": eval.accuracy,
            "per_class": eval.per_class,
            "test_images": test.len(),
            "train_images": train.len(),
        });
        write_file(&self.root.join(&files[2]), &serde_json::to_vec_pretty(&eval_json)?)?;
        let info = json!({ "test_accuracy": eval.accuracy, "epochs": self.cfg.victim.epochs, "train_images": train.len() });
        self.finish("train-victim".into(), self.cfg.victim.seed, files, info, Vec::new(), started)?;
        Ok(eval.accuracy)
    }

    pub fn load_victim(&self) -> Result<Network<f32>> {
        self.require("train-victim", "no trained victim; run train-victim first")?;
        ModelCheckpoint::load(&self.root.join("victim/victim.afck"))?.network()
    }

    fn pool_dir(version: u32) -> String {
        format!("pool-v{version}")
    }

    /// Attack sources from each split: the first `sources_*` images.
    fn attack_sources(&self) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
        let a = &self.cfg.attacks;
        let train_all = self.load_data(Split::Train)?;
        let train = train_all.first(a.sources_train);
        let test = self.load_data(Split::Test)?.first(a.sources_test);
        let end = (a.sources_train + a.patch_train_images).min(train_all.len());
        let patch_idx: Vec<usize> = (train.len()..end).collect();
        if patch_idx.is_empty() {
            return Err(Error::Config(format!(
                "no training images left for the patch after {} attack sources",
                train.len()
            )));
        }
        Ok((train, test, train_all.subset(&patch_idx)))
    }

    /// Attack pool for taxonomy `version`. The expanded pool reuses the
    /// base pool and its patch and attacks only the appended classes.
    pub fn generate(&mut self, version: u32) -> Result<usize> {
        let started = Instant::now();
        let taxonomy = self.taxonomy(version)?;
        let victim = self.load_victim()?;
        let (train, test, patch_data) = self.attack_sources()?;
        let cfg = self.cfg.attacks.attack.clone();
        let pool_seed = self.cfg.stage_seed("generate");
        let (patch, train_pool, test_pool) = if version == 1 {
            let patch = patch_attack_train(&victim, &patch_data.images, &patch_data.labels, &cfg.patch, self.cfg.stage_seed("patch"))?;
            let train_pool = generate_pool(&victim, &train, &taxonomy, &cfg, Some(&patch), pool_seed)?;
            let test_pool = generate_pool(&victim, &test, &taxonomy, &cfg, Some(&patch), pool_seed)?;
            (patch, train_pool, test_pool)
        } else {
            self.require("generate-v1", "the expanded pool extends the base pool; run generate first")?;
            let base = self.taxonomy(1)?;
            let patch = self.load_patch(1)?;
            let extra: Vec<usize> = (base.len()..taxonomy.len()).collect();
            let mut pools = Vec::with_capacity(2);
            for (data, split) in [(&train, Split::Train), (&test, Split::Test)] {
                let mut records = self.load_pool(1, split)?;
                let base_summary = self.pool_summary(1, split)?;
                let more = generate_classes(&victim, data, &taxonomy, &extra, &cfg, Some(&patch), pool_seed)?;
                records.extend(more.records);
                pools.push(Pool { records, summary: extend_summary(base_summary, more.summary, &extra) });
            }
            let test_pool = pools.pop().unwrap();
            let train_pool = pools.pop().unwrap();
            (patch, train_pool, test_pool)
        };

        let dir = Self::pool_dir(version);
        let mut files = vec![rel(&[&dir, "patch.afpt"]), rel(&[&dir, "patch.json"]), rel(&[&dir, "summary.json"])];
        blob::save(&self.root.join(&files[0]), &patch.patch)?;
        let pm = PatchMeta { target: patch.target, side: patch.patch.shape()[0], objective_log: patch.objective_log.clone() };
        write_file(&self.root.join(&files[1]), &serde_json::to_vec_pretty(&pm)?)?;
        let pf = PoolFile { taxonomy: taxonomy.clone(), train: train_pool.summary.clone(), test: test_pool.summary.clone() };
        write_file(&self.root.join(&files[2]), &serde_json::to_vec_pretty(&pf)?)?;
        for (pool, split) in [(&train_pool, "train"), (&test_pool, "test")] {
            let sub = format!("{dir}/{split}");
            for f in save_records(&self.root.join(&sub), &pool.records)? {
                files.push(format!("{sub}/{f}"));
            }
        }
        let mut warnings: Vec<String> = Vec::new();
        for (pool, split) in [(&train_pool, "train"), (&test_pool, "test")] {
            warnings.extend(pool.summary.warnings.iter().map(|w| format!("{split}: {w}")));
        }
        let total = train_pool.records.len() + test_pool.records.len();
        let info = json!({
            "taxonomy_version": version,
            "classes": taxonomy.len(),
            "taxonomy": taxonomy.classes.iter().map(|c| c.to_string()).collect::<Vec<_>>(),
            "patch_target": patch.target,
            "records": total,
            "train_counts": train_pool.summary.counts,
            "test_counts": test_pool.summary.counts,
            "train_eligible": train_pool.summary.eligible,
            "test_eligible": test_pool.summary.eligible,
        });
        self.finish(stage_name("generate", version, None), pool_seed, files, info, warnings, started)?;
        Ok(total)
    }

    fn load_patch(&self, version: u32) -> Result<TrainedPatch> {
        let dir = self.root.join(Self::pool_dir(version));
        let meta_path = dir.join("patch.json");
        let pm: PatchMeta =
            serde_json::from_slice(&read_file(&meta_path)?).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        Ok(TrainedPatch { patch: blob::load(&dir.join("patch.afpt"))?, target: pm.target, objective_log: pm.objective_log })
    }

    fn pool_summary(&self, version: u32, split: Split) -> Result<PoolSummary> {
        let p = self.root.join(Self::pool_dir(version)).join("summary.json");
        let pf: PoolFile = serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
        Ok(if split == Split::Test { pf.test } else { pf.train })
    }

    /// Stored records of one split, checked against the taxonomy.
    pub fn load_pool(&self, version: u32, split: Split) -> Result<Vec<AdversarialRecord>> {
        self.require(&stage_name("generate", version, None), "no attack pool; run generate first")?;
        let taxonomy = self.taxonomy(version)?;
        load_records(&self.root.join(Self::pool_dir(version)).join(split.as_str()), &taxonomy, true)
    }

    pub fn fingerprint(&mut self, version: u32, method_name: &str) -> Result<usize> {
        let started = Instant::now();
        let method = self.method(method_name)?;
        let name = method.name();
        self.require(&stage_name("generate", version, None), "no attack pool; run generate first")?;
        let taxonomy = self.taxonomy(version)?;
        let pool_dir = self.root.join(Self::pool_dir(version));
        let dir = format!("fingerprints/v{version}/{name}");
        let mut files = Vec::new();
        let mut counts = Vec::new();
        for split in ["train", "test"] {
            let records = load_records(&pool_dir.join(split), &taxonomy, method == Method::TrueDelta)?;
            let fps = extract(&records, &method)?;
            if fps.len() != records.len() {
                return Err(Error::Integrity(format!("{} fingerprints for {} records", fps.len(), records.len())));
            }
            counts.push(fps.len());
            for f in save_fingerprints(&self.root.join(&dir), split, &fps)? {
                files.push(format!("{dir}/{f}"));
            }
        }
        let seed = match method {
            Method::Cs(c) => c.seed,
            _ => 0,
        };
        let info = json!({ "method": method, "train": counts[0], "test": counts[1] });
        self.finish(stage_name("fingerprint", version, Some(&name)), seed, files, info, Vec::new(), started)?;
        Ok(counts[0] + counts[1])
    }

    /// Choose the train, validation and test source images once per
    /// taxonomy version; every method uses the same choice.
    pub fn build_splits(&mut self, version: u32) -> Result<SplitSources> {
        let started = Instant::now();
        self.require(&stage_name("generate", version, None), "no attack pool; run generate first")?;
        let pool_dir = self.root.join(Self::pool_dir(version));
        let ids = |split: &str| -> Result<BTreeSet<u64>> {
            Ok(load_metas(&pool_dir.join(split))?.into_iter().map(|m| m.source_id).collect())
        };
        let sources = choose_sources(&ids("train")?, &ids("test")?, &self.cfg.attribution.splits)?;
        let file = format!("splits/v{version}/splits.json");
        write_file(&self.root.join(&file), &serde_json::to_vec_pretty(&sources)?)?;
        let info = json!({
            "train_sources": sources.train.len(),
            "val_sources": sources.val.len(),
            "test_sources": sources.test.len(),
        });
        let seed = self.cfg.attribution.splits.seed;
        self.finish(stage_name("build-splits", version, None), seed, vec![file], info, Vec::new(), started)?;
        Ok(sources)
    }

    /// Train, validation and test datasets of one fingerprint method.
    pub fn splits(&self, version: u32, method_name: &str) -> Result<Splits> {
        let name = self.method(method_name)?.name();
        self.require(
            &stage_name("fingerprint", version, Some(&name)),
            &format!("no {name} fingerprints; run fingerprint --method {name} first"),
        )?;
        self.require(&stage_name("build-splits", version, None), "no splits; run build-splits first")?;
        let p = self.root.join(format!("splits/v{version}/splits.json"));
        let sources: SplitSources =
            serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
        let dir = self.root.join(format!("fingerprints/v{version}/{name}"));
        let train = load_fingerprints(&dir, "train")?;
        let test = load_fingerprints(&dir, "test")?;
        assemble(&train, &test, &sources, version, self.taxonomy(version)?.len())
    }

    pub fn train_attributor(&mut self, version: u32, method_name: &str) -> Result<Vec<Option<f64>>> {
        let started = Instant::now();
        let name = self.method(method_name)?.name();
        let s = self.splits(version, &name)?;
        let protocol = self.cfg.attribution.protocol;
        let results = (0..protocol.replicates)
            .into_par_iter()
            .map(|r| {
                let p = crate::attribution::TrainProtocol { seed: derive_seed(protocol.seed, &[r as u64]), ..protocol };
                log::info!("training {name} v{version} replicate {r}");
                train_attributor(&s.train, &s.val, &p)
            })
            .collect::<Result<Vec<_>>>()?;
        let dir = format!("models/v{version}/{name}");
        let mut files = Vec::new();
        for (r, t) in results.iter().enumerate() {
            let ck = format!("{dir}/replicate-{r}.afck");
            let hist = format!("{dir}/history-{r}.csv");
            t.checkpoint.save(&self.root.join(&ck))?;
            write_file(&self.root.join(&hist), history_to_csv(&t.history).as_bytes())?;
            files.extend([ck, hist]);
        }
        let best: Vec<Option<f64>> = results.iter().map(|t| t.best_val_accuracy).collect();
        let info = json!({
            "train_samples": s.train.len(),
            "val_samples": s.val.len(),
            "best_val_accuracy": best,
            "steps": results.iter().map(|t| t.history.last().map_or(0, |h| h.step)).collect::<Vec<_>>(),
        });
        self.finish(stage_name("train-attributor", version, Some(&name)), protocol.seed, files, info, Vec::new(), started)?;
        Ok(best)
    }

    pub fn evaluate(&mut self, version: u32, method_name: &str) -> Result<EvalSummary> {
        let started = Instant::now();
        let name = self.method(method_name)?.name();
        let stage = stage_name("train-attributor", version, Some(&name));
        let replicates = self
            .require(&stage, &format!("no trained {name} attributor; run train-attributor --method {name} first"))?
            .artifacts
            .iter()
            .filter(|a| a.path.ends_with(".afck"))
            .count();
        let dir = format!("models/v{version}/{name}");
        let models = (0..replicates)
            .map(|r| ModelCheckpoint::load(&self.root.join(format!("{dir}/replicate-{r}.afck")))?.network::<f32>())
            .collect::<Result<Vec<_>>>()?;
        let s = self.splits(version, &name)?;
        let summary = evaluate(&models, &s.test)?;
        let taxonomy = self.taxonomy(version)?;

        let out = format!("eval/v{version}/{name}");
        let mut files = vec![format!("{out}/summary.json"), format!("{out}/per_class_mean.csv")];
        write_file(&self.root.join(&files[0]), &serde_json::to_vec_pretty(&summary)?)?;
        let mut pc = String::from("class_index,class,family,eps,accuracy\n");
        for (c, acc) in taxonomy.classes.iter().zip(&summary.mean_per_class) {
            let _ = writeln!(
                pc,
                "{},{},{},{},{}",
                c.class_index,
                c,
                c.family().unwrap_or_default(),
                c.eps.map(|e| e.to_string()).unwrap_or_default(),
                acc.map(|a| format!("{a:.6}")).unwrap_or_default()
            );
        }
        write_file(&self.root.join(&files[1]), pc.as_bytes())?;
        for rep in &summary.replicates {
            let conf = format!("{out}/confusion-{}.csv", rep.replicate);
            let per = format!("{out}/per_class-{}.csv", rep.replicate);
            write_file(&self.root.join(&conf), rep.confusion_csv().as_bytes())?;
            write_file(&self.root.join(&per), rep.per_class_csv().as_bytes())?;
            files.extend([conf, per]);
        }
        let info = json!({
            "mean_accuracy": summary.mean_accuracy,
            "std_accuracy": summary.std_accuracy,
            "test_samples": summary.test_samples,
            "replicates": summary.replicates.len(),
        });
        self.finish(stage_name("evaluate", version, Some(&name)), 0, files, info, Vec::new(), started)?;
        Ok(summary)
    }

    pub fn eval_summary(&self, version: u32, method_name: &str) -> Result<EvalSummary> {
        let name = self.method(method_name)?.name();
        self.require(&stage_name("evaluate", version, Some(&name)), &format!("no {name} evaluation; run evaluate first"))?;
        let p = self.root.join(format!("eval/v{version}/{name}/summary.json"));
        serde_json::from_slice(&read_file(&p)?).map_err(|e| Error::format(&p, e.to_string()))
    }

    pub fn analyze(&mut self, version: u32) -> Result<AnalysisSummary> {
        let started = Instant::now();
        let taxonomy = self.taxonomy(version)?;
        let mut records = self.load_pool(version, Split::Train)?;
        records.extend(self.load_pool(version, Split::Test)?);
        let points = quality_scatter(&records)?;
        let mse: Vec<f64> = points.iter().map(|p| p.mse).collect();
        let ssim: Vec<f64> = points.iter().map(|p| p.ssim).collect();
        let rho = spearman(&mse, &ssim)?;
        let labels = self.load_victim()?.classes();
        let hist = label_distribution(&records, &taxonomy, labels)?;
        let (agree, compared) = top1_agreement(&hist, &taxonomy);
        let untargeted: Vec<&AdversarialRecord> = records.iter().filter(|r| r.meta.target.is_none()).collect();
        let hits = untargeted.iter().filter(|r| r.meta.label_after == r.meta.label_true).count();
        let summary = AnalysisSummary {
            taxonomy_version: version,
            records: records.len(),
            spearman_mse_ssim: rho,
            untargeted_true_label_hits: hits,
            untargeted_records: untargeted.len(),
            top1_agree: agree,
            top1_compared: compared,
        };
        let dir = format!("analysis/v{version}");
        let files = vec![
            format!("{dir}/quality_scatter.csv"),
            format!("{dir}/label_distribution.csv"),
            format!("{dir}/analysis.json"),
        ];
        write_file(&self.root.join(&files[0]), quality_csv(&points).as_bytes())?;
        write_file(&self.root.join(&files[1]), hist.to_csv(&taxonomy).as_bytes())?;
        write_file(&self.root.join(&files[2]), &serde_json::to_vec_pretty(&summary)?)?;
        let info = serde_json::to_value(&summary)?;
        self.finish(stage_name("analyze", version, None), 0, files, info, Vec::new(), started)?;
        Ok(summary)
    }

    /// Accuracy table over [`REPORT_METHODS`]; methods without an
    /// evaluation are marked absent.
    pub fn report(&mut self, version: u32) -> Result<Report> {
        let started = Instant::now();
        let classes = self.taxonomy(version)?.len();
        let mut rows = Vec::with_capacity(REPORT_METHODS.len());
        for m in REPORT_METHODS {
            let base = (version != 1).then(|| self.eval_summary(1, m).ok()).flatten();
            rows.push(match self.eval_summary(version, m) {
                Ok(s) => ReportRow {
                    method: m.to_string(),
                    present: true,
                    mean_accuracy: Some(s.mean_accuracy),
                    std_accuracy: Some(s.std_accuracy),
                    replicates: s.replicates.len(),
                    change_vs_base: base.map(|b| s.mean_accuracy - b.mean_accuracy),
                },
                Err(_) => ReportRow {
                    method: m.to_string(),
                    present: false,
                    mean_accuracy: None,
                    std_accuracy: None,
                    replicates: 0,
                    change_vs_base: None,
                },
            });
        }
        let acc = |m: &str| rows.iter().find(|r| r.method == m).and_then(|r| r.mean_accuracy);
        let ordering_holds = match (acc("true-delta"), acc("jpeg-q75"), acc("raw-image")) {
            (Some(d), Some(j), Some(r)) => Some(d > j && j > r),
            _ => None,
        };
        let report = Report { taxonomy_version: version, classes, rows, ordering_holds };
        let dir = format!("report/v{version}");
        let files = vec![format!("{dir}/report.json"), format!("{dir}/report.csv")];
        write_file(&self.root.join(&files[0]), &serde_json::to_vec_pretty(&report)?)?;
        write_file(&self.root.join(&files[1]), report.to_csv().as_bytes())?;
        let info = json!({ "ordering_holds": report.ordering_holds });
        self.finish(stage_name("report", version, None), 0, files, info, Vec::new(), started)?;
        Ok(report)
    }

    /// Every stage needed for `methods` under taxonomy `version`, skipping
    /// stages the manifest already records.
    pub fn run(&mut self, version: u32, methods: &[String]) -> Result<Report> {
        if !self.has_stage("train-victim") {
            self.train_victim()?;
        }
        for v in 1..=version {
            if !self.has_stage(&stage_name("generate", v, None)) {
                self.generate(v)?;
            }
        }
        if !self.has_stage(&stage_name("build-splits", version, None)) {
            self.build_splits(version)?;
        }
        for m in methods {
            let name = self.method(m)?.name();
            for (stage, f) in [
                ("fingerprint", Self::fingerprint_unit as fn(&mut Self, u32, &str) -> Result<()>),
                ("train-attributor", Self::train_unit),
                ("evaluate", Self::evaluate_unit),
            ] {
                if !self.has_stage(&stage_name(stage, version, Some(&name))) {
                    f(self, version, &name)?;
                }
            }
        }
        if !self.has_stage(&stage_name("analyze", version, None)) {
            self.analyze(version)?;
        }
        self.report(version)
    }

    fn fingerprint_unit(&mut self, v: u32, m: &str) -> Result<()> {
        self.fingerprint(v, m).map(drop)
    }

    fn train_unit(&mut self, v: u32, m: &str) -> Result<()> {
        self.train_attributor(v, m).map(drop)
    }

    fn evaluate_unit(&mut self, v: u32, m: &str) -> Result<()> {
        self.evaluate(v, m).map(drop)
    }
}

fn extend_summary(mut base: PoolSummary, more: PoolSummary, extra: &[usize]) -> PoolSummary {
    base.attempted.resize(more.attempted.len(), 0);
    base.counts.resize(more.counts.len(), 0);
    for &k in extra {
        base.attempted[k] = more.attempted[k];
        base.counts[k] = more.counts[k];
    }
    base.warnings.extend(more.warnings);
    base.taxonomy_version = more.taxonomy_version;
    base
}

/// Re-hash every artifact in the manifest under `root`. Returns the number
/// checked; a missing or altered file is an integrity error.
pub fn verify(root: &Path) -> Result<usize> {
    if !Manifest::path(root).exists() {
        return Err(Error::Config(format!("no manifest in {}", root.display())));
    }
    let m = Manifest::load(root)?;
    let mut n = 0;
    for a in m.stages.values().flat_map(|s| &s.artifacts) {
        a.verify(root)?;
        n += 1;
    }
    Ok(n)
}
