//! Command-line front end.
//!
//! Every subcommand resolves an effective configuration (flags over config
//! file over defaults), runs, and writes everything under `--out`:
//!
//! ```text
//! <out>/manifest.json      command, effective config, seed, versions, digests
//! <out>/logs/*.csv
//! <out>/reports/*.{json,md,csv}
//! <out>/data/*.json       datasets, detections, pseudo-labels, models
//! ```
//!
//! Usage errors (unknown flag, missing input, schema-invalid config) exit
//! with code 2, other failures with code 1. Errors are printed to stderr as a
//! one-line JSON object.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::apm::{ApmConfig, ApmSnapshot, ClassStatsStore};
use crate::cpl::{
    ensemble_batch, labels_by_source, unlabeled_batch, BatchConfig, PseudoLabel, PseudoLabelEntry,
    ThresholdTable,
};
use crate::dataset::{
    assign_class_groups, coco_json, results_entries, BinningScheme,
    ClassGroup, DatasetBundle, DetectionRecord, HiddenAnnotations,
};
use crate::eval::{
    detections_from_records, evaluate, ground_truth_from, label_accuracy, pseudo_accuracy,
    EvalConfig, EvalDetection,
};
use crate::saod::{erase, recovery_score, CountRounding};
use crate::synthetic::{generate_dataset, simulate_detector, SyntheticConfig};
use crate::toy::{ablation_suite, train, AblationConfig, ToyModel, ToyWorld, ToyWorldConfig, TrainConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn to_json(&self) -> String {
        let (kind, message) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Failure(m) => ("failure", m),
        };
        json!({ "error": { "kind": kind, "message": message } }).to_string()
    }
}

fn flatten_csv(v: &Value, prefix: &str, out: &mut String) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}/{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, x)| flatten_csv(x, &join(k), out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, x)| flatten_csv(x, &join(&i.to_string()), out)),
        Value::String(t) if t.contains([',', '"', '\n']) => {
            out.push_str(&format!("{prefix},\"{}\"\n", t.replace('"', "\"\"")))
        }
        Value::String(t) => out.push_str(&format!("{prefix},{t}\n")),
        other => out.push_str(&format!("{prefix},{other}\n")),
    }
}

fn failure(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "cascade-pseudo", version, about = "Cascade pseudo-labeling toolkit for long-tailed semi-supervised detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset and simulated cascade detections.
    Generate(GenerateArgs),
    /// Validate a COCO annotation file and assign class groups.
    Ingest(IngestArgs),
    /// Ensemble, gate and export pseudo-labels for unlabeled detections.
    PseudoLabel(PseudoLabelArgs),
    /// Build per-class adaptive thresholds from labeled detections.
    MineThresholds(MineArgs),
    /// Train the toy cascade learner.
    TrainToy(TrainToyArgs),
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Erase a share of every category's annotations.
    Erase(EraseArgs),
    /// Run the CPL x APM ablation grid on the toy learner.
    Ablate(AblateArgs),
    /// Summarize finished run directories.
    Report(ReportArgs),
    /// Re-run a pipeline from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long)]
    labeled_images: Option<usize>,
    #[arg(long)]
    unlabeled_ratio: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    /// lvis3 or cocolt4.
    #[arg(long)]
    groups: Option<String>,
    /// Detector quality in [0, 1]; 1 is noiseless.
    #[arg(long)]
    quality: Option<f64>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ann: Option<String>,
    #[arg(long)]
    detections: Option<String>,
    #[arg(long)]
    groups: Option<String>,
}

#[derive(Debug, Args)]
struct PseudoLabelArgs {
    #[command(flatten)]
    common: Common,
    /// COCO file providing the category table.
    #[arg(long)]
    ann: Option<String>,
    /// Unlabeled stage detections.
    #[arg(long)]
    detections: Option<String>,
    /// APM snapshot; fixed thresholds are used without it.
    #[arg(long)]
    thresholds: Option<String>,
    /// COCO file with the hidden unlabeled annotations, for accuracy audits.
    #[arg(long)]
    hidden: Option<String>,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ann: Option<String>,
    #[arg(long)]
    detections: Option<String>,
    #[arg(long)]
    groups: Option<String>,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// ensemble or self_per_head.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    lambda_u: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    detections: Option<String>,
    #[arg(long)]
    ann: Option<String>,
    /// fixed-ap or ap.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    groups: Option<String>,
}

#[derive(Debug, Args)]
struct EraseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ann: Option<String>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// floor or stochastic.
    #[arg(long)]
    rounding: Option<String>,
    #[arg(long)]
    groups: Option<String>,
    /// Pseudo-label file to score recovery of the erased annotations.
    #[arg(long)]
    pseudo: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of seeds, starting at 0.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Run directories to summarize.
    #[arg(long = "run", num_args = 1..)]
    runs: Vec<String>,
}

#[derive(Debug, Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// configuration resolution

fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('/').collect();
    for (i, p) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return;
        }
        cur = obj.entry((*p).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

fn unknown_fields(input: &Value, effective: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(i), Value::Object(e)) = (input, effective) {
        for (k, v) in i {
            let path = format!("{prefix}/{k}");
            match e.get(k) {
                None => out.push(path),
                Some(ev) => unknown_fields(v, ev, &path, out),
            }
        }
    }
}

/// Resolves `defaults <- file <- overrides` into `T`. Unknown keys and type
/// errors are usage errors.
fn resolve<T: Serialize + DeserializeOwned>(
    file: Option<&Path>,
    overrides: Vec<(&str, Value)>,
) -> Result<T, CliError> {
    let mut raw = match file {
        Some(p) => {
            let bytes = fs::read(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_slice::<Value>(&bytes)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !raw.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    for (path, v) in overrides {
        set_path(&mut raw, path, v);
    }
    let cfg: T = serde_json::from_value(raw.clone())
        .map_err(|e| CliError::Usage(format!("schema-invalid config: {e}")))?;
    let effective = serde_json::to_value(&cfg).map_err(failure)?;
    let mut unknown = Vec::new();
    unknown_fields(&raw, &effective, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(CliError::Usage(format!(
            "schema-invalid config: unknown field(s) {}",
            unknown.join(", ")
        )));
    }
    Ok(cfg)
}

/// Collects `(path, value)` overrides for the flags that were given.
#[derive(Default)]
struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    fn opt<T: Serialize>(mut self, path: &'static str, v: &Option<T>) -> Self {
        if let Some(v) = v {
            self.0.push((path, serde_json::to_value(v).expect("flag value serializes")));
        }
        self
    }

    fn scheme(mut self, path: &'static str, v: &Option<String>) -> Result<Self, CliError> {
        if let Some(s) = v {
            let scheme = BinningScheme::parse(s)
                .ok_or_else(|| CliError::Usage(format!("unknown group scheme `{s}` (lvis3 or cocolt4)")))?;
            self.0.push((path, serde_json::to_value(scheme).expect("scheme serializes")));
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// run directory and manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub parallel: bool,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct RunDir {
    root: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    input_paths: Vec<PathBuf>,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self, CliError> {
        for sub in ["logs", "reports", "data"] {
            fs::create_dir_all(root.join(sub))
                .map_err(|e| failure(format!("cannot create {}: {e}", root.join(sub).display())))?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            input_paths: Vec::new(),
        })
    }

    /// Reads a required input, recording its digest.
    fn input(&mut self, flag: &str, path: &Option<String>) -> Result<Vec<u8>, CliError> {
        let p = path
            .as_deref()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CliError::Usage(format!("missing input --{flag}")))?;
        self.read_input(p)
    }

    fn read_input(&mut self, p: &str) -> Result<Vec<u8>, CliError> {
        let bytes =
            fs::read(p).map_err(|e| CliError::Usage(format!("missing input {p}: {e}")))?;
        self.inputs.push(FileDigest {
            path: p.to_string(),
            sha256: sha256_hex(&bytes),
        });
        self.input_paths.push(PathBuf::from(p));
        Ok(bytes)
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Ok(canon) = path.canonicalize() {
            if self
                .input_paths
                .iter()
                .any(|i| i.canonicalize().map(|c| c == canon).unwrap_or(false))
            {
                return Err(CliError::Usage(format!("output {} would overwrite an input", path.display())));
            }
        }
        fs::write(&path, contents.as_ref()).map_err(|e| failure(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(FileDigest {
            path: rel.to_string(),
            sha256: sha256_hex(contents.as_ref()),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(v).map_err(failure)?;
        s.push('\n');
        self.write(rel, s)
    }

    /// Writes `rel` as JSON plus a `path,value` CSV of its scalar leaves.
    fn write_report<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<(), CliError> {
        let value = serde_json::to_value(v).map_err(failure)?;
        let mut csv = String::from("path,value\n");
        flatten_csv(&value, "", &mut csv);
        self.write_json(rel, &value)?;
        self.write(&format!("{}.csv", rel.trim_end_matches(".json")), csv)
    }

    fn finish(mut self, command: &str, seed: Option<u64>, config: Value) -> Result<(), CliError> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            parallel: crate::par::is_parallel(),
            config,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(failure)?;
        s.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, s).map_err(|e| failure(format!("cannot write {}: {e}", path.display())))
    }
}

fn load_bundle(run: &mut RunDir, flag: &str, path: &Option<String>, scheme: BinningScheme) -> Result<DatasetBundle, CliError> {
    let bytes = run.input(flag, path)?;
    let bundle = crate::dataset::parse_coco(&bytes).map_err(|e| failure(format!("--{flag}: {e}")))?;
    Ok(assign_class_groups(bundle, scheme))
}

fn load_records(run: &mut RunDir, flag: &str, path: &Option<String>, class_ids: &[u64]) -> Result<Vec<DetectionRecord>, CliError> {
    let bytes = run.input(flag, path)?;
    crate::dataset::parse_results(&bytes, class_ids).map_err(|e| failure(format!("--{flag}: {e}")))
}

fn max_stage(records: &[DetectionRecord]) -> usize {
    records.iter().map(|r| r.stage).max().unwrap_or(1)
}

fn categories_csv(bundle: &DatasetBundle) -> String {
    let mut s = String::from("class,category_id,name,instance_count,image_count,group\n");
    for (i, c) in bundle.categories.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{}",
            c.id,
            c.name.replace(',', " "),
            c.instance_count,
            c.image_count,
            c.group.map_or("", |g| g.as_str())
        );
    }
    s
}

fn bundle_summary(bundle: &DatasetBundle) -> Value {
    let mut groups: BTreeMap<ClassGroup, (usize, u64)> = BTreeMap::new();
    for c in &bundle.categories {
        if let Some(g) = c.group {
            let e = groups.entry(g).or_default();
            e.0 += 1;
            e.1 += c.instance_count;
        }
    }
    json!({
        "images": bundle.images.len(),
        "annotations": bundle.annotations.len(),
        "categories": bundle.categories.len(),
        "zero_instance_categories": bundle.zero_instance_categories(),
        "groups": groups.iter().map(|(g, (n, inst))| (g.as_str().to_string(), json!({"classes": n, "instances": inst}))).collect::<Map<String, Value>>(),
    })
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

// ---------------------------------------------------------------------------
// pipelines

trait Pipeline: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn seed(&self) -> Option<u64> {
        None
    }
    fn run(&self, run: &mut RunDir) -> Result<(), CliError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub synthetic: SyntheticConfig,
    /// Detector quality in [0, 1].
    pub quality: f64,
    /// Also emit simulated stage detections.
    pub detections: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            synthetic: SyntheticConfig::default(),
            quality: 0.0,
            detections: true,
        }
    }
}

impl Pipeline for GenerateConfig {
    const NAME: &'static str = "generate";
    fn seed(&self) -> Option<u64> {
        Some(self.synthetic.seed)
    }
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.quality) {
            return Err(CliError::Usage("quality must lie in [0, 1]".into()));
        }
        let (labeled, unlabeled) =
            generate_dataset(&self.synthetic).map_err(|e| CliError::Usage(e.to_string()))?;
        let hidden_view = unlabeled.audit_view();
        run.write("data/labeled.json", coco_json(&labeled))?;
        run.write("data/unlabeled.json", coco_json(&unlabeled.public))?;
        run.write("data/unlabeled_hidden.json", coco_json(&hidden_view))?;
        let class_ids = labeled.class_ids();
        if self.detections {
            for (name, bundle) in [("labeled", &labeled), ("unlabeled", &hidden_view)] {
                let records = simulate_detector(bundle, &self.synthetic, self.quality);
                let entries = results_entries(&records, &class_ids).map_err(failure)?;
                run.write_json(&format!("data/detections_{name}.json"), &entries)?;
            }
        }
        run.write("logs/categories.csv", categories_csv(&labeled))?;
        let summary = json!({
            "labeled": bundle_summary(&labeled),
            "unlabeled": bundle_summary(&hidden_view),
        });
        run.write_report("reports/dataset.json", &summary)?;
        let mut md = String::from("# Synthetic dataset\n\n| split | images | annotations |\n|---|---:|---:|\n");
        let _ = writeln!(md, "| labeled | {} | {} |", labeled.images.len(), labeled.annotations.len());
        let _ = writeln!(md, "| unlabeled | {} | {} |", hidden_view.images.len(), hidden_view.annotations.len());
        md.push_str("\n| group | classes |\n|---|---:|\n");
        for g in self.synthetic.scheme.groups() {
            let n = labeled.categories.iter().filter(|c| c.group == Some(*g)).count();
            let _ = writeln!(md, "| {g} | {n} |");
        }
        run.write("reports/dataset.md", md)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub ann: Option<String>,
    pub detections: Option<String>,
    pub groups: BinningScheme,
}

impl Pipeline for IngestConfig {
    const NAME: &'static str = "ingest";
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        let bundle = load_bundle(run, "ann", &self.ann, self.groups)?;
        let mut summary = bundle_summary(&bundle);
        if self.detections.is_some() {
            let records = load_records(run, "detections", &self.detections, &bundle.class_ids())?;
            let proposals = crate::cpl::group_proposals(&records).len();
            summary["detections"] = json!({
                "records": records.len(),
                "proposals": proposals,
                "stages": max_stage(&records),
            });
        }
        run.write("data/annotations.json", coco_json(&bundle))?;
        run.write("logs/categories.csv", categories_csv(&bundle))?;
        run.write_report("reports/ingest.json", &summary)?;
        let mut md = String::from("# Ingest\n\n");
        let _ = writeln!(
            md,
            "{} images, {} annotations, {} categories ({} without instances).",
            bundle.images.len(),
            bundle.annotations.len(),
            bundle.categories.len(),
            bundle.zero_instance_categories().len()
        );
        run.write("reports/ingest.md", md)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub ann: Option<String>,
    pub detections: Option<String>,
    pub groups: BinningScheme,
    pub apm: ApmConfig,
    pub iou_threshold: f64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            ann: None,
            detections: None,
            groups: BinningScheme::default(),
            apm: ApmConfig::default(),
            iou_threshold: 0.5,
        }
    }
}

impl Pipeline for MineConfig {
    const NAME: &'static str = "mine-thresholds";
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        self.apm.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let bundle = load_bundle(run, "ann", &self.ann, self.groups)?;
        let records = load_records(run, "detections", &self.detections, &bundle.class_ids())?;
        let targets = ensemble_batch(&records, self.apm.stages()).map_err(failure)?;
        let mut store = ClassStatsStore::new(bundle.num_classes(), self.apm.clone()).map_err(failure)?;
        let recorded = store
            .populate_from_labeled(&targets, &bundle, self.iou_threshold)
            .map_err(failure)?;
        let snapshot = store.snapshot();
        run.write_json("reports/apm_snapshot.json", &snapshot)?;

        let stages = self.apm.stages();
        let mut csv = String::from("class,category_id,group,samples,mean,std");
        for k in 1..=stages {
            let _ = write!(csv, ",tau_{k}");
        }
        csv.push('\n');
        for c in &snapshot.classes {
            let cat = &bundle.categories[c.class];
            let _ = write!(
                csv,
                "{},{},{},{},{},{}",
                c.class,
                cat.id,
                cat.group.map_or("", |g| g.as_str()),
                c.queue.len(),
                c.mean,
                c.std
            );
            for t in &c.thresholds {
                let _ = write!(csv, ",{t}");
            }
            csv.push('\n');
        }
        run.write("reports/thresholds.csv", csv)?;
        run.write(
            "logs/mining.csv",
            format!("targets,recorded\n{},{recorded}\n", targets.len()),
        )?;

        let mut md = String::from("# Adaptive thresholds\n\nMean threshold per group and stage.\n\n| group |");
        for k in 1..=stages {
            let _ = write!(md, " stage {k} |");
        }
        md.push_str("\n|---|");
        for _ in 0..stages {
            md.push_str("---:|");
        }
        md.push('\n');
        for g in self.groups.groups() {
            let rows: Vec<&crate::apm::ClassSnapshot> = snapshot
                .classes
                .iter()
                .filter(|c| bundle.categories[c.class].group == Some(*g))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let _ = write!(md, "| {g} |");
            for k in 0..stages {
                let m = rows.iter().map(|c| c.thresholds[k]).sum::<f64>() / rows.len() as f64;
                let _ = write!(md, " {m:.3} |");
            }
            md.push('\n');
        }
        run.write("reports/thresholds.md", md)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub ann: Option<String>,
    pub detections: Option<String>,
    pub thresholds: Option<String>,
    pub hidden: Option<String>,
    pub groups: BinningScheme,
    /// Per-stage thresholds used when no APM snapshot is given.
    pub fixed_thresholds: Vec<f64>,
    pub batch: BatchConfig,
    pub audit_iou: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            ann: None,
            detections: None,
            thresholds: None,
            hidden: None,
            groups: BinningScheme::default(),
            fixed_thresholds: vec![0.5, 0.6, 0.7],
            batch: BatchConfig::default(),
            audit_iou: 0.5,
        }
    }
}

impl Pipeline for PseudoLabelConfig {
    const NAME: &'static str = "pseudo-label";
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        let bundle = load_bundle(run, "ann", &self.ann, self.groups)?;
        let class_ids = bundle.class_ids();
        let records = load_records(run, "detections", &self.detections, &class_ids)?;
        let table = match &self.thresholds {
            Some(p) => {
                let bytes = run.read_input(p)?;
                let snap: ApmSnapshot = serde_json::from_slice(&bytes)
                    .map_err(|e| failure(format!("--thresholds: {e}")))?;
                let store = ClassStatsStore::from_snapshot(&snap).map_err(failure)?;
                if store.num_classes() != bundle.num_classes() {
                    return Err(failure(format!(
                        "snapshot has {} classes, category table has {}",
                        store.num_classes(),
                        bundle.num_classes()
                    )));
                }
                ThresholdTable::from_store(&store)
            }
            None => ThresholdTable::fixed(bundle.num_classes(), &self.fixed_thresholds),
        };
        if table.stages() != self.batch.stages {
            return Err(CliError::Usage(format!(
                "{} threshold stages for {} detection stages",
                table.stages(),
                self.batch.stages
            )));
        }
        let set = unlabeled_batch(&records, &table, &self.batch).map_err(failure)?;
        let entries: Vec<PseudoLabelEntry> = set.to_result_entries(&class_ids).map_err(failure)?;
        run.write_json("data/pseudo_labels.json", &entries)?;

        let counts = set.retained_counts(bundle.num_classes());
        let mut csv = String::from("class,category_id,group");
        for k in 1..=set.stages {
            let _ = write!(csv, ",stage{k}");
        }
        csv.push('\n');
        for (c, row) in counts.iter().enumerate() {
            let cat = &bundle.categories[c];
            let _ = write!(csv, "{c},{},{}", cat.id, cat.group.map_or("", |g| g.as_str()));
            for n in row {
                let _ = write!(csv, ",{n}");
            }
            csv.push('\n');
        }
        run.write("logs/retained.csv", csv)?;

        let mut report = json!({
            "targets": set.entries.len(),
            "retained_per_stage": set.sizes(),
            "nesting_violations": set.nesting_violations(),
            "thresholds": table.rows(),
            "retained_counts": counts,
        });
        let mut md = String::from("# Pseudo-labels\n\n| stage | retained |\n|---:|---:|\n");
        for (k, n) in set.sizes().iter().enumerate() {
            let _ = writeln!(md, "| {} | {n} |", k + 1);
        }
        if self.hidden.is_some() {
            let bytes = run.input("hidden", &self.hidden)?;
            let hidden_bundle =
                crate::dataset::parse_coco(&bytes).map_err(|e| failure(format!("--hidden: {e}")))?;
            let hidden = HiddenAnnotations::new(hidden_bundle.annotations);
            let sources = labels_by_source(&records, self.batch.stages, 0.0).map_err(failure)?;
            let acc = pseudo_accuracy(&sources, Some(&hidden), &bundle, self.audit_iou).map_err(failure)?;
            let gts = ground_truth_from(hidden.audit(), &bundle).map_err(failure)?;
            let retained_acc: Vec<Option<f64>> = (1..=set.stages)
                .map(|k| label_accuracy(&set.pseudo_labels(k), &gts, self.audit_iou))
                .collect();
            report["accuracy_by_source"] = serde_json::to_value(
                acc.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
            )
            .map_err(failure)?;
            report["retained_accuracy"] = serde_json::to_value(&retained_acc).map_err(failure)?;
            md.push_str("\n| source | accuracy |\n|---|---:|\n");
            for (k, v) in &acc {
                let _ = writeln!(md, "| {k} | {:.4} |", v);
            }
        }
        run.write_report("reports/pseudo_labels.json", &report)?;
        run.write("reports/pseudo_labels.md", md)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainToyConfig {
    pub world: ToyWorldConfig,
    pub train: TrainConfig,
}

impl Pipeline for TrainToyConfig {
    const NAME: &'static str = "train-toy";
    fn seed(&self) -> Option<u64> {
        Some(self.train.seed)
    }
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        let world = ToyWorld::build(&self.world).map_err(|e| CliError::Usage(e.to_string()))?;
        self.train
            .validate(world.stages)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut model = ToyModel::new(world.feature_dim, world.num_classes, world.stages, self.train.seed);
        let log = train(&mut model, &world, &self.train).map_err(failure)?;
        run.write("logs/iterations.csv", log.iterations_csv())?;
        run.write("logs/thresholds.csv", log.thresholds_csv())?;
        run.write("logs/audits.csv", log.audits_csv())?;
        run.write_json("data/model.json", &model)?;
        let report = json!({
            "final_eval": log.final_eval,
            "monotone_violations": log.monotone_violations,
            "mean_teacher_accuracy": log.mean_teacher_accuracy(),
            "audits": log.audits.iter().map(|a| json!({
                "iteration": a.iteration,
                "held_out": a.held_out.overall,
                "teacher_accuracy": a.teacher_accuracy,
                "accuracy_by_source": a.accuracy_by_source,
            })).collect::<Vec<_>>(),
        });
        run.write_report("reports/train.json", &report)?;
        let mut md = String::from("# Toy training\n\n| metric | value |\n|---|---:|\n");
        let _ = writeln!(md, "| held-out accuracy | {:.4} |", log.final_eval.overall);
        for (g, v) in &log.final_eval.per_group {
            let _ = writeln!(md, "| accuracy ({g}) | {v:.4} |");
        }
        if let Some(a) = log.mean_teacher_accuracy() {
            let _ = writeln!(md, "| mean teacher accuracy | {a:.4} |");
        }
        let _ = writeln!(md, "| threshold monotonicity violations | {} |", log.monotone_violations);
        run.write("reports/train.md", md)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Dataset-wide per-class cap from the config.
    #[default]
    FixedAp,
    /// No cap.
    Ap,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub detections: Option<String>,
    pub ann: Option<String>,
    pub metric: Metric,
    pub groups: BinningScheme,
    pub eval: EvalConfig,
}

impl Pipeline for EvaluateConfig {
    const NAME: &'static str = "evaluate";
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        let bundle = load_bundle(run, "ann", &self.ann, self.groups)?;
        let records = load_records(run, "detections", &self.detections, &bundle.class_ids())?;
        let stages = max_stage(&records);
        let dets: Vec<EvalDetection> = if stages > 1 {
            ensemble_batch(&records, stages)
                .map_err(failure)?
                .iter()
                .filter(|t| !t.background)
                .map(|t| EvalDetection {
                    image_id: t.image_id,
                    class: t.label,
                    bbox: t.bbox,
                    score: t.confidence,
                })
                .collect()
        } else {
            detections_from_records(&records)
        };
        let mut cfg = self.eval.clone();
        if self.metric == Metric::Ap {
            cfg.cap_per_class = usize::MAX;
        }
        let mut report = evaluate(&dets, &bundle, &cfg).map_err(failure)?;
        if stages > 1 {
            report
                .notes
                .push(format!("{stages}-stage detections were scored as their stage ensemble"));
        }
        run.write_json("reports/eval.json", &report)?;
        run.write("reports/eval.csv", report.to_csv())?;
        run.write("reports/pr.csv", report.pr_csv())?;
        run.write("logs/pr.csv", report.pr_csv())?;
        let mut md = String::from("# Evaluation\n\n| metric | value |\n|---|---:|\n");
        let _ = writeln!(md, "| AP | {:.4} |", report.ap_overall);
        for (g, v) in &report.ap_per_group {
            let _ = writeln!(md, "| AP ({g}) | {v:.4} |");
        }
        md.push_str("\n| tau | precision | recall |\n|---:|---:|---:|\n");
        for p in &report.pr_curve {
            let _ = writeln!(md, "| {} | {:.4} | {:.4} |", p.tau, p.precision, p.recall);
        }
        run.write("reports/eval.md", md)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EraseConfig {
    pub ann: Option<String>,
    pub ratio: f64,
    pub seed: u64,
    pub rounding: CountRounding,
    pub groups: BinningScheme,
    pub pseudo: Option<String>,
    /// Stage whose retained pseudo-labels are scored for recovery.
    pub recovery_stage: usize,
    pub recovery_iou: f64,
}

impl Default for EraseConfig {
    fn default() -> Self {
        EraseConfig {
            ann: None,
            ratio: 0.4,
            seed: 0,
            rounding: CountRounding::default(),
            groups: BinningScheme::default(),
            pseudo: None,
            recovery_stage: 1,
            recovery_iou: 0.5,
        }
    }
}

impl Pipeline for EraseConfig {
    const NAME: &'static str = "erase";
    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(CliError::Usage("ratio must lie in [0, 1]".into()));
        }
        let bundle = load_bundle(run, "ann", &self.ann, self.groups)?;
        let (sparse, report) = erase(&bundle, self.ratio, self.seed, self.rounding);
        run.write("data/sparse.json", coco_json(&sparse))?;
        let mut csv = String::from("category_id,group,annotations,removed\n");
        for c in &bundle.categories {
            let (n, m) = report.per_category.get(&c.id).copied().unwrap_or((0, 0));
            let _ = writeln!(csv, "{},{},{n},{m}", c.id, c.group.map_or("", |g| g.as_str()));
        }
        run.write("logs/per_category.csv", csv)?;
        let mut value = serde_json::to_value(&report).map_err(failure)?;
        let mut md = String::from("# Annotation erasure\n\n");
        let _ = writeln!(
            md,
            "Removed {} of {} annotations at ratio {}.\n\n| group | classes preserved |\n|---|---:|",
            report.removed.len(),
            bundle.annotations.len(),
            self.ratio
        );
        for (g, v) in &report.preservation {
            let _ = writeln!(md, "| {g} | {:.2}% |", 100.0 * v);
        }
        if self.pseudo.is_some() {
            let bytes = run.input("pseudo", &self.pseudo)?;
            let entries: Vec<PseudoLabelEntry> =
                serde_json::from_slice(&bytes).map_err(|e| failure(format!("--pseudo: {e}")))?;
            let k = self.recovery_stage.max(1) - 1;
            let labels: Vec<PseudoLabel> = entries
                .iter()
                .filter(|e| e.stage_mask.get(k).copied().unwrap_or(false))
                .filter_map(|e| {
                    let class = bundle.class_index(e.result.category_id)?;
                    let [x, y, w, h] = e.result.bbox;
                    Some(PseudoLabel {
                        image_id: e.result.image_id,
                        class,
                        bbox: crate::dataset::BBox::from_xywh(x, y, w, h).ok()?,
                        score: e.q_t,
                    })
                })
                .collect();
            let score = recovery_score(&labels, &report.removed, |id| bundle.class_index(id), self.recovery_iou);
            value["recovery_score"] = json!(score);
            let _ = writeln!(md, "\nRecovery of erased annotations: {:.2}%.", 100.0 * score);
        }
        run.write_report("reports/erasure.json", &value)?;
        run.write("reports/erasure.md", md)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateConfig {
    #[serde(flatten)]
    pub ablation: AblationConfig,
}

impl Pipeline for AblateConfig {
    const NAME: &'static str = "ablate";
    fn seed(&self) -> Option<u64> {
        self.ablation.seeds.first().copied()
    }
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Usage("need at least one seed".into()));
        }
        let stages = self.ablation.world.synthetic.stages;
        self.ablation
            .train
            .validate(stages)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let report = ablation_suite(&self.ablation).map_err(failure)?;
        run.write_report("reports/ablation.json", &report)?;
        let groups = self.ablation.world.synthetic.scheme.groups();
        let mut md = String::from("# CPL x APM ablation\n\n");
        md.push_str(&report.to_markdown(groups));
        md.push_str("\n| comparison | accuracy |\n|---|---:|\n");
        let both = &report.grid[3];
        let _ = writeln!(md, "| with burn-in | {:.1} |", 100.0 * both.mean_overall);
        let _ = writeln!(md, "| without burn-in | {:.1} |", 100.0 * report.no_burn_in.mean_overall);
        md.push_str("\n| teacher | pseudo-label accuracy |\n|---|---:|\n");
        for (name, v) in [("ensemble", both), ("self per head", &report.self_teacher)] {
            match v.mean_teacher_accuracy {
                Some(a) => {
                    let _ = writeln!(md, "| {name} | {:.1} |", 100.0 * a);
                }
                None => {
                    let _ = writeln!(md, "| {name} | - |");
                }
            }
        }
        run.write("reports/ablation.md", md)?;
        let mut csv = String::from("variant,seed,overall");
        for g in groups {
            let _ = write!(csv, ",{g}");
        }
        csv.push('\n');
        for v in report.grid.iter().chain([&report.no_burn_in, &report.self_teacher]) {
            for (s, e) in report.seeds.iter().zip(&v.per_seed) {
                let _ = write!(csv, "{},{s},{}", v.name, e.overall);
                for g in groups {
                    match e.per_group.get(g) {
                        Some(x) => {
                            let _ = write!(csv, ",{x}");
                        }
                        None => csv.push(','),
                    }
                }
                csv.push('\n');
            }
        }
        run.write("logs/ablation_runs.csv", csv)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub runs: Vec<String>,
}

impl Pipeline for ReportConfig {
    const NAME: &'static str = "report";
    fn run(&self, run: &mut RunDir) -> Result<(), CliError> {
        if self.runs.is_empty() {
            return Err(CliError::Usage("missing input --run".into()));
        }
        let mut rows = Vec::new();
        let mut md = String::from("# Run summary\n");
        let mut csv = String::from("run,command,seed,outputs\n");
        for dir in &self.runs {
            let mpath = Path::new(dir).join("manifest.json");
            let bytes = run.read_input(&mpath.to_string_lossy())?;
            let manifest: Manifest =
                serde_json::from_slice(&bytes).map_err(|e| failure(format!("{}: {e}", mpath.display())))?;
            let _ = writeln!(
                csv,
                "{dir},{},{},{}",
                manifest.command,
                manifest.seed.map_or(String::new(), |s| s.to_string()),
                manifest.outputs.len()
            );
            let _ = writeln!(md, "\n## {} ({})\n", md_escape(dir), manifest.command);
            let mut reports = Map::new();
            for o in manifest.outputs.iter().filter(|o| o.path.starts_with("reports/")) {
                if o.path.ends_with(".md") {
                    let text = run.read_input(&Path::new(dir).join(&o.path).to_string_lossy())?;
                    let body = String::from_utf8_lossy(&text);
                    // demote headings so each run nests under its own section
                    for line in body.lines() {
                        if line.starts_with('#') {
                            let _ = writeln!(md, "##{line}");
                        } else {
                            let _ = writeln!(md, "{line}");
                        }
                    }
                } else if o.path.ends_with(".json") {
                    reports.insert(o.path.clone(), json!(o.sha256));
                }
            }
            rows.push(json!({
                "run": dir,
                "command": manifest.command,
                "seed": manifest.seed,
                "report_digests": reports,
            }));
        }
        run.write_report("reports/summary.json", &rows)?;
        run.write("reports/summary.md", md)?;
        run.write("logs/runs.csv", csv)
    }
}

// ---------------------------------------------------------------------------
// dispatch

fn execute<P: Pipeline>(cfg: &P, out: &Path, expected_inputs: Option<&[FileDigest]>) -> Result<(), CliError> {
    let mut run = RunDir::create(out)?;
    cfg.run(&mut run)?;
    if let Some(expected) = expected_inputs {
        if expected != run.inputs.as_slice() {
            return Err(failure("inputs differ from the manifest's recorded digests"));
        }
    }
    let config = serde_json::to_value(cfg).map_err(failure)?;
    run.finish(P::NAME, cfg.seed(), config)
}

fn resolve_and_run<P: Pipeline>(common: &Common, overrides: Overrides) -> Result<(), CliError> {
    let cfg: P = resolve(common.config.as_deref(), overrides.0)?;
    execute(&cfg, &common.out, None)
}

fn rerun(args: &RerunArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.manifest)
        .map_err(|e| CliError::Usage(format!("missing input {}: {e}", args.manifest.display())))?;
    let m: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(format!("invalid manifest: {e}")))?;
    fn go<P: Pipeline>(m: &Manifest, out: &Path) -> Result<(), CliError> {
        let cfg: P = serde_json::from_value(m.config.clone())
            .map_err(|e| CliError::Usage(format!("invalid manifest config: {e}")))?;
        execute(&cfg, out, Some(&m.inputs))
    }
    match m.command.as_str() {
        GenerateConfig::NAME => go::<GenerateConfig>(&m, &args.out),
        IngestConfig::NAME => go::<IngestConfig>(&m, &args.out),
        PseudoLabelConfig::NAME => go::<PseudoLabelConfig>(&m, &args.out),
        MineConfig::NAME => go::<MineConfig>(&m, &args.out),
        TrainToyConfig::NAME => go::<TrainToyConfig>(&m, &args.out),
        EvaluateConfig::NAME => go::<EvaluateConfig>(&m, &args.out),
        EraseConfig::NAME => go::<EraseConfig>(&m, &args.out),
        AblateConfig::NAME => go::<AblateConfig>(&m, &args.out),
        ReportConfig::NAME => go::<ReportConfig>(&m, &args.out),
        other => Err(CliError::Usage(format!("unknown command `{other}` in manifest"))),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => {
            let o = Overrides::default()
                .opt("synthetic/seed", &a.seed)
                .opt("synthetic/num_classes", &a.classes)
                .opt("synthetic/exponent", &a.exponent)
                .opt("synthetic/labeled_images", &a.labeled_images)
                .opt("synthetic/unlabeled_ratio", &a.unlabeled_ratio)
                .opt("synthetic/stages", &a.stages)
                .opt("quality", &a.quality)
                .scheme("synthetic/scheme", &a.groups)?;
            resolve_and_run::<GenerateConfig>(&a.common, o)
        }
        Command::Ingest(a) => {
            let o = Overrides::default()
                .opt("ann", &a.ann)
                .opt("detections", &a.detections)
                .scheme("groups", &a.groups)?;
            resolve_and_run::<IngestConfig>(&a.common, o)
        }
        Command::PseudoLabel(a) => {
            let o = Overrides::default()
                .opt("ann", &a.ann)
                .opt("detections", &a.detections)
                .opt("thresholds", &a.thresholds)
                .opt("hidden", &a.hidden);
            resolve_and_run::<PseudoLabelConfig>(&a.common, o)
        }
        Command::MineThresholds(a) => {
            let o = Overrides::default()
                .opt("ann", &a.ann)
                .opt("detections", &a.detections)
                .scheme("groups", &a.groups)?;
            resolve_and_run::<MineConfig>(&a.common, o)
        }
        Command::TrainToy(a) => {
            let o = Overrides::default()
                .opt("train/seed", &a.seed)
                .opt("world/synthetic/seed", &a.seed)
                .opt("train/total_iters", &a.iters)
                .opt("train/burn_in_iters", &a.burn_in)
                .opt("train/teacher", &a.teacher)
                .opt("train/loss/lambda_u", &a.lambda_u);
            resolve_and_run::<TrainToyConfig>(&a.common, o)
        }
        Command::Evaluate(a) => {
            let o = Overrides::default()
                .opt("detections", &a.detections)
                .opt("ann", &a.ann)
                .opt("metric", &a.metric)
                .scheme("groups", &a.groups)?;
            resolve_and_run::<EvaluateConfig>(&a.common, o)
        }
        Command::Erase(a) => {
            let o = Overrides::default()
                .opt("ann", &a.ann)
                .opt("ratio", &a.ratio)
                .opt("seed", &a.seed)
                .opt("rounding", &a.rounding)
                .opt("pseudo", &a.pseudo)
                .scheme("groups", &a.groups)?;
            resolve_and_run::<EraseConfig>(&a.common, o)
        }
        Command::Ablate(a) => {
            let seeds = a.seeds.map(|n| (0..n).collect::<Vec<u64>>());
            let o = Overrides::default()
                .opt("seeds", &seeds)
                .opt("train/total_iters", &a.iters);
            resolve_and_run::<AblateConfig>(&a.common, o)
        }
        Command::Report(a) => {
            let runs = (!a.runs.is_empty()).then_some(a.runs.clone());
            let o = Overrides::default().opt("runs", &runs);
            resolve_and_run::<ReportConfig>(&a.common, o)
        }
        Command::Rerun(a) => rerun(&a),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
