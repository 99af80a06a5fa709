//! The `trnasformer` command: one subcommand per pipeline stage. Exit codes
//! are 0 on success, 1 on runtime or data failures and 2 on usage or
//! configuration errors.

mod config;

pub use config::{
    apply_env, apply_override, EvalConfig, Paths, RunConfig, SearchConfig, SplitConfig,
    CONFIG_ECHO_FILE, ENV_PREFIX,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagging::{
    bag_slide, load_split, manifest_path, read_bag, select_tiles, tissue_mask, write_bag,
    DatasetManifest, EmbeddingTable, SlideEntry, SlideMeta, Split, MANIFEST_FILE,
    MANIFEST_VERSION,
};
use crate::error::{bail, Error, Result};
use crate::eval::{
    evaluate_slides, group_by_slide, search_slides, write_eval_reports, write_search_report,
};
use crate::genes::{filter_median_zero, ingest_case_files, ingest_matrix, log_transform, split_cases, GeneTable};
use crate::model::{Checkpoint, Model};
use crate::synth::{generate, GENE_INDEX_FILE};
use crate::train::{train, TrainOutcome, BEST_CHECKPOINT};

pub const GENE_MATRIX_FILE: &str = "genes.tsv";
pub const SPLITS_FILE: &str = "splits.json";
pub const BAG_FAILURES_FILE: &str = "failures.json";

#[derive(Debug, Parser)]
#[command(name = "trnasformer", version, about = "Gene expression and slide representation learning from bags of tile embeddings")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "TRNA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted classes and genes.
    Synth(SynthArgs),
    /// Turn slide thumbnails plus tile embeddings into bag files.
    Bag(BagArgs),
    /// Filter and transform an expression table.
    Genes(GenesArgs),
    /// Assign cases of a dataset to train/val/test.
    Split(SplitArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Gene, classification and representation reports for a checkpoint.
    Eval(EvalArgs),
    /// Leave-one-patient-out slide search.
    Search(SearchArgs),
    /// Check bag files or a whole dataset.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BagArgs {
    /// JSON list of slides with thumbnail and embedding-table paths.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Transformed gene matrix written by `genes`.
    #[arg(long)]
    pub genes: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenesArgs {
    /// Matrix TSV with a header of case ids.
    #[arg(long, conflicts_with = "cases", required_unless_present = "cases")]
    pub matrix: Option<PathBuf>,
    /// Per-case `gene_id<TAB>value` files or directories of them; the case id
    /// is the file stem.
    #[arg(long, num_args = 1..)]
    pub cases: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub subsets: Option<usize>,
    /// Comma-separated K values.
    #[arg(long = "k", value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Bag files, dataset directories or manifest files.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// One slide of a `bag` input list. Paths are relative to the list file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideSource {
    pub slide_id: String,
    pub case_id: String,
    pub label: u32,
    pub thumbnail: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagInput {
    pub classes: Vec<String>,
    pub slides: Vec<SlideSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideFailure {
    pub slide_id: String,
    pub error: String,
}

/// Exit code of an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn required(path: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("--{name} is required (or set paths.{name})")))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    let flag = |key: &str, v: Option<String>| v.map(|v| format!("{key}={v}"));
    let path_flag = |key: &str, p: &Option<PathBuf>| {
        p.as_ref()
            .map(|p| format!("paths.{key}={}", toml::Value::String(p.display().to_string())))
    };
    let extra: Vec<Option<String>> = match &cli.command {
        Command::Synth(a) => vec![
            path_flag("out", &a.out),
            flag("synth.seed", a.seed.map(|s| s.to_string())),
        ],
        Command::Bag(a) => vec![
            path_flag("out", &a.out),
            flag("bagging.seed", a.seed.map(|s| s.to_string())),
        ],
        Command::Genes(a) => vec![path_flag("out", &a.out)],
        Command::Split(a) => vec![
            path_flag("data", &a.data),
            flag("split.seed", a.seed.map(|s| s.to_string())),
        ],
        Command::Train(a) => vec![
            path_flag("data", &a.data),
            path_flag("out", &a.out),
            flag("train.seed", a.seed.map(|s| s.to_string())),
            flag("train.epochs", a.epochs.map(|s| s.to_string())),
            flag("train.lr", a.lr.map(|s| format!("{s:?}"))),
            flag("model.depth", a.depth.map(|s| s.to_string())),
        ],
        Command::Eval(a) => vec![
            path_flag("data", &a.data),
            path_flag("checkpoint", &a.checkpoint),
            path_flag("out", &a.out),
            flag("eval.split", a.split.map(|s| format!("\"{s}\""))),
        ],
        Command::Search(a) => vec![
            path_flag("data", &a.data),
            path_flag("checkpoint", &a.checkpoint),
            path_flag("out", &a.out),
            flag("search.subsets", a.subsets.map(|s| s.to_string())),
            flag("search.ks", a.ks.as_ref().map(|k| format!("{k:?}"))),
            flag("search.seed", a.seed.map(|s| s.to_string())),
            flag("search.split", a.split.map(|s| format!("\"{s}\""))),
        ],
        Command::Validate(_) => vec![],
    };
    overrides.extend(extra.into_iter().flatten());
    let config = RunConfig::resolve(cli.config.as_deref(), std::env::vars(), &overrides)?;
    if let Some(n) = config.workers {
        // a second call in the same process keeps the first pool
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("worker pool already initialised");
        }
    }
    match &cli.command {
        Command::Synth(_) => cmd_synth(&config),
        Command::Bag(a) => cmd_bag(&config, a),
        Command::Genes(a) => cmd_genes(&config, a),
        Command::Split(_) => cmd_split(&config),
        Command::Train(a) => cmd_train(&config, a.resume).map(|_| ()),
        Command::Eval(_) => cmd_eval(&config),
        Command::Search(_) => cmd_search(&config),
        Command::Validate(a) => cmd_validate(&a.paths),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    let out = required(&config.paths.out, "out")?;
    let data = generate(&config.synth)?;
    data.write(&out)?;
    config.echo(&out)?;
    info!(
        "wrote {} slides, {} bags to {}",
        data.manifest.slides.len(),
        data.manifest.bag_count(),
        out.display()
    );
    Ok(())
}

/// Reads the JSON gene-id index of a dataset, or numbers the genes.
pub fn load_gene_ids(manifest: &DatasetManifest, root: &Path) -> Result<Vec<String>> {
    let Some(rel) = &manifest.gene_index else {
        return Ok((0..manifest.gene_count).map(|g| format!("gene{g}")).collect());
    };
    let path = root.join(rel);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ids: Vec<String> = serde_json::from_str(&text)?;
    if ids.len() != manifest.gene_count {
        bail!(Data, "{} lists {} genes, manifest says {}", path.display(), ids.len(), manifest.gene_count);
    }
    Ok(ids)
}

/// Loads a manifest given a dataset directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let file = manifest_path(path);
    let manifest = DatasetManifest::load(&file)?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

fn bag_one(
    source: &SlideSource,
    base: &Path,
    genes: Option<&GeneTable>,
    config: &RunConfig,
    out: &Path,
) -> Result<(SlideEntry, usize, usize)> {
    let thumb_path = base.join(&source.thumbnail);
    let thumb = image::open(&thumb_path)
        .map_err(|e| Error::Input(format!("{}: {e}", thumb_path.display())))?
        .to_rgb8();
    let tiles = select_tiles(&tissue_mask(&thumb)?)?;
    let emb_path = base.join(&source.embeddings);
    let text = fs::read_to_string(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
    let table = EmbeddingTable::parse_tsv(&text)?;
    let gene_target = match genes {
        Some(g) => g
            .case_row(&source.case_id)
            .ok_or_else(|| Error::Data(format!("no expression for case {}", source.case_id)))?
            .iter()
            .map(|&v| v as f32)
            .collect(),
        None => Vec::new(),
    };
    let meta = SlideMeta {
        slide_id: source.slide_id.clone(),
        case_id: source.case_id.clone(),
        label: source.label,
        gene_target,
    };
    let (_, sampled) = bag_slide(&tiles, &table, &config.bagging, &meta)?;
    let dir = out.join("bags").join(&source.slide_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::with_capacity(sampled.bags.len());
    for (b, bag) in sampled.bags.iter().enumerate() {
        let rel = format!("bags/{}/{b:03}.trnb", source.slide_id);
        write_bag(&out.join(&rel), bag)?;
        files.push(rel);
    }
    Ok((
        SlideEntry {
            slide_id: source.slide_id.clone(),
            case_id: source.case_id.clone(),
            label: source.label,
            split: Split::Unassigned,
            bags: files,
        },
        table.dim(),
        meta.gene_target.len(),
    ))
}

fn cmd_bag(config: &RunConfig, args: &BagArgs) -> Result<()> {
    let out = required(&config.paths.out, "out")?;
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let input: BagInput = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: {e}", args.input.display())))?;
    let base = args.input.parent().map(Path::to_path_buf).unwrap_or_default();
    let genes = match &args.genes {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(ingest_matrix(&text)?)
        }
        None => None,
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let results: Vec<Result<(SlideEntry, usize, usize)>> = input
        .slides
        .par_iter()
        .map(|s| bag_one(s, &base, genes.as_ref(), config, &out))
        .collect();
    let mut slides = Vec::new();
    let mut failures = Vec::new();
    let mut dims = None;
    for (source, r) in input.slides.iter().zip(results) {
        match r {
            Ok((entry, d, g)) => {
                if *dims.get_or_insert((d, g)) != (d, g) {
                    failures.push(SlideFailure {
                        slide_id: source.slide_id.clone(),
                        error: format!("embedding width {d} / {g} genes differ from earlier slides"),
                    });
                    continue;
                }
                slides.push(entry);
            }
            Err(e) => {
                error!("slide {}: {e}", source.slide_id);
                failures.push(SlideFailure {
                    slide_id: source.slide_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let (d, gene_count) = dims.unwrap_or((0, 0));
    let gene_index = match &genes {
        Some(g) if gene_count > 0 => {
            write_json(&out.join(GENE_INDEX_FILE), &g.gene_ids)?;
            Some(GENE_INDEX_FILE.to_string())
        }
        _ => None,
    };
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        k: config.bagging.k,
        d,
        gene_count,
        classes: input.classes,
        gene_index,
        slides,
    };
    manifest.check()?;
    manifest.save(&out.join(MANIFEST_FILE))?;
    write_json(&out.join(BAG_FAILURES_FILE), &failures)?;
    config.echo(&out)?;
    if !failures.is_empty() {
        bail!(Data, "{} of {} slides failed; see {BAG_FAILURES_FILE}", failures.len(), input.slides.len());
    }
    Ok(())
}

fn read_case_files(paths: &[PathBuf]) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file())
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let case = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Input(format!("{}: no file name", f.display())))?;
            let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
            Ok((case, text))
        })
        .collect()
}

fn cmd_genes(config: &RunConfig, args: &GenesArgs) -> Result<()> {
    let out = required(&config.paths.out, "out")?;
    let table = match &args.matrix {
        Some(m) => ingest_matrix(&fs::read_to_string(m).map_err(|e| Error::io(m, e))?)?,
        None => ingest_case_files(&read_case_files(&args.cases)?)?,
    };
    let filtered = filter_median_zero(&table)?;
    let transformed = log_transform(&filtered)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let matrix = out.join(GENE_MATRIX_FILE);
    fs::write(&matrix, transformed.to_matrix_tsv()).map_err(|e| Error::io(&matrix, e))?;
    write_json(&out.join(GENE_INDEX_FILE), &transformed.gene_ids)?;
    config.echo(&out)?;
    info!(
        "{} genes over {} cases kept, {} dropped",
        transformed.n_genes(),
        transformed.n_cases(),
        table.n_genes() - transformed.n_genes()
    );
    Ok(())
}

fn cmd_split(config: &RunConfig) -> Result<()> {
    let data = required(&config.paths.data, "data")?;
    let (mut manifest, root) = load_dataset(&data)?;
    let mut cases: BTreeMap<String, u32> = BTreeMap::new();
    for s in &manifest.slides {
        if let Some(prev) = cases.insert(s.case_id.clone(), s.label) {
            if prev != s.label {
                bail!(Data, "case {} has slides labelled {prev} and {}", s.case_id, s.label);
            }
        }
    }
    let cases: Vec<(String, u32)> = cases.into_iter().collect();
    let spec = split_cases(&cases, config.split.fractions, config.split.seed)?;
    for s in &mut manifest.slides {
        s.split = spec.split_of(&s.case_id).unwrap_or_default();
    }
    manifest.check()?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    write_json(&root.join(SPLITS_FILE), &spec)?;
    config.echo(&root)?;
    Ok(())
}

/// Trains on the dataset's train split, selecting on its val split.
pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let data = required(&config.paths.data, "data")?;
    let out = required(&config.paths.out, "out")?;
    let (manifest, root) = load_dataset(&data)?;
    let train_set = load_split(&manifest, &root, Split::Train)?;
    let val_set = load_split(&manifest, &root, Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(Config, "dataset needs train and val slides; run `split` first");
    }
    let mut model_config = config.model.clone();
    model_config.k = manifest.k;
    model_config.d = manifest.d;
    model_config.genes = manifest.gene_count;
    model_config.classes = manifest.classes.len();
    model_config.n_set.retain(|&n| n <= manifest.k);
    if model_config.n_set.is_empty() {
        model_config.n_set = vec![manifest.k];
    }
    let model = Model::new(model_config, config.train.seed)?;
    config.echo(&out)?;
    let outcome = train(model, &train_set, &val_set, config.train.clone(), Some(&out), resume)?;
    info!("best checkpoint {}", out.join(BEST_CHECKPOINT).display());
    Ok(outcome)
}

fn load_eval_inputs(config: &RunConfig, split: Split) -> Result<(Model<f32>, Vec<crate::eval::SlideBags>, Vec<String>, PathBuf)> {
    let data = required(&config.paths.data, "data")?;
    let ckpt = required(&config.paths.checkpoint, "checkpoint")?;
    let out = required(&config.paths.out, "out")?;
    let (manifest, root) = load_dataset(&data)?;
    let model = Checkpoint::load(&ckpt)?.model()?;
    let shape = manifest.shape();
    let c = &model.config;
    if (c.k, c.d, c.genes, c.classes) != (shape.k, shape.d, shape.genes, shape.classes) {
        bail!(
            Data,
            "checkpoint expects k={} d={} genes={} classes={}, dataset has k={} d={} genes={} classes={}",
            c.k, c.d, c.genes, c.classes, shape.k, shape.d, shape.genes, shape.classes
        );
    }
    let bags = load_split(&manifest, &root, split)?;
    if bags.is_empty() {
        bail!(Data, "dataset has no {split} slides");
    }
    let gene_ids = load_gene_ids(&manifest, &root)?;
    Ok((model, group_by_slide(bags), gene_ids, out))
}

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let (model, slides, gene_ids, out) = load_eval_inputs(config, config.eval.split)?;
    let report = evaluate_slides(&model, &slides, &gene_ids, config.eval.alpha)?;
    write_eval_reports(&out, &report)?;
    config.echo(&out)?;
    info!(
        "accuracy {:.4}, mean Pearson r {:.4}, {} genes significant (HS)",
        report.classification.accuracy, report.genes.mean_pearson, report.genes.significant_hs
    );
    Ok(())
}

fn cmd_search(config: &RunConfig) -> Result<()> {
    let s = &config.search;
    let (model, slides, _, out) = load_eval_inputs(config, s.split)?;
    let report = search_slides(&model, &slides, s.subsets, &s.ks, s.ap_norm, s.seed)?;
    write_search_report(&out, &report)?;
    config.echo(&out)?;
    for (k, m) in report.ks.iter().zip(&report.map) {
        info!("MAP@{k} = {m:.4}");
    }
    Ok(())
}

/// Validates bag files and datasets, printing one line per failure.
fn cmd_validate(paths: &[PathBuf]) -> Result<()> {
    let mut failures = 0usize;
    let mut checked = 0usize;
    for p in paths {
        let is_manifest = p.is_dir() || p.extension().is_some_and(|e| e == "json");
        if is_manifest {
            let (manifest, root) = match load_dataset(p).and_then(|(m, r)| m.check().map(|_| (m, r))) {
                Ok(v) => v,
                Err(e) => {
                    println!("FAIL {}: {e}", p.display());
                    failures += 1;
                    continue;
                }
            };
            let shape = manifest.shape();
            for slide in &manifest.slides {
                for rel in &slide.bags {
                    checked += 1;
                    let r = read_bag(&root.join(rel)).and_then(|b| {
                        b.validate(Some(&shape))?;
                        if b.slide_id != slide.slide_id || b.label != slide.label {
                            bail!(Data, "bag identity does not match the manifest");
                        }
                        Ok(())
                    });
                    if let Err(e) = r {
                        println!("FAIL {}: {e}", root.join(rel).display());
                        failures += 1;
                    }
                }
            }
        } else {
            checked += 1;
            if let Err(e) = read_bag(p).and_then(|b| b.validate(None)) {
                println!("FAIL {}: {e}", p.display());
                failures += 1;
            }
        }
    }
    println!("{checked} bags checked, {failures} failures");
    if failures > 0 {
        bail!(Data, "{failures} validation failures");
    }
    Ok(())
}
