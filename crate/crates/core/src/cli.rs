//! Command-line pipeline: dataset generation, training, attribution,
//! evaluation and report printing.
//!
//! Exit codes: 0 success, 1 input/validation problem, 2 runtime failure.
//! Diagnostics go to stderr; results go to files or stdout. Every mutating
//! subcommand drops a `run-manifest.json` with its arguments and the sha256
//! of each artifact it wrote.

use crate::attribution::{
    guided_bp_attribute, occlusion_attribute_words, MapSource, OcclusionConfig, SeedTarget,
    WordImportance, WordNorm,
};
use crate::checkpoint;
use crate::data::{generate_dataset, read_dataset, write_dataset, Dataset};
use crate::error::Error;
use crate::evaluation::{
    compute_image_map, evaluate_image_maps, flip_predict, flip_signal, pos_histogram, EvalConfig,
    EvalReport, FlipConfig, FlipOutcome, MapEvalStats,
};
use crate::export;
use crate::model::VqaModel;
use crate::train::{dataset_mean_rgb, TrainConfig};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "vqa-interp", version, about = "Train a toy VQA classifier and explain its answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Guided,
    Occlusion,
    Random,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WordNormArg {
    L2,
    Linf,
}

impl From<WordNormArg> for WordNorm {
    fn from(v: WordNormArg) -> Self {
        match v {
            WordNormArg::L2 => WordNorm::L2,
            WordNormArg::Linf => WordNorm::LInf,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SeedTargetArg {
    Prob,
    Logit,
}

impl From<SeedTargetArg> for SeedTarget {
    fn from(v: SeedTargetArg) -> Self {
        match v {
            SeedTargetArg::Prob => SeedTarget::Probability,
            SeedTargetArg::Logit => SeedTarget::Logit,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes-and-colors dataset.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f32,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Held-out dataset for per-epoch accuracy; without it the last 10%
        /// of --data is held out and not trained on.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Write per-example importance maps, heatmaps and word scores.
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
        /// Occlusion patch override as R,G,B in [0,1]; defaults to the
        /// training mean stored in the checkpoint.
        #[arg(long)]
        patch: Option<String>,
        #[arg(long, value_enum, default_value_t = WordNormArg::L2)]
        word_norm: WordNormArg,
        #[arg(long, value_enum, default_value_t = SeedTargetArg::Prob)]
        seed_target: SeedTargetArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Only attribute the first N examples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the full quantitative evaluation and write report artifacts.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of guided,occlusion,random - or "all".
        #[arg(long, default_value = "all")]
        methods: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch: Option<String>,
        #[arg(long, value_enum, default_value_t = WordNormArg::L2)]
        word_norm: WordNormArg,
        #[arg(long, value_enum, default_value_t = SeedTargetArg::Prob)]
        seed_target: SeedTargetArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Cap the number of examples used for the flip-signal predictor.
        #[arg(long)]
        flip_limit: Option<usize>,
    },
    /// Print a human-readable summary of an evaluation output directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn validation(msg: impl Into<String>) -> Self {
        Failure::Validation(msg.into())
    }
}

/// Input problems (missing/unreadable/ill-formed files) count as validation
/// failures; errors appearing mid-computation are runtime failures.
fn input_error(context: &str, e: Error) -> Failure {
    Failure::Validation(format!("{context}: {e}"))
}

fn runtime_error(context: &str, e: Error) -> Failure {
    Failure::Runtime(format!("{context}: {e}"))
}

type CmdResult = Result<(), Failure>;

/// Parse and execute; returns a process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::GenData { count, seed, out } => gen_data(count, seed, &out),
        Command::Train {
            data,
            out,
            epochs,
            lr,
            batch,
            seed,
            val,
        } => cmd_train(&data, &out, epochs, lr, batch, seed, val.as_deref()),
        Command::Attribute {
            ckpt,
            data,
            method,
            out,
            patch,
            word_norm,
            seed_target,
            seed,
            limit,
        } => cmd_attribute(
            &ckpt,
            &data,
            method,
            &out,
            patch.as_deref(),
            word_norm.into(),
            seed_target.into(),
            seed,
            limit,
        ),
        Command::Evaluate {
            ckpt,
            data,
            methods,
            out,
            patch,
            word_norm,
            seed_target,
            seed,
            flip_limit,
        } => cmd_evaluate(
            &ckpt,
            &data,
            &methods,
            &out,
            patch.as_deref(),
            word_norm.into(),
            seed_target.into(),
            seed,
            flip_limit,
        ),
        Command::Report { input } => cmd_report(&input),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

// ── run manifests ────────────────────────────────────────────────────

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RunManifest {
    command: String,
    args: BTreeMap<String, String>,
    artifacts: BTreeMap<String, String>,
}

/// Record the run's configuration and artifact checksums next to its
/// outputs.
fn write_manifest(
    dir: &Path,
    command: &str,
    args: BTreeMap<String, String>,
    artifacts: &[PathBuf],
) -> CmdResult {
    let mut sums = BTreeMap::new();
    for artifact in artifacts {
        let digest = sha256_file(artifact)
            .map_err(|e| Failure::Runtime(format!("checksum {}: {e}", artifact.display())))?;
        let name = artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| artifact.display().to_string());
        sums.insert(name, digest);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        args,
        artifacts: sums,
    };
    let path = dir.join("run-manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Failure::Runtime(format!("manifest: {e}")))?;
    std::fs::write(&path, body + "\n")
        .map_err(|e| Failure::Runtime(format!("write {}: {e}", path.display())))?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

// ── subcommands ──────────────────────────────────────────────────────

fn gen_data(count: usize, seed: u64, out: &Path) -> CmdResult {
    if count == 0 {
        return Err(Failure::validation("--count must be positive"));
    }
    let ds = generate_dataset(count, seed).map_err(|e| runtime_error("generate", e))?;
    write_dataset(&ds, out).map_err(|e| runtime_error("write dataset", e))?;
    println!("wrote {} examples to {}", ds.examples.len(), out.display());
    let args = BTreeMap::from([
        ("count".into(), count.to_string()),
        ("seed".into(), seed.to_string()),
        ("out".into(), out.display().to_string()),
    ]);
    write_manifest(&parent_dir(out), "gen-data", args, &[out.to_path_buf()])
}

fn load_dataset_arg(path: &Path) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(Failure::Validation(format!("no such file: {}", path.display())));
    }
    read_dataset(path).map_err(|e| input_error(&format!("dataset {}", path.display()), e))
}

fn load_checkpoint_arg(path: &Path) -> Result<VqaModel, Failure> {
    if !path.exists() {
        return Err(Failure::Validation(format!("no such file: {}", path.display())));
    }
    checkpoint::load_model(path).map_err(|e| input_error(&format!("checkpoint {}", path.display()), e))
}

fn check_vocab(model: &VqaModel, ds: &Dataset) -> CmdResult {
    if model.vocab_size != ds.vocab.len() || model.answer_count != ds.answers.len() {
        return Err(Failure::Validation(format!(
            "checkpoint/dataset mismatch: model has vocab {} and {} answers, dataset has {} and {}",
            model.vocab_size,
            model.answer_count,
            ds.vocab.len(),
            ds.answers.len()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    out: &Path,
    epochs: usize,
    lr: f32,
    batch: usize,
    seed: u64,
    val: Option<&Path>,
) -> CmdResult {
    if epochs == 0 || lr <= 0.0 || batch == 0 {
        return Err(Failure::validation("epochs, lr and batch must be positive"));
    }
    let ds = load_dataset_arg(data)?;
    let val_ds = val.map(load_dataset_arg).transpose()?;

    let (train_slice, holdout_slice): (&[_], &[_]) = match &val_ds {
        Some(v) => (&ds.examples[..], &v.examples[..]),
        None => {
            let cut = ds.examples.len() - (ds.examples.len() / 10).max(1);
            if cut == 0 {
                return Err(Failure::validation("dataset too small to split a holdout"));
            }
            (&ds.examples[..cut], &ds.examples[cut..])
        }
    };

    let mut model = VqaModel::new(ds.vocab.len(), ds.answers.len(), seed)
        .map_err(|e| runtime_error("init model", e))?;
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: batch,
        momentum: 0.9,
        seed,
    };
    crate::train::train_with_progress(&mut model, train_slice, holdout_slice, &cfg, |e| {
        println!(
            "epoch {:>3}  loss {:.4}  holdout_acc {:.4}",
            e.epoch, e.train_loss, e.holdout_accuracy
        );
    })
    .map_err(|e| runtime_error("train", e))?;
    checkpoint::save_model(&model, out).map_err(|e| runtime_error("save checkpoint", e))?;
    println!("checkpoint written to {}", out.display());

    let mut args = BTreeMap::from([
        ("data".into(), data.display().to_string()),
        ("out".into(), out.display().to_string()),
        ("epochs".into(), epochs.to_string()),
        ("lr".into(), lr.to_string()),
        ("batch".into(), batch.to_string()),
        ("seed".into(), seed.to_string()),
    ]);
    if let Some(v) = val {
        args.insert("val".into(), v.display().to_string());
    }
    write_manifest(&parent_dir(out), "train", args, &[out.to_path_buf()])
}

fn parse_patch(s: &str) -> Result<[f32; 3], Failure> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Failure::validation(format!("--patch needs R,G,B; got '{s}'")));
    }
    let mut out = [0.0f32; 3];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse::<f32>()
            .map_err(|e| Failure::Validation(format!("--patch component '{part}': {e}")))?;
        if !(0.0..=1.0).contains(slot) {
            return Err(Failure::validation(format!("--patch component {slot} outside [0, 1]")));
        }
    }
    Ok(out)
}

/// Occlusion patch: explicit override, then the checkpoint's training mean,
/// then the dataset mean as a last resort.
fn resolve_patch(override_arg: Option<&str>, model: &VqaModel, ds: &Dataset) -> Result<[f32; 3], Failure> {
    if let Some(s) = override_arg {
        return parse_patch(s);
    }
    if let Some(mean) = model.train_mean_rgb {
        return Ok(mean);
    }
    eprintln!("note: checkpoint carries no training mean; using this dataset's mean as the patch color");
    Ok(dataset_mean_rgb(&ds.examples))
}

fn methods_of(arg: MethodArg) -> Vec<MapSource> {
    match arg {
        MethodArg::Guided => vec![MapSource::GuidedBp],
        MethodArg::Occlusion => vec![MapSource::Occlusion],
        MethodArg::Random => vec![MapSource::Random],
        MethodArg::All => vec![MapSource::GuidedBp, MapSource::Occlusion, MapSource::Random],
    }
}

fn parse_methods_list(s: &str) -> Result<Vec<MapSource>, Failure> {
    if s.trim() == "all" {
        return Ok(vec![MapSource::GuidedBp, MapSource::Occlusion, MapSource::Random]);
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let m = match part.trim() {
            "guided" => MapSource::GuidedBp,
            "occlusion" => MapSource::Occlusion,
            "random" => MapSource::Random,
            other => {
                return Err(Failure::validation(format!(
                    "unknown method '{other}' (expected guided, occlusion, random or all)"
                )))
            }
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Failure::validation("--methods selected nothing"));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_attribute(
    ckpt: &Path,
    data: &Path,
    method: MethodArg,
    out_dir: &Path,
    patch: Option<&str>,
    word_norm: WordNorm,
    seed_target: SeedTarget,
    seed: u64,
    limit: Option<usize>,
) -> CmdResult {
    let model = load_checkpoint_arg(ckpt)?;
    let ds = load_dataset_arg(data)?;
    check_vocab(&model, &ds)?;
    let patch_value = resolve_patch(patch, &model, &ds)?;
    let occlusion = OcclusionConfig::with_patch(patch_value)
        .map_err(|e| input_error("occlusion config", e))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Runtime(format!("create {}: {e}", out_dir.display())))?;

    let mut cfg = EvalConfig::new(occlusion);
    cfg.word_norm = word_norm;
    cfg.seed_target = seed_target;
    cfg.random_seed = seed;

    let n = limit.unwrap_or(ds.examples.len()).min(ds.examples.len());
    let mut artifacts = Vec::new();
    for (idx, ex) in ds.examples[..n].iter().enumerate() {
        for m in methods_of(method) {
            let map = compute_image_map(m, &model, ex, idx, &cfg)
                .map_err(|e| runtime_error("attribute", e))?;
            let stem = format!("{}.{}", ex.id, m.label());
            let json_path = out_dir.join(format!("{stem}.json"));
            let body = serde_json::to_string(&map)
                .map_err(|e| Failure::Runtime(format!("serialize map: {e}")))?;
            std::fs::write(&json_path, body + "\n")
                .map_err(|e| Failure::Runtime(format!("write {}: {e}", json_path.display())))?;
            artifacts.push(json_path);

            let pgm_path = out_dir.join(format!("{stem}.pgm"));
            export::write_pgm(&map, &pgm_path).map_err(|e| runtime_error("write pgm", e))?;
            artifacts.push(pgm_path);

            let words: Option<WordImportance> = match m {
                MapSource::GuidedBp => Some(
                    guided_bp_attribute(&model, &ex.image, &ex.question, word_norm, seed_target)
                        .map_err(|e| runtime_error("attribute words", e))?
                        .1,
                ),
                MapSource::Occlusion => Some(
                    occlusion_attribute_words(&model, &ex.image, &ex.question)
                        .map_err(|e| runtime_error("attribute words", e))?,
                ),
                _ => None,
            };
            if let Some(words) = words {
                let words_path = out_dir.join(format!("{stem}.words.json"));
                let body = serde_json::to_string(&words)
                    .map_err(|e| Failure::Runtime(format!("serialize words: {e}")))?;
                std::fs::write(&words_path, body + "\n")
                    .map_err(|e| Failure::Runtime(format!("write {}: {e}", words_path.display())))?;
                artifacts.push(words_path);
            }
        }
    }
    println!("attributed {n} examples into {}", out_dir.display());

    let mut args = BTreeMap::from([
        ("ckpt".into(), ckpt.display().to_string()),
        ("data".into(), data.display().to_string()),
        ("method".into(), format!("{method:?}").to_lowercase()),
        ("out".into(), out_dir.display().to_string()),
        ("word_norm".into(), format!("{word_norm:?}").to_lowercase()),
        ("seed_target".into(), format!("{seed_target:?}").to_lowercase()),
        ("seed".into(), seed.to_string()),
        ("patch".into(), format!("{patch_value:?}")),
    ]);
    if let Some(l) = limit {
        args.insert("limit".into(), l.to_string());
    }
    write_manifest(out_dir, "attribute", args, &artifacts)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    ckpt: &Path,
    data: &Path,
    methods: &str,
    out_dir: &Path,
    patch: Option<&str>,
    word_norm: WordNorm,
    seed_target: SeedTarget,
    seed: u64,
    flip_limit: Option<usize>,
) -> CmdResult {
    let model = load_checkpoint_arg(ckpt)?;
    let ds = load_dataset_arg(data)?;
    check_vocab(&model, &ds)?;
    if ds.examples.is_empty() {
        return Err(Failure::validation("dataset holds no examples"));
    }
    let method_list = parse_methods_list(methods)?;
    let patch_value = resolve_patch(patch, &model, &ds)?;
    let occlusion = OcclusionConfig::with_patch(patch_value)
        .map_err(|e| input_error("occlusion config", e))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::Runtime(format!("create {}: {e}", out_dir.display())))?;

    let mut cfg = EvalConfig::new(occlusion.clone());
    cfg.word_norm = word_norm;
    cfg.seed_target = seed_target;
    cfg.random_seed = seed;

    let mut stats: Vec<MapEvalStats> = Vec::new();
    for &m in &method_list {
        let s = evaluate_image_maps(m, &model, &ds.examples, &cfg)
            .map_err(|e| runtime_error("evaluate maps", e))?;
        println!(
            "{:<10} mean {:+.4}  se {:.4}  n {}  degenerate {}",
            s.method, s.mean, s.se, s.n, s.degenerate_count
        );
        stats.push(s);
    }

    // POS histogram from word importances; occlusion words when selected,
    // guided otherwise.
    let pos_method = if method_list.contains(&MapSource::Occlusion) {
        MapSource::Occlusion
    } else {
        MapSource::GuidedBp
    };
    let word_scores: Vec<Vec<f32>> = ds
        .examples
        .iter()
        .map(|ex| -> Result<Vec<f32>, Failure> {
            let words = match pos_method {
                MapSource::Occlusion => occlusion_attribute_words(&model, &ex.image, &ex.question)
                    .map_err(|e| runtime_error("word occlusion", e))?,
                _ => {
                    guided_bp_attribute(&model, &ex.image, &ex.question, word_norm, seed_target)
                        .map_err(|e| runtime_error("word gradients", e))?
                        .1
                }
            };
            Ok(words.scores)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bins = pos_histogram(
        word_scores
            .iter()
            .zip(ds.examples.iter())
            .map(|(s, ex)| (&s[..], &ex.pos_tags[..])),
    )
    .map_err(|e| runtime_error("pos histogram", e))?;

    // Flip-signal failure predictor over a train/eval split of the set.
    let flip_n = flip_limit.unwrap_or(ds.examples.len()).min(ds.examples.len());
    let flip = if flip_n >= 4 {
        let flip_cfg = FlipConfig::full(occlusion);
        let outcomes: Vec<FlipOutcome> = ds.examples[..flip_n]
            .iter()
            .map(|ex| -> Result<FlipOutcome, Failure> {
                Ok(flip_signal(&model, ex, &flip_cfg)
                    .map_err(|e| runtime_error("flip signal", e))?
                    .into())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (train_half, eval_half) = outcomes.split_at(flip_n / 2);
        Some(flip_predict(train_half, eval_half).map_err(|e| runtime_error("flip predict", e))?)
    } else {
        eprintln!("note: fewer than 4 examples; skipping the flip predictor");
        None
    };

    let report = EvalReport {
        n_examples: ds.examples.len(),
        correlations: stats,
        pos_method: pos_method.label().to_string(),
        pos_histogram: bins,
        flip,
    };

    let mut artifacts = Vec::new();
    let write = |name: &str, body: String, artifacts: &mut Vec<PathBuf>| -> CmdResult {
        let path = out_dir.join(name);
        std::fs::write(&path, body)
            .map_err(|e| Failure::Runtime(format!("write {}: {e}", path.display())))?;
        artifacts.push(path);
        Ok(())
    };
    write(
        "correlation.csv",
        export::correlation_csv(&report.correlations),
        &mut artifacts,
    )?;
    write(
        "pos_histogram.csv",
        export::pos_histogram_csv(&report.pos_histogram),
        &mut artifacts,
    )?;
    write(
        "pos_histogram.svg",
        export::pos_histogram_svg(&report.pos_histogram),
        &mut artifacts,
    )?;
    if let Some(flip) = &report.flip {
        let body = serde_json::to_string_pretty(flip)
            .map_err(|e| Failure::Runtime(format!("serialize flip report: {e}")))? + "\n";
        write("flip_predictor.json", body, &mut artifacts)?;
    }
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::Runtime(format!("serialize report: {e}")))? + "\n";
    write("eval_report.json", body, &mut artifacts)?;

    let mut args = BTreeMap::from([
        ("ckpt".into(), ckpt.display().to_string()),
        ("data".into(), data.display().to_string()),
        ("methods".into(), methods.to_string()),
        ("out".into(), out_dir.display().to_string()),
        ("word_norm".into(), format!("{word_norm:?}").to_lowercase()),
        ("seed_target".into(), format!("{seed_target:?}").to_lowercase()),
        ("seed".into(), seed.to_string()),
        ("patch".into(), format!("{patch_value:?}")),
    ]);
    if let Some(l) = flip_limit {
        args.insert("flip_limit".into(), l.to_string());
    }
    write_manifest(out_dir, "evaluate", args, &artifacts)
}

fn cmd_report(input: &Path) -> CmdResult {
    let path = input.join("eval_report.json");
    if !path.exists() {
        return Err(Failure::Validation(format!("no eval_report.json in {}", input.display())));
    }
    let body = std::fs::read_to_string(&path)
        .map_err(|e| Failure::Runtime(format!("read {}: {e}", path.display())))?;
    let report: EvalReport = serde_json::from_str(&body)
        .map_err(|e| Failure::Validation(format!("parse {}: {e}", path.display())))?;

    println!("Evaluation over {} examples", report.n_examples);
    println!();
    println!("Rank correlation against reference masks (14x14, |.|, unit mass)");
    println!("{:<12} {:>8} {:>8} {:>6} {:>11}", "method", "mean", "se", "n", "degenerate");
    for s in &report.correlations {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>6} {:>11}",
            s.method, s.mean, s.se, s.n, s.degenerate_count
        );
    }
    println!();
    println!("Most-important-word probability by POS tag ({})", report.pos_method);
    println!("{:<12} {:>12} {:>8}", "tag", "probability", "count");
    for b in &report.pos_histogram {
        println!("{:<12} {:>12.4} {:>8}", format!("{:?}", b.tag), b.probability, b.count);
    }
    if let Some(flip) = &report.flip {
        println!();
        match flip.threshold {
            Some(th) => println!(
                "Flip predictor: eval accuracy {:.4} (baseline {:.4}, threshold {:.4}, train n={}, eval n={})",
                flip.eval_accuracy, flip.baseline_accuracy, th, flip.n_train, flip.n_eval
            ),
            None => println!(
                "Flip predictor degenerate (one-class training split): majority accuracy {:.4}",
                flip.eval_accuracy
            ),
        }
    }
    Ok(())
}
