use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskcap::checkpoint::Checkpoint;
use maskcap::data::synth::{synth_generate, SynthConfig, SynthOntology};
use maskcap::data::{load_dataset, load_lexicon, resolve_split, Dataset, Vocabulary};
use maskcap::decode::{generate_batch, load_captions, save_captions, DecodeOptions};
use maskcap::embed::load_embeddings;
use maskcap::maskgen::{build_dataset_masks, MaskTable, MatchStores, NounExtractor};
use maskcap::metrics::{evaluate, ngram_curve_csv, positional_ngrams, Caption, Corpus};
use maskcap::model::{GateSource, Model, ModelConfig, ModelKind};
use maskcap::train::{prepare, TrainConfig, Trainer};
use maskcap::{Error, Result};
use serde::Serialize;

#[derive(Parser, Serialize)]
#[command(name = "maskcap", version, about = "Entity-masked attention captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic scene dataset with lexicon and embeddings.
    Synth(SynthArgs),
    /// Build ground-truth entity masks from caption nouns.
    BuildMasks(BuildMasksArgs),
    /// Train a captioning model.
    Train(TrainArgs),
    /// Caption every sample of a split with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score generated captions against references.
    Eval(EvalArgs),
    /// Distinct n-grams per word position of generated captions.
    NgramCurve(NgramArgs),
    /// Serve the inference API and an optional static UI bundle.
    Serve(ServeArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    val_samples: usize,
    /// Entity slots per scene.
    #[arg(long, default_value_t = 4)]
    entities: usize,
    /// Entity and global feature dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Dimension of the noun and label vectors used for mask matching.
    #[arg(long, default_value_t = 16)]
    word_dim: usize,
    #[arg(long, default_value_t = 0.02)]
    feature_noise: f64,
    /// Noise of noun vectors around their entity-label vectors.
    #[arg(long, default_value_t = 0.05)]
    word_noise: f64,
    #[arg(long, env = "MASKCAP_SEED", default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildMasksArgs {
    /// Dataset split file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    words: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    /// Noun lexicon, one noun per line.
    #[arg(long, required_unless_present = "tags")]
    nouns: Option<PathBuf>,
    /// Pre-tagged captions (`token/TAG` per token) instead of a lexicon.
    #[arg(long, conflicts_with = "nouns")]
    tags: Option<PathBuf>,
    /// Mask table to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write a copy of the dataset carrying the built masks.
    #[arg(long)]
    write_dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Gating {
    Predicted,
    GroundTruth,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: ModelKind,
    /// Directory holding `train` and `val` splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Mask table for the training split, replacing masks stored in the dataset.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    val_masks: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 10.0)]
    plateau_factor: f64,
    #[arg(long, default_value_t = 3)]
    plateau_patience: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_mask: f64,
    /// Mask that gates attention during training (interpret kind).
    #[arg(long, value_enum, default_value_t = Gating::Predicted)]
    mask_gating: Gating,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Decoder hidden size; defaults to the entity dimension.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 32)]
    word_dim: usize,
    #[arg(long, default_value_t = 32)]
    attn_dim: usize,
    #[arg(long, default_value_t = 16)]
    mask_hidden: usize,
    #[arg(long, env = "MASKCAP_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct CaptionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "data/val")]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// JSON object mapping sample ids to mask vectors.
    #[arg(long)]
    overrides: Option<PathBuf>,
    #[arg(long, default_value = "captions.tsv")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Caption file.
    #[arg(long)]
    gen: PathBuf,
    /// Split whose captions are the references.
    #[arg(long)]
    refs: PathBuf,
    /// Split whose captions count as seen for novelty.
    #[arg(long)]
    train_caps: Option<PathBuf>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct NgramArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = maskcap::serve::DEFAULT_PORT)]
    port: u16,
    /// Directory with the UI bundle.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a Command,
    argv: Vec<String>,
    version: &'static str,
    outputs: Vec<String>,
}

fn write_manifest(dir: &Path, name: &str, command: &Command, outputs: &[&Path]) -> Result<()> {
    let m = Manifest {
        command,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))
}

/// Manifest next to a file output: `<file>.manifest.json`.
fn manifest_for_file(out: &Path, command: &Command) -> Result<()> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = format!("{}.manifest.json", out.file_name().unwrap_or_default().to_string_lossy());
    write_manifest(dir, &name, command, &[out])
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn resolve_ckpt(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    path.with_extension("ckpt")
}

fn synth(a: &SynthArgs, cmd: &Command) -> Result<()> {
    let ontology = SynthOntology::standard(a.seed, a.dim, a.word_dim)?;
    let base = SynthConfig {
        samples: a.samples,
        slots: a.entities,
        seed: a.seed,
        feature_noise: a.feature_noise,
        word_noise: a.word_noise,
        ..Default::default()
    };
    let train = synth_generate(&ontology, &base)?;
    let val = synth_generate(
        &ontology,
        &SynthConfig {
            samples: a.val_samples,
            seed: a.seed.wrapping_add(1),
            first_id: a.samples as u64,
            ..base
        },
    )?;
    create_dir(&a.out)?;
    let paths = [
        a.out.join("train.jsonl"),
        a.out.join("val.jsonl"),
        a.out.join("nouns.txt"),
        a.out.join("word_vectors.txt"),
        a.out.join("entity_vectors.txt"),
    ];
    train.dataset.save(&paths[0])?;
    val.dataset.save(&paths[1])?;
    write_text(&paths[2], &(train.lexicon.join("\n") + "\n"))?;
    train.word_vectors.save(&paths[3])?;
    train.entity_vectors.save(&paths[4])?;
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    write_manifest(&a.out, "manifest.json", cmd, &refs)?;
    println!("wrote {} train and {} val samples to {}", a.samples, a.val_samples, a.out.display());
    Ok(())
}

fn build_masks(a: &BuildMasksArgs, cmd: &Command) -> Result<()> {
    let mut dataset = load_dataset(&resolve_split(&a.data))?;
    let words = load_embeddings(&a.words)?;
    let entities = load_embeddings(&a.entities)?;
    let extractor = match (&a.nouns, &a.tags) {
        (_, Some(tags)) => NounExtractor::load_tags(tags)?,
        (Some(nouns), None) => NounExtractor::lexicon(load_lexicon(nouns)?),
        (None, None) => unreachable!("clap requires one of --nouns and --tags"),
    };
    let (table, report) = build_dataset_masks(&dataset, MatchStores::new(&words, &entities), &extractor)?;
    let agreement = gold_agreement(&dataset, &table);
    table.save(&a.out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(path) = &a.write_dataset {
        table.apply_to(&mut dataset)?;
        dataset.save(path)?;
        outputs.push(path);
    }
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = format!("{}.manifest.json", a.out.file_name().unwrap_or_default().to_string_lossy());
    write_manifest(dir, &name, cmd, &outputs)?;
    let mut summary = serde_json::to_value(&report).expect("report serializes");
    if let Some(g) = agreement {
        summary["gold_agreement"] = g.into();
    }
    println!("{summary}");
    Ok(())
}

/// Fraction of captions whose built mask equals the one stored in the dataset.
fn gold_agreement(dataset: &Dataset, table: &MaskTable) -> Option<f64> {
    let mut total = 0usize;
    let mut equal = 0usize;
    for s in &dataset.samples {
        for c in 0..s.captions.len() {
            let gold = s.mask(c)?;
            total += 1;
            equal += usize::from(table.get(s.id, c).is_some_and(|m| m.bits == gold));
        }
    }
    (total > 0).then(|| equal as f64 / total as f64)
}

fn load_split_with_masks(dir: &Path, split: &str, masks: Option<&Path>) -> Result<Dataset> {
    let mut d = load_dataset(&resolve_split(&dir.join(split)))?;
    if let Some(m) = masks {
        MaskTable::load(m)?.apply_to(&mut d)?;
    }
    Ok(d)
}

fn train(a: &TrainArgs, cmd: &Command) -> Result<()> {
    let train_set = load_split_with_masks(&a.data, "train", a.masks.as_deref())?;
    let val_path = resolve_split(&a.data.join("val"));
    let val_set = if val_path.exists() {
        load_split_with_masks(&a.data, "val", a.val_masks.as_deref())?
    } else {
        Dataset::new(vec![])?
    };
    let (v, d, slots) = train_set
        .dims()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    if let Some((vv, vd, _)) = val_set.dims() {
        if (vv, vd) != (v, d) {
            return Err(Error::Config(format!("val split has V={vv}, D={vd}; train has V={v}, D={d}")));
        }
    }
    let slots = slots.max(val_set.dims().map_or(0, |x| x.2));
    let vocab = Vocabulary::build(train_set.captions(), a.min_count);
    let hidden = a.hidden.unwrap_or(d);
    let config = ModelConfig {
        word_dim: a.word_dim,
        attn_dim: a.attn_dim,
        mask_hidden: a.mask_hidden,
        hidden1: hidden,
        hidden2: hidden,
        project_attended: hidden != d,
        ..ModelConfig::desk(v, d, slots, vocab.len())
    };
    let tc = TrainConfig {
        lr0: a.lr,
        batch: a.batch,
        epochs: a.epochs,
        clip_max_norm: a.clip,
        plateau_factor: a.plateau_factor,
        plateau_patience: a.plateau_patience,
        seed: a.seed,
        lambda_mask: a.lambda_mask,
        mask_gating: match a.mask_gating {
            Gating::Predicted => GateSource::Predicted,
            Gating::GroundTruth => GateSource::GroundTruth,
        },
        ..Default::default()
    };
    let train_data = prepare(&train_set, &vocab)?;
    let val_data = prepare(&val_set, &vocab)?;
    create_dir(&a.out)?;
    let log_path = a.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| io(&log_path, e))?;
    let mut trainer = Trainer::new(Model::new(config, a.seed)?, a.kind, tc)?;
    let history = trainer.fit(&train_data, &val_data, Some(&mut log))?;
    let best = a.out.join("best.ckpt");
    let last = a.out.join("last.ckpt");
    Checkpoint::new(a.kind, trainer.best_model(), vocab.clone(), a.seed)?.save(&best)?;
    Checkpoint::new(a.kind, trainer.model.clone(), vocab, a.seed)?.save(&last)?;
    write_manifest(&a.out, "manifest.json", cmd, &[&best, &last, &log_path])?;
    if let Some(e) = history.last() {
        println!(
            "epoch {} train_nll {:.4} val_nll {:.4} accuracy {:.4}; best checkpoint {}",
            e.epoch,
            e.train_nll,
            e.val_nll,
            e.train_accuracy,
            best.display()
        );
    }
    Ok(())
}

fn caption(a: &CaptionArgs, cmd: &Command) -> Result<()> {
    let ckpt = Checkpoint::load(&resolve_ckpt(&a.ckpt))?;
    let data = load_dataset(&resolve_split(&a.data))?;
    let overrides: BTreeMap<u64, Vec<f64>> = match &a.overrides {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
            let raw: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            raw.into_iter()
                .map(|(k, v)| {
                    k.parse()
                        .map(|id| (id, v))
                        .map_err(|_| Error::Config(format!("override key `{k}` is not a sample id")))
                })
                .collect::<Result<_>>()?
        }
        None => BTreeMap::new(),
    };
    let opts = DecodeOptions { beam: a.beam, max_len: a.max_len };
    let records = generate_batch(&ckpt.model, &ckpt.vocab, ckpt.kind, &data.samples, &overrides, &opts)?;
    save_captions(&a.out, &records)?;
    manifest_for_file(&a.out, cmd)?;
    println!("wrote {} captions to {}", records.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs, cmd: &Command) -> Result<()> {
    let generated = load_captions(&a.gen)?;
    let refs = load_dataset(&resolve_split(&a.refs))?;
    let mut candidates = Vec::with_capacity(generated.len());
    let mut references = Vec::with_capacity(generated.len());
    for r in &generated {
        let s = refs
            .get(r.sample_id)
            .ok_or_else(|| Error::Lookup(format!("sample {} is not in the reference split", r.sample_id)))?;
        candidates.push(r.tokens.clone());
        references.push(s.captions.clone());
    }
    let training: HashSet<Caption> = match &a.train_caps {
        Some(p) => load_dataset(&resolve_split(p))?.captions().cloned().collect(),
        None => HashSet::new(),
    };
    let report = evaluate(&Corpus::new(candidates, references)?, &training)?;
    match &a.out {
        Some(p) => {
            write_text(p, &report.to_csv())?;
            manifest_for_file(p, cmd)?;
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn ngram_curve(a: &NgramArgs, cmd: &Command) -> Result<()> {
    let captions: Vec<Caption> = load_captions(&a.gen)?.into_iter().map(|r| r.tokens).collect();
    let csv = ngram_curve_csv(&positional_ngrams(&captions, a.n)?);
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            manifest_for_file(p, cmd)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&resolve_ckpt(&a.ckpt))?;
    let data = load_dataset(&resolve_split(&a.data))?;
    let service = maskcap::serve::Service::new(ckpt, data)?;
    maskcap::serve::run(service, a.port, a.static_dir.clone())
}

fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    match cmd {
        Command::Synth(a) => synth(a, cmd),
        Command::BuildMasks(a) => build_masks(a, cmd),
        Command::Train(a) => train(a, cmd),
        Command::Caption(a) => caption(a, cmd),
        Command::Eval(a) => eval(a, cmd),
        Command::NgramCurve(a) => ngram_curve(a, cmd),
        Command::Serve(a) => serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={}", e.kind(), serde_json::Value::String(msg));
            ExitCode::from(1)
        }
    }
}
