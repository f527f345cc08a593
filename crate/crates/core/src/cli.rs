//! The `ralf` command line.
//!
//! ```text
//! ralf synth            --out data/
//! ralf pretrain-encoder --data data/ --out encoder.ckpt
//! ralf build-db         --data data/ --encoder encoder.ckpt --out train.db
//! ralf train            --data data/ --db train.db --out model.ckpt --retrieval saliency --k 16
//! ralf generate         --data data/ --model model.ckpt --db train.db --out gen/ --trials 3
//! ralf evaluate         --data data/ --generated gen/ --encoder encoder.ckpt --out report.json
//! ralf render           --data data/ --layouts gen/trial0.jsonl --out svg/
//! ```
//!
//! Any subcommand accepts `--config FILE`, a JSON object whose keys are flag
//! names; explicit flags override it. `RALF_SEED` sets the default seed.
//! Every command writes a `manifest.json` (or `<file>.manifest.json`) next
//! to its output. Failures print one `error[<kind>]: <message>` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_split, save_dataset, AnnotatedSample, CategorySchema, Layout, Split};
use crate::encoders::{patchify, pretrain_layout_encoder, LayoutEncoder, LayoutEncoderConfig, LayoutFeature, PretrainConfig};
use crate::generator::{
    generate_from, retrieve_for, train_with_progress, GeneratorConfig, RalfModel, RetrievalMode, SamplingConfig,
    TrainConfig, TrainingSet,
};
use crate::metrics::{evaluate_trial, Generated, MetricReport};
use crate::render::render_svg;
use crate::retrieval::{EmbeddingKind, RetrievalDatabase, DEFAULT_GRID};
use crate::synth::{generate_synthetic_dataset, SynthConfig};
use crate::tasks::{build_spec, ConstraintSpec, TaskKind};
use crate::tokenizer::{Vocabulary, DEFAULT_BINS};
use crate::{Error, Result};
use ralf_numerics::Checkpoint;

#[derive(Parser, Debug)]
#[command(name = "ralf", version, about = "Retrieval-augmented layout generation", args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, env = "RALF_SEED", default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic poster dataset.
    Synth(SynthArgs),
    /// Pretrain and freeze the layout encoder.
    PretrainEncoder(PretrainArgs),
    /// Build the retrieval database from the training split.
    BuildDb(BuildDbArgs),
    /// Train a generator.
    Train(TrainArgs),
    /// Generate layouts for a split.
    Generate(GenerateArgs),
    /// Score generated layouts.
    Evaluate(EvaluateArgs),
    /// Render layouts over their canvases as SVG.
    Render(RenderArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    #[arg(long, default_value_t = crate::data::DEFAULT_CANVAS_HEIGHT)]
    pub height: usize,
    #[arg(long, default_value_t = crate::data::DEFAULT_CANVAS_WIDTH)]
    pub width: usize,
    /// Category schema: `pku` or `cgl`.
    #[arg(long, default_value = "pku")]
    pub schema: String,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct BuildDbArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "saliency")]
    pub kind: String,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Retrieval database; required unless `--retrieval off`.
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = "saliency")]
    pub retrieval: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Comma-separated tasks sampled during training.
    #[arg(long, default_value = "unconstrained")]
    pub tasks: String,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value = "unconstrained")]
    pub task: String,
    /// JSONL of `{"id": ..., "spec": {...}}`; samples without an entry get
    /// a spec derived from their ground truth.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Neighborhood size for density and coverage.
    #[arg(long, default_value_t = 5)]
    pub nn_k: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Generated layouts (JSONL); ground truth is drawn when absent.
    #[arg(long)]
    pub layouts: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Record written next to every command's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub stamps: BTreeMap<String, String>,
    pub wall_seconds: f64,
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json`
/// otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One generated layout as stored by `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub id: String,
    pub trial: usize,
    pub layout: Layout,
}

#[derive(Deserialize)]
struct ConstraintRecord {
    id: String,
    spec: ConstraintSpec,
}

/// Schema stored with a dataset, PKU when the directory has none.
pub fn dataset_schema(dir: &Path) -> Result<CategorySchema> {
    let p = dir.join("schema.json");
    if p.exists() {
        let s: CategorySchema = serde_json::from_str(&fs::read_to_string(&p)?)?;
        s.check()?;
        Ok(s)
    } else {
        Ok(CategorySchema::pku())
    }
}

fn split_of(name: &str) -> Result<Split> {
    name.parse().map_err(|_| Error::Config(format!("unknown split {name:?}")))
}

fn load_samples(dir: &Path, split: &str, schema: &CategorySchema, limit: Option<usize>) -> Result<Vec<AnnotatedSample>> {
    let mut v = load_split(dir, split_of(split)?, schema)?;
    if let Some(n) = limit {
        v.truncate(n);
    }
    Ok(v)
}

fn parse_tasks(s: &str) -> Result<Vec<TaskKind>> {
    s.split(',').map(|t| t.trim().parse()).collect()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn load_encoder(path: &Path) -> Result<LayoutEncoder> {
    let enc = LayoutEncoder::from_checkpoint(&Checkpoint::load(path)?)?;
    if !enc.is_frozen() {
        return Err(Error::EncoderNotFrozen);
    }
    Ok(enc)
}

/// Outcome of a command: what it read, wrote and which stamps it saw.
struct Outcome {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    stamps: BTreeMap<String, String>,
    manifest: PathBuf,
}

fn synth(a: &SynthArgs, seed: u64) -> Result<Outcome> {
    let schema = match a.schema.as_str() {
        "pku" => CategorySchema::pku(),
        "cgl" => CategorySchema::cgl(),
        other => return Err(Error::Config(format!("unknown schema {other:?}"))),
    };
    let cfg = SynthConfig {
        train: a.train,
        val: a.val,
        test: a.test,
        height: a.height,
        width: a.width,
        seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg, &schema)?;
    save_dataset(&a.out, &ds)?;
    write_atomic(&a.out.join("schema.json"), serde_json::to_string_pretty(&schema)?.as_bytes())?;
    log::info!("wrote {}", ds.summary());
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![a.out.clone()],
        stamps: BTreeMap::new(),
        manifest: manifest_path(&a.out, true),
    })
}

fn pretrain(a: &PretrainArgs, seed: u64) -> Result<Outcome> {
    let schema = dataset_schema(&a.data)?;
    let train = load_split(&a.data, Split::Train, &schema)?;
    let vocab = Vocabulary::new(schema.num_categories(), DEFAULT_BINS);
    let cfg = match a.preset.as_str() {
        "toy" => LayoutEncoderConfig::toy(vocab),
        "full" => LayoutEncoderConfig::full(vocab),
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };
    let layouts: Vec<Layout> = train.iter().map(|s| s.layout.clone()).collect();
    let enc = pretrain_layout_encoder(
        &layouts,
        cfg,
        PretrainConfig {
            steps: a.steps,
            batch_size: a.batch_size,
            lr: a.lr,
            seed,
            ..PretrainConfig::default()
        },
    )?;
    enc.checkpoint().save(&a.out)?;
    let mut stamps = BTreeMap::new();
    stamps.insert("layout_encoder".into(), enc.stamp()?.to_string());
    Ok(Outcome {
        inputs: vec![a.data.clone()],
        outputs: vec![a.out.clone()],
        stamps,
        manifest: manifest_path(&a.out, false),
    })
}

fn build_db(a: &BuildDbArgs) -> Result<Outcome> {
    let schema = dataset_schema(&a.data)?;
    let train = load_split(&a.data, Split::Train, &schema)?;
    let enc = load_encoder(&a.encoder)?;
    let kind: EmbeddingKind = a.kind.parse()?;
    let db = RetrievalDatabase::build(&train, kind, &enc, a.grid)?;
    db.save(&a.out)?;
    let mut stamps = BTreeMap::new();
    stamps.insert("layout_encoder".into(), db.stamp.clone());
    Ok(Outcome {
        inputs: vec![a.data.clone(), a.encoder.clone()],
        outputs: vec![a.out.clone()],
        stamps,
        manifest: manifest_path(&a.out, false),
    })
}

fn train(a: &TrainArgs, seed: u64) -> Result<Outcome> {
    let schema = dataset_schema(&a.data)?;
    let retrieval: RetrievalMode = a.retrieval.parse()?;
    let db = match (retrieval, &a.db) {
        (RetrievalMode::Off, _) => None,
        (_, Some(p)) => Some(RetrievalDatabase::load(p)?),
        (_, None) => return Err(Error::Config(format!("--retrieval {} requires --db", a.retrieval))),
    };
    let samples = load_split(&a.data, Split::Train, &schema)?;
    let mut cfg = GeneratorConfig::preset(&a.preset, Vocabulary::new(schema.num_categories(), DEFAULT_BINS))?;
    cfg.retrieval = retrieval;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(db) = &db {
        cfg.feature_dim = db.feature_dim;
    }
    let mut model = RalfModel::new(cfg, schema, seed)?;
    model.encoder_stamp = db.as_ref().map(|d| d.stamp.clone());
    let set = TrainingSet::prepare(&model, &samples, db.as_ref())?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        seed,
        tasks: parse_tasks(&a.tasks)?,
        ..TrainConfig::default()
    };
    let report = train_with_progress(&mut model, &set, &tc, |step, loss| {
        if step % 50 == 0 {
            log::info!("step {step} loss {loss:.4}");
        }
    })?;
    let ck = model.checkpoint();
    ck.save(&a.out)?;
    write_atomic(
        &a.out.with_extension("losses.json"),
        serde_json::to_string(&report)?.as_bytes(),
    )?;
    let mut stamps = BTreeMap::new();
    stamps.insert("generator".into(), ck.stamp());
    if let Some(s) = &model.encoder_stamp {
        stamps.insert("layout_encoder".into(), s.clone());
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.db.clone());
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone()],
        stamps,
        manifest: manifest_path(&a.out, false),
    })
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<Outcome> {
    let schema = dataset_schema(&a.data)?;
    let model = RalfModel::from_checkpoint(&Checkpoint::load(&a.model)?)?;
    let db = a.db.as_ref().map(|p| RetrievalDatabase::load(p)).transpose()?;
    if let Some(db) = &db {
        model.check_database(db)?;
    }
    if model.config().uses_retrieval() && db.is_none() {
        return Err(Error::Config("this model uses retrieval; pass --db".into()));
    }
    if a.trials == 0 {
        return Err(Error::Config("--trials must be at least 1".into()));
    }
    let task: TaskKind = a.task.parse()?;
    let samples = load_samples(&a.data, &a.split, &schema, a.limit)?;
    let given: BTreeMap<String, ConstraintSpec> = match &a.constraints {
        Some(p) => read_jsonl::<ConstraintRecord>(p)?.into_iter().map(|r| (r.id, r.spec)).collect(),
        None => BTreeMap::new(),
    };
    let sampling = SamplingConfig {
        top_k: a.top_k,
        temperature: a.temperature,
        ..SamplingConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    // Specs are drawn once so every trial sees the same constraints.
    let mut spec_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bec);
    let specs = samples
        .iter()
        .map(|s| match given.get(&s.id) {
            Some(spec) if spec.kind != task => {
                Err(Error::Config(format!("constraint for {} is {}, expected {task}", s.id, spec.kind)))
            }
            Some(spec) => Ok(spec.clone()),
            None => build_spec(task, &s.layout, &mut spec_rng),
        })
        .collect::<Result<Vec<_>>>()?;
    let patches = samples
        .iter()
        .map(|s| patchify(&s.canvas, &s.saliency, &model.config().encoder))
        .collect::<Result<Vec<_>>>()?;
    for trial in 0..a.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut text = String::new();
        for ((s, spec), p) in samples.iter().zip(&specs).zip(&patches) {
            let retrieved = retrieve_for(&model, db.as_ref(), &s.saliency, None, &mut rng)?;
            let layout = generate_from(&model, p, retrieved.as_ref(), spec, &sampling, &mut rng)?;
            text += &serde_json::to_string(&GeneratedRecord {
                id: s.id.clone(),
                trial,
                layout,
            })?;
            text.push('\n');
        }
        let path = a.out.join(format!("trial{trial}.jsonl"));
        write_atomic(&path, text.as_bytes())?;
        outputs.push(path);
    }
    let mut stamps = BTreeMap::new();
    stamps.insert("generator".into(), Checkpoint::load(&a.model)?.stamp());
    if let Some(s) = &model.encoder_stamp {
        stamps.insert("layout_encoder".into(), s.clone());
    }
    let mut inputs = vec![a.data.clone(), a.model.clone()];
    inputs.extend(a.db.clone());
    inputs.extend(a.constraints.clone());
    Ok(Outcome {
        inputs,
        outputs,
        stamps,
        manifest: manifest_path(&a.out, true),
    })
}

/// Trial files `trial*.jsonl` of a generation directory, in trial order.
pub fn trial_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            let n = name.strip_prefix("trial")?.strip_suffix(".jsonl")?.parse().ok()?;
            Some((n, p))
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Config(format!("no trial*.jsonl files in {}", dir.display())));
    }
    Ok(v.into_iter().map(|(_, p)| p).collect())
}

fn evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let schema = dataset_schema(&a.data)?;
    let enc = load_encoder(&a.encoder)?;
    let samples = load_samples(&a.data, &a.split, &schema, None)?;
    let by_id: BTreeMap<&str, &AnnotatedSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let real: Vec<LayoutFeature> = samples.iter().map(|s| enc.encode_layout(&s.layout)).collect::<Result<_>>()?;
    let files = trial_files(&a.generated)?;
    let mut trials = Vec::new();
    for f in &files {
        let recs: Vec<GeneratedRecord> = read_jsonl(f)?;
        let mut items = Vec::with_capacity(recs.len());
        for r in &recs {
            let s = by_id
                .get(r.id.as_str())
                .ok_or_else(|| Error::Config(format!("{}: unknown sample id {}", f.display(), r.id)))?;
            items.push(Generated {
                layout: &r.layout,
                canvas: &s.canvas,
                saliency: &s.saliency,
            });
        }
        let feats: Vec<LayoutFeature> = recs.iter().map(|r| enc.encode_layout(&r.layout)).collect::<Result<_>>()?;
        trials.push(evaluate_trial(&items, &feats, &real, &schema, a.nn_k)?);
    }
    let report = MetricReport::from_trials(trials, real.len());
    println!("{report}");
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut stamps = BTreeMap::new();
    stamps.insert("layout_encoder".into(), enc.stamp()?.to_string());
    let mut inputs = vec![a.data.clone(), a.encoder.clone()];
    inputs.extend(files);
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone()],
        stamps,
        manifest: manifest_path(&a.out, false),
    })
}

fn render(a: &RenderArgs) -> Result<Outcome> {
    let schema = dataset_schema(&a.data)?;
    let samples = load_samples(&a.data, &a.split, &schema, None)?;
    let by_id: BTreeMap<&str, &AnnotatedSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let items: Vec<(String, &AnnotatedSample, Layout)> = match &a.layouts {
        Some(p) => read_jsonl::<GeneratedRecord>(p)?
            .into_iter()
            .map(|r| {
                let s = by_id
                    .get(r.id.as_str())
                    .ok_or_else(|| Error::Config(format!("unknown sample id {}", r.id)))?;
                Ok((format!("{}-trial{}", r.id, r.trial), *s, r.layout))
            })
            .collect::<Result<_>>()?,
        None => samples.iter().map(|s| (s.id.clone(), s, s.layout.clone())).collect(),
    };
    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for (name, s, layout) in items.into_iter().take(a.limit.unwrap_or(usize::MAX)) {
        let path = a.out.join(format!("{name}.svg"));
        write_atomic(&path, render_svg(&s.canvas, &layout, &schema).as_bytes())?;
        outputs.push(path);
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.layouts.clone());
    Ok(Outcome {
        inputs,
        outputs,
        stamps: BTreeMap::new(),
        manifest: manifest_path(&a.out, true),
    })
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::PretrainEncoder(_) => "pretrain-encoder",
            Command::BuildDb(_) => "build-db",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::Render(_) => "render",
        }
    }
}

/// Runs a parsed command and writes its manifest.
pub fn execute(cli: &Cli) -> Result<RunManifest> {
    let start = Instant::now();
    let seed = cli.seed;
    let outcome = match &cli.command {
        Command::Synth(a) => synth(a, seed)?,
        Command::PretrainEncoder(a) => pretrain(a, seed)?,
        Command::BuildDb(a) => build_db(a)?,
        Command::Train(a) => train(a, seed)?,
        Command::Generate(a) => generate(a, seed)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Render(a) => render(a)?,
    };
    let config = match serde_json::to_value(&cli.command)? {
        serde_json::Value::Object(mut m) => m.remove(cli.command.name()).unwrap_or_default(),
        other => other,
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config,
        seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        stamps: outcome.stamps,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&outcome.manifest)?;
    Ok(manifest)
}

/// Expands `--config FILE` into flags placed right after the subcommand,
/// so explicit flags given later override them.
pub fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config = Some(it.next().ok_or_else(|| Error::Config("--config needs a file".into()))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            out.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(out);
    };
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config(format!("{path}: expected a JSON object")))?;
    let mut flags = Vec::new();
    for (k, v) in obj {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => flags.push(flag),
            serde_json::Value::String(s) => flags.extend([flag, s.clone()]),
            serde_json::Value::Array(items) => {
                let joined: Vec<String> = items
                    .iter()
                    .map(|i| i.as_str().map_or_else(|| i.to_string(), str::to_string))
                    .collect();
                flags.extend([flag, joined.join(",")]);
            }
            other => flags.extend([flag, other.to_string()]),
        }
    }
    const COMMANDS: [&str; 7] = ["synth", "pretrain-encoder", "build-db", "train", "generate", "evaluate", "render"];
    let at = out
        .iter()
        .position(|a| COMMANDS.contains(&a.as_str()))
        .ok_or_else(|| Error::Config("--config given without a subcommand".into()))?;
    out.splice(at + 1..at + 1, flags);
    Ok(out)
}

/// Short machine-readable name of an error's kind.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Data(_) => "data",
        Error::Token(_) => "token",
        Error::Numerics(_) => "numerics",
        Error::Config(_) => "config",
        Error::EncoderNotFrozen => "encoder-not-frozen",
        Error::StampMismatch { .. } => "stamp-mismatch",
        Error::DatabaseTooSmall { .. } => "database-too-small",
        Error::DatabaseFormat(_) => "database-format",
        Error::Constraint(_) => "constraint",
        Error::EmptyDecodingSpace { .. } => "empty-decoding-space",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// One line: `error[<kind>]: <message>` with newlines flattened.
pub fn error_line(kind: &str, message: &str) -> String {
    let flat: Vec<&str> = message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    format!("error[{kind}]: {}", flat.join(" "))
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &e.to_string()));
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(m) => {
            log::info!("{} finished in {:.1}s", m.command, m.wall_seconds);
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &e.to_string()));
            1
        }
    }
}
