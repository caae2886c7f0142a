use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pretrain_lab::experiments::{
    evaluate, finetune, generate_corpora, pretrain, proposal_manifest, pseudo_label, run_matrix, train_teacher, Axis,
    ExperimentConfig, Lab, MatrixReport, Recipe, RunRecord,
};
use pretrain_lab::losses::Scheme;
use pretrain_lab::model::{load_checkpoint, load_full_checkpoint, save_checkpoint, Component, TrainingMetadata};
use pretrain_lab::scenes::{Dataset, DatasetManifest};

#[derive(Parser)]
#[command(name = "pretrain-lab", version, about = "Compare detector pre-training schemes on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the pre-training, train and eval corpora.
    GenData(Stage),
    /// Train the supervised teacher on the train split.
    TrainTeacher(Stage),
    /// Label the pre-training corpus with the teacher, once.
    PseudoLabel(Stage),
    /// Pre-train under the configured scheme with the backbone frozen.
    Pretrain(Stage),
    /// Fine-tune on the train split, optionally from a pre-trained checkpoint.
    Finetune(Stage),
    /// Score a checkpoint on the eval split.
    Evaluate(Stage),
    /// Run an ablation axis over several seeds and write reports.
    Matrix(MatrixArgs),
    /// Print tables from saved run records or matrix reports.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Overrides {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-training scheme, or from_scratch.
    #[arg(long)]
    scheme: Option<String>,
    /// Model and train seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    teacher_seed: Option<u64>,
    #[arg(long)]
    pretrain_images: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    eval_images: Option<usize>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Pseudo-boxes (or proposals) kept per image.
    #[arg(long)]
    pseudo_count: Option<usize>,
    /// Comma-separated components loaded at fine-tuning.
    #[arg(long)]
    components: Option<String>,
    /// Fraction of the train split used at fine-tuning.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load_json(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scheme {
            c.recipe = Recipe::parse(s)?;
        }
        if let Some(s) = self.seed {
            c = c.with_seed(s);
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            data_seed => data.seed,
            teacher_seed => teacher_seed,
            pretrain_images => data.pretrain_images,
            train_images => data.train_images,
            eval_images => data.eval_images,
            teacher_epochs => teacher.epochs,
            pretrain_epochs => pretrain.epochs,
            finetune_epochs => finetune.epochs,
            pseudo_count => pseudo_count,
            fraction => fraction,
            width => model.width,
        );
        for s in [&mut c.teacher, &mut c.pretrain, &mut c.finetune] {
            if let Some(b) = self.batch_size {
                s.batch_size = b;
            }
            if let Some(lr) = self.lr {
                s.lr = lr;
            }
        }
        if let Some(list) = &self.components {
            c.components = parse_components(list)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_components(list: &str) -> Result<BTreeSet<Component>> {
    list.split([',', '+'])
        .filter(|s| !s.is_empty())
        .map(|s| Component::parse(s.trim()).map_err(Into::into))
        .collect()
}

#[derive(Args)]
struct Stage {
    #[command(flatten)]
    overrides: Overrides,
    /// Working directory holding data, checkpoints and records.
    #[arg(long, default_value = "runs/default")]
    workdir: PathBuf,
    /// Input checkpoint (teacher for pseudo-label, pre-trained weights for
    /// finetune, model for evaluate).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target manifest for pretrain (defaults to the scheme's usual source).
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Output path; defaults to a name inside the workdir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisName {
    Scheme,
    PseudoCount,
    Components,
    Fraction,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_enum)]
    axis: AxisName,
    /// Comma-separated axis values; components use `+` inside a value
    /// (e.g. `encoder+backbone,decoder+queries+backbone`).
    #[arg(long)]
    values: Option<String>,
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs/matrix")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run record or matrix report JSON files.
    paths: Vec<PathBuf>,
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn data(&self, split: &str) -> PathBuf {
        self.root.join("data").join(split).join("manifest.json")
    }
    fn teacher(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }
    fn pseudo(&self, k: usize) -> PathBuf {
        self.root.join(format!("pseudo-k{k}.json"))
    }
    fn proposals(&self, k: usize) -> PathBuf {
        self.root.join(format!("proposals-k{k}.json"))
    }
    fn pretrained(&self, c: &ExperimentConfig, s: Scheme) -> PathBuf {
        self.root.join(format!("pretrain-{}-s{}-k{}.ckpt", s.name(), c.model_seed, c.pseudo_count))
    }
    fn finetuned(&self, c: &ExperimentConfig) -> PathBuf {
        self.root.join(format!("finetune-{}-s{}-{}.ckpt", c.recipe.name(), c.model_seed, &c.hash()[..12]))
    }
    fn record(&self, c: &ExperimentConfig, stage: &str) -> PathBuf {
        self.root.join("records").join(format!("{stage}-{}.json", &c.hash()[..12]))
    }
}

fn load_split(p: &Paths, split: &str) -> Result<Dataset> {
    let path = p.data(split);
    Dataset::load(&path).with_context(|| format!("loading {split} split (run gen-data first)"))
}

/// Writes `body` unless an identical file exists; a differing file is an error.
fn write_once(path: &Path, body: &[u8]) -> Result<()> {
    if let Ok(existing) = fs::read(path) {
        if existing == body {
            return Ok(());
        }
        bail!("{} exists with different contents; delete it to regenerate", path.display());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn stage(cmd: &str, s: Stage) -> Result<()> {
    let cfg = s.overrides.resolve()?;
    let p = Paths { root: s.workdir.clone() };
    let start = Instant::now();
    let meta = |scheme: &str, epochs| TrainingMetadata {
        scheme: scheme.to_string(),
        epochs,
        seed: cfg.model_seed,
    };
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        recipe: cfg.recipe.name().to_string(),
        seed: cfg.model_seed,
        pretrain_log: Vec::new(),
        finetune_log: Vec::new(),
        metrics: Default::default(),
        checkpoints: Vec::new(),
        wall_seconds: 0.0,
    };
    match cmd {
        "gen-data" => {
            let c = generate_corpora(&cfg)?;
            for (split, d) in [("pretrain", &c.pretrain), ("train", &c.train), ("eval", &c.eval)] {
                let m = d.save(&p.root.join("data").join(split))?;
                println!("{split}: {} images -> {}", d.len(), m.display());
            }
            return Ok(());
        }
        "train-teacher" => {
            let (params, logs) = train_teacher(&cfg, &load_split(&p, "train")?)?;
            let out = s.out.unwrap_or_else(|| p.teacher());
            save_checkpoint(&params, &meta("teacher", cfg.teacher.epochs), &out)?;
            record.finetune_log = logs;
            record.checkpoints.push(out);
        }
        "pseudo-label" => {
            let ckpt = s.checkpoint.unwrap_or_else(|| p.teacher());
            let teacher = load_full_checkpoint(&ckpt).context("loading teacher")?;
            let manifest = pseudo_label(&teacher.params, &load_split(&p, "pretrain")?, cfg.pseudo_count)?;
            let out = s.out.unwrap_or_else(|| p.pseudo(cfg.pseudo_count));
            write_once(&out, &serde_json::to_vec_pretty(&manifest)?)?;
            println!("{} pseudo-boxes -> {}", manifest.annotations.len(), out.display());
            return Ok(());
        }
        "pretrain" => {
            let Recipe::Pretrained(scheme) = cfg.recipe else {
                bail!("from_scratch has no pre-training stage");
            };
            let corpus = load_split(&p, "pretrain")?;
            let sources = match (&s.targets, scheme) {
                (Some(t), _) => DatasetManifest::load(t)?,
                (None, Scheme::Supervised) => corpus.manifest.clone(),
                (None, Scheme::Detreg) => {
                    let path = p.proposals(cfg.pseudo_count);
                    let m = proposal_manifest(&corpus, cfg.pseudo_count, &cfg.proposals, cfg.data.seed)?;
                    write_once(&path, &serde_json::to_vec_pretty(&m)?)?;
                    m
                }
                (None, _) => DatasetManifest::load(&p.pseudo(cfg.pseudo_count)).context("run pseudo-label first")?,
            };
            let (params, logs) = pretrain(&cfg, scheme, &corpus, &sources)?;
            let out = s.out.unwrap_or_else(|| p.pretrained(&cfg, scheme));
            save_checkpoint(&params, &meta(scheme.name(), cfg.pretrain.epochs), &out)?;
            record.pretrain_log = logs;
            record.checkpoints.push(out);
        }
        "finetune" => {
            let init = match (cfg.recipe, &s.checkpoint) {
                (Recipe::FromScratch, Some(_)) => bail!("from_scratch takes no checkpoint"),
                (Recipe::FromScratch, None) => None,
                (Recipe::Pretrained(scheme), ckpt) => {
                    let path = ckpt.clone().unwrap_or_else(|| p.pretrained(&cfg, scheme));
                    let loaded = load_checkpoint(&path, &cfg.components, &cfg.downstream_model())
                        .with_context(|| format!("loading {}", path.display()))?;
                    record.checkpoints.push(path);
                    Some(loaded.params)
                }
            };
            let train = load_split(&p, "train")?;
            let (params, logs) = finetune(&cfg, init.as_ref(), &train)?;
            let out = s.out.unwrap_or_else(|| p.finetuned(&cfg));
            save_checkpoint(&params, &meta(cfg.recipe.name(), cfg.finetune.epochs), &out)?;
            record.metrics = evaluate(&params, &load_split(&p, "eval")?)?;
            print!("{}", record.metrics.text_table());
            record.finetune_log = logs;
            record.checkpoints.push(out);
        }
        "evaluate" => {
            let ckpt = s.checkpoint.unwrap_or_else(|| p.finetuned(&cfg));
            let model = load_full_checkpoint(&ckpt)?;
            let metrics = evaluate(&model.params, &load_split(&p, "eval")?)?;
            print!("{}", metrics.text_table());
            let out = s.out.unwrap_or_else(|| ckpt.with_extension("metrics.json"));
            fs::write(&out, serde_json::to_vec_pretty(&metrics)?)?;
            return Ok(());
        }
        _ => unreachable!(),
    }
    record.wall_seconds = start.elapsed().as_secs_f64();
    let path = p.record(&cfg, cmd);
    record.save(&path)?;
    println!("record -> {}", path.display());
    Ok(())
}

fn matrix(a: MatrixArgs) -> Result<()> {
    let base = a.overrides.resolve()?;
    let values: Option<Vec<&str>> = a.values.as_deref().map(|v| v.split(',').map(str::trim).collect());
    let axis = match a.axis {
        AxisName::Scheme => Axis::Scheme(match values {
            Some(v) => v.into_iter().map(Recipe::parse).collect::<pretrain_lab::Result<_>>()?,
            None => Recipe::ALL.to_vec(),
        }),
        AxisName::PseudoCount => Axis::PseudoCount(match values {
            Some(v) => v.into_iter().map(str::parse).collect::<Result<_, _>>()?,
            None => vec![5, 10, 25],
        }),
        AxisName::Components => Axis::Components(match values {
            Some(v) => v.into_iter().map(parse_components).collect::<Result<_>>()?,
            None => vec![
                parse_components("backbone+encoder")?,
                parse_components("backbone+decoder+queries")?,
                Component::ALL.into_iter().collect(),
            ],
        }),
        AxisName::Fraction => Axis::Fraction(match values {
            Some(v) => v.into_iter().map(str::parse).collect::<Result<_, _>>()?,
            None => vec![0.05, 0.10, 0.25, 0.50, 1.0],
        }),
    };
    let mut lab = Lab::new(base.clone())?;
    let report = run_matrix(&mut lab, &base, &axis, &a.seeds);
    report.write(&a.out)?;
    print!("{}", report.text_table());
    let failed: usize = report.cells.iter().map(|c| c.failures.len()).sum();
    if failed > 0 {
        for c in &report.cells {
            for f in &c.failures {
                eprintln!("{}: {f}", c.label);
            }
        }
        bail!("{failed} run(s) failed");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if a.paths.is_empty() {
        bail!("no input files");
    }
    for path in &a.paths {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(m) = serde_json::from_slice::<MatrixReport>(&bytes) {
            println!("== {} ({} seeds)", path.display(), m.seeds.len());
            print!("{}", m.text_table());
        } else {
            let r: RunRecord = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
            println!("== {} {} seed {} ({:.0}s)", path.display(), r.recipe, r.seed, r.wall_seconds);
            print!("{}", r.metrics.text_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(s) => stage("gen-data", s),
        Command::TrainTeacher(s) => stage("train-teacher", s),
        Command::PseudoLabel(s) => stage("pseudo-label", s),
        Command::Pretrain(s) => stage("pretrain", s),
        Command::Finetune(s) => stage("finetune", s),
        Command::Evaluate(s) => stage("evaluate", s),
        Command::Matrix(a) => matrix(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
