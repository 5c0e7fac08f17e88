//! Command-line front end: corpus generation, training, benchmarking and
//! self-checks.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use crate::corpus::{build_corpus, Corpus, QuerySample, SceneSpec, DEFAULT_VAL_FRACTION};
use crate::error::{Error, Result};
use crate::llm::{train_language_model, LanguageModel, LmTrainConfig, LLM_ROLE};
use crate::nn::ParamSet;
use crate::patchsel::{evaluate_selector, train_patch_selector, PatchSelector, SelectorTrainConfig, PATCHSEL_ROLE};
use crate::pipeline::train::{distill_sequences, lm_examples, toksel_examples};
use crate::pipeline::{
    bench, emit_report, param_path, BenchOptions, BenchReport, ModelBundle, Pipeline, PipelineConfig,
    ReportFormat, Variant, VariantSpec,
};
use crate::specdec::{decode_speculative, distill_draft, DecodeMeters, DistillConfig, Draft, DRAFT_ROLE};
use crate::toksel::{train_token_selector, TokselTrainConfig, TOKSEL_ROLE};
use crate::verify::{speculative_mismatches, speedup_checks, table_token_checks, Check};

#[derive(Debug, Parser)]
#[command(name = "litevlm", version, about = "Desk-scale multi-view VLM inference engine")]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Seed for every generator; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val corpora of synthetic scenes and queries.
    Synth(SynthArgs),
    /// Train the text-conditioned patch selector.
    TrainPatchsel(TrainPatchselArgs),
    /// Train the visual token selector head.
    TrainToksel(TrainTokselArgs),
    /// Fine-tune the target on rule answers and distill the draft head.
    DistillDraft(DistillArgs),
    /// Run variants over a corpus and write a report.
    Bench(BenchArgs),
    /// Convert a JSON report to another format.
    Report(ReportArgs),
    /// Run the losslessness and latency-table self-checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Queries per scene.
    #[arg(long, default_value_t = 10)]
    pub queries: usize,
    /// Fraction of scenes held out for validation.
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
    /// Store rendered image planes in the corpus files.
    #[arg(long)]
    pub with_images: bool,
    /// Output directory for train.lvcs and val.lvcs.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Pipeline config JSON; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory holding train.lvcs and val.lvcs.
    #[arg(long, default_value = "data")]
    pub corpus: PathBuf,
    /// Parameter directory; overrides the config's params_dir.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainPatchselArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Adam steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    /// Queries per step.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Evaluate on the validation split every N steps (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainTokselArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Adam steps.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    /// Training samples to encode; each holds every visual token.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Seed absent vision and language parameters instead of failing.
    #[arg(long)]
    pub init_missing: bool,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Draft distillation steps.
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    /// Draft learning rate.
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f32,
    /// Weight of the hidden-state regression term.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f32,
    /// Target fine-tuning steps on rule answers before distillation (0 skips).
    #[arg(long, default_value_t = 400)]
    pub target_steps: usize,
    /// Target fine-tuning learning rate.
    #[arg(long, default_value_t = 3e-3)]
    pub target_lr: f32,
    /// Training queries used for teacher sequences.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Seed an absent target instead of failing.
    #[arg(long)]
    pub init_missing: bool,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated variants, each optionally `name@keep_ratio`.
    #[arg(long, default_value = "baseline,fastv,litevlm", value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Corpus split to run.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Use only the first N samples (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    /// Output report path.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Report format: json, csv or markdown; guessed from --out when absent.
    #[arg(long)]
    pub format: Option<String>,
    /// Seed parameters for roles without a file instead of failing.
    #[arg(long)]
    pub init_missing: bool,
    /// Include mean wall-clock seconds (makes reports run-dependent).
    #[arg(long)]
    pub wall_times: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report written by `bench`.
    #[arg(long, default_value = "report.json")]
    pub input: PathBuf,
    /// Output format: json, csv or markdown.
    #[arg(long, default_value = "markdown")]
    pub format: String,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random prompts for the losslessness check.
    #[arg(long, default_value_t = 100)]
    pub prompts: usize,
    /// Tokens generated per prompt.
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    /// Also check the target and draft found in this parameter directory.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Config the parameters in --params were trained with.
    #[arg(long, requires = "params")]
    pub config: Option<PathBuf>,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Runs a parsed command. `Ok(false)` means checks ran and some failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let ctx = Ctx { workdir: cli.workdir.clone(), seed: cli.seed, threads: cli.threads.max(1) };
    match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::TrainPatchsel(a) => train_patchsel(&ctx, a),
        Command::TrainToksel(a) => train_toksel(&ctx, a),
        Command::DistillDraft(a) => distill(&ctx, a),
        Command::Bench(a) => run_bench(&ctx, a),
        Command::Report(a) => report(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
    }
}

/// The clap command tree, for help-text checks.
pub fn command() -> clap::Command {
    Cli::command()
}

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
    threads: usize,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn config(&self, m: &ModelArgs) -> Result<(PipelineConfig, PathBuf)> {
        let mut c = match &m.config {
            Some(p) => PipelineConfig::load(&self.path(p))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(p) = &c.calibration {
            c.calibration = Some(self.path(Path::new(p)).to_string_lossy().into_owned());
        }
        let c = c.resolve();
        let params = self.path(m.params.as_deref().unwrap_or(Path::new(&c.params_dir)));
        eprintln!("seed: {}", c.seed);
        eprintln!("config: {}", c.to_json());
        Ok((c, params))
    }

    fn corpus(&self, m: &ModelArgs, split: &str) -> Result<Corpus> {
        Corpus::load(&self.path(&m.corpus).join(format!("{split}.lvcs")))
    }
}

fn jsonl(ctx: &Ctx, path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.as_ref()
        .map(|p| {
            let p = ctx.path(p);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        })
        .transpose()
}

fn write_line(w: &mut Option<BufWriter<File>>, v: &serde_json::Value) {
    if let Some(w) = w {
        let _ = writeln!(w, "{v}");
    }
}

fn load_role(dir: &Path, role: &str) -> Result<ParamSet> {
    let p = param_path(dir, role);
    if !p.exists() {
        return Err(Error::MissingParamFile { role: role.to_string(), path: p });
    }
    ParamSet::load(&p)
}

fn load_or_init(dir: &Path, role: &str, init: bool, config: &PipelineConfig) -> Result<ParamSet> {
    match load_role(dir, role) {
        Err(Error::MissingParamFile { .. }) if init => {
            Ok(ModelBundle::init(config)?.slot(role).clone().expect("init fills every role"))
        }
        other => other,
    }
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<bool> {
    let seed = ctx.seed.unwrap_or(0);
    eprintln!("seed: {seed}");
    eprintln!(
        "config: {}",
        json!({"scenes": a.scenes, "queries": a.queries, "val_fraction": a.val_fraction, "with_images": a.with_images})
    );
    let (train, val) = build_corpus(a.scenes, a.queries, seed, a.val_fraction)?;
    let out = ctx.path(&a.out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    train.save(&out.join("train.lvcs"), a.with_images)?;
    val.save(&out.join("val.lvcs"), a.with_images)?;
    println!(
        "wrote {} train and {} val queries ({} and {} scenes) to {}",
        train.queries.len(),
        val.queries.len(),
        train.scenes.len(),
        val.scenes.len(),
        out.display()
    );
    Ok(true)
}

fn train_patchsel(ctx: &Ctx, a: &TrainPatchselArgs) -> Result<bool> {
    let (config, dir) = ctx.config(&a.model)?;
    let train = ctx.corpus(&a.model, "train")?;
    let val = ctx.corpus(&a.model, "val")?;
    let mut params = match load_role(&dir, PATCHSEL_ROLE) {
        Ok(p) => p,
        Err(Error::MissingParamFile { .. }) => crate::patchsel::selector_init(&config.selector)?,
        Err(e) => return Err(e),
    };
    let tc = SelectorTrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed: config.seed,
        eval_every: a.eval_every,
    };
    let policy = config.policy();
    let mut log = jsonl(ctx, &a.log)?;
    train_patch_selector(&config.selector, &mut params, &train.queries, &val.queries, &tc, &policy, |r| {
        write_line(&mut log, &serde_json::to_value(r).expect("log serializes"));
    })?;
    let sel = PatchSelector::from_params(&config.selector, &params)?;
    let eval = evaluate_selector(&sel, &val.queries, &policy)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    params.save(&param_path(&dir, PATCHSEL_ROLE))?;
    println!("{}", serde_json::to_string(&eval)?);
    Ok(true)
}

fn samples_of(corpus: &Corpus, limit: usize) -> Result<Vec<(SceneSpec, QuerySample)>> {
    let n = if limit == 0 { corpus.queries.len() } else { limit.min(corpus.queries.len()) };
    corpus.queries[..n]
        .iter()
        .map(|q| {
            let s = corpus
                .scene(q.scene_id)
                .ok_or_else(|| Error::Format(format!("query references missing scene {}", q.scene_id)))?;
            Ok((s.clone(), q.clone()))
        })
        .collect()
}

fn train_toksel(ctx: &Ctx, a: &TrainTokselArgs) -> Result<bool> {
    let (config, dir) = ctx.config(&a.model)?;
    let config = config.with_variant(Variant::Baseline);
    let train = ctx.corpus(&a.model, "train")?;
    let mut bundle = ModelBundle::load_dir(&dir)?;
    if a.init_missing {
        bundle.fill_missing(&config)?;
    }
    bundle.check_required(&config, &dir)?;
    let mut params = match bundle.toksel.take() {
        Some(p) => p,
        None => crate::toksel::toksel_init(bundle.llm.as_ref().expect("checked"), LLM_ROLE, config.seed)?,
    };
    let pipe = Pipeline::new(&config, &bundle)?;
    let examples = toksel_examples(&pipe, &samples_of(&train, a.samples)?, config.label_alpha)?;
    let tc = TokselTrainConfig { steps: a.steps, lr: a.lr, seed: config.seed };
    let mut log = jsonl(ctx, &a.log)?;
    let losses = train_token_selector(&mut params, config.llm.n_heads, &examples, &tc, |step, loss| {
        write_line(&mut log, &json!({"step": step, "loss": loss}));
    })?;
    params.save(&param_path(&dir, TOKSEL_ROLE))?;
    println!("{}", json!({"steps": losses.len(), "final_loss": losses.last()}));
    Ok(true)
}

fn distill(ctx: &Ctx, a: &DistillArgs) -> Result<bool> {
    let (config, dir) = ctx.config(&a.model)?;
    let train = ctx.corpus(&a.model, "train")?;
    let val = ctx.corpus(&a.model, "val")?;
    let mut llm = load_or_init(&dir, LLM_ROLE, a.init_missing, &config)?;
    let mut log = jsonl(ctx, &a.log)?;
    let queries = &train.queries[..a.samples.min(train.queries.len())];
    if a.target_steps > 0 {
        let tc = LmTrainConfig { steps: a.target_steps, lr: a.target_lr, batch: 8, seed: config.seed };
        let losses = train_language_model(&config.llm, &mut llm, LLM_ROLE, &lm_examples(queries), &tc)?;
        for (step, loss) in losses.iter().enumerate() {
            write_line(&mut log, &json!({"stage": "target", "step": step, "loss": loss}));
        }
    }
    let target = LanguageModel::from_params(&config.llm, &llm, LLM_ROLE)?;
    let seqs = distill_sequences(&target, queries, config.max_new)?;
    let mut draft = match load_role(&dir, DRAFT_ROLE) {
        Ok(p) => p,
        Err(Error::MissingParamFile { .. }) => crate::specdec::draft_init(config.llm.d_model, config.draft_d_ff, config.seed),
        Err(e) => return Err(e),
    };
    let dc = DistillConfig { steps: a.steps, lr: a.lr, lambda: a.lambda, seed: config.seed };
    distill_draft(&target, &llm, &mut draft, config.llm.n_heads, &seqs, &dc, |step, loss| {
        write_line(&mut log, &json!({"stage": "draft", "step": step, "loss": loss}));
    })?;
    let d = Draft::from_params(&draft, config.llm.n_heads)?;
    let acceptance = held_out_acceptance(&target, &d, &val.queries, config.draft_len, config.max_new)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if a.target_steps > 0 {
        llm.save(&param_path(&dir, LLM_ROLE))?;
    }
    draft.save(&param_path(&dir, DRAFT_ROLE))?;
    println!("{}", json!({"draft_len": config.draft_len, "accepted_per_iteration": acceptance}));
    Ok(true)
}

/// Mean committed tokens per verify iteration over text-only prompts.
pub fn held_out_acceptance(
    target: &LanguageModel,
    draft: &Draft,
    queries: &[QuerySample],
    d: usize,
    max_new: usize,
) -> Result<f64> {
    let (mut tokens, mut iters) = (0usize, 0usize);
    for q in queries {
        let x = target.embed_tokens(&crate::pipeline::train::query_prompt(&q.raw))?;
        let out = decode_speculative(target, draft, &x, d, max_new, Some(crate::corpus::tables::EOS), &DecodeMeters::default())?;
        tokens += out.stats.total_generated;
        iters += out.stats.iterations;
    }
    Ok(if iters == 0 { 0.0 } else { tokens as f64 / iters as f64 })
}

fn run_bench(ctx: &Ctx, a: &BenchArgs) -> Result<bool> {
    let (config, dir) = ctx.config(&a.model)?;
    let specs = a.variants.iter().map(|v| v.parse()).collect::<Result<Vec<VariantSpec>>>()?;
    let mut bundle = ModelBundle::load_dir(&dir)?;
    if a.init_missing {
        bundle.fill_missing(&config)?;
    }
    for s in &specs {
        let c = s.apply(&config);
        c.validate()?;
        bundle.check_required(&c, &dir)?;
    }
    let corpus = ctx.corpus(&a.model, &a.split)?;
    let samples = samples_of(&corpus, a.limit)?;
    let opts = BenchOptions { threads: ctx.threads, record_wall: a.wall_times, calibration: None };
    let report = bench(&samples, &specs, &config, &bundle, &opts)?;
    let out = ctx.path(&a.out);
    let format = match &a.format {
        Some(f) => f.parse()?,
        None => ReportFormat::from_path(&out).unwrap_or(ReportFormat::Json),
    };
    emit_report(&report, format, &out)?;
    print!("{}", report.to_markdown());
    Ok(true)
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<bool> {
    let input = ctx.path(&a.input);
    let s = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
    let r = BenchReport::from_json(&s)?;
    let format: ReportFormat = a.format.parse()?;
    match &a.out {
        Some(p) => emit_report(&r, format, &ctx.path(p))?,
        None => print!("{}", r.render(format)?),
    }
    Ok(true)
}

fn verify(ctx: &Ctx, a: &VerifyArgs) -> Result<bool> {
    let config = PipelineConfig { seed: ctx.seed.unwrap_or(0), ..PipelineConfig::tiny() }.resolve();
    eprintln!("seed: {}", config.seed);
    eprintln!("config: {}", config.to_json());
    let calib = match &config.calibration {
        Some(p) => crate::pipeline::CostCalibration::load(&ctx.path(Path::new(p)))?,
        None => crate::pipeline::CostCalibration::shipped(),
    };
    let mut checks: Vec<Check> = Vec::new();

    let bundle = ModelBundle::init(&config)?;
    let target = LanguageModel::from_params(&config.llm, bundle.llm.as_ref().expect("init"), LLM_ROLE)?;
    let seeded = Draft::from_params(bundle.draft.as_ref().expect("init"), config.llm.n_heads)?;
    let bad = speculative_mismatches(&target, &[&seeded], a.prompts, a.max_new, config.seed)?;
    checks.push(Check {
        name: "speculative losslessness, seeded models".into(),
        passed: bad == 0,
        detail: format!("{bad} mismatches over {} prompts x D in {{1,2,4,8}}", a.prompts),
    });
    if let Some(p) = &a.params {
        let dir = ctx.path(p);
        let full = match &a.config {
            Some(c) => PipelineConfig::load(&ctx.path(c))?,
            None => PipelineConfig::default().resolve(),
        };
        let llm = load_role(&dir, LLM_ROLE)?;
        let target = LanguageModel::from_params(&full.llm, &llm, LLM_ROLE)?;
        let draft = Draft::from_params(&load_role(&dir, DRAFT_ROLE)?, full.llm.n_heads)?;
        let bad = speculative_mismatches(&target, &[&draft], a.prompts, a.max_new, config.seed)?;
        checks.push(Check {
            name: format!("speculative losslessness, {}", dir.display()),
            passed: bad == 0,
            detail: format!("{bad} mismatches"),
        });
    }
    checks.extend(table_token_checks(&calib)?);
    checks.extend(speedup_checks(&calib)?);

    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}
