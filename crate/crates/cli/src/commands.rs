//! Subcommand implementations. Each command validates its configuration and
//! inputs before computing, writes its artifacts into the output directory
//! and records a manifest.

use std::path::{Path, PathBuf};

use ifsl_core::attractor::{AttractorMode, MetaParams};
use ifsl_core::classifier::{pretrain_base, BaseClassifier, ClassifierKind};
use ifsl_core::desk::WorldConfig;
use ifsl_core::embeddings::{
    generate_synthetic_world, load_embeddings, save_embeddings, EmbeddingTable, EpisodeSource, Split,
    TableSource,
};
use ifsl_core::exec::Execution;
use ifsl_core::meta::{
    base_prototypes, evaluate, meta_train, GradientMethod, Learner, MetaTrainConfig, MetricsReport,
    TrainRecord,
};
use log::info;

use crate::config::{ExperimentConfig, InnerSection, Stage};
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::report::{write_metrics_csv, RowKey};

pub const EMBEDDINGS_FILE: &str = "embeddings.ifsl";
pub const BASE_FILE: &str = "base.wa01";

/// What is evaluated: an attractor mode or one of the prototype baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Attractor(AttractorMode),
    Imprint,
    ProtoNet,
}

impl Variant {
    /// Whether the variant has meta-parameters to train.
    pub fn is_learned(self) -> bool {
        matches!(
            self,
            Self::Attractor(AttractorMode::Static) | Self::Attractor(AttractorMode::Attention)
        )
    }
}

impl std::str::FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "imprint" => Ok(Self::Imprint),
            "protonet" => Ok(Self::ProtoNet),
            other => other
                .parse()
                .map(Self::Attractor)
                .map_err(|_| CliError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Attractor(m) => m.fmt(f),
            Self::Imprint => f.write_str("imprint"),
            Self::ProtoNet => f.write_str("protonet"),
        }
    }
}

/// Shared runtime context.
pub struct Context {
    pub config: ExperimentConfig,
    pub exec: Execution,
}

impl Context {
    pub fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self.config.output_dir.as_path();
        if !dir.is_dir() {
            return Err(CliError::Config(format!(
                "output directory {} does not exist",
                dir.display()
            )));
        }
        Ok(dir)
    }

    fn manifest(&self, command: &str) -> Result<Manifest, CliError> {
        let json = serde_json::to_string(&self.config)?;
        Ok(Manifest::new(command, self.config.seed, &json))
    }

    fn resolve(&self, given: Option<PathBuf>, default_name: &str) -> Result<PathBuf, CliError> {
        Ok(match given {
            Some(p) => p,
            None => self.out_dir()?.join(default_name),
        })
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} not found", path.display())))
    }
}

/// File stem for the artifacts of one trained model.
pub fn model_stem(kind: ClassifierKind, mode: AttractorMode, shots: usize, grad: GradientMethod) -> String {
    let g = match grad {
        GradientMethod::Rbp => "rbp".to_string(),
        GradientMethod::Tbptt { steps, .. } => format!("tbptt{steps}"),
    };
    format!("meta-{kind}-{mode}-{shots}shot-{g}")
}

/// Materializes the configured synthetic world as an embedding table.
pub fn generate_table(config: &ExperimentConfig) -> Result<EmbeddingTable, CliError> {
    let w: WorldConfig = config.world_config();
    let world = generate_synthetic_world(w.base_classes, w.novel_pool, w.dim, w.separation, w.stddev, w.seed)?;
    Ok(world.to_table(&config.splits, config.stage_seed(Stage::Table))?)
}

pub fn pretrain_on(config: &ExperimentConfig, table: &EmbeddingTable) -> Result<BaseClassifier, CliError> {
    let p = config.pretrain_config();
    let source = TableSource::new(table, Split::BaseVal)?;
    let data = source.base_training_set();
    Ok(pretrain_base(&data, p.epochs, p.lr, p.weight_decay, p.seed)?)
}

fn check_base_fits(base: &BaseClassifier, source: &TableSource<'_>) -> Result<(), CliError> {
    if base.dim() != source.dim() || base.classes() != source.base_class_count() {
        return Err(CliError::Config(format!(
            "base classifier is {}x{}, embeddings have dim {} and {} base classes",
            base.dim(),
            base.classes(),
            source.dim(),
            source.base_class_count()
        )));
    }
    Ok(())
}

fn check_episode_fits(config: &ExperimentConfig, source: &TableSource<'_>) -> Result<(), CliError> {
    if config.episode.ways > source.novel_pool_count() {
        return Err(CliError::Config(format!(
            "{} ways requested, embeddings hold {} novel classes",
            config.episode.ways,
            source.novel_pool_count()
        )));
    }
    Ok(())
}

pub fn train_model(
    config: &ExperimentConfig,
    source: &TableSource<'_>,
    base: &BaseClassifier,
    kind: ClassifierKind,
    mode: AttractorMode,
    exec: Execution,
) -> Result<(MetaParams, Vec<TrainRecord>), CliError> {
    let cfg = MetaTrainConfig {
        episode: config.episode_config(source.base_class_count(), source.dim()),
        model: config.model_with(kind, mode),
        solver: config.solver.clone(),
        rbp: config.rbp.clone(),
        gradient: config.meta.gradient,
        steps: config.meta.steps,
        schedule: config.schedule(),
        meta_batch: config.meta.meta_batch,
        seed: config.stage_seed(Stage::MetaEpisodes),
    };
    let init = MetaParams::init(source.dim(), kind, config.stage_seed(Stage::MetaInit));
    Ok(meta_train(source, base, init, &cfg, exec)?)
}

pub fn evaluate_variant(
    config: &ExperimentConfig,
    source: &TableSource<'_>,
    base: &BaseClassifier,
    variant: Variant,
    meta: Option<&MetaParams>,
    exec: Execution,
) -> Result<MetricsReport, CliError> {
    let kind = config.model.kind;
    let episode = config.episode_config(source.base_class_count(), source.dim());
    let fallback;
    let prototypes;
    let learner = match variant {
        Variant::Attractor(mode) => {
            let meta = match meta {
                Some(m) => m,
                None => {
                    fallback = MetaParams::init(source.dim(), kind, config.stage_seed(Stage::MetaInit));
                    &fallback
                }
            };
            Learner::Attractor {
                meta,
                model: config.model_with(kind, mode),
                inner: config.inner_eval(),
            }
        }
        Variant::Imprint => Learner::Imprint,
        Variant::ProtoNet => {
            prototypes = base_prototypes(&source.base_training_set(), source.base_class_count())?;
            Learner::ProtoNet {
                prototypes: &prototypes,
            }
        }
    };
    Ok(evaluate(
        &learner,
        base,
        source,
        &episode,
        config.eval.episodes,
        config.stage_seed(Stage::Eval),
        exec,
    )?)
}

pub fn inner_label(inner: InnerSection) -> String {
    match inner {
        InnerSection::Converged => "converged".into(),
        InnerSection::Steps { steps, alpha } => format!("steps:{steps}:{alpha}"),
    }
}

pub fn gen_data(ctx: &Context) -> Result<(), CliError> {
    let out = ctx.out_dir()?;
    let table = generate_table(&ctx.config)?;
    let path = out.join(EMBEDDINGS_FILE);
    save_embeddings(&table, &path)?;
    info!("wrote {}", path.display());
    let mut m = ctx.manifest("gen-data")?;
    m.output(&path)?;
    m.write(out)
}

pub fn pretrain(ctx: &Context, data: Option<PathBuf>) -> Result<(), CliError> {
    let out = ctx.out_dir()?;
    let data = ctx.resolve(data, EMBEDDINGS_FILE)?;
    require_file(&data, "embeddings")?;
    let table = load_embeddings(&data)?;
    let base = pretrain_on(&ctx.config, &table)?;
    let path = out.join(BASE_FILE);
    base.save(&path)?;
    let source = TableSource::new(&table, Split::BaseTest)?;
    info!("base accuracy on held-out rows: {:.4}", base.accuracy(&source.base_examples(Split::BaseTest)));
    let mut m = ctx.manifest("pretrain")?;
    m.input(&data)?;
    m.output(&path)?;
    m.write(out)
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub variant: AttractorMode,
}

pub fn meta_train_cmd(ctx: &Context, args: TrainArgs) -> Result<(), CliError> {
    let out = ctx.out_dir()?;
    let data = ctx.resolve(args.data, EMBEDDINGS_FILE)?;
    let base_path = ctx.resolve(args.base, BASE_FILE)?;
    require_file(&data, "embeddings")?;
    require_file(&base_path, "base classifier")?;
    let table = load_embeddings(&data)?;
    let base = BaseClassifier::load(&base_path)?;
    let source = TableSource::new(&table, Split::BaseVal)?;
    check_base_fits(&base, &source)?;
    check_episode_fits(&ctx.config, &source)?;

    let cfg = &ctx.config;
    let (meta, log) = train_model(cfg, &source, &base, cfg.model.kind, args.variant, ctx.exec)?;
    let stem = model_stem(cfg.model.kind, args.variant, cfg.episode.shots, cfg.meta.gradient);
    let meta_path = out.join(format!("{stem}.th01"));
    let log_path = out.join(format!("{stem}.jsonl"));
    meta.save(&meta_path)?;
    let mut lines = String::new();
    for record in &log {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    std::fs::write(&log_path, lines)?;
    info!("wrote {}", meta_path.display());

    let mut m = ctx.manifest("meta-train")?;
    m.input(&data)?;
    m.input(&base_path)?;
    m.output(&meta_path)?;
    m.output(&log_path)?;
    m.write_as(out, &stem)
}

pub struct EvalArgs {
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub meta: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub shots: Vec<usize>,
    pub csv: Option<PathBuf>,
}

pub fn eval_cmd(ctx: &Context, args: EvalArgs) -> Result<(), CliError> {
    let out = ctx.out_dir()?;
    if args.meta.is_some() && (args.variants.len() != 1 || args.shots.len() != 1) {
        return Err(CliError::Config("--meta needs exactly one variant and one shots value".into()));
    }
    let data = ctx.resolve(args.data, EMBEDDINGS_FILE)?;
    let base_path = ctx.resolve(args.base, BASE_FILE)?;
    require_file(&data, "embeddings")?;
    require_file(&base_path, "base classifier")?;
    let mut m = ctx.manifest("eval")?;

    // Resolve and load every input before evaluating anything.
    let table = load_embeddings(&data)?;
    let base = BaseClassifier::load(&base_path)?;
    let source = TableSource::new(&table, Split::BaseTest)?;
    check_base_fits(&base, &source)?;
    let kind = ctx.config.model.kind;
    let mut jobs = Vec::new();
    for &shots in &args.shots {
        let mut config = ctx.config.clone();
        config.episode.shots = shots;
        config.validate()?;
        check_episode_fits(&config, &source)?;
        for &variant in &args.variants {
            let meta = match variant {
                Variant::Attractor(mode) if variant.is_learned() => {
                    let path = match &args.meta {
                        Some(p) => p.clone(),
                        None => out.join(format!(
                            "{}.th01",
                            model_stem(kind, mode, shots, config.meta.gradient)
                        )),
                    };
                    require_file(&path, "meta-parameters")?;
                    let meta = MetaParams::load(&path)?;
                    if meta.dim() != source.dim() {
                        return Err(CliError::Config(format!(
                            "meta-parameters have dim {}, embeddings {}",
                            meta.dim(),
                            source.dim()
                        )));
                    }
                    m.input(&path)?;
                    Some(meta)
                }
                _ => None,
            };
            jobs.push((config.clone(), variant, meta));
        }
    }

    let mut rows = Vec::with_capacity(jobs.len());
    for (config, variant, meta) in &jobs {
        let report = evaluate_variant(config, &source, &base, *variant, meta.as_ref(), ctx.exec)?;
        info!("{variant} {}-shot: delta {:.4}", config.episode.shots, report.delta);
        let key = RowKey {
            variant: variant.to_string(),
            kind: kind.to_string(),
            shots: config.episode.shots,
            base_classes: source.base_class_count(),
            grad: if variant.is_learned() { config.meta.gradient.to_string() } else { "-".into() },
            inner: inner_label(config.eval.inner),
        };
        rows.push((key, report));
    }
    let csv_path = ctx.resolve(args.csv, "metrics.csv")?;
    write_metrics_csv(&csv_path, &rows)?;
    m.input(&data)?;
    m.input(&base_path)?;
    m.output(&csv_path)?;
    m.write(out)
}

pub struct SweepArgs {
    pub variants: Vec<Variant>,
    pub shots: Vec<usize>,
    pub base_classes: Vec<usize>,
    pub grads: Vec<GradientMethod>,
    pub inners: Vec<InnerSection>,
    pub csv: Option<PathBuf>,
}

/// Full in-memory pipeline per setting; one CSV row per
/// (base classes, shots, gradient, variant, inner mode).
pub fn sweep_cmd(ctx: &Context, args: SweepArgs) -> Result<(), CliError> {
    let out = ctx.out_dir()?;
    for &b in &args.base_classes {
        let mut c = ctx.config.clone();
        c.world.base_classes = b;
        for &s in &args.shots {
            c.episode.shots = s;
            for &inner in &args.inners {
                c.eval.inner = inner;
                c.validate()?;
            }
        }
    }
    let kind = ctx.config.model.kind;
    let mut rows = Vec::new();
    for &b in &args.base_classes {
        let mut config = ctx.config.clone();
        config.world.base_classes = b;
        let table = generate_table(&config)?;
        let base = pretrain_on(&config, &table)?;
        let train_source = TableSource::new(&table, Split::BaseVal)?;
        let eval_source = TableSource::new(&table, Split::BaseTest)?;
        for &shots in &args.shots {
            config.episode.shots = shots;
            for &variant in &args.variants {
                let grads: Vec<Option<GradientMethod>> = if variant.is_learned() {
                    args.grads.iter().copied().map(Some).collect()
                } else {
                    vec![None]
                };
                for grad in grads {
                    let meta = match (variant, grad) {
                        (Variant::Attractor(mode), Some(g)) => {
                            config.meta.gradient = g;
                            info!("training {variant} b={b} shots={shots} grad={g}");
                            Some(train_model(&config, &train_source, &base, kind, mode, ctx.exec)?.0)
                        }
                        _ => None,
                    };
                    for &inner in &args.inners {
                        config.eval.inner = inner;
                        let report =
                            evaluate_variant(&config, &eval_source, &base, variant, meta.as_ref(), ctx.exec)?;
                        let key = RowKey {
                            variant: variant.to_string(),
                            kind: kind.to_string(),
                            shots,
                            base_classes: b,
                            grad: grad.map_or("-".into(), |g| g.to_string()),
                            inner: inner_label(inner),
                        };
                        rows.push((key, report));
                    }
                }
            }
        }
    }
    let csv_path = ctx.resolve(args.csv, "sweep.csv")?;
    write_metrics_csv(&csv_path, &rows)?;
    let mut m = ctx.manifest("sweep")?;
    m.output(&csv_path)?;
    m.write(out)
}
