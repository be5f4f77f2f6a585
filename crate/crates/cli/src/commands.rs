//! Subcommand implementations. Each writes its artifacts plus a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use usg_core::model::{ablate, majority_baseline};
use usg_core::phantom::ImageSize;
use usg_core::{
    build_dataset, poor_starts, run_episodes, Dataset, DemoPlan, Experience, GuidanceConfig, Hyper, ModelConfig,
    PhantomConfig, QualityModel, SourceFilter, Variant,
};

use crate::error::CliError;
use crate::manifest::{default_path, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "usg",
    version,
    about = "Ultrasound scanning quality model and guidance experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic demonstration dataset
    GenData(GenDataArgs),
    /// Train a quality model
    Train(TrainArgs),
    /// Train every variant several times and compare
    Ablate(AblateArgs),
    /// Run closed-loop guidance episodes from poor starts
    Guide(GuideArgs),
    /// Serve sessions over HTTP and WebSocket
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 6000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Target fraction of label-1 samples
    #[arg(long, default_value_t = 0.378)]
    pub pos_frac: f64,
    /// Keep every generated trajectory instead of balancing
    #[arg(long)]
    pub no_balance: bool,
    #[arg(long, default_value_t = 50)]
    pub steps_per_trajectory: usize,
    /// Square image side; ignored when --phantom is given
    #[arg(long, default_value_t = 64)]
    pub image: usize,
    /// Phantom config (TOML)
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data.usgd")]
    pub out: PathBuf,
    /// Defaults to <out>.manifest.json
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f32,
    #[arg(long, default_value_t = 20)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of trajectories held out for validation
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
}

impl HyperArgs {
    fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, default_value = "data.usgd")]
    pub data: PathBuf,
    #[arg(long, default_value_t = Variant::Net4)]
    pub variant: Variant,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Epochs of image-encoder pretraining before the main run
    #[arg(long, default_value_t = 0)]
    pub warm_start_epochs: usize,
    #[arg(long, default_value = "model.usgm")]
    pub out: PathBuf,
    /// Per-epoch CSV log
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Defaults to <output>.manifest.json
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, default_value = "data.usgd")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, value_delimiter = ',', default_value = "net1,net2,net3,net4")]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
    /// Defaults to <output>.manifest.json
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GuidanceArgs {
    /// Candidates sampled per suggestion
    #[arg(long = "n", default_value_t = 1000)]
    pub n_samples: usize,
    /// Geodesic pose bound (rad)
    #[arg(long, default_value_t = 0.2)]
    pub pose_bound: f64,
    /// Per-component wrench bound: Fx,Fy,Fz (N), Tx,Ty,Tz (N·mm)
    #[arg(long, value_delimiter = ',', default_value = "2,2,2,20,20,20")]
    pub force_bound: Vec<f64>,
    /// Experience source: all | positives_only
    #[arg(long, default_value = "all")]
    pub filter: String,
}

impl GuidanceArgs {
    fn config(&self, seed: u64) -> Result<GuidanceConfig, CliError> {
        let force_bound: [f64; 6] = self
            .force_bound
            .clone()
            .try_into()
            .map_err(|_| CliError::Usage("--force-bound takes six values".into()))?;
        let cfg = GuidanceConfig {
            n_samples: self.n_samples,
            pose_bound: self.pose_bound,
            force_bound,
            seed,
            ..GuidanceConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn filter(&self) -> Result<SourceFilter, CliError> {
        Ok(self.filter.parse()?)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GuideArgs {
    #[arg(long, default_value = "model.usgm")]
    pub model: PathBuf,
    /// Dataset supplying the experience and the start states
    #[arg(long, default_value = "data.usgd")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub episodes: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for per-episode CSV logs and summary.json
    #[arg(long, default_value = "rollouts")]
    pub out_dir: PathBuf,
    /// Defaults to <output>.manifest.json
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "model.usgm")]
    pub model: PathBuf,
    /// Dataset supplying the guidance experience
    #[arg(long, default_value = "data.usgd")]
    pub data: PathBuf,
    /// Default phantom for new sessions; the dataset's phantom otherwise
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    pub filter: String,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Session seed used when a create request does not give one
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "serve.manifest.json")]
    pub manifest: PathBuf,
}

fn manifest_path(explicit: &Option<PathBuf>, primary: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| default_path(primary))
}

pub fn gen_data(args: &GenDataArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let phantom = match &args.phantom {
        Some(p) => PhantomConfig::load(p)?,
        None => PhantomConfig::with_image(args.image, args.image, 1),
    };
    let plan = DemoPlan::standard(args.samples as usize, args.steps_per_trajectory);
    let target = (!args.no_balance).then_some(args.pos_frac);
    let data = build_dataset(&plan, &phantom, args.seed, target)?;
    data.save(&args.out)?;
    let stats = data.stats()?;
    println!("{stats}");

    let mut m = RunManifest::new("gen-data", args);
    m.seed("generation", args.seed).config("phantom", &phantom.to_toml());
    if let Some(p) = &args.phantom {
        m.input(p)?;
    }
    m.output(&args.out)?;
    m.results = serde_json::to_value(&stats).unwrap_or_default();
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&manifest_path(&args.manifest, &args.out))?;
    Ok(m)
}

fn model_config(variant: Variant, data: &Dataset) -> ModelConfig {
    let image: ImageSize = data.phantom.image;
    ModelConfig::desk(variant).with_image(image)
}

pub fn train(args: &TrainArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let data = Dataset::load(&args.data)?;
    let (train, val) = data.split(args.hyper.val_frac, args.hyper.seed)?;
    let hyper = args.hyper.hyper();
    let config = model_config(args.variant, &data);
    let mut model = QualityModel::build(config, hyper.seed)?;
    let mut results = serde_json::Map::new();
    if args.warm_start_epochs > 0 {
        let warm = model.pretrain_image_encoder(
            &train,
            Some(&val),
            &Hyper {
                epochs: args.warm_start_epochs,
                ..hyper
            },
        )?;
        results.insert("warm_start_val_accuracy".into(), json!(warm.final_evaluation.accuracy));
    }
    let report = model.train(&train, Some(&val), &hyper)?;
    model.save(&args.out)?;
    println!(
        "{}: val accuracy {:.4} (majority baseline {:.4}) after {} epochs in {:.1} s",
        args.variant,
        report.final_evaluation.accuracy,
        majority_baseline(&val),
        hyper.epochs,
        report.wall_clock_s
    );
    if let Some(log) = &args.log {
        std::fs::write(log, report.to_csv()).map_err(|e| CliError::io(log, e))?;
    }

    let mut m = RunManifest::new("train", args);
    m.seed("train", hyper.seed)
        .seed("split", args.hyper.seed)
        .config("model", &serde_json::to_string(&model.config).unwrap_or_default())
        .config("phantom", &data.phantom.to_toml());
    m.input(&args.data)?.output(&args.out)?;
    if let Some(log) = &args.log {
        m.output(log)?;
    }
    results.insert("final_val_accuracy".into(), json!(report.final_evaluation.accuracy));
    results.insert("majority_baseline".into(), json!(majority_baseline(&val)));
    results.insert(
        "epochs".into(),
        serde_json::to_value(&report.epochs).unwrap_or_default(),
    );
    m.results = serde_json::Value::Object(results);
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&manifest_path(&args.manifest, &args.out))?;
    Ok(m)
}

pub fn ablate_cmd(args: &AblateArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let data = Dataset::load(&args.data)?;
    let (train, val) = data.split(args.hyper.val_frac, args.hyper.seed)?;
    let base = model_config(Variant::Net4, &data);
    let report = ablate(&base, &args.variants, &train, &val, &args.hyper.hyper(), args.repeats)?;
    std::fs::write(&args.out, report.to_csv()).map_err(|e| CliError::io(&args.out, e))?;
    print!("{report}");

    let mut m = RunManifest::new("ablate", args);
    m.seed("base", args.hyper.seed)
        .config("model", &serde_json::to_string(&base).unwrap_or_default());
    m.input(&args.data)?.output(&args.out)?;
    m.results = serde_json::to_value(&report).unwrap_or_default();
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&manifest_path(&args.manifest, &args.out))?;
    Ok(m)
}

pub fn guide(args: &GuideArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let model = QualityModel::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let cfg = args.guidance.config(args.seed)?;
    let experience = Experience::harvest(&data, args.guidance.filter()?)?;
    let starts = poor_starts(&data, args.episodes, args.seed)?;
    let (logs, summary) = run_episodes(&model, &data.phantom, &experience, &starts, args.steps, &cfg)?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let mut m = RunManifest::new("guide", args);
    for (i, log) in logs.iter().enumerate() {
        let path = args.out_dir.join(format!("episode_{i:03}.csv"));
        std::fs::write(&path, log.to_csv()).map_err(|e| CliError::io(&path, e))?;
        m.output(&path)?;
    }
    let summary_path = args.out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
    std::fs::write(&summary_path, text + "\n").map_err(|e| CliError::io(&summary_path, e))?;
    println!(
        "{} of {} episodes improved ({:.0}%), mean oracle score {:.3} -> {:.3}",
        summary.improved,
        summary.episodes,
        100.0 * summary.success_rate,
        summary.mean_start_score,
        summary.mean_final_score
    );

    m.seed("guidance", args.seed)
        .config("guidance", &serde_json::to_string(&cfg).unwrap_or_default())
        .config("phantom", &data.phantom.to_toml());
    m.input(&args.model)?.input(&args.data)?.output(&summary_path)?;
    m.results = serde_json::to_value(&summary).unwrap_or_default();
    m.wall_clock_s = start.elapsed().as_secs_f64();
    m.write(&manifest_path(&args.manifest, &summary_path))?;
    Ok(m)
}

pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let model = QualityModel::load(&args.model)?;
    let data = Dataset::load(&args.data)?;
    let phantom = match &args.phantom {
        Some(p) => PhantomConfig::load(p)?,
        None => data.phantom.clone(),
    };
    let experience = Experience::harvest(&data, args.filter.parse()?)?;
    let state = crate::service::AppState::new(model, experience, phantom, args.seed)?;

    let mut m = RunManifest::new("serve", args);
    m.seed("default_session", args.seed)
        .config("phantom", &state.phantom.to_toml());
    m.input(&args.model)?.input(&args.data)?;
    m.results = json!({ "model_hash": state.model_hash });
    m.write(&args.manifest)?;

    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Io(format!("bind {addr}: {e}")))?;
        tracing::info!(%addr, "listening");
        println!("listening on http://{addr}");
        crate::service::serve(listener, state, crate::service::shutdown_signal())
            .await
            .map_err(|e| CliError::Other(e.to_string()))
    })
}
