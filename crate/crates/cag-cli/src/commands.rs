//! Subcommand implementations.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use cag_core::attention::checks::{check_gather_equivalence, check_gradients};
use cag_core::config::AppConfig;
use cag_core::grounding::{
    ground, GroundingCache, GroundingSet, ImageRef, RemoteVlm, StubVlm, VlmBackend,
};
use cag_core::layout::{assign_positions, build_layout, Layout};
use cag_core::mask::{compile_mask, AttentionMask};
use cag_core::numerics::write_tensor;
use cag_core::toy::{
    ablate_dropout, export_attention_maps, generate_dataset, train_toy, BboxPolicy, EvalMode,
    MaskMode, ModelConfig, ToyDataset, ToyModel, ToyParams, TrainConfig,
};

use crate::{Cli, Command, OutputFormat};

/// Marker error for failed numeric checks (exit code 4).
#[derive(Debug)]
pub struct NumericCheckFailed(pub String);

impl std::fmt::Display for NumericCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "numeric check failed: {}", self.0)
    }
}

impl std::error::Error for NumericCheckFailed {}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn parse_pair_list(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',').map(parse_pair).collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|v| Ok(v.trim().parse()?)).collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| Ok(v.trim().parse()?)).collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>> {
    s.split(',').map(|v| Ok(v.trim().parse()?)).collect()
}

/// Writes `text` to `dir/name` when an output dir is set, and echoes it to
/// stdout otherwise.
fn emit(out: &Option<PathBuf>, name: &str, text: &str) -> Result<Option<PathBuf>> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            std::fs::write(&path, text)?;
            println!("wrote {}", path.display());
            Ok(Some(path))
        }
        None => {
            println!("{text}");
            Ok(None)
        }
    }
}

// --- layout -------------------------------------------------------------------

#[derive(Subcommand)]
pub enum LayoutCmd {
    /// Build a layout and assign 2D positions.
    Build(LayoutBuildArgs),
}

#[derive(Args)]
pub struct LayoutBuildArgs {
    #[arg(long)]
    n_refs: usize,
    /// Comma-separated per-reference VLM token counts, e.g. 64,64.
    #[arg(long)]
    vlm_ref_lens: String,
    #[arg(long)]
    text_len: usize,
    /// Target grid as ROWSxCOLS, e.g. 32x32.
    #[arg(long)]
    target_grid: String,
    /// Comma-separated reference grids, e.g. 32x32,32x32.
    #[arg(long)]
    ref_grids: String,
    /// Comma-separated source image sizes in pixels (HxW), e.g. 512x512,512x512.
    #[arg(long)]
    ref_image_sizes: String,
}

fn run_layout(cli: &Cli, args: &LayoutBuildArgs) -> Result<()> {
    let layout = assign_positions(build_layout(
        args.n_refs,
        &parse_usize_list(&args.vlm_ref_lens)?,
        args.text_len,
        parse_pair(&args.target_grid)?,
        &parse_pair_list(&args.ref_grids)?,
        &parse_pair_list(&args.ref_image_sizes)?,
    )?);
    emit(&cli.out, "layout.json", &layout.to_json())?;
    Ok(())
}

// --- ground -------------------------------------------------------------------

#[derive(Subcommand)]
pub enum GroundCmd {
    /// Query the configured remote VLM endpoint.
    Run(GroundArgs),
    /// Serve responses from a fixture file; no network traffic.
    Stub(GroundStubArgs),
}

#[derive(Args)]
pub struct GroundArgs {
    #[arg(long)]
    instruction: String,
    /// Comma-separated reference image paths.
    #[arg(long)]
    images: String,
    /// Comma-separated image sizes in pixels (HxW); defaults to reading
    /// none and validating against these values.
    #[arg(long)]
    image_sizes: String,
    /// Grounding cache directory (overrides the config file).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct GroundStubArgs {
    #[command(flatten)]
    common: GroundArgs,
    /// Fixture JSON: {"words": [...], "bboxes": {"word": [id, [x1,y1,x2,y2]]}}.
    #[arg(long)]
    fixtures: PathBuf,
}

fn run_ground(cli: &Cli, backend: &dyn VlmBackend, args: &GroundArgs) -> Result<()> {
    let config = AppConfig::load_or_default(cli.config.as_deref())?;
    let images: Vec<ImageRef> =
        args.images.split(',').map(|p| ImageRef::new(p.trim())).collect();
    let sizes = parse_pair_list(&args.image_sizes)?;
    let cache_dir = args.cache_dir.clone().or(config.cache.dir.clone());
    let cache = match &cache_dir {
        Some(dir) => Some(GroundingCache::new(dir)?),
        None => None,
    };
    let (set, warnings) = ground(backend, &args.instruction, &images, &sizes, cache.as_ref())?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    emit(&cli.out, "groundings.json", &set.to_json())?;
    Ok(())
}

// --- mask ---------------------------------------------------------------------

#[derive(Subcommand)]
pub enum MaskCmd {
    /// Compile the correspondence mask for a layout and grounding set.
    Compile(MaskCompileArgs),
    /// Expand a mask to its dense boolean tensor (CAGT bool).
    Expand(MaskExpandArgs),
}

#[derive(Args)]
pub struct MaskCompileArgs {
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    groundings: PathBuf,
    /// Image pixels per latent token.
    #[arg(long)]
    stride: usize,
    /// Compile the dropped branch: reference VAE keys removed everywhere.
    #[arg(long)]
    drop_vae: bool,
}

#[derive(Args)]
pub struct MaskExpandArgs {
    #[arg(long)]
    mask: PathBuf,
}

fn run_mask(cli: &Cli, cmd: &MaskCmd) -> Result<()> {
    match cmd {
        MaskCmd::Compile(args) => {
            let layout = Layout::from_json(&std::fs::read_to_string(&args.layout)?)?;
            let groundings = GroundingSet::from_json(&std::fs::read_to_string(&args.groundings)?)?;
            let mask = compile_mask(&layout, &groundings, args.drop_vae, args.stride)?;
            emit(&cli.out, "mask.json", &mask.to_json())?;
        }
        MaskCmd::Expand(args) => {
            let mask = AttentionMask::from_json(&std::fs::read_to_string(&args.mask)?)?;
            let dense = mask.expand_dense();
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("mask_dense.cagt");
            write_tensor(&path, &dense)?;
            println!("wrote {} ({} x {} bool)", path.display(), mask.n_tokens, mask.n_tokens);
        }
    }
    Ok(())
}

// --- attend -------------------------------------------------------------------

#[derive(Subcommand)]
pub enum AttendCmd {
    /// Gather-equivalence check: masked attention vs attention over the
    /// gathered allowed keys.
    CheckEquiv(CheckArgs),
    /// Finite-difference check of the analytic backward pass.
    CheckGrad(CheckArgs),
}

#[derive(Args)]
pub struct CheckArgs {
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
}

fn run_attend(cli: &Cli, cmd: &AttendCmd) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cmd {
        AttendCmd::CheckEquiv(args) => {
            let report = check_gather_equivalence(
                args.instances.unwrap_or(200),
                args.tokens.unwrap_or(64),
                seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.pass {
                bail!(NumericCheckFailed(format!(
                    "max abs diff {} exceeds {}",
                    report.max_abs_diff, report.tolerance
                )));
            }
        }
        AttendCmd::CheckGrad(args) => {
            let report =
                check_gradients(args.instances.unwrap_or(50), args.tokens.unwrap_or(12), seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.pass {
                bail!(NumericCheckFailed(format!(
                    "max rel err {} (tolerance {}), masked grads zero: {}",
                    report.max_rel_err, report.tolerance, report.masked_grads_exactly_zero
                )));
            }
        }
    }
    Ok(())
}

// --- toy ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BboxPolicyArg {
    Tight,
    Pad1,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskModeArg {
    Full,
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    WithVae,
    WithoutVae,
}

#[derive(Subcommand)]
pub enum ToyCmd {
    /// Generate a synthetic referential-copy dataset.
    Gen(ToyGenArgs),
    /// Train a toy model; writes a checkpoint and a run report.
    Train(ToyTrainArgs),
    /// Dropout-probability sweep; writes report.json and report.csv.
    Ablate(ToyAblateArgs),
}

#[derive(Args)]
pub struct ToyGenArgs {
    #[arg(long, default_value_t = 64)]
    scenes: usize,
    #[arg(long, default_value_t = 2)]
    refs: usize,
    #[arg(long, default_value_t = 6)]
    grid: usize,
    #[arg(long, value_enum, default_value_t = BboxPolicyArg::Tight)]
    bbox_policy: BboxPolicyArg,
}

#[derive(Args)]
pub struct ToyTrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = MaskModeArg::Masked)]
    mask_mode: MaskModeArg,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    p_vae: Option<f64>,
    #[arg(long)]
    p_text: Option<f64>,
    #[arg(long)]
    eval_scenes: Option<usize>,
}

#[derive(Args)]
pub struct ToyAblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated dropout probabilities, e.g. 0,0.5,1.0.
    #[arg(long)]
    p_list: String,
    /// Comma-separated seeds, e.g. 0,1,2.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, value_enum, default_value_t = EvalModeArg::WithoutVae)]
    eval_mode: EvalModeArg,
    #[arg(long, value_enum, default_value_t = MaskModeArg::Masked)]
    mask_mode: MaskModeArg,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_scenes: Option<usize>,
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().context("this command requires --out <dir>")?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn base_train_config(
    cli: &Cli,
    dataset: &ToyDataset,
    mask_mode: MaskModeArg,
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    eval_scenes: Option<usize>,
) -> Result<TrainConfig> {
    let config = AppConfig::load_or_default(cli.config.as_deref())?;
    let mut cfg = TrainConfig {
        model: ModelConfig {
            vocab_size: dataset.vocab.len(),
            feature_dim: dataset.params.feature_dim,
            ..Default::default()
        },
        mask_mode: match mask_mode {
            MaskModeArg::Full => MaskMode::Full,
            MaskModeArg::Masked => MaskMode::Masked,
        },
        dropout: config.dropout,
        sampler_steps: config.sampler.steps,
        ..Default::default()
    };
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    if let Some(e) = eval_scenes {
        cfg.n_eval_scenes = e;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_toy(cli: &Cli, cmd: &ToyCmd) -> Result<()> {
    match cmd {
        ToyCmd::Gen(args) => {
            let dir = out_dir(cli)?;
            let params = ToyParams {
                n_scenes: args.scenes,
                n_refs: args.refs,
                grid: args.grid,
                bbox_policy: match args.bbox_policy {
                    BboxPolicyArg::Tight => BboxPolicy::Tight,
                    BboxPolicyArg::Pad1 => BboxPolicy::Pad1,
                    BboxPolicyArg::Full => BboxPolicy::Full,
                },
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let dataset = generate_dataset(&params)?;
            dataset.save(&dir)?;
            println!("wrote dataset ({} scenes) to {}", dataset.scenes.len(), dir.display());
        }
        ToyCmd::Train(args) => {
            let dir = out_dir(cli)?;
            let dataset = ToyDataset::load(&args.dataset)?;
            let mut cfg = base_train_config(
                cli,
                &dataset,
                args.mask_mode,
                args.steps,
                args.batch_size,
                args.lr,
                args.eval_scenes,
            )?;
            if let Some(p) = args.p_vae {
                cfg.dropout.p_vae = p;
            }
            if let Some(p) = args.p_text {
                cfg.dropout.p_text = p;
            }
            let outcome = train_toy(&dataset, cfg, Some(&dir))?;
            outcome.model.save(dir.join("checkpoint"))?;
            std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&outcome.run)?)?;
            println!(
                "trained {} steps; final loss {:.6}; recon {:.6} (with vae) / {:.6} (without); wrote {}",
                outcome.run.losses.len(),
                outcome.run.losses.last().copied().unwrap_or(f64::NAN),
                outcome.run.eval_with_vae.recon_error,
                outcome.run.eval_without_vae.recon_error,
                dir.join("run.json").display()
            );
        }
        ToyCmd::Ablate(args) => {
            let dir = out_dir(cli)?;
            let dataset = ToyDataset::load(&args.dataset)?;
            let base = base_train_config(
                cli,
                &dataset,
                args.mask_mode,
                args.steps,
                args.batch_size,
                args.lr,
                args.eval_scenes,
            )?;
            let p_list = parse_f64_list(&args.p_list)?;
            let seeds = parse_u64_list(&args.seeds)?;
            let eval_mode = match args.eval_mode {
                EvalModeArg::WithVae => EvalMode::WithVae,
                EvalModeArg::WithoutVae => EvalMode::WithoutVae,
            };
            let report = ablate_dropout(&dataset, base, &p_list, &seeds, eval_mode)?;
            std::fs::write(dir.join("report.json"), report.to_json())?;
            std::fs::write(dir.join("report.csv"), report.to_csv())?;
            match cli.format {
                OutputFormat::Json => println!("{}", report.to_json()),
                OutputFormat::Csv => println!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}

// --- viz ----------------------------------------------------------------------

#[derive(Subcommand)]
pub enum VizCmd {
    /// Export a referential word's attention heatmaps over the reference
    /// grids as PGM + CAGT files.
    Attn(VizAttnArgs),
}

#[derive(Args)]
pub struct VizAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    scene: usize,
    #[arg(long)]
    word: String,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long, value_enum, default_value_t = MaskModeArg::Masked)]
    mask_mode: MaskModeArg,
}

fn run_viz(cli: &Cli, args: &VizAttnArgs) -> Result<()> {
    let dir = out_dir(cli)?;
    let dataset = ToyDataset::load(&args.dataset)?;
    let model: ToyModel<f32> = ToyModel::load(&args.checkpoint)?;
    let files = export_attention_maps(
        &model,
        &dataset,
        args.scene,
        &args.word,
        args.layer,
        args.head,
        match args.mask_mode {
            MaskModeArg::Full => MaskMode::Full,
            MaskModeArg::Masked => MaskMode::Masked,
        },
        cli.seed.unwrap_or(0),
        &dir,
    )?;
    for p in files.pgm.iter().chain(files.cagt.iter()) {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn make_remote(cli: &Cli) -> Result<RemoteVlm> {
    let config = AppConfig::load_or_default(cli.config.as_deref())?;
    let endpoint = config
        .vlm_endpoint()
        .context("no VLM endpoint configured; set [vlm] in the config file or CAG_VLM_URL")?;
    Ok(RemoteVlm::new(endpoint)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Layout { cmd: LayoutCmd::Build(args) } => run_layout(&cli, args),
        Command::Ground { cmd } => match cmd {
            GroundCmd::Run(args) => {
                let backend = make_remote(&cli)?;
                run_ground(&cli, &backend, args)
            }
            GroundCmd::Stub(args) => {
                let backend = StubVlm::from_file(&args.fixtures)?;
                run_ground(&cli, &backend, &args.common)
            }
        },
        Command::Mask { cmd } => run_mask(&cli, cmd),
        Command::Attend { cmd } => run_attend(&cli, cmd),
        Command::Toy { cmd } => run_toy(&cli, cmd),
        Command::Viz { cmd: VizCmd::Attn(args) } => run_viz(&cli, args),
    }
}
