//! `mpa`: command-line front end for the few-shot segmentation pipeline.
//!
//! Exit status is 0 on success, 2 when the configuration is invalid and 1 for
//! any other failure.

use std::fs;
use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mpa::backend::stub::{serve, serve_tcp, StubConfig, StubSegment};
use mpa::backend::BackendKind;
use mpa::formats::{read_field, write_field};
use mpa::io::{load_image, load_mask, save_mask};
use mpa::pipeline::{
    build_embedder, build_segmenter, choose_supports, embed_dataset, evaluate, make_synthetic_dataset, run,
    LoadedDataset, PipelineConfig, SelectionFile,
};
use mpa::register::{propagate_mask, register};
use mpa::segment::refine;
use mpa::{generate_prompts, BinaryMask, Image, PromptSet, SegmentationRequest};

#[derive(Parser)]
#[command(name = "mpa", version, about = "Few-shot segmentation by registration-based mask propagation")]
struct Cli {
    /// TOML file with pipeline settings; unset keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Worker threads for per-query jobs (0 = all CPUs).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset root holding `images/` and `masks/`.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Number of support samples.
    #[arg(short, long)]
    k: Option<usize>,
    /// Use the first K ids instead of embedding-based selection.
    #[arg(long)]
    no_es: bool,
    /// Embedding backend: `toy`, `tcp://host:port` or `exec:<command>`.
    #[arg(long, value_name = "BACKEND")]
    embedder: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run selection, propagation, prompting and segmentation over a dataset.
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        /// Keep the coarse masks as the prediction.
        #[arg(long)]
        no_pa: bool,
        /// Skip the refinement round.
        #[arg(long)]
        no_pr: bool,
        /// Segmentation backend: `mock`, `tcp://host:port` or `exec:<command>`.
        #[arg(long, value_name = "BACKEND")]
        segmenter: Option<String>,
    },
    /// Embed a dataset and choose its support samples.
    Select {
        #[command(flatten)]
        data: DatasetArgs,
    },
    /// Register a moving image onto a fixed image and write the field.
    Register {
        moving: PathBuf,
        fixed: PathBuf,
        /// Field file (default `<output>/field.mpad`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warp a support mask through a deformation field.
    Propagate {
        mask: PathBuf,
        field: PathBuf,
        /// Coarse mask file (default `<output>/coarse.png`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive point, box and mask prompts from a coarse mask.
    Prompt {
        coarse: PathBuf,
        /// Prompt file (default `<output>/prompts.json`); logits go beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image with a prompt file.
    Segment {
        image: PathBuf,
        prompts: PathBuf,
        /// Refinement rounds (default from the configuration).
        #[arg(long)]
        rounds: Option<usize>,
        /// Segmentation backend: `mock`, `tcp://host:port` or `exec:<command>`.
        #[arg(long, value_name = "BACKEND")]
        segmenter: Option<String>,
        /// Mask file (default `<output>/mask.png`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dice of predicted masks against ground truth, matched by file name.
    Evaluate {
        predictions: PathBuf,
        truth: PathBuf,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a reproducible synthetic dataset.
    Synth {
        #[arg(short, long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Dataset root (default `--output`, else `data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference backend speaking the wire protocol, for tests and demos.
    #[command(hide = true)]
    BackendStub(StubArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StubKind {
    Embedder,
    Segmenter,
}

#[derive(Clone, Copy, ValueEnum)]
enum StubMode {
    Box,
    Logits,
    Fixed,
}

#[derive(Args)]
struct StubArgs {
    #[arg(long, value_enum)]
    kind: StubKind,
    /// Comma-separated vector to answer every embed request with.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    vector: Option<Vec<f32>>,
    #[arg(long, value_enum, default_value = "box")]
    segment: StubMode,
    /// Mask returned in `fixed` mode.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Where result masks are written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Serve one TCP connection on this address instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn apply_dataset(cfg: &mut PipelineConfig, d: &DatasetArgs) -> Result<()> {
    if let Some(root) = &d.dataset {
        cfg.dataset_root = root.clone();
    }
    if let Some(k) = d.k {
        cfg.k = k;
    }
    if d.no_es {
        cfg.toggles.es = false;
    }
    if let Some(e) = &d.embedder {
        cfg.embedding_backend = e.parse()?;
    }
    Ok(())
}

fn out_path(cfg: &PipelineConfig, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

/// Load a mask, resizing to `(h, w)` when the file differs and the target
/// is square.
fn mask_like(path: &Path, h: usize, w: usize) -> Result<BinaryMask> {
    let m = load_mask(path, None)?;
    if m.dims() != (h, w) && h == w {
        return Ok(load_mask(path, Some(h))?);
    }
    Ok(m)
}

fn image_like(path: &Path, h: usize, w: usize) -> Result<Image<f32>> {
    let img = load_image::<f32>(path, None)?;
    if img.dims() != (h, w) && h == w {
        return Ok(load_image::<f32>(path, Some(h))?);
    }
    Ok(img)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn cmd_run(mut cfg: PipelineConfig, data: &DatasetArgs, no_pa: bool, no_pr: bool, seg: &Option<String>) -> Result<()> {
    apply_dataset(&mut cfg, data)?;
    if no_pa {
        cfg.toggles.pa = false;
        cfg.toggles.pr = false;
    }
    if no_pr {
        cfg.toggles.pr = false;
    }
    if let Some(s) = seg {
        cfg.segmentation_backend = s.parse()?;
    }
    let report = run(&cfg)?;
    let a = &report.aggregates;
    println!("toggles   {}", report.manifest.toggles);
    println!("supports  {}", report.manifest.support_ids.join(" "));
    println!(
        "queries   {} ({} failed, {} fallback)",
        a.queries, a.failures, a.fallbacks
    );
    println!("coarse    {} ± {}", fmt_opt(a.coarse_dice_mean), fmt_opt(a.coarse_dice_std));
    println!("final     {} ± {}", fmt_opt(a.final_dice_mean), fmt_opt(a.final_dice_std));
    println!("report    {}", cfg.output_dir.join("report.json").display());
    Ok(())
}

fn cmd_select(mut cfg: PipelineConfig, data: &DatasetArgs) -> Result<()> {
    apply_dataset(&mut cfg, data)?;
    cfg.validate()?;
    let loaded = LoadedDataset::load(&cfg.dataset_root, cfg.image_size)?;
    cfg.validate_for(loaded.records.len())?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let embedder = build_embedder(&cfg)?;
    let embeddings = embed_dataset(embedder.as_ref(), &loaded, &cfg.output_dir)?;
    let sel = choose_supports(&loaded.ids(), &embeddings, cfg.k, cfg.toggles.es)?;
    let path = cfg.output_dir.join("selection.json");
    SelectionFile::new(&sel).write(&path)?;
    println!("supports  {}", sel.support_ids.join(" "));
    println!("objective {:.6}", sel.objective);
    println!("written   {}", path.display());
    Ok(())
}

fn cmd_register(cfg: &PipelineConfig, moving: &Path, fixed: &Path, out: &Option<PathBuf>) -> Result<()> {
    cfg.registration.validate()?;
    let size = Some(cfg.image_size);
    let m = load_image::<f64>(moving, size)?.grayscale();
    let f = load_image::<f64>(fixed, size)?.grayscale();
    let field = register(&m, &f, &cfg.registration)?;
    let path = out_path(cfg, out, "field.mpad");
    write_field(&field.cast::<f32>(), &path)?;
    println!("mean displacement {:.3} px", field.mean_magnitude());
    println!("written   {}", path.display());
    Ok(())
}

fn cmd_propagate(cfg: &PipelineConfig, mask: &Path, field: &Path, out: &Option<PathBuf>) -> Result<()> {
    let field = read_field(field)?;
    let (h, w) = field.dims();
    let coarse = propagate_mask(&mask_like(mask, h, w)?, &field)?.threshold();
    let path = out_path(cfg, out, "coarse.png");
    save_mask(&coarse, &path)?;
    println!("foreground {} px", coarse.count());
    println!("written   {}", path.display());
    Ok(())
}

fn cmd_prompt(cfg: &PipelineConfig, coarse: &Path, out: &Option<PathBuf>) -> Result<()> {
    cfg.prompt.validate()?;
    let mask = load_mask(coarse, None)?;
    let prompts = generate_prompts(&mask.to_soft::<f32>(), &cfg.prompt);
    let path = out_path(cfg, out, "prompts.json");
    prompts.write(&path)?;
    let fg = prompts.foreground();
    let b = &prompts.bbox;
    println!("point     ({}, {})", fg.x, fg.y);
    println!("box       [{}, {}, {}, {}]", b.x_min, b.y_min, b.x_max, b.y_max);
    if prompts.fallback {
        println!("fallback  coarse mask was empty");
    }
    println!("written   {}", path.display());
    Ok(())
}

fn cmd_segment(
    mut cfg: PipelineConfig,
    image: &Path,
    prompts: &Path,
    rounds: Option<usize>,
    seg: &Option<String>,
    out: &Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = seg {
        cfg.segmentation_backend = s.parse()?;
    }
    let prompts = PromptSet::read(prompts)?;
    let img = image_like(image, prompts.height, prompts.width)?;
    let backend = build_segmenter(&cfg)?;
    let id = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let first = backend.segment(&SegmentationRequest {
        sample_id: &id,
        image: &img,
        prompts: &prompts,
    })?;
    let rounds = rounds.unwrap_or(cfg.refinement_rounds);
    let result = refine(backend.as_ref(), &id, &img, &prompts, first, rounds, cfg.prompt.soften_scale);
    let path = out_path(&cfg, out, "mask.png");
    save_mask(&result.mask, &path)?;
    println!("confidence {:.4} after {} round(s)", result.confidence, result.round);
    if let Some(w) = &result.warning {
        println!("warning   {w}");
    }
    println!("written   {}", path.display());
    Ok(())
}

fn cmd_evaluate(predictions: &Path, truth: &Path, out: &Option<PathBuf>) -> Result<()> {
    let report = evaluate(predictions, truth)?;
    for r in &report.rows {
        println!("{:<24} {:.4}{}", r.id, r.dice, if r.missing { "  (missing)" } else { "" });
    }
    println!("mean      {:.4} ± {:.4} over {} ({} missing)", report.mean, report.std, report.rows.len(), report.missing);
    if let Some(path) = out {
        let mut text = serde_json::to_vec_pretty(&report)?;
        text.push(b'\n');
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, n: usize, seed: u64, out: &Option<PathBuf>) -> Result<()> {
    let root = out.clone().or_else(|| cli.output.clone()).unwrap_or_else(|| PathBuf::from("data"));
    let records = make_synthetic_dataset(n, seed, &root)?;
    println!("{} samples written to {}", records.len(), root.display());
    Ok(())
}

fn cmd_stub(a: &StubArgs) -> Result<()> {
    let segment = match a.segment {
        StubMode::Box => StubSegment::Box,
        StubMode::Logits => StubSegment::LogitsThreshold,
        StubMode::Fixed => match &a.mask {
            Some(p) => StubSegment::FixedMask(p.clone()),
            None => bail!("--segment fixed needs --mask"),
        },
    };
    let out_dir = a.out_dir.clone().unwrap_or_else(|| std::env::temp_dir().join("mpa-stub"));
    let cfg = StubConfig {
        kind: match a.kind {
            StubKind::Embedder => BackendKind::Embedder,
            StubKind::Segmenter => BackendKind::Segmenter,
        },
        vector: a.vector.clone(),
        segment,
        out_dir,
    };
    match &a.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(listener, &cfg)?;
        }
        None => serve(BufReader::new(io::stdin().lock()), io::stdout().lock(), &cfg)?,
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::BackendStub(a) = &cli.command {
        return cmd_stub(a);
    }
    if let Command::Synth { n, seed, out } = &cli.command {
        return cmd_synth(cli, *n, *seed, out);
    }
    if let Command::Evaluate { predictions, truth, out } = &cli.command {
        return cmd_evaluate(predictions, truth, out);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run {
            data,
            no_pa,
            no_pr,
            segmenter,
        } => cmd_run(cfg, data, *no_pa, *no_pr, segmenter),
        Command::Select { data } => cmd_select(cfg, data),
        Command::Register { moving, fixed, out } => cmd_register(&cfg, moving, fixed, out),
        Command::Propagate { mask, field, out } => cmd_propagate(&cfg, mask, field, out),
        Command::Prompt { coarse, out } => cmd_prompt(&cfg, coarse, out),
        Command::Segment {
            image,
            prompts,
            rounds,
            segmenter,
            out,
        } => cmd_segment(cfg, image, prompts, *rounds, segmenter, out),
        Command::BackendStub(_) | Command::Synth { .. } | Command::Evaluate { .. } => unreachable!("handled above"),
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<mpa::Error>(), Some(mpa::Error::Config(_))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
