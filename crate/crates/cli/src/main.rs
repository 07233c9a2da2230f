use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hepatoscan::anatomy::SkeletonTemplate;
use hepatoscan::atlas::{build_template, generate_reference_atlas, LiverShapeType, TemplateAtlas};
use hepatoscan::io::{
    read_atlas, read_mask, read_skeleton, read_volume, write_atlas, write_mask, write_skeleton,
    write_volume,
};
use hepatoscan::phantom::{self, PhantomKind, PhantomSpec};
use hepatoscan::pipeline::{
    evaluate, run_batch, run_study, write_outcome, Pipeline, PipelineConfig, StudySource, StudyStatus,
};
use hepatoscan::Error;

#[derive(Parser)]
#[command(name = "hepatoscan", version, about = "CT liver localization, segmentation and densitometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process one study.
    Segment(SegmentArgs),
    /// Process every study of a local directory or HTTP source.
    Batch(BatchArgs),
    /// Generate a synthetic study with ground truth.
    Phantom(PhantomArgs),
    /// Build a template atlas from masks or from the shape generator.
    AtlasBuild(AtlasArgs),
    /// Score batch outputs against a corpus manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Common {
    /// Template atlas directory.
    #[arg(long)]
    atlas: PathBuf,
    /// Skeleton template file.
    #[arg(long)]
    skeleton: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BatchArgs {
    /// Directory of `*.mvol` files or HTTP base URL.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    kind: PhantomKind,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    liver_hu: Option<f64>,
    #[arg(long)]
    fov_fraction: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    liver_scale: Option<f64>,
    #[arg(long)]
    shape: Option<LiverShapeType>,
    /// Output volume file.
    #[arg(long)]
    out: PathBuf,
    /// Directory for truth masks and the manifest.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct AtlasArgs {
    /// Use the procedural reference atlas.
    #[arg(long, conflicts_with = "masks", required_unless_present = "masks", requires = "seed")]
    generate: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Lines of `id mask_path [shape_type]`, paths relative to the file.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its process exit code.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Source(_) => 3,
            _ => 2,
        };
        Failure(code, e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure(1, format!("{}: {e}", p.display())))?;
            let mut cfg = PipelineConfig::default();
            cfg.apply_text(&text)?;
            cfg
        }
        None => PipelineConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure(1, format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn load_models(common: &Common) -> Result<(TemplateAtlas, SkeletonTemplate), Failure> {
    Ok((read_atlas(&common.atlas)?, read_skeleton(&common.skeleton)?))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure(2, format!("{}: {e}", dir.display())))
}

fn segment(args: SegmentArgs) -> CliResult {
    let cfg = load_config(&args.common)?;
    cfg.validate()?;
    let (atlas, skeleton) = load_models(&args.common)?;
    let vol = read_volume(&args.input)?;
    let id = args
        .input
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".mvol").unwrap_or(n).to_string())
        .unwrap_or_else(|| "study".to_string());
    create_dir(&args.common.out)?;
    let mut outcome = run_study(&id, &vol, &atlas, &skeleton, &cfg);
    write_outcome(&args.common.out, &mut outcome)?;
    print!("{}", outcome.report);
    eprintln!("{id}: {} ({:.0} ms)", outcome.status, outcome.timings.total_ms);
    match outcome.status {
        StudyStatus::Error(m) => Err(Failure(2, m)),
        _ => Ok(()),
    }
}

fn batch(args: BatchArgs) -> CliResult {
    let mut cfg = load_config(&args.common)?;
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.source {
        cfg.source = Some(s);
    }
    cfg.validate()?;
    let source = cfg
        .source
        .as_deref()
        .map(StudySource::parse)
        .ok_or_else(|| Failure(1, "no study source: pass --source or set `source`".into()))?;
    let (atlas, skeleton) = load_models(&args.common)?;
    let pipeline = Pipeline::new(atlas, skeleton, cfg)?;
    let summary = run_batch(&source, &pipeline, &args.common.out)?;
    print!("{}", summary.render());
    Ok(())
}

fn phantom_cmd(args: PhantomArgs) -> CliResult {
    let mut spec = PhantomSpec::new(args.kind, args.seed);
    if let Some(v) = args.liver_hu {
        spec.liver_hu = v;
    }
    if let Some(v) = args.fov_fraction {
        spec.fov_liver_fraction = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma_hu = v;
    }
    if let Some(v) = args.liver_scale {
        spec.liver_scale = v;
    }
    if let Some(v) = args.shape {
        spec.shape = v;
    }
    let (vol, truth) = phantom::generate(&spec)?;
    write_volume(&vol, &args.out)?;
    let Some(dir) = args.truth else {
        return Ok(());
    };
    create_dir(&dir)?;
    let id = args
        .out
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".mvol").unwrap_or(n).to_string())
        .unwrap_or_else(|| format!("phantom{}", args.seed));
    let rel = if truth.label {
        let file = format!("{id}.liver.mvol");
        write_mask(&truth.liver_mask, dir.join(&file))?;
        if let Some(lesion) = &truth.lesion_mask {
            write_mask(lesion, dir.join(format!("{id}.lesion.mvol")))?;
        }
        file
    } else {
        "-".to_string()
    };
    // Replace any earlier line for this id so reruns stay idempotent.
    let manifest = dir.join("manifest.txt");
    let old = std::fs::read_to_string(&manifest).unwrap_or_default();
    let mut lines: Vec<String> = old
        .lines()
        .filter(|l| l.split_whitespace().next() != Some(id.as_str()))
        .map(String::from)
        .collect();
    lines.push(phantom::manifest_line(&id, &spec, &truth, &rel));
    lines.sort();
    std::fs::write(&manifest, lines.join("\n") + "\n")
        .map_err(|e| Failure(2, format!("{}: {e}", manifest.display())))
}

fn atlas_build(args: AtlasArgs) -> CliResult {
    let atlas = match (&args.masks, args.seed) {
        (Some(list), _) => atlas_from_masks(list)?,
        (None, Some(seed)) => generate_reference_atlas(seed)?,
        (None, None) => return Err(Failure(1, "pass --generate --seed N or --masks FILE".into())),
    };
    write_atlas(&atlas, &args.out)?;
    if args.generate {
        write_skeleton(&phantom::skeleton_template(), args.out.join("skeleton.txt"))?;
    }
    println!("wrote {} templates to {}", atlas.len(), args.out.display());
    Ok(())
}

fn atlas_from_masks(list: &Path) -> Result<TemplateAtlas, Failure> {
    let text = std::fs::read_to_string(list)
        .map_err(|e| Failure(2, format!("{}: {e}", list.display())))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut templates = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: String| Failure(2, format!("{} line {}: {m}", list.display(), n + 1));
        let (id, path, shape) = match f[..] {
            [id, path] => (id, path, None),
            [id, path, t] => (
                id,
                path,
                Some(t.parse::<LiverShapeType>().map_err(|_| bad(format!("unknown type {t}")))?),
            ),
            _ => return Err(bad("expected `id mask_path [shape_type]`".into())),
        };
        let mask = read_mask(base.join(path))?;
        templates.push(build_template(&mask, id, shape).map_err(|e| bad(e.to_string()))?);
    }
    Ok(TemplateAtlas::new(templates)?)
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult {
    let stats = evaluate(&args.manifest, &args.outputs)?;
    let text = stats.render();
    std::fs::write(&args.out, &text).map_err(|e| Failure(2, format!("{}: {e}", args.out.display())))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Segment(a) => segment(a),
        Command::Batch(a) => batch(a),
        Command::Phantom(a) => phantom_cmd(a),
        Command::AtlasBuild(a) => atlas_build(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
