use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use regattn_core::config::{ConfigFile, CONTROL_KEYS};
use regattn_core::control::{ControlConfig, Method};
use regattn_core::eval::{
    aggregate_report, score_image, CropMode, Direction, EmbeddingProvider, MetricTable, StdKind,
    StubProvider,
};
use regattn_core::image::RgbImage;
use regattn_core::layout_file::LayoutFile;
use regattn_core::microdiff::{
    ddim_sample, preset, PromptConditioning, SampleRequest, SamplerConfig, ToyModel, ToyModelConfig,
};
use regattn_core::region::parse_annotated_prompt;
use regattn_core::simplescenes::{
    generate_dataset_with, list_examples, read_example, write_dataset, SceneError,
};
use regattn_core::wire::{self, WireEmbeddingProvider, WireResponse};

const EXIT_DATA: u8 = 3;
const EXIT_PROTOCOL: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "regattn",
    version,
    about = "Region-aware cross-attention control"
)]
struct Cli {
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the SimpleScenes dataset.
    GenDataset {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Let one example repeat an object from the same set.
        #[arg(long)]
        allow_repeats: bool,
    },
    /// Answer one CATP request file with one response file.
    Apply {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Run the toy denoiser and print per-site attention traces.
    Simulate(SimulateArgs),
    /// Score generated images with localized CLIP logits and probabilities.
    Eval(EvalArgs),
    /// Serve framed CATP requests on stdin/stdout or a Unix socket.
    Serve {
        #[arg(long, value_name = "PATH")]
        socket: Option<PathBuf>,
        /// Speak the CATE embedding protocol with this provider instead.
        #[arg(long, value_enum)]
        embeddings: Option<ProviderKind>,
    },
}

#[derive(Args, Debug)]
struct ControlArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    w_prime: Option<f64>,
    #[arg(long)]
    w_m: Option<f64>,
    #[arg(long)]
    w_a: Option<f64>,
    #[arg(long)]
    t_thr: Option<u32>,
    #[arg(long)]
    softness: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Dataset example directory (layout.json, prompt.txt, optional segmap.ppm).
    #[arg(long, value_name = "DIR", conflicts_with_all = ["layout", "prompt"])]
    example: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires = "prompt")]
    layout: Option<PathBuf>,
    /// Annotated prompt, e.g. "a {red ball:LEFT} and {a cube:RIGHT}".
    #[arg(long, requires = "layout")]
    prompt: Option<String>,
    #[command(flatten)]
    control: ControlArgs,
    /// DDIM steps.
    #[arg(long)]
    steps: Option<u32>,
    /// Run without the control branch.
    #[arg(long)]
    no_hint: bool,
    /// Write trace records here instead of stdout.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// One sub-directory per example, holding one image per seed.
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    provider: ProviderKind,
    /// Command started for `--provider wire`; it must speak CATE on stdin/stdout.
    #[arg(long, value_name = "CMD")]
    provider_cmd: Option<String>,
    #[arg(long, value_enum, default_value = "bbox")]
    crop: CropArg,
    /// Use the sample (n-1) standard deviation across seeds.
    #[arg(long)]
    sample_std: bool,
    /// Region tags left out of scoring.
    #[arg(long, value_delimiter = ',', default_value = "BG")]
    exclude: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ProviderKind {
    Stub,
    Wire,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CropArg {
    Bbox,
    Masked,
}

enum Failure {
    Data(anyhow::Error),
    Protocol(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<SceneError> for Failure {
    fn from(e: SceneError) -> Self {
        Failure::Data(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::GenDataset { out, allow_repeats } => {
            gen_dataset(&cli, out, *allow_repeats).map_err(Failure::Data)
        }
        Cmd::Apply { input, output } => apply(input, output),
        Cmd::Simulate(args) => simulate(&cli, args).map_err(Failure::Data),
        Cmd::Eval(args) => eval(&cli, args),
        Cmd::Serve { socket, embeddings } => {
            serve(socket.as_deref(), *embeddings).map_err(Failure::Protocol)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Protocol(e)) => {
            eprintln!("protocol error: {e:#}");
            ExitCode::from(EXIT_PROTOCOL)
        }
    }
}

fn load_config(cli: &Cli, extra_keys: &[&str]) -> Result<ConfigFile> {
    let Some(path) = &cli.config else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ConfigFile::parse(&text).with_context(|| format!("in {}", path.display()))?;
    let allowed: Vec<&str> = CONTROL_KEYS.iter().chain(extra_keys).copied().collect();
    cfg.check_keys(&allowed)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(cfg)
}

fn seed(cli: &Cli, cfg: &ConfigFile) -> Result<u64> {
    Ok(match cli.seed {
        Some(s) => s,
        None => cfg.parsed("seed")?.unwrap_or(0),
    })
}

fn gen_dataset(cli: &Cli, out: &Path, allow_repeats: bool) -> Result<()> {
    let cfg = load_config(cli, &["seed"])?;
    let examples = generate_dataset_with(seed(cli, &cfg)?, allow_repeats)?;
    write_dataset(&examples, out)?;
    eprintln!("wrote {} examples to {}", examples.len(), out.display());
    Ok(())
}

fn apply(input: &Path, output: &Path) -> Result<(), Failure> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let response = wire::handle_message(&bytes);
    fs::write(output, &response).with_context(|| format!("writing {}", output.display()))?;
    match WireResponse::decode(&response) {
        Ok(WireResponse::Error { status, message }) => {
            Err(Failure::Protocol(anyhow!("status {status}: {message}")))
        }
        Ok(WireResponse::Ok(_)) => Ok(()),
        Err(e) => Err(Failure::Protocol(e.into())),
    }
}

fn control_config(cfg: &ConfigFile, args: &ControlArgs, total_steps: u32) -> Result<ControlConfig> {
    let method = match args.method {
        Some(m) => m,
        None => cfg.parsed::<Method>("method")?.unwrap_or(Method::None),
    };
    let mut control = cfg.control(preset(method, total_steps))?;
    control.method = method;
    if args.w_m.is_some() || args.w_a.is_some() {
        control = control.with_boost(
            args.w_m.unwrap_or(control.w_m),
            args.w_a.unwrap_or(control.w_a),
        );
    }
    control.w_prime = args.w_prime.unwrap_or(control.w_prime);
    control.t_thr = args.t_thr.unwrap_or(control.t_thr);
    control.softness = args.softness.unwrap_or(control.softness);
    control.validate()?;
    Ok(control)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let cfg = load_config(cli, &["seed", "steps"])?;
    let (layout, prompt, segmap) = match (&args.example, &args.layout, &args.prompt) {
        (Some(dir), _, _) => {
            let ex = read_example(dir)?;
            (ex.layout, ex.prompt, ex.segmap)
        }
        (None, Some(path), Some(text)) => {
            let json =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let layout = LayoutFile::from_json(&json)?.to_layout()?;
            (layout, parse_annotated_prompt(text)?, None)
        }
        _ => bail!("give either --example or both --layout and --prompt"),
    };
    let mut sampler = SamplerConfig::default();
    sampler.steps = match args.steps {
        Some(s) => s,
        None => cfg.parsed("steps")?.unwrap_or(sampler.steps),
    };
    let control = control_config(&cfg, &args.control, sampler.total_steps)?;
    let model_cfg = ToyModelConfig::default();
    let model = ToyModel::new(model_cfg);
    let conditioning =
        PromptConditioning::from_prompt(&prompt, &layout, model_cfg.token_embed_dim)?;
    let hint = match (&segmap, args.no_hint) {
        (Some(img), false) => Some(img.downsample_unit(model_cfg.latent_size)),
        _ => None,
    };
    let out = ddim_sample(
        &model,
        &SampleRequest {
            prompt: &conditioning,
            layout: &layout,
            hint: hint.as_deref(),
            control,
            sampler,
            seed: seed(cli, &cfg)?,
        },
    )?;
    let sink: Box<dyn Write> = match &args.trace {
        Some(path) => Box::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    let mut sink = BufWriter::new(sink);
    for record in &out.traces {
        serde_json::to_writer(&mut sink, record)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    let n = out.latent.len() as f64;
    let mean = out.latent.iter().sum::<f64>() / n;
    let std = (out.latent.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let wrong = out
        .traces
        .iter()
        .map(|t| t.wrong_region_mass_max)
        .fold(0.0, f64::max);
    eprintln!(
        "method={} steps={} records={} latent_mean={mean:.6} latent_std={std:.6} max_wrong_region_mass={wrong:.3e}",
        control.method,
        sampler.steps,
        out.traces.len()
    );
    Ok(())
}

fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(h as usize, w as usize, img.into_raw())?)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref(),
                Some("png" | "ppm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

struct SpawnedProvider {
    child: Child,
    provider: WireEmbeddingProvider<std::process::ChildStdout, std::process::ChildStdin>,
}

fn spawn_provider(cmd: &str) -> Result<SpawnedProvider> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .with_context(|| format!("starting provider `{cmd}`"))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    Ok(SpawnedProvider {
        child,
        provider: WireEmbeddingProvider::new(stdout, stdin),
    })
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<(), Failure> {
    let _ = load_config(cli, &[])?;
    let mut spawned = None;
    let mut stub = StubProvider::default();
    let provider: &mut dyn EmbeddingProvider = match args.provider {
        ProviderKind::Stub => &mut stub,
        ProviderKind::Wire => {
            let cmd = args
                .provider_cmd
                .as_deref()
                .ok_or_else(|| anyhow!("--provider wire needs --provider-cmd"))?;
            &mut spawned.insert(spawn_provider(cmd)?).provider
        }
    };
    let mode = match args.crop {
        CropArg::Bbox => CropMode::BoundingBox,
        CropArg::Masked => CropMode::MaskedBox,
    };
    let exclude: Vec<&str> = args.exclude.iter().map(String::as_str).collect();
    let (mut logits, mut probs) = (Vec::new(), Vec::new());
    for dir in list_examples(&args.dataset)? {
        let ex = read_example(&dir)?;
        let name = dir.file_name().unwrap_or_default();
        let images = image_files(&args.images.join(name))?;
        if images.is_empty() {
            return Err(anyhow!("no images for {}", dir.display()).into());
        }
        let (mut row_l, mut row_p) = (Vec::new(), Vec::new());
        for path in &images {
            let img = load_image(path)?;
            let scores = score_image(provider, &img, &ex.layout, &ex.prompt, &exclude, mode)
                .map_err(|e| {
                    let e = anyhow!("{}: {e}", path.display());
                    match args.provider {
                        ProviderKind::Wire => Failure::Protocol(e),
                        ProviderKind::Stub => Failure::Data(e),
                    }
                })?;
            row_l.push(scores.logit);
            row_p.push(scores.prob);
        }
        logits.push(row_l);
        probs.push(row_p);
    }
    let std_kind = if args.sample_std {
        StdKind::Sample
    } else {
        StdKind::Population
    };
    println!("{:<20} MEAN ± STD (BEST)", "metric");
    for (name, values) in [("local_clip_logits", logits), ("local_clip_probs", probs)] {
        let table =
            MetricTable::new(name, Direction::HigherBetter, values).map_err(anyhow::Error::from)?;
        let report = aggregate_report(&table, std_kind).map_err(anyhow::Error::from)?;
        let precision = if name.ends_with("probs") { 3 } else { 2 };
        println!("{name:<20} {report:.precision$}");
    }
    if let Some(mut s) = spawned {
        drop(s.provider);
        let _ = s.child.wait();
    }
    Ok(())
}

fn serve(socket: Option<&Path>, embeddings: Option<ProviderKind>) -> Result<()> {
    let session = move |r: &mut dyn io::Read, w: &mut dyn Write| -> io::Result<wire::ServeStats> {
        match embeddings {
            None => wire::serve(r, w),
            Some(ProviderKind::Stub) => wire::serve_embeddings(&mut StubProvider::default(), r, w),
            Some(ProviderKind::Wire) => Err(io::Error::other(
                "cannot serve embeddings over another wire provider",
            )),
        }
    };
    match socket {
        None => {
            let stats = session(
                &mut io::stdin().lock(),
                &mut BufWriter::new(io::stdout().lock()),
            )?;
            eprintln!(
                "served {} requests ({} errors)",
                stats.requests, stats.errors
            );
        }
        Some(path) => {
            let listener = std::os::unix::net::UnixListener::bind(path)
                .with_context(|| format!("binding {}", path.display()))?;
            for stream in listener.incoming() {
                let stream = stream?;
                std::thread::spawn(move || {
                    let mut reader = match stream.try_clone() {
                        Ok(r) => r,
                        Err(e) => return eprintln!("session error: {e}"),
                    };
                    let mut writer = BufWriter::new(stream);
                    if let Err(e) = session(&mut reader, &mut writer) {
                        eprintln!("session error: {e}");
                    }
                });
            }
        }
    }
    Ok(())
}
