use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ac2d::causal::CausalMode;
use ac2d::dataset::Dataset;
use ac2d::image::{heat_overlay, Image};
use ac2d::landmarks::{LandmarkSet, Scheme};
use ac2d::metrics::LabelStats;
use ac2d::model::{Model, ModelConfig, Profile, Variant};
use ac2d::prior::generate_priors;
use ac2d::rules::RuleSet;
use ac2d::synth::{synth_generate, Confounder, ConfounderMode, SynthSpec};
use ac2d::train::{evaluate, make_batch, train, AugmentConfig, TrainConfig};
use ac2d::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "ac2d", version, about = "Facial action unit detection with constrained attention and causal heads")]
struct Cli {
    /// Print human-readable tables in addition to key=value lines.
    #[arg(long, global = true)]
    table: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write prior attention maps for a landmark set.
    GenPrior(GenPriorArgs),
    /// Render averaged attention and individual channels over input images.
    VizAttention(VizArgs),
    /// Generate a synthetic dataset.
    SynthData(SynthArgs),
    /// Train and evaluate all six variants with shared seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Clone, Default)]
struct Hyper {
    /// TOML file with any of the hyperparameter fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long = "lambda-a")]
    lambda_a: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "lr")]
    base_lr: Option<f64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Summarize banks with this many k-means entries instead of the mean.
    #[arg(long)]
    dictionary: Option<usize>,
    /// Sub-center rules file; the bundled rules are used otherwise.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    profile: Option<Profile>,
    l: Option<usize>,
    c: Option<usize>,
    k: Option<usize>,
    n: Option<[usize; 3]>,
    delta: Option<f64>,
    lambda_a: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    base_lr: Option<f64>,
    variant: Option<String>,
    dictionary: Option<usize>,
    trunk_width: Option<usize>,
    mlp_ratio: Option<usize>,
    jitter: Option<f64>,
    weight_decay: Option<f64>,
    clip_norm: Option<f64>,
    warmup_epochs: Option<usize>,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Hyper {
    fn resolve(&self, aus: Vec<u32>, scheme: Scheme) -> Result<(ModelConfig, TrainConfig)> {
        let file: ConfigFile = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let profile = self.profile.or(file.profile).unwrap_or(Profile::Desk);
        let mut m = ModelConfig::profile(profile, aus);
        m.scheme = scheme;
        let mut t = TrainConfig::default();
        macro_rules! pick {
            ($dst:expr, $flag:expr, $file:expr) => {
                if let Some(v) = $flag.or($file) {
                    $dst = v;
                }
            };
        }
        pick!(m.l, self.l, file.l);
        pick!(m.c, self.c, file.c);
        pick!(m.k, self.k, file.k);
        pick!(m.n, None, file.n);
        pick!(m.delta, self.delta, file.delta);
        pick!(m.lambda_a, self.lambda_a, file.lambda_a);
        pick!(m.trunk_width, None, file.trunk_width);
        pick!(m.mlp_ratio, None, file.mlp_ratio);
        pick!(t.epochs, self.epochs, file.epochs);
        pick!(t.batch_size, self.batch_size, file.batch_size);
        pick!(t.jitter, None, file.jitter);
        pick!(t.weight_decay, None, file.weight_decay);
        pick!(t.clip_norm, None, file.clip_norm);
        pick!(t.warmup_epochs, None, file.warmup_epochs);
        t.base_lr = self.base_lr.or(file.base_lr);
        if let Some(seed) = self.seed.or(file.seed) {
            m.seed = seed;
            t.seed = seed;
        }
        if let Some(v) = self.variant {
            m.variant = v;
        } else if let Some(v) = &file.variant {
            m.variant = v.parse()?;
        }
        if let Some(entries) = self.dictionary.or(file.dictionary) {
            m.causal_mode = CausalMode::Dictionary { entries };
        }
        m.validate()?;
        Ok((m, t))
    }

    fn rules(&self) -> Result<RuleSet> {
        match &self.rules {
            Some(p) => RuleSet::load(p),
            None => Ok(RuleSet::default()),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Evaluation split; the training split is evaluated otherwise.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Start from the parameters of an earlier checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write per-sample probabilities as CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args)]
struct GenPriorArgs {
    /// CSV landmarks file (first data row is used); the template is used otherwise.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated AU ids; every AU with a rule by default.
    #[arg(long, value_delimiter = ',')]
    aus: Vec<u32>,
    /// Crop side; the grid side is a eighth of it.
    #[arg(long, default_value_t = 176)]
    l: usize,
    #[arg(long, default_value_t = 3.0)]
    delta: f64,
    #[arg(long, default_value = "49")]
    scheme: String,
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Also write PNG overlays onto this image (or onto a blank canvas with `--png`).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Attention channels (head * n + query row) to render besides the average.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,6,12,17")]
    aus: Vec<u32>,
    /// TOML synthetic specification; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    confound: String,
    #[arg(long = "confound-au")]
    confound_au: Option<u32>,
    /// `train` correlates the confounder with the label, `eval` does not.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    hyper: Hyper,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Spec(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Version(_) | Error::Geometry(_) | Error::Index { .. } => 3,
        Error::Numeric(_) | Error::State(_) | Error::Tensor(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, cli.table),
        Command::Eval(a) => cmd_eval(a, cli.table),
        Command::GenPrior(a) => cmd_gen_prior(a),
        Command::VizAttention(a) => cmd_viz(a),
        Command::SynthData(a) => cmd_synth(a),
        Command::Ablate(a) => cmd_ablate(a, cli.table),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(a: TrainArgs, table: bool) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let eval = a.eval.as_deref().map(Dataset::load).transpose()?;
    let rules = a.hyper.rules()?;
    let (mcfg, tcfg) = a.hyper.resolve(data.meta.aus.clone(), data.meta.scheme)?;
    let mut model = Model::<f32>::build(&mcfg)?;
    if let Some(init) = &a.init {
        let src = Model::<f32>::load(init)?;
        model.params.load_named(src.params.names().iter().cloned().zip(src.params.values().iter().cloned()).collect())?;
    }
    println!("variant={}", mcfg.variant);
    println!("params={}", model.param_count());
    let report = train(&mut model, &data, eval.as_ref(), &tcfg, &rules, Some(&a.out))?;
    let last = report.epochs.last().expect("at least one epoch");
    println!("epochs={}", report.epochs.len());
    println!("steps={}", report.steps);
    println!("loss={:.6}", last.loss);
    println!("kl_init={:.6}", report.initial_kl);
    println!("kl_final={:.6}", last.kl);
    print!("{}", report.final_eval.report.key_values());
    println!("checkpoint={}", a.out.join("model.ckpt").display());
    if table {
        print!("{}", report.final_eval.report.table(mcfg.variant.name()));
    }
    let stats_path = a.out.join("label_stats.toml");
    let text = toml::to_string(&report.stats).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&stats_path, text).map_err(|e| Error::Data(format!("{}: {e}", stats_path.display())))
}

fn cmd_eval(a: EvalArgs, table: bool) -> Result<()> {
    let model = Model::<f32>::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let rules = match &a.rules {
        Some(p) => RuleSet::load(p)?,
        None => RuleSet::default(),
    };
    let stats_path = a.checkpoint.with_file_name("label_stats.toml");
    let stats: Option<LabelStats> = std::fs::read_to_string(&stats_path)
        .ok()
        .map(|t| toml::from_str(&t).map_err(|e| Error::Data(format!("{}: {e}", stats_path.display()))))
        .transpose()?;
    let ev = evaluate(&model, &data, &rules, stats.as_ref(), 32)?;
    println!("samples={}", data.len());
    if let Some(l) = ev.loss {
        println!("loss={l:.6}");
    }
    println!("kl={:.6}", ev.kl);
    print!("{}", ev.report.key_values());
    if table {
        print!("{}", ev.report.table(model.config.variant.name()));
    }
    if let Some(path) = &a.dump {
        let mut s = String::from("sample_id");
        for au in &model.config.aus {
            let _ = write!(s, ",AU{au}");
        }
        s.push('\n');
        for (sample, row) in data.samples.iter().zip(&ev.predictions) {
            s.push_str(&sample.id);
            for p in row {
                let _ = write!(s, ",{p:.9}");
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn first_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let row = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && l.split(',').nth(1).is_some_and(|v| v.trim().parse::<f64>().is_ok()))
        .ok_or_else(|| Error::Data(format!("{}: no landmark rows", path.display())))?;
    let coords: Vec<f64> = row
        .split(',')
        .skip(1)
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect::<Result<_>>()?;
    LandmarkSet::from_flat(&coords)
}

fn cmd_gen_prior(a: GenPriorArgs) -> Result<()> {
    let rules = match &a.rules {
        Some(p) => RuleSet::load(p)?,
        None => RuleSet::default(),
    };
    let scheme = Scheme::parse(&a.scheme)?;
    let landmarks = match &a.landmarks {
        Some(p) => first_landmarks(p)?,
        None => LandmarkSet::template(scheme, a.l as f64),
    };
    let aus = if a.aus.is_empty() { rules.aus(landmarks.scheme)? } else { a.aus.clone() };
    let priors = generate_priors(&rules, &landmarks, &aus, a.l, a.delta)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    let canvas = match &a.image {
        Some(p) => Some(Image::load(p)?),
        None if a.png => Some(Image::new(a.l, a.l)),
        None => None,
    };
    for p in &priors {
        let path = a.out.join(format!("AU{}.agt", p.au));
        p.save(&path)?;
        let total: f64 = p.values.iter().sum();
        println!("au={} side={} sum={total:.12} file={}", p.au, p.side, path.display());
        if let Some(img) = &canvas {
            heat_overlay(img, &p.values, p.side).save(&a.out.join(format!("AU{}.png", p.au)))?;
        }
    }
    Ok(())
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let model = Model::<f32>::load(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let rules = match &a.rules {
        Some(p) => RuleSet::load(p)?,
        None => RuleSet::default(),
    };
    let cfg = &model.config;
    let count = a.samples.min(data.len());
    if count == 0 {
        return Err(Error::Usage("no samples to render".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
    let ids: Vec<usize> = (0..count).collect();
    let crop = AugmentConfig::eval(cfg.l);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = make_batch::<f32, _>(&data.samples, &ids, &cfg.aus, &crop, cfg.delta, &rules, &mut rng)?;
    let pred = model.predict(batch.images.clone(), None)?;
    let g = cfg.grid();
    let n = g * g;
    let rows = cfg.k * n;
    for (b, &i) in ids.iter().enumerate() {
        let view = Image::from_data(cfg.l, cfg.l, batch.images.data()[b * 3 * cfg.l * cfg.l..(b + 1) * 3 * cfg.l * cfg.l].to_vec())?;
        for (j, au) in cfg.aus.iter().enumerate() {
            let avg = &pred.avg_attention[j][b * n..(b + 1) * n];
            let path = a.out.join(format!("{}_AU{au}_avg.png", data.samples[i].id));
            heat_overlay(&view, avg, g).save(&path)?;
            println!("sample={} au={au} file={}", data.samples[i].id, path.display());
            for &ch in &a.channels {
                if ch >= rows {
                    return Err(Error::Usage(format!("channel {ch} out of range (0..{rows})")));
                }
                let start = (b * rows + ch) * n;
                let map = &pred.attention[j][start..start + n];
                let path = a.out.join(format!("{}_AU{au}_ch{ch}.png", data.samples[i].id));
                heat_overlay(&view, map, g).save(&path)?;
            }
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be positive".into()));
    }
    let rules = match &a.rules {
        Some(p) => RuleSet::load(p)?,
        None => RuleSet::default(),
    };
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Spec(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::desk(a.aus.clone()),
    };
    let mode = match a.confound.as_str() {
        "none" => ConfounderMode::None,
        "tint" => ConfounderMode::Tint,
        "patch" => ConfounderMode::Patch,
        other => return Err(Error::Usage(format!("unknown confounder {other:?}"))),
    };
    if mode != ConfounderMode::None {
        let au = a.confound_au.unwrap_or(spec.aus[0]);
        let (p_present, p_absent) = match a.split.as_str() {
            "train" => (0.9, 0.1),
            "eval" => (0.5, 0.5),
            other => return Err(Error::Usage(format!("unknown split {other:?}"))),
        };
        spec.confounder = Confounder {
            mode,
            au,
            p_present,
            p_absent,
            strength: 0.3,
        };
    }
    let ds = synth_generate(&spec, &rules, a.n, a.seed)?;
    ds.save(&a.out)?;
    let labels = ds.labels();
    println!("samples={}", ds.len());
    for (j, au) in spec.aus.iter().enumerate() {
        let rate = labels.iter().filter(|r| r[j] == 1).count() as f64 / ds.len() as f64;
        println!("rate_au{au}={rate:.4}");
    }
    println!("out={}", a.out.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs, table: bool) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let eval = Dataset::load(&a.eval)?;
    let rules = a.hyper.rules()?;
    let (base, tcfg) = a.hyper.resolve(data.meta.aus.clone(), data.meta.scheme)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut f1 = vec![0.0; base.m()];
        let mut avg = 0.0;
        for &seed in &a.seeds {
            let mcfg = ModelConfig { variant, seed, ..base.clone() };
            let t = TrainConfig { seed, ..tcfg.clone() };
            let mut model = Model::<f32>::build(&mcfg)?;
            let out = a.out.join(format!("{}_seed{seed}", variant.name()));
            let rep = train(&mut model, &data, Some(&eval), &t, &rules, Some(&out))?;
            for (acc, v) in f1.iter_mut().zip(&rep.final_eval.report.f1) {
                *acc += v / a.seeds.len() as f64;
            }
            avg += rep.final_eval.report.average / a.seeds.len() as f64;
        }
        let mut line = format!("variant={}", variant.name());
        for (au, v) in base.aus.iter().zip(&f1) {
            let _ = write!(line, " f1_au{au}={v:.4}");
        }
        let _ = write!(line, " f1_avg={avg:.4}");
        println!("{line}");
        rows.push((variant, f1, avg));
    }
    if table {
        let mut head = format!("{:<8}", "");
        for au in &base.aus {
            let _ = write!(head, "{:>7}", format!("AU{au}"));
        }
        println!("{head}{:>7}", "Avg");
        for (v, f1, avg) in &rows {
            let mut line = format!("{:<8}", v.name());
            for x in f1 {
                let _ = write!(line, "{x:>7.1}");
            }
            println!("{line}{avg:>7.1}");
        }
    }
    Ok(())
}
