use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};

use clim::augmentation::{make_views, Mixing};
use clim::checkpoint::{checkpoint_name, load_checkpoint, save_checkpoint, Checkpoint};
use clim::config::RunConfig;
use clim::dataset::{generate_synthetic, load_ppm_dir, load_tensor_file, save_ppm, save_tensor_file, Dataset, SyntheticSpec};
use clim::evaluation::{finetune_fraction, intra_class_similarity, knn_probe, linear_probe, ProbeConfig};
use clim::neighborhood::{compute_bank, kmeans_fit, select_positives};
use clim::numerics::{mean, Rng};
use clim::reporting::{aggregate, compare_strategies, format_ranking, format_table, load_run};
use clim::trainer::{pretrain_with, Strategy};
use clim::{ClimError, ErrorClass};

#[derive(Parser)]
#[command(name = "clim", version, about = "Center-wise local image mixture contrastive pretraining")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    GenData(GenDataArgs),
    /// Run contrastive pre-training.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Dump the positive sets selected for one anchor.
    Select(SelectArgs),
    /// Write augmented and mixed views of two images.
    Augment(AugmentArgs),
    /// Aggregate evaluated runs into comparison tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Standard deviation of each class blob in latent space.
    #[arg(long, default_value_t = clim::dataset::DEFAULT_BLOB_STDDEV)]
    stddev: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tensor file or directory of P6 images [default: data.path from the config, else synthetic data]
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// instance, random, knn, kmeans, knn_and_kmeans, center_wise or clim [default: from config]
    #[arg(long)]
    strategy: Option<Strategy>,
    /// cutmix, mixup or none [default: from config]
    #[arg(long)]
    mixing: Option<Mixing>,
    /// [default: from config]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: from config]
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated output resolutions, base first [default: from config]
    #[arg(long, value_delimiter = ',')]
    resolutions: Option<Vec<usize>>,
    /// Write a checkpoint every this many epochs; 0 keeps only the first and last.
    #[arg(long, default_value_t = 10)]
    ckpt_every: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Linear,
    Knn,
    Finetune,
    IntraSim,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Linear => "linear",
            Metric::Knn => "knn",
            Metric::Finetune => "finetune",
            Metric::IntraSim => "intra_sim",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::Linear)]
    metric: Metric,
    /// Fraction of training labels used by the fine-tune metric.
    #[arg(long, default_value_t = 0.01)]
    fraction: f64,
    /// Number of evaluation seeds, counted up from --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe settings; the `eval` section of a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also append the per-seed lines to this file (`clim report` reads `<run>/eval.tsv`).
    #[arg(long)]
    append: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    anchor: usize,
    #[arg(long, default_value_t = 40)]
    k: usize,
    /// Number of k-means clusters, or `auto` for max(2, n/128).
    #[arg(long, default_value = "auto")]
    clusters: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    anchor: usize,
    /// Image mixed into the anchor; defaults to the anchor itself.
    #[arg(long)]
    positive: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32,24")]
    resolutions: Vec<usize>,
    /// cutmix, mixup or none
    #[arg(long, default_value = "cutmix")]
    mixing: Mixing,
    /// Beta(alpha, alpha) prior of the CutMix ratio.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding config.json and eval.tsv.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let class = err
        .chain()
        .find_map(|e| e.downcast_ref::<ClimError>())
        .map(ClimError::class)
        .or_else(|| err.chain().any(|e| e.is::<std::io::Error>()).then_some(ErrorClass::Io));
    match class {
        Some(ErrorClass::Io) => 2,
        Some(ErrorClass::Numeric) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{line}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::Select(a) => select(a),
        Command::Augment(a) => augment(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn set_threads(n: usize) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    let ds = if path.is_dir() { load_ppm_dir(path)? } else { load_tensor_file(path)? };
    if ds.is_empty() {
        return Err(ClimError::invalid(format!("{} holds no images", path.display())).into());
    }
    Ok(ds)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| ClimError::io(path, e).into())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).map_err(|e| ClimError::io(path, e).into())
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        class_count: a.classes,
        per_class: a.per_class,
        latent_dim: a.latent_dim,
        image_side: a.side,
        channels: a.channels,
        blob_stddev: a.stddev,
        seed: a.seed,
    };
    let ds = generate_synthetic(&spec)?;
    save_tensor_file(&ds, &a.out)?;
    log::info!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    set_threads(a.threads)?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.strategy {
        cfg.train.strategy = s;
    }
    if let Some(m) = a.mixing {
        cfg.train.mixing = m;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = a.resolutions {
        cfg.augment.resolutions = r;
    }
    if let Some(p) = a.data {
        cfg.data.path = Some(p);
    }
    let dataset = match &cfg.data.path {
        Some(p) => load_data(p)?,
        None => {
            log::info!("no data path given; generating the configured synthetic set");
            generate_synthetic(&cfg.data.synthetic)?
        }
    };
    if let Some(dims) = dataset.shape() {
        cfg.train.encoder.channels = dims.2;
    }
    cfg.train.encoder.input_side = cfg.augment.base_resolution();
    cfg.validate()?;

    create_dir(&a.out)?;
    write_file(&a.out.join("config.json"), cfg.to_json() + "\n")?;
    let train = cfg.train_config();
    let last = train.epochs;
    let every = a.ckpt_every;
    let out = pretrain_with(&dataset, &train, |epoch, state| {
        if epoch == 0 || epoch == last || (every > 0 && epoch % every == 0) {
            let ck = Checkpoint {
                query: state.query.clone(),
                key: state.key.clone(),
                epoch,
            };
            save_checkpoint(&ck, a.out.join(checkpoint_name(epoch)))?;
        }
        if epoch > 0 {
            log::info!("epoch {epoch}/{last} done, step {}", state.step);
        }
        Ok(())
    })?;
    write_file(&a.out.join("metrics.tsv"), out.metrics_log())?;
    let mut epochs = String::new();
    for e in &out.epochs {
        let intra = e.intra_sim.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
        epochs.push_str(&format!("{}\t{}\t{:.6}\t{intra}\n", e.epoch, e.strategy, e.mean_loss));
    }
    write_file(&a.out.join("epochs.tsv"), epochs)?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    set_threads(a.threads)?;
    let ck = load_checkpoint(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    if dataset.labels().is_none() {
        return Err(ClimError::LabelsRequired.into());
    }
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?.eval,
        None => ProbeConfig::default(),
    };
    if a.seeds == 0 {
        return Err(ClimError::invalid("--seeds must be at least 1").into());
    }
    let mut lines = String::new();
    let mut values = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        let cfg = ProbeConfig {
            seed,
            label_fraction: a.fraction,
            ..base.clone()
        };
        cfg.validate()?;
        let v = match a.metric {
            Metric::Linear => linear_probe(&ck.query, &dataset, &cfg)?,
            Metric::Knn => knn_probe(&ck.query, &dataset, &cfg)?,
            Metric::Finetune => finetune_fraction(&ck.query, &dataset, &cfg)?,
            Metric::IntraSim => intra_class_similarity(&ck.query, &dataset, cfg.exec)?.mean,
        };
        values.push(v);
        lines.push_str(&format!("{}\t{v:.6}\t{seed}\n", a.metric.name()));
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(lines.as_bytes())?;
    if a.seeds > 1 {
        writeln!(stdout, "{}\t{:.6}\tmean", a.metric.name(), mean(&values))?;
    }
    if let Some(path) = &a.append {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ClimError::io(path, e))?;
        f.write_all(lines.as_bytes()).map_err(|e| ClimError::io(path, e))?;
    }
    Ok(())
}

fn select(a: SelectArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let dataset = load_data(&a.data)?;
    let n = dataset.len();
    if a.anchor >= n {
        bail!(ClimError::invalid(format!("anchor {} out of range for {n} images", a.anchor)));
    }
    let m = if a.clusters == "auto" {
        clim::neighborhood::NeighborhoodConfig::default().cluster_count(n)
    } else {
        a.clusters
            .parse::<usize>()
            .map_err(|_| ClimError::invalid(format!("--clusters expects a count or `auto`, got {:?}", a.clusters)))?
    };
    let bank = compute_bank(&ck.key.params, &dataset, ck.epoch as u64, Default::default())?;
    let model = kmeans_fit(&mut Rng::new(a.seed), &bank, m, 100, 1e-6)?;
    let sel = select_positives(&bank, &model, a.anchor, a.k)?;
    let center = model.center(sel.cluster);
    let to_center = |i: usize| clim::numerics::l2_distance(bank.row(i), center);
    let mut out = format!(
        "anchor\t{}\ncluster\t{}\ncenter_distance\t{:.6}\nomega1\t{}\nomega2\t{}\nomega_p\t{}\n",
        sel.anchor,
        sel.cluster,
        sel.anchor_center_distance,
        sel.omega1.len(),
        sel.omega2.len(),
        sel.omega_p.len()
    );
    for &i in &sel.omega1 {
        out.push_str(&format!("member\tomega1\t{i}\t{:.6}\n", bank.distance(a.anchor, i)));
    }
    for (&i, d) in sel.omega2.iter().zip(&sel.omega2_distances) {
        out.push_str(&format!("member\tomega2\t{i}\t{d:.6}\n"));
    }
    for &i in &sel.omega_p {
        out.push_str(&format!("member\tomega_p\t{i}\t{:.6}\n", to_center(i)?));
    }
    print!("{out}");
    Ok(())
}

fn augment(a: AugmentArgs) -> anyhow::Result<()> {
    let dataset = load_data(&a.data)?;
    let n = dataset.len();
    let positive = a.positive.unwrap_or(a.anchor);
    for (flag, idx) in [("anchor", a.anchor), ("positive", positive)] {
        if idx >= n {
            bail!(ClimError::invalid(format!("--{flag} {idx} out of range for {n} images")));
        }
    }
    let cfg = clim::augmentation::AugConfig {
        resolutions: a.resolutions,
        alpha: a.alpha,
        ..Default::default()
    };
    cfg.validate()?;
    create_dir(&a.out)?;
    let (img_a, img_p) = (dataset.image(a.anchor), dataset.image(positive));
    let render = |x, y, mixing| make_views(&mut Rng::new(a.seed), x, y, &cfg, mixing, (a.anchor, positive));
    let mixed = render(img_a, img_p, a.mixing)?;
    // Augmentation parameters are drawn before the mixing ratio, so these
    // share the crop, flip and color draws of the mixed views.
    let plain_a = render(img_a, img_a, Mixing::None)?;
    let plain_p = render(img_p, img_p, Mixing::None)?;
    let mut manifest = String::new();
    for ((v, pa), pp) in mixed.iter().zip(&plain_a).zip(&plain_p) {
        let r = v.resolution;
        save_ppm(&v.image, a.out.join(format!("mixed_r{r}.ppm")))?;
        save_ppm(&pa.image, a.out.join(format!("anchor_r{r}.ppm")))?;
        save_ppm(&pp.image, a.out.join(format!("positive_r{r}.ppm")))?;
        let bbox = v
            .mask
            .map_or_else(|| "-".into(), |m| format!("{},{},{},{}", m.bbox.x0, m.bbox.y0, m.bbox.x1, m.bbox.y1));
        manifest.push_str(&format!("{}\t{}\t{r}\t{:.6}\t{bbox}\t{}\n", v.anchor, v.positive, v.lambda, a.seed));
    }
    write_file(&a.out.join("manifest.tsv"), manifest)?;
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for dir in &a.runs {
        match load_run(dir) {
            Ok(r) => rows.push(r),
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }
    if rows.is_empty() {
        bail!(ClimError::invalid("no readable runs"));
    }
    let table = aggregate(&rows);
    print!("{}\n{}", format_table(&table), format_ranking(&compare_strategies(&table)));
    Ok(())
}
