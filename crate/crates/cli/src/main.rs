//! `odseg`: train, evaluate and run the optic-disc segmentation network,
//! check gradients, generate synthetic data, convert weights and serve the
//! annotation portal.

use std::fs;
use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use odseg_annotate::{auth, AuthPolicy, ServiceConfig};
use odseg_core::data::{self, Dataset, Manifest};
use odseg_core::metrics::{self, EvalReport};
use odseg_core::train::{self, Trainer, TrainingConfig};
use odseg_core::weights::{self, WeightFile};
use odseg_core::{gradcheck, LossKind, Model, ModelConfig, Tensor};

const VERSION: &str = env!("CARGO_PKG_VERSION");

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "odseg", version, about = "Optic disc segmentation toolkit")]
struct Cli {
    /// TOML file with one table per subcommand (`[train]`, `[eval]`, ...).
    /// Command-line flags take precedence over file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a manifest and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
    /// Compare analytical and numerical gradients of every component.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic fundus-like dataset with a manifest.
    Synth(SynthArgs),
    /// Rename the tensors of a weight file through a mapping table.
    WeightsConvert(ConvertArgs),
    /// Append a user to an annotation-service users file (password on stdin).
    AddUser(AddUserArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainArgs {
    /// Dataset manifest (`image<TAB>mask;mask<TAB>train|test`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for the checkpoint, history and evaluation report.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Square input side; a multiple of 32.
    #[arg(long)]
    size: Option<usize>,
    /// Channel width multiplier in (0, 1].
    #[arg(long)]
    width_multiplier: Option<f64>,
    /// bce | jaccard | combined.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    /// Fraction of the training split held out for validation.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Model initialisation seed; shuffle, augmentation and hold-out seeds
    /// derive from it unless given explicitly.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    augmentation_seed: Option<u64>,
    /// Pretrained encoder weights (converted to encoder tensor names).
    #[arg(long)]
    tl_weights: Option<PathBuf>,
    /// Enable on-the-fly augmentation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalArgs {
    /// Checkpoint written by `train` (its `.meta` sidecar must sit next to it).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train | test.
    #[arg(long)]
    split: Option<String>,
    /// Also write `eval.txt` and `eval.csv` here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PredictArgs {
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Binary mask PNG at the input resolution.
    #[arg(long)]
    out_mask: Option<PathBuf>,
    /// Input image with the predicted boundary drawn in green.
    #[arg(long)]
    out_overlay: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Largest spatial side of the random instances.
    #[arg(long)]
    size: Option<usize>,
    /// Random instances per component.
    #[arg(long)]
    instances: Option<usize>,
    /// Test hook: perturb one component's analytical gradient.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Square image side; a multiple of 32.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ConvertArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// `source target` lines; defaults to the VGG16 layer names.
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AddUserArgs {
    #[arg(long)]
    users_file: Option<PathBuf>,
    #[arg(long)]
    username: Option<String>,
}

#[derive(Args, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ServeArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    users_file: Option<PathBuf>,
    /// Built UI bundle served under `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    token_ttl_secs: Option<u64>,
    #[arg(long)]
    max_failures: Option<u32>,
    #[arg(long)]
    lockout_secs: Option<u64>,
}

/// Field-wise `flag.or(file)`.
macro_rules! overlay {
    ($flags:expr, $file:expr, [$($f:ident),* $(,)?]) => {{
        let (mut a, b) = ($flags, $file);
        $( if a.$f.is_none() { a.$f = b.$f; } )*
        a
    }};
}

fn section<T: DeserializeOwned + Default>(config: Option<&Path>, name: &str) -> CliResult<T> {
    let Some(path) = config else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => Ok(v
            .try_into()
            .map_err(|e| format!("{} [{name}]: {e}", path.display()))?),
    }
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| format!("missing required option --{flag} (flag or config file)").into())
}

fn banner(seed: u64, config_hash: &str) {
    eprintln!("odseg {VERSION} seed={seed} config={config_hash}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::Train(a) => {
            let a = overlay!(a, section::<TrainArgs>(cfg, "train")?, [
                manifest, out_dir, size, width_multiplier, loss, epochs, batch_size,
                learning_rate, plateau_patience, early_stop_patience, val_fraction, seed,
                shuffle_seed, augmentation_seed, tl_weights, augment,
            ]);
            cmd_train(a)
        }
        Command::Eval(a) => {
            let a = overlay!(a, section::<EvalArgs>(cfg, "eval")?, [weights, manifest, split, out_dir]);
            cmd_eval(a)
        }
        Command::Predict(a) => {
            let a = overlay!(a, section::<PredictArgs>(cfg, "predict")?, [
                weights, image, out_mask, out_overlay,
            ]);
            cmd_predict(a)
        }
        Command::Gradcheck(a) => {
            let a = overlay!(a, section::<GradcheckArgs>(cfg, "gradcheck")?, [
                seed, size, instances, corrupt,
            ]);
            cmd_gradcheck(a)
        }
        Command::Synth(a) => {
            let a = overlay!(a, section::<SynthArgs>(cfg, "synth")?, [n, size, seed, out_dir]);
            cmd_synth(a)
        }
        Command::WeightsConvert(a) => {
            let a = overlay!(a, section::<ConvertArgs>(cfg, "weights-convert")?, [
                input, output, mapping,
            ]);
            cmd_convert(a)
        }
        Command::AddUser(a) => {
            let a = overlay!(a, section::<AddUserArgs>(cfg, "add-user")?, [users_file, username]);
            cmd_add_user(a)
        }
        Command::Serve(a) => {
            let a = overlay!(a, section::<ServeArgs>(cfg, "serve")?, [
                data_dir, users_file, static_dir, host, port, token_ttl_secs, max_failures,
                lockout_secs,
            ]);
            cmd_serve(a)
        }
    }
}

fn write_report(report: &EvalReport, dir: &Path) -> CliResult<()> {
    fs::write(dir.join("eval.txt"), report.to_key_value())?;
    fs::write(dir.join("eval.csv"), report.to_csv())?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<ExitCode> {
    let manifest_path = required(a.manifest, "manifest")?;
    let out_dir = required(a.out_dir, "out-dir")?;
    let defaults = TrainingConfig::default();
    let seed = a.seed.unwrap_or(defaults.seed);
    let size = a.size.unwrap_or(224);
    let model_config = ModelConfig::new(size, size, a.width_multiplier.unwrap_or(1.0))?;
    let config = TrainingConfig {
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        plateau_patience: a.plateau_patience.unwrap_or(defaults.plateau_patience),
        early_stop_patience: a.early_stop_patience.unwrap_or(defaults.early_stop_patience),
        max_epochs: a.epochs.unwrap_or(defaults.max_epochs),
        seed,
        shuffle_seed: a.shuffle_seed.unwrap_or(seed.wrapping_add(1)),
        augmentation_seed: a.augmentation_seed.unwrap_or(seed.wrapping_add(2)),
        loss: match a.loss {
            Some(s) => s.parse::<LossKind>()?,
            None => defaults.loss,
        },
        use_transfer_learning: a.tl_weights.is_some(),
        use_augmentation: a.augment.unwrap_or(false),
        ..defaults
    };
    config.validate()?;
    let val_fraction = a.val_fraction.unwrap_or(0.1);
    banner(seed, &config.hash());

    let manifest = Manifest::read(&manifest_path)?;
    manifest.check_files()?;
    let split = data::load_and_preprocess(&manifest, (size, size))?;
    if split.test.is_empty() {
        return Err("manifest has no test records".into());
    }
    let (fit, val) = data::validation_split(&split.train, val_fraction, seed)?;
    log::info!(
        "{} fit / {} validation / {} test images at {size}x{size}",
        fit.len(),
        val.len(),
        split.test.len()
    );

    let mut model = Model::build(model_config, seed)?;
    if let Some(path) = &a.tl_weights {
        train::apply_transfer_weights(&mut model, &WeightFile::read(path)?)?;
        log::info!("encoder initialised from {}", path.display());
    }
    fs::create_dir_all(&out_dir)?;
    let outcome = Trainer::new(&config).out_dir(&out_dir).run(model, &fit, &val)?;
    let report = metrics::timed_evaluate(&outcome.model, &split.test)?;
    write_report(&report, &out_dir)?;
    print!("{}", report.to_key_value());
    println!(
        "best_epoch={} epochs_run={} stopped_early={}",
        outcome.history.best_epoch.unwrap_or(0),
        outcome.history.rows.len(),
        outcome.stopped_early
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> CliResult<ExitCode> {
    let weights_path = required(a.weights, "weights")?;
    let manifest = Manifest::read(required(a.manifest, "manifest")?)?;
    let (model, meta) = train::load_checkpoint(&weights_path)?;
    banner(0, &meta.config_hash);
    let cfg = model.config();
    let split = data::load_and_preprocess(&manifest, (cfg.height, cfg.width))?;
    let set: &Dataset = match a.split.as_deref().unwrap_or("test") {
        "test" => &split.test,
        "train" => &split.train,
        other => return Err(format!("unknown split '{other}' (expected train or test)").into()),
    };
    if set.is_empty() {
        return Err("selected split is empty".into());
    }
    let report = metrics::timed_evaluate(&model, set)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        write_report(&report, dir)?;
    }
    print!("{}", report.to_key_value());
    Ok(ExitCode::SUCCESS)
}

/// Mask pixels with a 4-neighbour outside the mask (or on the image edge).
fn boundary(mask: &[f32], h: usize, w: usize) -> Vec<bool> {
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] > 0.5
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = on(y, x)
                && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1));
        }
    }
    out
}

fn cmd_predict(a: PredictArgs) -> CliResult<ExitCode> {
    let (model, meta) = train::load_checkpoint(required(a.weights, "weights")?)?;
    let image = data::read_rgb(required(a.image, "image")?)?;
    let out_mask = required(a.out_mask, "out-mask")?;
    banner(0, &meta.config_hash);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let cfg = model.config();
    let start = Instant::now();
    let input = data::resize_bilinear(&image, cfg.height, cfg.width)?.reshape(&[1, cfg.height, cfg.width, 3])?;
    let prob = model.predict(&input)?.reshape(&[cfg.height, cfg.width, 1])?;
    let mask = data::resize_nearest(&metrics::binarize(&prob, metrics::THRESHOLD), h, w)?;
    let seconds = start.elapsed().as_secs_f64();
    data::write_mask(&mask, &out_mask)?;
    if let Some(path) = &a.out_overlay {
        let edge = boundary(mask.data(), h, w);
        let mut rgb = image.into_data();
        for (i, &e) in edge.iter().enumerate() {
            if e {
                rgb[3 * i..3 * i + 3].copy_from_slice(&[0.0, 1.0, 0.0]);
            }
        }
        data::write_rgb(&Tensor::from_vec(&[h, w, 3], rgb)?, path)?;
    }
    println!("disc_pixels={}", mask.sum() as u64);
    println!("seconds={seconds:.4}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<ExitCode> {
    let defaults = gradcheck::GradcheckOptions::default();
    let opts = gradcheck::GradcheckOptions {
        seed: a.seed.unwrap_or(defaults.seed),
        size: a.size.unwrap_or(defaults.size),
        instances: a.instances.unwrap_or(defaults.instances),
        corrupt: a.corrupt,
    };
    banner(opts.seed, &train::config_hash(&(opts.seed, opts.size, opts.instances, &opts.corrupt)));
    let report = gradcheck::run(&opts)?;
    print!("{}", report.to_text());
    if report.passed() {
        println!("gradcheck passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<ExitCode> {
    let n = required(a.n, "n")?;
    let size = a.size.unwrap_or(224);
    let seed = a.seed.unwrap_or(0);
    let out_dir = required(a.out_dir, "out-dir")?;
    banner(seed, &train::config_hash(&(n, size, seed)));
    let ds = data::generate_synthetic(n, size, seed)?;
    let manifest = data::write_dataset(&ds, &out_dir)?;
    println!("manifest={}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(a: ConvertArgs) -> CliResult<ExitCode> {
    let input = WeightFile::read(required(a.input, "input")?)?;
    let output = required(a.output, "output")?;
    let mapping = match &a.mapping {
        Some(p) => weights::parse_mapping(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
        None => weights::vgg16_mapping(),
    };
    let converted = input.remap(&mapping)?;
    converted.write(&output)?;
    println!("tensors={}", mapping.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_add_user(a: AddUserArgs) -> CliResult<ExitCode> {
    let path = required(a.users_file, "users-file")?;
    let username = required(a.username, "username")?;
    if username.is_empty() || username.contains(':') || username.contains(char::is_whitespace) {
        return Err("username must be non-empty without ':' or whitespace".into());
    }
    let mut password = String::new();
    std::io::stdin().lock().read_line(&mut password)?;
    let password = password.trim_end_matches(['\r', '\n']);
    if password.is_empty() {
        return Err("empty password on stdin".into());
    }
    if path.is_file() && auth::read_users(&path)?.contains_key(&username) {
        return Err(format!("user '{username}' already exists").into());
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    writeln!(f, "{}", auth::user_line(&username, password))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(a: ServeArgs) -> CliResult<ExitCode> {
    let defaults = AuthPolicy::default();
    let config = ServiceConfig {
        data_dir: required(a.data_dir, "data-dir")?,
        users_file: required(a.users_file, "users-file")?,
        static_dir: a.static_dir,
        auth: AuthPolicy {
            token_ttl: a.token_ttl_secs.map_or(defaults.token_ttl, Duration::from_secs),
            max_failures: a.max_failures.unwrap_or(defaults.max_failures),
            lockout: a.lockout_secs.map_or(defaults.lockout, Duration::from_secs),
        },
    };
    let host = a.host.unwrap_or_else(|| "127.0.0.1".into());
    let addr: SocketAddr = format!("{host}:{}", a.port.unwrap_or(8080))
        .parse()
        .map_err(|e| format!("invalid address {host}: {e}"))?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(odseg_annotate::serve(config, addr))?;
    Ok(ExitCode::SUCCESS)
}
