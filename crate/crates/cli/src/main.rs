//! Command-line entry point.
//!
//! Subcommands: `pretrain`, `probe`, `grid`, `gradcheck`, `preview`.
//! Configuration is plain `key=value` text; command-line flags override
//! file values. Every run writes a manifest of the fully resolved
//! configuration (plus input hashes) into the output directory before any
//! work starts, and identical manifests reproduce outputs bit-exactly.
//!
//! Exit codes: 0 success, 1 invalid configuration or flags, 2 runtime
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use msr_core::augment::{make_views, ppm_bytes, AugSpec, Image};
use msr_core::data::{load_cifar_binary, synth_dataset, Dataset, SynthRecipe, SynthSpec};
use msr_core::error::Error;
use msr_core::eval::{
    beta_sweep_cells, linear_probe, run_grid, table1_cells, worker_threads, ExperimentGrid,
    FeatureSource, ProbeConfig,
};
use msr_core::gradcheck::check_suite;
use msr_core::kv::{self, KvReader};
use msr_core::trainer::{
    load_checkpoint, metrics_csv, pretrain, save_checkpoint, TrainConfig,
};
use msr_core::Elem;

#[derive(Parser)]
#[command(name = "msr", version, about = "Self-supervised pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of CIFAR-format .bin files; omit to use the synthetic set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// msr | byol_aa | byol_aw | simsiam_msr.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "beta-base")]
    beta_base: Option<Elem>,
    /// fixed | cosine.
    #[arg(long = "beta-schedule")]
    beta_schedule: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes a checkpoint and a metrics CSV.
    Pretrain(RunArgs),
    /// Linear evaluation of a checkpointed encoder.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint produced by `pretrain`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an experiment grid and report per-cell accuracies.
    Grid(RunArgs),
    /// Finite-difference check of every primitive and composed loss.
    Gradcheck {
        /// Random seeds per op.
        #[arg(long, default_value_t = 100)]
        seeds: u32,
        /// Also write the table to <out>/gradcheck.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write augmented view quadruples as PPM images.
    Preview {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of source images.
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are validation failures; --help/--version are not.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<Error>() {
                Some(err) if err.is_validation() => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Probe { run, checkpoint } => cmd_probe(run, &checkpoint),
        Command::Grid(args) => cmd_grid(args),
        Command::Gradcheck { seeds, out } => cmd_gradcheck(seeds, out.as_deref()),
        Command::Preview { config, data, out, seed, n } => {
            cmd_preview(config.as_deref(), data.as_deref(), &out, seed, n)
        }
    }
}

/// Merge file config and flag overrides into one key map.
fn merged_config(args: &RunArgs) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map = match &args.config {
        Some(path) => kv::parse(&fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?)?,
        None => BTreeMap::new(),
    };
    let mut over = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    over("mode", args.mode.clone());
    over("beta_base", args.beta_base.map(|v| v.to_string()));
    over("beta_schedule", args.beta_schedule.clone());
    over("epochs", args.epochs.map(|v| v.to_string()));
    over("batch_size", args.batch_size.map(|v| v.to_string()));
    over("seed", args.seed.map(|v| v.to_string()));
    over("arch", args.arch.clone());
    if let Some(data) = &args.data {
        map.insert("data.path".to_string(), data.display().to_string());
    }
    Ok(map)
}

enum DataSource {
    Synth(SynthSpec),
    Cifar { train: Vec<PathBuf>, test: Vec<PathBuf>, classes: u32 },
}

/// Resolve the dataset from `data.*` / `synth.*` keys. A `data.path`
/// selects CIFAR binaries (files with "test" in the name become the test
/// split); otherwise the synthetic generator is used.
fn resolve_data(reader: &KvReader) -> anyhow::Result<DataSource> {
    let kind = reader.raw("data.kind").map(str::to_string);
    let path = reader.raw("data.path").map(PathBuf::from);
    match (kind.as_deref(), path) {
        (Some("synth"), Some(_)) => {
            Err(Error::Config("data.kind=synth conflicts with data.path".into()).into())
        }
        (Some("cifar10") | Some("cifar100"), None) => {
            Err(Error::Config("cifar data kinds require data.path".into()).into())
        }
        (Some("cifar10") | Some("cifar100") | None, Some(dir)) => {
            let classes = match kind.as_deref() {
                Some("cifar100") => 100,
                _ => 10,
            };
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| Error::Config(format!("cannot read data dir {}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(Error::Config(format!(
                    "no .bin files under {}",
                    dir.display()
                ))
                .into());
            }
            for p in entries {
                let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
                if name.contains("test") {
                    test.push(p);
                } else {
                    train.push(p);
                }
            }
            Ok(DataSource::Cifar { train, test, classes })
        }
        (Some("synth") | None, None) => {
            let mut spec = SynthSpec::default();
            if let Some(v) = reader.parse_as::<u32>("synth.classes")? {
                spec.class_count = v;
            }
            if let Some(v) = reader.parse_as::<usize>("synth.per_class")? {
                spec.per_class = v;
            }
            if let Some(v) = reader.parse_as::<usize>("synth.size")? {
                spec.size = v;
            }
            if let Some(v) = reader.parse_as::<u64>("synth.seed")? {
                spec.seed = v;
            }
            if let Some(v) = reader.parse_as::<Elem>("synth.contrast")? {
                spec.contrast = v;
            }
            if let Some(v) = reader.parse_as::<Elem>("synth.bg_noise")? {
                spec.bg_noise = v;
            }
            if let Some(v) = reader.parse_as::<Elem>("synth.bg_tint")? {
                spec.bg_tint = v;
            }
            if let Some(v) = reader.raw("synth.recipe") {
                spec.recipe = match v {
                    "plain" => SynthRecipe::Plain,
                    "cluttered" => SynthRecipe::Cluttered,
                    other => {
                        return Err(Error::Config(format!("unknown synth.recipe `{other}`")).into())
                    }
                };
            }
            spec.validate()?;
            Ok(DataSource::Synth(spec))
        }
        (Some(other), _) => Err(Error::Config(format!("unknown data.kind `{other}`")).into()),
    }
}

impl DataSource {
    fn load_train(&self) -> anyhow::Result<Dataset> {
        match self {
            DataSource::Synth(spec) => Ok(synth_dataset(spec)?),
            DataSource::Cifar { train, classes, .. } => {
                if train.is_empty() {
                    return Err(Error::Config("no training .bin files found".into()).into());
                }
                Ok(load_cifar_binary(train, *classes)?)
            }
        }
    }

    /// Held-out split: CIFAR test files, or a synthetic set generated with
    /// a derived seed at one fifth of the training size.
    fn load_test(&self) -> anyhow::Result<Dataset> {
        match self {
            DataSource::Synth(spec) => {
                let mut test_spec = spec.clone();
                test_spec.seed = msr_core::rng::derive_seed(spec.seed, "synth-test", &[]);
                test_spec.per_class = (spec.per_class / 5).max(1);
                Ok(synth_dataset(&test_spec)?)
            }
            DataSource::Cifar { test, classes, .. } => {
                if test.is_empty() {
                    return Err(Error::Config(
                        "no test .bin files (name containing `test`) found".into(),
                    )
                    .into());
                }
                Ok(load_cifar_binary(test, *classes)?)
            }
        }
    }

    fn manifest_entries(&self, manifest: &mut BTreeMap<String, String>) -> anyhow::Result<()> {
        match self {
            DataSource::Synth(spec) => {
                manifest.insert("data.kind".into(), "synth".into());
                manifest.insert("artifact.synth_spec".into(), format!("{spec:?}"));
            }
            DataSource::Cifar { train, test, classes } => {
                manifest.insert("data.kind".into(), format!("cifar{classes}"));
                for p in train.iter().chain(test) {
                    let bytes = fs::read(p)?;
                    let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
                    manifest.insert(format!("artifact.{name}"), hex_digest(&bytes));
                }
            }
        }
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn probe_config_from(reader: &KvReader) -> anyhow::Result<ProbeConfig> {
    let mut cfg = ProbeConfig::default();
    if let Some(v) = reader.parse_as::<usize>("probe.epochs")? {
        cfg.epochs = v;
    }
    if let Some(v) = reader.parse_as::<Elem>("probe.lr")? {
        cfg.lr0 = v;
    }
    if let Some(v) = reader.parse_as::<Elem>("probe.momentum")? {
        cfg.momentum = v;
    }
    if let Some(v) = reader.parse_as::<Elem>("probe.weight_decay")? {
        cfg.weight_decay = v;
    }
    if let Some(v) = reader.parse_as::<usize>("probe.batch_size")? {
        cfg.batch_size = v;
    }
    if let Some(v) = reader.raw("probe.decay_epochs") {
        cfg.decay_epochs = v
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad probe.decay_epochs entry `{s}`")))
            })
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = reader.parse_bool("probe.augment")? {
        cfg.augment = v;
    }
    if let Some(v) = reader.parse_as::<u64>("probe.seed")? {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Write the resolved-run manifest before execution starts.
fn write_manifest(
    out: &Path,
    command: &str,
    config: &TrainConfig,
    extra: BTreeMap<String, String>,
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let mut map = kv::parse(&config.canonical_text())?;
    map.insert("command".into(), command.into());
    map.insert("out".into(), out.display().to_string());
    map.extend(extra);
    let text = kv::serialize(&map);
    let hash = kv::content_hash(&text);
    fs::write(out.join("manifest.txt"), format!("{text}manifest_sha256={hash}\n"))?;
    Ok(())
}

fn cmd_pretrain(args: RunArgs) -> anyhow::Result<()> {
    let map = merged_config(&args)?;
    let reader = KvReader::new(map);
    let config = TrainConfig::from_reader(&reader)?;
    let data = resolve_data(&reader)?;
    // Probe keys are legal in a shared config file; consume them.
    let _ = probe_config_from(&reader)?;
    reader.finish()?;

    let mut extra = BTreeMap::new();
    data.manifest_entries(&mut extra)?;
    write_manifest(&args.out, "pretrain", &config, extra)?;

    let train = data.load_train()?;
    let state = pretrain(&config, &train)?;
    save_checkpoint(&state, &args.out.join("checkpoint.msrckpt"))?;
    fs::write(args.out.join("metrics.csv"), metrics_csv(&state.metrics))?;
    let last = state.metrics.last().expect("at least one step");
    println!(
        "pretrained {} steps (mode {}, arch {}); final loss {:.6}",
        state.step,
        config.mode.as_str(),
        config.arch,
        last.loss
    );
    println!("checkpoint: {}", args.out.join("checkpoint.msrckpt").display());
    Ok(())
}

fn cmd_probe(args: RunArgs, checkpoint: &Path) -> anyhow::Result<()> {
    let map = merged_config(&args)?;
    let reader = KvReader::new(map);
    // Trainer keys may be present in a shared file; the checkpoint's
    // embedded config is authoritative for the model.
    let _ = TrainConfig::from_reader(&reader)?;
    let data = resolve_data(&reader)?;
    let probe_cfg = probe_config_from(&reader)?;
    reader.finish()?;

    let state = load_checkpoint(checkpoint)?;
    let mut extra = BTreeMap::new();
    data.manifest_entries(&mut extra)?;
    extra.insert("checkpoint".into(), checkpoint.display().to_string());
    extra.insert("artifact.checkpoint".into(), hex_digest(&fs::read(checkpoint)?));
    write_manifest(&args.out, "probe", &state.config, extra)?;

    let train = data.load_train()?;
    let test = data.load_test()?;
    let source = FeatureSource::encoder(&state.pair.online);
    let accuracy = linear_probe(&source, &train, &test, &probe_cfg)?;
    fs::write(args.out.join("probe.txt"), format!("top1_accuracy={accuracy}\n"))?;
    println!("top-1 accuracy: {accuracy:.4}");
    Ok(())
}

fn cmd_grid(args: RunArgs) -> anyhow::Result<()> {
    let map = merged_config(&args)?;
    let reader = KvReader::new(map);
    let base = TrainConfig::from_reader(&reader)?;
    let data = resolve_data(&reader)?;
    let probe = probe_config_from(&reader)?;

    let seeds: Vec<u64> = match reader.raw("grid.seeds") {
        Some(text) => text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad grid.seeds entry `{s}`")))
            })
            .collect::<Result<_, _>>()?,
        None => vec![1, 2, 3],
    };
    let preset = reader.raw("grid.preset").unwrap_or("table1").to_string();
    let cells = match preset.as_str() {
        "table1" => {
            let beta = reader.parse_as::<Elem>("grid.beta_base")?.unwrap_or(0.5);
            table1_cells(beta, &seeds)
        }
        "beta-sweep" => {
            let betas: Vec<Elem> = match reader.raw("grid.betas") {
                Some(text) => text
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<Elem>()
                            .map_err(|_| Error::Config(format!("bad grid.betas entry `{s}`")))
                    })
                    .collect::<Result<_, _>>()?,
                None => (0..=7).map(|i| i as Elem / 10.0).collect(),
            };
            beta_sweep_cells(&betas, &seeds)
        }
        other => return Err(Error::Config(format!("unknown grid.preset `{other}`")).into()),
    };
    reader.finish()?;

    let mut extra = BTreeMap::new();
    data.manifest_entries(&mut extra)?;
    extra.insert("grid.preset".into(), preset);
    extra.insert(
        "grid.seeds".into(),
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    write_manifest(&args.out, "grid", &base, extra)?;

    let train = data.load_train()?;
    let test = data.load_test()?;
    let grid = ExperimentGrid { cells, base, probe };
    let report = run_grid(&grid, &train, &test, worker_threads())?;
    fs::write(args.out.join("grid.csv"), report.csv())?;
    let table = report.table();
    fs::write(args.out.join("grid.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(seeds: u32, out: Option<&Path>) -> anyhow::Result<()> {
    const TOLERANCE: Elem = 1e-4;
    let results = check_suite(seeds)?;
    let mut table = format!("{:<24} {:>14} {:>7}\n", "op", "max_rel_err", "status");
    let mut all_ok = true;
    for r in &results {
        let ok = r.passed(TOLERANCE);
        all_ok &= ok;
        table.push_str(&format!(
            "{:<24} {:>14.3e} {:>7}\n",
            r.name,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        ));
    }
    print!("{table}");
    println!("tolerance {TOLERANCE:.0e}, {seeds} seeds per op");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &table)?;
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Runtime("gradient check failed".into()).into())
    }
}

fn cmd_preview(
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    seed: u64,
    n: usize,
) -> anyhow::Result<()> {
    let args = RunArgs {
        config: config.map(Path::to_path_buf),
        data: data.map(Path::to_path_buf),
        out: out.to_path_buf(),
        mode: None,
        beta_base: None,
        beta_schedule: None,
        epochs: None,
        batch_size: None,
        seed: Some(seed),
        arch: None,
    };
    let map = merged_config(&args)?;
    let reader = KvReader::new(map);
    let trainer_cfg = TrainConfig::from_reader(&reader)?;
    let aug: AugSpec = trainer_cfg.aug.clone();
    let data_source = resolve_data(&reader)?;
    let _ = probe_config_from(&reader)?;
    reader.finish()?;

    if n == 0 {
        return Err(Error::Config("preview needs n >= 1".into()).into());
    }
    let mut extra = BTreeMap::new();
    data_source.manifest_entries(&mut extra)?;
    extra.insert("preview.n".into(), n.to_string());
    write_manifest(out, "preview", &trainer_cfg, extra)?;

    let dataset = data_source.load_train()?;
    if dataset.len() < n {
        return Err(Error::Config(format!(
            "dataset has {} images, preview needs {n}",
            dataset.len()
        ))
        .into());
    }
    let sources: Vec<Image> = dataset.images[..n].to_vec();
    let views = make_views(&sources, seed, &aug)?;
    for i in 0..n {
        for (suffix, view) in [
            ("vw", &views.v_w[i]),
            ("vw_prime", &views.v_w_prime[i]),
            ("va", &views.v_a[i]),
            ("va_prime", &views.v_a_prime[i]),
        ] {
            fs::write(out.join(format!("s{i:03}_{suffix}.ppm")), ppm_bytes(view))?;
        }
    }
    println!("wrote {} view quadruples to {}", n, out.display());
    Ok(())
}
