//! Command-line driver.
//!
//! Exit codes: `0` success, `1` runtime failure, `2` usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use oxqnn_core::analysis::{
    group_by_popcount, median, sweep_sense_distribution, weight_conductance_histogram, EvalMode,
};
use oxqnn_core::crossbar::TileLimits;
use oxqnn_core::device::DeviceConfig;
use oxqnn_core::network::{map_network_to_tiles, InputPipeline, NetworkDescription};
use oxqnn_core::quant::Precision;
use oxqnn_core::train::{train, Hyperparams};

use crate::error::{Error, Result};
use crate::experiment::run_trials;
use crate::idx::{bundled_test_slice, DatasetStore, ImageSet};
use crate::output::{config_hash, fnv1a64, write_atomic, write_csv, Manifest, Provenance};
use crate::{devcfg, qnn};

#[derive(Debug, Parser)]
#[command(name = "oxqnn", version, about = "Ternary/binary neural networks on simulated OxRAM crossbars")]
pub struct Cli {
    /// Device config file, or `hrs_default` / `lrs_default`.
    #[arg(long, global = true, default_value = "hrs_default")]
    pub config: String,
    /// Network weight file (.qnn).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Binary,
    Ternary,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Binary => Precision::Binary,
            PrecisionArg::Ternary => Precision::Ternary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ideal,
    Hardware,
}

/// Where test images come from.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory with the IDX dataset files (plain or .gz). Without it the
    /// bundled 2000-image test slice is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// First test image.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// Number of test images (default: all after the offset).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a LeNet BNN/TNN and write weight files plus loss.csv.
    Train {
        /// Directory with the IDX dataset files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "ternary")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Ternary activation dead band in units of popcount / sqrt(fan-in).
        #[arg(long, default_value_t = 0.5)]
        act_threshold: f64,
        /// Training images held out (from the end) for validation.
        #[arg(long, default_value_t = 5000)]
        val_size: usize,
        /// Use only the first N remaining training images.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Classification accuracy in ideal or hardware mode.
    Eval {
        #[arg(long, value_enum, default_value = "ideal")]
        mode: ModeArg,
        /// Number of seeds `seed, seed+1, ...` when --seeds is absent.
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Explicit comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Sense output against exact popcount for random small tiles.
    SweepSense {
        /// Tile size as ROWSxCOLS, at most 8x8.
        #[arg(long, default_value = "4x4", value_parser = parse_dims)]
        dims: (usize, usize),
        #[arg(long, value_enum, default_value = "ternary")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Histogram of mapped cell conductances per programmed weight.
    Hist {
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Print the thermometric encoding of one test image.
    EncodePreview {
        /// Index into the test images.
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension {v:?}"));
    Ok((n(r)?, n(c)?))
}

enum Failure {
    Usage(clap::Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<oxqnn_core::Error> for Failure {
    fn from(e: oxqnn_core::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(kind: ErrorKind, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(Cli::command().error(kind, msg))
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return 1;
        }
    };
    let command_line = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    match pool.install(|| run(&cli, &command_line)) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            let _ = e.print();
            e.exit_code()
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Context<'a> {
    cli: &'a Cli,
    manifest: Manifest,
    outputs: Vec<PathBuf>,
}

impl Context<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cli.out_dir.join(name)
    }

    fn written(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::SweepSense { .. } => "sweep-sense",
        Command::Hist { .. } => "hist",
        Command::EncodePreview { .. } => "encode-preview",
    }
}

fn run(cli: &Cli, command_line: &str) -> std::result::Result<(), Failure> {
    let mut ctx = Context {
        cli,
        manifest: Manifest::default(),
        outputs: Vec::new(),
    };
    let config = devcfg::load(&cli.config)?;
    let hash = config_hash(&config);
    let m = &mut ctx.manifest;
    m.set("command", subcommand_name(&cli.command));
    m.set("command_line", command_line);
    m.set("version", env!("CARGO_PKG_VERSION"));
    m.set("seed", cli.seed);
    m.set("threads", rayon::current_num_threads());
    m.set("config", &cli.config);
    m.set("config_hash", &hash);
    if let Some(w) = &cli.weights {
        m.set("weights", w.display());
        if let Ok(bytes) = std::fs::read(w) {
            m.set("weights_hash", format!("{:016x}", fnv1a64(&bytes)));
        }
    }
    let prov = Provenance::default()
        .with("command", command_line_without_runtime_flags(command_line))
        .with("seed", cli.seed)
        .with("config", &cli.config)
        .with("config_hash", &hash);
    match &cli.command {
        Command::Train {
            data,
            precision,
            epochs,
            batch_size,
            lr,
            act_threshold,
            val_size,
            train_limit,
        } => {
            let hp = Hyperparams {
                epochs: *epochs,
                batch_size: *batch_size,
                learning_rate: *lr,
                activation_threshold: *act_threshold,
                seed: cli.seed,
                ..Hyperparams::default()
            };
            cmd_train(&mut ctx, &prov, data, (*precision).into(), hp, *val_size, *train_limit)?
        }
        Command::Eval {
            mode,
            trials,
            seeds,
            data,
        } => {
            let weights = require_weights(cli)?;
            let seeds = if seeds.is_empty() {
                (0..*trials as u64).map(|k| cli.seed.wrapping_add(k)).collect()
            } else {
                seeds.clone()
            };
            let mode = match mode {
                ModeArg::Ideal => EvalMode::Ideal,
                ModeArg::Hardware => EvalMode::Hardware,
            };
            cmd_eval(&mut ctx, &prov, &config, weights, mode, &seeds, data)?
        }
        Command::SweepSense {
            dims,
            precision,
            samples,
        } => cmd_sweep(&mut ctx, &prov, &config, *dims, (*precision).into(), *samples)?,
        Command::Hist { bins } => {
            let weights = require_weights(cli)?;
            cmd_hist(&mut ctx, &prov, &config, weights, *bins)?
        }
        Command::EncodePreview { image, data } => cmd_preview(&mut ctx, *image, data)?,
    }
    let outputs: Vec<String> = ctx.outputs.iter().map(|p| p.display().to_string()).collect();
    ctx.manifest.set("outputs", outputs.join(","));
    ctx.manifest.write(&cli.out_dir)?;
    Ok(())
}

/// The command line minus flags that cannot change results, so CSV headers
/// are identical across thread counts and output locations.
fn command_line_without_runtime_flags(line: &str) -> String {
    let mut out = Vec::new();
    let mut words = line.split(' ').skip(1);
    while let Some(w) = words.next() {
        match w {
            "--threads" | "--out-dir" => {
                words.next();
            }
            w if w.starts_with("--threads=") || w.starts_with("--out-dir=") => {}
            w => out.push(w),
        }
    }
    out.join(" ")
}

fn require_weights(cli: &Cli) -> std::result::Result<&Path, Failure> {
    cli.weights.as_deref().ok_or_else(|| {
        usage(
            ErrorKind::MissingRequiredArgument,
            format!("`{}` needs --weights <FILE>", subcommand_name(&cli.command)),
        )
    })
}

fn test_images(args: &DataArgs) -> Result<ImageSet> {
    match &args.data {
        Some(dir) => DatasetStore::new(dir).test(),
        None => bundled_test_slice(),
    }
}

fn slice_bounds(args: &DataArgs, len: usize) -> std::result::Result<(usize, usize), Failure> {
    let hi = match args.limit {
        Some(n) => args.offset.saturating_add(n),
        None => len,
    };
    if args.offset >= hi || hi > len {
        return Err(usage(
            ErrorKind::InvalidValue,
            format!("test images {}..{} are not within the {len} available", args.offset, hi),
        ));
    }
    Ok((args.offset, hi))
}

fn cmd_train(
    ctx: &mut Context,
    prov: &Provenance,
    data: &Path,
    precision: Precision,
    hp: Hyperparams,
    val_size: usize,
    train_limit: Option<usize>,
) -> std::result::Result<(), Failure> {
    let set = DatasetStore::new(data).train()?;
    if val_size == 0 || val_size >= set.len() {
        return Err(usage(ErrorKind::InvalidValue, format!("--val-size must be in 1..{}", set.len())));
    }
    let view = set.view()?;
    let split = set.len() - val_size;
    let train_set = view.slice(0, train_limit.map_or(split, |n| n.min(split)));
    let val_set = view.slice(split, set.len());
    let spec = NetworkDescription::lenet(precision);
    let ckpt_dir = ctx.out("checkpoints");
    let mut saved = Vec::new();
    let mut save_err = None;
    let outcome = train(&spec, &train_set, &val_set, InputPipeline::default(), hp, &mut |rep, net| {
        log::info!(
            "epoch {:>2}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
            rep.epoch,
            rep.train_loss,
            rep.val_loss,
            rep.val_accuracy
        );
        eprintln!(
            "epoch {:>2}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}",
            rep.epoch, rep.train_loss, rep.val_loss, rep.val_accuracy
        );
        let path = ckpt_dir.join(format!("epoch_{:02}.qnn", rep.epoch));
        match qnn::save(net, &path) {
            Ok(()) => saved.push(path),
            Err(e) => save_err = Some(e),
        }
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    ctx.outputs.extend(saved);
    let weights = ctx.out("weights.qnn");
    qnn::save(&outcome.network, &weights)?;
    ctx.written(weights.clone());
    let loss = ctx.out("loss.csv");
    let prov = prov.clone().with("precision", precision.name()).with("train_images", train_set.len());
    write_csv(
        &loss,
        &prov,
        &["epoch", "train_loss", "val_loss"],
        outcome
            .curve
            .iter()
            .map(|r| [r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()]),
    )?;
    ctx.written(loss);
    let last = outcome.curve.last().expect("epoch 0 is always reported");
    let summary = format!(
        "trained {} LeNet for {} epochs on {} images\nvalidation accuracy {:.2}% on {} images\nweights: {}\n",
        precision.name(),
        last.epoch,
        train_set.len(),
        100.0 * last.val_accuracy,
        val_set.len(),
        weights.display()
    );
    print!("{summary}");
    ctx.manifest.set("precision", precision.name());
    ctx.manifest.set("final_val_accuracy", last.val_accuracy);
    Ok(())
}

fn cmd_eval(
    ctx: &mut Context,
    prov: &Provenance,
    config: &DeviceConfig,
    weights: &Path,
    mode: EvalMode,
    seeds: &[u64],
    data: &DataArgs,
) -> std::result::Result<(), Failure> {
    if seeds.is_empty() {
        return Err(usage(ErrorKind::InvalidValue, "at least one trial is required"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(usage(ErrorKind::InvalidValue, "seeds must be distinct"));
    }
    let net = qnn::load(weights)?;
    let test = test_images(data)?;
    let (lo, hi) = slice_bounds(data, test.len())?;
    let report = run_trials(&net, config, &test.view()?.slice(lo, hi), mode, seeds)?;
    let prov = prov.clone().with("images", format!("{lo}..{hi}"));
    let acc = ctx.out("accuracy.csv");
    write_csv(
        &acc,
        &prov,
        &["seed", "mode", "accuracy"],
        report
            .trials
            .iter()
            .map(|t| [t.seed.to_string(), mode.name().to_string(), t.accuracy.to_string()]),
    )?;
    ctx.written(acc);
    let cm = &report.confusion;
    let conf = ctx.out("confusion.csv");
    let classes = cm.classes();
    write_csv(
        &conf,
        &prov.clone().with("confusion_seed", seeds[0]),
        &["true", "pred", "count"],
        (0..classes * classes).map(|k| {
            let (t, p) = (k / classes, k % classes);
            [t.to_string(), p.to_string(), cm.count(t, p).to_string()]
        }),
    )?;
    ctx.written(conf);
    let mut summary = format!(
        "{} mode, {} precision, {} images, {} trial(s)\naccuracy {:.2}% (std {:.2} points)\nper-class accuracy (seed {}):",
        mode.name(),
        net.precision.name(),
        hi - lo,
        seeds.len(),
        100.0 * report.mean,
        100.0 * report.std,
        seeds[0]
    );
    for (c, a) in cm.per_class_accuracy().iter().enumerate() {
        match a {
            Some(a) => summary.push_str(&format!(" {c}:{:.1}", 100.0 * a)),
            None => summary.push_str(&format!(" {c}:-")),
        }
    }
    summary.push('\n');
    print!("{summary}");
    let path = ctx.out("summary.txt");
    write_atomic(&path, summary.as_bytes())?;
    ctx.written(path);
    ctx.manifest.set("mode", mode.name());
    ctx.manifest.set("seeds", seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    ctx.manifest.set("accuracy_mean", report.mean);
    Ok(())
}

fn cmd_sweep(
    ctx: &mut Context,
    prov: &Provenance,
    config: &DeviceConfig,
    (rows, cols): (usize, usize),
    precision: Precision,
    samples: usize,
) -> std::result::Result<(), Failure> {
    if samples == 0 {
        return Err(usage(ErrorKind::InvalidValue, "--samples must be at least 1"));
    }
    let s = sweep_sense_distribution(rows, cols, precision, config, samples, ctx.cli.seed).map_err(|e| match e {
        oxqnn_core::Error::Shape(m) => usage(ErrorKind::InvalidValue, m),
        e => e.into(),
    })?;
    let path = ctx.out("sense.csv");
    let prov = prov.clone().with("dims", format!("{rows}x{cols}")).with("precision", precision.name());
    write_csv(
        &path,
        &prov,
        &["popcount", "n_pos", "n_neg", "delta_uA", "v_neuron"],
        s.iter().map(|x| {
            [
                x.popcount.to_string(),
                x.n_pos.to_string(),
                x.n_neg.to_string(),
                x.delta_ua.to_string(),
                x.v_neuron.to_string(),
            ]
        }),
    )?;
    ctx.written(path);
    println!("{rows}x{cols} {} tile, {} samples", precision.name(), s.len());
    println!("popcount  count  median_delta_uA");
    for (p, v) in group_by_popcount(&s) {
        println!("{p:>8}  {:>5}  {:.4}", v.len(), median(&v).unwrap_or(f64::NAN));
    }
    Ok(())
}

fn cmd_hist(
    ctx: &mut Context,
    prov: &Provenance,
    config: &DeviceConfig,
    weights: &Path,
    bins: usize,
) -> std::result::Result<(), Failure> {
    if bins == 0 {
        return Err(usage(ErrorKind::InvalidValue, "--bins must be at least 1"));
    }
    let net = qnn::load(weights)?;
    let mapped = map_network_to_tiles(&net, config, TileLimits::default(), ctx.cli.seed)?;
    let h = weight_conductance_histogram(&mapped, bins)?;
    let path = ctx.out("hist.csv");
    let rows = h.states.iter().flat_map(|s| {
        s.counts.iter().enumerate().map(move |(b, c)| {
            [
                s.trit.value().to_string(),
                s.edges[b].to_string(),
                s.edges[b + 1].to_string(),
                c.to_string(),
            ]
        })
    });
    write_csv(&path, &prov.clone().with("bins", bins), &["trit", "bin_lo_S", "bin_hi_S", "count"], rows)?;
    ctx.written(path);
    println!("{} region, {} cells, {} clamped", config.region.name(), mapped_cells(&h), mapped.clamped_cells());
    for s in &h.states {
        println!(
            "weight {:>2}: {:>6} cells, mean {:.4e} S, std {:.4e} S",
            s.trit.value(),
            s.cells,
            s.mean,
            s.std
        );
    }
    println!("separability (min gap / pooled sigma): {:.3}", h.separability);
    ctx.manifest.set("separability", h.separability);
    Ok(())
}

fn mapped_cells(h: &oxqnn_core::analysis::ConductanceHistogram) -> u64 {
    h.states.iter().map(|s| s.cells).sum()
}

fn cmd_preview(ctx: &mut Context, image: usize, data: &DataArgs) -> std::result::Result<(), Failure> {
    let test = test_images(data)?;
    if image >= test.len() {
        return Err(usage(ErrorKind::InvalidValue, format!("--image must be below {}", test.len())));
    }
    let pipeline = InputPipeline::default();
    let x = pipeline.prepare(&test.view()?.image(image))?;
    let [c, h, w] = pipeline.input_shape();
    let mut text = format!("image {image}, label {}\n", test.labels[image]);
    for (ch, &t) in pipeline.encoder.thresholds().iter().enumerate() {
        text.push_str(&format!("channel {ch} (pixel >= {t})\n"));
        for r in 0..h {
            let row = &x.data()[ch * h * w + r * w..ch * h * w + (r + 1) * w];
            text.extend(row.iter().map(|&v| if v > 0 { '#' } else { '.' }));
            text.push('\n');
        }
    }
    debug_assert_eq!(c, pipeline.encoder.channels());
    print!("{text}");
    let path = ctx.out("preview.txt");
    write_atomic(&path, text.as_bytes())?;
    ctx.written(path);
    Ok(())
}
