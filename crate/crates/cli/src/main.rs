//! `pdml` command line: synthetic data, training, evaluation, label
//! extension and distance histograms.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pdml::extension::{extension_accuracy, online_extension, ScoreArgmax};
use pdml::griddata::save_mask;
use pdml::pdml::{append_distance_log, distance_histograms, read_distance_log, write_histogram_csvs, LossConfig};
use pdml::synthgen::{generate_dataset, SceneConfig};
use pdml::toynet::{forward, load_checkpoint, save_checkpoint, NetConfig};
use pdml::trainer::{evaluate, train, write_log_csv, PhaseSchedule, TrainConfig};
use pdml::{Dataset, ModelParams};

const DISTANCE_LOG: &str = "distances.csv";

#[derive(Parser, Debug)]
#[command(name = "pdml", version, about = "Point-supervised scene parsing with cross-image metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with dense ground truth and point labels.
    GenData(GenDataArgs),
    /// Train a network on a point-annotated dataset.
    Train(TrainArgs),
    /// Report mIoU and pixel accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Write online-extension masks produced by a checkpoint.
    Extend(ExtendArgs),
    /// Turn a training distance log into histogram CSVs.
    Hist(HistArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene index of the first image; disjoint splits use disjoint ranges.
    #[arg(long, default_value_t = 0)]
    first: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Half-width of the per-image color offset.
    #[arg(long, default_value_t = SceneConfig::default().color_jitter)]
    jitter: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArgmaxArg {
    All,
    Within,
}

impl From<ArgmaxArg> for ScoreArgmax {
    fn from(a: ArgmaxArg) -> Self {
        match a {
            ArgmaxArg::All => ScoreArgmax::AllClasses,
            ArgmaxArg::Within => ScoreArgmax::WithinClassSet,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total epochs; without --phases the default split is rescaled to it.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs of point-only, metric and extension training.
    #[arg(long, value_parser = parse_phases)]
    phases: Option<PhaseSchedule>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    subgroup: Option<usize>,
    /// Square random-crop side; whole images when omitted.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    thr: Option<f64>,
    #[arg(long, value_enum, default_value_t = ArgmaxArg::All)]
    argmax: ArgmaxArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch CSV; the pair-distance log is written next to it.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Held-out manifest scored after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Optional `class,iou` CSV.
    #[arg(long)]
    per_class: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtendArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = pdml::extension::DEFAULT_THRESHOLD)]
    thr: f64,
    #[arg(long, value_enum, default_value_t = ArgmaxArg::All)]
    argmax: ArgmaxArg,
}

#[derive(Args, Debug)]
struct HistArgs {
    /// Directory holding the training distance log.
    #[arg(long)]
    log_dir: PathBuf,
    /// Output directory; defaults to the log directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

fn parse_phases(s: &str) -> Result<PhaseSchedule, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok(PhaseSchedule::new(a, b, c)),
        _ => Err("expected three comma-separated epoch counts".into()),
    }
}

/// Rescales the default phase split to `epochs`, keeping at least one
/// point-only epoch.
fn scaled_phases(epochs: usize) -> PhaseSchedule {
    let d = PhaseSchedule::default();
    let total = d.total();
    let point_only = (epochs * d.point_only).div_ceil(total).min(epochs);
    let extension = (epochs * d.extension / total).min(epochs - point_only);
    PhaseSchedule::new(point_only, epochs - point_only - extension, extension)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Extend(a) => extend_cmd(a),
        Command::Hist(a) => hist_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = SceneConfig {
        height: a.height,
        width: a.width,
        num_classes: a.classes,
        noise_std: a.noise,
        color_jitter: a.jitter,
        seed: a.seed,
        ..SceneConfig::default()
    };
    println!("config: gen-data {cfg:?} first={} count={} out={}", a.first, a.count, a.out.display());
    let ds = generate_dataset::<f64>(&cfg, a.first, a.count)?;
    let manifest = ds.save(&a.out)?;
    println!("wrote {} scenes, manifest {}", ds.len(), manifest.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig<f64>> {
    let d = TrainConfig::<f64>::default();
    let phases = match (a.phases, a.epochs) {
        (Some(p), Some(e)) if p.total() != e => {
            bail!("--phases sums to {} but --epochs is {e}", p.total())
        }
        (Some(p), _) => p,
        (None, Some(e)) => scaled_phases(e),
        (None, None) => d.phases,
    };
    let dl = LossConfig::<f64>::default();
    Ok(TrainConfig {
        batch_size: a.batch.unwrap_or(d.batch_size),
        subgroup_size: a.subgroup.unwrap_or(d.subgroup_size),
        crop_size: a.crop,
        base_lr: a.lr.unwrap_or(d.base_lr),
        momentum: a.momentum.unwrap_or(d.momentum),
        weight_decay: a.wd.unwrap_or(d.weight_decay),
        lr_power: a.power.unwrap_or(d.lr_power),
        loss: LossConfig {
            margin: a.margin.unwrap_or(dl.margin),
            alpha: a.alpha.unwrap_or(dl.alpha),
            beta: a.beta.unwrap_or(dl.beta),
        },
        pdml_weight: a.lambda.unwrap_or(d.pdml_weight),
        extension_threshold: a.thr.unwrap_or(d.extension_threshold),
        score_argmax: a.argmax.into(),
        phases,
        seed: a.seed,
        ..d
    })
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    cfg.validate()?;
    let ds = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let eval_ds = a.eval.as_ref().map(Dataset::load).transpose()?;
    let net = NetConfig::desk(ds.num_classes(), a.seed);
    println!("config: train {cfg}");
    println!("config: net {net:?}");
    println!(
        "config: data={} eval={} out={} log={}",
        a.data.display(),
        a.eval.as_deref().map_or("-".into(), |p| p.display().to_string()),
        a.out.display(),
        a.log.as_deref().map_or("-".into(), |p| p.display().to_string())
    );
    let outcome = train(&ds, &net, &cfg, eval_ds.as_ref())?;
    create_parent(&a.out)?;
    for row in &outcome.log {
        println!("{}", row.csv_row());
    }
    save_checkpoint(&outcome.params, &a.out)?;
    if let Some(log) = &a.log {
        create_parent(log)?;
        write_log_csv(&outcome.log, log)?;
        let dist = log.parent().unwrap_or(Path::new("")).join(DISTANCE_LOG);
        if dist.exists() {
            fs::remove_file(&dist).with_context(|| format!("replacing {}", dist.display()))?;
        }
        for row in &outcome.log {
            append_distance_log(&dist, row.epoch, &row.distances)?;
        }
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn load_model(path: &Path, ds: &Dataset) -> anyhow::Result<ModelParams> {
    let params = load_checkpoint::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    if params.config().num_classes != ds.num_classes() {
        bail!(
            "checkpoint predicts {} classes, dataset has {}",
            params.config().num_classes,
            ds.num_classes()
        );
    }
    Ok(params)
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    println!(
        "config: eval data={} ckpt={} per_class={}",
        a.data.display(),
        a.ckpt.display(),
        a.per_class.as_deref().map_or("-".into(), |p| p.display().to_string())
    );
    let ds = Dataset::load(&a.data)?;
    let params = load_model(&a.ckpt, &ds)?;
    let cm = evaluate(&params, &ds)?;
    println!("miou,pixel_acc");
    println!("{},{}", cm.miou()?, cm.pixel_accuracy()?);
    if let Some(path) = &a.per_class {
        let mut text = String::from("class,iou\n");
        for (k, iou) in cm.per_class_iou().into_iter().enumerate() {
            text.push_str(&format!("{k},{}\n", iou.map_or("nan".into(), |v| v.to_string())));
        }
        create_parent(path)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn extend_cmd(a: ExtendArgs) -> anyhow::Result<()> {
    let argmax: ScoreArgmax = a.argmax.into();
    println!(
        "config: extend data={} ckpt={} out={} thr={} argmax={argmax:?}",
        a.data.display(),
        a.ckpt.display(),
        a.out.display(),
        a.thr
    );
    let ds = Dataset::load(&a.data)?;
    let params = load_model(&a.ckpt, &ds)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut csv = String::from("image_id,labeled_pixels,accuracy\n");
    for s in ds.samples() {
        let fwd = forward(&s.image, &params)?;
        let mask = online_extension(&fwd.scores, &s.points, a.thr, argmax)?;
        let id = s.points.image_id;
        save_mask(&mask, a.out.join(format!("{id:05}_ext.pgm")))?;
        let acc = match &s.ground_truth {
            Some(gt) => extension_accuracy(&mask, gt).map_or("nan".into(), |v| v.to_string()),
            None => "nan".into(),
        };
        csv.push_str(&format!("{id},{},{acc}\n", mask.labeled_count()));
    }
    let path = a.out.join("extension.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} masks to {}", ds.len(), a.out.display());
    Ok(())
}

fn hist_cmd(a: HistArgs) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.log_dir.clone());
    println!("config: hist log_dir={} out={} bins={}", a.log_dir.display(), out.display(), a.bins);
    let epochs = read_distance_log(a.log_dir.join(DISTANCE_LOG))?;
    let hists = epochs
        .iter()
        .filter(|(_, d)| !d.is_empty())
        .map(|(e, d)| Ok((*e, distance_histograms(d, a.bins)?)))
        .collect::<pdml::Result<Vec<_>>>()?;
    if hists.is_empty() {
        bail!("distance log has no observations");
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_histogram_csvs(&hists, out.join("hist_bins.csv"), out.join("hist_summary.csv"))?;
    println!("wrote histograms for {} epochs to {}", hists.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_parsing() {
        assert_eq!(parse_phases("1,2,3").unwrap(), PhaseSchedule::new(1, 2, 3));
        assert!(parse_phases("1,2").is_err());
        assert!(parse_phases("a,b,c").is_err());
    }

    #[test]
    fn scaled_phases_sum_to_epochs() {
        for e in 1..100 {
            let p = scaled_phases(e);
            assert_eq!(p.total(), e);
            assert!(p.point_only >= 1);
        }
        assert_eq!(scaled_phases(60), PhaseSchedule::default());
    }
}
