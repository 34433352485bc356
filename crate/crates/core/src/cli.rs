//! The `rchc` command-line tool.
//!
//! Exit codes: 0 success, 1 config/contract error, 2 I/O error,
//! 3 numeric or clustering failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};

use crate::config::{RawConfig, RunConfig, RunManifest, KEYS};
use crate::data::{gen_bar_images, gen_shifted_blobs, load_csv_dataset, parse_csv_dataset, Domain, LabeledDataset};
use crate::error::{Error, Result};
use crate::fmt_num;
use crate::losses::LossBreakdown;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::training::{
    adapt_target_with, evaluate, export_embeddings, run_seeds, threshold_report, threshold_stats_to_string,
    train_source, Evaluator, MetricsRecord,
};

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").required(true).value_name("FILE").help("key = value config file"));
    KEYS.iter().fold(cmd, |cmd, k| {
        let name = flag_name(k.name);
        cmd.arg(Arg::new(k.name).long(name).value_name("VALUE").help(format!("override '{}': {}", k.name, k.help)))
    })
}

fn model_data_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("checkpoint").long("checkpoint").required(true).value_name("FILE"))
        .arg(Arg::new("data").long("data").required(true).value_name("CSV"))
}

pub fn command() -> Command {
    Command::new("rchc")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Source-free domain adaptation with centroid-hypothesis conflict reconciliation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            with_config_flags(Command::new("gen-data").about("Write the configured synthetic datasets as CSV"))
                .arg(Arg::new("out").long("out").required(true).value_name("DIR")),
        )
        .subcommand(
            with_config_flags(Command::new("train-source").about("Train the source model"))
                .arg(Arg::new("out").long("out").required(true).value_name("DIR")),
        )
        .subcommand(
            with_config_flags(Command::new("adapt").about("Adapt a source checkpoint to the target data, once per seed"))
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_name("FILE"))
                .arg(Arg::new("out").long("out").required(true).value_name("DIR")),
        )
        .subcommand(
            model_data_args(Command::new("eval").about("Overall and per-class accuracy on a labeled CSV"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("also write the record here")),
        )
        .subcommand(
            model_data_args(Command::new("threshold-stats").about("Uncertainty-ratio statistics of non-conflict samples"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("also write the table here")),
        )
        .subcommand(
            model_data_args(Command::new("export-embeddings").about("Per-sample embeddings, pseudo-labels and conflict flags"))
                .arg(Arg::new("out").long("out").required(true).value_name("FILE"))
                .arg(Arg::new("r_th").long("r-th").value_name("VALUE").default_value("0.65")),
        )
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors go to stderr.
pub fn main_exit_code<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(&matches, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(matches: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    match matches.subcommand() {
        Some(("gen-data", m)) => cmd_gen_data(&load_config(m)?, &path_arg(m, "out"), out),
        Some(("train-source", m)) => cmd_train_source(&load_config(m)?, &path_arg(m, "out"), out),
        Some(("adapt", m)) => cmd_adapt(&load_config(m)?, &path_arg(m, "checkpoint"), &path_arg(m, "out"), out),
        Some(("eval", m)) => cmd_eval(&path_arg(m, "checkpoint"), &path_arg(m, "data"), opt_path(m, "out"), out),
        Some(("threshold-stats", m)) => {
            cmd_threshold_stats(&path_arg(m, "checkpoint"), &path_arg(m, "data"), opt_path(m, "out"), out)
        }
        Some(("export-embeddings", m)) => {
            let r_th: f64 = m
                .get_one::<String>("r_th")
                .map(|s| s.parse().map_err(|_| Error::config(format!("r_th: cannot parse '{s}'"))))
                .transpose()?
                .unwrap_or(0.65);
            if !(0.0..=1.0).contains(&r_th) {
                return Err(Error::config(format!("r_th: {r_th} is outside [0, 1]")));
            }
            cmd_export_embeddings(&path_arg(m, "checkpoint"), &path_arg(m, "data"), &path_arg(m, "out"), r_th, out)
        }
        _ => Err(Error::config("unknown command")),
    }
}

fn path_arg(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required by clap"))
}

fn opt_path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

/// Config file merged with command-line overrides; flags win.
fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut raw = RawConfig::load(&path_arg(m, "config"))?;
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            raw.set(k.name, v)?;
        }
    }
    raw.resolve()
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Source and target datasets described by the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    use crate::config::DatasetSpec;
    match &cfg.dataset {
        DatasetSpec::Blobs(p) => gen_shifted_blobs(cfg.data_seed, p),
        DatasetSpec::Bars { n_source, n_target, source, target } => Ok((
            gen_bar_images(cfg.data_seed, cfg.n_classes, *n_source, *source, Domain::Source)?,
            gen_bar_images(
                cfg.data_seed.wrapping_add(crate::data::presets::BAR_TARGET_SEED_OFFSET),
                cfg.n_classes,
                *n_target,
                *target,
                Domain::Target,
            )?,
        )),
        DatasetSpec::Csv { source, target, target_has_labels } => Ok((
            load_csv_dataset(source, true, Domain::Source)?,
            load_csv_dataset(target, *target_has_labels, Domain::Target)?,
        )),
    }
}

/// Loads a CSV whose rows have either `in_dim` features or `in_dim`
/// features plus a label; the first row decides.
pub fn load_csv_for_model(path: &Path, in_dim: usize) -> Result<LabeledDataset> {
    let text = io(path, std::fs::read_to_string(path))?;
    let width = text.lines().find(|l| !l.trim().is_empty()).map(|l| l.split(',').count());
    let has_labels = match width {
        Some(w) if w == in_dim + 1 => true,
        Some(w) if w == in_dim => false,
        Some(w) => {
            return Err(Error::contract(format!(
                "{}: rows have {w} columns, the model expects {in_dim} features (plus an optional label)",
                path.display()
            )))
        }
        None => false,
    };
    parse_csv_dataset(&text, has_labels, Domain::Target, &path.display().to_string())
}

fn check_model_fits(model: &ModelParams, cfg: &RunConfig, data: &LabeledDataset) -> Result<()> {
    if model.in_dim() != data.dim() || model.n_classes() != cfg.n_classes {
        return Err(Error::contract(format!(
            "checkpoint expects {} inputs and {} classes; configured data has {} inputs and {} classes",
            model.in_dim(),
            model.n_classes(),
            data.dim(),
            cfg.n_classes
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    io(dir, std::fs::create_dir_all(dir))
}

fn cmd_gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let (source, target) = load_datasets(cfg)?;
    create_dir(dir)?;
    source.write_csv(&dir.join("source.csv"))?;
    target.write_csv(&dir.join("target.csv"))?;
    say(out, &format!("source_rows={} target_rows={}", source.len(), target.len()))
}

fn cmd_train_source(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let (source, _) = load_datasets(cfg)?;
    let model = train_source(&cfg.adapt, &source, cfg.n_classes)?;
    create_dir(dir)?;
    let ckpt = dir.join("source.ckpt");
    save_checkpoint(&ckpt, &model, &cfg.hash())?;
    RunManifest { command: "train-source".into(), config: cfg.clone(), out_dir: dir.to_path_buf(), source_checkpoint: None }
        .write(&dir.join("manifest.txt"))?;
    let acc = evaluate(&model, &source)?;
    say(out, &format!("source_accuracy={} checkpoint={}", fmt_num(acc.overall), ckpt.display()))
}

fn cmd_adapt(cfg: &RunConfig, checkpoint: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let source_model = load_checkpoint(checkpoint)?.params;
    let (_, target) = load_datasets(cfg)?;
    check_model_fits(&source_model, cfg, &target)?;
    let evaluator = target.labels.clone().map(|l| Evaluator::new(l, cfg.n_classes)).transpose()?;
    create_dir(dir)?;
    RunManifest {
        command: "adapt".into(),
        config: cfg.clone(),
        out_dir: dir.to_path_buf(),
        source_checkpoint: Some(checkpoint.to_path_buf()),
    }
    .write(&dir.join("manifest.txt"))?;

    let hash = cfg.hash();
    let every = cfg.checkpoint_every;
    let aggregate = run_seeds(&cfg.adapt, &cfg.seeds, |seeded| {
        let seed_dir = dir.join(format!("seed-{}", seeded.seed));
        create_dir(&seed_dir)?;
        let mut log = String::new();
        let outcome = adapt_target_with(seeded, &source_model, &target.inputs, evaluator.as_ref(), &mut |rec, model| {
            log.push_str(&rec.to_line());
            log.push('\n');
            if every > 0 && rec.epoch % every == 0 {
                save_checkpoint(&seed_dir.join(format!("epoch-{}.ckpt", rec.epoch)), model, &hash)?;
            }
            Ok(())
        })?;
        let log_path = seed_dir.join("metrics.log");
        io(&log_path, std::fs::write(&log_path, log))?;
        save_checkpoint(&seed_dir.join("final.ckpt"), &outcome.model, &hash)?;
        Ok(outcome.metrics.last().cloned().unwrap_or_else(|| empty_record(0)))
    })?;

    let mut summary = String::new();
    if let Some(ev) = &evaluator {
        let src = ev.score(&source_model.predict(&target.inputs)?)?;
        summary.push_str(&format!("source_only_accuracy={}\n", fmt_num(src.overall)));
    }
    summary.push_str(&aggregate.to_text());
    let path = dir.join("summary.txt");
    io(&path, std::fs::write(&path, &summary))?;
    io(Path::new("<stdout>"), out.write_all(summary.as_bytes()))
}

fn empty_record(epoch: usize) -> MetricsRecord {
    MetricsRecord {
        epoch,
        accuracy: None,
        mean_class_accuracy: None,
        per_class_accuracy: Vec::new(),
        pseudo_label_accuracy: None,
        conflict_count: 0,
        loss_breakdown: LossBreakdown::default(),
        ratio_median_nonconflict: None,
    }
}

fn cmd_eval(checkpoint: &Path, data: &Path, dest: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.params;
    let ds = load_csv_for_model(data, model.in_dim())?;
    if ds.labels.is_none() {
        return Err(Error::contract(format!(
            "{}: evaluation needs labels; add the class index as the last column",
            data.display()
        )));
    }
    let acc = evaluate(&model, &ds)?;
    if acc.missing_classes {
        eprintln!("warning: some classes have no samples and are excluded from the per-class mean");
    }
    let record = MetricsRecord {
        accuracy: Some(acc.overall),
        mean_class_accuracy: Some(acc.mean_per_class),
        per_class_accuracy: acc.per_class,
        loss_breakdown: LossBreakdown { batch_size: ds.len(), ..Default::default() },
        ..empty_record(0)
    };
    let line = record.to_line();
    if let Some(dest) = dest {
        io(&dest, std::fs::write(&dest, format!("{line}\n")))?;
    }
    say(out, &line)
}

fn cmd_threshold_stats(checkpoint: &Path, data: &Path, dest: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.params;
    let ds = load_csv_for_model(data, model.in_dim())?;
    let stats = threshold_report(&model, &ds.inputs)?;
    let text = threshold_stats_to_string(&stats);
    if let Some(dest) = dest {
        io(&dest, std::fs::write(&dest, &text))?;
    }
    io(Path::new("<stdout>"), out.write_all(text.as_bytes()))
}

fn cmd_export_embeddings(checkpoint: &Path, data: &Path, dest: &Path, r_th: f64, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.params;
    let ds = load_csv_for_model(data, model.in_dim())?;
    export_embeddings(&model, &ds, r_th, dest)?;
    say(out, &format!("rows={} path={}", ds.len(), dest.display()))
}
