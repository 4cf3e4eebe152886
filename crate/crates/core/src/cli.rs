//! Command-line entry points, run directories and dataset files.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{file_hash, load_decoder, load_encoder, save_decoder, save_encoder};
use crate::config::ExperimentConfig;
use crate::damma::adapt;
use crate::datagen::{
    make_source_test, make_source_train, make_target_partition, ManifestRecord, Partition, Sample,
};
use crate::error::{Error, Result};
use crate::eval::{comparison_grid, evaluate, run_benchmark, run_csv_line, Bicubic, MetricsReport, RUNS_CSV_HEADER};
use crate::image::Image;
use crate::losses::FeatureExtractor;
use crate::model::Model;
use crate::train::{train_decoder, train_encoder};

/// Overrides the default `runs` directory.
pub const RUN_ROOT_ENV: &str = "DAPFSR_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "dapfsr", version, about = "One-shot cross-domain face super-resolution")]
pub struct Cli {
    /// Experiment TOML; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every training, adaptation and split seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// With `false`, the clock is mixed into the seed.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    pub deterministic: bool,
    #[arg(long, global = true, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
    /// Run directory name; defaults to `<command>-<timestamp>-<config hash>`.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalPartition {
    SourceTest,
    TargetTest,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the source and target partitions to PNG with a manifest.
    SynthDataset {
        /// Target split seed for the exemplar/test partition.
        #[arg(long, default_value_t = 0)]
        split: u64,
    },
    /// Adversarially train the decoder on source HR faces.
    TrainDecoder {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the encoder against a frozen decoder checkpoint.
    TrainEncoder {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// One-shot adaptation from a single target exemplar.
    Adapt {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, default_value_t = 0)]
        split: u64,
        #[arg(long, default_value_t = 0)]
        draw: u64,
    },
    /// Score a model on a test partition.
    Evaluate {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Adapted decoder to use in place of `--decoder` for synthesis.
        #[arg(long)]
        adapted: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalPartition::TargetTest)]
        partition: EvalPartition,
        #[arg(long, default_value_t = 0)]
        split: u64,
        #[arg(long, default_value_t = 0)]
        draw: u64,
        /// Score bicubic upsampling instead of the model.
        #[arg(long)]
        bicubic: bool,
    },
    /// Full table: bicubic, source-only, direct fine-tuning, adapted, ablations.
    /// Runs procurement first when no checkpoints are given.
    Benchmark {
        #[arg(long, requires = "encoder")]
        decoder: Option<PathBuf>,
        #[arg(long, requires = "decoder")]
        encoder: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthDataset { .. } => "synth-dataset",
            Command::TrainDecoder { .. } => "train-decoder",
            Command::TrainEncoder { .. } => "train-encoder",
            Command::Adapt { .. } => "adapt",
            Command::Evaluate { .. } => "evaluate",
            Command::Benchmark { .. } => "benchmark",
        }
    }
}

static LOG_FILE: Mutex<Option<File>> = Mutex::new(None);

/// Log sink writing to stderr and the current run's log file.
struct Tee;

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = LOG_FILE.lock().unwrap().as_mut() {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = LOG_FILE.lock().unwrap().as_mut() {
            f.flush()?;
        }
        std::io::stderr().flush()
    }
}

fn init_logging(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("run.log");
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    *LOG_FILE.lock().unwrap() = Some(f);
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee)))
        .try_init();
    Ok(())
}

/// Creates `root/name`, refusing to reuse an existing directory.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let dir = root.join(name);
    fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serialisable") + "\n")
}

/// Writes PNGs under `hr/` and `lr/` plus `manifest.jsonl`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["hr", "lr"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for s in samples {
        let rec = ManifestRecord::for_sample(s);
        s.hr.save_png(&dir.join(&rec.hr_path))?;
        s.lr.save_png(&dir.join(&rec.lr_path))?;
        manifest.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        manifest.push('\n');
    }
    write_file(&dir.join("manifest.jsonl"), manifest)
}

/// Reads a dataset written by [`write_dataset`]; all absent images are
/// reported together.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<ManifestRecord>(l).map_err(|e| Error::Parse {
                path: path.clone(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let missing: Vec<String> = records
        .iter()
        .filter(|r| !dir.join(&r.hr_path).is_file() || !dir.join(&r.lr_path).is_file())
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages(missing));
    }
    records
        .into_iter()
        .map(|r| {
            Ok(Sample {
                hr: Image::load_png(&dir.join(&r.hr_path))?,
                lr: Image::load_png(&dir.join(&r.lr_path))?,
                id: r.id,
                partition: r.partition,
                seed: r.seed,
                domain: r.domain,
                perturbation: r.perturbation,
            })
        })
        .collect()
}

fn partition(samples: &[Sample], p: Partition) -> Vec<Sample> {
    samples.iter().filter(|s| s.partition == p).cloned().collect()
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    started: String,
    config_hash: String,
    deterministic: bool,
    inputs: Vec<(String, String)>,
}

fn hash_inputs(paths: &[&Path]) -> Result<Vec<(String, String)>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), file_hash(p)?)))
        .collect()
}

fn load_model(decoder: &Path, encoder: &Path) -> Result<Model> {
    let (dec, stats) = load_decoder(decoder)?;
    let enc = load_encoder(encoder, &dec)?;
    Model::new(dec, enc, stats)
}

/// Replaces the synthesis decoder with an adapted copy of the same network.
fn with_adapted(model: Model, adapted: &Path) -> Result<Model> {
    let (dec, _) = load_decoder(adapted)?;
    if dec.config != model.decoder.config || dec.checksum_other() != model.decoder.checksum_other() {
        return Err(Error::Pairing(format!(
            "{} is not an adaptation of the paired decoder",
            adapted.display()
        )));
    }
    Model::new(dec, model.encoder, model.stats)
}

fn source_train(cfg: &ExperimentConfig, dataset: &Option<PathBuf>) -> Result<Vec<Sample>> {
    match dataset {
        Some(d) => Ok(partition(&read_dataset(d)?, Partition::SourceTrain)),
        None => make_source_train(cfg.datagen.n_source, &cfg.datagen.source, &cfg.datagen),
    }
}

/// Trains decoder then encoder, saving both checkpoints and loss curves in `dir`.
pub fn procure(cfg: &ExperimentConfig, samples: &[Sample], f: &FeatureExtractor, dir: &Path) -> Result<Model> {
    let hr: Vec<Image> = samples.iter().map(|s| s.hr.clone()).collect();
    let (dec, stats, dlog) = train_decoder(&hr, &cfg.decoder, &cfg.train)?;
    save_decoder(&dir.join("decoder.ckpt"), &dec, &stats)?;
    write_file(&dir.join("decoder_losses.csv"), dlog.to_csv())?;
    save_samples(dir, "decoder", &dlog.samples)?;
    let (model, elog) = train_encoder(samples, &dec, &stats, &cfg.encoder, f, &cfg.train)?;
    save_encoder(&dir.join("encoder.ckpt"), &model.encoder, &dec.checksum())?;
    write_file(&dir.join("encoder_losses.csv"), elog.to_csv())?;
    save_samples(dir, "encoder", &elog.samples)?;
    Ok(model)
}

fn save_samples(dir: &Path, prefix: &str, samples: &[(usize, Image)]) -> Result<()> {
    if samples.is_empty() {
        return Ok(());
    }
    let sub = dir.join("samples");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    for (step, img) in samples {
        img.save_png(&sub.join(format!("{prefix}_{step:06}.png")))?;
    }
    Ok(())
}

fn report_csv(r: &MetricsReport) -> String {
    let mut s = String::from("id,psnr_db,ssim,feature_distance_proxy\n");
    for m in &r.per_image {
        let p = m.psnr.map_or("inf".to_string(), |v| v.to_string());
        s.push_str(&format!("{},{p},{},{}\n", m.id, m.ssim, m.feature_distance_proxy));
    }
    s
}

/// Executes one parsed command inside a fresh run directory.
pub fn execute(cli: Cli) -> Result<PathBuf> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <PATH> is required".into()))?;
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if !cli.deterministic {
        let nanos = chrono::Utc::now().timestamp_nanos_opt().unwrap_or(0) as u64;
        cfg = cfg.clone().with_seed(cli.seed.unwrap_or(0) ^ nanos);
    }
    cfg.validate()?;
    let name = cli.run_name.clone().unwrap_or_else(|| {
        format!(
            "{}-{}-{}",
            cli.command.name(),
            chrono::Local::now().format("%Y%m%d-%H%M%S"),
            &cfg.hash()[..8]
        )
    });
    let dir = create_run_dir(&cli.run_root, &name)?;
    init_logging(&dir)?;
    write_file(&dir.join("config.toml"), cfg.to_toml_string())?;
    let f = FeatureExtractor::from_config(&cfg.losses)?;
    let stat = cfg.losses.style_statistic;
    let mut inputs: Vec<&Path> = vec![config_path];
    log::info!("{} -> {}", cli.command.name(), dir.display());
    match &cli.command {
        Command::SynthDataset { split } => {
            let d = &cfg.datagen;
            let mut all = make_source_train(d.n_source, &d.source, d)?;
            all.extend(make_source_test(d.n_source_test, &d.source, d)?);
            let (ex, test) = make_target_partition(d.n_target_test, &d.target, *split, 0, d)?;
            all.push(ex);
            all.extend(test);
            write_dataset(&dir.join("dataset"), &all)?;
            log::info!("wrote {} samples", all.len());
        }
        Command::TrainDecoder { dataset } => {
            let samples = source_train(&cfg, dataset)?;
            let hr: Vec<Image> = samples.iter().map(|s| s.hr.clone()).collect();
            let (dec, stats, dlog) = train_decoder(&hr, &cfg.decoder, &cfg.train)?;
            save_decoder(&dir.join("decoder.ckpt"), &dec, &stats)?;
            write_file(&dir.join("decoder_losses.csv"), dlog.to_csv())?;
            save_samples(&dir, "decoder", &dlog.samples)?;
        }
        Command::TrainEncoder { decoder, dataset } => {
            inputs.push(decoder);
            let samples = source_train(&cfg, dataset)?;
            let (dec, stats) = load_decoder(decoder)?;
            let (model, elog) = train_encoder(&samples, &dec, &stats, &cfg.encoder, &f, &cfg.train)?;
            save_encoder(&dir.join("encoder.ckpt"), &model.encoder, &dec.checksum())?;
            write_file(&dir.join("encoder_losses.csv"), elog.to_csv())?;
            save_samples(&dir, "encoder", &elog.samples)?;
        }
        Command::Adapt {
            decoder,
            encoder,
            split,
            draw,
        } => {
            inputs.extend([decoder.as_path(), encoder.as_path()]);
            let model = load_model(decoder, encoder)?;
            let d = &cfg.datagen;
            let (ex, test) = make_target_partition(d.n_target_test, &d.target, *split, *draw, d)?;
            let (adapted, trace) = adapt(&model, &f, stat, &ex.lr, &ex.hr, &cfg.adapt)?;
            write_file(&dir.join("trace.jsonl"), trace.to_jsonl())?;
            save_decoder(&dir.join("adapted_decoder.ckpt"), &adapted, &model.stats)?;
            let adapted_model = Model::new(adapted, model.encoder.clone(), model.stats.clone())?;
            for s in test.iter().take(4) {
                let grid = comparison_grid(&s.lr, &model.super_resolve(&s.lr)?, &adapted_model.super_resolve(&s.lr)?, &s.hr);
                grid.save_png(&dir.join(format!("grid_{}.png", s.id)))?;
            }
            let rep = evaluate(&adapted_model, &test, &f, &format!("split-{split}"), &ex.id)?;
            write_json(&dir.join("report.json"), &rep)?;
            log::info!("adapted psnr {:?} ssim {:.4} ({})", rep.psnr, rep.ssim, trace.stop_reason);
        }
        Command::Evaluate {
            decoder,
            encoder,
            adapted,
            dataset,
            partition: which,
            split,
            draw,
            bicubic,
        } => {
            inputs.extend([decoder.as_path(), encoder.as_path()]);
            let mut model = load_model(decoder, encoder)?;
            if let Some(a) = adapted {
                inputs.push(a);
                model = with_adapted(model, a)?;
            }
            let d = &cfg.datagen;
            let (test, exemplar_id) = match (dataset, which) {
                (Some(ds), EvalPartition::SourceTest) => (partition(&read_dataset(ds)?, Partition::SourceTest), String::new()),
                (Some(ds), EvalPartition::TargetTest) => {
                    let all = read_dataset(ds)?;
                    let ex = all.iter().find(|s| s.partition == Partition::TargetExemplar).map(|s| s.id.clone());
                    (partition(&all, Partition::TargetTest), ex.unwrap_or_default())
                }
                (None, EvalPartition::SourceTest) => (make_source_test(d.n_source_test, &d.source, d)?, String::new()),
                (None, EvalPartition::TargetTest) => {
                    let (ex, test) = make_target_partition(d.n_target_test, &d.target, *split, *draw, d)?;
                    (test, ex.id)
                }
            };
            let split_id = format!("split-{split}");
            let rep = if *bicubic {
                evaluate(&Bicubic { size: d.hr_size }, &test, &f, &split_id, &exemplar_id)?
            } else {
                evaluate(&model, &test, &f, &split_id, &exemplar_id)?
            };
            write_json(&dir.join("report.json"), &rep)?;
            write_file(&dir.join("report.csv"), report_csv(&rep))?;
            log::info!("psnr {:?} ssim {:.4} feature distance (proxy) {:.4}", rep.psnr, rep.ssim, rep.feature_distance_proxy);
        }
        Command::Benchmark { decoder, encoder } => {
            let model = match (decoder, encoder) {
                (Some(dp), Some(ep)) => {
                    inputs.extend([dp.as_path(), ep.as_path()]);
                    load_model(dp, ep)?
                }
                _ => {
                    let d = &cfg.datagen;
                    let samples = make_source_train(d.n_source, &d.source, d)?;
                    procure(&cfg, &samples, &f, &dir)?
                }
            };
            let runs_path = dir.join("runs.csv");
            write_file(&runs_path, RUNS_CSV_HEADER)?;
            let mut flush = |r: &crate::eval::RunRecord| -> Result<()> {
                let mut fh = fs::OpenOptions::new()
                    .append(true)
                    .open(&runs_path)
                    .map_err(|e| Error::io(&runs_path, e))?;
                fh.write_all(run_csv_line(r).as_bytes()).map_err(|e| Error::io(&runs_path, e))
            };
            let table = run_benchmark(&model, &f, stat, &cfg.datagen, &cfg.adapt, &cfg.eval, &mut flush)?;
            write_file(&dir.join("benchmark.csv"), table.to_csv())?;
            write_json(&dir.join("benchmark.json"), &table)?;
            print!("{}", table.to_csv());
        }
    }
    let prov = Provenance {
        command: cli.command.name(),
        started: chrono::Local::now().to_rfc3339(),
        config_hash: cfg.hash(),
        deterministic: cli.deterministic,
        inputs: hash_inputs(&inputs)?,
    };
    write_json(&dir.join("provenance.json"), &prov)?;
    Ok(dir)
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatagenConfig;

    #[test]
    fn run_dir_is_fail_if_exists() {
        let root = tempfile::tempdir().unwrap();
        create_run_dir(root.path(), "a").unwrap();
        assert!(matches!(create_run_dir(root.path(), "a"), Err(Error::Io { .. })));
    }

    #[test]
    fn dataset_round_trip_and_missing_images() {
        let cfg = DatagenConfig {
            hr_size: 32,
            factor: 8,
            ..Default::default()
        };
        let samples = make_source_test(3, &cfg.source, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert!(a.hr.data().iter().zip(b.hr.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        fs::remove_file(dir.path().join(format!("hr/{}.png", samples[1].id))).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::MissingImages(ids)) => assert_eq!(ids, vec![samples[1].id.clone()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["dapfsr", "no-such-command"]), 2);
        let root = tempfile::tempdir().unwrap();
        let code = run([
            "dapfsr".into(),
            "synth-dataset".into(),
            "--run-root".into(),
            root.path().as_os_str().to_owned(),
        ] as [OsString; 4]);
        assert_eq!(code, 2);
    }
}
