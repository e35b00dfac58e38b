//! The four subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use rstd_core::data::{
    add_awgn, read_batch_file, resolve_data_dir, split_noise_seed, write_batch_file, Dataset, Split, NUM_CLASSES,
    TEST_FILE, TRAIN_FILES,
};
use rstd_core::nn::NetworkSpec;
use rstd_core::tdmodel::TopologyKind;
use rstd_core::trainer::{mean_std, train, TrainConfig, TrainReport};
use rstd_core::{Precision, Scalar};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{default_bond_count, ExperimentConfig, KindName};

pub const TRAIN_HEADER: [&str; 4] = ["epoch", "repetition", "train_loss", "test_accuracy"];
pub const SWEEP_HEADER: [&str; 6] = ["kind", "ranks", "r_c", "shuffled", "mean_accuracy", "std_accuracy"];
pub const SWEEP_FILE: &str = "sweep.csv";
pub const NOISE_SIDECAR: &str = "noise.toml";

/// Settings shared by every command after flags have been merged into the
/// config.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    /// Dataset directory used when the config has no `dataset.path`.
    pub data_dir_default: Option<PathBuf>,
    pub workers: Option<usize>,
    pub precision: Precision,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

impl RunContext {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            data_dir_default: None,
            workers: None,
            precision: Precision::F32,
            verbose: false,
        }
    }

    fn out_dir(&self) -> &Path {
        &self.config.output.dir
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers.unwrap_or(0))
            .build()
            .context("cannot start the worker pool")
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn rank_label(ranks: &[usize]) -> String {
    ranks.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// First `k` examples of every class from a sequence of files, read one at a
/// time so the unused remainder is never held in memory.
fn load_split(files: &[PathBuf], per_class: Option<usize>) -> Result<Dataset> {
    let mut taken = [0usize; NUM_CLASSES];
    let mut parts = Vec::new();
    for f in files {
        let part = read_batch_file(f)?;
        let Some(k) = per_class else {
            parts.push(part);
            continue;
        };
        let idx: Vec<usize> = (0..part.len())
            .filter(|&i| {
                let c = part.labels()[i] as usize;
                taken[c] += 1;
                taken[c] <= k
            })
            .collect();
        if !idx.is_empty() {
            parts.push(part.select(&idx)?);
        }
        if taken.iter().all(|&t| t >= k) {
            break;
        }
    }
    Ok(Dataset::concat(&parts)?)
}

/// Train and test sets as configured: subset, then in-memory (unclamped) noise.
pub fn load_datasets(cfg: &ExperimentConfig, data_dir_default: Option<PathBuf>) -> Result<(Dataset, Dataset)> {
    let dir = resolve_data_dir(&cfg.data_dir(data_dir_default)?);
    let d = &cfg.dataset;
    let train_files: Vec<PathBuf> = TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    let mut train_set = load_split(&train_files, d.train_per_class)?;
    let mut test_set = load_split(&[dir.join(TEST_FILE)], d.test_per_class)?;
    if d.noise_dev > 0.0 {
        train_set = add_awgn(&train_set, d.noise_dev, split_noise_seed(d.noise_seed, Split::Train))?;
        test_set = add_awgn(&test_set, d.noise_dev, split_noise_seed(d.noise_seed, Split::Test))?;
    }
    Ok((train_set, test_set))
}

/// Per-epoch rows followed by `summary,all,<mean final train loss>,<mean accuracy>`.
pub fn train_csv(report: &TrainReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAIN_HEADER)?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.repetition.to_string(),
            fmt_f64(e.train_loss),
            fmt_f64(e.test_accuracy),
        ])?;
    }
    let reps = report.final_accuracies.len();
    let final_losses: Vec<f64> = (0..reps)
        .filter_map(|r| report.epochs.iter().rev().find(|e| e.repetition == r).map(|e| e.train_loss))
        .collect();
    let loss = if final_losses.is_empty() {
        String::new()
    } else {
        fmt_f64(mean_std(&final_losses).0)
    };
    w.write_record(["summary".into(), "all".into(), loss, fmt_f64(report.mean_accuracy)])?;
    Ok(w.into_inner()?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub report: TrainReport,
    pub csv_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub permutation_files: Vec<PathBuf>,
}

impl TrainSummary {
    pub fn line(&self) -> String {
        let r = &self.report;
        format!(
            "mean_accuracy={:.4} std_accuracy={:.4} r_c={} repetitions={} wall_clock={:.1}s",
            r.mean_accuracy,
            r.std_accuracy,
            r.compression_ratio,
            r.final_accuracies.len(),
            r.wall_clock.as_secs_f64()
        )
    }
}

pub fn cmd_train(ctx: &RunContext) -> Result<TrainSummary> {
    let spec = ctx.config.network_spec()?;
    let tc = ctx.config.train_config();
    let (train_set, test_set) = load_datasets(&ctx.config, ctx.data_dir_default.clone())?;
    let pool = ctx.pool()?;
    pool.install(|| match ctx.precision {
        Precision::F32 => train_typed::<f32>(ctx, &spec, &tc, &train_set, &test_set),
        Precision::F64 => train_typed::<f64>(ctx, &spec, &tc, &train_set, &test_set),
    })
}

fn train_typed<T: Scalar>(
    ctx: &RunContext,
    spec: &NetworkSpec,
    tc: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainSummary> {
    let verbose = ctx.verbose;
    let outcome = train::<T>(spec, train_set, test_set, tc, |e| {
        if verbose {
            eprintln!(
                "rep {} epoch {} train_loss {:.4} test_accuracy {:.4}",
                e.repetition, e.epoch, e.train_loss, e.test_accuracy
            );
        }
    })?;
    let out = ctx.out_dir();
    let csv_path = ctx.config.csv_path();
    write_file(&csv_path, &train_csv(&outcome.report)?)?;

    let ckpt = Checkpoint::from_network(&outcome.network)?;
    ensure!(
        ckpt.compression_param_count() == outcome.network.compression_param_count(),
        "checkpoint holds {} counted parameters, the network reports {}",
        ckpt.compression_param_count(),
        outcome.network.compression_param_count()
    );
    let checkpoint_path = out.join(checkpoint::FILE_NAME);
    write_file(&checkpoint_path, &ckpt.to_bytes())?;

    let mut permutation_files = Vec::new();
    for (name, conv) in outcome.network.conv_layers() {
        if let Some(p) = conv.shuffle() {
            let path = out.join("permutations").join(format!("{name}.rspm"));
            write_file(&path, &p.to_bytes())?;
            permutation_files.push(path);
        }
    }
    Ok(TrainSummary {
        report: outcome.report,
        csv_path,
        checkpoint_path,
        permutation_files,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub kind: Option<TopologyKind>,
    pub ranks: Vec<usize>,
    pub shuffled: bool,
}

impl SweepPoint {
    fn kind_name(&self) -> &'static str {
        self.kind.map_or("none", |k| k.name())
    }

    fn file_stem(&self) -> String {
        let variant = if self.shuffled { "rstd" } else { "td" };
        if self.ranks.is_empty() {
            format!("{}_{variant}", self.kind_name())
        } else {
            format!("{}_r{}_{variant}", self.kind_name(), rank_label(&self.ranks))
        }
    }

    fn spec(&self, base: &ExperimentConfig) -> Result<NetworkSpec> {
        let mut cfg = base.clone();
        cfg.model.kind = match self.kind {
            None => KindName::None,
            Some(TopologyKind::TensorTrain) => KindName::Tt,
            Some(TopologyKind::TtMatrix) => KindName::TtMatrix,
            Some(TopologyKind::TensorRing) => KindName::Tr,
            Some(TopologyKind::Custom) => bail!("custom topologies cannot be swept"),
        };
        cfg.model.ranks = self.ranks.clone();
        cfg.model.shuffled = self.shuffled;
        Ok(cfg.network_spec()?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub compression_ratio: f64,
    /// `None` in accounting-only sweeps.
    pub accuracy: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub ranks: Vec<usize>,
    /// Decomposition swept; the config's `model.kind` when absent.
    pub kind: Option<TopologyKind>,
    pub include_uncompressed: bool,
    pub accounting_only: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("usage: {0}")]
pub struct UsageError(pub String);

/// TD then RsTD at every rank, uniform across the bonds. The bond count is
/// the length of `model.ranks` when set for the swept kind.
pub fn sweep_points(cfg: &ExperimentConfig, args: &SweepArgs) -> Result<Vec<SweepPoint>> {
    if args.ranks.is_empty() {
        return Err(UsageError("the rank list is empty".into()).into());
    }
    let kind = match args.kind.or(cfg.model.kind.topology()) {
        Some(k) => k,
        None => return Err(UsageError("no decomposition kind: pass --kind or set model.kind".into()).into()),
    };
    let bonds = if cfg.model.kind.topology() == Some(kind) && !cfg.model.ranks.is_empty() {
        cfg.model.ranks.len()
    } else {
        default_bond_count(kind)
    };
    let mut points = Vec::new();
    if args.include_uncompressed {
        points.push(SweepPoint {
            kind: None,
            ranks: Vec::new(),
            shuffled: false,
        });
    }
    for &r in &args.ranks {
        if r == 0 {
            return Err(UsageError("ranks must be at least 1".into()).into());
        }
        for shuffled in [false, true] {
            points.push(SweepPoint {
                kind: Some(kind),
                ranks: vec![r; bonds],
                shuffled,
            });
        }
    }
    Ok(points)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_HEADER)?;
    for row in rows {
        let (mean, std) = row
            .accuracy
            .map_or((String::new(), String::new()), |(m, s)| (fmt_f64(m), fmt_f64(s)));
        w.write_record([
            row.point.kind_name().to_string(),
            rank_label(&row.point.ranks),
            fmt_f64(row.compression_ratio),
            row.point.shuffled.to_string(),
            mean,
            std,
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Runs every sweep point, up to `workers` at a time. The first failure stops
/// points that have not started yet; rows of completed points are still
/// written before the error is returned.
pub fn cmd_sweep(ctx: &RunContext, args: &SweepArgs) -> Result<Vec<SweepRow>> {
    let points = sweep_points(&ctx.config, args)?;
    let specs = points
        .iter()
        .map(|p| p.spec(&ctx.config).with_context(|| format!("sweep point {}", p.file_stem())))
        .collect::<Result<Vec<_>>>()?;
    let data = if args.accounting_only {
        None
    } else {
        Some(load_datasets(&ctx.config, ctx.data_dir_default.clone())?)
    };
    let out = ctx.out_dir().to_path_buf();
    let tc = ctx.config.train_config();
    let abort = AtomicBool::new(false);

    let run_point = |(point, spec): (&SweepPoint, &NetworkSpec)| -> Option<Result<SweepRow>> {
        if abort.load(Ordering::SeqCst) {
            return None;
        }
        let result = (|| {
            let compression_ratio = spec.compression_ratio()?;
            let accuracy = match &data {
                None => None,
                Some((train_set, test_set)) => {
                    let report = match ctx.precision {
                        Precision::F32 => train::<f32>(spec, train_set, test_set, &tc, |_| {})?.report,
                        Precision::F64 => train::<f64>(spec, train_set, test_set, &tc, |_| {})?.report,
                    };
                    let path = out.join("points").join(format!("{}.csv", point.file_stem()));
                    write_file(&path, &train_csv(&report)?)?;
                    if ctx.verbose {
                        eprintln!("{}: mean_accuracy {:.4}", point.file_stem(), report.mean_accuracy);
                    }
                    Some((report.mean_accuracy, report.std_accuracy))
                }
            };
            Ok::<_, anyhow::Error>(SweepRow {
                point: point.clone(),
                compression_ratio,
                accuracy,
            })
        })()
        .with_context(|| format!("sweep point {} failed", point.file_stem()));
        if result.is_err() {
            abort.store(true, Ordering::SeqCst);
        }
        Some(result)
    };

    let results: Vec<Option<Result<SweepRow>>> =
        ctx.pool()?.install(|| points.par_iter().zip(&specs).map(run_point).collect());

    let mut rows = Vec::new();
    let mut first_err = None;
    for r in results.into_iter().flatten() {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let sweep_path = out.join(SWEEP_FILE);
    write_file(&sweep_path, &sweep_csv(&rows)?)?;
    if let Some(e) = first_err {
        return Err(e.context(format!(
            "sweep aborted; {} completed rows flushed to {}",
            rows.len(),
            sweep_path.display()
        )));
    }
    Ok(rows)
}

/// Seeds are strings because TOML integers are signed 64-bit.
#[derive(Debug, Serialize)]
struct NoiseSidecar {
    dev: f64,
    seed: String,
    train_seed: String,
    test_seed: String,
    source: String,
    note: &'static str,
}

/// Writes the AWGN variant of the dataset: the five training files and the
/// test file in the standard layout, plus `noise.toml`.
pub fn cmd_make_noisy(ctx: &RunContext, dev: f64, seed: u64) -> Result<Vec<PathBuf>> {
    ensure!(dev.is_finite() && dev >= 0.0, "noise deviation must be >= 0, got {dev}");
    let src = resolve_data_dir(&ctx.config.data_dir(ctx.data_dir_default.clone())?);
    let out = ctx.out_dir();
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut written = Vec::new();

    let parts = TRAIN_FILES
        .iter()
        .map(|f| read_batch_file(&src.join(f)))
        .collect::<rstd_core::Result<Vec<_>>>()?;
    let lens: Vec<usize> = parts.iter().map(Dataset::len).collect();
    let train_seed = split_noise_seed(seed, Split::Train);
    let noisy = add_awgn(&Dataset::concat(&parts)?, dev, train_seed)?;
    drop(parts);
    let mut start = 0;
    for (f, len) in TRAIN_FILES.iter().zip(lens) {
        let idx: Vec<usize> = (start..start + len).collect();
        let path = out.join(f);
        write_batch_file(&path, &noisy.select(&idx)?)?;
        written.push(path);
        start += len;
    }
    drop(noisy);

    let test_seed = split_noise_seed(seed, Split::Test);
    let test_set = add_awgn(&read_batch_file(&src.join(TEST_FILE))?, dev, test_seed)?;
    let path = out.join(TEST_FILE);
    write_batch_file(&path, &test_set)?;
    written.push(path);

    let sidecar = NoiseSidecar {
        dev,
        seed: seed.to_string(),
        train_seed: train_seed.to_string(),
        test_seed: test_seed.to_string(),
        source: src.display().to_string(),
        note: "pixels were re-quantized to bytes by clamped rounding; the unclamped in-memory variant differs at the clamp tails",
    };
    let path = out.join(NOISE_SIDECAR);
    write_file(&path, toml::to_string(&sidecar)?.as_bytes())?;
    written.push(path);
    Ok(written)
}

/// Text summary of training or sweep CSV files.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    ensure!(!paths.is_empty(), UsageError("no CSV files given".into()));
    let mut out = String::new();
    for path in paths {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let records = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        writeln!(out, "{}", path.display())?;
        if header == TRAIN_HEADER {
            report_train(&mut out, &records).with_context(|| format!("in {}", path.display()))?;
        } else if header == SWEEP_HEADER {
            report_sweep(&mut out, &records).with_context(|| format!("in {}", path.display()))?;
        } else {
            bail!("{}: unrecognised header {:?}", path.display(), header);
        }
    }
    Ok(out)
}

fn report_train(out: &mut String, records: &[csv::StringRecord]) -> Result<()> {
    // final accuracy of each repetition: its last epoch row
    let mut finals: Vec<(usize, usize, f64)> = Vec::new();
    for rec in records.iter().filter(|r| &r[0] != "summary") {
        let (epoch, rep, acc): (usize, usize, f64) = (rec[0].parse()?, rec[1].parse()?, rec[3].parse()?);
        match finals.iter_mut().find(|f| f.0 == rep) {
            Some(f) if f.1 <= epoch => *f = (rep, epoch, acc),
            Some(_) => {}
            None => finals.push((rep, epoch, acc)),
        }
    }
    finals.sort_by_key(|f| f.0);
    for (rep, epoch, acc) in &finals {
        writeln!(out, "  repetition {rep}: {} epochs, final test accuracy {acc:.4}", epoch + 1)?;
    }
    if !finals.is_empty() {
        let accs: Vec<f64> = finals.iter().map(|f| f.2).collect();
        let (m, s) = mean_std(&accs);
        writeln!(out, "  mean test accuracy {m:.4} (std {s:.4}, {} repetitions)", accs.len())?;
    }
    if let Some(s) = records.iter().find(|r| &r[0] == "summary") {
        writeln!(out, "  summary row: final train loss {}, mean accuracy {}", &s[2], &s[3])?;
    }
    Ok(())
}

fn report_sweep(out: &mut String, records: &[csv::StringRecord]) -> Result<()> {
    writeln!(out, "  {:<10} {:<12} {:>10} {:>8} {:>10} {:>10}", "kind", "ranks", "r_c", "shuffled", "mean", "std")?;
    let mut rows: Vec<&csv::StringRecord> = records.iter().collect();
    rows.sort_by(|a, b| {
        let ra: f64 = a[2].parse().unwrap_or(f64::NAN);
        let rb: f64 = b[2].parse().unwrap_or(f64::NAN);
        ra.total_cmp(&rb).then_with(|| a[3].cmp(&b[3]))
    });
    for r in rows {
        let rc: f64 = r[2].parse().with_context(|| format!("bad r_c `{}`", &r[2]))?;
        let acc = |s: &str| -> Result<String> {
            Ok(if s.is_empty() { "-".into() } else { format!("{:.4}", s.parse::<f64>()?) })
        };
        writeln!(
            out,
            "  {:<10} {:<12} {:>10.6} {:>8} {:>10} {:>10}",
            &r[0],
            &r[1],
            rc,
            &r[3],
            acc(&r[4])?,
            acc(&r[5])?
        )?;
    }
    let rcs: Vec<f64> = records.iter().filter_map(|r| r[2].parse().ok()).collect();
    if let (Some(lo), Some(hi)) = (
        rcs.iter().copied().reduce(f64::min),
        rcs.iter().copied().reduce(f64::max),
    ) {
        writeln!(out, "  r_c spans {lo:.6} to {hi:.6}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    use rstd_core::trainer::EpochRecord;

    #[test]
    fn rank_labels() {
        assert_eq!(rank_label(&[1, 1, 1, 1]), "1-1-1-1");
        assert_eq!(rank_label(&[]), "");
    }

    #[test]
    fn train_csv_summary_row() {
        let rec = |repetition, epoch, train_loss, test_accuracy| EpochRecord {
            repetition,
            epoch,
            train_loss,
            test_accuracy,
        };
        let report = TrainReport {
            epochs: vec![rec(0, 0, 2.0, 0.1), rec(0, 1, 1.0, 0.3), rec(1, 0, 2.5, 0.2), rec(1, 1, 1.5, 0.5)],
            final_accuracies: vec![0.3, 0.5],
            mean_accuracy: 0.4,
            std_accuracy: 0.1,
            compression_ratio: 1.0,
            wall_clock: Duration::ZERO,
        };
        let text = String::from_utf8(train_csv(&report).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,repetition,train_loss,test_accuracy");
        assert_eq!(lines[2], "1,0,1,0.3");
        assert_eq!(lines[5], "summary,all,1.25,0.4");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn points_and_usage_errors() {
        let cfg = ExperimentConfig::parse("[model]\nkind = \"TR\"\nranks = [2, 2, 2, 2]\n").unwrap();
        let args = SweepArgs {
            ranks: vec![1, 3],
            kind: None,
            include_uncompressed: false,
            accounting_only: true,
        };
        let p = sweep_points(&cfg, &args).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[3].ranks, vec![3; 4]);
        assert!(p[3].shuffled && !p[2].shuffled);

        let empty = SweepArgs { ranks: vec![], ..args.clone() };
        assert!(sweep_points(&cfg, &empty).unwrap_err().is::<UsageError>());
        let plain = ExperimentConfig::parse("").unwrap();
        assert!(sweep_points(&plain, &args).unwrap_err().is::<UsageError>());
        let tt = SweepArgs {
            kind: Some(TopologyKind::TensorTrain),
            include_uncompressed: true,
            ..args
        };
        let p = sweep_points(&plain, &tt).unwrap();
        assert_eq!(p.len(), 5);
        assert_eq!(p[0].kind, None);
        assert_eq!(p[1].ranks, vec![1; 3]);
    }
}
