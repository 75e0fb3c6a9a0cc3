use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use spqr_core::analysis::{
    compare_methods, config_bits, maxpool_heatmap, positional_error_stats, save_sensitivity_csv,
    sensitivity_rtn, Method, SensitivityMap,
};
use spqr_core::fixtures::{gaussian_matrix, outlier_fixture, rng, FixtureSpec};
use spqr_core::format::{estimate_avg_bits, read_spqr, write_spqr};
use spqr_core::hessian::HessianAccumulator;
use spqr_core::kernel::{bench_matvec, dense_matvec, dequantize_full, matvec, relative_l2};
use spqr_core::quant::{MAX_BITS, MIN_BITS};
use spqr_core::solver::{quantize_layer, SolverConfig, RAW_STATS_BITS};
use spqr_core::tensor_io::{
    load_entry_file, load_manifest, load_tensor, save_tensor, DenseTensor, ManifestEntry, ModelManifest,
    TensorIoError,
};

use crate::args::*;

/// A problem with the invocation or its inputs rather than with the tool.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Manifest entry names may contain anything but a tab; keep file names tame.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Loads the manifest and fails early, naming the entry, if any referenced
/// file is missing.
fn open_manifest(path: &Path) -> Result<ModelManifest> {
    let manifest = load_manifest(path)?;
    for entry in &manifest.entries {
        for p in std::iter::once(&entry.weight_path).chain(&entry.calib_paths) {
            if !p.exists() {
                return Err(TensorIoError::MissingFile {
                    entry: entry.name.clone(),
                    path: p.clone(),
                }
                .into());
            }
        }
    }
    Ok(manifest)
}

fn load_layer(entry: &ManifestEntry) -> Result<(DenseTensor, HessianAccumulator)> {
    let weight = load_entry_file(entry, &entry.weight_path)?;
    let mut acc = HessianAccumulator::new(weight.cols());
    for path in &entry.calib_paths {
        let x = load_entry_file(entry, path)?;
        if x.rows() != weight.cols() {
            return Err(TensorIoError::ShapeMismatch(format!(
                "entry `{}`: calibration {} has {} rows, weight has {} columns",
                entry.name,
                path.display(),
                x.rows(),
                weight.cols()
            ))
            .into());
        }
        acc.accumulate(&x)?;
    }
    Ok((weight, acc))
}

fn checked_config(args: &SolverArgs) -> Result<SolverConfig> {
    let cfg = args.to_config();
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `<stem>.csv` and `<stem>.jsonl` with one record per row.
fn write_reports<T: Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    let mut out = io::BufWriter::new(
        fs::File::create(&jsonl_path).with_context(|| format!("writing {}", jsonl_path.display()))?,
    );
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct QuantizeRow {
    entry: String,
    file: String,
    rows: usize,
    cols: usize,
    relative_error: f64,
    outlier_count: usize,
    outlier_rate: f64,
    measured_bits: f64,
    estimated_bits: f64,
    tau: Option<f64>,
    seed: u64,
    wall_time_s: f64,
}

pub fn quantize(args: &QuantizeArgs, seed: u64) -> Result<()> {
    let config = checked_config(&args.solver)?;
    let manifest = open_manifest(&args.manifest)?;
    ensure_dir(&args.out)?;
    let rows: Vec<QuantizeRow> = manifest
        .entries
        .par_iter()
        .map(|entry| -> Result<QuantizeRow> {
            let (weight, acc) = load_layer(entry)?;
            let out = quantize_layer(&weight, &acc, &config)
                .with_context(|| format!("quantizing entry `{}`", entry.name))?;
            let file = format!("{}.spqr", file_stem(&entry.name));
            write_spqr(&out.tensor, args.out.join(&file))?;
            let r = out.report;
            Ok(QuantizeRow {
                entry: entry.name.clone(),
                file,
                rows: r.rows,
                cols: r.cols,
                relative_error: r.relative_error,
                outlier_count: r.outlier_count,
                outlier_rate: r.outlier_rate,
                measured_bits: r.measured_bits,
                estimated_bits: r.estimated_bits,
                tau: r.tau,
                seed,
                wall_time_s: r.wall_time_s,
            })
        })
        .collect::<Result<_>>()?;
    write_reports(&args.out, "report", &rows)?;
    for r in &rows {
        println!(
            "{}: error {:.6}, {:.3} bits, {} outliers ({:.4}%)",
            r.entry,
            r.relative_error,
            r.measured_bits,
            r.outlier_count,
            100.0 * r.outlier_rate
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalRow {
    entry: String,
    method: Method,
    avg_bits: f64,
    relative_error: f64,
    outlier_rate: f64,
    baseline_group: usize,
    seed: u64,
}

pub fn eval(args: &EvalArgs, seed: u64) -> Result<()> {
    let config = checked_config(&args.solver)?;
    if args.baseline_group == Some(0) {
        return Err(usage("--baseline-group must be at least 1"));
    }
    let manifest = open_manifest(&args.manifest)?;
    ensure_dir(&args.out)?;
    let results = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let (weight, acc) = load_layer(entry)?;
            let cmp = compare_methods(&weight, &acc, &config, args.baseline_group, seed)
                .with_context(|| format!("evaluating entry `{}`", entry.name))?;
            Ok((entry.name.clone(), cmp))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (name, cmp) in &results {
        if let Some(w) = &cmp.warning {
            if args.strict_bits {
                return Err(usage(format!("entry `{name}`: {w}")));
            }
            eprintln!("warning: entry `{name}`: {w}");
        }
        for r in &cmp.rows {
            rows.push(EvalRow {
                entry: name.clone(),
                method: r.method,
                avg_bits: r.avg_bits,
                relative_error: r.relative_error,
                outlier_rate: r.outlier_rate,
                baseline_group: cmp.baseline_group,
                seed: r.seed,
            });
        }
    }
    write_reports(&args.out, "comparison", &rows)?;
    for r in &rows {
        println!("{}\t{}\t{:.3} bits\terror {:.6}", r.entry, r.method, r.avg_bits, r.relative_error);
    }
    Ok(())
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

#[derive(Debug, Serialize)]
struct GridRow {
    beta1: usize,
    beta2: usize,
    estimated_bits: f64,
}

#[derive(Debug, Serialize)]
struct PointRow {
    entry: String,
    beta1: usize,
    beta2: usize,
    estimated_bits: f64,
    measured_bits: f64,
    relative_error: f64,
    outlier_rate: f64,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = checked_config(&args.solver)?;
    if args.beta1_list.is_empty() || args.beta2_list.is_empty() {
        return Err(usage("beta lists must not be empty"));
    }
    let cells: Vec<SolverConfig> = args
        .beta1_list
        .iter()
        .flat_map(|&beta1| {
            let base = &base;
            args.beta2_list.iter().map(move |&beta2| SolverConfig {
                beta1,
                beta2,
                ..base.clone()
            })
        })
        .collect();
    for c in &cells {
        c.validate()?;
    }
    let grid: Vec<GridRow> = cells
        .iter()
        .map(|c| GridRow {
            beta1: c.beta1,
            beta2: c.beta2,
            estimated_bits: round3(config_bits(c, 0.0)),
        })
        .collect();

    let points = match &args.manifest {
        None => Vec::new(),
        Some(path) => {
            let manifest = open_manifest(path)?;
            let mut points = Vec::new();
            for entry in &manifest.entries {
                let (weight, acc) = load_layer(entry)?;
                let runs = cells
                    .par_iter()
                    .map(|c| {
                        quantize_layer(&weight, &acc, c)
                            .with_context(|| format!("entry `{}` at beta1={} beta2={}", entry.name, c.beta1, c.beta2))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (c, out) in cells.iter().zip(runs) {
                    points.push(PointRow {
                        entry: entry.name.clone(),
                        beta1: c.beta1,
                        beta2: c.beta2,
                        estimated_bits: out.report.estimated_bits,
                        measured_bits: out.report.measured_bits,
                        relative_error: out.report.relative_error,
                        outlier_rate: out.report.outlier_rate,
                    });
                }
            }
            points
        }
    };

    match &args.out {
        Some(dir) => {
            ensure_dir(dir)?;
            write_reports(dir, "sweep", &grid)?;
            if args.manifest.is_some() {
                write_reports(dir, "sweep_points", &points)?;
            }
        }
        None => {
            let mut w = csv::Writer::from_writer(io::stdout());
            for row in &grid {
                w.serialize(row)?;
            }
            w.flush()?;
            if !points.is_empty() {
                let mut w = csv::Writer::from_writer(io::stdout());
                for row in &points {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PositionalRow {
    entry: String,
    head: usize,
    tail: usize,
    head_mean: f64,
    tail_mean: f64,
    ratio: f64,
}

pub fn sensitivity(args: &SensitivityArgs) -> Result<()> {
    let config = checked_config(&args.solver)?;
    if args.pool == 0 {
        return Err(usage("--pool must be at least 1"));
    }
    let manifest = open_manifest(&args.manifest)?;
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| args.entry.as_ref().is_none_or(|name| &e.name == name))
        .collect();
    if let (Some(name), true) = (&args.entry, entries.is_empty()) {
        return Err(usage(format!("no manifest entry named `{name}`")));
    }
    ensure_dir(&args.out)?;
    let rows = entries
        .par_iter()
        .map(|entry| -> Result<Option<PositionalRow>> {
            let (weight, acc) = load_layer(entry)?;
            let (m, n) = weight.shape();
            let map = match args.source {
                SensitivitySource::Solver => {
                    let out = quantize_layer(&weight, &acc, &config)
                        .with_context(|| format!("quantizing entry `{}`", entry.name))?;
                    SensitivityMap::new(m, n, out.sensitivity)?
                }
                SensitivitySource::Rtn => sensitivity_rtn(&weight, &acc, &config)?,
            };
            let stem = file_stem(&entry.name);
            save_sensitivity_csv(&map, args.out.join(format!("{stem}.sensitivity.csv")))?;
            maxpool_heatmap(&map, args.pool).write_pgm(args.out.join(format!("{stem}.heatmap.pgm")))?;
            if n < args.head + args.tail || args.head == 0 || args.tail == 0 {
                eprintln!(
                    "note: entry `{}` has {n} columns, skipping positional statistics for head {} / tail {}",
                    entry.name, args.head, args.tail
                );
                return Ok(None);
            }
            let p = positional_error_stats(&map, args.head, args.tail)?;
            Ok(Some(PositionalRow {
                entry: entry.name.clone(),
                head: p.head,
                tail: p.tail,
                head_mean: p.head_mean,
                tail_mean: p.tail_mean,
                ratio: p.ratio,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<PositionalRow> = rows.into_iter().flatten().collect();
    write_reports(&args.out, "positional", &rows)?;
    for r in &rows {
        println!("{}: tail/head mean sensitivity {:.3}", r.entry, r.ratio);
    }
    Ok(())
}

fn vector_from(t: &DenseTensor, path: &Path) -> Result<Vec<f32>> {
    if t.rows() != 1 && t.cols() != 1 {
        return Err(usage(format!(
            "{} is {}x{}, expected a 1 x n or n x 1 vector",
            path.display(),
            t.rows(),
            t.cols()
        )));
    }
    Ok(t.data().to_vec())
}

pub fn matvec_cmd(args: &MatvecArgs, seed: u64) -> Result<()> {
    let t = read_spqr(&args.spqr)?;
    let (m, n) = (t.rows, t.cols);
    let x = match &args.input {
        Some(p) => vector_from(&load_tensor(p)?, p)?,
        None => gaussian_matrix(&mut rng(seed), 1, n, 1.0).into_data(),
    };
    if x.len() != n {
        return Err(usage(format!("input has {} entries, matrix has {n} columns", x.len())));
    }
    let y = matvec(&t, &x)?;
    if let Some(out) = &args.out {
        save_tensor(&DenseTensor::new(1, m, y.clone())?, out)?;
    }
    if args.check {
        let dense = dense_matvec(&dequantize_full(&t), &x)?;
        println!("relative_l2 {:e}", relative_l2(&y, &dense));
    }
    if let Some(repeats) = args.bench {
        let report = bench_matvec(&t, repeats, &x)?;
        println!("{}", serde_json::to_string(&report)?);
    }
    if args.out.is_none() && !args.check && args.bench.is_none() {
        let mut stdout = io::BufWriter::new(io::stdout().lock());
        for v in &y {
            writeln!(stdout, "{v}")?;
        }
        stdout.flush()?;
    }
    Ok(())
}

pub fn estimate_bits(args: &EstimateBitsArgs) -> Result<()> {
    let stat_ok = |b: u8| (MIN_BITS..=MAX_BITS).contains(&b) || b == RAW_STATS_BITS;
    if !(MIN_BITS..=MAX_BITS).contains(&args.wbits) || !stat_ok(args.sbits) || !stat_ok(args.zbits) {
        return Err(usage(format!(
            "weight bits must be in {MIN_BITS}..={MAX_BITS}, statistic bits in {MIN_BITS}..={MAX_BITS} or {RAW_STATS_BITS}"
        )));
    }
    if args.beta1 == 0 || args.beta2 == 0 {
        return Err(usage("group sizes must be at least 1"));
    }
    if !(0.0..=1.0).contains(&args.outlier_rate) {
        return Err(usage("outlier rate must lie in [0, 1]"));
    }
    let est = estimate_avg_bits(args.wbits, args.sbits, args.zbits, args.beta1, args.beta2, args.outlier_rate);
    if args.json {
        println!("{}", serde_json::to_string(&est)?);
    } else {
        println!("{:.*}", args.precision, est.avg_bits);
    }
    Ok(())
}

pub fn dequantize(args: &DequantizeArgs) -> Result<()> {
    let t = read_spqr(&args.spqr)?;
    save_tensor(&dequantize_full(&t), &args.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PlantedRow {
    entry: String,
    row: usize,
    col: usize,
}

pub fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    if args.rows == 0 || args.cols == 0 || args.samples == 0 {
        return Err(usage("rows, cols and samples must be positive"));
    }
    if !(0.0..=1.0).contains(&args.outlier_rate) {
        return Err(usage("outlier rate must lie in [0, 1]"));
    }
    ensure_dir(&args.out)?;
    let spec = FixtureSpec {
        rows: args.rows,
        cols: args.cols,
        outlier_rate: args.outlier_rate,
        outlier_sigma: args.outlier_sigma,
        samples: args.samples,
        ..FixtureSpec::default()
    };
    let mut manifest = String::from("# name\tweight\tcalibration\n");
    let mut planted = Vec::new();
    for i in 0..args.layers {
        let name = format!("layer{i}");
        let fx = outlier_fixture(seed + i as u64, &spec);
        let weight: PathBuf = format!("{name}.weight.dtns").into();
        let calib: PathBuf = format!("{name}.calib.dtns").into();
        save_tensor(&fx.weight, args.out.join(&weight))?;
        save_tensor(&fx.inputs, args.out.join(&calib))?;
        manifest.push_str(&format!("{name}\t{}\t{}\n", weight.display(), calib.display()));
        planted.extend(fx.planted.iter().map(|&(row, col)| PlantedRow {
            entry: name.clone(),
            row,
            col,
        }));
    }
    let manifest_path = args.out.join("manifest.tsv");
    fs::write(&manifest_path, manifest).with_context(|| format!("writing {}", manifest_path.display()))?;
    let planted_path = args.out.join("planted.csv");
    let mut w = csv::Writer::from_path(&planted_path)?;
    for row in &planted {
        w.serialize(row)?;
    }
    w.flush()?;
    println!("{}", manifest_path.display());
    Ok(())
}
