//! The four workbench commands: generate datasets, train a model,
//! evaluate checkpoints, and distill evaluation tables into report
//! curves. Everything a command writes is a function of (config, seed)
//! alone; wall-clock timings are quarantined in their own file.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView3};
use num_complex::Complex64;
use rayon::prelude::*;

use csi4cast_core::baselines::NaivePredictor;
use csi4cast_core::channel::make_dataset;
use csi4cast_core::checkpoint::{load_model, save_model, AnyModel};
use csi4cast_core::dataset_io::{load_dataset, save_dataset};
use csi4cast_core::evaluation::{
    cnn_flops, count_params, csi4cast_flops, eff_score, evaluate_samples, measure_inference_time,
    mean_subcarrier_power, naive_flops, naive_params, noise_var_for_snr, rank_summaries, rnn_flops,
    scenario_rank, EvalStats, RankMetric,
};
use csi4cast_core::model::{Csi4CastModel, ModelDims};
use csi4cast_core::training::{train, EpochRecord};
use csi4cast_core::{acf, CsiDataset, Error, Result};

use crate::config::RunConfig;
use crate::grid::{scenario_grid, snr_mode};
use crate::manifest::{
    entry_path, verify_manifest, write_manifest, ManifestEntry, MANIFEST_FILE,
};
use crate::tables::{column, fmt_f64, parse_f64, read_csv, CsvWriter};

/// Derive one scenario's generator seed from the run seed and the
/// scenario's position in the grid.
fn mix_seed(seed: u64, index: usize) -> u64 {
    let mut x = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn write_stamp(dir: &Path, cfg: &RunConfig, seed: u64, extra: &[(&str, String)]) -> Result<()> {
    let mut w = CsvWriter::new(&["key", "value"]);
    w.row(["config_sha256".to_string(), cfg.hash()]);
    w.row(["seed".to_string(), seed.to_string()]);
    for (k, v) in extra {
        w.row([k.to_string(), v.clone()]);
    }
    w.write(&dir.join("stamp.csv"))
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub files: usize,
    pub samples_per_scenario: usize,
}

/// Expand the scenario grid and write one dataset file per cell, then
/// the manifest. File contents depend only on (config, seed, cell
/// index), so any worker count yields identical bytes.
pub fn cmd_generate(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<GenerateSummary> {
    let system = cfg.system()?;
    let grid = scenario_grid(cfg)?;
    let samples = cfg.usize_of("data.samples")?;
    if samples == 0 {
        return Err(Error::InvalidConfig("data.samples must be at least 1".into()));
    }
    let mode = snr_mode(cfg)?;
    let dtype = cfg.dtype()?;
    fs::create_dir_all(out_dir)?;

    let entries: Vec<ManifestEntry> = grid
        .par_iter()
        .enumerate()
        .map(|(i, scenario)| {
            let file = format!("scenario_{i:04}.bin");
            let base_seed = mix_seed(seed, i);
            let ds = make_dataset(&system, scenario, samples, base_seed, mode)?;
            save_dataset(&ds, &out_dir.join(&file), dtype)?;
            Ok(ManifestEntry {
                file,
                scenario: scenario.clone(),
                samples: samples as u64,
                seed: base_seed,
                snr_mode: mode,
            })
        })
        .collect::<Result<_>>()?;

    write_manifest(out_dir, &entries)?;
    fs::write(out_dir.join("config.txt"), cfg.serialize())?;
    Ok(GenerateSummary { files: entries.len(), samples_per_scenario: samples })
}

fn load_track(dir: &Path) -> Result<Vec<(ManifestEntry, CsiDataset)>> {
    let entries = verify_manifest(dir)?;
    if entries.is_empty() {
        return Err(Error::MissingData(format!(
            "{} lists no datasets",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    entries
        .into_par_iter()
        .map(|e| {
            let ds = load_dataset(&entry_path(dir, &e))?;
            Ok((e, ds))
        })
        .collect()
}

fn check_track_config(cfg: &RunConfig, datasets: &[(ManifestEntry, CsiDataset)]) -> Result<()> {
    let system = cfg.system()?;
    for (e, ds) in datasets {
        if ds.config != system {
            return Err(Error::InvalidConfig(format!(
                "dataset {} was generated under a different system block than this config",
                e.file
            )));
        }
    }
    Ok(())
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<AnyModel> {
    let dims = ModelDims::from_config(&cfg.system()?);
    match cfg.get("model.kind") {
        "csi4cast" => Ok(AnyModel::Csi4Cast(Csi4CastModel::new(dims, cfg.csi4cast()?, seed)?)),
        "rnn" => Ok(AnyModel::Rnn(csi4cast_core::baselines::RnnPredictor::new(
            dims,
            cfg.rnn()?,
            seed,
        )?)),
        "cnn" => Ok(AnyModel::Cnn(csi4cast_core::baselines::CnnPredictor::new(
            dims,
            cfg.cnn()?,
            seed,
        )?)),
        "np" => Err(Error::InvalidConfig(
            "model.kind np is the no-prediction baseline; it has nothing to train and is \
             always included in evaluation"
                .into(),
        )),
        other => Err(Error::InvalidConfig(format!("model.kind: unknown model '{other}'"))),
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs_run: usize,
    pub best_val_nmse: f64,
}

/// Concatenate every dataset the manifest lists, train the configured
/// model with a deterministic 9:1 train/validation split, and write the
/// checkpoint plus an epoch history CSV.
pub fn cmd_train(cfg: &RunConfig, seed: u64, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let datasets = load_track(data_dir)?;
    check_track_config(cfg, &datasets)?;
    let mut model = build_model(cfg, seed)?;

    let merged = CsiDataset {
        config: datasets[0].1.config.clone(),
        scenario: datasets[0].1.scenario.clone(),
        snr_mode: datasets[0].1.snr_mode,
        samples: datasets.into_iter().flat_map(|(_, ds)| ds.samples).collect(),
    };

    let train_cfg = cfg.train(seed)?;
    let report = train(model.as_trainable_mut(), &merged, &train_cfg)?;

    fs::create_dir_all(out_dir)?;
    let mut history = CsvWriter::new(&["epoch", "train_loss", "val_nmse", "lr"]);
    for EpochRecord { epoch, train_loss, val_nmse, lr } in &report.history {
        history.row([
            epoch.to_string(),
            fmt_f64(*train_loss),
            fmt_f64(*val_nmse),
            fmt_f64(*lr),
        ]);
    }
    history.write(&out_dir.join("history.csv"))?;

    let checkpoint = out_dir.join(format!("{}.ckpt", model.kind_name()));
    save_model(&model, &checkpoint)?;
    write_stamp(out_dir, cfg, seed, &[("best_epoch", report.best_epoch.to_string())])?;

    Ok(TrainOutcome {
        checkpoint,
        epochs_run: report.history.len(),
        best_val_nmse: report.best_val,
    })
}

/// The persistence baseline's reserved label.
const NP_LABEL: &str = "np";

fn scenario_fields(s: &csi4cast_core::ScenarioDescriptor) -> [String; 6] {
    [
        fmt_f64(s.velocity_mps),
        fmt_f64(s.delay_spread_s),
        s.profile.to_string(),
        s.noise.to_string(),
        fmt_f64(s.noise_degree),
        s.duplex.to_string(),
    ]
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub scenarios: usize,
    pub models: Vec<String>,
}

/// Score every checkpoint in `models_dir` plus the implicit persistence
/// baseline over every dataset the manifest lists. Writes records,
/// rank summaries, efficiency and autocorrelation tables, and a
/// reproducibility stamp; inference timings go to their own file so the
/// metric CSVs are byte-stable.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    seed: u64,
    data_dir: &Path,
    models_dir: &Path,
    out_dir: &Path,
) -> Result<EvaluateOutcome> {
    let datasets = load_track(data_dir)?;
    check_track_config(cfg, &datasets)?;
    let system = cfg.system()?;
    let dims = ModelDims::from_config(&system);

    let mut ckpt_paths: Vec<PathBuf> = fs::read_dir(models_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    ckpt_paths.sort();

    let mut labels = vec![NP_LABEL.to_string()];
    let mut models = Vec::new();
    for path in &ckpt_paths {
        let label = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidConfig(format!("unusable checkpoint name {}", path.display())))?
            .to_string();
        if labels.contains(&label) {
            return Err(Error::DuplicateModel(label));
        }
        let model = load_model(path)?;
        if model.as_trainable().dims() != dims {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {label} was built for different dimensions than this config"
            )));
        }
        labels.push(label);
        models.push(model);
    }

    let snr_db = cfg.f64_of("eval.snr_db")?;
    let timing_reps = cfg.usize_of("eval.timing_reps")?;
    let hist_len = system.hist_len;
    let max_lag = cfg.usize_of("report.acf_max_lag")?.min(hist_len.saturating_sub(1));
    let naive = NaivePredictor::new(system.pred_len);

    let mut records = CsvWriter::new(&[
        "model",
        "velocity_mps",
        "delay_spread_s",
        "profile",
        "noise",
        "degree",
        "duplex",
        "n_samples",
        "mean_nmse",
        "mean_se",
    ]);
    let mut acf_table = CsvWriter::new(&[
        "velocity_mps",
        "delay_spread_s",
        "profile",
        "noise",
        "degree",
        "lag",
        "acf",
    ]);
    let mut rank_rows: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    let mut rank_rows_se: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];

    for (entry, ds) in &datasets {
        let noise_var = noise_var_for_snr(
            mean_subcarrier_power(ds.samples.iter().map(|s| s.target.data.view()))?,
            snr_db,
        )?;
        let mut nmse_by_model = Vec::with_capacity(labels.len());
        let mut se_by_model = Vec::with_capacity(labels.len());
        for (slot, label) in labels.iter().enumerate() {
            let stats: EvalStats = if slot == 0 {
                evaluate_samples(|h| naive.predict(h), &ds.samples, noise_var)?
            } else {
                let model = &mut models[slot - 1];
                evaluate_samples(
                    |h: ArrayView3<'_, Complex64>| Ok(model.predict(h)),
                    &ds.samples,
                    noise_var,
                )?
            };
            let s = scenario_fields(&entry.scenario);
            records.row([
                label.clone(),
                s[0].clone(),
                s[1].clone(),
                s[2].clone(),
                s[3].clone(),
                s[4].clone(),
                s[5].clone(),
                stats.n_samples.to_string(),
                fmt_f64(stats.mean_nmse),
                fmt_f64(stats.mean_se),
            ]);
            nmse_by_model.push(stats.mean_nmse);
            se_by_model.push(stats.mean_se);
        }

        let nmse_entries: Vec<(&str, f64)> =
            labels.iter().map(String::as_str).zip(nmse_by_model).collect();
        for (slot, r) in scenario_rank(&nmse_entries, RankMetric::NmseAscending)?.into_iter().enumerate()
        {
            rank_rows[slot].push(r);
        }
        let se_entries: Vec<(&str, f64)> =
            labels.iter().map(String::as_str).zip(se_by_model).collect();
        for (slot, r) in scenario_rank(&se_entries, RankMetric::SeDescending)?.into_iter().enumerate() {
            rank_rows_se[slot].push(r);
        }

        let n = ds.samples.len();
        let mut stack = Array4::<Complex64>::zeros((n, system.n_tx, hist_len, system.n_sc));
        for (i, sample) in ds.samples.iter().enumerate() {
            stack.index_axis_mut(ndarray::Axis(0), i).assign(&sample.history.data);
        }
        let curve = acf::temporal_acf(stack.view(), max_lag)?;
        let s = scenario_fields(&entry.scenario);
        for (lag, value) in curve.iter().enumerate() {
            acf_table.row([
                s[0].clone(),
                s[1].clone(),
                s[2].clone(),
                s[3].clone(),
                s[4].clone(),
                lag.to_string(),
                fmt_f64(*value),
            ]);
        }
    }

    fs::create_dir_all(out_dir)?;
    records.write(&out_dir.join("records.csv"))?;
    acf_table.write(&out_dir.join("acf.csv"))?;

    let mut ranks = CsvWriter::new(&["metric", "model", "scenarios", "mean_rank", "rank_score", "p_rank1"]);
    for (metric, rows) in [("nmse", &rank_rows), ("se", &rank_rows_se)] {
        let table: Vec<(&str, Vec<usize>)> =
            labels.iter().map(String::as_str).zip(rows.iter().cloned()).collect();
        for summary in rank_summaries(&table)? {
            ranks.row([
                metric.to_string(),
                summary.model.clone(),
                datasets.len().to_string(),
                fmt_f64(summary.mean_rank),
                fmt_f64(summary.rank_score),
                fmt_f64(summary.p_rank1),
            ]);
        }
    }
    ranks.write(&out_dir.join("ranks.csv"))?;

    let mut costs = vec![naive_flops() as f64];
    let mut eff_rows = Vec::new();
    let (np_train, np_total) = naive_params();
    eff_rows.push((NP_LABEL.to_string(), np_train, np_total, naive_flops()));
    for (label, model) in labels[1..].iter().zip(&models) {
        let (trainables, total) = count_params(model.as_trainable());
        let flops = match model {
            AnyModel::Csi4Cast(m) => csi4cast_flops(&m.config, dims, system.n_tx),
            AnyModel::Rnn(m) => rnn_flops(&m.config, dims, system.n_tx),
            AnyModel::Cnn(m) => cnn_flops(&m.config, dims, system.n_tx),
        };
        costs.push(flops as f64);
        eff_rows.push((label.clone(), trainables, total, flops));
    }
    let scores = match eff_score(&costs) {
        Ok(s) => s.into_iter().map(fmt_f64).collect(),
        Err(Error::AllZeroCosts) => vec![String::new(); costs.len()],
        Err(e) => return Err(e),
    };
    let mut efficiency =
        CsvWriter::new(&["model", "trainable_params", "total_params", "flops", "eff_score"]);
    for ((label, trainables, total, flops), score) in eff_rows.iter().zip(&scores) {
        efficiency.row([
            label.clone(),
            trainables.to_string(),
            total.to_string(),
            flops.to_string(),
            score.clone(),
        ]);
    }
    efficiency.write(&out_dir.join("efficiency.csv"))?;

    let probe = datasets
        .iter()
        .flat_map(|(_, ds)| ds.samples.first())
        .next()
        .ok_or_else(|| Error::MissingData("no samples in the evaluation track".into()))?;
    let mut timing = CsvWriter::new(&["model", "inference_ms"]);
    timing.row([NP_LABEL.to_string(), fmt_f64(0.0)]);
    for (label, model) in labels[1..].iter().zip(models.iter_mut()) {
        let ms =
            measure_inference_time(model.as_trainable_mut(), probe.history.data.view(), timing_reps)?;
        timing.row([label.clone(), fmt_f64(ms)]);
    }
    timing.write(&out_dir.join("timing.csv"))?;

    write_stamp(
        out_dir,
        cfg,
        seed,
        &[
            ("scenarios", datasets.len().to_string()),
            ("models", labels.join(" ")),
        ],
    )?;

    Ok(EvaluateOutcome { scenarios: datasets.len(), models: labels })
}

struct RecordRow {
    model: String,
    velocity: f64,
    noise: String,
    degree: f64,
    mean_nmse: f64,
    mean_se: f64,
    scenario_key: String,
}

fn read_records(eval_dir: &Path) -> Result<Vec<RecordRow>> {
    let (header, rows) = read_csv(&eval_dir.join("records.csv"))?;
    if rows.is_empty() {
        return Err(Error::MissingData(format!(
            "{} has no evaluation records",
            eval_dir.join("records.csv").display()
        )));
    }
    let c_model = column(&header, "model")?;
    let c_v = column(&header, "velocity_mps")?;
    let c_s = column(&header, "delay_spread_s")?;
    let c_p = column(&header, "profile")?;
    let c_n = column(&header, "noise")?;
    let c_d = column(&header, "degree")?;
    let c_dup = column(&header, "duplex")?;
    let c_nmse = column(&header, "mean_nmse")?;
    let c_se = column(&header, "mean_se")?;
    rows.iter()
        .map(|row| {
            Ok(RecordRow {
                model: row[c_model].clone(),
                velocity: parse_f64(&row[c_v], "velocity_mps")?,
                noise: row[c_n].clone(),
                degree: parse_f64(&row[c_d], "degree")?,
                mean_nmse: parse_f64(&row[c_nmse], "mean_nmse")?,
                mean_se: parse_f64(&row[c_se], "mean_se")?,
                scenario_key: format!(
                    "{}|{}|{}|{}|{}|{}",
                    row[c_v], row[c_s], row[c_p], row[c_n], row[c_d], row[c_dup]
                ),
            })
        })
        .collect()
}

fn first_appearance_order(rows: &[RecordRow]) -> Vec<String> {
    let mut order = Vec::new();
    for row in rows {
        if !order.contains(&row.model) {
            order.push(row.model.clone());
        }
    }
    order
}

#[derive(Debug)]
pub struct ReportOutcome {
    pub files: Vec<String>,
}

/// Distill an evaluation directory into curve and distribution tables:
/// error against SNR, error against velocity with an
/// interpolation/extrapolation tag, recomputed rank summaries and rank
/// histograms, and averaged autocorrelation stems.
pub fn cmd_report(cfg: &RunConfig, eval_dir: &Path, out_dir: &Path) -> Result<ReportOutcome> {
    let rows = read_records(eval_dir)?;
    let model_order = first_appearance_order(&rows);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let snr_noises = ["awgn", "phase", "burst"];
    let mut snr_curve = CsvWriter::new(&["model", "noise", "snr_db", "mean_nmse", "n_scenarios"]);
    for model in &model_order {
        for noise in snr_noises {
            let mut degrees: Vec<f64> = rows
                .iter()
                .filter(|r| &r.model == model && r.noise == noise)
                .map(|r| r.degree)
                .collect();
            degrees.sort_by(f64::total_cmp);
            degrees.dedup();
            for degree in degrees {
                let group: Vec<&RecordRow> = rows
                    .iter()
                    .filter(|r| &r.model == model && r.noise == noise && r.degree == degree)
                    .collect();
                let mean = group.iter().map(|r| r.mean_nmse).sum::<f64>() / group.len() as f64;
                snr_curve.row([
                    model.clone(),
                    noise.to_string(),
                    fmt_f64(degree),
                    fmt_f64(mean),
                    group.len().to_string(),
                ]);
            }
        }
    }
    snr_curve.write(&out_dir.join("nmse_vs_snr.csv"))?;
    written.push("nmse_vs_snr.csv".to_string());

    let interp_max = cfg.f64_of("report.interp_max_velocity_mps")?;
    let mut velocity_curve =
        CsvWriter::new(&["model", "velocity_mps", "region", "mean_nmse", "n_scenarios"]);
    for model in &model_order {
        let mut velocities: Vec<f64> = rows
            .iter()
            .filter(|r| &r.model == model)
            .map(|r| r.velocity)
            .collect();
        velocities.sort_by(f64::total_cmp);
        velocities.dedup();
        for v in velocities {
            let group: Vec<&RecordRow> =
                rows.iter().filter(|r| &r.model == model && r.velocity == v).collect();
            let mean = group.iter().map(|r| r.mean_nmse).sum::<f64>() / group.len() as f64;
            let region = if v <= interp_max { "interpolation" } else { "extrapolation" };
            velocity_curve.row([
                model.clone(),
                fmt_f64(v),
                region.to_string(),
                fmt_f64(mean),
                group.len().to_string(),
            ]);
        }
    }
    velocity_curve.write(&out_dir.join("nmse_vs_velocity.csv"))?;
    written.push("nmse_vs_velocity.csv".to_string());

    let mut scenario_keys = Vec::new();
    for row in &rows {
        if !scenario_keys.contains(&row.scenario_key) {
            scenario_keys.push(row.scenario_key.clone());
        }
    }
    let mut nmse_ranks: Vec<Vec<usize>> = vec![Vec::new(); model_order.len()];
    let mut se_ranks: Vec<Vec<usize>> = vec![Vec::new(); model_order.len()];
    for key in &scenario_keys {
        let group: Vec<&RecordRow> = rows.iter().filter(|r| &r.scenario_key == key).collect();
        if group.len() != model_order.len() {
            return Err(Error::InvalidEncoding(format!(
                "scenario {key} has {} records for {} models",
                group.len(),
                model_order.len()
            )));
        }
        let by_model = |model: &String| {
            group
                .iter()
                .find(|r| &r.model == model)
                .ok_or_else(|| Error::InvalidEncoding(format!("scenario {key} lacks model {model}")))
        };
        let mut nmse_entries = Vec::new();
        let mut se_entries = Vec::new();
        for model in &model_order {
            let r = by_model(model)?;
            nmse_entries.push((model.as_str(), r.mean_nmse));
            se_entries.push((model.as_str(), r.mean_se));
        }
        for (slot, r) in scenario_rank(&nmse_entries, RankMetric::NmseAscending)?.into_iter().enumerate()
        {
            nmse_ranks[slot].push(r);
        }
        for (slot, r) in scenario_rank(&se_entries, RankMetric::SeDescending)?.into_iter().enumerate() {
            se_ranks[slot].push(r);
        }
    }

    let mut summary_csv =
        CsvWriter::new(&["metric", "model", "scenarios", "mean_rank", "rank_score", "p_rank1"]);
    let mut histogram = CsvWriter::new(&["metric", "model", "rank", "count"]);
    for (metric, ranks) in [("nmse", &nmse_ranks), ("se", &se_ranks)] {
        let table: Vec<(&str, Vec<usize>)> =
            model_order.iter().map(String::as_str).zip(ranks.iter().cloned()).collect();
        for summary in rank_summaries(&table)? {
            summary_csv.row([
                metric.to_string(),
                summary.model.clone(),
                scenario_keys.len().to_string(),
                fmt_f64(summary.mean_rank),
                fmt_f64(summary.rank_score),
                fmt_f64(summary.p_rank1),
            ]);
        }
        for (model, model_ranks) in model_order.iter().zip(ranks) {
            for rank in 1..=model_order.len() {
                let count = model_ranks.iter().filter(|&&r| r == rank).count();
                histogram.row([
                    metric.to_string(),
                    model.clone(),
                    rank.to_string(),
                    count.to_string(),
                ]);
            }
        }
    }
    summary_csv.write(&out_dir.join("rank_summary.csv"))?;
    written.push("rank_summary.csv".to_string());
    histogram.write(&out_dir.join("rank_histogram.csv"))?;
    written.push("rank_histogram.csv".to_string());

    let acf_path = eval_dir.join("acf.csv");
    if acf_path.is_file() {
        let (header, acf_rows) = read_csv(&acf_path)?;
        let c_v = column(&header, "velocity_mps")?;
        let c_lag = column(&header, "lag")?;
        let c_acf = column(&header, "acf")?;
        let mut keys: Vec<(f64, u64)> = Vec::new();
        for row in &acf_rows {
            let key = (
                parse_f64(&row[c_v], "velocity_mps")?,
                crate::tables::parse_u64(&row[c_lag], "lag")?,
            );
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut stems = CsvWriter::new(&["velocity_mps", "lag", "acf"]);
        for (v, lag) in keys {
            let mut sum = 0.0;
            let mut n = 0usize;
            for row in &acf_rows {
                if parse_f64(&row[c_v], "velocity_mps")? == v
                    && crate::tables::parse_u64(&row[c_lag], "lag")? == lag
                {
                    sum += parse_f64(&row[c_acf], "acf")?;
                    n += 1;
                }
            }
            stems.row([fmt_f64(v), lag.to_string(), fmt_f64(sum / n as f64)]);
        }
        stems.write(&out_dir.join("acf_stem.csv"))?;
        written.push("acf_stem.csv".to_string());
    }

    let mut best = &rows[0];
    let mut sums: Vec<(String, f64, usize)> = Vec::new();
    for model in &model_order {
        let group: Vec<&RecordRow> = rows.iter().filter(|r| &r.model == model).collect();
        let mean = group.iter().map(|r| r.mean_nmse).sum::<f64>() / group.len() as f64;
        sums.push((model.clone(), mean, group.len()));
    }
    for row in &rows {
        if row.mean_nmse < best.mean_nmse {
            best = row;
        }
    }
    let mut text = String::new();
    text.push_str(&format!("scenarios: {}\n", scenario_keys.len()));
    text.push_str(&format!("models: {}\n", model_order.join(", ")));
    for (model, mean, n) in &sums {
        text.push_str(&format!("mean nmse {model}: {} over {n} records\n", fmt_f64(*mean)));
    }
    text.push_str(&format!(
        "best single record: {} at nmse {}\n",
        best.model,
        fmt_f64(best.mean_nmse)
    ));
    fs::write(out_dir.join("summary.txt"), text)?;
    written.push("summary.txt".to_string());

    Ok(ReportOutcome { files: written })
}
