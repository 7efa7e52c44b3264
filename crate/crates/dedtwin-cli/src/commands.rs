//! One function per subcommand. Each reads what an earlier stage wrote,
//! does its work through the library crate, and closes its stage directory
//! with a manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use dedtwin::botspo::{heat_treatment_time, log_to_csv, run_botspo, simulation_objective, BoConfig};
use dedtwin::profile::{render_profile, LaserPowerProfile, ProfileParams};
use dedtwin::sampling::build_profile_library;
use dedtwin::surrogate::{
    make_windows, split_profiles, train, FeatureWindow, NormStats, SurrogateModel,
};
use dedtwin::thermal::{run_build, ThermalHistory};

use crate::artifacts::{
    load_json, profile_file, read_artifact, to_json_pretty, CliError, CliResult, DatasetIndex,
    HistoryMeta, LibraryIndex, Manifest, StageWriter,
};
use crate::config::{stage, stage_seed, ExperimentConfig};

pub const STAGE_DIRS: [&str; 7] = [
    "profiles",
    "sim",
    "dataset",
    "model",
    "predictions/series",
    "predictions/rollout",
    "bo",
];

fn out_root(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.out_dir)
}

pub fn gen_profiles(cfg: &ExperimentConfig, config_sha256: &str) -> CliResult<()> {
    let p = &cfg.profiles;
    let entries = build_profile_library(
        &p.stats,
        p.count,
        p.duration_s,
        p.sample_period_s,
        p.clamp_w,
        stage_seed(cfg.seed, stage::PROFILES),
    )?;
    let mut w = StageWriter::new(&out_root(cfg).join("profiles"))?;
    let samples = entries.first().map_or(0, |e| e.profile.len());
    for entry in &entries {
        w.write(&profile_file(entry.profile_id), &entry.profile.to_csv())?;
    }
    let index = LibraryIndex {
        duration_s: p.duration_s,
        sample_period_s: p.sample_period_s,
        clamp_w: p.clamp_w,
        entries,
    };
    w.write_json("library.json", &index)?;
    let dir = w.dir().display().to_string();
    w.finish("gen-profiles", config_sha256, cfg.seed)?;
    println!(
        "wrote {} profiles ({samples} samples each) to {dir}",
        index.entries.len()
    );
    Ok(())
}

fn load_library(cfg: &ExperimentConfig) -> CliResult<(LibraryIndex, Vec<LaserPowerProfile>)> {
    let dir = out_root(cfg).join("profiles");
    let index: LibraryIndex = load_json(&dir.join("library.json"))?;
    let mut profiles = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let csv = read_artifact(&dir.join(profile_file(entry.profile_id)))?;
        profiles.push(LaserPowerProfile::from_csv(&csv)?);
    }
    Ok((index, profiles))
}

fn history_file(profile_id: u32, node: [u32; 2]) -> String {
    format!("hist_p{profile_id:03}_n{}_{}.csv", node[0], node[1])
}

pub fn simulate(cfg: &ExperimentConfig, config_sha256: &str) -> CliResult<()> {
    let (index, profiles) = load_library(cfg)?;
    let runs: Vec<CliResult<(u32, Vec<ThermalHistory>)>> = index
        .entries
        .par_iter()
        .zip(profiles.par_iter())
        .map(|(entry, profile)| {
            let histories = run_build(&cfg.build, &cfg.material, &cfg.sim, profile)?;
            Ok((entry.profile_id, histories))
        })
        .collect();
    let mut w = StageWriter::new(&out_root(cfg).join("sim"))?;
    let mut metas = Vec::new();
    for run in runs {
        let (profile_id, histories) = run?;
        for h in &histories {
            let file = history_file(profile_id, h.node);
            w.write(&file, &h.to_csv())?;
            metas.push(HistoryMeta::of(h, profile_id, file));
        }
    }
    w.write_json("histories.json", &metas)?;
    let dir = w.dir().display().to_string();
    w.finish("simulate", config_sha256, cfg.seed)?;
    println!(
        "simulated {} builds, recorded {} node histories to {dir}",
        index.entries.len(),
        metas.len()
    );
    Ok(())
}

fn load_histories(cfg: &ExperimentConfig) -> CliResult<Vec<(HistoryMeta, ThermalHistory)>> {
    let dir = out_root(cfg).join("sim");
    let metas: Vec<HistoryMeta> = load_json(&dir.join("histories.json"))?;
    metas
        .into_iter()
        .map(|m| {
            let h = m.load(&dir)?;
            Ok((m, h))
        })
        .collect()
}

fn histories_for<'a>(
    loaded: &'a [(HistoryMeta, ThermalHistory)],
    profiles: &[u32],
) -> Vec<ThermalHistory> {
    loaded
        .iter()
        .filter(|(m, _)| profiles.contains(&m.profile_id))
        .map(|(_, h)| h.clone())
        .collect()
}

pub fn make_dataset(cfg: &ExperimentConfig, config_sha256: &str) -> CliResult<()> {
    let loaded = load_histories(cfg)?;
    let ids: Vec<u32> = loaded
        .iter()
        .map(|(m, _)| m.profile_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (train_idx, test_idx) = split_profiles(ids.len(), cfg.train_frac, stage_seed(cfg.seed, stage::DATASET))?;
    let mut train_profiles: Vec<u32> = train_idx.into_iter().map(|i| ids[i]).collect();
    let mut test_profiles: Vec<u32> = test_idx.into_iter().map(|i| ids[i]).collect();
    train_profiles.sort_unstable();
    test_profiles.sort_unstable();

    let sc = &cfg.surrogate;
    let train_histories = histories_for(&loaded, &train_profiles);
    let train_windows = make_windows(&train_histories, sc.window, sc.stride, sc.horizon)?;
    let test_histories = histories_for(&loaded, &test_profiles);
    let test_windows = if test_histories.is_empty() {
        Vec::new()
    } else {
        make_windows(&test_histories, sc.window, sc.stride, sc.horizon)?
    };
    let norm = NormStats::from_windows(&train_windows)?;

    let dataset = DatasetIndex {
        window: sc.window,
        stride: sc.stride,
        horizon: sc.horizon,
        train_profiles,
        test_profiles,
        norm,
        n_train_windows: train_windows.len(),
        n_test_windows: test_windows.len(),
    };
    let mut w = StageWriter::new(&out_root(cfg).join("dataset"))?;
    w.write_json("dataset.json", &dataset)?;
    let dir = w.dir().display().to_string();
    w.finish("make-dataset", config_sha256, cfg.seed)?;
    println!(
        "split {} profiles {}:{}, {} train / {} test windows, wrote {dir}",
        ids.len(),
        dataset.train_profiles.len(),
        dataset.test_profiles.len(),
        dataset.n_train_windows,
        dataset.n_test_windows
    );
    Ok(())
}

/// Rebuilds the train/test windows exactly as `make-dataset` derived them.
fn dataset_windows(
    cfg: &ExperimentConfig,
    dataset: &DatasetIndex,
) -> CliResult<(Vec<FeatureWindow>, Vec<FeatureWindow>)> {
    let loaded = load_histories(cfg)?;
    let train_histories = histories_for(&loaded, &dataset.train_profiles);
    let train = make_windows(&train_histories, dataset.window, dataset.stride, dataset.horizon)?;
    let test_histories = histories_for(&loaded, &dataset.test_profiles);
    let test = if test_histories.is_empty() {
        Vec::new()
    } else {
        make_windows(&test_histories, dataset.window, dataset.stride, dataset.horizon)?
    };
    Ok((train, test))
}

#[derive(Debug, Serialize)]
struct TrainReport {
    n_params: usize,
    n_train_windows: usize,
    n_test_windows: usize,
    epochs: usize,
    final_loss: f64,
    r2_train: f64,
    r2_test: Option<f64>,
}

pub fn train_cmd(cfg: &ExperimentConfig, config_sha256: &str) -> CliResult<()> {
    let dataset: DatasetIndex = load_json(&out_root(cfg).join("dataset/dataset.json"))?;
    let (train_windows, test_windows) = dataset_windows(cfg, &dataset)?;
    let (model, metrics) = train(
        &cfg.surrogate,
        &train_windows,
        dataset.norm.clone(),
        stage_seed(cfg.seed, stage::TRAIN),
    )?;

    let r2_train = model.evaluate_r2(&train_windows)?;
    let r2_test = if test_windows.is_empty() {
        None
    } else {
        Some(model.evaluate_r2(&test_windows)?)
    };

    let mut csv = String::from("epoch,loss,log_lik,kl\n");
    for m in &metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.loss, m.log_lik, m.kl));
    }
    let report = TrainReport {
        n_params: model.n_params(),
        n_train_windows: train_windows.len(),
        n_test_windows: test_windows.len(),
        epochs: metrics.len(),
        final_loss: metrics.last().map_or(f64::NAN, |m| m.loss),
        r2_train,
        r2_test,
    };

    let mut w = StageWriter::new(&out_root(cfg).join("model"))?;
    w.write("checkpoint.json", &model.save_json())?;
    w.write("metrics.csv", &csv)?;
    w.write_json("train_report.json", &report)?;
    let dir = w.dir().display().to_string();
    w.finish("train", config_sha256, cfg.seed)?;
    match r2_test {
        Some(r2) => println!(
            "trained {} params, train R^2 = {r2_train:.4}, test R^2 = {r2:.4}, wrote {dir}",
            report.n_params
        ),
        None => println!(
            "trained {} params, train R^2 = {r2_train:.4} (no test split), wrote {dir}",
            report.n_params
        ),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Series,
    Rollout,
}

impl PredictMode {
    fn tag(self) -> &'static str {
        match self {
            PredictMode::Series => "series",
            PredictMode::Rollout => "rollout",
        }
    }
}

pub fn predict(cfg: &ExperimentConfig, config_sha256: &str, mode: PredictMode) -> CliResult<()> {
    let root = out_root(cfg);
    let model = SurrogateModel::from_json(&read_artifact(&root.join("model/checkpoint.json"))?)?;
    let dataset: DatasetIndex = load_json(&root.join("dataset/dataset.json"))?;
    let loaded = load_histories(cfg)?;
    let targets: Vec<&(HistoryMeta, ThermalHistory)> = if dataset.test_profiles.is_empty() {
        println!("note: no test profiles, predicting the training set");
        loaded.iter().collect()
    } else {
        loaded
            .iter()
            .filter(|(m, _)| dataset.test_profiles.contains(&m.profile_id))
            .collect()
    };
    if targets.is_empty() {
        return Err(CliError::Upstream(
            "no histories match the dataset's test profiles".into(),
        ));
    }

    let w_len = model.config.window;
    let hz = model.config.horizon;
    let base = stage_seed(cfg.seed, stage::PREDICT);
    let mut w = StageWriter::new(&root.join("predictions").join(mode.tag()))?;
    for (k, (meta, history)) in targets.iter().enumerate() {
        let run = match mode {
            PredictMode::Series => {
                model.predict_series(history, cfg.mc_samples, stage_seed(base, k as u64))?
            }
            PredictMode::Rollout => {
                let len = history.len();
                if len <= w_len + hz {
                    return Err(CliError::Usage(format!(
                        "{}: {len} samples is too short to roll out past one window",
                        meta.file
                    )));
                }
                let steps = (len - w_len) / hz * hz;
                model.rollout(history, w_len, steps, cfg.mc_samples, stage_seed(base, k as u64))?
            }
        };
        let mut csv = String::from("time_s,mean_c,lower95_c,upper95_c,truth_c\n");
        for i in 0..run.band.len() {
            let t = run.start + i;
            csv.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                history.time_s[t],
                run.band.mean[i],
                run.band.lower95[i],
                run.band.upper95[i],
                history.temp_c[t]
            ));
        }
        let name = format!(
            "pred_{}_p{:03}_n{}_{}.csv",
            mode.tag(),
            meta.profile_id,
            meta.node[0],
            meta.node[1]
        );
        w.write(&name, &csv)?;
    }
    let n = targets.len();
    let dir = w.dir().display().to_string();
    w.finish("predict", config_sha256, cfg.seed)?;
    println!("predicted {n} histories ({}) to {dir}", mode.tag());
    Ok(())
}

#[derive(Debug, Serialize)]
struct BoReport {
    best_params: ProfileParams,
    best_objective_s: f64,
    init_best_s: f64,
    improvement_frac: f64,
    n_init: usize,
    n_iter: usize,
    n_evaluations: usize,
    n_failures: usize,
    seed: u64,
}

pub fn optimize(cfg: &ExperimentConfig, config_sha256: &str) -> CliResult<()> {
    let bo_cfg = BoConfig {
        seed: stage_seed(cfg.seed, stage::OPTIMIZE),
        ..cfg.bo.clone()
    };
    let mut objective = simulation_objective(
        cfg.build.clone(),
        cfg.material.clone(),
        cfg.sim.clone(),
        cfg.power_map,
        cfg.objective,
    );
    let state = run_botspo(&bo_cfg, &mut objective)?;
    let (best_params, best_objective_s) = state
        .best
        .clone()
        .ok_or_else(|| CliError::Numerical("every profile evaluation failed".into()))?;

    let init_best_s = state
        .evaluated
        .iter()
        .take(bo_cfg.n_init)
        .map(|e| e.objective_s)
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let n_failures = state
        .evaluated
        .iter()
        .filter(|e| !e.objective_s.is_finite())
        .count();
    let report = BoReport {
        best_params: best_params.clone(),
        best_objective_s,
        init_best_s,
        improvement_frac: if init_best_s > 0.0 {
            best_objective_s / init_best_s - 1.0
        } else {
            f64::NAN
        },
        n_init: bo_cfg.n_init,
        n_iter: bo_cfg.n_iter,
        n_evaluations: state.evaluated.len(),
        n_failures,
        seed: bo_cfg.seed,
    };

    let best_profile = render_profile(
        &best_params,
        cfg.build.build_duration_s(),
        cfg.objective.r_s,
        &cfg.power_map,
    )?;
    let mut w = StageWriter::new(&out_root(cfg).join("bo"))?;
    w.write("bo_log.csv", &log_to_csv(&state.log))?;
    w.write("best_profile.csv", &best_profile.to_csv())?;
    w.write_json("bo_report.json", &report)?;
    let dir = w.dir().display().to_string();
    w.finish("optimize", config_sha256, cfg.seed)?;
    println!(
        "best heat-treatment time {best_objective_s:.4} s after {} evaluations \
         (initial design best {init_best_s:.4} s), wrote {dir}",
        report.n_evaluations
    );
    Ok(())
}

/// Re-scores an already-rendered profile file; used by `report` to attach
/// the objective of the optimizer's winner when the bo stage exists.
fn rescore_best(cfg: &ExperimentConfig, bo_dir: &Path) -> CliResult<f64> {
    let csv = read_artifact(&bo_dir.join("best_profile.csv"))?;
    let profile = LaserPowerProfile::from_csv(&csv)?;
    let histories = run_build(&cfg.build, &cfg.material, &cfg.sim, &profile)?;
    Ok(heat_treatment_time(&histories, &cfg.objective)?)
}

#[derive(Debug, Serialize)]
struct StageSummary {
    stage: String,
    manifest: Manifest,
}

pub fn report(cfg: &ExperimentConfig, config_sha256: &str) -> CliResult<()> {
    let root = out_root(cfg);
    let mut stages = Vec::new();
    for name in STAGE_DIRS {
        let path = root.join(name).join("manifest.json");
        if path.exists() {
            let manifest: Manifest = load_json(&path)?;
            stages.push(StageSummary {
                stage: name.to_string(),
                manifest,
            });
        }
    }
    if stages.is_empty() {
        return Err(CliError::Upstream(format!(
            "no stage manifests under {}; nothing to report",
            root.display()
        )));
    }

    let mut csv = String::from("stage,file,bytes,sha256\n");
    for s in &stages {
        for f in &s.manifest.files {
            csv.push_str(&format!("{},{},{},{}\n", s.stage, f.file, f.bytes, f.sha256));
        }
    }

    #[derive(Serialize)]
    struct Report<'a> {
        config_sha256: &'a str,
        seed: u64,
        stages: &'a [StageSummary],
        best_objective_s: Option<f64>,
    }
    let best = if root.join("bo/manifest.json").exists() {
        Some(rescore_best(cfg, &root.join("bo"))?)
    } else {
        None
    };
    let report = Report {
        config_sha256,
        seed: cfg.seed,
        stages: &stages,
        best_objective_s: best,
    };
    std::fs::write(root.join("report.json"), to_json_pretty(&report)?)
        .map_err(|e| CliError::Io(format!("cannot write report.json: {e}")))?;
    std::fs::write(root.join("report.csv"), &csv)
        .map_err(|e| CliError::Io(format!("cannot write report.csv: {e}")))?;
    for s in &stages {
        println!(
            "{:<12} {} files (command: {})",
            s.stage,
            s.manifest.files.len(),
            s.manifest.command
        );
    }
    if let Some(best) = best {
        println!("optimizer best re-scored at {best:.4} s");
    }
    println!("wrote {}/report.json and report.csv", root.display());
    Ok(())
}
