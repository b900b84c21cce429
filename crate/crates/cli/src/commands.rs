//! Command implementations: data generation, training, evaluation,
//! ablation sweeps, attention export and gradient checking. Each command
//! writes its outputs plus the fully-resolved config into the target
//! location and returns a summary for the caller to print.

use crate::config::RunConfig;
use crate::CliError;
use gpmil_core::data::{generate_synthetic, load_dataset, save_dataset, split_dataset, Dataset};
use gpmil_core::linalg::mean;
use gpmil_core::metrics::{compute_report, inducing_label_map, MetricsReport};
use gpmil_core::model::{forward_bag, load_model, save_model, MilModel, ParamBlock};
use gpmil_core::rng::StreamRng;
use gpmil_core::train::{
    gradcheck_fixture, gradient_check, predict_dataset, train, GradCheckReport, HistoryEvent,
};
use std::io::Write;
use std::path::{Path, PathBuf};

pub type CliResult<T> = Result<T, CliError>;

fn write_resolved_config(config: &RunConfig, path: &Path) -> CliResult<()> {
    std::fs::write(path, config.to_toml())?;
    Ok(())
}

/// Which part of the split a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            other => Err(format!("unknown split '{other}' (train|val|test|all)")),
        }
    }
}

fn select_split(config: &RunConfig, ds: &Dataset, choice: SplitChoice) -> CliResult<Dataset> {
    if choice == SplitChoice::All {
        return Ok(ds.clone());
    }
    let s = &config.split;
    let (train, val, test) = split_dataset(
        ds,
        (s.train, s.val, s.test),
        config.stream("split"),
    )?;
    Ok(match choice {
        SplitChoice::Train => train,
        SplitChoice::Val => val,
        SplitChoice::Test => test,
        SplitChoice::All => unreachable!(),
    })
}

pub struct GenSummary {
    pub n_bags: usize,
    pub class_counts: Vec<usize>,
    pub out_path: PathBuf,
}

/// Generate the synthetic dataset described by the config and write it (and
/// the resolved config) to disk.
pub fn cmd_gen_data(config: &RunConfig, out_path: &Path, jsonl: bool) -> CliResult<GenSummary> {
    config.validate().map_err(CliError::Config)?;
    let spec = config.data.to_spec(config.stream("data"));
    let ds = generate_synthetic(&spec)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&ds, out_path)?;
    if jsonl {
        gpmil_core::data::save_dataset_jsonl(&ds, out_path.with_extension("jsonl"))?;
    }
    write_resolved_config(config, &out_path.with_extension("config.toml"))?;
    let class_counts = (0..ds.n_classes).map(|c| ds.class_count(c)).collect();
    Ok(GenSummary {
        n_bags: ds.len(),
        class_counts,
        out_path: out_path.to_path_buf(),
    })
}

pub struct TrainSummary {
    pub model_path: PathBuf,
    pub history_path: PathBuf,
    pub n_steps: usize,
    pub final_mean_loss: f64,
    pub final_val_acc: Option<f64>,
    pub final_val_auc: Option<f64>,
}

/// Train on the config's train split of the given dataset file, streaming
/// the history to `history.jsonl` (preserved on abort), then save the model
/// and verify its serialization round-trips the forward pass bit-exactly.
pub fn cmd_train(config: &RunConfig, data_path: &Path, out_dir: &Path) -> CliResult<TrainSummary> {
    config.validate().map_err(CliError::Config)?;
    let ds = load_dataset(data_path)?;
    let train_set = select_split(config, &ds, SplitChoice::Train)?;
    let val_set = select_split(config, &ds, SplitChoice::Val)?;
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(config, &out_dir.join("config.toml"))?;

    let history_path = out_dir.join("history.jsonl");
    let file = std::fs::File::create(&history_path)?;
    let mut writer = std::io::BufWriter::new(file);
    let mut io_failure: Option<std::io::Error> = None;
    let cfg = config.train_config();
    let result = train(&train_set, Some(&val_set), &cfg, &mut |event: &HistoryEvent| {
        if io_failure.is_none() {
            let line = serde_json::to_string(event).expect("history serializes");
            if let Err(e) = writeln!(writer, "{line}") {
                io_failure = Some(e);
            }
        }
    });
    writer.flush()?;
    if let Some(e) = io_failure {
        return Err(CliError::Io(e));
    }
    let (model, history) = result?;

    let model_path = out_dir.join("model.gpm");
    save_model(&model, &model_path)?;
    let reloaded = load_model(&model_path)?;
    if let Some(bag) = train_set.bags.first() {
        let check_seed = config.stream("roundtrip-check");
        let a = forward_bag(bag, &model, 2, &mut StreamRng::new(check_seed))?;
        let b = forward_bag(bag, &reloaded, 2, &mut StreamRng::new(check_seed))?;
        for (x, y) in a
            .prob_samples
            .data()
            .iter()
            .zip(b.prob_samples.data())
        {
            if x.to_bits() != y.to_bits() {
                return Err(CliError::Config(
                    "model serialization round-trip mismatch".into(),
                ));
            }
        }
    }

    let last = history.epochs.last();
    Ok(TrainSummary {
        model_path,
        history_path,
        n_steps: history.steps.len(),
        final_mean_loss: last.map(|e| e.mean_loss).unwrap_or(f64::NAN),
        final_val_acc: last.and_then(|e| e.val_balanced_acc),
        final_val_auc: last.and_then(|e| e.val_auc),
    })
}

/// Evaluate a saved model on one split of a dataset file; writes
/// metrics.json and metrics.txt next to the resolved config.
pub fn cmd_eval(
    config: &RunConfig,
    model_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    split: SplitChoice,
) -> CliResult<MetricsReport> {
    config.validate().map_err(CliError::Config)?;
    let model = load_model(model_path)?;
    let ds = load_dataset(data_path)?;
    let subset = select_split(config, &ds, split)?;
    if subset.is_empty() {
        return Err(CliError::Config(format!(
            "selected split is empty (dataset has {} bags)",
            ds.len()
        )));
    }
    let records = predict_dataset(&model, &subset, config.eval.n_samples, config.stream("eval"))?;
    let report = compute_report(&records, &subset, config.eval.ece_bins)?;
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(config, &out_dir.join("config.toml"))?;
    std::fs::write(out_dir.join("metrics.json"), report.to_json())?;
    std::fs::write(out_dir.join("metrics.txt"), report.to_text())?;
    Ok(report)
}

/// One ablation cell: configuration axes plus aggregated metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub use_lm: bool,
    pub normalization: String,
    pub diag_only: bool,
    pub n_inducing: usize,
    pub n_seeds: usize,
    pub balanced_acc: (f64, f64),
    pub auc: (f64, f64),
    pub ace: (f64, f64),
    pub instance_auc: Option<(f64, f64)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    (m, gpmil_core::linalg::sample_variance(xs).sqrt())
}

/// Run the configured grid {use_lm} x {normalization} x {diag_only} x
/// {n_inducing} with n_seeds runs per cell. Run s of any cell uses root
/// seed `config.seed + s`, so any cell run is reproducible with standalone
/// cmd_train/cmd_eval under that seed. Writes ablation.csv (aggregated) and
/// ablation_runs.csv (per run).
pub fn cmd_ablate(config: &RunConfig, out_dir: &Path) -> CliResult<Vec<AblationRow>> {
    config.validate().map_err(CliError::Config)?;
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(config, &out_dir.join("config.toml"))?;
    let grid = &config.ablate;
    let mut rows = Vec::new();
    let mut runs_csv = String::from(
        "use_lm,normalization,diag_only,n_inducing,seed,balanced_acc,auc,ace,instance_auc\n",
    );
    for &use_lm in &grid.use_lm {
        for &norm in &grid.normalizations {
            for &diag in &grid.diag_only {
                for &m in &grid.inducing_counts {
                    let mut accs = Vec::new();
                    let mut aucs = Vec::new();
                    let mut aces = Vec::new();
                    let mut inst_aucs = Vec::new();
                    for s in 0..grid.n_seeds {
                        let mut cell_cfg = config.clone();
                        cell_cfg.seed = config.seed + s as u64;
                        cell_cfg.train.use_lm = use_lm;
                        cell_cfg.train.normalization = norm;
                        cell_cfg.train.diag_only = diag;
                        cell_cfg.train.n_inducing = m;
                        let report = run_cell(&cell_cfg)?;
                        let norm_name = match norm {
                            gpmil_core::attention::Normalization::Softmax => "softmax",
                            gpmil_core::attention::Normalization::Sigmoid => "sigmoid",
                        };
                        runs_csv.push_str(&format!(
                            "{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                            use_lm,
                            norm_name,
                            diag,
                            m,
                            cell_cfg.seed,
                            report.balanced_acc,
                            report.auc,
                            report.ace,
                            report
                                .instance_auc
                                .map(|v| format!("{v:.6}"))
                                .unwrap_or_default(),
                        ));
                        accs.push(report.balanced_acc);
                        aucs.push(report.auc);
                        aces.push(report.ace);
                        if let Some(v) = report.instance_auc {
                            inst_aucs.push(v);
                        }
                    }
                    rows.push(AblationRow {
                        use_lm,
                        normalization: match norm {
                            gpmil_core::attention::Normalization::Softmax => "softmax".into(),
                            gpmil_core::attention::Normalization::Sigmoid => "sigmoid".into(),
                        },
                        diag_only: diag,
                        n_inducing: m,
                        n_seeds: grid.n_seeds,
                        balanced_acc: mean_std(&accs),
                        auc: mean_std(&aucs),
                        ace: mean_std(&aces),
                        instance_auc: if inst_aucs.len() == grid.n_seeds {
                            Some(mean_std(&inst_aucs))
                        } else {
                            None
                        },
                    });
                }
            }
        }
    }
    let mut csv = String::from(
        "use_lm,normalization,diag_only,n_inducing,n_seeds,balanced_acc_mean,balanced_acc_std,auc_mean,auc_std,ace_mean,ace_std,instance_auc_mean,instance_auc_std\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.use_lm,
            r.normalization,
            r.diag_only,
            r.n_inducing,
            r.n_seeds,
            r.balanced_acc.0,
            r.balanced_acc.1,
            r.auc.0,
            r.auc.1,
            r.ace.0,
            r.ace.1,
            r.instance_auc
                .map(|v| format!("{:.6}", v.0))
                .unwrap_or_default(),
            r.instance_auc
                .map(|v| format!("{:.6}", v.1))
                .unwrap_or_default(),
        ));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    std::fs::write(out_dir.join("ablation_runs.csv"), runs_csv)?;
    Ok(rows)
}

/// Generate data -> split -> train -> evaluate the test split, all in
/// memory, exactly as the standalone commands would under the same seed.
fn run_cell(config: &RunConfig) -> CliResult<MetricsReport> {
    let spec = config.data.to_spec(config.stream("data"));
    let ds = generate_synthetic(&spec)?;
    let train_set = select_split(config, &ds, SplitChoice::Train)?;
    let val_set = select_split(config, &ds, SplitChoice::Val)?;
    let test_set = select_split(config, &ds, SplitChoice::Test)?;
    let cfg = config.train_config();
    let (model, _) = train(&train_set, Some(&val_set), &cfg, &mut |_| {})?;
    let records = predict_dataset(&model, &test_set, config.eval.n_samples, config.stream("eval"))?;
    Ok(compute_report(&records, &test_set, config.eval.ece_bins)?)
}

/// Per-instance attention export: one CSV row per instance with the
/// per-bag min-max normalized mean attention, the raw attention standard
/// deviation, the instance label when known, and the cosine-nearest
/// inducing point.
pub fn cmd_export_attention(
    config: &RunConfig,
    model_path: &Path,
    data_path: &Path,
    out_path: &Path,
) -> CliResult<usize> {
    config.validate().map_err(CliError::Config)?;
    let model: MilModel = load_model(model_path)?;
    let ds = load_dataset(data_path)?;
    let label_map = inducing_label_map(&ds, &model, 0)?;
    let mut assignment = std::collections::HashMap::new();
    for a in &label_map.assignments {
        assignment.insert((a.bag_index, a.instance_index), a.inducing);
    }
    let eval_seed = config.stream("eval");
    let mut csv =
        String::from("bag_id,instance_index,attention_mean,attention_std,instance_label,inducing\n");
    let mut rows = 0usize;
    for (bag_index, bag) in ds.bags.iter().enumerate() {
        let mut rng = StreamRng::from_stream(eval_seed, &bag.id);
        let fwd = forward_bag(bag, &model, config.eval.n_samples, &mut rng)?;
        let k = bag.n_instances();
        let n = config.eval.n_samples;
        let mut means = vec![0.0; k];
        let mut stds = vec![0.0; k];
        for i in 0..k {
            let col: Vec<f64> = (0..n).map(|s| fwd.attention_samples.get(s, i)).collect();
            means[i] = mean(&col);
            stds[i] = gpmil_core::linalg::sample_variance(&col).sqrt();
        }
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..k {
            let norm_mean = if hi == lo { 0.0 } else { (means[i] - lo) / (hi - lo) };
            let label = bag
                .instance_labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default();
            let inducing = assignment
                .get(&(bag_index, i))
                .map(|j| j.to_string())
                .unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                bag.id, i, norm_mean, stds[i], label, inducing
            ));
            rows += 1;
        }
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_path, csv)?;
    Ok(rows)
}

/// Aggregated gradient check over several fixture seeds.
pub struct GradCheckSummary {
    pub reports: Vec<(u64, GradCheckReport)>,
    pub passed: bool,
}

/// Verify reverse-mode gradients against central finite differences on the
/// standard fixture for `n_seeds` consecutive seeds starting at the config
/// root seed. `inject_bug` tampers the classifier-weight gradients as a
/// negative control; the check must then fail.
pub fn cmd_gradcheck(config: &RunConfig, n_seeds: usize, inject_bug: bool) -> CliResult<GradCheckSummary> {
    let mut reports = Vec::new();
    let mut passed = true;
    for s in 0..n_seeds {
        let seed = config.seed + s as u64;
        let (model, bag) = gradcheck_fixture(seed);
        let tamper = if inject_bug {
            Some((ParamBlock::ClfW, 1.5))
        } else {
            None
        };
        let report = gradient_check(&model, &bag, 2, 0.5, seed + 10_000, 1e-5, 1e-8, tamper)?;
        passed &= report.passed;
        reports.push((seed, report));
    }
    Ok(GradCheckSummary { reports, passed })
}
