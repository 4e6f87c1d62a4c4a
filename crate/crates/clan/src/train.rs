//! Training loop, evaluation over branch subsets, and run logging.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::data::{iterate_batches, stack_samples, synth_generate, Sample, Split};
use crate::error::{ClanError, Result};
use crate::model::{clan_loss, clan_predict, BranchOutputs, ClanModel};
use crate::optim::{lr_at_epoch, Sgd};
use crate::tensor::Element;

/// Named branch subsets evaluated after every epoch, mirroring the usual
/// ablation ladder: every single branch, top plus the deepest middle
/// branch, top plus all middle branches, and everything.
pub fn standard_subsets(branch_names: &[String]) -> Vec<(String, Vec<String>)> {
    let mut subsets: Vec<(String, Vec<String>)> = Vec::new();
    for name in branch_names {
        subsets.push((name.clone(), vec![name.clone()]));
    }
    let a_branches: Vec<String> = branch_names
        .iter()
        .filter(|n| n.starts_with('A'))
        .cloned()
        .collect();
    let has_g = branch_names.iter().any(|n| n == "G");
    if has_g && !a_branches.is_empty() {
        let deepest = a_branches.last().unwrap().clone();
        subsets.push(("G+P".to_string(), vec!["G".to_string(), deepest]));
        let mut gpa = vec!["G".to_string()];
        gpa.extend(a_branches.iter().cloned());
        subsets.push(("G+P+A".to_string(), gpa));
    }
    subsets.push(("all".to_string(), branch_names.to_vec()));
    subsets
}

/// Accuracy of each subset on a sample set, forward in minibatches.
pub fn evaluate_subsets<E: Element>(
    model: &ClanModel<E>,
    samples: &[Sample<E>],
    subsets: &[(String, Vec<String>)],
    batch: usize,
) -> Result<Vec<f64>> {
    let mut correct = vec![0usize; subsets.len()];
    let mut total = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let (images, labels) = stack_samples(chunk)?;
        let outputs = model.forward(&images)?;
        for (si, (_, subset)) in subsets.iter().enumerate() {
            let preds = clan_predict(&outputs, subset)?;
            correct[si] += preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        total += labels.len();
    }
    Ok(correct
        .iter()
        .map(|&c| c as f64 / total.max(1) as f64)
        .collect())
}

pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy per standard subset, aligned with `subset_names`.
    pub accuracies: Vec<f64>,
}

pub struct TrainSummary {
    pub subset_names: Vec<String>,
    pub per_epoch: Vec<EpochStats>,
    pub csv_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainSummary {
    /// Final accuracy of a named subset.
    pub fn final_accuracy(&self, subset: &str) -> Option<f64> {
        let idx = self.subset_names.iter().position(|n| n == subset)?;
        self.per_epoch.last().map(|e| e.accuracies[idx])
    }
}

/// Full deterministic training run: SGD with momentum over the synthetic
/// task, per-epoch evaluation, CSV log and checkpoint in the output dir.
pub fn run_training<E: Element>(cfg: &RunConfig, quiet: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let train: Vec<Sample<E>> = synth_generate(&cfg.data, Split::Train)?;
    let test: Vec<Sample<E>> = synth_generate(&cfg.data, Split::Test)?;
    let model: ClanModel<E> = ClanModel::new(cfg.model.clone(), cfg.seed)?;
    let weights = cfg.effective_branch_weights();
    let params = model.trainable_tensors();
    let mut opt = Sgd::new(&params, cfg.optim.momentum, cfg.optim.weight_decay);
    let subsets = standard_subsets(model.branch_names());

    let csv_path = cfg.output_dir.join("train_log.csv");
    let checkpoint_path = cfg.output_dir.join("checkpoint.bin");
    let mut csv = String::new();
    let _ = write!(csv, "epoch,lr,train_loss");
    for (name, _) in &subsets {
        let _ = write!(csv, ",acc_{name}");
    }
    let _ = writeln!(csv);

    let mut per_epoch = Vec::new();
    for epoch in 0..cfg.optim.epochs {
        let lr = lr_at_epoch(
            cfg.optim.lr,
            cfg.optim.lr_decay_gamma,
            cfg.optim.lr_decay_every,
            epoch,
        );
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (images, labels) in iterate_batches(&train, cfg.optim.batch, cfg.seed, epoch as u64)? {
            let outputs = model.forward(&images)?;
            let loss = clan_loss(&outputs, &labels, &weights)?;
            let loss_val = loss.item().as_f64();
            if std::env::var("CLAN_DEBUG_NORMS").is_ok() {
                eprintln!("debug step epoch={epoch} loss={loss_val}");
            }
            if !loss_val.is_finite() {
                return Err(ClanError::numeric(
                    "train",
                    format!("loss diverged to {loss_val} at epoch {epoch}"),
                ));
            }
            loss_sum += loss_val * labels.len() as f64;
            seen += labels.len();
            model.zero_grads();
            loss.backward()?;
            opt.step(&params, lr);
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        if std::env::var("CLAN_DEBUG_NORMS").is_ok() {
            let mut worst = ("", 0.0f64);
            for (name, t) in &params {
                let m = t.data().iter().fold(0.0f64, |a, v| a.max(v.as_f64().abs()));
                if m > worst.1 { worst = (Box::leak(name.clone().into_boxed_str()), m); }
            }
            eprintln!("debug epoch={epoch} max_abs_weight {}={}", worst.0, worst.1);
        }
        let accuracies = evaluate_subsets(&model, &test, &subsets, cfg.optim.batch)?;

        let _ = write!(csv, "{epoch},{lr},{train_loss}");
        for acc in &accuracies {
            let _ = write!(csv, ",{acc}");
        }
        let _ = writeln!(csv);
        if !quiet {
            let mut line = format!("epoch={epoch} lr={lr} train_loss={train_loss}");
            for ((name, _), acc) in subsets.iter().zip(&accuracies) {
                let _ = write!(line, " acc_{name}={acc}");
            }
            println!("{line}");
        }
        model.save(&checkpoint_path)?;
        per_epoch.push(EpochStats {
            epoch,
            lr,
            train_loss,
            accuracies,
        });
    }
    std::fs::write(&csv_path, csv)?;
    Ok(TrainSummary {
        subset_names: subsets.into_iter().map(|(n, _)| n).collect(),
        per_epoch,
        csv_path,
        checkpoint_path,
    })
}

/// Evaluate a checkpoint over branch subsets and print one line per subset.
pub fn run_eval<E: Element>(
    cfg: &RunConfig,
    checkpoint: &std::path::Path,
    branches: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    cfg.validate()?;
    let model: ClanModel<E> = ClanModel::new(cfg.model.clone(), cfg.seed)?;
    model.load(checkpoint)?;
    let test: Vec<Sample<E>> = synth_generate(&cfg.data, Split::Test)?;
    let subsets = match branches {
        Some(list) => {
            let names: Vec<String> = list
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if names.is_empty() {
                return Err(ClanError::usage("eval", "empty --branches list"));
            }
            vec![(names.join("+"), names)]
        }
        None => standard_subsets(model.branch_names()),
    };
    let accs = evaluate_subsets(&model, &test, &subsets, cfg.optim.batch)?;
    let mut out = Vec::new();
    for ((name, _), acc) in subsets.iter().zip(&accs) {
        println!("subset={name} acc={acc} n={}", test.len());
        out.push((name.clone(), *acc));
    }
    Ok(out)
}

/// Outputs of a forward pass kept for tests: logits per branch.
pub fn forward_batch<E: Element>(
    model: &ClanModel<E>,
    samples: &[Sample<E>],
) -> Result<BranchOutputs<E>> {
    let (images, _) = stack_samples(samples)?;
    model.forward(&images)
}
