use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use super::config::{ArchitectureKind, DatasetFormat, ExperimentConfig, Mode};
use super::metrics::{MetricsWriter, TimingsWriter};
use crate::data::{load_idx, load_raw_tensor, partition, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    label_all_unlabeled, run_phase1, run_supervised_rounds, ClientState, Phase, RoundContext, RoundReport,
    ServerState,
};
use crate::nn::checkpoint::save_params;
use crate::nn::{init_params, NetworkArchitecture, ParameterSet};
use crate::rng::{derive_seed, Purpose, SERVER};
use crate::trinet::run_phase2;

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub experiment_id: String,
    pub mode: Mode,
    pub phase1_rounds: usize,
    pub phase2_rounds: usize,
    /// Accuracy of the final global model (the initial model when no round ran).
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub pseudo_labels_used: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub reports: Vec<RoundReport>,
    pub final_params: ParameterSet,
}

/// Train and test sets after the configured limits.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let load = |images: &PathBuf, labels: &PathBuf, shape: &Option<Vec<usize>>, limit: Option<usize>| {
        let ds = match d.format {
            DatasetFormat::Idx => load_idx(images, labels)?,
            DatasetFormat::Raw => load_raw_tensor(images, shape.as_deref().unwrap_or(&[]), labels)?,
        };
        match limit {
            Some(n) if n < ds.len() => ds.truncated(n),
            _ => Ok(ds),
        }
    };
    let train = load(&d.train_images, &d.train_labels, &d.train_shape, d.train_limit)?;
    let test = load(&d.test_images, &d.test_labels, &d.test_shape, d.test_limit)?;
    if train.image_shape() != test.image_shape() {
        return Err(Error::ShapeMismatch {
            context: "test images".into(),
            expected: train.image_shape().to_vec(),
            found: test.image_shape().to_vec(),
        });
    }
    Ok((train, test))
}

pub fn build_architecture(kind: ArchitectureKind, image_shape: &[usize], num_classes: usize) -> Result<NetworkArchitecture> {
    let shape: [usize; 3] = image_shape.try_into().map_err(|_| Error::ShapeMismatch {
        context: "image shape".into(),
        expected: vec![1, 28, 28],
        found: image_shape.to_vec(),
    })?;
    let arch = match kind {
        ArchitectureKind::Reference => NetworkArchitecture::reference_for(shape, num_classes),
        ArchitectureKind::Compact => NetworkArchitecture::compact_for(shape, num_classes),
    };
    Ok(arch)
}

/// Loads the data named by `cfg` and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    run_experiment_on(cfg, &train, &test)
}

/// Runs the experiment on already loaded data. Dataset paths in `cfg` are ignored.
pub fn run_experiment_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let num_classes = train.num_classes().max(test.num_classes());
    let arch = build_architecture(cfg.architecture, train.image_shape(), num_classes)?;
    if cfg.mode == Mode::FedTriNet {
        cfg.phase2.validate(&arch)?;
    }
    let shards = partition(train, &cfg.split)?;

    let init = init_params(&arch, derive_seed(cfg.seed, SERVER, 0, Purpose::Init));
    let mut server = ServerState::new(init.clone());
    let mut clients: Vec<ClientState> = shards.into_iter().map(|s| ClientState::new(s, init.clone())).collect();
    let ctx = RoundContext {
        arch: &arch,
        config: &cfg.round,
        test,
        master_seed: cfg.seed,
    };

    fs::create_dir_all(&cfg.output_dir)?;
    let mut metrics = MetricsWriter::create(&cfg.metrics_path(), &cfg.experiment_id)?;
    let mut timings = TimingsWriter::create(&cfg.timings_path())?;
    let mut reports = Vec::new();
    let mut clock = Instant::now();
    let mut sink = |r: &RoundReport| -> Result<()> {
        metrics.write_report(r)?;
        timings.write(r.round, clock.elapsed())?;
        clock = Instant::now();
        reports.push(r.clone());
        Ok(())
    };

    let (t1, t2) = (cfg.phase1_rounds, cfg.phase2_rounds);
    match cfg.mode {
        Mode::FedTriNet => {
            run_phase1(&ctx, &mut server, &mut clients, t1, &mut sink)?;
            run_phase2(&ctx, &cfg.phase2, &mut server, &mut clients, t2, &mut sink)?;
        }
        Mode::FedAvgLabeledOnly => {
            run_supervised_rounds(&ctx, &mut server, &mut clients, t1 + t2, Phase::PreTrain, &mut sink)?;
        }
        Mode::FedSem => {
            run_phase1(&ctx, &mut server, &mut clients, t1, &mut sink)?;
            if t2 > 0 {
                for client in &mut clients {
                    label_all_unlabeled(&arch, client)?;
                }
                server.phase = Phase::PseudoLabel;
                run_supervised_rounds(&ctx, &mut server, &mut clients, t2, Phase::PseudoLabel, &mut sink)?;
            }
        }
    }

    save_params(&server.global_params, &cfg.checkpoint_path())?;
    let final_accuracy = match reports.last() {
        Some(r) => r.test_accuracy,
        None => crate::federation::evaluate(&arch, &server.global_params, test)?,
    };
    let best_accuracy = reports.iter().map(|r| r.test_accuracy).fold(final_accuracy, f64::max);
    let summary = Summary {
        experiment_id: cfg.experiment_id.clone(),
        mode: cfg.mode,
        phase1_rounds: t1,
        phase2_rounds: t2,
        final_accuracy,
        best_accuracy,
        pseudo_labels_used: reports.iter().map(|r| r.total_pseudo_selected).sum(),
        metrics_path: cfg.metrics_path(),
        checkpoint_path: cfg.checkpoint_path(),
    };
    Ok(ExperimentOutcome {
        summary,
        reports,
        final_params: server.global_params,
    })
}

/// Config for one `(T1, T2)` combination of a sweep.
pub fn combo_config(cfg: &ExperimentConfig, t1: usize, t2: usize) -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: format!("{}_t1-{t1}_t2-{t2}", cfg.experiment_id),
        phase1_rounds: t1,
        phase2_rounds: t2,
        ..cfg.clone()
    }
}

/// One run per `(T1, T2)` combination, all with the same master seed.
///
/// Writes `<experiment_id>.sweep.csv` next to the per-combination metrics.
pub fn sweep_phase_rounds(cfg: &ExperimentConfig, combos: &[(usize, usize)]) -> Result<Vec<Summary>> {
    let total = combos.first().map(|(a, b)| a + b).ok_or_else(|| Error::config("combos", "no combinations given"))?;
    if let Some((a, b)) = combos.iter().find(|(a, b)| a + b != total) {
        return Err(Error::config(
            "combos",
            format!("({a},{b}) totals {} rounds but ({},{}) totals {total}", a + b, combos[0].0, combos[0].1),
        ));
    }
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let summaries = combos
        .iter()
        .map(|&(t1, t2)| run_experiment_on(&combo_config(cfg, t1, t2), &train, &test).map(|o| o.summary))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut f = fs::File::create(cfg.output_dir.join(format!("{}.sweep.csv", cfg.experiment_id)))?;
    f.write_all(sweep_table(&summaries).as_bytes())?;
    Ok(summaries)
}

/// CSV table with one row per sweep combination.
pub fn sweep_table(summaries: &[Summary]) -> String {
    let mut out = String::from("phase1_rounds,phase2_rounds,final_accuracy,best_accuracy,pseudo_labels_used\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{}\n",
            s.phase1_rounds, s.phase2_rounds, s.final_accuracy, s.best_accuracy, s.pseudo_labels_used
        ));
    }
    out
}
