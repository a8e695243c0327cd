//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once and unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentPolicy;
use crate::data::{SplitConfig, SplitMode};
use crate::error::{Error, Result};
use crate::federation::{Participation, RoundConfig};
use crate::trinet::{Phase2Config, ScheduleMode, SpliceSpec, ThresholdSchedule};

/// Environment variable that replaces the configured master seed.
pub const SEED_ENV: &str = "FTN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FedTriNet,
    FedAvgLabeledOnly,
    FedSem,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::FedTriNet => "fedtrinet",
            Mode::FedAvgLabeledOnly => "fedavg_labeled_only",
            Mode::FedSem => "fedsem",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fedtrinet" => Ok(Mode::FedTriNet),
            "fedavg_labeled_only" | "fedavg" => Ok(Mode::FedAvgLabeledOnly),
            "fedsem" => Ok(Mode::FedSem),
            _ => Err("expected fedtrinet, fedavg_labeled_only or fedsem".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Other,
}

impl DatasetKind {
    /// Default (phase I, phase II) rounds.
    pub fn default_rounds(&self) -> (usize, usize) {
        match self {
            DatasetKind::FashionMnist => (30, 70),
            DatasetKind::Mnist | DatasetKind::Other => (40, 60),
        }
    }

    pub fn default_augment(&self) -> AugmentPolicy {
        match self {
            DatasetKind::FashionMnist => AugmentPolicy::clothing(),
            DatasetKind::Mnist | DatasetKind::Other => AugmentPolicy::digits(),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion_mnist" => Ok(DatasetKind::FashionMnist),
            "other" => Ok(DatasetKind::Other),
            _ => Err("expected mnist, fashion_mnist or other".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Idx,
    Raw,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "idx" => Ok(DatasetFormat::Idx),
            "raw" => Ok(DatasetFormat::Raw),
            _ => Err("expected idx or raw".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureKind {
    Reference,
    /// Same topology at a quarter of the parameters, for quick runs.
    Compact,
}

impl FromStr for ArchitectureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reference" => Ok(ArchitectureKind::Reference),
            "compact" => Ok(ArchitectureKind::Compact),
            _ => Err("expected reference or compact".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub format: DatasetFormat,
    /// Header shapes for the raw format, `[N, H, W]` or `[N, C, H, W]`.
    pub train_shape: Option<Vec<usize>>,
    pub test_shape: Option<Vec<usize>>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub data: DataPaths,
    pub dataset: DatasetKind,
    pub architecture: ArchitectureKind,
    pub mode: Mode,
    pub split: SplitConfig,
    pub phase1_rounds: usize,
    pub phase2_rounds: usize,
    pub round: RoundConfig,
    pub phase2: Phase2Config,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const REQUIRED: [&str; 4] = ["train_images", "train_labels", "test_images", "test_labels"];

const KNOWN: &[&str] = &[
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "dataset_format",
    "train_shape",
    "test_shape",
    "train_limit",
    "test_limit",
    "dataset",
    "architecture",
    "experiment_id",
    "mode",
    "num_clients",
    "labeled_total",
    "split",
    "labeled_classes_per_client",
    "split_seed",
    "phase1_rounds",
    "phase2_rounds",
    "local_epochs",
    "batch_size_labeled",
    "batch_size_pseudo",
    "eta",
    "participation",
    "participants",
    "lambda",
    "alpha_threshold",
    "threshold_schedule",
    "threshold_breakpoints",
    "splice_cutoff",
    "finetune_epochs",
    "no_threshold",
    "no_finetune",
    "no_pseudo",
    "accumulate_pseudo",
    "freeze_theta_bar",
    "augment",
    "augment_pad",
    "augment_flip",
    "augment_contrast",
    "seed",
    "output_dir",
];

/// Raw `key -> (line, value)` pairs with typed accessors that consume keys.
struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", i + 1)))?;
            let key = key.trim().to_string();
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::config(key, "unknown key"));
            }
            if map.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::config(key, "given more than once"));
            }
        }
        Ok(Entries(map))
    }

    fn take_str(&mut self, key: &str) -> Option<String> {
        self.0.remove(key).map(|(_, v)| v)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.0.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(key, format!("line {line}: cannot parse {v:?}: {e}"))),
        }
    }

    fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.0.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| Error::config(key, format!("line {line}: cannot parse {v:?}: {e}"))),
        }
    }
}

impl ExperimentConfig {
    /// A config for the given dataset files with every other value defaulted.
    pub fn with_paths(train_images: &Path, train_labels: &Path, test_images: &Path, test_labels: &Path) -> Self {
        let text = format!(
            "train_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n",
            train_images.display(),
            train_labels.display(),
            test_images.display(),
            test_labels.display()
        );
        ExperimentConfig::parse_str(&text, "experiment").expect("defaults are valid")
    }

    /// Parses and validates a config file; the file stem is the default experiment id.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
        ExperimentConfig::parse_str(&text, stem)
    }

    pub fn parse_str(text: &str, default_id: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        for key in REQUIRED {
            if !e.0.contains_key(key) {
                return Err(Error::config(key, "missing required key"));
            }
        }
        let dataset: DatasetKind = e.take_or("dataset", DatasetKind::Mnist)?;
        let (t1, t2) = dataset.default_rounds();
        let seed: u64 = e.take_or("seed", 0)?;

        let data = DataPaths {
            train_images: e.take_str("train_images").unwrap().into(),
            train_labels: e.take_str("train_labels").unwrap().into(),
            test_images: e.take_str("test_images").unwrap().into(),
            test_labels: e.take_str("test_labels").unwrap().into(),
            format: e.take_or("dataset_format", DatasetFormat::Idx)?,
            train_shape: e.take_list("train_shape")?,
            test_shape: e.take_list("test_shape")?,
            train_limit: e.take("train_limit")?,
            test_limit: e.take("test_limit")?,
        };

        let mode = match e.take_or("split", "iid".to_string())?.as_str() {
            "iid" => SplitMode::Iid,
            "non_iid" => SplitMode::NonIid,
            other => return Err(Error::config("split", format!("expected iid or non_iid, got {other:?}"))),
        };
        let split = SplitConfig {
            num_clients: e.take_or("num_clients", 10)?,
            labeled_total: e.take_or("labeled_total", 600)?,
            mode,
            labeled_classes_per_client: e.take_or("labeled_classes_per_client", 2)?,
            seed: e.take_or("split_seed", seed)?,
        };

        let participation = match (e.take::<f64>("participation")?, e.take::<usize>("participants")?) {
            (Some(_), Some(_)) => {
                return Err(Error::config("participants", "conflicts with `participation`"));
            }
            (_, Some(n)) => Participation::Count(n),
            (Some(f), None) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config("participation", "must be in (0, 1]"));
                }
                Participation::Fraction(f)
            }
            (None, None) => Participation::Fraction(1.0),
        };
        let base = dataset.default_augment();
        let augment = AugmentPolicy {
            enabled: e.take_or("augment", base.enabled)?,
            pad: e.take_or("augment_pad", base.pad)?,
            horizontal_flip: e.take_or("augment_flip", base.horizontal_flip)?,
            contrast_delta: e.take_or("augment_contrast", base.contrast_delta)?,
            ..base
        };
        let round = RoundConfig {
            local_epochs: e.take_or("local_epochs", 5)?,
            batch_size_labeled: e.take_or("batch_size_labeled", 50)?,
            batch_size_pseudo: e.take_or("batch_size_pseudo", 50)?,
            eta: e.take_or("eta", 0.01)?,
            participation,
            augment,
        };

        let schedule_mode = match e.take_or("threshold_schedule", "clamped".to_string())?.as_str() {
            "clamped" => ScheduleMode::Clamped,
            "literal" => ScheduleMode::Literal,
            other => {
                return Err(Error::config(
                    "threshold_schedule",
                    format!("expected clamped or literal, got {other:?}"),
                ))
            }
        };
        let breakpoints = match e.take_list("threshold_breakpoints")? {
            None => (10, 35),
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => return Err(Error::config("threshold_breakpoints", "expected two comma-separated rounds")),
        };
        let phase2 = Phase2Config {
            splice: SpliceSpec {
                shallow_cutoff: e.take_or("splice_cutoff", 2)?,
            },
            finetune_epochs: e.take_or("finetune_epochs", 1)?,
            lambda: e.take_or("lambda", 1.0)?,
            alpha_threshold: e.take_or("alpha_threshold", 0.93)?,
            schedule: ThresholdSchedule {
                mode: schedule_mode,
                breakpoints,
            },
            no_threshold: e.take_or("no_threshold", false)?,
            no_finetune: e.take_or("no_finetune", false)?,
            no_pseudo: e.take_or("no_pseudo", false)?,
            accumulate_pseudo: e.take_or("accumulate_pseudo", false)?,
            freeze_theta_bar: e.take_or("freeze_theta_bar", false)?,
        };

        let cfg = ExperimentConfig {
            experiment_id: e.take_or("experiment_id", default_id.to_string())?,
            data,
            dataset,
            architecture: e.take_or("architecture", ArchitectureKind::Reference)?,
            mode: e.take_or("mode", Mode::FedTriNet)?,
            split,
            phase1_rounds: e.take_or("phase1_rounds", t1)?,
            phase2_rounds: e.take_or("phase2_rounds", t2)?,
            round,
            phase2,
            seed,
            output_dir: e.take_or("output_dir", PathBuf::from("runs"))?,
        };
        debug_assert!(e.0.is_empty(), "unconsumed keys: {:?}", e.0.keys());
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(Error::config("experiment_id", "use letters, digits, `-`, `_` or `.`"));
        }
        if self.split.num_clients == 0 {
            return Err(Error::config("num_clients", "must be at least 1"));
        }
        if self.split.labeled_total < self.split.num_clients {
            return Err(Error::config("labeled_total", "every client needs a labeled example"));
        }
        if !self.split.labeled_total.is_multiple_of(self.split.num_clients) {
            return Err(Error::config("labeled_total", "must be divisible by num_clients"));
        }
        let n = self.round.participation.count(self.split.num_clients);
        if n == 0 || n > self.split.num_clients {
            let key = match self.round.participation {
                Participation::Count(_) => "participants",
                Participation::Fraction(_) => "participation",
            };
            return Err(Error::config(key, format!("selects {n} of {} clients", self.split.num_clients)));
        }
        self.round.validate()?;
        if self.data.format == DatasetFormat::Raw {
            if self.data.train_shape.is_none() {
                return Err(Error::config("train_shape", "required for the raw format"));
            }
            if self.data.test_shape.is_none() {
                return Err(Error::config("test_shape", "required for the raw format"));
            }
        }
        if self.phase2.splice.shallow_cutoff == 0 {
            return Err(Error::config("splice_cutoff", "must be at least 1"));
        }
        if !(self.phase2.lambda.is_finite() && self.phase2.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be a finite non-negative number"));
        }
        let a = self.phase2.alpha_threshold;
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::config("alpha_threshold", "must be in (0, 1]"));
        }
        let (t_a, t_b) = self.phase2.schedule.breakpoints;
        if t_a > t_b {
            return Err(Error::config("threshold_breakpoints", "first breakpoint exceeds the second"));
        }
        Ok(())
    }

    /// Replaces the master seed with `FTN_SEED` when it is set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.metrics.csv", self.experiment_id))
    }

    pub fn timings_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.timings.csv", self.experiment_id))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join(format!("{}.params", self.experiment_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATHS: &str = "train_images = a\ntrain_labels = b\ntest_images = c\ntest_labels = d\n";

    fn parse(extra: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::parse_str(&format!("{PATHS}{extra}"), "exp")
    }

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.split.num_clients, 10);
        assert_eq!(cfg.split.labeled_total, 600);
        assert_eq!(cfg.phase1_rounds + cfg.phase2_rounds, 100);
        assert_eq!((cfg.phase1_rounds, cfg.phase2_rounds), (40, 60));
        assert_eq!(cfg.round.local_epochs, 5);
        assert_eq!(cfg.round.batch_size_labeled, 50);
        assert_eq!(cfg.round.batch_size_pseudo, 50);
        assert_eq!(cfg.phase2.alpha_threshold, 0.93);
        assert_eq!(cfg.phase2.lambda, 1.0);
        assert_eq!(cfg.phase2.splice.shallow_cutoff, 2);
        assert_eq!(cfg.phase2.schedule, ThresholdSchedule::default());
        assert_eq!(cfg.mode, Mode::FedTriNet);
        assert_eq!(cfg.experiment_id, "exp");
        assert!(!cfg.round.augment.horizontal_flip);
    }

    #[test]
    fn fashion_defaults() {
        let cfg = parse("dataset = fashion_mnist\n").unwrap();
        assert_eq!((cfg.phase1_rounds, cfg.phase2_rounds), (30, 70));
        assert!(cfg.round.augment.horizontal_flip);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(parse("phase1_rounds = -1\n").unwrap_err()), "phase1_rounds");
        assert_eq!(key_of(parse("foo = 1\n").unwrap_err()), "foo");
        assert_eq!(key_of(parse("eta = fast\n").unwrap_err()), "eta");
        assert_eq!(key_of(parse("seed = 1\nseed = 2\n").unwrap_err()), "seed");
        assert_eq!(key_of(parse("participation = 0.5\nparticipants = 3\n").unwrap_err()), "participants");
        assert_eq!(key_of(parse("participants = 11\n").unwrap_err()), "participants");
        assert_eq!(key_of(parse("labeled_total = 605\n").unwrap_err()), "labeled_total");
        assert_eq!(key_of(parse("threshold_breakpoints = 10\n").unwrap_err()), "threshold_breakpoints");
        assert_eq!(key_of(parse("local_epochs = 0\n").unwrap_err()), "local_epochs");
        assert_eq!(key_of(parse("dataset_format = raw\n").unwrap_err()), "train_shape");
        let missing = ExperimentConfig::parse_str("train_images = a\n", "x").unwrap_err();
        assert_eq!(key_of(missing), "train_labels");
    }

    #[test]
    fn ablations_from_config_alone() {
        let cfg = parse("no_threshold = true\nno_finetune = true\nno_pseudo = true\nmode = fedsem\n").unwrap();
        assert!(cfg.phase2.no_threshold && cfg.phase2.no_finetune && cfg.phase2.no_pseudo);
        assert_eq!(cfg.mode, Mode::FedSem);
        let cfg = parse("threshold_schedule = literal\nthreshold_breakpoints = 5, 20\nsplit = non_iid\n").unwrap();
        assert_eq!(cfg.phase2.schedule.mode, ScheduleMode::Literal);
        assert_eq!(cfg.phase2.schedule.breakpoints, (5, 20));
        assert_eq!(cfg.split.mode, SplitMode::NonIid);
    }

    #[test]
    fn comments_and_paths() {
        let cfg = parse("# a comment\n\noutput_dir = /tmp/x y\narchitecture = compact\n").unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x y"));
        assert_eq!(cfg.architecture, ArchitectureKind::Compact);
        assert_eq!(cfg.metrics_path(), PathBuf::from("/tmp/x y/exp.metrics.csv"));
    }
}
