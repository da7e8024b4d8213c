//! Run configuration: documented defaults, a flat `key = value` file format
//! with flag overrides, validation, and the canonical manifest block that
//! lets any finished run be reproduced from its own output.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{DatasetKind, RegimeSize, SynthSpec};
use crate::error::{BpfedError, Result};
use crate::rng;
use crate::server::ExperimentConfig;
use crate::trainer::{Mode, TrainConfig};

/// Fully resolved run configuration.
///
/// Every field has a default, so an empty config file (or no file at all) is
/// a valid run. Files are flat `key = value` text: one pair per line, `#`
/// comments, unknown plain keys rejected. Keys under the `config.` namespace
/// are accepted with the prefix stripped, and keys under any *other* dotted
/// namespace (``run.``, ``theory.``, ...) are ignored, so a run manifest can
/// be fed back in as a config file unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Training mode (`bpfed` or one of the point-mass baselines).
    pub mode: Mode,
    pub dataset: DatasetKind,
    pub size: RegimeSize,
    /// Master seed; every random stream in the run derives from it.
    pub seed: u64,
    /// Total clients (N).
    pub clients: usize,
    /// Participants sampled per round (S).
    pub participants: usize,
    /// Communication rounds (T).
    pub rounds: usize,
    /// Local epochs per round (R).
    pub local_epochs: usize,
    /// Minibatch size (b).
    pub batch: usize,
    /// Monte Carlo draws per training step (M).
    pub mc_samples: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Weight on the KL term of the local objective.
    pub kl_weight: f64,
    /// Distinct labels assigned to each client by the skewed partition.
    pub labels_per_client: usize,
    /// Calibration histogram bins.
    pub bins: usize,
    /// Evaluate every this many rounds (and always after the last).
    pub eval_interval: usize,
    /// Hidden layer widths, e.g. `100` or `100,50`.
    pub hidden: Vec<usize>,
    /// Monte Carlo draws per prediction at evaluation time.
    pub m_test: usize,
    /// Output root; the run writes to `<out>/<run-name>/`.
    pub out: String,
    /// Directory holding IDX datasets (`<data_dir>/mnist/`, ...).
    pub data_dir: String,
    /// Explicit run name; when unset the name is derived from the config.
    pub run_name: Option<String>,
    /// After training, personalize a held-out novel client against the
    /// frozen shared factors and report zero-shot vs. personalized accuracy.
    pub novel_client: bool,
    /// Personalization rounds granted to the novel client.
    pub novel_rounds: usize,
    /// Synthetic dataset: feature dimension.
    pub synth_dims: usize,
    /// Synthetic dataset: number of classes.
    pub synth_classes: usize,
    /// Synthetic dataset: samples generated per class.
    pub synth_per_class: usize,
    /// Synthetic dataset: distance of class centers from the origin.
    pub synth_separation: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Bpfed,
            dataset: DatasetKind::Synth,
            size: RegimeSize::Small,
            seed: 0,
            clients: 10,
            participants: 10,
            rounds: 100,
            local_epochs: 10,
            batch: 50,
            mc_samples: 1,
            lr: 1e-3,
            kl_weight: 1.0,
            labels_per_client: 5,
            bins: 10,
            eval_interval: 10,
            hidden: vec![100],
            m_test: 10,
            out: "runs".into(),
            data_dir: "data".into(),
            run_name: None,
            novel_client: false,
            novel_rounds: 10,
            synth_dims: 20,
            synth_classes: 10,
            synth_per_class: 600,
            synth_separation: 2.5,
        }
    }
}

fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| {
        // Enum parsers already return config errors; drop their prefix so
        // the key context doesn't read "config error: ... config error: ...".
        let detail = e.to_string();
        let detail = detail.strip_prefix("config error: ").unwrap_or(&detail).to_owned();
        BpfedError::Config(format!("invalid value '{value}' for key '{key}': {detail}"))
    })
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_value::<usize>(key, part))
        .collect()
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BpfedError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines (config file or manifest) onto `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(BpfedError::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if let Some(stripped) = key.strip_prefix("config.") {
                self.apply(stripped, value)?;
            } else if key.contains('.') {
                // Manifest namespaces (run.*, theory.*, ...) describe a past
                // run's outputs, not inputs; skip them so manifests re-parse.
                continue;
            } else {
                self.apply(key, value)?;
            }
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = parse_value(key, value)?,
            "dataset" => self.dataset = parse_value(key, value)?,
            "size" => self.size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "clients" => self.clients = parse_value(key, value)?,
            "participants" => self.participants = parse_value(key, value)?,
            "rounds" => self.rounds = parse_value(key, value)?,
            "local_epochs" => self.local_epochs = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "mc_samples" => self.mc_samples = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "kl_weight" => self.kl_weight = parse_value(key, value)?,
            "labels_per_client" => self.labels_per_client = parse_value(key, value)?,
            "bins" => self.bins = parse_value(key, value)?,
            "eval_interval" => self.eval_interval = parse_value(key, value)?,
            "hidden" => self.hidden = parse_widths(key, value)?,
            "m_test" => self.m_test = parse_value(key, value)?,
            "out" => self.out = value.to_string(),
            "data_dir" => self.data_dir = value.to_string(),
            "run_name" => self.run_name = Some(value.to_string()),
            "novel_client" => self.novel_client = parse_value(key, value)?,
            "novel_rounds" => self.novel_rounds = parse_value(key, value)?,
            "synth_dims" => self.synth_dims = parse_value(key, value)?,
            "synth_classes" => self.synth_classes = parse_value(key, value)?,
            "synth_per_class" => self.synth_per_class = parse_value(key, value)?,
            "synth_separation" => self.synth_separation = parse_value(key, value)?,
            _ => {
                return Err(BpfedError::Config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    /// Number of classes in the configured dataset.
    pub fn class_count(&self) -> usize {
        match self.dataset {
            DatasetKind::Synth => self.synth_classes,
            _ => self.dataset.class_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(BpfedError::Config("clients must be at least 1".into()));
        }
        if self.participants == 0 || self.participants > self.clients {
            return Err(BpfedError::Config(format!(
                "participants must lie in 1..={}, got {}",
                self.clients, self.participants
            )));
        }
        if self.rounds == 0 {
            return Err(BpfedError::Config("rounds must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(BpfedError::Config("local_epochs must be at least 1".into()));
        }
        if self.bins == 0 {
            return Err(BpfedError::Config("bins must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(BpfedError::Config(
                "eval_interval must be at least 1".into(),
            ));
        }
        if self.m_test == 0 {
            return Err(BpfedError::Config("m_test must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(BpfedError::Config(
                "hidden widths must be nonzero and nonempty".into(),
            ));
        }
        let classes = self.class_count();
        if self.labels_per_client == 0 || self.labels_per_client > classes {
            return Err(BpfedError::Config(format!(
                "labels_per_client must lie in 1..={classes}, got {}",
                self.labels_per_client
            )));
        }
        if self.dataset == DatasetKind::Synth {
            if self.synth_dims == 0 {
                return Err(BpfedError::Config("synth_dims must be at least 1".into()));
            }
            if self.synth_classes < 2 {
                return Err(BpfedError::Config(
                    "synth_classes must be at least 2".into(),
                ));
            }
            if self.synth_per_class == 0 {
                return Err(BpfedError::Config(
                    "synth_per_class must be at least 1".into(),
                ));
            }
            if !(self.synth_separation.is_finite() && self.synth_separation > 0.0) {
                return Err(BpfedError::Config(format!(
                    "synth_separation must be positive, got {}",
                    self.synth_separation
                )));
            }
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            local_epochs: self.local_epochs,
            batch: self.batch,
            mc_samples: self.mc_samples,
            lr: self.lr,
            kl_weight: self.kl_weight,
            ..TrainConfig::default()
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            participants: self.participants,
            rounds: self.rounds,
            eval_interval: self.eval_interval,
            m_test: self.m_test,
            hidden: self.hidden.clone(),
            train: self.train_config(),
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            dims: self.synth_dims,
            classes: self.synth_classes,
            per_class: self.synth_per_class,
            separation: self.synth_separation,
        }
    }

    /// The `config.*` manifest block: every field, fixed order, values in
    /// their parseable textual form, so re-parsing the manifest yields this
    /// exact configuration.
    pub fn manifest_block(&self) -> String {
        let mut s = String::new();
        let mut put = |key: &str, value: &str| {
            let _ = writeln!(s, "config.{key} = {value}");
        };
        put("mode", &self.mode.to_string());
        put("dataset", &self.dataset.to_string());
        put("size", &self.size.to_string());
        put("seed", &self.seed.to_string());
        put("clients", &self.clients.to_string());
        put("participants", &self.participants.to_string());
        put("rounds", &self.rounds.to_string());
        put("local_epochs", &self.local_epochs.to_string());
        put("batch", &self.batch.to_string());
        put("mc_samples", &self.mc_samples.to_string());
        put("lr", &self.lr.to_string());
        put("kl_weight", &self.kl_weight.to_string());
        put("labels_per_client", &self.labels_per_client.to_string());
        put("bins", &self.bins.to_string());
        put("eval_interval", &self.eval_interval.to_string());
        let widths: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        put("hidden", &widths.join(","));
        put("m_test", &self.m_test.to_string());
        put("out", &self.out);
        put("data_dir", &self.data_dir);
        if let Some(name) = &self.run_name {
            put("run_name", name);
        }
        put("novel_client", &self.novel_client.to_string());
        put("novel_rounds", &self.novel_rounds.to_string());
        put("synth_dims", &self.synth_dims.to_string());
        put("synth_classes", &self.synth_classes.to_string());
        put("synth_per_class", &self.synth_per_class.to_string());
        put("synth_separation", &self.synth_separation.to_string());
        s
    }

    /// Directory name for this run's outputs: the explicit `run_name` when
    /// set, otherwise `mode-dataset-size-<hash>` where the hash fingerprints
    /// the resolved configuration. The output root is excluded — it decides
    /// where results land, not what they are, so rerunning the same
    /// experiment into another directory keeps its name.
    pub fn run_name(&self) -> String {
        if let Some(name) = &self.run_name {
            return name.clone();
        }
        let mut identity = self.clone();
        identity.out = String::new();
        let h = rng::fnv1a(identity.manifest_block().as_bytes());
        format!(
            "{}-{}-{}-{:08x}",
            self.mode,
            self.dataset,
            self.size,
            (h ^ (h >> 32)) as u32
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn empty_config_is_all_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mode, Mode::Bpfed);
        assert_eq!(cfg.dataset, DatasetKind::Synth);
        assert_eq!(cfg.size, RegimeSize::Small);
        assert_eq!(
            (cfg.clients, cfg.participants, cfg.rounds, cfg.local_epochs),
            (10, 10, 100, 10)
        );
        assert_eq!((cfg.batch, cfg.mc_samples), (50, 1));
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.labels_per_client, 5);
        assert_eq!((cfg.bins, cfg.eval_interval), (10, 10));
        cfg.validate().unwrap();
    }

    #[test]
    fn file_values_and_comments_parse() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# experiment\n\
             mode = fedrep\n\
             dataset=mnist\n\
             size = large\n\
             \n\
             hidden = 100,50\n\
             lr = 0.01\n\
             novel_client = true\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::FedRep);
        assert_eq!(cfg.dataset, DatasetKind::Mnist);
        assert_eq!(cfg.size, RegimeSize::Large);
        assert_eq!(cfg.hidden, vec![100, 50]);
        assert_eq!(cfg.lr, 0.01);
        assert!(cfg.novel_client);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_value_names_key_and_value() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("rounds = ten\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rounds") && msg.contains("ten"), "{msg}");
    }

    #[test]
    fn missing_equals_reports_line_number() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("mode = bpfed\nrounds 7\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn manifest_block_round_trips_identically() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("mode = fedrep\ndataset = mnist\nsize = large\n")
            .unwrap();
        cfg.lr = 0.007;
        cfg.hidden = vec![100, 50];
        cfg.seed = 42;
        let manifest = format!(
            "run.name = something\n{}theory.r_n = 0.5\n",
            cfg.manifest_block()
        );
        let mut reparsed = RunConfig::default();
        reparsed.apply_text(&manifest).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn explicit_run_name_survives_round_trip() {
        let cfg = RunConfig {
            run_name: Some("ablation-3".into()),
            ..RunConfig::default()
        };
        let mut reparsed = RunConfig::default();
        reparsed.apply_text(&cfg.manifest_block()).unwrap();
        assert_eq!(reparsed.run_name.as_deref(), Some("ablation-3"));
        assert_eq!(reparsed.run_name(), "ablation-3");
    }

    #[test]
    fn derived_run_name_tracks_config_changes() {
        let base = RunConfig::default();
        let name = base.run_name();
        assert!(name.starts_with("bpfed-synth-small-"), "{name}");
        assert_eq!(name.len(), "bpfed-synth-small-".len() + 8);
        assert_eq!(base.run_name(), name, "name must be deterministic");
        let mut other = base.clone();
        other.seed = 1;
        assert_ne!(other.run_name(), name, "seed must change the name");
    }

    #[test]
    fn flag_override_wins_over_file_value() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("lr = 0.001\n").unwrap();
        // The CLI applies flags after the file, exactly like this:
        cfg.apply("lr", "0.01").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn from_file_reads_and_missing_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "seed = 9\nrounds = 3").unwrap();
        drop(f);
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!((cfg.seed, cfg.rounds), (9, 3));

        let err = RunConfig::from_file(&dir.path().join("absent.cfg")).unwrap_err();
        assert!(matches!(err, BpfedError::Config(_)), "{err}");
    }

    #[test]
    fn validation_catches_out_of_range_fields() {
        let cfg = RunConfig {
            participants: 11,
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("1..=10"), "{err}");

        let cfg = RunConfig {
            labels_per_client: 11,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = RunConfig {
            labels_per_client: 11,
            synth_classes: 12,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();

        let cfg = RunConfig {
            hidden: vec![],
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = RunConfig {
            lr: -1.0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn conversions_carry_the_fields_over() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("mode = lgfedavg\nseed = 7\nrounds = 12\nmc_samples = 3\n")
            .unwrap();
        let exp = cfg.experiment_config();
        assert_eq!(exp.seed, 7);
        assert_eq!(exp.rounds, 12);
        assert_eq!(exp.train.mode, Mode::LgFedAvg);
        assert_eq!(exp.train.mc_samples, 3);
        assert_eq!(exp.hidden, vec![100]);
        let spec = cfg.synth_spec();
        assert_eq!((spec.dims, spec.classes, spec.per_class), (20, 10, 600));
        assert_eq!(spec.separation, 2.5);
    }
}
