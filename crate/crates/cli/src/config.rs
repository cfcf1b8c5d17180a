//! Effective experiment settings: built-in defaults, overlaid by a flat
//! `key=value` file, overlaid by command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use iowa_fl::data::DEFAULT_SPREAD;
use iowa_fl::{
    Aggregator, FederationConfig, ModelSpec, PartitionPlan, PoisonMode, QuantifierParams, TrainConfig,
    WFedAvgMode,
};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Range { key: String, value: String, reason: String },
    #[error("{path}:{line}: expected `key=value`")]
    Syntax { path: String, line: usize },
    #[error("cannot read config file {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Ad,
    NonAd,
    HighAd,
}

impl Scenario {
    pub fn adversarial_fraction(self) -> f64 {
        match self {
            Scenario::Ad => 0.10,
            Scenario::NonAd => 0.0,
            Scenario::HighAd => 0.30,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ad => "ad",
            Scenario::NonAd => "non-ad",
            Scenario::HighAd => "high-ad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    FedAvg,
    WFedAvg,
    Al80,
    IowaSq,
    IowaDq,
}

impl OperatorKind {
    fn name(self) -> &'static str {
        match self {
            OperatorKind::FedAvg => "fedavg",
            OperatorKind::WFedAvg => "wfedavg",
            OperatorKind::Al80 => "al80",
            OperatorKind::IowaSq => "iowa-sq",
            OperatorKind::IowaDq => "iowa-dq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub scenario: Scenario,
    /// Explicit override of the scenario's fraction.
    pub adversarial_fraction: Option<f64>,
    pub clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub runs: usize,
    pub aggregators: Vec<OperatorKind>,
    pub y_b: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub wfedavg_mode: WFedAvgMode,
    pub poison_mode: PoisonMode,
    pub dataset: DatasetSource,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub labels_per_client: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub spread: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub parallel: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scenario: Scenario::Ad,
            adversarial_fraction: None,
            clients: 20,
            rounds: 10,
            epochs: 5,
            runs: 10,
            aggregators: vec![
                OperatorKind::FedAvg,
                OperatorKind::WFedAvg,
                OperatorKind::Al80,
                OperatorKind::IowaSq,
                OperatorKind::IowaDq,
            ],
            y_b: vec![0.4, 0.75],
            a: 0.0,
            b: 0.2,
            c: 0.8,
            wfedavg_mode: WFedAvgMode::Normalized,
            poison_mode: PoisonMode::Shuffle,
            dataset: DatasetSource::Synthetic,
            idx_images: None,
            idx_labels: None,
            labels_per_client: 2,
            seed: 0,
            output: None,
            format: Format::Csv,
            classes: 10,
            dim: 10,
            samples_per_class: 700,
            spread: DEFAULT_SPREAD,
            learning_rate: TrainConfig::default().learning_rate,
            batch_size: TrainConfig::default().batch_size,
            hidden: Vec::new(),
            validation_fraction: 1.0 / 7.0,
            test_fraction: 1.0 / 7.0,
            parallel: true,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "scenario",
    "adversarial-fraction",
    "clients",
    "rounds",
    "epochs",
    "runs",
    "aggregator",
    "yb",
    "a",
    "b",
    "c",
    "wfedavg-mode",
    "poison-mode",
    "dataset",
    "idx-images",
    "idx-labels",
    "labels-per-client",
    "seed",
    "output",
    "format",
    "classes",
    "dim",
    "samples-per-class",
    "spread",
    "learning-rate",
    "batch-size",
    "hidden",
    "validation-fraction",
    "test-fraction",
    "parallel",
];

fn range(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(range(key, value, "expected a positive integer")),
    }
}

fn real_in(key: &str, value: &str, lo: f64, hi: f64, hi_open: bool) -> Result<f64, ConfigError> {
    let x: f64 = value
        .trim()
        .parse()
        .map_err(|_| range(key, value, "expected a number"))?;
    let ok = x >= lo && if hi_open { x < hi } else { x <= hi };
    if !ok || !x.is_finite() {
        let close = if hi_open { ')' } else { ']' };
        return Err(range(key, value, format!("expected a value in [{lo}, {hi}{close}")));
    }
    Ok(x)
}

fn list<T>(value: &str, item: impl Fn(&str) -> Result<T, ConfigError>) -> Result<Vec<T>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(range(key, value, "expected true or false")),
    }
}

impl Settings {
    /// Sets one key. Keys are the long flag names without the leading dashes.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "scenario" => {
                self.scenario = match v {
                    "ad" => Scenario::Ad,
                    "non-ad" => Scenario::NonAd,
                    "high-ad" => Scenario::HighAd,
                    _ => return Err(range(key, value, "expected ad, non-ad or high-ad")),
                }
            }
            "adversarial-fraction" => self.adversarial_fraction = Some(real_in(key, v, 0.0, 1.0, true)?),
            "clients" => self.clients = positive(key, v)?,
            "rounds" => self.rounds = positive(key, v)?,
            "epochs" => self.epochs = positive(key, v)?,
            "runs" => self.runs = positive(key, v)?,
            "aggregator" => {
                let kinds = list(v, |s| {
                    Ok(match s {
                        "fedavg" => OperatorKind::FedAvg,
                        "wfedavg" => OperatorKind::WFedAvg,
                        "al80" => OperatorKind::Al80,
                        "iowa-sq" => OperatorKind::IowaSq,
                        "iowa-dq" => OperatorKind::IowaDq,
                        _ => {
                            return Err(range(key, s, "expected fedavg, wfedavg, al80, iowa-sq or iowa-dq"))
                        }
                    })
                })?;
                if kinds.is_empty() {
                    return Err(range(key, value, "no aggregator given"));
                }
                self.aggregators = kinds;
            }
            "yb" => {
                let ys = list(v, |s| real_in(key, s, 0.0, 1.0, false))?;
                if ys.is_empty() {
                    return Err(range(key, value, "no value given"));
                }
                self.y_b = ys;
            }
            "a" => self.a = real_in(key, v, 0.0, 1.0, false)?,
            "b" => self.b = real_in(key, v, 0.0, 1.0, false)?,
            "c" => self.c = real_in(key, v, 0.0, 1.0, false)?,
            "wfedavg-mode" => {
                self.wfedavg_mode = match v {
                    "as-written" => WFedAvgMode::AsWritten,
                    "normalized" => WFedAvgMode::Normalized,
                    _ => return Err(range(key, value, "expected as-written or normalized")),
                }
            }
            "poison-mode" => {
                self.poison_mode = match v {
                    "shuffle" => PoisonMode::Shuffle,
                    "class-map" => PoisonMode::ClassMap,
                    _ => return Err(range(key, value, "expected shuffle or class-map")),
                }
            }
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetSource::Synthetic,
                    "idx" => DatasetSource::Idx,
                    _ => return Err(range(key, value, "expected synthetic or idx")),
                }
            }
            "idx-images" => self.idx_images = Some(PathBuf::from(v)),
            "idx-labels" => self.idx_labels = Some(PathBuf::from(v)),
            "labels-per-client" => self.labels_per_client = positive(key, v)?,
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| range(key, value, "expected an unsigned 64-bit integer"))?
            }
            "output" => self.output = Some(PathBuf::from(v)),
            "format" => {
                self.format = match v {
                    "csv" => Format::Csv,
                    "json" => Format::Json,
                    _ => return Err(range(key, value, "expected csv or json")),
                }
            }
            "classes" => {
                self.classes = positive(key, v)?;
                if self.classes < 2 {
                    return Err(range(key, value, "need at least 2 classes"));
                }
            }
            "dim" => {
                self.dim = positive(key, v)?;
                if self.dim < 2 {
                    return Err(range(key, value, "need at least 2 features"));
                }
            }
            "samples-per-class" => self.samples_per_class = positive(key, v)?,
            "spread" => self.spread = real_in(key, v, 0.0, f64::MAX, false)?,
            "learning-rate" => {
                self.learning_rate = real_in(key, v, 0.0, f64::MAX, false)?;
                if self.learning_rate == 0.0 {
                    return Err(range(key, value, "learning rate must be positive"));
                }
            }
            "batch-size" => self.batch_size = positive(key, v)?,
            "hidden" => self.hidden = list(v, |s| positive(key, s))?,
            "validation-fraction" => self.validation_fraction = open_unit(key, v)?,
            "test-fraction" => self.test_fraction = open_unit(key, v)?,
            "parallel" => self.parallel = flag(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies one layer of settings. A scenario in a later layer replaces
    /// any fraction set by an earlier one; within a layer an explicit
    /// fraction wins over the scenario.
    pub fn apply_layer(&mut self, layer: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        if let Some(v) = layer.get("scenario") {
            self.apply("scenario", v)?;
            self.adversarial_fraction = None;
        }
        for (k, v) in layer.iter().filter(|(k, _)| k.as_str() != "scenario") {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// Cross-key checks that no single `apply` can make.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dataset == DatasetSource::Idx {
            for (key, path) in [("idx-images", &self.idx_images), ("idx-labels", &self.idx_labels)] {
                if path.is_none() {
                    return Err(range(key, "", "required when dataset=idx"));
                }
            }
        }
        if self.validation_fraction + self.test_fraction >= 1.0 {
            return Err(range(
                "test-fraction",
                &self.test_fraction.to_string(),
                "validation and test fractions must leave training data",
            ));
        }
        self.aggregators().map(|_| ())
    }

    pub fn effective_adversarial_fraction(&self) -> f64 {
        self.adversarial_fraction
            .unwrap_or_else(|| self.scenario.adversarial_fraction())
    }

    /// One operator per aggregator kind, and per `y_b` for the IOWA
    /// quantifier operators.
    pub fn aggregators(&self) -> Result<Vec<Aggregator>, ConfigError> {
        let mut out = Vec::new();
        for &kind in &self.aggregators {
            match kind {
                OperatorKind::FedAvg => out.push(Aggregator::FedAvg),
                OperatorKind::WFedAvg => out.push(Aggregator::WFedAvg(self.wfedavg_mode)),
                OperatorKind::Al80 => out.push(Aggregator::Al80),
                OperatorKind::IowaSq => {
                    for &y_b in &self.y_b {
                        let p = QuantifierParams::new(self.a, self.b, self.c, y_b)
                            .map_err(|e| range("c", &self.c.to_string(), e.to_string()))?;
                        out.push(Aggregator::IowaSq(p));
                    }
                }
                OperatorKind::IowaDq => {
                    for &y_b in &self.y_b {
                        let agg = Aggregator::IowaDq { a: self.a, b: self.b, y_b };
                        agg.validate()
                            .map_err(|e| range("b", &self.b.to_string(), e.to_string()))?;
                        out.push(agg);
                    }
                }
            }
        }
        Ok(out)
    }

    /// The federation config for one aggregator. `input_dim` and
    /// `num_classes` come from the loaded dataset.
    pub fn federation_config(&self, aggregator: Aggregator, input_dim: usize, num_classes: usize) -> FederationConfig {
        FederationConfig {
            n_clients: self.clients,
            rounds: self.rounds,
            adversarial_fraction: self.effective_adversarial_fraction(),
            aggregator,
            model_spec: ModelSpec::mlp(input_dim, num_classes, self.hidden.clone()),
            train_config: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.learning_rate,
                seed: self.seed,
            },
            partition_plan: PartitionPlan {
                n_clients: self.clients,
                labels_per_client: self.labels_per_client,
                seed: self.seed,
            },
            poison_mode: self.poison_mode,
            master_seed: self.seed,
            parallel: self.parallel,
        }
    }

    /// `key=value` lines that reproduce these settings as a config file.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.value_of(key) {
                out.push_str(&format!("{key}={v}\n"));
            }
        }
        out
    }

    fn value_of(&self, key: &str) -> Option<String> {
        let join = |xs: Vec<String>| xs.join(",");
        Some(match key {
            "scenario" => self.scenario.name().into(),
            "adversarial-fraction" => self.effective_adversarial_fraction().to_string(),
            "clients" => self.clients.to_string(),
            "rounds" => self.rounds.to_string(),
            "epochs" => self.epochs.to_string(),
            "runs" => self.runs.to_string(),
            "aggregator" => join(self.aggregators.iter().map(|k| k.name().to_string()).collect()),
            "yb" => join(self.y_b.iter().map(f64::to_string).collect()),
            "a" => self.a.to_string(),
            "b" => self.b.to_string(),
            "c" => self.c.to_string(),
            "wfedavg-mode" => match self.wfedavg_mode {
                WFedAvgMode::AsWritten => "as-written".into(),
                WFedAvgMode::Normalized => "normalized".into(),
            },
            "poison-mode" => match self.poison_mode {
                PoisonMode::Shuffle => "shuffle".into(),
                PoisonMode::ClassMap => "class-map".into(),
            },
            "dataset" => match self.dataset {
                DatasetSource::Synthetic => "synthetic".into(),
                DatasetSource::Idx => "idx".into(),
            },
            "idx-images" => self.idx_images.as_ref()?.display().to_string(),
            "idx-labels" => self.idx_labels.as_ref()?.display().to_string(),
            "labels-per-client" => self.labels_per_client.to_string(),
            "seed" => self.seed.to_string(),
            "output" => self.output.as_ref()?.display().to_string(),
            "format" => match self.format {
                Format::Csv => "csv".into(),
                Format::Json => "json".into(),
            },
            "classes" => self.classes.to_string(),
            "dim" => self.dim.to_string(),
            "samples-per-class" => self.samples_per_class.to_string(),
            "spread" => self.spread.to_string(),
            "learning-rate" => self.learning_rate.to_string(),
            "batch-size" => self.batch_size.to_string(),
            "hidden" => join(self.hidden.iter().map(usize::to_string).collect()),
            "validation-fraction" => self.validation_fraction.to_string(),
            "test-fraction" => self.test_fraction.to_string(),
            "parallel" => self.parallel.to_string(),
            _ => return None,
        })
    }
}

fn open_unit(key: &str, value: &str) -> Result<f64, ConfigError> {
    let x = real_in(key, value, 0.0, 1.0, true)?;
    if x == 0.0 {
        return Err(range(key, value, "expected a value in (0, 1)"));
    }
    Ok(x)
}

/// Parses a flat `key=value` file. Blank lines and lines starting with `#`
/// are skipped; keys may carry a leading `--`.
pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
            path: path.display().to_string(),
            line: i + 1,
        })?;
        let k = k.trim().trim_start_matches("--");
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl fmt::Display for Settings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.echo())
    }
}

/// Defaults, then the file layer (if any), then the flag layer.
pub fn parse_config(
    file: Option<&Path>,
    flags: &BTreeMap<String, String>,
) -> Result<Settings, ConfigError> {
    let mut settings = Settings::default();
    if let Some(path) = file {
        settings.apply_layer(&read_config_file(path)?)?;
    }
    for k in flags.keys() {
        if !KEYS.contains(&k.as_str()) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
    }
    settings.apply_layer(flags)?;
    settings.validate()?;
    Ok(settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn scenario_presets() {
        let s = parse_config(None, &flags(&[("scenario", "ad"), ("clients", "20")])).unwrap();
        assert_eq!(s.effective_adversarial_fraction(), 0.10);
        assert_eq!(s.clients, 20);
        let s = parse_config(None, &flags(&[("scenario", "high-ad"), ("clients", "50")])).unwrap();
        assert_eq!(s.effective_adversarial_fraction(), 0.30);
        let s = parse_config(None, &flags(&[("scenario", "non-ad")])).unwrap();
        assert_eq!(s.effective_adversarial_fraction(), 0.0);
    }

    #[test]
    fn training_regime_defaults() {
        let s = parse_config(None, &flags(&[("rounds", "10"), ("epochs", "5")])).unwrap();
        let cfg = s.federation_config(Aggregator::FedAvg, 10, 10);
        assert_eq!(cfg.rounds, 10);
        assert_eq!(cfg.epochs_per_round(), 5);
        assert_eq!(s.runs, 10);
        assert_eq!(s, Settings::default());
    }

    #[test]
    fn iowa_dq_with_yb() {
        let s = parse_config(None, &flags(&[("aggregator", "iowa-dq"), ("yb", "0.75")])).unwrap();
        assert_eq!(
            s.aggregators().unwrap(),
            vec![Aggregator::IowaDq { a: 0.0, b: 0.2, y_b: 0.75 }]
        );
    }

    #[test]
    fn default_aggregator_set() {
        let labels: Vec<String> = Settings::default().aggregators().unwrap().iter().map(|a| a.label()).collect();
        assert_eq!(
            labels,
            ["fedavg", "wfedavg", "al80", "iowa-sq-0.4", "iowa-sq-0.75", "iowa-dq-0.4", "iowa-dq-0.75"]
        );
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(
            parse_config(None, &flags(&[("roundz", "3")])),
            Err(ConfigError::UnknownKey("roundz".into()))
        );
        let err = parse_config(None, &flags(&[("rounds", "0")])).unwrap_err();
        assert!(matches!(err, ConfigError::Range { ref key, .. } if key == "rounds"));
        assert!(parse_config(None, &flags(&[("adversarial-fraction", "1.0")])).is_err());
        assert!(parse_config(None, &flags(&[("yb", "1.5")])).is_err());
        assert!(parse_config(None, &flags(&[("format", "xml")])).is_err());
    }

    #[test]
    fn presets_yield_valid_configs() {
        for scenario in ["ad", "non-ad", "high-ad"] {
            for clients in ["20", "50"] {
                let s = parse_config(None, &flags(&[("scenario", scenario), ("clients", clients)])).unwrap();
                for agg in s.aggregators().unwrap() {
                    s.federation_config(agg, s.dim, s.classes).validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn later_scenario_clears_earlier_fraction() {
        let mut s = Settings::default();
        s.apply_layer(&flags(&[("adversarial-fraction", "0.2")])).unwrap();
        assert_eq!(s.effective_adversarial_fraction(), 0.2);
        s.apply_layer(&flags(&[("scenario", "high-ad")])).unwrap();
        assert_eq!(s.effective_adversarial_fraction(), 0.3);
        s.apply_layer(&flags(&[("scenario", "ad"), ("adversarial-fraction", "0.25")])).unwrap();
        assert_eq!(s.effective_adversarial_fraction(), 0.25);
    }

    #[test]
    fn echo_round_trips() {
        let mut s = Settings::default();
        s.apply("hidden", "8,4").unwrap();
        s.apply("poison-mode", "class-map").unwrap();
        let layer: BTreeMap<String, String> = s
            .echo()
            .lines()
            .map(|l| {
                let (k, v) = l.split_once('=').unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        let mut back = Settings::default();
        back.apply_layer(&layer).unwrap();
        assert_eq!(back.effective_adversarial_fraction(), s.effective_adversarial_fraction());
        back.adversarial_fraction = s.adversarial_fraction;
        assert_eq!(back, s);
    }
}
