use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use iowa_fl_cli::{emit_metrics, parse_config, run};

/// Federated learning simulator with IOWA aggregation operators.
///
/// Values come from built-in defaults, then `--config`, then flags.
#[derive(Debug, Parser)]
#[command(name = "iowa-fl", version)]
struct Cli {
    /// Flat key=value file; keys are the flag names without dashes.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Scenario preset: ad, non-ad or high-ad.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, value_name = "N")]
    clients: Option<String>,
    #[arg(long, value_name = "N")]
    rounds: Option<String>,
    /// Local epochs per round.
    #[arg(long, value_name = "N")]
    epochs: Option<String>,
    #[arg(long, value_name = "N")]
    runs: Option<String>,
    /// Comma list of fedavg, wfedavg, al80, iowa-sq, iowa-dq.
    #[arg(long)]
    aggregator: Option<String>,
    /// Comma list of y_b values for iowa-sq and iowa-dq.
    #[arg(long, value_name = "F")]
    yb: Option<String>,
    #[arg(long = "a", value_name = "F")]
    a: Option<String>,
    #[arg(long = "b", value_name = "F")]
    b: Option<String>,
    /// Retained share for iowa-sq (ignored by iowa-dq).
    #[arg(long = "c", value_name = "F")]
    c: Option<String>,
    /// as-written or normalized.
    #[arg(long)]
    wfedavg_mode: Option<String>,
    /// shuffle or class-map.
    #[arg(long)]
    poison_mode: Option<String>,
    /// Overrides the scenario's fraction.
    #[arg(long, value_name = "F")]
    adversarial_fraction: Option<String>,
    /// synthetic or idx.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_name = "PATH")]
    idx_images: Option<String>,
    #[arg(long, value_name = "PATH")]
    idx_labels: Option<String>,
    #[arg(long, value_name = "N")]
    labels_per_client: Option<String>,
    #[arg(long, value_name = "N")]
    seed: Option<String>,
    /// Metrics file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    output: Option<String>,
    /// csv or json.
    #[arg(long)]
    format: Option<String>,
    /// Synthetic classes.
    #[arg(long, value_name = "N")]
    classes: Option<String>,
    /// Synthetic feature dimension.
    #[arg(long, value_name = "N")]
    dim: Option<String>,
    #[arg(long, value_name = "N")]
    samples_per_class: Option<String>,
    /// Synthetic noise std as a fraction of the centroid distance.
    #[arg(long, value_name = "F")]
    spread: Option<String>,
    #[arg(long, value_name = "F")]
    learning_rate: Option<String>,
    #[arg(long, value_name = "N")]
    batch_size: Option<String>,
    /// Comma list of hidden layer widths; empty for logistic regression.
    #[arg(long, value_name = "N,..")]
    hidden: Option<String>,
    #[arg(long, value_name = "F")]
    validation_fraction: Option<String>,
    #[arg(long, value_name = "F")]
    test_fraction: Option<String>,
    /// Train clients on a thread pool (true/false).
    #[arg(long, value_name = "BOOL")]
    parallel: Option<String>,
}

impl Cli {
    fn flag_layer(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("scenario", &self.scenario),
            ("clients", &self.clients),
            ("rounds", &self.rounds),
            ("epochs", &self.epochs),
            ("runs", &self.runs),
            ("aggregator", &self.aggregator),
            ("yb", &self.yb),
            ("a", &self.a),
            ("b", &self.b),
            ("c", &self.c),
            ("wfedavg-mode", &self.wfedavg_mode),
            ("poison-mode", &self.poison_mode),
            ("adversarial-fraction", &self.adversarial_fraction),
            ("dataset", &self.dataset),
            ("idx-images", &self.idx_images),
            ("idx-labels", &self.idx_labels),
            ("labels-per-client", &self.labels_per_client),
            ("seed", &self.seed),
            ("output", &self.output),
            ("format", &self.format),
            ("classes", &self.classes),
            ("dim", &self.dim),
            ("samples-per-class", &self.samples_per_class),
            ("spread", &self.spread),
            ("learning-rate", &self.learning_rate),
            ("batch-size", &self.batch_size),
            ("hidden", &self.hidden),
            ("validation-fraction", &self.validation_fraction),
            ("test-fraction", &self.test_fraction),
            ("parallel", &self.parallel),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    let settings = match parse_config(cli.config.as_deref(), &cli.flag_layer()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    for line in settings.echo().lines() {
        eprintln!("# {line}");
    }
    let result = run(&settings).and_then(|results| {
        emit_metrics(&results, settings.output.as_deref(), settings.format).map_err(anyhow::Error::from)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
