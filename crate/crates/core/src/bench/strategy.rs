use std::fmt;
use std::str::FromStr;

use crate::dataset::{synthetic, LabeledSet};
use crate::imaging::{encode_pgm, parallel_preprocess, PgmDepth};
use crate::nn::{MicroResNet, MicroResNetConfig};
use crate::trainer::{parse_kv_lines, train_run, EpochStats, Mark, Precision, Scheduler, TrainConfig};

use super::{accuracy_from_logits, predict_set, BenchError, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    /// One worker, full precision, constant learning rate.
    Baseline,
    /// K workers, full precision.
    Parallel,
    /// K workers, mixed precision, step decay.
    ParallelMixedSched,
    /// As above on the deeper network.
    DeepParallelMixedSched,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::Parallel,
        Strategy::ParallelMixedSched,
        Strategy::DeepParallelMixedSched,
    ];

    /// File-name friendly identifier.
    pub fn key(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Parallel => "parallel",
            Strategy::ParallelMixedSched => "parallel_mixed_sched",
            Strategy::DeepParallelMixedSched => "deep_parallel_mixed_sched",
        }
    }

    pub fn network(self) -> &'static str {
        match self {
            Strategy::DeepParallelMixedSched => "micro-resnet-deep",
            _ => "micro-resnet",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Strategy::Baseline => "No accelerated strategy",
            Strategy::Parallel => "Data parallel",
            Strategy::ParallelMixedSched | Strategy::DeepParallelMixedSched => {
                "Data parallel + mixed precision + LR scheduler"
            }
        }
    }

    pub fn model_config(self) -> MicroResNetConfig {
        match self {
            Strategy::DeepParallelMixedSched => MicroResNetConfig::deep(),
            _ => MicroResNetConfig::default(),
        }
    }

    /// Training config for this strategy; only the strategy knobs differ
    /// from `base`. `base.workers` is the worker count of parallel rows.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let step = match base.scheduler {
            s @ Scheduler::Step { .. } => s,
            Scheduler::None => Scheduler::default_step(),
        };
        match self {
            Strategy::Baseline => {
                cfg.workers = 1;
                cfg.precision = Precision::Full;
                cfg.scheduler = Scheduler::None;
            }
            Strategy::Parallel => {
                cfg.precision = Precision::Full;
                cfg.scheduler = Scheduler::None;
            }
            Strategy::ParallelMixedSched | Strategy::DeepParallelMixedSched => {
                cfg.precision = Precision::Mixed;
                cfg.scheduler = step;
            }
        }
        cfg
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub train: TrainConfig,
    pub strategies: Vec<Strategy>,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Worker counts timed for parallel preprocessing.
    pub preprocess_workers: Vec<usize>,
    /// Side of the raw images fed to the preprocessing timing.
    pub preprocess_source_side: usize,
    pub threshold: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            train: TrainConfig {
                workers: 4,
                ..TrainConfig::default()
            },
            strategies: Strategy::ALL.to_vec(),
            train_samples: 64,
            test_samples: 64,
            preprocess_workers: vec![1, 4],
            preprocess_source_side: 256,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, BenchError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| BenchError::Config(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T, BenchError> {
    value
        .parse()
        .map_err(|_| BenchError::Config(format!("{key}: cannot parse {value:?}")))
}

impl BenchConfig {
    /// Trainer keys plus `strategies`, `train_samples`, `test_samples`,
    /// `preprocess_workers`, `preprocess_source_side` and `threshold`.
    pub fn from_kv_text(text: &str) -> Result<Self, BenchError> {
        let mut cfg = BenchConfig::default();
        for (line, key, value) in parse_kv_lines(text)? {
            if cfg.train.apply(&key, &value)? {
                continue;
            }
            match key.as_str() {
                "strategies" => cfg.strategies = list(&key, &value)?,
                "train_samples" => cfg.train_samples = number(&key, &value)?,
                "test_samples" => cfg.test_samples = number(&key, &value)?,
                "preprocess_workers" => cfg.preprocess_workers = list(&key, &value)?,
                "preprocess_source_side" => cfg.preprocess_source_side = number(&key, &value)?,
                "threshold" => cfg.threshold = number(&key, &value)?,
                _ => return Err(BenchError::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(BenchError::Config("no strategies selected".into()));
        }
        if self.train_samples < 2 || self.test_samples == 0 {
            return Err(BenchError::Config("need at least 2 training and 1 test sample".into()));
        }
        if self.preprocess_workers.contains(&0) {
            return Err(BenchError::Config("preprocess_workers entries must be at least 1".into()));
        }
        if self.preprocess_source_side == 0 {
            return Err(BenchError::Config("preprocess_source_side must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub workers: usize,
    pub total_seconds: f64,
    /// `None` when the strategy failed before evaluation.
    pub test_accuracy: Option<f64>,
    pub epochs: Vec<EpochStats>,
    pub error: Option<String>,
}

impl StrategyReport {
    pub fn total_minutes(&self) -> f64 {
        self.total_seconds / 60.0
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Train and evaluate every strategy in `config.strategies` on the same
/// data with the same seed. A failing strategy is reported, not raised.
pub fn run_strategy_matrix(train: &LabeledSet, test: &LabeledSet, config: &BenchConfig) -> Vec<StrategyReport> {
    config
        .strategies
        .iter()
        .map(|&strategy| {
            let tc = strategy.train_config(&config.train);
            let start = Mark::now();
            let mut epochs = Vec::new();
            let outcome = (|| -> Result<f64, BenchError> {
                let mut model = MicroResNet::new(strategy.model_config(), tc.seed)?;
                match train_run(&tc, &mut model, train) {
                    Ok(stats) => epochs = stats,
                    Err(aborted) => {
                        epochs = aborted.completed;
                        return Err(aborted.error.into());
                    }
                }
                let (logits, truth) = predict_set(&model, test, tc.batch_size)?;
                accuracy_from_logits(&logits, &truth, config.threshold)
            })();
            let total_seconds = start.elapsed_seconds();
            let (test_accuracy, error) = match outcome {
                Ok(a) => (Some(a), None),
                Err(e) => (None, Some(e.to_string())),
            };
            StrategyReport {
                strategy,
                workers: tc.workers,
                total_seconds,
                test_accuracy,
                epochs,
                error,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessTiming {
    pub workers: usize,
    pub images: usize,
    pub seconds: f64,
    pub failures: usize,
}

/// Wall time of [`parallel_preprocess`] over `inputs` for each worker count.
pub fn time_preprocessing(
    inputs: &[Vec<u8>],
    side: usize,
    workers: &[usize],
) -> Result<Vec<PreprocessTiming>, BenchError> {
    workers
        .iter()
        .map(|&w| {
            let start = Mark::now();
            let out = parallel_preprocess(inputs, side, w)?;
            Ok(PreprocessTiming {
                workers: w,
                images: inputs.len(),
                seconds: start.elapsed_seconds(),
                failures: out.errors.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub strategies: Vec<StrategyReport>,
    pub preprocessing: Vec<PreprocessTiming>,
}

/// The full benchmark on the synthetic toy task.
pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let side = MicroResNetConfig::default().input_side;
    let seed = config.train.seed;
    let train = synthetic::labeled_set(config.train_samples, side, seed)?;
    let test = synthetic::labeled_set(config.test_samples, side, synthetic::held_out_seed(seed))?;
    let raw: Vec<Vec<u8>> = synthetic::generate(
        config.train_samples + config.test_samples,
        config.preprocess_source_side,
        seed,
    )
    .iter()
    .map(|s| encode_pgm(&s.image, PgmDepth::Eight))
    .collect();
    let preprocessing = time_preprocessing(&raw, side, &config.preprocess_workers)?;
    Ok(BenchReport {
        strategies: run_strategy_matrix(&train, &test, config),
        preprocessing,
    })
}
