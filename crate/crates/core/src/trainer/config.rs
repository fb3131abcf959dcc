use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Full,
    /// binary16 activations and gradients with full precision master weights.
    Mixed,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Full => "full",
            Precision::Mixed => "mixed",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Precision::Full),
            "mixed" => Ok(Precision::Mixed),
            other => Err(format!("precision must be full or mixed, got {other:?}")),
        }
    }
}

/// How data parallel replicas are hosted. Both carry the same byte frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    Threads,
    /// One `gradbench worker` child process per replica, over stdin/stdout.
    Processes,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::Threads => "threads",
            Transport::Processes => "processes",
        })
    }
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "threads" => Ok(Transport::Threads),
            "processes" => Ok(Transport::Processes),
            other => Err(format!("transport must be threads or processes, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Scheduler {
    #[default]
    None,
    /// `lr0 * gamma^floor(epoch / step_size)`
    Step { step_size: usize, gamma: f64 },
}

impl Scheduler {
    pub const fn default_step() -> Self {
        Scheduler::Step {
            step_size: 10,
            gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub precision: Precision,
    pub scheduler: Scheduler,
    pub workers: usize,
    pub seed: u64,
    /// Initial dynamic loss scale (mixed precision).
    pub loss_scale: f64,
    /// Clean steps before the loss scale doubles.
    pub growth_interval: usize,
    /// How long the gradient reducer waits for every worker.
    pub sync_timeout: Duration,
    pub transport: Transport,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr0: 0.001,
            epochs: 25,
            precision: Precision::Full,
            scheduler: Scheduler::None,
            workers: 1,
            seed: 0,
            loss_scale: 1024.0,
            growth_interval: 200,
            sync_timeout: Duration::from_secs(30),
            transport: Transport::Threads,
        }
    }
}

/// Split `key = value` text into `(line, key, value)`; `#` starts a comment.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(usize, String, String)>, TrainError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected key=value", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Apply one config entry. Returns `Ok(false)` for keys this type does
    /// not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" | "lr" => self.lr0 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "precision" => self.precision = value.parse().map_err(TrainError::Config)?,
            "scheduler" => {
                self.scheduler = match value {
                    "none" => Scheduler::None,
                    "step" => match self.scheduler {
                        s @ Scheduler::Step { .. } => s,
                        Scheduler::None => Scheduler::default_step(),
                    },
                    other => {
                        return Err(TrainError::Config(format!(
                            "scheduler must be none or step, got {other:?}"
                        )))
                    }
                }
            }
            "step_size" | "gamma" => {
                let (mut step_size, mut gamma) = match self.scheduler {
                    Scheduler::Step { step_size, gamma } => (step_size, gamma),
                    Scheduler::None => (10, 0.1),
                };
                if key == "step_size" {
                    step_size = parse(key, value)?;
                } else {
                    gamma = parse(key, value)?;
                }
                self.scheduler = Scheduler::Step { step_size, gamma };
            }
            "workers" => self.workers = parse(key, value)?,
            "transport" => self.transport = value.parse().map_err(TrainError::Config)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_scale" => self.loss_scale = parse(key, value)?,
            "growth_interval" => self.growth_interval = parse(key, value)?,
            "sync_timeout_secs" => {
                self.sync_timeout = Duration::from_secs_f64(parse::<f64>(key, value)?.max(0.0))
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parse a complete config file; unknown keys are errors.
    pub fn from_kv_text(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (line, k, v) in parse_kv_lines(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(TrainError::Config(format!("line {line}: unknown key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = format!(
            "batch_size = {}\nlr0 = {}\nepochs = {}\nprecision = {}\n",
            self.batch_size, self.lr0, self.epochs, self.precision
        );
        match self.scheduler {
            Scheduler::None => out.push_str("scheduler = none\n"),
            Scheduler::Step { step_size, gamma } => out.push_str(&format!(
                "scheduler = step\nstep_size = {step_size}\ngamma = {gamma}\n"
            )),
        }
        out.push_str(&format!(
            "workers = {}\ntransport = {}\nseed = {}\nloss_scale = {}\ngrowth_interval = {}\nsync_timeout_secs = {}\n",
            self.workers,
            self.transport,
            self.seed,
            self.loss_scale,
            self.growth_interval,
            self.sync_timeout.as_secs_f64()
        ));
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail("lr0 must be positive");
        }
        if self.workers == 0 {
            return fail("workers must be at least 1");
        }
        if let Scheduler::Step { step_size, gamma } = self.scheduler {
            if step_size == 0 {
                return fail("step_size must be at least 1");
            }
            if !(gamma.is_finite() && gamma > 0.0) {
                return fail("gamma must be positive");
            }
        }
        if !(self.loss_scale.is_finite() && self.loss_scale > 0.0) {
            return fail("loss_scale must be positive");
        }
        if self.growth_interval == 0 {
            return fail("growth_interval must be at least 1");
        }
        Ok(())
    }
}
