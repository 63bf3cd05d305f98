//! Run configuration: a flat `key=value` text file merged with command-line
//! overrides. The canonical text form lists every key in a fixed order and
//! is embedded into each artifact.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::parse_kv;
use crate::error::{Error, Result};
use crate::models::{ModelKind, Task};
use crate::preprocess::{AggSpec, CaseParams, Mode};
use crate::synth::GenConfig;
use crate::train::{Optimizer, TrainConfig};

/// Every accepted key with its default and meaning.
pub const KEYS: [(&str, &str, &str); 25] = [
    (
        "seed",
        "1",
        "master seed for generation, splitting, initialization and shuffling",
    ),
    ("patients", "2000", "number of synthetic patients"),
    (
        "p_stay",
        "0.645",
        "synthetic probability of repeating the previous combination",
    ),
    (
        "p_meas",
        "0.13",
        "synthetic probability that a visit day has measurements",
    ),
    (
        "decision_noise",
        "0.3",
        "synthetic prescriber noise on the severity trend",
    ),
    ("mode", "with_prev", "with_prev | without_prev"),
    ("icd_capacity", "350", "number of retained 3-digit ICD codes"),
    ("meas_capacity", "124", "number of retained measurement channels"),
    (
        "min_med_len",
        "10",
        "patients need strictly more medication days than this",
    ),
    ("l_outer", "20", "maximal number of medication steps per case"),
    ("l_inner", "20", "maximal number of visit days per medication step"),
    (
        "agg",
        "max/masked_mean",
        "aggregation of codes/measurements within a step",
    ),
    ("split", "0.8/0.1/0.1", "train/validation/test patient ratios"),
    ("model", "rnn", "prev | lr | rnn | hrnn1 | hrnn2"),
    ("task", "dcc", "dc (drug classes) | dcc (drug combinations)"),
    ("hidden", "64", "LSTM cells per layer"),
    ("epochs", "20", "training epochs of the recurrent models"),
    (
        "logreg_epochs",
        "200",
        "epoch budget of the logistic-regression baseline",
    ),
    (
        "logreg_patience",
        "10",
        "the logistic regression stops after this many epochs without validation improvement",
    ),
    ("batch_size", "32", "cases per minibatch"),
    ("dropout", "0.5", "dropout rate before the output layer"),
    ("optimizer", "adam", "adam | sgd"),
    ("lr", "0.001", "learning rate"),
    ("clip", "none", "global gradient-norm clip, or none"),
    ("precision", "64", "floating-point width; only 64 is implemented"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub patients: usize,
    pub p_stay: f64,
    pub p_meas: f64,
    pub decision_noise: f64,
    pub mode: Mode,
    pub icd_capacity: usize,
    pub meas_capacity: usize,
    pub min_med_len: usize,
    pub l_outer: usize,
    pub l_inner: usize,
    pub agg: AggSpec,
    pub split: [f64; 3],
    pub model: ModelKind,
    pub task: Task,
    pub hidden: usize,
    pub epochs: usize,
    pub logreg_epochs: usize,
    pub logreg_patience: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub optimizer: String,
    pub lr: f64,
    pub clip: Option<f64>,
    pub precision: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            patients: 0,
            p_stay: 0.0,
            p_meas: 0.0,
            decision_noise: 0.0,
            mode: Mode::WithPrev,
            icd_capacity: 0,
            meas_capacity: 0,
            min_med_len: 0,
            l_outer: 0,
            l_inner: 0,
            agg: AggSpec::default(),
            split: [0.0; 3],
            model: ModelKind::Rnn,
            task: Task::Dcc,
            hidden: 0,
            epochs: 0,
            logreg_epochs: 0,
            logreg_patience: 0,
            batch_size: 0,
            dropout: 0.0,
            optimizer: String::new(),
            lr: 0.0,
            clip: None,
            precision: 0,
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("defaults parse");
        }
        cfg
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Applies one setting; unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "patients" => self.patients = num(key, v)?,
            "p_stay" => self.p_stay = num(key, v)?,
            "p_meas" => self.p_meas = num(key, v)?,
            "decision_noise" => self.decision_noise = num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "icd_capacity" => self.icd_capacity = num(key, v)?,
            "meas_capacity" => self.meas_capacity = num(key, v)?,
            "min_med_len" => self.min_med_len = num(key, v)?,
            "l_outer" => self.l_outer = num(key, v)?,
            "l_inner" => self.l_inner = num(key, v)?,
            "agg" => self.agg = v.parse()?,
            "split" => {
                let parts: Vec<f64> = v.split('/').map(|p| num(key, p)).collect::<Result<_>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("split {v:?} needs three ratios")))?;
            }
            "model" => self.model = v.parse()?,
            "task" => self.task = v.parse()?,
            "hidden" => self.hidden = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "logreg_epochs" => self.logreg_epochs = num(key, v)?,
            "logreg_patience" => self.logreg_patience = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "optimizer" => match v {
                "adam" | "sgd" => self.optimizer = v.to_string(),
                _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
            },
            "lr" => self.lr = num(key, v)?,
            "clip" => self.clip = if v == "none" { None } else { Some(num(key, v)?) },
            "precision" => self.precision = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Canonical text: every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k));
        }
        out
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "patients" => self.patients.to_string(),
            "p_stay" => self.p_stay.to_string(),
            "p_meas" => self.p_meas.to_string(),
            "decision_noise" => self.decision_noise.to_string(),
            "mode" => self.mode.to_string(),
            "icd_capacity" => self.icd_capacity.to_string(),
            "meas_capacity" => self.meas_capacity.to_string(),
            "min_med_len" => self.min_med_len.to_string(),
            "l_outer" => self.l_outer.to_string(),
            "l_inner" => self.l_inner.to_string(),
            "agg" => self.agg.to_string(),
            "split" => format!("{}/{}/{}", self.split[0], self.split[1], self.split[2]),
            "model" => self.model.as_str().to_string(),
            "task" => self.task.as_str().to_string(),
            "hidden" => self.hidden.to_string(),
            "epochs" => self.epochs.to_string(),
            "logreg_epochs" => self.logreg_epochs.to_string(),
            "logreg_patience" => self.logreg_patience.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dropout" => self.dropout.to_string(),
            "optimizer" => self.optimizer.clone(),
            "lr" => self.lr.to_string(),
            "clip" => self.clip.map_or_else(|| "none".to_string(), |c| c.to_string()),
            "precision" => self.precision.to_string(),
            _ => unreachable!("key list and getter agree"),
        }
    }

    /// Settings that shape a dataset; two artifacts built from different
    /// values of these are not compatible.
    pub fn lineage_text(&self) -> String {
        let mut out = String::new();
        for k in [
            "seed",
            "mode",
            "icd_capacity",
            "meas_capacity",
            "min_med_len",
            "l_outer",
            "l_inner",
            "agg",
            "split",
        ] {
            let _ = writeln!(out, "{k}={}", self.get(k));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.train_config().validate()?;
        self.train_config_for(ModelKind::Lr).validate()?;
        if self.l_outer == 0 || self.l_inner == 0 {
            return Err(Error::Config("l_outer and l_inner must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.icd_capacity == 0 {
            return Err(Error::Config("icd_capacity must be >= 1".into()));
        }
        if self.split.iter().any(|r| !(0.0..=1.0).contains(r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {:?} must sum to 1", self.split)));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            patients: self.patients,
            seed: self.seed,
            p_stay: self.p_stay,
            p_meas: self.p_meas,
            decision_noise: self.decision_noise,
            ..GenConfig::default()
        }
    }

    pub fn case_params(&self) -> CaseParams {
        CaseParams {
            l_outer: self.l_outer,
            l_inner: self.l_inner,
            agg: self.agg,
        }
    }

    /// Training settings for `kind`. The convex logistic regression is
    /// trained to convergence (validation-loss early stopping within
    /// `logreg_epochs`); recurrent models run exactly `epochs` epochs.
    pub fn train_config_for(&self, kind: ModelKind) -> TrainConfig {
        let mut tc = self.train_config();
        if kind == ModelKind::Lr {
            tc.epochs = self.logreg_epochs;
            tc.patience = Some(self.logreg_patience);
        }
        tc
    }

    pub fn train_config(&self) -> TrainConfig {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => Optimizer::Sgd { lr: self.lr },
            _ => Optimizer::adam(self.lr),
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            dropout: self.dropout,
            seed: self.seed,
            precision: self.precision,
            clip: self.clip,
            patience: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_documented_values() {
        let c = RunConfig::default();
        assert_eq!(
            (c.l_outer, c.l_inner, c.hidden, c.batch_size, c.epochs),
            (20, 20, 64, 32, 20)
        );
        assert_eq!(c.dropout, 0.5);
        assert_eq!(c.split, [0.8, 0.1, 0.1]);
        assert_eq!(c.mode, Mode::WithPrev);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("clip", "5").unwrap();
        c.set("model", "hrnn2").unwrap();
        c.set("lr", "0.0005").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_text("# comment\nepochs = 3\nmode=without_prev\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.mode, Mode::WithoutPrev);
        assert_eq!(c.hidden, 64);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "colour=blue\n",
            "epochs=three\n",
            "epochs=1\nepochs=2\n",
            "split=0.5/0.5\n",
            "optimizer=rmsprop\n",
        ] {
            let err = RunConfig::from_text(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let c = RunConfig::from_text("precision=32\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::from_text("patients=0\n").unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
