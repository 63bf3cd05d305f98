//! The predictors: previous-prescription baseline, logistic regression,
//! the basic recurrent model over aggregated visits, and the two
//! hierarchical variants whose lower LSTMs read the days sandwiched between
//! medication steps.
//!
//! Training runs patient by patient. Every case of a patient whose window
//! starts at the first outer step shares one upper-LSTM run, and lower
//! encodings are computed once per outer step; the resulting gradients are
//! identical to running each case separately.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::parse_kv;
use crate::ehr::{DrugClass, Vocabularies};
use crate::error::{Error, Result};
use crate::layers::{dropout, split_concat_grad, Activation, Dense, DropoutMode, LstmCell, LstmTrace, StepInput};
use crate::numerics::{HasParams, Parameter};
use crate::preprocess::{CaseSequence, Mode, OuterStep, PatientSeq, Position};
use crate::train::{loss_dc, loss_dcc};

pub use checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Prev,
    Lr,
    Rnn,
    Hrnn1,
    Hrnn2,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Prev,
        ModelKind::Lr,
        ModelKind::Rnn,
        ModelKind::Hrnn1,
        ModelKind::Hrnn2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Prev => "prev",
            ModelKind::Lr => "lr",
            ModelKind::Rnn => "rnn",
            ModelKind::Hrnn1 => "hrnn1",
            ModelKind::Hrnn2 => "hrnn2",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, ModelKind::Hrnn1 | ModelKind::Hrnn2)
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Rnn | ModelKind::Hrnn1 | ModelKind::Hrnn2)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?} (prev|lr|rnn|hrnn1|hrnn2)")))
    }
}

/// Prediction target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Seven-bit drug-class set, one sigmoid per class.
    Dc,
    /// Index of the drug combination, softmax over the combination vocabulary.
    Dcc,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Dc => "dc",
            Task::Dcc => "dcc",
        }
    }

    pub fn activation(self) -> Activation {
        match self {
            Task::Dc => Activation::Sigmoid,
            Task::Dcc => Activation::Softmax,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dc" => Ok(Task::Dc),
            "dcc" => Ok(Task::Dcc),
            other => Err(Error::Config(format!("unknown task {other:?} (dc|dcc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub task: Task,
    pub mode: Mode,
    pub hidden: usize,
    pub icd_dim: usize,
    pub meas_dim: usize,
    /// 7 for the class task, the combination count otherwise.
    pub outputs: usize,
    pub l_outer: usize,
    pub l_inner: usize,
    pub dropout: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, task: Task, mode: Mode, vocabs: &Vocabularies) -> Result<Self> {
        let spec = Self {
            kind,
            task,
            mode,
            hidden: crate::layers::DEFAULT_HIDDEN,
            icd_dim: vocabs.icd.len(),
            meas_dim: vocabs.meas.len(),
            outputs: match task {
                Task::Dc => DrugClass::COUNT,
                Task::Dcc => vocabs.combos.len(),
            },
            l_outer: crate::preprocess::DEFAULT_L_OUTER,
            l_inner: crate::preprocess::DEFAULT_L_INNER,
            dropout: crate::layers::DEFAULT_DROPOUT,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::Prev && self.mode != Mode::WithPrev {
            return Err(Error::Config("the prev baseline needs mode=with_prev".into()));
        }
        if self.hidden == 0 || self.l_outer == 0 || self.l_inner == 0 {
            return Err(Error::Config("hidden, l_outer and l_inner must be >= 1".into()));
        }
        if self.outputs == 0 {
            return Err(Error::Config("model has no output classes".into()));
        }
        if self.task == Task::Dc && self.outputs != DrugClass::COUNT {
            return Err(Error::Config(format!(
                "class task needs 7 outputs, got {}",
                self.outputs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn prev_width(&self) -> usize {
        self.mode.prev_width()
    }

    /// Input width of the logistic regression (and of the basic RNN's steps).
    pub fn flat_width(&self) -> usize {
        self.icd_dim + self.meas_dim + self.prev_width()
    }

    /// Input width of the upper (outer) LSTM.
    pub fn upper_input_width(&self) -> usize {
        match self.kind {
            ModelKind::Prev | ModelKind::Lr | ModelKind::Rnn => self.flat_width(),
            ModelKind::Hrnn1 => self.hidden + self.prev_width(),
            ModelKind::Hrnn2 => 2 * self.hidden + self.prev_width(),
        }
    }

    /// Canonical `key=value` block, one key per line in fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "kind={}\ntask={}\nmode={}\nhidden={}\nicd_dim={}\nmeas_dim={}\noutputs={}\nl_outer={}\nl_inner={}\ndropout={}\n",
            self.kind,
            self.task,
            self.mode,
            self.hidden,
            self.icd_dim,
            self.meas_dim,
            self.outputs,
            self.l_outer,
            self.l_inner,
            self.dropout
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("model spec lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad integer for {k}")))
        };
        if kv.len() != 10 {
            return Err(Error::Checkpoint(format!(
                "model spec has {} keys, expected 10",
                kv.len()
            )));
        }
        let spec = Self {
            kind: get("kind")?.parse()?,
            task: get("task")?.parse()?,
            mode: get("mode")?.parse()?,
            hidden: num("hidden")?,
            icd_dim: num("icd_dim")?,
            meas_dim: num("meas_dim")?,
            outputs: num("outputs")?,
            l_outer: num("l_outer")?,
            l_inner: num("l_inner")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad dropout".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that the spec fits a set of vocabularies.
    pub fn check_vocabs(&self, vocabs: &Vocabularies) -> Result<()> {
        let outputs = match self.task {
            Task::Dc => DrugClass::COUNT,
            Task::Dcc => vocabs.combos.len(),
        };
        if self.icd_dim != vocabs.icd.len() || self.meas_dim != vocabs.meas.len() || self.outputs != outputs {
            return Err(Error::Data(format!(
                "model expects {}/{}/{} icd/meas/outputs, vocabularies give {}/{}/{}",
                self.icd_dim,
                self.meas_dim,
                self.outputs,
                vocabs.icd.len(),
                vocabs.meas.len(),
                outputs
            )));
        }
        Ok(())
    }
}

/// Output for one case.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Class probabilities (task-dependent activation).
    Probs(Vec<f64>),
    /// The previous-prescription baseline has nothing to repeat.
    Abstain,
}

impl Prediction {
    pub fn probs(&self) -> Option<&[f64]> {
        match self {
            Prediction::Probs(p) => Some(p),
            Prediction::Abstain => None,
        }
    }

    /// Arg-max class, `None` when abstaining.
    pub fn top(&self) -> Option<usize> {
        self.probs().map(argmax)
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Seed of the dropout masks of one patient pass. The mask of each case is
/// drawn from a stream keyed by the case's step so that it does not depend
/// on which other cases share the pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPlan {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutPlan {
    fn rng(&self, step: usize) -> ChaCha8Rng {
        let key = (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ChaCha8Rng::seed_from_u64(self.seed ^ key)
    }
}

/// Loss totals of a gradient pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub cases: usize,
    /// Class-task cases whose combination is not in the vocabulary.
    pub skipped: usize,
}

impl LossStats {
    pub fn add(&mut self, other: LossStats) {
        self.loss_sum += other.loss_sum;
        self.cases += other.cases;
        self.skipped += other.skipped;
    }
}

/// Lower-level encodings of one outer step.
struct StepEncoding {
    traces: Vec<LstmTrace>,
    /// Input of the upper LSTM at this step.
    input: Vec<f64>,
}

struct UpperRun {
    /// First outer step of the run.
    start: usize,
    trace: LstmTrace,
}

struct CaseOut {
    step: usize,
    run: usize,
    /// Dropout-applied features fed to the head.
    features: Vec<f64>,
    mask: Vec<f64>,
    probs: Vec<f64>,
}

struct PatientPass {
    /// First outer step with an encoding.
    lo: usize,
    encodings: Vec<StepEncoding>,
    runs: Vec<UpperRun>,
    outs: Vec<CaseOut>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    lower: Vec<LstmCell>,
    upper: Option<LstmCell>,
    head: Option<Dense>,
}

impl Model {
    /// Randomly initialized model.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(spec, Some(&mut rng)))
    }

    /// All-zero weights (forget-gate biases still 1).
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::build(spec, None))
    }

    fn build(spec: ModelSpec, mut rng: Option<&mut ChaCha8Rng>) -> Self {
        let h = spec.hidden;
        let cell = |name: &str, input: usize, rng: &mut Option<&mut ChaCha8Rng>| match rng {
            Some(r) => LstmCell::new(name, input, h, *r),
            None => LstmCell::zeros(name, input, h),
        };
        let lower = match spec.kind {
            ModelKind::Hrnn1 => vec![cell("lower", spec.icd_dim + spec.meas_dim, &mut rng)],
            ModelKind::Hrnn2 => vec![
                cell("lower_icd", spec.icd_dim, &mut rng),
                cell("lower_meas", spec.meas_dim, &mut rng),
            ],
            _ => Vec::new(),
        };
        let upper = spec
            .kind
            .is_recurrent()
            .then(|| cell("upper", spec.upper_input_width(), &mut rng));
        let head_in = match spec.kind {
            ModelKind::Prev => 0,
            ModelKind::Lr => spec.flat_width(),
            _ => h,
        };
        let head = (spec.kind != ModelKind::Prev).then(|| match rng.as_deref_mut() {
            Some(r) => Dense::new("head", head_in, spec.outputs, r),
            None => Dense::zeros("head", head_in, spec.outputs),
        });
        Self {
            spec,
            lower,
            upper,
            head,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_trainable(&self) -> bool {
        self.spec.kind != ModelKind::Prev
    }

    fn prev_bits(&self, step: &OuterStep) -> Vec<f64> {
        match self.spec.mode {
            Mode::WithPrev => step.prev_drugs.to_vec().to_vec(),
            Mode::WithoutPrev => Vec::new(),
        }
    }

    fn flat_features(&self, step: &OuterStep) -> Result<Vec<f64>> {
        let v = &step.aggregated;
        if v.icd.len() != self.spec.icd_dim || v.meas.len() != self.spec.meas_dim {
            return Err(Error::Shape {
                op: "visit features",
                left: (self.spec.icd_dim, self.spec.meas_dim),
                right: (v.icd.len(), v.meas.len()),
            });
        }
        let mut x = Vec::with_capacity(self.spec.flat_width());
        x.extend_from_slice(&v.icd);
        x.extend_from_slice(&v.meas);
        x.extend(self.prev_bits(step));
        Ok(x)
    }

    fn encode_step(&self, step: &OuterStep, pad_inner: bool) -> Result<StepEncoding> {
        if !self.spec.kind.is_hierarchical() {
            return Ok(StepEncoding {
                traces: Vec::new(),
                input: self.flat_features(step)?,
            });
        }
        let pad = if pad_inner {
            self.spec.l_inner.saturating_sub(step.inner_steps.len())
        } else {
            0
        };
        let inner = &step.inner_steps;
        fn padded(pad: usize, segs: Vec<StepInput<'_>>) -> Vec<StepInput<'_>> {
            let mut v: Vec<StepInput<'_>> = vec![None; pad];
            v.extend(segs);
            v
        }
        let traces = match self.spec.kind {
            ModelKind::Hrnn1 => {
                let xs = padded(pad, inner.iter().map(|v| Some(vec![&v.icd[..], &v.meas[..]])).collect());
                vec![self.lower[0].forward(&xs)?]
            }
            _ => {
                let icd = padded(pad, inner.iter().map(|v| Some(vec![&v.icd[..]])).collect());
                let meas = padded(pad, inner.iter().map(|v| Some(vec![&v.meas[..]])).collect());
                vec![self.lower[0].forward(&icd)?, self.lower[1].forward(&meas)?]
            }
        };
        let mut input = Vec::with_capacity(self.spec.upper_input_width());
        for t in &traces {
            input.extend(t.final_h());
        }
        input.extend(self.prev_bits(step));
        Ok(StepEncoding { traces, input })
    }

    fn run_upper(&self, encodings: &[StepEncoding], pad: usize) -> Result<LstmTrace> {
        let upper = self.upper.as_ref().expect("recurrent model has an upper cell");
        let mut steps: Vec<StepInput<'_>> = vec![None; pad];
        steps.extend(encodings.iter().map(|e| Some(vec![e.input.as_slice()])));
        upper.forward(&steps)
    }

    fn head_out(&self, features: Vec<f64>, step: usize, dropout_plan: Option<DropoutPlan>) -> Result<CaseOut> {
        let head = self.head.as_ref().expect("trainable model has a head");
        let (features, mask) = match dropout_plan {
            Some(plan) if self.spec.kind != ModelKind::Lr => {
                dropout(&features, plan.rate, DropoutMode::Train, &mut plan.rng(step))?
            }
            _ => {
                let n = features.len();
                (features, vec![1.0; n])
            }
        };
        let probs = self.spec.task.activation().apply(&head.forward(&[&features])?);
        Ok(CaseOut {
            step,
            run: usize::MAX,
            features,
            mask,
            probs,
        })
    }

    /// Forward pass over selected cases of one patient, sharing work
    /// between cases whose windows start at the first outer step.
    fn pass(&self, pat: &PatientSeq, cases: &[usize], plan: Option<DropoutPlan>) -> Result<PatientPass> {
        let l = self.spec.l_outer;
        let steps: Vec<usize> = cases.iter().map(|&i| pat.cases[i].step).collect();
        if self.spec.kind == ModelKind::Lr {
            let outs = steps
                .iter()
                .map(|&s| self.head_out(self.flat_features(&pat.steps[s])?, s, plan))
                .collect::<Result<Vec<_>>>()?;
            return Ok(PatientPass {
                lo: 0,
                encodings: Vec::new(),
                runs: Vec::new(),
                outs,
            });
        }
        let Some(&hi) = steps.iter().max() else {
            return Ok(PatientPass {
                lo: 0,
                encodings: Vec::new(),
                runs: Vec::new(),
                outs: Vec::new(),
            });
        };
        let lo = steps.iter().map(|&s| PatientSeq::window_start(s, l)).min().unwrap_or(0);
        let encodings = pat.steps[lo..=hi]
            .iter()
            .map(|s| self.encode_step(s, false))
            .collect::<Result<Vec<_>>>()?;

        let mut runs = Vec::new();
        let mut outs = Vec::with_capacity(steps.len());
        let shared_hi = steps.iter().copied().filter(|&s| s < l).max();
        if let Some(shared_hi) = shared_hi {
            let trace = self.run_upper(&encodings[..=shared_hi - lo], 0)?;
            for &s in steps.iter().filter(|&&s| s < l) {
                let mut out = self.head_out(trace.steps[s].h.clone(), s, plan)?;
                out.run = 0;
                outs.push(out);
            }
            runs.push(UpperRun { start: 0, trace });
        }
        for &s in steps.iter().filter(|&&s| s >= l) {
            let start = PatientSeq::window_start(s, l);
            let trace = self.run_upper(&encodings[start - lo..=s - lo], 0)?;
            let mut out = self.head_out(trace.final_h(), s, plan)?;
            out.run = runs.len();
            outs.push(out);
            runs.push(UpperRun { start, trace });
        }
        Ok(PatientPass {
            lo,
            encodings,
            runs,
            outs,
        })
    }

    fn prev_prediction(
        &self,
        step: &OuterStep,
        position: Position,
        vocabs_combos: Option<&crate::ehr::DrugComboVocab>,
    ) -> Prediction {
        match self.spec.task {
            Task::Dc => Prediction::Probs(step.prev_drugs.to_vec().to_vec()),
            Task::Dcc => {
                if position == Position::Head || step.prev_drugs.is_empty() {
                    return Prediction::Abstain;
                }
                match vocabs_combos.and_then(|c| c.encode(step.prev_drugs)) {
                    Some(idx) if idx < self.spec.outputs => {
                        let mut p = vec![0.0; self.spec.outputs];
                        p[idx] = 1.0;
                        Prediction::Probs(p)
                    }
                    _ => Prediction::Abstain,
                }
            }
        }
    }

    /// Infer-mode predictions for the given cases of one patient, in order.
    /// `combos` is needed only by the previous-prescription baseline on the
    /// combination task.
    pub fn predict_patient(
        &self,
        pat: &PatientSeq,
        cases: &[usize],
        combos: Option<&crate::ehr::DrugComboVocab>,
    ) -> Result<Vec<Prediction>> {
        if self.spec.kind == ModelKind::Prev {
            return Ok(cases
                .iter()
                .map(|&i| {
                    let m = pat.cases[i];
                    self.prev_prediction(&pat.steps[m.step], m.position, combos)
                })
                .collect());
        }
        let pass = self.pass(pat, cases, None)?;
        let mut by_step: Vec<(usize, Vec<f64>)> = pass.outs.into_iter().map(|o| (o.step, o.probs)).collect();
        by_step.sort_by_key(|(s, _)| *s);
        cases
            .iter()
            .map(|&i| {
                let s = pat.cases[i].step;
                let k = by_step
                    .binary_search_by_key(&s, |(st, _)| *st)
                    .map_err(|_| Error::Data("case missing from pass".into()))?;
                Ok(Prediction::Probs(by_step[k].1.clone()))
            })
            .collect()
    }

    /// Infer-mode prediction for one standalone case. With `padded`, the
    /// outer sequence is left-padded to `l_outer` and inner sequences to
    /// `l_inner` with masked steps.
    pub fn predict(
        &self,
        case: &CaseSequence<'_>,
        padded: bool,
        combos: Option<&crate::ehr::DrugComboVocab>,
    ) -> Result<Prediction> {
        if self.spec.kind == ModelKind::Prev {
            return Ok(self.prev_prediction(case.last(), case.position, combos));
        }
        Ok(Prediction::Probs(self.case_forward(case, padded, None)?.probs))
    }

    fn case_forward(&self, case: &CaseSequence<'_>, padded: bool, plan: Option<DropoutPlan>) -> Result<CaseOut> {
        if self.spec.kind == ModelKind::Lr {
            return self.head_out(self.flat_features(case.last())?, case.step, plan);
        }
        let encodings = case
            .outer_steps
            .iter()
            .map(|s| self.encode_step(s, padded))
            .collect::<Result<Vec<_>>>()?;
        let pad = if padded {
            self.spec.l_outer.saturating_sub(encodings.len())
        } else {
            0
        };
        let trace = self.run_upper(&encodings, pad)?;
        self.head_out(trace.final_h(), case.step, plan)
    }

    /// Loss of one case computed on its own (no sharing). `None` when the
    /// combination label is unknown.
    pub fn case_loss(&self, case: &CaseSequence<'_>, plan: Option<DropoutPlan>) -> Result<Option<f64>> {
        if !self.is_trainable() {
            return Err(Error::Config("the prev baseline has no loss".into()));
        }
        let out = self.case_forward(case, false, plan)?;
        Ok(self.loss_of(&out.probs, pat_label(case)).map(|(l, _)| l))
    }

    fn loss_of(&self, probs: &[f64], label: (crate::ehr::DrugSet, Option<usize>)) -> Option<(f64, Vec<f64>)> {
        match self.spec.task {
            Task::Dc => {
                let y = label.0.to_vec();
                let loss = loss_dc(probs, &y);
                let d = probs.iter().zip(y).map(|(p, y)| p - y).collect();
                Some((loss, d))
            }
            Task::Dcc => {
                let idx = label.1.filter(|&i| i < probs.len())?;
                let loss = loss_dcc(probs, idx);
                let mut d = probs.to_vec();
                d[idx] -= 1.0;
                Some((loss, d))
            }
        }
    }

    /// Adds `scale ×` the gradient of the summed loss over the given cases
    /// of one patient to the parameter gradients.
    pub fn accumulate_patient(
        &mut self,
        pat: &PatientSeq,
        cases: &[usize],
        scale: f64,
        plan: Option<DropoutPlan>,
    ) -> Result<LossStats> {
        if !self.is_trainable() {
            return Err(Error::Config("the prev baseline is not trainable".into()));
        }
        let pass = self.pass(pat, cases, plan)?;
        let mut stats = LossStats::default();
        let h = self.spec.hidden;
        let mut dh_runs: Vec<Vec<Vec<f64>>> = pass.runs.iter().map(|r| vec![Vec::new(); r.trace.len()]).collect();
        for out in &pass.outs {
            let meta = pat
                .cases
                .iter()
                .find(|m| m.step == out.step)
                .expect("case in pass belongs to patient");
            let Some((loss, mut dlogits)) = self.loss_of(&out.probs, (meta.label_dc, meta.label_dcc)) else {
                stats.skipped += 1;
                continue;
            };
            stats.loss_sum += loss;
            stats.cases += 1;
            dlogits.iter_mut().for_each(|d| *d *= scale);
            let want_dx = self.spec.kind != ModelKind::Lr;
            let head = self.head.as_mut().expect("trainable model has a head");
            let dfeat = head.backward(&[&out.features], &dlogits, want_dx);
            if !want_dx {
                continue;
            }
            let run = &pass.runs[out.run];
            let t = out.step - run.start;
            let slot = &mut dh_runs[out.run][t];
            if slot.is_empty() {
                *slot = vec![0.0; h];
            }
            for ((s, d), m) in slot.iter_mut().zip(&dfeat).zip(&out.mask) {
                *s += d * m;
            }
        }
        if self.spec.kind == ModelKind::Lr {
            return Ok(stats);
        }
        let hier = self.spec.kind.is_hierarchical();
        let mut du: Vec<Vec<f64>> = vec![Vec::new(); pass.encodings.len()];
        let upper = self.upper.as_mut().expect("recurrent model has an upper cell");
        for (run, dh) in pass.runs.iter().zip(&dh_runs) {
            let dx = upper.backward(&run.trace, dh, hier)?;
            if !hier {
                continue;
            }
            for (j, g) in dx.into_iter().enumerate() {
                let k = run.start + j - pass.lo;
                if du[k].is_empty() {
                    du[k] = g;
                } else {
                    du[k].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
            }
        }
        if hier {
            let branches = self.lower.len();
            let mut lens = vec![h; branches];
            lens.push(self.spec.prev_width());
            for (enc, g) in pass.encodings.iter().zip(&du) {
                if g.is_empty() {
                    continue;
                }
                let parts = split_concat_grad(g, &lens)?;
                for (b, cell) in self.lower.iter_mut().enumerate() {
                    let trace = &enc.traces[b];
                    let mut dh_out = vec![Vec::new(); trace.len()];
                    if let Some(last) = dh_out.last_mut() {
                        *last = parts[b].clone();
                    }
                    cell.backward(trace, &dh_out, false)?;
                }
            }
        }
        Ok(stats)
    }

    /// Log-probability of the realized combination at every outer step of
    /// the first `l_outer` steps, each conditioned on the visits up to that
    /// step, read off a single shared run.
    pub fn stepwise_log_probs(&self, pat: &PatientSeq) -> Result<Vec<f64>> {
        if self.spec.task != Task::Dcc || !self.is_trainable() {
            return Err(Error::Config(
                "stepwise log-probabilities need a trainable combination model".into(),
            ));
        }
        let cases: Vec<usize> = (0..pat.cases.len())
            .filter(|&i| pat.cases[i].step < self.spec.l_outer && pat.cases[i].label_dcc.is_some())
            .collect();
        let pass = self.pass(pat, &cases, None)?;
        Ok(pass
            .outs
            .iter()
            .map(|o| {
                let label = pat.cases.iter().find(|m| m.step == o.step).and_then(|m| m.label_dcc);
                o.probs[label.expect("filtered to known labels")].ln()
            })
            .collect())
    }

    /// Named tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Parameter> {
        self.params()
    }
}

fn pat_label(case: &CaseSequence<'_>) -> (crate::ehr::DrugSet, Option<usize>) {
    (case.label_dc, case.label_dcc)
}

impl HasParams for Model {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for c in &self.lower {
            out.extend(c.params());
        }
        if let Some(u) = &self.upper {
            out.extend(u.params());
        }
        if let Some(h) = &self.head {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for c in &mut self.lower {
            out.extend(c.params_mut());
        }
        if let Some(u) = &mut self.upper {
            out.extend(u.params_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend(h.params_mut());
        }
        out
    }
}
