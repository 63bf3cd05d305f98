//! Neural building blocks: LSTM cell with masking, inverted dropout, dense
//! output heads and concatenation merge, each with an explicit backward
//! pass.
//!
//! LSTM parameters are packed by gate in the order `[i | f | o | g]`:
//! `w_input` is `input × 4H`, `w_recurrent` is `H × 4H`, `bias` is `1 × 4H`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sigmoid, softmax, HasParams, Parameter};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// One step of input to a recurrent layer, given as concatenated segments.
/// `None` marks a padded (masked) position.
pub type StepInput<'a> = Option<Vec<&'a [f64]>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    input_size: usize,
    hidden: usize,
    pub w_input: Parameter,
    pub w_recurrent: Parameter,
    pub bias: Parameter,
}

/// Saved activations of one LSTM step.
#[derive(Debug, Clone)]
pub struct LstmStep {
    masked: bool,
    /// Nonzero input entries.
    x: Vec<(u32, f64)>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i | f | o | g]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmStep {
    pub fn is_masked(&self) -> bool {
        self.masked
    }
}

#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub steps: Vec<LstmStep>,
    hidden: usize,
}

impl LstmTrace {
    /// Final hidden state; the zero initial state when there are no steps.
    pub fn final_h(&self) -> Vec<f64> {
        self.steps
            .last()
            .map(|s| s.h.clone())
            .unwrap_or_else(|| vec![0.0; self.hidden])
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl LstmCell {
    /// Zero weights; the forget-gate bias is set to 1.
    pub fn zeros(prefix: &str, input_size: usize, hidden: usize) -> Self {
        let mut cell = Self {
            input_size,
            hidden,
            w_input: Parameter::zeros(format!("{prefix}.w_input"), input_size, 4 * hidden),
            w_recurrent: Parameter::zeros(format!("{prefix}.w_recurrent"), hidden, 4 * hidden),
            bias: Parameter::zeros(format!("{prefix}.bias"), 1, 4 * hidden),
        };
        cell.bias.value.data_mut()[hidden..2 * hidden].fill(1.0);
        cell
    }

    /// Uniform initialization with `fan_in = input + hidden`, forget bias 1.
    pub fn new<R: Rng + ?Sized>(prefix: &str, input_size: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = input_size + hidden;
        let mut cell = Self {
            input_size,
            hidden,
            w_input: Parameter::uniform(format!("{prefix}.w_input"), input_size, 4 * hidden, fan_in, rng),
            w_recurrent: Parameter::uniform(format!("{prefix}.w_recurrent"), hidden, 4 * hidden, fan_in, rng),
            bias: Parameter::zeros(format!("{prefix}.bias"), 1, 4 * hidden),
        };
        cell.bias.value.data_mut()[hidden..2 * hidden].fill(1.0);
        cell
    }

    /// Rebuilds a cell from loaded tensors.
    pub fn from_params(w_input: Parameter, w_recurrent: Parameter, bias: Parameter) -> Result<Self> {
        let (input_size, four_h) = w_input.value.shape();
        let hidden = four_h / 4;
        if four_h % 4 != 0 || w_recurrent.value.shape() != (hidden, four_h) || bias.value.shape() != (1, four_h) {
            return Err(Error::Shape {
                op: "lstm from_params",
                left: w_input.value.shape(),
                right: w_recurrent.value.shape(),
            });
        }
        Ok(Self {
            input_size,
            hidden,
            w_input,
            w_recurrent,
            bias,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One gated update: `i, f, o = σ(·)`, `g = tanh(·)`,
    /// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
    pub fn step(&self, h_prev: &[f64], c_prev: &[f64], x: &[&[f64]]) -> Result<LstmStep> {
        let h = self.hidden;
        let width: usize = x.iter().map(|s| s.len()).sum();
        if width != self.input_size || h_prev.len() != h || c_prev.len() != h {
            return Err(Error::Shape {
                op: "lstm_step",
                left: (self.input_size, h),
                right: (width, h_prev.len()),
            });
        }
        let mut z = self.bias.value.data().to_vec();
        let mut nz = Vec::new();
        let mut offset = 0;
        for seg in x {
            for (j, &v) in seg.iter().enumerate() {
                if v != 0.0 {
                    let row = offset + j;
                    axpy(v, self.w_input.value.row(row), &mut z);
                    nz.push((row as u32, v));
                }
            }
            offset += seg.len();
        }
        for (j, &hj) in h_prev.iter().enumerate() {
            if hj != 0.0 {
                axpy(hj, self.w_recurrent.value.row(j), &mut z);
            }
        }
        for v in &mut z[..3 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut z[3 * h..] {
            *v = v.tanh();
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut hn = vec![0.0; h];
        for k in 0..h {
            c[k] = z[h + k] * c_prev[k] + z[k] * z[3 * h + k];
            tanh_c[k] = c[k].tanh();
            hn[k] = z[2 * h + k] * tanh_c[k];
        }
        Ok(LstmStep {
            masked: false,
            x: nz,
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: z,
            tanh_c,
            h: hn,
            c,
        })
    }

    fn carry(h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        LstmStep {
            masked: true,
            x: Vec::new(),
            h_prev: Vec::new(),
            c_prev: Vec::new(),
            gates: Vec::new(),
            tanh_c: Vec::new(),
            h: h_prev.to_vec(),
            c: c_prev.to_vec(),
        }
    }

    /// Runs a sequence from the zero state. Masked positions copy the state
    /// through unchanged.
    pub fn forward(&self, inputs: &[StepInput<'_>]) -> Result<LstmTrace> {
        let mut h = vec![0.0; self.hidden];
        let mut c = vec![0.0; self.hidden];
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            let s = match x {
                Some(segs) => self.step(&h, &c, segs)?,
                None => Self::carry(&h, &c),
            };
            h.clone_from(&s.h);
            c.clone_from(&s.c);
            steps.push(s);
        }
        Ok(LstmTrace {
            steps,
            hidden: self.hidden,
        })
    }

    /// Backpropagation through time. `dh_out[t]` is the loss gradient with
    /// respect to the hidden state emitted at step `t` (empty = zero).
    /// Accumulates parameter gradients and, when `want_dx`, returns the input
    /// gradient of every step (empty for masked steps).
    pub fn backward(&mut self, trace: &LstmTrace, dh_out: &[Vec<f64>], want_dx: bool) -> Result<Vec<Vec<f64>>> {
        let h = self.hidden;
        if dh_out.len() != trace.steps.len() {
            return Err(Error::Shape {
                op: "lstm backward",
                left: (trace.steps.len(), h),
                right: (dh_out.len(), h),
            });
        }
        let mut dx_all = vec![Vec::new(); trace.steps.len()];
        let mut dh = vec![0.0; h];
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..trace.steps.len()).rev() {
            if !dh_out[t].is_empty() {
                axpy(1.0, &dh_out[t], &mut dh);
            }
            let s = &trace.steps[t];
            if s.masked {
                continue;
            }
            let g = &s.gates;
            for k in 0..h {
                let (i, f, o, gg) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let dc_k = dc[k] + dh[k] * o * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                dz[k] = dc_k * gg * i * (1.0 - i);
                dz[h + k] = dc_k * s.c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dh[k] * s.tanh_c[k] * o * (1.0 - o);
                dz[3 * h + k] = dc_k * i * (1.0 - gg * gg);
                dc[k] = dc_k * f;
            }
            axpy(1.0, &dz, self.bias.grad.data_mut());
            for &(j, v) in &s.x {
                axpy(v, &dz, self.w_input.grad.row_mut(j as usize));
            }
            for (j, &hp) in s.h_prev.iter().enumerate() {
                if hp != 0.0 {
                    axpy(hp, &dz, self.w_recurrent.grad.row_mut(j));
                }
            }
            if want_dx {
                dx_all[t] = (0..self.input_size)
                    .map(|j| dot(self.w_input.value.row(j), &dz))
                    .collect();
            }
            for (j, d) in dh.iter_mut().enumerate() {
                *d = dot(self.w_recurrent.value.row(j), &dz);
            }
        }
        Ok(dx_all)
    }
}

impl HasParams for LstmCell {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_input, &self.w_recurrent, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_input, &mut self.w_recurrent, &mut self.bias]
    }
}

/// Runs `inputs` with explicit mask bits (`true` = real step) and returns
/// the `(h_t, c_t)` sequence.
pub fn run_masked_sequence(cell: &LstmCell, inputs: &[Vec<f64>], mask: &[bool]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if inputs.len() != mask.len() {
        return Err(Error::Shape {
            op: "run_masked_sequence",
            left: (inputs.len(), 1),
            right: (mask.len(), 1),
        });
    }
    let steps: Vec<StepInput<'_>> = inputs
        .iter()
        .zip(mask)
        .map(|(x, &m)| m.then(|| vec![x.as_slice()]))
        .collect();
    let trace = cell.forward(&steps)?;
    Ok(trace.steps.into_iter().map(|s| (s.h, s.c)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Inverted dropout. Returns the output and the per-entry scale used by
/// the backward pass (`0` or `1/(1-rate)`; all ones in infer mode).
pub fn dropout<R: Rng + ?Sized>(x: &[f64], rate: f64, mode: DropoutMode, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == DropoutMode::Infer || rate == 0.0 {
        return Ok((x.to_vec(), vec![1.0; x.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let y = x.iter().zip(&scale).map(|(v, s)| v * s).collect();
    Ok((y, scale))
}

/// Fully connected layer, weight stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    pub fn zeros(prefix: &str, input: usize, output: usize) -> Self {
        Self {
            weight: Parameter::zeros(format!("{prefix}.weight"), input, output),
            bias: Parameter::zeros(format!("{prefix}.bias"), 1, output),
        }
    }

    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::uniform(format!("{prefix}.weight"), input, output, input, rng),
            bias: Parameter::zeros(format!("{prefix}.bias"), 1, output),
        }
    }

    pub fn from_params(weight: Parameter, bias: Parameter) -> Result<Self> {
        if bias.value.shape() != (1, weight.value.cols()) {
            return Err(Error::Shape {
                op: "dense from_params",
                left: weight.value.shape(),
                right: bias.value.shape(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn input_size(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn output_size(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &[&[f64]]) -> Result<Vec<f64>> {
        let width: usize = x.iter().map(|s| s.len()).sum();
        if width != self.input_size() {
            return Err(Error::Shape {
                op: "dense",
                left: self.weight.value.shape(),
                right: (1, width),
            });
        }
        let mut out = self.bias.value.data().to_vec();
        let mut offset = 0;
        for seg in x {
            for (j, &v) in seg.iter().enumerate() {
                if v != 0.0 {
                    axpy(v, self.weight.value.row(offset + j), &mut out);
                }
            }
            offset += seg.len();
        }
        Ok(out)
    }

    /// Accumulates parameter gradients; returns `dx` when requested.
    pub fn backward(&mut self, x: &[&[f64]], dout: &[f64], want_dx: bool) -> Vec<f64> {
        axpy(1.0, dout, self.bias.grad.data_mut());
        let mut offset = 0;
        for seg in x {
            for (j, &v) in seg.iter().enumerate() {
                if v != 0.0 {
                    axpy(v, dout, self.weight.grad.row_mut(offset + j));
                }
            }
            offset += seg.len();
        }
        if !want_dx {
            return Vec::new();
        }
        (0..self.input_size())
            .map(|j| dot(self.weight.value.row(j), dout))
            .collect()
    }
}

impl HasParams for Dense {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Output nonlinearity of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// One-label combination task: a distribution over classes.
    Softmax,
    /// Multi-label drug-class task: independent probabilities.
    Sigmoid,
}

impl Activation {
    pub fn apply(self, logits: &[f64]) -> Vec<f64> {
        match self {
            Activation::Softmax => softmax(logits),
            Activation::Sigmoid => logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }
}

/// Dense layer plus output activation. The score of class `j` is the dot
/// product of the hidden state with a learned class embedding (column `j`
/// of the weight) plus a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub dense: Dense,
    pub activation: Activation,
}

impl OutputHead {
    pub fn forward(&self, h: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(self.activation.apply(&self.dense.forward(h)?))
    }
}

/// Softmax head over `C` combination classes.
pub fn head_dcc(dense: &Dense, h: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&dense.forward(&[h])?))
}

/// Seven independent sigmoid outputs.
pub fn head_dc(dense: &Dense, h: &[f64]) -> Result<Vec<f64>> {
    Ok(dense.forward(&[h])?.into_iter().map(sigmoid).collect())
}

pub fn merge_concat(parts: &[&[f64]]) -> Result<Vec<f64>> {
    if parts.is_empty() {
        return Err(Error::Data("merge_concat needs at least one branch".into()));
    }
    Ok(parts.concat())
}

/// Splits a gradient of a concatenation back into its branches.
pub fn split_concat_grad(grad: &[f64], lens: &[usize]) -> Result<Vec<Vec<f64>>> {
    if grad.len() != lens.iter().sum::<usize>() {
        return Err(Error::Shape {
            op: "split_concat_grad",
            left: (grad.len(), 1),
            right: (lens.iter().sum(), 1),
        });
    }
    let mut out = Vec::with_capacity(lens.len());
    let mut offset = 0;
    for &n in lens {
        out.push(grad[offset..offset + n].to_vec());
        offset += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, matmul, Tensor2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rvec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Straight transcription of the gate equations with one matrix per gate.
    fn reference_step(cell: &LstmCell, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = cell.hidden();
        let gate = |k: usize, act: fn(f64) -> f64| -> Vec<f64> {
            let mut w = Tensor2::zeros(x.len(), h);
            let mut u = Tensor2::zeros(h, h);
            for r in 0..x.len() {
                for c in 0..h {
                    w.set(r, c, cell.w_input.value.get(r, k * h + c));
                }
            }
            for r in 0..h {
                for c in 0..h {
                    u.set(r, c, cell.w_recurrent.value.get(r, k * h + c));
                }
            }
            let wx = matmul(&Tensor2::row_vector(x.to_vec()), &w).unwrap();
            let uh = matmul(&Tensor2::row_vector(h_prev.to_vec()), &u).unwrap();
            (0..h)
                .map(|c| act(wx.get(0, c) + uh.get(0, c) + cell.bias.value.get(0, k * h + c)))
                .collect()
        };
        let i = gate(0, sigmoid);
        let f = gate(1, sigmoid);
        let o = gate(2, sigmoid);
        let g = gate(3, f64::tanh);
        let c: Vec<f64> = (0..h).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let hn = (0..h).map(|k| o[k] * c[k].tanh()).collect();
        (hn, c)
    }

    #[test]
    fn zero_cell_outputs_zero() {
        let mut cell = LstmCell::zeros("t", 3, 4);
        cell.bias.zero_grad();
        let s = cell.step(&[0.0; 4], &[0.0; 4], &[&[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(s.h, vec![0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_carries_memory() {
        let mut cell = LstmCell::zeros("t", 2, 3);
        let b = cell.bias.value.data_mut();
        b[..3].fill(-50.0); // input gate closed
        b[3..6].fill(50.0); // forget gate open
        let c_prev = [0.3, -0.7, 0.9];
        let s = cell.step(&[0.1, 0.2, 0.3], &c_prev, &[&[0.5, -0.5]]).unwrap();
        for (c, p) in s.c.iter().zip(c_prev) {
            assert!((c - p).abs() < 1e-12);
        }
    }

    #[test]
    fn step_matches_reference_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let cell = LstmCell::new("t", 5, 6, &mut rng);
            let (h0, c0, x) = (rvec(6, &mut rng), rvec(6, &mut rng), rvec(5, &mut rng));
            let s = cell.step(&h0, &c0, &[&x[..2], &x[2..]]).unwrap();
            let (rh, rc) = reference_step(&cell, &h0, &c0, &x);
            for k in 0..6 {
                assert!((s.h[k] - rh[k]).abs() < 1e-12);
                assert!((s.c[k] - rc[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_and_padding_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cell = LstmCell::new("t", 4, 5, &mut rng);
        let out = run_masked_sequence(&cell, &[vec![1.0; 4], vec![2.0; 4]], &[false, false]).unwrap();
        assert_eq!(out[1].0, vec![0.0; 5]);

        let real: Vec<Vec<f64>> = (0..7).map(|_| rvec(4, &mut rng)).collect();
        let unpadded = run_masked_sequence(&cell, &real, &[true; 7]).unwrap();
        let mut padded_inputs = vec![vec![0.0; 4]; 13];
        padded_inputs.extend(real.iter().cloned());
        let mut mask = vec![false; 13];
        mask.extend([true; 7]);
        let padded = run_masked_sequence(&cell, &padded_inputs, &mask).unwrap();
        let (a, b) = (&unpadded.last().unwrap().0, &padded.last().unwrap().0);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(run_masked_sequence(&cell, &real, &[true; 3]).is_err());
    }

    fn lstm_loss(cell: &LstmCell, xs: &[Vec<f64>], mask: &[bool], r: &[Vec<f64>]) -> f64 {
        let steps: Vec<StepInput<'_>> = xs
            .iter()
            .zip(mask)
            .map(|(x, &m)| m.then(|| vec![x.as_slice()]))
            .collect();
        let trace = cell.forward(&steps).unwrap();
        trace.steps.iter().zip(r).map(|(s, rr)| dot(&s.h, rr)).sum()
    }

    #[test]
    fn lstm_backward_passes_grad_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut cell = LstmCell::new("t", 3, 4, &mut rng);
            let xs: Vec<Vec<f64>> = (0..5).map(|_| rvec(3, &mut rng)).collect();
            let mask = [true, false, true, true, true];
            let r: Vec<Vec<f64>> = (0..5).map(|_| rvec(4, &mut rng)).collect();
            let steps: Vec<StepInput<'_>> = xs
                .iter()
                .zip(&mask)
                .map(|(x, &m)| m.then(|| vec![x.as_slice()]))
                .collect();
            let trace = cell.forward(&steps).unwrap();
            cell.zero_grad();
            let dx = cell.backward(&trace, &r, true).unwrap();
            let theta = cell.flat_values();
            let analytic = cell.flat_grads();
            let mut probe = cell.clone();
            let err = grad_check(
                &theta,
                &analytic,
                |t| {
                    probe.set_flat_values(t);
                    lstm_loss(&probe, &xs, &mask, &r)
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "param grad error {err}");

            // input gradient of step 2
            let base = cell.clone();
            let err = grad_check(
                &xs[2],
                &dx[2],
                |t| {
                    let mut xs2 = xs.clone();
                    xs2[2] = t.to_vec();
                    lstm_loss(&base, &xs2, &mask, &r)
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "input grad error {err}");
            assert!(dx[1].is_empty());
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rvec(10, &mut rng);
        let (y, _) = dropout(&x, 0.5, DropoutMode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
        let (y, _) = dropout(&x, 0.0, DropoutMode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(dropout(&x, 1.0, DropoutMode::Train, &mut rng).is_err());

        let ones = vec![1.0; 1_000_000];
        let (y, _) = dropout(&ones, 0.5, DropoutMode::Train, &mut rng).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn heads() {
        let d = Dense::zeros("h", 4, 5);
        let p = head_dcc(&d, &[0.3, 0.1, -0.2, 0.5]).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let d7 = Dense::zeros("h", 4, 7);
        assert_eq!(head_dc(&d7, &[1.0; 4]).unwrap(), vec![0.5; 7]);

        let mut d = Dense::zeros("h", 2, 3);
        d.bias.value.data_mut()[1] = 50.0;
        let p = head_dcc(&d, &[0.0, 0.0]).unwrap();
        assert!(p[1] > 1.0 - 1e-12);

        let mut d = Dense::zeros("h", 2, 3);
        d.weight
            .value
            .data_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3, -0.1, 0.0, 0.4]);
        d.bias.value.data_mut().copy_from_slice(&[0.0, 0.1, -0.1]);
        // logits = [0.1*1 - 0.1*2, 0.2 + 0.1, 0.3 + 0.8 - 0.1] = [-0.1, 0.3, 1.0]
        let p = head_dcc(&d, &[1.0, 2.0]).unwrap();
        let e = [(-0.1f64).exp(), 0.3f64.exp(), 1.0f64.exp()];
        let s: f64 = e.iter().sum();
        for (pi, ei) in p.iter().zip(e) {
            assert!((pi - ei / s).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dense_passes_grad_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut d = Dense::new("d", 4, 3, &mut rng);
            let x = rvec(4, &mut rng);
            let r = rvec(3, &mut rng);
            d.zero_grad();
            let dx = d.backward(&[&x], &r, true);
            let theta = d.flat_values();
            let analytic = d.flat_grads();
            let mut probe = d.clone();
            let err = grad_check(
                &theta,
                &analytic,
                |t| {
                    probe.set_flat_values(t);
                    dot(&probe.forward(&[&x]).unwrap(), &r)
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6);
            let err = grad_check(&x, &dx, |t| dot(&d.forward(&[t]).unwrap(), &r), 1e-5).unwrap();
            assert!(err < 1e-6);
        }
    }

    #[test]
    fn merge() {
        let a = vec![1.0; 64];
        let b = vec![2.0; 64];
        assert_eq!(merge_concat(&[&a]).unwrap(), a);
        assert_eq!(merge_concat(&[&a, &b]).unwrap().len(), 128);
        assert!(merge_concat(&[]).is_err());
        let parts = split_concat_grad(&merge_concat(&[&a, &b]).unwrap(), &[64, 64]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    #[test]
    fn merged_branches_both_receive_gradient() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let mut left = LstmCell::new("l", 2, 3, &mut rng);
            let mut right = LstmCell::new("r", 3, 2, &mut rng);
            let xl: Vec<Vec<f64>> = (0..3).map(|_| rvec(2, &mut rng)).collect();
            let xr: Vec<Vec<f64>> = (0..3).map(|_| rvec(3, &mut rng)).collect();
            let w = rvec(5, &mut rng);
            let loss = |l: &LstmCell, r: &LstmCell| {
                let sl: Vec<StepInput<'_>> = xl.iter().map(|x| Some(vec![x.as_slice()])).collect();
                let sr: Vec<StepInput<'_>> = xr.iter().map(|x| Some(vec![x.as_slice()])).collect();
                let hl = l.forward(&sl).unwrap().final_h();
                let hr = r.forward(&sr).unwrap().final_h();
                dot(&merge_concat(&[&hl, &hr]).unwrap(), &w).tanh()
            };
            let sl: Vec<StepInput<'_>> = xl.iter().map(|x| Some(vec![x.as_slice()])).collect();
            let sr: Vec<StepInput<'_>> = xr.iter().map(|x| Some(vec![x.as_slice()])).collect();
            let tl = left.forward(&sl).unwrap();
            let tr = right.forward(&sr).unwrap();
            let merged = merge_concat(&[&tl.final_h(), &tr.final_h()]).unwrap();
            let y = dot(&merged, &w).tanh();
            let dm: Vec<f64> = w.iter().map(|wi| wi * (1.0 - y * y)).collect();
            let parts = split_concat_grad(&dm, &[3, 2]).unwrap();
            let mut dl = vec![Vec::new(); 3];
            dl[2] = parts[0].clone();
            let mut dr = vec![Vec::new(); 3];
            dr[2] = parts[1].clone();
            left.zero_grad();
            right.zero_grad();
            left.backward(&tl, &dl, false).unwrap();
            right.backward(&tr, &dr, false).unwrap();
            let mut theta = left.flat_values();
            theta.extend(right.flat_values());
            let mut analytic = left.flat_grads();
            analytic.extend(right.flat_grads());
            assert!(left.flat_grads().iter().any(|g| *g != 0.0));
            assert!(right.flat_grads().iter().any(|g| *g != 0.0));
            let (mut pl, mut pr) = (left.clone(), right.clone());
            let nl = pl.param_count();
            let err = grad_check(
                &theta,
                &analytic,
                |t| {
                    pl.set_flat_values(&t[..nl]);
                    pr.set_flat_values(&t[nl..]);
                    loss(&pl, &pr)
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
