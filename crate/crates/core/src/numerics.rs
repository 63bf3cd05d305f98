//! Dense row-major matrices, activation functions with their backward
//! rules, and a central-difference gradient checker.
//!
//! Backward functions accumulate into [`Parameter::grad`]; they never
//! overwrite it.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        same_shape("add_assign", self, other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

fn same_shape(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn matmul(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            axpy(aik, b.row(k), orow);
        }
    }
    Ok(out)
}

/// Gradients of `a·b` given the upstream gradient: `(dout·bᵀ, aᵀ·dout)`.
pub fn matmul_backward(a: &Tensor2, b: &Tensor2, dout: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    if dout.shape() != (a.rows, b.cols) || a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul_backward",
            left: (a.rows, b.cols),
            right: dout.shape(),
        });
    }
    let mut da = Tensor2::zeros(a.rows, a.cols);
    let mut db = Tensor2::zeros(b.rows, b.cols);
    for i in 0..a.rows {
        let drow = dout.row(i);
        for k in 0..a.cols {
            da.data[i * a.cols + k] = dot(drow, b.row(k));
            axpy(a.data[i * a.cols + k], drow, db.row_mut(k));
        }
    }
    Ok((da, db))
}

pub fn add(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    same_shape("add", a, b)?;
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn hadamard(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    same_shape("hadamard", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor2 {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn hadamard_backward(a: &Tensor2, b: &Tensor2, dout: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    Ok((hadamard(dout, b)?, hadamard(dout, a)?))
}

/// `x·W + b` with the bias broadcast over rows. `x` is n×in, `W` in×out,
/// `b` 1×out.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if b.rows != 1 || b.cols != w.cols {
        return Err(Error::Shape {
            op: "affine bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    let mut out = matmul(x, w)?;
    for r in 0..out.rows {
        out.row_mut(r).iter_mut().zip(&b.data).for_each(|(o, bb)| *o += bb);
    }
    Ok(out)
}

/// Accumulates `dW` and `db` into the parameters and returns `dx`.
pub fn affine_backward(x: &Tensor2, w: &mut Parameter, b: &mut Parameter, dout: &Tensor2) -> Result<Tensor2> {
    let (dx, dw) = matmul_backward(x, &w.value, dout)?;
    w.grad.add_assign(&dw)?;
    if b.value.shape() != (1, dout.cols) {
        return Err(Error::Shape {
            op: "affine_backward bias",
            left: b.value.shape(),
            right: dout.shape(),
        });
    }
    for r in 0..dout.rows {
        axpy(1.0, dout.row(r), b.grad.data_mut());
    }
    Ok(dx)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient through `y = sigmoid(z)` given the output `y`.
#[inline]
pub fn sigmoid_backward(y: f64, dy: f64) -> f64 {
    dy * y * (1.0 - y)
}

/// Gradient through `y = tanh(z)` given the output `y`.
#[inline]
pub fn tanh_backward(y: f64, dy: f64) -> f64 {
    dy * (1.0 - y * y)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: `dz_j = p_j (dp_j − Σ_i dp_i p_i)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, dprobs);
    probs.iter().zip(dprobs).map(|(p, dp)| p * (dp - inner)).collect()
}

pub fn softmax_rows(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for r in 0..t.rows {
        let p = softmax(t.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

impl Parameter {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            value: Tensor2::zeros(rows, cols),
            grad: Tensor2::zeros(rows, cols),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(name, rows, cols);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        for v in p.value.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }

    pub fn from_value(name: impl Into<String>, value: Tensor2) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor2::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that owns parameters.
pub trait HasParams {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn flat_values(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    fn set_flat_values(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }
}

/// Relative error used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares an analytic gradient with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` coordinate by coordinate and returns the
/// maximum relative error.
pub fn grad_check<F>(theta0: &[f64], analytic: &[f64], mut f: F, eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if theta0.len() != analytic.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: (theta0.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut theta = theta0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = f(&theta);
        theta[i] = orig - eps;
        let minus = f(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same report as [`grad_check`], with each numeric derivative refined by
/// Richardson extrapolation of two central differences,
/// `(4·D(h/2) − D(h)) / 3`. The O(h⁴) truncation allows a larger `h`, which
/// keeps roundoff small on deep models whose gradients span many orders of
/// magnitude.
pub fn grad_check_richardson<F>(theta0: &[f64], analytic: &[f64], mut f: F, h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if theta0.len() != analytic.len() {
        return Err(Error::Shape {
            op: "grad_check_richardson",
            left: (theta0.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let mut theta = theta0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        let mut central = |step: f64| -> Result<f64> {
            theta[i] = orig + step;
            let plus = f(&theta);
            theta[i] = orig - step;
            let minus = f(&theta);
            theta[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective at coordinate {i}")));
            }
            Ok((plus - minus) / (2.0 * step))
        };
        let coarse = central(h)?;
        let fine = central(h / 2.0)?;
        let numeric = (4.0 * fine - coarse) / 3.0;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(3, 4, &mut rng);
        assert_eq!(matmul(&Tensor2::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let err = matmul(&Tensor2::zeros(2, 3), &Tensor2::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(add(&Tensor2::zeros(1, 2), &Tensor2::zeros(2, 1)).is_err());
    }

    #[test]
    fn affine_with_zero_weights_broadcasts_bias() {
        let x = Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor2::row_vector(vec![0.5, -1.0]);
        let y = affine(&x, &Tensor2::zeros(3, 2), &b).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        let p = softmax(&[1.0; 85]);
        for v in &p {
            assert!((v - 1.0 / 85.0).abs() < 1e-15);
        }
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (v, e) in p.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 1e-5);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0].is_finite() && (p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(&[3.0], &[6.0], |t| t[0] * t[0], 1e-5).unwrap();
        assert!(err < 1e-9);
        assert!(grad_check(&[3.0], &[6.0], |_| f64::NAN, 1e-5).is_err());
    }

    #[test]
    fn richardson_cancels_low_order_truncation() {
        // d/dt t^5 at t=1.3; plain central differences with h=0.1 are off
        // by h²·60·t²/6 ≈ 0.17, the extrapolated estimate by O(h⁴)
        let exact = 5.0 * 1.3f64.powi(4);
        let plain = grad_check(&[1.3], &[exact], |t| t[0].powi(5), 0.1).unwrap();
        let refined = grad_check_richardson(&[1.3], &[exact], |t| t[0].powi(5), 0.1).unwrap();
        assert!(plain > 1e-3);
        assert!(refined < 1e-4);
    }

    #[test]
    fn sigmoid_neuron_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = 1.0;
        let loss = |w: &[f64]| {
            let p = sigmoid(dot(&w[..4], &x) + w[4]);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let p = sigmoid(dot(&w[..4], &x) + w[4]);
        let dz = p - y;
        let mut analytic: Vec<f64> = x.iter().map(|xi| dz * xi).collect();
        analytic.push(dz);
        assert!(grad_check(&w, &analytic, loss, 1e-5).unwrap() < 1e-6);
    }

    /// Every differentiable op against central differences, 5 seeds each.
    #[test]
    fn ops_pass_grad_check() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let r = random(3, 2, &mut rng);
            // matmul: L = Σ r ⊙ (a·b)
            let (da, db) = matmul_backward(&a, &b, &r).unwrap();
            let la = |t: &[f64]| {
                let a2 = Tensor2::from_vec(3, 4, t.to_vec()).unwrap();
                dot(matmul(&a2, &b).unwrap().data(), r.data())
            };
            assert!(grad_check(a.data(), da.data(), la, 1e-5).unwrap() < 1e-6);
            let lb = |t: &[f64]| {
                let b2 = Tensor2::from_vec(4, 2, t.to_vec()).unwrap();
                dot(matmul(&a, &b2).unwrap().data(), r.data())
            };
            assert!(grad_check(b.data(), db.data(), lb, 1e-5).unwrap() < 1e-6);

            // hadamard
            let c = random(3, 4, &mut rng);
            let s = random(3, 4, &mut rng);
            let (dh, _) = hadamard_backward(&a, &c, &s).unwrap();
            let lh = |t: &[f64]| {
                let a2 = Tensor2::from_vec(3, 4, t.to_vec()).unwrap();
                dot(hadamard(&a2, &c).unwrap().data(), s.data())
            };
            assert!(grad_check(a.data(), dh.data(), lh, 1e-5).unwrap() < 1e-6);

            // affine
            let mut w = Parameter::from_value("w", b.clone());
            let mut bias = Parameter::from_value("b", random(1, 2, &mut rng));
            let dx = affine_backward(&a, &mut w, &mut bias, &r).unwrap();
            let bias_v = bias.value.clone();
            let lx = |t: &[f64]| {
                let x2 = Tensor2::from_vec(3, 4, t.to_vec()).unwrap();
                dot(affine(&x2, &b, &bias_v).unwrap().data(), r.data())
            };
            assert!(grad_check(a.data(), dx.data(), lx, 1e-5).unwrap() < 1e-6);
            let lbias = |t: &[f64]| {
                let b2 = Tensor2::from_vec(1, 2, t.to_vec()).unwrap();
                dot(affine(&a, &b, &b2).unwrap().data(), r.data())
            };
            assert!(grad_check(bias.value.data(), bias.grad.data(), lbias, 1e-5).unwrap() < 1e-6);

            // sigmoid, tanh, softmax
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ds: Vec<f64> = z
                .iter()
                .zip(&u)
                .map(|(&zi, &ui)| sigmoid_backward(sigmoid(zi), ui))
                .collect();
            let ls = |t: &[f64]| t.iter().zip(&u).map(|(&ti, ui)| sigmoid(ti) * ui).sum::<f64>();
            assert!(grad_check(&z, &ds, ls, 1e-5).unwrap() < 1e-6);
            let dt: Vec<f64> = z
                .iter()
                .zip(&u)
                .map(|(&zi, &ui)| tanh_backward(zi.tanh(), ui))
                .collect();
            let lt = |t: &[f64]| t.iter().zip(&u).map(|(&ti, ui)| ti.tanh() * ui).sum::<f64>();
            assert!(grad_check(&z, &dt, lt, 1e-5).unwrap() < 1e-6);
            let p = softmax(&z);
            let dsm = softmax_backward(&p, &u);
            let lsm = |t: &[f64]| dot(&softmax(t), &u);
            assert!(grad_check(&z, &dsm, lsm, 1e-5).unwrap() < 1e-6);
        }
    }

    #[test]
    fn backward_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(2, 3, &mut rng);
        let r1 = random(2, 2, &mut rng);
        let r2 = random(2, 2, &mut rng);
        let mut w = Parameter::from_value("w", random(3, 2, &mut rng));
        let mut b = Parameter::zeros("b", 1, 2);
        affine_backward(&x, &mut w, &mut b, &r1).unwrap();
        affine_backward(&x, &mut w, &mut b, &r2).unwrap();
        let mut w2 = w.clone();
        let mut b2 = b.clone();
        w2.zero_grad();
        b2.zero_grad();
        let sum = add(&r1, &r2).unwrap();
        affine_backward(&x, &mut w2, &mut b2, &sum).unwrap();
        for (g1, g2) in w.grad.data().iter().zip(w2.grad.data()) {
            assert!((g1 - g2).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(z in proptest::collection::vec(-30.0f64..30.0, 1..100)) {
                let p = softmax(&z);
                let s: f64 = p.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for v in p {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
