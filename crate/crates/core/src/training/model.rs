//! Soft classifiers parameterised by a flat weight vector.

/// A differentiable soft hypothesis `h_theta : R^d -> simplex over classes`.
pub trait SoftModel {
    fn num_params(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64>;

    /// Row-major `C x N` Jacobian of the class probabilities with respect
    /// to `theta`. The default uses central finite differences.
    fn jacobian(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let n = self.num_params();
        let c = self.num_classes();
        let mut jac = vec![0.0; c * n];
        let mut probe = theta.to_vec();
        for i in 0..n {
            let h = 1e-6 * (1.0 + theta[i].abs());
            probe[i] = theta[i] + h;
            let plus = self.forward(&probe, x);
            probe[i] = theta[i] - h;
            let minus = self.forward(&probe, x);
            probe[i] = theta[i];
            for k in 0..c {
                jac[k * n + i] = (plus[k] - minus[k]) / (2.0 * h);
            }
        }
        jac
    }
}

/// `softmax(W x + b)` with `theta = vec(W) ++ b`, `W` stored row-major
/// (`classes x input_dim`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineSoftmax {
    pub input_dim: usize,
    pub classes: usize,
}

impl AffineSoftmax {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Self { input_dim, classes }
    }

    fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        let bias = &theta[self.classes * d..];
        (0..self.classes)
            .map(|k| {
                let row = &theta[k * d..(k + 1) * d];
                row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + bias[k]
            })
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl SoftModel for AffineSoftmax {
    fn num_params(&self) -> usize {
        self.classes * (self.input_dim + 1)
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(theta, x))
    }

    fn jacobian(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        let c = self.classes;
        let n = self.num_params();
        let p = self.forward(theta, x);
        let mut jac = vec![0.0; c * n];
        for out in 0..c {
            let row = &mut jac[out * n..(out + 1) * n];
            for k in 0..c {
                // dp_out / dz_k
                let dz = p[out] * (if out == k { 1.0 } else { 0.0 } - p[k]);
                for i in 0..d {
                    row[k * d + i] = dz * x[i];
                }
                row[c * d + k] = dz;
            }
        }
        jac
    }
}
