use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinaryClassifier, TransferError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossConfig {
    pub hidden: usize,
    pub cross_layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CrossConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            cross_layers: 2,
            lr: 1e-4,
            epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Deep and cross combiner: an explicit feature-crossing branch
/// `x_{l+1} = x0 (x_l . w_l) + b_l + x_l` beside a two-layer ReLU MLP, with a
/// logistic output over both branch outputs. Trained by Adam on log loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossCombiner {
    pub config: CrossConfig,
    dim: usize,
    params: Vec<f64>,
}

/// Offsets of the parameter blocks inside the flat vector.
struct Layout {
    cross_w: usize,
    cross_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    out_w: usize,
    out_b: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, h: usize, layers: usize) -> Self {
        let cross_w = 0;
        let cross_b = cross_w + layers * d;
        let w1 = cross_b + layers * d;
        let b1 = w1 + h * d;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let out_w = b2 + h;
        let out_b = out_w + d + h;
        Self {
            cross_w,
            cross_b,
            w1,
            b1,
            w2,
            b2,
            out_w,
            out_b,
            len: out_b + 1,
        }
    }
}

struct Trace {
    xs: Vec<Vec<f64>>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    logit: f64,
}

impl CrossCombiner {
    pub fn new(config: CrossConfig) -> Self {
        Self {
            config,
            dim: 0,
            params: Vec::new(),
        }
    }

    fn layout(&self) -> Layout {
        Layout::new(self.dim, self.config.hidden, self.config.cross_layers)
    }

    fn init(&mut self, dim: usize, rng: &mut ChaCha8Rng) {
        self.dim = dim;
        let l = self.layout();
        let h = self.config.hidden;
        let mut p = vec![0.0; l.len];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, gain: f64| {
            let n = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt()).expect("finite sd");
            for v in &mut p[range] {
                *v = n.sample(rng);
            }
        };
        fill(l.cross_w..l.cross_b, dim, 1.0);
        fill(l.w1..l.b1, dim, 2.0);
        fill(l.w2..l.b2, h, 2.0);
        fill(l.out_w..l.out_b, dim + h, 1.0);
        self.params = p;
    }

    fn forward(&self, x0: &[f64]) -> Trace {
        let l = self.layout();
        let (d, h) = (self.dim, self.config.hidden);
        let p = &self.params;
        let mut xs = vec![x0.to_vec()];
        for k in 0..self.config.cross_layers {
            let w = &p[l.cross_w + k * d..l.cross_w + (k + 1) * d];
            let b = &p[l.cross_b + k * d..l.cross_b + (k + 1) * d];
            let xl = xs.last().expect("non-empty");
            let dot: f64 = xl.iter().zip(w).map(|(a, b)| a * b).sum();
            let next = (0..d).map(|i| x0[i] * dot + b[i] + xl[i]).collect();
            xs.push(next);
        }
        let dense = |w: usize, b: usize, input: &[f64], out_n: usize| -> Vec<f64> {
            (0..out_n)
                .map(|o| {
                    let row = &p[w + o * input.len()..w + (o + 1) * input.len()];
                    (p[b + o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
                })
                .collect()
        };
        let h1 = dense(l.w1, l.b1, x0, h);
        let h2 = dense(l.w2, l.b2, &h1, h);
        let xc = xs.last().expect("non-empty");
        let logit = p[l.out_b]
            + xc.iter().chain(&h2).zip(&p[l.out_w..l.out_b]).map(|(a, b)| a * b).sum::<f64>();
        Trace { xs, h1, h2, logit }
    }

    /// Adds the log-loss gradient of one sample into `g`; returns the loss.
    fn backward(&self, x0: &[f64], y: bool, g: &mut [f64]) -> f64 {
        let l = self.layout();
        let (d, h) = (self.dim, self.config.hidden);
        let p = &self.params;
        let t = self.forward(x0);
        let prob = sigmoid(t.logit);
        let target = if y { 1.0 } else { 0.0 };
        let loss = softplus(t.logit) - target * t.logit;
        let dz = prob - target;
        g[l.out_b] += dz;
        let xc = t.xs.last().expect("non-empty");
        for (i, v) in xc.iter().chain(&t.h2).enumerate() {
            g[l.out_w + i] += dz * v;
        }

        // MLP branch.
        let dh2: Vec<f64> = (0..h)
            .map(|o| if t.h2[o] > 0.0 { dz * p[l.out_w + d + o] } else { 0.0 })
            .collect();
        let mut dh1 = vec![0.0; h];
        for o in 0..h {
            if dh2[o] == 0.0 {
                continue;
            }
            g[l.b2 + o] += dh2[o];
            for i in 0..h {
                g[l.w2 + o * h + i] += dh2[o] * t.h1[i];
                dh1[i] += dh2[o] * p[l.w2 + o * h + i];
            }
        }
        for o in 0..h {
            if t.h1[o] <= 0.0 || dh1[o] == 0.0 {
                continue;
            }
            g[l.b1 + o] += dh1[o];
            for i in 0..d {
                g[l.w1 + o * d + i] += dh1[o] * x0[i];
            }
        }

        // Cross branch, last layer first.
        let mut dx: Vec<f64> = (0..d).map(|i| dz * p[l.out_w + i]).collect();
        for k in (0..self.config.cross_layers).rev() {
            let w = &p[l.cross_w + k * d..l.cross_w + (k + 1) * d];
            let xl = &t.xs[k];
            let gx0: f64 = dx.iter().zip(x0).map(|(a, b)| a * b).sum();
            for i in 0..d {
                g[l.cross_w + k * d + i] += gx0 * xl[i];
                g[l.cross_b + k * d + i] += dx[i];
            }
            for i in 0..d {
                dx[i] += gx0 * w[i];
            }
        }
        loss
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl BinaryClassifier for CrossCombiner {
    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<(), TransferError> {
        if x.is_empty() || x.len() != y.len() {
            return Err(TransferError::ShapeMismatch(format!("{} rows for {} targets", x.len(), y.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.init(x[0].len(), &mut rng);
        let n = self.params.len();
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut t = 0i32;
        let mut order: Vec<usize> = (0..x.len()).collect();
        let batch = self.config.batch_size.max(1);
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut g = vec![0.0; n];
                for &i in chunk {
                    self.backward(&x[i], y[i], &mut g);
                }
                let inv = 1.0 / chunk.len() as f64;
                t += 1;
                let c1 = 1.0 - f64::powi(b1, t);
                let c2 = 1.0 - f64::powi(b2, t);
                for k in 0..n {
                    let gk = g[k] * inv;
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    self.params[k] -= self.config.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(TransferError::NonFinite("cross combiner parameters".into()));
        }
        Ok(())
    }

    fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.forward(x).logit)
    }
}
