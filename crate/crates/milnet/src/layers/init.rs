//! Seeded weight initialisers: Glorot-uniform for input kernels, orthogonal
//! for recurrent kernels, zeros for biases.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic initialiser; all draws derive from one seeded stream so a
/// `TrainPlan` seed fixes every parameter.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    /// Standard normal via Box–Muller.
    fn normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Glorot-uniform draw: `U(−l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(&mut self, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| self.uniform(-limit, limit)).collect()
    }

    /// Row-major `[rows, cols]` matrix with orthonormal columns (rows when
    /// `cols > rows`), from QR of a normal draw via modified Gram–Schmidt.
    pub fn orthogonal(&mut self, rows: usize, cols: usize) -> Vec<f64> {
        let transpose_back = cols > rows;
        let (r, c) = if transpose_back { (cols, rows) } else { (rows, cols) };
        // Columns of an r×c matrix, r >= c.
        let mut cols_v: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..r).map(|_| self.normal()).collect())
            .collect();
        for j in 0..c {
            for k in 0..j {
                let dot: f64 = cols_v[j]
                    .iter()
                    .zip(&cols_v[k])
                    .map(|(a, b)| a * b)
                    .sum();
                let (head, tail) = cols_v.split_at_mut(j);
                for (cj, ck) in tail[0].iter_mut().zip(&head[k]) {
                    *cj -= dot * ck;
                }
            }
            let norm: f64 = cols_v[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            // A zero column from degenerate draws is practically impossible;
            // fall back to a unit basis vector if it happens.
            if norm < 1e-12 {
                cols_v[j].iter_mut().for_each(|v| *v = 0.0);
                cols_v[j][j % r] = 1.0;
            } else {
                cols_v[j].iter_mut().for_each(|v| *v /= norm);
            }
        }
        let mut out = vec![0.0f64; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = if transpose_back {
                    cols_v[i][j]
                } else {
                    cols_v[j][i]
                };
            }
        }
        out
    }
}
