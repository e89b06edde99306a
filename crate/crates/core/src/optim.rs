//! Dense row-major matrices and the Adam optimizer.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out = self * x`
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `out += self^T * y`
    pub fn matvec_t_add(&self, y: &[f64], out: &mut [f64]) {
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), out);
            }
        }
    }

    /// `self += scale * y x^T`
    pub fn add_outer(&mut self, scale: f64, y: &[f64], x: &[f64]) {
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(scale * yi, x, self.row_mut(i));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Row gradients accumulated for an embedding table.
#[derive(Debug, Clone)]
pub struct SparseGrad {
    cols: usize,
    rows: HashMap<usize, Vec<f64>>,
}

impl SparseGrad {
    pub fn new(cols: usize) -> Self {
        SparseGrad {
            cols,
            rows: HashMap::new(),
        }
    }

    pub fn add_row(&mut self, row: usize, scale: f64, grad: &[f64]) {
        let cols = self.cols;
        let acc = self.rows.entry(row).or_insert_with(|| vec![0.0; cols]);
        axpy(scale, grad, acc);
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let cols = self.cols;
        self.rows.entry(row).or_insert_with(|| vec![0.0; cols])
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn touched(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    pub fn for_matrix(p: &Matrix) -> Self {
        Moments {
            m: vec![0.0; p.data.len()],
            v: vec![0.0; p.data.len()],
        }
    }
}

/// Adam with bias correction. Call [`Adam::tick`] once per optimizer step,
/// then apply each parameter's gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    bias1: f64,
    bias2: f64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            bias1: 1.0,
            bias2: 1.0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn tick(&mut self) {
        self.step += 1;
        self.bias1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        self.bias2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
    }

    fn update(&self, param: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64]) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / self.bias1;
            let v_hat = v[i] / self.bias2;
            param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }

    pub fn apply_dense(&self, param: &mut Matrix, moments: &mut Moments, grad: &Matrix) {
        self.update(&mut param.data, &mut moments.m, &mut moments.v, &grad.data);
    }

    /// Lazy update: only rows present in `grad` have their moments decayed.
    pub fn apply_sparse(&self, param: &mut Matrix, moments: &mut Moments, grad: &SparseGrad) {
        let cols = param.cols;
        for row in grad.touched() {
            let span = row * cols..(row + 1) * cols;
            self.update(
                &mut param.data[span.clone()],
                &mut moments.m[span.clone()],
                &mut moments.v[span],
                grad.get(row).expect("touched row"),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        });
        let mut p = Matrix {
            rows: 1,
            cols: 2,
            data: vec![1.0, -1.0],
        };
        let mut mom = Moments::for_matrix(&p);
        let g = Matrix {
            rows: 1,
            cols: 2,
            data: vec![3.0, -0.5],
        };
        adam.tick();
        adam.apply_dense(&mut p, &mut mom, &g);
        assert!((p.data[0] - 0.9).abs() < 1e-8);
        assert!((p.data[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..Default::default()
        });
        let target = [3.0, -2.0];
        let mut p = Matrix::zeros(1, 2);
        let mut mom = Moments::for_matrix(&p);
        for _ in 0..2000 {
            let g = Matrix {
                rows: 1,
                cols: 2,
                data: vec![2.0 * (p.data[0] - target[0]), 2.0 * (p.data[1] - target[1])],
            };
            adam.tick();
            adam.apply_dense(&mut p, &mut mom, &g);
        }
        assert!(
            (p.data[0] - 3.0).abs() < 1e-3 && (p.data[1] + 2.0).abs() < 1e-3,
            "{:?}",
            p.data
        );
    }

    #[test]
    fn sparse_update_leaves_untouched_rows() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Matrix {
            rows: 3,
            cols: 1,
            data: vec![1.0, 1.0, 1.0],
        };
        let mut mom = Moments::for_matrix(&p);
        let mut g = SparseGrad::new(1);
        g.add_row(1, 1.0, &[2.0]);
        adam.tick();
        adam.apply_sparse(&mut p, &mut mom, &g);
        assert_eq!(p.data[0], 1.0);
        assert_eq!(p.data[2], 1.0);
        assert!(p.data[1] < 1.0);
    }

    #[test]
    fn matvec_and_transpose() {
        let a = Matrix {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let mut out = [0.0; 2];
        a.matvec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut back = [0.0; 3];
        a.matvec_t_add(&[1.0, 1.0], &mut back);
        assert_eq!(back, [5.0, 7.0, 9.0]);
    }
}
