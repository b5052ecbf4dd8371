use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::moe::softmax;
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `y = W*·x + noise`, squared loss.
    TeacherStudent,
    /// Gaussian clusters, softmax cross-entropy on the layer output.
    Clusters,
}

/// One training example. For classification `target` is one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Teacher weight (`m×n`) or cluster centres (`classes×n`).
    pub params: Matrix,
    pub noise_std: f64,
}

impl SyntheticTask {
    /// Teacher `W* = W₀ + Δ`, with `Δ` a random rank-`rank` matrix scaled
    /// to Frobenius norm `scale·‖W₀‖_F`.
    pub fn teacher_student(
        w0: &Matrix,
        rank: usize,
        scale: f64,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (m, n) = w0.shape();
        if rank == 0 || rank > m.min(n) {
            return domain(format!("perturbation rank must be in 1..={}", m.min(n)));
        }
        if noise_std.is_nan() || noise_std < 0.0 {
            return domain("noise_std must be non-negative");
        }
        let delta = rng
            .normal_matrix(m, rank, 1.0)
            .matmul(&rng.normal_matrix(rank, n, 1.0))?;
        let norm = delta.frobenius_norm();
        let w_star = w0.add(&delta.scale(scale * w0.frobenius_norm() / norm))?;
        Ok(Self {
            kind: TaskKind::TeacherStudent,
            params: w_star,
            noise_std,
        })
    }

    /// `classes` Gaussian clusters in `n` dimensions: centres `N(0, sep²I)`,
    /// points `centre + N(0, noise²I)`, labels uniform.
    pub fn clusters(
        classes: usize,
        n: usize,
        separation: f64,
        noise_std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if classes < 2 || n == 0 {
            return domain("clusters need at least two classes and one dimension");
        }
        Ok(Self {
            kind: TaskKind::Clusters,
            params: rng.normal_matrix(classes, n, separation),
            noise_std,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.params.rows()
    }

    pub fn sample(&self, rng: &mut Rng) -> Sample {
        let n = self.input_dim();
        match self.kind {
            TaskKind::TeacherStudent => {
                let x = rng.normal_vec(n, 1.0);
                let mut target = self.params.matvec(&x).expect("teacher shape");
                for t in &mut target {
                    *t += self.noise_std * rng.standard_normal();
                }
                Sample { x, target }
            }
            TaskKind::Clusters => {
                let classes = self.output_dim();
                let label = rng.below(classes);
                let x = (0..n)
                    .map(|j| self.params.get(label, j) + self.noise_std * rng.standard_normal())
                    .collect();
                let mut target = vec![0.0; classes];
                target[label] = 1.0;
                Sample { x, target }
            }
        }
    }

    pub fn batch(&self, size: usize, rng: &mut Rng) -> Vec<Sample> {
        (0..size).map(|_| self.sample(rng)).collect()
    }

    /// Loss of one output and its gradient with respect to the output.
    pub fn loss_grad(&self, y: &[f64], sample: &Sample) -> (f64, Vec<f64>) {
        match self.kind {
            TaskKind::TeacherStudent => {
                let g: Vec<f64> = y.iter().zip(&sample.target).map(|(a, b)| a - b).collect();
                (0.5 * g.iter().map(|v| v * v).sum::<f64>(), g)
            }
            TaskKind::Clusters => {
                let p = softmax(y);
                let loss = -sample
                    .target
                    .iter()
                    .zip(&p)
                    .map(|(t, q)| {
                        if *t > 0.0 {
                            t * q.max(f64::MIN_POSITIVE).ln()
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>();
                let g = p.iter().zip(&sample.target).map(|(q, t)| q - t).collect();
                (loss, g)
            }
        }
    }
}
