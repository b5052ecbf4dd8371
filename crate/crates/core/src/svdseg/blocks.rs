use crate::error::{domain, GoatError, Result};
use crate::numkit::{svd, Matrix, SvdFactors};

/// Singular triples `start..start + width` of a weight.
#[derive(Clone, Debug)]
pub struct SvdBlock {
    pub start: usize,
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdBlock {
    pub fn width(&self) -> usize {
        self.sigma.len()
    }

    /// `U_i Σ_i V_iᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut out = Matrix::zeros(self.u.rows(), self.v.rows());
        for (j, &s) in self.sigma.iter().enumerate() {
            out.add_outer(s, &self.u.col(j), &self.v.col(j))
                .expect("block factors have consistent shapes");
        }
        out
    }

    /// Frobenius norm from the spectrum alone: `sqrt(Σ σ²)`.
    pub fn spectral_norm_fro(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Rank-r blocks covering the whole spectrum; the last block is narrower
/// when `r` does not divide `min(m, n)`.
#[derive(Clone, Debug)]
pub struct BlockDecomposition {
    pub rank: usize,
    pub blocks: Vec<SvdBlock>,
}

impl BlockDecomposition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Sum of all blocks, i.e. the decomposed weight.
    pub fn reconstruct(&self) -> Matrix {
        let mut blocks = self.blocks.iter();
        let first = blocks
            .next()
            .expect("decomposition is never empty")
            .reconstruct();
        blocks.fold(first, |acc, b| {
            acc.add(&b.reconstruct()).expect("same shapes")
        })
    }

    /// `‖W₀ − blockᵢ‖_F` for every block, evaluated densely.
    pub fn residuals(&self) -> Vec<f64> {
        let w0 = self.reconstruct();
        self.blocks
            .iter()
            .map(|b| {
                w0.sub(&b.reconstruct())
                    .expect("same shapes")
                    .frobenius_norm()
            })
            .collect()
    }
}

pub fn block_decompose(w0: &Matrix, r: usize) -> Result<BlockDecomposition> {
    let h = w0.rows().min(w0.cols());
    if r == 0 || r > h {
        return domain(format!("block rank must be in 1..={h}, got {r}"));
    }
    block_decompose_factors(&svd(w0)?, r)
}

pub fn block_decompose_factors(factors: &SvdFactors, r: usize) -> Result<BlockDecomposition> {
    let h = factors.rank_bound();
    if r == 0 || r > h {
        return domain(format!("block rank must be in 1..={h}, got {r}"));
    }
    let blocks = (0..h)
        .step_by(r)
        .map(|start| {
            let width = r.min(h - start);
            Ok(SvdBlock {
                start,
                u: factors.u.col_block(start, width)?,
                sigma: factors.sigma[start..start + width].to_vec(),
                v: factors.v.col_block(start, width)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockDecomposition { rank: r, blocks })
}

/// Index of the block that best approximates the weight.
///
/// The leading block is optimal by Eckart-Young; this evaluates every
/// block's residual and fails if that does not hold numerically. Ties go
/// to the lowest index.
pub fn best_rank_r_block(decomp: &BlockDecomposition) -> Result<usize> {
    if decomp.is_empty() {
        return domain("empty block decomposition");
    }
    let residuals = decomp.residuals();
    let scale = residuals.iter().fold(1.0f64, |m, r| m.max(*r));
    let tol = 1e-12 * scale;
    let mut best = 0;
    for (i, &r) in residuals.iter().enumerate().skip(1) {
        if r < residuals[best] - tol {
            best = i;
        }
    }
    if best != 0 {
        return Err(GoatError::Contract(format!(
            "block {best} has residual {:.6e} below the leading block's {:.6e}",
            residuals[best], residuals[0]
        )));
    }
    Ok(0)
}
