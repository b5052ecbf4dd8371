use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::moe::{BalanceContext, GoatLayer};
use crate::numkit::{finite_diff_grad, Matrix};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences with
/// `FD_STEP` carry roundoff of about `ε·|L|/h ≈ 2e-11` per entry, so a block
/// whose true gradient vanishes (e.g. the balance term when every expert is
/// active) is held to an absolute `1e-5 · GRAD_FLOOR = 1e-9` instead.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Relative error of one analytic gradient block against finite differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    let diff = a.sub(b)?.frobenius_norm();
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

fn objective(
    layer: &GoatLayer,
    x: &[f64],
    target: &[f64],
    indices: &[usize],
    ctx: &BalanceContext,
) -> f64 {
    let (y, route) = layer
        .forward_fixed(x, indices)
        .expect("fixture shapes are consistent");
    let task: f64 = y
        .iter()
        .zip(target)
        .map(|(a, b)| 0.5 * (a - b).powi(2))
        .sum();
    task + layer.balance_coeff * ctx.token_loss(&route.logits)
}

/// Check every gradient block of `layer` on the squared loss
/// `½‖y − target‖² + coeff·L_b`, with the top-k set frozen at the one
/// chosen for `x`. A final block checks the balance term alone (task loss
/// removed, coefficient 1).
pub fn check_layer_gradients(
    layer: &GoatLayer,
    x: &[f64],
    target: &[f64],
) -> Result<Vec<BlockCheck>> {
    let (y, route) = layer.forward(x)?;
    let g_y: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
    let ctx = BalanceContext::single(&route, layer.k());
    let grads = layer.backward_with(x, &route, &g_y, &ctx)?;
    let sel = route.indices.clone();
    let mut out = Vec::new();
    let mut push = |name: String, analytic: &Matrix, fd: Matrix| -> Result<()> {
        out.push(BlockCheck {
            name,
            rel_err: analytic.sub(&fd)?.frobenius_norm()
                / analytic
                    .frobenius_norm()
                    .max(fd.frobenius_norm())
                    .max(GRAD_FLOOR),
            analytic_norm: analytic.frobenius_norm(),
        });
        Ok(())
    };

    for i in 0..layer.num_experts() {
        let fd_b = finite_diff_grad(
            |b| {
                let mut l = layer.clone();
                l.experts[i].b = b.clone();
                objective(&l, x, target, &sel, &ctx)
            },
            &layer.experts[i].b,
            FD_STEP,
        )?;
        push(format!("b[{i}]"), &grads.g_b[i], fd_b)?;
        let fd_a = finite_diff_grad(
            |a| {
                let mut l = layer.clone();
                l.experts[i].a = a.clone();
                objective(&l, x, target, &sel, &ctx)
            },
            &layer.experts[i].a,
            FD_STEP,
        )?;
        push(format!("a[{i}]"), &grads.g_a[i], fd_a)?;
    }
    let fd_wz = finite_diff_grad(
        |wz| {
            let mut l = layer.clone();
            l.router.wz = wz.clone();
            objective(&l, x, target, &sel, &ctx)
        },
        &layer.router.wz,
        FD_STEP,
    )?;
    push("router".into(), &grads.g_wz, fd_wz)?;

    let mut balance_only = layer.clone();
    balance_only.balance_coeff = 1.0;
    let zero = vec![0.0; g_y.len()];
    let g_bal = balance_only.backward_with(x, &route, &zero, &ctx)?;
    let fd_bal = finite_diff_grad(
        |wz| {
            let mut l = balance_only.clone();
            l.router.wz = wz.clone();
            let logits = l.router.logits(x).expect("finite");
            ctx.token_loss(&logits)
        },
        &layer.router.wz,
        FD_STEP,
    )?;
    push("balance".into(), &g_bal.g_wz, fd_bal)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{build_goat_layer, LayerConfig, Variant};
    use crate::numkit::Rng;

    #[test]
    fn every_block_passes_on_a_goat_s_fixture() {
        let mut rng = Rng::new(40);
        let w0 = rng.normal_matrix(5, 7, 1.0);
        let cfg = LayerConfig {
            experts: 3,
            k: 2,
            rank: 3,
            variant: Variant::GoatS,
            balance_coeff: 0.5,
            ..LayerConfig::default()
        };
        let mut layer = build_goat_layer(&w0, &cfg, &mut rng).unwrap();
        layer.router.wz = rng.normal_matrix(3, 7, 1.0);
        let x = rng.normal_vec(7, 1.0);
        let target = rng.normal_vec(5, 1.0);
        let checks = check_layer_gradients(&layer, &x, &target).unwrap();
        assert_eq!(checks.len(), 2 * 3 + 2);
        for c in &checks {
            assert!(c.rel_err < 1e-5, "{c:?}");
        }
    }

    #[test]
    fn vanishing_balance_gradient_with_all_experts_active() {
        let mut rng = Rng::new(41);
        let w0 = rng.normal_matrix(4, 5, 1.0);
        let cfg = LayerConfig {
            experts: 2,
            k: 2,
            rank: 2,
            balance_coeff: 0.5,
            ..LayerConfig::default()
        };
        let mut layer = build_goat_layer(&w0, &cfg, &mut rng).unwrap();
        layer.router.wz = rng.normal_matrix(2, 5, 1.0);
        let checks =
            check_layer_gradients(&layer, &rng.normal_vec(5, 1.0), &rng.normal_vec(4, 1.0))
                .unwrap();
        let balance = checks.iter().find(|c| c.name == "balance").unwrap();
        assert!(balance.analytic_norm < 1e-12);
        assert!(balance.rel_err < 1e-5, "{balance:?}");
    }

    #[test]
    fn relative_error_of_zero_blocks() {
        let z = Matrix::zeros(2, 2);
        assert_eq!(relative_error(&z, &z).unwrap(), 0.0);
        assert_eq!(relative_error(&Matrix::identity(2), &z).unwrap(), 1.0);
    }
}
