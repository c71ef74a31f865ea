//! Iterated measurement update: MAP estimation over the 18-dim error
//! state with re-linearization at every iterate.

use nalgebra::SVector;

use super::{IekfConfig, ResidualTerm, StateCovariance};
use crate::geometry::{boxminus, boxplus, so3_right_jacobian_inv, NavState, ERROR_STATE_DIM};

type Vec18 = SVector<f64, ERROR_STATE_DIM>;

/// Jacobian of `(pred [+] delta) [-] pred` in the tangent at the iterate:
/// identity on vector blocks, inverse right Jacobian on the attitude block.
fn prior_jacobian(tangent: &Vec18) -> StateCovariance {
    let mut j = StateCovariance::identity();
    let theta = tangent.fixed_rows::<3>(6).into_owned();
    j.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&so3_right_jacobian_inv(theta));
    j
}

/// MAP objective: prior Mahalanobis term plus the weighted residual sum.
fn objective(
    state: &NavState,
    pred: &NavState,
    prior_info: &StateCovariance,
    residuals: &[ResidualTerm],
) -> f64 {
    let d = boxminus(state, pred);
    let mut cost = (d.transpose() * prior_info * d)[(0, 0)];
    for r in residuals {
        cost += r.z * r.z / r.noise;
    }
    cost
}

/// Iterated Kalman update.
///
/// `residual_fn` recomputes the measurement set at any candidate state;
/// iteration stops when the tangent step drops below `convergence_eps`
/// or after `max_iterations`. A step that fails to reduce the MAP
/// objective is halved and ultimately rejected, so the objective never
/// increases across accepted iterates. With no residuals at the
/// prediction the update is skipped entirely.
pub fn iekf_update<F>(
    state_pred: &NavState,
    cov_pred: &StateCovariance,
    mut residual_fn: F,
    cfg: &IekfConfig,
) -> (NavState, StateCovariance)
where
    F: FnMut(&NavState) -> Vec<ResidualTerm>,
{
    let max_iterations = cfg.max_iterations;
    let convergence_eps = cfg.convergence_eps;
    let prior_info = match cov_pred.cholesky() {
        Some(chol) => chol.inverse(),
        None => {
            // Regularize a numerically defective prior.
            let bumped = cov_pred + StateCovariance::identity() * 1e-9;
            match bumped.cholesky() {
                Some(chol) => chol.inverse(),
                None => return (*state_pred, *cov_pred),
            }
        }
    };

    let mut state = *state_pred;
    let mut residuals = residual_fn(&state);
    if residuals.is_empty() {
        return (state, *cov_pred);
    }
    let mut cost = objective(&state, state_pred, &prior_info, &residuals);
    let mut info_meas = accumulate_information(&residuals).0;

    for _ in 0..max_iterations {
        let (hth, htz) = accumulate_information(&residuals);
        let tangent = boxminus(&state, state_pred);
        let j = prior_jacobian(&tangent);
        let a = j.transpose() * prior_info * j + hth;
        let b = j.transpose() * prior_info * tangent + htz;
        let step = match a.cholesky() {
            Some(chol) => -chol.solve(&b),
            None => break, // singular system: keep the best iterate so far
        };

        // Halve until the true objective decreases; reject a dead step.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..6 {
            let candidate = boxplus(&state, &(step * scale));
            let cand_res = residual_fn(&candidate);
            if cand_res.is_empty() {
                break;
            }
            let cand_cost = objective(&candidate, state_pred, &prior_info, &cand_res);
            if cand_cost <= cost + 1e-15 {
                state = candidate;
                residuals = cand_res;
                cost = cand_cost;
                info_meas = accumulate_information(&residuals).0;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || (step.norm() * scale) < convergence_eps {
            break;
        }
    }

    // Posterior covariance in information form: (H^T R^-1 H + P^-1)^-1,
    // which equals (I - K H) P of the Kalman form.
    let post = match (info_meas + prior_info).cholesky() {
        Some(chol) => chol.inverse(),
        None => *cov_pred,
    };
    let post = 0.5 * (post + post.transpose());
    (state, post)
}

fn accumulate_information(residuals: &[ResidualTerm]) -> (StateCovariance, Vec18) {
    let mut hth = StateCovariance::zeros();
    let mut htz = Vec18::zeros();
    let mut nz: Vec<usize> = Vec::with_capacity(6);
    for r in residuals {
        let w = 1.0 / r.noise;
        // Measurement rows are sparse; accumulate only nonzero entries.
        nz.clear();
        nz.extend((0..ERROR_STATE_DIM).filter(|&i| r.h[i] != 0.0));
        for &i in &nz {
            htz[i] += w * r.z * r.h[i];
            let whi = w * r.h[i];
            for &j in &nz {
                hth[(i, j)] += whi * r.h[j];
            }
        }
    }
    (hth, htz)
}
