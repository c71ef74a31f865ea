//! Closed-form 2D rigid alignment (Procrustes, no scale) between
//! corresponding landmark centers.

use crate::geometry::PoseSE2;
use crate::{Error, Result};

/// Result of a rigid alignment; `translation_only` flags the degenerate
/// case where the correspondences carry no rotational information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment2D {
    pub pose: PoseSE2,
    pub translation_only: bool,
}

/// Least-squares rigid transform T minimizing
/// sum_i || T * current_i - previous_i ||^2, solved in closed form; the
/// returned pose is the exact global optimum of that objective.
pub fn estimate_alignment(matches: &[((f64, f64), (f64, f64))]) -> Result<Alignment2D> {
    if matches.len() < 2 {
        return Err(Error::InsufficientCorrespondences {
            needed: 2,
            got: matches.len(),
        });
    }
    let n = matches.len() as f64;
    let (mut ccx, mut ccy, mut cpx, mut cpy) = (0.0, 0.0, 0.0, 0.0);
    for ((cx, cy), (px, py)) in matches {
        ccx += cx;
        ccy += cy;
        cpx += px;
        cpy += py;
    }
    ccx /= n;
    ccy /= n;
    cpx /= n;
    cpy /= n;

    // Cross-covariance terms of the centered sets.
    let mut a = 0.0; // sum cur' . prev'
    let mut b = 0.0; // sum cur' x prev'
    let mut spread = 0.0;
    for ((cx, cy), (px, py)) in matches {
        let (ux, uy) = (cx - ccx, cy - ccy);
        let (vx, vy) = (px - cpx, py - cpy);
        a += ux * vx + uy * vy;
        b += ux * vy - uy * vx;
        spread += ux * ux + uy * uy + vx * vx + vy * vy;
    }

    if (a * a + b * b).sqrt() < 1e-12 * spread.max(1e-12) {
        // Coincident point sets on either side: rotation unobservable.
        return Ok(Alignment2D {
            pose: PoseSE2::new(cpx - ccx, cpy - ccy, 0.0),
            translation_only: true,
        });
    }

    let theta = b.atan2(a);
    let (s, c) = theta.sin_cos();
    let tx = cpx - (c * ccx - s * ccy);
    let ty = cpy - (s * ccx + c * ccy);
    Ok(Alignment2D {
        pose: PoseSE2::new(tx, ty, theta),
        translation_only: false,
    })
}

/// Sum of squared correspondence errors under a candidate pose.
pub fn alignment_residual(matches: &[((f64, f64), (f64, f64))], pose: &PoseSE2) -> f64 {
    matches
        .iter()
        .map(|(cur, prev)| {
            let mapped = pose.transform(*cur);
            (mapped.0 - prev.0).powi(2) + (mapped.1 - prev.1).powi(2)
        })
        .sum()
}
