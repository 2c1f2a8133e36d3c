//! Central finite-difference oracle for graph gradients.
//!
//! The tape is replayed in `f64` for both the analytic and the numerical
//! derivative: at a step of 1e-3, `f32` rounding in the output alone is of the
//! same order as the tolerance being checked. Central differences at `h` and
//! `h / 2` are combined by one Richardson step, so the curvature of
//! layer-normed stacks does not leak into the comparison.

use super::graph::{Graph, NodeId, Op};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8 * max(1, |output|))`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose perturbation moved a relu/abs input across zero.
    pub skipped_kinks: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: Option<(f64, f64)>,
}

fn kink_signature(g: &mut Graph<f64>) -> Result<u64> {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    g.replay_with(|index, op: &Op, args: &[&Tensor<f64>]| {
        if op.has_kink() {
            h = (h ^ index as u64).wrapping_mul(0x100_0000_01b3);
            for &v in args[0].data() {
                let s = if v > 0.0 {
                    1
                } else if v < 0.0 {
                    2
                } else {
                    3
                };
                h = (h ^ s).wrapping_mul(0x100_0000_01b3);
            }
        }
    })?;
    Ok(h)
}

/// The floor grows with the output because the rounding noise of a
/// difference quotient does: at `|output| = 50` a derivative of exactly zero
/// already reads as ~1e-11.
pub fn relative_error(analytic: f64, numeric: f64, output: f64) -> f64 {
    let floor = 1e-8 * output.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of the scalar `output` against central
/// differences for every entry of every parameter in the graph.
pub fn finite_difference_check<F: Scalar>(
    graph: &Graph<F>,
    output: NodeId,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::arg(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut g: Graph<f64> = graph.cast()?;
    let analytic = g.clone().backward(output)?;
    let base = kink_signature(&mut g)?;
    let value = g.scalar(output);
    let params: Vec<(String, NodeId)> = g
        .param_nodes()
        .iter()
        .map(|(k, &v)| (k.clone(), v))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
        worst_values: None,
    };
    for (name, id) in params {
        let n = g.nodes[id.index()].value.numel();
        for i in 0..n {
            let original = g.nodes[id.index()].value.data()[i];
            let mut kink = false;
            let mut probe = |g: &mut Graph<f64>, delta: f64| -> Result<f64> {
                g.nodes[id.index()].value.data_mut()[i] = original + delta;
                kink |= kink_signature(g)? != base;
                Ok(g.scalar(output))
            };
            let d1 = (probe(&mut g, epsilon)? - probe(&mut g, -epsilon)?) / (2.0 * epsilon);
            let d2 = (probe(&mut g, epsilon / 2.0)? - probe(&mut g, -epsilon / 2.0)?) / epsilon;
            g.nodes[id.index()].value.data_mut()[i] = original;
            if kink {
                report.skipped_kinks += 1;
                continue;
            }
            // Richardson step: cancels the h^2 term of the central difference.
            let numeric = (4.0 * d2 - d1) / 3.0;
            let a = analytic[&name].data()[i];
            let rel = relative_error(a, numeric, value);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    g.replay()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let mut g = Graph::<f32>::new();
        let w = g.param_value("w", &Tensor::scalar(0.7));
        let y = g.scale(w, 2.0).unwrap();
        let r = finite_difference_check(&g, y, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn floor_scales_with_the_output() {
        assert_eq!(relative_error(2e-11, 0.0, 1.0), 2e-3);
        assert!((relative_error(2e-11, 0.0, 50.0) - 4e-5).abs() < 1e-12);
        assert_eq!(relative_error(1.0, 1.001, 50.0), relative_error(1.0, 1.001, 1.0));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let mut g = Graph::<f32>::new();
        let w = g.param_value("w", &Tensor::scalar(0.7));
        assert!(finite_difference_check(&g, w, 0.0).is_err());
        assert!(finite_difference_check(&g, w, -1.0).is_err());
    }

    #[test]
    fn entries_near_a_kink_are_skipped() {
        let mut g = Graph::<f32>::new();
        let w = g.param_value("w", &Tensor::new(vec![2], vec![1e-4, 0.5]).unwrap());
        let r = g.relu(w).unwrap();
        let s = g.sum(r).unwrap();
        let report = finite_difference_check(&g, s, 1e-3).unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }
}
