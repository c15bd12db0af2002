//! Spreading representative features back to every point.

use crate::error::{domain, Result};
use crate::geometry::{idw_weights, nearest_anchors, Point};
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

/// Three anchor rows and their weights for each query point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterpPlan {
    pub rows: Vec<usize>,
    pub weights: Vec<f64>,
}

impl InterpPlan {
    /// Plans interpolation of `queries` from `anchors`; anchor `u` is read
    /// from feature row `row_offset + u`.
    pub fn build(queries: &[Point], anchors: &[Point], row_offset: usize) -> Result<Self> {
        if anchors.len() < 3 {
            return Err(domain(format!("interpolation needs at least 3 anchors, got {}", anchors.len())));
        }
        let mut plan = Self {
            rows: Vec::with_capacity(queries.len() * 3),
            weights: Vec::with_capacity(queries.len() * 3),
        };
        for q in queries {
            let near = nearest_anchors(q, anchors, 3);
            let w = idw_weights(q, &[anchors[near[0]], anchors[near[1]], anchors[near[2]]]);
            plan.rows.extend(near.iter().map(|u| u + row_offset));
            plan.weights.extend(w);
        }
        Ok(plan)
    }

    pub fn extend(&mut self, other: InterpPlan) {
        self.rows.extend(other.rows);
        self.weights.extend(other.weights);
    }

    pub fn queries(&self) -> usize {
        self.rows.len() / 3
    }
}

/// `T[v] + sum_u weight[v][u] * ghat[row[v][u]]`.
pub fn interpolate_residual(tape: &mut Tape, t: Var, ghat: Var, plan: &InterpPlan) -> Result<Var> {
    let n = plan.queries();
    let c = tape.value(ghat).cols();
    let picked = tape.gather(ghat, plan.rows.clone())?;
    let w = tape.constant(Tensor::new(vec![plan.weights.len()], plan.weights.clone())?);
    let scaled = tape.scale_rows(picked, w)?;
    let grouped = tape.reshape(scaled, vec![n, 3, c])?;
    let spread = tape.reduce(ReduceKind::Sum, grouped, 1)?;
    tape.add(t, spread)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_anchors() {
        assert!(InterpPlan::build(&[[0.0; 3]], &[[0.0; 3], [1.0; 3]], 0).is_err());
    }

    #[test]
    fn coincident_point_copies_its_anchor() {
        let anchors = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let plan = InterpPlan::build(&[[1.0, 0.0, 0.0]], &anchors, 10).unwrap();
        assert_eq!(plan.rows[0], 11);
        assert_eq!(plan.weights, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_features_leave_input() {
        let anchors = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let queries = [[0.3, 0.2, 0.1], [0.9, 0.9, 0.9]];
        let plan = InterpPlan::build(&queries, &anchors, 0).unwrap();
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::zeros(vec![4, 2]));
        let out = interpolate_residual(&mut tape, t, g, &plan).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
