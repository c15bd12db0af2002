//! Score-weighted region features and attention across regions.

use super::partition::RegionPartition;
use crate::error::{Error, Result};
use crate::tensor::{Session, Tape, Var};

/// Rows `scores[centers[r]] * t[rows[r]]` for each `r`.
pub fn scaled_rows(tape: &mut Tape, t: Var, scores: Var, rows: Vec<usize>, centers: Vec<usize>) -> Result<Var> {
    if rows.len() != centers.len() {
        return Err(Error::Dimension {
            op: "scaled_rows",
            lhs: vec![rows.len()],
            rhs: vec![centers.len()],
        });
    }
    let g = tape.gather(t, rows)?;
    let s = tape.gather(scores, centers)?;
    tape.scale_rows(g, s)
}

/// The `S x k` block of scaled member features, stacked as `(S k) x C`.
/// Row `i * k + j` is `scores[centroid_i] * T[members[i][j]]`; `offset`
/// shifts every index when `t` holds several clouds.
pub fn scale_region_features(tape: &mut Tape, t: Var, scores: Var, partition: &RegionPartition, offset: usize) -> Result<Var> {
    let k = partition.k();
    let rows = partition.members.iter().flatten().map(|&j| j + offset).collect();
    let centers = partition
        .centroids
        .iter()
        .flat_map(|&c| std::iter::repeat(c + offset).take(k))
        .collect();
    scaled_rows(tape, t, scores, rows, centers)
}

/// Attention output and the row-stochastic weight matrix of every block.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Parameter names used by [`slot_attention`] under `prefix`.
pub fn attention_param_prefixes(prefix: &str) -> [String; 4] {
    ["q", "k", "v", "z"].map(|p| format!("{prefix}/att.{p}"))
}

/// Independent attention inside consecutive blocks of `block_rows` rows.
///
/// For a block `G` the output is `softmax(G Wq (G Wk)^T) G Wv Wz`. The logits
/// are not rescaled by the channel count.
pub fn slot_attention(s: &mut Session, prefix: &str, g: Var, block_rows: usize) -> Result<Attended> {
    let rows = s.tape.value(g).rows();
    if block_rows == 0 || rows % block_rows != 0 {
        return Err(Error::Dimension {
            op: "slot_attention",
            lhs: s.tape.shape(g).to_vec(),
            rhs: vec![block_rows],
        });
    }
    let [pq, pk, pv, pz] = attention_param_prefixes(prefix);
    let q = s.linear(g, &pq, false)?;
    let k = s.linear(g, &pk, false)?;
    let v = s.linear(g, &pv, false)?;
    let blocks = rows / block_rows;
    let mut outs = Vec::with_capacity(blocks);
    let mut weights = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let (qb, kb, vb) = if blocks == 1 {
            (q, k, v)
        } else {
            let idx: Vec<usize> = (b * block_rows..(b + 1) * block_rows).collect();
            (
                s.tape.gather(q, idx.clone())?,
                s.tape.gather(k, idx.clone())?,
                s.tape.gather(v, idx)?,
            )
        };
        let logits = s.tape.matmul_t(qb, kb, false, true)?;
        let w = s.tape.softmax_rows(logits)?;
        outs.push(s.tape.matmul(w, vb)?);
        weights.push(w);
    }
    let mixed = if blocks == 1 { outs[0] } else { s.tape.concat_rows(&outs)? };
    let out = s.linear(mixed, &pz, false)?;
    Ok(Attended { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, ParameterStore, Tensor};

    fn scalar_store(q: f64, k: f64, v: f64, z: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, val) in [("q", q), ("k", k), ("v", v), ("z", z)] {
            store.insert(format!("a/att.{name}.W"), Tensor::scalar(val).reshape(vec![1, 1]).unwrap(), true);
        }
        store
    }

    #[test]
    fn single_region_is_a_linear_map() {
        let mut store = scalar_store(0.3, -0.7, 2.0, 0.5);
        let mut s = Session::new(&mut store, Mode::Eval);
        let g = s.tape.constant(Tensor::new(vec![1, 1], vec![1.5]).unwrap());
        let a = slot_attention(&mut s, "a", g, 1).unwrap();
        assert_eq!(s.tape.value(a.weights[0]).data(), &[1.0]);
        assert!((s.tape.value(a.out).data()[0] - 1.5 * 2.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_regions_attend_uniformly() {
        let mut store = scalar_store(0.3, -0.7, 2.0, 0.5);
        let mut s = Session::new(&mut store, Mode::Eval);
        let g = s.tape.constant(Tensor::new(vec![4, 1], vec![0.2; 4]).unwrap());
        let a = slot_attention(&mut s, "a", g, 4).unwrap();
        for w in s.tape.value(a.weights[0]).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_ragged_blocks() {
        let mut store = scalar_store(1.0, 1.0, 1.0, 1.0);
        let mut s = Session::new(&mut store, Mode::Eval);
        let g = s.tape.constant(Tensor::zeros(vec![3, 1]));
        assert!(slot_attention(&mut s, "a", g, 2).is_err());
    }
}
