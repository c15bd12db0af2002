//! Intra-region structure learning.
//!
//! An ISL layer runs two branches over the same input rows. The neighbor
//! branch (NFL) encodes center-minus-neighbor differences with a shared MLP
//! and max-pools over each neighborhood. The self branch (SFL) applies a
//! pointwise MLP. A gate computed from both branches mixes them per channel
//! (DFA).
//!
//! The first NFL layer is linear without bias, so `(F_i - F_j) W` is computed
//! as `F_i W - F_j W`. This trades a `(N k) x C_in` product for an `N x C_in`
//! one and gives the same values as building the edge tensor first.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::NeighborIndex;
use crate::tensor::{ParameterStore, ReduceKind, Session, Tape, Var};

/// Slope used by every leaky activation unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
/// Hidden width of the gate is `C / GATE_REDUCTION` (at least one).
pub const GATE_REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslConfig {
    pub k_hat: usize,
    pub widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl IslConfig {
    pub fn new(k_hat: usize, widths: Vec<usize>) -> Self {
        Self {
            k_hat,
            widths,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_hat == 0 {
            return Err(Error::Config("ISL needs k_hat >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("ISL widths must be positive, got {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

/// How the two branches are combined. Everything except `Dynamic` exists
/// for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned sigmoid gate.
    #[default]
    Dynamic,
    /// Fixed average of both branches.
    Linear,
    NflOnly,
    SflOnly,
}

impl Fusion {
    fn uses_nfl(self) -> bool {
        self != Fusion::SflOnly
    }

    fn uses_sfl(self) -> bool {
        self != Fusion::NflOnly
    }
}

/// Stacked edge differences: row `i * k + j` is `F[i] - F[nbr[i][j]]`.
pub fn edge_features(tape: &mut Tape, f: Var, nbr: &NeighborIndex) -> Result<Var> {
    let n = tape.value(f).rows();
    if nbr.len() != n {
        return Err(Error::Dimension {
            op: "edge_features",
            lhs: tape.shape(f).to_vec(),
            rhs: vec![nbr.len(), nbr.k()],
        });
    }
    tape.edge_diff(f, nbr.flat().to_vec(), nbr.k())
}

/// One ISL layer bound to a parameter prefix such as `isl0`.
#[derive(Clone, Debug)]
pub struct IslLayer {
    prefix: String,
    c_in: usize,
    cfg: IslConfig,
    fusion: Fusion,
}

impl IslLayer {
    pub fn new(prefix: impl Into<String>, c_in: usize, cfg: IslConfig, fusion: Fusion) -> Result<Self> {
        cfg.validate()?;
        if c_in == 0 {
            return Err(domain("ISL input width must be positive"));
        }
        Ok(Self {
            prefix: prefix.into(),
            c_in,
            cfg,
            fusion,
        })
    }

    pub fn config(&self) -> &IslConfig {
        &self.cfg
    }

    pub fn out_width(&self) -> usize {
        self.cfg.out_width()
    }

    fn gate_hidden(&self) -> usize {
        (self.out_width() / GATE_REDUCTION).max(1)
    }

    fn name(&self, branch: &str, j: usize) -> String {
        format!("{}/{branch}.{j}", self.prefix)
    }

    /// Registers this layer's parameters.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        let mut branches = Vec::new();
        if self.fusion.uses_nfl() {
            branches.push("mlp1");
        }
        if self.fusion.uses_sfl() {
            branches.push("mlp2");
        }
        for branch in branches {
            let mut fan_in = self.c_in;
            for (j, &w) in self.cfg.widths.iter().enumerate() {
                let p = self.name(branch, j);
                store.init_linear(&p, fan_in, w, false, rng);
                store.init_batchnorm(&format!("{p}.bn"), w);
                fan_in = w;
            }
        }
        if self.fusion == Fusion::Dynamic {
            let (c, h) = (self.out_width(), self.gate_hidden());
            let p0 = self.name("dfa", 0);
            store.init_linear(&p0, c, h, false, rng);
            store.init_batchnorm(&format!("{p0}.bn"), h);
            store.init_linear(&self.name("dfa", 1), h, c, true, rng);
        }
    }

    /// Linear (no bias), batchnorm, leaky activation.
    fn unit(&self, s: &mut Session, x: Var, branch: &str, j: usize) -> Result<Var> {
        let p = self.name(branch, j);
        let y = s.linear(x, &p, false)?;
        self.bn_act(s, y, &p)
    }

    fn bn_act(&self, s: &mut Session, y: Var, p: &str) -> Result<Var> {
        let y = s.batchnorm(y, &format!("{p}.bn"))?;
        Ok(s.tape.leaky_relu(y, self.cfg.leaky_slope))
    }

    /// Neighbor branch: `T'[i] = max_j MLP1(F[i] - F[nbr[i][j]])`.
    ///
    /// Single-layer MLPs never materialize the edge tensor.
    pub fn nfl(&self, s: &mut Session, f: Var, nbr: &NeighborIndex) -> Result<Var> {
        if self.cfg.widths.len() > 1 {
            return self.nfl_unfused(s, f, nbr);
        }
        check_rows(s, f, nbr)?;
        let p = self.name("mlp1", 0);
        let y = s.linear(f, &p, false)?;
        s.edge_max_bn(y, nbr.flat().to_vec(), nbr.k(), &format!("{p}.bn"), self.cfg.leaky_slope)
    }

    /// [`IslLayer::nfl`] through the explicit `(N k) x C` edge tensor.
    pub fn nfl_unfused(&self, s: &mut Session, f: Var, nbr: &NeighborIndex) -> Result<Var> {
        check_rows(s, f, nbr)?;
        let n = nbr.len();
        let p = self.name("mlp1", 0);
        let y = s.linear(f, &p, false)?;
        let e = edge_features(&mut s.tape, y, nbr)?;
        let mut h = self.bn_act(s, e, &p)?;
        for j in 1..self.cfg.widths.len() {
            h = self.unit(s, h, "mlp1", j)?;
        }
        let c = self.out_width();
        let h = s.tape.reshape(h, vec![n, nbr.k(), c])?;
        s.tape.reduce(ReduceKind::Max, h, 1)
    }

    /// Self branch: `T'' = MLP2(F)` row by row.
    pub fn sfl(&self, s: &mut Session, f: Var) -> Result<Var> {
        let mut h = f;
        for j in 0..self.cfg.widths.len() {
            h = self.unit(s, h, "mlp2", j)?;
        }
        Ok(h)
    }

    /// Gate `w = sigmoid(Phi(T' + T''))`.
    pub fn gate(&self, s: &mut Session, t1: Var, t2: Var) -> Result<Var> {
        let sum = s.tape.add(t1, t2)?;
        let p0 = self.name("dfa", 0);
        let h = s.linear(sum, &p0, false)?;
        let h = s.batchnorm(h, &format!("{p0}.bn"))?;
        let z = s.linear(h, &self.name("dfa", 1), true)?;
        Ok(s.tape.sigmoid(z))
    }

    /// `T = w * T' + (1 - w) * T''`, evaluated as `T'' + w * (T' - T'')`.
    pub fn dfa(&self, s: &mut Session, t1: Var, t2: Var) -> Result<Var> {
        let w = self.gate(s, t1, t2)?;
        mix(&mut s.tape, w, t1, t2)
    }

    pub fn forward(&self, s: &mut Session, f: Var, nbr: &NeighborIndex) -> Result<Var> {
        let c_in = s.tape.value(f).cols();
        if c_in != self.c_in {
            return Err(Error::Dimension {
                op: "isl",
                lhs: s.tape.shape(f).to_vec(),
                rhs: vec![self.c_in],
            });
        }
        match self.fusion {
            Fusion::NflOnly => self.nfl(s, f, nbr),
            Fusion::SflOnly => self.sfl(s, f),
            Fusion::Linear => {
                let (t1, t2) = (self.nfl(s, f, nbr)?, self.sfl(s, f)?);
                let sum = s.tape.add(t1, t2)?;
                Ok(s.tape.scale(sum, 0.5))
            }
            Fusion::Dynamic => {
                let (t1, t2) = (self.nfl(s, f, nbr)?, self.sfl(s, f)?);
                self.dfa(s, t1, t2)
            }
        }
    }
}

fn check_rows(s: &Session, f: Var, nbr: &NeighborIndex) -> Result<()> {
    if nbr.len() != s.tape.value(f).rows() {
        return Err(Error::Dimension {
            op: "nfl",
            lhs: s.tape.shape(f).to_vec(),
            rhs: vec![nbr.len(), nbr.k()],
        });
    }
    Ok(())
}

/// `t2 + w * (t1 - t2)`.
pub fn mix(tape: &mut Tape, w: Var, t1: Var, t2: Var) -> Result<Var> {
    let d = tape.sub(t1, t2)?;
    let wd = tape.mul(w, d)?;
    tape.add(t2, wd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::knn;
    use crate::tensor::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn edge_features_definition() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let nbr = NeighborIndex::from_rows(vec![vec![0, 1], vec![1, 0]]).unwrap();
        let e = edge_features(&mut tape, f, &nbr).unwrap();
        assert_eq!(tape.value(e).data(), &[0.0, -2.0, 0.0, 2.0]);
        let short = NeighborIndex::from_rows(vec![vec![0]]).unwrap();
        assert!(matches!(edge_features(&mut tape, f, &short), Err(Error::Dimension { .. })));
    }

    #[test]
    fn edge_features_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(8, 4, &mut rng);
        let pts: Vec<[f64; 3]> = (0..8).map(|i| [x.at(i, 0), x.at(i, 1), x.at(i, 2)]).collect();
        let nbr = knn(&pts, 3).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let e = edge_features(&mut tape, f, &nbr).unwrap();
        let ev = tape.value(e);
        for i in 0..8 {
            for j in 0..3 {
                for c in 0..4 {
                    let want = x.at(i, c) - x.at(nbr.row(i)[j], c);
                    assert_eq!(ev.at(i * 3 + j, c), want);
                }
            }
        }
    }

    #[test]
    fn self_only_neighborhood_gives_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = IslLayer::new("isl0", 3, IslConfig::new(1, vec![4]), Fusion::Dynamic).unwrap();
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let x = rand_tensor(5, 3, &mut rng);
        let nbr = NeighborIndex::from_rows((0..5).map(|i| vec![i]).collect()).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let f = s.tape.constant(x);
        let t1 = layer.nfl(&mut s, f, &nbr).unwrap();
        let v = s.tape.value(t1);
        for i in 1..5 {
            assert_eq!(v.row(i), v.row(0));
        }
    }

    #[test]
    fn equal_branches_pass_through_the_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = IslLayer::new("isl0", 4, IslConfig::new(2, vec![4]), Fusion::Dynamic).unwrap();
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let x = rand_tensor(6, 4, &mut rng);
        let mut s = Session::new(&mut store, Mode::Train);
        let t = s.tape.constant(x.clone());
        let out = layer.dfa(&mut s, t, t).unwrap();
        assert_eq!(s.tape.value(out), &x);
    }

    #[test]
    fn linear_fusion_and_single_branch_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (fusion, has1, has2, hasg) in [
            (Fusion::SflOnly, false, true, false),
            (Fusion::NflOnly, true, false, false),
            (Fusion::Linear, true, true, false),
            (Fusion::Dynamic, true, true, true),
        ] {
            let layer = IslLayer::new("isl3", 2, IslConfig::new(2, vec![3]), fusion).unwrap();
            let mut store = ParameterStore::new();
            layer.init(&mut store, &mut rng);
            assert_eq!(store.contains("isl3/mlp1.0.W"), has1);
            assert_eq!(store.contains("isl3/mlp2.0.W"), has2);
            assert_eq!(store.contains("isl3/dfa.0.W"), hasg);
        }
    }

    #[test]
    fn fused_neighbor_branch_matches_unfused() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layer = IslLayer::new("isl0", 4, IslConfig::new(3, vec![5]), Fusion::Dynamic).unwrap();
        let x = rand_tensor(9, 4, &mut rng);
        let pts: Vec<[f64; 3]> = (0..9).map(|i| [x.at(i, 0), x.at(i, 1), x.at(i, 3)]).collect();
        let nbr = knn(&pts, 3).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let mut base = ParameterStore::new();
            layer.init(&mut base, &mut rng);
            // a negative gamma exercises minimum selection
            base.get_mut("isl0/mlp1.0.bn.gamma").unwrap().data_mut()[1] = -0.7;
            let mut results = Vec::new();
            for fused in [true, false] {
                let mut store = base.clone();
                let mut s = Session::new(&mut store, mode);
                let f = s.tape.leaf(x.clone(), true);
                let t = if fused { layer.nfl(&mut s, f, &nbr) } else { layer.nfl_unfused(&mut s, f, &nbr) }.unwrap();
                let w = s.tape.constant(rand_tensor(9, 5, &mut ChaCha8Rng::seed_from_u64(4)));
                let prod = s.tape.mul(t, w).unwrap();
                let loss = s.tape.sum_all(prod).unwrap();
                s.backward(loss).unwrap();
                let out = s.tape.value(t).clone();
                let gx = s.tape.grad(f).unwrap().to_vec();
                results.push((out, gx, store));
            }
            let (a, b) = (&results[0], &results[1]);
            assert_eq!(a.0, b.0, "{mode:?}");
            for (u, v) in a.1.iter().zip(&b.1) {
                assert!((u - v).abs() < 1e-10, "{mode:?}: {u} vs {v}");
            }
            for name in a.2.trainable_names() {
                for (u, v) in a.2.grad(name).unwrap().iter().zip(b.2.grad(name).unwrap()) {
                    assert!((u - v).abs() < 1e-10, "{name}");
                }
            }
            assert_eq!(a.2.bn_stats("isl0/mlp1.0.bn").unwrap(), b.2.bn_stats("isl0/mlp1.0.bn").unwrap());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(IslConfig::new(0, vec![4]).validate().is_err());
        assert!(IslConfig::new(3, vec![]).validate().is_err());
        assert!(IslConfig::new(3, vec![4, 0]).validate().is_err());
    }
}
