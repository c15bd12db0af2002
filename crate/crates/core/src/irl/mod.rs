//! Inter-region relation learning.
//!
//! A forward pass scores every point, partitions the cloud into `S` regions
//! of `k` points, scales each region by its centroid's score (the only path
//! through which the discrete partition receives gradient), picks `m`
//! representatives per region, runs attention among the `t`-th
//! representatives of all regions for every slot `t`, and finally spreads
//! the attended features back to every point by inverse squared distance
//! weighting over the three nearest representatives, added to the input.
//!
//! Attention logits are not divided by `sqrt(C)`. With large channel counts
//! and unnormalized inputs the softmax can saturate; the batchnorm layers
//! upstream keep features near unit scale.
//!
//! Rows of the feature matrix may hold several clouds back to back; the
//! caller passes each cloud's coordinates in the same order.

pub mod attention;
pub mod bench;
pub mod interpolate;
pub mod partition;
pub mod sampler;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{scale_region_features, scaled_rows, slot_attention, Attended};
pub use interpolate::{interpolate_residual, InterpPlan};
pub use partition::{
    partition, partition_dilated_top_s, partition_top_s, score_order, PartitionStrategy, RegionPartition,
};
pub use sampler::{RepresentativeSet, Sampler};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::tensor::{ParameterStore, ReduceKind, Session, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrlConfig {
    pub s: usize,
    pub k: usize,
    pub m: usize,
    /// Spec string resolved through [`partition::registry`].
    pub partition: String,
    /// Spec string resolved through [`sampler::registry`].
    pub sampler: String,
}

impl IrlConfig {
    pub fn new(s: usize, k: usize, m: usize) -> Self {
        Self {
            s,
            k,
            m,
            partition: "dilated_top_s".into(),
            sampler: "knn_based".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.k == 0 || self.m == 0 || self.m > self.k {
            return Err(Error::Config(format!(
                "IRL needs S >= 1 and 1 <= m <= k, got S = {}, k = {}, m = {}",
                self.s, self.k, self.m
            )));
        }
        if self.s * self.m < 3 {
            return Err(Error::Config(format!(
                "interpolation needs at least 3 representatives, S * m = {}",
                self.s * self.m
            )));
        }
        partition::registry().create(&self.partition)?;
        let sampler = sampler::registry().create(&self.sampler)?;
        if sampler.pooling().is_some() && self.m != 1 {
            return Err(Error::Config(format!("sampler `{}` requires m = 1", self.sampler)));
        }
        Ok(())
    }
}

/// Naive and representative edge counts of the cross-region graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Every point of a region linked to every point of every other region.
    Naive,
    /// Only the `t`-th representatives of different regions are linked.
    Representative,
}

/// `S(S-1)k^2` for the naive graph, `S(S-1)m` for representatives.
pub fn count_edges(mode: GraphMode, s: u64, k: u64, m: u64) -> u64 {
    let pairs = s * s.saturating_sub(1);
    match mode {
        GraphMode::Naive => pairs * k * k,
        GraphMode::Representative => pairs * m,
    }
}

/// Everything an IRL pass produced besides its output.
pub struct IrlOutput {
    pub out: Var,
    /// `(B N) x 1` point scores.
    pub scores: Var,
    pub partitions: Vec<RegionPartition>,
    pub representatives: Vec<RepresentativeSet>,
    /// One weight matrix per (cloud, slot), cloud-major.
    pub weights: Vec<Var>,
}

#[derive(Clone)]
pub struct IrlLayer {
    prefix: String,
    channels: usize,
    cfg: IrlConfig,
    partition: Arc<dyn PartitionStrategy>,
    sampler: Arc<dyn Sampler>,
}

impl IrlLayer {
    pub fn new(prefix: impl Into<String>, channels: usize, cfg: IrlConfig) -> Result<Self> {
        cfg.validate()?;
        let partition = partition::registry().create(&cfg.partition)?;
        let sampler = sampler::registry().create(&cfg.sampler)?;
        Self::with_strategies(prefix, channels, cfg, partition, sampler)
    }

    /// Uses the given strategies instead of resolving the config's names.
    pub fn with_strategies(
        prefix: impl Into<String>,
        channels: usize,
        cfg: IrlConfig,
        partition: Arc<dyn PartitionStrategy>,
        sampler: Arc<dyn Sampler>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("IRL width must be positive".into()));
        }
        Ok(Self {
            prefix: prefix.into(),
            channels,
            cfg,
            partition,
            sampler,
        })
    }

    pub fn config(&self) -> &IrlConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn score_prefix(&self) -> String {
        format!("{}/score", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        let c = self.channels;
        store.init_linear(&self.score_prefix(), c, 1, true, rng);
        for p in attention::attention_param_prefixes(&self.prefix) {
            store.init_linear(&p, c, c, false, rng);
        }
    }

    /// `sigmoid(T w + b)` as a `rows x 1` column.
    pub fn score(&self, s: &mut Session, t: Var) -> Result<Var> {
        let z = s.linear(t, &self.score_prefix(), true)?;
        Ok(s.tape.sigmoid(z))
    }

    fn check_input(&self, s: &Session, t: Var, clouds: &[&[Point]]) -> Result<()> {
        let shape = s.tape.shape(t);
        let rows: usize = clouds.iter().map(|c| c.len()).sum();
        if shape.len() != 2 || shape[0] != rows || shape[1] != self.channels {
            return Err(Error::Dimension {
                op: "irl",
                lhs: shape.to_vec(),
                rhs: vec![rows, self.channels],
            });
        }
        Ok(())
    }

    /// Partitions and representatives for every cloud from the score column.
    pub fn regions(&self, scores: &[f64], clouds: &[&[Point]]) -> Result<(Vec<RegionPartition>, Vec<RepresentativeSet>)> {
        let mut offset = 0;
        let mut parts = Vec::with_capacity(clouds.len());
        let mut reps = Vec::with_capacity(clouds.len());
        for coords in clouds {
            let sc = &scores[offset..offset + coords.len()];
            let p = partition(self.partition.as_ref(), sc, coords, self.cfg.s, self.cfg.k)?;
            reps.push(self.sampler.sample(&p, self.cfg.m)?);
            parts.push(p);
            offset += coords.len();
        }
        Ok((parts, reps))
    }

    pub fn forward(&self, s: &mut Session, t: Var, clouds: &[&[Point]]) -> Result<IrlOutput> {
        self.forward_with(s, t, clouds, None)
    }

    /// Like [`IrlLayer::forward`], but with partitions and representatives
    /// taken from `fixed` when given instead of recomputed from the scores.
    pub fn forward_with(
        &self,
        s: &mut Session,
        t: Var,
        clouds: &[&[Point]],
        fixed: Option<(&[RegionPartition], &[RepresentativeSet])>,
    ) -> Result<IrlOutput> {
        self.check_input(s, t, clouds)?;
        let scores = self.score(s, t)?;
        let (parts, reps) = match fixed {
            Some((p, r)) if p.len() == clouds.len() && r.len() == clouds.len() => (p.to_vec(), r.to_vec()),
            Some(_) => return Err(Error::Contract("replayed regions do not match the batch".into())),
            None => {
                let score_vals = s.tape.value(scores).data().to_vec();
                self.regions(&score_vals, clouds)?
            }
        };
        let (sz, m) = (self.cfg.s, self.cfg.m);

        let mut plan = InterpPlan::default();
        let slot_features = match self.sampler.pooling() {
            Some(kind) => {
                let mut rows = Vec::new();
                let mut centers = Vec::new();
                let mut offset = 0;
                for (b, (coords, p)) in clouds.iter().zip(&parts).enumerate() {
                    for (&c, members) in p.centroids.iter().zip(&p.members) {
                        rows.extend(members.iter().map(|j| j + offset));
                        centers.extend(std::iter::repeat(c + offset).take(members.len()));
                    }
                    let anchors: Vec<Point> = p.centroids.iter().map(|&c| coords[c]).collect();
                    plan.extend(InterpPlan::build(coords, &anchors, b * sz)?);
                    offset += coords.len();
                }
                let g = scaled_rows(&mut s.tape, t, scores, rows, centers)?;
                let g = s.tape.reshape(g, vec![clouds.len() * sz, self.cfg.k, self.channels])?;
                s.tape.reduce(kind, g, 1)?
            }
            None => {
                let mut rows = Vec::new();
                let mut centers = Vec::new();
                let mut offset = 0;
                for (b, ((coords, p), r)) in clouds.iter().zip(&parts).zip(&reps).enumerate() {
                    let mut anchors = Vec::with_capacity(sz * m);
                    for slot in 0..m {
                        for (i, &c) in p.centroids.iter().enumerate() {
                            let j = r.chi[i][slot];
                            rows.push(j + offset);
                            centers.push(c + offset);
                            anchors.push(coords[j]);
                        }
                    }
                    plan.extend(InterpPlan::build(coords, &anchors, b * sz * m)?);
                    offset += coords.len();
                }
                scaled_rows(&mut s.tape, t, scores, rows, centers)?
            }
        };
        let att = slot_attention(s, &self.prefix, slot_features, sz)?;
        let out = interpolate_residual(&mut s.tape, t, att.out, &plan)?;
        Ok(IrlOutput {
            out,
            scores,
            partitions: parts,
            representatives: reps,
            weights: att.weights,
        })
    }

    /// The dense baseline: one attention block over all `S k` region members
    /// of a cloud, all of which also serve as interpolation anchors.
    pub fn forward_naive(&self, s: &mut Session, t: Var, clouds: &[&[Point]]) -> Result<Var> {
        self.check_input(s, t, clouds)?;
        let scores = self.score(s, t)?;
        let score_vals = s.tape.value(scores).data().to_vec();
        let (parts, _) = self.regions(&score_vals, clouds)?;
        let k = self.cfg.k;
        let mut outs = Vec::with_capacity(clouds.len());
        let mut offset = 0;
        for (coords, p) in clouds.iter().zip(&parts) {
            let g = scale_region_features(&mut s.tape, t, scores, p, offset)?;
            let att = slot_attention(s, &self.prefix, g, p.s() * k)?;
            let anchors: Vec<Point> = p.members.iter().flatten().map(|&j| coords[j]).collect();
            let plan = InterpPlan::build(coords, &anchors, 0)?;
            let rows: Vec<usize> = (offset..offset + coords.len()).collect();
            let tb = if clouds.len() == 1 { t } else { s.tape.gather(t, rows)? };
            outs.push(interpolate_residual(&mut s.tape, tb, att.out, &plan)?);
            offset += coords.len();
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            s.tape.concat_rows(&outs)
        }
    }
}

/// Which reduction a sampler spec pools with, if any.
pub fn sampler_pooling(spec: &str) -> Result<Option<ReduceKind>> {
    Ok(sampler::registry().create(spec)?.pooling())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, rng: &mut impl Rng) -> Vec<Point> {
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn edge_counts() {
        assert_eq!(count_edges(GraphMode::Naive, 2, 3, 1), 18);
        assert_eq!(count_edges(GraphMode::Naive, 256, 6, 1), 2_350_080);
        assert_eq!(count_edges(GraphMode::Representative, 256, 6, 1), 65_280);
        assert_eq!(count_edges(GraphMode::Representative, 1, 6, 1), 0);
    }

    #[test]
    fn config_validation() {
        assert!(IrlConfig::new(4, 4, 2).validate().is_ok());
        assert!(IrlConfig::new(4, 2, 3).validate().is_err());
        assert!(IrlConfig::new(0, 2, 1).validate().is_err());
        let mut c = IrlConfig::new(4, 4, 2);
        c.sampler = "maxpool".into();
        assert!(c.validate().is_err());
        assert!(IrlConfig::new(1, 2, 2).validate().is_err());
        c.m = 1;
        assert!(c.validate().is_ok());
        c.partition = "grid".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sampler in ["knn_based", "random:3", "maxpool", "meanpool"] {
            let mut cfg = IrlConfig::new(4, 4, if sampler.ends_with("pool") { 1 } else { 2 });
            cfg.sampler = sampler.into();
            let layer = IrlLayer::new("irl0", 5, cfg).unwrap();
            let mut store = ParameterStore::new();
            layer.init(&mut store, &mut rng);
            *store.get_mut("irl0/att.z.W").unwrap() = Tensor::zeros(vec![5, 5]);
            let coords = random_cloud(16, &mut rng);
            let x = Tensor::new(vec![16, 5], (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut s = Session::new(&mut store, Mode::Eval);
            let t = s.tape.constant(x.clone());
            let out = layer.forward(&mut s, t, &[&coords]).unwrap();
            assert_eq!(s.tape.value(out.out), &x, "{sampler}");
        }
    }

    #[test]
    fn naive_and_representative_agree_when_regions_are_singletons() {
        // k = m = 1: both graphs link exactly the centroids
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = IrlLayer::new("irl0", 3, IrlConfig::new(5, 1, 1)).unwrap();
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut rng);
        let coords = random_cloud(12, &mut rng);
        let x = Tensor::new(vec![12, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let t = s.tape.constant(x);
        let rep = layer.forward(&mut s, t, &[&coords]).unwrap().out;
        let naive = layer.forward_naive(&mut s, t, &[&coords]).unwrap();
        assert!(s.tape.value(rep).max_abs_diff(s.tape.value(naive)) < 1e-12);
    }
}
