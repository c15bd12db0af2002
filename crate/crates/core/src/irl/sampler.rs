//! Representative points per region.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::partition::RegionPartition;
use crate::error::{domain, Error, Result};
use crate::registry::{no_arg, Registry};
use crate::tensor::ReduceKind;

/// `S x m` table of representative indices. Slot `t` is column `t`.
///
/// For pooled samplers `chi[i] == [centroid_i]` and `pooled` names the
/// reduction; the index then only locates the interpolation anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentativeSet {
    pub chi: Vec<Vec<usize>>,
    pub pooled: Option<ReduceKind>,
}

impl RepresentativeSet {
    pub fn m(&self) -> usize {
        self.chi.first().map_or(0, Vec::len)
    }
}

pub trait Sampler: Send + Sync {
    /// Spec string that recreates this sampler through [`registry`].
    fn spec(&self) -> String;

    /// Set for samplers that pool a whole region into one feature.
    fn pooling(&self) -> Option<ReduceKind> {
        None
    }

    fn sample(&self, partition: &RegionPartition, m: usize) -> Result<RepresentativeSet>;
}

fn check_m(partition: &RegionPartition, m: usize) -> Result<()> {
    if m == 0 || m > partition.k() {
        return Err(domain(format!("m = {m} must lie in [1, k = {}]", partition.k())));
    }
    Ok(())
}

/// The `m` members closest to each centroid, centroid first.
pub struct KnnBased;

impl Sampler for KnnBased {
    fn spec(&self) -> String {
        "knn_based".into()
    }

    fn sample(&self, partition: &RegionPartition, m: usize) -> Result<RepresentativeSet> {
        check_m(partition, m)?;
        Ok(RepresentativeSet {
            chi: partition.members.iter().map(|r| r[..m].to_vec()).collect(),
            pooled: None,
        })
    }
}

/// `m` distinct uniform draws per region. The stream restarts from `seed`
/// on every call, so equal partitions give equal picks.
pub struct Random {
    pub seed: u64,
}

impl Sampler for Random {
    fn spec(&self) -> String {
        format!("random:{}", self.seed)
    }

    fn sample(&self, partition: &RegionPartition, m: usize) -> Result<RepresentativeSet> {
        check_m(partition, m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let chi = partition
            .members
            .iter()
            .map(|row| {
                rand::seq::index::sample(&mut rng, row.len(), m)
                    .into_iter()
                    .map(|j| row[j])
                    .collect()
            })
            .collect();
        Ok(RepresentativeSet { chi, pooled: None })
    }
}

/// Elementwise max or mean over a region's scaled features.
pub struct Pool(pub ReduceKind);

impl Sampler for Pool {
    fn spec(&self) -> String {
        match self.0 {
            ReduceKind::Mean => "meanpool".into(),
            _ => "maxpool".into(),
        }
    }

    fn pooling(&self) -> Option<ReduceKind> {
        Some(self.0)
    }

    fn sample(&self, partition: &RegionPartition, m: usize) -> Result<RepresentativeSet> {
        if m != 1 {
            return Err(domain(format!("pooled samplers need m = 1, got {m}")));
        }
        Ok(RepresentativeSet {
            chi: partition.centroids.iter().map(|&c| vec![c]).collect(),
            pooled: Some(self.0),
        })
    }
}

/// `knn_based`, `random:SEED`, `maxpool` and `meanpool`.
pub fn registry() -> Registry<dyn Sampler> {
    let mut r: Registry<dyn Sampler> = Registry::new("sampler");
    r.register("knn_based", |arg| {
        no_arg("knn_based", arg)?;
        Ok(Arc::new(KnnBased) as Arc<dyn Sampler>)
    });
    r.register("random", |arg| {
        let seed = if arg.is_empty() {
            0
        } else {
            arg.parse()
                .map_err(|_| Error::Config(format!("random sampler seed `{arg}` is not an integer")))?
        };
        Ok(Arc::new(Random { seed }) as Arc<dyn Sampler>)
    });
    r.register("maxpool", |arg| {
        no_arg("maxpool", arg)?;
        Ok(Arc::new(Pool(ReduceKind::Max)) as Arc<dyn Sampler>)
    });
    r.register("meanpool", |arg| {
        no_arg("meanpool", arg)?;
        Ok(Arc::new(Pool(ReduceKind::Mean)) as Arc<dyn Sampler>)
    });
    r
}
