//! Choosing region centroids and gathering each region's members.

use std::sync::Arc;

use crate::error::{domain, Result};
use crate::geometry::{fps, region_members, Point};
use crate::registry::{no_arg, Registry};

/// Regions over one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    /// Per-point importance in (0, 1).
    pub scores: Vec<f64>,
    pub centroids: Vec<usize>,
    /// `S` rows of `k` indices, each starting with its centroid and
    /// ascending in distance from it.
    pub members: Vec<Vec<usize>>,
}

impl RegionPartition {
    pub fn s(&self) -> usize {
        self.centroids.len()
    }

    pub fn k(&self) -> usize {
        self.members.first().map_or(0, Vec::len)
    }
}

/// Picks `S` distinct centroid indices for one cloud.
pub trait PartitionStrategy: Send + Sync {
    fn name(&self) -> &str;
    fn centroids(&self, scores: &[f64], coords: &[Point], s: usize) -> Result<Vec<usize>>;
}

/// Point indices ordered by descending score, ties by ascending index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_s(s: usize, n: usize) -> Result<()> {
    if s == 0 || s > n {
        return Err(domain(format!("S = {s} must lie in [1, {n}]")));
    }
    Ok(())
}

/// The `S` highest-scoring points.
pub struct TopS;

impl PartitionStrategy for TopS {
    fn name(&self) -> &str {
        "top_s"
    }

    fn centroids(&self, scores: &[f64], _coords: &[Point], s: usize) -> Result<Vec<usize>> {
        check_s(s, scores.len())?;
        let mut order = score_order(scores);
        order.truncate(s);
        Ok(order)
    }
}

/// Every `floor(N / S)`-th point of the score ranking, starting at the top.
pub struct DilatedTopS;

impl PartitionStrategy for DilatedTopS {
    fn name(&self) -> &str {
        "dilated_top_s"
    }

    fn centroids(&self, scores: &[f64], _coords: &[Point], s: usize) -> Result<Vec<usize>> {
        check_s(s, scores.len())?;
        let stride = scores.len() / s;
        let order = score_order(scores);
        Ok((0..s).map(|t| order[t * stride]).collect())
    }
}

/// Farthest point sampling from a fixed seed point; scores are ignored.
pub struct Fps {
    pub seed_index: usize,
}

impl PartitionStrategy for Fps {
    fn name(&self) -> &str {
        "fps"
    }

    fn centroids(&self, _scores: &[f64], coords: &[Point], s: usize) -> Result<Vec<usize>> {
        fps(coords, s, self.seed_index)
    }
}

/// `dilated_top_s`, `top_s` and `fps[:seed_index]`.
pub fn registry() -> Registry<dyn PartitionStrategy> {
    let mut r: Registry<dyn PartitionStrategy> = Registry::new("partition strategy");
    r.register("dilated_top_s", |arg| {
        no_arg("dilated_top_s", arg)?;
        Ok(Arc::new(DilatedTopS) as Arc<dyn PartitionStrategy>)
    });
    r.register("top_s", |arg| {
        no_arg("top_s", arg)?;
        Ok(Arc::new(TopS) as Arc<dyn PartitionStrategy>)
    });
    r.register("fps", |arg| {
        let seed_index = if arg.is_empty() {
            0
        } else {
            arg.parse()
                .map_err(|_| crate::Error::Config(format!("fps seed index `{arg}` is not an integer")))?
        };
        Ok(Arc::new(Fps { seed_index }) as Arc<dyn PartitionStrategy>)
    });
    r
}

/// Centroids from `strategy`, members as the `k` nearest points of each.
pub fn partition(
    strategy: &dyn PartitionStrategy,
    scores: &[f64],
    coords: &[Point],
    s: usize,
    k: usize,
) -> Result<RegionPartition> {
    if scores.len() != coords.len() {
        return Err(domain(format!("{} scores for {} points", scores.len(), coords.len())));
    }
    let centroids = strategy.centroids(scores, coords, s)?;
    let members = centroids
        .iter()
        .map(|&c| region_members(coords, c, k))
        .collect::<Result<_>>()?;
    Ok(RegionPartition {
        scores: scores.to_vec(),
        centroids,
        members,
    })
}

pub fn partition_top_s(scores: &[f64], coords: &[Point], s: usize, k: usize) -> Result<RegionPartition> {
    partition(&TopS, scores, coords, s, k)
}

pub fn partition_dilated_top_s(scores: &[f64], coords: &[Point], s: usize, k: usize) -> Result<RegionPartition> {
    partition(&DilatedTopS, scores, coords, s, k)
}
