//! Analytic toy shapes and point-cloud datasets.
//!
//! Every shape is built to fit inside the unit ball around the origin, so
//! no data-dependent rescaling is needed and noise stays a pure additive
//! perturbation. Surfaces are sampled with density proportional to area.

use std::f64::consts::PI;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sq_dist, Point, PointCloud};

/// Jitter vectors longer than this many standard deviations are shortened.
pub const NOISE_CLIP_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
}

const CUBE_HALF: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
const CYL_RADIUS: f64 = 0.6;
const CYL_HALF_HEIGHT: f64 = 0.8;
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;
const CONE_RADIUS: f64 = 0.8;
const CONE_BASE_Z: f64 = -0.5;
const CONE_APEX_Z: f64 = 0.9;

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus, Shape::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
            Shape::Cone => "cone",
        }
    }

    /// Cylinder: side 0, cap 1. Torus: inner 0, outer 1. Others: one part.
    pub fn num_parts(self) -> usize {
        match self {
            Shape::Cylinder | Shape::Torus => 2,
            _ => 1,
        }
    }

    /// Draws one surface point and its local part id.
    pub fn sample(self, rng: &mut impl Rng) -> (Point, usize) {
        match self {
            Shape::Sphere => (unit_vector(rng), 0),
            Shape::Cube => {
                let face = rng.gen_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [0.0; 3];
                for (d, v) in p.iter_mut().enumerate() {
                    *v = if d == axis {
                        sign * CUBE_HALF
                    } else {
                        rng.gen_range(-CUBE_HALF..CUBE_HALF)
                    };
                }
                (p, 0)
            }
            Shape::Cylinder => {
                let side = 2.0 * PI * CYL_RADIUS * 2.0 * CYL_HALF_HEIGHT;
                let caps = 2.0 * PI * CYL_RADIUS * CYL_RADIUS;
                let phi = rng.gen_range(0.0..2.0 * PI);
                if rng.gen::<f64>() * (side + caps) < side {
                    let z = rng.gen_range(-CYL_HALF_HEIGHT..CYL_HALF_HEIGHT);
                    ([CYL_RADIUS * phi.cos(), CYL_RADIUS * phi.sin(), z], 0)
                } else {
                    let r = CYL_RADIUS * rng.gen::<f64>().sqrt();
                    let z = if rng.gen() { CYL_HALF_HEIGHT } else { -CYL_HALF_HEIGHT };
                    ([r * phi.cos(), r * phi.sin(), z], 1)
                }
            }
            Shape::Torus => loop {
                // area element is proportional to R + r cos(theta)
                let theta = rng.gen_range(0.0..2.0 * PI);
                let accept = (TORUS_MAJOR + TORUS_MINOR * theta.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.gen::<f64>() < accept {
                    let phi = rng.gen_range(0.0..2.0 * PI);
                    let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
                    let p = [ring * phi.cos(), ring * phi.sin(), TORUS_MINOR * theta.sin()];
                    break (p, usize::from(ring >= TORUS_MAJOR));
                }
            },
            Shape::Cone => {
                let h = CONE_APEX_Z - CONE_BASE_Z;
                let slant = (h * h + CONE_RADIUS * CONE_RADIUS).sqrt();
                let lateral = PI * CONE_RADIUS * slant;
                let base = PI * CONE_RADIUS * CONE_RADIUS;
                let phi = rng.gen_range(0.0..2.0 * PI);
                let t = rng.gen::<f64>().sqrt();
                if rng.gen::<f64>() * (lateral + base) < lateral {
                    let r = CONE_RADIUS * t;
                    ([r * phi.cos(), r * phi.sin(), CONE_APEX_Z - h * t], 0)
                } else {
                    let r = CONE_RADIUS * t;
                    ([r * phi.cos(), r * phi.sin(), CONE_BASE_Z], 0)
                }
            }
        }
    }

    /// Landmarks used as keypoints for the toy saliency task.
    pub fn landmarks(self) -> Vec<Point> {
        let c = CUBE_HALF;
        match self {
            Shape::Sphere => vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            Shape::Cube => (0..8)
                .map(|b| {
                    let s = |bit: usize| if b >> bit & 1 == 1 { c } else { -c };
                    [s(0), s(1), s(2)]
                })
                .collect(),
            Shape::Cylinder => ring_points(CYL_RADIUS, 4, CYL_HALF_HEIGHT)
                .into_iter()
                .chain(ring_points(CYL_RADIUS, 4, -CYL_HALF_HEIGHT))
                .collect(),
            Shape::Torus => ring_points(TORUS_MAJOR + TORUS_MINOR, 4, 0.0)
                .into_iter()
                .chain(ring_points(TORUS_MAJOR - TORUS_MINOR, 4, 0.0))
                .collect(),
            Shape::Cone => {
                let mut v = vec![[0.0, 0.0, CONE_APEX_Z]];
                v.extend(ring_points(CONE_RADIUS, 4, CONE_BASE_Z));
                v
            }
        }
    }
}

fn ring_points(r: f64, count: usize, z: f64) -> Vec<Point> {
    (0..count)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / count as f64;
            [r * a.cos(), r * a.sin(), z]
        })
        .collect()
}

fn unit_vector(rng: &mut impl Rng) -> Point {
    loop {
        let v: Point = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = sq_dist(&v, &[0.0; 3]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class `{s}` (known: sphere, cube, cylinder, torus, cone)")))
    }
}

/// What the per-point labels of a generated cloud mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabels {
    /// Part ids, numbered globally across the selected classes.
    #[default]
    Parts,
    /// 1 for the sample nearest each shape landmark, 0 elsewhere.
    Keypoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<String>,
    pub points_per_cloud: usize,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    pub count_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub labels: PointLabels,
}

fn default_noise() -> f64 {
    0.01
}

impl SyntheticSpec {
    pub fn new(classes: &[&str], points_per_cloud: usize, count_per_class: usize, seed: u64) -> Self {
        Self {
            classes: classes.iter().map(|s| (*s).to_owned()).collect(),
            points_per_cloud,
            noise_sigma: default_noise(),
            count_per_class,
            seed,
            labels: PointLabels::Parts,
        }
    }

    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let shapes = self.classes.iter().map(|c| c.parse()).collect::<Result<Vec<Shape>>>()?;
        for (i, s) in shapes.iter().enumerate() {
            if shapes[..i].contains(s) {
                return Err(Error::Config(format!("class `{}` listed twice", s.name())));
            }
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes()?.is_empty() {
            return Err(Error::Config("synthetic data needs at least one class".into()));
        }
        if self.points_per_cloud == 0 || self.count_per_class == 0 {
            return Err(Error::Config("points_per_cloud and count_per_class must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    /// Total number of part ids across the selected classes.
    pub fn num_parts(&self) -> Result<usize> {
        Ok(match self.labels {
            PointLabels::Parts => self.shapes()?.iter().map(|s| s.num_parts()).sum(),
            PointLabels::Keypoints => 2,
        })
    }
}

/// Labelled clouds. The class of cloud `i` is `clouds[i].category()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Cloud classes; fails if any cloud lacks one.
    pub fn classes(&self) -> Result<Vec<usize>> {
        self.clouds
            .iter()
            .enumerate()
            .map(|(i, c)| c.category().ok_or_else(|| Error::Format(format!("cloud {i} has no category"))))
            .collect()
    }

    /// Largest per-point label plus one (zero when no cloud has labels).
    pub fn num_point_labels(&self) -> usize {
        self.clouds
            .iter()
            .filter_map(|c| c.labels())
            .flat_map(|l| l.iter().copied())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Writes one `.xyzl` file per cloud as `{index:05}.xyzl`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, c) in self.clouds.iter().enumerate() {
            let mut buf = Vec::new();
            c.write_xyzl(&mut buf)?;
            crate::tensor::write_atomic(&dir.join(format!("{i:05}.xyzl")), &buf)?;
        }
        let names = serde_json::to_vec_pretty(&self.class_names)?;
        crate::tensor::write_atomic(&dir.join("classes.json"), &names)
    }

    /// Reads every `.xyzl` file of `dir` in name order. Class names come
    /// from `classes.json` when present and default to the category ids.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xyzl"))
            .collect();
        paths.sort();
        let clouds = paths
            .iter()
            .map(|p| PointCloud::read_xyzl(BufReader::new(fs::File::open(p)?)))
            .collect::<Result<Vec<_>>>()?;
        let names_path = dir.join("classes.json");
        let class_names: Vec<String> = if names_path.exists() {
            serde_json::from_slice(&fs::read(names_path)?)?
        } else {
            let n = clouds.iter().filter_map(PointCloud::category).max().map_or(0, |m| m + 1);
            (0..n).map(|i| i.to_string()).collect()
        };
        Ok(Self { clouds, class_names })
    }
}

/// Scales `v` down so its length does not exceed `max_len`.
fn clip_length(v: Point, max_len: f64) -> Point {
    let n = sq_dist(&v, &[0.0; 3]).sqrt();
    if n > max_len && n > 0.0 {
        let s = max_len / n;
        [v[0] * s, v[1] * s, v[2] * s]
    } else {
        v
    }
}

/// One cloud of `shape`, deterministic in `rng`. Part ids are local.
pub fn sample_cloud(shape: Shape, n: usize, noise_sigma: f64, rng: &mut impl Rng) -> (Vec<Point>, Vec<usize>) {
    let mut coords = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, part) = shape.sample(rng);
        let jitter: Point = [0, 1, 2].map(|_| noise_sigma * rng.sample::<f64, _>(StandardNormal));
        let j = clip_length(jitter, NOISE_CLIP_SIGMAS * noise_sigma);
        coords.push([p[0] + j[0], p[1] + j[1], p[2] + j[2]]);
        parts.push(part);
    }
    (coords, parts)
}

/// Marks the cloud point nearest each landmark (ties to the lower index).
pub fn keypoint_mask(coords: &[Point], landmarks: &[Point]) -> Vec<usize> {
    let mut mask = vec![0; coords.len()];
    for l in landmarks {
        let best = (0..coords.len()).min_by(|&a, &b| sq_dist(&coords[a], l).total_cmp(&sq_dist(&coords[b], l)));
        if let Some(b) = best {
            mask[b] = 1;
        }
    }
    mask
}

/// Class-major dataset: all clouds of the first class, then the second,
/// and so on. Cloud `j` of class `c` uses its own stream of the seed, so
/// changing `count_per_class` does not perturb earlier clouds.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let shapes = spec.shapes()?;
    let mut clouds = Vec::with_capacity(shapes.len() * spec.count_per_class);
    let mut part_offset = 0;
    for (c, &shape) in shapes.iter().enumerate() {
        for j in 0..spec.count_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((c * spec.count_per_class + j) as u64);
            let (coords, parts) = sample_cloud(shape, spec.points_per_cloud, spec.noise_sigma, &mut rng);
            let labels = match spec.labels {
                PointLabels::Parts => parts.into_iter().map(|p| p + part_offset).collect(),
                PointLabels::Keypoints => keypoint_mask(&coords, &shape.landmarks()),
            };
            clouds.push(PointCloud::new(coords)?.with_labels(labels)?.with_category(c));
        }
        part_offset += shape.num_parts();
    }
    Ok(Dataset {
        clouds,
        class_names: shapes.iter().map(|s| s.name().to_owned()).collect(),
    })
}

/// Random scaling and translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub shift_range: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.66,
            scale_max: 1.33,
            shift_range: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            shift_range: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min.is_finite()
            && self.scale_max.is_finite()
            && self.scale_min >= 0.0
            && self.scale_min <= self.scale_max
            && self.shift_range >= 0.0
            && self.shift_range.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "augmentation needs 0 <= scale_min <= scale_max and shift_range >= 0, got {self:?}"
            )))
        }
    }
}

/// Per-axis scale from `[scale_min, scale_max]` and per-axis shift from
/// `[-shift_range, shift_range]`. Always consumes six draws from `rng`.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<PointCloud> {
    let mut scale = [0.0; 3];
    let mut shift = [0.0; 3];
    for d in 0..3 {
        scale[d] = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * rng.gen::<f64>();
        shift[d] = cfg.shift_range * (2.0 * rng.gen::<f64>() - 1.0);
    }
    cloud.map_points(|p| [0, 1, 2].map(|d| p[d] * scale[d] + shift[d]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &Point) -> f64 {
        sq_dist(p, &[0.0; 3]).sqrt()
    }

    #[test]
    fn sphere_radii_within_clip() {
        let mut spec = SyntheticSpec::new(&["sphere"], 300, 3, 9);
        spec.noise_sigma = 0.02;
        let ds = generate_synthetic(&spec).unwrap();
        for c in &ds.clouds {
            for p in c.coords() {
                assert!((norm(p) - 1.0).abs() <= 3.0 * 0.02 + 1e-12);
            }
        }
    }

    #[test]
    fn clean_shapes_fit_in_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for shape in Shape::ALL {
            let (coords, parts) = sample_cloud(shape, 500, 0.0, &mut rng);
            assert!(coords.iter().all(|p| norm(p) <= 1.0 + 1e-12), "{shape:?}");
            assert!(parts.iter().all(|&p| p < shape.num_parts()));
            assert!(shape.landmarks().iter().all(|p| norm(p) <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn deterministic_balanced_and_labelled() {
        let spec = SyntheticSpec::new(&["torus", "cube", "cylinder"], 64, 4, 3);
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.len(), 12);
        let classes = a.classes().unwrap();
        for c in 0..3 {
            assert_eq!(classes.iter().filter(|&&k| k == c).count(), 4);
        }
        assert_eq!(spec.num_parts().unwrap(), 5);
        // torus parts 0..2, cube 2, cylinder 3..5
        let torus: Vec<usize> = a.clouds[0].labels().unwrap().to_vec();
        assert!(torus.contains(&0) && torus.contains(&1));
        assert!(a.clouds[4].labels().unwrap().iter().all(|&l| l == 2));
        assert!(a.clouds[8].labels().unwrap().iter().all(|&l| l == 3 || l == 4));
        let other = generate_synthetic(&SyntheticSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn torus_part_split_matches_axis_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (coords, parts) = sample_cloud(Shape::Torus, 200, 0.0, &mut rng);
        for (p, l) in coords.iter().zip(parts) {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert_eq!(l, usize::from(ring >= TORUS_MAJOR));
        }
    }

    #[test]
    fn keypoint_labels() {
        let mut spec = SyntheticSpec::new(&["cube"], 200, 1, 0);
        spec.labels = PointLabels::Keypoints;
        let ds = generate_synthetic(&spec).unwrap();
        let count = ds.clouds[0].labels().unwrap().iter().sum::<usize>();
        assert!((1..=8).contains(&count));
        assert_eq!(keypoint_mask(&[[0.0; 3], [1.0, 0.0, 0.0]], &[[0.9, 0.0, 0.0]]), vec![0, 1]);
    }

    #[test]
    fn unknown_class_is_config_error() {
        let spec = SyntheticSpec::new(&["pyramid"], 10, 1, 0);
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let dup = SyntheticSpec::new(&["cube", "cube"], 10, 1, 0);
        assert!(dup.validate().is_err());
    }

    #[test]
    fn augment_identity_and_bounds() {
        let cloud = PointCloud::new(vec![[0.5, -0.25, 1.0], [-1.0, 0.3, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&cloud, &AugmentConfig::identity(), &mut rng).unwrap(), cloud);
        let cfg = AugmentConfig::default();
        let max_abs = 1.0;
        for _ in 0..200 {
            let out = augment(&cloud, &cfg, &mut rng).unwrap();
            for p in out.coords() {
                assert!(p.iter().all(|v| v.abs() <= 1.33 * max_abs + 0.2));
            }
        }
        let a = augment(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = augment(&cloud, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            scale_min: 1.5,
            scale_max: 1.0,
            shift_range: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dir_round_trip() {
        let dir = std::env::temp_dir().join(format!("pra-data-{}", std::process::id()));
        let ds = generate_synthetic(&SyntheticSpec::new(&["cone", "torus"], 16, 2, 1)).unwrap();
        ds.write_dir(&dir).unwrap();
        let back = Dataset::read_dir(&dir).unwrap();
        fs::remove_dir_all(&dir).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.len(), 4);
        for (a, b) in back.clouds.iter().zip(&ds.clouds) {
            assert_eq!(a.category(), b.category());
            assert_eq!(a.labels(), b.labels());
            for (p, q) in a.coords().iter().zip(b.coords()) {
                assert!(sq_dist(p, q) < 1e-20);
            }
        }
    }
}
