//! Named finite-difference checks over every differentiable operation and
//! the composed layers and networks.
//!
//! A scope runs on each seed in [`SUITE_SEEDS`] and reports the largest
//! relative error seen. Losses are random-weighted sums (or the smoothed
//! cross-entropy for whole networks) so that batchnorm outputs do not
//! cancel. Network scopes replay the neighbor tables and regions of a
//! first forward pass, which makes the loss a smooth function of the
//! parameters around the evaluation point.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{knn, Point, PointCloud};
use crate::irl::{interpolate_residual, scale_region_features, slot_attention, IrlConfig, IrlLayer, InterpPlan};
use crate::irl::partition::partition_top_s;
use crate::isl::{Fusion, IslConfig, IslLayer};
use crate::models::{build_classifier, build_keypoint_net, build_partseg_net, Network};
use crate::tensor::gradcheck::{check_inputs, check_params, sample_entries, REL_TOL};
use crate::tensor::{BnStats, Mode, ParameterStore, ReduceKind, Session, Tape, Tensor, Var};
use crate::trainkit::smoothed_cross_entropy;

pub const SUITE_SEEDS: [u64; 3] = [11, 23, 37];
/// Sampled parameter entries per seed for layer scopes.
pub const LAYER_BUDGET: usize = 120;
/// Sampled parameter entries per seed for whole-network scopes.
pub const NETWORK_BUDGET: usize = 24;

type Check = fn(u64) -> Result<f64>;

const SCOPES: &[(&str, Check)] = &[
    ("matmul", matmul),
    ("add", |s| binary(s, 0)),
    ("sub", |s| binary(s, 1)),
    ("hadamard", |s| binary(s, 2)),
    ("broadcast", broadcast),
    ("sigmoid", |s| unary(s, 0)),
    ("leaky_relu", |s| unary(s, 1)),
    ("scale", |s| unary(s, 2)),
    ("affine", |s| unary(s, 3)),
    ("reduce_max", |s| reduce(s, ReduceKind::Max)),
    ("reduce_mean", |s| reduce(s, ReduceKind::Mean)),
    ("reduce_sum", |s| reduce(s, ReduceKind::Sum)),
    ("sum_all", sum_all),
    ("softmax", |s| softmax(s, false)),
    ("log_softmax", |s| softmax(s, true)),
    ("gather", gather),
    ("scale_rows", scale_rows),
    ("concat", concat),
    ("reshape", reshape),
    ("batchnorm", batchnorm),
    ("dropout", dropout),
    ("edge_diff", edge_diff),
    ("edge_max_bn", edge_max_bn),
    ("cross_entropy", cross_entropy),
    ("scale_region_features", region_features),
    ("slot_attention", attention),
    ("interpolate_residual", interpolation),
    ("isl", isl),
    ("irl", irl),
    ("classifier", classifier),
    ("keypoint", keypoint),
    ("partseg", partseg),
];

/// Every scope name accepted by [`run`] besides `all`.
pub fn scope_names() -> Vec<&'static str> {
    SCOPES.iter().map(|s| s.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScopeReport {
    pub scope: &'static str,
    pub max_rel_err: f64,
    pub seeds: usize,
    pub elapsed: Duration,
}

impl ScopeReport {
    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

/// Runs one scope, or all of them for `all`, on [`SUITE_SEEDS`].
pub fn run(scope: &str) -> Result<Vec<ScopeReport>> {
    run_with_seeds(scope, &SUITE_SEEDS)
}

pub fn run_with_seeds(scope: &str, seeds: &[u64]) -> Result<Vec<ScopeReport>> {
    let selected: Vec<&(&str, Check)> = if scope == "all" {
        SCOPES.iter().collect()
    } else {
        let found = SCOPES.iter().find(|s| s.0 == scope).ok_or_else(|| {
            Error::Config(format!("unknown gradcheck scope `{scope}` (known: all, {})", scope_names().join(", ")))
        })?;
        vec![found]
    };
    selected
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let mut worst: f64 = 0.0;
            for &seed in seeds {
                let e = f(seed)?;
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            }
            Ok(ScopeReport {
                scope: name,
                max_rel_err: worst,
                seeds: seeds.len(),
                elapsed: start.elapsed(),
            })
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("consistent shape")
}

fn rand_points(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

/// `sum(x * w)` for a constant `w` of matching shape.
fn weighted(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(x, w)?;
    tape.sum_all(p)
}

fn matmul(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[3, 2], &mut r);
    let plain = check_inputs(&[rand_t(&[3, 4], &mut r), rand_t(&[4, 2], &mut r)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted(t, y, &w)
    })?;
    // transposed operands: (A^T)(B^T) with A 4x3 and B 2x4
    let transposed = check_inputs(&[rand_t(&[4, 3], &mut r), rand_t(&[2, 4], &mut r)], |t, v| {
        let y = t.matmul_t(v[0], v[1], true, true)?;
        weighted(t, y, &w)
    })?;
    Ok(plain.max(transposed))
}

fn binary(seed: u64, kind: usize) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[3, 4], &mut r);
    check_inputs(&[rand_t(&[3, 4], &mut r), rand_t(&[3, 4], &mut r)], |t, v| {
        let y = match kind {
            0 => t.add(v[0], v[1])?,
            1 => t.sub(v[0], v[1])?,
            _ => t.mul(v[0], v[1])?,
        };
        weighted(t, y, &w)
    })
}

fn broadcast(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[3, 4], &mut r);
    check_inputs(&[rand_t(&[3, 4], &mut r), rand_t(&[1, 4], &mut r)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[1])?;
        let c = t.sub(b, v[1])?;
        weighted(t, c, &w)
    })
}

fn unary(seed: u64, kind: usize) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[4, 5], &mut r);
    check_inputs(&[rand_t(&[4, 5], &mut r)], |t, v| {
        let y = match kind {
            0 => t.sigmoid(v[0]),
            1 => t.leaky_relu(v[0], 0.2),
            2 => t.scale(v[0], -1.7),
            _ => t.affine(v[0], 0.6, 0.3),
        };
        weighted(t, y, &w)
    })
}

fn reduce(seed: u64, kind: ReduceKind) -> Result<f64> {
    let mut r = rng(seed);
    let x = rand_t(&[3, 4, 5], &mut r);
    let mut worst: f64 = 0.0;
    for axis in 0..3 {
        let mut shape = vec![3, 4, 5];
        shape.remove(axis);
        let w = rand_t(&shape, &mut r);
        worst = worst.max(check_inputs(&[x.clone()], |t, v| {
            let y = t.reduce(kind, v[0], axis)?;
            weighted(t, y, &w)
        })?);
    }
    Ok(worst)
}

fn sum_all(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    check_inputs(&[rand_t(&[4, 3], &mut r)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum_all(sq)
    })
}

fn softmax(seed: u64, log: bool) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[4, 6], &mut r);
    check_inputs(&[rand_t(&[4, 6], &mut r)], |t, v| {
        let y = if log { t.log_softmax_rows(v[0])? } else { t.softmax_rows(v[0])? };
        weighted(t, y, &w)
    })
}

fn gather(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[6, 3], &mut r);
    check_inputs(&[rand_t(&[4, 3], &mut r)], |t, v| {
        let y = t.gather(v[0], vec![2, 0, 2, 3, 3, 2])?;
        weighted(t, y, &w)
    })
}

fn scale_rows(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[5, 3], &mut r);
    check_inputs(&[rand_t(&[5, 3], &mut r), rand_t(&[5], &mut r)], |t, v| {
        let y = t.scale_rows(v[0], v[1])?;
        weighted(t, y, &w)
    })
}

fn concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let wc = rand_t(&[3, 5], &mut r);
    let wr = rand_t(&[5, 2], &mut r);
    let cols = check_inputs(&[rand_t(&[3, 2], &mut r), rand_t(&[3, 3], &mut r)], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        weighted(t, y, &wc)
    })?;
    let rows = check_inputs(&[rand_t(&[2, 2], &mut r), rand_t(&[3, 2], &mut r)], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        weighted(t, y, &wr)
    })?;
    Ok(cols.max(rows))
}

fn reshape(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[2, 3, 2], &mut r);
    check_inputs(&[rand_t(&[3, 4], &mut r)], |t, v| {
        let y = t.reshape(v[0], vec![2, 3, 2])?;
        weighted(t, y, &w)
    })
}

fn batchnorm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[6, 3], &mut r);
    let inputs = [rand_t(&[6, 3], &mut r), rand_t(&[3], &mut r), rand_t(&[3], &mut r)];
    let mut worst: f64 = 0.0;
    for mode in [Mode::Train, Mode::Eval] {
        worst = worst.max(check_inputs(&inputs, |t, v| {
            let mut stats = BnStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            let y = t.batchnorm(v[0], v[1], v[2], &mut stats, mode, 0.9)?;
            weighted(t, y, &w)
        })?);
    }
    Ok(worst)
}

/// Store holding `input` as a trainable tensor, so input gradients are
/// checked alongside parameters.
fn with_input(store: &mut ParameterStore, x: Tensor) {
    store.insert("input", x, true);
}

/// Moves batchnorm shifts off zero. A freshly initialized layer in eval
/// mode maps every self-edge exactly onto the activation kink.
fn generic_point(store: &mut ParameterStore, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".beta")).map(str::to_owned).collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed").data_mut() {
            *v = r.gen_range(-0.3..0.3);
        }
    }
}

fn check_store(store: &mut ParameterStore, budget: usize, mode: Mode, r: &mut ChaCha8Rng, f: impl FnMut(&mut Session) -> Result<Var>) -> Result<f64> {
    let entries = sample_entries(store, budget, r);
    check_params(store, &entries, mode, f)
}

fn dropout(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let w = rand_t(&[5, 4], &mut r);
    let mut store = ParameterStore::new();
    with_input(&mut store, rand_t(&[5, 4], &mut r));
    check_store(&mut store, 20, Mode::Train, &mut r, |s| {
        let x = s.param("input")?;
        let y = s.dropout(x, 0.5)?;
        weighted(&mut s.tape, y, &w)
    })
}

fn edge_diff(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let nbr = knn(&rand_points(6, &mut r), 3)?;
    let w = rand_t(&[18, 2], &mut r);
    check_inputs(&[rand_t(&[6, 2], &mut r)], |t, v| {
        let y = t.edge_diff(v[0], nbr.flat().to_vec(), 3)?;
        weighted(t, y, &w)
    })
}

fn edge_max_bn(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let nbr = knn(&rand_points(7, &mut r), 3)?;
    let w = rand_t(&[7, 3], &mut r);
    let inputs = [rand_t(&[7, 3], &mut r), rand_t(&[3], &mut r), rand_t(&[3], &mut r)];
    let mut worst: f64 = 0.0;
    for mode in [Mode::Train, Mode::Eval] {
        worst = worst.max(check_inputs(&inputs, |t, v| {
            let mut stats = BnStats {
                mean: vec![0.05, 0.0, -0.1],
                var: vec![0.8, 1.2, 0.4],
            };
            let y = t.edge_max_bn(v[0], nbr.flat().to_vec(), 3, v[1], v[2], &mut stats, mode, 0.9, 0.2)?;
            weighted(t, y, &w)
        })?);
    }
    Ok(worst)
}

fn cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
    check_inputs(&[rand_t(&[4, 5], &mut r)], |t, v| smoothed_cross_entropy(t, v[0], &targets, 0.2))
}

fn region_features(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let coords = rand_points(10, &mut r);
    let scores: Vec<f64> = (0..10).map(|_| r.gen_range(0.05..0.95)).collect();
    let part = partition_top_s(&scores, &coords, 3, 4)?;
    let w = rand_t(&[12, 3], &mut r);
    let score_col = Tensor::new(vec![10, 1], scores)?;
    check_inputs(&[rand_t(&[10, 3], &mut r), score_col], |t, v| {
        let g = scale_region_features(t, v[0], v[1], &part, 0)?;
        weighted(t, g, &w)
    })
}

fn attention(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let c = 3;
    let mut store = ParameterStore::new();
    for p in crate::irl::attention::attention_param_prefixes("a") {
        store.init_linear(&p, c, c, false, &mut r);
    }
    // two slots of three regions each
    with_input(&mut store, rand_t(&[6, c], &mut r));
    let w = rand_t(&[6, c], &mut r);
    check_store(&mut store, LAYER_BUDGET, Mode::Train, &mut r, |s| {
        let g = s.param("input")?;
        let a = slot_attention(s, "a", g, 3)?;
        weighted(&mut s.tape, a.out, &w)
    })
}

fn interpolation(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let queries = rand_points(8, &mut r);
    let anchors = rand_points(4, &mut r);
    let plan = InterpPlan::build(&queries, &anchors, 0)?;
    let w = rand_t(&[8, 3], &mut r);
    check_inputs(&[rand_t(&[8, 3], &mut r), rand_t(&[4, 3], &mut r)], |t, v| {
        let y = interpolate_residual(t, v[0], v[1], &plan)?;
        weighted(t, y, &w)
    })
}

fn isl(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let n = 12;
    let nbr = knn(&rand_points(n, &mut r), 4)?;
    let mut worst: f64 = 0.0;
    for widths in [vec![6], vec![5, 6]] {
        for mode in [Mode::Train, Mode::Eval] {
            let layer = IslLayer::new("isl0", 4, IslConfig::new(4, widths.clone()), Fusion::Dynamic)?;
            let mut store = ParameterStore::new();
            layer.init(&mut store, &mut r);
            with_input(&mut store, rand_t(&[n, 4], &mut r));
            let w = rand_t(&[n, 6], &mut r);
            let forward = |s: &mut Session| {
                let x = s.param("input")?;
                let y = layer.forward(s, x, &nbr)?;
                weighted(&mut s.tape, y, &w)
            };
            generic_point(&mut store, &mut r);
            if mode == Mode::Eval {
                // running statistics from one train pass, as after training
                let mut s = Session::new(&mut store, Mode::Train).with_bn_momentum(1.0);
                forward(&mut s)?;
            }
            worst = worst.max(check_store(&mut store, LAYER_BUDGET, mode, &mut r, forward)?);
        }
    }
    Ok(worst)
}

fn irl(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (n, c) = (32, 5);
    let clouds = [rand_points(n, &mut r), rand_points(n, &mut r)];
    let refs: Vec<&[Point]> = clouds.iter().map(Vec::as_slice).collect();
    let mut worst: f64 = 0.0;
    for (sampler, m) in [("knn_based", 2), ("random:5", 2), ("maxpool", 1), ("meanpool", 1)] {
        let mut cfg = IrlConfig::new(4, 4, m);
        cfg.sampler = sampler.into();
        let layer = IrlLayer::new("irl0", c, cfg)?;
        let mut store = ParameterStore::new();
        layer.init(&mut store, &mut r);
        generic_point(&mut store, &mut r);
        let mut x = rand_t(&[2 * n, c], &mut r);
        x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        with_input(&mut store, x);
        let w = rand_t(&[2 * n, c], &mut r);
        let (parts, reps) = {
            let mut s = Session::new(&mut store, Mode::Train);
            let x = s.param("input")?;
            let o = layer.forward(&mut s, x, &refs)?;
            (o.partitions, o.representatives)
        };
        let e = check_store(&mut store, LAYER_BUDGET, Mode::Train, &mut r, |s| {
            let x = s.param("input")?;
            let o = layer.forward_with(s, x, &refs, Some((&parts, &reps)))?;
            weighted(&mut s.tape, o.out, &w)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn clouds_for(n: usize, count: usize, r: &mut ChaCha8Rng) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|b| {
            let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
            Ok(PointCloud::new(rand_points(n, r))?.with_labels(labels)?.with_category(b % 2))
        })
        .collect()
}

/// Train-mode smoothed cross-entropy of a whole network with its discrete
/// structure frozen after a first pass.
fn network(seed: u64, net: Network, per_point: bool) -> Result<f64> {
    let mut r = rng(seed);
    let n = net.spec().min_points();
    let clouds = clouds_for(n, 2, &mut r)?;
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let targets: Vec<usize> = if per_point {
        clouds.iter().flat_map(|c| c.labels().expect("labelled").to_vec()).collect()
    } else {
        vec![0, 1]
    };
    let mut store = net.init_store(seed);
    generic_point(&mut store, &mut r);
    let structure = {
        let mut s = net.session(&mut store, Mode::Train);
        net.forward(&mut s, &refs)?.trace.structure
    };
    let entries = sample_entries(&store, NETWORK_BUDGET, &mut r);
    // running statistics do not enter a train-mode loss, so the default
    // session momentum is fine here
    check_params(&mut store, &entries, Mode::Train, |s| {
        let out = net.forward_replay(s, &refs, &structure)?;
        smoothed_cross_entropy(&mut s.tape, out.logits, &targets, 0.2)
    })
}

fn classifier(seed: u64) -> Result<f64> {
    network(seed, Network::new(build_classifier(2))?, false)
}

fn keypoint(seed: u64) -> Result<f64> {
    network(seed, Network::new(build_keypoint_net(2))?, true)
}

fn partseg(seed: u64) -> Result<f64> {
    network(seed, Network::new(build_partseg_net(2, 2))?, true)
}
