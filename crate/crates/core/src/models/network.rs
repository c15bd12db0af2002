use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{GraphSpace, Head, NetworkSpec, Stage};
use crate::error::{domain, Error, Result};
use crate::geometry::{knn, knn_features, NeighborIndex, Point, PointCloud};
use crate::irl::{IrlLayer, RegionPartition, RepresentativeSet};
use crate::isl::IslLayer;
use crate::tensor::{Mode, ParameterStore, ReduceKind, Session, Tensor, Var};

#[derive(Clone)]
enum Layer {
    Isl(IslLayer),
    Irl(IrlLayer),
}

/// The discrete choices a stage made: its neighbor table or its regions.
#[derive(Clone, Debug, PartialEq)]
pub enum StageStructure {
    Graph(NeighborIndex),
    Regions(Vec<RegionPartition>, Vec<RepresentativeSet>),
}

/// Per-stage outputs of one forward pass.
pub struct ForwardTrace {
    pub stages: Vec<Var>,
    /// Replaying these reproduces the same piecewise-smooth function, which
    /// is what finite differences should be compared against.
    pub structure: Vec<StageStructure>,
    /// `(B N) x 1` score column of every IRL stage, in stage order.
    pub scores: Vec<Var>,
}

pub struct ForwardOutput {
    /// `B x classes` for classification; `(B N) x outputs` with cloud-major
    /// rows for per-point heads.
    pub logits: Var,
    pub trace: ForwardTrace,
}

#[derive(Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

fn leaky_unit(s: &mut Session, x: Var, prefix: &str, slope: f64) -> Result<Var> {
    let y = s.linear(x, prefix, false)?;
    let y = s.batchnorm(y, &format!("{prefix}.bn"))?;
    Ok(s.tape.leaky_relu(y, slope))
}

fn init_unit(store: &mut ParameterStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    store.init_linear(prefix, fan_in, fan_out, false, rng);
    store.init_batchnorm(&format!("{prefix}.bn"), fan_out);
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.stage_widths();
        let mut layers = Vec::with_capacity(spec.stages.len());
        let mut c_in = 3;
        for (i, st) in spec.stages.iter().enumerate() {
            layers.push(match st {
                Stage::Isl { k_hat, widths } => Layer::Isl(IslLayer::new(
                    format!("isl{i}"),
                    c_in,
                    spec.isl_config(*k_hat, widths),
                    spec.options.fusion,
                )?),
                Stage::Irl { s, k, m } => {
                    let c = if matches!(spec.head, Head::Partseg { .. }) && i + 1 == spec.stages.len() {
                        spec.options.fuse_width
                    } else {
                        c_in
                    };
                    Layer::Irl(IrlLayer::new(format!("irl{i}"), c, spec.irl_config(*s, *k, *m))?)
                }
            });
            c_in = widths[i];
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// A store with every parameter initialized from `seed`.
    pub fn init_store(&self, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for layer in &self.layers {
            match layer {
                Layer::Isl(l) => l.init(&mut store, &mut rng),
                Layer::Irl(l) => l.init(&mut store, &mut rng),
            }
        }
        let o = &self.spec.options;
        let taps = self.spec.tap_width();
        init_unit(&mut store, "head/global", taps, o.global_width, &mut rng);
        match self.spec.head {
            Head::Classifier { num_classes } => {
                let mut fan_in = 2 * o.global_width;
                for (j, &w) in o.head_widths.iter().enumerate() {
                    init_unit(&mut store, &format!("head/fc{j}"), fan_in, w, &mut rng);
                    fan_in = w;
                }
                store.init_linear("head/out", fan_in, num_classes, true, &mut rng);
            }
            Head::Pointwise { num_outputs } => {
                self.init_point_head(&mut store, taps + o.global_width, num_outputs, &mut rng);
            }
            Head::Partseg {
                num_parts,
                num_categories,
            } => {
                store.init_linear("head/embed", num_categories, o.embed_width, false, &mut rng);
                init_unit(&mut store, "head/fuse", taps + o.global_width + o.embed_width, o.fuse_width, &mut rng);
                self.init_point_head(&mut store, o.fuse_width, num_parts, &mut rng);
            }
        }
        store
    }

    fn init_point_head(&self, store: &mut ParameterStore, mut fan_in: usize, outputs: usize, rng: &mut ChaCha8Rng) {
        for (j, &w) in self.spec.options.point_widths.iter().enumerate() {
            init_unit(store, &format!("head/pt{j}"), fan_in, w, rng);
            fan_in = w;
        }
        store.init_linear("head/out", fan_in, outputs, true, rng);
    }

    /// A session configured with this network's batchnorm momentum.
    pub fn session<'s>(&self, store: &'s mut ParameterStore, mode: Mode) -> Session<'s> {
        Session::new(store, mode).with_bn_momentum(self.spec.options.bn_momentum)
    }

    fn check_batch(&self, clouds: &[&PointCloud]) -> Result<usize> {
        let n = clouds.first().ok_or_else(|| domain("empty batch"))?.len();
        if clouds.iter().any(|c| c.len() != n) {
            return Err(domain("all clouds in a batch need the same point count"));
        }
        if n < self.spec.min_points() {
            return Err(domain(format!("the network needs at least {} points per cloud, got {n}", self.spec.min_points())));
        }
        if let Head::Partseg { num_categories, .. } = self.spec.head {
            for c in clouds {
                match c.category() {
                    Some(k) if k < num_categories => {}
                    other => return Err(domain(format!("part segmentation needs a category below {num_categories}, got {other:?}"))),
                }
            }
        }
        Ok(n)
    }

    pub fn forward(&self, s: &mut Session, clouds: &[&PointCloud]) -> Result<ForwardOutput> {
        self.run(s, clouds, None)
    }

    /// Forward pass reusing the neighbor tables and regions of `structure`.
    pub fn forward_replay(&self, s: &mut Session, clouds: &[&PointCloud], structure: &[StageStructure]) -> Result<ForwardOutput> {
        if structure.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "structure has {} stages, network {}",
                structure.len(),
                self.layers.len()
            )));
        }
        self.run(s, clouds, Some(structure))
    }

    fn graph(&self, s: &Session, i: usize, f: Var, coords: &[&[Point]], n: usize, k: usize) -> Result<NeighborIndex> {
        let tables = if i == 0 || self.spec.options.graph == GraphSpace::Static {
            coords.iter().map(|c| knn(c, k)).collect::<Result<Vec<_>>>()?
        } else {
            let v = s.tape.value(f);
            let c = v.cols();
            v.data()
                .chunks_exact(n * c)
                .map(|rows| knn_features(rows, c, k))
                .collect::<Result<Vec<_>>>()?
        };
        NeighborIndex::stack(&tables, n)
    }

    fn stage(
        &self,
        s: &mut Session,
        i: usize,
        f: Var,
        coords: &[&[Point]],
        n: usize,
        replay: Option<&[StageStructure]>,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let (out, st) = match (&self.layers[i], replay.map(|r| &r[i])) {
            (Layer::Isl(l), fixed) => {
                let nbr = match fixed {
                    Some(StageStructure::Graph(g)) => g.clone(),
                    None => self.graph(s, i, f, coords, n, l.config().k_hat)?,
                    Some(_) => return Err(Error::Contract(format!("stage {i} replayed with regions"))),
                };
                (l.forward(s, f, &nbr)?, StageStructure::Graph(nbr))
            }
            (Layer::Irl(l), fixed) => {
                let regions = match fixed {
                    Some(StageStructure::Regions(p, r)) => Some((p.as_slice(), r.as_slice())),
                    None => None,
                    Some(_) => return Err(Error::Contract(format!("stage {i} replayed with a graph"))),
                };
                let o = l.forward_with(s, f, coords, regions)?;
                trace.scores.push(o.scores);
                (o.out, StageStructure::Regions(o.partitions, o.representatives))
            }
        };
        trace.stages.push(out);
        trace.structure.push(st);
        Ok(out)
    }

    fn run(&self, s: &mut Session, clouds: &[&PointCloud], replay: Option<&[StageStructure]>) -> Result<ForwardOutput> {
        let n = self.check_batch(clouds)?;
        let b = clouds.len();
        let coords: Vec<&[Point]> = clouds.iter().map(|c| c.coords()).collect();
        let xyz: Vec<f64> = coords.iter().flat_map(|c| c.iter().flatten().copied()).collect();
        let mut f = s.tape.constant(Tensor::new(vec![b * n, 3], xyz)?);
        let mut trace = ForwardTrace {
            stages: Vec::new(),
            structure: Vec::new(),
            scores: Vec::new(),
        };
        for i in 0..self.spec.trunk_len() {
            f = self.stage(s, i, f, &coords, n, replay, &mut trace)?;
        }
        let taps: Vec<Var> = self.spec.taps.iter().map(|&t| trace.stages[t]).collect();
        let x = if taps.len() == 1 { taps[0] } else { s.tape.concat_cols(&taps)? };
        let o = &self.spec.options;
        let slope = o.leaky_slope;
        let g = leaky_unit(s, x, "head/global", slope)?;
        let logits = match self.spec.head {
            Head::Classifier { .. } => {
                let grouped = s.tape.reshape(g, vec![b, n, o.global_width])?;
                let mx = s.tape.reduce(ReduceKind::Max, grouped, 1)?;
                let mean = s.tape.reduce(ReduceKind::Mean, grouped, 1)?;
                let mut h = s.tape.concat_cols(&[mx, mean])?;
                for j in 0..o.head_widths.len() {
                    h = leaky_unit(s, h, &format!("head/fc{j}"), slope)?;
                    h = s.dropout(h, o.dropout)?;
                }
                s.linear(h, "head/out", true)?
            }
            Head::Pointwise { .. } => {
                let h = s.tape.concat_cols(&[x, g])?;
                self.point_head(s, h)?
            }
            Head::Partseg { num_categories, .. } => {
                let grouped = s.tape.reshape(g, vec![b, n, o.global_width])?;
                let pooled = s.tape.reduce(ReduceKind::Max, grouped, 1)?;
                let per_point: Vec<usize> = (0..b).flat_map(|c| std::iter::repeat(c).take(n)).collect();
                let pooled = s.tape.gather(pooled, per_point.clone())?;
                let mut onehot = vec![0.0; b * num_categories];
                for (c, cloud) in clouds.iter().enumerate() {
                    onehot[c * num_categories + cloud.category().expect("checked")] = 1.0;
                }
                let onehot = s.tape.constant(Tensor::new(vec![b, num_categories], onehot)?);
                let emb = s.linear(onehot, "head/embed", false)?;
                let emb = s.tape.gather(emb, per_point)?;
                let h = s.tape.concat_cols(&[x, pooled, emb])?;
                let h = leaky_unit(s, h, "head/fuse", slope)?;
                let last = self.layers.len() - 1;
                let h = self.stage(s, last, h, &coords, n, replay, &mut trace)?;
                self.point_head(s, h)?
            }
        };
        Ok(ForwardOutput { logits, trace })
    }

    fn point_head(&self, s: &mut Session, mut h: Var) -> Result<Var> {
        let o = &self.spec.options;
        for j in 0..o.point_widths.len() {
            h = leaky_unit(s, h, &format!("head/pt{j}"), o.leaky_slope)?;
        }
        s.linear(h, "head/out", true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{build_classifier, ModelOptions};
    use rand::{seq::SliceRandom, Rng};

    fn tiny(head: Head) -> NetworkSpec {
        let mut stages: Vec<Stage> = ["ISL(4, [8])", "IRL(4, 4, 2)", "ISL(4, [6, 8])"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let mut taps = vec![0, 1, 2];
        if matches!(head, Head::Partseg { .. }) {
            stages.push("IRL(4, 3, 1)".parse().unwrap());
            taps = vec![0, 2];
        }
        NetworkSpec {
            stages,
            taps,
            head,
            options: ModelOptions {
                global_width: 12,
                head_widths: vec![8, 6],
                point_widths: vec![6],
                embed_width: 4,
                fuse_width: 8,
                ..ModelOptions::default()
            },
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
            .unwrap()
            .with_category((seed % 2) as usize)
    }

    fn eval(net: &Network, store: &mut ParameterStore, clouds: &[&PointCloud]) -> Tensor {
        let mut s = net.session(store, Mode::Eval);
        let out = net.forward(&mut s, clouds).unwrap();
        s.tape.value(out.logits).clone()
    }

    #[test]
    fn output_shapes() {
        for (head, rows, cols) in [
            (Head::Classifier { num_classes: 3 }, 2, 3),
            (Head::Pointwise { num_outputs: 1 }, 40, 1),
            (Head::Partseg { num_parts: 5, num_categories: 2 }, 40, 5),
        ] {
            let net = Network::new(tiny(head)).unwrap();
            let mut store = net.init_store(1);
            let (a, b) = (cloud(20, 1), cloud(20, 2));
            let mut s = net.session(&mut store, Mode::Train);
            let out = net.forward(&mut s, &[&a, &b]).unwrap();
            assert_eq!(s.tape.shape(out.logits), &[rows, cols]);
            assert_eq!(out.trace.stages.len(), net.spec().stages.len());
        }
    }

    #[test]
    fn eval_is_deterministic_and_batch_consistent() {
        let net = Network::new(tiny(Head::Classifier { num_classes: 3 })).unwrap();
        let mut store = net.init_store(4);
        let (a, b) = (cloud(24, 5), cloud(24, 6));
        let both = eval(&net, &mut store, &[&a, &b]);
        assert_eq!(both, eval(&net, &mut store, &[&a, &b]));
        let ya = eval(&net, &mut store, &[&a]);
        let yb = eval(&net, &mut store, &[&b]);
        let mut joined = ya.data().to_vec();
        joined.extend_from_slice(yb.data());
        let diff = both.data().iter().zip(&joined).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = cloud(24, 8);
        let mut perm: Vec<usize> = (0..24).collect();
        perm.shuffle(&mut rng);
        let pa = a.permuted(&perm).unwrap();
        let net = Network::new(tiny(Head::Classifier { num_classes: 3 })).unwrap();
        let mut store = net.init_store(2);
        assert_eq!(eval(&net, &mut store, &[&a]), eval(&net, &mut store, &[&pa]));
        let net = Network::new(tiny(Head::Pointwise { num_outputs: 1 })).unwrap();
        let mut store = net.init_store(2);
        let (y, py) = (eval(&net, &mut store, &[&a]), eval(&net, &mut store, &[&pa]));
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(py.row(i), y.row(p));
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for head in [
            Head::Classifier { num_classes: 3 },
            Head::Pointwise { num_outputs: 2 },
            Head::Partseg { num_parts: 3, num_categories: 2 },
        ] {
            let net = Network::new(tiny(head)).unwrap();
            let mut store = net.init_store(3);
            let (a, b) = (cloud(20, 10), cloud(20, 11));
            let mut s = net.session(&mut store, Mode::Train).with_seed(1);
            let out = net.forward(&mut s, &[&a, &b]).unwrap();
            let w = s.tape.constant(Tensor::new(s.tape.shape(out.logits).to_vec(), {
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                (0..s.tape.value(out.logits).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }).unwrap());
            let prod = s.tape.mul(out.logits, w).unwrap();
            let loss = s.tape.sum_all(prod).unwrap();
            s.backward(loss).unwrap();
            for name in store.trainable_names() {
                let g = store.grad(name).unwrap();
                assert!(g.iter().any(|v| *v != 0.0), "{head:?}: {name} has zero gradient");
            }
        }
    }

    #[test]
    fn replay_requires_matching_structure() {
        let net = Network::new(tiny(Head::Classifier { num_classes: 3 })).unwrap();
        let mut store = net.init_store(3);
        let a = cloud(20, 1);
        let mut s = net.session(&mut store, Mode::Eval);
        let out = net.forward(&mut s, &[&a]).unwrap();
        let first = s.tape.value(out.logits).clone();
        let again = net.forward_replay(&mut s, &[&a], &out.trace.structure).unwrap();
        assert_eq!(s.tape.value(again.logits), &first);
        assert!(net.forward_replay(&mut s, &[&a], &out.trace.structure[..1]).is_err());
    }

    #[test]
    fn rejects_bad_batches() {
        let net = Network::new(build_classifier(4)).unwrap();
        let mut store = net.init_store(0);
        let small = cloud(100, 1);
        let mut s = net.session(&mut store, Mode::Eval);
        assert!(net.forward(&mut s, &[&small]).is_err());
        let net = Network::new(tiny(Head::Classifier { num_classes: 3 })).unwrap();
        let mut store = net.init_store(0);
        let mut s = net.session(&mut store, Mode::Eval);
        assert!(net.forward(&mut s, &[&cloud(20, 1), &cloud(21, 2)]).is_err());
    }
}
