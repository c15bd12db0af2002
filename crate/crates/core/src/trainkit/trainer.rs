use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{augment, AugmentConfig, Dataset};
use super::loss::{argmax_rows, smoothed_cross_entropy};
use super::metrics::{instance_miou, keypoint_ap, keypoint_iou, mean_class_accuracy, overall_accuracy, KEYPOINT_THRESHOLD};
use super::optim::{optimizer_registry, schedule_registry, Optimizer, OptimizerState, Schedule};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::models::{Head, Network};
use crate::tensor::{Mode, ParameterStore, Session, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classify,
    Keypoint,
    Partseg,
}

impl Task {
    fn per_point(self) -> bool {
        self != Task::Classify
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer spec, e.g. `sgd:momentum=0.9,weight_decay=0` or `adam`.
    pub optimizer: String,
    /// Initial learning rate fed to the schedule.
    pub lr: f64,
    /// Schedule spec: `cosine`, `step:gamma=0.5,every=30` or `constant`.
    pub scheduler: String,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    /// Halve the batchnorm momentum every this many epochs; 0 keeps it fixed.
    pub bn_momentum_halving: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: "sgd:momentum=0.9,weight_decay=0".into(),
            lr: 0.1,
            scheduler: "cosine".into(),
            label_smoothing: 0.2,
            batch_size: 16,
            epochs: 50,
            augmentation: AugmentConfig::default(),
            seed: 0,
            bn_momentum_halving: 0,
        }
    }
}

impl TrainConfig {
    /// Task defaults: SGD 0.1 with cosine decay for classification, Adam
    /// 1e-3 for keypoints, and Adam 1e-3 halved every 30 epochs (with the
    /// batchnorm momentum halved alongside) for part segmentation.
    pub fn for_task(task: Task) -> Self {
        let base = Self::default();
        match task {
            Task::Classify => base,
            Task::Keypoint => Self {
                optimizer: "adam".into(),
                lr: 1e-3,
                ..base
            },
            Task::Partseg => Self {
                optimizer: "adam".into(),
                lr: 1e-3,
                scheduler: "step:gamma=0.5,every=30".into(),
                bn_momentum_halving: 30,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        optimizer_registry().create(&self.optimizer)?;
        schedule_registry().create(&self.scheduler)?;
        self.augmentation.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batchnorm".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the per-epoch metrics CSV. `epoch` counts from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_oa: f64,
    pub val_oa: f64,
    pub val_macc: f64,
    pub val_miou: Option<f64>,
}

impl EpochRecord {
    pub fn csv_header(with_miou: bool) -> &'static str {
        if with_miou {
            "epoch,lr,train_loss,train_oa,val_oa,val_macc,val_miou"
        } else {
            "epoch,lr,train_loss,train_oa,val_oa,val_macc"
        }
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_oa, self.val_oa, self.val_macc
        );
        if let Some(m) = self.val_miou {
            row.push_str(&format!(",{m:.6}"));
        }
        row
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    /// Per cloud for classification, per point otherwise.
    pub oa: f64,
    pub macc: f64,
    /// Instance part mIoU or keypoint mIoU.
    pub miou: Option<f64>,
    /// Keypoint mAP.
    pub map: Option<f64>,
    pub predictions: Vec<usize>,
}

/// What the epoch callback wants next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Targets of a batch in the row order of the network output.
pub fn batch_targets(task: Task, clouds: &[&PointCloud]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, c) in clouds.iter().enumerate() {
        match task {
            Task::Classify => out.push(c.category().ok_or_else(|| Error::Format(format!("cloud {i} has no class")))?),
            _ => out.extend_from_slice(c.labels().ok_or_else(|| Error::Format(format!("cloud {i} has no point labels")))?),
        }
    }
    Ok(out)
}

fn output_width(net: &Network) -> usize {
    match net.spec().head {
        Head::Classifier { num_classes } => num_classes,
        Head::Pointwise { num_outputs } => num_outputs,
        Head::Partseg { num_parts, .. } => num_parts,
    }
}

/// Checks that the head matches the task and the labels fit the head.
pub fn check_compatible(net: &Network, task: Task, data: &Dataset) -> Result<()> {
    let ok = matches!(
        (task, &net.spec().head),
        (Task::Classify, Head::Classifier { .. }) | (Task::Keypoint, Head::Pointwise { .. }) | (Task::Partseg, Head::Partseg { .. })
    );
    if !ok {
        return Err(Error::Config(format!("task {task:?} does not fit head {:?}", net.spec().head)));
    }
    let width = output_width(net);
    let refs: Vec<&PointCloud> = data.clouds.iter().collect();
    if let Some(&bad) = batch_targets(task, &refs)?.iter().find(|&&t| t >= width) {
        return Err(Error::Config(format!("label {bad} does not fit a head with {width} outputs")));
    }
    Ok(())
}

/// Eval-mode metrics over `data`, batched in parallel.
pub fn evaluate(net: &Network, store: &ParameterStore, data: &Dataset, task: Task, batch_size: usize, eps: f64) -> Result<EvalReport> {
    let refs: Vec<&PointCloud> = data.clouds.iter().collect();
    let chunks: Vec<Result<(Tensor, f64)>> = refs
        .par_chunks(batch_size.max(1))
        .map_init(
            || store.clone(),
            |st, batch| {
                let mut s = net.session(st, Mode::Eval);
                let out = net.forward(&mut s, batch)?;
                let targets = batch_targets(task, batch)?;
                let loss = smoothed_cross_entropy(&mut s.tape, out.logits, &targets, eps)?;
                Ok((s.tape.value(out.logits).clone(), s.tape.value(loss).data()[0] * targets.len() as f64))
            },
        )
        .collect();
    let mut logits = Vec::new();
    let mut loss_sum = 0.0;
    for c in chunks {
        let (l, loss) = c?;
        loss_sum += loss;
        logits.push(l);
    }
    let truth = batch_targets(task, &refs)?;
    let predictions: Vec<usize> = logits.iter().flat_map(argmax_rows).collect();
    let width = output_width(net);
    let oa = overall_accuracy(&predictions, &truth)?;
    let macc = mean_class_accuracy(&predictions, &truth, width)?;
    let (mut miou, mut map) = (None, None);
    if task.per_point() {
        let mut start = 0;
        let mut shapes = Vec::with_capacity(refs.len());
        for c in &refs {
            let end = start + c.len();
            shapes.push((predictions[start..end].to_vec(), truth[start..end].to_vec()));
            start = end;
        }
        if task == Task::Partseg {
            miou = Some(instance_miou(&shapes)?);
        } else {
            let rows: Vec<f64> = logits.iter().flat_map(|t| t.data().iter().copied()).collect();
            let (mut iou_sum, mut ap_sum, mut start) = (0.0, 0.0, 0);
            for (c, (pred, tr)) in refs.iter().zip(&shapes) {
                let pts = c.coords();
                let pick = |labels: &[usize]| -> Vec<Point> { pts.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(p, _)| *p).collect() };
                let gt = pick(tr);
                iou_sum += keypoint_iou(&pick(pred), &gt, KEYPOINT_THRESHOLD);
                let scored: Vec<(f64, Point)> = (0..c.len())
                    .map(|i| {
                        let r = &rows[(start + i) * width..(start + i + 1) * width];
                        (r[1] - r[0], pts[i])
                    })
                    .collect();
                ap_sum += keypoint_ap(&scored, &gt, KEYPOINT_THRESHOLD);
                start += c.len();
            }
            miou = Some(iou_sum / refs.len() as f64);
            map = Some(ap_sum / refs.len() as f64);
        }
    }
    Ok(EvalReport {
        loss: loss_sum / truth.len().max(1) as f64,
        oa,
        macc,
        miou,
        map,
        predictions,
    })
}

pub struct Trainer<'n> {
    net: &'n Network,
    task: Task,
    cfg: TrainConfig,
    optimizer: Arc<dyn Optimizer>,
    schedule: Arc<dyn Schedule>,
}

/// Loss, correct predictions and prediction count of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub hits: usize,
    pub count: usize,
}

impl<'n> Trainer<'n> {
    pub fn new(net: &'n Network, task: Task, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = optimizer_registry().create(&cfg.optimizer)?;
        let schedule = schedule_registry().create(&cfg.scheduler)?;
        Ok(Self {
            net,
            task,
            cfg,
            optimizer,
            schedule,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.schedule.lr(epoch, self.cfg.epochs, self.cfg.lr)
    }

    /// Batchnorm momentum for 0-based `epoch`.
    pub fn bn_momentum(&self, epoch: usize) -> f64 {
        let base = self.net.spec().options.bn_momentum;
        match self.cfg.bn_momentum_halving {
            0 => base,
            h => base * 0.5f64.powi((epoch / h) as i32),
        }
    }

    /// Train-mode loss with gradients left in `store`; no update.
    pub fn forward_backward(&self, store: &mut ParameterStore, batch: &[&PointCloud], bn_momentum: f64, seed: u64) -> Result<StepStats> {
        store.zero_grad();
        let mut s = Session::new(store, Mode::Train).with_seed(seed).with_bn_momentum(bn_momentum);
        let out = self.net.forward(&mut s, batch)?;
        let targets = batch_targets(self.task, batch)?;
        let loss = smoothed_cross_entropy(&mut s.tape, out.logits, &targets, self.cfg.label_smoothing)?;
        let value = s.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value}")));
        }
        s.backward(loss)?;
        let pred = argmax_rows(s.tape.value(out.logits));
        let hits = pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
        Ok(StepStats {
            loss: value,
            hits,
            count: targets.len(),
        })
    }

    /// One optimizer update on `batch`.
    pub fn step(
        &self,
        store: &mut ParameterStore,
        state: &mut OptimizerState,
        batch: &[&PointCloud],
        lr: f64,
        bn_momentum: f64,
        seed: u64,
    ) -> Result<StepStats> {
        let stats = self.forward_backward(store, batch, bn_momentum, seed)?;
        self.optimizer.step(store, state, lr);
        Ok(stats)
    }

    /// Trains for the configured epochs, evaluating on `val` after each
    /// one. `on_epoch` sees every record and may stop the run early. A
    /// trailing batch of one cloud is dropped.
    pub fn fit(
        &self,
        store: &mut ParameterStore,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&EpochRecord, &ParameterStore) -> Result<Flow>,
    ) -> Result<Vec<EpochRecord>> {
        check_compatible(self.net, self.task, train)?;
        check_compatible(self.net, self.task, val)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut state = OptimizerState::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let lr = self.lr(epoch);
            let bn_m = self.bn_momentum(epoch);
            order.shuffle(&mut rng);
            let (mut loss_sum, mut hits, mut count, mut batches) = (0.0, 0, 0, 0);
            for idx in order.chunks(self.cfg.batch_size) {
                if idx.len() < 2 {
                    continue;
                }
                let clouds = idx
                    .iter()
                    .map(|&i| augment(&train.clouds[i], &self.cfg.augmentation, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&PointCloud> = clouds.iter().collect();
                let st = self.step(store, &mut state, &refs, lr, bn_m, rng.gen())?;
                loss_sum += st.loss;
                hits += st.hits;
                count += st.count;
                batches += 1;
            }
            let report = evaluate(self.net, store, val, self.task, self.cfg.batch_size, self.cfg.label_smoothing)?;
            let rec = EpochRecord {
                epoch: epoch + 1,
                lr,
                train_loss: loss_sum / batches.max(1) as f64,
                train_oa: hits as f64 / count.max(1) as f64,
                val_oa: report.oa,
                val_macc: report.macc,
                val_miou: report.miou,
            };
            log::info!("{}", rec.csv_row());
            let flow = on_epoch(&rec, store)?;
            history.push(rec);
            if flow == Flow::Stop {
                break;
            }
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{NetworkSpec, Stage};
    use crate::trainkit::data::{generate_synthetic, PointLabels, SyntheticSpec};

    fn tiny(head: Head) -> Network {
        let mut spec = NetworkSpec {
            stages: vec![
                Stage::Isl { k_hat: 4, widths: vec![8] },
                Stage::Irl { s: 4, k: 4, m: 1 },
                Stage::Isl { k_hat: 4, widths: vec![8] },
            ],
            taps: vec![0, 2],
            head,
            options: Default::default(),
        };
        spec.options.global_width = 16;
        spec.options.head_widths = vec![8];
        spec.options.point_widths = vec![8];
        spec.options.embed_width = 4;
        spec.options.fuse_width = 8;
        if let Head::Partseg { .. } = spec.head {
            spec.stages.push(Stage::Irl { s: 4, k: 4, m: 1 });
            spec.taps = vec![0, 1, 2];
        }
        Network::new(spec).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_is_reproducible() {
        let net = tiny(Head::Classifier { num_classes: 2 });
        let train = generate_synthetic(&SyntheticSpec::new(&["sphere", "cube"], 32, 5, 1)).unwrap();
        let val = generate_synthetic(&SyntheticSpec::new(&["sphere", "cube"], 32, 2, 2)).unwrap();
        let run = || {
            let mut store = net.init_store(3);
            let trainer = Trainer::new(&net, Task::Classify, small_cfg()).unwrap();
            let h = trainer.fit(&mut store, &train, &val, |_, _| Ok(Flow::Continue)).unwrap();
            (h, store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(sa, sb);
        assert!(a[0].csv_row().split(',').count() == 6);
    }

    #[test]
    fn callback_can_stop() {
        let net = tiny(Head::Classifier { num_classes: 2 });
        let data = generate_synthetic(&SyntheticSpec::new(&["sphere", "cone"], 32, 3, 1)).unwrap();
        let trainer = Trainer::new(&net, Task::Classify, small_cfg()).unwrap();
        let mut store = net.init_store(0);
        let h = trainer.fit(&mut store, &data, &data, |_, _| Ok(Flow::Stop)).unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn small_lr_step_reduces_loss() {
        let net = tiny(Head::Classifier { num_classes: 3 });
        let data = generate_synthetic(&SyntheticSpec::new(&["sphere", "cube", "torus"], 32, 2, 4)).unwrap();
        let refs: Vec<&PointCloud> = data.clouds.iter().collect();
        let trainer = Trainer::new(&net, Task::Classify, TrainConfig::default()).unwrap();
        let mut store = net.init_store(5);
        let mut state = OptimizerState::default();
        let before = trainer.step(&mut store, &mut state, &refs, 1e-4, 0.9, 7).unwrap().loss;
        let after = trainer.forward_backward(&mut store, &refs, 0.9, 7).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn per_point_tasks_report_miou() {
        let mut spec = SyntheticSpec::new(&["cylinder", "torus"], 32, 2, 0);
        let parts = generate_synthetic(&spec).unwrap();
        let net = tiny(Head::Partseg {
            num_parts: 4,
            num_categories: 2,
        });
        let store = net.init_store(1);
        let r = evaluate(&net, &store, &parts, Task::Partseg, 3, 0.2).unwrap();
        assert!(r.miou.is_some_and(|m| (0.0..=1.0).contains(&m)) && r.map.is_none());
        assert_eq!(r.predictions.len(), 4 * 32);

        spec.labels = PointLabels::Keypoints;
        let kp = generate_synthetic(&spec).unwrap();
        let net = tiny(Head::Pointwise { num_outputs: 2 });
        let store = net.init_store(1);
        let r = evaluate(&net, &store, &kp, Task::Keypoint, 4, 0.2).unwrap();
        assert!(r.miou.is_some() && r.map.is_some_and(|m| (0.0..=1.0).contains(&m)));
    }

    #[test]
    fn evaluation_ignores_batch_size() {
        let net = tiny(Head::Classifier { num_classes: 2 });
        let data = generate_synthetic(&SyntheticSpec::new(&["sphere", "cube"], 32, 3, 1)).unwrap();
        let store = net.init_store(2);
        let a = evaluate(&net, &store, &data, Task::Classify, 2, 0.2).unwrap();
        let b = evaluate(&net, &store, &data, Task::Classify, 6, 0.2).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        for t in [Task::Classify, Task::Keypoint, Task::Partseg] {
            assert!(TrainConfig::for_task(t).validate().is_ok());
        }
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            optimizer: "lbfgs".into(),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let net = tiny(Head::Classifier { num_classes: 2 });
        let data = generate_synthetic(&SyntheticSpec::new(&["sphere", "cube", "cone"], 16, 1, 1)).unwrap();
        assert!(check_compatible(&net, Task::Classify, &data).is_err());
        assert!(check_compatible(&net, Task::Partseg, &data).is_err());
    }

    #[test]
    fn partseg_momentum_halves() {
        let net = tiny(Head::Classifier { num_classes: 2 });
        let t = Trainer::new(&net, Task::Partseg, TrainConfig::for_task(Task::Partseg)).unwrap();
        assert_eq!(t.bn_momentum(0), 0.9);
        assert_eq!(t.bn_momentum(30), 0.45);
        assert_eq!(t.bn_momentum(61), 0.225);
    }
}
