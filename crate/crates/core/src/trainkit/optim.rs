//! Optimizers and learning-rate schedules, both looked up by spec string
//! (`sgd:momentum=0.9,weight_decay=0`, `step:gamma=0.5,every=30`, ...).
//!
//! Optimizers are stateless strategy objects; per-parameter moments live
//! in an [`OptimizerState`] owned by the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::registry::{no_arg, Registry};
use crate::tensor::ParameterStore;

/// Moment buffers keyed by `{slot}/{parameter}` plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    fn buffer(&mut self, slot: &str, name: &str, len: usize) -> &mut Vec<f64> {
        self.buffers.entry(format!("{slot}/{name}")).or_insert_with(|| vec![0.0; len])
    }
}

pub trait Optimizer: Send + Sync {
    fn spec(&self) -> String;
    /// Applies one update with learning rate `lr` using the stored grads.
    fn step(&self, store: &mut ParameterStore, state: &mut OptimizerState, lr: f64);
}

/// `key=value` pairs separated by commas; every key must be known.
fn parse_kv(kind: &str, arg: &str, defaults: &[(&str, f64)]) -> Result<Vec<f64>> {
    let mut vals: Vec<f64> = defaults.iter().map(|d| d.1).collect();
    for part in arg.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{kind}: expected key=value, got `{part}`")))?;
        let i = defaults
            .iter()
            .position(|d| d.0 == k.trim())
            .ok_or_else(|| Error::Config(format!("{kind}: unknown option `{}`", k.trim())))?;
        vals[i] = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{kind}: `{}` is not a number", v.trim())))?;
        if !vals[i].is_finite() {
            return Err(Error::Config(format!("{kind}: `{k}` must be finite")));
        }
    }
    Ok(vals)
}

/// Heavy-ball SGD: `v = mu v + g + wd p; p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Optimizer for Sgd {
    fn spec(&self) -> String {
        format!("sgd:momentum={},weight_decay={}", self.momentum, self.weight_decay)
    }

    fn step(&self, store: &mut ParameterStore, state: &mut OptimizerState, lr: f64) {
        state.step += 1;
        store.for_each_trainable(|name, p, g| {
            let v = state.buffer("momentum", name, p.len());
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        });
    }
}

/// Adam with bias-corrected moments; weight decay is added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Optimizer for Adam {
    fn spec(&self) -> String {
        format!(
            "adam:beta1={},beta2={},eps={},weight_decay={}",
            self.beta1, self.beta2, self.eps, self.weight_decay
        )
    }

    fn step(&self, store: &mut ParameterStore, state: &mut OptimizerState, lr: f64) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        store.for_each_trainable(|name, p, g| {
            let mut m = std::mem::take(state.buffer("m", name, p.len()));
            let v = state.buffer("v", name, p.len());
            for i in 0..p.len() {
                let gi = g[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            *state.buffer("m", name, 0) = m;
        });
    }
}

/// Optimizers: `sgd[:momentum=,weight_decay=]` (defaults 0.9 and 0) and
/// `adam[:beta1=,beta2=,eps=,weight_decay=]` (0.9, 0.999, 1e-8, 0).
pub fn optimizer_registry() -> Registry<dyn Optimizer> {
    let mut r: Registry<dyn Optimizer> = Registry::new("optimizer");
    r.register("sgd", |arg| {
        let v = parse_kv("sgd", arg, &[("momentum", 0.9), ("weight_decay", 0.0)])?;
        if !(0.0..1.0).contains(&v[0]) || v[1] < 0.0 {
            return Err(Error::Config("sgd needs momentum in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(Arc::new(Sgd {
            momentum: v[0],
            weight_decay: v[1],
        }) as Arc<dyn Optimizer>)
    });
    r.register("adam", |arg| {
        let v = parse_kv(
            "adam",
            arg,
            &[("beta1", 0.9), ("beta2", 0.999), ("eps", 1e-8), ("weight_decay", 0.0)],
        )?;
        if !(0.0..1.0).contains(&v[0]) || !(0.0..1.0).contains(&v[1]) || v[2] <= 0.0 || v[3] < 0.0 {
            return Err(Error::Config("adam needs betas in [0, 1), eps > 0 and weight_decay >= 0".into()));
        }
        Ok(Arc::new(Adam {
            beta1: v[0],
            beta2: v[1],
            eps: v[2],
            weight_decay: v[3],
        }) as Arc<dyn Optimizer>)
    });
    r
}

/// `lr0 (1 + cos(pi epoch / total)) / 2`, with `epoch` clamped to `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let e = epoch.min(total) as f64;
    lr0 * (1.0 + (PI * e / total as f64).cos()) / 2.0
}

pub trait Schedule: Send + Sync {
    fn spec(&self) -> String;
    fn lr(&self, epoch: usize, total: usize, lr0: f64) -> f64;
}

struct Cosine;

impl Schedule for Cosine {
    fn spec(&self) -> String {
        "cosine".into()
    }

    fn lr(&self, epoch: usize, total: usize, lr0: f64) -> f64 {
        cosine_lr(epoch, total, lr0)
    }
}

struct Step {
    gamma: f64,
    every: usize,
}

impl Schedule for Step {
    fn spec(&self) -> String {
        format!("step:gamma={},every={}", self.gamma, self.every)
    }

    fn lr(&self, epoch: usize, _total: usize, lr0: f64) -> f64 {
        lr0 * self.gamma.powi((epoch / self.every) as i32)
    }
}

struct Constant;

impl Schedule for Constant {
    fn spec(&self) -> String {
        "constant".into()
    }

    fn lr(&self, _epoch: usize, _total: usize, lr0: f64) -> f64 {
        lr0
    }
}

/// Schedules: `cosine`, `step[:gamma=,every=]` (0.5 every 30) and `constant`.
pub fn schedule_registry() -> Registry<dyn Schedule> {
    let mut r: Registry<dyn Schedule> = Registry::new("schedule");
    r.register("cosine", |arg| {
        no_arg("cosine", arg)?;
        Ok(Arc::new(Cosine) as Arc<dyn Schedule>)
    });
    r.register("constant", |arg| {
        no_arg("constant", arg)?;
        Ok(Arc::new(Constant) as Arc<dyn Schedule>)
    });
    r.register("step", |arg| {
        let v = parse_kv("step", arg, &[("gamma", 0.5), ("every", 30.0)])?;
        if v[0] <= 0.0 || v[1] < 1.0 || v[1].fract() != 0.0 {
            return Err(Error::Config("step needs gamma > 0 and a whole every >= 1".into()));
        }
        Ok(Arc::new(Step {
            gamma: v[0],
            every: v[1] as usize,
        }) as Arc<dyn Schedule>)
    });
    r
}
