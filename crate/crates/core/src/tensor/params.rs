//! Named learnable arrays, their binary container, and the session that
//! binds them onto a tape for one forward/backward pass.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "PRAK"            4 bytes magic
//! version           u32
//! repeated until EOF:
//!   name_len        u32
//!   name            name_len bytes, UTF-8
//!   rank            u32
//!   extents         rank x u64
//!   values          product(extents) x f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Mode, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 4] = b"PRAK";
pub const PARAM_VERSION: u32 = 1;

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Running batchnorm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

/// Named, shaped arrays with gradient slots. Non-trainable entries hold
/// batchnorm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let grad = vec![0.0; value.len()];
        self.entries.insert(
            name.into(),
            Entry {
                value,
                grad,
                trainable,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.grad.as_slice())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn add_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        let e = self.entries.get_mut(name).ok_or_else(|| missing(name))?;
        if e.grad.len() != g.len() {
            return Err(Error::Dimension {
                op: "add_grad",
                lhs: e.value.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        e.grad.iter_mut().zip(g).for_each(|(d, s)| *d += s);
        Ok(())
    }

    /// Visits every trainable entry as `(name, values, grad)`.
    pub fn for_each_trainable(&mut self, mut f: impl FnMut(&str, &mut [f64], &[f64])) {
        for (name, e) in self.entries.iter_mut().filter(|(_, e)| e.trainable) {
            f(name, e.value.data_mut(), &e.grad);
        }
    }

    /// Adds `name` initialized uniformly in `[-bound, bound]`.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut impl Rng) {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("valid shape"), true);
    }

    /// Adds `{prefix}.W` (`fan_in x fan_out`) and optionally `{prefix}.b`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.init_uniform(format!("{prefix}.W"), vec![fan_in, fan_out], bound, rng);
        if bias {
            self.init_uniform(format!("{prefix}.b"), vec![fan_out], bound, rng);
        }
    }

    /// Adds `{prefix}.gamma`, `{prefix}.beta` and the running statistics.
    pub fn init_batchnorm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::full(vec![channels], 1.0), true);
        self.insert(format!("{prefix}.beta"), Tensor::zeros(vec![channels]), true);
        self.insert(format!("{prefix}{RUNNING_MEAN}"), Tensor::zeros(vec![channels]), false);
        self.insert(format!("{prefix}{RUNNING_VAR}"), Tensor::full(vec![channels], 1.0), false);
    }

    pub fn bn_stats(&self, prefix: &str) -> Result<BnStats> {
        let mean = self.get(&format!("{prefix}{RUNNING_MEAN}")).ok_or_else(|| missing(prefix))?;
        let var = self.get(&format!("{prefix}{RUNNING_VAR}")).ok_or_else(|| missing(prefix))?;
        Ok(BnStats {
            mean: mean.data().to_vec(),
            var: var.data().to_vec(),
        })
    }

    pub fn set_bn_stats(&mut self, prefix: &str, stats: &BnStats) -> Result<()> {
        for (suffix, src) in [(RUNNING_MEAN, &stats.mean), (RUNNING_VAR, &stats.var)] {
            let t = self.get_mut(&format!("{prefix}{suffix}")).ok_or_else(|| missing(prefix))?;
            t.data_mut().copy_from_slice(src);
        }
        Ok(())
    }

    /// Copies values for every name present in both stores; shapes must agree.
    pub fn assign_from(&mut self, other: &ParameterStore) -> Result<usize> {
        let mut n = 0;
        for (name, src) in &other.entries {
            if let Some(dst) = self.entries.get_mut(name) {
                if dst.value.shape() != src.value.shape() {
                    return Err(Error::Dimension {
                        op: "assign_from",
                        lhs: dst.value.shape().to_vec(),
                        rhs: src.value.shape().to_vec(),
                    });
                }
                dst.value = src.value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(e.value.rank() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a container; entries named like running statistics come back
    /// non-trainable.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != PARAM_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut store = Self::new();
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let trainable = !(name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR));
            store.insert(name, Tensor::new(shape, data)?, trainable);
        }
        Ok(store)
    }

    /// Writes through a sibling temp file and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn missing(name: &str) -> Error {
    Error::Config(format!("parameter `{name}` is not in the store"))
}

/// Replaces `path` with `bytes` via temp-and-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One forward (and optionally backward) pass: a fresh tape plus the
/// parameters bound onto it.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s mut ParameterStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    bn_momentum: f64,
    rng: ChaCha8Rng,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s mut ParameterStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            mode,
            bn_momentum: 0.9,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Seeds the stream used for dropout masks and stochastic samplers.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Weight of the current batch in running-statistic updates.
    pub fn with_bn_momentum(mut self, momentum: f64) -> Self {
        self.bn_momentum = momentum;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    /// Binds a stored parameter onto the tape (once per session).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let e = self.store.entries.get(name).ok_or_else(|| missing(name))?;
        let v = self.tape.leaf(e.value.clone(), e.trainable);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// `x . {prefix}.W (+ {prefix}.b)`.
    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.W"))?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.param(&format!("{prefix}.b"))?;
            self.tape.add(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mut stats = self.store.bn_stats(prefix)?;
        let y = self
            .tape
            .batchnorm(x, gamma, beta, &mut stats, self.mode, self.bn_momentum)?;
        if self.mode == Mode::Train {
            self.store.set_bn_stats(prefix, &stats)?;
        }
        Ok(y)
    }

    /// Fused edge-difference, batchnorm, leaky activation and neighborhood
    /// max; see [`Tape::edge_max_bn`]. Batchnorm parameters live under
    /// `{bn_prefix}`.
    pub fn edge_max_bn(&mut self, y: Var, nbr: Vec<usize>, k: usize, bn_prefix: &str, slope: f64) -> Result<Var> {
        let gamma = self.param(&format!("{bn_prefix}.gamma"))?;
        let beta = self.param(&format!("{bn_prefix}.beta"))?;
        let mut stats = self.store.bn_stats(bn_prefix)?;
        let out = self
            .tape
            .edge_max_bn(y, nbr, k, gamma, beta, &mut stats, self.mode, self.bn_momentum, slope)?;
        if self.mode == Mode::Train {
            self.store.set_bn_stats(bn_prefix, &stats)?;
        }
        Ok(out)
    }

    /// Inverted dropout; identity outside train mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.mode != Mode::Train || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    /// Runs the reverse sweep and adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(g) = self.tape.grad(v) {
                self.store.add_grad(name, g)?;
            }
        }
        Ok(())
    }
}
