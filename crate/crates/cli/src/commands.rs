use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use pra_core::gradsuite::{self, SUITE_SEEDS};
use pra_core::irl::bench::{bench_attention, BenchConfig, BenchRecord, CSV_HEADER};
use pra_core::models::Network;
use pra_core::tensor::{write_atomic, ParameterStore};
use pra_core::trainkit::{evaluate, EpochRecord, EvalReport, Flow, Task, Trainer};
use pra_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{read_text, RunConfig, SyntheticSplits};

pub const CHECKPOINT: &str = "checkpoint.prak";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.json";

/// Set by the interrupt handler; training stops after the current epoch.
pub static INTERRUPTED: AtomicBool = AtomicBool::new(false);

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn report_json(r: &EvalReport) -> serde_json::Value {
    json!({ "loss": r.loss, "oa": r.oa, "macc": r.macc, "miou": r.miou, "map": r.map })
}

/// Run overrides shared by `train` and `eval`.
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub static_graph: bool,
}

fn load_run(config: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_report(task: Task, r: &EvalReport) {
    print!("loss {:.4}  oa {:.4}  macc {:.4}", r.loss, r.oa, r.macc);
    if let Some(m) = r.miou {
        print!("  {} {m:.4}", if task == Task::Partseg { "instance_miou" } else { "miou" });
    }
    if let Some(m) = r.map {
        print!("  map {m:.4}");
    }
    println!();
}

pub fn train(config: &Path, o: &Overrides) -> Result<i32> {
    let cfg = load_run(config, o)?;
    let (train, test) = cfg.datasets()?;
    let spec = cfg.network_spec(&train, &test, o.static_graph)?;
    let net = Network::new(spec.clone())?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    write_json(&out.join("run_config.json"), &cfg)?;
    write_atomic(&out.join("network.json"), spec.to_json().as_bytes())?;

    let mut store = net.init_store(cfg.train.seed);
    let trainer = Trainer::new(&net, cfg.task, cfg.train.clone())?;
    log::info!(
        "training {} parameters on {} clouds, validating on {}",
        store.num_trainable(),
        train.len(),
        test.len()
    );
    let mut csv = format!("{}\n", EpochRecord::csv_header(cfg.task != Task::Classify));
    let start = Instant::now();
    let mut done = 0;
    let fitted = trainer.fit(&mut store, &train, &test, |rec, st| {
        writeln!(csv, "{}", rec.csv_row()).expect("writing to a String");
        write_atomic(&out.join(METRICS), csv.as_bytes())?;
        st.save(&out.join(CHECKPOINT))?;
        done = rec.epoch;
        log::info!(
            "epoch {}/{}  lr {:.3e}  loss {:.4}  train_oa {:.4}  val_oa {:.4}",
            rec.epoch,
            cfg.train.epochs,
            rec.lr,
            rec.train_loss,
            rec.train_oa,
            rec.val_oa
        );
        Ok(if INTERRUPTED.load(Ordering::SeqCst) {
            Flow::Stop
        } else {
            Flow::Continue
        })
    });
    let status = match &fitted {
        Ok(_) if done < cfg.train.epochs => "interrupted",
        Ok(_) => "completed",
        Err(Error::Numeric(_)) => "diverged",
        Err(_) => "failed",
    };
    if let Err(e) = fitted {
        write_json(
            &out.join(SUMMARY),
            &json!({ "status": status, "epochs_completed": done, "error": e.to_string() }),
        )?;
        return Err(e);
    }
    if done == 0 {
        // stopped before any epoch ended: keep the initial weights on disk
        store.save(&out.join(CHECKPOINT))?;
    }
    let report = evaluate(&net, &store, &test, cfg.task, cfg.train.batch_size, cfg.train.label_smoothing)?;
    write_json(
        &out.join(SUMMARY),
        &json!({
            "status": status,
            "task": cfg.task,
            "epochs_completed": done,
            "epochs_planned": cfg.train.epochs,
            "seed": cfg.train.seed,
            "trainable_scalars": store.num_trainable(),
            "elapsed_secs": start.elapsed().as_secs_f64(),
            "test": report_json(&report),
        }),
    )?;
    print!("{status} after {done} epoch(s): ");
    print_report(cfg.task, &report);
    println!("outputs in {}", out.display());
    Ok(0)
}

pub fn eval(config: &Path, checkpoint: Option<&Path>, o: &Overrides) -> Result<i32> {
    let cfg = load_run(config, o)?;
    let (train, test) = cfg.datasets()?;
    let net = Network::new(cfg.network_spec(&train, &test, o.static_graph)?)?;
    let ckpt = checkpoint.map_or_else(|| cfg.output_dir.join(CHECKPOINT), Path::to_path_buf);
    if !ckpt.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let loaded = ParameterStore::load(&ckpt)?;
    let mut store = net.init_store(0);
    let matched = store.assign_from(&loaded)?;
    if matched != store.len() || loaded.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, network expects {}, {matched} matched",
            loaded.len(),
            store.len()
        )));
    }
    let report = evaluate(&net, &store, &test, cfg.task, cfg.train.batch_size, cfg.train.label_smoothing)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(
        &cfg.output_dir.join("eval.json"),
        &json!({ "checkpoint": ckpt, "clouds": test.len(), "test": report_json(&report) }),
    )?;
    print_report(cfg.task, &report);
    Ok(0)
}

pub fn gradcheck(scope: &str, seed: Option<u64>) -> Result<i32> {
    let seeds = seed.map_or_else(|| SUITE_SEEDS.to_vec(), |s| vec![s]);
    let reports = gradsuite::run_with_seeds(scope, &seeds)?;
    println!("{:<24} {:>12} {:>10}  result", "scope", "max_rel_err", "secs");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed();
        println!(
            "{:<24} {:>12.3e} {:>10.2}  {}",
            r.scope,
            r.max_rel_err,
            r.elapsed.as_secs_f64(),
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.scope);
        }
    }
    if failed.is_empty() {
        println!("all {} scope(s) passed on seeds {seeds:?}", reports.len());
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(1)
    }
}

/// A scalar or a list in a sweep file.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    fn values(&self) -> Vec<usize> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// One grid of benchmark cases: the product of all listed values.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(alias = "N")]
    pub n: OneOrMany,
    #[serde(alias = "S")]
    pub s: OneOrMany,
    #[serde(default = "default_k")]
    pub k: OneOrMany,
    pub m: OneOrMany,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Naive rows whose estimated working set exceeds this are skipped.
    #[serde(default)]
    pub memory_budget_mb: Option<usize>,
}

fn default_k() -> OneOrMany {
    OneOrMany::One(6)
}
fn default_channels() -> usize {
    256
}
fn default_batch() -> usize {
    1
}
fn default_repeats() -> usize {
    5
}
fn default_warmup() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SweepFile {
    One(Sweep),
    Many(Vec<Sweep>),
}

/// Default timing grid: three point/group pairs, each with m = 1 and 4.
pub fn default_sweeps() -> Vec<Sweep> {
    [(1024, 256), (2048, 512), (4096, 512)]
        .into_iter()
        .map(|(n, s)| Sweep {
            n: OneOrMany::One(n),
            s: OneOrMany::One(s),
            k: default_k(),
            m: OneOrMany::Many(vec![1, 4]),
            channels: default_channels(),
            batch: default_batch(),
            repeats: default_repeats(),
            warmup: default_warmup(),
            memory_budget_mb: None,
        })
        .collect()
}

pub fn load_sweeps(path: &Path) -> Result<Vec<Sweep>> {
    let text = read_text(path)?;
    let file: SweepFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid sweep {}: {e}", path.display())))?;
    Ok(match file {
        SweepFile::One(s) => vec![s],
        SweepFile::Many(v) => v,
    })
}

pub fn bench_configs(sweeps: &[Sweep], seed: u64) -> Result<Vec<BenchConfig>> {
    let mut out = Vec::new();
    for sw in sweeps {
        for n in sw.n.values() {
            for s in sw.s.values() {
                for k in sw.k.values() {
                    for m in sw.m.values() {
                        if m == 0 || k == 0 || m > k || s < 2 || s > n {
                            return Err(Error::Config(format!(
                                "bench case N={n} S={s} k={k} m={m} needs 2 <= S <= N and 1 <= m <= k"
                            )));
                        }
                        let mut c = BenchConfig::new(n, s, k, m);
                        c.channels = sw.channels;
                        c.batch = sw.batch;
                        c.repeats = sw.repeats;
                        c.warmup = sw.warmup;
                        c.seed = seed;
                        if let Some(mb) = sw.memory_budget_mb {
                            c.memory_budget = mb << 20;
                        }
                        out.push(c);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Config("bench sweep is empty".into()));
    }
    Ok(out)
}

fn ratio_table(records: &[BenchRecord]) -> String {
    let mut t = format!(
        "{:>6} {:>5} {:>3} {:>3} {:>11} {:>11} {:>7} {:>10}\n",
        "N", "S", "k", "m", "naive_ms", "rep_ms", "ratio", "reduction"
    );
    for r in records {
        let naive = r.naive_ms.map_or_else(|| "skipped".into(), |v| format!("{v:.2}"));
        let (ratio, red) = match r.naive_ms {
            Some(nv) => (format!("{:.2}x", nv / r.rep_ms), format!("{:.1}%", 100.0 * (1.0 - r.rep_ms / nv))),
            None => ("-".into(), "-".into()),
        };
        writeln!(t, "{:>6} {:>5} {:>3} {:>3} {naive:>11} {:>11.2} {ratio:>7} {red:>10}", r.n, r.s, r.k, r.m, r.rep_ms)
            .expect("writing to a String");
    }
    t
}

pub fn bench(sweep: Option<&Path>, out: &Path, seed: u64) -> Result<i32> {
    let sweeps = match sweep {
        Some(p) => load_sweeps(p)?,
        None => default_sweeps(),
    };
    let configs = bench_configs(&sweeps, seed)?;
    fs::create_dir_all(out)?;
    let mut csv = format!("{CSV_HEADER}\n");
    let mut records = Vec::with_capacity(configs.len());
    for c in &configs {
        log::info!("bench N={} S={} k={} m={}", c.n, c.s, c.k, c.m);
        let r = bench_attention(c)?;
        if let Some(why) = &r.skipped {
            log::warn!("naive graph skipped at N={} S={} k={}: {why}", r.n, r.s, r.k);
        }
        writeln!(csv, "{}", r.csv_row()).expect("writing to a String");
        records.push(r);
    }
    let path = out.join("bench.csv");
    write_atomic(&path, csv.as_bytes())?;
    print!("{}", ratio_table(&records));
    println!("wrote {}", path.display());
    Ok(0)
}

/// Writes both synthetic splits as xyzl directories under `out`, replacing
/// earlier contents of `out/train` and `out/test` in one rename each.
pub fn gen_data(config: &Path, out: &Path) -> Result<i32> {
    let text = read_text(config)?;
    let splits: SyntheticSplits =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid data config {}: {e}", config.display())))?;
    splits.validate()?;
    let (train, test) = splits.generate()?;
    fs::create_dir_all(out)?;
    for (name, data) in [("train", &train), ("test", &test)] {
        let dest = out.join(name);
        let tmp = out.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        data.write_dir(&tmp)?;
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::rename(&tmp, &dest)?;
        println!("{} clouds -> {}", data.len(), dest.display());
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_expands_to_product() {
        let sweeps: Vec<Sweep> = vec![serde_json::from_str(r#"{"N": 1024, "S": 256, "m": [1, 4]}"#).unwrap()];
        let cfgs = bench_configs(&sweeps, 3).unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!((cfgs[1].n, cfgs[1].s, cfgs[1].k, cfgs[1].m, cfgs[1].seed), (1024, 256, 6, 4, 3));
        assert_eq!(bench_configs(&default_sweeps(), 0).unwrap().len(), 6);
        let bad: Vec<Sweep> = vec![serde_json::from_str(r#"{"n": 8, "s": 16, "m": 1}"#).unwrap()];
        assert!(matches!(bench_configs(&bad, 0), Err(Error::Config(_))));
    }
}
