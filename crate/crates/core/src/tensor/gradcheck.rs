//! Central finite-difference checks for tape gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ActivationPattern, Mode, ParameterStore, Session, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks gradients of a scalar function with respect to every entry of
/// every input. Returns the largest relative error.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Picks up to `budget` trainable `(name, flat index)` pairs, covering
/// every trainable tensor once before doubling up.
pub fn sample_entries(store: &ParameterStore, budget: usize, rng: &mut impl Rng) -> Vec<(String, usize)> {
    let mut names: Vec<String> = store.trainable_names().map(str::to_owned).collect();
    names.shuffle(rng);
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < budget && !names.is_empty() {
        for name in &names {
            if out.len() == budget {
                break;
            }
            let len = store.get(name).map_or(0, Tensor::len);
            if round < len {
                out.push((name.clone(), rng.gen_range(0..len)));
            }
        }
        round += 1;
        if names.iter().all(|n| store.get(n).map_or(0, Tensor::len) <= round) {
            break;
        }
    }
    out
}

/// Checks parameter gradients of `forward` at the given entries.
///
/// `forward` runs on a fresh [`Session`] with a fixed seed each call, so
/// dropout masks and stochastic samplers repeat between evaluations.
/// The branches taken by leaky activations and maxima during the analytic
/// pass are recorded and replayed in every perturbed evaluation, so the
/// difference quotient stays on the same linear piece even when a step
/// would cross a kink. A replay that no longer fits the recorded pattern
/// is a [`Error::Contract`] error.
pub fn check_params<F>(store: &mut ParameterStore, entries: &[(String, usize)], mode: Mode, mut forward: F) -> Result<f64>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    const SEED: u64 = 0x5eed;
    let snapshot = store.clone();
    store.zero_grad();
    let pattern: ActivationPattern;
    {
        let mut s = Session::new(store, mode).with_seed(SEED);
        s.tape.record_pattern();
        let loss = forward(&mut s)?;
        pattern = s.tape.take_pattern().unwrap_or_default();
        s.backward(loss)?;
    }
    let analytic: Vec<f64> = entries
        .iter()
        .map(|(n, j)| store.grad(n).map_or(0.0, |g| g[*j]))
        .collect();

    let mut eval = |store: &mut ParameterStore| -> Result<f64> {
        let mut s = Session::new(store, mode).with_seed(SEED);
        s.tape.replay_pattern(pattern.clone());
        let loss = forward(&mut s)?;
        if !s.tape.pattern_intact() {
            return Err(Error::Contract("forward pass did not follow the recorded activation pattern".into()));
        }
        Ok(s.tape.value(loss).data()[0])
    };
    let mut worst: f64 = 0.0;
    for ((name, j), a) in entries.iter().zip(analytic) {
        let orig = snapshot.get(name).expect("sampled from store").data()[*j];
        store.get_mut(name).expect("present").data_mut()[*j] = orig + FD_STEP;
        let up = eval(store)?;
        store.get_mut(name).expect("present").data_mut()[*j] = orig - FD_STEP;
        let down = eval(store)?;
        store.get_mut(name).expect("present").data_mut()[*j] = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * FD_STEP)));
    }
    // undo running-statistic drift from the extra forwards
    store.assign_from(&snapshot)?;
    Ok(worst)
}
