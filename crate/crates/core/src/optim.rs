//! Adam with per-range learning rates, and a seeded training loop.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// A parameter range with its own learning rate. With `repeat > 0` the
/// range recurs every `repeat` elements (e.g. one field of every Gaussian
/// in a flat 59-per-Gaussian vector). With `final_lr` set, the rate
/// decays exponentially from `lr` to `final_lr` over `decay_steps`, then
/// stays there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    pub lr: f64,
    #[serde(default)]
    pub repeat: usize,
    #[serde(default)]
    pub final_lr: Option<f64>,
    #[serde(default)]
    pub decay_steps: usize,
}

impl ParamGroup {
    pub fn new(name: &str, range: Range<usize>, lr: f64) -> Self {
        ParamGroup {
            name: name.to_string(),
            range,
            lr,
            repeat: 0,
            final_lr: None,
            decay_steps: 0,
        }
    }

    pub fn repeating(mut self, period: usize) -> Self {
        self.repeat = period;
        self
    }

    /// Every index the group covers in a vector of length `len`.
    pub fn indices(&self, len: usize) -> impl Iterator<Item = usize> + '_ {
        let period = if self.repeat == 0 { usize::MAX } else { self.repeat };
        (0..)
            .map_while(move |j: usize| j.checked_mul(period))
            .take_while(move |&base| base < len && (base == 0 || self.repeat > 0))
            .flat_map(move |base| (base + self.range.start..base + self.range.end).take_while(move |&i| i < len))
    }

    pub fn with_decay(mut self, final_lr: f64, steps: usize) -> Self {
        self.final_lr = Some(final_lr);
        self.decay_steps = steps;
        self
    }

    /// Learning rate at 0-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.final_lr {
            Some(f) if self.decay_steps > 0 && self.lr > 0.0 && f > 0.0 => {
                let frac = (t as f64 / self.decay_steps as f64).min(1.0);
                (self.lr.ln() * (1.0 - frac) + f.ln() * frac).exp()
            }
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rate for parameters outside every group.
    pub lr: f64,
    pub groups: Vec<ParamGroup>,
    /// Group index per parameter (`u32::MAX` = default rate).
    group_of: Vec<u32>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            groups: Vec::new(),
            group_of: vec![u32::MAX; len],
        }
    }

    /// Groups must lie within the parameter vector and not overlap.
    pub fn with_groups(mut self, groups: Vec<ParamGroup>) -> Result<Self> {
        let len = self.m.len();
        let mut group_of = vec![u32::MAX; len];
        for (gi, g) in groups.iter().enumerate() {
            if g.range.start > g.range.end || g.range.end > len || (g.repeat > 0 && g.range.end > g.repeat) {
                return Err(Error::validation(format!("parameter group {} out of range", g.name)));
            }
            for i in g.indices(len) {
                if group_of[i] != u32::MAX {
                    return Err(Error::validation(format!(
                        "parameter groups {} and {} overlap at index {i}",
                        groups[group_of[i] as usize].name, g.name
                    )));
                }
                group_of[i] = gi as u32;
            }
        }
        self.groups = groups;
        self.group_of = group_of;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update in place. Leaves params and state
/// untouched on error.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(Error::Dimension {
            what: "adam parameters",
            expected: state.len(),
            got: if params.len() != state.len() { params.len() } else { grads.len() },
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { what: "gradient", index });
    }
    let t = state.step;
    state.step += 1;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let bc1 = T::one() - T::lit(state.beta1.powf(state.step as f64));
    let bc2 = T::one() - T::lit(state.beta2.powf(state.step as f64));
    let eps = T::lit(state.eps);
    let rates: Vec<T> = state.groups.iter().map(|g| T::lit(g.lr_at(t as usize))).collect();
    let default_lr = T::lit(state.lr);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        let lr = match state.group_of[i] {
            u32::MAX => default_lr,
            gi => rates[gi as usize],
        };
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Something a [`train_loop`] can minimize: returns the loss and its
/// gradient at `params`. `rng` is the loop's seeded generator (for view
/// or batch sampling).
pub trait Objective<T> {
    fn evaluate(&mut self, params: &[T], iter: usize, rng: &mut ChaCha8Rng) -> Result<(T, Vec<T>)>;
}

impl<T, F> Objective<T> for F
where
    F: FnMut(&[T], usize, &mut ChaCha8Rng) -> Result<(T, Vec<T>)>,
{
    fn evaluate(&mut self, params: &[T], iter: usize, rng: &mut ChaCha8Rng) -> Result<(T, Vec<T>)> {
        self(params, iter, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters: usize,
    pub seed: u64,
    /// Log the loss every this many iterations (0 = never).
    #[serde(default)]
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Passed to the callback after each evaluation, before the update.
#[derive(Debug)]
pub struct Progress<'a, T> {
    pub iter: usize,
    pub loss: T,
    pub params: &'a [T],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    /// The loss or gradient became non-finite; `params` holds the last
    /// parameters that evaluated finitely.
    Diverged,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: Vec<T>,
    /// Parameters with the lowest evaluated loss.
    pub best_params: Vec<T>,
    pub best_loss: T,
    /// Loss evaluated at the start of every iteration.
    pub trace: Vec<T>,
    pub status: TrainStatus,
    pub state: AdamState<T>,
}

/// Runs Adam for `schedule.iters` iterations. The trace entry for
/// iteration `i` is the loss at the parameters before update `i`.
/// Errors from the objective abort the loop; non-finite values end it with
/// [`TrainStatus::Diverged`].
pub fn train_loop<T: Scalar, O: Objective<T> + ?Sized>(
    objective: &mut O,
    mut params: Vec<T>,
    mut state: AdamState<T>,
    schedule: &Schedule,
    callback: &mut dyn FnMut(&Progress<T>) -> Control,
) -> Result<TrainOutcome<T>> {
    if params.len() != state.len() {
        return Err(Error::Dimension {
            what: "train_loop parameters",
            expected: state.len(),
            got: params.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut trace = Vec::with_capacity(schedule.iters);
    let mut best_params = params.clone();
    let mut best_loss = T::infinity();
    let mut status = TrainStatus::Completed;
    for iter in 0..schedule.iters {
        let (loss, grad) = objective.evaluate(&params, iter, &mut rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            log::warn!("iteration {iter}: non-finite loss or gradient, stopping");
            status = TrainStatus::Diverged;
            break;
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_params.copy_from_slice(&params);
        }
        if schedule.log_every > 0 && iter % schedule.log_every == 0 {
            log::info!("iter {iter}: loss {loss}");
        }
        if callback(&Progress {
            iter,
            loss,
            params: &params,
        }) == Control::Stop
        {
            status = TrainStatus::EarlyStopped;
            break;
        }
        adam_step(&mut params, &grad, &mut state)?;
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_loss,
        trace,
        status,
        state,
    })
}

/// Callback that never stops.
pub fn run_to_end<T>(_: &Progress<T>) -> Control {
    Control::Continue
}
