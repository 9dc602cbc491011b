//! L-BFGS over the flattened trainable parameters, with a strong-Wolfe line
//! search, plus the mini-batch regime and the stage-wise training driver:
//! pair 1 (and optionally the soft-max) first, then each deeper pair with
//! everything shallower held fixed.

use crate::data::PreparedSample;
use crate::error::{Result, SegError};
use crate::loss::{class_frequencies, weighted_cross_entropy, ClassWeights};
use crate::model::{HeadKind, Network};
use crate::tensor::dot;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsParams {
    /// Curvature pairs retained.
    pub history: usize,
    /// Armijo (sufficient decrease) constant.
    pub c1: f64,
    /// Curvature condition constant.
    pub c2: f64,
    /// Line-search trials per iteration before giving up.
    pub max_line_search: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        LbfgsParams {
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
            grad_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    /// Objective value at the start point and after every accepted step.
    pub losses: Vec<f64>,
    pub func_evals: usize,
}

/// Minimizes `objective` for at most `max_iters` two-loop-recursion steps.
/// The accepted loss sequence is non-increasing; steps must satisfy the
/// strong Wolfe conditions. With an empty curvature buffer the direction is
/// exactly steepest descent.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: Vec<f64>,
    params: &LbfgsParams,
    max_iters: usize,
) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize, iter: usize| -> Result<(f64, Vec<f64>)> {
        let (f, g) = objective(x)?;
        *evals += 1;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(SegError::Numerical(format!(
                "non-finite loss or gradient at iteration {iter}"
            )));
        }
        if g.len() != n {
            return Err(SegError::Numerical(format!(
                "gradient length {} does not match parameter length {n}",
                g.len()
            )));
        }
        Ok((f, g))
    };

    let mut x = x0;
    let (mut f, mut g) = eval(&x, &mut evals, 0)?;
    let mut losses = vec![f];

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for iter in 0..max_iters {
        if inf_norm(&g) <= params.grad_tol {
            break;
        }
        let mut d = two_loop_direction(&g, &s_hist, &y_hist, &rho_hist);
        let mut gtd = dot(&g, &d);
        if gtd >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            d = g.iter().map(|v| -v).collect();
            gtd = -dot(&g, &g);
            if gtd >= 0.0 {
                break;
            }
        }

        let t_init = if s_hist.is_empty() {
            (1.0f64).min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE))
        } else {
            1.0
        };

        let mut phi = |t: f64, evals: &mut usize| -> Result<(f64, Vec<f64>, f64)> {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = eval(&xt, evals, iter + 1)?;
            let gtd_t = dot(&gt, &d);
            Ok((ft, gt, gtd_t))
        };
        let found = strong_wolfe(
            &mut phi,
            &mut evals,
            t_init,
            f,
            &g,
            gtd,
            inf_norm(&d),
            params,
        )?;
        let (t, f_new, g_new) = match found {
            Some(hit) => hit,
            None => break,
        };
        if t == 0.0 || f_new > f {
            break;
        }

        let s: Vec<f64> = d.iter().map(|di| t * di).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            if s_hist.len() == params.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s.clone());
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }

        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = f_new;
        g = g_new;
        losses.push(f);
    }

    Ok(LbfgsOutcome {
        x,
        losses,
        func_evals: evals,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// d = -H g via the two-loop recursion; the initial Hessian approximation is
/// `gamma I` with gamma from the most recent pair, or the identity when the
/// buffer is empty (making d exactly -g).
fn two_loop_direction(
    g: &[f64],
    s_hist: &[Vec<f64>],
    y_hist: &[Vec<f64>],
    rho_hist: &[f64],
) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let m = s_hist.len();
    let mut alphas = vec![0.0; m];
    for i in (0..m).rev() {
        let alpha = rho_hist[i] * dot(&s_hist[i], &q);
        alphas[i] = alpha;
        for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
            *qj -= alpha * yj;
        }
    }
    let gamma = if m > 0 {
        let y = &y_hist[m - 1];
        dot(&s_hist[m - 1], y) / dot(y, y)
    } else {
        1.0
    };
    for qj in &mut q {
        *qj *= gamma;
    }
    for i in 0..m {
        let beta = rho_hist[i] * dot(&y_hist[i], &q);
        let scale = alphas[i] - beta;
        for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
            *qj += scale * sj;
        }
    }
    for qj in &mut q {
        *qj = -*qj;
    }
    q
}

/// Minimizer of the cubic through two (position, value, slope) samples,
/// clamped to the given bounds.
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = match bounds {
        Some(b) => b,
        None => {
            if x1 <= x2 {
                (x1, x2)
            } else {
                (x2, x1)
            }
        }
    };
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_square = d1 * d1 - g1 * g2;
    if d2_square >= 0.0 {
        let d2 = d2_square.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if min_pos.is_finite() {
            min_pos.clamp(lo, hi)
        } else {
            (lo + hi) / 2.0
        }
    } else {
        (lo + hi) / 2.0
    }
}

struct Probe {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Bracketing strong-Wolfe line search with cubic-interpolation zoom.
/// Returns the accepted step, or `None` when the trial budget runs out
/// without progress.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<P>(
    phi: &mut P,
    evals: &mut usize,
    t_init: f64,
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    d_norm: f64,
    params: &LbfgsParams,
) -> Result<Option<(f64, f64, Vec<f64>)>>
where
    P: FnMut(f64, &mut usize) -> Result<(f64, Vec<f64>, f64)>,
{
    const TOL_CHANGE: f64 = 1e-14;
    let (c1, c2, max_ls) = (params.c1, params.c2, params.max_line_search);

    let mut t = t_init;
    let (mut f_new, mut g_new, mut gtd_new) = phi(t, evals)?;
    let mut ls_iter = 0usize;

    let mut t_prev = 0.0;
    let mut f_prev = f0;
    let mut g_prev = g0.to_vec();
    let mut gtd_prev = gtd0;

    let mut bracket: Option<[Probe; 2]> = None;
    let mut done = false;

    while ls_iter < max_ls {
        if f_new > f0 + c1 * t * gtd0 || (ls_iter > 1 && f_new >= f_prev) {
            bracket = Some([
                Probe {
                    t: t_prev,
                    f: f_prev,
                    g: g_prev,
                    gtd: gtd_prev,
                },
                Probe {
                    t,
                    f: f_new,
                    g: g_new.clone(),
                    gtd: gtd_new,
                },
            ]);
            break;
        }
        if gtd_new.abs() <= -c2 * gtd0 {
            done = true;
            bracket = Some([
                Probe {
                    t,
                    f: f_new,
                    g: g_new.clone(),
                    gtd: gtd_new,
                },
                Probe {
                    t,
                    f: f_new,
                    g: g_new.clone(),
                    gtd: gtd_new,
                },
            ]);
            break;
        }
        if gtd_new >= 0.0 {
            bracket = Some([
                Probe {
                    t: t_prev,
                    f: f_prev,
                    g: g_prev,
                    gtd: gtd_prev,
                },
                Probe {
                    t,
                    f: f_new,
                    g: g_new.clone(),
                    gtd: gtd_new,
                },
            ]);
            break;
        }
        // Still descending: extrapolate.
        let min_step = t + 0.01 * (t - t_prev);
        let max_step = t * 10.0;
        let next = cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, Some((min_step, max_step)));
        t_prev = t;
        f_prev = f_new;
        g_prev = std::mem::take(&mut g_new);
        gtd_prev = gtd_new;
        t = next;
        let probe = phi(t, evals)?;
        f_new = probe.0;
        g_new = probe.1;
        gtd_new = probe.2;
        ls_iter += 1;
    }

    let mut bracket = match bracket {
        Some(b) => b,
        None => [
            Probe {
                t: 0.0,
                f: f0,
                g: g0.to_vec(),
                gtd: gtd0,
            },
            Probe {
                t,
                f: f_new,
                g: g_new,
                gtd: gtd_new,
            },
        ],
    };

    // Zoom: shrink the bracket around a point satisfying both conditions.
    let mut insuf_progress = false;
    let (mut low, mut high) = if bracket[0].f <= bracket[1].f { (0, 1) } else { (1, 0) };
    while !done && ls_iter < max_ls {
        if (bracket[1].t - bracket[0].t).abs() * d_norm < TOL_CHANGE {
            break;
        }
        let mut t = cubic_interpolate(
            bracket[0].t,
            bracket[0].f,
            bracket[0].gtd,
            bracket[1].t,
            bracket[1].f,
            bracket[1].gtd,
            None,
        );
        let max_b = bracket[0].t.max(bracket[1].t);
        let min_b = bracket[0].t.min(bracket[1].t);
        let eps = 0.1 * (max_b - min_b);
        if (max_b - t).min(t - min_b) < eps {
            if insuf_progress || t >= max_b || t <= min_b {
                t = if (t - max_b).abs() < (t - min_b).abs() {
                    max_b - eps
                } else {
                    min_b + eps
                };
                insuf_progress = false;
            } else {
                insuf_progress = true;
            }
        } else {
            insuf_progress = false;
        }

        let (ft, gt, gtd_t) = phi(t, evals)?;
        ls_iter += 1;
        if ft > f0 + c1 * t * gtd0 || ft >= bracket[low].f {
            bracket[high] = Probe {
                t,
                f: ft,
                g: gt,
                gtd: gtd_t,
            };
            (low, high) = if bracket[0].f <= bracket[1].f { (0, 1) } else { (1, 0) };
        } else {
            if gtd_t.abs() <= -c2 * gtd0 {
                done = true;
            } else if gtd_t * (bracket[high].t - bracket[low].t) >= 0.0 {
                bracket.swap(low, high);
                // After the swap, `high` holds the old low point.
            }
            bracket[low] = Probe {
                t,
                f: ft,
                g: gt,
                gtd: gtd_t,
            };
        }
    }

    let best = &bracket[low];
    if best.t == 0.0 || best.f > f0 {
        return Ok(None);
    }
    Ok(Some((best.t, best.f, best.g.clone())))
}

/// Uniform i.i.d. indices with replacement; deterministic for a fixed rng
/// state.
pub fn sample_minibatch(
    dataset_len: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if dataset_len == 0 {
        return Err(SegError::Config("cannot sample from an empty dataset".into()));
    }
    Ok((0..size).map(|_| rng.random_range(0..dataset_len)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    /// Trained together with pair 1, then frozen.
    Joint,
    /// Kept at its random initialization throughout.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs_per_stage: usize,
    /// Optimizer iterations per mini-batch.
    pub iterations_per_batch: usize,
    pub batch_size: usize,
    /// Stages to run; defaults to the network depth.
    pub stages: Option<usize>,
    pub seed: u64,
    pub softmax_mode: SoftmaxMode,
    pub weighting: Weighting,
    pub lbfgs: LbfgsParams,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs_per_stage: 10,
            iterations_per_batch: 20,
            batch_size: 25,
            stages: None,
            seed: 0,
            softmax_mode: SoftmaxMode::Joint,
            weighting: Weighting::InverseFrequency,
            lbfgs: LbfgsParams::default(),
        }
    }
}

/// One optimizer-iteration loss sample, keyed by where it happened.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub stage: usize,
    pub epoch: usize,
    pub batch: usize,
    pub iteration: usize,
    pub loss: f64,
}

pub fn records_to_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("stage,epoch,batch,iteration,loss\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.epoch, r.batch, r.iteration, r.loss
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<LossRecord>,
    pub weights: ClassWeights,
}

/// Stage-wise training: stage `s` trains exactly pair `s` (plus the soft-max
/// in stage 1 when the mode is joint) with everything shallower frozen, on
/// mini-batches drawn with replacement, each optimized with L-BFGS.
pub fn train_modular(
    net: &mut Network,
    data: &[PreparedSample],
    schedule: &TrainSchedule,
) -> Result<TrainRun> {
    let depth = net.depth();
    let stages = schedule.stages.unwrap_or(depth);
    if stages == 0 || stages > depth {
        return Err(SegError::Config(format!(
            "schedule stages {stages} out of range 1..={depth}"
        )));
    }
    let weights = compute_weights(net, data, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut records = Vec::new();
    for stage in 1..=stages {
        let mut trainable = vec![format!("enc{stage}"), format!("dec{stage}")];
        if stage == 1 && schedule.softmax_mode == SoftmaxMode::Joint {
            trainable.push("softmax".into());
        }
        let names: Vec<&str> = trainable.iter().map(String::as_str).collect();
        net.set_freeze(&names)?;
        run_stage(
            net,
            data,
            &weights,
            schedule,
            stage,
            stage,
            schedule.epochs_per_stage,
            &mut rng,
            &mut records,
        )?;
    }
    Ok(TrainRun { records, weights })
}

/// Transfer-learning variants. `Scratch` is plain modular training from the
/// given initialization; `HeadOnly` swaps in a hidden-layer soft-max head
/// and trains it over the frozen body; `DeepestPair` fine-tunes only the
/// deepest encoder-decoder pair for two epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainVariant {
    Scratch,
    HeadOnly { hidden_width: usize },
    DeepestPair,
}

pub fn train_variant(
    net: &mut Network,
    data: &[PreparedSample],
    variant: TrainVariant,
    schedule: &TrainSchedule,
) -> Result<TrainRun> {
    match variant {
        TrainVariant::Scratch => train_modular(net, data, schedule),
        TrainVariant::HeadOnly { hidden_width } => {
            net.attach_head(
                HeadKind::Hidden {
                    width: hidden_width,
                },
                schedule.seed.wrapping_add(0x5EAD),
            )?;
            let weights = compute_weights(net, data, schedule)?;
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
            let mut records = Vec::new();
            net.set_freeze(&["head", "softmax"])?;
            run_stage(
                net,
                data,
                &weights,
                schedule,
                1,
                net.depth(),
                schedule.epochs_per_stage,
                &mut rng,
                &mut records,
            )?;
            Ok(TrainRun { records, weights })
        }
        TrainVariant::DeepestPair => {
            let depth = net.depth();
            let weights = compute_weights(net, data, schedule)?;
            let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
            let mut records = Vec::new();
            let enc = format!("enc{depth}");
            let dec = format!("dec{depth}");
            net.set_freeze(&[enc.as_str(), dec.as_str()])?;
            run_stage(
                net, data, &weights, schedule, depth, depth, 2, &mut rng, &mut records,
            )?;
            Ok(TrainRun { records, weights })
        }
    }
}

fn compute_weights(
    net: &Network,
    data: &[PreparedSample],
    schedule: &TrainSchedule,
) -> Result<ClassWeights> {
    if data.is_empty() {
        return Err(SegError::Config("training dataset is empty".into()));
    }
    let classes = net.config().classes;
    Ok(match schedule.weighting {
        Weighting::Uniform => ClassWeights::uniform(classes),
        Weighting::InverseFrequency => {
            let freq = class_frequencies(data.iter().map(|s| &s.labels), classes)?;
            ClassWeights::inverse_frequency(&freq)
        }
    })
}

/// Mini-batch objective: mean weighted cross-entropy over the batch, with
/// per-sample forward/backward fanned out in parallel and reduced in sample
/// order so results do not depend on thread count.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    net: &mut Network,
    data: &[PreparedSample],
    weights: &ClassWeights,
    schedule: &TrainSchedule,
    stage: usize,
    active_depth: usize,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    records: &mut Vec<LossRecord>,
) -> Result<()> {
    if schedule.batch_size == 0 {
        return Err(SegError::Config("batch size must be positive".into()));
    }
    let batches_per_epoch = data.len().div_ceil(schedule.batch_size);
    for epoch in 1..=epochs {
        for batch in 0..batches_per_epoch {
            let idxs = sample_minibatch(data.len(), schedule.batch_size, rng)?;
            let x0 = net.param_vector(true).data;
            let outcome = {
                let objective = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
                    net.set_trainable_values(v)?;
                    let immut: &Network = net;
                    let per_sample: Result<Vec<(f64, Vec<f64>)>> = idxs
                        .par_iter()
                        .map(|&i| {
                            let sample = &data[i];
                            let trace = immut.forward_depth(&sample.input, active_depth)?;
                            let (loss, grad_logits) =
                                weighted_cross_entropy(trace.probs(), &sample.labels, weights)?;
                            let grads = immut.backward(&trace, &grad_logits)?;
                            Ok((loss, grads.data))
                        })
                        .collect();
                    let per_sample = per_sample?;
                    let scale = 1.0 / idxs.len() as f64;
                    let mut total = 0.0;
                    let mut grad = vec![0.0; v.len()];
                    for (loss, g) in &per_sample {
                        total += loss * scale;
                        for (acc, gi) in grad.iter_mut().zip(g) {
                            *acc += gi * scale;
                        }
                    }
                    Ok((total, grad))
                };
                lbfgs_minimize(
                    objective,
                    x0,
                    &schedule.lbfgs,
                    schedule.iterations_per_batch,
                )
                .map_err(|e| match e {
                    SegError::Numerical(msg) => SegError::Numerical(format!(
                        "stage {stage} epoch {epoch} batch {batch}: {msg}"
                    )),
                    other => other,
                })?
            };
            net.set_trainable_values(&outcome.x)?;
            for (iteration, &loss) in outcome.losses.iter().enumerate() {
                records.push(LossRecord {
                    stage,
                    epoch,
                    batch,
                    iteration,
                    loss,
                });
            }
        }
    }
    Ok(())
}
