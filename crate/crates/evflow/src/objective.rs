//! The contrast-maximization loss stack and its gradient.
//!
//! One *term* is the squared-timestamp-image loss of a deblurring window
//! (scale s, sub-partition p) at one reference time t_ref. The full objective
//! averages terms over all references of a sub-partition, all sub-partitions
//! of a scale, and all S timescales:
//!
//!   total = (1/S) Σ_s (1/2^s) Σ_p mean_{t_ref} L(s, p, t_ref)
//!
//! Each term uses its own local timestamp normalization and its own border
//! mask. The gradient is the exact reverse-mode derivative of this forward
//! computation, with the occupancy denominator and the masks held constant.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::event::EventWindow;
use crate::flow::{Bilin, FlowSequence};
use crate::scalar::{sc, Scalar};
use crate::warp::{for_each_deposit, push_warp_steps, WarpMode};

/// Configuration of the loss stack.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossConfig {
    /// Input partitions per training window.
    pub r: usize,
    /// Number of timescales S; scale s splits the window into 2^s pieces.
    pub scales: usize,
    /// Guard constant of the timestamp-image and occupancy denominators.
    pub epsilon: f64,
    /// If set, only a seeded uniform subsample of about this many events per
    /// millisecond contributes to the gradient. All events always contribute
    /// to the loss value.
    pub grad_event_cap_per_ms: Option<usize>,
    /// Seed of the gradient subsample.
    pub grad_seed: u64,
    /// Warp model used by every term.
    pub warp: WarpMode,
}

impl LossConfig {
    pub fn new(r: usize, scales: usize) -> Self {
        LossConfig {
            r,
            scales,
            epsilon: 1e-9,
            grad_event_cap_per_ms: None,
            grad_seed: 0,
            warp: WarpMode::Iterative,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::Config("R must be at least 1".into()));
        }
        if self.scales < 1 {
            return Err(Error::Config("need at least one timescale".into()));
        }
        if self.scales > 1 + self.r.trailing_zeros() as usize + 32 {
            // cheap guard before the shift below
            return Err(Error::Config(format!(
                "S = {} is too deep for R = {}",
                self.scales, self.r
            )));
        }
        let pieces = 1usize << (self.scales - 1);
        if self.r % pieces != 0 {
            return Err(Error::Config(format!(
                "R = {} is not divisible by 2^(S−1) = {pieces}",
                self.r
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One loss term: Eq.-3-style value of deblurring window (s, p) at t_ref.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossTerm {
    #[serde(rename = "s")]
    pub scale: usize,
    #[serde(rename = "p")]
    pub sub_partition: usize,
    pub t_ref: usize,
    pub value: f64,
    /// Events of this term excluded by border masking.
    pub masked: usize,
    /// Events in the term's sub-partition range.
    pub total: usize,
}

/// The multi-timescale loss with its per-term breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
    /// Fraction of (event, reference) pairs excluded by border masking.
    pub masked_fraction: f64,
}

impl LossReport {
    /// Recombine `terms` into the total; must match `total` to 1e−12 relative.
    pub fn recombined_total(&self) -> f64 {
        let scales = self.terms.iter().map(|t| t.scale).max().map_or(0, |s| s + 1);
        if scales == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for s in 0..scales {
            for p in 0..(1usize << s) {
                let group: Vec<f64> = self
                    .terms
                    .iter()
                    .filter(|t| t.scale == s && t.sub_partition == p)
                    .map(|t| t.value)
                    .collect();
                if !group.is_empty() {
                    let mean = group.iter().sum::<f64>() / group.len() as f64;
                    total += mean / (scales as f64 * (1u64 << s) as f64);
                }
            }
        }
        total
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }
}

/// Per-map gradient grids aligned with a FlowSequence.
#[derive(Clone, Debug)]
pub struct FlowGradient<T> {
    pub du: Vec<Array2<T>>,
    pub dv: Vec<Array2<T>>,
}

impl<T: Scalar> FlowGradient<T> {
    pub fn zeros(width: usize, height: usize, r: usize) -> Self {
        FlowGradient {
            du: (0..r).map(|_| Array2::zeros((height, width))).collect(),
            dv: (0..r).map(|_| Array2::zeros((height, width))).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FlowGradient<T>) {
        for (a, b) in self.du.iter_mut().zip(&other.du) {
            *a += b;
        }
        for (a, b) in self.dv.iter_mut().zip(&other.dv) {
            *a += b;
        }
    }

    /// Euclidean norm over every cell of every map.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.du.iter().chain(self.dv.iter()) {
            for &c in g {
                let c = c.to_f64_s();
                s += c * c;
            }
        }
        s.sqrt()
    }
}

/// Timestamp contribution of an event at `tau` to reference `t_ref` within a
/// deblurring window of `window_length` partitions:
/// t̄ = 1 − |t_ref − tau| / window_length.
pub fn normalize_timestamp<T: Scalar>(tau: T, t_ref: T, window_length: T) -> Result<T> {
    if window_length <= T::zero() {
        return Err(Error::Config("window length must be positive".into()));
    }
    Ok(T::one() - (t_ref - tau).abs() / window_length)
}

/// Event prepared for loss evaluation: position, normalized time, channel,
/// and whether it contributes to the gradient.
#[derive(Clone, Copy, Debug)]
struct Prepped<T> {
    x: T,
    y: T,
    tau: T,
    channel: usize,
    grad: bool,
}

fn prep_events<T: Scalar>(window: &EventWindow, cfg: &LossConfig) -> Result<Vec<Prepped<T>>> {
    let mut prepped: Vec<Prepped<T>> = Vec::with_capacity(window.len());
    for e in window.events() {
        let tau = window.normalized_time(e)?;
        prepped.push(Prepped {
            x: sc::<T>(e.x as f64),
            y: sc::<T>(e.y as f64),
            tau: sc::<T>(tau),
            channel: e.polarity.index(),
            grad: true,
        });
    }
    if let Some(cap) = cfg.grad_event_cap_per_ms {
        let budget = ((cap as f64) * window.duration_ms()).ceil() as usize;
        if budget < prepped.len() {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.grad_seed);
            for p in prepped.iter_mut() {
                p.grad = false;
            }
            // partial Fisher–Yates: the first `budget` slots of a shuffle
            let n = prepped.len();
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..budget {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            for &i in &idx[..budget] {
                prepped[i].grad = true;
            }
        }
    }
    Ok(prepped)
}

/// Index range of events with τ ∈ [a, b), given τ-sorted events.
fn sub_partition_range<T: Scalar>(events: &[Prepped<T>], a: usize, b: usize) -> (usize, usize) {
    let a_t = sc::<T>(a as f64);
    let b_t = sc::<T>(b as f64);
    let lo = events.partition_point(|e| e.tau < a_t);
    let hi = events.partition_point(|e| e.tau < b_t);
    (lo, hi)
}

/// Fixed-size chunking keeps parallel reductions deterministic for any worker
/// count: boundaries depend only on the input length.
fn chunk_len(n: usize, max_chunks: usize) -> usize {
    (n.div_ceil(max_chunks)).max(1024)
}

/// Accumulated splat grids of one term.
struct TermGrids<T> {
    /// κκ mass per polarity channel.
    w: [Array2<T>; 2],
    /// t̄-weighted κκ mass per polarity channel.
    n: [Array2<T>; 2],
    masked: usize,
    total: usize,
}

impl<T: Scalar> TermGrids<T> {
    fn zeros(shape: (usize, usize)) -> Self {
        TermGrids {
            w: [Array2::zeros(shape), Array2::zeros(shape)],
            n: [Array2::zeros(shape), Array2::zeros(shape)],
            masked: 0,
            total: 0,
        }
    }

    fn merge(&mut self, other: TermGrids<T>) {
        for c in 0..2 {
            self.w[c] += &other.w[c];
            self.n[c] += &other.n[c];
        }
        self.masked += other.masked;
        self.total += other.total;
    }
}

/// Everything the backward pass needs from a term's forward pass.
struct TermEval<T> {
    grids: TermGrids<T>,
    /// Occupied-pixel count of the combined-polarity mass image.
    occupancy: usize,
    loss: T,
}

/// Walk one event's warp to `t_ref`, recording positions after each step.
/// Returns false if any position (including the start) left the frame.
#[inline]
fn run_chain<T: Scalar>(
    e: &Prepped<T>,
    seq: &FlowSequence<T>,
    t_ref: usize,
    mode: WarpMode,
    steps: &mut Vec<(usize, T)>,
    positions: &mut Vec<(T, T)>,
) -> bool {
    let geom = seq.geometry();
    steps.clear();
    positions.clear();
    match mode {
        WarpMode::Iterative => push_warp_steps(e.tau, t_ref, seq.r(), steps),
        WarpMode::Linear => {
            let span = sc::<T>(t_ref as f64) - e.tau;
            if span != T::zero() {
                let k = (e.tau.floor().to_f64_s() as usize).min(seq.r() - 1);
                steps.push((k, span));
            }
        }
    }
    let (mut px, mut py) = (e.x, e.y);
    let mut in_frame = geom.contains_point(px.to_f64_s(), py.to_f64_s());
    positions.push((px, py));
    for &(m, dt) in steps.iter() {
        let map = seq.map(m);
        let bl = Bilin::new(map.width(), map.height(), px, py);
        px = px + dt * bl.sample(&map.u);
        py = py + dt * bl.sample(&map.v);
        in_frame = in_frame && geom.contains_point(px.to_f64_s(), py.to_f64_s());
        positions.push((px, py));
    }
    in_frame
}

/// Forward pass of one term over `events` (the τ ∈ [a, b) range).
fn term_forward<T: Scalar>(
    events: &[Prepped<T>],
    seq: &FlowSequence<T>,
    window_length: usize,
    t_ref: usize,
    epsilon: T,
    mode: WarpMode,
    apply_mask: bool,
) -> TermEval<T> {
    let geom = seq.geometry();
    let shape = (geom.height as usize, geom.width as usize);
    let (w_px, h_px) = (geom.width as usize, geom.height as usize);
    let t_ref_t = sc::<T>(t_ref as f64);
    let len_t = sc::<T>(window_length as f64);

    let chunk = chunk_len(events.len().max(1), 64);
    let partials: Vec<TermGrids<T>> = events
        .par_chunks(chunk)
        .map(|part| {
            let mut g = TermGrids::zeros(shape);
            let mut steps = Vec::new();
            let mut positions = Vec::new();
            for e in part {
                g.total += 1;
                let in_frame = run_chain(e, seq, t_ref, mode, &mut steps, &mut positions);
                if apply_mask && !in_frame {
                    g.masked += 1;
                    continue;
                }
                let (px, py) = *positions.last().unwrap();
                let t_bar = T::one() - (t_ref_t - e.tau).abs() / len_t;
                let c = e.channel;
                for_each_deposit(px, py, w_px, h_px, |iy, ix, wx, wy| {
                    let w = wx * wy;
                    g.w[c][(iy, ix)] += w;
                    g.n[c][(iy, ix)] += w * t_bar;
                });
            }
            g
        })
        .collect();

    let mut grids = TermGrids::zeros(shape);
    for p in partials {
        grids.merge(p);
    }

    let mut occupancy = 0usize;
    let mut num = T::zero();
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let mass = grids.w[0][(i, j)] + grids.w[1][(i, j)];
            if mass > T::zero() {
                occupancy += 1;
            }
            for c in 0..2 {
                let t = grids.n[c][(i, j)] / (grids.w[c][(i, j)] + epsilon);
                num += t * t;
            }
        }
    }
    let loss = num / (sc::<T>(occupancy as f64) + epsilon);
    TermEval { grids, occupancy, loss }
}

/// Reverse pass of one term: accumulate `weight × dL_term/dflow` into `grad`.
/// Masks and the occupancy denominator are constants of the current iterate.
#[allow(clippy::too_many_arguments)]
fn term_backward<T: Scalar>(
    events: &[Prepped<T>],
    seq: &FlowSequence<T>,
    window_length: usize,
    t_ref: usize,
    epsilon: T,
    mode: WarpMode,
    eval: &TermEval<T>,
    weight: T,
    grad: &mut FlowGradient<T>,
) {
    let geom = seq.geometry();
    let (w_px, h_px) = (geom.width as usize, geom.height as usize);
    let t_ref_t = sc::<T>(t_ref as f64);
    let len_t = sc::<T>(window_length as f64);
    let d = sc::<T>(eval.occupancy as f64) + epsilon;
    let two = sc::<T>(2.0);

    let chunk = chunk_len(events.len().max(1), 16);
    let partials: Vec<FlowGradient<T>> = events
        .par_chunks(chunk)
        .map(|part| {
            let mut g = FlowGradient::zeros(w_px, h_px, seq.r());
            let mut steps = Vec::new();
            let mut positions = Vec::new();
            for e in part {
                if !e.grad {
                    continue;
                }
                let in_frame = run_chain(e, seq, t_ref, mode, &mut steps, &mut positions);
                if !in_frame {
                    continue; // masked events are constants of this term
                }
                let (px, py) = *positions.last().unwrap();
                let t_bar = T::one() - (t_ref_t - e.tau).abs() / len_t;
                let c = e.channel;

                // dL/d(x', y') through the splat and the timestamp images
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let x0i = x0.to_f64_s() as i64;
                let y0i = y0.to_f64_s() as i64;
                let mut gx = T::zero();
                let mut gy = T::zero();
                // At the kernel kinks (fx = 0 or fy = 0) this is the right
                // derivative: a nonzero, mass-conserving subgradient, so
                // descent still works when events sit exactly on pixels.
                for (iy, wy, sy) in [(y0i, T::one() - fy, -T::one()), (y0i + 1, fy, T::one())] {
                    if iy < 0 || iy >= h_px as i64 {
                        continue;
                    }
                    for (ix, wx, sx) in [(x0i, T::one() - fx, -T::one()), (x0i + 1, fx, T::one())]
                    {
                        if ix < 0 || ix >= w_px as i64 {
                            continue;
                        }
                        let at = (iy as usize, ix as usize);
                        let wq = eval.grids.w[c][at] + epsilon;
                        let tq = eval.grids.n[c][at] / wq;
                        // d(term)/d(deposit weight)
                        let coeff = two * tq / (wq * d) * (t_bar - tq);
                        gx += coeff * sx * wy;
                        gy += coeff * sy * wx;
                    }
                }

                // chain rule back through the warp steps
                let mut gvx = weight * gx;
                let mut gvy = weight * gy;
                for i in (0..steps.len()).rev() {
                    let (m, dt) = steps[i];
                    let (sx, sy) = positions[i];
                    let map = seq.map(m);
                    let bl = Bilin::new(w_px, h_px, sx, sy);
                    for (iy, ix, w) in bl.weights() {
                        g.du[m][(iy, ix)] += dt * gvx * w;
                        g.dv[m][(iy, ix)] += dt * gvy * w;
                    }
                    let dudx = bl.d_dx(&map.u);
                    let dudy = bl.d_dy(&map.u);
                    let dvdx = bl.d_dx(&map.v);
                    let dvdy = bl.d_dy(&map.v);
                    let nx = gvx * (T::one() + dt * dudx) + gvy * dt * dvdx;
                    let ny = gvx * dt * dudy + gvy * (T::one() + dt * dvdy);
                    gvx = nx;
                    gvy = ny;
                }
            }
            g
        })
        .collect();

    for p in &partials {
        grad.add_assign(p);
    }
}

fn check_seq<T: Scalar>(window: &EventWindow, seq: &FlowSequence<T>) -> Result<()> {
    if seq.r() != window.scheme().r {
        return Err(Error::Config(format!(
            "flow sequence has R = {} but window has R = {}",
            seq.r(),
            window.scheme().r
        )));
    }
    Ok(())
}

/// Loss of the deblurring window covering `partitions` at one reference time
/// (an integer boundary of that range), with border masking applied.
pub fn loss_at_reference<T: Scalar>(
    window: &EventWindow,
    seq: &FlowSequence<T>,
    partitions: std::ops::Range<usize>,
    t_ref: usize,
    epsilon: f64,
) -> Result<T> {
    check_seq(window, seq)?;
    let (a, b) = (partitions.start, partitions.end);
    if a >= b || b > seq.r() {
        return Err(Error::Config(format!("bad sub-partition range {a}..{b}")));
    }
    if t_ref < a || t_ref > b {
        return Err(Error::ReferenceOutOfRange { t_ref, r: b });
    }
    if epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let cfg = LossConfig::new(seq.r(), 1);
    let events = prep_events::<T>(window, &cfg)?;
    let (lo, hi) = sub_partition_range(&events, a, b);
    let eval = term_forward(
        &events[lo..hi],
        seq,
        b - a,
        t_ref,
        sc::<T>(epsilon),
        WarpMode::Iterative,
        true,
    );
    Ok(eval.loss)
}

/// Mean of [`loss_at_reference`] over every integer boundary of `partitions`
/// (window length L_w gives L_w + 1 reference times).
pub fn loss_multi_reference<T: Scalar>(
    window: &EventWindow,
    seq: &FlowSequence<T>,
    partitions: std::ops::Range<usize>,
    epsilon: f64,
) -> Result<T> {
    let (a, b) = (partitions.start, partitions.end);
    let mut sum = T::zero();
    for t_ref in a..=b {
        sum += loss_at_reference(window, seq, a..b, t_ref, epsilon)?;
    }
    Ok(sum / sc::<T>((b - a + 1) as f64))
}

struct StackOutcome<T> {
    report: LossReport,
    gradient: Option<FlowGradient<T>>,
}

/// Shared driver of the multi-timescale forward (and optional backward) pass.
fn run_stack<T: Scalar>(
    window: &EventWindow,
    seq: &FlowSequence<T>,
    cfg: &LossConfig,
    want_gradient: bool,
) -> Result<StackOutcome<T>> {
    cfg.validate()?;
    check_seq(window, seq)?;
    if cfg.r != seq.r() {
        return Err(Error::Config(format!(
            "loss config has R = {} but sequence has R = {}",
            cfg.r,
            seq.r()
        )));
    }
    let geom = seq.geometry();
    let epsilon = sc::<T>(cfg.epsilon);
    let events = prep_events::<T>(window, cfg)?;

    let mut gradient = want_gradient
        .then(|| FlowGradient::zeros(geom.width as usize, geom.height as usize, seq.r()));
    let mut terms = Vec::new();
    let mut total = 0.0f64;
    let mut masked_pairs = 0usize;
    let mut total_pairs = 0usize;

    for s in 0..cfg.scales {
        let pieces = 1usize << s;
        let l_w = cfg.r / pieces;
        let scale_weight = 1.0 / (cfg.scales as f64 * pieces as f64);
        for p in 0..pieces {
            let a = p * l_w;
            let b = a + l_w;
            let (lo, hi) = sub_partition_range(&events, a, b);
            let part_events = &events[lo..hi];
            let mut sum_refs = 0.0f64;
            for t_ref in a..=b {
                let eval =
                    term_forward(part_events, seq, l_w, t_ref, epsilon, cfg.warp, true);
                let value = eval.loss.to_f64_s();
                sum_refs += value;
                masked_pairs += eval.grids.masked;
                total_pairs += eval.grids.total;
                terms.push(LossTerm {
                    scale: s,
                    sub_partition: p,
                    t_ref,
                    value,
                    masked: eval.grids.masked,
                    total: eval.grids.total,
                });
                if let Some(grad) = gradient.as_mut() {
                    let weight = sc::<T>(scale_weight / (l_w + 1) as f64);
                    term_backward(
                        part_events,
                        seq,
                        l_w,
                        t_ref,
                        epsilon,
                        cfg.warp,
                        &eval,
                        weight,
                        grad,
                    );
                }
            }
            total += scale_weight * sum_refs / (l_w + 1) as f64;
        }
    }

    let masked_fraction =
        if total_pairs == 0 { 0.0 } else { masked_pairs as f64 / total_pairs as f64 };
    Ok(StackOutcome { report: LossReport { total, terms, masked_fraction }, gradient })
}

/// The full multi-timescale loss of one training window.
pub fn loss_multi_timescale<T: Scalar>(
    window: &EventWindow,
    seq: &FlowSequence<T>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    Ok(run_stack(window, seq, cfg, false)?.report)
}

/// The loss together with its exact reverse-mode gradient w.r.t. every flow
/// map cell.
pub fn loss_gradient<T: Scalar>(
    window: &EventWindow,
    seq: &FlowSequence<T>,
    cfg: &LossConfig,
) -> Result<(LossReport, FlowGradient<T>)> {
    let out = run_stack(window, seq, cfg, true)?;
    Ok((out.report, out.gradient.expect("gradient requested")))
}

/// Single-reference loss over the whole window *without* border masking;
/// the ratio metric needs identical treatment of estimate and baseline.
pub(crate) fn single_reference_loss_unmasked<T: Scalar>(
    window: &EventWindow,
    seq: &FlowSequence<T>,
    t_ref: usize,
    epsilon: f64,
) -> Result<T> {
    check_seq(window, seq)?;
    let cfg = LossConfig::new(seq.r(), 1);
    let events = prep_events::<T>(window, &cfg)?;
    let eval = term_forward(
        &events,
        seq,
        seq.r(),
        t_ref,
        sc::<T>(epsilon),
        WarpMode::Iterative,
        false,
    );
    Ok(eval.loss)
}
