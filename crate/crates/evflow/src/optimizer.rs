//! Direct flow estimation: first-order descent on the contrast objective.
//!
//! Flow is parametrized on coarse per-partition grids and refined through a
//! spatial pyramid (coarsest first). The loss and its gradient are always
//! evaluated on the full-resolution events with the parameters bilinearly
//! upsampled, so coarse cells act purely as a spatial-coherence constraint.
//! Windows are processed in order; each warm-starts from its predecessor's
//! final flow.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::event::{partition_stream, CameraGeometry, Event, EventWindow, PartitionScheme};
use crate::flow::{downsample_flow, upsample_flow, Bilin, FlowMap, FlowSequence};
use crate::objective::{loss_gradient, loss_multi_timescale, FlowGradient, LossConfig, LossReport};
use crate::scalar::{sc, Scalar};

/// Floor on the adaptive denominator. Deliberately large: cells whose
/// gradient is persistently tiny sit in a near-null subspace of the loss
/// (e.g. temporally alternating per-partition flow with the same cumulative
/// displacement), and a vanishing epsilon would let the normalized update
/// walk along it at full step size.
const ADAM_EPS: f64 = 1e-3;
/// Consecutive low-improvement iterations tolerated before the step is cut.
/// Covers Adam's bias-correction warmup, during which the loss can wobble.
const STOP_PATIENCE: usize = 25;
/// Step halvings (each followed by a fresh patience window) before a level
/// stops; restarts resume from the best parameters seen.
const MAX_STEP_REDUCTIONS: usize = 3;
/// Per-cell gradient clamp. Pixels whose deposit mass is near the loss
/// epsilon have true partial derivatives of order 1/epsilon that carry no
/// usable signal but poison Adam's second moment for ~1/(1-β₂) iterations.
const GRAD_CLAMP: f64 = 100.0;
/// Descent iterations spent evaluating each cold-start probe finalist.
/// Static loss alone cannot rank candidate starts: a compromise constant
/// between two scene motions can score best statically yet sit where the
/// gradient has collapsed, while a candidate matching one motion exactly
/// still has live descent directions for the rest of the scene.
const PROBE_TRIAL_ITERS: usize = 12;
/// Probe magnitude bands (px/partition). One finalist is drawn per band so
/// large-displacement candidates are never shadowed by statically better
/// smaller ones; the top magnitudes get singleton bands because exact
/// alignment concentrates events onto fewer pixels, which the mean-based
/// loss undervalues statically relative to a near miss.
const PROBE_BANDS: [&[f64]; 4] = [&[0.25, 0.5], &[1.0, 1.5], &[2.0], &[3.0]];

#[derive(Clone, Copy, Debug, Serialize)]
pub struct OptimizerConfig {
    /// Pyramid depth; level ℓ uses cells of tile_base·2^ℓ px.
    pub pyramid_levels: usize,
    pub iters_per_level: usize,
    /// Adam step size, px/partition.
    pub step_size: f64,
    /// Adam (β₁, β₂).
    pub moment_decays: (f64, f64),
    /// Finest-level cell size, px.
    pub tile_base: usize,
    /// Initialize each window from the previous window's final flow.
    pub warm_start: bool,
    /// Relative loss-decrease threshold for early stopping.
    pub stop_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            iters_per_level: 300,
            step_size: 0.12,
            moment_decays: (0.9, 0.999),
            tile_base: 4,
            warm_start: true,
            stop_tol: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be at least 1".into()));
        }
        if self.iters_per_level == 0 {
            return Err(Error::Config("iters_per_level must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        let (b1, b2) = self.moment_decays;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::Config("moment decays must lie in (0, 1)".into()));
        }
        if self.tile_base == 0 {
            return Err(Error::Config("tile_base must be at least 1".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config("stop_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-level summary of one window's optimization.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LevelStats {
    /// Cell size of this level, px.
    pub factor: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct EstimationResult<T> {
    pub seq: FlowSequence<T>,
    /// Per-iteration totals, all levels concatenated.
    pub loss_trace: Vec<f64>,
    pub final_report: LossReport,
    pub levels: Vec<LevelStats>,
}

/// One JSON-lines progress record.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Progress {
    pub window: usize,
    pub level: usize,
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub masked_fraction: f64,
}

/// Cell sizes for the pyramid, coarsest first. Only factors that divide both
/// frame dimensions (leaving a grid of at least 2×2 cells) survive; if none
/// do, the flow is estimated per-pixel.
fn pyramid_factors(geometry: CameraGeometry, tile_base: usize, levels: usize) -> Vec<usize> {
    let (w, h) = (geometry.width as usize, geometry.height as usize);
    let mut factors: Vec<usize> = (0..levels)
        .rev()
        .map(|l| tile_base << l)
        .filter(|&f| w % f == 0 && h % f == 0 && w / f >= 2 && h / f >= 2)
        .collect();
    if factors.is_empty() {
        factors.push(1);
    }
    factors
}

/// Transpose of `upsample_flow` with `scale_factor = factor`: pull a
/// full-resolution gradient back onto the coarse grid.
fn downscatter<T: Scalar>(full: &Array2<T>, cw: usize, ch: usize, factor: usize) -> Array2<T> {
    let f = sc::<T>(factor as f64);
    let (fh, fw) = full.dim();
    let mut out = Array2::zeros((ch, cw));
    for y in 0..fh {
        for x in 0..fw {
            let g = full[(y, x)];
            if g == T::zero() {
                continue;
            }
            let bl = Bilin::new(cw, ch, sc::<T>(x as f64) / f, sc::<T>(y as f64) / f);
            for (r, c, w) in bl.weights() {
                out[(r, c)] += w * g * f;
            }
        }
    }
    out
}

fn zero_maps<T: Scalar>(cw: usize, ch: usize, r: usize) -> Vec<FlowMap<T>> {
    (0..r)
        .map(|_| FlowMap { u: Array2::zeros((ch, cw)), v: Array2::zeros((ch, cw)) })
        .collect()
}

fn all_finite<T: Scalar>(maps: &[FlowMap<T>]) -> bool {
    maps.iter().all(|m| m.u.iter().all(|c| c.is_finite()) && m.v.iter().all(|c| c.is_finite()))
}

/// Optimize one window's FlowSequence.
///
/// `init`, when given, seeds the coarsest level (downsampled) and is returned
/// unchanged for a window with no events.
pub fn estimate_window<T: Scalar>(
    window: &EventWindow,
    geometry: CameraGeometry,
    config: &OptimizerConfig,
    loss_cfg: &LossConfig,
    init: Option<&FlowSequence<T>>,
) -> Result<EstimationResult<T>> {
    estimate_window_with_progress(window, geometry, config, loss_cfg, init, 0, &mut |_| {})
}

pub fn estimate_window_with_progress<T: Scalar>(
    window: &EventWindow,
    geometry: CameraGeometry,
    config: &OptimizerConfig,
    loss_cfg: &LossConfig,
    init: Option<&FlowSequence<T>>,
    window_label: usize,
    on_progress: &mut dyn FnMut(&Progress),
) -> Result<EstimationResult<T>> {
    config.validate()?;
    loss_cfg.validate()?;
    let scheme = window.scheme();
    if loss_cfg.r != scheme.r {
        return Err(Error::Config(format!(
            "loss is configured for R = {} but the window has R = {}",
            loss_cfg.r, scheme.r
        )));
    }
    if let Some(seq) = init {
        if seq.geometry() != geometry || seq.r() != scheme.r {
            return Err(Error::GeometryMismatch(
                "init sequence does not match the window's geometry/partitioning".into(),
            ));
        }
    }
    if window.is_empty() {
        let seq = match init {
            Some(seq) => seq.clone(),
            None => return Err(Error::NothingToOptimize { window: window.window_index() }),
        };
        let final_report = loss_multi_timescale(window, &seq, loss_cfg)?;
        return Ok(EstimationResult { seq, loss_trace: Vec::new(), final_report, levels: Vec::new() });
    }

    let factors = pyramid_factors(geometry, config.tile_base, config.pyramid_levels);
    let (w, h) = (geometry.width as usize, geometry.height as usize);
    let r = scheme.r;
    let f0 = factors[0];
    let mut params: Vec<FlowMap<T>> = match init {
        Some(seq) => seq
            .maps()
            .iter()
            .map(|m| downsample_flow(m, f0))
            .collect::<Result<Vec<_>>>()?,
        None => zero_maps(w / f0, h / f0, r),
    };

    let (b1, b2) = (sc::<T>(config.moment_decays.0), sc::<T>(config.moment_decays.1));
    let one = T::one();
    let step = sc::<T>(config.step_size);
    let adam_eps = sc::<T>(ADAM_EPS);

    let mut loss_trace = Vec::new();
    let mut levels = Vec::new();

    for (level_idx, &factor) in factors.iter().enumerate() {
        let (cw, ch) = (w / factor, h / factor);
        if level_idx > 0 {
            // refine: carry the previous level's solution up one resolution
            let ratio = factors[level_idx - 1] / factor;
            let lvl_geom = CameraGeometry::new((w / factor) as u32, (h / factor) as u32)?;
            params = params
                .iter()
                .map(|m| upsample_flow(m, lvl_geom, sc::<T>(ratio as f64)))
                .collect::<Result<Vec<_>>>()?;
        }

        let mut m_state = FlowGradient::<T>::zeros(cw, ch, r);
        let mut v_state = FlowGradient::<T>::zeros(cw, ch, r);
        let mut best_params = params.clone();
        let mut best_loss = f64::INFINITY;
        let mut initial_loss = f64::NAN;
        let mut stall = 0usize;
        let mut iterations = 0usize;
        // step_size is in full-resolution px/partition; upsampling multiplies
        // coarse values by `factor`, so the cell-space step divides by it
        let mut step_cur = step / sc::<T>(factor as f64);
        let mut reductions = 0usize;
        let mut adam_t = 0usize;

        // Cold starts open with a probe over constant-flow candidates. Zero
        // flow with integer-pixel events sits on a kink of the splatting
        // kernel where both one-sided slopes can be uphill, trapping any
        // small-step method; a coarse translation guess steps over it. A
        // candidate may not win by masking events away. The static sweep
        // keeps the best candidate per magnitude band; each surviving
        // finalist (and zero) is then judged by a short descent trial, since
        // static loss cannot distinguish a live start from a stalled one.
        if level_idx == 0 && init.is_none() {
            let zero_report = loss_multi_timescale(
                window,
                &FlowSequence::<T>::zeros(geometry, scheme),
                loss_cfg,
            )?;
            initial_loss = zero_report.total;
            loss_trace.push(zero_report.total);
            let mut finalists: Vec<(f64, f64)> = Vec::new();
            for band in PROBE_BANDS {
                let mut band_best = f64::INFINITY;
                let mut band_pick = None;
                for &mag in band {
                    for dir in 0..8 {
                        let ang = std::f64::consts::TAU * dir as f64 / 8.0;
                        let (cu, cv) = (mag * ang.cos(), mag * ang.sin());
                        let cand =
                            FlowSequence::constant(geometry, scheme, sc::<T>(cu), sc::<T>(cv));
                        let rep = loss_multi_timescale(window, &cand, loss_cfg)?;
                        if rep.total < band_best
                            && rep.masked_fraction <= zero_report.masked_fraction + 0.2
                        {
                            band_best = rep.total;
                            band_pick = Some((cu, cv));
                        }
                    }
                }
                if let Some(pick) = band_pick {
                    finalists.push(pick);
                }
            }
            if !finalists.is_empty() {
                finalists.push((0.0, 0.0));
                let mut winner: Option<(Vec<FlowMap<T>>, f64, Vec<f64>)> = None;
                for (cu, cv) in finalists {
                    let cell = (sc::<T>(cu / factor as f64), sc::<T>(cv / factor as f64));
                    let mut start = zero_maps(cw, ch, r);
                    for map in &mut start {
                        map.u.fill(cell.0);
                        map.v.fill(cell.1);
                    }
                    // Trials run at twice the descent step so a live start can
                    // traverse a dot-diameter of misalignment within the trial
                    // horizon; the main loop re-polishes at full precision.
                    let trial = probe_trial(
                        window, loss_cfg, geometry, scheme, factor, start,
                        step_cur * sc::<T>(2.0), (b1, b2), adam_eps,
                    )?;
                    if winner.as_ref().is_none_or(|w| trial.1 < w.1) {
                        winner = Some(trial);
                    }
                }
                let (best, _, trace) = winner.expect("at least one finalist");
                params = best;
                loss_trace.extend(trace);
            }
        }

        for iter in 0..config.iters_per_level {
            let full = FlowSequence::new(
                params.iter().map(|m| upsample_flow(m, geometry, sc::<T>(factor as f64))).collect::<Result<Vec<_>>>()?,
                scheme,
            )?;
            let (report, grad_full) = loss_gradient(window, &full, loss_cfg)?;
            let loss = report.total;
            if !loss.is_finite() {
                break;
            }
            if iter == 0 && initial_loss.is_nan() {
                initial_loss = loss;
            }
            loss_trace.push(loss);
            iterations = iter + 1;

            let coarse = FlowGradient {
                du: grad_full.du.iter().map(|g| downscatter(g, cw, ch, factor)).collect(),
                dv: grad_full.dv.iter().map(|g| downscatter(g, cw, ch, factor)).collect(),
            };
            on_progress(&Progress {
                window: window_label,
                level: level_idx,
                iter,
                loss,
                grad_norm: coarse.norm(),
                masked_fraction: report.masked_fraction,
            });

            let rel = (best_loss - loss) / best_loss.abs().max(f64::MIN_POSITIVE);
            if loss < best_loss {
                best_loss = loss;
                best_params = params.clone();
            }
            if rel <= config.stop_tol {
                stall += 1;
                if stall >= STOP_PATIENCE {
                    if reductions >= MAX_STEP_REDUCTIONS {
                        break;
                    }
                    step_cur = step_cur * sc::<T>(0.5);
                    reductions += 1;
                    stall = 0;
                    params = best_params.clone();
                    m_state = FlowGradient::zeros(cw, ch, r);
                    v_state = FlowGradient::zeros(cw, ch, r);
                    adam_t = 0;
                    continue;
                }
            } else {
                stall = 0;
            }

            // bias-corrected adaptive update
            adam_t += 1;
            let c1 = one - b1.powi(adam_t as i32);
            let c2 = one - b2.powi(adam_t as i32);
            let adam = |param: &mut Array2<T>,
                        m_buf: &mut Array2<T>,
                        v_buf: &mut Array2<T>,
                        g: &Array2<T>| {
                adam_update(param, m_buf, v_buf, g, (b1, b2), (c1, c2), step_cur, adam_eps);
            };
            for k in 0..r {
                adam(&mut params[k].u, &mut m_state.du[k], &mut v_state.du[k], &coarse.du[k]);
                adam(&mut params[k].v, &mut m_state.dv[k], &mut v_state.dv[k], &coarse.dv[k]);
            }
            if !all_finite(&params) {
                break;
            }
        }

        params = best_params;
        levels.push(LevelStats { factor, initial_loss, final_loss: best_loss, iterations });
    }

    let factor = *factors.last().expect("at least one level");
    let seq = FlowSequence::new(
        params
            .iter()
            .map(|m| upsample_flow(m, geometry, sc::<T>(factor as f64)))
            .collect::<Result<Vec<_>>>()?,
        scheme,
    )?;
    let final_report = loss_multi_timescale(window, &seq, loss_cfg)?;
    Ok(EstimationResult { seq, loss_trace, final_report, levels })
}

/// Clamped, bias-corrected adaptive step on one parameter plane.
fn adam_update<T: Scalar>(
    param: &mut Array2<T>,
    m_buf: &mut Array2<T>,
    v_buf: &mut Array2<T>,
    g: &Array2<T>,
    (b1, b2): (T, T),
    (c1, c2): (T, T),
    step: T,
    adam_eps: T,
) {
    let one = T::one();
    let clamp = sc::<T>(GRAD_CLAMP);
    ndarray::Zip::from(param).and(m_buf).and(v_buf).and(g).for_each(|p, m, v, &g| {
        let g = g.max(-clamp).min(clamp);
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        *p -= step * (*m / c1) / ((*v / c2).sqrt() + adam_eps);
    });
}

/// Fixed-step descent from one probe finalist. Returns the best parameters
/// seen, their loss, and the evaluated losses in order; the first entry is
/// the finalist's static loss, so the best can never exceed it.
#[allow(clippy::too_many_arguments)]
fn probe_trial<T: Scalar>(
    window: &EventWindow,
    loss_cfg: &LossConfig,
    geometry: CameraGeometry,
    scheme: PartitionScheme,
    factor: usize,
    start: Vec<FlowMap<T>>,
    step: T,
    decays: (T, T),
    adam_eps: T,
) -> Result<(Vec<FlowMap<T>>, f64, Vec<f64>)> {
    let (ch, cw) = start[0].u.dim();
    let r = start.len();
    let (b1, b2) = decays;
    let one = T::one();
    let mut params = start;
    let mut m_state = FlowGradient::<T>::zeros(cw, ch, r);
    let mut v_state = FlowGradient::<T>::zeros(cw, ch, r);
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::new();
    for t in 1..=PROBE_TRIAL_ITERS {
        let full = FlowSequence::new(
            params
                .iter()
                .map(|m| upsample_flow(m, geometry, sc::<T>(factor as f64)))
                .collect::<Result<Vec<_>>>()?,
            scheme,
        )?;
        let (report, grad_full) = loss_gradient(window, &full, loss_cfg)?;
        if !report.total.is_finite() {
            break;
        }
        trace.push(report.total);
        if report.total < best_loss {
            best_loss = report.total;
            best_params = params.clone();
        }
        let coarse = FlowGradient {
            du: grad_full.du.iter().map(|g| downscatter(g, cw, ch, factor)).collect(),
            dv: grad_full.dv.iter().map(|g| downscatter(g, cw, ch, factor)).collect(),
        };
        let c1 = one - b1.powi(t as i32);
        let c2 = one - b2.powi(t as i32);
        for k in 0..r {
            adam_update(&mut params[k].u, &mut m_state.du[k], &mut v_state.du[k], &coarse.du[k], (b1, b2), (c1, c2), step, adam_eps);
            adam_update(&mut params[k].v, &mut m_state.dv[k], &mut v_state.dv[k], &coarse.dv[k], (b1, b2), (c1, c2), step, adam_eps);
        }
        if !all_finite(&params) {
            break;
        }
    }
    Ok((best_params, best_loss, trace))
}

/// One window's outcome within a sequential run.
#[derive(Clone, Debug)]
pub struct WindowRun<T> {
    pub window_index: usize,
    pub result: EstimationResult<T>,
    /// True when the window could not be optimized and fell back to zero flow.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct SequentialRun<T> {
    pub windows: Vec<WindowRun<T>>,
    pub dropped_events: usize,
    pub mean_final_loss: f64,
}

/// Estimate flow for every window of a stream, in order, warm-starting each
/// window from the previous one's last flow map (replicated R times).
pub fn run_sequential<T: Scalar>(
    events: &[Event],
    scheme: PartitionScheme,
    geometry: CameraGeometry,
    config: &OptimizerConfig,
    loss_cfg: &LossConfig,
) -> Result<SequentialRun<T>> {
    run_sequential_with_progress(events, scheme, geometry, config, loss_cfg, &mut |_| {})
}

pub fn run_sequential_with_progress<T: Scalar>(
    events: &[Event],
    scheme: PartitionScheme,
    geometry: CameraGeometry,
    config: &OptimizerConfig,
    loss_cfg: &LossConfig,
    on_progress: &mut dyn FnMut(&Progress),
) -> Result<SequentialRun<T>> {
    let partitioned = partition_stream(events, scheme)?;
    let mut runs: Vec<WindowRun<T>> = Vec::with_capacity(partitioned.windows.len());
    let mut carry: Option<FlowSequence<T>> = None;

    for (w, window) in partitioned.windows.iter().enumerate() {
        let init = if config.warm_start { carry.as_ref() } else { None };
        let (result, fallback) =
            match estimate_window_with_progress(window, geometry, config, loss_cfg, init, w, on_progress) {
                Ok(res) => (res, false),
                Err(Error::NothingToOptimize { .. }) => {
                    let seq = FlowSequence::zeros(geometry, scheme);
                    let final_report = loss_multi_timescale(window, &seq, loss_cfg)?;
                    (
                        EstimationResult {
                            seq,
                            loss_trace: Vec::new(),
                            final_report,
                            levels: Vec::new(),
                        },
                        true,
                    )
                }
                Err(e) => return Err(e),
            };
        let last = result.seq.map(scheme.r - 1).clone();
        carry = Some(FlowSequence::new(vec![last; scheme.r], scheme)?);
        runs.push(WindowRun { window_index: w, result, fallback });
    }

    let mean_final_loss = if runs.is_empty() {
        0.0
    } else {
        runs.iter().map(|r| r.result.final_report.total).sum::<f64>() / runs.len() as f64
    };
    Ok(SequentialRun { windows: runs, dropped_events: partitioned.dropped_events, mean_final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::count_image;
    use crate::synth::{generate, SceneKind, SceneSpec};

    fn translating_scene(velocity: (f64, f64), duration_us: u64, seed: u64) -> SceneSpec {
        SceneSpec {
            kind: SceneKind::TranslatingDots,
            geometry: CameraGeometry::new(32, 32).unwrap(),
            duration_us,
            velocity,
            angular_rate: 0.0,
            radius: 0.0,
            dot_count: 6,
            dot_radius: 1.5,
            seed,
            events_per_px_crossing: 8,
        }
    }

    fn quick_config() -> OptimizerConfig {
        OptimizerConfig { iters_per_level: 150, ..OptimizerConfig::default() }
    }

    fn seqs_equal(a: &FlowSequence<f64>, b: &FlowSequence<f64>) -> bool {
        a.maps().len() == b.maps().len()
            && a.maps()
                .iter()
                .zip(b.maps())
                .all(|(x, y)| x.u == y.u && x.v == y.v)
    }

    #[test]
    fn pyramid_factors_filter_and_fall_back() {
        let g32 = CameraGeometry::new(32, 32).unwrap();
        assert_eq!(pyramid_factors(g32, 4, 3), vec![16, 8, 4]);
        let g40x24 = CameraGeometry::new(40, 24).unwrap();
        assert_eq!(pyramid_factors(g40x24, 4, 3), vec![8, 4]);
        let g30 = CameraGeometry::new(30, 30).unwrap();
        assert_eq!(pyramid_factors(g30, 4, 3), vec![1]);
    }

    #[test]
    fn empty_window_with_init_is_returned_unchanged() {
        let geom = CameraGeometry::new(16, 16).unwrap();
        let scheme = PartitionScheme::new(1000, 4, 0).unwrap();
        let window = EventWindow::new(Vec::new(), scheme, 0).unwrap();
        let init = FlowSequence::constant(geom, scheme, 0.5f64, -0.25);
        let cfg = OptimizerConfig::default();
        let loss_cfg = LossConfig::new(4, 1);
        let res = estimate_window(&window, geom, &cfg, &loss_cfg, Some(&init)).unwrap();
        assert!(seqs_equal(&res.seq, &init));
        assert!(res.loss_trace.is_empty());
        assert_eq!(res.final_report.total, 0.0);
        // without init there is nothing to optimize
        let err = estimate_window::<f64>(&window, geom, &cfg, &loss_cfg, None).unwrap_err();
        assert!(matches!(err, Error::NothingToOptimize { window: 0 }));
    }

    #[test]
    fn recovers_constant_translation_and_descends_at_every_level() {
        // (3, 0) px/s over a 1 s window cut into R = 4 partitions: the true
        // flow is (0.75, 0) px/partition.
        let spec = translating_scene((3.0, 0.0), 1_000_000, 7);
        let (events, _) = generate(&spec).unwrap();
        let scheme = PartitionScheme::new(250_000, 4, 0).unwrap();
        let windows = partition_stream(&events, scheme).unwrap().windows;
        let window = &windows[0];
        let loss_cfg = LossConfig::new(4, 1);
        let res =
            estimate_window::<f64>(window, spec.geometry, &quick_config(), &loss_cfg, None)
                .unwrap();

        for lvl in &res.levels {
            assert!(
                lvl.final_loss < lvl.initial_loss,
                "no descent at factor {}: {} -> {}",
                lvl.factor,
                lvl.initial_loss,
                lvl.final_loss
            );
        }

        // mean flow near events must match ground truth
        let counts = count_image(window.events(), spec.geometry).unwrap();
        let occupied = &counts.neg + &counts.pos;
        let (h, w) = occupied.dim();
        let mut textured = 0;
        let mut good = 0;
        for y in 0..h {
            for x in 0..w {
                let near = (y.saturating_sub(2)..(y + 3).min(h))
                    .any(|yy| (x.saturating_sub(2)..(x + 3).min(w)).any(|xx| occupied[(yy, xx)] > 0));
                if !near {
                    continue;
                }
                textured += 1;
                let mut mu = 0.0;
                let mut mv = 0.0;
                for k in 0..4 {
                    mu += res.seq.map(k).u[(y, x)];
                    mv += res.seq.map(k).v[(y, x)];
                }
                mu /= 4.0;
                mv /= 4.0;
                let epe = ((mu - 0.75).powi(2) + mv.powi(2)).sqrt();
                if epe < 0.3 {
                    good += 1;
                }
            }
        }
        assert!(textured > 100);
        assert!(
            good as f64 >= 0.9 * textured as f64,
            "only {good}/{textured} textured pixels within 0.3 px/partition"
        );
    }

    #[test]
    fn coarsest_level_loss_matches_external_evaluation_exactly() {
        let spec = translating_scene((2.0, 1.0), 500_000, 3);
        let (events, _) = generate(&spec).unwrap();
        let scheme = PartitionScheme::new(125_000, 4, 0).unwrap();
        let windows = partition_stream(&events, scheme).unwrap().windows;
        let loss_cfg = LossConfig::new(4, 1);
        let cfg = OptimizerConfig { pyramid_levels: 1, iters_per_level: 40, ..Default::default() };
        let res =
            estimate_window::<f64>(&windows[0], spec.geometry, &cfg, &loss_cfg, None).unwrap();
        let recomputed = loss_multi_timescale(&windows[0], &res.seq, &loss_cfg).unwrap();
        assert_eq!(res.final_report.total, recomputed.total);
        assert_eq!(res.levels[0].final_loss, recomputed.total);
    }

    #[test]
    fn estimation_is_deterministic() {
        let spec = translating_scene((2.5, -1.0), 500_000, 11);
        let (events, _) = generate(&spec).unwrap();
        let scheme = PartitionScheme::new(125_000, 4, 0).unwrap();
        let loss_cfg = LossConfig::new(4, 1);
        let cfg = OptimizerConfig { iters_per_level: 60, ..Default::default() };
        let a = run_sequential::<f64>(&events, scheme, spec.geometry, &cfg, &loss_cfg).unwrap();
        let b = run_sequential::<f64>(&events, scheme, spec.geometry, &cfg, &loss_cfg).unwrap();
        assert_eq!(a.windows.len(), b.windows.len());
        for (x, y) in a.windows.iter().zip(&b.windows) {
            assert!(seqs_equal(&x.result.seq, &y.result.seq));
            assert_eq!(x.result.loss_trace, y.result.loss_trace);
        }
    }

    #[test]
    fn warm_start_shortens_later_windows() {
        let spec = translating_scene((2.0, 0.0), 3_000_000, 5);
        let (events, _) = generate(&spec).unwrap();
        let scheme = PartitionScheme::new(250_000, 4, 0).unwrap();
        let loss_cfg = LossConfig::new(4, 1);
        let cfg = OptimizerConfig { iters_per_level: 150, ..Default::default() };
        let run = run_sequential::<f64>(&events, scheme, spec.geometry, &cfg, &loss_cfg).unwrap();
        assert_eq!(run.windows.len(), 3);
        let lens: Vec<usize> = run.windows.iter().map(|w| w.result.loss_trace.len()).collect();
        assert!(
            lens[1] < lens[0] && lens[2] < lens[0],
            "warm-started windows did not converge faster: {lens:?}"
        );
    }

    #[test]
    fn warm_start_survives_a_velocity_step_change() {
        // two half-streams with orthogonal velocities glued at t = 1 s
        let spec_a = translating_scene((2.0, 0.0), 1_000_000, 9);
        let mut spec_b = translating_scene((0.0, 2.0), 1_000_000, 9);
        spec_b.velocity = (0.0, 2.0);
        let (events_a, _) = generate(&spec_a).unwrap();
        let (events_b, _) = generate(&spec_b).unwrap();
        let mut events = events_a;
        events.extend(events_b.into_iter().map(|mut e| {
            e.t_us += 1_000_000;
            e
        }));
        events.sort_by_key(|e| e.t_us);

        let scheme = PartitionScheme::new(250_000, 4, 0).unwrap();
        let loss_cfg = LossConfig::new(4, 1);
        let cfg = OptimizerConfig { iters_per_level: 150, ..Default::default() };
        let run = run_sequential::<f64>(&events, scheme, spec_a.geometry, &cfg, &loss_cfg).unwrap();
        assert_eq!(run.windows.len(), 2);
        let warm_final = run.windows[1].result.final_report.total;

        let windows = partition_stream(&events, scheme).unwrap().windows;
        let cold =
            estimate_window::<f64>(&windows[1], spec_a.geometry, &cfg, &loss_cfg, None).unwrap();
        let cold_final = cold.final_report.total;
        assert!(
            warm_final <= cold_final * 1.10,
            "warm start trapped after the step change: warm {warm_final} vs cold {cold_final}"
        );
    }

    #[test]
    fn empty_leading_window_falls_back_to_zero_and_is_flagged() {
        let spec = translating_scene((2.0, 0.0), 1_000_000, 13);
        let (events_late, _) = generate(&spec).unwrap();
        let events: Vec<Event> = events_late
            .into_iter()
            .map(|mut e| {
                e.t_us += 1_000_000;
                e
            })
            .collect();
        let scheme = PartitionScheme::new(250_000, 4, 0).unwrap();
        let loss_cfg = LossConfig::new(4, 1);
        let cfg = OptimizerConfig { iters_per_level: 40, ..Default::default() };
        let run = run_sequential::<f64>(&events, scheme, spec.geometry, &cfg, &loss_cfg).unwrap();
        assert_eq!(run.windows.len(), 2);
        assert!(run.windows[0].fallback);
        assert!(run.windows[0].result.seq.maps().iter().all(|m| m.u.iter().all(|&c| c == 0.0)));
        assert!(!run.windows[1].fallback);
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut cfg = OptimizerConfig::default();
        cfg.step_size = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = OptimizerConfig::default();
        cfg.moment_decays = (1.0, 0.999);
        assert!(cfg.validate().is_err());
        let mut cfg = OptimizerConfig::default();
        cfg.pyramid_levels = 0;
        assert!(cfg.validate().is_err());
    }
}
