//! Randomized finite-difference validation of the analytic loss gradient.
//!
//! Instances are small (tiny frames, few events) so central differences stay
//! well-conditioned. Coordinates where two FD step sizes disagree are counted
//! as kink neighborhoods (the splatting kernel is only piecewise smooth) and
//! excluded rather than judged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::event::{Event, EventWindow, PartitionScheme, Polarity};
use crate::flow::{FlowMap, FlowSequence};
use crate::objective::{loss_gradient, loss_multi_timescale, LossConfig};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub coords_per_instance: usize,
    /// Central-difference step.
    pub fd_step: f64,
    /// Per-coordinate relative-error tolerance.
    pub rel_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { instances: 100, seed: 0, coords_per_instance: 40, fd_step: 1e-4, rel_tol: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradCheckSummary {
    pub instances: usize,
    /// Coordinates judged (kink-excluded ones are not).
    pub checked: usize,
    pub excluded: usize,
    pub failed: usize,
    pub worst_rel_err: f64,
    /// True when ≥ 99% of judged coordinates meet the tolerance.
    pub pass: bool,
}

/// Mismatch threshold between the two FD step sizes above which a coordinate
/// counts as sitting in a kink neighborhood.
const FD_CONSISTENCY_TOL: f64 = 1e-2;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare `loss_gradient` against central finite differences on seeded
/// random instances; see [`GradCheckConfig`] for knobs.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checked = 0usize;
    let mut excluded = 0usize;
    let mut failed = 0usize;
    let mut worst = 0.0f64;

    for _ in 0..cfg.instances {
        let w = rng.gen_range(8..=16u32);
        let h = rng.gen_range(8..=16u32);
        let r = rng.gen_range(1..=4usize);
        let scales = if r % 2 == 0 && rng.gen_bool(0.5) { 2 } else { 1 };
        let scheme = PartitionScheme::new(1000, r, 0)?;

        let n_events = rng.gen_range(5..=50usize);
        let mut events: Vec<Event> = (0..n_events)
            .map(|_| Event {
                t_us: rng.gen_range(0..scheme.window_len_us()),
                x: rng.gen_range(0.0..(w - 1) as f32),
                y: rng.gen_range(0.0..(h - 1) as f32),
                polarity: if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
            })
            .collect();
        events.sort_by_key(|e| e.t_us);
        let window = EventWindow::new(events, scheme, 0)?;

        let maps: Vec<FlowMap<f64>> = (0..r)
            .map(|_| {
                FlowMap::new(
                    ndarray::Array2::from_shape_fn((h as usize, w as usize), |_| {
                        rng.gen_range(-0.7..0.7)
                    }),
                    ndarray::Array2::from_shape_fn((h as usize, w as usize), |_| {
                        rng.gen_range(-0.7..0.7)
                    }),
                )
                .unwrap()
            })
            .collect();
        let seq = FlowSequence::new(maps, scheme)?;
        let loss_cfg = LossConfig::new(r, scales);
        let (_, grad) = loss_gradient(&window, &seq, &loss_cfg)?;

        // half the coordinates from the gradient's support, half uniform
        let mut support = Vec::new();
        for k in 0..r {
            for (ch, g) in [(0usize, &grad.du[k]), (1, &grad.dv[k])] {
                for ((y, x), &v) in g.indexed_iter() {
                    if v != 0.0 {
                        support.push((k, ch, y, x));
                    }
                }
            }
        }
        let coords: Vec<(usize, usize, usize, usize)> = (0..cfg.coords_per_instance)
            .map(|i| {
                if i % 2 == 0 && !support.is_empty() {
                    support[rng.gen_range(0..support.len())]
                } else {
                    (
                        rng.gen_range(0..r),
                        rng.gen_range(0..2usize),
                        rng.gen_range(0..h as usize),
                        rng.gen_range(0..w as usize),
                    )
                }
            })
            .collect();

        let eval = |k: usize, ch: usize, y: usize, x: usize, delta: f64| -> Result<f64> {
            let mut maps = seq.maps().to_vec();
            match ch {
                0 => maps[k].u[(y, x)] += delta,
                _ => maps[k].v[(y, x)] += delta,
            }
            let perturbed = FlowSequence::new(maps, scheme)?;
            Ok(loss_multi_timescale(&window, &perturbed, &loss_cfg)?.total)
        };

        for (k, ch, y, x) in coords {
            let h1 = cfg.fd_step;
            let fd1 = (eval(k, ch, y, x, h1)? - eval(k, ch, y, x, -h1)?) / (2.0 * h1);
            let h2 = h1 / 2.0;
            let fd2 = (eval(k, ch, y, x, h2)? - eval(k, ch, y, x, -h2)?) / (2.0 * h2);
            if rel_err(fd1, fd2) > FD_CONSISTENCY_TOL {
                excluded += 1;
                continue;
            }
            let analytic = match ch {
                0 => grad.du[k][(y, x)],
                _ => grad.dv[k][(y, x)],
            };
            let err = rel_err(analytic, fd1);
            checked += 1;
            worst = worst.max(err);
            if err >= cfg.rel_tol {
                failed += 1;
            }
        }
    }

    let pass = checked > 0 && (failed as f64) <= 0.01 * checked as f64;
    Ok(GradCheckSummary {
        instances: cfg.instances,
        checked,
        excluded,
        failed,
        worst_rel_err: worst,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_is_deterministic() {
        let cfg = GradCheckConfig { instances: 12, coords_per_instance: 20, ..Default::default() };
        let a = run_gradcheck(&cfg).unwrap();
        assert!(a.pass, "gradient check failed: {a:?}");
        assert!(a.checked > 150, "too few judged coordinates: {a:?}");
        let b = run_gradcheck(&cfg).unwrap();
        assert_eq!(a.checked, b.checked);
        assert_eq!(a.excluded, b.excluded);
        assert_eq!(a.failed, b.failed);
        assert_eq!(a.worst_rel_err, b.worst_rel_err);
    }

    #[test]
    fn different_seeds_draw_different_instances() {
        let a = run_gradcheck(&GradCheckConfig {
            instances: 3,
            coords_per_instance: 10,
            ..Default::default()
        })
        .unwrap();
        let b = run_gradcheck(&GradCheckConfig {
            instances: 3,
            coords_per_instance: 10,
            seed: 99,
            ..Default::default()
        })
        .unwrap();
        assert!(a.pass && b.pass);
        assert_ne!(a.worst_rel_err, b.worst_rel_err);
    }
}
