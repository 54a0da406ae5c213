//! Synthetic event streams with analytic ground-truth flow.
//!
//! The generator is idealized and noiseless: moving contour points emit one
//! event per fixed path increment, at the integer pixel under the point, with
//! polarity from the edge orientation (leading edge positive). Every stream is
//! a pure function of its spec, so tests can freeze expectations.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{CameraGeometry, Event, PartitionScheme, Polarity};
use crate::flow::{DisplacementMap, FlowMap, FlowSequence};
use crate::scalar::sc;

/// Scene families of the synthetic suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Rigidly translating dots; uniform constant flow field.
    TranslatingDots,
    /// One dot following a circular orbit; uniform but time-varying field.
    CircularDot,
    /// Dots on a rigidly rotating field; steady spatially varying flow.
    RotatingField,
}

/// Full description of a synthetic scene.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub geometry: CameraGeometry,
    pub duration_us: u64,
    /// Translation velocity, px/s (translating_dots).
    pub velocity: (f64, f64),
    /// Angular rate, rad/s (circular_dot orbit, rotating_field spin).
    pub angular_rate: f64,
    /// Orbit radius, px (circular_dot).
    pub radius: f64,
    pub dot_count: usize,
    pub dot_radius: f64,
    pub seed: u64,
    /// Events emitted per pixel of contour travel.
    pub events_per_px_crossing: u32,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_us == 0 {
            return Err(Error::Scene("duration must be positive".into()));
        }
        if !(self.velocity.0.is_finite()
            && self.velocity.1.is_finite()
            && self.angular_rate.is_finite()
            && self.radius.is_finite()
            && self.dot_radius.is_finite())
        {
            return Err(Error::Scene("motion parameters must be finite".into()));
        }
        if self.events_per_px_crossing == 0 {
            return Err(Error::Scene("events_per_px_crossing must be at least 1".into()));
        }
        if self.dot_count == 0 {
            return Err(Error::Scene("need at least one dot".into()));
        }
        if self.dot_radius <= 0.0 || self.radius < 0.0 {
            return Err(Error::Scene("radii must be positive".into()));
        }
        Ok(())
    }

    fn center(&self) -> (f64, f64) {
        (((self.geometry.width - 1) as f64) / 2.0, ((self.geometry.height - 1) as f64) / 2.0)
    }
}

/// Analytic ground truth: the flow field behind a generated stream.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth {
    spec: SceneSpec,
    /// Orbit phase at t = 0 (circular_dot).
    theta0: f64,
}

impl GroundTruth {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Scene velocity at (x, y) and absolute time, px/s.
    pub fn flow_at(&self, x: f64, y: f64, t_us: u64) -> (f64, f64) {
        let t = t_us as f64 / 1e6;
        match self.spec.kind {
            SceneKind::TranslatingDots => self.spec.velocity,
            SceneKind::CircularDot => {
                let w = self.spec.angular_rate;
                let ang = self.theta0 + w * t;
                // d/dt of C + radius·(cos, sin)
                (-self.spec.radius * w * ang.sin(), self.spec.radius * w * ang.cos())
            }
            SceneKind::RotatingField => {
                let (cx, cy) = self.spec.center();
                let w = self.spec.angular_rate;
                (-w * (y - cy), w * (x - cx))
            }
        }
    }

    /// Exact displacement of the scene point at (x, y) over [t0_us, t1_us], px.
    pub fn displacement_at(&self, x: f64, y: f64, t0_us: u64, t1_us: u64) -> (f64, f64) {
        let t0 = t0_us as f64 / 1e6;
        let t1 = t1_us as f64 / 1e6;
        match self.spec.kind {
            SceneKind::TranslatingDots => {
                (self.spec.velocity.0 * (t1 - t0), self.spec.velocity.1 * (t1 - t0))
            }
            SceneKind::CircularDot => {
                let w = self.spec.angular_rate;
                let r = self.spec.radius;
                let a0 = self.theta0 + w * t0;
                let a1 = self.theta0 + w * t1;
                (r * (a1.cos() - a0.cos()), r * (a1.sin() - a0.sin()))
            }
            SceneKind::RotatingField => {
                let (cx, cy) = self.spec.center();
                let ang = self.spec.angular_rate * (t1 - t0);
                let (dx, dy) = (x - cx, y - cy);
                let rx = dx * ang.cos() - dy * ang.sin();
                let ry = dx * ang.sin() + dy * ang.cos();
                (rx - dx, ry - dy)
            }
        }
    }
}

/// A contour point with its rigid-motion model.
struct ContourPoint {
    /// Position at t = 0.
    p0: (f64, f64),
    /// Outward edge normal at t = 0.
    n0: (f64, f64),
    /// For rotating points: pivot; None for pure translation/orbit.
    pivot: Option<(f64, f64)>,
}

/// Generate the event stream and its ground truth.
pub fn generate(spec: &SceneSpec) -> Result<(Vec<Event>, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.geometry.width as f64, spec.geometry.height as f64);
    let (cx, cy) = spec.center();

    let theta0 = match spec.kind {
        SceneKind::CircularDot => rng.gen_range(0.0..TAU),
        _ => 0.0,
    };
    let gt = GroundTruth { spec: *spec, theta0 };

    // place dot centers at t = 0
    let centers: Vec<(f64, f64)> = match spec.kind {
        SceneKind::TranslatingDots => {
            let margin = spec.dot_radius + 1.0;
            (0..spec.dot_count)
                .map(|_| {
                    (
                        rng.gen_range(margin..(w - 1.0 - margin).max(margin + 1e-9)),
                        rng.gen_range(margin..(h - 1.0 - margin).max(margin + 1e-9)),
                    )
                })
                .collect()
        }
        SceneKind::CircularDot => {
            vec![(cx + spec.radius * theta0.cos(), cy + spec.radius * theta0.sin())]
        }
        SceneKind::RotatingField => {
            let r_max = 0.45 * w.min(h);
            let r_min = 0.15 * w.min(h);
            (0..spec.dot_count)
                .map(|_| {
                    let ang = rng.gen_range(0.0..TAU);
                    let rad = rng.gen_range(r_min..r_max);
                    (cx + rad * ang.cos(), cy + rad * ang.sin())
                })
                .collect()
        }
    };

    // sample each dot's rim densely enough for a closed edge; the rim is
    // roughened per point so pixel-rounding staircases decorrelate across
    // the contour instead of biasing the contrast optimum off the true flow
    let mut points = Vec::new();
    for &(dx, dy) in &centers {
        let m = ((TAU * spec.dot_radius / 0.4).ceil() as usize).max(8);
        for j in 0..m {
            let phi = TAU * j as f64 / m as f64;
            let n0 = (phi.cos(), phi.sin());
            let rr = spec.dot_radius + rng.gen_range(-0.5..0.5);
            let p0 = (dx + rr * n0.0, dy + rr * n0.1);
            let pivot = match spec.kind {
                SceneKind::RotatingField => Some((cx, cy)),
                _ => None,
            };
            points.push(ContourPoint { p0, n0, pivot });
        }
    }

    let duration_s = spec.duration_us as f64 / 1e6;
    let ds = 1.0 / spec.events_per_px_crossing as f64;
    let mut events = Vec::new();
    let mut any_moving = false;

    for pt in &points {
        // constant point speed for all three motion models
        let speed = match spec.kind {
            SceneKind::TranslatingDots => {
                (spec.velocity.0.powi(2) + spec.velocity.1.powi(2)).sqrt()
            }
            SceneKind::CircularDot => (spec.angular_rate * spec.radius).abs(),
            SceneKind::RotatingField => {
                let (px, py) = pt.p0;
                let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                (spec.angular_rate * d).abs()
            }
        };
        if speed <= 0.0 {
            continue;
        }
        any_moving = true;
        // per-point phase: pixels fire at their own threshold crossings, so
        // the stream must not collapse onto a shared time comb
        let phase: f64 = rng.gen_range(0.0..1.0);
        let mut k = 1u64;
        loop {
            let t = (k as f64 - 1.0 + phase) * ds / speed;
            if t >= duration_s {
                break;
            }
            let t_us = (t * 1e6).floor() as u64;
            if t_us >= spec.duration_us {
                break;
            }
            let (px, py) = point_position(spec, pt, theta0, t);
            let (xi, yi) = (px.round(), py.round());
            if xi >= 0.0 && yi >= 0.0 && xi < w && yi < h {
                let (vx, vy) = point_velocity(spec, pt, theta0, t);
                let n = point_normal(spec, pt, t);
                let dot = n.0 * vx + n.1 * vy;
                if dot != 0.0 {
                    let polarity =
                        if dot > 0.0 { Polarity::Positive } else { Polarity::Negative };
                    events.push(Event { t_us, x: xi as f32, y: yi as f32, polarity });
                }
            }
            k += 1;
        }
    }

    if any_moving && events.is_empty() {
        return Err(Error::Scene("pattern never intersects the frame".into()));
    }
    events.sort_by_key(|e| e.t_us);
    Ok((events, gt))
}

fn point_position(spec: &SceneSpec, pt: &ContourPoint, theta0: f64, t: f64) -> (f64, f64) {
    match spec.kind {
        SceneKind::TranslatingDots => {
            (pt.p0.0 + spec.velocity.0 * t, pt.p0.1 + spec.velocity.1 * t)
        }
        SceneKind::CircularDot => {
            let ang = theta0 + spec.angular_rate * t;
            let dx = spec.radius * (ang.cos() - theta0.cos());
            let dy = spec.radius * (ang.sin() - theta0.sin());
            (pt.p0.0 + dx, pt.p0.1 + dy)
        }
        SceneKind::RotatingField => {
            let (cx, cy) = pt.pivot.expect("rotating point has a pivot");
            let ang = spec.angular_rate * t;
            let (dx, dy) = (pt.p0.0 - cx, pt.p0.1 - cy);
            (cx + dx * ang.cos() - dy * ang.sin(), cy + dx * ang.sin() + dy * ang.cos())
        }
    }
}

fn point_velocity(spec: &SceneSpec, pt: &ContourPoint, theta0: f64, t: f64) -> (f64, f64) {
    match spec.kind {
        SceneKind::TranslatingDots => spec.velocity,
        SceneKind::CircularDot => {
            let w = spec.angular_rate;
            let ang = theta0 + w * t;
            (-spec.radius * w * ang.sin(), spec.radius * w * ang.cos())
        }
        SceneKind::RotatingField => {
            let (cx, cy) = pt.pivot.expect("rotating point has a pivot");
            let (px, py) = point_position(spec, pt, theta0, t);
            (-spec.angular_rate * (py - cy), spec.angular_rate * (px - cx))
        }
    }
}

fn point_normal(spec: &SceneSpec, pt: &ContourPoint, t: f64) -> (f64, f64) {
    match spec.kind {
        SceneKind::TranslatingDots | SceneKind::CircularDot => pt.n0,
        SceneKind::RotatingField => {
            let ang = spec.angular_rate * t;
            (
                pt.n0.0 * ang.cos() - pt.n0.1 * ang.sin(),
                pt.n0.0 * ang.sin() + pt.n0.1 * ang.cos(),
            )
        }
    }
}

/// Sample the analytic ground truth for one training window: a FlowSequence at
/// partition mid-times (px/partition) and the exact DisplacementMap over the
/// window.
pub fn render_gt(
    gt: &GroundTruth,
    scheme: PartitionScheme,
    window_index: usize,
) -> Result<(FlowSequence<f64>, DisplacementMap<f64>)> {
    let spec = gt.spec();
    let t_begin = scheme.window_begin_us(window_index);
    let t_end = t_begin + scheme.window_len_us();
    if t_end > spec.duration_us {
        return Err(Error::Config(format!(
            "window {window_index} spans [{t_begin}, {t_end}) us, past scene duration {}",
            spec.duration_us
        )));
    }
    let geom = spec.geometry;
    let (w, h) = (geom.width as usize, geom.height as usize);
    let dt_s = scheme.dt_input_us as f64 / 1e6;

    let mut maps = Vec::with_capacity(scheme.r);
    for k in 0..scheme.r {
        let t_mid = t_begin + k as u64 * scheme.dt_input_us + scheme.dt_input_us / 2;
        let mut map = FlowMap::zeros(geom);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = gt.flow_at(x as f64, y as f64, t_mid);
                map.u[(y, x)] = u * dt_s;
                map.v[(y, x)] = v * dt_s;
            }
        }
        maps.push(map);
    }
    let seq = FlowSequence::new(maps, scheme)?;

    let mut disp = DisplacementMap {
        dx: ndarray::Array2::zeros((h, w)),
        dy: ndarray::Array2::zeros((h, w)),
        valid: ndarray::Array2::from_elem((h, w), true),
    };
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = gt.displacement_at(x as f64, y as f64, t_begin, t_end);
            disp.dx[(y, x)] = sc(dx);
            disp.dy[(y, x)] = sc(dy);
        }
    }
    Ok((seq, disp))
}
