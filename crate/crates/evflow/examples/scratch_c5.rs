// scratch: flow-recovery sweep mirroring the acceptance setup
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evflow::*;

fn main() {
    let scheme = PartitionScheme::new(250_000, 4, 0).unwrap();
    for (side, scales, tile, dots, dr, epx) in [
        (64u32, 2usize, 32usize, 12usize, 3.0f64, 4u32),
        (64, 2, 32, 16, 3.0, 2),
    ] {
        println!("== side {side} S {scales} tile {tile} dots {dots} dr {dr} epx {epx}");
        let geometry = CameraGeometry::new(side, side).unwrap();
        let loss_cfg = LossConfig::new(4, scales);
        let opt =
            OptimizerConfig { tile_base: tile, pyramid_levels: 1, ..Default::default() };
        run_seeds(geometry, scheme, &loss_cfg, &opt, dots, dr, epx);
    }
}

fn run_seeds(
    geometry: CameraGeometry,
    scheme: PartitionScheme,
    loss_cfg: &LossConfig,
    opt: &OptimizerConfig,
    dots: usize,
    dr: f64,
    epx: u32,
) {
    let t_total = std::time::Instant::now();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let speed_pp = rng.gen_range(1.8..3.0);
        // keep directions off the pixel axes: integer event coordinates bias
        // contrast optima toward axis-aligned flow within ~22 degrees
        let quadrant = rng.gen_range(0..4u32);
        let ang = rng.gen_range(30f64.to_radians()..60f64.to_radians())
            + quadrant as f64 * std::f64::consts::FRAC_PI_2;
        let truth = (speed_pp * ang.cos(), speed_pp * ang.sin());
        let spec = SceneSpec {
            kind: SceneKind::TranslatingDots,
            geometry,
            duration_us: 1_000_000,
            velocity: (4.0 * truth.0, 4.0 * truth.1),
            angular_rate: 0.0,
            radius: 0.0,
            dot_count: dots,
            dot_radius: dr,
            seed: 40 + seed,
            events_per_px_crossing: epx,
        };
        let (events, _) = generate(&spec).unwrap();
        let n = events.len();
        let window = partition_stream(&events, scheme).unwrap().windows.remove(0);
        let t0 = std::time::Instant::now();
        let result =
            estimate_window::<f64>(&window, geometry, &opt, &loss_cfg, None).unwrap();
        let dt = t0.elapsed().as_secs_f64();

        // EPE near events only
        let (gw, gh) = (geometry.width as usize, geometry.height as usize);
        let mut mask = vec![vec![false; gw]; gh];
        for e in &events {
            let (cx, cy) = (e.x.round() as i64, e.y.round() as i64);
            for dy in -2..=2i64 {
                for dx in -2..=2i64 {
                    let (px, py) = (cx + dx, cy + dy);
                    if (0..gw as i64).contains(&px) && (0..gh as i64).contains(&py) {
                        mask[py as usize][px as usize] = true;
                    }
                }
            }
        }
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for map in result.seq.maps() {
            for y in 0..gh {
                for x in 0..gw {
                    if mask[y][x] {
                        let du = map.u[(y, x)] - truth.0;
                        let dv = map.v[(y, x)] - truth.1;
                        sum += (du * du + dv * dv).sqrt();
                        cnt += 1;
                    }
                }
            }
        }
        let epe = sum / cnt as f64;
        let disp = reconstruct_displacement(&result.seq, 4).unwrap();
        let (mut dsum, mut dcnt) = (0.0, 0usize);
        for y in 0..gh {
            for x in 0..gw {
                if mask[y][x] && disp.valid[(y, x)] {
                    let du = disp.dx[(y, x)] - 4.0 * truth.0;
                    let dv = disp.dy[(y, x)] - 4.0 * truth.1;
                    dsum += (du * du + dv * dv).sqrt();
                    dcnt += 1;
                }
            }
        }
        let depe = dsum / dcnt as f64;
        let ok = if epe < 0.3 && depe < 1.0 { "OK " } else { "BAD" };
        let iters: Vec<usize> = result.levels.iter().map(|l| l.iterations).collect();
        let truth_rep = loss_multi_timescale(
            &window,
            &FlowSequence::constant(geometry, scheme, truth.0, truth.1),
            &loss_cfg,
        )
        .unwrap();
        println!(
            "{ok} seed {seed}: truth ({:+.2},{:+.2}) n={n:5} epe {epe:.3} depe {depe:.3} iters {iters:?} loss {:.4}->{:.4} mask {:.3} | truth loss {:.4} mask {:.3} [{dt:.1}s]",
            truth.0,
            truth.1,
            result.loss_trace.first().unwrap(),
            result.final_report.total,
            result.final_report.masked_fraction,
            truth_rep.total,
            truth_rep.masked_fraction
        );
    }
    println!("total {:.1}s", t_total.elapsed().as_secs_f64());
}
