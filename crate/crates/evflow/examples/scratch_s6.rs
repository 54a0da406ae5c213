// scratch: dissect the seed-6 minimum
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evflow::*;

fn main() {
    let scheme = PartitionScheme::new(250_000, 4, 0).unwrap();
    let geometry = CameraGeometry::new(48, 48).unwrap();
    let seed = 6u64;
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let speed_pp = rng.gen_range(1.2..3.0);
    let quadrant = rng.gen_range(0..4u32);
    let ang = rng.gen_range(30f64.to_radians()..60f64.to_radians())
        + quadrant as f64 * std::f64::consts::FRAC_PI_2;
    let truth = (speed_pp * ang.cos(), speed_pp * ang.sin());
    println!("truth ({:+.3},{:+.3})  angle {:.1} deg", truth.0, truth.1, ang.to_degrees());
    for (dots, dr, epx) in [(40usize, 2.5f64, 2u32), (56, 2.5, 2), (72, 2.0, 2), (96, 2.0, 2)] {
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
        let window = partition_stream(&events, scheme).unwrap().windows.remove(0);
        let loss_cfg = LossConfig::new(4, 2);
        let opt = OptimizerConfig { tile_base: 24, pyramid_levels: 1, ..Default::default() };
        let result = estimate_window::<f64>(&window, geometry, &opt, &loss_cfg, None).unwrap();
        print!("dots {dots} dr {dr} epx {epx}: n={} loss {:.4} maps", events.len(), result.final_report.total);
        for map in result.seq.maps() {
            let n = (map.width() * map.height()) as f64;
            let mu: f64 = map.u.iter().sum::<f64>() / n;
            let mv: f64 = map.v.iter().sum::<f64>() / n;
            print!(" ({:+.2},{:+.2})", mu, mv);
        }
        let truth_rep = loss_multi_timescale(
            &window,
            &FlowSequence::constant(geometry, scheme, truth.0, truth.1),
            &loss_cfg,
        )
        .unwrap();
        println!("  truth loss {:.4}", truth_rep.total);
    }
}
