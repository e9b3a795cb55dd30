//! Solver timing on random 10x10 grid problems. `QP_N` sets the count.

use bednet_core::graph::ZoneGraph;
use bednet_core::qp::{AllocationQp, QpMethod};
use rand::{Rng, SeedableRng};

fn main() {
    let n: u32 = std::env::var("QP_N").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let g = ZoneGraph::grid(10, 10).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for quad in [false, true] {
        let mut fallbacks = 0;
        let mut iters = Vec::new();
        let mut worst: f64 = 0.0;
        let t = std::time::Instant::now();
        for _ in 0..n {
            let p: Vec<f64> = (0..100).map(|_| bednet_core::stats::inv_logit(rng.gen_range(-6.0..6.0))).collect();
            let qp = AllocationQp {
                graph: &g,
                curvature: if quad { p.clone() } else { vec![0.0; 100] },
                linear: p.iter().map(|v| if quad { -2.0 * v } else { -v }).collect(),
                alpha0: rng.gen_range(0.0..1.0),
                upper: vec![1.0; 100],
                weights: vec![0.01; 100],
                budget: rng.gen_range(0.1..0.9),
            };
            let sol = qp.solve().unwrap();
            worst = worst.max(sol.kkt_residual);
            if sol.method == QpMethod::ActiveSet { iters.push(sol.iterations) } else { fallbacks += 1 }
        }
        iters.sort();
        println!("quad={quad}: fallbacks {fallbacks}, median evals {:?}, max {:?}, worst kkt {worst:e}, {:?}/solve", iters.get(iters.len() / 2), iters.last(), t.elapsed() / n);
    }
}
