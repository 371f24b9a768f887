//! Throughput probe for the conv3x3 tape op (forward + backward).

use promptface_tensor::{init, NamedParamSet, Tape};
use std::time::Instant;

fn bench(n: usize, ci: usize, co: usize, hw: usize, reps: usize) {
    let mut rng = init::rng(1);
    let x = init::randn::<f32>(&mut rng, &[n, ci, hw, hw], 1.0);
    let mut params = NamedParamSet::<f32>::new();
    params
        .insert("w", init::kaiming(&mut rng, &[co, ci, 3, 3], ci * 9), true)
        .unwrap();
    params
        .insert("b", init::randn(&mut rng, &[co], 0.1), true)
        .unwrap();

    let start = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::<f32>::new();
        let pv = t.bind(&params, true);
        let xv = t.constant(x.clone());
        let y = t.conv3x3(xv, pv["w"], pv["b"]).unwrap();
        let loss = t.mean_all(y);
        let _ = t.backward(loss).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    let mac = (n * co * ci * 9 * hw * hw) as f64;
    // forward + input-grad + weight-grad passes
    println!(
        "n={n:2} ci={ci:2} co={co:2} hw={hw:3}  {:7.2} ms/step  fwd {:6.2} GMAC/s (x3 passes {:6.2})",
        dt * 1e3,
        mac / dt / 1e9,
        3.0 * mac / dt / 1e9
    );
}

fn main() {
    // Generator ladder shapes at batch 16, plus judge-net front layers.
    bench(16, 32, 32, 8, 50);
    bench(16, 24, 16, 32, 20);
    bench(16, 16, 16, 32, 20);
    bench(16, 3, 20, 32, 50);
    bench(16, 20, 28, 16, 50);
    bench(2000, 3, 16, 32, 1);
}
