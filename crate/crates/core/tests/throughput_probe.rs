use lumipower_core::tensor::Tape;
use std::time::Instant;

#[test]
fn probe() {
    // Mini-preset stage-1 block shape at 192x320 input: conv 8->8, 3x3, on 48x80.
    let (n, cin, h, w, cout) = (8, 8, 48, 80, 8);
    let x: Vec<f32> = (0..n * cin * h * w).map(|i| (i % 97) as f32 * 0.01).collect();
    let k: Vec<f32> = (0..cout * cin * 9).map(|i| (i % 13) as f32 * 0.02 - 0.1).collect();
    let flops = 2.0 * (n * cout * h * w * cin * 9) as f64;
    let mut t = Tape::<f32>::new();
    let xi = t.leaf(x, &[n, cin, h, w], true).unwrap();
    let ki = t.leaf(k, &[cout, cin, 3, 3], true).unwrap();
    // warmup
    let y = t.conv2d(xi, ki, None, 1, 1).unwrap();
    let iters = 50;
    let t0 = Instant::now();
    for _ in 0..iters {
        let _ = t.conv2d(xi, ki, None, 1, 1).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let s = t.sum(y).unwrap();
    let t0 = Instant::now();
    for _ in 0..iters {
        t.backward(s).unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64() / iters as f64;
    println!(
        "conv3x3 8ch 48x80 b8: fwd {:.3} ms ({:.2} GF/s), bwd {:.3} ms",
        fwd * 1e3, flops / fwd / 1e9, bwd * 1e3
    );

    // Stem-sized conv: 1->8 7x7 stride 2 on 192x320.
    let (n, cin, h, w, cout) = (8, 1, 192, 320, 8);
    let x: Vec<f32> = (0..n * cin * h * w).map(|i| (i % 97) as f32 * 0.01).collect();
    let k: Vec<f32> = (0..cout * cin * 49).map(|i| (i % 13) as f32 * 0.02 - 0.1).collect();
    let mut t = Tape::<f32>::new();
    let xi = t.leaf(x, &[n, cin, h, w], false).unwrap();
    let ki = t.leaf(k, &[cout, cin, 7, 7], true).unwrap();
    let t0 = Instant::now();
    for _ in 0..20 {
        let _ = t.conv2d(xi, ki, None, 2, 3).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / 20.0;
    let oflops = 2.0 * (n * cout * 96 * 160 * cin * 49) as f64;
    println!("stem conv 7x7: fwd {:.3} ms ({:.2} GF/s)", fwd * 1e3, oflops / fwd / 1e9);
}

#[test]
fn full_step_probe() {
    use lumipower_core::model::{HeadKind, ModelSpec, ParamSet};
    let spec = ModelSpec::mini((192, 320), HeadKind::RegressionMap).unwrap();
    let mut set: ParamSet<f32> = spec.init_params(1);
    let n = 8;
    let x: Vec<f32> = (0..n * 192 * 320).map(|i| ((i % 631) as f32) * 0.003 - 0.9).collect();
    let mut step = || {
        let mut tape = Tape::new();
        let ids = set.bind(&mut tape).unwrap();
        let xid = tape.leaf(x.clone(), &[n, 1, 192, 320], false).unwrap();
        let out = spec.forward(&mut tape, &ids, &mut set.buffers, xid, true).unwrap();
        let t = tape.constant(vec![0.8f32; n], &[n]).unwrap();
        let nt = tape.scale(t, -1.0).unwrap();
        let d = tape.add(out.y_hat, nt).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 1.0 / n as f32).unwrap();
        tape.backward(loss).unwrap();
    };
    step(); // warmup
    let t0 = Instant::now();
    let iters = 6;
    for _ in 0..iters {
        step();
    }
    let per = t0.elapsed().as_secs_f64() / iters as f64;
    println!(
        "mini model 192x320 b8 train step: {:.1} ms ({:.1} ms/sample)",
        per * 1e3,
        per * 1e3 / n as f64
    );
}
