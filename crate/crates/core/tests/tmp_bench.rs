use std::time::Instant;
use stemsplit_core::tensor::*;

#[test]
fn bench_conv_kernels() {
    // Desk-scale hot layer: batch 8, conv5 of the decoder.
    let x = Tensor::full(&[8, 8, 32, 128], 0.5);
    let w = Tensor::full(&[4, 8, 3, 3], 0.1).with_grad();
    let b = Tensor::full(&[4], 0.0).with_grad();
    let xg = x.clone().with_grad();

    let t0 = Instant::now();
    let mut y = None;
    for _ in 0..20 {
        y = Some(conv2d(&xg, &w, &b, (1, 1), (1, 1)).unwrap());
    }
    let fwd = t0.elapsed().as_secs_f64() / 20.0;
    let flops = 2.0 * 8.0 * 4.0 * 8.0 * 9.0 * 32.0 * 128.0;
    println!("fwd: {:.2} ms, {:.2} GFLOP/s", fwd * 1e3, flops / fwd / 1e9);

    let loss = l1_loss(y.as_ref().unwrap(), &Tensor::zeros(&[8, 4, 32, 128])).unwrap();
    let t0 = Instant::now();
    for _ in 0..20 {
        zero_grad(&[xg.clone(), w.clone(), b.clone()]);
        backward(&loss).unwrap();
    }
    let bwd = t0.elapsed().as_secs_f64() / 20.0;
    println!("bwd: {:.2} ms, {:.2} GFLOP/s", bwd * 1e3, 2.0 * flops / bwd / 1e9);
}
