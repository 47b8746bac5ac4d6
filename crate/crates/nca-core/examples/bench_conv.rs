// quick throughput probe for the conv kernels
use std::time::Instant;
fn main() {
    let (h, w, cin, cout) = (32usize, 32usize, 16usize, 128usize);
    let inp: Vec<f32> = (0..h*w*cin).map(|i| (i as f32 * 0.001).sin()).collect();
    let wgt: Vec<f32> = (0..9*cin*cout).map(|i| (i as f32 * 0.002).cos() * 0.1).collect();
    let bias = vec![0.01f32; cout];
    let dout: Vec<f32> = (0..h*w*cout).map(|i| (i as f32*0.0005).sin()).collect();
    // warmup
    let mut sink = 0.0f32;
    for _ in 0..3 { sink += nca_core::bench_conv3x3_fwd(&inp, h, w, cin, &wgt, &bias, cout)[0]; }
    let n = 200;
    let t0 = Instant::now();
    for _ in 0..n { sink += nca_core::bench_conv3x3_fwd(&inp, h, w, cin, &wgt, &bias, cout)[0]; }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    let macs = (h*w*9*cin*cout) as f64;
    println!("fwd:  {:.3} ms  {:.1} GFLOP/s", dt*1e3, 2.0*macs/dt/1e9);
    let t0 = Instant::now();
    for _ in 0..n { sink += nca_core::bench_conv3x3_bwd(&inp, h, w, cin, &wgt, cout, &dout).0[0]; }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("bwd:  {:.3} ms  {:.1} GFLOP/s", dt*1e3, 2.0*2.0*macs/dt/1e9);
    eprintln!("sink {sink}");
}
