use ktl::model::{self, Dims, ForwardOpts, Gradients, ModelParams};
use ktl::raster::Raster;
use std::time::Instant;

fn main() {
    let dims = Dims::default_desk(15);
    let params = ModelParams::init(dims, 1);
    let mut raster = Raster::zeros(64, 64);
    for i in 0..64 * 64 {
        let v = ((i * 37) % 101) as f64 / 101.0;
        raster.set(i % 64, i / 64, v);
    }
    // forward only
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let _ = model::forward_pass(&params, &raster, ForwardOpts::detector_descriptor()).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward (det+desc): {:.1} ms", fwd * 1e3);

    // forward + backward with dense grads on both outputs
    let t0 = Instant::now();
    for _ in 0..n {
        let pass = model::forward_pass(&params, &raster, ForwardOpts::detector_descriptor()).unwrap();
        let d_det = pass.detector.clone().unwrap();
        let d_feat = pass.features.clone().unwrap();
        let mut grads = Gradients::zeros_like(&params);
        model::backward(&params, &pass, Some(d_det), Some(d_feat), None, &mut grads);
    }
    let fb = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward+backward: {:.1} ms", fb * 1e3);

    // descriptor-only path (warm-up)
    let t0 = Instant::now();
    for _ in 0..n {
        let pass = model::forward_pass(&params, &raster, ForwardOpts::descriptor_only()).unwrap();
        let d_feat = pass.features.clone().unwrap();
        let mut grads = Gradients::zeros_like(&params);
        model::backward(&params, &pass, None, Some(d_feat), None, &mut grads);
    }
    let fb2 = t0.elapsed().as_secs_f64() / n as f64;
    println!("desc-only fwd+bwd: {:.1} ms", fb2 * 1e3);
}
