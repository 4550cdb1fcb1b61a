use ktl::model::heatmap::{detector_loss, detector_loss_backward, render_target, extract_keypoints};
use ktl::model::optim::{optimizer_step, RmsPropState};
use ktl::model::{backward, forward_pass, Dims, ForwardOpts, Gradients, ModelParams, Section};
use ktl::geometry::{raster_to_grid};
use ktl::synth::generate_corpus;
use ktl::rng::rng_for;
use rand::Rng;

fn main() {
    // Pure detector training: does MSE on Gaussian targets carve peaks?
    let corpus = generate_corpus(60, 1, 64, 0.35, 42).unwrap();
    let dims = Dims::default_desk(15);
    let mut params = ModelParams::init(dims, 7);
    let mut opt = RmsPropState::zeros_like(&params);
    let lr = 1e-3;
    let lambda = 0.1;
    let sigma = 1.0;

    for step in 0..1201 {
        let mut rng = rng_for(3, "det", step);
        let mut grads = Gradients::zeros_like(&params);
        let mut loss_sum = 0.0;
        let bs = 8;
        for _ in 0..bs {
            let id = rng.gen_range(0..corpus.samples.len());
            let s = &corpus.samples[id];
            let pts: Vec<_> = s.gt_landmarks.iter().map(|&p| raster_to_grid(p, 2)).collect();
            let target = render_target(&pts, sigma, 32, 32);
            let pass = forward_pass(&params, &s.raster, ForwardOpts { detector: true, descriptor: false, stage2: false }).unwrap();
            let pred = pass.detector.as_ref().unwrap();
            loss_sum += detector_loss(pred, &target).unwrap();
            let mut d = detector_loss_backward(pred, &target);
            d.data.iter_mut().for_each(|v| *v *= lambda / bs as f64);
            backward(&params, &pass, Some(d), None, None, &mut grads);
        }
        optimizer_step(&mut params, &grads, &mut opt, lr, 1e-5, &[Section::Backbone, Section::DetectorHead]).unwrap();
        if step % 200 == 0 {
            let pass = forward_pass(&params, &corpus.samples[0].raster, ForwardOpts { detector: true, descriptor: false, stage2: false }).unwrap();
            let det = pass.detector.as_ref().unwrap();
            let maxv = det.data.iter().cloned().fold(f64::MIN, f64::max);
            let minv = det.data.iter().cloned().fold(f64::MAX, f64::min);
            let kps = extract_keypoints(det, 0.25, 2, 15);
            println!("step {step}: loss={:.5} det range [{:.3},{:.3}] kps@0.25={}", loss_sum / bs as f64, minv, maxv, kps.len());
        }
    }
}
