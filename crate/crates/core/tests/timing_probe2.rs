#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::Instant;
use styldiff_core::denoiser::{pretrain, DenoiserParams, PretrainConfig};
use styldiff_core::tensor::random::{rng_from_seed, standard_normal, uniform};
use styldiff_core::tensor::{AdamState, Precision, Tape};
use styldiff_core::{DenoiserConfig, NoiseSchedule};

#[test]
fn clean_step_timing() {
    let model = DenoiserParams::init(DenoiserConfig::default()).unwrap();
    let sched = NoiseSchedule::default_linear();
    let mut rng = rng_from_seed(0);
    let x = uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
    let eps = standard_normal(&[3, 32, 32], &mut rng);
    let reps = 60;

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::with_precision(Precision::Reduced);
        let binding = tape.bind_params(model.params());
        let pred = model.forward_taped(&mut tape, &binding, &x, 500).unwrap();
        let target = tape.constant(eps.clone());
        let d = tape.sub(pred, target).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let _ = tape.grad_map(loss, &binding, false).unwrap();
    }
    eprintln!("sample fwd+bwd+gradmap Reduced: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1000.0);

    let mut model2 = model.clone();
    let mut opt = AdamState::new(model2.params());
    let data: Vec<_> = (0..32).map(|_| uniform(&[3, 32, 32], -1.0, 1.0, &mut rng)).collect();
    let cfg = PretrainConfig { steps: 60, batch: 16, lr: 2e-4, precision: Precision::Reduced };
    let t0 = Instant::now();
    pretrain(&mut model2, &data, &sched, &cfg, &mut opt, &mut rng).unwrap();
    let ms = t0.elapsed().as_secs_f64() / 60.0 * 1000.0;
    eprintln!("pretrain step: {ms:.1} ms -> 20k = {:.0} s", ms * 20.0);
}
