use proder_core::model::{Adam, AdamConfig, Batch, BiGruClassifier};
use proder_core::numcore::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = BiGruClassifier::<f32>::new(51, &mut rng).unwrap();
    m.expand_head(11, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let windows: Vec<Vec<f32>> = (0..4).map(|_| (0..612).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let batch = Batch::from_windows(&windows, 12, 51).unwrap();
    let iters = 300;
    let (mut tf, mut tb, mut ta) = (0.0, 0.0, 0.0);
    for _ in 0..iters {
        let t = Instant::now();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let out = m.forward(&mut tape, &b, &batch, &mut rng).unwrap();
        let ls = tape.log_softmax(out.logits, 1.0).unwrap();
        let p = tape.pick(ls, &[0, 1, 2, 3]).unwrap();
        let l = tape.mean(p).unwrap();
        tf += t.elapsed().as_secs_f64();
        let t = Instant::now();
        tape.backward(l).unwrap();
        let g = m.gradients(&tape, &b);
        tb += t.elapsed().as_secs_f64();
        let t = Instant::now();
        adam.step(m.params_mut(), &g).unwrap();
        ta += t.elapsed().as_secs_f64();
    }
    let k = 1e3 / iters as f64;
    println!("fwd {:.3} bwd {:.3} adam {:.3} ms", tf * k, tb * k, ta * k);
}
