use ddaebm::persistence::load_checkpoint;
use ddaebm::tape::Tape;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha12Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

#[test]
#[ignore]
fn bn_mode_dispersion_probe() {
    let state = load_checkpoint(std::path::Path::new("/tmp/traj7/iter_00008000.ckpt")).unwrap();
    let s = &state.schedule;
    let gen = &state.triple.ema_generator;
    let modes: Vec<(f64, f64)> = (0..5)
        .flat_map(|i| (0..5).map(move |j| (-4.0 + 2.0 * i as f64, -4.0 + 2.0 * j as f64)))
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let n = 10_000;

    for train_mode in [false, true] {
        let mut x = randn(&mut rng.clone(), (n, 2));
        for t in (1..=s.steps()).rev() {
            let z = randn(&mut rng, (n, 2));
            let mut tape = Tape::new();
            let vars = gen.store.stage(&mut tape);
            let xv = tape.leaf(x.clone());
            let zv = tape.leaf(z);
            let out = gen.generate(&mut tape, &vars, xv, zv, &vec![t; n], train_mode);
            let x0_hat = tape.value(out).clone();
            let (mean, var) = s.posterior_params(&x, &x0_hat, t).unwrap();
            if var > 0.0 {
                let eps = randn(&mut rng, (n, 2));
                x = mean + eps * var.sqrt();
            } else {
                x = mean;
            }
        }
        let mut within = 0usize;
        let mut med: Vec<f64> = Vec::with_capacity(n);
        for row in x.rows() {
            let d = modes
                .iter()
                .map(|(mx, my)| ((row[0] - mx).powi(2) + (row[1] - my).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            if d <= 0.15 { within += 1; }
            med.push(d);
        }
        med.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "train_mode={train_mode}: within-0.15 {:.2}%, median nearest-mode dist {:.3}",
            100.0 * within as f64 / n as f64,
            med[n / 2]
        );
    }
}
