use std::time::Instant;
use ddaebm::trainer::{TrainConfig, TrainState, train_step};

#[test]
#[ignore]
fn bench_train_step() {
    let config = TrainConfig { total_iterations: 100, ..TrainConfig::default() };
    let mut state = TrainState::new(&config).unwrap();
    // warmup
    for _ in 0..3 { let x0 = state.draw_batch().unwrap(); train_step(&mut state, &x0).unwrap(); }
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let x0 = state.draw_batch().unwrap();
        train_step(&mut state, &x0).unwrap();
    }
    println!("train_step: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // gamma = 0 variant to isolate the double-backward cost
    let config = TrainConfig {
        weights: ddaebm::objectives::LossWeights { gamma: 0.0, ..Default::default() },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config).unwrap();
    for _ in 0..3 { let x0 = state.draw_batch().unwrap(); train_step(&mut state, &x0).unwrap(); }
    let t0 = Instant::now();
    for _ in 0..reps {
        let x0 = state.draw_batch().unwrap();
        train_step(&mut state, &x0).unwrap();
    }
    println!("train_step gamma=0: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // kl_only variant to isolate the L2 cost
    let config = TrainConfig {
        ablation: ddaebm::objectives::AblationFlags { kl_only: true, ..Default::default() },
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&config).unwrap();
    for _ in 0..3 { let x0 = state.draw_batch().unwrap(); train_step(&mut state, &x0).unwrap(); }
    let t0 = Instant::now();
    for _ in 0..reps {
        let x0 = state.draw_batch().unwrap();
        train_step(&mut state, &x0).unwrap();
    }
    println!("train_step kl_only: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);
}
