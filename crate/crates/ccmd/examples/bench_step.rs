//! Where does a training step spend its time? Raw kernel throughput vs
//! full forward/backward/step, at grid-candidate shapes.

use std::time::Instant;

use ccmd::autodiff::Tape;
use ccmd::backbone::{forward, init_params, BackboneConfig};
use ccmd::distill::{total_loss, DistillConfig};
use ccmd::encoder::View;
use ccmd::moldata::{batch, gen_synthetic};
use ccmd::optim::{Adam, AdamConfig};

fn main() {
    // raw GEMM throughput at the training shape [B*T, d] x [d, 4d]
    let (m, k, n) = (1088usize, 24usize, 96usize);
    let a: Vec<f64> = (0..m * k).map(|i| (i % 17) as f64 * 0.1).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i % 13) as f64 * 0.1).collect();
    let tape = Tape::new();
    let av = tape.input(&a, &[1, m, k]).unwrap();
    let bv = tape.input(&b, &[1, k, n]).unwrap();
    let reps = 200;
    let t0 = Instant::now();
    let mut last = av;
    for _ in 0..reps {
        last = tape.bmm(av, bv, false).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
    println!("bmm [{m}x{k}]x[{k}x{n}]: {gflops:.2} GFLOP/s ({dt:.3}s)");
    let _ = last;

    for d in [16usize, 24, 32] {
        let mut cfg = BackboneConfig::student_transformer();
        cfg.encoder.d = d;
        cfg.encoder.d_e = 8;
        cfg.encoder.rbf.k = 16;
        cfg.layers = 3;
        cfg.heads = 4;
        let mut tc = BackboneConfig::teacher_default();
        tc.encoder.d = d;
        tc.encoder.d_e = 8;
        tc.encoder.rbf.k = 16;
        tc.layers = 3;
        tc.heads = 4;

        let ds = gen_synthetic(256, (12, 16), 7).unwrap();
        let batches = batch(&ds.molecules, 64, None).unwrap();
        let gb = &batches[0];
        let mut store = init_params(&cfg, 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
        let dcfg = DistillConfig {
            arch: cfg.arch,
            ..DistillConfig::supervised_only()
        };

        // warm up a few steps, then measure phases
        let reps = 20;
        let (mut t_fwd, mut t_loss, mut t_bwd, mut t_step) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..reps {
            let t0 = Instant::now();
            let tape = Tape::new();
            let leaves = store.leaves(&tape).unwrap();
            let trace = forward(&tape, &leaves, &cfg, gb).unwrap();
            t_fwd += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            let (total, _) = total_loss(
                &tape,
                &dcfg,
                trace.prediction,
                &gb.labels,
                &trace.layers,
                None,
                gb,
            )
            .unwrap();
            t_loss += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            tape.backward(total).unwrap();
            t_bwd += t0.elapsed().as_secs_f64();

            let t0 = Instant::now();
            opt.step(&mut store, &tape, &leaves).unwrap();
            t_step += t0.elapsed().as_secs_f64();
        }
        let per = 1000.0 / reps as f64;
        println!(
            "d={d}: fwd {:.1}ms loss {:.1}ms bwd {:.1}ms adam {:.1}ms per step (B=64, T~17)",
            t_fwd * per,
            t_loss * per,
            t_bwd * per,
            t_step * per
        );
    }
}
