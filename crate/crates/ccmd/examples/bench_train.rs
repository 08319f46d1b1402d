//! Timing probe: seconds per epoch for teacher / baseline / distill runs
//! at candidate desk presets.

use std::time::Instant;

use ccmd::backbone::BackboneConfig;
use ccmd::distill::{LayerScope, Mode, WeightRule};
use ccmd::encoder::View;
use ccmd::moldata::{gen_synthetic, split};
use ccmd::trainer::{distill_student, train_supervised, train_teacher, TrainConfig};

fn preset(view: View, d: usize, layers: usize, heads: usize) -> BackboneConfig {
    let mut b = match view {
        View::ThreeD => BackboneConfig::teacher_default(),
        View::TwoD => BackboneConfig::student_transformer(),
    };
    b.encoder.d = d;
    b.encoder.d_e = 8;
    b.encoder.rbf.k = 16;
    b.layers = layers;
    b.heads = heads;
    b
}

fn main() {
    for (d, layers, n_lo, n_hi, count) in [(24usize, 3usize, 12usize, 16usize, 1200usize)] {
        let ds = gen_synthetic(count, (n_lo, n_hi), 7).unwrap();
        let (train, val) = split(&ds, count / 6).unwrap();
        println!(
            "== d={d} L={layers} n=({n_lo},{n_hi}) train={} val={}",
            train.molecules.len(),
            val.molecules.len()
        );

        let t0 = Instant::now();
        let tcfg = TrainConfig::supervised(preset(View::ThreeD, d, layers, 4), 1, 0);
        let teacher = train_teacher(&tcfg, &train, &val).unwrap();
        println!("teacher 3D epoch: {:.2}s", t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let scfg = TrainConfig::supervised(preset(View::TwoD, d, layers, 4), 1, 0);
        train_supervised(&scfg, &train, &val).unwrap();
        println!("student 2D supervised epoch: {:.2}s", t0.elapsed().as_secs_f64());

        let t0 = Instant::now();
        let mut dcfg = scfg.clone();
        dcfg.distill.mode = Mode::GlobalLocal;
        dcfg.distill.layer_scope = LayerScope::All;
        dcfg.distill.weight_rule = WeightRule::Coordinating;
        distill_student(&dcfg, &teacher.best, &train, &val).unwrap();
        println!("student distill epoch: {:.2}s", t0.elapsed().as_secs_f64());
    }
}
