use std::sync::Arc;
use std::time::Instant;
use gdsm_core::data::{generate_synthetic, GenConfig};
use gdsm_core::model::{Model, ModelConfig, Precision};
use gdsm_core::train::{adam_step, batch_tensor, class_weights, collect_param_gradients, AdamState, ClassWeightMode, TrainConfig};

fn main() {
    let t0 = Instant::now();
    let cfg = GenConfig::new(4, 200, 0.8, 0);
    let ds = generate_synthetic(&cfg).unwrap();
    println!("gen 200 full-size cubes: {:.1?}", t0.elapsed());

    let mut mc = ModelConfig::new(4);
    mc.precision = Precision::F32;
    let mut model: Model<f32> = Model::init(mc).unwrap();
    println!("params: {}", model.param_count());

    let idx: Vec<usize> = (0..64).collect();
    let cubes = batch_tensor::<f32>(&ds, &idx);
    let w = class_weights(&ds.labels, &idx, 4, ClassWeightMode::InverseFrequency);
    let weights: Arc<Vec<f32>> = Arc::new(w.iter().map(|&x| x as f32).collect());
    let targets: Arc<Vec<usize>> = Arc::new(idx.iter().map(|&i| ds.label(i)).collect());
    let tc = TrainConfig::default();
    let mut adam = AdamState::new(&model.store);

    for round in 0..3 {
        let t1 = Instant::now();
        let mut pass = model.forward(&cubes, true).unwrap();
        let fwd = t1.elapsed();
        let loss = pass.tape.cross_entropy_weighted(pass.logits, Arc::clone(&targets), Arc::clone(&weights)).unwrap();
        let t2 = Instant::now();
        let grads = pass.tape.backward(loss).unwrap();
        let bwd = t2.elapsed();
        let per_param = collect_param_gradients(&model.store, &pass.binding, &grads);
        adam_step(&mut model.store, &per_param, &mut adam, &tc);
        println!("step {round}: fwd {fwd:.1?} bwd {bwd:.1?} total {:.1?}", t1.elapsed());
    }
    let t3 = Instant::now();
    let _p = model.predict(&cubes).unwrap();
    println!("eval batch: {:.1?}", t3.elapsed());
}
