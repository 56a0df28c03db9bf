use std::sync::Arc;
use std::time::Instant;
use gdsm_core::data::{generate_synthetic, GenConfig};
use gdsm_core::model::{Ablation, Model, ModelConfig, Precision};
use gdsm_core::train::{adam_step, batch_tensor, class_weights, collect_param_gradients, AdamState, ClassWeightMode, TrainConfig};

fn main() {
    let cfg = GenConfig::new(4, 72, 0.8, 0);
    let ds = generate_synthetic(&cfg).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let w = class_weights(&ds.labels, &idx, 4, ClassWeightMode::InverseFrequency);
    let tc = TrainConfig::default();

    for ablation in [Ablation::Full, Ablation::WoSpectral, Ablation::WoTemporal, Ablation::WoSpatial, Ablation::WoGraph, Ablation::WoDisentanglement] {
        let mut mc = ModelConfig::new(4);
        mc.precision = Precision::F32;
        mc.ablation = ablation;
        let mut model: Model<f32> = Model::init(mc).unwrap();
        let cubes = batch_tensor::<f32>(&ds, &idx);
        let weights: Arc<Vec<f32>> = Arc::new(w.iter().map(|&x| x as f32).collect());
        let targets: Arc<Vec<usize>> = Arc::new(idx.iter().map(|&i| ds.label(i)).collect());
        let mut adam = AdamState::new(&model.store);
        // warmup
        let mut pass = model.forward(&cubes, true).unwrap();
        let loss = pass.tape.cross_entropy_weighted(pass.logits, Arc::clone(&targets), Arc::clone(&weights)).unwrap();
        let _ = pass.tape.backward(loss).unwrap();
        // timed
        let t1 = Instant::now();
        let mut pass = model.forward(&cubes, true).unwrap();
        let fwd = t1.elapsed();
        let loss = pass.tape.cross_entropy_weighted(pass.logits, Arc::clone(&targets), Arc::clone(&weights)).unwrap();
        let t2 = Instant::now();
        let grads = pass.tape.backward(loss).unwrap();
        let bwd = t2.elapsed();
        let per_param = collect_param_gradients(&model.store, &pass.binding, &grads);
        adam_step(&mut model.store, &per_param, &mut adam, &tc);
        println!("{ablation}: fwd {fwd:.2?} bwd {bwd:.2?} total {:.2?}", t1.elapsed());
    }
}
