//! Rough timing of desk-scale forward/backward and pipeline steps.
use macp::autodiff::{ParamStore, Tape, Tensor};
use macp::nnops::Conv2dOp;
use macp::perception::{Model, ModelConfig};
use macp::scenario::{make_dataset, DatasetKind, ScenarioConfig};
use macp::train::{pretrain, TrainConfig};
use std::time::Instant;

fn main() {
    // Isolated conv2d fwd (128x128x32 -> 32).
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::new(vec![128, 128, 32], vec![0.5; 128 * 128 * 32]), false).unwrap();
    let w = store.add("w", Tensor::new(vec![3, 3, 32, 32], vec![0.01; 9 * 32 * 32]), false).unwrap();
    let b = store.add("b", Tensor::new(vec![32], vec![0.0; 32]), false).unwrap();
    let t = Instant::now();
    let n = 10;
    for _ in 0..n {
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let _ = tape.apply(Box::new(Conv2dOp), &[xv, wv, bv]).unwrap();
    }
    println!("conv2d fwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // Forward + backward through one conv.
    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let y = tape.apply(Box::new(Conv2dOp), &[xv, wv, bv]).unwrap();
        let s = tape.apply(Box::new(macp::nnops::SumAllOp), &[y]).unwrap();
        store.zero_grads();
        tape.backward(s, &mut store).unwrap();
    }
    println!("conv2d fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let scen = ScenarioConfig::default();
    let frames = make_dataset(DatasetKind::Single, 4, 1, &scen).unwrap();
    let mut model = Model::new(ModelConfig::single_agent_desk(), 1);
    let t = Instant::now();
    for f in &frames {
        let mut tape = Tape::new();
        let feat = model.encode_features_t(&mut tape, &f.clouds[0]).unwrap();
        let post = model.post_fusion_t(&mut tape, feat).unwrap();
        let _ = model.predict_heads_t(&mut tape, post).unwrap().materialize(&tape);
    }
    println!("model forward: {:.1} ms/frame", t.elapsed().as_secs_f64() * 1000.0 / frames.len() as f64);

    let cfg = TrainConfig { epochs: 1, batch_size: 2, lr0: 1e-3, seed: 1, augment: true, ..Default::default() };
    let t = Instant::now();
    pretrain(&mut model, &frames, &cfg).unwrap();
    println!("train step (batch 2): {:.1} ms/batch", t.elapsed().as_secs_f64() * 1000.0 / 2.0);
}
