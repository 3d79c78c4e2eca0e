//! Training-quality probe: pretrain on single-agent frames, report AP.
use macp::eval::{evaluate, EvalOptions, PipelineMode};
use macp::perception::{Model, ModelConfig};
use macp::scenario::{make_dataset, DatasetKind, ScenarioConfig};
use macp::train::{pretrain, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let scen = ScenarioConfig::default();
    let train = make_dataset(DatasetKind::Single, n_train, 100, &scen).unwrap();
    let test = make_dataset(DatasetKind::Single, 40, 200, &scen).unwrap();
    println!(
        "train frames {}, mean gts {:.1}, mean pts {:.0}",
        train.len(),
        train.iter().map(|f| f.gts.len()).sum::<usize>() as f64 / train.len() as f64,
        train.iter().map(|f| f.clouds[0].len()).sum::<usize>() as f64 / train.len() as f64
    );
    let mut model = Model::new(ModelConfig::single_agent_desk(), 1);
    let cfg = TrainConfig { epochs, lr0: lr, seed: 1, augment: true, ..Default::default() };
    let t = Instant::now();
    let logs = pretrain(&mut model, &train, &cfg).unwrap();
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    for l in &logs {
        println!("epoch {} loss {:.4} lr {:.2e}", l.epoch, l.mean_loss, l.lr);
    }
    let t = Instant::now();
    let report = evaluate(&test, &model, PipelineMode::NoFusion, &EvalOptions::default()).unwrap();
    println!(
        "eval in {:.1}s: AP@0.5 {:.3}  AP@0.7 {:.3}  (dets {}, gts {})",
        t.elapsed().as_secs_f64(),
        report.overall(0.5),
        report.overall(0.7),
        report.n_detections,
        report.n_gts
    );
}
