//! End-to-end probe: pretrain, fine-tune macp + full in parallel, compare.
use macp::eval::{evaluate, EvalOptions, PipelineMode};
use macp::peft::{build_variant, VariantConfig, VariantKind};
use macp::perception::{Model, ModelConfig};
use macp::scenario::{make_dataset, DatasetKind, ScenarioConfig};
use macp::train::{finetune, pretrain, TrainConfig};
use std::time::Instant;

fn main() {
    let a: Vec<usize> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    let (n_pre, e_pre, n_ft, e_ft, n_test) = (
        a.first().copied().unwrap_or(220),
        a.get(1).copied().unwrap_or(7),
        a.get(2).copied().unwrap_or(128),
        a.get(3).copied().unwrap_or(6),
        a.get(4).copied().unwrap_or(80),
    );
    let scen = ScenarioConfig {
        agents: (3, 5),
        objects: (20, 32),
        bounds: (90.0, 50.0),
        ego_spawn: Some(((-40.0, -34.0), (-8.0, 8.0))),
        partner_spread: Some(20.0),
        ..Default::default()
    };
    let pre = make_dataset(DatasetKind::Single, n_pre, 100, &scen).unwrap();
    let ft = make_dataset(DatasetKind::Cooperative, n_ft, 300, &scen).unwrap();
    let test = make_dataset(DatasetKind::Cooperative, n_test, 500, &scen).unwrap();
    println!("test: {} frames, mean gts {:.1}", test.len(),
        test.iter().map(|f| f.gts.len()).sum::<usize>() as f64 / test.len() as f64);

    let t0 = Instant::now();
    let mut base = Model::new(ModelConfig::single_agent_desk(), 1);
    let cfg = TrainConfig { epochs: e_pre, lr0: 6e-3, seed: 1, augment: true, ..Default::default() };
    let logs = pretrain(&mut base, &pre, &cfg).unwrap();
    println!("pretrain {:.0}s final loss {:.3}", t0.elapsed().as_secs_f64(), logs.last().unwrap().mean_loss);

    let no_fusion = evaluate(&test, &base, PipelineMode::NoFusion, &EvalOptions::default()).unwrap();
    println!("no_fusion AP@0.5 {:.3} AP@0.7 {:.3}", no_fusion.overall(0.5), no_fusion.overall(0.7));

    let t = Instant::now();
    let ft_cfg = TrainConfig { epochs: e_ft, lr0: 6e-3, seed: 2, ..Default::default() };
    let (macp_model, full_model) = std::thread::scope(|s| {
        let m = s.spawn(|| {
            let v = VariantConfig::new(VariantKind::Macp, 8, 4);
            let mut m = build_variant(&v, &base.store, &base.cfg, 2).unwrap();
            finetune(&mut m, &ft, &ft_cfg).unwrap();
            m
        });
        let f = s.spawn(|| {
            let v = VariantConfig::new(VariantKind::FullFinetune, 8, 4);
            let mut m = build_variant(&v, &base.store, &base.cfg, 2).unwrap();
            finetune(&mut m, &ft, &ft_cfg).unwrap();
            m
        });
        (m.join().unwrap(), f.join().unwrap())
    });
    println!("two finetunes in {:.0}s", t.elapsed().as_secs_f64());

    let coop = evaluate(&test, &macp_model, PipelineMode::Cooperative, &EvalOptions::default()).unwrap();
    let full = evaluate(&test, &full_model, PipelineMode::Cooperative, &EvalOptions::default()).unwrap();
    println!("macp AP@0.5 {:.3}  full AP@0.5 {:.3}", coop.overall(0.5), full.overall(0.5));
    println!("GAP: {:.1} pts   RATIO: {:.0}%", (coop.overall(0.5) - no_fusion.overall(0.5)) * 100.0,
        100.0 * coop.overall(0.5) / full.overall(0.5));
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
