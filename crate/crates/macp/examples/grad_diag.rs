//! Per-parameter finite-difference comparison for the end-to-end loss.
use macp::autodiff::{ParamId, ParamStore, Tape, Tensor};
use macp::fusion::{fuse_maps_t, warp_to_ego_t, FusionMethod};
use macp::geom::{Point, PointCloud, Pose2D};
use macp::perception::{detection_loss_t, splat_targets, BoxGt, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut cfg = ModelConfig::tiny(6, 6, 4, 1);
    cfg.encoder.adapters = true;
    cfg.ssf = true;
    cfg.channel_adapter = true;
    cfg.compression_factor = 2;
    let mut model = Model::new(cfg, 7);
    let mut jitter = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in &names {
        if name.contains("up_w") {
            let id = model.store.id(name).unwrap();
            let t = model.store.get_mut(id);
            let shape = t.value.shape().to_vec();
            let n = t.value.numel();
            t.value = Tensor::new(shape, (0..n).map(|_| jitter.random_range(-0.3..0.3)).collect());
        }
    }
    let ego_pose = Pose2D::identity();
    let other_pose = Pose2D::new(1.0, 0.5, 0.4);
    let mk = |pts: &[(f64, f64)]| PointCloud::new(pts.iter().map(|&(x, y)| Point { x, y, z: 1.0, intensity: 0.6 }).collect());
    let ego_cloud = mk(&[(0.5, 0.5), (-1.0, 1.5), (2.0, -2.0)]);
    let other_cloud = mk(&[(0.2, -0.4), (-1.5, -1.0)]);
    let gts = vec![BoxGt { x: 0.4, y: 0.6, length: 2.0, width: 1.0, yaw: 0.3 }];
    let target = splat_targets(&gts, &model.cfg.grid);
    let grid = model.cfg.grid;
    let mcfg = model.cfg.clone();

    let build = |tape: &mut Tape, store: &ParamStore| {
        let m = Model { store: store.clone(), cfg: mcfg.clone() };
        let ego = m.encode_features_t(tape, &ego_cloud).unwrap();
        let feat = m.encode_features_t(tape, &other_cloud).unwrap();
        let latent = m.channel_compress_t(tape, feat).unwrap();
        let dec = m.channel_decompress_t(tape, latent).unwrap();
        let warped = warp_to_ego_t(tape, dec, other_pose, ego_pose, &grid).unwrap();
        let fused = fuse_maps_t(tape, &m, ego, &[warped], FusionMethod::WeightedSum).unwrap();
        let post = m.post_fusion_t(tape, fused).unwrap();
        let heads = m.predict_heads_t(tape, post).unwrap();
        detection_loss_t(tape, &heads, &target).unwrap()
    };

    // Analytic gradients.
    let mut store = model.store.clone();
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &store);
    println!("loss {}", tape.tensor(loss).item());
    tape.backward(loss, &mut store).unwrap();
    let grads: Vec<(String, Option<Tensor>)> = store.iter().map(|(_, p)| (p.name.clone(), p.grad.clone())).collect();

    for eps in [1e-6, 1e-5, 3e-5] {
        let mut worst = (0.0f64, String::new(), 0usize, 0.0, 0.0);
        for (idx, (name, g)) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            for i in 0..g.numel() {
                let old = store.get(ParamId(idx)).value.data()[i];
                store.get_mut(ParamId(idx)).value.data_mut()[i] = old + eps;
                let mut t1 = Tape::new();
                let l1 = build(&mut t1, &store);
                let lp = t1.tensor(l1).item();
                store.get_mut(ParamId(idx)).value.data_mut()[i] = old - eps;
                let mut t2 = Tape::new();
                let l2 = build(&mut t2, &store);
                let lm = t2.tensor(l2).item();
                store.get_mut(ParamId(idx)).value.data_mut()[i] = old;
                let numeric = (lp - lm) / (2.0 * eps);
                let a = g.data()[i];
                let rel = (a - numeric).abs() / (1e-12f64).max(a.abs() + numeric.abs());
                if rel > worst.0 {
                    worst = (rel, name.clone(), i, a, numeric);
                }
            }
        }
        println!("eps {eps:.0e}: worst rel {:.3e} at {}[{}]: analytic {:.6e} numeric {:.6e}", worst.0, worst.1, worst.2, worst.3, worst.4);
    }
}
