//! Reports how much ground truth the ego cannot see under various
//! scenario densities (zero ego LiDAR hits = pure cooperation gain).
use macp::scenario::*;
fn main() {
    let base = ScenarioConfig::default();
    let edge = Some(((-52.0, -44.0), (-10.0, 10.0)));
    let configs = [
        ("cluster22", ScenarioConfig { agents: (3, 5), objects: (20, 32), ego_spawn: edge, partner_spread: Some(22.0), ..base.clone() }),
        ("cluster16", ScenarioConfig { agents: (3, 5), objects: (20, 32), ego_spawn: edge, partner_spread: Some(16.0), ..base.clone() }),
        ("clus_small", ScenarioConfig { agents: (3, 5), objects: (18, 30), bounds: (90.0, 50.0), ego_spawn: Some(((-40.0, -34.0), (-8.0, 8.0))), partner_spread: Some(20.0), ..base.clone() }),
        ("clus_center", ScenarioConfig { agents: (3, 5), objects: (20, 32), partner_spread: Some(20.0), ..base.clone() }),
    ];
    for (name, cfg) in configs {
        let mut total = 0usize;
        let mut zero_ego = 0usize;
        let mut weak_ego = 0usize;
        let mut frames_n = 0usize;
        for seed in 0..30u64 {
            let Ok(world) = gen_world(derive_seed(777, seed), &cfg) else { continue };
            // Per-object ego hit counts.
            let (_, ego_hits) = lidar_scan_with_hits(&world, 0, &cfg);
            let mut count = vec![0usize; world.objects.len()];
            for &h in &ego_hits {
                count[h] += 1;
            }
            // Any-agent visibility and in-range filter (the gt rule).
            let frame = frame_from_world(&world, &cfg);
            frames_n += 1;
            let ego_pose = world.agents[0];
            for gt in &frame.gts {
                total += 1;
                let (wx, wy) = ego_pose.local_to_world(gt.x, gt.y);
                // Find the world object matching this gt by position.
                let idx = world
                    .objects
                    .iter()
                    .position(|o| (o.x - wx).hypot(o.y - wy) < 0.01)
                    .expect("gt maps back to a world object");
                if count[idx] == 0 {
                    zero_ego += 1;
                } else if count[idx] <= 2 {
                    weak_ego += 1;
                }
            }
        }
        println!(
            "{name:11} gts/frame {:4.1}  zero-ego {:4.1}%  weak(<=2) {:4.1}%",
            total as f64 / frames_n as f64,
            100.0 * zero_ego as f64 / total as f64,
            100.0 * weak_ego as f64 / total as f64
        );
    }
}
