//! End-to-end tests of the `macp` binary: exit codes, determinism, and the
//! artifacts each subcommand leaves behind.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use macp::scenario::ScenarioConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_macp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        bounds: (40.0, 30.0),
        objects: (4, 8),
        agents: (2, 3),
        ..Default::default()
    }
}

/// A tiny three-split dataset tree; returns (dir, config path).
fn gen_tiny_dataset(root: &Path, seed: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": seed,
        "splits": [
            {"name": "pretrain", "kind": "single", "n_frames": 4},
            {"name": "finetune", "kind": "cooperative", "n_frames": 3},
            {"name": "test", "kind": "cooperative", "n_frames": 3},
        ],
        "scenario": small_scenario(),
    });
    let cfg_path = root.join("gen.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = root.join("data");
    let r = run(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&r.stderr));
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                entries.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

#[test]
fn gen_data_writes_three_splits_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 7);
    for split in ["pretrain", "finetune", "test"] {
        assert!(data.join(split).join("manifest.json").exists(), "{split} missing");
    }
    // Same config, second directory: identical bytes.
    let cfg_path = tmp.path().join("gen.json");
    let out2 = tmp.path().join("data2");
    let r = run(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert!(r.status.success());
    assert_eq!(dir_bytes(&data), dir_bytes(&out2));
}

#[test]
fn gen_data_missing_field_exits_2_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("bad.json");
    std::fs::write(&cfg_path, br#"{"splits": []}"#).unwrap();
    let r = run(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("seed"), "error should name the missing field");
}

#[test]
fn gen_data_unwritable_path_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({"seed": 1, "splits": [], "scenario": small_scenario()});
    let cfg_path = tmp.path().join("gen.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let r = run(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", "/proc/nope/denied"]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn pretrain_is_deterministic_and_logs_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 11);
    let pre = data.join("pretrain");
    let ck1 = tmp.path().join("a.ck");
    let ck2 = tmp.path().join("b.ck");
    for ck in [&ck1, &ck2] {
        let r = run(&[
            "pretrain",
            "--data",
            pre.to_str().unwrap(),
            "--epochs",
            "1",
            "--lr",
            "1e-3",
            "--seed",
            "5",
            "--out",
            ck.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "pretrain failed: {}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap(), "same seed, same bytes");
    let loss_csv = std::fs::read_to_string(tmp.path().join("a.ck.loss.csv")).unwrap();
    assert!(loss_csv.starts_with("epoch,mean_loss,lr"));
    assert_eq!(loss_csv.lines().count(), 2);
    assert!(tmp.path().join("a.ck.config.json").exists(), "resolved config copy");
}

#[test]
fn pretrain_rejects_cooperative_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 13);
    let r = run(&[
        "pretrain",
        "--data",
        data.join("finetune").to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        tmp.path().join("x.ck").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn pretrain_divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "seed": 3,
        "splits": [{"name": "pretrain", "kind": "single", "n_frames": 4}],
        "scenario": small_scenario(),
    });
    let cfg_path = tmp.path().join("gen.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let data = tmp.path().join("d");
    assert!(run(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", data.to_str().unwrap()]).status.success());
    let r = run(&[
        "pretrain",
        "--data",
        data.join("pretrain").to_str().unwrap(),
        "--epochs",
        "10",
        "--lr",
        "1e14",
        "--out",
        tmp.path().join("x.ck").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&r.stderr));
}

fn quick_pretrain(tmp: &Path, data: &Path) -> PathBuf {
    let ck = tmp.join("pre.ck");
    let r = run(&[
        "pretrain",
        "--data",
        data.join("pretrain").to_str().unwrap(),
        "--epochs",
        "1",
        "--lr",
        "1e-3",
        "--seed",
        "5",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "pretrain failed: {}", String::from_utf8_lossy(&r.stderr));
    ck
}

#[test]
fn finetune_freezes_the_backbone_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 17);
    let pre = quick_pretrain(tmp.path(), &data);
    let ck = tmp.path().join("macp.ck");
    let r = run(&[
        "finetune",
        "--variant",
        "macp",
        "--pretrained",
        pre.to_str().unwrap(),
        "--data",
        data.join("finetune").to_str().unwrap(),
        "--factor",
        "4",
        "--epochs",
        "1",
        "--seed",
        "9",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "finetune failed: {}", String::from_utf8_lossy(&r.stderr));
    assert!(tmp.path().join("macp.ck.report.json").exists());
    assert!(tmp.path().join("macp.ck.report.csv").exists());

    // Frozen pre-trained weights are bitwise identical to the checkpoint.
    let base = macp::autodiff::ParamStore::load(&pre).unwrap();
    let tuned = macp::autodiff::ParamStore::load(&ck).unwrap();
    let mut checked = 0;
    for (_, p) in tuned.iter() {
        if p.frozen {
            let src = base.id(&p.name).expect("frozen params come from the checkpoint");
            let a: Vec<u64> = base.get(src).value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{} changed", p.name);
            checked += 1;
        }
    }
    assert!(checked > 0);

    // head-only trains strictly fewer parameters than macp.
    let ck_head = tmp.path().join("head.ck");
    let r = run(&[
        "finetune",
        "--variant",
        "head",
        "--pretrained",
        pre.to_str().unwrap(),
        "--data",
        data.join("finetune").to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        ck_head.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let head = macp::autodiff::ParamStore::load(&ck_head).unwrap();
    let trainable = |s: &macp::autodiff::ParamStore| s.count_elements().1;
    assert!(trainable(&head) < trainable(&tuned));
}

#[test]
fn finetune_rejects_bad_variant_and_factor() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 19);
    let pre = quick_pretrain(tmp.path(), &data);
    let ft_dir = data.join("finetune");
    let out_ck = tmp.path().join("x.ck");
    let common = [
        "--pretrained",
        pre.to_str().unwrap(),
        "--data",
        ft_dir.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        out_ck.to_str().unwrap(),
    ];
    let mut args = vec!["finetune", "--variant", "lora"];
    args.extend_from_slice(&common);
    assert_eq!(run(&args).status.code(), Some(2));
    let mut args = vec!["finetune", "--variant", "macp", "--factor", "5"];
    args.extend_from_slice(&common);
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn eval_missing_checkpoint_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 23);
    let r = run(&[
        "eval",
        "--checkpoint",
        tmp.path().join("absent.ck").to_str().unwrap(),
        "--data",
        data.join("test").to_str().unwrap(),
        "--mode",
        "no_fusion",
        "--out",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(5));
}

#[test]
fn eval_writes_report_json_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 29);
    let pre = quick_pretrain(tmp.path(), &data);
    let out = tmp.path().join("report.json");
    let r = run(&[
        "eval",
        "--checkpoint",
        pre.to_str().unwrap(),
        "--data",
        data.join("test").to_str().unwrap(),
        "--mode",
        "no_fusion",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "eval failed: {}", String::from_utf8_lossy(&r.stderr));
    let report: macp::eval::EvalReport = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(report.mode, "no_fusion");
    assert!(report.entries.iter().all(|e| (0.0..=1.0).contains(&e.ap)));
    let csv = std::fs::read_to_string(tmp.path().join("report.json.csv")).unwrap();
    assert!(csv.starts_with("mode,iou,bucket,ap,am_mb,params_total,params_trainable"));
}

#[test]
fn sweep_cavs_emits_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 31);
    let pre = quick_pretrain(tmp.path(), &data);
    // Reuse the pretrained model as the "finetuned" artifact after running
    // a one-epoch adaptation.
    let ck = tmp.path().join("macp.ck");
    let r = run(&[
        "finetune",
        "--variant",
        "macp",
        "--pretrained",
        pre.to_str().unwrap(),
        "--data",
        data.join("finetune").to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let sweep_cfg = serde_json::json!({
        "pretrained": pre,
        "finetuned": ck,
        "data": data.join("test"),
        "max_agents": [1, 2, 3],
    });
    let cfg_path = tmp.path().join("sweep.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&sweep_cfg).unwrap()).unwrap();
    let out = tmp.path().join("cavs.csv");
    let r = run(&["sweep", "--kind", "cavs", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "sweep failed: {}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus three rows:\n{csv}");
    assert!(csv.starts_with("max_agents,ap50,ap70,am_mb"));

    // Missing artifact: point at a nonexistent finetuned checkpoint.
    let bad = serde_json::json!({
        "pretrained": pre,
        "finetuned": tmp.path().join("gone.ck"),
        "data": data.join("test"),
    });
    std::fs::write(&cfg_path, serde_json::to_vec(&bad).unwrap()).unwrap();
    let r = run(&["sweep", "--kind", "cavs", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(5));
}

#[test]
fn diag_shift_needs_cooperative_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 37);
    let out = tmp.path().join("hist.csv");
    let r = run(&[
        "diag-shift",
        "--data",
        data.join("test").to_str().unwrap(),
        "--bins",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "diag-shift failed: {}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("agent_role,bin_lo,bin_hi,count"));
    // Uniform bin edges.
    let rows: Vec<Vec<String>> =
        csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let widths: Vec<f64> =
        rows.iter().map(|r| r[2].parse::<f64>().unwrap() - r[1].parse::<f64>().unwrap()).collect();
    for w in &widths {
        assert!((w - widths[0]).abs() < 1e-9);
    }
    // Single-agent data is rejected.
    let r = run(&[
        "diag-shift",
        "--data",
        data.join("pretrain").to_str().unwrap(),
        "--out",
        tmp.path().join("h2.csv").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn sweep_compression_payload_halves_per_doubled_factor() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 41);
    let pre = quick_pretrain(tmp.path(), &data);
    let sweep_cfg = serde_json::json!({
        "pretrained": pre,
        "data": data.join("test"),
        "train_data": data.join("finetune"),
        "epochs": 1,
        "factors": [1, 2, 4, 8, 16, 32],
    });
    let cfg_path = tmp.path().join("sweep.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&sweep_cfg).unwrap()).unwrap();
    let out = tmp.path().join("compression.csv");
    let r = run(&["sweep", "--kind", "compression", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "sweep failed: {}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 6, "six factor rows:\n{csv}");
    // Payload bytes halve exactly per doubled factor; AM tracks within 1%.
    for i in 1..rows.len() {
        let prev_payload: u64 = rows[i - 1][2].parse().unwrap();
        let payload: u64 = rows[i][2].parse().unwrap();
        assert_eq!(prev_payload, payload * 2, "row {i}");
        let prev_am: f64 = rows[i - 1][5].parse().unwrap();
        let am: f64 = rows[i][5].parse().unwrap();
        assert!((prev_am / am - 2.0).abs() < 0.02, "AM should ~halve: {prev_am} -> {am}");
    }
}

#[test]
fn sweep_robustness_reports_std_for_both_models() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(tmp.path(), 43);
    let pre = quick_pretrain(tmp.path(), &data);
    let ck = tmp.path().join("macp.ck");
    let r = run(&[
        "finetune",
        "--variant",
        "macp",
        "--pretrained",
        pre.to_str().unwrap(),
        "--data",
        data.join("finetune").to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let sweep_cfg = serde_json::json!({
        "pretrained": pre,
        "finetuned": ck,
        "data": data.join("test"),
        "mask_positions": [-8.0, 8.0],
        "mask_half_extent": 6.0,
    });
    let cfg_path = tmp.path().join("rb.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&sweep_cfg).unwrap()).unwrap();
    let out = tmp.path().join("robustness.csv");
    let r = run(&["sweep", "--kind", "robustness", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "sweep failed: {}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("mask_x,mask_y,ap50_single,ap50_cooperative"));
    // 2x2 positions plus mean and std summary rows.
    assert_eq!(csv.lines().count(), 1 + 4 + 2, "{csv}");
    let std_row = csv.lines().last().unwrap();
    assert!(std_row.starts_with("std,"));
    let cols: Vec<&str> = std_row.split(',').collect();
    assert_eq!(cols.len(), 4);
    cols[2].parse::<f64>().unwrap();
    cols[3].parse::<f64>().unwrap();
}
