mod common;

use std::fs;

use serde_json::{json, Value};
use stas_core::ActivationTensor;
use tempfile::tempdir;

use common::*;

#[test]
fn usage_errors_are_json_with_exit_2() {
    let (code, e) = err(stas().arg("frobnicate"));
    assert_eq!(code, 2);
    assert_eq!(e["error"], "usage");
    assert_eq!(e["kind"], "input");
    assert_eq!(e["exit_code"], 2);
}

#[test]
fn help_goes_to_stdout_with_success() {
    let out = ok(stas().arg("--help"));
    assert!(out.contains("profile") && out.contains("ablate"));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempdir().unwrap();
    let d = dir.path();

    let bad = d.join("bad.json");
    fs::write(&bad, "{\"sampler\": {\"stepz\": 3}}").unwrap();
    let (code, e) = err(stas()
        .args(["generate", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "config"));

    let (code, e) = err(stas()
        .args(["generate", "--preset", "nope"])
        .arg("--out")
        .arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "unknown_preset"));

    let (code, e) = err(stas()
        .args(["generate", "--steps", "2"])
        .env("STAS_SEED", "abc")
        .arg("--out")
        .arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "env_seed"));

    let junk = d.join("junk.stas");
    fs::write(&junk, b"NOPE\x01\x00").unwrap();
    let (code, e) = err(stas().arg("profile").arg(&junk).arg("--out").arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "trace_bad_magic"));

    let (code, e) = err(stas()
        .arg("profile")
        .arg(d.join("missing.stas"))
        .arg("--out")
        .arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "read_file"));

    let cfg = write_json(
        d.join("window.json"),
        &json!({"sampler": {"steps": 4}, "steering": {"steps": 9}}),
    );
    let (code, e) = err(stas()
        .arg("generate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "sample"));

    let cfg = write_json(d.join("grid.json"), &json!({"ablate": {"tokens": []}}));
    let (code, e) = err(stas()
        .arg("ablate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "empty_grid"));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let (code, e) = err(stas().args(["generate", "--steps", "2", "--out"]).arg(&blocker));
    assert_eq!(code, 3);
    assert_eq!(e["kind"], "runtime");
    assert_eq!(e["error"], "write");
}

#[test]
fn inconsistent_trace_metadata_is_rejected() {
    let dir = tempdir().unwrap();
    let a = activation(0, 0, 2, 4, ActivationTensor::from_fn(8, 6, |_, _| 1.0));
    let b = activation(0, 1, 2, 4, ActivationTensor::from_fn(8, 7, |_, _| 1.0));
    let path = write_trace(dir.path().join("t.stas"), &[a, b]);
    let (code, e) = err(stas().arg("profile").arg(&path).arg("--out").arg(dir.path().join("o")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "inconsistent_metadata"));
}

fn manifest_seed(args: &[&str], env: Option<&str>, config: Option<&Value>) -> u64 {
    let dir = tempdir().unwrap();
    let mut cmd = stas();
    cmd.args(["generate", "--steps", "1"])
        .args(args)
        .arg("--out")
        .arg(dir.path().join("o"));
    if let Some(v) = env {
        cmd.env("STAS_SEED", v);
    }
    if let Some(c) = config {
        cmd.arg("--config").arg(write_json(dir.path().join("c.json"), c));
    }
    ok(&mut cmd);
    json(dir.path().join("o/manifest.json"))["seed"].as_u64().unwrap()
}

#[test]
fn seed_precedence_flag_env_file_default() {
    let file = json!({"seed": 5});
    assert_eq!(manifest_seed(&[], None, None), 0);
    assert_eq!(manifest_seed(&[], None, Some(&file)), 5);
    assert_eq!(manifest_seed(&[], Some("3"), Some(&file)), 3);
    assert_eq!(manifest_seed(&["--seed", "7"], Some("3"), Some(&file)), 7);
}

#[test]
fn prompt_seeds_follow_the_base_seed() {
    let dir = tempdir().unwrap();
    ok(stas()
        .args(["generate", "--steps", "1", "--prompts", "3", "--seed", "40", "--out"])
        .arg(dir.path()));
    let seeds: Vec<u64> = json(dir.path().join("generate_summary.json"))
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["noise_seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, [40, 41, 42]);
}

#[test]
fn manifest_reproduces_a_run() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let cfg = write_json(
        d.join("c.json"),
        &json!({"seed": 11, "sampler": {"steps": 6}, "steering": {"steps": 3}, "run": {"prompts": 2, "capture_blocks": [2]}}),
    );
    ok(stas()
        .arg("generate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.join("a")));
    ok(stas()
        .arg("generate")
        .arg("--config")
        .arg(d.join("a/manifest.json"))
        .arg("--out")
        .arg(d.join("b")));
    assert_eq!(
        outputs_except_manifest(&d.join("a")),
        outputs_except_manifest(&d.join("b"))
    );
    let m = json(d.join("b/manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 11);
    assert_eq!(
        m["outputs"],
        json!(["latent.stas", "traces.stas", "generate_summary.json"])
    );
}

#[test]
fn oracle_model_reaches_its_target() {
    let dir = tempdir().unwrap();
    for steps in [1, 4, 50] {
        let cfg = write_json(dir.path().join("o.json"), &oracle_config(steps));
        let out = dir.path().join(format!("n{steps}"));
        ok(stas().arg("generate").arg("--config").arg(&cfg).arg("--out").arg(&out));
        let diff = json(out.join("generate_summary.json"))[0]["target_max_abs_diff"]
            .as_f64()
            .unwrap();
        assert!(diff <= 1e-5, "N={steps}: {diff}");
    }
}

#[test]
fn zero_steering_window_matches_unsteered() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let cfg = write_json(
        d.join("k0.json"),
        &json!({"sampler": {"steps": 8}, "steering": {"steps": 0}}),
    );
    ok(stas()
        .arg("generate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.join("k0")));
    ok(stas().args(["generate", "--steps", "8", "--out"]).arg(d.join("off")));
    ok(stas()
        .arg("generate")
        .arg("--config")
        .arg(&cfg)
        .arg("--no-steer")
        .arg("--out")
        .arg(d.join("flag")));
    let latent = |n: &str| fs::read(d.join(n).join("latent.stas")).unwrap();
    assert_eq!(latent("k0"), latent("off"));
    assert_eq!(latent("flag"), latent("off"));

    let cfg = write_json(
        d.join("k4.json"),
        &json!({"sampler": {"steps": 8}, "steering": {"steps": 4}}),
    );
    ok(stas()
        .arg("generate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.join("k4")));
    assert_ne!(latent("k4"), latent("off"));
}

#[test]
fn default_model_profiles_one_ma_and_one_weak_dim() {
    let dir = tempdir().unwrap();
    ok(stas()
        .args(["profile", "--steps", "4", "--medians", "--out"])
        .arg(dir.path()));
    let report = json(dir.path().join("ma_report.json"));
    let block2 = report.as_array().unwrap().iter().find(|b| b["block"] == 2).unwrap();
    let class_of = |d: usize| block2["overall"]["entries"][d]["class"].as_str().unwrap().to_string();
    assert_eq!(class_of(5), "MA");
    assert_eq!(class_of(17), "weak_MA");
    // Interior tokens carry the 400 bias, so the median sits near it.
    let ptm = block2["overall"]["entries"][5]["peak_to_median"].as_f64().unwrap();
    assert!((4.5..5.5).contains(&ptm), "{ptm}");
    let positional = json(dir.path().join("positional.json"));
    let p2 = positional.as_array().unwrap().iter().find(|b| b["block"] == 2).unwrap();
    assert_eq!(p2["dims"], json!([5]));
}

#[test]
fn split_trace_files_profile_like_one() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    ok(stas()
        .args([
            "generate",
            "--steps",
            "6",
            "--prompts",
            "2",
            "--capture",
            "1,2",
            "--out",
        ])
        .arg(d.join("g")));
    let records = read_trace(d.join("g/traces.stas"));
    let (head, tail) = records.split_at(records.len() / 3);
    let a = write_trace(d.join("a.stas"), head);
    let b = write_trace(d.join("b.stas"), tail);
    ok(stas()
        .arg("profile")
        .arg(d.join("g/traces.stas"))
        .arg("--out")
        .arg(d.join("one")));
    ok(stas().arg("profile").arg(&a).arg(&b).arg("--out").arg(d.join("two")));
    assert_eq!(
        outputs_except_manifest(&d.join("one")),
        outputs_except_manifest(&d.join("two"))
    );
}

#[test]
fn planted_59x_spike_is_classified_ma() {
    let dir = tempdir().unwrap();
    let mut data = ActivationTensor::from_fn(16, 64, |r, c| if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
    data.set(3, 7, 743.4);
    let path = write_trace(dir.path().join("s.stas"), &[activation(0, 0, 4, 4, data)]);
    ok(stas().arg("profile").arg(&path).arg("--out").arg(dir.path().join("o")));
    let e = &json(dir.path().join("o/ma_report.json"))[0]["overall"]["entries"][7];
    assert_eq!(e["class"], "MA");
    assert!((e["peak_to_mean"].as_f64().unwrap() - 59.0).abs() < 1e-3, "{e}");
}

fn csv_rows(path: impl AsRef<std::path::Path>) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn ablate_boundary_coverage_grows_with_p_and_empty_sets_match_vanilla() {
    let dir = tempdir().unwrap();
    let cfg = write_json(
        dir.path().join("c.json"),
        &json!({
            "sampler": {"steps": 4},
            "ablate": {"dims": ["ma"], "tokens": ["boundary", "none"], "p": [0.0, 4.0, 8.0, 20.0, 50.0], "k": [2]}
        }),
    );
    ok(stas()
        .arg("ablate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o")));
    let rows = csv_rows(dir.path().join("o/ablate.csv"));
    // variant,layer,dims,dim_list,tokens,p,k,rule,alpha,omega,coverage,temporal_smoothness
    assert_eq!(rows[0][0], "vanilla");
    let vanilla = &rows[0][11];
    let boundary: Vec<(f64, usize)> = rows
        .iter()
        .filter(|r| r[4] == "boundary")
        .map(|r| (r[5].parse().unwrap(), r[10].parse().unwrap()))
        .collect();
    assert_eq!(boundary.len(), 5);
    assert!(
        boundary.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1),
        "{boundary:?}"
    );
    assert_eq!(boundary[0].1, 0);
    assert_eq!(boundary[4].1, 64);
    for r in rows.iter().filter(|r| r[10] == "0") {
        assert_eq!(&r[11], vanilla, "{r:?}");
    }
    assert!(rows
        .iter()
        .any(|r| r[4] == "boundary" && r[10] != "0" && &r[11] != vanilla));
    let timing = csv_rows(dir.path().join("o/ablate_timing.csv"));
    assert_eq!(timing.len(), rows.len());
}

fn dipped_video(frames: usize, dim: usize, r: usize, phase: f32) -> ActivationTensor {
    ActivationTensor::from_fn(frames, dim, |f, c| {
        let chunk = if f == 0 { 0 } else { (f - 1) / r + 1 };
        (c as f32 + 1.0) * (1.0 + 0.01 * f as f32) + phase + if c == chunk % dim { 4.0 } else { 0.0 }
    })
}

#[test]
fn consistency_reports_each_video_and_pools_uniformly() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let a = write_trace(
        d.join("a.stas"),
        &[
            embeddings("vid/a", Some(4), dipped_video(9, 6, 4, 0.0)),
            embeddings("vid b", Some(4), dipped_video(13, 6, 4, 1.0)),
        ],
    );
    let b = write_trace(
        d.join("b.stas"),
        &[embeddings("c", Some(4), dipped_video(5, 6, 4, 2.0))],
    );
    ok(stas().arg("consistency").arg(&a).arg(&b).arg("--out").arg(d.join("o")));
    let o = d.join("o");
    let mut cross = Vec::new();
    for (id, frames) in [("vid_a", 9), ("vid_b", 13), ("c", 5)] {
        let rep = json(o.join(format!("consistency_{id}.json")));
        assert_eq!(rep["frame_count"], frames);
        assert_eq!(rep["cross_chunk_pairs"].as_u64().unwrap() as usize, (frames - 1) / 4);
        let rows = csv_rows(o.join(format!("consistency_{id}.csv")));
        assert_eq!(rows.len(), frames - 1);
        assert_eq!(rows[0][3], "cross_chunk");
        assert_eq!(rows[1][3], "within_chunk");
        cross.push(rep["cross_chunk_mean"].as_f64().unwrap());
        assert!(rep["cross_chunk_mean"].as_f64() < rep["within_chunk_mean"].as_f64());
    }
    let pooled = json(o.join("pooled.json"));
    assert_eq!(pooled["videos"], 3);
    let expected = cross.iter().sum::<f64>() / 3.0;
    assert!((pooled["cross_chunk_mean"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn consistency_topology_sources() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let path = write_trace(d.join("e.stas"), &[embeddings("v", None, dipped_video(9, 4, 4, 0.0))]);
    let (code, e) = err(stas().arg("consistency").arg(&path).arg("--out").arg(d.join("x")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "missing_topology"));

    ok(stas()
        .arg("consistency")
        .arg(&path)
        .args(["--r-temp", "4", "--out"])
        .arg(d.join("flag")));
    assert_eq!(json(d.join("flag/consistency_v.json"))["cross_chunk_pairs"], 2);
    let cfg = write_json(d.join("c.json"), &json!({"consistency": {"r_temp": 2}}));
    ok(stas()
        .arg("consistency")
        .arg(&path)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(d.join("cfg")));
    assert_eq!(json(d.join("cfg/consistency_v.json"))["cross_chunk_pairs"], 4);

    let (code, e) = err(stas()
        .arg("consistency")
        .arg(&path)
        .args(["--r-temp", "3", "--out"])
        .arg(d.join("y")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "topology"));

    let dup = write_trace(
        d.join("dup.stas"),
        &[
            embeddings("v", Some(4), dipped_video(5, 4, 4, 0.0)),
            embeddings("v", Some(4), dipped_video(5, 4, 4, 0.0)),
        ],
    );
    let (code, e) = err(stas().arg("consistency").arg(&dup).arg("--out").arg(d.join("z")));
    assert_eq!((code, e["error"].as_str().unwrap()), (2, "duplicate_video"));
}

#[test]
fn info_lists_presets_and_summarizes_files() {
    let dir = tempdir().unwrap();
    ok(stas()
        .args(["generate", "--steps", "2", "--capture", "3", "--out"])
        .arg(dir.path()));
    let out = ok(stas()
        .arg("info")
        .arg(dir.path().join("traces.stas"))
        .arg(dir.path().join("latent.stas")));
    let v: Value = serde_json::from_str(&out).unwrap();
    let names: Vec<&str> = v["presets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["wan2.1-1.3b", "wan2.2-5b", "cogvideox-5b"]);
    assert_eq!(v["files"][0]["kinds"]["activation"], 4);
    assert_eq!(v["files"][0]["blocks"], json!([3]));
    assert_eq!(v["files"][1]["kinds"]["latent"], 1);
}

#[test]
fn preset_sets_steering_hyperparameters() {
    let dir = tempdir().unwrap();
    ok(stas()
        .args(["generate", "--steps", "20", "--preset", "CogVideoX-5B", "--out"])
        .arg(dir.path()));
    let m = json(dir.path().join("manifest.json"));
    assert_eq!(m["config"]["sampler"]["cfg_scale"], 6.0);
    assert_eq!(m["config"]["steering"]["rule"]["alpha"].as_f64().unwrap() as f32, 1.2);
    assert_eq!(m["config"]["steering"]["steps"], 20);
}
