mod common;

use common::{core_fixtures, ffgo, ok, Tripwire};

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn cut_drops_leading_frames() {
    let ws = tempfile::tempdir().unwrap();
    common::write_source_clip(&ws.path().join("raw"), 81);
    let out = ok(ws.path(), &["--json", "cut", "--in", "raw", "--fc", "4", "--out", "clean"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["input_frames"], 81);
    assert_eq!(v["output_frames"], 77);
    for i in 0..77 {
        let a = std::fs::read(ws.path().join(format!("raw/frame_{:05}.png", i + 4))).unwrap();
        let b = std::fs::read(ws.path().join(format!("clean/frame_{i:05}.png"))).unwrap();
        let (a, b) = (image::load_from_memory(&a).unwrap(), image::load_from_memory(&b).unwrap());
        assert_eq!(a.to_rgb8(), b.to_rgb8(), "frame {i}");
    }
    assert!(!ws.path().join("clean/frame_00077.png").exists());
}

#[test]
fn cut_rejects_too_short_input_and_same_dir() {
    let ws = tempfile::tempdir().unwrap();
    common::write_source_clip(&ws.path().join("raw"), 3);
    assert_eq!(code(&ffgo(ws.path(), &["cut", "--in", "raw", "--fc", "4", "--out", "clean"])), 1);
    assert_eq!(code(&ffgo(ws.path(), &["cut", "--in", "raw", "--out", "raw"])), 1);
}

#[test]
fn exit_codes() {
    let ws = tempfile::tempdir().unwrap();
    // usage error
    assert_eq!(code(&ffgo(ws.path(), &["cut", "--bogus"])), 1);
    assert_eq!(code(&ffgo(ws.path(), &["nonsense"])), 1);
    // help is not an error
    assert_eq!(code(&ffgo(ws.path(), &["--help"])), 0);
    // missing input file
    let out = ffgo(ws.path(), &["cut", "--in", "missing", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    // workspace that does not exist
    let out = std::process::Command::new(common::bin())
        .args(["--workspace", "/definitely/not/here", "lora", "savings", "--d", "4", "--k", "4", "--r", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_config_is_a_validation_error() {
    let ws = tempfile::tempdir().unwrap();
    std::fs::write(ws.path().join("ffgo.json"), r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(code(&ffgo(ws.path(), &["lora", "savings", "--d", "4", "--k", "4", "--r", "1"])), 1);
}

#[test]
fn dataset_stats_on_fixture() {
    let ws = tempfile::tempdir().unwrap();
    let manifest = core_fixtures().join("manifest_50.jsonl");
    let m = manifest.to_str().unwrap();
    let text = ok(ws.path(), &["dataset", "stats", "--manifest", m]);
    assert!(text.contains("human_object           30   60.0%"), "{text}");
    assert!(text.contains("robot_manipulation      3    6.0%"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&ok(ws.path(), &["--json", "dataset", "stats", "--manifest", m])).unwrap();
    assert_eq!(json["percent"]["human_human"], 14.0);
    assert_eq!(json["percent"]["element_insertion"], 20.0);
    assert_eq!(json["total"], 50);
}

#[test]
fn dataset_add_rejects_with_machine_readable_report() {
    let ws = tempfile::tempdir().unwrap();
    image::RgbImage::new(640, 360).save(ws.path().join("small.png")).unwrap();
    let out = ffgo(
        ws.path(),
        &[
            "--json", "dataset", "add", "--manifest", "m.jsonl", "--composite", "small.png", "--caption", "x",
            "--category", "human_object", "--source-video", "nowhere",
        ],
    );
    assert_eq!(code(&out), 1);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let fields: Vec<&str> = v["violations"].as_array().unwrap().iter().map(|x| x["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"composite_path"));
    assert!(fields.contains(&"source_video"));
    assert_eq!(code(&ffgo(ws.path(), &["dataset", "add", "--manifest", "m.jsonl", "--composite", "small.png", "--caption", "x", "--category", "cats", "--source-video", "v"])), 1);
}

#[test]
fn emit_config_requires_alpha() {
    let ws = tempfile::tempdir().unwrap();
    let p = ws.path();
    image::RgbImage::new(1280, 720).save(p.join("c.png")).unwrap();
    common::write_source_clip(&p.join("clip"), 81);
    ok(p, &["dataset", "add", "--manifest", "m.jsonl", "--composite", "c.png", "--caption", "A cat.", "--category", "element_insertion", "--source-video", "clip"]);
    let out = ffgo(p, &["dataset", "emit-config", "--manifest", "m.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    ok(p, &["dataset", "emit-config", "--manifest", "m.jsonl", "--set", "alpha=1.0", "--out", "t.json"]);
    let golden = std::fs::read_to_string(core_fixtures().join("train_config_golden.json")).unwrap();
    assert_eq!(std::fs::read_to_string(p.join("t.json")).unwrap(), golden);
}

#[test]
fn lora_commands() {
    let ws = tempfile::tempdir().unwrap();
    let p = ws.path();
    let s: serde_json::Value =
        serde_json::from_str(&ok(p, &["--json", "lora", "savings", "--d", "5120", "--k", "5120", "--r", "128"])).unwrap();
    assert_eq!(s["lora_params"], 1_310_720);
    assert_eq!(s["full_params"], 26_214_400);
    assert_eq!(s["ratio"], 0.05);
    assert_eq!(code(&ffgo(p, &["lora", "savings", "--d", "4", "--k", "4", "--r", "5"])), 1);

    ok(p, &["lora", "init", "--d", "16", "--k", "12", "--r", "3", "--alpha", "0.5", "--seed", "3", "--out", "a.lora"]);
    let a = ffgo_core::lora::load_adapter(&p.join("a.lora")).unwrap();
    assert_eq!((a.target_shape(), a.rank(), a.alpha()), ((16, 12), 3, 0.5));
    // Fresh adapters start with B = 0, so merging is the identity.
    let w = ffgo_core::lora::random_matrix(16, 12, 9);
    ffgo_core::lora::save_weight(&w, &p.join("w.bin")).unwrap();
    ok(p, &["lora", "merge", "--weight", "w.bin", "--adapter", "a.lora", "--out", "m.bin"]);
    assert_eq!(ffgo_core::lora::load_weight(&p.join("m.bin")).unwrap(), w);

    let trained = ffgo_core::lora::random_adapter(16, 12, 3, 0.5, 4).unwrap();
    ffgo_core::lora::save_adapter(&trained, &p.join("t.lora")).unwrap();
    ok(p, &["lora", "merge", "--weight", "w.bin", "--adapter", "t.lora", "--out", "m2.bin"]);
    ok(p, &["lora", "unmerge", "--weight", "m2.bin", "--adapter", "t.lora", "--out", "back.bin"]);
    let back = ffgo_core::lora::load_weight(&p.join("back.bin")).unwrap();
    assert!(back.sub(&w).unwrap().max_abs() <= 1e-9);

    let g: serde_json::Value = serde_json::from_str(&ok(p, &["--json", "lora", "check-grad", "--instances", "20", "--seed", "1"])).unwrap();
    assert_eq!(g["passed"], true);
    assert!(g["max_rel_error"].as_f64().unwrap() <= 1e-5);
    // Mismatched shapes are a validation failure.
    let other = ffgo_core::lora::random_adapter(5, 5, 1, 1.0, 1).unwrap();
    ffgo_core::lora::save_adapter(&other, &p.join("o.lora")).unwrap();
    assert_eq!(code(&ffgo(p, &["lora", "merge", "--weight", "w.bin", "--adapter", "o.lora", "--out", "x.bin"])), 1);
}

#[test]
fn generate_rejects_unknown_backend_and_bad_frame_count() {
    let ws = tempfile::tempdir().unwrap();
    let p = ws.path();
    image::RgbImage::new(64, 36).save(p.join("c.png")).unwrap();
    std::fs::write(p.join("cap.txt"), "A cat.\n").unwrap();
    assert_eq!(code(&ffgo(p, &["generate", "--composite", "c.png", "--caption", "cap.txt", "--backend", "nope", "--out", "g"])), 1);
    assert_eq!(code(&ffgo(p, &["generate", "--composite", "c.png", "--caption", "cap.txt", "--frames", "4", "--out", "g"])), 1);
    std::fs::write(p.join("pre.txt"), format!("{} already\n", ffgo_core::dataset::TRANSITION_PHRASE)).unwrap();
    assert_eq!(code(&ffgo(p, &["generate", "--composite", "c.png", "--caption", "pre.txt", "--out", "g"])), 1);
}

#[test]
fn generate_with_small_resize_and_extra_cut() {
    let ws = tempfile::tempdir().unwrap();
    let p = ws.path();
    image::RgbImage::from_pixel(64, 36, image::Rgb([9, 9, 9])).save(p.join("c.png")).unwrap();
    std::fs::write(p.join("cap.txt"), "A cat.\n").unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(
        p,
        &[
            "--json", "generate", "--composite", "c.png", "--caption", "cap.txt", "--frames", "21", "--extra-cut", "2",
            "--resize", "64x36", "--seed", "5", "--out", "g",
        ],
    ))
    .unwrap();
    assert_eq!(v["raw_frames"], 21);
    assert_eq!(v["clean_frames"], 15);
    assert_eq!(v["cut"], 6);
    let prompt = std::fs::read_to_string(p.join("g/prompt.txt")).unwrap();
    assert!(ffgo_core::dataset::has_transition_prefix(prompt.trim()));
    let f = image::open(p.join("g/frame_00000.png")).unwrap();
    assert_eq!((f.width(), f.height()), (64, 36));
}

#[test]
fn mock_pipeline_is_offline_and_deterministic() {
    let wire = Tripwire::new();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for ws in [a.path(), b.path()] {
        wire.write_config(ws);
        common::run_mock_pipeline(ws);
    }
    assert_eq!(wire.connections(), 0);
    let (da, db) = (common::digest_tree(a.path()), common::digest_tree(b.path()));
    assert_eq!(da, db);
    assert_eq!(da.keys().filter(|k| k.starts_with("gen/frame_")).count(), 77);
    assert_eq!(da.keys().filter(|k| k.starts_with("cut/frame_")).count(), 77);
    // cut of the raw clip equals the clean clip generate wrote.
    for i in 0..77 {
        let k = format!("frame_{i:05}.png");
        assert_eq!(da[&format!("gen/{k}")], da[&format!("cut/{k}")]);
    }
    let caps = std::fs::read_to_string(a.path().join("captions.jsonl")).unwrap();
    for line in caps.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(ffgo_core::dataset::has_transition_prefix(v["caption"].as_str().unwrap()));
    }
}

#[test]
fn remote_adapter_is_used_when_requested() {
    // Sanity check for the tripwire itself: a non-mock run does connect.
    let wire = Tripwire::new();
    let ws = tempfile::tempdir().unwrap();
    wire.write_config(ws.path());
    image::RgbImage::new(8, 8).save(ws.path().join("i.png")).unwrap();
    let mut cmd = std::process::Command::new(common::bin());
    cmd.current_dir(ws.path())
        .args(["--workspace", ".", "curate", "remove", "--image", "i.png", "--names", "x", "--out", "o.png", "--adapter", "remote"]);
    let child = cmd.spawn().unwrap();
    // The listener never answers; give the client time to connect, then stop it.
    std::thread::sleep(std::time::Duration::from_millis(500));
    let mut child = child;
    let _ = child.kill();
    let _ = child.wait();
    assert!(wire.connections() >= 1);
}
