#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ffgo")
}

pub fn core_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Run `ffgo` with `--workspace ws` and the given arguments from `ws`.
pub fn ffgo(ws: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(ws)
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn ffgo")
}

pub fn ok(ws: &Path, args: &[&str]) -> String {
    let out = ffgo(ws, args);
    assert!(
        out.status.success(),
        "ffgo {args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// `n` frames of a small moving scene with a dark block on a light field.
pub fn write_source_clip(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let img = RgbImage::from_fn(320, 180, |x, y| {
            let bx = 40 + i as u32;
            if (bx..bx + 60).contains(&x) && (60..140).contains(&y) {
                Rgb([20, 40, 200])
            } else {
                Rgb([200, ((x + 3 * i as u32) % 256) as u8, 90])
            }
        });
        img.save(dir.join(format!("frame_{i:05}.png"))).unwrap();
    }
}

/// Listener that every configured remote endpoint points at. Nothing should
/// ever connect to it during a mock run.
pub struct Tripwire {
    listener: TcpListener,
}

impl Tripwire {
    pub fn new() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        Self { listener }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1", self.listener.local_addr().unwrap())
    }

    pub fn connections(&self) -> usize {
        let mut n = 0;
        while self.listener.accept().is_ok() {
            n += 1;
        }
        n
    }

    /// `ffgo.json` declaring a remote adapter and backend on the tripwire.
    pub fn write_config(&self, ws: &Path) {
        let cfg = serde_json::json!({
            "seed": 11,
            "adapters": [{
                "name": "remote",
                "base_url": self.url(),
                "auth_env_var": "FFGO_TRIPWIRE_KEY",
                "model_id": "m"
            }],
            "backends": [{"name": "remote", "endpoint": {"http": self.url()}}]
        });
        std::fs::write(ws.join("ffgo.json"), serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    }
}

/// curate -> compose -> caption -> dataset -> generate -> cut, all mocked.
pub fn run_mock_pipeline(ws: &Path) {
    write_source_clip(&ws.join("src"), 90);
    ok(ws, &["curate", "crop", "--in", "src", "--out", "clip"]);
    let first = "clip/frame_00000.png";
    ok(ws, &["curate", "extract", "--image", first, "--names", "person,blue box", "--out", "elems", "--mock"]);
    ok(ws, &["curate", "remove", "--image", first, "--names", "person,blue box", "--out", "bg.png", "--mock"]);
    let elems = ["--element", "elems/00_person.png", "--element", "elems/01_blue_box.png"];
    let mut compose = vec!["curate", "compose"];
    compose.extend(elems);
    compose.extend(["--background", "bg.png", "--out", "composite.png", "--emit-plan", "plan.json"]);
    ok(ws, &compose);
    let mut caption = vec!["curate", "caption"];
    caption.extend(elems);
    caption.extend(["--background", "bg.png", "--video", "clip", "--out", "caption.txt", "--mock"]);
    ok(ws, &caption);
    ok(
        ws,
        &[
            "dataset", "add", "--manifest", "data/manifest.jsonl", "--composite", "composite.png",
            "--caption-file", "caption.txt", "--category", "human_object", "--source-video", "clip",
            "--labels", "person,blue box",
        ],
    );
    ok(ws, &["dataset", "validate", "--manifest", "data/manifest.jsonl"]);
    ok(
        ws,
        &[
            "dataset", "emit-config", "--manifest", "data/manifest.jsonl", "--set", "alpha=1.0",
            "--out", "train.json", "--captions-out", "captions.jsonl",
        ],
    );
    ok(ws, &["generate", "--composite", "composite.png", "--caption", "caption.txt", "--backend", "mock", "--out", "gen", "--keep-raw"]);
    ok(ws, &["cut", "--in", "gen/raw", "--fc", "4", "--out", "cut"]);
}

/// sha256 of every file under `root`, keyed by relative path.
pub fn digest_tree(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
