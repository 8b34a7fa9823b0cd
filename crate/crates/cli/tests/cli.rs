use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        write_face(&ws.path("face.ppm"));
        std::fs::write(ws.path("landmarks.json"), landmarks(true)).unwrap();
        std::fs::write(ws.path("partial.json"), landmarks(false)).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> (i32, Value) {
        let out = self.raw(&[&["--json", "--seed", "11"], args].concat());
        let code = out.status.code().unwrap();
        let body = serde_json::from_slice(&out.stdout)
            .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)));
        (code, body)
    }

    fn raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_voidface"))
            .arg("--data-dir")
            .arg(self.path("data"))
            .arg("--patch-size")
            .arg("16")
            .args(args)
            .env_remove("VOIDFACE_SEED")
            .env_remove("VOIDFACE_CONFIG")
            .output()
            .unwrap()
    }

    fn prepare(&self, subject: &str) -> (i32, Value) {
        let image = self.path("face.ppm");
        let marks = self.path("landmarks.json");
        self.run(&[
            "prepare",
            "--image",
            image.to_str().unwrap(),
            "--landmarks",
            marks.to_str().unwrap(),
            "--subject",
            subject,
            "--allow",
            "lab",
        ])
    }
}

/// 120x120 binary PPM with a smooth synthetic face-like gradient.
fn write_face(path: &Path) {
    let (w, h) = (120u32, 120u32);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let dx = x as i32 - 60;
            let dy = y as i32 - 60;
            let r = ((dx * dx + dy * dy) as f64).sqrt();
            bytes.extend([(200.0 - r) as u8, (x * 2) as u8, (y * 2) as u8]);
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn landmarks(complete: bool) -> String {
    let mut boxes = vec![
        ("left_eyebrow", 20, 20),
        ("right_eyebrow", 70, 20),
        ("left_eye", 20, 40),
        ("right_eye", 70, 40),
        ("nose", 45, 60),
    ];
    if complete {
        boxes.push(("mouth", 40, 85));
    }
    let body: Vec<String> = boxes
        .iter()
        .map(|(k, x, y)| format!("\"{k}\": {{\"x\": {x}, \"y\": {y}, \"w\": 30, \"h\": 20}}"))
        .collect();
    format!("{{{}}}", body.join(", "))
}

const S1: &str = "6f1c7a52-3b1e-4a8e-9d64-0c2f8e9a1b01";
const S2: &str = "6f1c7a52-3b1e-4a8e-9d64-0c2f8e9a1b02";

#[test]
fn prepare_emits_seven_share_files() {
    let ws = Workspace::new();
    let (code, body) = ws.prepare(S1);
    assert_eq!(code, 0, "{body}");
    assert_eq!(body["seed"], 11);
    let files = body["report"]["share_files"].as_array().unwrap();
    assert_eq!(files.len(), 7);
    for f in files {
        assert!(Path::new(f.as_str().unwrap()).is_file(), "{f}");
    }
}

#[test]
fn missing_landmark_exits_incomplete() {
    let ws = Workspace::new();
    let image = ws.path("face.ppm");
    let marks = ws.path("partial.json");
    let (code, body) = ws.run(&[
        "prepare",
        "--image",
        image.to_str().unwrap(),
        "--landmarks",
        marks.to_str().unwrap(),
    ]);
    assert_eq!(code, 5);
    assert_eq!(body["exit_name"], "incomplete_landmarks");
}

#[test]
fn rerun_same_subject_conflicts() {
    let ws = Workspace::new();
    assert_eq!(ws.prepare(S1).0, 0);
    let (code, body) = ws.prepare(S1);
    assert_eq!(code, 7, "{body}");
    assert_eq!(ws.prepare(S2).0, 0);
}

#[test]
fn rtbf_then_train_has_no_authorized_subject() {
    let ws = Workspace::new();
    assert_eq!(ws.prepare(S1).0, 0);
    assert_eq!(ws.prepare(S2).0, 0);
    for s in [S1, S2] {
        let (code, body) = ws.run(&["distribute", "--subject", s]);
        assert_eq!(code, 0, "{body}");
    }
    let (code, body) = ws.run(&[
        "train",
        "--requester",
        "lab",
        "--subjects",
        &format!("{S1},{S2}"),
    ]);
    assert_eq!(code, 0, "{body}");
    assert_eq!(body["report"]["authorized"].as_array().unwrap().len(), 2);
    assert_eq!(body["report"]["metrics"]["patches_trained"], 12);

    let (code, _) = ws.run(&["rtbf", "--subject", S1]);
    assert_eq!(code, 0);
    let (code, body) = ws.run(&["train", "--requester", "lab", "--subjects", S1]);
    assert_eq!(code, 10);
    assert!(body["report"]["authorized"].as_array().unwrap().is_empty());
    assert_eq!(body["report"]["excluded"][0]["reason"], "RTBF");

    let (code, body) = ws.run(&["gc"]);
    assert_eq!(code, 0, "{body}");
    assert!(body["report"]["queued"].as_array().unwrap().is_empty());
    let leftovers: Vec<_> = walk(&ws.path("data"))
        .into_iter()
        .filter(|p| p.to_string_lossy().contains(S1))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn offline_institution_blocks_distribution_and_queues_gc() {
    let ws = Workspace::new();
    assert_eq!(ws.prepare(S1).0, 0);
    let marker = ws.path("data/institutions/inst-2/OFFLINE");
    std::fs::create_dir_all(marker.parent().unwrap()).unwrap();
    std::fs::write(&marker, "").unwrap();
    assert_eq!(ws.run(&["distribute", "--subject", S1]).0, 11);

    std::fs::remove_file(&marker).unwrap();
    assert_eq!(ws.run(&["distribute", "--subject", S1]).0, 0);
    let (code, body) = ws.run(&["distribute", "--subject", S1]);
    assert_eq!(code, 0);
    assert_eq!(body["report"]["already_distributed"], true);

    assert_eq!(ws.run(&["rtbf", "--subject", S1]).0, 0);
    std::fs::write(&marker, "").unwrap();
    let (code, body) = ws.run(&["gc"]);
    assert_eq!(code, 0);
    assert_eq!(body["report"]["queued"].as_array().unwrap().len(), 1);
    std::fs::remove_file(&marker).unwrap();
    let (_, body) = ws.run(&["gc"]);
    assert_eq!(body["report"]["acknowledged"].as_array().unwrap().len(), 1);
    assert!(body["report"]["queued"].as_array().unwrap().is_empty());
}

#[test]
fn entropy_of_prepared_shares_is_near_eight() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_voidface"))
        .args(["--json", "--seed", "3", "--data-dir"])
        .arg(ws.path("data"))
        .args(["prepare", "--image"])
        .arg(ws.path("face.ppm"))
        .arg("--landmarks")
        .arg(ws.path("landmarks.json"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let shares = ws.path("data/shares");
    let (code, body) = ws.run(&["metrics", "entropy", "--shares", shares.to_str().unwrap()]);
    assert_eq!(code, 0, "{body}");
    let per_kind = body["report"]["per_kind"].as_object().unwrap();
    assert_eq!(per_kind.len(), 6);
    for (kind, v) in per_kind {
        let v = v.as_f64().unwrap();
        assert!((7.95..=8.0).contains(&v), "{kind}: {v}");
    }
}

#[test]
fn simulate_twice_same_hash() {
    let ws = Workspace::new();
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/full_round.json");
    let scenario = scenario.to_str().unwrap();
    let (code, a) = ws.run(&["simulate", "--scenario", scenario, "--seed", "7"]);
    assert_eq!(code, 0, "{a}");
    let (_, b) = ws.run(&["simulate", "--scenario", scenario, "--seed", "7"]);
    assert_eq!(a["report"]["trace_hash"], b["report"]["trace_hash"]);
    assert_eq!(a["seed"], 7);
    let (_, c) = ws.run(&["simulate", "--scenario", scenario, "--seed", "8"]);
    assert_ne!(a["report"]["trace_hash"], c["report"]["trace_hash"]);
}

#[test]
fn bruteforce_and_usage_errors() {
    let ws = Workspace::new();
    let (code, body) = ws.run(&["metrics", "bruteforce"]);
    assert_eq!(code, 0);
    assert_eq!(body["report"]["rendered"], "9.581622535 × 10^-66584");
    assert_eq!(ws.raw(&["train"]).status.code(), Some(2));
    let help = ws.raw(&["--help"]);
    assert!(String::from_utf8_lossy(&help.stdout).contains("incomplete_landmarks"));
}

#[test]
fn text_header_names_the_seed() {
    let ws = Workspace::new();
    let out = ws.raw(&["metrics", "bruteforce"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.lines().next().unwrap().contains("os entropy"),
        "{text}"
    );
    let out = ws.raw(&["--seed", "5", "metrics", "bruteforce"]);
    assert!(
        String::from_utf8_lossy(&out.stdout).starts_with("voidface metrics bruteforce (seed: 5)")
    );
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return out;
    };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        }
        out.push(p);
    }
    out
}
