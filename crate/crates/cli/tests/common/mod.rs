#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidarsplat::synthetic::{street_scene, StreetFixture, StreetOptions};

/// Seed of the shipped street fixture.
pub const FIXTURE_SEED: u64 = 7;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn street_dir() -> PathBuf {
    fixtures().join("street")
}

pub fn street_fixture() -> StreetFixture {
    street_scene(FIXTURE_SEED, &StreetOptions::default()).expect("fixture builds")
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn json(&self) -> serde_json::Value {
        let text = if self.code == 0 { &self.stdout } else { &self.stderr };
        serde_json::from_str(text).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
    }
}

pub fn lidarsplat<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out: Output = Command::new(env!("CARGO_BIN_EXE_lidarsplat"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Width and height from a PNG header.
pub fn png_size(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n", "{} is not a PNG", path.display());
    assert_eq!(&bytes[12..16], b"IHDR");
    let be = |s: &[u8]| u32::from_be_bytes([s[0], s[1], s[2], s[3]]);
    (be(&bytes[16..20]), be(&bytes[20..24]))
}

/// Every regular file under `root` with its contents, sorted by relative
/// path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

pub fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Runs every subcommand once with `--seed seed --threads threads`, writing
/// all artifacts under `root`. Each JSON report is stored in
/// `root/reports/` with `root` replaced by `$OUT`.
pub fn run_pipeline(root: &Path, seed: u64, threads: usize) -> Result<(), String> {
    let scene = s(&street_dir());
    let fx = fixtures();
    let ckpt = root.join("truth.lsgs");
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    lidarsplat::gsplat::checkpoint::save(&street_fixture().truth, &ckpt).map_err(|e| e.to_string())?;
    let o = |p: &str| s(&root.join(p));
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("validate", vec!["validate".into(), "--scene".into(), scene.clone()]),
        (
            "build-condition",
            vec![
                "build-condition",
                "--scene",
                &scene,
                "--frame",
                "2",
                "--lane-shift",
                "1.5",
                "--side",
                "right",
                "--out",
                &o("cond/c.png"),
                "--depth-out",
                &o("cond/d.png"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "render",
            vec![
                "render",
                "--scene",
                &scene,
                "--checkpoint",
                &s(&ckpt),
                "--frame",
                "1",
                "--edit",
                &s(&fx.join("shift_car.json")),
                "--out",
                &o("render/r.png"),
                "--depth-out",
                &o("render/d.png"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "edit",
            vec![
                "edit",
                "--scene",
                &scene,
                "--edit",
                &s(&fx.join("remove_car.json")),
                "--out",
                &o("edit"),
                "--checkpoint",
                &s(&ckpt),
                "--checkpoint-out",
                &o("edit/edited.lsgs"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "distill",
            vec![
                "distill",
                "--scene",
                &scene,
                "--config",
                &s(&fx.join("smoke.toml")),
                "--generator",
                "noisy",
                "--out",
                &o("distill"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "sample",
            vec![
                "sample",
                "--scene",
                &scene,
                "--renders",
                &s(&street_dir().join("images")),
                "--noise-scale",
                "0.6",
                "--steps",
                "4",
                "--chunk",
                "3",
                "--overlap",
                "1",
                "--out",
                &o("sample"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "eval",
            vec!["eval", "--pred", &o("sample"), "--gt", &s(&street_dir().join("images"))]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
    ];
    let reports = root.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| e.to_string())?;
    for (name, mut args) in steps {
        args.extend([
            "--seed".into(),
            seed.to_string(),
            "--threads".into(),
            threads.to_string(),
        ]);
        args.extend(["--report".into(), "json".into()]);
        let r = lidarsplat(&args);
        if r.code != 0 {
            return Err(format!("{name} exited {}: {}", r.code, r.stderr));
        }
        let normalized = r.stdout.replace(&s(root), "$OUT");
        std::fs::write(reports.join(format!("{name}.json")), normalized).map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Files that differ between two output trees, by relative path.
pub fn tree_diff(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (ta, tb) = (tree(a), tree(b));
    let mut out: Vec<PathBuf> = ta
        .iter()
        .filter(|(p, bytes)| tb.iter().find(|(q, _)| q == p).is_none_or(|(_, other)| other != bytes))
        .map(|(p, _)| p.clone())
        .collect();
    out.extend(
        tb.iter()
            .filter(|(p, _)| !ta.iter().any(|(q, _)| q == p))
            .map(|(p, _)| p.clone()),
    );
    out
}
