use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lift3d::corpus::{Corpus, Split};
use lift3d::eval::{shape_dir, PRED_MESH_FILE, REFINED_MESH_FILE, REPORT_JSON};
use lift3d::experiment::reference_mesh;
use lift3d::volume::write_ply;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn lift3d(out: &Path, args: &[&str]) -> Output {
    let o = Command::new(env!("CARGO_BIN_EXE_lift3d"))
        .arg("--config")
        .arg(tiny())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs");
    eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Relative path to file bytes, for whole-directory comparisons.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Drops the `[paths]` table, which differs between output roots.
fn strip_paths(snap: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for (k, v) in snap.iter_mut() {
        if k.file_name().is_some_and(|n| n == "config.toml") {
            let text = String::from_utf8(v.clone()).unwrap();
            let (head, rest) = text.split_once("[paths]").unwrap();
            let tail = &rest[rest.find("\n[").unwrap()..];
            *v = format!("{head}{tail}").into_bytes();
        }
    }
}

fn portable(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut s = snapshot(root);
    strip_paths(&mut s);
    s
}

#[test]
fn corpus_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_eq!(code(&lift3d(&a, &["corpus", "--n", "4", "--seed", "7"])), 0);
    assert_eq!(code(&lift3d(&b, &["corpus", "--n", "4", "--seed", "7"])), 0);
    let sa = snapshot(&a.join("corpus"));
    assert!(sa.len() > 4);
    assert_eq!(code(&lift3d(&a, &["corpus", "--n", "4", "--seed", "7"])), 0);
    assert_eq!(sa, snapshot(&a.join("corpus")));
    assert_eq!(portable(&a.join("corpus")), portable(&b.join("corpus")));
}

#[test]
fn echoed_config_reproduces_the_corpus() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    assert_eq!(code(&lift3d(&a, &["corpus", "--n", "3", "--seed", "11"])), 0);
    let echo = a.join("corpus/config.toml");
    let b = t.path().join("b");
    let o = Command::new(env!("CARGO_BIN_EXE_lift3d"))
        .arg("--config")
        .arg(&echo)
        .arg("--out")
        .arg(&b)
        .arg("corpus")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(portable(&a.join("corpus")), portable(&b.join("corpus")));
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let t = tempfile::tempdir().unwrap();
    let o = lift3d(t.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows.len() >= 20);
    for r in rows {
        let cols: Vec<&str> = r.split_whitespace().collect();
        let err: f64 = cols[1].parse().unwrap();
        assert!(err <= 1e-4, "{r}");
        assert_eq!(cols[3], "ok");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "[stage1.train]\nstepz = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lift3d"))
        .arg("--config")
        .arg(&cfg)
        .arg("gradcheck")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage1.train"), "{err}");
    assert!(err.contains("stepz"), "{err}");
}

#[test]
fn out_of_range_value_names_its_key() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "[infer]\nview_degradation = 2.0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lift3d"))
        .arg("--config")
        .arg(&cfg)
        .arg("gradcheck")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("infer.view_degradation"));
}

#[test]
fn missing_upstream_artifacts_have_their_own_code() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&lift3d(t.path(), &["train", "--stage", "1"])), 3);
    assert_eq!(code(&lift3d(t.path(), &["corpus"])), 0);
    assert_eq!(code(&lift3d(t.path(), &["infer"])), 3);
    assert_eq!(code(&lift3d(t.path(), &["refine"])), 3);
    assert_eq!(code(&lift3d(t.path(), &["eval"])), 3);
}

#[test]
fn bad_arguments_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    assert_ne!(code(&lift3d(t.path(), &["train", "--stage", "3"])), 0);
    assert_ne!(code(&lift3d(t.path(), &["ablate", "--variant", "g"])), 0);
}

#[test]
fn training_is_reproducible_and_echoes_config() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&lift3d(out, &["corpus"])), 0);
        assert_eq!(code(&lift3d(out, &["train", "--stage", "1"])), 0);
        assert_eq!(code(&lift3d(out, &["train", "--stage", "2"])), 0);
    }
    let (sa, sb) = (portable(&a.join("models")), portable(&b.join("models")));
    for f in ["stage1.ckpt", "stage2.ckpt", "stage1.json", "stage2.json", "config.toml"] {
        assert_eq!(sa[Path::new(f)], sb[Path::new(f)], "{f}");
    }
    // Logs agree except for wall time.
    for f in ["train_log_stage1.csv", "train_log_stage2.csv"] {
        let strip = |bytes: &[u8]| -> Vec<String> {
            String::from_utf8(bytes.to_vec())
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        let la = strip(&sa[Path::new(f)]);
        assert_eq!(la.len(), 3);
        assert_eq!(la, strip(&sb[Path::new(f)]));
    }
    let echo = fs::read_to_string(a.join("models/config.toml")).unwrap();
    assert!(echo.contains("seed = 3"));
}

#[test]
fn untrained_models_produce_empty_occupancy() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&lift3d(t.path(), &["corpus"])), 0);
    assert_eq!(code(&lift3d(t.path(), &["train", "--stage", "1"])), 0);
    assert_eq!(code(&lift3d(t.path(), &["train", "--stage", "2"])), 0);
    let o = lift3d(t.path(), &["infer"]);
    // Two optimizer steps cannot lift the coarse sample above zero.
    assert_eq!(code(&o), 5);
    let summary = fs::read_to_string(t.path().join("infer/infer.json")).unwrap();
    assert!(summary.contains("\"empty\""));
}

#[test]
fn refine_and_eval_run_on_stored_meshes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&lift3d(t.path(), &["corpus"])), 0);
    let corpus = Corpus::open(&t.path().join("corpus")).unwrap();
    let ids = corpus.manifest.ids(Split::Val);
    for id in &ids {
        let mesh = reference_mesh(&corpus.load(id).unwrap()).unwrap();
        let dir = shape_dir(&t.path().join("infer"), id);
        fs::create_dir_all(&dir).unwrap();
        write_ply(&dir.join(PRED_MESH_FILE), &mesh).unwrap();
    }
    let o = lift3d(t.path(), &["refine"]);
    assert_eq!(code(&o), 0);
    for id in &ids {
        let dir = shape_dir(&t.path().join("refine"), id);
        assert!(dir.join(REFINED_MESH_FILE).exists());
        let trace = fs::read_to_string(dir.join("refine_trace.csv")).unwrap();
        let losses: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(losses.len(), 6);
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }
    let o = lift3d(t.path(), &["eval"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("eval").join(REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report["shapes"].as_array().unwrap().len(), ids.len());
    assert!(report["aggregate"]["f_score"].as_f64().unwrap() > 90.0);
    let refine_run = t.path().join("refine");
    let o = lift3d(t.path(), &["eval", "--run", refine_run.to_str().unwrap(), "--mesh", REFINED_MESH_FILE]);
    assert_eq!(code(&o), 0);
    // Inputs of the refine step are untouched.
    for id in &ids {
        assert!(!shape_dir(&t.path().join("infer"), id).join(REFINED_MESH_FILE).exists());
    }
}

#[test]
fn ablation_row_a_zeroes_the_condition_volume() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&lift3d(t.path(), &["corpus"])), 0);
    assert_eq!(code(&lift3d(t.path(), &["ablate", "--variant", "a"])), 0);
    let dir = t.path().join("ablate/variant_a");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(r["mode"]["multiview"], "off");
    assert_eq!(r["mode"]["global"], true);
    assert_eq!(r["levels"].as_array().unwrap().len(), 2);
    let echo = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(echo.contains("[ablation]"));
}
