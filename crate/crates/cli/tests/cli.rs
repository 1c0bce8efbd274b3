use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: [&str; 12] = [
    "--set",
    "image_size=16",
    "--set",
    "patch_size=4",
    "--set",
    "conv_kernels=3,3",
    "--set",
    "embed_dim=16",
    "--set",
    "enc_layers=2",
    "--set",
    "selection_layers=1",
];

fn sbir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbir")).args(args).output().expect("spawn sbir")
}

fn ok(args: &[&str]) -> String {
    let out = sbir(args);
    assert!(
        out.status.success(),
        "sbir {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.tsv")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    fn image(&self, suffix: &str) -> PathBuf {
        let mut names: Vec<PathBuf> = fs::read_dir(self.root.join("data/images"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.to_string_lossy().ends_with(suffix))
            .collect();
        names.sort();
        names.remove(0)
    }
}

/// A 16×16 corpus and a checkpoint trained for two epochs, shared by the
/// tests below.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&[
            "gen-data", "--out", s(&data), "--categories", "3", "--pairs", "3", "--size", "16", "--seed", "4",
        ]);
        let ckpt = root.join("model.ckpt");
        let mut args = vec!["train", "--manifest", s(&data.join("manifest.tsv")).to_owned().leak(), "--epochs", "2"];
        args.extend(["--checkpoint", s(&ckpt).to_owned().leak()]);
        args.extend(SMALL);
        let log = ok(&args);
        assert!(log.contains("epoch   2"), "{log}");
        Fixture { _dir: dir, root }
    })
}

#[test]
fn train_writes_checkpoint_and_sidecars() {
    let f = fixture();
    for ext in ["", ".cfg", ".loss.csv", ".names"] {
        let p = PathBuf::from(format!("{}{ext}", f.ckpt().display()));
        assert!(p.is_file(), "missing {}", p.display());
    }
    let cfg = fs::read_to_string(format!("{}.cfg", f.ckpt().display())).unwrap();
    assert!(cfg.lines().any(|l| l.replace(' ', "") == "embed_dim=16"), "{cfg}");
}

#[test]
fn eval_prints_and_writes_metrics() {
    let f = fixture();
    let out = f.root.join("eval");
    for mode in ["rn", "ret"] {
        let stdout = ok(&[
            "eval", "--manifest", s(&f.manifest()), "--checkpoint", s(&f.ckpt()), "--mode", mode, "--k", "1,2",
            "--out", s(&out),
        ]);
        assert!(stdout.contains("map = ") && stdout.contains("acc@1 = ") && stdout.contains("prec@2 = "), "{stdout}");
        let metrics = fs::read_to_string(out.join(format!("metrics-{mode}.txt"))).unwrap();
        assert!(metrics.contains("queries = 3"), "{metrics}");
        let map: f64 = metrics
            .lines()
            .find_map(|l| l.strip_prefix("map = "))
            .unwrap()
            .parse()
            .unwrap();
        assert!((0.0..=1.0).contains(&map));
        let ranking = fs::read_to_string(out.join(format!("ranking-{mode}.txt"))).unwrap();
        // Header plus one line per test sketch, each listing the three test photos.
        let lines: Vec<&str> = ranking.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split('\t').count() == 4), "{ranking}");
    }
}

#[test]
fn synth_writes_image_and_provenance() {
    let f = fixture();
    let out = f.root.join("synth");
    let stdout = ok(&[
        "synth", "--manifest", s(&f.manifest()), "--checkpoint", s(&f.ckpt()), "--k", "2", "--out", s(&out),
    ]);
    assert!(!stdout.is_empty());
    let names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("synth-") && n.ends_with(".ppm")), "{names:?}");
    let prov = names.iter().find(|n| n.starts_with("provenance-")).unwrap();
    let text = fs::read_to_string(out.join(prov)).unwrap();
    // 16 patches, two sources each.
    assert_eq!(text.lines().count(), 2 + 16 * 2, "{text}");
}

#[test]
fn explanation_commands() {
    let f = fixture();
    let (sketch, photo) = (f.image("_sketch.pgm"), f.image("_photo.ppm"));
    let map = f.root.join("attn.pgm");
    ok(&["attn-map", "--checkpoint", s(&f.ckpt()), "--image", s(&sketch), "--layer", "1", "--out", s(&map)]);
    assert!(fs::read(&map).unwrap().starts_with(b"P5\n16 16\n255\n"));

    let corr = f.root.join("corr.tsv");
    ok(&[
        "correspond", "--checkpoint", s(&f.ckpt()), "--sketch", s(&sketch), "--photo", s(&photo), "--top-k", "3",
        "--out", s(&corr),
    ]);
    let text = fs::read_to_string(&corr).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 16 * 3, "{text}");

    let drops = f.root.join("drops.tsv");
    let stdout = ok(&[
        "influence", "--checkpoint", s(&f.ckpt()), "--sketch", s(&sketch), "--photo", s(&photo), "--mode", "entry",
        "--out", s(&drops),
    ]);
    assert!(stdout.contains("most influential pair"), "{stdout}");
    assert_eq!(fs::read_to_string(&drops).unwrap().lines().count(), 1 + 16 * 16);

    let bad = sbir(&["attn-map", "--checkpoint", s(&f.ckpt()), "--image", s(&sketch), "--layer", "9", "--out", s(&map)]);
    assert!(!bad.status.success());
}

#[test]
fn missing_manifest_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/manifest.tsv");
    let out = sbir(&["train", "--manifest", s(&missing), "--checkpoint", s(&dir.path().join("m.ckpt"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest not found") && err.contains(s(&missing)), "{err}");
}

#[test]
fn missing_checkpoint_is_named() {
    let f = fixture();
    let out = sbir(&["eval", "--manifest", s(&f.manifest()), "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.ckpt"));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let out = sbir(&["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn bad_override_is_rejected() {
    let f = fixture();
    let out = sbir(&["eval", "--manifest", s(&f.manifest()), "--checkpoint", s(&f.ckpt()), "--set", "bogus=1", "--out", "/tmp"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn contaminated_manifest_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--categories", "3", "--pairs", "2", "--size", "16"]);
    let manifest = data.join("manifest.tsv");
    let text = fs::read_to_string(&manifest).unwrap();
    // Move one test record into the training split.
    let mut moved = false;
    let edited: Vec<String> = text
        .lines()
        .map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            if !moved && fields.last() == Some(&"test") {
                moved = true;
                let mut f = fields.clone();
                *f.last_mut().unwrap() = "train";
                return f.join("\t");
            }
            l.to_owned()
        })
        .collect();
    assert!(moved, "{text}");
    fs::write(&manifest, edited.join("\n") + "\n").unwrap();
    let mut args = vec!["train", "--manifest", s(&manifest), "--checkpoint", "/tmp/never.ckpt", "--epochs", "1"];
    args.extend(SMALL);
    let out = sbir(&args);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("zero-shot violation"), "{err}");
    assert!(!Path::new("/tmp/never.ckpt").exists());
}
