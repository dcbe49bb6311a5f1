use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_MODEL: &str = r#"
[train]
total_iters = 0

[model.generator]
image_size = 8
base_width = 2
n_downsample = 1
n_resblocks = 1
p_dim = P_DIM
p_embed_dim = 2
p_mlp_layers = 1
stem_kernel = 3

[model.discriminator]
image_size = 8
base_width = 2
n_layers = 1
p_dim = P_DIM
p_embed_dim = 2
p_mlp_layers = 1
"#;

const SUBCOMMANDS: [&str; 10] =
    ["render-synth", "gen-domains", "build-soft", "train", "infer", "sweep", "eval-sweep", "eval-mono", "latent", "run"];

fn pargan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pargan")).args(args).env_remove("PARGAN_SEED").env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = pargan(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Exit code and the single stderr line of a failing command.
fn fail(args: &[&str]) -> (i32, String) {
    let out = pargan(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got {err:?}");
    (out.status.code().unwrap(), lines[0].to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny beam dataset plus an untrained p_dim=3 checkpoint.
fn beam_checkpoint(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["render-synth", "--out", s(&data), "--count", "6", "--size", "8", "--seed", "4", "--n-bases", "3"]);
    let cfg = dir.join("model.toml");
    fs::write(&cfg, TINY_MODEL.replace("P_DIM", "3")).unwrap();
    let run = dir.join("run");
    let covers = data.join("covers/manifest.jsonl");
    let beams = data.join("beam/manifest.jsonl");
    ok(&["train", "--config", s(&cfg), "--source", s(&covers), "--target", s(&beams), "--out", s(&run)]);
    run.join("checkpoints/iter_0000000")
}

#[test]
fn help_lists_every_flag() {
    let mut text = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for sub in SUBCOMMANDS {
        text.push_str(&format!("\n===== {sub} =====\n"));
        text.push_str(&String::from_utf8(ok(&[sub, "--help"]).stdout).unwrap());
    }
    let snapshot = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots/help.txt");
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        fs::create_dir_all(snapshot.parent().unwrap()).unwrap();
        fs::write(&snapshot, &text).unwrap();
    }
    let expected = fs::read_to_string(&snapshot).expect("help snapshot missing; run with UPDATE_SNAPSHOTS=1");
    assert_eq!(text, expected, "flag surface changed; rerun with UPDATE_SNAPSHOTS=1 if intended");
    for flag in ["--ckpt", "--grid", "--axis", "--metric", "--resume", "--bases", "--inverse", "--labels"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn errors_carry_a_code_prefix() {
    let (code, line) = fail(&["infer", "--ckpt", "/nonexistent", "--image", "x.png", "--out", "y.png"]);
    assert_ne!(code, 0);
    assert!(line.starts_with("E_CHECKPOINT: "), "{line}");
    assert!(line.contains("meta.json"), "no remediation hint: {line}");
    let (code, line) = fail(&["train", "--bogus"]);
    assert_eq!(code, 2);
    assert!(line.starts_with("E_USAGE: "), "{line}");
    let (_, line) = fail(&["gen-domains", "--spec", "/nonexistent.toml", "--count", "2", "--out", "/tmp/x"]);
    assert!(line.starts_with("E_IO: "), "{line}");
}

#[test]
fn inference_grids_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = beam_checkpoint(dir.path());
    let image = dir.path().join("data/covers/cover_00000.png");
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    ok(&["infer", "--ckpt", s(&ckpt), "--image", s(&image), "--p", "0.2,0.5,0.9", "--out", s(&a)]);
    ok(&["infer", "--ckpt", s(&ckpt), "--image", s(&image), "--p", "0.2,0.5,0.9", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let (_, line) = fail(&["infer", "--ckpt", s(&ckpt), "--image", s(&image), "--p", "1.5,0.5,0.5", "--out", s(&b)]);
    assert!(line.starts_with("E_PARAM: ") && line.contains("outside"), "{line}");
    let (_, line) = fail(&["infer", "--ckpt", s(&ckpt), "--image", s(&image), "--p", "0.5", "--out", s(&b)]);
    assert!(line.starts_with("E_PARAM: ") && line.contains("length 3"), "{line}");

    // a 1x1 grid is the inference output itself
    let one = dir.path().join("one.png");
    ok(&["sweep", "--ckpt", s(&ckpt), "--image", s(&image), "--axis", "1", "--values", "0.5", "--base-p", "0.2,0,0.9", "--out", s(&one)]);
    assert_eq!(image::open(&one).unwrap().to_rgb8(), image::open(&a).unwrap().to_rgb8());

    let strip = dir.path().join("strip.png");
    ok(&["sweep", "--ckpt", s(&ckpt), "--image", s(&image), "--axis", "1", "--values", "0,0.25,0.5,0.75,1", "--out", s(&strip)]);
    assert_eq!(image::image_dimensions(&strip).unwrap(), (5 * 8 + 4 * 2, 8));
    let mix = dir.path().join("mix.png");
    ok(&[
        "sweep", "--ckpt", s(&ckpt), "--image", s(&image), "--axis", "0", "--values", "0,0.25,0.5,0.75,1", "--axis", "2",
        "--values", "0,0.25,0.5,0.75,1", "--labels", "--out", s(&mix),
    ]);
    assert_eq!(image::image_dimensions(&mix).unwrap(), (5 * 8 + 4 * 2, 5 * 8 + 4 * 2));
    let values: Vec<String> = (0..11).map(|i| format!("{}", i as f64 / 10.0)).collect();
    let v = values.join(",");
    let (_, line) = fail(&[
        "sweep", "--ckpt", s(&ckpt), "--image", s(&image), "--axis", "0", "--values", &v, "--axis", "1", "--values", &v, "--out", s(&mix),
    ]);
    assert!(line.contains("100-cell"), "{line}");

    let covers = dir.path().join("data/covers/manifest.jsonl");
    let beams = dir.path().join("data/beam/manifest.jsonl");
    let lat = dir.path().join("latent.csv");
    ok(&["latent", "--ckpt", s(&ckpt), "--inputs", s(&covers), "--p", "0,0,0", "--p", "1,1,1", "--out", s(&lat)]);
    let text = fs::read_to_string(&lat).unwrap();
    assert_eq!(text.lines().next(), Some("pc1,pc2,pc3"));
    assert_eq!(text.lines().count(), 1 + 3 * 2);

    let mono = dir.path().join("mono.csv");
    ok(&[
        "eval-mono", "--ckpt", s(&ckpt), "--inputs", s(&covers), "--source", s(&covers), "--target", s(&covers), "--p-values",
        "0,0.5,1", "--axis", "2", "--metric", "pixel_l1", "--out", s(&mono),
    ]);
    let text = fs::read_to_string(&mono).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 + 1);
    assert!(text.lines().last().unwrap().starts_with("rho,"), "{text}");
    // the beam renders carry continuous p, so no exact grid match exists
    let (_, line) = fail(&[
        "eval-sweep", "--ckpt", s(&ckpt), "--inputs", s(&covers), "--reals", s(&beams), "--grid", "0.1,0.5,0.9", "--axis", "1",
        "--metric", "pixel_l1", "--out", s(&mono),
    ]);
    assert!(line.starts_with("E_CONFIG: "), "{line}");
}

#[test]
fn unconditional_checkpoint_needs_no_p() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("domains.toml");
    fs::write(
        &spec,
        "[[domain]]\nname = \"a\"\ncolor_shift = [0.0, 0.0, 0.0]\nbrightness_scale = 1.0\ntexture_seed = 1\n\n\
         [[domain]]\nname = \"b\"\ncolor_shift = [0.2, 0.0, 0.0]\nbrightness_scale = 0.5\ntexture_seed = 2\n",
    )
    .unwrap();
    let doms = dir.path().join("doms");
    ok(&["gen-domains", "--spec", s(&spec), "--count", "3", "--out", s(&doms), "--seed", "1", "--size", "8"]);
    let cfg = dir.path().join("model.toml");
    fs::write(&cfg, TINY_MODEL.replace("P_DIM", "0")).unwrap();
    let run = dir.path().join("run");
    let (src, tgt) = (doms.join("a/manifest.jsonl"), doms.join("b/manifest.jsonl"));
    ok(&["train", "--config", s(&cfg), "--source", s(&src), "--target", s(&tgt), "--out", s(&run)]);
    let ckpt = run.join("checkpoints/iter_0000000");
    let out = dir.path().join("y.png");
    ok(&["infer", "--ckpt", s(&ckpt), "--image", s(&doms.join("a/a_00000.png")), "--out", s(&out)]);
    ok(&["infer", "--ckpt", s(&ckpt), "--image", s(&doms.join("b/b_00000.png")), "--inverse", "--out", s(&out)]);
    assert_eq!(image::image_dimensions(&out).unwrap(), (8, 8));

    let soft = dir.path().join("soft/manifest.jsonl");
    ok(&["build-soft", "--source", s(&src), "--target", s(&tgt), "--out", s(&soft)]);
    let text = fs::read_to_string(&soft).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert!(text.contains("\"p\":[1.0]") && text.contains("\"p\":[0.0]"));
    let (_, line) = fail(&["build-soft", "--source", s(&src), "--target", s(&src), "--out", s(&soft)]);
    assert!(line.starts_with("E_MANIFEST: ") && line.contains("duplicate"), "{line}");
}

#[test]
fn seed_environment_variable_overrides_the_default() {
    let dir = tempfile::tempdir().unwrap();
    let render = |out: &Path, env: Option<&str>, extra: &[&str]| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pargan"));
        cmd.args(["render-synth", "--out", s(out), "--count", "2", "--size", "8", "--n-bases", "1"]).args(extra).env_remove("PARGAN_SEED");
        if let Some(v) = env {
            cmd.env("PARGAN_SEED", v);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read(out.join("beam/manifest.jsonl")).unwrap()
    };
    let by_env = render(&dir.path().join("env"), Some("9"), &[]);
    let by_flag = render(&dir.path().join("flag"), None, &["--seed", "9"]);
    let default = render(&dir.path().join("default"), None, &[]);
    assert_eq!(by_env, by_flag);
    assert_ne!(by_env, default);
}
