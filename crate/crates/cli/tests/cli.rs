use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "k=48", "--set", "n=5", "--set", "m=2", "--set", "epochs_encoder=2", "--set", "epochs_gan=2", "--set",
    "epochs_grid=3",
];

fn planner(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_planner"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, sub: &str, extra: &[&str]) -> Output {
    let mut args = vec![sub];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let out = planner(dir, &args);
    assert!(out.status.success(), "{sub} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn trained(extra: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "synth", extra);
    ok(dir.path(), "zones", extra);
    ok(dir.path(), "train", extra);
    dir
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), "synth", &[]);
    ok(b.path(), "synth", &[]);
    for f in ["samples.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.path().join("data").join(f)).unwrap(), fs::read(b.path().join("data").join(f)).unwrap());
    }
}

#[test]
fn invalid_grid_size_fails_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = planner(dir.path(), &["synth", "--set", "n=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(planner(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(planner(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(planner(dir.path(), &["config", "--set", "no_such_key=1"]).status.code(), Some(2));
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "synth", &[]);
    let mut args = vec!["synth"];
    args.extend_from_slice(SMALL);
    let again = planner(dir.path(), &args);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(dir.path(), "synth", &["--force", "--seed", "11"]);
    let manifest = fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 11"));
}

#[test]
fn config_prints_canonical_form_that_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(dir.path(), "config", &[]);
    fs::write(dir.path().join("run.cfg"), &first.stdout).unwrap();
    let out = planner(dir.path(), &["config", "--config", "run.cfg"]);
    assert!(out.status.success());
    assert_eq!(out.stdout, first.stdout);
}

#[test]
fn missing_checkpoint_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "synth", &[]);
    let mut args = vec!["generate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--instruction", "Green2", "--context", "0"]);
    let out = planner(dir.path(), &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("encoder"));

    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    let out = planner(dir.path(), &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zones"));
}

#[test]
fn end_to_end_small_run() {
    let dir = trained(&[]);
    let p = dir.path();
    for f in ["encoder.ckpt", "generator.ckpt", "discriminator.ckpt", "grid.ckpt"] {
        assert!(p.join("run/checkpoints").join(f).exists(), "{f}");
    }
    let gan = fs::read_to_string(p.join("run/logs/gan_loss.csv")).unwrap();
    assert!(gan.starts_with("step,L_G,L_D,KL\n"));

    ok(p, "generate", &["--instruction", "4", "--context", "1", "--out", "plan.json"]);
    ok(p, "generate", &["--instruction", "4", "--context", "1", "--out", "again.json"]);
    assert_eq!(fs::read(p.join("plan.json")).unwrap(), fs::read(p.join("again.json")).unwrap());
    let plan: serde_like::Plan = serde_like::parse(&fs::read_to_string(p.join("plan.json")).unwrap());
    assert_eq!(plan.instruction, "4");
    assert_eq!(plan.context_id, "1");

    let out = ok(p, "eval", &[]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("level,w,KL,JS,HD,Cos\n"));
    assert!(csv.lines().last().unwrap().starts_with("AVG,"));
    assert!(p.join("run/report.json").exists());
    assert_eq!(fs::read_to_string(p.join("run/report.csv")).unwrap(), csv);
    ok(p, "eval", &["--baseline"]);
    assert!(p.join("run/baseline_report.json").exists());
}

#[test]
fn export_formats_and_round_trip() {
    let dir = trained(&[]);
    let p = dir.path();
    ok(p, "generate", &["--instruction", "Green1", "--context", "2", "--out", "plan.json"]);
    ok(p, "export", &["--plan", "plan.json", "--format", "json", "--out", "j"]);
    ok(p, "export", &["--plan", "plan.json", "--format", "csv", "--out", "c"]);
    ok(p, "export", &["--plan", "plan.json", "--format", "pgm", "--out", "g"]);
    assert_eq!(fs::read_dir(p.join("c")).unwrap().count(), 21);
    assert_eq!(fs::read_dir(p.join("g")).unwrap().count(), 20);
    let pgm = fs::read(p.join("g/07_recreation_service.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n5 5\n255\n"));
    assert_eq!(pgm.len(), 11 + 25);

    let plan = fs::read_to_string(p.join("plan.json")).unwrap();
    let cfg_text = fs::read_to_string(p.join("j/configuration.json")).unwrap();
    let key = "\"configuration\":";
    let start = plan.find(key).unwrap() + key.len();
    let embedded: String = plan[start..].chars().filter(|c| !c.is_whitespace()).collect();
    let exported: String = cfg_text.chars().filter(|c| !c.is_whitespace()).collect();
    assert_eq!(embedded.trim_end_matches('}'), exported.trim_end_matches('}'));

    let bad = planner(p, &["export", "--plan", "plan.json", "--format", "png", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(2));
    let again = planner(p, &["export", "--plan", "plan.json", "--format", "json", "--out", "j"]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn without_instruction_levels_give_identical_plans() {
    let dir = trained(&["--set", "ablations=no_instruction"]);
    let p = dir.path();
    let flags = ["--set", "ablations=no_instruction"];
    let mut a = flags.to_vec();
    a.extend_from_slice(&["--instruction", "Green0", "--context", "4", "--out", "g0.json"]);
    ok(p, "generate", &a);
    let mut b = flags.to_vec();
    b.extend_from_slice(&["--instruction", "Green4", "--context", "4", "--out", "g4.json"]);
    ok(p, "generate", &b);
    let strip = |f: &str| {
        let s = fs::read_to_string(p.join(f)).unwrap();
        s[s.find("\"context_id\"").unwrap()..].to_string()
    };
    assert_eq!(strip("g0.json"), strip("g4.json"));
}

/// Minimal field extraction so the test needs no JSON dependency.
mod serde_like {
    pub struct Plan {
        pub instruction: String,
        pub context_id: String,
    }

    fn field(text: &str, key: &str) -> String {
        let k = format!("\"{key}\":");
        let rest = text[text.find(&k).unwrap() + k.len()..].trim_start();
        rest.chars().take_while(|c| c.is_ascii_digit()).collect()
    }

    pub fn parse(text: &str) -> Plan {
        Plan {
            instruction: field(text, "instruction"),
            context_id: field(text, "context_id"),
        }
    }
}
