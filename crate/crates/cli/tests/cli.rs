use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use emo_core::expression::{read_samples, ExpressionMatrix};
use emo_core::pipeline::{run_in_memory, Layout, PipelineConfig};
use emo_core::predict::{predictions_to_tsv, slide_values_to_tsv, SlideValue};
use emo_core::raster::Slide;
use emo_core::stats::{read_stats, stats_to_tsv};

fn emo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emo"))
}

fn run(args: &[&str]) -> Output {
    emo().args(args).output().expect("spawn emo")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "emo {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: &[&str] = &["--slides", "6", "--train", "2", "--genes", "6", "--linked", "3", "--size-um", "420", "--roi-size-um", "200"];

/// A small fixture and one full staged run, shared by the tests below.
struct Shared {
    _tmp: tempfile::TempDir,
    input: PathBuf,
    output: PathBuf,
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let input = tmp.path().join("in");
        let output = tmp.path().join("out");
        let mut args = vec!["synth", "--seed", "3", "--output", s(&input)];
        args.extend_from_slice(SYNTH);
        ok(&args);
        for stage in ["segment", "tile", "stain-estimate", "stain-apply", "expression", "predict", "aggregate", "stats"] {
            ok(&[stage, "--seed", "3", "--input", s(&input), "--output", s(&output)]);
        }
        Shared { _tmp: tmp, input, output }
    })
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn help_lists_every_stage() {
    let o = ok(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for c in ["segment", "tile", "stain-estimate", "stain-apply", "predict", "aggregate", "stats", "select", "lme", "heatmap", "--threads"] {
        assert!(text.contains(c), "missing {c} in help");
    }
    assert!(!text.contains("predict-worker"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["tile"]).status.code(), Some(1));
}

#[test]
fn missing_upstream_exit_1_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["stain-estimate", "--input", s(tmp.path()), "--output", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.tsv"));
}

#[test]
fn config_unknown_key_rejected_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"tile": {"physical_size": 271, "colour": 1}}"#).unwrap();
    assert_eq!(run(&["config", "--config", s(&bad)]).status.code(), Some(1));
    let good = tmp.path().join("good.json");
    std::fs::write(&good, r#"{"seed": 5, "stats": {"alpha": 0.1}}"#).unwrap();
    let o = ok(&["config", "--config", s(&good), "--seed", "9"]);
    let cfg = PipelineConfig::from_json(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.stats.alpha, 0.1);
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--seed", "4", "--slides", "2", "--train", "1", "--genes", "3", "--linked", "1", "--size-um", "200", "--roi-size-um", "100", "--output", s(d)]);
    }
    for f in ["expression.tsv", "samples.tsv", "rois.tsv", "st_counts.tsv", "neg_controls.tsv", "slides/SYN-000.png", "slides/SYN-001.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}

#[test]
fn manifest_rows_match_fixture_geometry() {
    let sh = shared();
    let text = String::from_utf8(read(sh.output.join("manifest.tsv"))).unwrap();
    // 420 µm at 0.452 µm/px is 929 px: a 2 × 2 grid of 600 px tiles at stride 300.
    assert_eq!(text.lines().count(), 1 + 6 * 4);
}

#[test]
fn staged_run_equals_in_memory_run() {
    let sh = shared();
    let mut slides = Vec::new();
    for e in std::fs::read_dir(sh.input.join("slides")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "png") {
            slides.push(Slide::open(&p).unwrap());
        }
    }
    let m = ExpressionMatrix::read(sh.input.join("expression.tsv")).unwrap();
    let samples = read_samples(sh.input.join("samples.tsv")).unwrap();
    let cfg = PipelineConfig {
        seed: 3,
        ..Default::default()
    };
    let r = run_in_memory(&cfg, &slides, &m, &samples).unwrap();
    let out = Layout::new(&sh.output);
    assert_eq!(emo_core::tiler::manifest_to_string(&r.manifest).into_bytes(), read(out.manifest()));
    assert_eq!(r.stains.global.to_json().unwrap().into_bytes(), read(out.global_profile()));
    assert_eq!(predictions_to_tsv(&r.predictions).into_bytes(), read(out.predictions()));
    assert_eq!(slide_values_to_tsv(&r.slide_values).into_bytes(), read(out.slide_values()));
    assert_eq!(stats_to_tsv(&r.stats).into_bytes(), read(out.gene_stats()));
}

#[test]
fn rerunning_a_stage_is_byte_identical() {
    let sh = shared();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    for stage in ["segment", "tile", "stain-estimate"] {
        ok(&[stage, "--seed", "3", "--input", s(&sh.input), "--output", s(out)]);
    }
    let first = (read(out.join("manifest.tsv")), read(out.join("stain/global.json")), read(out.join("stain/luminosity.tsv")));
    for stage in ["tile", "stain-estimate"] {
        ok(&[stage, "--seed", "3", "--input", s(&sh.input), "--output", s(out), "--threads", "1"]);
    }
    assert_eq!(first.0, read(out.join("manifest.tsv")));
    assert_eq!(first.1, read(out.join("stain/global.json")));
    assert_eq!(first.2, read(out.join("stain/luminosity.tsv")));
    assert_eq!(first.0, read(sh.output.join("manifest.tsv")));
}

#[test]
fn external_baseline_predictor_matches_in_process() {
    let sh = shared();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    copy_dir(&sh.output, out);
    let models = out.join("predict/models.json");
    let saved = out.join("models.json");
    std::fs::copy(&models, &saved).unwrap();
    let cmd = format!("'{}' predict-worker --models '{}'", env!("CARGO_BIN_EXE_emo"), saved.display());
    ok(&["predict", "--input", s(&sh.input), "--output", s(out), "--command", &cmd]);
    assert_eq!(read(out.join("predict/tiles.tsv")), read(sh.output.join("predict/tiles.tsv")));
}

#[test]
fn failing_predictor_is_runtime_error() {
    let sh = shared();
    let tmp = tempfile::tempdir().unwrap();
    copy_dir(&sh.output, tmp.path());
    let o = run(&["predict", "--input", s(&sh.input), "--output", s(tmp.path()), "--command", "head -c 0; exit 3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_on_expression_itself_gives_unit_rho() {
    let sh = shared();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    copy_dir(&sh.output, out);
    let m = ExpressionMatrix::read(out.join("expression/filtered.tsv")).unwrap();
    let mut rows = Vec::new();
    for (g, gene) in m.genes.iter().enumerate() {
        for (j, sample) in m.samples.iter().enumerate() {
            rows.push(SlideValue {
                slide_id: sample.clone(),
                gene_id: gene.clone(),
                value: Some(m.values[g][j]),
            });
        }
    }
    std::fs::write(out.join("aggregate/slides.tsv"), slide_values_to_tsv(&rows)).unwrap();
    ok(&["stats", "--input", s(&sh.input), "--output", s(out)]);
    let stats = read_stats(out.join("stats/genes.tsv")).unwrap();
    assert!(!stats.is_empty());
    for st in stats {
        assert_eq!(st.rho, Some(1.0), "{}", st.gene_id);
        assert_eq!(st.p, Some(0.0));
    }
}

#[test]
fn downstream_stages_write_their_artifacts() {
    let sh = shared();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    copy_dir(&sh.output, out);
    ok(&["select", "--input", s(&sh.input), "--output", s(out), "--r2-min=-100", "--padj-max", "1"]);
    let sel = read_stats(out.join("stats/selected.tsv")).unwrap();
    assert!(sel.iter().all(|g| g.selected));
    ok(&["lme", "--input", s(&sh.input), "--output", s(out)]);
    let fits = String::from_utf8(read(out.join("lme/fits.tsv"))).unwrap();
    assert!(fits.lines().next().unwrap().starts_with("gene_id"));
    assert!(fits.lines().count() > 1);
    assert!(out.join("lme/slide_rho.tsv").exists());
    ok(&["heatmap", "--input", s(&sh.input), "--output", s(out), "--slide", "SYN-000", "--gene", "LNK00"]);
    let side: serde_json::Value = serde_json::from_slice(&read(out.join("heatmaps/SYN-000/LNK00.json"))).unwrap();
    assert!(side.get("degenerate_range").is_some());
    assert!(out.join("heatmaps/SYN-000/LNK00.png").exists());
    assert_eq!(run(&["heatmap", "--input", s(&sh.input), "--output", s(out), "--gene", "NOPE"]).status.code(), Some(1));
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), target).unwrap();
        }
    }
}
