use std::fs;
use std::path::{Path, PathBuf};

use recfair::fairness::{AggregationMode, ScoreKind};
use recfair::metrics::MetricKind;
use recfair::{run_audit, Domain, MockModelConfig, RunConfig};

fn anchors(dir: &Path, fixture: &str, n: usize) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(fixture);
    let text = fs::read_to_string(src).unwrap();
    let head: Vec<&str> = text.lines().take(n + 1).collect();
    let p = dir.join(fixture);
    fs::write(&p, head.join("\n") + "\n").unwrap();
    p
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap_or_default()
        .to_string()
}

#[test]
fn movie_run_writes_the_full_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let path = anchors(dir.path(), "movie_anchors.csv", 3);
    let out = dir.path().join("out");
    let mut c = RunConfig::new(Domain::Movie, &path, &out);
    c.k = 10;
    c.ks_sweep = Some(vec![5, 10]);
    c.samples_n = 2;
    c.mock = Some(MockModelConfig {
        bias_strength: 0.4,
        biased_values: ["Old".to_string()].into(),
        ..MockModelConfig::unbiased(5)
    });
    let report = run_audit(&c).unwrap();

    for f in [
        "similarities.csv",
        "summary.csv",
        "ranking.txt",
        "k_sweep.csv",
        "entropy.csv",
        "prompts.jsonl",
        "requests.jsonl",
        "manifest.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        header(&out.join("summary.csv")),
        "domain,metric,k,attribute,stat,value"
    );
    assert!(header(&out.join("similarities.csv"))
        .starts_with("domain,metric,k,attribute,value,anchor,similarity"));
    assert!(!fs::read_dir(&out).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with(".staging")));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(
        manifest["manifest_hash"],
        report.manifest.manifest_hash.as_str()
    );
    assert_eq!(manifest["prompts"], 3 * 31);

    let age = report
        .summary
        .get(ScoreKind::Similarity(MetricKind::Jaccard), 10, "Age")
        .unwrap();
    let gender = report
        .summary
        .get(ScoreKind::Similarity(MetricKind::Jaccard), 10, "Gender")
        .unwrap();
    assert!(
        age.snsr > 0.1,
        "biased attribute should show disparity: {}",
        age.snsr
    );
    assert!(gender.snsr < 0.02);
    let (_, order) = report.ranking.as_ref().unwrap();
    assert_eq!(order[0], "Age");
}

#[test]
fn rerun_replaces_outputs_and_drops_stale_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = anchors(dir.path(), "music_anchors.csv", 2);
    let out = dir.path().join("out");
    let mut c = RunConfig::new(Domain::Music, &path, &out);
    c.k = 5;
    c.ks_sweep = Some(vec![1, 5]);
    run_audit(&c).unwrap();
    let first = fs::read(out.join("summary.csv")).unwrap();
    assert!(out.join("k_sweep.csv").exists());

    c.ks_sweep = None;
    fs::write(out.join("notes.txt"), "kept").unwrap();
    run_audit(&c).unwrap();
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), first);
    assert!(!out.join("k_sweep.csv").exists());
    assert_eq!(fs::read_to_string(out.join("notes.txt")).unwrap(), "kept");
}

#[test]
fn aggregation_modes_agree_on_unbiased_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = anchors(dir.path(), "music_anchors.csv", 3);
    for mode in [
        AggregationMode::MeansThenDisparity,
        AggregationMode::PerAnchorDisparity,
    ] {
        let mut c = RunConfig::new(Domain::Music, &path, dir.path().join(format!("{mode:?}")));
        c.k = 10;
        c.aggregation_mode = mode;
        let report = run_audit(&c).unwrap();
        assert!(report
            .summary
            .entries
            .iter()
            .all(|e| e.mode == mode && e.snsr < 0.02));
    }
}
