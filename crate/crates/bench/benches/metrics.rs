use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use recfair::catalog::{ArticleMode, SensitiveAttribute};
use recfair::fairness::{
    summarize_attribute, AggregationMode, ScoreKind, SimilarityRow, SimilarityTable,
};
use recfair::metrics::{jaccard_at_k, prag_star_at_k, serp_star_at_k, MetricKind};
use recfair::parser::parse_list;

fn lists(k: usize) -> (Vec<String>, Vec<String>) {
    let r: Vec<String> = (0..k).map(|i| format!("Song {i}")).collect();
    let c: Vec<String> = (0..k)
        .map(|i| format!("Song {}", (i * 7 + 3) % (k + k / 2)))
        .collect();
    (r, c)
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    for k in [10, 25, 100] {
        let (r, cand) = lists(k);
        g.bench_with_input(BenchmarkId::new("jaccard", k), &k, |b, &k| {
            b.iter(|| jaccard_at_k(black_box(&r), black_box(&cand), k))
        });
        g.bench_with_input(BenchmarkId::new("serp_star", k), &k, |b, &k| {
            b.iter(|| serp_star_at_k(black_box(&r), black_box(&cand), k))
        });
        g.bench_with_input(BenchmarkId::new("prag_star", k), &k, |b, &k| {
            b.iter(|| prag_star_at_k(black_box(&r), black_box(&cand), k))
        });
    }
    g.finish();
}

fn parsing(c: &mut Criterion) {
    let mut text = String::from("Here are 25 songs you might enjoy:\n\n");
    for i in 1..=25 {
        text.push_str(&format!(
            "{i}. \"Mock Song {}\" by Someone ({})\n",
            i * 13,
            1990 + i
        ));
    }
    c.bench_function("parse_list/25", |b| {
        b.iter(|| parse_list(black_box(&text), 25))
    });
}

fn summarizing(c: &mut Criterion) {
    let values: Vec<String> = ["Asian", "African", "American"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let attr = SensitiveAttribute::new("Continent", values.clone(), ArticleMode::Bare).unwrap();
    let metric = ScoreKind::Similarity(MetricKind::Jaccard);
    let mut table = SimilarityTable::default();
    for a in 0..500 {
        for (i, v) in values.iter().enumerate() {
            let s = ((a * 31 + i * 17) % 100) as f64 / 100.0;
            table.push(SimilarityRow::scored(
                &format!("anchor {a}"),
                "Continent",
                v,
                metric,
                25,
                s,
            ));
        }
    }
    let mut g = c.benchmark_group("summarize_attribute/500");
    for mode in [
        AggregationMode::MeansThenDisparity,
        AggregationMode::PerAnchorDisparity,
    ] {
        g.bench_function(format!("{mode:?}"), |b| {
            b.iter(|| summarize_attribute(black_box(&table), metric, 25, &attr, mode))
        });
    }
    g.finish();
}

criterion_group!(benches, metrics, parsing, summarizing);
criterion_main!(benches);
