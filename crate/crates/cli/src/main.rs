use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recfair::gateway::{mock_recommend, MockModelConfig, ProviderKind};
use recfair::metrics::{similarity, MetricKind};
use recfair::parser::parse_list;
use recfair::prompt::{AttrValue, Language, PromptRenderer};
use recfair::runner::prepare_batch;
use recfair::{run_audit, Domain, RunConfig, RunError};

#[derive(Parser)]
#[command(
    name = "audit",
    version,
    about = "Fairness and uncertainty audits for LLM recommenders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an audit described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `mock` or `live_http`.
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Sets both the run seed and the mock seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        domain: Option<Domain>,
    },
    /// Compare two saved lists with every metric.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "cand")]
        candidate: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Print mock completions.
    MockServe {
        /// Dump the whole prompt batch of this config as JSON lines.
        #[arg(long, conflicts_with_all = ["anchor", "value"])]
        config: Option<PathBuf>,
        #[arg(long, default_value = "Michael Jackson")]
        anchor: String,
        /// `Attribute=Value`, e.g. `Continent=African`.
        #[arg(long)]
        value: Option<String>,
        #[arg(long, default_value = "music")]
        domain: Domain,
        #[arg(long, default_value_t = 25)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Values the mock is biased against; repeatable.
        #[arg(long)]
        biased: Vec<String>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        samples: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            provider,
            k,
            seed,
            samples,
            out,
            domain,
        } => cmd_run(config, provider, k, seed, samples, out, domain),
        Command::Metrics {
            reference,
            candidate,
            k,
        } => cmd_metrics(&reference, &candidate, k),
        Command::MockServe {
            config,
            anchor,
            value,
            domain,
            k,
            seed,
            beta,
            biased,
            noise,
            samples,
        } => {
            let mock = MockModelConfig {
                seed,
                bias_strength: beta,
                biased_values: biased.into_iter().collect(),
                noise_temperature: noise,
                ..MockModelConfig::unbiased(seed)
            };
            match config {
                Some(path) => cmd_mock_batch(&path, samples),
                None => cmd_mock_one(&anchor, value.as_deref(), domain, k, &mock, samples),
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type CmdResult = Result<(), (u8, String)>;

fn run_err(e: RunError) -> (u8, String) {
    (e.exit_code() as u8, format!("{} error: {e}", e.kind()))
}

fn usage(msg: impl Into<String>) -> (u8, String) {
    (2, msg.into())
}

fn cmd_run(
    path: PathBuf,
    provider: Option<String>,
    k: Option<usize>,
    seed: Option<u64>,
    samples: Option<u32>,
    out: Option<PathBuf>,
    domain: Option<Domain>,
) -> CmdResult {
    let mut cfg = RunConfig::from_toml_file(&path).map_err(run_err)?;
    if let Some(p) = provider {
        cfg.provider.kind = match p.as_str() {
            "mock" => ProviderKind::Mock,
            "live" | "live_http" => ProviderKind::LiveHttp,
            other => {
                return Err(usage(format!(
                    "unknown provider `{other}` (expected mock or live_http)"
                )))
            }
        };
    }
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
        if let Some(m) = &mut cfg.mock {
            m.seed = seed;
        }
    }
    if let Some(n) = samples {
        cfg.samples_n = n;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(d) = domain {
        cfg.domain = d;
    }

    let report = run_audit(&cfg).map_err(run_err)?;
    let m = &report.manifest;
    println!(
        "wrote {} to {}",
        m.outputs.join(", "),
        report.output_dir.display()
    );
    println!(
        "{} prompts, {} provider requests, {} cache hits, {} content errors, {} parse failures",
        m.prompts, m.gateway.requests, m.gateway.cache_hits, m.content_errors, m.parse_failures
    );
    if let Some((kind, order)) = &report.ranking {
        println!("ranked by SNSV in {kind}@{}: {}", cfg.k, order.join(" > "));
    }
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn read_list(path: &Path, k: usize) -> Result<Vec<String>, (u8, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let (list, _) = parse_list(&text, k).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(list.items().to_vec())
}

fn cmd_metrics(reference: &Path, candidate: &Path, k: usize) -> CmdResult {
    if k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let r = read_list(reference, k)?;
    let c = read_list(candidate, k)?;
    println!("metric,k,value");
    for m in MetricKind::ALL {
        let v = similarity(m, &r, &c, k)
            .map(|s| format!("{:.6}", s.value))
            .unwrap_or_else(|| "undefined".to_string());
        println!("{m},{k},{v}");
    }
    Ok(())
}

fn cmd_mock_one(
    anchor: &str,
    value: Option<&str>,
    domain: Domain,
    k: usize,
    mock: &MockModelConfig,
    samples: u32,
) -> CmdResult {
    let r = PromptRenderer::default();
    let instance = match value {
        None => r.render_neutral(anchor, domain, k, Language::En),
        Some(spec) => {
            let (attr, val) = spec
                .split_once('=')
                .ok_or_else(|| usage(format!("--value `{spec}` is not Attribute=Value")))?;
            r.render_sensitive(anchor, &AttrValue::new(attr, val), domain, k, Language::En)
        }
    }
    .map_err(|e| usage(e.to_string()))?;
    println!("# {}", instance.rendered_text);
    for s in 0..samples.max(1) {
        let text = mock_recommend(&instance, mock, s).map_err(|e| usage(e.to_string()))?;
        if samples > 1 {
            println!("## sample {s}");
        }
        print!("{text}");
    }
    Ok(())
}

fn cmd_mock_batch(path: &Path, samples: u32) -> CmdResult {
    let cfg = RunConfig::from_toml_file(path).map_err(run_err)?;
    let mock = cfg
        .mock
        .clone()
        .unwrap_or_else(|| MockModelConfig::unbiased(cfg.seed));
    let prepared = prepare_batch(&cfg).map_err(run_err)?;
    for inst in &prepared.batch.instances {
        for s in 0..samples.max(1) {
            let raw = mock_recommend(inst, &mock, s).map_err(|e| usage(e.to_string()))?;
            let line = serde_json::json!({
                "instance_id": inst.sample_id(s),
                "sample_index": s,
                "prompt": inst.rendered_text,
                "raw_text": raw,
            });
            println!("{line}");
        }
    }
    Ok(())
}
