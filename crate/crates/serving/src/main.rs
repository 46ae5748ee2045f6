use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mpic_core::analysis::{self, AttentionDump};
use mpic_core::store::DYNAMIC_NAMESPACE;
use mpic_serving::bench::{self, TraceSpec};
use mpic_serving::request::{parse_modes, Mode, Request};
use mpic_serving::{server, workload, Engine, ServeConfig};

#[derive(Parser)]
#[command(name = "mpic", version, about = "Position-independent multimodal KV-cache serving")]
struct Cli {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve line-delimited JSON requests over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Run one request from a JSON file, locally or against a server.
    Request {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        server: Option<String>,
    },
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Manage a user's static image library.
    #[command(subcommand)]
    Cache(CacheCmd),
    /// Manage the retrieval library.
    #[command(subcommand)]
    Dynlib(DynlibCmd),
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Sequential per-mode latency over a directory of request files.
    Offline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "mpic:32,cacheblend:15,prefix,fullreuse,nocache")]
        modes: String,
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(long)]
        json: bool,
    },
    /// Synthetic image-count sweep, 1..=max-images images per prompt.
    Sweep {
        #[arg(long, default_value_t = 8)]
        max_images: usize,
        #[arg(long, default_value_t = 64)]
        text_tokens: usize,
        #[arg(long, default_value = "nocache,mpic:32")]
        modes: String,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Poisson-arrival replay at one or more rates.
    Online {
        /// Requests per second; repeat or comma-separate for a sweep.
        #[arg(long, value_delimiter = ',', required = true)]
        rate: Vec<f64>,
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value = "mpic:32")]
        mode: Mode,
        #[command(flatten)]
        templates: TemplateArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        divergent_prefix: bool,
    },
}

#[derive(Args)]
struct TemplateArgs {
    /// Request files to sample from; synthetic prompts otherwise.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    text_tokens: usize,
    #[arg(long, default_value_t = 4)]
    max_tokens: usize,
}

#[derive(Subcommand)]
enum CacheCmd {
    Put {
        #[arg(long)]
        user: String,
        file: PathBuf,
    },
    Ls {
        #[arg(long)]
        user: Option<String>,
    },
    Rm {
        #[arg(long)]
        user: String,
        cache_id: String,
    },
}

#[derive(Subcommand)]
enum DynlibCmd {
    Add { file: PathBuf },
    Ls,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Capture the first output token's attention for a request.
    Dump {
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also keep this layer's full prompt score matrix (for heatmaps).
        #[arg(long)]
        scores_layer: Option<usize>,
    },
    /// CDF of attention to image tokens.
    Cdf {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Cumulative attention over a segment's tokens, per layer.
    Cumsum {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Rank a segment's tokens by stored-versus-recomputed key distance.
    Kvdist {
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        segment: Option<usize>,
        #[arg(long, default_value_t = analysis::DEFAULT_TOP)]
        top: usize,
        /// Adds each token's attention from this dump.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Percentile of a segment's first token among all attention scores.
    Percentile {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        segment: Option<usize>,
    },
    /// Normalized lower-triangular score map of the dumped layer.
    Heatmap {
        #[arg(long)]
        dump: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ServeConfig> {
    Ok(match path {
        Some(p) => ServeConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ServeConfig::default(),
    })
}

fn read_request(path: &Path) -> Result<Request> {
    let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&text)?)
}

fn read_dump(path: &Path) -> Result<AttentionDump> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(AttentionDump::from_bytes(&bytes)?)
}

fn default_segment(dump: &AttentionDump, segment: Option<usize>) -> Result<usize> {
    match segment.or_else(|| dump.first_image_segment()) {
        Some(s) => Ok(s),
        None => bail!("dump has no image segment; pass --segment"),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Serve { listen } => {
            let handle = server::spawn(Arc::new(Engine::new(config)?), listen.as_str())?;
            eprintln!("listening on {}", handle.local_addr());
            loop {
                std::thread::park();
            }
        }
        Command::Request { file, server } => {
            let req = read_request(&file)?;
            let resp = match server {
                Some(addr) => server::send(addr.as_str(), &req)?,
                None => Engine::new(config)?.handle(&req)?,
            };
            print_json(&resp)?;
        }
        Command::Bench(cmd) => bench_cmd(config, cmd)?,
        Command::Cache(cmd) => {
            let engine = Engine::new(config)?;
            match cmd {
                CacheCmd::Put { user, file } => println!("{}", engine.put_image(&user, std::fs::read(&file)?)?),
                CacheCmd::Ls { user } => print_json(&engine.list(user.as_deref()))?,
                CacheCmd::Rm { user, cache_id } => {
                    if !engine.remove_image(&user, &cache_id)? {
                        bail!("{cache_id} is not in {user}'s library");
                    }
                }
            }
        }
        Command::Dynlib(cmd) => {
            let engine = Engine::new(config)?;
            match cmd {
                DynlibCmd::Add { file } => println!("{}", engine.add_dynamic(std::fs::read(&file)?)?),
                DynlibCmd::Ls => print_json(&engine.list(Some(DYNAMIC_NAMESPACE)))?,
            }
        }
        Command::Analyze(cmd) => analyze_cmd(config, cmd)?,
    }
    Ok(())
}

fn bench_cmd(config: ServeConfig, cmd: BenchCmd) -> Result<()> {
    let parallelism = config.serving.parallelism;
    let engine = Arc::new(Engine::new(config)?);
    match cmd {
        BenchCmd::Offline { dataset, modes, runs, json } => {
            let report = bench::run_offline(&engine, &workload::load_dataset(&dataset)?, &parse_modes(&modes)?, runs)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_csv());
                for g in &report.growth {
                    println!("# {}: {:?} (curvature {:.3})", g.mode, g.growth, g.curvature);
                }
            }
        }
        BenchCmd::Sweep { max_images, text_tokens, modes, runs, seed, json } => {
            let ids = workload::install_images(&engine, "bench", max_images, seed)?;
            let dataset = workload::image_count_sweep("bench", &ids, max_images, text_tokens, 1, seed);
            let report = bench::run_offline(&engine, &dataset, &parse_modes(&modes)?, runs)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_csv());
                for g in &report.growth {
                    println!("# {}: {:?} (curvature {:.3})", g.mode, g.growth, g.curvature);
                }
            }
        }
        BenchCmd::Online { rate, duration, mode, templates, seed, divergent_prefix } => {
            let templates = match &templates.dataset {
                Some(dir) => workload::load_dataset(dir)?,
                None => {
                    let ids = workload::install_images(&engine, "bench", templates.images, seed)?;
                    workload::image_count_sweep("bench", &ids, templates.images, templates.text_tokens, templates.max_tokens, seed)
                        .split_off(templates.images.saturating_sub(1))
                }
            };
            let trace = TraceSpec {
                templates,
                mode,
                rate: rate[0],
                duration_s: duration,
                seed,
                divergent_prefix,
            };
            let points = bench::run_online_sweep(&engine, &trace, &rate, parallelism)?;
            println!("rate,requests,output_tokens,mean_ttft_s,median_ttft_s,throughput_tok_s,wall_s");
            for p in points {
                println!(
                    "{},{},{},{:.6},{:.6},{:.3},{:.3}",
                    p.rate, p.requests, p.output_tokens, p.mean_ttft_s, p.median_ttft_s, p.throughput_tok_s, p.wall_s
                );
            }
        }
    }
    Ok(())
}

fn analyze_cmd(config: ServeConfig, cmd: AnalyzeCmd) -> Result<()> {
    match cmd {
        AnalyzeCmd::Dump { request, out, scores_layer } => {
            let engine = Engine::new(config)?;
            let prompt = engine.prompt(&read_request(&request)?)?;
            let dump = AttentionDump::capture(engine.model(), &prompt, scores_layer)?;
            std::fs::write(&out, dump.to_bytes()?)?;
        }
        AnalyzeCmd::Cdf { dump, threshold, layer } => {
            let cdf = analysis::attention_cdf(&read_dump(&dump)?, threshold, layer)?;
            println!("# samples {}, fraction above {threshold:e}: {}", cdf.samples, cdf.fraction_above);
            print!("{}", cdf.to_csv());
        }
        AnalyzeCmd::Cumsum { dump, segment } => {
            let dump = read_dump(&dump)?;
            let segment = default_segment(&dump, segment)?;
            print!("{}", analysis::series_to_csv(&analysis::cumulative_attention(&dump, segment)?));
        }
        AnalyzeCmd::Kvdist { request, segment, top, dump } => {
            let engine = Engine::new(config)?;
            let (prompt, stored, recomputed) = engine.stored_and_recomputed(&read_request(&request)?)?;
            let segment = match segment.or_else(|| prompt.segments().iter().position(|s| s.is_image())) {
                Some(s) => s,
                None => bail!("request has no image segment; pass --segment"),
            };
            let Some(&start) = prompt.starts().get(segment) else {
                bail!("request has {} segments", prompt.segments().len());
            };
            let len = prompt.segments()[segment].len();
            let mut table = analysis::kv_distance_rank(
                &stored.slice_tokens(start, len),
                &recomputed.slice_tokens(start, len),
                top,
            )?;
            if let Some(path) = dump {
                table = table.with_attention(&read_dump(&path)?, segment)?;
            }
            print!("{}", table.to_csv());
        }
        AnalyzeCmd::Percentile { dump, segment } => {
            print!("{}", analysis::percentiles_to_csv(&analysis::percentile_rank(&read_dump(&dump)?, segment)?));
        }
        AnalyzeCmd::Heatmap { dump } => print!("{}", analysis::heatmap_export(&read_dump(&dump)?)?.to_csv()),
    }
    Ok(())
}
