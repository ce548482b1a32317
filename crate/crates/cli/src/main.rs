//! `sncnet`: feature extraction, sparse matching, evaluation and storage
//! arithmetic from the command line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use sncnet::eval::{self, PairEvaluation};
use sncnet::featio::read_pnm_gray;
use sncnet::ncn::{load_weights, save_weights};
use sncnet::pipeline::{self, write_match_csv};
use sncnet::reloc::TemperatureConvention;
use sncnet::{
    extract_patch_descriptors, load_feature_map, match_pair, save_feature_map, ConvNetwork,
    CorrConfig, Homography, MemoryReport, PipelineConfig, RelocConfig, RelocMode,
};

mod selfcheck;

#[derive(Parser)]
#[command(name = "sncnet", version, about = "Sparse neighbourhood-consensus matching")]
struct Cli {
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true, env = "SNC_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dense patch descriptors from a PGM/PPM image.
    Extract {
        image: PathBuf,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 4)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two fine-resolution feature files.
    Match {
        features_a: PathBuf,
        features_b: PathBuf,
        #[command(flatten)]
        opts: MatchOpts,
        /// Match CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean matching accuracy of match files against homographies.
    EvalMma {
        /// Match CSV; repeat together with --homography for several pairs.
        #[arg(long, required = true)]
        matches: Vec<PathBuf>,
        #[arg(long, required = true)]
        homography: Vec<PathBuf>,
        #[arg(long, default_value = "1:10")]
        thresholds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the sparse kernels against dense and brute-force references.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Sparse versus dense storage for a correlation tensor.
    Bench {
        #[arg(long)]
        ha: usize,
        #[arg(long)]
        wa: usize,
        #[arg(long)]
        hb: usize,
        #[arg(long)]
        wb: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Active sites (default: the upper bound).
        #[arg(long)]
        sites: Option<u64>,
    },
    /// Write seeded filter weights.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Hidden channel counts, comma separated.
        #[arg(long, default_value = "16", value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match a list of pairs (`featA featB` per line) and print a JSON report.
    Report {
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        opts: MatchOpts,
        /// Pairs matched concurrently (default: machine parallelism).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Directory for per-pair match CSVs.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MatchOpts {
    /// Filter weights; seeded weights are used when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Keep only A→B neighbours.
    #[arg(long)]
    one_sided: bool,
    /// none, hard or hard+soft
    #[arg(long, default_value = "hard+soft")]
    reloc: RelocMode,
    #[arg(long, default_value_t = 1000)]
    top_n: usize,
    #[arg(long, default_value_t = 10.0)]
    temperature: f32,
    /// Divide scores by the temperature instead of multiplying.
    #[arg(long)]
    divide_temperature: bool,
}

impl MatchOpts {
    fn config(&self) -> Result<PipelineConfig> {
        ensure!(self.k >= 1, "--k must be at least 1, got {}", self.k);
        ensure!(self.top_n >= 1, "--top-n must be at least 1, got {}", self.top_n);
        ensure!(
            self.temperature.is_finite() && self.temperature > 0.0,
            "--temperature must be positive, got {}",
            self.temperature
        );
        Ok(PipelineConfig {
            corr: CorrConfig {
                k: self.k,
                symmetric: !self.one_sided,
            },
            reloc: RelocConfig {
                temperature: self.temperature,
                mode: self.reloc,
                convention: if self.divide_temperature {
                    TemperatureConvention::Divide
                } else {
                    TemperatureConvention::Multiply
                },
            },
            top_n: self.top_n,
            weights: self.weights.clone(),
            workers: 0,
        })
    }

    fn network(&self) -> Result<ConvNetwork> {
        match &self.weights {
            Some(path) => {
                load_weights(path).with_context(|| format!("loading weights {}", path.display()))
            }
            None => Ok(ConvNetwork::seeded(self.seed)),
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    ensure!(n >= 1, "--threads must be at least 1, got {n}");
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn metric(key: &str, value: impl std::fmt::Display) {
    eprintln!("#metric {key}={value}");
}

fn run_match(a: &Path, b: &Path, opts: &MatchOpts, out: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let cfg = opts.config()?;
    let net = opts.network()?;
    let fa = load_feature_map(a).with_context(|| format!("reading {}", a.display()))?;
    let fb = load_feature_map(b).with_context(|| format!("reading {}", b.display()))?;
    let result = match_pair(&fa, &fb, &net, &cfg)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            write_match_csv(&result.matches, &mut w)?;
            w.flush()?;
        }
        None => write_match_csv(&result.matches, io::stdout().lock())?,
    }
    let s = &result.stats;
    metric("wall_s", format!("{:.4}", start.elapsed().as_secs_f64()));
    metric("pipeline_s", format!("{:.4}", s.timings.total_s));
    metric("sites", s.sites);
    metric("site_bound", s.site_bound);
    metric("storage_bytes", s.storage_bytes);
    metric("aligned_storage_bytes", s.aligned_storage_bytes);
    metric("dense_equivalent_bytes", s.dense_equivalent_bytes);
    metric("peak_tensor_bytes", s.peak_tensor_bytes);
    metric("raw_matches", s.raw_matches);
    metric("matches", s.kept_matches);
    Ok(())
}

fn run_eval(
    matches: &[PathBuf],
    homographies: &[PathBuf],
    thresholds: &str,
    out: Option<&Path>,
) -> Result<()> {
    ensure!(
        matches.len() == homographies.len(),
        "got {} --matches but {} --homography",
        matches.len(),
        homographies.len()
    );
    let thresholds = eval::parse_thresholds(thresholds)?;
    let mut pairs = Vec::with_capacity(matches.len());
    for (m, h) in matches.iter().zip(homographies) {
        let file = File::open(m).with_context(|| format!("opening {}", m.display()))?;
        let corr = eval::read_match_csv(BufReader::new(file))
            .with_context(|| format!("reading {}", m.display()))?;
        ensure!(!corr.is_empty(), "{} holds no matches", m.display());
        let text =
            std::fs::read_to_string(h).with_context(|| format!("reading {}", h.display()))?;
        let hom = Homography::parse(&text).with_context(|| format!("parsing {}", h.display()))?;
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        let sequence = m
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into());
        pairs.push(PairEvaluation {
            sequence,
            pair_id: stem(m),
            errors: eval::endpoint_errors(&corr, &hom)?,
        });
    }
    let rows = eval::mma_sweep_report(&pairs, &thresholds)?;
    match out {
        Some(path) => {
            let mut w = create(path)?;
            eval::write_mma_csv(&rows, &mut w)?;
            w.flush()?;
        }
        None => eval::write_mma_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            bail!("{}:{}: expected two paths, got {:?}", path.display(), n + 1, line);
        }
        pairs.push((base.join(fields[0]), base.join(fields[1])));
    }
    ensure!(!pairs.is_empty(), "{} lists no pairs", path.display());
    Ok(pairs)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Extract {
            image,
            patch,
            stride,
            out,
        } => {
            ensure!(patch >= 1, "--patch must be at least 1, got {patch}");
            ensure!(stride >= 1, "--stride must be at least 1, got {stride}");
            let img =
                read_pnm_gray(&image).with_context(|| format!("reading {}", image.display()))?;
            let map = extract_patch_descriptors(&img, patch, stride)?;
            save_feature_map(&map, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "{}x{}x{} descriptors -> {}",
                map.height(),
                map.width(),
                map.channels(),
                out.display()
            );
        }
        Command::Match {
            features_a,
            features_b,
            opts,
            out,
        } => run_match(&features_a, &features_b, &opts, out.as_deref())?,
        Command::EvalMma {
            matches,
            homography,
            thresholds,
            out,
        } => run_eval(&matches, &homography, &thresholds, out.as_deref())?,
        Command::Selfcheck { seed, instances } => {
            ensure!(instances >= 1, "--instances must be at least 1");
            let report = selfcheck::run(seed, instances)?;
            for line in report.lines() {
                println!("{line}");
            }
            if !report.passed() {
                bail!(
                    "selfcheck deviation exceeds {:e}",
                    selfcheck::TOLERANCE
                );
            }
        }
        Command::Bench {
            ha,
            wa,
            hb,
            wb,
            k,
            sites,
        } => {
            let start = Instant::now();
            for (name, v) in [("--ha", ha), ("--wa", wa), ("--hb", hb), ("--wb", wb), ("--k", k)] {
                ensure!(v >= 1, "{name} must be at least 1, got {v}");
            }
            let report = MemoryReport::new([ha, wa, hb, wb], k, sites);
            if let Some(s) = sites {
                ensure!(
                    s <= report.site_bound,
                    "--sites {s} exceeds the bound {}",
                    report.site_bound
                );
            }
            for line in report.to_lines() {
                println!("{line}");
            }
            metric("wall_s", format!("{:.6}", start.elapsed().as_secs_f64()));
        }
        Command::InitWeights { seed, hidden, out } => {
            ensure!(
                hidden.iter().all(|&c| c >= 1),
                "--hidden channel counts must be positive"
            );
            let chain: Vec<usize> = std::iter::once(1).chain(hidden).chain([1]).collect();
            let net = ConvNetwork::seeded_with_channels(seed, &chain);
            save_weights(&net, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Report {
            pairs,
            opts,
            workers,
            out_dir,
        } => {
            let mut cfg = opts.config()?;
            cfg.workers = workers;
            let net = opts.network()?;
            let list = read_pairs(&pairs)?;
            if let Some(dir) = &out_dir {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
            }
            let report = pipeline::match_report(&list, &net, &cfg, out_dir.as_deref())?;
            serde_json::to_writer_pretty(io::stdout().lock(), &report)?;
            println!();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
