//! Command-line interface. Every subcommand works on a session directory
//! with the same layout the HTTP service uses.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fusionforge_core::ingest::{write_lines, write_matrix, FeatureEntry, Manifest};
use fusionforge_core::mapping::DimensionMode;
use fusionforge_core::metrics::sweep_csv;
use fusionforge_core::{synthetic, Dataset, DialState, WeightVector};
use parking_lot::Mutex;

use crate::http::{default_grid, parse_weights};
use crate::jobs::Registry;
use crate::pipeline::{self, MapRequest, Monitor, SampleRequest, Target, TransitionRequest, WeightInput};
use crate::store::{Sampler, SessionDir};

#[derive(Debug, Parser)]
#[command(name = "fusionforge", version, about = "User-steerable fusion of multiple feature views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and normalize a dataset into a new session directory.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the unified sample.
    Sample {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Sampler::Kmeans)]
        sampler: Sampler,
        /// Sample size for the random sampler.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Embed the sample: reference layout plus one aligned layout per feature set.
    Map {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, conflicts_with = "m_mode")]
        m: Option<usize>,
        #[arg(long, value_enum)]
        m_mode: Option<MMode>,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Project every item and fuse with fixed weights.
    Propagate {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        weights: String,
    },
    /// Fuse with the given weights or dial position.
    Fuse {
        #[arg(long)]
        session: PathBuf,
        #[command(flatten)]
        weights: WeightArgs,
        #[arg(long, value_enum, default_value_t = Target::Sample)]
        on: Target,
        /// Output file; defaults to `fused_<on>.fmat` in the session.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation tables as CSV on stdout.
    Bench {
        #[command(subcommand)]
        which: Bench,
    },
    /// Mean-shift clustering of a fused embedding.
    Cluster {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long, default_value_t = fusionforge_core::analysis::DEFAULT_QUANTILE)]
        quantile: f64,
        #[arg(long, value_enum, default_value_t = Target::Full)]
        on: Target,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster along a weight path and count flows between steps.
    Transitions {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Target::Full)]
        on: Target,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long, default_value_t = fusionforge_core::analysis::DEFAULT_QUANTILE)]
        quantile: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Linkage-ordered distance heatmap.
    Heatmap {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        weights: Option<String>,
        #[arg(long, value_enum, default_value_t = Target::Sample)]
        on: Target,
        #[arg(long, default_value_t = 200)]
        size: usize,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Write a synthetic dataset with a manifest.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Views for `latent`, groups per attribute for `partitions`.
        #[arg(long, default_value_t = 3)]
        views: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum Bench {
    /// Final stress and alignment per λ.
    LambdaSweep {
        #[arg(long)]
        session: PathBuf,
        /// Comma-separated λ values; defaults to 0, 0.1, …, 1.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// NNM of the fusion against concatenation and distance fusion.
    Nnm {
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 10)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct WeightArgs {
    /// Dial position `x,y`.
    #[arg(long)]
    dial: Option<String>,
    /// Comma-separated weights.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MMode {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Views generated from one shared 2-D manifold.
    Latent,
    /// Two views, each separating items by a different attribute.
    Partitions,
}

/// Prints progress to stderr in 10% steps.
struct StderrProgress {
    last: Mutex<usize>,
}

impl Monitor for StderrProgress {
    fn progress(&self, fraction: f64) {
        let decile = (fraction * 10.0).floor() as usize;
        let mut last = self.last.lock();
        if decile > *last {
            *last = decile;
            eprintln!("progress {}%", decile * 10);
        }
    }

    fn cancelled(&self) -> bool {
        false
    }
}

fn parse_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number `{t}`")))
        .collect()
}

fn parse_point(text: &str) -> anyhow::Result<[f64; 2]> {
    match parse_list(text)?.as_slice() {
        &[x, y] => Ok([x, y]),
        _ => bail!("expected `x,y`, got `{text}`"),
    }
}

fn open(session: &Path) -> anyhow::Result<(SessionDir, crate::store::Snapshot)> {
    let dir = SessionDir::new(session);
    if !dir.exists() {
        bail!("{} is not a session directory", session.display());
    }
    let snap = dir.load()?;
    Ok((dir, snap))
}

fn weights_or_default(snap: &crate::store::Snapshot, text: Option<&str>) -> anyhow::Result<WeightVector> {
    Ok(match text {
        Some(t) => parse_weights(t)?,
        None => pipeline::default_weights(snap),
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { manifest, out } => {
            let dataset = Dataset::load_manifest(&manifest)?;
            let id = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "session".into());
            let snap = pipeline::ingest(&SessionDir::new(&out), &id, &dataset)?;
            println!(
                "ingested {} items, {} feature sets into {}",
                snap.descriptor.n,
                snap.descriptor.features.len(),
                out.display()
            );
        }
        Command::Sample { session, seed, sampler, size } => {
            let (dir, snap) = open(&session)?;
            let next = pipeline::sample(&dir, &snap, &SampleRequest { seed, sampler, size })?;
            println!("sampled {} items", next.sample()?.len());
        }
        Command::Map { session, lambda, m, m_mode, iters, seed } => {
            let (dir, snap) = open(&session)?;
            let req = MapRequest {
                lambda,
                m,
                m_mode: m_mode.map(|mode| match mode {
                    MMode::Max => DimensionMode::MaxIntrinsic,
                    MMode::Min => DimensionMode::MinIntrinsic,
                }),
                iterations: iters,
                seed,
            };
            let monitor = StderrProgress { last: Mutex::new(0) };
            let (_, report) = pipeline::map(&dir, &snap, &req, &monitor)?;
            print!("{}", report.to_csv());
        }
        Command::Propagate { session, weights } => {
            let (dir, snap) = open(&session)?;
            let w = parse_weights(&weights)?;
            let monitor = StderrProgress { last: Mutex::new(0) };
            pipeline::propagate(&dir, &snap, &w, &monitor)?;
            println!("wrote fused.fmat");
        }
        Command::Fuse { session, weights, on, out } => {
            let (dir, snap) = open(&session)?;
            let p = snap.descriptor.features.len();
            let w = match (&weights.dial, &weights.weights) {
                (Some(d), _) => fusionforge_core::fusion::dial_weights(&DialState::with_default_anchors(p, parse_point(d)?)?),
                (None, Some(t)) => parse_weights(t)?,
                (None, None) => bail!("give --dial or --weights"),
            };
            let fused = pipeline::fuse(&snap, &w, on)?;
            let path = out.unwrap_or_else(|| dir.path(format!("fused_{}.fmat", match on {
                Target::Sample => "sample",
                Target::Full => "full",
            })));
            write_matrix(&fused.to_feature_matrix(), &path)?;
            let alphas: Vec<String> = w.alphas().iter().map(|a| format!("{a:.6}")).collect();
            println!("alphas {}", alphas.join(","));
            println!("wrote {}", path.display());
        }
        Command::Bench { which } => match which {
            Bench::LambdaSweep { session, grid, repeats, seed } => {
                let (_, snap) = open(&session)?;
                let grid = match grid {
                    Some(g) => parse_list(&g)?,
                    None => default_grid(),
                };
                print!("{}", sweep_csv(&pipeline::bench_sweep(&snap, &grid, repeats, seed)?));
            }
            Bench::Nnm { session, draws, seed } => {
                let (_, snap) = open(&session)?;
                print!("{}", pipeline::bench_nnm(&snap, draws, seed)?.to_csv());
            }
        },
        Command::Cluster { session, weights, bandwidth, quantile, on, seed } => {
            let (dir, snap) = open(&session)?;
            let w = weights_or_default(&snap, weights.as_deref())?;
            let req = pipeline::ClusterRequest {
                weights: Some(WeightInput::Alphas { alphas: w.alphas().to_vec() }),
                bandwidth,
                quantile,
                on,
                seed,
            };
            let c = pipeline::cluster(&snap, &req)?;
            pipeline::write_clustering(&dir, &c, "clusters.txt")?;
            println!("k {} bandwidth {}", c.k, c.bandwidth);
            println!("wrote clusters.txt");
        }
        Command::Transitions { session, from, to, steps, threshold, on, bandwidth, quantile, seed } => {
            let (dir, snap) = open(&session)?;
            let req = TransitionRequest {
                from: parse_list(&from)?,
                to: parse_list(&to)?,
                steps,
                threshold,
                on,
                bandwidth,
                quantile,
                seed,
            };
            let t = pipeline::transitions(&snap, &req)?;
            pipeline::write_transitions(&dir, &t)?;
            let ks: Vec<String> = t.steps.iter().map(|c| c.k.to_string()).collect();
            println!("groups per step {}", ks.join(","));
            println!("wrote flows.csv");
        }
        Command::Heatmap { session, weights, on, size } => {
            let (dir, snap) = open(&session)?;
            let w = weights_or_default(&snap, weights.as_deref())?;
            let h = pipeline::heatmap(&snap, &w, on, size)?;
            pipeline::write_heatmap(&dir, &h)?;
            println!("wrote order.idx and heatmap.csv ({}x{})", h.size, h.size);
        }
        Command::Serve { port, data, host } => {
            let registry = Arc::new(Registry::open(&data)?);
            let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            runtime.block_on(crate::http::serve(registry, SocketAddr::new(host, port)))?;
        }
        Command::Synth { kind, out, n, views, noise, seed } => {
            let (dataset, attributes) = match kind {
                SynthKind::Latent => (synthetic::latent_views(n, views, noise, seed)?, None),
                SynthKind::Partitions => {
                    let g = synthetic::orthogonal_partitions(n, views, noise, seed)?;
                    (g.dataset, Some((g.attribute_a, g.attribute_b)))
                }
            };
            write_dataset(&dataset, &out)?;
            if let Some((a, b)) = attributes {
                write_lines(&out.join("attribute_a.txt"), &a)?;
                write_lines(&out.join("attribute_b.txt"), &b)?;
            }
            println!("wrote {}", out.join("manifest.toml").display());
        }
    }
    Ok(())
}

/// Write `dataset` as FMAT files plus `manifest.toml` under `out`.
pub fn write_dataset(dataset: &Dataset, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_lines(&out.join("items.txt"), &dataset.item_ids)?;
    let mut features = Vec::new();
    for f in &dataset.feature_sets {
        let file = format!("{}.fmat", f.name);
        write_matrix(f, out.join(&file))?;
        features.push(FeatureEntry { name: f.name.clone(), path: file.into() });
    }
    let labels = match &dataset.labels {
        Some(l) => {
            write_lines(&out.join("labels.txt"), l)?;
            Some("labels.txt".into())
        }
        None => None,
    };
    let manifest = Manifest {
        name: dataset.name.clone(),
        items: "items.txt".into(),
        features,
        labels,
        thumbnails: None,
    };
    manifest.write(&out.join("manifest.toml"))?;
    Ok(())
}
