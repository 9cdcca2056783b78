//! `xmod`: command-line front end for the cross-modality label tools.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use xmod_core::clustering::{dbscan, DEFAULT_MIN_PTS};
use xmod_core::cmfp::{cmfp, cmfp_rerank, CmfpOptions, DEFAULT_K_TRAIN};
use xmod_core::embedding::{l2_normalize, load_embeddings, save_embeddings, EmbeddingSet, Format, Modality};
use xmod_core::evaluation::rank_metrics;
use xmod_core::pipeline::{associate_sets, run_pipeline, AssociationParams, PipelineConfig};
use xmod_core::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "xmod", version, about = "Cross-modality pseudo-labels, propagation and retrieval metrics")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Density clustering of one embedding file; writes `index,label`.
    Cluster {
        #[arg(long, default_value_t = 0.6)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
        min_pts: usize,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
    /// Cluster both modalities and assign cross-modality labels.
    Associate {
        #[arg(long, default_value_t = 5.0)]
        lambda_ot: f64,
        #[arg(long, default_value_t = 0.6)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_PTS)]
        min_pts: usize,
        /// Propagation neighbors before association; 0 disables it.
        #[arg(long, default_value_t = DEFAULT_K_TRAIN)]
        k_tr: usize,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        inf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-modality feature propagation over a kNN graph.
    Propagate {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        inf: PathBuf,
        #[arg(long)]
        out_vis: PathBuf,
        #[arg(long)]
        out_inf: PathBuf,
    },
    /// Retrieval metrics of queries against a gallery; writes a JSON report.
    Evaluate {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Re-rank with propagation over this many neighbors first.
        #[arg(long, default_value_t = 0)]
        k_te: usize,
        /// Include per-query AP and INP.
        #[arg(long)]
        per_query: bool,
    },
    /// Generate a seeded synthetic pair of embedding files.
    Synth {
        #[arg(long, default_value_t = 20)]
        identities: usize,
        #[arg(long, default_value_t = 10)]
        per_mod: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.8)]
        gap: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_vis: PathBuf,
        #[arg(long)]
        out_inf: PathBuf,
    },
    /// Run the training pipeline from a TOML config; writes a JSON history.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// History path; overrides the config's `history` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<EmbeddingSet> {
    load_embeddings(path, Format::from_path(path)).with_context(|| format!("reading {}", path.display()))
}

fn load_modality(path: &Path, m: Modality) -> Result<EmbeddingSet> {
    let set = load(path)?;
    if let Some(i) = set.modality().iter().position(|&x| x != m) {
        bail!("{}: row {i} is {:?}, expected {m:?}", path.display(), set.modality()[i]);
    }
    Ok(set)
}

fn save(set: &EmbeddingSet, path: &Path) -> Result<()> {
    save_embeddings(set, path, Format::from_path(path)).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn label_or_outlier(l: Option<usize>) -> i64 {
    l.map_or(-1, |v| v as i64)
}

fn cluster(eps: f64, min_pts: usize, input: &Path, out: &Path) -> Result<()> {
    let set = l2_normalize(&load(input)?)?;
    let labels = dbscan(&set, eps, min_pts)?;
    log::info!("{} clusters, {} outliers", labels.k, labels.outlier_count());
    let mut w = create(out)?;
    writeln!(w, "index,label")?;
    for (i, l) in labels.labels.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn associate(params: AssociationParams, vis: &Path, inf: &Path, out: &Path) -> Result<()> {
    let v = load_modality(vis, Modality::Visible)?;
    let r = load_modality(inf, Modality::Infrared)?;
    let a = associate_sets(&v, &r, &params)?;
    let mut w = create(out)?;
    writeln!(w, "index,modality,intra_label,cross_label")?;
    for m in [Modality::Visible, Modality::Infrared] {
        let name = if m == Modality::Visible { "visible" } else { "infrared" };
        for (i, (intra, cross)) in a.labeling(m).labels.iter().zip(a.cross(m)).enumerate() {
            writeln!(w, "{i},{name},{intra},{}", label_or_outlier(*cross))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn propagate(k: usize, vis: &Path, inf: &Path, out_vis: &Path, out_inf: &Path) -> Result<()> {
    let v = l2_normalize(&load_modality(vis, Modality::Visible)?)?;
    let r = l2_normalize(&load_modality(inf, Modality::Infrared)?)?;
    let (pv, pr) = cmfp(&v, &r, &CmfpOptions::new(k))?;
    save(&pv, out_vis)?;
    save(&pr, out_inf)
}

fn evaluate(query: &Path, gallery: &Path, report: &Path, k_te: usize, per_query: bool) -> Result<()> {
    let (q, g) = (load(query)?, load(gallery)?);
    let ids = |s: &EmbeddingSet, p: &Path| -> Result<Vec<i64>> {
        s.identity()
            .iter()
            .enumerate()
            .map(|(i, id)| id.with_context(|| format!("{}: row {i} has no identity", p.display())))
            .collect()
    };
    let (qi, gi) = (ids(&q, query)?, ids(&g, gallery)?);
    let (q, g) = if k_te > 0 {
        cmfp_rerank(&l2_normalize(&q)?, &l2_normalize(&g)?, k_te)?
    } else {
        (q, g)
    };
    let mut r = rank_metrics(&q, &g, &qi, &gi)?;
    if !per_query {
        r = r.without_details();
    }
    log::info!("rank-1 {:.4}, mAP {:.4}, mINP {:.4}", r.rank(1), r.map, r.minp);
    let mut w = create(report)?;
    serde_json::to_writer_pretty(&mut w, &r)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn synth(cfg: SynthConfig, out_vis: &Path, out_inf: &Path) -> Result<()> {
    let set = generate(&cfg)?;
    let (v, _) = set.split_modality(Modality::Visible).context("no visible rows")?;
    let (r, _) = set.split_modality(Modality::Infrared).context("no infrared rows")?;
    save(&v, out_vis)?;
    save(&r, out_inf)
}

/// Relative input paths in a config resolve against the config's directory.
fn resolve_paths(cfg: &mut PipelineConfig, base: &Path) {
    for p in [&mut cfg.visible, &mut cfg.infrared, &mut cfg.visible_maps, &mut cfg.infrared_maps, &mut cfg.history]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = PipelineConfig::from_path(config).with_context(|| format!("loading {}", config.display()))?;
    resolve_paths(&mut cfg, config.parent().unwrap_or(Path::new(".")));
    let out = out
        .or_else(|| cfg.history.clone())
        .unwrap_or_else(|| config.with_extension("history.json"));
    let history = run_pipeline(&cfg)?;
    history.write(&out)?;
    if let Some(r) = &history.retrieval_cmfp {
        log::info!("final mAP with re-ranking {:.4}", r.map);
    }
    Ok(())
}

fn config_threads(cmd: &Command) -> Option<usize> {
    match cmd {
        Command::Run { config, .. } => PipelineConfig::from_path(config).ok()?.threads,
        _ => None,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads.or_else(|| config_threads(&cli.command)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }

    match cli.command {
        Command::Cluster { eps, min_pts, input, out_labels } => cluster(eps, min_pts, &input, &out_labels),
        Command::Associate { lambda_ot, eps, min_pts, k_tr, vis, inf, out } => {
            associate(AssociationParams { eps, min_pts, lambda_ot, k_tr }, &vis, &inf, &out)
        }
        Command::Propagate { k, vis, inf, out_vis, out_inf } => propagate(k, &vis, &inf, &out_vis, &out_inf),
        Command::Evaluate { query, gallery, report, k_te, per_query } => {
            evaluate(&query, &gallery, &report, k_te, per_query)
        }
        Command::Synth { identities, per_mod, dim, gap, noise, seed, out_vis, out_inf } => synth(
            SynthConfig {
                n_identities: identities,
                per_identity: per_mod,
                d: dim,
                modality_gap: gap,
                noise_sigma: noise,
                seed,
            },
            &out_vis,
            &out_inf,
        ),
        Command::Run { config, out } => run(&config, out),
    }
}
