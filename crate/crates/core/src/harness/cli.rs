use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use super::commands::{
    embed_cmd, eval_cmd, pretrain_cmd, protocol_cmd, robustness_cmd, saliency_cmd, synth, train_heads,
};
use super::config::RunConfig;
use crate::data::{DomainStyle, ForgeryFamily, Label, ManifestRole, SyntheticSpec};
use crate::error::Result;
use crate::eval::EmbeddingLayer;
use crate::perturb::Perturbation;

#[derive(Debug, Parser)]
#[command(name = "last", version, about = "Face forgery video detection by latent spatiotemporal adaptation")]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config setting, e.g. `--set pretrain.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Architecture preset: desk-reduced or paper-default [config: preset].
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory [config: out_dir, default runs/default].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed [config: seed, default 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic datasets into <out>/data/<name>.
    Synth(SynthArgs),
    /// Initialise the backbone on real-only videos.
    Pretrain(PretrainArgs),
    /// Train the heads on labelled source and unlabelled target videos.
    Adapt(HeadArgs),
    /// Train the heads on labelled source videos only.
    TrainSourceOnly(HeadArgs),
    /// Score eval manifests and write metric reports.
    Eval(EvalArgs),
    /// Evaluate under all 35 corruption settings plus the clean one.
    Robustness(RobustnessArgs),
    /// Export per-video embeddings as a tab-separated table.
    Embed(EmbedArgs),
    /// Grad-CAM maps for one clip.
    Saliency(SaliencyArgs),
    /// Run a full experiment protocol.
    Protocol(ProtocolArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Render a single dataset from these flags instead of the configured list.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub videos: usize,
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    /// Comma-separated forgery families (seam, flicker, checker); `none` for real-only.
    #[arg(long, default_value = "seam")]
    pub families: String,
    /// clean, noisy or compressed.
    #[arg(long, default_value = "clean")]
    pub style: String,
    /// source, target, pretrain or eval.
    #[arg(long, default_value = "source")]
    pub role: String,
    /// Generator seed [default: the global seed].
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Real-only manifest [config: data.pretrain_manifest].
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// [config: pretrain.epochs, default 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeadArgs {
    /// Backbone checkpoint, usually pretrain.ckpt.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled manifest [config: data.source_manifest].
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Unlabelled manifest, adapt only [config: data.target_manifest].
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Classification weight [config: adapt.lambda, default 0.5].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [config: adapt.epochs, default 10]
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Repeatable [config: data.eval_manifests].
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Also evaluate under `kind:severity`, e.g. `noise:3`. Repeatable.
    #[arg(long = "perturb", value_parser = parse_perturbation)]
    pub perturbations: Vec<Perturbation>,
    /// Clips averaged per video [config: eval.n_eval_clips, default 4].
    #[arg(long)]
    pub clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Row label in the robustness table [default: checkpoint file stem].
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayerArg {
    Z,
    H,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassArg {
    Real,
    Fake,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "z")]
    pub layer: LayerArg,
    /// Output file when a single manifest is given.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Video id [default: first video of the first manifest].
    #[arg(long)]
    pub video: Option<String>,
    /// First frame of the clip.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long, value_enum, default_value = "fake")]
    pub class: ClassArg,
    /// Pixels per grid cell in the PNG strip.
    #[arg(long, default_value_t = 16)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    /// Config file; same as --config.
    pub file: Option<PathBuf>,
}

fn parse_perturbation(s: &str) -> std::result::Result<Perturbation, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

/// Parses argv, with every config default listed at the end of `--help`.
pub fn parse() -> Cli {
    let defaults = format!(
        "Config keys and their defaults (desk-reduced preset):\n\n{}\nUnset by default: data.pretrain_manifest, data.source_manifest, \
         data.target_manifest, protocol.pretrain_manifest, protocol.target_manifest.",
        RunConfig::default().to_flat_text()
    );
    let matches = Cli::command().after_long_help(defaults).get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn csv_list(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none").collect()
}

impl Cli {
    /// The resolved config: file, then `--set`, then global and command flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset={p:?}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        let file = match &self.command {
            Command::Protocol(ProtocolArgs { file: Some(f) }) => Some(f.clone()),
            _ => self.config.clone(),
        };
        let mut c = RunConfig::load(file.as_deref(), &overrides)?;
        if let Some(out) = &self.out {
            c.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        match &self.command {
            Command::Pretrain(a) => {
                set(&mut c.data.pretrain_manifest, &a.manifest);
                if let Some(e) = a.epochs {
                    c.pretrain.epochs = e;
                }
            }
            Command::Adapt(a) | Command::TrainSourceOnly(a) => {
                set(&mut c.data.source_manifest, &a.source);
                set(&mut c.data.target_manifest, &a.target);
                if let Some(l) = a.lambda {
                    c.adapt.lambda = l;
                }
                if let Some(e) = a.epochs {
                    c.adapt.epochs = e;
                }
            }
            Command::Eval(a) => {
                set_list(&mut c.data.eval_manifests, &a.manifests);
                if let Some(k) = a.clips {
                    c.eval.n_eval_clips = k;
                }
            }
            Command::Robustness(RobustnessArgs { manifests, .. })
            | Command::Embed(EmbedArgs { manifests, .. })
            | Command::Saliency(SaliencyArgs { manifests, .. }) => set_list(&mut c.data.eval_manifests, manifests),
            Command::Synth(_) | Command::Protocol(_) => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn run(&self) -> Result<()> {
        let config = self.resolve()?;
        match &self.command {
            Command::Synth(a) => {
                let specs = match &a.name {
                    Some(name) => vec![SyntheticSpec {
                        name: name.clone(),
                        n_videos: a.videos,
                        frames_per_video: a.frames,
                        forgery_families: csv_list(&a.families)
                            .into_iter()
                            .map(str::parse)
                            .collect::<Result<Vec<ForgeryFamily>>>()?,
                        domain_style: a.style.parse::<DomainStyle>()?,
                        seed: a.data_seed.unwrap_or(config.seed),
                        image_size: config.model.image_size,
                        role: a.role.parse::<ManifestRole>()?,
                    }],
                    None => config.datasets.clone(),
                };
                for m in synth(&config, &specs)? {
                    println!("{}\t{} videos", m.name, m.len());
                }
            }
            Command::Pretrain(a) => {
                let ckpt = pretrain_cmd(&config, a.init.as_deref())?;
                println!("pretrain.ckpt {}", ckpt.content_hash());
            }
            Command::Adapt(a) => {
                let ckpt = train_heads(&config, &a.checkpoint, true)?;
                println!("adapt.ckpt {}", ckpt.content_hash());
            }
            Command::TrainSourceOnly(a) => {
                let ckpt = train_heads(&config, &a.checkpoint, false)?;
                println!("source-only.ckpt {}", ckpt.content_hash());
            }
            Command::Eval(a) => {
                for r in eval_cmd(&config, &a.checkpoint, &a.perturbations)? {
                    println!("{}", r.to_text());
                }
            }
            Command::Robustness(a) => {
                let label = a.label.clone().unwrap_or_else(|| {
                    a.checkpoint
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "model".into())
                });
                let rows = robustness_cmd(&config, &a.checkpoint, &label)?;
                print!("{}", crate::eval::robustness_table(&rows));
            }
            Command::Embed(a) => {
                let layer = match a.layer {
                    LayerArg::Z => EmbeddingLayer::Z,
                    LayerArg::H => EmbeddingLayer::H,
                };
                let out = embed_cmd(&config, &a.checkpoint, layer, a.output.as_deref())?;
                println!("{}", out.display());
            }
            Command::Saliency(a) => {
                let class = match a.class {
                    ClassArg::Real => Label::Real,
                    ClassArg::Fake => Label::Fake,
                };
                let out = saliency_cmd(&config, &a.checkpoint, a.video.as_deref(), a.offset, class, a.scale)?;
                println!("{}", out.display());
            }
            Command::Protocol(_) => {
                let outcome = protocol_cmd(&config)?;
                println!("{} cells, reports in {}", outcome.cells.len(), config.out_dir.display());
            }
        }
        Ok(())
    }
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn set_list(slot: &mut Vec<PathBuf>, flag: &[PathBuf]) {
    if !flag.is_empty() {
        *slot = flag.to_vec();
    }
}
