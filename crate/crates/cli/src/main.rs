use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use consistory_core::attention::NuSchedule;
use consistory_core::denoiser::{DenoiserConfig, PromptSpec};
use consistory_core::eval::{pairs_csv, scatter_svg, ScatterPoint};
use consistory_core::io::read_latent;
use consistory_core::pipeline::{
    evaluate_run, generate, invert_anchor, personalize, read_manifest, read_run, reuse_subject, write_run, Anchors,
    EvalSummary, GenerationConfig, InversionConfig, RunManifest, RunOutput,
};
use consistory_core::prompts::{tokenize, PromptSet, PromptSetFile};
use consistory_core::schedule::Sampler;

const THREADS_VAR: &str = "CONSISTORY_THREADS";

#[derive(Parser)]
#[command(name = "consistory", version, about = "Subject-consistent batch generation with a toy diffusion denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(clap::Args)]
struct RunFlags {
    /// Self-attention dropout probability.
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Feature-injection blend strength.
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Number of anchor images (the first K of each set), or `all`.
    #[arg(long, default_value = "2")]
    anchors: String,
    /// Sampler steps.
    #[arg(long, default_value_t = 50)]
    steps: u32,
    #[arg(long, value_enum, default_value_t = SamplerKind::Ddim)]
    sampler: SamplerKind,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 5.0)]
    guidance: f64,
    /// Base seed; defaults to the seed of the prompt set.
    #[arg(long)]
    seed: Option<u64>,
    /// Latent grid side length.
    #[arg(long, default_value_t = 16)]
    latent_side: usize,
    /// Index of the prompt set to use; all sets when omitted.
    #[arg(long)]
    set: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one consistent batch per prompt set.
    Generate {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Re-run a stored batch with new prompts in the non-anchor slots.
    Reuse {
        /// manifest.json or the run directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        /// Prompt file whose first set (or `--set`) supplies the new prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        set: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert two latents and generate new images of their subject.
    Personalize {
        #[arg(long, num_args = 2, required = true)]
        anchors: Vec<PathBuf>,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// DDPM steps for both inversion and generation.
        #[arg(long, default_value_t = 100)]
        steps: u32,
        #[arg(long, default_value_t = 5.0)]
        guidance: f64,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        set: Option<usize>,
    },
    /// Score a stored run and write reports.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Run whose displacement normalizes the diversity score.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Sweep parameters and write a consistency-vs-diversity table.
    Ablate {
        #[arg(long)]
        prompts: PathBuf,
        /// `key=v1,v2;key=…` with keys dropout, alpha, blend (on/off) and
        /// consistent (true/false); the sweep is the Cartesian product.
        #[arg(long, default_value = "dropout=0,0.3,0.5,0.8,1.0")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn main() -> Result<()> {
    init_threads()?;
    match Cli::parse().command {
        Command::Generate { prompts, out, flags } => cmd_generate(&prompts, &out, &flags),
        Command::Reuse {
            manifest,
            prompts,
            set,
            out,
        } => cmd_reuse(&manifest, prompts.as_deref(), set, &out),
        Command::Personalize {
            anchors,
            prompts,
            out,
            steps,
            guidance,
            dropout,
            alpha,
            seed,
            set,
        } => {
            let file = PromptSetFile::load(&prompts).with_context(|| format!("reading {}", prompts.display()))?;
            let set = pick_set(&file, set)?;
            let config = GenerationConfig {
                sampler: Sampler::Ddpm { steps },
                guidance_scale: guidance,
                dropout_p: dropout,
                alpha,
                ..GenerationConfig::default()
            };
            cmd_personalize(&anchors, set, seed.unwrap_or(set.seed), config, &out)
        }
        Command::Eval { run, baseline } => cmd_eval(&run, baseline.as_deref()),
        Command::Ablate {
            prompts,
            grid,
            out,
            flags,
        } => cmd_ablate(&prompts, &grid, &out, &flags),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?;
        ensure!(n > 0, "{THREADS_VAR} must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn pick_set(file: &PromptSetFile, set: Option<usize>) -> Result<&PromptSet> {
    let i = set.unwrap_or(0);
    file.sets
        .get(i)
        .with_context(|| format!("prompt set {i} requested, file has {}", file.sets.len()))
}

fn parse_anchors(s: &str, n: usize) -> Result<Anchors> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Anchors::All);
    }
    let k: usize = s.parse().with_context(|| format!("--anchors {s:?} is neither a count nor `all`"))?;
    ensure!(k >= 1 && k <= n, "--anchors {k} outside 1..={n}");
    Ok(Anchors::Indices((0..k).collect()))
}

fn run_config(set: &PromptSet, flags: &RunFlags) -> Result<GenerationConfig> {
    let denoiser = DenoiserConfig {
        latent_side: flags.latent_side,
        ..DenoiserConfig::default()
    };
    let prompts = set.prompts(denoiser.vocab_size)?;
    let anchors = parse_anchors(&flags.anchors, prompts.len())?;
    let sampler = match flags.sampler {
        SamplerKind::Ddim => Sampler::Ddim { steps: flags.steps },
        SamplerKind::Ddpm => Sampler::Ddpm { steps: flags.steps },
    };
    let config = GenerationConfig {
        sampler,
        guidance_scale: flags.guidance,
        dropout_p: flags.dropout,
        alpha: flags.alpha,
        anchors,
        denoiser,
        ..GenerationConfig::new(prompts, flags.seed.unwrap_or(set.seed))
    };
    config.validate()?;
    Ok(config)
}

/// Run directories: `out` itself for a single set, `out/set_NN` otherwise.
fn selected_sets<'a>(file: &'a PromptSetFile, flags: &RunFlags, out: &Path) -> Result<Vec<(&'a PromptSet, PathBuf)>> {
    match flags.set {
        Some(i) => Ok(vec![(pick_set(file, Some(i))?, out.to_path_buf())]),
        None if file.sets.len() == 1 => Ok(vec![(&file.sets[0], out.to_path_buf())]),
        None => Ok(file
            .sets
            .iter()
            .enumerate()
            .map(|(i, s)| (s, out.join(format!("set_{i:02}"))))
            .collect()),
    }
}

fn report_run(dir: &Path, out: &RunOutput) {
    let m = &out.manifest;
    match &m.metrics {
        Some(s) => println!(
            "{}: {} images, consistency {:.4}, displacement {:.3}",
            dir.display(),
            m.images.len(),
            s.consistency,
            s.displacement
        ),
        None => println!("{}: {} images", dir.display(), m.images.len()),
    }
}

fn cmd_generate(prompts: &Path, out: &Path, flags: &RunFlags) -> Result<()> {
    let file = PromptSetFile::load(prompts).with_context(|| format!("reading {}", prompts.display()))?;
    for (set, dir) in selected_sets(&file, flags, out)? {
        let config = run_config(set, flags)?;
        let run = generate(&config).with_context(|| format!("generating {}", dir.display()))?;
        write_run(&dir, &run).with_context(|| format!("writing {}", dir.display()))?;
        report_run(&dir, &run);
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<RunManifest> {
    Ok(if path.is_dir() {
        read_manifest(path)?
    } else {
        RunManifest::from_json(&std::fs::read_to_string(path)?)?
    })
}

fn cmd_reuse(manifest: &Path, prompts: Option<&Path>, set: Option<usize>, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let new_prompts = match prompts {
        Some(path) => {
            let file = PromptSetFile::load(path).with_context(|| format!("reading {}", path.display()))?;
            Some(pick_set(&file, set)?.prompts(manifest.config.denoiser.vocab_size)?)
        }
        None => None,
    };
    let run = reuse_subject(&manifest, new_prompts)?;
    write_run(out, &run).with_context(|| format!("writing {}", out.display()))?;
    report_run(out, &run);
    for &a in &run.manifest.anchors {
        println!("anchor {a}: {} (unchanged)", run.manifest.images[a].digest);
    }
    Ok(())
}

fn cmd_personalize(anchors: &[PathBuf], set: &PromptSet, seed: u64, mut config: GenerationConfig, out: &Path) -> Result<()> {
    let latents = anchors
        .iter()
        .map(|p| read_latent(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let rows = latents[0].rows();
    let side = (rows as f64).sqrt().round() as usize;
    ensure!(side * side == rows, "anchor latent has {rows} patches, not a square grid");
    config.denoiser = DenoiserConfig {
        latent_side: side,
        ..DenoiserConfig::default()
    };
    for (p, z) in anchors.iter().zip(&latents) {
        ensure!(
            z.shape() == [config.denoiser.patches(), config.denoiser.latent_channels],
            "{} has shape {:?}, expected {}×{}",
            p.display(),
            z.shape(),
            config.denoiser.patches(),
            config.denoiser.latent_channels
        );
    }
    let model = consistory_core::denoiser::DenoiserModel::new(config.denoiser.clone())?;
    let subject = format!("{} {}", set.style, set.subject_description);
    let anchor_prompt = tokenize(&subject, &[set.subject_token.as_str()], config.denoiser.vocab_size)?;
    let steps = config.sampler.steps();
    let inverted = latents
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let inv = InversionConfig {
                steps,
                seed: seed.wrapping_add(i as u64),
                ..InversionConfig::default()
            };
            invert_anchor(&model, z, &anchor_prompt, &inv).with_context(|| format!("inverting {}", anchors[i].display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let prompts: Vec<PromptSpec> = set.prompts(config.denoiser.vocab_size)?;
    let n = prompts.len() as u64;
    config.prompts = prompts;
    config.seeds = (0..n).map(|i| seed.wrapping_add(2 + i)).collect();
    config.run_seed = seed;
    let run = personalize(&inverted, &config)?;
    write_run(out, &run).with_context(|| format!("writing {}", out.display()))?;
    report_run(out, &run);
    Ok(())
}

fn write_reports(dir: &Path, summary: &EvalSummary, points: &[ScatterPoint]) -> Result<()> {
    let reports = dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    std::fs::write(reports.join("eval.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    std::fs::write(reports.join("pairs.csv"), pairs_csv(&summary.diversity, &summary.consistency))?;
    std::fs::write(reports.join("scatter.svg"), scatter_svg(points))?;
    Ok(())
}

fn cmd_eval(run: &Path, baseline: Option<&Path>) -> Result<()> {
    let (manifest, latents) = read_run(run).with_context(|| format!("reading {}", run.display()))?;
    let mut summary = evaluate_run(&manifest, &latents)?;
    let mut points = vec![ScatterPoint {
        label: run.display().to_string(),
        consistency: summary.consistency.aggregate,
        diversity: summary.diversity.aggregate,
    }];
    if let Some(base) = baseline {
        let (bm, bl) = read_run(base).with_context(|| format!("reading {}", base.display()))?;
        let b = evaluate_run(&bm, &bl)?;
        summary.diversity.normalize_by(&b.diversity)?;
        summary.diversity_masked.normalize_by(&b.diversity_masked)?;
        points.push(ScatterPoint {
            label: base.display().to_string(),
            consistency: b.consistency.aggregate,
            diversity: b.diversity.aggregate,
        });
    }
    write_reports(run, &summary, &points)?;
    println!("consistency {:.6}", summary.consistency.aggregate);
    println!("displacement {:.6}", summary.diversity.aggregate);
    println!("displacement_masked {:.6}", summary.diversity_masked.aggregate);
    if let Some(n) = summary.diversity.normalized {
        println!("diversity {n:.6}");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum GridValue {
    Dropout(f64),
    Alpha(f64),
    Blend(bool),
    Consistent(bool),
}

impl GridValue {
    fn apply(&self, c: &mut GenerationConfig) {
        match *self {
            GridValue::Dropout(p) => c.dropout_p = p,
            GridValue::Alpha(a) => c.alpha = a,
            GridValue::Blend(on) => c.nu = if on { NuSchedule::default() } else { NuSchedule::disabled() },
            GridValue::Consistent(on) => c.consistent = on,
        }
    }

    fn label(&self) -> String {
        match self {
            GridValue::Dropout(p) => format!("dropout={p}"),
            GridValue::Alpha(a) => format!("alpha={a}"),
            GridValue::Blend(on) => format!("blend={}", if *on { "on" } else { "off" }),
            GridValue::Consistent(on) => format!("consistent={on}"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => bail!("{key}: {v:?} is not on/off"),
    }
}

/// One axis per `key=v1,v2` clause.
fn parse_grid(spec: &str) -> Result<Vec<Vec<GridValue>>> {
    let mut axes = Vec::new();
    for clause in spec.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        let (key, values) = clause
            .split_once('=')
            .with_context(|| format!("grid clause {clause:?} lacks `=`"))?;
        let key = key.trim();
        let axis = values
            .split(',')
            .map(str::trim)
            .map(|v| -> Result<GridValue> {
                Ok(match key {
                    "dropout" => GridValue::Dropout(v.parse().with_context(|| format!("dropout value {v:?}"))?),
                    "alpha" => GridValue::Alpha(v.parse().with_context(|| format!("alpha value {v:?}"))?),
                    "blend" => GridValue::Blend(parse_bool(key, v)?),
                    "consistent" => GridValue::Consistent(parse_bool(key, v)?),
                    _ => bail!("unknown grid key {key:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        axes.push(axis);
    }
    ensure!(!axes.is_empty(), "empty grid");
    Ok(axes)
}

fn cartesian(axes: &[Vec<GridValue>]) -> Vec<Vec<GridValue>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn cmd_ablate(prompts: &Path, grid: &str, out: &Path, flags: &RunFlags) -> Result<()> {
    let file = PromptSetFile::load(prompts).with_context(|| format!("reading {}", prompts.display()))?;
    let set = pick_set(&file, flags.set)?;
    let base = run_config(set, flags)?;
    let combos = cartesian(&parse_grid(grid)?);
    let mut csv = String::from("run,setting,consistency,displacement,displacement_masked\n");
    let mut points = Vec::new();
    for (i, combo) in combos.iter().enumerate() {
        let mut config = base.clone();
        combo.iter().for_each(|v| v.apply(&mut config));
        let label = combo.iter().map(GridValue::label).collect::<Vec<_>>().join(" ");
        let dir = out.join(format!("runs/{i:02}"));
        let run = generate(&config).with_context(|| format!("ablation run {label}"))?;
        write_run(&dir, &run)?;
        let m = run.manifest.metrics.as_ref().context("run carries no metrics")?;
        csv.push_str(&format!(
            "{i},{label},{},{},{}\n",
            m.consistency, m.displacement, m.displacement_masked
        ));
        points.push(ScatterPoint {
            label: label.clone(),
            consistency: m.consistency,
            diversity: m.displacement,
        });
        println!("{label}: consistency {:.4}, displacement {:.3}", m.consistency, m.displacement);
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.csv"), csv)?;
    std::fs::write(out.join("ablation.svg"), scatter_svg(&points))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_a_product() {
        let axes = parse_grid("dropout=0,0.5; blend=on,off").unwrap();
        let combos = cartesian(&axes);
        assert_eq!(combos.len(), 4);
        assert_eq!(combos[1], vec![GridValue::Dropout(0.0), GridValue::Blend(false)]);
        assert!(parse_grid("speed=1").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn anchor_flag() {
        assert_eq!(parse_anchors("all", 5).unwrap(), Anchors::All);
        assert_eq!(parse_anchors("3", 5).unwrap(), Anchors::Indices(vec![0, 1, 2]));
        assert!(parse_anchors("0", 5).is_err());
        assert!(parse_anchors("6", 5).is_err());
    }
}
