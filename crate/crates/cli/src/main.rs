use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use ddfnet::ablation::{ablation_csv, label, run_ablation};
use ddfnet::branch::{write_trace_csv, AttributeId};
use ddfnet::config::{Profile, RunConfig};
use ddfnet::eval::{attribute_report, attribute_table_csv, curves_csv, precision_plot, success_plot};
use ddfnet::image::heatmap;
use ddfnet::model::Topology;
use ddfnet::synth::{audit_dataset, make_attribute_subsets, Dataset};
use ddfnet::trace::{segment_means, trace_clip};
use ddfnet::track::track_clips;
use ddfnet::train::{append_log, run_stage_by_name, Checkpoint, Stage, TrainContext};

#[derive(Parser)]
#[command(name = "ddfnet", version, about = "RGB-thermal tracking with dynamic disentangled fusion")]
struct Cli {
    /// TOML file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paper-default or toy.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "DDFNET_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration and its digest.
    Config,
    /// Generate the attribute-tagged synthetic splits.
    Generate {
        /// train, val, test or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Run one training stage.
    Train {
        /// 1-GEN, 1-ATTR-<EI|TC|OCC|LR|SA>, 2 or 3.
        #[arg(long)]
        stage: String,
        /// Checkpoint to continue from; defaults to the latest one in the output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Track a split and write metric reports.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Center-error threshold in pixels.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Per-frame gate tables and feature-map heat maps for one clip.
    Trace {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        clip: String,
        /// Restrict to one branch.
        #[arg(long)]
        branch: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate one model per DDF layer set.
    Ablate {
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = match e.downcast_ref::<ddfnet::Error>() {
                Some(de) => (de.category(), de.exit_code()),
                None => ("io", 7),
            };
            eprintln!("error[{category}]: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let profile = cli.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p, profile)?,
        None => RunConfig::profile(profile.unwrap_or(Profile::Toy)),
    };
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    if let Some(o) = &cli.out {
        rc.out_dir = o.clone();
    }
    rc.validate()?;
    Ok(rc)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let rc = load_config(&cli)?;
    match cli.command {
        Command::Config => {
            print!("{}", rc.to_toml()?);
            println!("# digest {}", rc.digest());
            Ok(())
        }
        Command::Generate { split } => cmd_generate(&rc, &split),
        Command::Train { stage, resume } => cmd_train(&rc, &stage, resume.as_deref()),
        Command::Eval { checkpoint, split, threshold } => cmd_eval(&rc, checkpoint.as_deref(), &split, threshold),
        Command::Trace { checkpoint, clip, branch, split } => cmd_trace(&rc, checkpoint.as_deref(), &clip, branch.as_deref(), &split),
        Command::Ablate { iterations } => cmd_ablate(&rc, iterations),
    }
}

fn data_dir(rc: &RunConfig, split: &str) -> PathBuf {
    rc.out_dir.join("data").join(split)
}

fn load_split(rc: &RunConfig, split: &str) -> anyhow::Result<Dataset> {
    let dir = data_dir(rc, split);
    Dataset::load(&dir).with_context(|| format!("loading {} (run `generate` first)", dir.display()))
}

fn latest_path(rc: &RunConfig) -> PathBuf {
    rc.out_dir.join("checkpoints").join("latest.json")
}

fn load_checkpoint(rc: &RunConfig, path: Option<&Path>) -> anyhow::Result<Checkpoint> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| latest_path(rc));
    Checkpoint::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn write_config(rc: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&rc.out_dir)?;
    fs::write(rc.out_dir.join("config.toml"), format!("{}# digest {}\n", rc.to_toml()?, rc.digest()))?;
    Ok(())
}

fn cmd_generate(rc: &RunConfig, which: &str) -> anyhow::Result<()> {
    let splits: Vec<&str> = match which {
        "all" => vec!["train", "val", "test"],
        s => vec![s],
    };
    write_config(rc)?;
    for split in splits {
        let counts = rc.data.counts(split)?;
        let mut ds = make_attribute_subsets(&rc.scene, counts, rc.seed, split)?;
        for c in ds.clips.values_mut() {
            c.storage = rc.data.storage;
        }
        audit_dataset(&ds)?;
        let dir = data_dir(rc, split);
        ds.save(&dir)?;
        write_json(
            &dir.join("meta.json"),
            &json!({ "config_digest": rc.digest(), "index_digest": ds.index.digest(), "clips": ds.clips.len() }),
        )?;
        log::info!("{split}: {} clips in {} subsets -> {}", ds.clips.len(), ds.index.subsets.len(), dir.display());
    }
    Ok(())
}

fn cmd_train(rc: &RunConfig, stage: &str, resume: Option<&Path>) -> anyhow::Result<()> {
    let stage: Stage = stage.parse()?;
    let ckpt = match (stage, resume) {
        (_, Some(p)) => Some(load_checkpoint(rc, Some(p))?),
        (Stage::Gen, None) => None,
        (_, None) => {
            let p = latest_path(rc);
            if p.exists() {
                Some(load_checkpoint(rc, Some(&p))?)
            } else {
                None
            }
        }
    };
    let data = load_split(rc, "train")?;
    let ctx = TrainContext { training: &rc.training, seed: rc.seed, config_digest: rc.digest() };
    let prior = ckpt.as_ref().map_or(0, |c| c.lineage.len());
    let result = run_stage_by_name(stage, &rc.model, ckpt.as_ref(), &data, &ctx)?;
    let new_records = &result.checkpoint.lineage[prior..];
    let epochs: Vec<_> = new_records.iter().flat_map(|r| r.epochs.clone()).collect();
    fs::create_dir_all(&rc.out_dir)?;
    append_log(&rc.out_dir.join("train_log.csv"), &epochs)?;
    let dir = rc.out_dir.join("checkpoints");
    let path = dir.join(format!("{stage}.json"));
    result.checkpoint.save(&path)?;
    result.checkpoint.save(&latest_path(rc))?;
    if let Some(last) = epochs.last() {
        log::info!("stage {stage}: {} epochs, final loss {:.5}", epochs.len(), last.loss);
    }
    log::info!("checkpoint {} ({})", path.display(), result.checkpoint.digest()?);
    Ok(())
}

fn checkpoint_topology(ck: &Checkpoint) -> anyhow::Result<Topology> {
    ck.stages().last().map(|s| s.topology()).ok_or_else(|| anyhow!(ddfnet::Error::Lineage("checkpoint has no trained stage".into())))
}

fn cmd_eval(rc: &RunConfig, checkpoint: Option<&Path>, split: &str, threshold: Option<f64>) -> anyhow::Result<()> {
    let threshold = threshold.unwrap_or(rc.eval.threshold);
    if !(threshold >= 0.0) {
        bail!(ddfnet::Error::Config(format!("threshold {threshold} must be >= 0")));
    }
    let ck = load_checkpoint(rc, checkpoint)?;
    let topology = checkpoint_topology(&ck)?;
    let model = ck.to_model()?;
    let data = load_split(rc, split)?;
    let clips = data.split("all")?;
    let trajs = track_clips(&clips, &model, topology, &rc.tracker)?;
    let report = attribute_report(&trajs, &data.clips, threshold, rc.eval.mode_max)?;
    let dir = rc.out_dir.join("eval").join(split);
    fs::create_dir_all(dir.join("trajectories"))?;
    for t in &trajs {
        t.save(&dir.join("trajectories").join(format!("{}.txt", t.clip_id)))?;
    }
    let digest = rc.digest();
    write_json(
        &dir.join("report.json"),
        &json!({
            "config_digest": digest,
            "checkpoint_digest": ck.digest()?,
            "stage": ck.stages().last().map(|s| s.to_string()),
            "split": split,
            "threshold": threshold,
            "mode_max": rc.eval.mode_max,
            "report": report,
        }),
    )?;
    fs::write(dir.join("curves.csv"), curves_csv(&report.overall))?;
    fs::write(dir.join("attributes.csv"), attribute_table_csv(&report))?;
    let stamp = format!("<!-- config {digest} -->\n");
    fs::write(dir.join("precision.svg"), stamp.clone() + &precision_plot(&report.overall))?;
    fs::write(dir.join("success.svg"), stamp + &success_plot(&report.overall))?;
    let o = &report.overall;
    println!("{split}: PR {:.4} SR {:.4} NPR {:.4} over {} frames ({} sequences)", o.pr, o.sr, o.npr, o.frames, o.sequences.len());
    Ok(())
}

fn cmd_trace(rc: &RunConfig, checkpoint: Option<&Path>, clip_id: &str, branch: Option<&str>, split: &str) -> anyhow::Result<()> {
    let branches: Vec<AttributeId> = match branch {
        Some(b) => vec![b.parse()?],
        None => AttributeId::ALL.to_vec(),
    };
    let ck = load_checkpoint(rc, checkpoint)?;
    let model = ck.to_model()?;
    let data = load_split(rc, split)?;
    let clip = data
        .clips
        .get(clip_id)
        .ok_or_else(|| anyhow!(ddfnet::Error::Data(format!("clip {clip_id} not in split {split}"))))?;
    let n = clip.len();
    let dump_frames = [0, n / 2, n - 1];
    let tr = trace_clip(&model, clip, &branches, &dump_frames)?;
    let dir = rc.out_dir.join("trace").join(clip_id);
    fs::create_dir_all(dir.join("heatmaps"))?;
    let mut segments = String::from("layer,branch,segment,w_sae_rgb,w_cae_rgb,w_sae_tir,w_cae_tir,w_sfu\n");
    for lt in &tr.layers {
        for (attr, rows) in &lt.gates {
            let f = fs::File::create(dir.join(format!("gates_l{}_{attr}.csv", lt.layer)))?;
            write_trace_csv(std::io::BufWriter::new(f), rows)?;
            if let Ok((a, b)) = segment_means(rows, n / 2) {
                for (name, m) in [("first", a), ("second", b)] {
                    let vals: Vec<String> = m.iter().map(|v| v.to_string()).collect();
                    segments.push_str(&format!("{},{attr},{name},{}\n", lt.layer, vals.join(",")));
                }
            }
        }
    }
    fs::write(dir.join("segments.csv"), segments)?;
    for d in &tr.dumps {
        heatmap(&d.map).save_png(&dir.join("heatmaps").join(format!("f{:03}_l{}_{}.png", d.frame, d.layer, d.name)))?;
    }
    write_json(
        &dir.join("meta.json"),
        &json!({
            "config_digest": rc.digest(),
            "checkpoint_digest": ck.digest()?,
            "clip": clip_id,
            "frames": n,
            "branches": branches,
            "dump_frames": dump_frames,
        }),
    )?;
    log::info!("trace of {clip_id}: {n} frames, {} heat maps -> {}", tr.dumps.len(), dir.display());
    Ok(())
}

fn cmd_ablate(rc: &RunConfig, iterations: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = rc.ablation.clone();
    if let Some(i) = iterations {
        cfg.iterations = i;
    }
    let train = load_split(rc, "train")?;
    let test = load_split(rc, "test")?;
    let rows = run_ablation(
        &cfg,
        &rc.model,
        &train.split("all")?,
        &test.split("all")?,
        &rc.training,
        &rc.tracker,
        rc.eval.threshold,
        rc.eval.mode_max,
        rc.seed,
    )?;
    let dir = rc.out_dir.join("ablation");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    let table: BTreeMap<String, _> = rows.iter().map(|r| (label(&r.ddf_layers), r)).collect();
    write_json(&dir.join("ablation.json"), &json!({ "config_digest": rc.digest(), "ablation": cfg, "rows": table }))?;
    for r in &rows {
        println!("{:>10}  PR {:.4}  SR {:.4}  NPR {:.4}", label(&r.ddf_layers), r.pr, r.sr, r.npr);
    }
    Ok(())
}
