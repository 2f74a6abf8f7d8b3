use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gvqg_core::concepts::{build_candidate_concepts, filter_concepts, qa_tokens, random_selection};
use gvqg_core::harness::{
    evaluate_checkpoint, run_matrix, train, DataConfig, EvalMode, ExperimentConfig, MatrixConfig, PreparedData,
};
use gvqg_core::metrics::{tokenize, EvalCorpus, EvalReport};
use gvqg_core::models::{scene_input, ConceptResources, PipelineConfig};
use gvqg_core::world::{generate_dataset, read_dataset, write_dataset, Split, WorldConfig};
use gvqg_service::{AppState, Manifest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "gvqg", about = "Guided visual question generation on synthetic desk scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it to a dataset directory.
    Worldgen {
        /// World config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        num_scenes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model with early stopping.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory for the record and best checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score candidate/reference files, or a checkpoint on a dataset split.
    Evaluate {
        /// One tokenized sentence per line.
        #[arg(long, requires = "references", conflicts_with = "checkpoint")]
        candidates: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory written by `worldgen`; a default world is generated when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value = "filtered")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Emit JSON instead of `key = value` lines.
        #[arg(long)]
        json: bool,
    },
    /// Run the 12-row comparison matrix.
    Matrix {
        /// Matrix config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show candidate concepts and the QA-filtered selection.
    Concepts {
        /// Scene from a dataset directory.
        #[arg(long, conflicts_with = "objects")]
        scene: Option<String>,
        #[arg(long, requires = "scene")]
        dataset: Option<PathBuf>,
        /// Space-separated detected object labels.
        #[arg(long)]
        objects: Option<String>,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long)]
        question: Option<String>,
        #[arg(long, default_value = "")]
        answer: String,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Also draw a random selection with this seed.
        #[arg(long)]
        random_seed: Option<u64>,
    },
    /// Serve checkpoints listed in a manifest over HTTP.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn read_toml_or_default<T: Default>(path: Option<&Path>, parse: impl Fn(&str) -> Result<T, gvqg_core::GvqgError>) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(tokenize).collect())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Worldgen {
            config,
            seed,
            num_scenes,
            out,
        } => {
            let mut world: WorldConfig = read_toml_or_default(config.as_deref(), toml_parse::<WorldConfig>)?;
            if let Some(n) = num_scenes {
                world.num_scenes = n;
            }
            let ds = generate_dataset(&world, seed)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} scenes and {} questions to {}", ds.scenes.len(), ds.qa.len(), out.display());
        }
        Command::Train { config, out, seed } => {
            let mut cfg = read_toml_or_default(Some(&config), ExperimentConfig::from_toml)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = PreparedData::from_config(&cfg.data)?;
            fs::create_dir_all(&out)?;
            let (record, _) = train(&cfg, &data, Some(&out))?;
            write_json(&out.join("run.json"), &record)?;
            fs::write(out.join("config.toml"), fs::read_to_string(&config)?)?;
            println!(
                "{}: {} steps, best bleu_4 {:.2} at step {}, status {:?}",
                record.name,
                record.steps,
                record.best_bleu_4 * 100.0,
                record.best_step,
                record.status
            );
            for (mode, report) in &record.reports {
                println!("[{mode}]\n{}", report.to_text());
            }
        }
        Command::Evaluate {
            candidates,
            references,
            checkpoint,
            dataset,
            split,
            mode,
            seed,
            json,
        } => {
            let report = if let (Some(c), Some(r)) = (candidates, references) {
                let cand = read_lines(&c)?;
                let refs = read_lines(&r)?;
                if cand.len() != refs.len() {
                    bail!("{} candidates but {} references", cand.len(), refs.len());
                }
                let mut corpus = EvalCorpus::new("files");
                for (a, b) in cand.into_iter().zip(refs) {
                    corpus.push(a, b);
                }
                EvalReport::compute(&corpus, None)?
            } else if let Some(ck) = checkpoint {
                let data_cfg = DataConfig {
                    dataset_dir: dataset,
                    ..Default::default()
                };
                let data = PreparedData::from_config(&data_cfg)?;
                let split: Split = split.parse()?;
                let mode: EvalMode = mode.parse()?;
                evaluate_checkpoint(&ck, &data, split, mode, seed)?.report
            } else {
                bail!("pass --candidates/--references or --checkpoint");
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Matrix { config, out } => {
            let mut cfg = read_toml_or_default(config.as_deref(), MatrixConfig::from_toml)?;
            cfg.out_dir = Some(out.clone());
            let data = PreparedData::from_config(&cfg.data)?;
            let result = run_matrix(&cfg, &data)?;
            println!("{}", result.table());
            println!(
                "random overlap baseline k/k_o = {:.2}; failures: {}; inference ground-truth reads: {}; wall time {:.0}s",
                result.analytic_random_overlap * 100.0,
                result.failures.len(),
                result.inference_reads,
                result.wall_time_s
            );
        }
        Command::Concepts {
            scene,
            dataset,
            objects,
            caption,
            question,
            answer,
            k,
            random_seed,
        } => {
            let res = ConceptResources::default();
            let (objects, caption, categories) = match (scene, objects) {
                (Some(id), _) => {
                    let ds = match dataset {
                        Some(d) => read_dataset(&d)?,
                        None => generate_dataset(&WorldConfig::default(), 7)?,
                    };
                    let sc = ds.scene(&id).with_context(|| format!("unknown scene {id}"))?;
                    let input = scene_input(sc, ds.config.k_o, &PipelineConfig::default(), &res);
                    (input.detection.labels, input.caption, ds.taxonomy())
                }
                (None, Some(o)) => (tokenize(&o), tokenize(&caption), Default::default()),
                (None, None) => bail!("pass --scene or --objects"),
            };
            let candidates = build_candidate_concepts(&objects, &caption, &res.stopwords);
            println!("candidates: {}", candidates.tokens().join(" "));
            if let Some(q) = question {
                let toks = qa_tokens(&tokenize(&q), &tokenize(&answer), &res.stopwords);
                let sel = filter_concepts(&candidates, &toks, k, &res.embedder)?;
                println!("qa tokens: {}", toks.join(" "));
                println!("selection: {}", sel.concepts.join(" "));
            }
            if let Some(seed) = random_seed {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sel = random_selection(&candidates, k, &categories, &mut rng);
                println!(
                    "random: {} | {}",
                    sel.concepts.join(" "),
                    sel.category.unwrap_or_default()
                );
            }
        }
        Command::Serve { manifest, addr } => {
            let m = Manifest::load(&manifest)?;
            let state = AppState::from_manifest(&m)?;
            tokio::runtime::Runtime::new()?.block_on(gvqg_service::serve(state, addr))?;
        }
    }
    Ok(())
}

fn toml_parse<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, gvqg_core::GvqgError> {
    toml::from_str(text).map_err(|e| gvqg_core::GvqgError::Parse(e.to_string()))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
