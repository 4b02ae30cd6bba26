//! Command-line front end: synthetic data generation, training,
//! embedding extraction, retrieval evaluation, the centroid-separation
//! probe, and a gradient self-check.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reidmetric::config::ConfigFile;
use reidmetric::data::{self, Dataset, Payload, SampleRecord, SplitRole};
use reidmetric::dump::{self, DumpMeta};
use reidmetric::layers::Mode;
use reidmetric::losses::{self, LossConfig};
use reidmetric::model::{InputShape, Model, ModelConfig};
use reidmetric::numkit::{self, Matrix, Rng};
use reidmetric::trainer::{self, LossKind};
use reidmetric::{Error, Result};

#[derive(Parser)]
#[command(name = "reidmetric", about = "Metric-learning toolkit for identity retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domain-shift datasets from the [generate] config section.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's data.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a manifest-backed dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured objective.
        #[arg(long, value_parser = parse_loss_kind)]
        loss: Option<LossKind>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed every sample of a manifest with a trained checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval evaluation (mAP, CMC) from embedding dumps.
    Eval {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_k: usize,
        /// Also list the top-k gallery rows per query.
        #[arg(long)]
        dump_topk: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mean pairwise cosine distance between identity centroids.
    Centroids {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 10)]
        num_ids: usize,
        #[arg(long, default_value_t = 4)]
        min_images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient check of losses and the model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn parse_loss_kind(s: &str) -> std::result::Result<LossKind, String> {
    match s {
        "softmax" => Ok(LossKind::Softmax),
        "am_softmax" => Ok(LossKind::AmSoftmax),
        "identity" => Ok(LossKind::Identity),
        other => Err(format!(
            "unknown loss {other:?} (expected softmax, am_softmax, or identity)"
        )),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::ConfigMismatch(_)
        | Error::InfeasibleBatch(_)
        | Error::EpochOutOfRange { .. }
        | Error::DimMismatch(..)
        | Error::ShapeMismatch(_)
        | Error::LabelOutOfRange { .. } => 2,
        Error::Parse { .. }
        | Error::MissingPayload(_)
        | Error::EmptyDataset
        | Error::EmptyGallery
        | Error::InsufficientIdentities { .. }
        | Error::InsufficientSamples { .. }
        | Error::StaleCache(_)
        | Error::Format(_)
        | Error::Io(_) => 3,
        Error::NonFiniteLoss { .. } | Error::DegenerateNorm(_) | Error::NoRelevant => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Seed priority: --seed flag, then REIDMETRIC_SEED, then the config.
fn effective_seed(config_seed: u64, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("REIDMETRIC_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("REIDMETRIC_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(config_seed),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(&config, out),
        Command::Train { config, loss, seed, out } => cmd_train(&config, loss, seed, out),
        Command::Embed { checkpoint, manifest, out } => cmd_embed(&checkpoint, &manifest, &out),
        Command::Eval { query, gallery, max_k, dump_topk, report } => {
            cmd_eval(&query, &gallery, max_k, dump_topk, report)
        }
        Command::Centroids { embeddings, num_ids, min_images, seed } => {
            cmd_centroids(&embeddings, num_ids, min_images, seed)
        }
        Command::Gradcheck { seed, corrupt } => cmd_gradcheck(seed, corrupt),
    }
}

fn cmd_generate(config_path: &std::path::Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = ConfigFile::load(config_path)?;
    let generate = cfg
        .generate
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [generate] section".into()))?;
    if generate.domains.is_empty() {
        return Err(Error::Config("[generate] lists no domains".into()));
    }
    let seed = effective_seed(cfg.seed, None)?;
    let out_dir = out.unwrap_or_else(|| cfg.data.out_dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    let specs: Vec<data::DomainSpec> = generate
        .domains
        .iter()
        .map(|d| d.to_domain_spec())
        .collect::<Result<_>>()?;
    let mut rng = Rng::new(seed);
    let datasets = data::gen_synthetic(&specs, generate.shared_prototypes, &mut rng)?;
    for (spec, ds) in specs.iter().zip(&datasets) {
        let manifest = data::write_dataset(&out_dir, &spec.tag, ds)?;
        println!(
            "wrote {} ({} samples, {} identities)",
            manifest.display(),
            ds.records.len(),
            ds.identities().len()
        );
    }

    // provenance: everything needed to regenerate the exact bytes
    #[derive(serde::Serialize)]
    struct Provenance<'a> {
        seed: u64,
        shared_prototypes: bool,
        domains: &'a [data::DomainSpec],
    }
    let prov = Provenance { seed, shared_prototypes: generate.shared_prototypes, domains: &specs };
    let text = toml::to_string_pretty(&prov)
        .map_err(|e| Error::Config(format!("provenance serialization failed: {e}")))?;
    std::fs::write(out_dir.join("provenance.toml"), text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    config_path: &std::path::Path,
    loss: Option<LossKind>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let cfg = ConfigFile::load(config_path)?;
    let mut train_cfg = cfg.to_train_config()?;
    train_cfg.seed = effective_seed(train_cfg.seed, seed)?;
    if let Some(kind) = loss {
        train_cfg.loss_kind = kind;
    }

    let manifest = cfg
        .data
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("config has no data.train_manifest".into()))?;
    let train_data = data::load_manifest(manifest)?;
    let eval_pair = match (&cfg.data.query_manifest, &cfg.data.gallery_manifest) {
        (Some(q), Some(g)) => Some((data::load_manifest(q)?, data::load_manifest(g)?)),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "query_manifest and gallery_manifest must be given together".into(),
            ))
        }
    };

    let out_dir = out.unwrap_or_else(|| cfg.data.out_dir.clone());
    std::fs::create_dir_all(&out_dir)?;
    let eval_ref = eval_pair.as_ref().map(|(q, g)| (q, g));
    let result = trainer::train(&train_cfg, &train_data, eval_ref, Some(&out_dir))?;
    if let Some(last) = result.log.epochs.last() {
        println!(
            "trained {} epochs, final loss {:.6}",
            result.log.epochs.len(),
            last.loss
        );
    }
    println!("checkpoint: {}", out_dir.join("last.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_embed(
    checkpoint: &std::path::Path,
    manifest: &std::path::Path,
    out: &std::path::Path,
) -> Result<ExitCode> {
    let (model, _) = reidmetric::model::read_checkpoint(checkpoint)?;
    let dataset = data::load_manifest(manifest)?;
    let embeddings = trainer::embed_dataset(&model, &dataset)?;
    let meta: Vec<DumpMeta> = dataset
        .records
        .iter()
        .map(|r| DumpMeta { person_id: r.person_id, camera_id: r.camera_id })
        .collect();
    dump::write_dump(out, &embeddings, &meta)?;
    println!(
        "embedded {} samples at dim {} -> {}",
        embeddings.rows(),
        embeddings.cols(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn records_from_meta(meta: &[DumpMeta], role: SplitRole) -> Dataset {
    let records = meta
        .iter()
        .map(|m| SampleRecord {
            payload: Payload::Vector(Vec::new()),
            person_id: m.person_id,
            camera_id: m.camera_id,
            domain_tag: String::new(),
            path: None,
        })
        .collect();
    Dataset::new(records, role)
}

fn cmd_eval(
    query_path: &std::path::Path,
    gallery_path: &std::path::Path,
    max_k: usize,
    dump_topk: Option<usize>,
    report: Option<PathBuf>,
) -> Result<ExitCode> {
    let (qe, qmeta) = dump::read_dump(query_path)?;
    let (ge, gmeta) = dump::read_dump(gallery_path)?;
    let queries = records_from_meta(&qmeta, SplitRole::Query);
    let gallery = records_from_meta(&gmeta, SplitRole::Gallery);
    let res = reidmetric::evalkit::evaluate(&queries.records, &qe, &gallery.records, &ge, max_k)?;

    let mut out = String::new();
    out.push_str(&format!("queries,{}\n", qmeta.len()));
    out.push_str(&format!("valid_queries,{}\n", res.num_valid_queries));
    out.push_str(&format!("mAP,{:.6}\n", res.map));
    for (k, v) in res.cmc.iter().enumerate() {
        out.push_str(&format!("rank-{},{:.6}\n", k + 1, v));
    }
    if let Some(k) = dump_topk {
        for qi in 0..qe.rows() {
            let ranked = reidmetric::evalkit::rank_gallery(qe.row(qi), &ge)?;
            let top: Vec<String> = ranked
                .order
                .iter()
                .take(k)
                .map(|g| g.to_string())
                .collect();
            out.push_str(&format!("topk,{qi},{}\n", top.join(";")));
        }
    }
    match report {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_centroids(
    embeddings_path: &std::path::Path,
    num_ids: usize,
    min_images: usize,
    seed: u64,
) -> Result<ExitCode> {
    let (emb, meta) = dump::read_dump(embeddings_path)?;
    let dataset = records_from_meta(&meta, SplitRole::Gallery);
    let mut rng = Rng::new(seed);
    let sep = reidmetric::evalkit::centroid_separation(&emb, &dataset.records, num_ids, min_images, &mut rng)?;
    println!("centroid_separation,{sep:.6}");
    println!("identities_used,{num_ids}");
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// gradcheck

const GRADCHECK_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

struct Check {
    name: String,
    rel_err: f64,
}

/// Analytic-vs-finite-difference comparison for the losses, taken with
/// respect to the raw (pre-normalization) embeddings and weights.
fn loss_checks(seed: u64, corrupt: bool, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = Rng::new(seed);
    for (name, kind) in [
        ("am_softmax", LossKind::AmSoftmax),
        ("identity_loss", LossKind::Identity),
    ] {
        for case in 0..5 {
            let (batch, dim, classes) = (4, 6, 5);
            let cfg = LossConfig {
                scale: 30.0,
                margin: 0.35,
                alpha: if kind == LossKind::Identity { 0.3 } else { 0.0 },
                ..LossConfig::default()
            };
            let mut emb = Matrix::zeros(batch, dim);
            for i in 0..batch {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                emb.row_mut(i).copy_from_slice(&numkit::l2_normalize(&v)?);
            }
            let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
            let w = Matrix::from_vec(
                dim,
                classes,
                (0..dim * classes).map(|_| rng.normal()).collect(),
            )?;

            let run = |e: &Matrix, w: &Matrix| -> Result<losses::LossOutput> {
                match kind {
                    LossKind::AmSoftmax => losses::am_softmax(e, &labels, w, &cfg),
                    LossKind::Identity => losses::identity_loss(e, &labels, w, &cfg),
                    LossKind::Softmax => unreachable!(),
                }
            };
            let analytic = run(&emb, &w)?;
            let mut grad_e = analytic.grad_embeddings.data().to_vec();
            let mut grad_w = analytic.grad_w.data().to_vec();
            if corrupt {
                for g in grad_e.iter_mut().chain(grad_w.iter_mut()) {
                    *g += 0.05;
                }
            }

            let fd_e = numkit::finite_diff_grad(
                |x| {
                    let m = Matrix::from_vec(batch, dim, x.to_vec()).unwrap();
                    run(&m, &w).unwrap().loss
                },
                emb.data(),
                FD_STEP,
            );
            let fd_w = numkit::finite_diff_grad(
                |x| {
                    let m = Matrix::from_vec(dim, classes, x.to_vec()).unwrap();
                    run(&emb, &m).unwrap().loss
                },
                w.data(),
                FD_STEP,
            );
            out.push(Check {
                name: format!("{name}/case{case}/embeddings"),
                rel_err: numkit::grad_rel_err(&grad_e, &fd_e),
            });
            out.push(Check {
                name: format!("{name}/case{case}/weights"),
                rel_err: numkit::grad_rel_err(&grad_w, &fd_w),
            });
        }
    }
    Ok(())
}

/// End-to-end model input-gradient check under a random linear probe
/// c . f(x) of the embedding.
fn model_checks(seed: u64, corrupt: bool, out: &mut Vec<Check>) -> Result<()> {
    let mut rng = Rng::new(seed ^ 0x9e3779b97f4a7c15);
    let configs = [
        ("vector", ModelConfig {
            input: InputShape::Vector { dim: 7 },
            hidden: vec![10, 9],
            embedding_dim: 6,
            num_classes: 4,
            prelu_init: 0.25,
            use_dropout: false,
            dropout_mu: 0.1,
            dropout_sigma: 0.03,
        }),
        ("image", ModelConfig {
            input: InputShape::Image { channels: 2, height: 6, width: 5 },
            hidden: vec![4, 3],
            embedding_dim: 5,
            num_classes: 4,
            prelu_init: 0.25,
            use_dropout: false,
            dropout_mu: 0.1,
            dropout_sigma: 0.03,
        }),
    ];
    for (name, cfg) in configs {
        for case in 0..3 {
            let model = Model::init(cfg.clone(), &mut rng)?;
            let dim = match cfg.input {
                InputShape::Vector { dim } => dim,
                InputShape::Image { channels, height, width } => channels * height * width,
            };
            let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            let probe: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.normal()).collect();

            let input = model.input_from_flat(&x)?;
            let (_, cache) = model.forward(&input, Mode::Eval, &mut rng)?;
            let (_, grad_input) = model.backward(&cache, &probe)?;
            let mut analytic = grad_input.flat().to_vec();
            if corrupt {
                for g in &mut analytic {
                    *g += 0.05;
                }
            }

            let fd = numkit::finite_diff_grad(
                |x| {
                    let input = model.input_from_flat(x).unwrap();
                    let (emb, _) = model
                        .forward(&input, Mode::Eval, &mut Rng::new(0))
                        .unwrap();
                    numkit::dot(&emb, &probe)
                },
                &x,
                FD_STEP,
            );
            out.push(Check {
                name: format!("model/{name}/case{case}/input"),
                rel_err: numkit::grad_rel_err(&analytic, &fd),
            });
        }
    }
    Ok(())
}

/// Per-layer input and parameter gradients against finite differences,
/// using a random linear probe over the layer output.
fn layer_checks(seed: u64, corrupt: bool, out: &mut Vec<Check>) -> Result<()> {
    use reidmetric::layers::{FeatureMap, Layer, Tensor};
    let mut rng = Rng::new(seed ^ 0x5851f42d4c957f2d);
    let rand_vec = |rng: &mut Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    };
    let cases: Vec<(&str, Layer, Tensor)> = vec![
        (
            "affine",
            Layer::Affine {
                weights: Matrix::from_vec(7, 5, rand_vec(&mut rng, 35))?,
                bias: rand_vec(&mut rng, 5),
            },
            Tensor::Vector(rand_vec(&mut rng, 7)),
        ),
        (
            "conv2d",
            Layer::Conv2d {
                kernel: rand_vec(&mut rng, 3 * 2 * 3 * 3),
                bias: rand_vec(&mut rng, 3),
                out_channels: 3,
                in_channels: 2,
                ksize: 3,
                stride: 2,
                padding: 1,
            },
            Tensor::Map(FeatureMap::from_vec(2, 6, 5, rand_vec(&mut rng, 60))?),
        ),
        (
            "prelu",
            Layer::PRelu { slope: [0.25] },
            Tensor::Vector(rand_vec(&mut rng, 9)),
        ),
        (
            "instance_norm",
            Layer::InstanceNorm { eps: 1e-5 },
            Tensor::Map(FeatureMap::from_vec(3, 4, 4, rand_vec(&mut rng, 48))?),
        ),
        (
            "global_depthwise_pool",
            Layer::GlobalDepthwisePool {
                weights: rand_vec(&mut rng, 3 * 4 * 4),
                channels: 3,
                height: 4,
                width: 4,
            },
            Tensor::Map(FeatureMap::from_vec(3, 4, 4, rand_vec(&mut rng, 48))?),
        ),
        ("l2_head", Layer::L2NormalizeHead, Tensor::Vector(rand_vec(&mut rng, 8))),
        (
            "continuous_dropout",
            Layer::ContinuousDropout { mu: 0.1, sigma: 0.0 },
            Tensor::Vector(rand_vec(&mut rng, 10)),
        ),
    ];

    for (name, layer, template) in cases {
        let mut worst_input = 0.0f64;
        let mut worst_params = 0.0f64;
        for _ in 0..5 {
            // fresh random input per repetition
            let mut x = template.zeros_like();
            let fresh: Vec<f64> = (0..x.flat().len()).map(|_| rng.normal()).collect();
            match &mut x {
                Tensor::Vector(d) => d.copy_from_slice(&fresh),
                Tensor::Map(m) => m.data.copy_from_slice(&fresh),
            }
            let (y0, cache) = layer.forward(&x, Mode::Train, &mut Rng::new(0))?;
            let probe: Vec<f64> = (0..y0.flat().len()).map(|_| rng.normal()).collect();
            let mut grad_out = y0.zeros_like();
            match &mut grad_out {
                Tensor::Vector(d) => d.copy_from_slice(&probe),
                Tensor::Map(m) => m.data.copy_from_slice(&probe),
            }
            let (grad_in, param_grads) = layer.backward(&cache, &grad_out)?;
            let mut analytic_in = grad_in.flat().to_vec();
            if corrupt {
                for g in &mut analytic_in {
                    *g += 0.05;
                }
            }

            let value_of = |x: &Tensor| -> f64 {
                let (y, _) = layer.forward(x, Mode::Train, &mut Rng::new(0)).unwrap();
                numkit::dot(y.flat(), &probe)
            };
            let fd_in = numkit::finite_diff_grad(
                |flat| {
                    let mut xx = x.clone();
                    match &mut xx {
                        Tensor::Vector(d) => d.copy_from_slice(flat),
                        Tensor::Map(m) => m.data.copy_from_slice(flat),
                    }
                    value_of(&xx)
                },
                x.flat(),
                FD_STEP,
            );
            worst_input = worst_input.max(numkit::grad_rel_err(&analytic_in, &fd_in));

            for (bi, block) in layer.params().iter().enumerate() {
                let mut analytic_p = param_grads.0[bi].clone();
                if corrupt {
                    for g in &mut analytic_p {
                        *g += 0.05;
                    }
                }
                let fd_p = numkit::finite_diff_grad(
                    |pvals| {
                        let mut l = layer.clone();
                        l.params_mut()[bi].copy_from_slice(pvals);
                        let (y, _) = l.forward(&x, Mode::Train, &mut Rng::new(0)).unwrap();
                        numkit::dot(y.flat(), &probe)
                    },
                    block,
                    FD_STEP,
                );
                worst_params = worst_params.max(numkit::grad_rel_err(&analytic_p, &fd_p));
            }
        }
        out.push(Check { name: format!("layer/{name}/input"), rel_err: worst_input });
        if !layer.params().is_empty() {
            out.push(Check { name: format!("layer/{name}/params"), rel_err: worst_params });
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<ExitCode> {
    let mut checks = Vec::new();
    layer_checks(seed, corrupt, &mut checks)?;
    loss_checks(seed, corrupt, &mut checks)?;
    model_checks(seed, corrupt, &mut checks)?;
    let mut failures = 0usize;
    for c in &checks {
        let ok = c.rel_err < GRADCHECK_TOL;
        println!(
            "{} {:<40} rel_err={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.rel_err
        );
        if !ok {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("gradcheck: all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck: {failures}/{} checks failed", checks.len());
        Ok(ExitCode::FAILURE)
    }
}
