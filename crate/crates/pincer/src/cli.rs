//! Command line: every command reads one run config; flags override paths.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pincer_core::datagen::{check_pi_integrity, generate_pairs, synth_catalog, to_catalog, to_training_pairs, Split};
use pincer_core::encoders::{Embedding, Space};
use pincer_core::eval::{evaluate, EvalQuery};
use pincer_core::features::FeatureStore;
use pincer_core::model::{Catalog, Model, Stage};
use pincer_core::retrieval::{Pipeline, ProductIndex, SearchMode};
use pincer_core::stage1::{train_stage1, TrainingPair};
use pincer_core::stage2::train_stage2;
use pincer_core::Error as CoreError;

use crate::archive;
use crate::bench;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{split_name, DatasetDir};
use crate::error::{Context, Error, Result};
use crate::lock::DirLock;
use crate::metrics::{self, EvalRecord};
use crate::store_file;

pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const FEATURES: &str = "features.bin";
pub const INDEX: &str = "index.emb";
pub const STAGE1_METRICS: &str = "metrics-stage1.jsonl";
pub const STAGE2_METRICS: &str = "metrics-stage2.jsonl";
pub const BENCH: &str = "bench.json";

#[derive(Debug, Parser)]
#[command(name = "pincer", version, about = "Purchase-intention aware product retrieval")]
pub struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `data_dir`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic catalog, pairs and relevance files.
    Datagen,
    /// Train stage 1 (encoders + intents) or stage 2 (decoder).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Product index operations.
    Index {
        #[command(subcommand)]
        action: IndexAction,
    },
    /// Top-k products for one query.
    Retrieve {
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        clustered: bool,
        #[arg(long)]
        n_probe: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Precision/recall at 10, 20, 50, 100 over a split.
    Eval {
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
        #[arg(long)]
        n_probe: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report path (default: `<out>/eval-<stage>-<mode>.json`).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Latency of full versus clustered retrieval over the test queries.
    Bench {
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long)]
        n_probe: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write embeddings of one space as an archive.
    ExportEmbeddings {
        #[arg(long, default_value = "concatenated")]
        space: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexAction {
    /// Embed every catalog product with the trained encoders.
    Build {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Checkpoint to use (default: stage 2 if present, else stage 1).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Full,
    Clustered,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

impl From<ModeArg> for SearchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => SearchMode::Full,
            ModeArg::Clustered => SearchMode::Clustered,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    data: DatasetDir,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| Error::config("missing --config <path>"))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(d) = &cli.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(o) = &cli.out {
            cfg.output_dir = o.clone();
        }
        Ok(Self {
            data: DatasetDir::new(&cfg.data_dir),
            out: cfg.output_dir.clone(),
            cfg,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn catalog(&self) -> Result<Catalog> {
        let products = self.data.catalog()?;
        to_catalog(&products, self.cfg.vocab_size, self.cfg.patch_grid, self.cfg.histogram_bins)
            .at(&self.data.path(crate::dataset::CATALOG))
    }

    fn pairs(&self, split: Split) -> Result<Vec<TrainingPair>> {
        let pairs = self.data.pairs(split)?;
        to_training_pairs(&pairs, self.cfg.vocab_size).at(&self.data.path(&crate::dataset::pairs_file(split)))
    }

    fn eval_queries(&self, split: Split) -> Result<Vec<(String, EvalQuery)>> {
        let qrels = self.data.qrels(split)?;
        let path = self.data.path(crate::dataset::QRELS);
        qrels
            .into_iter()
            .map(|(q, relevant)| {
                let tokens = pincer_core::encoders::tokenize(&q, self.cfg.vocab_size).at(&path)?;
                Ok((
                    q,
                    EvalQuery {
                        query: pincer_core::encoders::TextInput::Tokens(tokens),
                        relevant,
                    },
                ))
            })
            .collect()
    }

    /// Explicit path, else stage 2 when present, else stage 1.
    fn checkpoint_path(&self, args: &ModelArgs) -> PathBuf {
        if let Some(p) = &args.checkpoint {
            return p.clone();
        }
        let s2 = self.out_path(STAGE2_CHECKPOINT);
        if s2.exists() {
            s2
        } else {
            self.out_path(STAGE1_CHECKPOINT)
        }
    }

    fn model(&self, args: &ModelArgs) -> Result<(Model, PathBuf)> {
        let path = self.checkpoint_path(args);
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.config.model_config() != self.cfg.model_config() {
            return Err(Error::config(format!(
                "checkpoint {} was trained with a different architecture (d, k_intents, vocab_size, token_dim, dropout, decoder_*, histogram_bins or seed)",
                path.display()
            )));
        }
        Ok((ckpt.to_model().at(&path)?, path))
    }

    fn features_for(&self, model: &Model) -> Result<Option<FeatureStore>> {
        if model.stage() != Stage::Two {
            return Ok(None);
        }
        let path = self.out_path(FEATURES);
        if !path.exists() {
            return Err(Error::at(&path, CoreError::State("feature store missing; rerun `train --stage 2`".into())));
        }
        store_file::load(&path, Some(model.config.d)).map(Some)
    }

    fn index(&self, model: &Model) -> Result<ProductIndex> {
        let path = self.out_path(INDEX);
        if !path.exists() {
            return Err(Error::at(&path, CoreError::State("product index missing; run `index build` first".into())));
        }
        let a = archive::read_archive(&path)?;
        if a.space != Space::Concatenated || a.dim != model.config.concat_dim() {
            return Err(Error::at(
                &path,
                CoreError::Format(format!(
                    "index must hold concatenated vectors of width {}, found {} of width {}",
                    model.config.concat_dim(),
                    a.space.as_str(),
                    a.dim
                )),
            ));
        }
        let ids = a.ids.ok_or_else(|| Error::at(&path, CoreError::Format("index archive has no ids".into())))?;
        ProductIndex::from_parts(a.dim, ids, a.values)
            .and_then(|i| i.with_clusters(&model.intent_codebook()))
            .at(&path)
    }
}

fn stage_tag(stage: Stage) -> &'static str {
    match stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    }
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| Error::io(Path::new("<stdout>"), e));
    match &cli.command {
        Command::Datagen => {
            let _lock = DirLock::acquire(&ctx.cfg.data_dir)?;
            let dg = ctx.cfg.datagen_config();
            let products = synth_catalog(dg.n_products, dg.image_side, ctx.cfg.seed)?;
            let data = generate_pairs(&products, &dg)?;
            let ok = check_pi_integrity(&products, &data, &dg.pi)?;
            ctx.data.write(&products, &data)?;
            for warn in &data.warnings {
                eprintln!("warning: {warn}");
            }
            w(out, format!("products {}", products.len()))?;
            for split in [Split::Train, Split::Val, Split::Test] {
                w(
                    out,
                    format!(
                        "{} queries {} pairs {}",
                        split_name(split),
                        data.qrels(split).len(),
                        data.pairs(split).len()
                    ),
                )?;
            }
            w(out, format!("pi integrity: {ok} add-to-cart products satisfy the filter"))?;
        }
        Command::Train { stage: 1, .. } => {
            let _lock = DirLock::acquire(&ctx.out)?;
            let catalog = ctx.catalog()?;
            let train = ctx.pairs(Split::Train)?;
            let val = ctx.pairs(Split::Val)?;
            let mut model = Model::new(ctx.cfg.model_config())?;
            let history = train_stage1(&mut model, &catalog, &train, &val, &ctx.cfg.stage1_config())?;
            for e in &history {
                w(
                    out,
                    format!(
                        "epoch {} loss {:.4} match {:.3} val {} lr {:.2e}",
                        e.epoch,
                        e.total,
                        e.match_rate,
                        e.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                        e.lr
                    ),
                )?;
            }
            Checkpoint::from_model(&model, &ctx.cfg).save(&ctx.out_path(STAGE1_CHECKPOINT))?;
            metrics::write_stage1(&ctx.out_path(STAGE1_METRICS), &history)?;
            w(out, format!("saved {}", ctx.out_path(STAGE1_CHECKPOINT).display()))?;
        }
        Command::Train { checkpoint, .. } => {
            let _lock = DirLock::acquire(&ctx.out)?;
            let args = ModelArgs {
                checkpoint: Some(checkpoint.clone().unwrap_or_else(|| ctx.out_path(STAGE1_CHECKPOINT))),
            };
            let (mut model, path) = ctx.model(&args)?;
            if model.stage() != Stage::One {
                return Err(Error::at(
                    &path,
                    CoreError::State("stage 2 needs a stage-1 checkpoint; this one already has a decoder".into()),
                ));
            }
            let catalog = ctx.catalog()?;
            let train = ctx.pairs(Split::Train)?;
            let val: Vec<EvalQuery> = ctx.eval_queries(Split::Val)?.into_iter().map(|q| q.1).collect();
            let features = FeatureStore::build(&catalog, &model.encoders, &model.store)?;
            store_file::save(&features, &ctx.out_path(FEATURES))?;
            let history = train_stage2(&mut model, &catalog, &features, &train, &val, &ctx.cfg.stage2_config())?;
            for e in &history {
                w(
                    out,
                    format!(
                        "epoch {} PML {:.4} KL {:.4} val SumR {} lr {:.2e}",
                        e.epoch,
                        e.pml,
                        e.kl,
                        e.val_sum_r.map_or("-".into(), |v| format!("{v:.2}")),
                        e.lr
                    ),
                )?;
            }
            Checkpoint::from_model(&model, &ctx.cfg).save(&ctx.out_path(STAGE2_CHECKPOINT))?;
            metrics::write_stage2(&ctx.out_path(STAGE2_METRICS), &history)?;
            w(out, format!("saved {}", ctx.out_path(STAGE2_CHECKPOINT).display()))?;
        }
        Command::Index { action: IndexAction::Build { model } } => {
            let _lock = DirLock::acquire(&ctx.out)?;
            let (model, _) = ctx.model(model)?;
            let catalog = ctx.catalog()?;
            let vecs = model.product_embeddings(&catalog)?;
            let ids = vecs.iter().map(|v| v.0).collect();
            let rows = vecs
                .into_iter()
                .map(|(_, v)| Embedding::new(v, Space::Concatenated))
                .collect::<pincer_core::Result<Vec<_>>>()?;
            archive::export(&ctx.out_path(INDEX), Space::Concatenated, Some(ids), &rows)?;
            w(out, format!("indexed {} products into {}", rows.len(), ctx.out_path(INDEX).display()))?;
        }
        Command::Retrieve {
            query,
            k,
            clustered,
            n_probe,
            model,
        } => {
            let (model, _) = ctx.model(model)?;
            let features = ctx.features_for(&model)?;
            let index = ctx.index(&model)?;
            let pipeline = Pipeline {
                model: &model,
                features: features.as_ref(),
                top_m: ctx.cfg.top_m_features,
            };
            let pseudo = pipeline.query_to_pseudo(query)?;
            if pseudo.fallback {
                eprintln!("note: no decoder; ranking with the query embedding");
            }
            let mode = if *clustered { SearchMode::Clustered } else { SearchMode::Full };
            let res = index.search(
                pseudo.embedding.values(),
                k.unwrap_or(ctx.cfg.top_k),
                mode,
                n_probe.unwrap_or(ctx.cfg.n_probe),
            )?;
            for (rank, (id, score)) in res.hits.iter().enumerate() {
                w(out, format!("{}\t{}\t{:.6}", rank + 1, id, score))?;
            }
        }
        Command::Eval {
            mode,
            n_probe,
            split,
            output,
            model,
        } => {
            let _lock = DirLock::acquire(&ctx.out)?;
            let (model, _) = ctx.model(model)?;
            let features = ctx.features_for(&model)?;
            let index = ctx.index(&model)?;
            let pipeline = Pipeline {
                model: &model,
                features: features.as_ref(),
                top_m: ctx.cfg.top_m_features,
            };
            let queries: Vec<EvalQuery> = ctx.eval_queries((*split).into())?.into_iter().map(|q| q.1).collect();
            let mode: SearchMode = (*mode).into();
            let n_probe = n_probe.unwrap_or(ctx.cfg.n_probe);
            let ev = evaluate(&pipeline, &index, &queries, mode, n_probe)?;
            let rec = EvalRecord {
                stage: model.stage().as_str().to_string(),
                mode: mode.as_str().to_string(),
                n_probe: if mode == SearchMode::Full { model.config.k_intents } else { n_probe },
                split: split_name((*split).into()).to_string(),
                report: ev.report.clone(),
            };
            let path = output
                .clone()
                .unwrap_or_else(|| ctx.out_path(&format!("eval-{}-{}.json", stage_tag(model.stage()), mode.as_str())));
            metrics::write_eval(&path, &rec)?;
            w(out, ev.report.to_string())?;
        }
        Command::Bench {
            repetitions,
            n_probe,
            model,
        } => {
            let _lock = DirLock::acquire(&ctx.out)?;
            let (model, _) = ctx.model(model)?;
            let features = ctx.features_for(&model)?;
            let index = ctx.index(&model)?;
            let pipeline = Pipeline {
                model: &model,
                features: features.as_ref(),
                top_m: ctx.cfg.top_m_features,
            };
            let queries = ctx
                .eval_queries(Split::Test)?
                .iter()
                .map(|(q, _)| Ok(pipeline.query_to_pseudo(q)?.embedding.into_values()))
                .collect::<Result<Vec<_>>>()?;
            let reports = bench::run(
                &index,
                &queries,
                &[SearchMode::Full, SearchMode::Clustered],
                *repetitions,
                ctx.cfg.top_k,
                n_probe.unwrap_or(ctx.cfg.n_probe),
            )?;
            let mut bytes = serde_json::to_vec_pretty(&reports).expect("serializable report");
            bytes.push(b'\n');
            crate::manifest::write_atomic(&ctx.out_path(BENCH), &bytes)?;
            for r in &reports {
                w(
                    out,
                    format!(
                        "{:<9} N {} K {} n_probe {} k {} p50 {:.1}us p95 {:.1}us recall@k {:.4}",
                        r.mode, r.n, r.clusters, r.n_probe, r.k, r.p50_us, r.p95_us, r.mean_recall_at_k
                    ),
                )?;
            }
        }
        Command::ExportEmbeddings { space, output, model } => {
            let space = Space::parse(space).ok_or_else(|| {
                Error::config(format!(
                    "--space `{space}` is not one of query-text, query-image, product-text, product-image, concatenated"
                ))
            })?;
            let _lock = DirLock::acquire(&ctx.out)?;
            let (model, _) = ctx.model(model)?;
            let (ids, rows) = export_rows(&ctx, &model, space)?;
            let path = output
                .clone()
                .unwrap_or_else(|| ctx.out_path(&format!("embeddings-{}.emb", space.as_str())));
            archive::export(&path, space, ids, &rows)?;
            w(out, format!("wrote {} {} vectors to {}", rows.len(), space.as_str(), path.display()))?;
        }
    }
    Ok(())
}

type Rows = (Option<Vec<pincer_core::ProductId>>, Vec<Embedding>);

/// Product spaces cover the catalog (with ids); query spaces cover every
/// query in `qrels.jsonl`, in file order.
fn export_rows(ctx: &Ctx, model: &Model, space: Space) -> Result<Rows> {
    match space {
        Space::QueryText | Space::QueryImage => {
            let mut rows = Vec::new();
            for split in [Split::Train, Split::Val, Split::Test] {
                for (q, _) in ctx.data.qrels(split)? {
                    let enc = model.encode_text_query(&q)?;
                    rows.push(if space == Space::QueryText { enc.text_half } else { enc.image_half });
                }
            }
            Ok((None, rows))
        }
        _ => {
            let catalog = ctx.catalog()?;
            let mut rows = Vec::with_capacity(catalog.len());
            for (_, p) in catalog.iter() {
                let enc = model.encoders.encode_product(&model.store, p)?;
                rows.push(match space {
                    Space::ProductText => enc.text_half,
                    Space::ProductImage => enc.image_half,
                    _ => enc.concat,
                });
            }
            Ok((Some(catalog.ids().to_vec()), rows))
        }
    }
}
