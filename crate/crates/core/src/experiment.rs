//! End-to-end runs: data preparation, training, evaluation and comparison
//! tables, driven by a [`RunConfig`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, RunConfig};
use crate::data::{load_documents, load_mnist, synth_documents, Dataset, MnistSplit, PerturbSample, SampleSource};
use crate::error::{Error, Result};
use crate::evaluation::{
    aligned_images, ced_and_auc, classification_error, corner_errors, mean_variance_images, per_level_gallery, EvalReport,
};
use crate::model::{Model, Task};
use crate::training::{init_rng, train, Checkpoint, TrainOptions, TrainReport};

/// Stream of the seed's generator used to synthesize documents.
const DOCUMENT_STREAM: u64 = u64::MAX - 2;

/// Source data before perturbation.
#[derive(Clone, Debug)]
pub enum RawData {
    Mnist { train: Dataset, test: Dataset },
    /// Loaded from a manifest, or `None` to synthesize per perturbation level.
    Documents { loaded: Option<Vec<PerturbSample>> },
}

pub fn load_raw(cfg: &RunConfig) -> Result<RawData> {
    match cfg.source {
        DataSource::Mnist => Ok(RawData::Mnist {
            train: load_mnist(&cfg.mnist_dir, MnistSplit::Train)?.head(cfg.train_count)?,
            test: load_mnist(&cfg.mnist_dir, MnistSplit::Test)?.head(cfg.test_count)?,
        }),
        DataSource::Documents => Ok(RawData::Documents {
            loaded: cfg.manifest.as_deref().map(load_documents).transpose()?,
        }),
    }
}

/// Training source and frozen test set at one perturbation level.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: SampleSource,
    pub test: Vec<PerturbSample>,
    pub channels: usize,
    pub raster: (usize, usize),
}

fn document_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DOCUMENT_STREAM);
    rng
}

pub fn prepare(raw: &RawData, cfg: &RunConfig, sigma: f64) -> Result<Prepared> {
    match raw {
        RawData::Mnist { train, test } => {
            let (h, w) = train.raster();
            if h != w {
                return Err(Error::Data(format!("expected square digits, got {h}x{w}")));
            }
            let pcfg = cfg.perturb_config(sigma, h)?;
            let test = match (SampleSource::OnTheFly {
                dataset: test.clone(),
                cfg: pcfg,
            })
            .freeze(cfg.eval_seed)?
            {
                SampleSource::Fixed(s) => s,
                SampleSource::OnTheFly { .. } => unreachable!("freeze returns fixed samples"),
            };
            Ok(Prepared {
                train: SampleSource::OnTheFly {
                    dataset: train.clone(),
                    cfg: pcfg,
                },
                test,
                channels: train.channels(),
                raster: (h, w),
            })
        }
        RawData::Documents { loaded: Some(all) } => {
            let need = cfg.train_count + cfg.test_count;
            if all.len() < need {
                return Err(Error::Data(format!(
                    "manifest has {} documents, need {need} (train + test)",
                    all.len()
                )));
            }
            let s = all[0].image.shape();
            Ok(Prepared {
                train: SampleSource::Fixed(all[..cfg.train_count].to_vec()),
                test: all[cfg.train_count..need].to_vec(),
                channels: s[0],
                raster: (s[1], s[2]),
            })
        }
        RawData::Documents { loaded: None } => {
            let r = cfg.raster;
            let pcfg = cfg.perturb_config(sigma, r)?;
            let train = synth_documents(cfg.train_count, (r, r), &pcfg, &mut document_rng(cfg.seed))?;
            let test = synth_documents(cfg.test_count, (r, r), &pcfg, &mut document_rng(cfg.eval_seed))?;
            Ok(Prepared {
                train: SampleSource::Fixed(train),
                test,
                channels: 1,
                raster: (r, r),
            })
        }
    }
}

/// A freshly initialized model for `cfg` on `data`.
pub fn build_model(cfg: &RunConfig, data: &Prepared) -> Result<Model> {
    Model::build(&cfg.model_spec(data.channels, data.raster), &mut init_rng(cfg.seed))
}

/// Builds and trains a model; metrics go to `out_dir` when given.
pub fn train_model(
    cfg: &RunConfig,
    data: &Prepared,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<(Model, TrainReport)> {
    let mut model = build_model(cfg, data)?;
    log::info!(
        "{}: {} alignment + {} classifier parameters",
        cfg.model_label(),
        model.alignment_param_count(),
        model.classifier_param_count()
    );
    let report = train(
        &mut model,
        &data.train,
        &cfg.train_config(),
        TrainOptions {
            config_hash: cfg.hash(),
            out_dir: out_dir.map(Path::to_path_buf),
            resume,
        },
    )?;
    Ok((model, report))
}

/// Test error (with a classifier), corner errors and CED (with a stack),
/// and image artifacts when `out_dir` is given.
pub fn evaluate(cfg: &RunConfig, model: &Model, test: &[PerturbSample], out_dir: Option<&Path>) -> Result<EvalReport> {
    let mut report = EvalReport {
        model_id: cfg.model_label(),
        ..EvalReport::default()
    };
    if model.classifier.is_some() && cfg.task == Task::Classify {
        report.test_error = Some(classification_error(model, test, cfg.eval_batch)?);
    }
    if model.stack.is_some() {
        let errors = corner_errors(model, test, cfg.eval_batch)?;
        let (ced, auc) = ced_and_auc(&errors, cfg.auc_threshold, cfg.ced_points)?;
        report.corner_errors = errors;
        report.ced = Some(ced);
        report.auc = Some(auc);
        report.auc_threshold = Some(cfg.auc_threshold);
    }
    if let Some(dir) = out_dir {
        let aligned = aligned_images(model, test, cfg.eval_batch)?;
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let overall = mean_variance_images(&aligned, &labels, false, dir, "aligned")?;
        report.mean_gradient_energy = overall.first().map(|e| e.mean_gradient_energy);
        for e in &overall {
            report.artifacts.extend([e.mean_path.clone(), e.variance_path.clone()]);
        }
        if cfg.source == DataSource::Mnist {
            for e in mean_variance_images(&aligned, &labels, true, dir, "aligned")? {
                report.artifacts.extend([e.mean_path, e.variance_path]);
            }
        }
        if model.stack.is_some() && cfg.gallery_samples > 0 {
            let path = dir.join("gallery.pgm");
            per_level_gallery(model, test, cfg.gallery_samples, &path)?;
            report.artifacts.push(path);
        }
        report.artifacts.extend(report.write(dir)?);
    }
    Ok(report)
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub sigma: f64,
    pub model: String,
    pub test_error: Option<f64>,
    pub auc: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Comparison {
    pub auc_threshold: f64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("sigma,model,test_error,auc@{},final_loss\n", self.auc_threshold);
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.sigma, r.model, opt(r.test_error), opt(r.auc), opt(r.final_loss))
                .expect("string write");
        }
        s
    }

    /// Aligned text table, one row per perturbation level and model.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:>8}  {:<26} {:>11} {:>10}\n",
            "sigma",
            "model",
            "test error",
            format!("AUC@{}", self.auc_threshold)
        );
        for r in &self.rows {
            let err = r.test_error.map_or("-".into(), |e| format!("{:.2}%", 100.0 * e));
            let auc = r.auc.map_or("-".into(), |a| format!("{a:.4}"));
            writeln!(s, "{:>7}%  {:<26} {:>11} {:>10}", 100.0 * r.sigma, r.model, err, auc).expect("string write");
        }
        s
    }

    pub fn get(&self, sigma: f64, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.sigma == sigma && r.model == model)
    }
}

/// Data settings must agree for a comparison to be on identical streams.
pub fn check_compatible(a: &RunConfig, b: &RunConfig) -> Result<()> {
    let keys = [
        "seed",
        "data.source",
        "data.mnist_dir",
        "data.manifest",
        "data.train_count",
        "data.test_count",
        "data.sigma",
        "data.clamp",
        "data.raster",
        "train.batch",
        "train.task",
        "eval.seed",
        "eval.sigmas",
    ];
    for k in keys {
        if a.get(k) != b.get(k) {
            return Err(Error::Config(format!(
                "configs differ in {k} ({:?} vs {:?}); comparisons need identical data",
                a.get(k),
                b.get(k)
            )));
        }
    }
    Ok(())
}

/// Trains and evaluates every config at every perturbation level of the
/// first config. Per-run outputs go to `out_dir/<sigma>/<index>-<label>/`.
pub fn compare(configs: &[RunConfig], out_dir: Option<&Path>) -> Result<Comparison> {
    let first = configs.first().ok_or_else(|| Error::Usage("nothing to compare".into()))?;
    for c in &configs[1..] {
        check_compatible(first, c)?;
    }
    let raw = load_raw(first)?;
    let mut table = Comparison {
        auc_threshold: first.auc_threshold,
        rows: Vec::new(),
    };
    for sigma in first.sigmas() {
        let data = prepare(&raw, first, sigma)?;
        for (i, cfg) in configs.iter().enumerate() {
            let dir: Option<PathBuf> = out_dir.map(|d| {
                let label: String = cfg
                    .model_label()
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
                    .collect();
                d.join(format!("sigma{sigma}")).join(format!("{i}-{label}"))
            });
            if let Some(d) = &dir {
                std::fs::create_dir_all(d)?;
                std::fs::write(d.join("config.txt"), cfg.render())?;
            }
            let (model, trained) = train_model(cfg, &data, dir.as_deref(), None)?;
            if let Some(d) = &dir {
                trained.checkpoint.save(&d.join("checkpoint.ckpt"))?;
            }
            let report = evaluate(cfg, &model, &data.test, dir.as_deref())?;
            log::info!(
                "sigma {sigma}: {} error {:?} auc {:?}",
                cfg.model_label(),
                report.test_error,
                report.auc
            );
            table.rows.push(ComparisonRow {
                sigma,
                model: cfg.model_label(),
                test_error: report.test_error,
                auc: report.auc,
                final_loss: trained.metrics.last().map(|m| m.loss),
            });
        }
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("comparison.csv"), table.to_csv())?;
    }
    Ok(table)
}
