use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use raunet::architectures::table_shape;
use raunet::cascade::{
    evaluate_cascade, liver_samples, localization_samples, localize, prepare_volume, run_cascade, segment_liver,
    segment_tumor, tumor_samples, CascadeModels,
};
use raunet::config::Provenance;
use raunet::metrics::EvalReport;
use raunet::phantom::PhantomSpec;
use raunet::postprocess::bounding_box;
use raunet::preprocess::brats_prepare;
use raunet::training::{kfold_split, train as fit, Sample};
use raunet::volume::{read_rvol, read_rvol_header, write_rvol};
use raunet::{Mask, Network, NetworkSpec, PipelineConfig, Volume};

use crate::{CascadeArgs, EvalArgs, InferArgs, InspectArgs, PhantomArgs, PreprocessArgs, Stage, TrainArgs};

const BRAIN_MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_image(path: &Path) -> Result<Volume<f32>> {
    read_rvol(path).with_context(|| format!("reading {}", path.display()))
}

fn read_mask(path: &Path) -> Result<Mask> {
    read_rvol(path).with_context(|| format!("reading {}", path.display()))
}

fn write<T: raunet::volume::RvolScalar>(path: &Path, v: &Volume<T>) -> Result<()> {
    write_rvol(path, v).with_context(|| format!("writing {}", path.display()))
}

fn load_net(path: &Path) -> Result<Network<f32>> {
    Network::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_nets(paths: &[PathBuf]) -> Result<Vec<Network<f32>>> {
    paths.iter().map(|p| load_net(p)).collect()
}

pub fn phantom(a: &PhantomArgs) -> Result<()> {
    let mut spec = PhantomSpec {
        seed: a.seed,
        ..PhantomSpec::default()
    };
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    let p = spec.generate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("ct.rvol"), &p.hu)?;
    write(&a.out.join("liver.rvol"), &p.liver)?;
    write(&a.out.join("tumor.rvol"), &p.tumor)?;
    fs::write(a.out.join("phantom.txt"), spec.sidecar())?;
    log::info!("phantom written to {}", a.out.display());
    Ok(())
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let out = prepare_volume(&read_image(&a.input)?, &cfg)?;
    write(&a.out, &out)
}

/// Training samples of one liver-dataset case for `stage`.
fn liver_case_samples(dir: &Path, stage: Stage, cfg: &PipelineConfig, seed: u64) -> Result<Vec<Sample<f32>>> {
    let vol = prepare_volume(&read_image(&dir.join("ct.rvol"))?, cfg)?;
    let liver = read_mask(&dir.join("liver.rvol"))?;
    Ok(match stage {
        Stage::Loc => localization_samples(&vol, &liver, cfg, seed)?
            .iter()
            .map(|s| s.to_sample())
            .collect(),
        Stage::Liver => liver_samples(&vol, &liver, cfg, seed)?.samples(),
        Stage::Tumor => {
            let tumor = read_mask(&dir.join("tumor.rvol"))?;
            tumor_samples(&vol, &liver, &tumor, cfg, seed)?.samples()
        }
        Stage::Brain => unreachable!("brain cases are read separately"),
    })
}

fn brain_case_samples(dir: &Path, cfg: &PipelineConfig, seed: u64) -> Result<Vec<Sample<f32>>> {
    let modalities = BRAIN_MODALITIES
        .iter()
        .map(|m| read_image(&dir.join(format!("{m}.rvol"))))
        .collect::<Result<Vec<_>>>()?;
    let labels = read_mask(&dir.join("labels.rvol"))?;
    let (set, _) = brats_prepare(&modalities, &labels, cfg.tumor_patches, cfg.brain_patch, cfg.tumor_fraction, seed)?;
    Ok(set.samples())
}

fn case_samples(dirs: &[PathBuf], stage: Stage, cfg: &PipelineConfig) -> Result<Vec<Sample<f32>>> {
    let mut out = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        let samples = match stage {
            Stage::Brain => brain_case_samples(dir, cfg, seed),
            _ => liver_case_samples(dir, stage, cfg, seed),
        };
        out.extend(samples.with_context(|| format!("case {}", dir.display()))?);
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (train_dirs, val_dirs) = match a.fold {
        Some(k) => {
            let plan = kfold_split(&a.cases, cfg.folds, cfg.seed)?;
            let Some(fold) = plan.folds.get(k) else {
                bail!(raunet::Error::Config(format!("fold {k} out of range for {} folds", cfg.folds)));
            };
            (fold.train.clone(), fold.validation.clone())
        }
        None => (a.cases.clone(), Vec::new()),
    };
    let train_set = case_samples(&train_dirs, a.stage, &cfg)?;
    let val_set = case_samples(&val_dirs, a.stage, &cfg)?;
    let name = a.net.clone().unwrap_or_else(|| match a.stage {
        Stage::Loc => cfg.loc_net.clone(),
        Stage::Liver => cfg.liver_net.clone(),
        Stage::Tumor => cfg.tumor_net.clone(),
        Stage::Brain => cfg.brain_net.clone(),
    });
    let mut net = Network::<f32>::build(&name, cfg.seed)?;
    log::info!(
        "training {name} ({} parameters) on {} samples, validating on {}",
        net.spec.count_parameters(),
        train_set.len(),
        val_set.len()
    );
    let mut tc = cfg.train_config();
    tc.checkpoint = Some(a.out.clone());
    tc.loss_csv = a.loss_csv.clone();
    let report = fit(&mut net, &train_set, &val_set, &tc)?;
    if let Some(last) = report.curve.last() {
        log::info!("final epoch {}: train {:.6} val {:.6}", last.epoch, last.train, last.val);
    }
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let vol = prepare_volume(&read_image(&a.input)?, &cfg)?;
    let mut nets = load_nets(&a.checkpoints)?;
    let roi = || -> Result<Mask> {
        match &a.roi {
            Some(p) => read_mask(p),
            None => bail!(raunet::Error::Config("this stage needs --roi".into())),
        }
    };
    let mask = match a.stage {
        Stage::Loc => {
            if nets.len() != 1 {
                bail!(raunet::Error::Config("localization takes exactly one checkpoint".into()));
            }
            localize(&vol, &mut nets[0], &cfg)?.0
        }
        Stage::Liver => {
            let b = bounding_box(&roi()?, cfg.margin)?;
            segment_liver(&vol, &b, &mut nets, &cfg)?
        }
        Stage::Tumor => segment_tumor(&vol, &roi()?, &mut nets, &cfg)?,
        Stage::Brain => bail!(raunet::Error::Config("single-stage inference covers loc, liver and tumor".into())),
    };
    write(&a.out, &mask)
}

pub fn cascade(a: &CascadeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let hu = read_image(&a.input)?;
    let mut models = CascadeModels {
        localization: load_net(&a.loc)?,
        liver: load_nets(&a.liver)?,
        tumor: load_nets(&a.tumor)?,
    };
    let out = run_cascade(&hu, &mut models, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("liver.rvol"), &out.liver)?;
    write(&a.out.join("tumor.rvol"), &out.tumor)?;
    if let (Some(lg), Some(tg)) = (&a.liver_gt, &a.tumor_gt) {
        let report = evaluate_cascade(&out, &read_mask(lg)?, &read_mask(tg)?)?;
        let csv = report.to_csv();
        fs::write(a.out.join("report.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut report = EvalReport::new();
    report.add_case(&a.case, &read_mask(&a.seg)?, &read_mask(&a.gt)?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn describe_net(name: &str) -> Result<()> {
    let spec = NetworkSpec::build(name)?;
    let shapes = spec.trace_shapes(&spec.input_shape)?;
    println!("{:<10} {:<10} output", "layer", "entry");
    for (entry, shape) in spec.entries.iter().zip(&shapes) {
        println!("{:<10} {:<10} {}", entry.table_label(), entry.name, table_shape(shape));
    }
    println!("parameters: {}", spec.count_parameters());
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    if let Some(p) = &a.rvol {
        let h = read_rvol_header(p).with_context(|| format!("reading {}", p.display()))?;
        println!("extents: {} x {} x {}", h.extents[0], h.extents[1], h.extents[2]);
        println!("dtype: {}", h.dtype_name());
        println!("spacing: {} x {} x {}", h.spacing[0], h.spacing[1], h.spacing[2]);
    } else if let Some(n) = &a.net {
        describe_net(n)?;
    } else if let Some(p) = &a.config {
        let cfg = load_config(p.as_deref())?;
        let published = raunet::config::KEYS
            .iter()
            .filter(|k| k.1 == Provenance::Published)
            .count();
        print!("{}", cfg.to_text());
        println!("# {published} of {} keys take published values by default", raunet::config::KEYS.len());
    }
    Ok(())
}
