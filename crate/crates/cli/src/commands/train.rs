//! Teacher-forced training: every group's loss (base plus every corner at
//! every scale) lands in one graph and one backward pass per batch.
//! Batch selection and crop offsets are keyed by the absolute step, so
//! resuming from a checkpoint reproduces a fresh run bit for bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use pyrpix_core::data::{Dataset, Split};
use pyrpix_core::image::Image;
use pyrpix_core::likelihood::{
    dataset_nll, flat_loss_node, independent_loss_node, multiscale_loss_node,
};
use pyrpix_core::network::{Conditioning, Model};
use pyrpix_core::tensor::{rmsprop_step, Graph, RmsPropState, Tensor};
use pyrpix_core::{rng, Error, Result};

use crate::commands::{load_run, save_run};
use crate::config::{self, RunConfig};

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub last_val_nats: Option<f64>,
    pub steps_run: usize,
}

fn lr_at(cfg: &RunConfig, step: usize) -> f64 {
    let hits = cfg
        .train
        .lr_decay_steps
        .iter()
        .filter(|&&d| step >= d)
        .count();
    cfg.train.lr * cfg.train.lr_decay.powi(hits as i32)
}

/// Random crop of a (image, conditioning) pair down to the model's target
/// dims, aligned to the pyramid stride so the schedule still applies.
fn co_crop(
    img: &Image,
    cond: &Conditioning,
    th: usize,
    tw: usize,
    align: usize,
    words: &[u64],
    seed: u64,
) -> Result<(Image, Conditioning)> {
    if (img.height, img.width) == (th, tw) {
        return Ok((img.clone(), cond.clone()));
    }
    if img.height < th || img.width < tw {
        return Err(Error::dim(format!(
            "data image {}x{} smaller than crop {}x{}",
            img.height, img.width, th, tw
        )));
    }
    let choices_r = (img.height - th) / align + 1;
    let choices_c = (img.width - tw) / align + 1;
    let r0 = align * rng::stream_index(seed, &[0xC407, words[0], words[1], 0], choices_r);
    let c0 = align * rng::stream_index(seed, &[0xC407, words[0], words[1], 1], choices_c);
    let mut out = Image::zeros(img.channels, th, tw);
    for ch in 0..img.channels {
        for r in 0..th {
            for c in 0..tw {
                out.set(ch, r, c, img.at(ch, r0 + r, c0 + c));
            }
        }
    }
    // Co-crop the spatial conditioning map (same window, proportional to
    // the map's resolution).
    let cond = match &cond.spatial {
        None => cond.clone(),
        Some(map) => {
            let (mc, mh, mw) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let (sy, sx) = (mh as f64 / img.height as f64, mw as f64 / img.width as f64);
            let (cr0, cc0) = ((r0 as f64 * sy) as usize, (c0 as f64 * sx) as usize);
            let (crh, crw) = (
                ((th as f64 * sy) as usize).max(1).min(mh - cr0),
                ((tw as f64 * sx) as usize).max(1).min(mw - cc0),
            );
            let mut m = Tensor::zeros(vec![mc, crh, crw]);
            for ch in 0..mc {
                for r in 0..crh {
                    for c in 0..crw {
                        m.data_mut()[(ch * crh + r) * crw + c] =
                            map.data()[(ch * mh + (cr0 + r)) * mw + (cc0 + c)];
                    }
                }
            }
            Conditioning {
                class_id: cond.class_id,
                spatial: Some(m),
            }
        }
    };
    Ok((out, cond))
}

fn batch_loss(
    g: &mut Graph,
    model: &Model,
    images: &[&Image],
    conds: &[&Conditioning],
) -> Result<pyrpix_core::NodeId> {
    match model {
        Model::Multiscale(m) => multiscale_loss_node(g, m, images, conds, true),
        Model::Flat(m) => flat_loss_node(g, m, images),
        Model::Independent(m) => independent_loss_node(g, m, images),
    }
}

/// Deterministic top-left aligned crop for evaluating a crop-trained
/// model on larger data.
fn fixed_crop(img: &Image, th: usize, tw: usize) -> Image {
    let mut out = Image::zeros(img.channels, th, tw);
    for ch in 0..img.channels {
        for r in 0..th {
            for c in 0..tw {
                out.set(ch, r, c, img.at(ch, r, c));
            }
        }
    }
    out
}

/// Validation NLL over (a deterministic prefix of) the val split.
fn val_nats(model: &Model, dataset: &Dataset, cap: usize, crop: Option<(usize, usize)>) -> Result<Option<f64>> {
    let idx = dataset.indices(Split::Val);
    if idx.is_empty() {
        return Ok(None);
    }
    let take = idx.len().min(cap);
    let report = dataset_nll(
        model,
        idx[..take].iter().map(|&i| {
            dataset.get(i).map(|(img, cond)| match crop {
                Some((th, tw)) if (img.height, img.width) != (th, tw) => {
                    (fixed_crop(&img, th, tw), cond)
                }
                _ => (img, cond),
            })
        }),
    )?;
    Ok(Some(report.nats_per_subpixel))
}

pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let text = std::fs::read_to_string(config_path)?;
    let cfg = config::parse(&text)?;
    cfg.model_config().validate()?;
    let dataset = cfg.dataset()?;
    if dataset.is_empty(Split::Train) {
        return Err(Error::EmptyDataset);
    }
    let (th, tw) = (cfg.model.target_h, cfg.model.target_w);
    {
        let (dh, dw) = cfg.data_dims();
        if !cfg.train.random_crop && (dh, dw) != (th, tw) {
            return Err(Error::Config(format!(
                "data dims {dh}x{dw} differ from model target {th}x{tw}; enable random_crop \
                 or match them"
            )));
        }
    }

    let (mut model, mut opt, start_step) = match resume {
        None => (cfg.build_model(cfg.run.seed)?, RmsPropState::new(), 0usize),
        Some(path) => {
            let run = load_run(path)?;
            if config::serialize(&run.cfg) != config::serialize(&cfg) {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            (run.model, run.opt, run.step as usize)
        }
    };

    std::fs::create_dir_all(out_dir)?;
    let ck_path = out_dir.join("latest.ck");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.log"))?;

    let train_idx = dataset.indices(Split::Train);
    let align = 1usize << {
        // Crop offsets stay on the pyramid stride.
        match &model {
            Model::Multiscale(m) => m.schedule.scales,
            _ => 0,
        }
    };
    let subpixels = (th * tw * cfg.model.channels) as f64;
    let mut last_val = None;

    for step in start_step..cfg.train.steps {
        let lr = lr_at(&cfg, step);
        let mut images = Vec::with_capacity(cfg.train.batch);
        let mut conds = Vec::with_capacity(cfg.train.batch);
        for slot in 0..cfg.train.batch {
            let pick = train_idx[rng::stream_index(
                cfg.run.seed,
                &[0x7214, step as u64, slot as u64],
                train_idx.len(),
            )];
            let (img, cond) = dataset.get(pick)?;
            let (img, cond) = if cfg.train.random_crop {
                co_crop(
                    &img,
                    &cond,
                    th,
                    tw,
                    align,
                    &[step as u64, slot as u64],
                    cfg.run.seed,
                )?
            } else {
                (img, cond)
            };
            images.push(img);
            conds.push(cond);
        }
        let image_refs: Vec<&Image> = images.iter().collect();
        let cond_refs: Vec<&Conditioning> = conds.iter().collect();

        let mut g = Graph::new();
        let total = batch_loss(&mut g, &model, &image_refs, &cond_refs)?;
        let loss = g.scale(total, 1.0 / (cfg.train.batch as f64 * subpixels));
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
                detail: format!(
                    "step {step}; last good checkpoint retained at {}",
                    ck_path.display()
                ),
            });
        }
        let grads = g.backward(loss)?;
        let mut by_name: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (name, node) in g.param_names() {
            if let Some(t) = grads.get(node) {
                by_name.insert(name.clone(), t);
            }
        }
        rmsprop_step(
            model.params_mut(),
            &by_name,
            &mut opt,
            lr,
            cfg.train.rmsprop_decay,
            cfg.train.rmsprop_eps,
        )?;

        let done = step + 1;
        if done % cfg.train.eval_interval == 0 || done == cfg.train.steps {
            let crop = cfg.train.random_crop.then_some((th, tw));
            last_val = val_nats(&model, &dataset, 256, crop)?;
            let val_s = last_val
                .map(|v| format!("{v}"))
                .unwrap_or_else(|| "nan".into());
            writeln!(
                metrics,
                "step={done} lr={lr} train_nats_per_subpixel={loss_value} val_nats_per_subpixel={val_s}"
            )?;
        }
        if done % cfg.train.checkpoint_interval == 0 || done == cfg.train.steps {
            save_run(&ck_path, &cfg, &model, done as u64, &opt)?;
            save_run(
                &out_dir.join(format!("step_{done}.ck")),
                &cfg,
                &model,
                done as u64,
                &opt,
            )?;
        }
    }
    if start_step >= cfg.train.steps {
        // Nothing to do; still make sure a checkpoint exists.
        save_run(&ck_path, &cfg, &model, start_step as u64, &opt)?;
    }
    Ok(TrainOutcome {
        checkpoint: ck_path,
        last_val_nats: last_val,
        steps_run: cfg.train.steps.saturating_sub(start_step),
    })
}
