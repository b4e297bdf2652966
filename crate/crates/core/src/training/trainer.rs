use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{manifest_for, save_checkpoint};
use super::loss::unit_loss;
use super::optim::{lr_at, Adam};
use super::TrainConfig;
use crate::data::{batch_iterator, epoch_seed, DialogDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, EvalReport};
use crate::model::Model;

/// One line of the metrics log. Loss values are epoch means over units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_G", default, skip_serializing_if = "Option::is_none")]
    pub l_g: Option<f64>,
    #[serde(rename = "L_D", default, skip_serializing_if = "Option::is_none")]
    pub l_d: Option<f64>,
    #[serde(rename = "L_KL")]
    pub l_kl: f64,
    pub val: EvalReport,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.bin";

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best validation MRR. With `out_dir`, the metrics log and
/// the best checkpoint are written there as training proceeds, so a
/// divergence leaves the last good checkpoint on disk.
pub fn train(
    model: &mut Model,
    train_ds: &DialogDataset,
    val_ds: &DialogDataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Contract("training needs non-empty train and validation sets".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let p = dir.join(METRICS_FILE);
            Some((BufWriter::new(File::create(&p).map_err(|e| Error::file(&p, e))?), p))
        }
        None => None,
    };
    let mut adam = Adam::from_config(&model.params, cfg);
    let val_opts = EvalOptions {
        loss_mode: cfg.loss_mode,
        seed: cfg.seed,
        ..EvalOptions::default()
    };
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, crate::autodiff::ParamStore)> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let (mut sum_g, mut sum_d, mut sum_kl, mut n) = (0.0, 0.0, 0.0, 0usize);
        let batches = batch_iterator(train_ds, cfg.batch_size, epoch_seed(cfg.seed, epoch), true);
        for (b, batch) in batches.enumerate() {
            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            for u in &batch {
                let mut tape = model.tape();
                let ul = unit_loss(&mut tape, model, &train_ds.examples[u.example], u.round, cfg)?;
                let total = tape.value(ul.total).item();
                if !total.is_finite() {
                    return Err(Error::Divergence { epoch, batch: b, loss: total });
                }
                tape.backward(ul.total)?;
                for (k, id) in model.params.ids().enumerate() {
                    if let Some(g) = tape.param_grad(id) {
                        grads[k].iter_mut().zip(g).for_each(|(a, v)| *a += v);
                    }
                }
                sum_g += ul.l_g.map_or(0.0, |v| tape.value(v).item());
                sum_d += ul.l_d.map_or(0.0, |v| tape.value(v).item());
                sum_kl += tape.value(ul.l_kl).item();
                n += 1;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            adam.step(&mut model.params, &grads, lr)?;
        }

        let calls_before = model.posterior_calls();
        let val = evaluate(model, val_ds, &val_opts)?.report;
        debug_assert_eq!(model.posterior_calls(), calls_before, "validation touched the posterior");
        let denom = n.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            l_g: cfg.loss_mode.uses_generative().then_some(sum_g / denom),
            l_d: cfg.loss_mode.uses_discriminative().then_some(sum_d / denom),
            l_kl: sum_kl / denom,
            val,
        };
        if let Some((w, p)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::file(p.as_path(), e))?;
        }
        let improved = best.as_ref().is_none_or(|(_, m, _)| entry.val.mrr > *m);
        if improved {
            if let Some(dir) = out_dir {
                let manifest = manifest_for(model, cfg, &train_ds.vocab, epoch, entry.val.mrr);
                save_checkpoint(&dir.join(CHECKPOINT_FILE), model, &manifest)?;
            }
            best = Some((epoch, entry.val.mrr, model.params.clone()));
        }
        epochs.push(entry);
    }

    let (best_epoch, best_val_mrr, params) = best.expect("max_epochs >= 1");
    model.params = params;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_mrr,
    })
}
