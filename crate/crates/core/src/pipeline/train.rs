use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;

use super::config::TrainConfig;
use super::data::{Dataset, Frame};
use super::model::{FrameOutput, Model};
use super::pseudo::{fit_pseudo_gaussians, PseudoFit};
use super::warmup::{warm_up, WarmupReport};
use crate::error::{Error, Result};
use crate::losses::{loss_coarse, loss_final, loss_weight, total_loss, LossParts};
use crate::tensor::{Adam, AdamConfig, ParamStore, Real, Tape, Tensor};
use crate::util::{stream_rng, Rng};

pub const LOSS_CSV_HEADER: &str = "iteration,L_f,L_c,L_w,total";

/// Iterations over which every parameter group must receive some gradient.
pub const DEAD_CHECK_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub frame: usize,
    pub fine: Real,
    pub coarse: Real,
    pub weight: Real,
    pub total: Real,
}

/// Loss terms of one frame, recorded on `tape`.
pub fn frame_loss(tape: &mut Tape, model: &Model, out: &FrameOutput, frame: &Frame) -> Result<(LossParts, crate::tensor::Var)> {
    let gt = tape.constant(frame.image.clone());
    let mask = tape.constant(frame.mask.clone());
    let w = &model.config.loss;
    let fine = loss_final(tape, out.fine, gt, w)?;
    let coarse = loss_coarse(tape, out.coarse, gt)?;
    let weight = loss_weight(tape, out.weight, mask)?;
    let parts = LossParts { fine, coarse, weight };
    let total = total_loss(tape, &parts, w);
    Ok((parts, total))
}

/// Stepwise trainer: warm-up happens in [`Trainer::new`], then each
/// [`Trainer::step`] is one joint iteration on a uniformly sampled frame.
pub struct Trainer<'a> {
    pub model: Model,
    data: &'a Dataset,
    train: Vec<usize>,
    opts: Vec<(&'static str, Adam)>,
    rng: Rng,
    tape: Tape,
    iteration: usize,
    /// Parameters before the most recent update.
    last_good: ParamStore,
    grad_seen: Vec<(&'static str, Real)>,
    pub losses: Vec<LossRow>,
    pub pseudo: Option<PseudoFit>,
    pub warmup: Option<WarmupReport>,
    pub dead_groups: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, data: &'a Dataset) -> Result<Self> {
        Self::with_warm_start(config, data, None)
    }

    /// Like [`Trainer::new`] but reuses a warm start computed earlier for an
    /// equivalent config, which gives bit-identical results.
    pub fn with_warm_start(config: &TrainConfig, data: &'a Dataset, warm: Option<&WarmStart>) -> Result<Self> {
        config.validate()?;
        let (train, _) = data.split(config.test_frames)?;
        let mut model = Model::new(config, &data.template, data.expr_dim(), data.manifest.intrinsics)?;
        let (pseudo, warmup) = if config.ablate.no_warmup {
            (None, None)
        } else {
            let fresh;
            let w = match warm {
                Some(w) => {
                    if w.key != warm_start_key(config, data) {
                        return Err(Error::Config("warm start was computed for different settings".into()));
                    }
                    w
                }
                None => {
                    fresh = warm_start(config, data)?;
                    &fresh
                }
            };
            for (name, value) in &w.unet {
                let id = model.store.find(name).ok_or_else(|| Error::Config(format!("warm start has unknown parameter {name}")))?;
                *model.store.get_mut(id) = value.clone();
            }
            (Some(w.pseudo.clone()), Some(w.report.clone()))
        };
        let lr = &config.lr;
        let opts = model
            .active_groups()
            .into_iter()
            .map(|g| {
                let rate = match g {
                    "unet" => lr.unet,
                    "spawn" => lr.spawn,
                    "ggo" => lr.ggo,
                    _ => lr.enhancer,
                };
                (g, Adam::new(AdamConfig::with_lr(rate), &model.store, model.group_ids(g)))
            })
            .collect::<Vec<_>>();
        let grad_seen = opts.iter().map(|(g, _)| (*g, 0.0)).collect();
        Ok(Self {
            last_good: model.store.clone(),
            model,
            data,
            train,
            opts,
            rng: stream_rng(config.seed, "frames"),
            tape: Tape::new(),
            iteration: 0,
            grad_seen,
            losses: Vec::new(),
            pseudo,
            warmup,
            dead_groups: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Parameters from before the last update; what to save after a failure.
    pub fn last_good(&self) -> Model {
        let mut m = self.model.clone();
        m.store = self.last_good.clone();
        m
    }

    pub fn step(&mut self) -> Result<LossRow> {
        let idx = self.train[self.rng.random_range(0..self.train.len())];
        let frame = &self.data.frames[idx];
        let tape = &mut self.tape;
        tape.reset();
        let out = self.model.forward(tape, frame.into(), true)?;
        let (parts, total) = frame_loss(tape, &self.model, &out, frame)?;
        let row = LossRow {
            iteration: self.iteration,
            frame: idx,
            fine: tape.value(parts.fine).item(),
            coarse: tape.value(parts.coarse).item(),
            weight: tape.value(parts.weight).item(),
            total: tape.value(total).item(),
        };
        if !row.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {} on frame {idx} (seed {})",
                self.iteration, self.model.config.seed
            )));
        }
        let g = tape.backward(total)?;
        if self.iteration < DEAD_CHECK_ITERS {
            for ((_, opt), (_, seen)) in self.opts.iter().zip(self.grad_seen.iter_mut()) {
                for &id in opt.ids() {
                    let m = g.param(id, &self.model.store).data().iter().fold(0.0 as Real, |a, v| a.max(v.abs()));
                    *seen = seen.max(m);
                }
            }
        }
        self.last_good.clone_from(&self.model.store);
        for (_, opt) in &mut self.opts {
            opt.step(&mut self.model.store, &g)?;
        }
        self.iteration += 1;
        if self.iteration == DEAD_CHECK_ITERS.min(self.model.config.iters) {
            for (name, seen) in &self.grad_seen {
                if *seen == 0.0 {
                    log::warn!("parameter group {name} received no gradient in the first {} iterations", self.iteration);
                    self.dead_groups.push(name.to_string());
                }
            }
        }
        if self.iteration % self.model.config.log_every == 0 {
            log::info!("iter {:>6}  L_f {:.5}  L_c {:.5}  L_w {:.5}", self.iteration, row.fine, row.coarse, row.weight);
        }
        self.losses.push(row);
        Ok(row)
    }

    pub fn finish(self) -> (Model, TrainReport) {
        let report = TrainReport {
            losses: self.losses,
            pseudo: self.pseudo,
            warmup: self.warmup,
            dead_groups: self.dead_groups,
            seconds: 0.0,
        };
        (self.model, report)
    }
}

/// U-net parameters after the pseudo-Gaussian fit and warm-up.
#[derive(Clone, Debug)]
pub struct WarmStart {
    key: String,
    pub pseudo: PseudoFit,
    pub report: WarmupReport,
    unet: Vec<(String, Tensor)>,
}

/// The settings a warm start depends on.
fn warm_start_key(config: &TrainConfig, data: &Dataset) -> String {
    serde_json::json!([
        config.seed,
        config.pseudo_iters,
        config.warmup_iters,
        config.test_frames,
        config.lr.pseudo,
        config.lr.pseudo_position,
        config.lr.warmup,
        config.loss.lambda,
        config.unet,
        config.hierarchy,
        super::model::hex(&data.template_hash),
        data.root,
    ])
    .to_string()
}

/// Fits pseudo-Gaussians to the first training frame and regresses the
/// U-nets onto them.
pub fn warm_start(config: &TrainConfig, data: &Dataset) -> Result<WarmStart> {
    config.validate()?;
    let (train, _) = data.split(config.test_frames)?;
    let mut model = Model::new(config, &data.template, data.expr_dim(), data.manifest.intrinsics)?;
    let first = &data.frames[train[0]];
    let pseudo = fit_pseudo_gaussians(first, config, model.act.scale_max)?;
    log::info!("pseudo-Gaussian fit: PSNR {:.2} -> {:.2} dB", pseudo.initial_psnr, pseudo.final_psnr);
    let report = warm_up(&mut model, &pseudo.cloud, first)?;
    log::info!("warm-up: mean center error {:.3e}", report.center_error);
    let unet = model.group_ids("unet").into_iter().map(|id| (model.store.name(id).to_string(), model.store.get(id).clone())).collect();
    Ok(WarmStart { key: warm_start_key(config, data), pseudo, report, unet })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<LossRow>,
    pub pseudo: Option<PseudoFit>,
    pub warmup: Option<WarmupReport>,
    pub dead_groups: Vec<String>,
    pub seconds: f64,
}


/// Runs warm-up and `config.iters` joint iterations. On a numeric failure the
/// error carries the iteration; `on_failure` receives the last good model.
pub fn train(config: &TrainConfig, data: &Dataset, on_failure: impl FnOnce(&Model)) -> Result<(Model, TrainReport)> {
    let start = Instant::now();
    let mut t = Trainer::new(config, data)?;
    for _ in 0..config.iters {
        if let Err(e) = t.step() {
            if matches!(e, Error::Numeric(_)) {
                on_failure(&t.last_good());
            }
            return Err(e);
        }
    }
    let (model, mut report) = t.finish();
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.fine, r.coarse, r.weight, r.total);
    }
    s
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    std::fs::write(path, loss_csv(rows))?;
    Ok(())
}
