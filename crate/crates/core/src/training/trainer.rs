//! The three-stage training driver.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{LossBreakdown, LossWeights};
use super::step::{scst_scene_loss, strip_eos, supervised_loss, ScstTarget};
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::datasynth::{Dataset, N_CLASSES};
use crate::error::{BicaError, Result};
use crate::evalmetrics::CiderScorer;
use crate::model::BicaModel;
use crate::numerics::{
    AdamWConfig, CosineSchedule, Graph, OptimizerState, ParamGroup, ParamId, ParamStore,
};
use crate::parallel::map_ordered;

/// Where training stands. `stage_step` counts optimizer steps taken in `stage`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Progress {
    pub completed_stage: u32,
    pub stage: u32,
    pub stage_step: u64,
    pub global_step: u64,
    pub boundaries: Vec<(u32, u64)>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `train.log`, `latest.ckpt` and `stage{k}.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Save `latest.ckpt` every this many steps (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Stop once the global step reaches this value, leaving the stage unfinished.
    pub stop_at_global_step: Option<u64>,
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub global_step: u64,
    pub stage: u32,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let d = self.loss.det_sums();
        let mut s = String::new();
        write!(
            s,
            "step={} stage={} lr={:.6e} vote={:.6} giou={:.6} cls={:.6} cnt={:.6} size={:.6} cap_mle={:.6} cap_scst={:.6} total={:.6} grad_norm={:.6}",
            self.global_step,
            self.stage,
            self.lr,
            self.loss.vote,
            d[0],
            d[1],
            d[2],
            d[3],
            self.loss.cap_mle,
            self.loss.cap_scst,
            self.loss.total,
            self.grad_norm
        )
        .unwrap();
        s
    }
}

pub struct Trainer<'d> {
    pub cfg: Config,
    pub model: BicaModel,
    pub store: ParamStore,
    pub data: &'d Dataset,
    pub threads: usize,
    pub progress: Progress,
    pub optimizer: Option<OptimizerState>,
    pub history: Vec<StepRecord>,
    /// Build identifier written into the log header.
    pub version: String,
    scst: Option<(Vec<ScstTarget>, CiderScorer<usize>)>,
}

type SceneGrads = (LossBreakdown, Vec<(ParamId, Vec<f32>)>);

impl<'d> Trainer<'d> {
    pub fn new(cfg: &Config, data: &'d Dataset, threads: usize) -> Result<Self> {
        cfg.validate()?;
        if data.scenes.is_empty() {
            return Err(BicaError::Invalid("training set is empty".into()));
        }
        let mut store = ParamStore::new();
        let model = BicaModel::new(cfg, N_CLASSES, data.vocab.len(), &mut store, cfg.seed);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            data,
            threads: threads.max(1),
            progress: Progress::default(),
            optimizer: None,
            history: Vec::new(),
            version: "unknown".into(),
            scst: None,
        })
    }

    /// Rebuilds the trainer state stored in `ck`. The checkpoint's own
    /// configuration is used; callers check it against theirs beforehand.
    pub fn from_checkpoint(ck: &Checkpoint, data: &'d Dataset, threads: usize) -> Result<Self> {
        Trainer::from_checkpoint_with(ck, &ck.config()?, data, threads)
    }

    /// Like [`Trainer::from_checkpoint`] but under `cfg`, which must describe
    /// the same parameter layout.
    pub fn from_checkpoint_with(
        ck: &Checkpoint,
        cfg: &Config,
        data: &'d Dataset,
        threads: usize,
    ) -> Result<Self> {
        if ck.vocab_text != data.vocab.to_text() {
            return Err(BicaError::Invalid(
                "dataset vocabulary differs from the checkpoint's".into(),
            ));
        }
        let mut t = Trainer::new(cfg, data, threads)?;
        ck.restore_params(&mut t.store)?;
        t.optimizer = ck.optimizer.clone();
        t.progress = Progress {
            completed_stage: ck.completed_stage,
            stage: ck.stage,
            stage_step: ck.stage_step,
            global_step: ck.global_step,
            boundaries: ck.boundaries.clone(),
        };
        Ok(t)
    }

    /// A trainer under `cfg` that starts from this one's parameters and
    /// progress. The parameter layout must not change, so only settings such
    /// as the BiCA variant or stage schedules may differ.
    pub fn fork(&self, cfg: &Config) -> Result<Trainer<'d>> {
        let mut t = Trainer::new(cfg, self.data, self.threads)?;
        Checkpoint {
            params: Checkpoint::capture_params(&self.store),
            ..Checkpoint::default()
        }
        .restore_params(&mut t.store)?;
        t.progress = self.progress.clone();
        t.version = self.version.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.cfg.to_text(),
            vocab_text: self.data.vocab.to_text(),
            n_class: self.model.n_class,
            completed_stage: self.progress.completed_stage,
            stage: self.progress.stage,
            stage_step: self.progress.stage_step,
            global_step: self.progress.global_step,
            boundaries: self.progress.boundaries.clone(),
            params: Checkpoint::capture_params(&self.store),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn stage_steps(&self, stage: u32) -> u64 {
        self.cfg.stage_steps(stage as usize, self.data.scenes.len()) as u64
    }

    fn trainable(stage: u32) -> &'static [ParamGroup] {
        match stage {
            1 => &[ParamGroup::Detector],
            2 => &[ParamGroup::Detector, ParamGroup::Caption],
            _ => &[ParamGroup::Caption],
        }
    }

    /// Learning rate per group at `step` of `stage`; `None` freezes the group.
    pub fn lr(&self, stage: u32, step: u64, group: ParamGroup) -> Option<f64> {
        let c = &self.cfg;
        let total = self.stage_steps(stage) as usize;
        match (stage, group) {
            (1, ParamGroup::Detector) => {
                Some(CosineSchedule::new(c.s1_lr, c.s1_min_lr, total).lr_at(step as usize))
            }
            (2, ParamGroup::Detector) => Some(c.s2_det_lr),
            (2, ParamGroup::Caption) => {
                Some(CosineSchedule::new(c.s2_cap_lr, c.s2_cap_min_lr, total).lr_at(step as usize))
            }
            (3, ParamGroup::Caption) => Some(c.s3_lr),
            _ => None,
        }
    }

    /// Scene indices of step `step` of `stage`: each epoch visits the scenes
    /// in a permutation seeded by (seed, stage, epoch).
    pub fn batch(&self, stage: u32, step: u64) -> Vec<usize> {
        let n = self.data.scenes.len();
        let b = self.cfg.batch[stage as usize - 1].max(1);
        let per_epoch = n.div_ceil(b) as u64;
        let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((stage as u64) << 40) | epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm[pos * b..((pos + 1) * b).min(n)].to_vec()
    }

    fn ensure_scst(&mut self) -> Result<()> {
        if self.scst.is_some() {
            return Ok(());
        }
        let w = LossWeights::from_config(&self.cfg);
        let corpus: Vec<Vec<Vec<usize>>> = self
            .data
            .scenes
            .iter()
            .flat_map(|s| {
                s.captions
                    .iter()
                    .map(|rs| rs.iter().map(|r| strip_eos(r).to_vec()).collect())
            })
            .collect();
        let scorer = CiderScorer::new(&corpus);
        let idx: Vec<usize> = (0..self.data.scenes.len()).collect();
        let targets = self.parallel(&idx, |s| {
            ScstTarget::build(&self.model, &self.store, &self.data.scenes[s], &w)
        })?;
        self.scst = Some((targets, scorer));
        Ok(())
    }

    fn parallel<R: Send>(
        &self,
        items: &[usize],
        f: impl Fn(usize) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        map_ordered(self.threads, items, f)
    }

    fn scene_grads(&self, stage: u32, s: usize) -> Result<SceneGrads> {
        let w = LossWeights::from_config(&self.cfg);
        let scene = &self.data.scenes[s];
        let mut g = Graph::<f32>::new(&self.store).with_trainable_groups(Self::trainable(stage));
        let out = if stage == 3 {
            let (targets, scorer) = self.scst.as_ref().expect("stage 3 targets built");
            scst_scene_loss(&self.model, &mut g, &targets[s], scene, scorer, &w)?
        } else {
            supervised_loss(&self.model, &mut g, scene, &w, stage == 2)?
        };
        let grads = g.backward(out.loss);
        Ok((out.breakdown, g.param_grads(&grads)))
    }

    /// Supervised loss averaged over every scene at the current parameters.
    pub fn dataset_loss(&self, with_caption: bool) -> Result<LossBreakdown> {
        let w = LossWeights::from_config(&self.cfg);
        let idx: Vec<usize> = (0..self.data.scenes.len()).collect();
        let parts = self.parallel(&idx, |s| {
            let mut g = Graph::<f32>::new(&self.store);
            supervised_loss(&self.model, &mut g, &self.data.scenes[s], &w, with_caption)
                .map(|l| l.breakdown)
        })?;
        Ok(LossBreakdown::mean(&parts))
    }

    /// Runs (or continues) `stage` to its configured step count.
    pub fn run_stage(&mut self, stage: u32, opts: &RunOptions) -> Result<()> {
        if !(1..=3).contains(&stage) {
            return Err(BicaError::Invalid(format!("no training stage {stage}")));
        }
        if self.progress.stage != stage || self.optimizer.is_none() {
            self.progress.stage = stage;
            self.progress.stage_step = 0;
            let oc = AdamWConfig {
                weight_decay: self.cfg.weight_decay,
                clip_norm: self.cfg.clip_norm,
                ..Default::default()
            };
            self.optimizer = Some(OptimizerState::new(&self.store, oc));
        }
        if stage == 3 {
            self.ensure_scst()?;
        }
        let total = self.stage_steps(stage);
        let log_path = opts.out_dir.as_ref().map(|d| d.join("train.log"));
        if let Some(p) = &log_path {
            append(
                p,
                &format!(
                    "# stage {stage} from step {} of {total} config={} version={}\n",
                    self.progress.stage_step,
                    self.cfg.hash(),
                    self.version
                ),
            )?;
        }
        while self.progress.stage_step < total {
            if opts
                .stop_at_global_step
                .is_some_and(|g| self.progress.global_step >= g)
            {
                return Ok(());
            }
            let step = self.progress.stage_step;
            let batch = self.batch(stage, step);
            let results = self.parallel(&batch, |s| self.scene_grads(stage, s))?;
            self.store.zero_grads();
            let inv = 1.0 / batch.len() as f32;
            let mut parts = Vec::with_capacity(results.len());
            for (bd, grads) in results {
                for (id, gr) in grads {
                    let dst = self.store.get_mut(id).grad.data_mut();
                    for (d, g) in dst.iter_mut().zip(gr) {
                        *d += g * inv;
                    }
                }
                parts.push(bd);
            }
            let loss = LossBreakdown::mean(&parts);
            let grad_norm = self.store.grad_norm();
            if !loss.total.is_finite() || !grad_norm.is_finite() {
                let rec = StepRecord {
                    global_step: self.progress.global_step,
                    stage,
                    lr: f64::NAN,
                    loss,
                    grad_norm,
                };
                let msg = format!("non-finite loss or gradient at {}", rec.log_line());
                if let Some(d) = &opts.out_dir {
                    std::fs::write(
                        d.join("divergence.txt"),
                        format!("{msg}\nscenes {batch:?}\n"),
                    )?;
                }
                return Err(BicaError::Divergence(msg));
            }
            let lr_main = if stage == 1 {
                self.lr(stage, step, ParamGroup::Detector)
            } else {
                self.lr(stage, step, ParamGroup::Caption)
            };
            let lrs = [ParamGroup::Detector, ParamGroup::Caption, ParamGroup::Fixed]
                .map(|g| (g, self.lr(stage, step, g)));
            let opt = self.optimizer.as_mut().expect("optimizer initialized");
            opt.step(&mut self.store, |g| {
                lrs.iter().find(|(k, _)| *k == g).and_then(|(_, lr)| *lr)
            });
            self.progress.stage_step += 1;
            self.progress.global_step += 1;
            let rec = StepRecord {
                global_step: self.progress.global_step,
                stage,
                lr: lr_main.unwrap_or(0.0),
                loss,
                grad_norm,
            };
            let every = self.cfg.log_every.max(1) as u64;
            if let Some(p) = &log_path {
                if self.progress.stage_step.is_multiple_of(every)
                    || self.progress.stage_step == total
                    || self.progress.stage_step == 1
                {
                    append(p, &(rec.log_line() + "\n"))?;
                }
            }
            self.history.push(rec);
            if let Some(d) = &opts.out_dir {
                if opts.checkpoint_every > 0
                    && self
                        .progress
                        .stage_step
                        .is_multiple_of(opts.checkpoint_every as u64)
                {
                    self.checkpoint().save(&d.join("latest.ckpt"))?;
                }
            }
        }
        if self.progress.completed_stage < stage {
            self.progress.completed_stage = stage;
            self.progress
                .boundaries
                .push((stage, self.progress.global_step));
        }
        if let Some(d) = &opts.out_dir {
            let ck = self.checkpoint();
            ck.save(&d.join(format!("stage{stage}.ckpt")))?;
            ck.save(&d.join("latest.ckpt"))?;
        }
        Ok(())
    }

    /// Runs every stage from the current one through stage 3.
    pub fn run_all(&mut self, opts: &RunOptions) -> Result<()> {
        let first = if self.progress.stage == 0 {
            1
        } else if self.progress.completed_stage >= self.progress.stage {
            self.progress.stage + 1
        } else {
            self.progress.stage
        };
        for stage in first..=3 {
            self.run_stage(stage, opts)?;
            if opts
                .stop_at_global_step
                .is_some_and(|g| self.progress.global_step >= g)
                && self.progress.completed_stage < 3
            {
                break;
            }
        }
        Ok(())
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
