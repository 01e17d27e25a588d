//! Per-task training loop, full experiments and the ablation ladder.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{augment, AugmentMode, AugmentationPolicy};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{evaluate_stream, LogitStackEnsemble};
use crate::losses::{combined_loss, contrastive_u, labeled_ce, pseudo_label_loss};
use crate::nn::{backward_inner, MlpArchitecture, ParameterSet};
use crate::optim::{adamw_step_masked, cosine_lr, AdamWState, CosineSchedule};
use crate::par;
use crate::report::{AblationReport, AblationRow, CapacityLog, EpochLog, RunReport};
use crate::rng::{self, derive_seed, tag};
use crate::scenario::{build_stream, test_splits, Experience, TaskStream, TestSplit};
use crate::tensor::Tensor2;
use crate::wsn::{
    commit_task, masked_forward, select_mask, split_gradients, supplemented_score_step,
    ScoredParameterSet, SupplementationRule, WeightMask,
};

/// A stream with its held-out splits, shareable between runs.
#[derive(Clone, Debug)]
pub struct PreparedStream {
    pub stream: TaskStream,
    pub splits: Vec<TestSplit>,
    pub digest: String,
}

impl PreparedStream {
    pub fn build(cfg: &RunConfig) -> Result<Arc<Self>> {
        Ok(Arc::new(Self::from_stream(build_stream(&cfg.stream)?)))
    }

    pub fn from_stream(stream: TaskStream) -> Self {
        let splits = test_splits(&stream);
        let digest = stream.digest();
        PreparedStream {
            stream,
            splits,
            digest,
        }
    }
}

/// Mutable training state between tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub sps: ScoredParameterSet,
    pub optimizer: AdamWState,
    /// Index of the next experience to train.
    pub next_task: usize,
}

impl TrainState {
    pub fn init(cfg: &RunConfig, arch: &MlpArchitecture) -> Result<Self> {
        let mut init_rng = rng::stream(&[tag::INIT, cfg.stream.seed]);
        let sps = ScoredParameterSet::init(arch, cfg.sparsity, &mut init_rng)?;
        let optimizer = AdamWState::new(&sps.theta, cfg.weight_decay);
        Ok(TrainState {
            sps,
            optimizer,
            next_task: 0,
        })
    }
}

#[derive(Default)]
struct EpochAcc {
    steps: u32,
    l_labeled: f64,
    l_contrastive: f64,
    l_pseudo: f64,
    l_total: f64,
    kept: u64,
    seen: u64,
}

impl EpochAcc {
    fn finish(self, task: u32, epoch: u32) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            task,
            epoch,
            steps: self.steps,
            l_labeled: self.l_labeled / n,
            l_contrastive: self.l_contrastive / n,
            l_pseudo: self.l_pseudo / n,
            l_total: self.l_total / n,
            pseudo_kept: self.kept,
            pseudo_seen: self.seen,
            pseudo_kept_rate: if self.seen == 0 {
                0.0
            } else {
                self.kept as f64 / self.seen as f64
            },
        }
    }
}

/// Cycles through the unlabeled pool, reshuffling on each pass.
struct UnlabeledCursor {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
    task: u64,
}

impl UnlabeledCursor {
    fn new(n: usize, seed: u64, task: u64) -> Self {
        let mut c = UnlabeledCursor {
            order: (0..n).collect(),
            pos: 0,
            pass: 0,
            seed,
            task,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut r = rng::stream(&[tag::UNLABELED_ORDER, self.seed, self.task, self.pass]);
        self.order.sort_unstable();
        self.order.shuffle(&mut r);
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains one experience: per step the mask is re-selected from the current
/// scores, the combined loss is back-propagated through the masked network,
/// weights take an AdamW step (frozen weights excluded) and scores take a
/// supplemented SGD step. The task is committed at the end.
pub fn train_task(
    state: &mut TrainState,
    experience: &Experience,
    cfg: &RunConfig,
    arch: &MlpArchitecture,
) -> Result<Vec<EpochLog>> {
    if experience.task_id as usize != state.next_task {
        return Err(Error::Usage(format!(
            "expected task {}, got experience {}",
            state.next_task, experience.task_id
        )));
    }
    let task = experience.task_id;
    let seed = cfg.stream.seed;
    let epochs = cfg.planned_epochs(task as usize);
    let n_labeled = experience.labeled.rows();
    if n_labeled == 0 {
        return Err(Error::Usage(format!("task {task} has no labeled data")));
    }
    let batches = n_labeled.div_ceil(cfg.labeled_batch);
    let total_steps = (epochs * batches) as u64;
    let lr_sched = CosineSchedule::new(cfg.lr, cfg.lr_min.min(cfg.lr), total_steps)?;
    let score_sched = CosineSchedule::new(cfg.score_lr, 0.0, total_steps)?;
    let rule = SupplementationRule::new(cfg.gamma)?;
    let pl_cfg = cfg.pseudo_config();
    let alpha = if cfg.contrastive_active() { cfg.alpha } else { 0.0 };
    let beta = if cfg.pseudo_active() { cfg.beta } else { 0.0 };
    let use_unlabeled = cfg.uses_unlabeled() && experience.unlabeled.rows() > 0;
    let mut cursor = UnlabeledCursor::new(experience.unlabeled.rows(), seed, task as u64);

    let mut logs = Vec::with_capacity(epochs);
    let mut step: u64 = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n_labeled).collect();
        order.shuffle(&mut rng::stream(&[tag::LABELED_ORDER, seed, task as u64, epoch as u64]));
        let mut acc = EpochAcc::default();
        for (b, chunk) in order.chunks(cfg.labeled_batch).enumerate() {
            let ctx = || format!("task {task}, epoch {epoch}, batch {b}");
            let mask = select_mask(&state.sps, task, &experience.class_set)?;

            let xb = experience.labeled.select_rows(chunk);
            let yb: Vec<u32> = chunk.iter().map(|&i| experience.labels[i]).collect();
            let (logits, cache_l) = masked_forward(&state.sps, &mask, arch, &xb)?;
            let labeled = labeled_ce(&logits, &yb)?;

            let mut unlabeled_caches = None;
            let mut contrastive = None;
            let mut pseudo = None;
            if use_unlabeled {
                let idx = cursor.next_batch(cfg.unlabeled_batch);
                let ub = experience.unlabeled.select_rows(&idx);
                let keys: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
                let policy = AugmentationPolicy::new(
                    cfg.stream.image_side,
                    derive_seed(&[seed, task as u64, step]),
                );
                let weak_x = augment(&ub, &policy, AugmentMode::Weak, &keys)?;
                let strong_x = augment(&ub, &policy, AugmentMode::Strong, &keys)?;
                let (weak, cache_w) = masked_forward(&state.sps, &mask, arch, &weak_x)?;
                let (strong, cache_s) = masked_forward(&state.sps, &mask, arch, &strong_x)?;
                if cfg.contrastive_active() {
                    contrastive = Some(contrastive_u(&weak, &strong, cfg.eps_stab)?);
                }
                if cfg.pseudo_active() {
                    pseudo = Some(pseudo_label_loss(&weak, &strong, &pl_cfg)?);
                }
                acc.seen += idx.len() as u64;
                unlabeled_caches = Some((cache_w, cache_s));
            }
            let bundle = combined_loss(&labeled, contrastive.as_ref(), pseudo.as_ref(), alpha, beta)
                .map_err(|e| e.with_context(&ctx()))?;

            let mut grad = backward_inner(&cache_l, &bundle.grad_labeled, false)?.params;
            if let Some((cache_w, cache_s)) = &unlabeled_caches {
                if contrastive.is_some() {
                    grad.axpy(1.0, &backward_inner(cache_w, &bundle.grad_weak, false)?.params)?;
                }
                grad.axpy(1.0, &backward_inner(cache_s, &bundle.grad_strong, false)?.params)?;
            }
            let (theta_grad, score_grad) = split_gradients(&grad, &state.sps, &mask)?;
            let lr = cosine_lr(&lr_sched, step);
            let eta = cosine_lr(&score_sched, step);
            adamw_step_masked(
                &mut state.sps.theta,
                &theta_grad,
                &mut state.optimizer,
                lr,
                Some(state.sps.history_mask.layers()),
            )
            .map_err(|e| e.with_context(&ctx()))?;
            supplemented_score_step(&mut state.sps, &score_grad, &mask, rule, eta)?;
            if !state.sps.theta.is_finite() || state.sps.scores.iter().flatten().any(|s| !s.is_finite()) {
                return Err(Error::Numeric(format!("{}: parameters became non-finite", ctx())));
            }

            acc.steps += 1;
            acc.l_labeled += bundle.l_labeled;
            acc.l_contrastive += bundle.l_contrastive;
            acc.l_pseudo += bundle.l_pseudo;
            acc.l_total += bundle.l_total;
            acc.kept += bundle.pseudo_kept as u64;
            step += 1;
        }
        let log = acc.finish(task, epoch as u32);
        log::debug!(
            "task {task} epoch {epoch}: L={:.4} Ll={:.4} Lu={:.4} Lp={:.4} kept={}",
            log.l_total,
            log.l_labeled,
            log.l_contrastive,
            log.l_pseudo,
            log.pseudo_kept
        );
        logs.push(log);
    }
    let final_mask = select_mask(&state.sps, task, &experience.class_set)?;
    commit_task(&mut state.sps, final_mask)?;
    state.next_task += 1;
    Ok(logs)
}

fn count_overlap(a: &WeightMask, b: &WeightMask) -> Vec<usize> {
    a.layers()
        .iter()
        .zip(b.layers())
        .map(|(x, y)| x.iter().zip(y).filter(|(&p, &q)| p && q).count())
        .collect()
}

/// Drives a full run over a prepared stream.
pub struct Trainer {
    pub cfg: RunConfig,
    pub arch: MlpArchitecture,
    pub data: Arc<PreparedStream>,
    pub state: TrainState,
    pub report: RunReport,
    probe: Tensor2,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: Arc<PreparedStream>) -> Result<Self> {
        cfg.validate()?;
        if data.stream.spec != cfg.stream {
            return Err(Error::Config("stream was generated from a different spec".into()));
        }
        let arch = cfg.architecture()?;
        let state = TrainState::init(&cfg, &arch)?;
        let report = RunReport::new(&cfg, data.digest.clone());
        Self::assemble(cfg, arch, data, state, report)
    }

    /// Continues from a saved state and partial report.
    pub fn resume(
        cfg: RunConfig,
        data: Arc<PreparedStream>,
        state: TrainState,
        report: RunReport,
    ) -> Result<Self> {
        if data.digest != report.stream_digest {
            return Err(Error::Config("checkpoint was trained on a different stream".into()));
        }
        let arch = cfg.architecture()?;
        if !state.sps.theta.matches(&arch) {
            return Err(Error::format(0, "checkpoint parameters do not match the architecture"));
        }
        Self::assemble(cfg, arch, data, state, report)
    }

    fn assemble(
        cfg: RunConfig,
        arch: MlpArchitecture,
        data: Arc<PreparedStream>,
        state: TrainState,
        report: RunReport,
    ) -> Result<Self> {
        let first = data
            .splits
            .first()
            .ok_or_else(|| Error::Usage("stream has no tasks".into()))?;
        let n = cfg.probe_size.min(first.labels.len()).max(1);
        let probe = first.images.select_rows(&(0..n).collect::<Vec<_>>());
        Ok(Trainer {
            cfg,
            arch,
            data,
            state,
            report,
            probe,
        })
    }

    pub fn probe(&self) -> &Tensor2 {
        &self.probe
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_task >= self.data.stream.experiences.len()
    }

    /// Trains, commits and evaluates the next task.
    pub fn step_task(&mut self) -> Result<()> {
        let t = self.state.next_task;
        let experience = self
            .data
            .stream
            .experiences
            .get(t)
            .ok_or_else(|| Error::Usage("all tasks are already trained".into()))?;
        let history_before = self.state.sps.history_mask.clone();
        let logs = train_task(&mut self.state, experience, &self.cfg, &self.arch)?;
        self.report.epochs.extend(logs);

        let committed = &self.state.sps.archive().last().expect("just committed").mask;
        self.report.capacity.push(CapacityLog {
            task: committed.task_id,
            class_set: committed.class_set.clone(),
            mask_active: committed.mask.popcounts(),
            history_active: self.state.sps.history_mask.popcounts(),
            reused_from_history: count_overlap(&committed.mask, &history_before),
        });

        let row = self.evaluate_through(t)?;
        self.report.accuracy.push(row);
        self.report.refresh_summary();
        if self.is_finished() {
            self.report.complete = true;
        }
        Ok(())
    }

    /// Evaluates the committed model on the splits of tasks `0..=last`.
    pub fn evaluate_through(&self, last: usize) -> Result<crate::inference::EvalRow> {
        let ensemble = LogitStackEnsemble::from_archive(&self.state.sps);
        evaluate_stream(
            &ensemble,
            &self.state.sps,
            &self.arch,
            &self.data.splits[..=last],
            self.cfg.inference_mode(),
            self.cfg.eval_batch,
            &self.probe,
        )
    }

    pub fn run_all(&mut self) -> Result<()> {
        let start = Instant::now();
        let result = (|| {
            while !self.is_finished() {
                self.step_task()?;
            }
            Ok(())
        })();
        self.report.wall_clock_secs += start.elapsed().as_secs_f64();
        result
    }

    pub fn parameters(&self) -> &ParameterSet {
        &self.state.sps.theta
    }
}

/// Builds the stream, trains every task and returns the report.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    let data = PreparedStream::build(cfg)?;
    run_on(cfg, data)
}

pub fn run_on(cfg: &RunConfig, data: Arc<PreparedStream>) -> Result<RunReport> {
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    trainer.run_all()?;
    Ok(trainer.report)
}

/// Names of the ablation rows, in order.
pub const ABLATION_METHODS: [&str; 4] = [
    "Baseline",
    "Unsupervised contrastive learning",
    "Pseudo-label classification learning",
    "Subnetworks interaction",
];

/// The four configurations of the ablation ladder, each adding one component.
pub fn ablation_configs(cfg: &RunConfig) -> [RunConfig; 4] {
    let with = |c: bool, p: bool, e: bool| RunConfig {
        use_contrastive: c,
        use_pseudo: p,
        use_ensemble: e,
        ..cfg.clone()
    };
    [
        with(false, false, false),
        with(true, false, false),
        with(true, true, false),
        with(true, true, true),
    ]
}

/// Runs the four ablation configurations on one shared stream.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    let data = PreparedStream::build(cfg)?;
    let configs = ablation_configs(cfg);
    let reports = par::map(&configs, |c| run_on(c, Arc::clone(&data)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(4);
    let mut prev = None;
    for (name, (rep, c)) in ABLATION_METHODS.iter().zip(reports.iter().zip(&configs)) {
        let acc = rep
            .headline(c.metric)
            .ok_or_else(|| Error::Usage("run finished without a final accuracy row".into()))?;
        rows.push(AblationRow {
            method: name.to_string(),
            average_accuracy: acc,
            delta: prev.map_or(0.0, |p| acc - p),
        });
        prev = Some(acc);
    }
    Ok(AblationReport {
        stream_digest: data.digest.clone(),
        rows,
        reports,
    })
}
