//! Dataset assembly, Stage-1 multi-task training and Stage-2 sequential
//! per-task fine-tuning.

mod data;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{
    build_datasets, clean_fingerprint, clip_seed, heldout_mask, list_wavs, load_clean_set, load_clip, make_example,
    max_clip_samples, tokenize_pairs, BuildConfig, CleanClip, DatasetCatalog, SplitPaths, CATALOG_FILE,
};

use crate::degrade::TaskLabel;
use crate::error::{Error, Result};
use crate::lm::{clean_target_mask, AdamW, BatchItem, Checkpoint, LossStats, LrSchedule, Model, ModelConfig, OptimConfig};
use crate::tokenizer::{TrainingExample, VocabLayout};
use crate::util::{mix_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Declarative training plan, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub stage: Stage,
    /// Stage-2 fine-tuning order, by distortion kind name.
    pub task_order: Vec<String>,
    /// Stage-1 optimizer steps.
    pub steps: u64,
    /// Stage-2 optimizer steps per task.
    pub steps_per_task: u64,
    /// Token budget per batch, counting every sequence at the batch's
    /// longest length.
    pub batch_tokens: usize,
    pub eval_every: u64,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Cap on held-out sequences per evaluated set (0 = all).
    pub max_eval_examples: usize,
    pub divergence_factor: f64,
    pub divergence_patience: u64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            stage: Stage::Stage1,
            task_order: crate::degrade::DistortionKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            steps: 2000,
            steps_per_task: 200,
            batch_tokens: 4096,
            eval_every: 100,
            checkpoint_every: 0,
            max_eval_examples: 0,
            divergence_factor: 10.0,
            divergence_patience: 100,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("train plan: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}

/// One JSON-lines telemetry record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    /// `stage1` / `stage2` for training loss, with a `:heldout` suffix for
    /// held-out evaluations.
    pub stage: String,
    /// Task label name, or `all`.
    pub task: String,
    pub loss: f64,
    pub tokens: u64,
}

/// Collects telemetry in memory and optionally appends it to a file.
#[derive(Default)]
pub struct Telemetry {
    pub records: Vec<TelemetryRecord>,
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl Telemetry {
    pub fn to_file(path: &Path, append: bool) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Telemetry {
            records: Vec::new(),
            file: Some(std::io::BufWriter::new(f)),
        })
    }

    fn push(&mut self, rec: TelemetryRecord) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io("telemetry", e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    fn push_stats(&mut self, step: u64, stage: &str, stats: &LossStats) -> Result<()> {
        self.push(TelemetryRecord {
            step,
            stage: stage.to_string(),
            task: "all".into(),
            loss: stats.mean(),
            tokens: stats.n_targets as u64,
        })?;
        for (&label, &(sum, n)) in &stats.per_task {
            self.push(TelemetryRecord {
                step,
                stage: stage.to_string(),
                task: TaskLabel(label).name(),
                loss: sum / n as f64,
                tokens: n as u64,
            })?;
        }
        Ok(())
    }
}

/// Per-run knobs that are not part of the plan file.
#[derive(Default)]
pub struct RunOptions {
    /// Continue from this checkpoint (must carry optimizer state).
    pub resume: Option<Checkpoint>,
    /// Where periodic and final checkpoints go.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop after this many global steps (for interrupted-run tests).
    pub stop_after: Option<u64>,
    /// Model initialization seed; defaults to a child of the plan seed.
    pub init_seed: Option<u64>,
}

pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub telemetry: Vec<TelemetryRecord>,
    /// Held-out loss per evaluated set before training (`all` = mixed set).
    pub initial_heldout: BTreeMap<String, f64>,
    pub final_heldout: BTreeMap<String, f64>,
}

/// Examples with their precomputed loss masks.
pub struct PreparedSet {
    pub examples: Vec<TrainingExample>,
    masks: Vec<Vec<bool>>,
}

impl PreparedSet {
    pub fn new(examples: Vec<TrainingExample>, layout: &VocabLayout) -> Self {
        let masks = examples
            .iter()
            .map(|ex| clean_target_mask(ex.ids.len(), ex.boundary(layout)))
            .collect();
        PreparedSet { examples, masks }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn items(&self, idx: &[usize]) -> Vec<BatchItem<'_>> {
        idx.iter()
            .map(|&i| BatchItem {
                tokens: &self.examples[i].ids,
                mask: self.masks[i].clone(),
                task: self.examples[i].task_label.0,
            })
            .collect()
    }

    pub fn all_items(&self, cap: usize) -> Vec<BatchItem<'_>> {
        let n = if cap == 0 { self.len() } else { cap.min(self.len()) };
        self.items(&(0..n).collect::<Vec<_>>())
    }
}

/// Shuffled, token-budgeted batches, epoch after epoch. The sequence is a
/// pure function of the seed, so a run can be resumed by skipping batches.
pub struct BatchStream {
    lens: Vec<usize>,
    budget: usize,
    seed: u64,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(lens: Vec<usize>, budget: usize, seed: u64) -> Self {
        BatchStream {
            lens,
            budget,
            seed,
            epoch: 0,
            queue: Default::default(),
        }
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.lens.len()).collect();
        order.shuffle(&mut rng_from_seed(mix_seed(self.seed, self.epoch)));
        self.epoch += 1;
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for i in order {
            let l = self.lens[i].max(longest);
            if !cur.is_empty() && (cur.len() + 1) * l > self.budget {
                self.queue.push_back(std::mem::take(&mut cur));
                longest = 0;
            }
            longest = longest.max(self.lens[i]);
            cur.push(i);
        }
        if !cur.is_empty() {
            self.queue.push_back(cur);
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop_front().expect("non-empty dataset")
    }
}

fn evaluate_sets(model: &Model<f32>, sets: &[(String, PreparedSet)], cap: usize) -> Result<BTreeMap<String, (f64, LossStats)>> {
    let mut out = BTreeMap::new();
    for (name, set) in sets {
        if set.is_empty() {
            continue;
        }
        let stats = model.evaluate(&set.all_items(cap))?;
        out.insert(name.clone(), (stats.mean(), stats));
    }
    Ok(out)
}

fn log_eval(tel: &mut Telemetry, step: u64, stage: Stage, evals: &BTreeMap<String, (f64, LossStats)>) -> Result<()> {
    let stage = format!("{}:heldout", stage.name());
    for (name, (loss, stats)) in evals {
        tel.push(TelemetryRecord {
            step,
            stage: stage.clone(),
            task: name.clone(),
            loss: *loss,
            tokens: stats.n_targets as u64,
        })?;
    }
    Ok(())
}

/// Divergence bookkeeping carried across checkpoints.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
struct Guard {
    initial: Option<f64>,
    above: u64,
}

impl Guard {
    fn observe(&mut self, step: u64, loss: f64, plan: &TrainPlan) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Numerics(format!("non-finite training loss at step {step}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > plan.divergence_factor * initial {
            self.above += 1;
            if self.above >= plan.divergence_patience {
                return Err(Error::Divergence { step, loss, initial });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ResumeState {
    guard_initial: Option<f64>,
    guard_above: u64,
    window_sum: f64,
    window_tokens: usize,
    window: BTreeMap<u8, (f64, usize)>,
}

struct Segment<'a> {
    stage: Stage,
    train: &'a PreparedSet,
    evals: &'a [(String, PreparedSet)],
    /// Global step at which this segment starts.
    first_step: u64,
    n_steps: u64,
    batch_seed: u64,
}

struct Loop<'a> {
    plan: &'a TrainPlan,
    model: Model<f32>,
    opt: AdamW<f32>,
    guard: Guard,
    window: LossStats,
    tel: Telemetry,
    opts: &'a RunOptions,
    meta_template: crate::lm::CheckpointMeta,
}

impl<'a> Loop<'a> {
    fn checkpoint(&self, step: u64) -> Checkpoint {
        let mut meta = self.meta_template.clone();
        meta.optim = Some(self.opt.cfg.clone());
        let rs = ResumeState {
            guard_initial: self.guard.initial,
            guard_above: self.guard.above,
            window_sum: self.window.loss_sum,
            window_tokens: self.window.n_targets,
            window: self.window.per_task.clone(),
        };
        meta.extra = serde_json::to_value(rs).expect("resume state serializes");
        Checkpoint {
            meta,
            params: self.model.params.clone(),
            optimizer: Some(self.opt.clone()),
            step,
        }
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let rs: ResumeState = serde_json::from_value(ck.meta.extra.clone()).unwrap_or_default();
        self.guard = Guard {
            initial: rs.guard_initial,
            above: rs.guard_above,
        };
        self.window = LossStats {
            loss_sum: rs.window_sum,
            n_targets: rs.window_tokens,
            per_task: rs.window,
        };
        Ok(())
    }

    /// Runs global steps `[max(seg.first_step, start), seg.first_step + n_steps)`.
    /// Returns false when stopped early by `stop_after`.
    fn run(&mut self, seg: &Segment, start: u64) -> Result<bool> {
        let lens = seg.train.examples.iter().map(|e| e.ids.len()).collect();
        let mut stream = BatchStream::new(lens, self.plan.batch_tokens, seg.batch_seed);
        let sched = LrSchedule::new(&self.opt.cfg, seg.n_steps);
        let begin = start.max(seg.first_step);
        for _ in seg.first_step..begin {
            stream.next_batch();
        }
        for step in begin..seg.first_step + seg.n_steps {
            if self.opts.stop_after.is_some_and(|s| step >= s) {
                return Ok(false);
            }
            let idx = stream.next_batch();
            let (stats, grads) = self.model.batch_gradient(&seg.train.items(&idx))?;
            self.guard.observe(step, stats.mean(), self.plan)?;
            let lr = sched.at(step - seg.first_step);
            self.opt.update(&mut self.model.params, &grads, lr);
            self.window.merge(&stats);
            let done = step + 1;
            if self.plan.eval_every > 0 && done % self.plan.eval_every == 0 {
                self.tel.push_stats(done, seg.stage.name(), &self.window)?;
                self.window = LossStats::default();
                let evals = evaluate_sets(&self.model, seg.evals, self.plan.max_eval_examples)?;
                log_eval(&mut self.tel, done, seg.stage, &evals)?;
            }
            if let Some(path) = &self.opts.checkpoint_path {
                if self.plan.checkpoint_every > 0 && done % self.plan.checkpoint_every == 0 {
                    self.checkpoint(done).write(path)?;
                }
            }
        }
        Ok(true)
    }
}

fn load_prepared(catalog: &DatasetCatalog, rel: &str) -> Result<PreparedSet> {
    Ok(PreparedSet::new(catalog.load(rel)?, &catalog.layout()))
}

/// Held-out sets evaluated during training: the mixed Stage-1 split plus
/// every per-task split.
fn eval_sets(catalog: &DatasetCatalog) -> Result<Vec<(String, PreparedSet)>> {
    let mut sets = vec![("all".to_string(), load_prepared(catalog, &catalog.stage1.heldout)?)];
    for (task, paths) in &catalog.stage2 {
        sets.push((task.clone(), load_prepared(catalog, &paths.heldout)?));
    }
    Ok(sets)
}

fn means(evals: BTreeMap<String, (f64, LossStats)>) -> BTreeMap<String, f64> {
    evals.into_iter().map(|(k, (l, _))| (k, l)).collect()
}

/// Multi-task training on the mixed Stage-1 dataset.
pub fn train_stage1(catalog: &DatasetCatalog, model_cfg: &ModelConfig, plan: &TrainPlan, opts: &RunOptions, tel: Telemetry) -> Result<StageOutcome> {
    let layout = catalog.layout();
    if model_cfg.vocab_size != layout.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match dataset vocabulary {}",
            model_cfg.vocab_size,
            layout.vocab_size()
        )));
    }
    let train = load_prepared(catalog, &catalog.stage1.train)?;
    if train.is_empty() {
        return Err(Error::Data("stage-1 training set is empty".into()));
    }
    let evals = eval_sets(catalog)?;
    let (model, opt, start) = match &opts.resume {
        Some(ck) => {
            if ck.meta.stage != "stage1" {
                return Err(Error::Config("can only resume stage 1 from a stage-1 checkpoint".into()));
            }
            let opt = ck.optimizer.clone().ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
            (ck.model()?, opt, ck.step)
        }
        None => {
            let m = Model::<f32>::init(model_cfg.clone(), opts.init_seed.unwrap_or(mix_seed(plan.seed, 1)))?;
            let opt = AdamW::new(plan.optim.clone(), &m.params);
            (m, opt, 0)
        }
    };
    let meta_template = Checkpoint::from_model(&model, "stage1").meta;
    let mut lp = Loop {
        plan,
        model,
        opt,
        guard: Guard::default(),
        window: LossStats::default(),
        tel,
        opts,
        meta_template,
    };
    if let Some(ck) = &opts.resume {
        lp.restore(ck)?;
    }
    let initial = evaluate_sets(&lp.model, &evals, plan.max_eval_examples)?;
    if start == 0 {
        log_eval(&mut lp.tel, 0, Stage::Stage1, &initial)?;
    }
    let seg = Segment {
        stage: Stage::Stage1,
        train: &train,
        evals: &evals,
        first_step: 0,
        n_steps: plan.steps,
        batch_seed: mix_seed(plan.seed, 2),
    };
    let finished = lp.run(&seg, start)?;
    let step = if finished { plan.steps } else { opts.stop_after.unwrap_or(plan.steps) };
    let checkpoint = lp.checkpoint(step);
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.write(path)?;
    }
    let final_evals = evaluate_sets(&lp.model, &evals, plan.max_eval_examples)?;
    Ok(StageOutcome {
        checkpoint,
        telemetry: lp.tel.records,
        initial_heldout: means(initial),
        final_heldout: means(final_evals),
    })
}

/// Sequential fine-tuning on each task's dataset in `plan.task_order`, with
/// a fresh optimizer and learning-rate schedule per task.
pub fn train_stage2(stage1: &Checkpoint, catalog: &DatasetCatalog, plan: &TrainPlan, opts: &RunOptions, tel: Telemetry) -> Result<StageOutcome> {
    let resuming = opts.resume.as_ref();
    if stage1.meta.stage != "stage1" {
        return Err(Error::Config(format!(
            "stage 2 needs a stage-1 checkpoint, got stage \"{}\"",
            stage1.meta.stage
        )));
    }
    for task in catalog.stage2.keys() {
        if !plan.task_order.contains(task) {
            return Err(Error::Config(format!("task_order is missing task \"{task}\"")));
        }
    }
    for task in &plan.task_order {
        if !catalog.stage2.contains_key(task) {
            return Err(Error::Config(format!("no stage-2 dataset for task \"{task}\"")));
        }
    }
    let parent = stage1.sha256_hex()?;
    let evals = eval_sets(catalog)?;
    let base = stage1.model()?;
    let initial = evaluate_sets(&base, &evals, plan.max_eval_examples)?;

    let (model, start) = match resuming {
        Some(ck) => {
            if ck.meta.stage != "stage2" || ck.meta.parent_sha256.as_deref() != Some(parent.as_str()) {
                return Err(Error::Config("resume checkpoint does not continue this stage-2 run".into()));
            }
            (ck.model()?, ck.step)
        }
        None => (base, 0),
    };
    let mut meta_template = Checkpoint::from_model(&model, "stage2").meta;
    meta_template.parent_sha256 = Some(parent);
    let opt = AdamW::new(plan.optim.clone(), &model.params);
    let mut lp = Loop {
        plan,
        model,
        opt,
        guard: Guard::default(),
        window: LossStats::default(),
        tel,
        opts,
        meta_template,
    };
    if let Some(ck) = resuming {
        lp.restore(ck)?;
    } else {
        log_eval(&mut lp.tel, 0, Stage::Stage2, &initial)?;
    }
    let mut finished = true;
    for (ti, task) in plan.task_order.iter().enumerate() {
        let first = ti as u64 * plan.steps_per_task;
        let end = first + plan.steps_per_task;
        if start >= end {
            continue;
        }
        if start > first {
            let ck = resuming.expect("mid-task start implies resume");
            lp.opt = ck.optimizer.clone().ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        } else {
            lp.opt = AdamW::new(plan.optim.clone(), &lp.model.params);
        }
        lp.meta_template.task = Some(task.clone());
        let train = load_prepared(catalog, &catalog.stage2[task].train)?;
        if train.is_empty() {
            return Err(Error::Data(format!("stage-2 training set for {task} is empty")));
        }
        let seg = Segment {
            stage: Stage::Stage2,
            train: &train,
            evals: &evals,
            first_step: first,
            n_steps: plan.steps_per_task,
            batch_seed: mix_seed(plan.seed, 100 + ti as u64),
        };
        if !lp.run(&seg, start)? {
            finished = false;
            break;
        }
    }
    let total = plan.task_order.len() as u64 * plan.steps_per_task;
    let step = if finished { total } else { opts.stop_after.unwrap_or(total) };
    let checkpoint = lp.checkpoint(step);
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.write(path)?;
    }
    let final_evals = evaluate_sets(&lp.model, &evals, plan.max_eval_examples)?;
    Ok(StageOutcome {
        checkpoint,
        telemetry: lp.tel.records,
        initial_heldout: means(initial),
        final_heldout: means(final_evals),
    })
}

/// Teacher-forced accuracy of the model's argmax predictions over the clean
/// segment and `eos` of each example.
pub fn clean_token_accuracy(model: &Model<f32>, examples: &[TrainingExample], layout: &VocabLayout) -> Result<f64> {
    let per = crate::util::par_map(examples, |ex| -> Result<(usize, usize)> {
        let logits = model.forward(&ex.ids)?;
        let v = model.cfg.vocab_size;
        let mask = clean_target_mask(ex.ids.len(), ex.boundary(layout));
        let mut hit = 0;
        let mut n = 0;
        for t in (0..ex.ids.len()).filter(|&t| mask[t]) {
            let row = &logits[t * v..(t + 1) * v];
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                .0;
            hit += usize::from(arg as u32 == ex.ids[t + 1]);
            n += 1;
        }
        Ok((hit, n))
    });
    let (mut hit, mut n) = (0, 0);
    for p in per {
        let (h, c) = p?;
        hit += h;
        n += c;
    }
    if n == 0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(hit as f64 / n as f64)
}
