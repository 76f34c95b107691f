use std::time::Instant;

use clbench_tensor::{Adam, AdamConfig, Gradients, NodeId, ParamStore, Tape, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig};
use crate::data::{LabelMap, Scenario, TaskStream};
use crate::error::{contract, Error, Result};
use crate::losses::LossWeights;
use crate::models::{standard_normal, Classifier, ClassifierNet, GateSpec, Generator, RtfNet, VaeNet, LATENT_DIM};
use crate::regularizers::{estimate_fisher, EwcStore, OnlineEwcStore, SiStore};
use crate::replay::{
    generative_loss_node, label_replay, replay_lwf, train_generator_step, ReplayBatch, ReplayTargets, Snapshot,
    TargetKind,
};
use crate::rng::{stream_rng, Rng, Stream};

/// Iterations averaged into one point of a stored loss curve.
pub const LOSS_WINDOW: usize = 50;

/// Rows scored at once during evaluation.
const EVAL_CHUNK: usize = 1000;

/// The model being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Classifier(ClassifierNet),
    Rtf(RtfNet),
}

impl Classifier for Model {
    fn params(&self) -> &ParamStore {
        match self {
            Model::Classifier(m) => m.params(),
            Model::Rtf(m) => Classifier::params(m),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Classifier(m) => m.params_mut(),
            Model::Rtf(m) => m.params_mut(),
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            Model::Classifier(m) => m.input_dim(),
            Model::Rtf(m) => m.input_dim(),
        }
    }

    fn output_width(&self) -> usize {
        match self {
            Model::Classifier(m) => m.output_width(),
            Model::Rtf(m) => m.output_width(),
        }
    }

    fn logits(&self, tape: &mut Tape, x: NodeId, gate: Option<usize>) -> Result<NodeId> {
        match self {
            Model::Classifier(m) => m.logits(tape, x, gate),
            Model::Rtf(m) => m.logits(tape, x, gate),
        }
    }
}

/// Parameter-importance state of the regularization methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Consolidation {
    Off,
    Ewc(EwcStore),
    OnlineEwc(OnlineEwcStore),
    Si(SiStore),
}

/// Frozen copies taken at the end of the previous task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub model: Snapshot<Model>,
    pub generator: Option<Snapshot<VaeNet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorState {
    pub net: VaeNet,
    pub adam: Adam,
}

/// Everything that changes while a run trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub tasks_done: usize,
    pub model: Model,
    pub adam: Adam,
    pub generator: Option<GeneratorState>,
    pub consolidation: Consolidation,
    pub teacher: Option<Teacher>,
    pub task_seconds: Vec<f64>,
    /// Per task, the training loss averaged over windows of
    /// [`LOSS_WINDOW`] iterations.
    pub loss_curves: Vec<Vec<f32>>,
    batch_rng: Rng,
    noise_rng: Rng,
}

impl RunState {
    pub fn new(config: &RunConfig, labels: &LabelMap, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut init = stream_rng(config.seed, Stream::Init);
        let width = labels.output_width();
        let model = match config.method {
            Method::Rtf => Model::Rtf(RtfNet::new(input_dim, config.hidden, LATENT_DIM, width, &mut init)),
            _ => {
                let mut net = ClassifierNet::new(input_dim, config.hidden, width, &mut init);
                if config.method == Method::Xdg {
                    let mut rng = stream_rng(config.seed, Stream::Gates);
                    let widths = [config.hidden, config.hidden];
                    let gates = GateSpec::draw(config.n_tasks, &widths, config.hyper.xdg_pct / 100.0, &mut rng)?;
                    net = net.with_gates(gates)?;
                }
                Model::Classifier(net)
            }
        };
        let adam_config = AdamConfig::with_lr(config.lr);
        let adam = Adam::new(adam_config, model.params());
        let generator = config.method.has_generator().then(|| {
            let mut rng = stream_rng(config.seed, Stream::GeneratorInit);
            let net = VaeNet::new(input_dim, config.hidden, LATENT_DIM, &mut rng);
            let adam = Adam::new(adam_config, Generator::params(&net));
            GeneratorState { net, adam }
        });
        let consolidation = match config.method {
            Method::Ewc => Consolidation::Ewc(EwcStore::new()),
            Method::Oewc => Consolidation::OnlineEwc(OnlineEwcStore::new(config.hyper.gamma)?),
            Method::Si => Consolidation::Si(SiStore::new(model.params(), config.hyper.si_xi)?),
            _ => Consolidation::Off,
        };
        Ok(Self {
            tasks_done: 0,
            model,
            adam,
            generator,
            consolidation,
            teacher: None,
            task_seconds: Vec::new(),
            loss_curves: Vec::new(),
            batch_rng: stream_rng(config.seed, Stream::Batches),
            noise_rng: stream_rng(config.seed, Stream::Noise),
        })
    }
}

/// Current-task examples with their active units and targets.
struct Batch {
    x: Tensor,
    units: Vec<usize>,
    width: usize,
    targets: Vec<usize>,
}

/// Sequential trainer for one run.
pub struct Trainer {
    config: RunConfig,
    stream: TaskStream,
    labels: LabelMap,
    state: RunState,
}

impl Trainer {
    pub fn new(config: RunConfig, stream: TaskStream) -> Result<Self> {
        let labels = Self::check_stream(&config, &stream)?;
        let state = RunState::new(&config, &labels, stream.input_dim())?;
        Ok(Self {
            config,
            stream,
            labels,
            state,
        })
    }

    /// Continues a run from saved state.
    pub fn resume(config: RunConfig, stream: TaskStream, state: RunState) -> Result<Self> {
        let labels = Self::check_stream(&config, &stream)?;
        if state.model.input_dim() != stream.input_dim() || state.model.output_width() != labels.output_width() {
            return Err(contract("saved model does not fit this task stream"));
        }
        Ok(Self {
            config,
            stream,
            labels,
            state,
        })
    }

    fn check_stream(config: &RunConfig, stream: &TaskStream) -> Result<LabelMap> {
        config.validate()?;
        if stream.protocol != config.protocol || stream.len() != config.n_tasks {
            return Err(Error::Config(format!(
                "stream has {} {} tasks, config expects {} {}",
                stream.len(),
                stream.protocol,
                config.n_tasks,
                config.protocol
            )));
        }
        stream.label_map(config.scenario)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn stream(&self) -> &TaskStream {
        &self.stream
    }

    fn gate(&self, task: usize) -> Option<usize> {
        (self.config.method == Method::Xdg).then_some(task)
    }

    /// Trains on task `task`, which must be the next unvisited task.
    pub fn train_task(&mut self, task: usize) -> Result<()> {
        if task != self.state.tasks_done || task >= self.stream.len() {
            return Err(contract(format!(
                "task {task} out of order: {} tasks done of {}",
                self.state.tasks_done,
                self.stream.len()
            )));
        }
        let start = Instant::now();
        let mut curve = Vec::with_capacity(self.config.iters / LOSS_WINDOW + 1);
        let mut window = (0.0f64, 0usize);
        for _ in 0..self.config.iters {
            let loss = self.step(task)?;
            window.0 += loss;
            window.1 += 1;
            if window.1 == LOSS_WINDOW {
                curve.push((window.0 / window.1 as f64) as f32);
                window = (0.0, 0);
            }
        }
        if window.1 > 0 {
            curve.push((window.0 / window.1 as f64) as f32);
        }
        self.finish_task(task)?;
        self.state.task_seconds.push(start.elapsed().as_secs_f64());
        self.state.loss_curves.push(curve);
        self.state.tasks_done += 1;
        Ok(())
    }

    fn current_batch(&mut self, task: usize) -> Result<Batch> {
        let n = self.config.batch;
        let labels = &self.labels;
        let mut owners = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        if self.config.method == Method::Offline {
            let sizes: Vec<usize> = self.stream.tasks[..=task].iter().map(|t| t.train.len()).collect();
            let total: usize = sizes.iter().sum();
            for _ in 0..n {
                let mut r = self.state.batch_rng.gen_range(0..total);
                let mut t = 0;
                while r >= sizes[t] {
                    r -= sizes[t];
                    t += 1;
                }
                owners.push(t);
                positions.push(r);
            }
        } else {
            let len = self.stream.tasks[task].train.len();
            for _ in 0..n {
                owners.push(task);
                positions.push(self.state.batch_rng.gen_range(0..len));
            }
        }
        let dim = self.stream.input_dim();
        let mut x = Tensor::zeros(&[n, dim]);
        let mut targets = Vec::with_capacity(n);
        let mut units = Vec::new();
        let shared = labels.train_units(task)?;
        let width = shared.len();
        for (r, (&t, &p)) in owners.iter().zip(&positions).enumerate() {
            let data = &self.stream.tasks[t].train;
            x.row_mut(r).copy_from_slice(data.images(&[p]).data());
            let digit = data.label(p);
            match labels.scenario() {
                Scenario::Task => {
                    units.extend(labels.train_units(t)?);
                    targets.push(labels.target(t, digit)?);
                }
                Scenario::Domain | Scenario::Class => {
                    units.extend_from_slice(&shared);
                    targets.push(labels.target(t, digit)?);
                }
            }
        }
        Ok(Batch {
            x,
            units,
            width,
            targets,
        })
    }

    fn replay_batch(&mut self, task: usize, current_x: &Tensor) -> Result<Option<ReplayBatch>> {
        let Some(teacher) = &self.state.teacher else {
            return Ok(None);
        };
        let t = self.config.hyper.temperature;
        let n = self.config.replay_batch;
        let rng = &mut self.state.noise_rng;
        let batch = match self.config.method {
            Method::Lwf => replay_lwf(&*teacher.model, current_x, &self.labels, task, t)?,
            Method::Dgr | Method::DgrDistill => {
                let generator = teacher
                    .generator
                    .as_ref()
                    .ok_or_else(|| contract("generative replay without a frozen generator"))?;
                let kind = if self.config.method == Method::Dgr {
                    TargetKind::Hard
                } else {
                    TargetKind::Soft(t)
                };
                let x = generator.sample(n, rng)?;
                label_replay(&*teacher.model, x, &self.labels, task, kind)?
            }
            Method::Rtf => {
                let Model::Rtf(net) = &*teacher.model else {
                    return Err(contract("replay through feedback needs its own frozen model"));
                };
                let x = net.sample(n, rng)?;
                label_replay(net, x, &self.labels, task, TargetKind::Soft(t))?
            }
            _ => return Ok(None),
        };
        Ok(Some(batch))
    }

    /// One optimizer step on task `task`; returns the training loss.
    fn step(&mut self, task: usize) -> Result<f64> {
        let cur = self.current_batch(task)?;
        let replay = self.replay_batch(task, &cur.x)?;
        let shared_inputs = self.config.method == Method::Lwf;
        let x_all = match (&replay, shared_inputs) {
            (Some(r), false) => Tensor::concat_rows(&[&cur.x, &r.x])?,
            _ => cur.x.clone(),
        };
        let noise = match self.state.model {
            Model::Rtf(_) => Some(standard_normal(x_all.rows(), LATENT_DIM, &mut self.state.noise_rng)),
            Model::Classifier(_) => None,
        };
        let weights = LossWeights::new(task + 1)?;
        let (loss, grads) = self.gradients(task, &cur, replay.as_ref(), x_all, noise, weights)?;

        let before = match self.state.consolidation {
            Consolidation::Si(_) => Some(self.state.model.params().tensors().to_vec()),
            _ => None,
        };
        self.state.adam.step(self.state.model.params_mut(), &grads)?;
        if let (Consolidation::Si(si), Some(before)) = (&mut self.state.consolidation, before) {
            si.accumulate(&before, self.state.model.params(), &grads)?;
        }

        if let Some(gen) = &mut self.state.generator {
            let replay_x = replay.as_ref().map(|r| &r.x);
            train_generator_step(
                &mut gen.net,
                &mut gen.adam,
                &cur.x,
                replay_x,
                task + 1,
                &mut self.state.noise_rng,
            )?;
        }
        Ok(loss)
    }

    fn gradients(
        &self,
        task: usize,
        cur: &Batch,
        replay: Option<&ReplayBatch>,
        x_all: Tensor,
        noise: Option<Tensor>,
        weights: LossWeights,
    ) -> Result<(f64, Gradients)> {
        let model = &self.state.model;
        let params = model.params();
        let mut tape = Tape::new(params);
        let rows = x_all.rows();
        let m = cur.x.rows();
        let xin = tape.input(x_all);
        let mut gen_terms = (None, None);
        let logits = match (model, noise) {
            (Model::Rtf(net), Some(noise)) => {
                let pass = net.vae().forward(&mut tape, xin, noise)?;
                let split = rows > m;
                gen_terms.0 = Some(generative_loss_node(&mut tape, &pass, xin, 0, m)?);
                if split {
                    gen_terms.1 = Some(generative_loss_node(&mut tape, &pass, xin, m, rows)?);
                }
                net.head_logits(&mut tape, pass.hidden)?
            }
            _ => model.logits(&mut tape, xin, self.gate(task))?,
        };
        let cur_logits = if rows > m { tape.slice_rows(logits, 0, m)? } else { logits };
        let active = tape.gather_cols_per_row(cur_logits, cur.units.clone(), cur.width)?;
        let logp = tape.log_softmax(active, 1.0)?;
        let mut cur_loss = tape.nll(logp, &cur.targets)?;
        if let Some(g) = gen_terms.0 {
            cur_loss = tape.add(cur_loss, g)?;
        }

        let mut loss = cur_loss;
        if let Some(r) = replay {
            let rep_logits = if rows > m {
                tape.slice_rows(logits, m, rows)?
            } else {
                logits
            };
            let active = tape.gather_cols_per_row(rep_logits, r.units.clone(), r.width)?;
            let mut rep_loss = match &r.targets {
                ReplayTargets::Hard(t) => {
                    let lp = tape.log_softmax(active, 1.0)?;
                    tape.nll(lp, t)?
                }
                ReplayTargets::Soft { probs, temperature } => {
                    let lp = tape.log_softmax(active, *temperature)?;
                    tape.soft_cross_entropy(lp, probs.clone(), temperature * temperature)?
                }
            };
            if let Some(g) = gen_terms.1 {
                rep_loss = tape.add(rep_loss, g)?;
            }
            let c = tape.scale(cur_loss, weights.current as f32);
            let r = tape.scale(rep_loss, weights.replay as f32);
            loss = tape.add(c, r)?;
        }

        let h = &self.config.hyper;
        let penalty = match &self.state.consolidation {
            Consolidation::Off => None,
            Consolidation::Ewc(s) => s.penalty_node(&mut tape, params)?.map(|p| (p, h.lambda)),
            Consolidation::OnlineEwc(s) => s.penalty_node(&mut tape, params)?.map(|p| (p, h.lambda)),
            Consolidation::Si(s) => s.penalty_node(&mut tape, params)?.map(|p| (p, h.si_c)),
        };
        if let Some((p, strength)) = penalty {
            let p = tape.scale(p, strength as f32);
            loss = tape.add(loss, p)?;
        }
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("training loss became {value} on task {task}")));
        }
        Ok((value, tape.backward(loss)?))
    }

    fn finish_task(&mut self, task: usize) -> Result<()> {
        let data = &self.stream.tasks[task].train;
        let n_fisher = self.config.hyper.n_fisher;
        match &mut self.state.consolidation {
            Consolidation::Off => {}
            Consolidation::Ewc(store) => {
                let f = estimate_fisher(&self.state.model, data, &self.labels, task, None, n_fisher)?;
                store.consolidate(self.state.model.params(), f)?;
            }
            Consolidation::OnlineEwc(store) => {
                let f = estimate_fisher(&self.state.model, data, &self.labels, task, None, n_fisher)?;
                store.consolidate(self.state.model.params(), f)?;
            }
            Consolidation::Si(store) => store.consolidate(self.state.model.params())?,
        }
        if self.config.method.replays() {
            self.state.teacher = Some(Teacher {
                model: Snapshot::capture(&self.state.model),
                generator: self.state.generator.as_ref().map(|g| Snapshot::capture(&g.net)),
            });
        }
        Ok(())
    }

    /// Test accuracy (percent) of every task trained so far.
    pub fn evaluate(&self) -> Result<Vec<f64>> {
        let seen = self.state.tasks_done;
        (0..seen)
            .map(|t| {
                let data = &self.stream.tasks[t].test;
                let units = self.labels.eval_units(t, seen)?;
                let gate = self.gate(t);
                let mut correct = 0usize;
                let positions: Vec<usize> = (0..data.len()).collect();
                for chunk in positions.chunks(EVAL_CHUNK) {
                    let (x, digits) = data.batch(chunk);
                    let logits = self.state.model.logits_of(&x, gate)?;
                    for (pred, &d) in logits.argmax_rows(&units).into_iter().zip(&digits) {
                        if units[pred] == self.labels.unit(t, d)? {
                            correct += 1;
                        }
                    }
                }
                Ok(100.0 * correct as f64 / data.len() as f64)
            })
            .collect()
    }
}
