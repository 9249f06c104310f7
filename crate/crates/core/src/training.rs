//! Alternating optimization of the localizer and the adversarial classifier.
//!
//! Global steps are grouped into phases of `phase_length` steps. Even
//! phases update only the localizer on `L_loc + alpha L_am + beta L_reg`,
//! with the attention-mining gradient reaching the localizer through the
//! soft mask and the erased pixels; odd phases update only the adversarial
//! classifier on erased copies built by the frozen localizer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::attention_graph;
use crate::datasets::{augment_train, Dataset, LabeledImage, MultiHotLabel};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    adversarial_loss_graph, attention_mining_graph, bce_graph, regularization_graph, stack_images,
    total_graph, AdversarialTarget, LossBreakdown, LossWeights, MiningScore,
};
use crate::masking::{check_omega, ErasedExample};
use crate::nn::{forward, Classifier, Forward};
use crate::optim::Sgd;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Localizer,
    Adversarial,
}

impl Phase {
    /// Phase of global step `step`; the localizer trains first.
    pub fn at(step: usize, phase_length: usize) -> Phase {
        if (step / phase_length.max(1)) % 2 == 0 {
            Phase::Localizer
        } else {
            Phase::Adversarial
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Localizer => "localizer",
            Phase::Adversarial => "adversarial",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    pub psi: f64,
    pub rho: f64,
    pub lr_localizer: f64,
    pub lr_adversarial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub phase_length: usize,
    pub epochs: usize,
    pub crop: usize,
    pub augment: bool,
    pub flip: bool,
    pub seed: u64,
    pub adversarial_target: AdversarialTarget,
    pub mining_score: MiningScore,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 1e-5,
            omega: 100.0,
            psi: 0.5,
            rho: 0.3,
            lr_localizer: 0.01,
            lr_adversarial: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 16,
            phase_length: 200,
            epochs: 10,
            crop: 448,
            augment: true,
            flip: false,
            seed: 0,
            adversarial_target: AdversarialTarget::Full,
            mining_score: MiningScore::Sigmoid,
        }
    }
}

impl HyperParams {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.alpha, self.beta)?;
        check_omega(self.omega)?;
        if !self.psi.is_finite() {
            return Err(Error::invalid("psi must be finite"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid("rho must lie in (0, 1)"));
        }
        for (name, v) in [("lr_localizer", self.lr_localizer), ("lr_adversarial", self.lr_adversarial)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        if self.batch_size == 0 || self.phase_length == 0 || self.crop == 0 {
            return Err(Error::invalid("batch_size, phase_length and crop must be at least 1"));
        }
        Ok(())
    }

    /// Optimizer steps of a full run over `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
}

impl HistoryEntry {
    /// `step=.. phase=.. loc=.. adv=.. am=.. reg=.. total=..`
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!(
            "step={} phase={} loc={:.6e} adv={:.6e} am={:.6e} reg={:.6e} total={:.6e}",
            self.step, self.phase, l.loc, l.adv, l.am, l.reg, l.total
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<L, A> {
    pub step: usize,
    pub localizer: L,
    pub adversarial: A,
    pub hp: HyperParams,
    pub history: Vec<HistoryEntry>,
    rng: ChaCha8Rng,
    opt_localizer: Sgd,
    opt_adversarial: Sgd,
}

impl<L: Classifier, A: Classifier> TrainState<L, A> {
    pub fn new(localizer: L, adversarial: A, hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        if localizer.class_count() != adversarial.class_count() {
            return Err(Error::invalid("localizer and adversarial disagree on class count"));
        }
        Ok(Self {
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(hp.seed),
            opt_localizer: Sgd::new(hp.lr_localizer, hp.momentum, hp.weight_decay),
            opt_adversarial: Sgd::new(hp.lr_adversarial, hp.momentum, hp.weight_decay),
            localizer,
            adversarial,
            hp,
            history: Vec::new(),
        })
    }

    pub fn phase(&self) -> Phase {
        Phase::at(self.step, self.hp.phase_length)
    }

    fn expect_phase(&self, expected: Phase) -> Result<()> {
        let actual = self.phase();
        if actual != expected {
            return Err(Error::PhaseMismatch { expected, actual });
        }
        Ok(())
    }

    /// One gradient step of the localizer on the total loss; the adversarial
    /// parameters are read but never written.
    pub fn localizer_step(&mut self, batch: &[LabeledImage]) -> Result<&HistoryEntry> {
        self.expect_phase(Phase::Localizer)?;
        let mut g = Graph::new();
        let pass = erase_pass(&mut g, &self.localizer, &self.adversarial, batch, &self.hp, true, false)?;
        let total = total_graph(&mut g, pass.loc, pass.am, pass.reg, self.hp.weights());
        let mut grads = g.backward(total);
        let updates: Vec<Tensor> = pass
            .localizer
            .params
            .iter()
            .zip(self.localizer.params().iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        self.opt_localizer.step(self.localizer.params_mut(), &updates);
        let losses = pass.breakdown(&g, total);
        Ok(self.record(Phase::Localizer, losses))
    }

    /// One gradient step of the adversarial classifier on erased copies;
    /// the localizer is frozen and receives no gradient.
    pub fn adversarial_step(&mut self, batch: &[LabeledImage]) -> Result<&HistoryEntry> {
        self.expect_phase(Phase::Adversarial)?;
        let mut g = Graph::new();
        let pass = erase_pass(&mut g, &self.localizer, &self.adversarial, batch, &self.hp, false, true)?;
        let mut grads = g.backward(pass.adv);
        let updates: Vec<Tensor> = pass
            .adversarial
            .params
            .iter()
            .zip(self.adversarial.params().iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        self.opt_adversarial.step(self.adversarial.params_mut(), &updates);
        let total = total_graph(&mut g, pass.loc, pass.am, pass.reg, self.hp.weights());
        let losses = pass.breakdown(&g, total);
        Ok(self.record(Phase::Adversarial, losses))
    }

    /// Dispatch to the step of the current phase.
    pub fn step_batch(&mut self, batch: &[LabeledImage]) -> Result<&HistoryEntry> {
        match self.phase() {
            Phase::Localizer => self.localizer_step(batch),
            Phase::Adversarial => self.adversarial_step(batch),
        }
    }

    fn record(&mut self, phase: Phase, losses: LossBreakdown) -> &HistoryEntry {
        self.history.push(HistoryEntry {
            step: self.step,
            phase,
            losses,
        });
        self.step += 1;
        self.history.last().expect("just pushed")
    }
}

/// Graph nodes of one erase-and-classify pass.
struct ErasePass {
    localizer: Forward,
    adversarial: Forward,
    loc: Var,
    am: Var,
    reg: Var,
    adv: Var,
    erased: Var,
    pairs: Vec<(usize, usize)>,
}

impl ErasePass {
    fn breakdown(&self, g: &Graph, total: Var) -> LossBreakdown {
        LossBreakdown {
            loc: g.value(self.loc).item(),
            adv: g.value(self.adv).item(),
            am: g.value(self.am).item(),
            reg: g.value(self.reg).item(),
            total: g.value(total).item(),
        }
    }
}

fn batch_tensor(batch: &[LabeledImage]) -> Result<Tensor> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let dims = (first.height(), first.width());
    if batch.iter().any(|b| (b.height(), b.width()) != dims) {
        return Err(Error::ShapeMismatch("images in a batch must share a size".into()));
    }
    Ok(stack_images(batch.iter().map(LabeledImage::to_tensor)))
}

/// `(image, class)` for every positive label bit, in batch order.
pub fn positive_pairs(batch: &[LabeledImage]) -> Vec<(usize, usize)> {
    batch
        .iter()
        .enumerate()
        .flat_map(|(n, img)| img.label.positives().into_iter().map(move |c| (n, c)))
        .collect()
}

fn erase_pass<L: Classifier + ?Sized, A: Classifier + ?Sized>(
    g: &mut Graph,
    localizer: &L,
    adversarial: &A,
    batch: &[LabeledImage],
    hp: &HyperParams,
    train_localizer: bool,
    train_adversarial: bool,
) -> Result<ErasePass> {
    let x = g.constant(batch_tensor(batch)?);
    let (_, _, h, w) = g.value(x).dims4();
    let n = batch.len();
    let classes = localizer.class_count();
    let labels: Vec<&MultiHotLabel> = batch.iter().map(|b| &b.label).collect();
    if labels.iter().any(|l| l.class_count() != classes) {
        return Err(Error::ShapeMismatch("label length differs from classifier classes".into()));
    }
    let targets: Vec<f64> = labels.iter().flat_map(|l| l.as_targets()).collect();

    let lf = forward(localizer, g, x, train_localizer);
    let loc = bce_graph(g, lf.scores, &targets);
    let pairs = positive_pairs(batch);
    let maps = attention_graph(g, localizer, &lf, &pairs);
    let reg = regularization_graph(g, maps, classes, n);
    let up = g.upsample(maps, h, w);
    let mask = g.soft_threshold(up, hp.omega, hp.psi);
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let erased = g.erase(x, mask, &src);

    let af = forward(adversarial, g, erased, train_adversarial);
    let erased_classes: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mining_input = match hp.mining_score {
        MiningScore::Sigmoid => af.scores,
        MiningScore::Logit => af.logits,
    };
    let am = attention_mining_graph(g, mining_input, &erased_classes, classes, n);
    let erased_labels: Vec<&MultiHotLabel> = pairs.iter().map(|p| labels[p.0]).collect();
    let adv = adversarial_loss_graph(g, af.scores, &erased_labels, &erased_classes, hp.adversarial_target);
    Ok(ErasePass {
        localizer: lf,
        adversarial: af,
        loc,
        am,
        reg,
        adv,
        erased,
        pairs,
    })
}

/// Erased copies of every image for every positive class, built by the
/// current localizer. The output length is the total number of positive
/// label bits in the batch.
pub fn build_adversarial_batch<L: Classifier + ?Sized>(
    localizer: &L,
    batch: &[LabeledImage],
    hp: &HyperParams,
) -> Result<Vec<ErasedExample>> {
    check_omega(hp.omega)?;
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(batch)?);
    let (_, c, h, w) = g.value(x).dims4();
    let lf = forward(localizer, &mut g, x, false);
    let pairs = positive_pairs(batch);
    let maps = attention_graph(&mut g, localizer, &lf, &pairs);
    let up = g.upsample(maps, h, w);
    let mask = g.soft_threshold(up, hp.omega, hp.psi);
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let erased = g.erase(x, mask, &src);
    let values = g.value(erased);
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(m, &(n, class))| {
            let plane = values.index_axis0(m);
            ErasedExample {
                pixels: ndarray::Array3::from_shape_vec((c, h, w), plane.into_data())
                    .expect("erased plane shape"),
                erased_class: class,
                source_label: batch[n].label.clone(),
                source_id: batch[n].id.clone(),
            }
        })
        .collect())
}

/// Hooks invoked by [`train`].
pub enum TrainEvent<'a, L, A> {
    /// After every step, with the state that step produced.
    Step(&'a HistoryEntry, &'a TrainState<L, A>),
    /// Emitted every `checkpoint_every` steps and after the final step.
    Checkpoint(&'a TrainState<L, A>),
}

/// Fetch (and optionally augment) the images of one batch.
pub fn load_batch(
    dataset: &dyn Dataset,
    indices: &[usize],
    hp: &HyperParams,
    epoch: usize,
) -> Result<Vec<LabeledImage>> {
    indices
        .iter()
        .map(|&i| {
            let img = dataset.get(i)?;
            if !hp.augment {
                return Ok(img);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0xA5A5_5A5A_D00D_F00D);
            rng.set_stream((epoch * dataset.len() + i) as u64);
            augment_train(&img, hp.crop, &mut rng, hp.flip)
        })
        .collect()
}

/// Run `epochs * ceil(N / batch_size)` alternating steps over `dataset`.
pub fn train<L, A, F>(
    dataset: &dyn Dataset,
    hp: &HyperParams,
    localizer: L,
    adversarial: A,
    checkpoint_every: Option<usize>,
    mut on_event: F,
) -> Result<TrainState<L, A>>
where
    L: Classifier,
    A: Classifier,
    F: FnMut(TrainEvent<'_, L, A>) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut state = TrainState::new(localizer, adversarial, hp.clone())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(hp.batch_size) {
            let batch = load_batch(dataset, chunk, hp, epoch)?;
            let entry = *state.step_batch(&batch)?;
            on_event(TrainEvent::Step(&entry, &state))?;
            if checkpoint_every.is_some_and(|k| k > 0 && state.step % k == 0) {
                on_event(TrainEvent::Checkpoint(&state))?;
            }
        }
    }
    if checkpoint_every.is_none_or(|k| k == 0 || state.step % k != 0) {
        on_event(TrainEvent::Checkpoint(&state))?;
    }
    Ok(state)
}

/// Gradient of the localizer's total loss w.r.t. its parameters, without
/// updating anything. Mostly useful for checking the erase path.
pub fn localizer_gradient<L: Classifier + ?Sized, A: Classifier + ?Sized>(
    localizer: &L,
    adversarial: &A,
    batch: &[LabeledImage],
    hp: &HyperParams,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pass = erase_pass(&mut g, localizer, adversarial, batch, hp, true, false)?;
    let total = total_graph(&mut g, pass.loc, pass.am, pass.reg, hp.weights());
    let grads = g.backward(total);
    let out = pass
        .localizer
        .params
        .iter()
        .zip(localizer.params().iter())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
        .collect();
    Ok((g.value(total).item(), out))
}

/// Loss terms of one batch at the current parameters, without gradients.
pub fn evaluate_losses<L: Classifier + ?Sized, A: Classifier + ?Sized>(
    localizer: &L,
    adversarial: &A,
    batch: &[LabeledImage],
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pass = erase_pass(&mut g, localizer, adversarial, batch, hp, false, false)?;
    let total = total_graph(&mut g, pass.loc, pass.am, pass.reg, hp.weights());
    debug_assert_eq!(g.value(pass.erased).dims4().0, pass.pairs.len());
    Ok(pass.breakdown(&g, total))
}
