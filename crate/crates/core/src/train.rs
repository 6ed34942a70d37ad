//! Coarse/fine model pairs, the joint training loop and label-free inference.

use serde::{Deserialize, Serialize};

use crate::encode::{fine_input, BBox, BoxRaster, EncodingKind, GTransform, PredictionEncoding};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{Target, TaskLoss};
use crate::metrics::{dsc, MetricSummary};
use crate::nn::{BoundParams, Head, Model, ModelSpec};
use crate::optim::Sgd;
use crate::rng::{Rng, StreamKind};
use crate::schedule::{sample_mixed, SamplingMode, Strategy};
use crate::tasks::{BatchStream, Dataset};
use crate::tensor::Tensor;

/// Coarse model, fine model, and the transform that feeds one into the other.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseFinePair {
    pub coarse: Model,
    pub g: GTransform,
    pub fine: Model,
    pub encoding: PredictionEncoding,
}

/// The encoding a head's prediction naturally uses.
pub fn encoding_for(spec: &ModelSpec, raster: BoxRaster) -> Result<PredictionEncoding> {
    let kind = match spec.head {
        Head::Classes(classes) => EncodingKind::ClassVector { classes },
        Head::Box => EncodingKind::BoxSet {
            num_classes: 1,
            raster,
        },
        Head::Mask => EncodingKind::DenseMap { channels: 1 },
        Head::Dense(channels) => EncodingKind::DenseMap { channels },
    };
    PredictionEncoding::new(kind, spec.width, spec.height)
}

impl CoarseFinePair {
    /// Fresh pair. The coarse model, `g` and the fine model draw from separate
    /// init streams of `seed`, so the coarse weights do not depend on whether
    /// a fine stage exists.
    pub fn new(spec: &ModelSpec, encoding: PredictionEncoding, seed: u64) -> Result<Self> {
        let compatible = matches!(
            (spec.head, encoding.kind),
            (Head::Classes(a), EncodingKind::ClassVector { classes: b }) if a == b
        ) || matches!(
            (spec.head, encoding.kind),
            (Head::Box, EncodingKind::BoxSet { num_classes: 1, .. })
        ) || matches!(
            (spec.head, encoding.kind),
            (Head::Mask, EncodingKind::DenseMap { channels: 1 })
        ) || matches!(
            (spec.head, encoding.kind),
            (Head::Dense(a), EncodingKind::DenseMap { channels: b }) if a == b
        );
        if !compatible {
            return Err(invalid(format!(
                "encoding {:?} does not fit head {:?}",
                encoding.kind, spec.head
            )));
        }
        if (encoding.width, encoding.height) != (spec.width, spec.height) {
            return Err(invalid("encoding size differs from the model input size"));
        }
        let coarse = Model::init(spec, &mut Rng::for_kind(seed, StreamKind::Init, 0))?;
        let g = GTransform::new(
            encoding.raster_channels(),
            spec.in_channels,
            spec.height,
            spec.width,
            &mut Rng::for_kind(seed, StreamKind::Init, 1),
        )?;
        let fine = Model::init(
            &spec.with_in_channels(2 * spec.in_channels),
            &mut Rng::for_kind(seed, StreamKind::Init, 2),
        )?;
        Ok(Self {
            coarse,
            g,
            fine,
            encoding,
        })
    }

    pub fn head(&self) -> Head {
        self.coarse.spec().head
    }

    pub fn task_loss(&self) -> Result<TaskLoss> {
        match self.head() {
            Head::Box => Ok(TaskLoss::LogL1),
            Head::Classes(_) => Ok(TaskLoss::SoftmaxCe),
            Head::Mask => Ok(TaskLoss::PixelBce),
            Head::Dense(_) => Err(invalid("dense heads have no task loss")),
        }
    }

    /// Every parameter, named `coarse.*`, `g.*` and `fine.*`, in optimizer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, m) in [("coarse", &self.coarse), ("g", self.g.model()), ("fine", &self.fine)] {
            out.extend(m.params().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.coarse.params_mut();
        out.extend(self.g.model_mut().params_mut());
        out.extend(self.fine.params_mut());
        out
    }

    /// Overwrites every parameter; names and shapes must match exactly.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(invalid(format!(
                "expected {} tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(invalid(format!("tensor {n} {:?} does not match {en} {es:?}", t.shape())));
            }
        }
        for (p, (_, t)) in self.params_mut().into_iter().zip(named) {
            *p = t;
        }
        Ok(())
    }
}

/// Maps raw head outputs into the space ground truth lives in: boxes stay,
/// logits become probabilities, mask logits become per-pixel probabilities.
pub fn as_prediction(g: &mut Graph, head: Head, out: Var) -> Result<Var> {
    match head {
        Head::Box => Ok(out),
        Head::Classes(_) => {
            let ls = g.log_softmax(out)?;
            g.exp(ls)
        }
        Head::Mask | Head::Dense(_) => g.sigmoid(out),
    }
}

/// Ground truth in prediction space: boxes, one-hot rows or masks.
pub fn target_prediction(target: &Target, head: Head) -> Result<Tensor> {
    match (target, head) {
        (Target::Boxes(b), Head::Box) => Ok(b.clone()),
        (Target::Labels(l), Head::Classes(c)) => {
            let mut t = Tensor::zeros([l.len(), c]);
            for (i, &k) in l.iter().enumerate() {
                if k >= c {
                    return Err(invalid(format!("label {k} out of range for {c} classes")));
                }
                t.data_mut()[i * c + k] = 1.0;
            }
            Ok(t)
        }
        (Target::Masks(m), Head::Mask) => Ok(m.clone()),
        _ => Err(invalid(format!("target does not fit head {head:?}"))),
    }
}

/// Handles of the three loss nodes of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub coarse: Var,
    pub fine: Var,
}

/// Both stages scored against ground truth, summed with unit weights.
pub fn joint_loss(
    g: &mut Graph,
    coarse_out: Var,
    fine_out: Var,
    target: &Target,
    loss: TaskLoss,
) -> Result<JointLoss> {
    let coarse = loss.apply(g, coarse_out, target)?;
    let fine = loss.apply(g, fine_out, target)?;
    let total = g.add(coarse, fine)?;
    Ok(JointLoss {
        total,
        coarse,
        fine,
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub iter: usize,
    pub t: f64,
    /// Share of the batch fed the coarse prediction (0 or 1 at batch size 1).
    pub chose_coarse: f64,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub loss_total: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub sampling: SamplingMode,
    /// Crop the fine stage to the mask's 0.5 region plus this margin (mask heads).
    pub crop_margin: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            sampling: SamplingMode::Hard,
            crop_margin: None,
        }
    }
}

/// Anything that yields training batches.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<(Tensor, Target)>;
}

impl BatchSource for BatchStream<'_> {
    fn next_batch(&mut self) -> Result<(Tensor, Target)> {
        BatchStream::next_batch(self)
    }
}

/// Trains `pair` in place for `total_iters` iterations and returns one trace
/// row per iteration. A non-finite value anywhere aborts with
/// [`Error::Diverged`] naming the iteration.
pub fn train_run(
    pair: &mut CoarseFinePair,
    strategy: &Strategy,
    batches: &mut dyn BatchSource,
    sgd: &mut Sgd,
    total_iters: usize,
    rng: &mut Rng,
    opts: &TrainOptions,
) -> Result<Vec<StepTrace>> {
    let mut traces = Vec::with_capacity(total_iters);
    for iter in 0..total_iters {
        let (x, target) = batches.next_batch()?;
        let trace = train_step(pair, strategy, iter, &x, &target, sgd, rng, opts).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged {
                iter,
                cause: e.to_string(),
            },
            e => e,
        })?;
        traces.push(trace);
    }
    Ok(traces)
}

/// One forward/backward/update on a batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    pair: &mut CoarseFinePair,
    strategy: &Strategy,
    iter: usize,
    x: &Tensor,
    target: &Target,
    sgd: &mut Sgd,
    rng: &mut Rng,
    opts: &TrainOptions,
) -> Result<StepTrace> {
    let head = pair.head();
    let loss = pair.task_loss()?;
    let lr = sgd.lr();
    let mut g = Graph::new();
    let pc = pair.coarse.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out_c = pair.coarse.forward(&mut g, &pc, xv)?;
    let lc = loss.apply(&mut g, out_c, target)?;
    let t = strategy.t(iter);

    let mut bound = vec![pc];
    let (root, lf, chose) = if strategy.trains_fine() {
        let pred_c = as_prediction(&mut g, head, out_c)?;
        let ystar = g.constant(target_prediction(target, head)?);
        let (mixed, chose) = mix(&mut g, ystar, pred_c, t, opts.sampling, rng)?;
        let pg = pair.g.bind(&mut g, true);
        let raster = pair.encoding.rasterize(&mut g, mixed)?;
        let z = pair.g.apply(&mut g, &pg, raster)?;
        let u = fine_input(&mut g, xv, z)?;
        let pf = pair.fine.bind(&mut g, true);
        let lf = match opts.crop_margin {
            None => {
                let out_f = pair.fine.forward(&mut g, &pf, u)?;
                loss.apply(&mut g, out_f, target)?
            }
            Some(margin) => cropped_fine_loss(&mut g, pair, &pf, u, mixed, target, margin)?,
        };
        bound.push(pg);
        bound.push(pf);
        (g.add(lc, lf)?, Some(lf), chose)
    } else {
        (lc, None, 0.0)
    };
    g.backward(root)?;

    let mut grads: Vec<Tensor> = bound
        .iter()
        .flat_map(|b| b.vars().iter().map(|&v| g.grad_or_zeros(v)))
        .collect();
    if !strategy.trains_fine() {
        let rest = pair.g.model().params().into_iter().chain(pair.fine.params());
        grads.extend(rest.map(|(_, p)| Tensor::zeros(p.shape().to_vec())));
    }
    if let Some(bad) = grads.iter().position(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            op: "gradient",
            node: bad,
        });
    }
    sgd.step(&mut pair.params_mut(), &grads)?;

    let loss_coarse = g.value(lc).item()?;
    let loss_fine = match lf {
        Some(v) => g.value(v).item()?,
        None => 0.0,
    };
    Ok(StepTrace {
        iter,
        t,
        chose_coarse: chose,
        loss_coarse,
        loss_fine,
        loss_total: loss_coarse + loss_fine,
        lr,
    })
}

/// Forms the fine model's prediction input. Returns it with the share of
/// samples that were fed the coarse prediction.
fn mix(
    g: &mut Graph,
    ystar: Var,
    pred_c: Var,
    t: f64,
    mode: SamplingMode,
    rng: &mut Rng,
) -> Result<(Var, f64)> {
    let shape = g.shape(pred_c).to_vec();
    let n = shape[0];
    match mode {
        SamplingMode::Weighted => {
            let a = g.scale(pred_c, t)?;
            let b = g.scale(ystar, 1.0 - t)?;
            Ok((g.add(a, b)?, t))
        }
        SamplingMode::Hard => {
            let picks: Vec<bool> = (0..n).map(|_| sample_mixed(false, true, t, rng).0).collect();
            let k = picks.iter().filter(|&&p| p).count();
            let frac = k as f64 / n as f64;
            if k == 0 {
                return Ok((ystar, frac));
            }
            if k == n {
                return Ok((pred_c, frac));
            }
            let mut mshape = vec![1; shape.len()];
            mshape[0] = n;
            let m: Vec<f64> = picks.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
            let keep = g.constant(Tensor::new(mshape.clone(), m.iter().map(|v| 1.0 - v).collect())?);
            let m = g.constant(Tensor::new(mshape, m)?);
            let a = g.mul(m, pred_c)?;
            let b = g.mul(keep, ystar)?;
            Ok((g.add(a, b)?, frac))
        }
    }
}

/// Rows `r0..r1` and columns `c0..c1` of a crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

/// Bounding box of the pixels with value at least 0.5, grown by `margin`
/// and clipped to the image. `None` when no pixel qualifies.
pub fn crop_window(plane: &[f64], h: usize, w: usize, margin: usize) -> Option<CropWindow> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (p, &v) in plane.iter().enumerate().take(h * w) {
        if v >= 0.5 {
            let (r, c) = (p / w, p % w);
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    Some(CropWindow {
        r0: r0.saturating_sub(margin),
        r1: (r1 + margin).min(h),
        c0: c0.saturating_sub(margin),
        c1: (c1 + margin).min(w),
    })
}

fn full_window(h: usize, w: usize) -> CropWindow {
    CropWindow {
        r0: 0,
        r1: h,
        c0: 0,
        c1: w,
    }
}

fn crop_var(g: &mut Graph, v: Var, sample: usize, win: CropWindow) -> Result<Var> {
    let s = g.slice(v, 0, sample, sample + 1)?;
    let s = g.slice(s, 2, win.r0, win.r1)?;
    g.slice(s, 3, win.c0, win.c1)
}

/// Crops a `(c, h, w)` tensor.
fn crop_tensor(t: &Tensor, win: CropWindow) -> Result<Tensor> {
    let s = t.shape();
    let (c, w) = (s[0], s[2]);
    let mut out = Vec::with_capacity(c * (win.r1 - win.r0) * (win.c1 - win.c0));
    for ch in 0..c {
        for r in win.r0..win.r1 {
            let base = (ch * s[1] + r) * w;
            out.extend_from_slice(&t.data()[base + win.c0..base + win.c1]);
        }
    }
    Tensor::new([c, win.r1 - win.r0, win.c1 - win.c0], out)
}

/// Pastes a `(c, hh, ww)` crop into a zero `(c, h, w)` canvas.
fn uncrop(t: &Tensor, win: CropWindow, h: usize, w: usize) -> Tensor {
    let c = t.shape()[0];
    let cw = win.c1 - win.c0;
    let mut out = Tensor::zeros([c, h, w]);
    for ch in 0..c {
        for r in win.r0..win.r1 {
            let src = (ch * (win.r1 - win.r0) + r - win.r0) * cw;
            let dst = (ch * h + r) * w + win.c0;
            out.data_mut()[dst..dst + cw].copy_from_slice(&t.data()[src..src + cw]);
        }
    }
    out
}

fn cropped_fine_loss(
    g: &mut Graph,
    pair: &CoarseFinePair,
    pf: &BoundParams,
    u: Var,
    mixed: Var,
    target: &Target,
    margin: usize,
) -> Result<Var> {
    let Target::Masks(masks) = target else {
        return Err(invalid("cropping needs mask targets"));
    };
    let s = g.shape(u).to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    let mut total: Option<Var> = None;
    for i in 0..n {
        let plane = g.value(mixed).index_outer(i);
        let win = crop_window(plane.data(), h, w, margin).unwrap_or_else(|| full_window(h, w));
        let ui = crop_var(g, u, i, win)?;
        let out = pair.fine.forward(g, pf, ui)?;
        let ti = crop_tensor(&masks.index_outer(i), win)?;
        let ti = ti.reshape([1, ti.shape()[0], ti.shape()[1], ti.shape()[2]])?;
        let li = TaskLoss::PixelBce.apply(g, out, &Target::Masks(ti))?;
        total = Some(match total {
            None => li,
            Some(acc) => g.add(acc, li)?,
        });
    }
    let total = total.ok_or(Error::Empty("batch"))?;
    g.scale(total, 1.0 / n as f64)
}

/// Label-free inference options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub crop_margin: Option<usize>,
}

/// Predictions of both stages in prediction space.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub coarse: Tensor,
    pub fine: Tensor,
}

/// Coarse prediction for a batch `(n, c, h, w)`.
pub fn infer_coarse(pair: &CoarseFinePair, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let pc = pair.coarse.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = pair.coarse.forward(&mut g, &pc, xv)?;
    let pred = as_prediction(&mut g, pair.head(), out)?;
    Ok(g.value(pred).clone())
}

/// Fine prediction given an explicit prediction input (`(n, ...)`, prediction space).
pub fn infer_fine(
    pair: &CoarseFinePair,
    x: &Tensor,
    pred_in: &Tensor,
    opts: &InferOptions,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(pred_in.clone());
    let pg = pair.g.bind(&mut g, false);
    let raster = pair.encoding.rasterize(&mut g, pv)?;
    let z = pair.g.apply(&mut g, &pg, raster)?;
    let u = fine_input(&mut g, xv, z)?;
    let pf = pair.fine.bind(&mut g, false);
    match opts.crop_margin {
        None => {
            let out = pair.fine.forward(&mut g, &pf, u)?;
            let pred = as_prediction(&mut g, pair.head(), out)?;
            Ok(g.value(pred).clone())
        }
        Some(margin) => {
            let s = x.shape();
            let (n, h, w) = (s[0], s[2], s[3]);
            let mut planes = Vec::with_capacity(n);
            for i in 0..n {
                let win = crop_window(pred_in.index_outer(i).data(), h, w, margin)
                    .unwrap_or_else(|| full_window(h, w));
                let ui = crop_var(&mut g, u, i, win)?;
                let out = pair.fine.forward(&mut g, &pf, ui)?;
                let pred = as_prediction(&mut g, pair.head(), out)?;
                let p = g.value(pred).index_outer(0);
                planes.push(uncrop(&p, win, h, w));
            }
            Tensor::stack(&planes.iter().collect::<Vec<_>>())
        }
    }
}

/// Coarse then fine, with the fine stage always fed the coarse prediction.
/// Takes images only; nothing here can see labels.
pub fn infer(pair: &CoarseFinePair, x: &Tensor, opts: &InferOptions) -> Result<StageOutputs> {
    let coarse = infer_coarse(pair, x)?;
    let fine = infer_fine(pair, x, &coarse, opts)?;
    Ok(StageOutputs { coarse, fine })
}

/// Coarse and (for strategies with a fine stage) fine test metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub coarse: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fine: Option<MetricSummary>,
}

impl Evaluation {
    /// Fine metrics when present, else coarse.
    pub fn final_stage(&self) -> &MetricSummary {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

const EVAL_CHUNK: usize = 32;

/// Scores a trained pair on a test set. Images go through [`infer`]; labels
/// are read only when computing metrics.
pub fn evaluate(
    pair: &CoarseFinePair,
    strategy: &Strategy,
    test: &Dataset,
    opts: &InferOptions,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut coarse = Vec::with_capacity(test.len());
    let mut fine = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &test.samples[i].image).collect();
        let x = Tensor::stack(&images)?;
        if strategy.trains_fine() {
            let out = infer(pair, &x, opts)?;
            coarse.push(out.coarse);
            fine.push(out.fine);
        } else {
            coarse.push(infer_coarse(pair, &x)?);
        }
    }
    let coarse = summarize(pair.head(), &coarse, test)?;
    let fine = if strategy.trains_fine() {
        Some(summarize(pair.head(), &fine, test)?)
    } else {
        None
    };
    Ok(Evaluation { coarse, fine })
}

fn rows(chunks: &[Tensor]) -> Vec<Tensor> {
    chunks
        .iter()
        .flat_map(|c| (0..c.shape()[0]).map(move |i| c.index_outer(i)))
        .collect()
}

fn summarize(head: Head, chunks: &[Tensor], test: &Dataset) -> Result<MetricSummary> {
    let preds = rows(chunks);
    match head {
        Head::Box => {
            let boxes: Vec<BBox> = preds
                .iter()
                .map(|p| {
                    let d = p.data();
                    BBox::new(d[0], d[1], d[2], d[3])
                })
                .collect();
            MetricSummary::from_boxes(&boxes, &test.boxes())
        }
        Head::Classes(c) => {
            let data = preds.iter().flat_map(|p| p.data().to_vec()).collect();
            let probs = Tensor::new([preds.len(), c], data)?;
            MetricSummary::from_logits(&probs, &test.labels())
        }
        Head::Mask => MetricSummary::from_masks(&preds, &test.masks()),
        Head::Dense(_) => Err(invalid("dense heads have no metrics")),
    }
}

/// Successive masks of an iterative refinement, starting with the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub history: Vec<Tensor>,
    /// DSC between each refined mask and the one before it.
    pub agreement: Vec<f64>,
}

impl Refinement {
    pub fn final_mask(&self) -> &Tensor {
        self.history.last().expect("history holds at least the input")
    }

    /// Number of refinement stages run.
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }
}

/// Applies `stage` until two successive masks agree with DSC at least
/// `dsc_threshold`, or `max_iters` stages have run.
pub fn iterative_refine(
    init: Tensor,
    mut stage: impl FnMut(&Tensor) -> Result<Tensor>,
    max_iters: usize,
    dsc_threshold: f64,
) -> Result<Refinement> {
    if max_iters == 0 {
        return Err(invalid("max_iters must be at least 1"));
    }
    let mut history = vec![init];
    let mut agreement = Vec::new();
    for _ in 0..max_iters {
        let prev = history.last().expect("non-empty");
        let next = stage(prev)?;
        let d = dsc(prev, &next)?;
        history.push(next);
        agreement.push(d);
        if d >= dsc_threshold {
            break;
        }
    }
    Ok(Refinement { history, agreement })
}

/// Iterative fine-stage inference on one image `(c, h, w)`: the coarse mask
/// seeds the loop and every fine stage crops to the current mask.
pub fn iterative_infer(
    pair: &CoarseFinePair,
    x: &Tensor,
    max_iters: usize,
    dsc_threshold: f64,
    margin: usize,
) -> Result<Refinement> {
    if pair.head() != Head::Mask {
        return Err(invalid("iterative inference needs a mask head"));
    }
    let s = x.shape().to_vec();
    let xb = x.reshape([1, s[0], s[1], s[2]])?;
    let init = infer_coarse(pair, &xb)?.index_outer(0);
    let opts = InferOptions {
        crop_margin: Some(margin),
    };
    iterative_refine(
        init,
        |m| {
            let mb = m.reshape([1, 1, s[1], s[2]])?;
            Ok(infer_fine(pair, &xb, &mb, &opts)?.index_outer(0))
        },
        max_iters,
        dsc_threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::SgdConfig;
    use crate::schedule::Schedule;
    use crate::tasks::{Split, TaskConfig, TaskFamily};

    fn loc_pair(seed: u64) -> CoarseFinePair {
        let spec = ModelSpec::backbone(1, 16, 16, &[4, 4], Head::Box);
        let enc = encoding_for(&spec, BoxRaster::Soft { k: 1.0 }).unwrap();
        CoarseFinePair::new(&spec, enc, seed).unwrap()
    }

    fn loc_data() -> Dataset {
        let cfg = TaskConfig {
            height: 16,
            width: 16,
            n_train: 16,
            n_test: 8,
            ..TaskConfig::new(TaskFamily::Localization)
        };
        Dataset::generate(&cfg, 0, Split::Train).unwrap()
    }

    fn run(strategy: Strategy, iters: usize) -> Vec<StepTrace> {
        let data = loc_data();
        let mut pair = loc_pair(1);
        let mut stream = BatchStream::new(&data, 2, 1).unwrap();
        let mut sgd = Sgd::new(SgdConfig::default());
        let mut rng = Rng::for_kind(1, StreamKind::Sampling, 0);
        train_run(
            &mut pair,
            &strategy,
            &mut stream,
            &mut sgd,
            iters,
            &mut rng,
            &TrainOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn joint_loss_examples() {
        let mut g = Graph::new();
        let y = Tensor::new([1, 4], vec![0.3, 0.4, 0.5, 0.6]).unwrap();
        let target = Target::Boxes(y.clone());
        let c = g.constant(y.clone());
        let f = g.constant(y.clone());
        let l = joint_loss(&mut g, c, f, &target, TaskLoss::LogL1).unwrap();
        assert_eq!(g.value(l.total).item().unwrap(), 0.0);

        let e = std::f64::consts::E;
        let off = g.constant(Tensor::new([1, 4], vec![0.3 / e, 0.4, 0.5, 0.6]).unwrap());
        let l = joint_loss(&mut g, off, f, &target, TaskLoss::LogL1).unwrap();
        let v = |g: &Graph, x: Var| g.value(x).item().unwrap();
        assert!((v(&g, l.total) - 1.0).abs() < 1e-12);
        assert!((v(&g, l.coarse) - 1.0).abs() < 1e-12);
        assert_eq!(v(&g, l.fine), 0.0);

        let l = joint_loss(&mut g, c, off, &target, TaskLoss::LogL1).unwrap();
        assert_eq!(v(&g, l.total), v(&g, l.fine));
    }

    #[test]
    fn baseline_never_touches_fine() {
        let traces = run(Strategy::Baseline, 5);
        assert!(traces.iter().all(|t| t.loss_fine == 0.0 && t.chose_coarse == 0.0));
    }

    #[test]
    fn individual_never_feeds_coarse() {
        let traces = run(Strategy::Individual, 5);
        assert!(traces.iter().all(|t| t.chose_coarse == 0.0 && t.loss_fine > 0.0));
        for t in &traces {
            assert_eq!(t.loss_total, t.loss_coarse + t.loss_fine);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let s = Strategy::Progressive(Schedule::new(0.5, 0, 4, 6).unwrap());
        assert_eq!(run(s, 6), run(s, 6));
    }

    #[test]
    fn baseline_coarse_matches_individual_coarse_at_init() {
        assert_eq!(loc_pair(3).coarse, loc_pair(3).coarse);
        assert_ne!(loc_pair(3).coarse, loc_pair(4).coarse);
    }

    #[test]
    fn fine_loss_reaches_coarse_params_when_coarse_fed() {
        let pair = loc_pair(2);
        let data = loc_data();
        let (x, target) = data.batch(&[0, 1]).unwrap();
        let mut g = Graph::new();
        let pc = pair.coarse.bind(&mut g, true);
        let xv = g.constant(x);
        let out_c = pair.coarse.forward(&mut g, &pc, xv).unwrap();
        let pg = pair.g.bind(&mut g, false);
        let raster = pair.encoding.rasterize(&mut g, out_c).unwrap();
        let z = pair.g.apply(&mut g, &pg, raster).unwrap();
        let u = fine_input(&mut g, xv, z).unwrap();
        let pf = pair.fine.bind(&mut g, false);
        let out_f = pair.fine.forward(&mut g, &pf, u).unwrap();
        let lf = TaskLoss::LogL1.apply(&mut g, out_f, &target).unwrap();
        g.backward(lf).unwrap();
        let nonzero = pc
            .vars()
            .iter()
            .any(|&v| g.grad_or_zeros(v).data().iter().any(|&d| d != 0.0));
        assert!(nonzero);
    }

    #[test]
    fn crop_windows() {
        let mut plane = vec![0.0; 36];
        assert_eq!(crop_window(&plane, 6, 6, 1), None);
        plane[2 * 6 + 3] = 0.7;
        assert_eq!(
            crop_window(&plane, 6, 6, 1),
            Some(CropWindow {
                r0: 1,
                r1: 4,
                c0: 2,
                c1: 5
            })
        );
        let t = Tensor::from_fn([1, 6, 6], |i| i as f64);
        let win = crop_window(&plane, 6, 6, 1).unwrap();
        let c = crop_tensor(&t, win).unwrap();
        assert_eq!(c.shape(), &[1, 3, 3]);
        assert_eq!(c.data()[0], 8.0);
        let back = uncrop(&c, win, 6, 6);
        assert_eq!(back.data()[8], 8.0);
        assert_eq!(back.data()[0], 0.0);
    }

    #[test]
    fn refine_fixed_point_and_cap() {
        let m = Tensor::from_fn([1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let r = iterative_refine(m.clone(), |x| Ok(x.clone()), 5, 0.99).unwrap();
        assert_eq!(r.iterations(), 1);
        assert_eq!(r.agreement, vec![1.0]);
        let r = iterative_refine(m, |x| Ok(x.clone()), 4, 2.0).unwrap();
        assert_eq!(r.iterations(), 4);
        assert!(iterative_refine(Tensor::zeros([1, 2, 2]), |x| Ok(x.clone()), 0, 0.5).is_err());
    }
}
