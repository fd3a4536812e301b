//! Training: the two cross-entropy losses, the optimizer, level-by-level
//! sample runs with teacher-forced or predicted zooming, the epoch loop,
//! evaluation with predicted zooming, and CNN patch pretraining.
//!
//! Each sample builds its own tape: bind parameters, grow the graph level
//! by level, score each new frontier, classify the finished graph, then
//! backpropagate the combined loss and harvest gradients into the bundle.

use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::LoadedSample;
use crate::error::{Error, Result};
use crate::graph::{node_feature, ZoomDecision, ZoomGraph};
use crate::image::Image;
use crate::labels::{zoom_label, Mask};
use crate::metrics::{roc_auc, zoom_pr};
use crate::models::{
    bind_cnn, cnn_embed_node, graph_forward, node_zoom_forward_cached, BoundBundle, CnnConfig,
    CnnParams, ModelBundle,
};
use crate::synthdata::PatchSet;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Batch graph loss: mean cross-entropy between malignancy scores and
/// image labels. `scores` holds probability-of-positive entries.
pub fn loss_graph(tape: &mut Tape, scores: TensorId, ys: &[f64]) -> Result<TensorId> {
    tape.binary_cross_entropy(scores, ys)
}

/// Node zoom loss: mean cross-entropy between zoom probabilities and zoom
/// labels; the mean realizes the per-node-count normalization.
pub fn loss_node(tape: &mut Tape, zoom_probs: TensorId, z: &[f64]) -> Result<TensorId> {
    tape.binary_cross_entropy(zoom_probs, z)
}

/// First-moment/second-moment adaptive optimizer with plain SGD fallback.
/// State vectors follow the canonical parameter order of the bundle they
/// were sized for.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, param_sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_bundle(kind: OptimizerKind, lr: f64, bundle: &ModelBundle) -> Self {
        let sizes: Vec<usize> = bundle
            .named_params()
            .iter()
            .map(|(_, t)| t.numel())
            .collect();
        Optimizer::new(kind, lr, &sizes)
    }

    /// Applies one update from the accumulated gradients. `params` must be
    /// in the order this optimizer was sized for.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer sized for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let g: Vec<f64> = tensor
                .grad()
                .ok_or_else(|| Error::Usage(format!("parameter {name} has no gradient buffer")))?
                .to_vec();
            if g.len() != self.m[i].len() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    lhs: vec![self.m[i].len()],
                    rhs: vec![g.len()],
                });
            }
            let data = tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, gi) in data.iter_mut().zip(&g) {
                        *p -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..g.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        data[j] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// How expansion decisions are made while growing a sample's graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZoomPolicy {
    /// Expand the nodes whose ground-truth zoom label is 1.
    Teacher,
    /// Expand the nodes whose predicted zoom probability wins the argmax.
    Predicted,
}

/// One scored frontier node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoomRecord {
    pub level: usize,
    pub node_id: usize,
    pub prob_zoom: f64,
    /// Argmax of the probability pair.
    pub predicted: u8,
    /// Ground-truth zoom label from the mask.
    pub label: u8,
}

/// Everything observable about one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleRun {
    pub policy: ZoomPolicy,
    pub score: f64,
    pub loss_graph: f64,
    pub loss_node: f64,
    pub total: f64,
    pub node_count: usize,
    pub records: Vec<ZoomRecord>,
    pub graph: ZoomGraph,
}

/// Tape handles of the per-sample losses, for callers that backpropagate.
#[derive(Debug, Clone, Copy)]
pub struct SampleTensors {
    pub l_graph: TensorId,
    pub l_node: TensorId,
    pub total: TensorId,
}

/// Grows the zoom graph for one image under `policy`, scoring every new
/// frontier, then classifies the finished graph. The combined loss
/// `l_graph + lambda * l_node` is left on the tape.
pub fn run_sample(
    tape: &mut Tape,
    bound: &BoundBundle,
    cfg: &RunConfig,
    image: &Image,
    mask: &Mask,
    y: u8,
    policy: ZoomPolicy,
) -> Result<(SampleRun, SampleTensors)> {
    let mut g = ZoomGraph::init(image);
    let d = cfg.d;
    let root_feat = node_feature(image, g.node(0)?.region, d)?;
    let root_x = tape.constant(vec![1, d, d], root_feat)?;
    let mut embeddings = vec![cnn_embed_node(tape, &bound.cnn_node, root_x)?];

    // The root always zooms; its probability is 1 by definition.
    let mut pending = vec![ZoomDecision {
        node_id: 0,
        zoom: true,
        prob: 1.0,
    }];
    let mut records: Vec<ZoomRecord> = Vec::new();
    let mut prob_cols: Vec<TensorId> = Vec::new();
    let mut zoom_targets: Vec<f64> = Vec::new();

    while g.current_level() < cfg.r {
        let new_ids = g.expand(&pending, cfg.s, cfg.node_cap, cfg.r)?;
        for &id in &new_ids {
            let feat = node_feature(image, g.node(id)?.region, d)?;
            let x = tape.constant(vec![1, d, d], feat)?;
            embeddings.push(cnn_embed_node(tape, &bound.cnn_node, x)?);
        }
        debug_assert_eq!(embeddings.len(), g.len());
        if new_ids.is_empty() {
            pending = Vec::new();
            continue;
        }

        let (ids, p) = node_zoom_forward_cached(tape, bound, &g, &embeddings)?;
        debug_assert_eq!(ids, new_ids);
        let zoom_col = tape.constant(vec![2, 1], vec![0.0, 1.0])?;
        let pz = tape.matmul(p, zoom_col)?;
        prob_cols.push(pz);

        let level = g.current_level();
        let pdata = tape.data(p).to_vec();
        pending = ids
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let label = zoom_label(mask, g.node(id)?.region)?;
                zoom_targets.push(label as f64);
                let prob = pdata[k * 2 + 1];
                let predicted = u8::from(prob > pdata[k * 2]);
                records.push(ZoomRecord {
                    level,
                    node_id: id,
                    prob_zoom: prob,
                    predicted,
                    label,
                });
                let zoom = match policy {
                    ZoomPolicy::Teacher => label == 1,
                    ZoomPolicy::Predicted => predicted == 1,
                };
                Ok(ZoomDecision {
                    node_id: id,
                    zoom,
                    prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
    }

    let feats = g.materialize_features(image, d)?;
    let x_all = tape.leaf(&feats);
    let yhat = graph_forward(tape, bound, &g, x_all, cfg.r)?;
    let score_col = tape.constant(vec![2, 1], vec![0.0, 1.0])?;
    let score_t = tape.matmul(yhat, score_col)?;
    let l_graph = loss_graph(tape, score_t, &[y as f64])?;

    let l_node = if prob_cols.is_empty() {
        tape.scalar(0.0)
    } else {
        let all = tape.concat_rows(&prob_cols)?;
        loss_node(tape, all, &zoom_targets)?
    };
    let l_node_weighted = tape.scalar_mul(l_node, cfg.lambda);
    let total = tape.add(l_graph, l_node_weighted)?;

    let run = SampleRun {
        policy,
        score: tape.data(score_t)[0],
        loss_graph: tape.data(l_graph)[0],
        loss_node: tape.data(l_node)[0],
        total: tape.data(total)[0],
        node_count: g.len(),
        records,
        graph: g,
    };
    Ok((
        run,
        SampleTensors {
            l_graph,
            l_node,
            total,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss_graph: f64,
    pub loss_node: f64,
    pub total: f64,
    pub train_auc: f64,
}

/// One teacher-forced forward/backward on a private tape; the gradients
/// come back as vectors aligned with the bundle's canonical parameter
/// order so callers can reduce batches in a fixed order.
pub fn run_sample_grads(
    bundle: &ModelBundle,
    cfg: &RunConfig,
    sample: &LoadedSample,
) -> Result<(SampleRun, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = bundle.bind(&mut tape);
    let (run, tensors) = run_sample(
        &mut tape,
        &bound,
        cfg,
        &sample.image,
        &sample.mask,
        sample.y,
        ZoomPolicy::Teacher,
    )?;
    debug_assert_eq!(run.policy, ZoomPolicy::Teacher);
    tape.backward(tensors.total)?;
    let grads = bound
        .named_ids()
        .into_iter()
        .map(|(_, id)| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();
    Ok((run, grads))
}

/// One pass over the training split: teacher-forced graphs, batched
/// gradient averaging, one optimizer step per batch. Samples within a
/// batch run in parallel on independent tapes; gradients are reduced in
/// sample order, so results are identical at any thread count. The
/// reported AUC ranks the teacher-forced scores gathered during the pass.
pub fn train_epoch(
    bundle: &mut ModelBundle,
    opt: &mut Optimizer,
    samples: &[LoadedSample],
    cfg: &RunConfig,
    rng: &mut ChaCha20Rng,
) -> Result<EpochStats> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot train on an empty sample set".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);

    let mut sum_graph = 0.0;
    let mut sum_node = 0.0;
    let mut sum_total = 0.0;
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());

    for chunk in order.chunks(cfg.batch_size) {
        bundle.zero_grads();
        let scale = 1.0 / chunk.len() as f64;
        let results: Result<Vec<(SampleRun, Vec<Vec<f64>>)>> = chunk
            .par_iter()
            .map(|&i| run_sample_grads(bundle, cfg, &samples[i]))
            .collect();
        let mut params = bundle.named_params_mut();
        for (k, (run, grads)) in results?.into_iter().enumerate() {
            for ((_, tensor), g) in params.iter_mut().zip(&grads) {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                tensor.accumulate_grad(&scaled)?;
            }
            sum_graph += run.loss_graph;
            sum_node += run.loss_node;
            sum_total += run.total;
            scores.push(run.score);
            labels.push(samples[chunk[k]].y);
        }
        opt.step(&mut params)?;
    }

    let n = samples.len() as f64;
    let train_auc = roc_auc(&scores, &labels).unwrap_or(f64::NAN);
    Ok(EpochStats {
        loss_graph: sum_graph / n,
        loss_node: sum_node / n,
        total: sum_total / n,
        train_auc,
    })
}

/// Evaluation metrics over one split, built with predicted zooming.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub auc: f64,
    pub zoom_precision_deepest: f64,
    pub zoom_recall_deepest: f64,
    pub zoom_precision_all: f64,
    pub zoom_recall_all: f64,
    pub mean_node_count: f64,
    pub mean_loss_graph: f64,
    pub mean_loss_node: f64,
    /// Per sample: id, malignancy score, label, node count.
    pub per_sample: Vec<(String, f64, u8, usize)>,
}

impl EvalReport {
    /// Line-delimited key=value rendering, fixed order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples={}\n", self.samples));
        out.push_str(&format!("auc={}\n", self.auc));
        out.push_str(&format!(
            "zoom_precision_deepest={}\n",
            self.zoom_precision_deepest
        ));
        out.push_str(&format!(
            "zoom_recall_deepest={}\n",
            self.zoom_recall_deepest
        ));
        out.push_str(&format!("zoom_precision_all={}\n", self.zoom_precision_all));
        out.push_str(&format!("zoom_recall_all={}\n", self.zoom_recall_all));
        out.push_str(&format!("mean_node_count={}\n", self.mean_node_count));
        out.push_str(&format!("mean_loss_graph={}\n", self.mean_loss_graph));
        out.push_str(&format!("mean_loss_node={}\n", self.mean_loss_node));
        for (id, score, y, nodes) in &self.per_sample {
            out.push_str(&format!("score.{id}={score}\n"));
            out.push_str(&format!("label.{id}={y}\n"));
            out.push_str(&format!("nodes.{id}={nodes}\n"));
        }
        out
    }
}

/// Runs every sample with predicted zooming and aggregates metrics: AUC of
/// the malignancy scores, zoom precision/recall at each sample's deepest
/// scored level and over all scored levels, and mean graph size.
pub fn evaluate(
    bundle: &ModelBundle,
    samples: &[LoadedSample],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty sample set".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut deep_pred = Vec::new();
    let mut deep_label = Vec::new();
    let mut all_pred = Vec::new();
    let mut all_label = Vec::new();
    let mut node_total = 0usize;
    let mut sum_graph = 0.0;
    let mut sum_node = 0.0;

    let runs: Result<Vec<SampleRun>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let (run, _) = run_sample(
                &mut tape,
                &bound,
                cfg,
                &s.image,
                &s.mask,
                s.y,
                ZoomPolicy::Predicted,
            )?;
            debug_assert_eq!(run.policy, ZoomPolicy::Predicted);
            Ok(run)
        })
        .collect();
    for (s, run) in samples.iter().zip(runs?) {
        scores.push(run.score);
        labels.push(s.y);
        node_total += run.node_count;
        sum_graph += run.loss_graph;
        sum_node += run.loss_node;
        per_sample.push((s.id.clone(), run.score, s.y, run.node_count));
        if let Some(deepest) = run.records.iter().map(|r| r.level).max() {
            for r in &run.records {
                all_pred.push(r.predicted);
                all_label.push(r.label);
                if r.level == deepest {
                    deep_pred.push(r.predicted);
                    deep_label.push(r.label);
                }
            }
        }
    }

    let auc = roc_auc(&scores, &labels).unwrap_or(f64::NAN);
    let (zoom_precision_deepest, zoom_recall_deepest) = zoom_pr(&deep_pred, &deep_label)?;
    let (zoom_precision_all, zoom_recall_all) = zoom_pr(&all_pred, &all_label)?;
    let n = samples.len() as f64;
    Ok(EvalReport {
        samples: samples.len(),
        auc,
        zoom_precision_deepest,
        zoom_recall_deepest,
        zoom_precision_all,
        zoom_recall_all,
        mean_node_count: node_total as f64 / n,
        mean_loss_graph: sum_graph / n,
        mean_loss_node: sum_node / n,
        per_sample,
    })
}

/// Result of patch pretraining: the CNN to seed the two model CNNs with,
/// the throwaway classification head, and the held-out accuracy.
#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub cnn: CnnParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub holdout_accuracy: f64,
}

fn patch_forward(
    tape: &mut Tape,
    cnn: &crate::models::BoundCnn,
    head_w: TensorId,
    head_b: TensorId,
    patch: &[f64],
    d: usize,
) -> Result<TensorId> {
    let x = tape.constant(vec![1, d, d], patch.to_vec())?;
    let h = cnn_embed_node(tape, cnn, x)?;
    let logits = tape.matmul(h, head_w)?;
    let logits = tape.add_row_bias(logits, head_b)?;
    let p = tape.softmax_rows(logits)?;
    let col = tape.constant(vec![2, 1], vec![0.0, 1.0])?;
    tape.matmul(p, col)
}

/// Trains a CNN on lesion-presence patch labels with a throwaway 2-way
/// head. The last fifth of the patches is held out for the reported
/// accuracy. Zero epochs returns the initialization untouched.
pub fn pretrain_patch_cnn(
    cfg: &RunConfig,
    patches: &PatchSet,
    rng: &mut ChaCha20Rng,
) -> Result<PretrainResult> {
    if patches.is_empty() {
        return Err(Error::Usage("cannot pretrain on an empty patch set".into()));
    }
    if patches.d != cfg.d {
        return Err(Error::Config(format!(
            "patches are {}x{} but the model expects {}x{}",
            patches.d, patches.d, cfg.d, cfg.d
        )));
    }
    let d = cfg.d;
    let mut cnn = CnnParams::init(CnnConfig::desk_default(d, cfg.hdim), rng)?;
    let hb = 1.0 / (cfg.hdim as f64).sqrt();
    let mut head_w = Tensor::uniform(vec![cfg.hdim, 2], hb, rng);
    let mut head_b = Tensor::uniform(vec![2], hb, rng);

    let n = patches.len();
    let holdout_n = if n >= 5 { n / 5 } else { usize::from(n >= 2) };
    let train_n = n - holdout_n;

    let sizes: Vec<usize> = {
        let mut named = Vec::new();
        cnn.collect("patch_cnn", &mut named);
        let mut sizes: Vec<usize> = named.iter().map(|(_, t)| t.numel()).collect();
        sizes.push(head_w.numel());
        sizes.push(head_b.numel());
        sizes
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &sizes);

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            {
                let mut named = Vec::new();
                cnn.collect_mut("patch_cnn", &mut named);
                for (_, t) in &mut named {
                    t.zero_grad();
                }
                head_w.zero_grad();
                head_b.zero_grad();
            }
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let mut tape = Tape::new();
                let bound = bind_cnn(&mut tape, &cnn);
                let w_id = tape.leaf(&head_w);
                let b_id = tape.leaf(&head_b);
                let p = patch_forward(&mut tape, &bound, w_id, b_id, patches.patch(i), d)?;
                let loss = tape.binary_cross_entropy(p, &[patches.labels[i] as f64])?;
                tape.backward(loss)?;
                // Harvest in the same order the optimizer was sized for.
                let mut named = Vec::new();
                cnn.collect_mut("patch_cnn", &mut named);
                let mut ids = Vec::new();
                for (j, (&k, &bb)) in bound.kernels.iter().zip(&bound.biases).enumerate() {
                    let _ = j;
                    ids.push(k);
                    ids.push(bb);
                }
                ids.push(bound.dense_w);
                ids.push(bound.dense_b);
                ids.push(w_id);
                ids.push(b_id);
                let mut tensors: Vec<&mut Tensor> = named.into_iter().map(|(_, t)| t).collect();
                tensors.push(&mut head_w);
                tensors.push(&mut head_b);
                for (id, t) in ids.into_iter().zip(tensors) {
                    if let Some(g) = tape.grad(id) {
                        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                        t.accumulate_grad(&scaled)?;
                    }
                }
            }
            let mut named = Vec::new();
            cnn.collect_mut("patch_cnn", &mut named);
            named.push(("patch_head.weight".into(), &mut head_w));
            named.push(("patch_head.bias".into(), &mut head_b));
            opt.step(&mut named)?;
        }
    }

    // Held-out accuracy with the final weights (training set if nothing
    // was held out).
    let eval_range = if holdout_n > 0 { train_n..n } else { 0..n };
    let mut correct = 0usize;
    let total = eval_range.len();
    for i in eval_range {
        let mut tape = Tape::new();
        let bound = bind_cnn(&mut tape, &cnn);
        let w_id = tape.leaf(&head_w);
        let b_id = tape.leaf(&head_b);
        let p = patch_forward(&mut tape, &bound, w_id, b_id, patches.patch(i), d)?;
        let predicted = u8::from(tape.data(p)[0] > 0.5);
        if predicted == patches.labels[i] {
            correct += 1;
        }
    }
    Ok(PretrainResult {
        cnn,
        head_w,
        head_b,
        holdout_accuracy: correct as f64 / total as f64,
    })
}

/// Copies pretrained CNN weights into both CNN paths of a bundle.
pub fn seed_bundle_cnns(bundle: &mut ModelBundle, cnn: &CnnParams) -> Result<()> {
    if bundle.cnn_node.cfg != cnn.cfg {
        return Err(Error::Config(format!(
            "pretrained CNN config {:?} does not match the model's {:?}",
            cnn.cfg, bundle.cnn_node.cfg
        )));
    }
    bundle.cnn_node = cnn.clone();
    bundle.cnn_graph = cnn.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::seeding::{derived_rng, STREAM_TRAIN};
    use crate::synthdata::gen_sample;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            r: 2,
            d: 8,
            s: 2,
            hdim: 8,
            lr: 1e-3,
            lambda: 1.0,
            epochs: 1,
            batch_size: 2,
            seed: 11,
            node_cap: 64,
            optimizer: OptimizerKind::Adam,
            split: 0.8,
        }
    }

    fn tiny_data() -> DataConfig {
        DataConfig {
            image_size: 64,
            samples: 6,
            malignant_fraction: 0.5,
            benign_fraction: 0.5,
            texture_cells: 4,
            seed: 5,
            dir: "data".to_string(),
        }
    }

    fn tiny_samples() -> Vec<LoadedSample> {
        let data = tiny_data();
        (0..data.samples)
            .map(|i| {
                let (image, mask, y) = gen_sample(&data, i).unwrap();
                LoadedSample {
                    id: format!("{i:04}"),
                    image,
                    mask,
                    y,
                }
            })
            .collect()
    }

    #[test]
    fn graph_loss_matches_hand_values() {
        let mut tape = Tape::new();
        let half = tape.constant(vec![1, 1], vec![0.5]).unwrap();
        let l = loss_graph(&mut tape, half, &[1.0]).unwrap();
        assert!((tape.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // Symmetric confidence gives identical loss for either class.
        let p9 = tape.constant(vec![1, 1], vec![0.9]).unwrap();
        let p1 = tape.constant(vec![1, 1], vec![0.1]).unwrap();
        let l1 = loss_graph(&mut tape, p9, &[1.0]).unwrap();
        let l0 = loss_graph(&mut tape, p1, &[0.0]).unwrap();
        assert!((tape.data(l1)[0] - tape.data(l0)[0]).abs() < 1e-15);

        // Confident correct predictions cost nearly nothing.
        let sure = tape.constant(vec![1, 1], vec![1.0 - 1e-9]).unwrap();
        let ls = loss_graph(&mut tape, sure, &[1.0]).unwrap();
        assert!(tape.data(ls)[0] < 1e-6);
    }

    #[test]
    fn node_loss_normalizes_by_node_count() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![3, 1], vec![0.8, 0.3, 0.6]).unwrap();
        let l = loss_node(&mut tape, p, &[1.0, 0.0, 1.0]).unwrap();
        let doubled = tape
            .constant(vec![6, 1], vec![0.8, 0.3, 0.6, 0.8, 0.3, 0.6])
            .unwrap();
        let l2 = loss_node(&mut tape, doubled, &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((tape.data(l)[0] - tape.data(l2)[0]).abs() < 1e-15);

        let single = tape.constant(vec![1, 1], vec![0.5]).unwrap();
        let ls = loss_node(&mut tape, single, &[1.0]).unwrap();
        assert!((tape.data(ls)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sgd_and_adam_steps_match_closed_forms() {
        let mut t = Tensor::new(vec![2], vec![1.0, -2.0], true).unwrap();
        t.accumulate_grad(&[0.5, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &[2]);
        let mut params = vec![("p".to_string(), &mut t)];
        opt.step(&mut params).unwrap();
        assert_eq!(t.data(), &[1.0 - 0.05, -2.0 + 0.1]);

        // First Adam step: update = lr * g / (|g| + eps) elementwise.
        let mut t = Tensor::new(vec![2], vec![1.0, -2.0], true).unwrap();
        t.accumulate_grad(&[0.5, -1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &[2]);
        let mut params = vec![("p".to_string(), &mut t)];
        opt.step(&mut params).unwrap();
        for (p0, (g, p)) in [1.0, -2.0]
            .iter()
            .zip([(0.5, t.data()[0]), (-1.0, t.data()[1])])
        {
            let expect = p0 - 0.1 * g / (f64::abs(g) + ADAM_EPS);
            assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
        }
    }

    #[test]
    fn teacher_forcing_expands_exactly_the_labeled_nodes() {
        let cfg = RunConfig { r: 3, ..tiny_cfg() };
        let samples = tiny_samples();
        let malignant = samples.iter().find(|s| s.y == 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let (run, _) = run_sample(
            &mut tape,
            &bound,
            &cfg,
            &malignant.image,
            &malignant.mask,
            malignant.y,
            ZoomPolicy::Teacher,
        )
        .unwrap();
        // Expanded nodes (those with children) are exactly the scored nodes
        // with label 1 below the final level, plus the root.
        let mut expanded: Vec<usize> = (0..run.graph.len())
            .filter(|&id| {
                (0..run.graph.len()).any(|c| run.graph.node(c).unwrap().parent_id == Some(id))
            })
            .collect();
        expanded.sort_unstable();
        let mut labeled: Vec<usize> = run
            .records
            .iter()
            .filter(|r| r.level < cfg.r && r.label == 1)
            .map(|r| r.node_id)
            .collect();
        labeled.push(0);
        labeled.sort_unstable();
        assert_eq!(expanded, labeled);
        // Every record level lies in 2..=R.
        assert!(run.records.iter().all(|r| r.level >= 2 && r.level <= cfg.r));
        assert!(run.records.iter().any(|r| r.label == 1));
    }

    #[test]
    fn benign_sample_reaches_final_level_with_flat_graph() {
        let cfg = RunConfig { r: 3, ..tiny_cfg() };
        let samples = tiny_samples();
        let benign = samples.iter().find(|s| s.y == 0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let (run, _) = run_sample(
            &mut tape,
            &bound,
            &cfg,
            &benign.image,
            &benign.mask,
            benign.y,
            ZoomPolicy::Teacher,
        )
        .unwrap();
        // Root + s*s children, nothing labeled for deeper zooming.
        assert_eq!(run.node_count, 1 + cfg.s * cfg.s);
        assert_eq!(run.graph.current_level(), cfg.r);
        assert!(run.records.iter().all(|r| r.label == 0));
        assert!(run.loss_node > 0.0);
        assert!(run.total >= run.loss_graph);
    }

    #[test]
    fn extracted_gradients_match_direct_harvest() {
        let cfg = tiny_cfg();
        let samples = tiny_samples();
        let s = &samples[1];
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();

        let (_, grads) = run_sample_grads(&bundle, &cfg, s).unwrap();

        let mut direct = bundle.clone();
        direct.zero_grads();
        let mut tape = Tape::new();
        let bound = direct.bind(&mut tape);
        let (_, tensors) = run_sample(
            &mut tape,
            &bound,
            &cfg,
            &s.image,
            &s.mask,
            s.y,
            ZoomPolicy::Teacher,
        )
        .unwrap();
        tape.backward(tensors.total).unwrap();
        direct.harvest_grads(&tape, &bound, 1.0).unwrap();

        let named = direct.named_params();
        assert_eq!(grads.len(), named.len());
        for ((name, t), g) in named.iter().zip(&grads) {
            assert_eq!(t.grad().unwrap(), g.as_slice(), "misaligned at {name}");
        }
        assert!(grads.iter().any(|g| g.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn lambda_zero_reproduces_graph_only_gradients() {
        let cfg = tiny_cfg();
        let samples = tiny_samples();
        let s = &samples[0];
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();

        let grads = |lambda: f64, graph_only: bool| -> Vec<Vec<f64>> {
            let mut b = bundle.clone();
            let cfg = RunConfig {
                lambda,
                ..cfg.clone()
            };
            let mut tape = Tape::new();
            let bound = b.bind(&mut tape);
            let (_, tensors) = run_sample(
                &mut tape,
                &bound,
                &cfg,
                &s.image,
                &s.mask,
                s.y,
                ZoomPolicy::Teacher,
            )
            .unwrap();
            let target = if graph_only {
                tensors.l_graph
            } else {
                tensors.total
            };
            tape.backward(target).unwrap();
            b.harvest_grads(&tape, &bound, 1.0).unwrap();
            b.named_params()
                .iter()
                .map(|(_, t)| t.grad().unwrap().to_vec())
                .collect()
        };
        assert_eq!(grads(0.0, false), grads(0.0, true));
    }

    #[test]
    fn single_sgd_step_descends_on_one_sample() {
        let cfg = RunConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1e-4,
            ..tiny_cfg()
        };
        let samples = tiny_samples();
        let s = &samples[0];
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
        let mut opt = Optimizer::for_bundle(cfg.optimizer, cfg.lr, &bundle);

        let loss_of = |b: &ModelBundle| -> f64 {
            let mut tape = Tape::new();
            let bound = b.bind(&mut tape);
            let (run, _) = run_sample(
                &mut tape,
                &bound,
                &cfg,
                &s.image,
                &s.mask,
                s.y,
                ZoomPolicy::Teacher,
            )
            .unwrap();
            run.total
        };
        let before = loss_of(&bundle);
        bundle.zero_grads();
        {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let (_, tensors) = run_sample(
                &mut tape,
                &bound,
                &cfg,
                &s.image,
                &s.mask,
                s.y,
                ZoomPolicy::Teacher,
            )
            .unwrap();
            tape.backward(tensors.total).unwrap();
            bundle.harvest_grads(&tape, &bound, 1.0).unwrap();
        }
        let mut params = bundle.named_params_mut();
        opt.step(&mut params).unwrap();
        let after = loss_of(&bundle);
        assert!(
            after <= before + 1e-9,
            "loss rose from {before} to {after} after one small step"
        );
        assert!(before.is_finite() && after.is_finite());
        assert!(before >= 0.0 && after >= 0.0);
    }

    #[test]
    fn epochs_are_deterministic_given_seed() {
        let cfg = tiny_cfg();
        let samples = tiny_samples();
        let run = || -> (EpochStats, Vec<f64>) {
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            let mut bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
            let mut opt = Optimizer::for_bundle(cfg.optimizer, cfg.lr, &bundle);
            let mut erng = derived_rng(cfg.seed, STREAM_TRAIN, 0);
            let stats = train_epoch(&mut bundle, &mut opt, &samples, &cfg, &mut erng).unwrap();
            let flat: Vec<f64> = bundle
                .named_params()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect();
            (stats, flat)
        };
        let (s1, p1) = run();
        let (s2, p2) = run();
        assert_eq!(s1, s2);
        assert_eq!(p1, p2);
        assert!(s1.total.is_finite() && s1.total >= 0.0);
    }

    #[test]
    fn evaluation_uses_predicted_zooms_and_respects_the_cap() {
        let cfg = RunConfig {
            r: 3,
            node_cap: 12,
            ..tiny_cfg()
        };
        let samples = tiny_samples();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
        let report = evaluate(&bundle, &samples, &cfg).unwrap();
        assert_eq!(report.samples, samples.len());
        assert!(report.mean_node_count <= cfg.node_cap as f64);
        assert!(report
            .per_sample
            .iter()
            .all(|&(_, s, _, n)| { s > 0.0 && s < 1.0 && n <= cfg.node_cap }));
        // Untrained scorer on a balanced set sits in the indifferent band.
        assert!(report.auc >= 0.0 && report.auc <= 1.0);
        let again = evaluate(&bundle, &samples, &cfg).unwrap();
        assert_eq!(report, again);
        let kv = report.to_key_values();
        assert!(kv.contains("auc="));
        assert!(kv.contains("zoom_recall_deepest="));
        assert!(kv.contains("score.0000="));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = RunConfig {
            lambda: 0.7,
            ..tiny_cfg()
        };
        let data = tiny_data();
        let (image, mask, y) = gen_sample(&data, 0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();

        let loss_of = |b: &ModelBundle| -> f64 {
            let mut tape = Tape::new();
            let bound = b.bind(&mut tape);
            let (run, _) = run_sample(
                &mut tape,
                &bound,
                &cfg,
                &image,
                &mask,
                y,
                ZoomPolicy::Teacher,
            )
            .unwrap();
            run.total
        };

        bundle.zero_grads();
        {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let (_, tensors) = run_sample(
                &mut tape,
                &bound,
                &cfg,
                &image,
                &mask,
                y,
                ZoomPolicy::Teacher,
            )
            .unwrap();
            tape.backward(tensors.total).unwrap();
            bundle.harvest_grads(&tape, &bound, 1.0).unwrap();
        }
        let grads: Vec<Vec<f64>> = bundle
            .named_params()
            .iter()
            .map(|(_, t)| t.grad().unwrap().to_vec())
            .collect();
        let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
        let total: usize = sizes.iter().sum();

        let mut check_rng = ChaCha20Rng::seed_from_u64(22);
        for _ in 0..30 {
            let mut flat = check_rng.gen_range(0..total);
            let mut pi = 0;
            while flat >= sizes[pi] {
                flat -= sizes[pi];
                pi += 1;
            }
            let h = 1e-5;
            let orig = bundle.named_params()[pi].1.data()[flat];
            bundle.named_params_mut()[pi].1.data_mut()[flat] = orig + h;
            let up = loss_of(&bundle);
            bundle.named_params_mut()[pi].1.data_mut()[flat] = orig - h;
            let down = loss_of(&bundle);
            bundle.named_params_mut()[pi].1.data_mut()[flat] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[pi][flat];
            let denom = a.abs().max(fd.abs());
            if denom < 1e-8 {
                assert!((a - fd).abs() < 1e-6, "param {pi}[{flat}]: {a} vs {fd}");
            } else {
                let rel = (a - fd).abs() / denom;
                assert!(rel <= 1e-4, "param {pi}[{flat}]: {a} vs {fd} rel {rel}");
            }
        }
    }

    /// Interleaved bright-cluster (label 1) and pure-background (label 0)
    /// patches: the cleanly separable case.
    fn separable_patches(d: usize, n: usize, rng: &mut ChaCha20Rng) -> PatchSet {
        let mut features = Vec::with_capacity(n * d * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            for y in 0..d {
                for x in 0..d {
                    let mut v = rng.gen_range(0.1..0.4);
                    let centered = x.abs_diff(d / 2) <= 1 && y.abs_diff(d / 2) <= 1;
                    if label == 1 && centered {
                        v = (v + 0.6f64).min(1.0);
                    }
                    features.push(v);
                }
            }
            labels.push(label);
        }
        PatchSet {
            d,
            features,
            labels,
            origins: vec![(0, 0, 0); n],
        }
    }

    #[test]
    fn pretraining_learns_separable_patches() {
        let cfg = RunConfig {
            epochs: 10,
            batch_size: 8,
            ..tiny_cfg()
        };
        let mut prng = ChaCha20Rng::seed_from_u64(33);
        let patches = separable_patches(cfg.d, 60, &mut prng);

        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let result = pretrain_patch_cnn(&cfg, &patches, &mut rng).unwrap();
        assert!(
            result.holdout_accuracy >= 0.95,
            "holdout accuracy {}",
            result.holdout_accuracy
        );

        // Zero epochs: initialization untouched, bitwise.
        let zero_cfg = RunConfig {
            epochs: 0,
            ..cfg.clone()
        };
        let mut rng_a = ChaCha20Rng::seed_from_u64(34);
        let untrained = pretrain_patch_cnn(&zero_cfg, &patches, &mut rng_a).unwrap();
        let mut rng_b = ChaCha20Rng::seed_from_u64(34);
        let fresh = CnnParams::init(CnnConfig::desk_default(cfg.d, cfg.hdim), &mut rng_b).unwrap();
        for (a, b) in untrained.cnn.kernels.iter().zip(&fresh.kernels) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(untrained.cnn.dense_w.data(), fresh.dense_w.data());

        // Determinism.
        let mut rng_c = ChaCha20Rng::seed_from_u64(34);
        let result2 = pretrain_patch_cnn(&cfg, &patches, &mut rng_c).unwrap();
        assert_eq!(result.cnn.dense_w.data(), result2.cnn.dense_w.data());
        assert_eq!(result.holdout_accuracy, result2.holdout_accuracy);

        // Empty patch set is a usage error.
        let empty = PatchSet {
            d: cfg.d,
            features: vec![],
            labels: vec![],
            origins: vec![],
        };
        assert!(matches!(
            pretrain_patch_cnn(&cfg, &empty, &mut rng),
            Err(Error::Usage(_))
        ));

        // Seeding the bundle copies the weights into both CNN paths.
        let mut rng = ChaCha20Rng::seed_from_u64(36);
        let mut bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
        seed_bundle_cnns(&mut bundle, &result.cnn).unwrap();
        assert_eq!(bundle.cnn_node.dense_w.data(), result.cnn.dense_w.data());
        assert_eq!(bundle.cnn_graph.dense_w.data(), result.cnn.dense_w.data());
    }
}

#[cfg(test)]
mod bench {
    use super::*;
    use crate::config::DataConfig;
    use crate::synthdata::gen_sample;
    use rand::SeedableRng;

    #[test]
    #[ignore]
    fn time_desk_scale_sample() {
        let data = DataConfig {
            image_size: 256,
            samples: 10,
            malignant_fraction: 0.5,
            benign_fraction: 0.6,
            texture_cells: 8,
            seed: 42,
            dir: "data".to_string(),
        };
        let cfg = RunConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut bundle = ModelBundle::init(cfg.d, cfg.hdim, &mut rng).unwrap();
        let samples: Vec<_> = (0..4).map(|i| gen_sample(&data, i).unwrap()).collect();
        let t0 = std::time::Instant::now();
        let mut nodes = 0usize;
        for (image, mask, y) in &samples {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let (run, tensors) = run_sample(
                &mut tape,
                &bound,
                &cfg,
                image,
                mask,
                *y,
                ZoomPolicy::Teacher,
            )
            .unwrap();
            tape.backward(tensors.total).unwrap();
            bundle.harvest_grads(&tape, &bound, 0.25).unwrap();
            nodes += run.node_count;
        }
        let dt = t0.elapsed();
        eprintln!(
            "4 samples ({} nodes): {:?} total, {:?}/sample",
            nodes,
            dt,
            dt / 4
        );
    }
}
