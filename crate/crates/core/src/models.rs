//! The learned components: a small convolutional embedder applied per node,
//! single-head graph attention layers, the zoom head that scores frontier
//! nodes, and the graph head that classifies the finished hierarchy.
//!
//! Two disjoint parameter sets share the CNN architecture: one feeds the
//! zoom path, the other the graph classification path. Parameters live in
//! persistent tensors; each forward pass binds them onto a fresh tape.

use crate::error::{Error, Result};
use crate::graph::ZoomGraph;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use rand::Rng;

/// Negative slope of the attention logit activation.
pub const ATTENTION_LEAK: f64 = 0.2;
/// Attention depth for both the zoom and the graph path.
pub const GAT_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Max-pool window applied after the activation; 1 disables pooling.
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    /// Side length of the square single-channel input.
    pub input_d: usize,
    pub convs: Vec<ConvSpec>,
    /// Dense output width; must match the attention input width.
    pub hdim: usize,
}

impl CnnConfig {
    /// Three conv/pool blocks (8, 16, 32 filters) into a dense layer.
    pub fn desk_default(input_d: usize, hdim: usize) -> Self {
        let block = |filters| ConvSpec {
            filters,
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: 2,
        };
        CnnConfig {
            input_d,
            convs: vec![block(8), block(16), block(32)],
            hdim,
        }
    }

    /// Flattened width entering the dense layer; errors if any stage's shape
    /// arithmetic fails for the configured input.
    pub fn flat_dim(&self) -> Result<usize> {
        let mut side = self.input_d;
        let mut channels = 1usize;
        for (i, spec) in self.convs.iter().enumerate() {
            if spec.kernel == 0 || spec.stride == 0 || spec.pool == 0 || spec.filters == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i} has a zero extent in {spec:?}"
                )));
            }
            let span = (side + 2 * spec.padding).checked_sub(spec.kernel);
            let side_after = match span {
                Some(sp) if sp % spec.stride == 0 => sp / spec.stride + 1,
                _ => {
                    return Err(Error::Config(format!(
                        "conv layer {i} does not tile a {side}x{side} input \
                         (kernel {}, stride {}, padding {})",
                        spec.kernel, spec.stride, spec.padding
                    )))
                }
            };
            if side_after % spec.pool != 0 {
                return Err(Error::Config(format!(
                    "pool window {} does not divide the {side_after}-wide output of conv layer {i}",
                    spec.pool
                )));
            }
            side = side_after / spec.pool;
            channels = spec.filters;
        }
        if side == 0 {
            return Err(Error::Config(
                "convolution stack reduces the input to nothing".into(),
            ));
        }
        Ok(channels * side * side)
    }
}

/// Parameters of one CNN instance.
#[derive(Debug, Clone)]
pub struct CnnParams {
    pub cfg: CnnConfig,
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

impl CnnParams {
    /// Uniform fan-in initialization; draws in canonical parameter order.
    pub fn init(cfg: CnnConfig, rng: &mut impl Rng) -> Result<Self> {
        let flat = cfg.flat_dim()?;
        let mut kernels = Vec::with_capacity(cfg.convs.len());
        let mut biases = Vec::with_capacity(cfg.convs.len());
        let mut in_ch = 1usize;
        for spec in &cfg.convs {
            let fan_in = in_ch * spec.kernel * spec.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            kernels.push(Tensor::uniform(
                vec![spec.filters, in_ch, spec.kernel, spec.kernel],
                bound,
                rng,
            ));
            biases.push(Tensor::uniform(vec![spec.filters], bound, rng));
            in_ch = spec.filters;
        }
        let bound = 1.0 / (flat as f64).sqrt();
        let dense_w = Tensor::uniform(vec![flat, cfg.hdim], bound, rng);
        let dense_b = Tensor::uniform(vec![cfg.hdim], bound, rng);
        Ok(CnnParams {
            cfg,
            kernels,
            biases,
            dense_w,
            dense_b,
        })
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.conv{i}.kernels"), k));
            out.push((format!("{prefix}.conv{i}.bias"), b));
        }
        out.push((format!("{prefix}.dense.weight"), &self.dense_w));
        out.push((format!("{prefix}.dense.bias"), &self.dense_b));
    }

    pub(crate) fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        for (i, (k, b)) in self.kernels.iter_mut().zip(&mut self.biases).enumerate() {
            out.push((format!("{prefix}.conv{i}.kernels"), k));
            out.push((format!("{prefix}.conv{i}.bias"), b));
        }
        out.push((format!("{prefix}.dense.weight"), &mut self.dense_w));
        out.push((format!("{prefix}.dense.bias"), &mut self.dense_b));
    }
}

/// One attention layer: linear map plus the concatenation-attention vector.
#[derive(Debug, Clone)]
pub struct GatLayerParams {
    pub weight: Tensor,
    /// Stored as `[2*h_out, 1]`; the top half scores the source node, the
    /// bottom half the attended node.
    pub attention: Tensor,
    pub alpha: f64,
}

impl GatLayerParams {
    pub fn init(h_in: usize, h_out: usize, rng: &mut impl Rng) -> Self {
        let wb = 1.0 / (h_in as f64).sqrt();
        let ab = 1.0 / ((2 * h_out) as f64).sqrt();
        GatLayerParams {
            weight: Tensor::uniform(vec![h_in, h_out], wb, rng),
            attention: Tensor::uniform(vec![2 * h_out, 1], ab, rng),
            alpha: ATTENTION_LEAK,
        }
    }
}

/// Every learned tensor of the model, in one bundle.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cnn_node: CnnParams,
    pub gat_node: Vec<GatLayerParams>,
    pub zoom_w: Tensor,
    pub zoom_b: Tensor,
    pub cnn_graph: CnnParams,
    pub gat_graph: Vec<GatLayerParams>,
    pub out_proj: Tensor,
}

impl ModelBundle {
    /// Fresh bundle for `input_d`-sized node features and `hdim`-wide
    /// embeddings. A single rng stream draws in canonical parameter order,
    /// so equal seeds give bitwise-equal bundles.
    pub fn init(input_d: usize, hdim: usize, rng: &mut impl Rng) -> Result<Self> {
        let cfg = CnnConfig::desk_default(input_d, hdim);
        let cnn_node = CnnParams::init(cfg.clone(), rng)?;
        let gat_node = (0..GAT_LAYERS)
            .map(|_| GatLayerParams::init(hdim, hdim, rng))
            .collect();
        let hb = 1.0 / (hdim as f64).sqrt();
        let zoom_w = Tensor::uniform(vec![hdim, 2], hb, rng);
        let zoom_b = Tensor::uniform(vec![2], hb, rng);
        let cnn_graph = CnnParams::init(cfg, rng)?;
        let gat_graph = (0..GAT_LAYERS)
            .map(|_| GatLayerParams::init(hdim, hdim, rng))
            .collect();
        let out_proj = Tensor::uniform(vec![hdim, 2], hb, rng);
        Ok(ModelBundle {
            cnn_node,
            gat_node,
            zoom_w,
            zoom_b,
            cnn_graph,
            gat_graph,
            out_proj,
        })
    }

    pub fn hdim(&self) -> usize {
        self.cnn_node.cfg.hdim
    }

    pub fn input_d(&self) -> usize {
        self.cnn_node.cfg.input_d
    }

    /// Parameters with canonical names, in the fixed order shared by
    /// initialization, binding, optimizer state, and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.cnn_node.collect("cnn_node", &mut out);
        for (i, l) in self.gat_node.iter().enumerate() {
            out.push((format!("gat_node.layer{i}.weight"), &l.weight));
            out.push((format!("gat_node.layer{i}.attention"), &l.attention));
        }
        out.push(("zoom_head.weight".into(), &self.zoom_w));
        out.push(("zoom_head.bias".into(), &self.zoom_b));
        self.cnn_graph.collect("cnn_graph", &mut out);
        for (i, l) in self.gat_graph.iter().enumerate() {
            out.push((format!("gat_graph.layer{i}.weight"), &l.weight));
            out.push((format!("gat_graph.layer{i}.attention"), &l.attention));
        }
        out.push(("out_proj.weight".into(), &self.out_proj));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.cnn_node.collect_mut("cnn_node", &mut out);
        for (i, l) in self.gat_node.iter_mut().enumerate() {
            out.push((format!("gat_node.layer{i}.weight"), &mut l.weight));
            out.push((format!("gat_node.layer{i}.attention"), &mut l.attention));
        }
        out.push(("zoom_head.weight".into(), &mut self.zoom_w));
        out.push(("zoom_head.bias".into(), &mut self.zoom_b));
        self.cnn_graph.collect_mut("cnn_graph", &mut out);
        for (i, l) in self.gat_graph.iter_mut().enumerate() {
            out.push((format!("gat_graph.layer{i}.weight"), &mut l.weight));
            out.push((format!("gat_graph.layer{i}.attention"), &mut l.attention));
        }
        out.push(("out_proj.weight".into(), &mut self.out_proj));
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Registers every parameter on the tape, canonical order.
    pub fn bind(&self, tape: &mut Tape) -> BoundBundle {
        let bind_gat = |tape: &mut Tape, layers: &[GatLayerParams]| -> Vec<BoundGatLayer> {
            layers
                .iter()
                .map(|l| BoundGatLayer {
                    weight: tape.leaf(&l.weight),
                    attention: tape.leaf(&l.attention),
                    alpha: l.alpha,
                    h_out: l.weight.shape()[1],
                })
                .collect()
        };
        let cnn_node = bind_cnn(tape, &self.cnn_node);
        let gat_node = bind_gat(tape, &self.gat_node);
        let zoom_w = tape.leaf(&self.zoom_w);
        let zoom_b = tape.leaf(&self.zoom_b);
        let cnn_graph = bind_cnn(tape, &self.cnn_graph);
        let gat_graph = bind_gat(tape, &self.gat_graph);
        let out_proj = tape.leaf(&self.out_proj);
        BoundBundle {
            cnn_node,
            gat_node,
            zoom_w,
            zoom_b,
            cnn_graph,
            gat_graph,
            out_proj,
        }
    }

    /// Adds the tape gradients of a bound copy into the persistent tensors,
    /// scaled by `scale` (batch averaging happens here).
    pub fn harvest_grads(&mut self, tape: &Tape, bound: &BoundBundle, scale: f64) -> Result<()> {
        let ids = bound.named_ids();
        let params = self.named_params_mut();
        debug_assert_eq!(ids.len(), params.len());
        for ((name, id), (pname, tensor)) in ids.into_iter().zip(params) {
            debug_assert_eq!(name, pname);
            if let Some(g) = tape.grad(id) {
                let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                tensor.accumulate_grad(&scaled)?;
            }
            let _ = name;
        }
        Ok(())
    }
}

/// Registers one CNN's parameters on a tape.
pub fn bind_cnn(tape: &mut Tape, p: &CnnParams) -> BoundCnn {
    BoundCnn {
        cfg: p.cfg.clone(),
        kernels: p.kernels.iter().map(|t| tape.leaf(t)).collect(),
        biases: p.biases.iter().map(|t| tape.leaf(t)).collect(),
        dense_w: tape.leaf(&p.dense_w),
        dense_b: tape.leaf(&p.dense_b),
    }
}

/// Tape ids of one bound CNN.
#[derive(Debug, Clone)]
pub struct BoundCnn {
    pub cfg: CnnConfig,
    pub kernels: Vec<TensorId>,
    pub biases: Vec<TensorId>,
    pub dense_w: TensorId,
    pub dense_b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGatLayer {
    pub weight: TensorId,
    pub attention: TensorId,
    pub alpha: f64,
    pub h_out: usize,
}

/// Tape ids of every parameter, mirroring [`ModelBundle`].
#[derive(Debug, Clone)]
pub struct BoundBundle {
    pub cnn_node: BoundCnn,
    pub gat_node: Vec<BoundGatLayer>,
    pub zoom_w: TensorId,
    pub zoom_b: TensorId,
    pub cnn_graph: BoundCnn,
    pub gat_graph: Vec<BoundGatLayer>,
    pub out_proj: TensorId,
}

impl BoundBundle {
    /// Same names and order as [`ModelBundle::named_params`].
    pub fn named_ids(&self) -> Vec<(String, TensorId)> {
        let mut out = Vec::new();
        let collect_cnn = |prefix: &str, c: &BoundCnn, out: &mut Vec<(String, TensorId)>| {
            for (i, (&k, &b)) in c.kernels.iter().zip(&c.biases).enumerate() {
                out.push((format!("{prefix}.conv{i}.kernels"), k));
                out.push((format!("{prefix}.conv{i}.bias"), b));
            }
            out.push((format!("{prefix}.dense.weight"), c.dense_w));
            out.push((format!("{prefix}.dense.bias"), c.dense_b));
        };
        collect_cnn("cnn_node", &self.cnn_node, &mut out);
        for (i, l) in self.gat_node.iter().enumerate() {
            out.push((format!("gat_node.layer{i}.weight"), l.weight));
            out.push((format!("gat_node.layer{i}.attention"), l.attention));
        }
        out.push(("zoom_head.weight".into(), self.zoom_w));
        out.push(("zoom_head.bias".into(), self.zoom_b));
        collect_cnn("cnn_graph", &self.cnn_graph, &mut out);
        for (i, l) in self.gat_graph.iter().enumerate() {
            out.push((format!("gat_graph.layer{i}.weight"), l.weight));
            out.push((format!("gat_graph.layer{i}.attention"), l.attention));
        }
        out.push(("out_proj.weight".into(), self.out_proj));
        out
    }
}

/// Embeds one `[1, D, D]` node feature to `[1, hdim]`.
pub fn cnn_embed_node(tape: &mut Tape, cnn: &BoundCnn, row: TensorId) -> Result<TensorId> {
    let shape = tape.shape(row).to_vec();
    if shape != [1, cnn.cfg.input_d, cnn.cfg.input_d] {
        return Err(Error::Config(format!(
            "cnn expects [1, {d}, {d}] node features, got {shape:?}",
            d = cnn.cfg.input_d
        )));
    }
    let mut x = row;
    for ((spec, &k), &b) in cnn.cfg.convs.iter().zip(&cnn.kernels).zip(&cnn.biases) {
        x = tape.conv2d(x, k, b, spec.stride, spec.padding)?;
        x = tape.elu(x)?;
        if spec.pool > 1 {
            x = tape.maxpool2d(x, spec.pool)?;
        }
    }
    let flat: usize = tape.shape(x).iter().product();
    let x = tape.reshape(x, vec![1, flat])?;
    let x = tape.matmul(x, cnn.dense_w)?;
    let x = tape.add_row_bias(x, cnn.dense_b)?;
    tape.elu(x)
}

/// Per-row CNN application over `[N, D, D]`, one embedding id per node.
pub fn cnn_forward_rows(tape: &mut Tape, cnn: &BoundCnn, x: TensorId) -> Result<Vec<TensorId>> {
    let shape = tape.shape(x).to_vec();
    let d = cnn.cfg.input_d;
    if shape.len() != 3 || shape[1] != d || shape[2] != d {
        return Err(Error::Config(format!(
            "cnn expects [N, {d}, {d}] features, got {shape:?}"
        )));
    }
    (0..shape[0])
        .map(|i| {
            let row = tape.select_rows(x, &[i])?;
            cnn_embed_node(tape, cnn, row)
        })
        .collect()
}

/// `[N, D, D] -> [N, hdim]` through the conv/pool/dense stack, rows
/// independent of one another.
pub fn cnn_forward(tape: &mut Tape, cnn: &BoundCnn, x: TensorId) -> Result<TensorId> {
    let rows = cnn_forward_rows(tape, cnn, x)?;
    tape.concat_rows(&rows)
}

/// One attention layer plus its attention matrix (rows: source node;
/// columns: attended neighbor; zero outside the adjacency support).
pub fn gat_layer_with_attention(
    tape: &mut Tape,
    layer: &BoundGatLayer,
    adjacency: &[u8],
    h: TensorId,
) -> Result<(TensorId, TensorId)> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "gat_layer",
            lhs: shape,
            rhs: vec![2],
        });
    }
    let n = shape[0];
    if adjacency.len() != n * n {
        return Err(Error::Dimension {
            op: "gat_layer",
            lhs: vec![n, n],
            rhs: vec![adjacency.len()],
        });
    }
    let wh = tape.matmul(h, layer.weight)?;
    let h_out = layer.h_out;
    let src_half: Vec<usize> = (0..h_out).collect();
    let dst_half: Vec<usize> = (h_out..2 * h_out).collect();
    let a_src = tape.select_rows(layer.attention, &src_half)?;
    let a_dst = tape.select_rows(layer.attention, &dst_half)?;
    let s_src = tape.matmul(wh, a_src)?;
    let s_dst = tape.matmul(wh, a_dst)?;
    let logits = tape.outer_sum(s_src, s_dst)?;
    let logits = tape.leaky_relu(logits, layer.alpha)?;
    let att = tape.masked_softmax_rows(logits, adjacency)?;
    let agg = tape.matmul(att, wh)?;
    let out = tape.elu(agg)?;
    Ok((out, att))
}

pub fn gat_layer(
    tape: &mut Tape,
    layer: &BoundGatLayer,
    adjacency: &[u8],
    h: TensorId,
) -> Result<TensorId> {
    gat_layer_with_attention(tape, layer, adjacency, h).map(|(out, _)| out)
}

pub fn gat_stack(
    tape: &mut Tape,
    layers: &[BoundGatLayer],
    adjacency: &[u8],
    mut h: TensorId,
) -> Result<TensorId> {
    for layer in layers {
        h = gat_layer(tape, layer, adjacency, h)?;
    }
    Ok(h)
}

/// Zoom probabilities for the deepest-level nodes, with attention over the
/// whole graph built so far. Takes pre-computed per-node CNN embeddings
/// (id i embeds node i) so levels can reuse earlier work. Returns the scored
/// node ids and the `[M, 2]` (keep, zoom) probability rows.
pub fn node_zoom_forward_cached(
    tape: &mut Tape,
    bundle: &BoundBundle,
    g: &ZoomGraph,
    node_embeddings: &[TensorId],
) -> Result<(Vec<usize>, TensorId)> {
    if node_embeddings.len() != g.len() {
        return Err(Error::Dimension {
            op: "node_zoom_forward",
            lhs: vec![g.len()],
            rhs: vec![node_embeddings.len()],
        });
    }
    let frontier = g.frontier();
    if frontier.is_empty() {
        return Err(Error::DegenerateInput(
            "no nodes at the current level to score".into(),
        ));
    }
    let h = tape.concat_rows(node_embeddings)?;
    let h = gat_stack(tape, &bundle.gat_node, g.adjacency(), h)?;
    let logits = tape.matmul(h, bundle.zoom_w)?;
    let logits = tape.add_row_bias(logits, bundle.zoom_b)?;
    let sel = tape.select_rows(logits, &frontier)?;
    let p = tape.softmax_rows(sel)?;
    Ok((frontier, p))
}

/// As [`node_zoom_forward_cached`], embedding all node features first.
pub fn node_zoom_forward(
    tape: &mut Tape,
    bundle: &BoundBundle,
    g: &ZoomGraph,
    x_all: TensorId,
) -> Result<(Vec<usize>, TensorId)> {
    let rows = cnn_forward_rows(tape, &bundle.cnn_node, x_all)?;
    node_zoom_forward_cached(tape, bundle, g, &rows)
}

/// Classifies the finished graph: embed every node, attend over the full
/// adjacency, mean-pool, project to a 2-way softmax. `final_level` is the
/// configured depth the graph must have reached.
pub fn graph_forward(
    tape: &mut Tape,
    bundle: &BoundBundle,
    g: &ZoomGraph,
    x_all: TensorId,
    final_level: usize,
) -> Result<TensorId> {
    if g.current_level() != final_level {
        return Err(Error::Usage(format!(
            "graph head needs the graph at level {final_level}, it is at {}",
            g.current_level()
        )));
    }
    let h = cnn_forward(tape, &bundle.cnn_graph, x_all)?;
    let h = gat_stack(tape, &bundle.gat_graph, g.adjacency(), h)?;
    let pooled = tape.mean_rows(h)?;
    let logits = tape.matmul(pooled, bundle.out_proj)?;
    tape.softmax_rows(logits)
}
