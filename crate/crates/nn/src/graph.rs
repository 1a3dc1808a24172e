//! Static layer graphs with cached activations and reverse-mode gradients.

use crate::error::{shape_err, NnError, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

/// Offset added to the channel-pair norm by [`Layer::UnitNormalize`].
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
        }
    }

    fn cast<U: Real>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Stride-1 convolution with zero padding that preserves the spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    /// `(cout, cin, kernel, kernel)`.
    pub weight: Param<T>,
    /// `(cout, 1, 1, 1)`.
    pub bias: Param<T>,
}

impl<T: Real> Conv<T> {
    pub fn new(kernel: usize, cin: usize, cout: usize) -> Self {
        Self {
            kernel,
            cin,
            cout,
            weight: Param::zeros([cout, cin, kernel, kernel]),
            bias: Param::zeros([cout, 1, 1, 1]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.cout * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Input { channels: usize },
    Conv(Conv<T>),
    Relu,
    AvgPool2,
    /// Nearest-neighbour upsampling by a factor of two.
    Upsample2,
    /// Nearest-neighbour resize of the first input to the spatial size of the second.
    UpsampleTo,
    /// Bilinear resize (half-pixel centres, edge clamped) of the first input
    /// to the spatial size of the second.
    BilinearTo,
    Concat,
    UnitNormalize,
    Softmax,
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::AvgPool2 => "avgpool2",
            Layer::Upsample2 => "upsample2",
            Layer::UpsampleTo => "upsample_to",
            Layer::BilinearTo => "bilinear_to",
            Layer::Concat => "concat",
            Layer::UnitNormalize => "unit_normalize",
            Layer::Softmax => "softmax",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Layer::Input { .. } => Some(0),
            Layer::UpsampleTo | Layer::BilinearTo => Some(2),
            Layer::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<NodeId>,
}

/// Nodes are stored in topological order: every input id is smaller than
/// the node's own id, so the graph is acyclic by construction.
#[derive(Clone, Debug)]
pub struct Model<T> {
    nodes: Vec<Node<T>>,
    output: NodeId,
    cache: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Model<T> {
    pub fn new(input_channels: usize) -> Self {
        Self {
            nodes: vec![Node {
                name: "input".into(),
                layer: Layer::Input {
                    channels: input_channels,
                },
                inputs: vec![],
            }],
            output: 0,
            cache: None,
        }
    }

    pub fn input_channels(&self) -> usize {
        match self.nodes[0].layer {
            Layer::Input { channels } => channels,
            _ => unreachable!("node 0 is always the input"),
        }
    }

    /// Appends a node and makes it the output.
    pub fn add(&mut self, name: &str, layer: Layer<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(layer, Layer::Input { .. }) {
            return Err(NnError::Input("a model has exactly one input node".into()));
        }
        let id = self.nodes.len();
        if let Some(bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(NnError::Input(format!(
                "node `{name}` refers to unknown or later node {bad}"
            )));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(NnError::Input(format!("duplicate node name `{name}`")));
        }
        match layer.arity() {
            Some(a) if a != inputs.len() => {
                return Err(NnError::Input(format!(
                    "{} node `{name}` takes {a} input(s), got {}",
                    layer.kind(),
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(NnError::Input(format!("concat node `{name}` needs inputs")))
            }
            _ => {}
        }
        self.nodes.push(Node {
            name: name.to_string(),
            layer,
            inputs: inputs.to_vec(),
        });
        self.output = id;
        self.cache = None;
        Ok(id)
    }

    pub fn conv(&mut self, name: &str, input: NodeId, kernel: usize, cin: usize, cout: usize) -> Result<NodeId> {
        self.add(name, Layer::Conv(Conv::new(kernel, cin, cout)), &[input])
    }

    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(NnError::Input(format!("no node {id}")));
        }
        self.output = id;
        Ok(())
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv<T>> {
        self.nodes.iter().filter_map(|n| match &n.layer {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv<T>> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.layer {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// All trainable parameters in a fixed order (weight then bias per conv).
    pub fn params(&self) -> Vec<&Param<T>> {
        self.convs().flat_map(|c| [&c.weight, &c.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Activation of `id` from the last forward pass.
    pub fn activation(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c[id])
    }

    /// Hash of which ReLU outputs were positive in the last forward pass;
    /// 0 without a cached pass.
    pub fn relu_signature(&self) -> u64 {
        let Some(acts) = &self.cache else { return 0 };
        // FNV-1a over the positivity bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (node, act) in self.nodes.iter().zip(acts) {
            if matches!(node.layer, Layer::Relu) {
                for v in act.data() {
                    h ^= (*v > T::zero()) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Smallest channel-pair norm entering any unit_normalize node in the
    /// last forward pass.
    pub fn min_normalize_input_norm(&self) -> Option<f64> {
        let acts = self.cache.as_ref()?;
        let mut best: Option<f64> = None;
        for node in &self.nodes {
            if !matches!(node.layer, Layer::UnitNormalize) {
                continue;
            }
            let x = &acts[node.inputs[0]];
            let p = x.plane();
            for s in 0..x.batch() {
                let d = x.sample(s);
                for i in 0..p {
                    let r = d[i].f64().hypot(d[p + i].f64());
                    best = Some(best.map_or(r, |b| b.min(r)));
                }
            }
        }
        best
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Same graph with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                name: n.name.clone(),
                inputs: n.inputs.clone(),
                layer: match &n.layer {
                    Layer::Input { channels } => Layer::Input { channels: *channels },
                    Layer::Conv(c) => Layer::Conv(Conv {
                        kernel: c.kernel,
                        cin: c.cin,
                        cout: c.cout,
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::AvgPool2 => Layer::AvgPool2,
                    Layer::Upsample2 => Layer::Upsample2,
                    Layer::UpsampleTo => Layer::UpsampleTo,
                    Layer::BilinearTo => Layer::BilinearTo,
                    Layer::Concat => Layer::Concat,
                    Layer::UnitNormalize => Layer::UnitNormalize,
                    Layer::Softmax => Layer::Softmax,
                },
            })
            .collect();
        Model {
            nodes,
            output: self.output,
            cache: None,
        }
    }

    /// Runs every node up to the output and keeps all activations.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = self.input_channels();
        if input.channels() != expected {
            return Err(shape_err(
                "input",
                format!("expected {expected} channels, got {}", input.channels()),
            ));
        }
        if input.height() == 0 || input.width() == 0 || input.batch() == 0 {
            return Err(shape_err("input", format!("empty input {:?}", input.shape())));
        }
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.output + 1);
        acts.push(input.clone());
        for node in &self.nodes[1..=self.output] {
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &acts[i]).collect();
            let out = forward_node(node, &ins)?;
            acts.push(out);
        }
        let out = acts[self.output].clone();
        self.cache = Some(acts);
        Ok(out)
    }

    /// Backpropagates `grad` (gradient of the loss with respect to the output)
    /// and returns the gradient with respect to the input. Parameter gradients
    /// are overwritten.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_from(self.output, grad)
    }

    /// Like [`backward`](Self::backward) but seeded at the input of the final
    /// softmax, for losses that return gradients with respect to logits.
    pub fn backward_logits(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out = &self.nodes[self.output];
        if !matches!(out.layer, Layer::Softmax) {
            return Err(NnError::State(format!(
                "output node `{}` is not a softmax",
                out.name
            )));
        }
        let logits = out.inputs[0];
        self.backward_from(logits, grad)
    }

    pub fn backward_from(&mut self, start: NodeId, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let acts = self
            .cache
            .take()
            .ok_or_else(|| NnError::State("backward called without a cached forward pass".into()))?;
        let result = self.backward_inner(&acts, start, grad);
        self.cache = Some(acts);
        result
    }

    fn backward_inner(&mut self, acts: &[Tensor<T>], start: NodeId, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if start >= acts.len() {
            return Err(NnError::State(format!("node {start} was not evaluated")));
        }
        if grad.shape() != acts[start].shape() {
            return Err(shape_err(
                &self.nodes[start].name,
                format!(
                    "gradient {:?} does not match activation {:?}",
                    grad.shape(),
                    acts[start].shape()
                ),
            ));
        }
        self.zero_grads();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; start + 1];
        grads[start] = Some(grad.clone());
        for id in (1..=start).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut self.nodes[id];
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &acts[i]).collect();
            let in_grads = backward_node(node, &ins, &acts[id], &g)?;
            for (&src, gi) in node.inputs.iter().zip(in_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(acts[0].shape())))
    }
}

fn forward_node<T: Real>(node: &Node<T>, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let name = node.name.as_str();
    match &node.layer {
        Layer::Input { .. } => unreachable!("input is not evaluated"),
        Layer::Conv(c) => conv_forward(name, c, ins[0]),
        Layer::Relu => {
            let mut out = ins[0].clone();
            for v in out.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            Ok(out)
        }
        Layer::AvgPool2 => avgpool_forward(name, ins[0]),
        Layer::Upsample2 => {
            let x = ins[0];
            Ok(resize_nearest(x, x.height() * 2, x.width() * 2))
        }
        Layer::UpsampleTo => Ok(resize_nearest(ins[0], ins[1].height(), ins[1].width())),
        Layer::BilinearTo => Ok(resize_bilinear(ins[0], ins[1].height(), ins[1].width())),
        Layer::Concat => concat_forward(name, ins),
        Layer::UnitNormalize => unit_normalize_forward(name, ins[0]),
        Layer::Softmax => Ok(softmax(ins[0])),
    }
}

type InputGrads<T> = Vec<Option<Tensor<T>>>;

fn backward_node<T: Real>(
    node: &mut Node<T>,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<InputGrads<T>> {
    Ok(match &mut node.layer {
        Layer::Input { .. } => vec![],
        Layer::Conv(c) => vec![Some(conv_backward(c, ins[0], g))],
        Layer::Relu => {
            let mut gi = g.clone();
            for (v, &o) in gi.data_mut().iter_mut().zip(out.data()) {
                if o <= T::zero() {
                    *v = T::zero();
                }
            }
            vec![Some(gi)]
        }
        Layer::AvgPool2 => vec![Some(avgpool_backward(ins[0], g))],
        Layer::Upsample2 | Layer::UpsampleTo => {
            let mut v = vec![Some(resize_nearest_backward(ins[0], g))];
            if ins.len() == 2 {
                v.push(None);
            }
            v
        }
        Layer::BilinearTo => vec![Some(resize_bilinear_backward(ins[0], g)), None],
        Layer::Concat => concat_backward(ins, g).into_iter().map(Some).collect(),
        Layer::UnitNormalize => vec![Some(unit_normalize_backward(ins[0], g))],
        Layer::Softmax => vec![Some(softmax_backward(out, g))],
    })
}

fn conv_forward<T: Real>(name: &str, c: &Conv<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.channels() != c.cin {
        return Err(shape_err(
            name,
            format!("conv expects {} input channels, got {}", c.cin, x.channels()),
        ));
    }
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let rows = c.fan_in();
    let mut out = Tensor::zeros([n, c.cout, h, w]);
    let mut cols = if c.kernel == 1 { Vec::new() } else { vec![T::zero(); rows * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let cols_ref: &[T] = if c.kernel == 1 {
            xs
        } else {
            kernels::im2col(xs, c.cin, h, w, c.kernel, &mut cols);
            &cols
        };
        kernels::matmul_forward(
            c.weight.value.data(),
            c.bias.value.data(),
            cols_ref,
            rows,
            hw,
            out.sample_mut(s),
        );
    }
    Ok(out)
}

fn conv_backward<T: Real>(c: &mut Conv<T>, x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let hw = h * w;
    let rows = c.fan_in();
    let mut gx = Tensor::zeros(x.shape());
    let mut cols = if c.kernel == 1 { Vec::new() } else { vec![T::zero(); rows * hw] };
    let mut dcols = vec![T::zero(); rows * hw];
    for s in 0..n {
        let xs = x.sample(s);
        let cols_ref: &[T] = if c.kernel == 1 {
            xs
        } else {
            kernels::im2col(xs, c.cin, h, w, c.kernel, &mut cols);
            &cols
        };
        kernels::matmul_backward(
            c.weight.value.data(),
            cols_ref,
            g.sample(s),
            rows,
            hw,
            c.weight.grad.data_mut(),
            c.bias.grad.data_mut(),
            Some(&mut dcols),
        );
        if c.kernel == 1 {
            gx.sample_mut(s).copy_from_slice(&dcols);
        } else {
            kernels::col2im(&dcols, c.cin, h, w, c.kernel, gx.sample_mut(s));
        }
    }
    gx
}

fn avgpool_forward<T: Real>(name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ch, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err(name, format!("cannot pool a {h}x{w} map")));
    }
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros([n, ch, oh, ow]);
    for s in 0..n {
        for c in 0..ch {
            let src = x.channel(s, c);
            let dst = out.channel_mut(s, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    dst[y * ow + xx] = ((a + b) + (cc + d)) * quarter;
                }
            }
        }
    }
    Ok(out)
}

fn avgpool_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [n, ch, _, w] = x.shape();
    let (oh, ow) = (g.height(), g.width());
    let quarter = T::of(0.25);
    let mut gx = Tensor::zeros(x.shape());
    for s in 0..n {
        for c in 0..ch {
            let src = g.channel(s, c);
            let dst = gx.channel_mut(s, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let v = src[y * ow + xx] * quarter;
                    dst[2 * y * w + 2 * xx] = v;
                    dst[2 * y * w + 2 * xx + 1] = v;
                    dst[(2 * y + 1) * w + 2 * xx] = v;
                    dst[(2 * y + 1) * w + 2 * xx + 1] = v;
                }
            }
        }
    }
    gx
}

// Source index of output row/column `i` when resizing `from` to `to`.
#[inline]
fn nearest_src(i: usize, from: usize, to: usize) -> usize {
    (i * from / to).min(from - 1)
}

fn resize_nearest<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, ch, h, w] = x.shape();
    let mut out = Tensor::zeros([n, ch, oh, ow]);
    let xs: Vec<usize> = (0..ow).map(|j| nearest_src(j, w, ow)).collect();
    for s in 0..n {
        for c in 0..ch {
            let src = x.channel(s, c);
            let dst = out.channel_mut(s, c);
            for y in 0..oh {
                let sy = nearest_src(y, h, oh);
                for (j, &sx) in xs.iter().enumerate() {
                    dst[y * ow + j] = src[sy * w + sx];
                }
            }
        }
    }
    out
}

fn resize_nearest_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [n, ch, h, w] = x.shape();
    let (oh, ow) = (g.height(), g.width());
    let xs: Vec<usize> = (0..ow).map(|j| nearest_src(j, w, ow)).collect();
    let mut gx = Tensor::zeros(x.shape());
    for s in 0..n {
        for c in 0..ch {
            let src = g.channel(s, c);
            let dst = gx.channel_mut(s, c);
            for y in 0..oh {
                let sy = nearest_src(y, h, oh);
                for (j, &sx) in xs.iter().enumerate() {
                    dst[sy * w + sx] += src[y * ow + j];
                }
            }
        }
    }
    gx
}

// Bilinear taps (lower index, upper index, upper weight) per output index.
fn bilinear_taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(from - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, ch, h, w] = x.shape();
    let mut out = Tensor::zeros([n, ch, oh, ow]);
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    for s in 0..n {
        for c in 0..ch {
            let src = x.channel(s, c);
            let dst = out.channel_mut(s, c);
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0].f64() * (1.0 - fx) + src[y0 * w + x1].f64() * fx;
                    let bot = src[y1 * w + x0].f64() * (1.0 - fx) + src[y1 * w + x1].f64() * fx;
                    dst[y * ow + j] = T::of(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

fn resize_bilinear_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [n, ch, h, w] = x.shape();
    let (oh, ow) = (g.height(), g.width());
    let ys = bilinear_taps(h, oh);
    let xs = bilinear_taps(w, ow);
    let mut gx = Tensor::zeros(x.shape());
    for s in 0..n {
        for c in 0..ch {
            let src = g.channel(s, c);
            let mut acc = vec![0.0f64; h * w];
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = src[y * ow + j].f64();
                    acc[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                    acc[y0 * w + x1] += v * (1.0 - fy) * fx;
                    acc[y1 * w + x0] += v * fy * (1.0 - fx);
                    acc[y1 * w + x1] += v * fy * fx;
                }
            }
            for (d, a) in gx.channel_mut(s, c).iter_mut().zip(acc) {
                *d = T::of(a);
            }
        }
    }
    gx
}

fn concat_forward<T: Real>(name: &str, ins: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let [n, _, h, w] = ins[0].shape();
    for t in ins {
        if t.batch() != n || t.height() != h || t.width() != w {
            return Err(shape_err(
                name,
                format!("concat inputs disagree: {:?} vs {:?}", ins[0].shape(), t.shape()),
            ));
        }
    }
    let total: usize = ins.iter().map(|t| t.channels()).sum();
    let mut out = Tensor::zeros([n, total, h, w]);
    for s in 0..n {
        let mut off = 0;
        let dst = out.sample_mut(s);
        for t in ins {
            let src = t.sample(s);
            dst[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
    }
    Ok(out)
}

fn concat_backward<T: Real>(ins: &[&Tensor<T>], g: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut outs: Vec<Tensor<T>> = ins.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for s in 0..g.batch() {
        let src = g.sample(s);
        let mut off = 0;
        for o in outs.iter_mut() {
            let dst = o.sample_mut(s);
            let len = dst.len();
            dst.copy_from_slice(&src[off..off + len]);
            off += len;
        }
    }
    outs
}

fn unit_normalize_forward<T: Real>(name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.channels() != 2 {
        return Err(shape_err(
            name,
            format!("unit_normalize needs 2 channels, got {}", x.channels()),
        ));
    }
    let eps = T::of(NORM_EPS);
    let mut out = Tensor::zeros(x.shape());
    let p = x.plane();
    for s in 0..x.batch() {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..p {
            let (a, b) = (src[i], src[p + i]);
            let norm = (a * a + b * b).sqrt() + eps;
            dst[i] = a / norm;
            dst[p + i] = b / norm;
        }
    }
    Ok(out)
}

fn unit_normalize_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let eps = T::of(NORM_EPS);
    let mut gx = Tensor::zeros(x.shape());
    let p = x.plane();
    for s in 0..x.batch() {
        let src = x.sample(s);
        let gs = g.sample(s);
        let dst = gx.sample_mut(s);
        for i in 0..p {
            let (a, b) = (src[i], src[p + i]);
            let (ga, gb) = (gs[i], gs[p + i]);
            let r = (a * a + b * b).sqrt();
            let n = r + eps;
            let mut da = ga / n;
            let mut db = gb / n;
            if r > T::zero() {
                let k = (ga * a + gb * b) / (n * n * r);
                da -= a * k;
                db -= b * k;
            }
            dst[i] = da;
            dst[p + i] = db;
        }
    }
    gx
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, k, _, _] = x.shape();
    let p = x.plane();
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..p {
            let mut m = src[i];
            for c in 1..k {
                m = m.max(src[c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[c * p + i] - m).exp();
                dst[c * p + i] = e;
                z += e;
            }
            for c in 0..k {
                dst[c * p + i] = dst[c * p + i] / z;
            }
        }
    }
    out
}

fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [n, k, _, _] = y.shape();
    let p = y.plane();
    let mut gx = Tensor::zeros(y.shape());
    for s in 0..n {
        let ys = y.sample(s);
        let gs = g.sample(s);
        let dst = gx.sample_mut(s);
        for i in 0..p {
            let mut dotp = T::zero();
            for c in 0..k {
                dotp += ys[c * p + i] * gs[c * p + i];
            }
            for c in 0..k {
                dst[c * p + i] = ys[c * p + i] * (gs[c * p + i] - dotp);
            }
        }
    }
    gx
}
