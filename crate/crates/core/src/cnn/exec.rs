//! Executes the convolutional part of an ONNX graph on the CPU.
//!
//! Supports the operator set a VGG16 feature extractor needs: Conv (im2col
//! plus GEMM), Relu, MaxPool, Transpose, Identity/Dropout pass-through and
//! Constant. Execution stops at the requested pooling output, so classifier
//! heads with unsupported ops never run.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView4, IxDyn};

use super::onnx::{Graph, Node, TensorData};
use super::{layer_shape, PoolingLayerId};
use crate::{Error, Result};

type Tensor = ArrayD<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InputLayout {
    Nchw,
    Nhwc,
}

pub struct GraphExecutor {
    nodes: Vec<Node>,
    constants: HashMap<String, Tensor>,
    input_name: String,
    input_layout: InputLayout,
    /// Tensor name tapped for each pooling layer, resolved at load time.
    taps: [Option<String>; 5],
    /// Producer node index for every tensor name.
    producer: HashMap<String, usize>,
}

/// Known exporter-specific names for the i-th pooling output, tried before
/// falling back to positional MaxPool lookup.
fn known_tap_names(index: u8) -> [String; 2] {
    [
        format!("block{index}_pool"),
        format!("vgg0_pool{}_fwd", index - 1),
    ]
}

impl GraphExecutor {
    pub fn new(graph: Graph) -> Result<Self> {
        let mut constants = HashMap::new();
        for init in &graph.initializers {
            constants.insert(init.name.clone(), tensor_from_data(init)?);
        }

        let producer: HashMap<String, usize> = graph
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.outputs.iter().map(move |o| (o.clone(), i)))
            .collect();

        // The real input is the declared graph input that is not a weight.
        let real_inputs: Vec<_> = graph
            .inputs
            .iter()
            .filter(|v| !constants.contains_key(&v.name))
            .collect();
        let (input_name, input_dims) = match real_inputs.as_slice() {
            [only] => (only.name.clone(), only.dims.clone()),
            [] => {
                // Some exports omit value infos; fall back to the first name
                // consumed but never produced.
                let produced: HashSet<&String> =
                    graph.nodes.iter().flat_map(|n| n.outputs.iter()).collect();
                let name = graph
                    .nodes
                    .iter()
                    .flat_map(|n| n.inputs.iter())
                    .find(|i| !produced.contains(i) && !constants.contains_key(*i))
                    .cloned()
                    .ok_or_else(|| Error::Model("cannot identify graph input".into()))?;
                (name, Vec::new())
            }
            many => {
                return Err(Error::Model(format!(
                    "expected a single graph input, found {}",
                    many.len()
                )))
            }
        };
        let input_layout = match input_dims.as_slice() {
            [_, 3, _, _] => InputLayout::Nchw,
            [_, _, _, 3] => InputLayout::Nhwc,
            _ => InputLayout::Nchw,
        };

        let taps = resolve_taps(&graph, &producer);

        Ok(GraphExecutor {
            nodes: graph.nodes,
            constants,
            input_name,
            input_layout,
            taps,
            producer,
        })
    }

    /// Runs the graph far enough to materialize the pooling output of
    /// `layer` for a single (H, W, C) input image, returning it as (h, w, c).
    pub fn pooling_output(
        &self,
        input_hwc: &Array3<f32>,
        layer: PoolingLayerId,
        tap_override: Option<&str>,
    ) -> Result<Array3<f32>> {
        let target = match tap_override {
            Some(name) => {
                if !self.producer.contains_key(name) {
                    return Err(Error::Model(format!(
                        "override tensor {name:?} does not exist in the graph"
                    )));
                }
                name.to_string()
            }
            None => self.taps[(layer.index() - 1) as usize]
                .clone()
                .ok_or_else(|| {
                    Error::Model(format!(
                        "topology mismatch: no pooling output found for {layer}"
                    ))
                })?,
        };

        let (h, w, c) = input_hwc.dim();
        let input: Tensor = match self.input_layout {
            InputLayout::Nchw => {
                let mut t = Array4::<f32>::zeros((1, c, h, w));
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            t[[0, ch, y, x]] = input_hwc[[y, x, ch]];
                        }
                    }
                }
                t.into_dyn()
            }
            InputLayout::Nhwc => input_hwc
                .clone()
                .insert_axis(ndarray::Axis(0))
                .into_dyn()
                .as_standard_layout()
                .to_owned(),
        };

        let out = self.run_to(&target, input)?;
        // Conv and MaxPool are NCHW by construction, so the tap is (1,C,H,W).
        let dims = out.shape().to_vec();
        let nchw = match dims.as_slice() {
            [1, _, _, _] => out
                .into_dimensionality::<ndarray::Ix4>()
                .expect("rank checked"),
            other => {
                return Err(Error::Model(format!(
                    "pooling output has unexpected shape {other:?}"
                )))
            }
        };
        let (_, ch, oh, ow) = nchw.dim();
        let expected = layer_shape(layer);
        if (oh, ow, ch) != expected {
            return Err(Error::Model(format!(
                "topology mismatch: {layer} produced {oh}x{ow}x{ch}, expected {:?}",
                expected
            )));
        }
        let mut hwc = Array3::<f32>::zeros((oh, ow, ch));
        for y in 0..oh {
            for x in 0..ow {
                for k in 0..ch {
                    hwc[[y, x, k]] = nchw[[0, k, y, x]];
                }
            }
        }
        Ok(hwc)
    }

    fn run_to(&self, target: &str, input: Tensor) -> Result<Tensor> {
        // Backward pass: which nodes feed the target.
        let mut needed: HashSet<usize> = HashSet::new();
        let mut stack = vec![target.to_string()];
        while let Some(name) = stack.pop() {
            if name == self.input_name || self.constants.contains_key(&name) {
                continue;
            }
            let Some(&idx) = self.producer.get(&name) else {
                return Err(Error::Model(format!("tensor {name:?} has no producer")));
            };
            if needed.insert(idx) {
                for input_name in &self.nodes[idx].inputs {
                    if !input_name.is_empty() {
                        stack.push(input_name.clone());
                    }
                }
            }
        }

        // Remaining-use counts let intermediates be dropped early.
        let mut uses: HashMap<&str, usize> = HashMap::new();
        for &idx in &needed {
            for name in &self.nodes[idx].inputs {
                *uses.entry(name.as_str()).or_insert(0) += 1;
            }
        }

        let mut values: HashMap<String, Tensor> = HashMap::new();
        values.insert(self.input_name.clone(), input);

        let mut order: Vec<usize> = needed.iter().copied().collect();
        order.sort_unstable();
        for idx in order {
            let node = &self.nodes[idx];
            let out = self.execute_node(node, &values)?;
            for (name, tensor) in node.outputs.iter().zip(out) {
                values.insert(name.clone(), tensor);
            }
            for name in &node.inputs {
                if let Some(count) = uses.get_mut(name.as_str()) {
                    *count -= 1;
                    if *count == 0 && name != target {
                        values.remove(name);
                    }
                }
            }
        }

        values
            .remove(target)
            .ok_or_else(|| Error::Model(format!("target tensor {target:?} was not produced")))
    }

    fn fetch<'a>(&'a self, values: &'a HashMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
        values
            .get(name)
            .or_else(|| self.constants.get(name))
            .ok_or_else(|| Error::Model(format!("missing tensor {name:?}")))
    }

    fn execute_node(&self, node: &Node, values: &HashMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let out = match node.op_type.as_str() {
            "Conv" => {
                let input = self.fetch(values, &node.inputs[0])?;
                let weights = self.fetch(values, &node.inputs[1])?;
                let bias = match node.inputs.get(2) {
                    Some(name) if !name.is_empty() => Some(self.fetch(values, name)?),
                    _ => None,
                };
                conv2d(node, input, weights, bias)?
            }
            "Relu" => {
                let input = self.fetch(values, &node.inputs[0])?;
                input.mapv(|v| v.max(0.0))
            }
            "MaxPool" => {
                let input = self.fetch(values, &node.inputs[0])?;
                maxpool2d(node, input)?
            }
            "Transpose" => {
                let input = self.fetch(values, &node.inputs[0])?;
                let rank = input.ndim();
                let perm: Vec<usize> = match node.attr_ints("perm") {
                    Some(ints) => ints.into_iter().map(|i| i as usize).collect(),
                    None => (0..rank).rev().collect(),
                };
                if perm.len() != rank {
                    return Err(Error::Model(format!(
                        "transpose perm {perm:?} does not match rank {rank}"
                    )));
                }
                input
                    .view()
                    .permuted_axes(IxDyn(&perm))
                    .as_standard_layout()
                    .to_owned()
            }
            "Identity" | "Dropout" => self.fetch(values, &node.inputs[0])?.clone(),
            "Constant" => {
                let tensor = node
                    .attr("value")
                    .and_then(|a| a.tensor.as_ref())
                    .ok_or_else(|| {
                        Error::Model(format!("Constant node {:?} has no tensor value", node.name))
                    })?;
                tensor_from_data(tensor)?
            }
            other => {
                return Err(Error::Model(format!(
                    "unsupported operator {other:?} (node {:?}) on the path to the tap",
                    node.name
                )))
            }
        };
        Ok(vec![out])
    }
}

/// Picks the tensor name tapped for each of the five pooling layers: first
/// a table of names known from common exporters, then the i-th MaxPool node
/// in graph order.
fn resolve_taps(graph: &Graph, producer: &HashMap<String, usize>) -> [Option<String>; 5] {
    let maxpool_outputs: Vec<String> = graph
        .nodes
        .iter()
        .filter(|n| n.op_type == "MaxPool")
        .filter_map(|n| n.outputs.first().cloned())
        .collect();

    std::array::from_fn(|i| {
        let index = (i + 1) as u8;
        for candidate in known_tap_names(index) {
            if producer.contains_key(&candidate) {
                return Some(candidate);
            }
        }
        if maxpool_outputs.len() == 5 {
            return Some(maxpool_outputs[i].clone());
        }
        None
    })
}

fn tensor_from_data(data: &TensorData) -> Result<Tensor> {
    let dims = if data.dims.is_empty() {
        vec![data.values.len()]
    } else {
        data.dims.clone()
    };
    ArrayD::from_shape_vec(IxDyn(&dims), data.values.clone())
        .map_err(|e| Error::Model(format!("bad tensor {:?}: {e}", data.name)))
}

struct Padding {
    top: usize,
    left: usize,
    bottom: usize,
    right: usize,
}

/// Resolves explicit pads / auto_pad into concrete 2-D padding.
fn resolve_padding(
    node: &Node,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    s_h: usize,
    s_w: usize,
) -> Result<Padding> {
    let auto_pad = node.attr_string("auto_pad").unwrap_or_default();
    match auto_pad.as_str() {
        "" | "NOTSET" => {
            let pads = node.attr_ints("pads").unwrap_or_else(|| vec![0, 0, 0, 0]);
            if pads.len() != 4 {
                return Err(Error::Model(format!("expected 4 pads, got {pads:?}")));
            }
            Ok(Padding {
                top: pads[0] as usize,
                left: pads[1] as usize,
                bottom: pads[2] as usize,
                right: pads[3] as usize,
            })
        }
        "VALID" => Ok(Padding {
            top: 0,
            left: 0,
            bottom: 0,
            right: 0,
        }),
        "SAME_UPPER" | "SAME_LOWER" => {
            let out_h = in_h.div_ceil(s_h);
            let out_w = in_w.div_ceil(s_w);
            let total_h = ((out_h - 1) * s_h + k_h).saturating_sub(in_h);
            let total_w = ((out_w - 1) * s_w + k_w).saturating_sub(in_w);
            let (top, left) = if auto_pad == "SAME_UPPER" {
                (total_h / 2, total_w / 2)
            } else {
                (total_h - total_h / 2, total_w - total_w / 2)
            };
            Ok(Padding {
                top,
                left,
                bottom: total_h - top,
                right: total_w - left,
            })
        }
        other => Err(Error::Model(format!("unsupported auto_pad {other:?}"))),
    }
}

fn as_nchw(t: &Tensor, what: &str) -> Result<ArrayView4<'_, f32>> {
    t.view()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::Model(format!("{what} must be rank 4, got {:?}", t.shape())))
}

/// 2-D convolution via strip-wise im2col and GEMM. Strips bound the column
/// buffer so early wide layers do not allocate hundreds of megabytes.
fn conv2d(node: &Node, input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let input = as_nchw(input, "Conv input")?;
    let weights_view = as_nchw(weights, "Conv weights")?;
    let (batch, in_c, in_h, in_w) = input.dim();
    let (out_c, w_in_c, k_h, k_w) = weights_view.dim();
    if batch != 1 {
        return Err(Error::Model("only batch size 1 is supported".into()));
    }
    if w_in_c != in_c {
        return Err(Error::Model(format!(
            "Conv channel mismatch: input {in_c}, weights expect {w_in_c}"
        )));
    }
    if node.attr_i("group").unwrap_or(1) != 1 {
        return Err(Error::Model("grouped convolutions are not supported".into()));
    }
    if let Some(d) = node.attr_ints("dilations") {
        if d.iter().any(|&v| v != 1) {
            return Err(Error::Model("dilated convolutions are not supported".into()));
        }
    }
    let strides = node.attr_ints("strides").unwrap_or_else(|| vec![1, 1]);
    let (s_h, s_w) = (strides[0] as usize, strides[1] as usize);
    let pad = resolve_padding(node, in_h, in_w, k_h, k_w, s_h, s_w)?;

    let out_h = (in_h + pad.top + pad.bottom - k_h) / s_h + 1;
    let out_w = (in_w + pad.left + pad.right - k_w) / s_w + 1;

    // Weight matrix (out_c, in_c*k_h*k_w): reshape of the contiguous layout.
    let w_mat = weights_view
        .to_shape((out_c, in_c * k_h * k_w))
        .map_err(|e| Error::Model(format!("weight reshape failed: {e}")))?
        .to_owned();

    let mut output = Array4::<f32>::zeros((1, out_c, out_h, out_w));
    // Strip height keeps the column buffer around 16 MiB for VGG16 layers.
    let strip = (4_000_000 / (in_c * k_h * k_w * out_w).max(1)).clamp(1, out_h);

    let mut col = Array2::<f32>::zeros((in_c * k_h * k_w, strip * out_w));
    let mut oy0 = 0;
    while oy0 < out_h {
        let rows = strip.min(out_h - oy0);
        let mut col_view = col.slice_mut(ndarray::s![.., ..rows * out_w]);
        col_view.fill(0.0);
        for c in 0..in_c {
            for ky in 0..k_h {
                for kx in 0..k_w {
                    let row = (c * k_h + ky) * k_w + kx;
                    for dy in 0..rows {
                        let oy = oy0 + dy;
                        let iy = (oy * s_h + ky) as isize - pad.top as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        if s_w == 1 {
                            // Contiguous stretch of valid ox values.
                            let ox_start = pad.left.saturating_sub(kx);
                            let ox_end =
                                (in_w + pad.left).saturating_sub(kx).min(out_w);
                            if ox_start >= ox_end {
                                continue;
                            }
                            let ix_start = ox_start + kx - pad.left;
                            for (off, ox) in (ox_start..ox_end).enumerate() {
                                col_view[[row, dy * out_w + ox]] =
                                    input[[0, c, iy, ix_start + off]];
                            }
                        } else {
                            for ox in 0..out_w {
                                let ix = (ox * s_w + kx) as isize - pad.left as isize;
                                if ix >= 0 && ix < in_w as isize {
                                    col_view[[row, dy * out_w + ox]] =
                                        input[[0, c, iy, ix as usize]];
                                }
                            }
                        }
                    }
                }
            }
        }
        let product = w_mat.dot(&col.slice(ndarray::s![.., ..rows * out_w]));
        for m in 0..out_c {
            for dy in 0..rows {
                for ox in 0..out_w {
                    output[[0, m, oy0 + dy, ox]] = product[[m, dy * out_w + ox]];
                }
            }
        }
        oy0 += rows;
    }

    if let Some(bias) = bias {
        let bias: Vec<f32> = bias.iter().copied().collect();
        if bias.len() != out_c {
            return Err(Error::Model(format!(
                "bias length {} does not match {out_c} output channels",
                bias.len()
            )));
        }
        for m in 0..out_c {
            output
                .slice_mut(ndarray::s![0, m, .., ..])
                .mapv_inplace(|v| v + bias[m]);
        }
    }
    Ok(output.into_dyn())
}

fn maxpool2d(node: &Node, input: &Tensor) -> Result<Tensor> {
    let input = as_nchw(input, "MaxPool input")?;
    let (batch, channels, in_h, in_w) = input.dim();
    if batch != 1 {
        return Err(Error::Model("only batch size 1 is supported".into()));
    }
    let kernel = node
        .attr_ints("kernel_shape")
        .ok_or_else(|| Error::Model("MaxPool without kernel_shape".into()))?;
    let (k_h, k_w) = (kernel[0] as usize, kernel[1] as usize);
    let strides = node
        .attr_ints("strides")
        .unwrap_or_else(|| vec![k_h as i64, k_w as i64]);
    let (s_h, s_w) = (strides[0] as usize, strides[1] as usize);
    let pad = resolve_padding(node, in_h, in_w, k_h, k_w, s_h, s_w)?;

    let out_h = (in_h + pad.top + pad.bottom - k_h) / s_h + 1;
    let out_w = (in_w + pad.left + pad.right - k_w) / s_w + 1;
    let mut output = Array4::<f32>::zeros((1, channels, out_h, out_w));
    for c in 0..channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..k_h {
                    let iy = (oy * s_h + ky) as isize - pad.top as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for kx in 0..k_w {
                        let ix = (ox * s_w + kx) as isize - pad.left as isize;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        best = best.max(input[[0, c, iy as usize, ix as usize]]);
                    }
                }
                output[[0, c, oy, ox]] = best;
            }
        }
    }
    Ok(output.into_dyn())
}
