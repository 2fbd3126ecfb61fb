//! Reverse-mode tape over [`Tensor`] values.
//!
//! Operations are recorded append-only; values are computed eagerly at node
//! creation, so evaluating a graph is just building it. `backward` walks the
//! tape once in reverse. Graphs are single-threaded by construction; am
//! individual op may use data-parallel kernels internally.

use std::collections::{BTreeMap, HashMap};

use super::ops;
use super::params::ParamSet;
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp01(NodeId),
    Square(NodeId),
    Abs(NodeId),
    ReduceMean(NodeId),
    ReduceSum(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Upsample2x(NodeId),
    Warp {
        image: NodeId,
        flow: NodeId,
    },
    ConcatChannels(Vec<NodeId>),
    RoundSte(NodeId),
    RateBits {
        latent: NodeId,
        mu: NodeId,
        raw_s: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter name. Parameters not reachable from the loss
/// carry zero tensors.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    /// Keep only entries whose name satisfies `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.grads.retain(|name, _| keep(name));
    }

    /// First parameter containing a non-finite gradient value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.grads
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.grads.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Element-wise `self += other * weight`; shapes must already agree.
    pub fn accumulate(&mut self, other: &GradMap, weight: f64) {
        for (name, src) in other.iter() {
            match self.grads.get_mut(name) {
                Some(dst) => {
                    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                        *d += s * weight;
                    }
                }
                None => {
                    let mut t = src.clone();
                    for v in t.data_mut() {
                        *v *= weight;
                    }
                    self.grads.insert(name.clone(), t);
                }
            }
        }
    }
}

/// Map from parameter name to its node in a graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    nodes: HashMap<String, NodeId>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> Result<NodeId, AutodiffError> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam { name: name.into() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_names: HashMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, AutodiffError> {
        if self.param_names.contains_key(name) {
            return Err(AutodiffError::DuplicateParam { name: name.into() });
        }
        let id = self.push(Op::Param, value);
        self.params.push((name.to_string(), id));
        self.param_names.insert(name.to_string(), self.params.len() - 1);
        Ok(id)
    }

    /// Bind every entry of a [`ParamSet`] as a trainable leaf.
    pub fn bind(&mut self, set: &ParamSet) -> Result<BoundParams, AutodiffError> {
        let mut nodes = HashMap::with_capacity(set.len());
        for (name, entry) in set.iter() {
            let id = self.param(name, entry.tensor.clone())?;
            nodes.insert(name.clone(), id);
        }
        Ok(BoundParams { nodes })
    }

    /// Bind every entry of a [`ParamSet`] as a constant (no gradient output).
    pub fn bind_frozen(&mut self, set: &ParamSet) -> BoundParams {
        let mut nodes = HashMap::with_capacity(set.len());
        for (name, entry) in set.iter() {
            let id = self.input(entry.tensor.clone());
            nodes.insert(name.clone(), id);
        }
        BoundParams { nodes }
    }

    fn binary_shapes(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || ta.is_scalar() || tb.is_scalar() {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            })
        }
    }

    fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(a.shape(), data).expect("same shape")
        } else if a.is_scalar() {
            let x = a.scalar_value();
            b.map(|y| f(x, y))
        } else {
            let y = b.scalar_value();
            a.map(|x| f(x, y))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_shapes("add", a, b)?;
        let v = Self::zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_shapes("sub", a, b)?;
        let v = Self::zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_shapes("mul", a, b)?;
        let v = Self::zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scalar_mul(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| k * x);
        self.push(Op::ScalarMul(a, k), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn clamp01(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(0.0, 1.0));
        self.push(Op::Clamp01(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::Precondition {
                op: "reduce_mean",
                detail: "empty tensor".into(),
            });
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        Ok(self.push(Op::ReduceMean(a), v))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::Precondition {
                op: "reduce_sum",
                detail: "empty tensor".into(),
            });
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>());
        Ok(self.push(Op::ReduceSum(a), v))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        self.reduce_mean(sq)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, AutodiffError> {
        let v = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            v,
        ))
    }

    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = ops::upsample2x_forward(self.value(a))?;
        Ok(self.push(Op::Upsample2x(a), v))
    }

    pub fn warp(&mut self, image: NodeId, flow: NodeId) -> Result<NodeId, AutodiffError> {
        let v = ops::warp_forward(self.value(image), self.value(flow))?;
        Ok(self.push(Op::Warp { image, flow }, v))
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if inputs.is_empty() {
            return Err(AutodiffError::Precondition {
                op: "concat_channels",
                detail: "no inputs".into(),
            });
        }
        let (n0, _, h0, w0) = self.value(inputs[0]).dims4()?;
        let mut c_total = 0;
        for &id in inputs {
            let (n, c, h, w) = self.value(id).dims4()?;
            if n != n0 || h != h0 || w != w0 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!(
                        "{:?} incompatible with leading {:?}",
                        self.value(id).shape(),
                        self.value(inputs[0]).shape()
                    ),
                });
            }
            c_total += c;
        }
        let plane = h0 * w0;
        let mut out = Tensor::zeros(&[n0, c_total, h0, w0]);
        let mut offset_c = 0;
        for &id in inputs {
            let t = self.value(id);
            let (_, c, _, _) = t.dims4()?;
            for ni in 0..n0 {
                let src = &t.data()[ni * c * plane..(ni + 1) * c * plane];
                let dst_base = (ni * c_total + offset_c) * plane;
                out.data_mut()[dst_base..dst_base + c * plane].copy_from_slice(src);
            }
            offset_c += c;
        }
        Ok(self.push(Op::ConcatChannels(inputs.to_vec()), out))
    }

    /// Round half away from zero and clamp to `[-bound, bound]`; the gradient
    /// passes straight through.
    pub fn round_ste(&mut self, input: NodeId, bound: f64) -> NodeId {
        let v = self.value(input).map(|x| x.round().clamp(-bound, bound));
        self.push(Op::RoundSte(input), v)
    }

    /// Code-length estimate in bits under the per-channel logistic model.
    pub fn rate_bits(
        &mut self,
        latent: NodeId,
        mu: NodeId,
        raw_s: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let bits =
            ops::rate_bits_forward(self.value(latent), self.value(mu), self.value(raw_s))?;
        Ok(self.push(Op::RateBits { latent, mu, raw_s }, Tensor::scalar(bits)))
    }

    /// Reverse pass from a scalar loss. Returns per-parameter gradients; every
    /// bound parameter appears, with zeros when unreachable from the loss.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, AutodiffError> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out = GradMap::default();
        for (name, id) in &self.params {
            let grad = match &node_grads[id.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.value(*id).shape()),
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    /// Reverse pass exposing per-node gradients (`None` = not reachable).
    pub fn backward_nodes(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>, AutodiffError> {
        let loss_t = self.value(loss);
        if !loss_t.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
            match slot {
                Some(t) => {
                    for (d, s) in t.data_mut().iter_mut().zip(delta.data()) {
                        *d += s;
                    }
                }
                None => *slot = Some(delta),
            }
        }

        /// Gradient flowing to `side` from an elementwise binary op where the
        /// other operand may be broadcast from a scalar.
        fn reduce_for(side: &Tensor, g: &Tensor) -> Tensor {
            if side.is_scalar() && !g.is_scalar() {
                Tensor::scalar(g.data().iter().sum())
            } else {
                g.clone()
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Input | Op::Param { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut grads[a.0], reduce_for(self.value(*a), &g));
                    accum(&mut grads[b.0], reduce_for(self.value(*b), &g));
                }
                Op::Sub(a, b) => {
                    accum(&mut grads[a.0], reduce_for(self.value(*a), &g));
                    let mut neg = g.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    accum(&mut grads[b.0], reduce_for(self.value(*b), &neg));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = Self::zip_broadcast(&g, tb, |gv, bv| gv * bv);
                    accum(&mut grads[a.0], reduce_for(ta, &ga));
                    let gb = Self::zip_broadcast(&g, ta, |gv, av| gv * av);
                    accum(&mut grads[b.0], reduce_for(tb, &gb));
                }
                Op::ScalarMul(a, k) => {
                    accum(&mut grads[a.0], g.map(|v| v * k));
                }
                Op::Relu(a) => {
                    let mask = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    accum(
                        &mut grads[a.0],
                        Tensor::from_vec(mask.shape(), data).expect("shape"),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let src = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(src.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { slope * gv })
                        .collect();
                    accum(
                        &mut grads[a.0],
                        Tensor::from_vec(src.shape(), data).expect("shape"),
                    );
                }
                Op::Clamp01(a) => {
                    let src = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(src.data())
                        .map(|(&gv, &x)| if x > 0.0 && x < 1.0 { gv } else { 0.0 })
                        .collect();
                    accum(
                        &mut grads[a.0],
                        Tensor::from_vec(src.shape(), data).expect("shape"),
                    );
                }
                Op::Square(a) => {
                    let src = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(src.data())
                        .map(|(&gv, &x)| 2.0 * x * gv)
                        .collect();
                    accum(
                        &mut grads[a.0],
                        Tensor::from_vec(src.shape(), data).expect("shape"),
                    );
                }
                Op::Abs(a) => {
                    let src = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(src.data())
                        .map(|(&gv, &x)| {
                            if x > 0.0 {
                                gv
                            } else if x < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accum(
                        &mut grads[a.0],
                        Tensor::from_vec(src.shape(), data).expect("shape"),
                    );
                }
                Op::ReduceMean(a) => {
                    let src = self.value(*a);
                    let gv = g.scalar_value() / src.len() as f64;
                    accum(&mut grads[a.0], Tensor::full(src.shape(), gv));
                }
                Op::ReduceSum(a) => {
                    let src = self.value(*a);
                    accum(&mut grads[a.0], Tensor::full(src.shape(), g.scalar_value()));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gi, gw, gb) = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                    );
                    accum(&mut grads[input.0], gi);
                    accum(&mut grads[weight.0], gw);
                    accum(&mut grads[bias.0], gb);
                }
                Op::Upsample2x(a) => {
                    accum(&mut grads[a.0], ops::upsample2x_backward(&g));
                }
                Op::Warp { image, flow } => {
                    let (gi, gf) = ops::warp_backward(self.value(*image), self.value(*flow), &g);
                    accum(&mut grads[image.0], gi);
                    accum(&mut grads[flow.0], gf);
                }
                Op::ConcatChannels(inputs) => {
                    let (n, c_total, h, w) = self.nodes[idx].value.dims4()?;
                    let plane = h * w;
                    let mut offset_c = 0;
                    for &src_id in inputs {
                        let (_, c, _, _) = self.value(src_id).dims4()?;
                        let mut part = Tensor::zeros(&[n, c, h, w]);
                        for ni in 0..n {
                            let src_base = (ni * c_total + offset_c) * plane;
                            let dst_base = ni * c * plane;
                            part.data_mut()[dst_base..dst_base + c * plane]
                                .copy_from_slice(&g.data()[src_base..src_base + c * plane]);
                        }
                        accum(&mut grads[src_id.0], part);
                        offset_c += c;
                    }
                }
                Op::RoundSte(input) => {
                    accum(&mut grads[input.0], g.clone());
                }
                Op::RateBits { latent, mu, raw_s } => {
                    let (gl, gm, gs) = ops::rate_bits_backward(
                        self.value(*latent),
                        self.value(*mu),
                        self.value(*raw_s),
                        g.scalar_value(),
                    );
                    accum(&mut grads[latent.0], gl);
                    accum(&mut grads[mu.0], gm);
                    accum(&mut grads[raw_s.0], gs);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_trivial_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let l = g.leaky_relu(x, 0.1);
        assert_eq!(g.value(l).data(), &[-0.2, 0.0, 3.0]);
        let c_in = g.input(Tensor::from_vec(&[2], vec![1.7, 0.5]).unwrap());
        let c = g.clamp01(c_in);
        assert_eq!(g.value(c).data(), &[1.0, 0.5]);
    }

    #[test]
    fn clamp_gradient_zero_when_clamped() {
        let mut g = Graph::new();
        let x = g
            .param("x", Tensor::from_vec(&[2], vec![1.7, 0.5]).unwrap())
            .unwrap();
        let c = g.clamp01(x);
        let loss = g.reduce_sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mean_and_sum_gradients() {
        let mut g = Graph::new();
        let x = g
            .param("x", Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let m = g.reduce_mean(x).unwrap();
        assert_eq!(g.value(m).scalar_value(), 2.5);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.25; 4]);

        let mut g2 = Graph::new();
        let x = g2.param("x", Tensor::full(&[8], 1.5)).unwrap();
        let s = g2.reduce_sum(x).unwrap();
        let grads = g2.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0; 8]);

        let mut g3 = Graph::new();
        let x = g3.param("x", Tensor::full(&[8], 0.3)).unwrap();
        let m = g3.reduce_mean(x).unwrap();
        let grads = g3.backward(m).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.125; 8]);
    }

    #[test]
    fn reduce_rejects_empty() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[0]));
        assert!(g.reduce_mean(x).is_err());
        assert!(g.reduce_sum(x).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = sum(w * x) with x fixed => grad(w) = x
        let mut g = Graph::new();
        let x_t = Tensor::from_vec(&[3], vec![2.0, -1.0, 0.5]).unwrap();
        let x = g.input(x_t.clone());
        let w = g.param("w", Tensor::full(&[3], 0.7)).unwrap();
        let prod = g.mul(w, x).unwrap();
        let loss = g.reduce_sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), x_t.data());
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let _unused = g.param("unused", Tensor::full(&[2, 2], 1.0)).unwrap();
        let w = g.param("w", Tensor::scalar(3.0)).unwrap();
        let sq = g.square(w);
        let loss = g.reduce_sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::full(&[3], 1.0)).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss { .. }));
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let mut g = Graph::new();
        let t = g
            .param("t", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let s = g.param("s", Tensor::scalar(2.0)).unwrap();
        let prod = g.mul(t, s).unwrap();
        assert_eq!(g.value(prod).data(), &[2.0, 4.0, 6.0]);
        let loss = g.reduce_sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("t").unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get("s").unwrap().data(), &[6.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full(&[3], 1.0));
        let b = g.input(Tensor::full(&[4], 1.0));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input(
            Tensor::from_vec(&[1, 2, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap(),
        );
        let w = g
            .param(
                "w",
                Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| rng.gen_range(-0.5..0.5)).collect())
                    .unwrap(),
            )
            .unwrap();
        let b = g.param("b", Tensor::zeros(&[3])).unwrap();
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let a = g.leaky_relu(y, 0.1);
        let loss = g.reduce_mean(a).unwrap();
        let g1 = g.backward(loss).unwrap();
        let g2 = g.backward(loss).unwrap();
        for (name, t) in g1.iter() {
            assert_eq!(t, g2.get(name).unwrap());
        }
    }

    #[test]
    fn concat_splits_gradient_by_channel() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let b = g.param("b", Tensor::full(&[1, 2, 2, 2], 2.0)).unwrap();
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[1, 3, 2, 2]);
        let doubled = g.scalar_mul(cat, 3.0);
        let loss = g.reduce_sum(doubled).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[3.0; 4]);
        assert_eq!(grads.get("b").unwrap().data(), &[3.0; 8]);
    }

    #[test]
    fn round_ste_values_and_straight_through_gradient() {
        let mut g = Graph::new();
        let x = g
            .param("x", Tensor::from_vec(&[4], vec![1.5, -1.5, 0.4, 80.0]).unwrap())
            .unwrap();
        let r = g.round_ste(x, 64.0);
        assert_eq!(g.value(r).data(), &[2.0, -2.0, 0.0, 64.0]);
        let loss = g.reduce_sum(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn graph_reevaluation_is_bit_identical() {
        use rand::{Rng, SeedableRng};
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::new();
            let x = g.input(
                Tensor::from_vec(&[1, 1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap(),
            );
            let f = g.input(
                Tensor::from_vec(
                    &[1, 2, 8, 8],
                    (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
            );
            let wv = g.warp(x, f).unwrap();
            let s = g.square(wv);
            let loss = g.reduce_mean(s).unwrap();
            g.value(loss).scalar_value()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
