//! Parametric image-to-image maps: the two generators and two discriminators,
//! plus any toy topology, behind one differentiable contract.
//!
//! A map is a topology descriptor (a list of [`Layer`]s) and a flat parameter
//! vector. Forward passes can record a [`Tape`] which the backward pass
//! consumes to produce exact parameter and input gradients.

mod layers;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub use layers::{Layer, Shape, Tensor};
use layers::{backward_layers, forward_layers, Cache};

/// Clinical-CT patch edge in pixels.
pub const LR_PATCH: usize = 32;
/// Micro-CT patch edge in pixels.
pub const HR_PATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl Topology {
    /// Validates the layer chain; maps consume and emit single-channel grids.
    pub fn new(name: impl Into<String>, input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let t = Topology {
            name: name.into(),
            input,
            layers,
        };
        let out = t.output_shape()?;
        if input.channels != 1 || out.channels != 1 {
            return Err(Error::InvalidParameter(format!(
                "maps are single-channel, got {input} -> {out}"
            )));
        }
        Ok(t)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn output_shape(&self) -> Result<Shape> {
        self.layers
            .iter()
            .try_fold(self.input, |s, layer| layer.output_shape(s))
    }

    /// `(fan_in, weight_count, bias_count)` of every conv, in parameter order.
    fn conv_blocks(layers: &[Layer], out: &mut Vec<(usize, usize, usize)>) {
        for l in layers {
            match *l {
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    out.push((fan_in, fan_in * out_channels, out_channels));
                }
                Layer::Residual { ref body } | Layer::UpsampleResidual { ref body, .. } => {
                    Topology::conv_blocks(body, out)
                }
                _ => {}
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub norm: Norm,
    pub seed: u64,
    /// G1 only: add the nearest-upsampled input to the network output, so
    /// the network learns a residual on top of nearest-neighbour upsampling.
    pub nearest_skip: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            base_channels: 32,
            n_res_blocks: 4,
            norm: Norm::Instance,
            seed: 0,
            nearest_skip: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidParameter("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    fn norm_layer(&self, out: &mut Vec<Layer>) {
        if self.norm == Norm::Instance {
            out.push(Layer::InstanceNorm);
        }
    }

    /// Generator widths at 32, 64, 128 and 256 pixels.
    fn widths(&self) -> [usize; 4] {
        let c = self.base_channels;
        let floor = c.min(2);
        [c, (c / 2).max(floor), (c / 4).max(floor), (c / 8).max(floor)]
    }

    fn res_blocks(&self, ch: usize, out: &mut Vec<Layer>) {
        for _ in 0..self.n_res_blocks {
            let mut body = vec![Layer::conv(ch, ch, 3, 1, 1)];
            self.norm_layer(&mut body);
            body.push(Layer::Relu);
            body.push(Layer::conv(ch, ch, 3, 1, 1));
            self.norm_layer(&mut body);
            out.push(Layer::Residual { body });
        }
    }
}

/// G1: 1x32x32 -> 1x256x256 through three nearest-x2 + conv stages.
pub fn g1_topology(spec: &ModelSpec) -> Result<Topology> {
    spec.validate()?;
    let w = spec.widths();
    let mut l = vec![Layer::conv(1, w[0], 3, 1, 1)];
    spec.norm_layer(&mut l);
    l.push(Layer::Relu);
    spec.res_blocks(w[0], &mut l);
    for stage in 0..3 {
        l.push(Layer::UpsampleNearest { factor: 2 });
        l.push(Layer::conv(w[stage], w[stage + 1], 3, 1, 1));
        spec.norm_layer(&mut l);
        l.push(Layer::Relu);
    }
    l.push(Layer::conv(w[3], 1, 3, 1, 1));
    l.push(Layer::Tanh);
    if spec.nearest_skip {
        l = vec![Layer::UpsampleResidual { factor: 8, body: l }];
    }
    Topology::new("g1", Shape::new(1, LR_PATCH, LR_PATCH), l)
}

/// G2: 1x256x256 -> 1x32x32 through three stride-2 conv stages.
pub fn g2_topology(spec: &ModelSpec) -> Result<Topology> {
    spec.validate()?;
    let w = spec.widths();
    let mut l = vec![Layer::conv(1, w[3], 3, 1, 1)];
    spec.norm_layer(&mut l);
    l.push(Layer::Relu);
    for stage in (0..3).rev() {
        l.push(Layer::conv(w[stage + 1], w[stage], 3, 2, 1));
        spec.norm_layer(&mut l);
        l.push(Layer::Relu);
    }
    spec.res_blocks(w[0], &mut l);
    l.push(Layer::conv(w[0], 1, 3, 1, 1));
    l.push(Layer::Tanh);
    Topology::new("g2", Shape::new(1, HR_PATCH, HR_PATCH), l)
}

const LEAK: f64 = 0.2;

/// D1: patch-response discriminator on 1x256x256, emits 1x30x30.
pub fn d1_topology(spec: &ModelSpec) -> Result<Topology> {
    spec.validate()?;
    let c = spec.base_channels;
    let mut l = vec![
        Layer::conv(1, c, 4, 2, 1),
        Layer::LeakyRelu { slope: LEAK },
    ];
    for (cin, cout, stride) in [(c, 2 * c, 2), (2 * c, 4 * c, 2), (4 * c, 8 * c, 1)] {
        l.push(Layer::conv(cin, cout, 4, stride, 1));
        spec.norm_layer(&mut l);
        l.push(Layer::LeakyRelu { slope: LEAK });
    }
    l.push(Layer::conv(8 * c, 1, 4, 1, 1));
    Topology::new("d1", Shape::new(1, HR_PATCH, HR_PATCH), l)
}

/// D2: shallow discriminator on 1x32x32, emits 1x2x2.
pub fn d2_topology(spec: &ModelSpec) -> Result<Topology> {
    spec.validate()?;
    let c = spec.base_channels;
    let mut l = vec![
        Layer::conv(1, c, 4, 2, 1),
        Layer::LeakyRelu { slope: LEAK },
    ];
    for (cin, cout) in [(c, 2 * c), (2 * c, 4 * c)] {
        l.push(Layer::conv(cin, cout, 4, 2, 1));
        spec.norm_layer(&mut l);
        l.push(Layer::LeakyRelu { slope: LEAK });
    }
    l.push(Layer::conv(4 * c, 1, 3, 1, 0));
    Topology::new("d2", Shape::new(1, LR_PATCH, LR_PATCH), l)
}

pub fn build_g1(spec: &ModelSpec) -> Result<DifferentiableMap> {
    DifferentiableMap::init(g1_topology(spec)?, spec.seed)
}

pub fn build_g2(spec: &ModelSpec) -> Result<DifferentiableMap> {
    DifferentiableMap::init(g2_topology(spec)?, spec.seed)
}

pub fn build_d1(spec: &ModelSpec) -> Result<DifferentiableMap> {
    DifferentiableMap::init(d1_topology(spec)?, spec.seed)
}

pub fn build_d2(spec: &ModelSpec) -> Result<DifferentiableMap> {
    DifferentiableMap::init(d2_topology(spec)?, spec.seed)
}

/// Forward record for one sample.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiableMap {
    topology: Topology,
    output_shape: Shape,
    params: Vec<f64>,
    seed: u64,
}

impl DifferentiableMap {
    pub fn new(topology: Topology, params: Vec<f64>, seed: u64) -> Result<Self> {
        let output_shape = topology.output_shape()?;
        if params.len() != topology.param_count() {
            return Err(Error::InvalidParameter(format!(
                "topology `{}` needs {} parameters, got {}",
                topology.name,
                topology.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("map parameters".into()));
        }
        Ok(DifferentiableMap {
            topology,
            output_shape,
            params,
            seed,
        })
    }

    /// He-normal weights, zero biases, drawn from `seed`.
    pub fn init(topology: Topology, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        Topology::conv_blocks(&topology.layers, &mut blocks);
        let mut params = Vec::with_capacity(topology.param_count());
        for (fan_in, nw, nb) in blocks {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            params.extend((0..nw).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(nb));
        }
        DifferentiableMap::new(topology, params, seed)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn input_shape(&self) -> Shape {
        self.topology.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn to_tensor(&self, x: &Grid2D) -> Result<Tensor> {
        let s = self.topology.input;
        if x.dims() != (s.height, s.width) {
            return Err(Error::DimensionMismatch(format!(
                "`{}` expects {}x{} input, got {}x{}",
                self.topology.name,
                s.height,
                s.width,
                x.height(),
                x.width()
            )));
        }
        Ok(Tensor {
            shape: s,
            data: x.values().to_vec(),
        })
    }

    fn to_grid(&self, t: Tensor) -> Result<Grid2D> {
        Grid2D::new(t.shape.height, t.shape.width, t.data).map_err(|e| match e {
            Error::NonFinite(_) => {
                Error::NonFinite(format!("output of `{}`", self.topology.name))
            }
            other => other,
        })
    }

    pub fn forward_one(&self, x: &Grid2D) -> Result<Grid2D> {
        let t = forward_layers(&self.topology.layers, &self.params, self.to_tensor(x)?, None)?;
        self.to_grid(t)
    }

    pub fn forward(&self, batch: &[Grid2D]) -> Result<Vec<Grid2D>> {
        batch.iter().map(|x| self.forward_one(x)).collect()
    }

    pub fn forward_tape(&self, x: &Grid2D) -> Result<(Grid2D, Tape)> {
        let mut caches = Vec::with_capacity(self.topology.layers.len());
        let t = forward_layers(
            &self.topology.layers,
            &self.params,
            self.to_tensor(x)?,
            Some(&mut caches),
        )?;
        Ok((self.to_grid(t)?, Tape { caches }))
    }

    /// Pulls `grad_out` back through the recorded pass. Parameter gradients
    /// are accumulated into `param_grad`; the input gradient is returned when
    /// `want_input` is set.
    pub fn backward(
        &self,
        tape: Tape,
        grad_out: &Grid2D,
        param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Result<Option<Grid2D>> {
        let s = self.output_shape;
        if grad_out.dims() != (s.height, s.width) {
            return Err(Error::DimensionMismatch(format!(
                "gradient {}x{} does not match output {s}",
                grad_out.height(),
                grad_out.width()
            )));
        }
        if let Some(pg) = &param_grad {
            if pg.len() != self.params.len() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter gradient buffer has {} entries, expected {}",
                    pg.len(),
                    self.params.len()
                )));
            }
        }
        let g = Tensor {
            shape: s,
            data: grad_out.values().to_vec(),
        };
        let out = backward_layers(
            &self.topology.layers,
            &self.params,
            &tape.caches,
            g,
            param_grad,
            want_input,
        );
        match out {
            Some(t) if want_input => {
                let shape = self.topology.input;
                Ok(Some(Grid2D::new(shape.height, shape.width, t.data)?))
            }
            _ => Ok(None),
        }
    }

    /// Loss value and its gradient with respect to every parameter. The
    /// closure receives the batch outputs and returns the scalar loss and
    /// its gradient with respect to each output.
    pub fn grad<F>(&self, batch: &[Grid2D], loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[Grid2D]) -> Result<(f64, Vec<Grid2D>)>,
    {
        let mut outs = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        for x in batch {
            let (y, t) = self.forward_tape(x)?;
            outs.push(y);
            tapes.push(t);
        }
        let (value, grads) = loss(&outs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss value {value}")));
        }
        if grads.len() != outs.len() {
            return Err(Error::DimensionMismatch(format!(
                "loss returned {} output gradients for {} outputs",
                grads.len(),
                outs.len()
            )));
        }
        let mut pg = vec![0.0; self.params.len()];
        for (tape, g) in tapes.into_iter().zip(&grads) {
            self.backward(tape, g, Some(&mut pg), false)?;
        }
        Ok((value, pg))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.put_str("kind", "map");
        c.put_str(
            "topology",
            &serde_json::to_string(&self.topology)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        c.put_f64s("params", &self.params);
        c.put_u64("seed", self.seed);
        Ok(c)
    }

    pub fn from_container(c: &Container, prefix: &str) -> Result<Self> {
        let topology: Topology = serde_json::from_str(c.get_str(&format!("{prefix}topology"))?)
            .map_err(|e| Error::Checkpoint(format!("topology: {e}")))?;
        let params = c.get_f64s(&format!("{prefix}params"))?;
        let seed = c.get_u64(&format!("{prefix}seed"))?;
        DifferentiableMap::new(topology, params, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        DifferentiableMap::from_container(&Container::load(path)?, "")
    }
}

/// Anything that turns a fixed-size patch into another grid.
pub trait PatchMap {
    fn input_dims(&self) -> (usize, usize);
    fn output_dims(&self) -> (usize, usize);
    fn map_patch(&self, x: &Grid2D) -> Result<Grid2D>;
}

impl PatchMap for DifferentiableMap {
    fn input_dims(&self) -> (usize, usize) {
        (self.topology.input.height, self.topology.input.width)
    }

    fn output_dims(&self) -> (usize, usize) {
        (self.output_shape.height, self.output_shape.width)
    }

    fn map_patch(&self, x: &Grid2D) -> Result<Grid2D> {
        self.forward_one(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> ModelSpec {
        ModelSpec {
            base_channels: 4,
            n_res_blocks: 1,
            norm: Norm::Instance,
            seed: 3,
            nearest_skip: false,
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid2D {
        Grid2D::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn shape_contracts() {
        let spec = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g1 = build_g1(&spec).unwrap();
        let g2 = build_g2(&spec).unwrap();
        let d1 = build_d1(&spec).unwrap();
        let d2 = build_d2(&spec).unwrap();
        assert_eq!(g1.output_shape(), Shape::new(1, 256, 256));
        assert_eq!(g2.output_shape(), Shape::new(1, 32, 32));
        assert_eq!(d1.output_shape(), Shape::new(1, 30, 30));
        assert_eq!(d2.output_shape(), Shape::new(1, 2, 2));

        let a = random_grid(&mut rng, 32, 32);
        let b = random_grid(&mut rng, 256, 256);
        let sr = g1.forward_one(&a).unwrap();
        assert_eq!(sr.dims(), (256, 256));
        let lr = g2.forward_one(&b).unwrap();
        assert_eq!(lr.dims(), (32, 32));
        let (lo, hi) = lr.min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
        assert!(d1.forward_one(&b).unwrap().values().iter().all(|v| v.is_finite()));
        assert_eq!(d2.forward_one(&a).unwrap().dims(), (2, 2));
        assert!(g1.forward_one(&b).is_err());
    }

    #[test]
    fn default_spec_shapes() {
        let spec = ModelSpec::default();
        assert_eq!(g1_topology(&spec).unwrap().output_shape().unwrap(), Shape::new(1, 256, 256));
        assert_eq!(g2_topology(&spec).unwrap().output_shape().unwrap(), Shape::new(1, 32, 32));
        assert_eq!(d1_topology(&spec).unwrap().output_shape().unwrap(), Shape::new(1, 30, 30));
    }

    #[test]
    fn batch_order_preserved_and_seeded() {
        let spec = small();
        let g1 = build_g1(&spec).unwrap();
        assert_eq!(g1.params(), build_g1(&spec).unwrap().params());
        let other = build_g1(&ModelSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(g1.params(), other.params());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<Grid2D> = (0..16).map(|_| random_grid(&mut rng, 32, 32)).collect();
        let outs = g1.forward(&batch).unwrap();
        assert_eq!(outs.len(), 16);
        for (x, y) in batch.iter().zip(&outs) {
            assert_eq!(&g1.forward_one(x).unwrap(), y);
        }
    }

    #[test]
    fn param_count_is_topology_function() {
        let t = g1_topology(&small()).unwrap();
        let m = DifferentiableMap::init(t.clone(), 0).unwrap();
        assert_eq!(m.param_count(), t.param_count());
        assert!(DifferentiableMap::new(t, vec![0.0; 3], 0).is_err());
    }

    #[test]
    fn toy_zero_and_identity_maps() {
        let t = Topology::new("toy", Shape::new(1, 5, 5), vec![Layer::conv(1, 1, 1, 1, 0)]).unwrap();
        let zero = DifferentiableMap::new(t.clone(), vec![0.0, 0.0], 0).unwrap();
        let x = Grid2D::from_fn(5, 5, |i, j| (i as f64) - (j as f64) * 0.3).unwrap();
        assert!(zero.forward_one(&x).unwrap().values().iter().all(|&v| v == 0.0));
        let id = DifferentiableMap::new(t, vec![1.0, 0.0], 0).unwrap();
        assert_eq!(id.forward_one(&x).unwrap(), x);

        let empty = Topology::new("id", Shape::new(1, 5, 5), vec![]).unwrap();
        let id = DifferentiableMap::new(empty, vec![], 0).unwrap();
        assert_eq!(id.forward_one(&x).unwrap(), x);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g2 = build_g2(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = vec![random_grid(&mut rng, 256, 256)];
        let (v, g) = g2
            .grad(&batch, |outs| {
                Ok((3.0, outs.iter().map(|o| Grid2D::zeros(o.height(), o.width()).unwrap()).collect()))
            })
            .unwrap();
        assert_eq!(v, 3.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let err = g2.grad(&batch, |outs| {
            Ok((f64::NAN, outs.to_vec()))
        });
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    fn mean_square_loss(outs: &[Grid2D], target: f64) -> (f64, Vec<Grid2D>) {
        let mut total = 0.0;
        let mut grads = Vec::new();
        for o in outs {
            let n = o.len() as f64;
            total += o.values().iter().map(|v| (v - target).powi(2)).sum::<f64>() / n;
            grads.push(o.map(|v| 2.0 * (v - target) / n).unwrap());
        }
        (total, grads)
    }

    fn check_fd(map: &DifferentiableMap, batch: &[Grid2D], target: f64, stride: usize) {
        let (_, an) = map.grad(batch, |o| Ok(mean_square_loss(o, target))).unwrap();
        let h = 1e-5;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for i in (0..map.param_count()).step_by(stride) {
            let mut m = map.clone();
            m.params_mut()[i] += h;
            let up = mean_square_loss(&m.forward(batch).unwrap(), target).0;
            m.params_mut()[i] -= 2.0 * h;
            let dn = mean_square_loss(&m.forward(batch).unwrap(), target).0;
            num.push((up - dn) / (2.0 * h));
            ana.push(an[i]);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / scale < 1e-4, "{} rel err {}", map.topology().name, diff / scale);
    }

    #[test]
    fn full_networks_match_finite_differences() {
        let spec = ModelSpec {
            base_channels: 2,
            n_res_blocks: 1,
            norm: Norm::Instance,
            seed: 11,
            nearest_skip: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = vec![random_grid(&mut rng, 32, 32)];
        let b = vec![random_grid(&mut rng, 256, 256)];
        check_fd(&build_g1(&spec).unwrap(), &a, 0.3, 7);
        check_fd(&build_d2(&spec).unwrap(), &a, 1.0, 3);
        check_fd(&build_g2(&spec).unwrap(), &b, -0.2, 11);
        check_fd(&build_d1(&spec).unwrap(), &b, 1.0, 37);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = ModelSpec {
            base_channels: 2,
            n_res_blocks: 1,
            norm: Norm::Instance,
            seed: 5,
            nearest_skip: false,
        };
        let d2 = build_d2(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_grid(&mut rng, 32, 32);
        let (y, tape) = d2.forward_tape(&x).unwrap();
        let (_, gy) = mean_square_loss(std::slice::from_ref(&y), 1.0);
        let gx = d2.backward(tape, &gy[0], None, true).unwrap().unwrap();
        let h = 1e-5;
        for q in (0..x.len()).step_by(29) {
            let mut v = x.values().to_vec();
            v[q] += h;
            let up = mean_square_loss(&[d2.forward_one(&Grid2D::new(32, 32, v.clone()).unwrap()).unwrap()], 1.0).0;
            v[q] -= 2.0 * h;
            let dn = mean_square_loss(&[d2.forward_one(&Grid2D::new(32, 32, v).unwrap()).unwrap()], 1.0).0;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gx.values()[q]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn nearest_skip_adds_upsampled_input() {
        let plain = ModelSpec {
            base_channels: 2,
            n_res_blocks: 1,
            norm: Norm::Instance,
            seed: 6,
            nearest_skip: false,
        };
        let skip = ModelSpec { nearest_skip: true, ..plain };
        let g = build_g1(&plain).unwrap();
        let gs = build_g1(&skip).unwrap();
        assert_eq!(g.params(), gs.params());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_grid(&mut rng, 32, 32);
        let want = g
            .forward_one(&x)
            .unwrap()
            .axpby(1.0, &crate::grid::nn_upsample_g(&x, crate::grid::ScaleFactor::SR), 1.0)
            .unwrap();
        assert_eq!(gs.forward_one(&x).unwrap(), want);
        check_fd(&gs, std::slice::from_ref(&x), 0.1, 5);

        let (y, tape) = gs.forward_tape(&x).unwrap();
        let (_, gy) = mean_square_loss(std::slice::from_ref(&y), 0.2);
        let gx = gs.backward(tape, &gy[0], None, true).unwrap().unwrap();
        let h = 1e-7;
        for q in (0..x.len()).step_by(41) {
            let mut v = x.values().to_vec();
            v[q] += h;
            let up = mean_square_loss(&[gs.forward_one(&Grid2D::new(32, 32, v.clone()).unwrap()).unwrap()], 0.2).0;
            v[q] -= 2.0 * h;
            let dn = mean_square_loss(&[gs.forward_one(&Grid2D::new(32, 32, v).unwrap()).unwrap()], 0.2).0;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gx.values()[q]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn grad_is_linear_in_loss() {
        let spec = ModelSpec {
            base_channels: 2,
            n_res_blocks: 0,
            norm: Norm::None,
            seed: 1,
            nearest_skip: false,
        };
        let d2 = build_d2(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = vec![random_grid(&mut rng, 32, 32), random_grid(&mut rng, 32, 32)];
        let (_, g1) = d2.grad(&batch, |o| Ok(mean_square_loss(o, 1.0))).unwrap();
        let (_, g2) = d2.grad(&batch, |o| Ok(mean_square_loss(o, 0.0))).unwrap();
        let (_, g12) = d2
            .grad(&batch, |o| {
                let (a, ga) = mean_square_loss(o, 1.0);
                let (b, gb) = mean_square_loss(o, 0.0);
                let g = ga.iter().zip(&gb).map(|(x, y)| x.axpby(1.0, y, 1.0).unwrap()).collect();
                Ok((a + b, g))
            })
            .unwrap();
        for i in 0..g12.len() {
            assert!((g12[i] - g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g1.ckpt");
        let g1 = build_g1(&small()).unwrap();
        g1.save(&path).unwrap();
        let back = DifferentiableMap::load(&path).unwrap();
        assert_eq!(back, g1);
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let g1 = build_g1(&small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_grid(&mut rng, 32, 32);
        let a = g1.forward_one(&x).unwrap();
        let b = build_g1(&small()).unwrap().forward_one(&x).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
