//! Fully connected blocks: layer specs, seeded initialization, forward pass.
//!
//! Layer size lists include the input width as their first entry, so
//! `{20, 16, 12}` is a map from 20 inputs through a 16-wide hidden layer to a
//! 12-wide output. Networks come in three flavours: a trunk whose output stays
//! activated (the shared encoder), a single linear output head (point
//! regressors), and a dual head producing a mean and a log-variance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Param, Tensor};
use crate::error::{Error, Result};

/// Log-variance heads are clamped to this symmetric range before use.
pub const LOGVAR_CLAMP: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Output arrangement of an [`MlpSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// No linear head: every layer is activated and the last activated layer
    /// is the output (feature trunk).
    None,
    /// One linear output head.
    Single,
    /// Two linear output heads of identical width: mean and log-variance.
    Dual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub heads: HeadKind,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, activation: Activation, heads: HeadKind) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Invalid(format!(
                "layer sizes need at least two entries, got {:?}",
                sizes
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer sizes must be positive, got {:?}",
                sizes
            )));
        }
        Ok(MlpSpec {
            sizes,
            activation,
            heads,
        })
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

/// One affine layer: weight is `in x out`, bias is `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Param,
    pub bias: Param,
}

/// A spec plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    trunk: Vec<Layer>,
    head_mean: Option<Layer>,
    head_logvar: Option<Layer>,
}

/// Glorot-uniform weights, zero biases, bit-identical for identical seeds.
pub fn init_mlp(spec: &MlpSpec, seed: u64, name_prefix: &str) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |fan_in: usize, fan_out: usize, name: String| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
            .collect();
        Layer {
            weight: Param::new(format!("{name}.w"), vec![fan_in, fan_out], values),
            bias: Param::zeros(format!("{name}.b"), vec![fan_out]),
        }
    };

    let sizes = &spec.sizes;
    let n_pairs = sizes.len() - 1;
    let trunk_pairs = match spec.heads {
        HeadKind::None => n_pairs,
        _ => n_pairs - 1,
    };
    let trunk: Vec<Layer> = (0..trunk_pairs)
        .map(|i| layer(sizes[i], sizes[i + 1], format!("{name_prefix}.t{i}")))
        .collect();
    let (head_mean, head_logvar) = match spec.heads {
        HeadKind::None => (None, None),
        HeadKind::Single => (
            Some(layer(sizes[n_pairs - 1], sizes[n_pairs], format!("{name_prefix}.mean"))),
            None,
        ),
        HeadKind::Dual => (
            Some(layer(sizes[n_pairs - 1], sizes[n_pairs], format!("{name_prefix}.mean"))),
            Some(layer(sizes[n_pairs - 1], sizes[n_pairs], format!("{name_prefix}.logvar"))),
        ),
    };
    Mlp {
        spec: spec.clone(),
        trunk,
        head_mean,
        head_logvar,
    }
}

impl Mlp {
    /// Parameters in a fixed order: trunk layers front to back, then mean
    /// head, then log-variance head; weight before bias.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for l in self.head_mean.iter().chain(self.head_logvar.iter()) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in self.head_mean.iter_mut().chain(self.head_logvar.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Copy parameters onto `g` as leaves, appending the leaf tensors to
    /// `registry` in [`Mlp::params`] order.
    pub fn bind(&self, g: &mut Graph, registry: &mut Vec<Tensor>) -> Result<BoundMlp> {
        let start = registry.len();
        for p in self.params() {
            registry.push(g.leaf_param(p)?);
        }
        let mut cursor = start;
        Ok(self.rebind(registry, &mut cursor))
    }

    /// Assemble a bound view from pre-existing leaf tensors laid out in
    /// [`Mlp::params`] order, starting at `*cursor`. Advances the cursor.
    pub fn rebind(&self, leaves: &[Tensor], cursor: &mut usize) -> BoundMlp {
        let mut next = || {
            let pair = (leaves[*cursor], leaves[*cursor + 1]);
            *cursor += 2;
            pair
        };
        let trunk: Vec<(Tensor, Tensor)> = (0..self.trunk.len()).map(|_| next()).collect();
        let head_mean = self.head_mean.as_ref().map(|_| next());
        let head_logvar = self.head_logvar.as_ref().map(|_| next());
        BoundMlp {
            trunk,
            head_mean,
            head_logvar,
        }
    }
}

/// Leaf tensors for one [`Mlp`] on a specific graph.
pub struct BoundMlp {
    trunk: Vec<(Tensor, Tensor)>,
    head_mean: Option<(Tensor, Tensor)>,
    head_logvar: Option<(Tensor, Tensor)>,
}

/// Forward pass. Returns the output (trunk features or mean head) and, for
/// dual-head specs, the log-variance head clamped to `[-7, 7]`.
///
/// With `detach_params` the weights enter through stop-gradient nodes: the
/// pass contributes nothing to the network's own parameters while gradients
/// still flow through to `x`.
pub fn mlp_forward(
    g: &mut Graph,
    mlp: &Mlp,
    bound: &BoundMlp,
    x: Tensor,
    detach_params: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let shape = g.shape(x).to_vec();
    let width = match shape.as_slice() {
        [_, c] => *c,
        _ => {
            return Err(Error::shape(
                "mlp_forward",
                format!("input must be a 2-D batch, got {:?}", shape),
            ))
        }
    };
    if width != mlp.spec.input_width() {
        return Err(Error::shape(
            "mlp_forward",
            format!(
                "input width mismatch: expected {}, actual {}",
                mlp.spec.input_width(),
                width
            ),
        ));
    }

    let use_wb = |g: &mut Graph, (w, b): (Tensor, Tensor)| -> (Tensor, Tensor) {
        if detach_params {
            (g.stop_grad(w), g.stop_grad(b))
        } else {
            (w, b)
        }
    };

    let mut h = x;
    for wb in &bound.trunk {
        let (w, b) = use_wb(g, *wb);
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        h = mlp.spec.activation.apply(g, z)?;
    }

    match mlp.spec.heads {
        HeadKind::None => Ok((h, None)),
        HeadKind::Single => {
            let (w, b) = use_wb(g, bound.head_mean.expect("single head bound"));
            let z = g.matmul(h, w)?;
            let mean = g.add(z, b)?;
            Ok((mean, None))
        }
        HeadKind::Dual => {
            let (wm, bm) = use_wb(g, bound.head_mean.expect("dual head bound"));
            let zm = g.matmul(h, wm)?;
            let mean = g.add(zm, bm)?;
            let (wv, bv) = use_wb(g, bound.head_logvar.expect("dual head bound"));
            let zv = g.matmul(h, wv)?;
            let logvar_raw = g.add(zv, bv)?;
            let logvar = g.clamp(logvar_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
            Ok((mean, Some(logvar)))
        }
    }
}

/// Plain forward pass used by graph-free helpers: stand-alone convenience that
/// builds a throwaway graph.
pub fn mlp_eval(mlp: &Mlp, rows: &[f64], n_rows: usize) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if n_rows == 0 || !rows.len().is_multiple_of(n_rows) {
        return Err(Error::shape(
            "mlp_eval",
            format!("{} values do not form {} rows", rows.len(), n_rows),
        ));
    }
    let width = rows.len() / n_rows;
    let mut g = Graph::new();
    let mut reg = Vec::new();
    let bound = mlp.bind(&mut g, &mut reg)?;
    let x = g.leaf(&[n_rows, width], rows.to_vec())?;
    let (out, logvar) = mlp_forward(&mut g, mlp, &bound, x, false)?;
    Ok((
        g.values(out).to_vec(),
        logvar.map(|t| g.values(t).to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    fn spec(sizes: &[usize], heads: HeadKind) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Relu, heads).unwrap()
    }

    #[test]
    fn glorot_bound_and_shapes() {
        let s = spec(&[2, 3], HeadKind::Single);
        let mlp = init_mlp(&s, 7, "t");
        let params = mlp.params();
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].shape, vec![2, 3]);
        assert_eq!(params[1].shape, vec![3]);
        let bound = (6.0_f64 / 5.0).sqrt();
        assert!(params[0].values.iter().all(|w| w.abs() <= bound));
        assert!(params[1].values.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn same_seed_identical_different_seed_differs() {
        let s = spec(&[4, 3, 2], HeadKind::Dual);
        let a = init_mlp(&s, 42, "m");
        let b = init_mlp(&s, 42, "m");
        let c = init_mlp(&s, 43, "m");
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.values, pb.values);
        }
        let differs = a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(pa, pc)| pa.values != pc.values);
        assert!(differs);
    }

    #[test]
    fn zero_params_map_to_zero() {
        let s = spec(&[3, 2, 2], HeadKind::Dual);
        let mut mlp = init_mlp(&s, 1, "m");
        for p in mlp.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let (mean, logvar) = mlp_eval(&mlp, &[0.5, -1.0, 2.0], 1).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert_eq!(logvar.unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let s = spec(&[2, 2], HeadKind::Single);
        let mut mlp = init_mlp(&s, 1, "m");
        {
            let mut params = mlp.params_mut();
            params[0].values.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            params[1].values.copy_from_slice(&[0.0, 0.0]);
        }
        let (out, _) = mlp_eval(&mlp, &[1.0, 2.0], 1).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn two_layer_hand_arithmetic() {
        // x=[1, 2]; W1=[[0.1,0.2],[0.3,-0.4]] b1=[0.05,-0.05]; relu; W2 -> single output
        let s = spec(&[2, 2, 1], HeadKind::Single);
        let mut mlp = init_mlp(&s, 1, "m");
        {
            let mut params = mlp.params_mut();
            params[0].values.copy_from_slice(&[0.1, 0.2, 0.3, -0.4]);
            params[1].values.copy_from_slice(&[0.05, -0.05]);
            params[2].values.copy_from_slice(&[0.7, -0.6]);
            params[3].values.copy_from_slice(&[0.01]);
        }
        // h = relu([1*0.1+2*0.3+0.05, 1*0.2+2*(-0.4)-0.05]) = relu([0.75, -0.65]) = [0.75, 0]
        // out = 0.75*0.7 + 0*(-0.6) + 0.01 = 0.535
        let (out, _) = mlp_eval(&mlp, &[1.0, 2.0], 1).unwrap();
        assert!((out[0] - 0.535).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_names_expected_and_actual() {
        let s = spec(&[3, 2], HeadKind::Single);
        let mlp = init_mlp(&s, 1, "m");
        let err = mlp_eval(&mlp, &[1.0, 2.0], 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 3") && msg.contains("actual 2"), "{msg}");
    }

    #[test]
    fn batch_forward_equals_rowwise() {
        let s = spec(&[3, 4, 2], HeadKind::Dual);
        let mlp = init_mlp(&s, 11, "m");
        let rows = [
            [0.3, -0.5, 1.1],
            [0.9, 0.2, -0.7],
            [-1.3, 0.8, 0.4],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let (batch_mean, batch_lv) = mlp_eval(&mlp, &flat, 3).unwrap();
        let batch_lv = batch_lv.unwrap();
        for (i, row) in rows.iter().enumerate() {
            let (m, lv) = mlp_eval(&mlp, row, 1).unwrap();
            let lv = lv.unwrap();
            for j in 0..2 {
                assert!((batch_mean[i * 2 + j] - m[j]).abs() < 1e-12);
                assert!((batch_lv[i * 2 + j] - lv[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_gradients_check_out() {
        let s = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, HeadKind::Dual).unwrap();
        let mlp = init_mlp(&s, 5, "m");
        let mut params: Vec<Param> = mlp.params().into_iter().cloned().collect();
        let x_rows = vec![0.4, -0.2, 0.9, -0.6, 0.1, 0.5];
        let max_rel = check_gradients(
            |g, leaves| {
                let bound = mlp.rebind(leaves, &mut 0);
                let x = g.leaf(&[2, 3], x_rows.clone())?;
                let (mean, logvar) = mlp_forward(g, &mlp, &bound, x, false)?;
                let sm = g.sum(mean)?;
                let sv = g.sum(logvar.unwrap())?;
                let both = g.add(sm, sv)?;
                g.sum(both)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max_rel = {max_rel}");
    }

    #[test]
    fn detached_forward_contributes_no_parameter_gradient() {
        let s = spec(&[2, 3, 2], HeadKind::Dual);
        let mlp = init_mlp(&s, 9, "m");
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let bound = mlp.bind(&mut g, &mut reg).unwrap();
        let x = g.leaf(&[1, 2], vec![0.7, -0.3]).unwrap();
        let (mean, _) = mlp_forward(&mut g, &mlp, &bound, x, true).unwrap();
        let loss = g.sum(mean).unwrap();
        let grads = g.backward(loss).unwrap();
        for t in &reg {
            assert!(grads.wrt(*t).iter().all(|&v| v == 0.0));
        }
        // The input still receives gradient.
        assert!(grads.wrt(x).iter().any(|&v| v != 0.0));
    }
}
