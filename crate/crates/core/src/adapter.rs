//! The learned channel-distillation network.
//!
//! A stack of 1-D temporal convolutions maps an `E × T` recording of any montage
//! onto the `I_Ch × I_Tsteps` input the base model expects. Each layer convolves
//! along time over all input feature maps, adds a bias and applies its activation.
//! The time axis must land exactly on `I_Tsteps`; no implicit padding is done.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::nn::{uniform_init, Activation, ParamSet};

/// Minimum kernel length of the first layer in [`AdapterConfig::default_for`].
pub const DEFAULT_FIRST_KERNEL: usize = 15;
pub const DEFAULT_HIDDEN_MAPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_maps: usize,
    pub kernel_len: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub in_channels: usize,
    pub in_timesteps: usize,
    pub out_channels: usize,
    pub out_timesteps: usize,
    pub layers: Vec<ConvLayerSpec>,
}

impl AdapterConfig {
    pub fn new(
        in_channels: usize,
        in_timesteps: usize,
        out_channels: usize,
        out_timesteps: usize,
        layers: Vec<ConvLayerSpec>,
    ) -> Result<Self> {
        let cfg = AdapterConfig {
            in_channels,
            in_timesteps,
            out_channels,
            out_timesteps,
            layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Two layers: a wide strided temporal convolution into `DEFAULT_HIDDEN_MAPS`
    /// maps with GELU, then a kernel-3 convolution onto `out_channels`.
    ///
    /// The first layer's stride is the largest that keeps its kernel at least
    /// `DEFAULT_FIRST_KERNEL` long; the kernel then grows to absorb whatever the
    /// stride leaves over so the length arithmetic is exact.
    pub fn default_for(
        in_channels: usize,
        in_timesteps: usize,
        out_channels: usize,
        out_timesteps: usize,
    ) -> Result<Self> {
        let mid = out_timesteps + 2;
        let (stride, kernel) = if mid == 1 {
            (1, in_timesteps)
        } else if in_timesteps >= DEFAULT_FIRST_KERNEL + (mid - 1) {
            let s = (in_timesteps - DEFAULT_FIRST_KERNEL) / (mid - 1);
            (s, in_timesteps - s * (mid - 1))
        } else if in_timesteps >= mid {
            (1, in_timesteps - mid + 1)
        } else {
            return Err(EadError::Config(format!(
                "adapter cannot stretch {in_timesteps} input steps to {out_timesteps}"
            )));
        };
        Self::new(
            in_channels,
            in_timesteps,
            out_channels,
            out_timesteps,
            vec![
                ConvLayerSpec {
                    out_maps: DEFAULT_HIDDEN_MAPS,
                    kernel_len: kernel,
                    stride,
                    activation: Activation::Gelu,
                },
                ConvLayerSpec {
                    out_maps: out_channels,
                    kernel_len: 3,
                    stride: 1,
                    activation: Activation::None,
                },
            ],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_timesteps == 0 {
            return Err(EadError::Config("adapter input must be nonempty".into()));
        }
        let Some(last) = self.layers.last() else {
            return Err(EadError::Config("adapter needs at least one layer".into()));
        };
        if last.out_maps != self.out_channels {
            return Err(EadError::Config(format!(
                "final layer produces {} maps, expected {}",
                last.out_maps, self.out_channels
            )));
        }
        let lengths = self.time_lengths()?;
        let produced = *lengths.last().expect("nonempty");
        if produced != self.out_timesteps {
            return Err(EadError::Config(format!(
                "layers map {} steps to {produced}, expected {}",
                self.in_timesteps, self.out_timesteps
            )));
        }
        Ok(())
    }

    /// Time-axis length entering each layer, then the final output length.
    pub fn time_lengths(&self) -> Result<Vec<usize>> {
        let mut lengths = vec![self.in_timesteps];
        let mut t = self.in_timesteps;
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_maps == 0 || l.kernel_len == 0 || l.stride == 0 {
                return Err(EadError::Config(format!("layer {i} has a zero-sized dimension")));
            }
            if l.kernel_len > t || (t - l.kernel_len) % l.stride != 0 {
                return Err(EadError::Config(format!(
                    "layer {i}: kernel {} stride {} does not tile {t} steps exactly",
                    l.kernel_len, l.stride
                )));
            }
            t = (t - l.kernel_len) / l.stride + 1;
            lengths.push(t);
        }
        Ok(lengths)
    }

    fn in_maps(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_channels
        } else {
            self.layers[layer - 1].out_maps
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `out_maps × in_maps × kernel_len`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub layers: Vec<ConvParams>,
}

impl AdapterParams {
    pub fn zeros(cfg: &AdapterConfig) -> Self {
        let layers = cfg
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| ConvParams {
                weight: vec![0.0; l.out_maps * cfg.in_maps(i) * l.kernel_len],
                bias: vec![0.0; l.out_maps],
            })
            .collect();
        AdapterParams { layers }
    }

    /// Weights uniform in `±sqrt(1 / fan_in)`, biases zero.
    pub fn init(cfg: &AdapterConfig, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(cfg);
        for (i, (layer, spec)) in p.layers.iter_mut().zip(&cfg.layers).enumerate() {
            let fan_in = (cfg.in_maps(i) * spec.kernel_len) as f64;
            layer.weight = uniform_init(rng, layer.weight.len(), (1.0 / fan_in).sqrt());
        }
        p
    }

    pub fn check_shapes(&self, cfg: &AdapterConfig) -> Result<()> {
        let expect = Self::zeros(cfg);
        let ok = self.layers.len() == expect.layers.len()
            && self
                .layers
                .iter()
                .zip(&expect.layers)
                .all(|(a, b)| a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len());
        if ok {
            Ok(())
        } else {
            Err(EadError::Dimension("adapter parameters do not match config".into()))
        }
    }
}

impl ParamSet for AdapterParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("adapter.conv{i}.weight"), l.weight.as_slice()));
            out.push((format!("adapter.conv{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

fn check_input(x: &Matrix, cfg: &AdapterConfig) -> Result<()> {
    if x.shape() != (cfg.in_channels, cfg.in_timesteps) {
        return Err(EadError::Dimension(format!(
            "adapter expects {}x{} input, got {}x{}",
            cfg.in_channels,
            cfg.in_timesteps,
            x.rows(),
            x.cols()
        )));
    }
    Ok(())
}

fn conv_forward(z: &Matrix, p: &ConvParams, spec: &ConvLayerSpec) -> Matrix {
    let in_maps = z.rows();
    let k = spec.kernel_len;
    let t_out = (z.cols() - k) / spec.stride + 1;
    let mut out = Matrix::zeros(spec.out_maps, t_out);
    for o in 0..spec.out_maps {
        let orow = out.row_mut(o);
        orow.fill(p.bias[o]);
        for i in 0..in_maps {
            let w = &p.weight[(o * in_maps + i) * k..(o * in_maps + i + 1) * k];
            let zrow = z.row(i);
            for (t, acc) in orow.iter_mut().enumerate() {
                let seg = &zrow[t * spec.stride..t * spec.stride + k];
                *acc += w.iter().zip(seg).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

/// Forward pass keeping the intermediates needed by [`adapter_backward`].
pub fn adapter_forward_cached(
    x: &Matrix,
    params: &AdapterParams,
    cfg: &AdapterConfig,
) -> Result<(Matrix, AdapterCache)> {
    check_input(x, cfg)?;
    let mut inputs = Vec::with_capacity(cfg.layers.len());
    let mut pre = Vec::with_capacity(cfg.layers.len());
    let mut z = x.clone();
    for (p, spec) in params.layers.iter().zip(&cfg.layers) {
        let y = conv_forward(&z, p, spec);
        let act = y.map(|v| spec.activation.apply(v));
        inputs.push(z);
        pre.push(y);
        z = act;
    }
    if !z.is_finite() {
        return Err(EadError::Numeric("adapter output is not finite".into()));
    }
    Ok((z, AdapterCache { inputs, pre }))
}

pub fn adapter_forward(x: &Matrix, params: &AdapterParams, cfg: &AdapterConfig) -> Result<Matrix> {
    adapter_forward_cached(x, params, cfg).map(|(y, _)| y)
}

/// Reverse-mode gradients given `upstream = dL/d(output)`.
pub fn adapter_backward(
    cache: &AdapterCache,
    params: &AdapterParams,
    cfg: &AdapterConfig,
    upstream: &Matrix,
) -> Result<(AdapterParams, Matrix)> {
    if upstream.shape() != (cfg.out_channels, cfg.out_timesteps) {
        return Err(EadError::Dimension(format!(
            "upstream gradient is {}x{}, adapter output is {}x{}",
            upstream.rows(),
            upstream.cols(),
            cfg.out_channels,
            cfg.out_timesteps
        )));
    }
    let mut grads = AdapterParams::zeros(cfg);
    let mut dout = upstream.clone();
    for l in (0..cfg.layers.len()).rev() {
        let spec = &cfg.layers[l];
        let z = &cache.inputs[l];
        let pre = &cache.pre[l];
        let p = &params.layers[l];
        let g = &mut grads.layers[l];
        let in_maps = z.rows();
        let k = spec.kernel_len;
        let s = spec.stride;

        let mut dpre = dout;
        for (d, &v) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
            *d *= spec.activation.derivative(v);
        }
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        for o in 0..spec.out_maps {
            let drow = dpre.row(o);
            g.bias[o] += drow.iter().sum::<f64>();
            for i in 0..in_maps {
                let base = (o * in_maps + i) * k;
                let w = &p.weight[base..base + k];
                let gw = &mut g.weight[base..base + k];
                let zrow = z.row(i);
                for (t, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let seg = &zrow[t * s..t * s + k];
                    for (gwj, zj) in gw.iter_mut().zip(seg) {
                        *gwj += d * zj;
                    }
                }
                let dzrow = dz.row_mut(i);
                for (t, &d) in drow.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (dzj, wj) in dzrow[t * s..t * s + k].iter_mut().zip(w) {
                        *dzj += d * wj;
                    }
                }
            }
        }
        dout = dz;
    }
    Ok((grads, dout))
}

/// Gradients of `sum(upstream ⊙ adapter(x))` with respect to the parameters and `x`.
pub fn adapter_grad(
    x: &Matrix,
    params: &AdapterParams,
    cfg: &AdapterConfig,
    upstream: &Matrix,
) -> Result<(AdapterParams, Matrix)> {
    let (_, cache) = adapter_forward_cached(x, params, cfg)?;
    adapter_backward(&cache, params, cfg, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution stack.
    fn naive_forward(x: &Matrix, params: &AdapterParams, cfg: &AdapterConfig) -> Vec<Vec<f64>> {
        let mut z: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for (p, spec) in params.layers.iter().zip(&cfg.layers) {
            let t_in = z[0].len();
            let t_out = (t_in - spec.kernel_len) / spec.stride + 1;
            let mut next = vec![vec![0.0; t_out]; spec.out_maps];
            for o in 0..spec.out_maps {
                for t in 0..t_out {
                    let mut acc = p.bias[o];
                    for i in 0..z.len() {
                        for kk in 0..spec.kernel_len {
                            let w = p.weight[o * z.len() * spec.kernel_len + i * spec.kernel_len + kk];
                            acc += w * z[i][t * spec.stride + kk];
                        }
                    }
                    next[o][t] = spec.activation.apply(acc);
                }
            }
            z = next;
        }
        z
    }

    #[test]
    fn default_config_solves_length_arithmetic() {
        let cfg = AdapterConfig::default_for(16, 256, 23, 64).unwrap();
        assert_eq!(cfg.layers[0].stride, 3);
        assert_eq!(cfg.layers[0].kernel_len, 61);
        assert_eq!(cfg.time_lengths().unwrap(), vec![256, 66, 64]);
        let cfg = AdapterConfig::default_for(128, 440, 23, 200).unwrap();
        assert_eq!(*cfg.time_lengths().unwrap().last().unwrap(), 200);
        assert!(cfg.layers[0].kernel_len >= DEFAULT_FIRST_KERNEL);
        assert!(AdapterConfig::default_for(8, 10, 23, 64).is_err());
    }

    #[test]
    fn padding_configs_rejected() {
        let layer = |k, s| ConvLayerSpec {
            out_maps: 4,
            kernel_len: k,
            stride: s,
            activation: Activation::None,
        };
        // (10 - 3) is not a multiple of 2
        assert!(AdapterConfig::new(2, 10, 4, 4, vec![layer(3, 2)]).is_err());
        assert!(AdapterConfig::new(2, 11, 4, 5, vec![layer(3, 2)]).is_ok());
        // wrong final map count
        assert!(AdapterConfig::new(2, 11, 3, 5, vec![layer(3, 2)]).is_err());
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = AdapterConfig::default_for(8, 64, 23, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = AdapterParams::init(&cfg, &mut rng);
        let y = adapter_forward(&Matrix::zeros(8, 64), &params, &cfg).unwrap();
        assert_eq!(y.shape(), (23, 16));
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_identity_selects_rows() {
        let cfg = AdapterConfig::new(
            4,
            10,
            2,
            10,
            vec![ConvLayerSpec {
                out_maps: 2,
                kernel_len: 1,
                stride: 1,
                activation: Activation::None,
            }],
        )
        .unwrap();
        let mut params = AdapterParams::zeros(&cfg);
        params.layers[0].weight[2] = 1.0; // out 0 <- in 2
        params.layers[0].weight[4] = 1.0; // out 1 <- in 0
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 4, 10);
        let y = adapter_forward(&x, &params, &cfg).unwrap();
        assert_eq!(y.row(0), x.row(2));
        assert_eq!(y.row(1), x.row(0));
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AdapterConfig::default_for(8, 64, 23, 16).unwrap();
        let mut params = AdapterParams::init(&cfg, &mut rng);
        for l in &mut params.layers {
            l.bias = uniform_init(&mut rng, l.bias.len(), 0.5);
        }
        let x = random_matrix(&mut rng, 8, 64);
        let y = adapter_forward(&x, &params, &cfg).unwrap();
        let oracle = naive_forward(&x, &params, &cfg);
        for (o, row) in oracle.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                assert!((y.get(o, t) - v).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = AdapterConfig::default_for(8, 64, 23, 16).unwrap();
        let params = AdapterParams::zeros(&cfg);
        assert!(matches!(
            adapter_forward(&Matrix::zeros(7, 64), &params, &cfg),
            Err(EadError::Dimension(_))
        ));
        let x = Matrix::zeros(8, 64);
        assert!(matches!(
            adapter_grad(&x, &params, &cfg, &Matrix::zeros(23, 15)),
            Err(EadError::Dimension(_))
        ));
    }

    #[test]
    fn gradients_are_linear_in_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AdapterConfig::default_for(3, 40, 5, 8).unwrap();
        let params = AdapterParams::init(&cfg, &mut rng);
        let x = random_matrix(&mut rng, 3, 40);
        let (gp, gx) = adapter_grad(&x, &params, &cfg, &Matrix::zeros(5, 8)).unwrap();
        assert!(gp.flatten().iter().chain(gx.as_slice()).all(|&v| v == 0.0));

        let up = random_matrix(&mut rng, 5, 8);
        let (gp1, gx1) = adapter_grad(&x, &params, &cfg, &up).unwrap();
        let (gp2, gx2) = adapter_grad(&x, &params, &cfg, &up.map(|v| 2.0 * v)).unwrap();
        for (a, b) in gp1.flatten().iter().zip(gp2.flatten()) {
            assert_eq!(2.0 * a, b);
        }
        for (a, b) in gx1.as_slice().iter().zip(gx2.as_slice()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let e = 2 + seed as usize;
            let t = 30 + 4 * seed as usize;
            let layers = vec![
                ConvLayerSpec { out_maps: 4, kernel_len: 5 + seed as usize, stride: 1, activation: Activation::Gelu },
                ConvLayerSpec { out_maps: 3, kernel_len: 3, stride: 1, activation: Activation::None },
            ];
            let t_out = t - (5 + seed as usize) + 1 - 2;
            let cfg = AdapterConfig::new(e, t, 3, t_out, layers).unwrap();
            let mut params = AdapterParams::init(&cfg, &mut rng);
            for l in &mut params.layers {
                l.bias = uniform_init(&mut rng, l.bias.len(), 0.3);
            }
            let x = random_matrix(&mut rng, e, t);
            let objective = |p: &AdapterParams, x: &Matrix| -> f64 {
                adapter_forward(x, p, &cfg).unwrap().as_slice().iter().sum()
            };
            let ones = Matrix::from_fn(3, t_out, |_, _| 1.0);
            let (gp, gx) = adapter_grad(&x, &params, &cfg, &ones).unwrap();
            let h = 1e-5;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            let flat = params.flatten();
            let analytic = gp.flatten();
            for i in 0..flat.len() {
                let mut p = params.clone();
                let mut v = flat.clone();
                v[i] += h;
                p.assign(&v).unwrap();
                let up = objective(&p, &x);
                v[i] -= 2.0 * h;
                p.assign(&v).unwrap();
                let down = objective(&p, &x);
                let fd = (up - down) / (2.0 * h);
                assert!(rel(analytic[i], fd) <= 1e-4, "param {i}: {} vs {fd}", analytic[i]);
            }
            for i in 0..x.as_slice().len() {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[i] -= h;
                let fd = (objective(&params, &xp) - objective(&params, &xm)) / (2.0 * h);
                assert!(rel(gx.as_slice()[i], fd) <= 1e-4, "input {i}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn output_shape_independent_of_montage(e in 1usize..20, t in 40usize..300, out_t in 1usize..24) {
            let cfg = AdapterConfig::default_for(e, t, 23, out_t).unwrap();
            let params = AdapterParams::zeros(&cfg);
            let y = adapter_forward(&Matrix::zeros(e, t), &params, &cfg).unwrap();
            prop_assert_eq!(y.shape(), (23, out_t));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = AdapterConfig::default_for(6, 100, 23, 20).unwrap();
        let params = AdapterParams::init(&cfg, &mut rng);
        let x = random_matrix(&mut rng, 6, 100);
        let a = adapter_forward(&x, &params, &cfg).unwrap();
        let b = adapter_forward(&x, &params, &cfg).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
