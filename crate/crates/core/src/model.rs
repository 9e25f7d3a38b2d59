//! Optional adapter in front of the encoder, trained as one network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapter_backward, adapter_forward, adapter_forward_cached, AdapterConfig, AdapterParams};
use crate::bfm::{Bfm, BfmConfig};
use crate::error::{EadError, Result};
use crate::matrix::Matrix;
use crate::nn::ParamSet;
use crate::train::cross_entropy;

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub params: AdapterParams,
}

impl Adapter {
    pub fn from_parts(config: AdapterConfig, params: AdapterParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Adapter { config, params })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub adapter: Option<Adapter>,
    pub bfm: Bfm,
}

/// Loss, logits and flattened parameter gradient for one labelled sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Model {
    /// Freshly initialised model; all randomness comes from `seed`.
    pub fn new(adapter: Option<AdapterConfig>, bfm: BfmConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter = adapter
            .map(|config| {
                config.validate()?;
                let params = AdapterParams::init(&config, &mut rng);
                Ok::<_, EadError>(Adapter { config, params })
            })
            .transpose()?;
        let bfm = Bfm::new(bfm, &mut rng)?;
        Self::from_parts(adapter, bfm)
    }

    pub fn from_parts(adapter: Option<Adapter>, bfm: Bfm) -> Result<Self> {
        if let Some(a) = &adapter {
            let out = (a.config.out_channels, a.config.out_timesteps);
            let expected = (bfm.config.num_channels, bfm.config.input_timesteps);
            if out != expected {
                return Err(EadError::Config(format!(
                    "adapter emits {out:?} but the encoder expects {expected:?}"
                )));
            }
        }
        Ok(Model { adapter, bfm })
    }

    /// `(channels, timesteps)` accepted by [`Model::logits`].
    pub fn input_shape(&self) -> (usize, usize) {
        match &self.adapter {
            Some(a) => (a.config.in_channels, a.config.in_timesteps),
            None => (self.bfm.config.num_channels, self.bfm.config.input_timesteps),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bfm.config.num_classes
    }

    pub fn num_adapter_params(&self) -> usize {
        self.adapter.as_ref().map_or(0, |a| a.params.num_params())
    }

    fn encoder_input(&self, x: &Matrix) -> Result<Matrix> {
        match &self.adapter {
            Some(a) => adapter_forward(x, &a.params, &a.config),
            None => Ok(x.clone()),
        }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.encoder_input(x)?;
        Ok(self.bfm.forward(&z)?.logits)
    }

    /// Mean-pooled encoder representation.
    pub fn embed(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.encoder_input(x)?;
        self.bfm.embed(&z)
    }

    /// Cross-entropy loss and its gradient with respect to every parameter
    /// (adapter first, then encoder, in [`ParamSet`] order).
    pub fn loss_and_grad(&self, x: &Matrix, label: usize) -> Result<SampleGradient> {
        match &self.adapter {
            Some(a) => {
                let (z, cache) = adapter_forward_cached(x, &a.params, &a.config)?;
                let fwd = self.bfm.forward(&z)?;
                let (loss, dlogits) = cross_entropy(&fwd.logits, label)?;
                let (bfm_grad, dz) = self.bfm.backward(&fwd, &dlogits)?;
                let (adapter_grad, _) = adapter_backward(&cache, &a.params, &a.config, &dz)?;
                let mut grad = adapter_grad.flatten();
                grad.extend(bfm_grad.flatten());
                Ok(SampleGradient {
                    loss,
                    logits: fwd.logits,
                    grad,
                })
            }
            None => {
                let fwd = self.bfm.forward(x)?;
                let (loss, dlogits) = cross_entropy(&fwd.logits, label)?;
                let (bfm_grad, _) = self.bfm.backward(&fwd, &dlogits)?;
                Ok(SampleGradient {
                    loss,
                    logits: fwd.logits,
                    grad: bfm_grad.flatten(),
                })
            }
        }
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self
            .adapter
            .as_ref()
            .map(|a| a.params.tensors())
            .unwrap_or_default();
        out.extend(self.bfm.params.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self
            .adapter
            .as_mut()
            .map(|a| a.params.tensors_mut())
            .unwrap_or_default();
        out.extend(self.bfm.params.tensors_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mismatched_adapter_rejected() {
        let adapter = AdapterConfig::default_for(4, 64, 23, 32).unwrap();
        let err = Model::new(Some(adapter), BfmConfig::desk(23, 64, 3), 0).unwrap_err();
        assert!(matches!(err, EadError::Config(_)));
    }

    #[test]
    fn modes_share_logit_shape() {
        let adapter = AdapterConfig::default_for(6, 96, 23, 32).unwrap();
        let with = Model::new(Some(adapter), BfmConfig::desk(23, 32, 5), 1).unwrap();
        let aligned = Model::new(None, BfmConfig::desk(23, 32, 5), 1).unwrap();
        let raw = Model::new(
            None,
            BfmConfig {
                channel_vocab: crate::bfm::RAW_CHANNEL_VOCAB,
                ..BfmConfig::desk(6, 96, 5)
            },
            1,
        )
        .unwrap();
        assert_eq!(with.logits(&Matrix::zeros(6, 96)).unwrap().len(), 5);
        assert_eq!(aligned.logits(&Matrix::zeros(23, 32)).unwrap().len(), 5);
        assert_eq!(raw.logits(&Matrix::zeros(6, 96)).unwrap().len(), 5);
    }

    #[test]
    fn flatten_assign_round_trip() {
        let adapter = AdapterConfig::default_for(3, 48, 23, 16).unwrap();
        let mut model = Model::new(Some(adapter), BfmConfig::desk(23, 16, 2), 7).unwrap();
        let flat = model.flatten();
        let grad = model.loss_and_grad(&Matrix::zeros(3, 48), 1).unwrap().grad;
        assert_eq!(grad.len(), flat.len());
        let shifted: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        model.assign(&shifted).unwrap();
        assert_eq!(model.flatten(), shifted);
        assert!(model.assign(&flat[1..]).is_err());
    }
}
