//! Multi-period and multi-resolution waveform discriminators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvSpec, Graph, StftSpec, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// `(n_fft, hop)` per resolution.
    pub resolutions: Vec<(usize, usize)>,
    pub period_channels: Vec<usize>,
    pub resolution_channels: usize,
}

impl DiscriminatorConfig {
    /// One discriminator per family with narrow layers.
    pub fn tiny() -> Self {
        Self {
            periods: vec![2],
            resolutions: vec![(512, 128)],
            period_channels: vec![4, 4],
            resolution_channels: 4,
        }
    }
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            resolutions: vec![(512, 128), (1024, 256), (2048, 512)],
            period_channels: vec![8, 16, 32, 32],
            resolution_channels: 32,
        }
    }
}

/// Score map and intermediate feature maps of one discriminator.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
struct PeriodDisc {
    period: usize,
    convs: Vec<Conv1d>,
    out: Conv1d,
}

#[derive(Clone, Debug)]
struct ResolutionDisc {
    spec: StftSpec,
    convs: Vec<Conv1d>,
    out: Conv1d,
}

/// The full set: one multi-period discriminator per period followed by one
/// multi-resolution discriminator per STFT resolution.
#[derive(Clone, Debug)]
pub struct Discriminators<T: Scalar> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    periods: Vec<PeriodDisc>,
    resolutions: Vec<ResolutionDisc>,
}

const SLOPE: f64 = 0.1;

impl<T: Scalar> Discriminators<T> {
    pub fn new<R: Rng>(config: DiscriminatorConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut periods = Vec::new();
        for &period in &config.periods {
            let mut convs = Vec::new();
            let mut cin = 1;
            let n = config.period_channels.len();
            for (i, &co) in config.period_channels.iter().enumerate() {
                let stride = if i + 1 < n { 3 } else { 1 };
                let spec = ConvSpec::new(5).with_stride(stride).with_padding(2);
                convs.push(Conv1d::new(&mut params, rng, &format!("mpd{period}.c{i}"), cin, co, spec));
                cin = co;
            }
            let out = Conv1d::new(&mut params, rng, &format!("mpd{period}.out"), cin, 1, ConvSpec::new(3));
            periods.push(PeriodDisc { period, convs, out });
        }
        let mut resolutions = Vec::new();
        for &(n_fft, hop) in &config.resolutions {
            let spec = StftSpec::new(n_fft, hop);
            let c = config.resolution_channels;
            let name = format!("mrd{n_fft}");
            let convs = vec![
                Conv1d::new(&mut params, rng, &format!("{name}.c0"), spec.n_bins(), c, ConvSpec::new(3)),
                Conv1d::new(&mut params, rng, &format!("{name}.c1"), c, c, ConvSpec::new(3).with_stride(2)),
                Conv1d::new(&mut params, rng, &format!("{name}.c2"), c, c, ConvSpec::new(3)),
            ];
            let out = Conv1d::new(&mut params, rng, &format!("{name}.out"), c, 1, ConvSpec::new(3));
            resolutions.push(ResolutionDisc { spec, convs, out });
        }
        Self {
            config,
            params,
            periods,
            resolutions,
        }
    }

    pub fn len(&self) -> usize {
        self.periods.len() + self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of feature maps each discriminator exposes.
    pub fn feature_counts(&self) -> Vec<usize> {
        self.periods
            .iter()
            .map(|d| d.convs.len() + 1)
            .chain(self.resolutions.iter().map(|d| d.convs.len() + 1))
            .collect()
    }

    /// Runs every discriminator on a `len × 1` waveform node. Parameters come
    /// from `p`, bound tracked or constant depending on which side is trained.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, wave: Var, expected_len: usize) -> Result<Vec<DiscOutput>> {
        let (len, cols) = g.shape(wave);
        if cols != 1 || len != expected_len {
            return Err(Error::Shape(format!(
                "discriminators expect a {expected_len}×1 waveform, got {len}×{cols}"
            )));
        }
        let mut outs = Vec::with_capacity(self.len());
        for d in &self.periods {
            let pad = (d.period - len % d.period) % d.period;
            let x = if pad > 0 { g.pad_rows(wave, 0, pad) } else { wave };
            let rows = (len + pad) / d.period;
            // Column j of the (rows × period) view becomes sequence j.
            let x = g.reshape(x, rows, d.period);
            let x = g.transpose(x);
            let mut h = g.reshape(x, rows * d.period, 1);
            let mut features = Vec::new();
            for c in &d.convs {
                h = c.forward(g, p, h, d.period);
                h = g.leaky_relu(h, T::c(SLOPE));
                features.push(h);
            }
            let score = d.out.forward(g, p, h, d.period);
            features.push(score);
            outs.push(DiscOutput { score, features });
        }
        for d in &self.resolutions {
            let mag = g.stft_magnitude(wave, d.spec);
            let mut h = g.ln_clamp(mag, T::c(1e-5));
            let mut features = Vec::new();
            for c in &d.convs {
                h = c.forward(g, p, h, 1);
                h = g.leaky_relu(h, T::c(SLOPE));
                features.push(h);
            }
            let score = d.out.forward(g, p, h, 1);
            features.push(score);
            outs.push(DiscOutput { score, features });
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array2;

    #[test]
    fn eight_discriminators_with_features() {
        let mut rng = rng_from_seed(0);
        let d = Discriminators::<f32>::new(DiscriminatorConfig::default(), &mut rng);
        assert_eq!(d.len(), 8);
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, false);
        let x = g.constant(Array2::from_shape_fn((19200, 1), |(i, _)| ((i as f32) * 0.05).sin() * 0.3));
        let outs = d.forward(&mut g, &p, x, 19200).unwrap();
        assert_eq!(outs.len(), 8);
        for (o, n) in outs.iter().zip(d.feature_counts()) {
            assert_eq!(o.features.len(), n);
        }
        let again = d.forward(&mut g, &p, x, 19200).unwrap();
        for (a, b) in outs.iter().zip(&again) {
            assert_eq!(g.value(a.score), g.value(b.score));
        }
        let short = g.constant(Array2::zeros((100, 1)));
        assert!(d.forward(&mut g, &p, short, 19200).is_err());
    }
}
