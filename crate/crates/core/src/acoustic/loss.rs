//! Adversarial, feature-matching, mel and KL terms of the Stage I objective.

use serde::{Deserialize, Serialize};

use super::discriminator::DiscOutput;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub feat: f64,
    pub mel: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feat: 4.0,
            mel: 45.0,
            kl: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_feat", self.feat), ("lambda_mel", self.mel), ("alpha_kl", self.kl)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Scalar values of every Stage I loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub feat: f64,
    pub mel: f64,
    pub kl: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl Stage1LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("feat", self.feat),
            ("mel", self.mel),
            ("kl", self.kl),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    /// First non-finite or exploding term.
    pub fn check(&self, step: u64, limit: f64) -> Result<()> {
        for (term, value) in self.terms() {
            if !value.is_finite() || value.abs() > limit {
                return Err(Error::Diverged {
                    step,
                    term: term.into(),
                    value,
                });
            }
        }
        Ok(())
    }
}

/// `Σ_d 0.5(σ² + μ² − 1 − 2 ln σ)` for one Gaussian against `N(0, I)`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Shape("mu and sigma lengths differ".into()));
    }
    if let Some(s) = sigma.iter().find(|&&s| s.is_nan() || s <= 0.0) {
        return Err(Error::Argument(format!("standard deviation must be positive, got {s}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (s * s + m * m - 1.0 - 2.0 * s.ln()))
        .sum())
}

/// Graph KL summed over all rows and columns, from means and log-σ.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, log_sigma: Var) -> Var {
    let two_ls = g.scale(log_sigma, T::c(2.0));
    let var = g.exp(two_ls);
    let mu2 = g.square(mu);
    let a = g.add(var, mu2);
    let a = g.sub(a, two_ls);
    let a = g.add_scalar(a, -T::one());
    let s = g.sum(a);
    g.scale(s, T::c(0.5))
}

/// `Σ_k mean((D_k(x') − 1)²)`.
pub fn adv_g_loss<T: Scalar>(g: &mut Graph<T>, fake_scores: &[Var]) -> Var {
    let terms: Vec<Var> = fake_scores
        .iter()
        .map(|&s| {
            let d = g.add_scalar(s, -T::one());
            g.mean_square(d)
        })
        .collect();
    sum_vars(g, &terms)
}

/// `Σ_k [mean((D_k(x) − 1)²) + mean(D_k(x')²)]`.
pub fn adv_d_loss<T: Scalar>(g: &mut Graph<T>, real_scores: &[Var], fake_scores: &[Var]) -> Var {
    let terms: Vec<Var> = real_scores
        .iter()
        .zip(fake_scores)
        .map(|(&r, &f)| {
            let d = g.add_scalar(r, -T::one());
            let a = g.mean_square(d);
            let b = g.mean_square(f);
            g.add(a, b)
        })
        .collect();
    sum_vars(g, &terms)
}

/// `Σ_k (1/|D_k|) Σ_i mean|D_k^i(x) − D_k^i(x')|`.
pub fn feature_matching_loss<T: Scalar>(g: &mut Graph<T>, real: &[DiscOutput], fake: &[DiscOutput]) -> Var {
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        let per: Vec<Var> = r
            .features
            .iter()
            .zip(&f.features)
            .map(|(&a, &b)| g.mean_abs_diff(a, b))
            .collect();
        let s = sum_vars(g, &per);
        terms.push(g.scale(s, T::c(1.0 / r.features.len() as f64)));
    }
    sum_vars(g, &terms)
}

/// Mean absolute mel difference over the first `valid_frames` rows.
pub fn masked_mel_l1<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var, valid_frames: usize) -> Var {
    let n = g.shape(real).0;
    if valid_frames >= n {
        return g.mean_abs_diff(real, fake);
    }
    let r = g.slice_rows(real, 0, valid_frames);
    let f = g.slice_rows(fake, 0, valid_frames);
    g.mean_abs_diff(r, f)
}

/// `adv_g + λ_f·feat + λ_p·mel + α·kl`.
pub fn total_g_loss<T: Scalar>(g: &mut Graph<T>, w: &LossWeights, adv_g: Var, feat: Var, mel: Var, kl: Var) -> Var {
    let f = g.scale(feat, T::c(w.feat));
    let m = g.scale(mel, T::c(w.mel));
    let k = g.scale(kl, T::c(w.kl));
    let t = g.add(adv_g, f);
    let t = g.add(t, m);
    g.add(t, k)
}

pub(crate) fn sum_vars<T: Scalar>(g: &mut Graph<T>, xs: &[Var]) -> Var {
    let mut it = xs.iter().copied();
    let Some(first) = it.next() else {
        return g.constant(ndarray::Array2::zeros((1, 1)));
    };
    it.fold(first, |acc, v| g.add(acc, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_gaussian(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_gaussian(&[1.0, 1.0], &[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(kl_gaussian(&[0.0], &[0.0]).is_err());
        assert!(kl_gaussian(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Array2::from_shape_vec((2, 2), vec![0.3, -1.0, 2.0, 0.0]).unwrap());
        let ls = g.constant(Array2::from_shape_vec((2, 2), vec![0.1, -0.5, 0.0, 0.7]).unwrap());
        let k = kl_graph(&mut g, mu, ls);
        let sig: Vec<f64> = [0.1f64, -0.5, 0.0, 0.7].iter().map(|v| v.exp()).collect();
        let want = kl_gaussian(&[0.3, -1.0, 2.0, 0.0], &sig).unwrap();
        assert!((g.scalar(k) - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_algebra() {
        let mut g = Graph::<f64>::new();
        let real: Vec<Var> = (0..8).map(|_| g.constant(Array2::ones((5, 1)))).collect();
        let fake: Vec<Var> = (0..8).map(|_| g.constant(Array2::zeros((5, 1)))).collect();
        let d = adv_d_loss(&mut g, &real, &fake);
        let a = adv_g_loss(&mut g, &fake);
        assert_eq!(g.scalar(d), 0.0);
        assert_eq!(g.scalar(a), 8.0);
    }

    #[test]
    fn identical_features_match_exactly() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Array2::from_elem((3, 2), 0.7));
        let s = g.constant(Array2::from_elem((3, 1), 0.1));
        let out = DiscOutput {
            score: s,
            features: vec![f, s],
        };
        let fm = feature_matching_loss(&mut g, &[out.clone()], &[out]);
        assert_eq!(g.scalar(fm), 0.0);
    }

    #[test]
    fn divergence_names_the_term() {
        let b = Stage1LossBreakdown {
            mel: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(b.check(3, 1e6), Err(Error::Diverged { step: 3, ref term, .. }) if term == "mel"));
    }
}
