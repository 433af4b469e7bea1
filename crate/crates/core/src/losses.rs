//! Classification losses over embeddings: plain softmax cross-entropy on an
//! affine head, and the additive-margin cosine losses CosFace (`cos θ - m`) and
//! ArcFace (`cos(θ + m)`), both scaled by `s`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Cosines are clamped this far inside `[-1, 1]` before `acos`.
pub const ACOS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossFamily {
    Softmax,
    CosFace,
    ArcFace,
}

impl LossFamily {
    pub const ALL: [LossFamily; 3] = [LossFamily::Softmax, LossFamily::CosFace, LossFamily::ArcFace];

    pub fn uses_cosine_head(self) -> bool {
        !matches!(self, LossFamily::Softmax)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossFamily::Softmax => "softmax",
            LossFamily::CosFace => "cosface",
            LossFamily::ArcFace => "arcface",
        })
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" => Ok(LossFamily::Softmax),
            "cosface" => Ok(LossFamily::CosFace),
            "arcface" => Ok(LossFamily::ArcFace),
            other => Err(Error::Parse(format!(
                "unknown loss {other:?} (expected softmax, cosface or arcface)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub family: LossFamily,
    pub s: f64,
    pub m: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn new(family: LossFamily, num_classes: usize) -> Self {
        Self {
            family,
            s: 22.0,
            m: 0.2,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::Config(format!("scale s must be positive, got {}", self.s)));
        }
        let ok = match self.family {
            LossFamily::Softmax => true,
            LossFamily::CosFace => (0.0..1.0).contains(&self.m),
            LossFamily::ArcFace => (0.0..std::f64::consts::FRAC_PI_2).contains(&self.m),
        };
        if !ok {
            return Err(Error::Config(format!(
                "margin m = {} is out of range for {} (cosface: [0, 1), arcface: [0, pi/2))",
                self.m, self.family
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    match labels.iter().find(|&&y| y >= k) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: k }),
        None => Ok(()),
    }
}

/// Mean cross-entropy over rows. Each row is shifted by its maximum and the
/// log-sum-exp is taken as `ln_1p` of the non-maximal terms, so confident rows keep
/// full relative precision. Returns the loss and its gradient with respect to the
/// logits.
pub fn softmax_ce(logits: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Tensor<f64>)> {
    let (n, k) = logits.dims2()?;
    check_labels(labels, n, k)?;
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let top = argmax_first(row);
        let max = row[top];
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, &z)| (z - max).exp())
            .sum();
        total += (max - row[y]) + rest.ln_1p();
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = if j == top { 1.0 } else { (row[j] - max).exp() } / (1.0 + rest);
            let d = match (j == y, j == top) {
                (true, true) => -rest / (1.0 + rest),
                (true, false) => p - 1.0,
                _ => p,
            };
            *gj = d / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = j;
        }
    }
    best
}

/// Cosine similarities `[N, K]` between unit embedding rows and unit class
/// weight rows, clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineLogits {
    raw: Tensor<f64>,
    cos_theta: Tensor<f64>,
}

impl CosineLogits {
    pub fn new(embeddings: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Self> {
        let (n, d) = embeddings.dims2()?;
        let (k, wd) = weights.dims2()?;
        if d != wd {
            return Err(Error::Shape(format!("embedding dim {d} differs from weight dim {wd}")));
        }
        let mut raw = Tensor::<f64>::zeros(&[n, k]);
        for i in 0..n {
            let e = embeddings.row(i);
            for j in 0..k {
                raw.data_mut()[i * k + j] = e.iter().zip(weights.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        let mut cos_theta = raw.clone();
        cos_theta.data_mut().iter_mut().for_each(|c| *c = c.clamp(-1.0, 1.0));
        Ok(Self { raw, cos_theta })
    }

    pub fn cos_theta(&self) -> &Tensor<f64> {
        &self.cos_theta
    }

    /// d(clamped cos)/d(raw dot product): 1 inside the range, 0 where clamped.
    fn pass_through(&self, idx: usize) -> f64 {
        let r = self.raw.data()[idx];
        if (-1.0..=1.0).contains(&r) {
            1.0
        } else {
            0.0
        }
    }
}

/// `s * (cos θ_ij - m [j == y_i])`.
pub fn cosface_logits(cos_theta: &Tensor<f64>, labels: &[usize], s: f64, m: f64) -> Result<Tensor<f64>> {
    let (n, k) = cos_theta.dims2()?;
    check_labels(labels, n, k)?;
    let mut out = cos_theta.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(k).enumerate() {
        row[labels[i]] -= m;
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// `s * cos(θ_y + m)` on the target entry, `s * cos θ_j` elsewhere.
pub fn arcface_logits(cos_theta: &Tensor<f64>, labels: &[usize], s: f64, m: f64) -> Result<Tensor<f64>> {
    let (n, k) = cos_theta.dims2()?;
    check_labels(labels, n, k)?;
    let mut out = cos_theta.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(k).enumerate() {
        let y = labels[i];
        let theta = row[y].clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP).acos();
        row[y] = (theta + m).cos();
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Logits after any margin, `[N, K]`.
    pub logits: Tensor<f64>,
    pub grad_embeddings: Tensor<f64>,
    pub grad_weights: Tensor<f64>,
    /// Present for the softmax family only.
    pub grad_bias: Option<Tensor<f64>>,
}

/// Evaluates the configured loss and its exact gradients.
///
/// `softmax` uses an affine head `E W^T + b` (`bias` may be omitted for a zero
/// bias). `cosface` and `arcface` use cosine logits against `weights`, whose rows
/// and the embedding rows are expected to be unit length; `bias` must be `None`.
pub fn loss_forward_backward(
    cfg: &LossConfig,
    embeddings: &Tensor<f64>,
    weights: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    labels: &[usize],
) -> Result<LossOutput> {
    cfg.validate()?;
    let (n, d) = embeddings.dims2()?;
    let (k, wd) = weights.dims2()?;
    if d != wd || k != cfg.num_classes {
        return Err(Error::Shape(format!(
            "weights {:?} do not match embedding dim {d} and {} classes",
            weights.shape(),
            cfg.num_classes
        )));
    }
    check_labels(labels, n, k)?;

    match cfg.family {
        LossFamily::Softmax => {
            let mut logits = Tensor::zeros(&[n, k]);
            for i in 0..n {
                for j in 0..k {
                    let b = bias.map_or(0.0, |b| b.data()[j]);
                    logits.data_mut()[i * k + j] =
                        embeddings.row(i).iter().zip(weights.row(j)).map(|(a, w)| a * w).sum::<f64>() + b;
                }
            }
            if let Some(b) = bias {
                if b.shape() != [k] {
                    return Err(Error::Shape(format!("bias {:?} should be [{k}]", b.shape())));
                }
            }
            let (loss, grad_logits) = softmax_ce(&logits, labels)?;
            let (grad_embeddings, grad_weights) = linear_grads(&grad_logits, embeddings, weights);
            let mut grad_bias = Tensor::zeros(&[k]);
            for row in grad_logits.data().chunks_exact(k) {
                grad_bias.data_mut().iter_mut().zip(row).for_each(|(g, &v)| *g += v);
            }
            Ok(LossOutput {
                loss,
                logits,
                grad_embeddings,
                grad_weights,
                grad_bias: Some(grad_bias),
            })
        }
        LossFamily::CosFace | LossFamily::ArcFace => {
            if bias.is_some() {
                return Err(Error::Argument("cosine-margin heads have no bias".into()));
            }
            let cl = CosineLogits::new(embeddings, weights)?;
            let cos = cl.cos_theta();
            let logits = if cfg.family == LossFamily::CosFace {
                cosface_logits(cos, labels, cfg.s, cfg.m)?
            } else {
                arcface_logits(cos, labels, cfg.s, cfg.m)?
            };
            let (loss, grad_logits) = softmax_ce(&logits, labels)?;

            // Chain through the margin and the clamp back to the raw dot products.
            let mut grad_raw = grad_logits;
            for i in 0..n {
                for j in 0..k {
                    let idx = i * k + j;
                    let dlogit_dcos = if cfg.family == LossFamily::ArcFace && j == labels[i] {
                        let c = cos.data()[idx];
                        if c.abs() > 1.0 - ACOS_CLAMP {
                            0.0
                        } else {
                            let theta = c.acos();
                            cfg.s * (theta + cfg.m).sin() / theta.sin()
                        }
                    } else {
                        cfg.s
                    };
                    grad_raw.data_mut()[idx] *= dlogit_dcos * cl.pass_through(idx);
                }
            }
            let (grad_embeddings, grad_weights) = linear_grads(&grad_raw, embeddings, weights);
            Ok(LossOutput {
                loss,
                logits,
                grad_embeddings,
                grad_weights,
                grad_bias: None,
            })
        }
    }
}

/// Plain softmax cross-entropy on `s * cos θ` with no margin. The reference the
/// margin losses reduce to at `m = 0`.
pub fn scaled_cosine_softmax(
    s: f64,
    embeddings: &Tensor<f64>,
    weights: &Tensor<f64>,
    labels: &[usize],
) -> Result<LossOutput> {
    let cl = CosineLogits::new(embeddings, weights)?;
    let mut logits = cl.cos_theta().clone();
    logits.data_mut().iter_mut().for_each(|v| *v *= s);
    let (loss, mut grad) = softmax_ce(&logits, labels)?;
    for (idx, g) in grad.data_mut().iter_mut().enumerate() {
        *g *= s * cl.pass_through(idx);
    }
    let (grad_embeddings, grad_weights) = linear_grads(&grad, embeddings, weights);
    Ok(LossOutput {
        loss,
        logits,
        grad_embeddings,
        grad_weights,
        grad_bias: None,
    })
}

/// Gradients of `Z = E W^T` given `dZ`: `dE = dZ W`, `dW = dZ^T E`.
fn linear_grads(grad_z: &Tensor<f64>, e: &Tensor<f64>, w: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (n, k) = (grad_z.shape()[0], grad_z.shape()[1]);
    let d = e.shape()[1];
    let mut ge = Tensor::zeros(&[n, d]);
    let mut gw = Tensor::zeros(&[k, d]);
    for i in 0..n {
        for j in 0..k {
            let g = grad_z.data()[i * k + j];
            if g == 0.0 {
                continue;
            }
            for t in 0..d {
                ge.data_mut()[i * d + t] += g * w.data()[j * d + t];
                gw.data_mut()[j * d + t] += g * e.data()[i * d + t];
            }
        }
    }
    (ge, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, _) = softmax_ce(&t(&[1, 4], &[0.7; 4]), &[2]).unwrap();
        assert!((loss - 1.386_294_361_119_890_6).abs() < 1e-15);
    }

    #[test]
    fn huge_target_logit_is_stable() {
        let (loss, grad) = softmax_ce(&t(&[1, 3], &[0.0, 1000.0, 0.0]), &[1]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-300 + 1e-12);
        assert!(grad.all_finite());
        let (loss, _) = softmax_ce(&t(&[1, 3], &[0.0, 1000.0, 0.0]), &[0]).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_high_precision_oracle() {
        // mpmath at 50 digits
        let logits = t(&[2, 3], &[0.3, -1.2, 2.5, 1.7, 0.4, -0.9]);
        let (loss, _) = softmax_ce(&logits, &[2, 0]).unwrap();
        assert!((loss - 0.212_415_989_626_600_48).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_ce(&t(&[1, 2], &[0.0, 0.0]), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn margin_free_logits_are_scaled_cosines() {
        let cos = t(&[2, 3], &[0.5, -0.2, 0.9, 0.1, 0.3, -0.7]);
        let plain: Vec<f64> = cos.data().iter().map(|c| 22.0 * c).collect();
        assert_eq!(cosface_logits(&cos, &[0, 2], 22.0, 0.0).unwrap().data(), plain.as_slice());
        let arc = arcface_logits(&cos, &[0, 2], 22.0, 0.0).unwrap();
        for (a, b) in arc.data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn margins_shrink_the_target_logit() {
        let cos = t(&[1, 2], &[0.4, 0.1]);
        let mut prev = f64::INFINITY;
        for m in [0.0, 0.1, 0.2, 0.5] {
            let z = cosface_logits(&cos, &[0], 22.0, m).unwrap().data()[0];
            assert!(z < prev);
            prev = z;
        }
        let arc = arcface_logits(&cos, &[0], 22.0, 0.2).unwrap();
        assert!(arc.data()[0] < 22.0 * 0.4);
        assert_eq!(arc.data()[1], 22.0 * 0.1);
    }

    #[test]
    fn adversarial_cosines_stay_finite() {
        let cos = t(&[2, 2], &[1.0, -1.0, -1.0, 1.0]);
        for logits in [
            cosface_logits(&cos, &[0, 0], 22.0, 0.2).unwrap(),
            arcface_logits(&cos, &[0, 0], 22.0, 0.2).unwrap(),
            arcface_logits(&cos, &[1, 0], 22.0, 1.5).unwrap(),
        ] {
            let (loss, grad) = softmax_ce(&logits, &[0, 0]).unwrap();
            assert!(loss.is_finite() && grad.all_finite());
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::new(LossFamily::CosFace, 4);
        assert_eq!((cfg.s, cfg.m), (22.0, 0.2));
        assert!(cfg.validate().is_ok());
        cfg.m = 1.0;
        assert!(cfg.validate().is_err());
        cfg.family = LossFamily::ArcFace;
        assert!(cfg.validate().is_ok());
        cfg.m = 1.6;
        assert!(cfg.validate().is_err());
        cfg.m = 0.2;
        cfg.s = 0.0;
        assert!(cfg.validate().is_err());
        assert_eq!("CosFace".parse::<LossFamily>().unwrap(), LossFamily::CosFace);
        assert!("triplet".parse::<LossFamily>().is_err());
    }

    #[test]
    fn cosine_head_rejects_bias() {
        let cfg = LossConfig::new(LossFamily::CosFace, 2);
        let e = t(&[1, 2], &[1.0, 0.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert!(loss_forward_backward(&cfg, &e, &w, Some(&b), &[0]).is_err());
    }
}
