//! Dice, focal, combined and distillation losses with analytic gradients.
//!
//! Every loss takes two-class logits (or probabilities) laid out `(b, 2, n)`
//! with `n` pixels per sample, and binary targets laid out `(b, n)`. Values and
//! gradients are computed in `f64`.

use alloc::vec;
use alloc::vec::Vec;

use crate::ensemble::softmax2;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub dice_eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub distill_alpha: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_eps: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_weight: 1.0,
            focal_weight: 1.0,
            distill_alpha: 0.5,
            temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice_eps >= 0.0 && self.dice_eps.is_finite()) {
            bail!(Config, "dice_eps must be a finite value >= 0, got {}", self.dice_eps);
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            bail!(Config, "focal_gamma must be >= 0, got {}", self.focal_gamma);
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            bail!(Config, "focal_alpha must lie in (0, 1], got {}", self.focal_alpha);
        }
        if !(self.dice_weight >= 0.0 && self.focal_weight >= 0.0) {
            bail!(Config, "loss weights must be nonnegative, got ({}, {})", self.dice_weight, self.focal_weight);
        }
        if !(0.0..=1.0).contains(&self.distill_alpha) {
            bail!(Config, "distill_alpha must lie in [0, 1], got {}", self.distill_alpha);
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bail!(Config, "temperature must be > 0, got {}", self.temperature);
        }
        Ok(())
    }
}

/// Scalar loss and its gradient w.r.t. the logits it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Batch geometry: `batch` samples of `pixels` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossShape {
    pub batch: usize,
    pub pixels: usize,
}

impl LossShape {
    fn check(&self, two_class: &[f64], target: &[u8]) -> Result<()> {
        if self.batch == 0 || self.pixels == 0 {
            bail!(Shape, "empty loss batch");
        }
        if two_class.len() != 2 * self.batch * self.pixels {
            bail!(Shape, "expected {} class values, got {}", 2 * self.batch * self.pixels, two_class.len());
        }
        if target.len() != self.batch * self.pixels {
            bail!(Shape, "expected {} targets, got {}", self.batch * self.pixels, target.len());
        }
        Ok(())
    }
}

fn sample_dice(p1: &[f64], t: &[u8], eps: f64) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (p, &tv) in p1.iter().zip(t) {
        let tv = tv as f64;
        inter += p * tv;
        sum_p += p;
        sum_t += tv;
    }
    (2.0 * inter + eps, sum_p + sum_t + eps, sum_t)
}

/// `1 - (2·Σp₁t + ε) / (Σp₁ + Σt + ε)` on the flooded channel, batch mean.
pub fn dice_loss(probs: &[f64], target: &[u8], shape: LossShape, eps: f64) -> Result<f64> {
    shape.check(probs, target)?;
    let n = shape.pixels;
    let mut total = 0.0;
    for b in 0..shape.batch {
        let p1 = &probs[(2 * b + 1) * n..(2 * b + 2) * n];
        let (num, den, _) = sample_dice(p1, &target[b * n..(b + 1) * n], eps);
        total += 1.0 - num / den;
    }
    Ok(total / shape.batch as f64)
}

/// Dice on `softmax(logits)` averaged over the samples flagged in `include`;
/// excluded samples get zero gradient.
pub fn dice_from_logits(
    logits: &[f64],
    target: &[u8],
    include: &[bool],
    shape: LossShape,
    eps: f64,
) -> Result<LossOutput> {
    shape.check(logits, target)?;
    if include.len() != shape.batch {
        bail!(Shape, "include mask has {} entries for batch {}", include.len(), shape.batch);
    }
    let n = shape.pixels;
    let count = include.iter().filter(|v| **v).count();
    let mut grad = vec![0.0; logits.len()];
    if count == 0 {
        return Ok(LossOutput { value: 0.0, grad });
    }
    let scale = 1.0 / count as f64;
    let mut value = 0.0;
    let mut p1 = vec![0.0; n];
    for b in (0..shape.batch).filter(|b| include[*b]) {
        let z0 = &logits[2 * b * n..(2 * b + 1) * n];
        let z1 = &logits[(2 * b + 1) * n..(2 * b + 2) * n];
        for i in 0..n {
            p1[i] = softmax2(z0[i], z1[i]).1;
        }
        let t = &target[b * n..(b + 1) * n];
        let (num, den, _) = sample_dice(&p1, t, eps);
        value += 1.0 - num / den;
        for i in 0..n {
            // d/dp of -(num/den)
            let dp = -(2.0 * t[i] as f64 * den - num) / (den * den) * scale;
            let s = p1[i] * (1.0 - p1[i]);
            grad[(2 * b + 1) * n + i] = dp * s;
            grad[2 * b * n + i] = -dp * s;
        }
    }
    Ok(LossOutput { value: value * scale, grad })
}

/// Mean over pixels of `-α (1-p_t)^γ ln p_t`.
pub fn focal_loss(logits: &[f64], target: &[u8], shape: LossShape, gamma: f64, alpha: f64) -> Result<LossOutput> {
    shape.check(logits, target)?;
    let n = shape.pixels;
    let total = (shape.batch * n) as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;
    for b in 0..shape.batch {
        for i in 0..n {
            let i0 = 2 * b * n + i;
            let i1 = (2 * b + 1) * n + i;
            let (z_true, z_other, it, io) = if target[b * n + i] == 1 {
                (logits[i1], logits[i0], i1, i0)
            } else {
                (logits[i0], logits[i1], i0, i1)
            };
            // log p_t = -log(1 + exp(z_other - z_true)), computed stably
            let d = z_other - z_true;
            let log_pt = -softplus(d);
            let pt = libm::exp(log_pt);
            let one_minus = softmax2(z_true, z_other).1;
            let mod_factor = if gamma == 0.0 { 1.0 } else { libm::pow(one_minus, gamma) };
            value += -alpha * mod_factor * log_pt;
            // dl/dz_t = α[γ p_t (1-p_t)^γ ln p_t − (1-p_t)^{γ+1}]
            let dz_true = alpha * (gamma * pt * mod_factor * log_pt - mod_factor * one_minus);
            grad[it] = dz_true / total;
            grad[io] = -dz_true / total;
        }
    }
    Ok(LossOutput { value: value / total, grad })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// `w_dice · dice(softmax(logits)) + w_focal · focal(logits)`.
pub fn combined_loss(logits: &[f64], target: &[u8], shape: LossShape, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let all = vec![true; shape.batch];
    let mut out = LossOutput { value: 0.0, grad: vec![0.0; logits.len()] };
    shape.check(logits, target)?;
    if cfg.dice_weight != 0.0 {
        let d = dice_from_logits(logits, target, &all, shape, cfg.dice_eps)?;
        out.value += cfg.dice_weight * d.value;
        for (g, v) in out.grad.iter_mut().zip(&d.grad) {
            *g += cfg.dice_weight * v;
        }
    }
    if cfg.focal_weight != 0.0 {
        let f = focal_loss(logits, target, shape, cfg.focal_gamma, cfg.focal_alpha)?;
        out.value += cfg.focal_weight * f.value;
        for (g, v) in out.grad.iter_mut().zip(&f.grad) {
            *g += cfg.focal_weight * v;
        }
    }
    Ok(out)
}

/// Per-pixel mean of `KL(softmax(teacher/τ) ‖ softmax(student/τ))`, with the
/// gradient w.r.t. the student logits.
pub fn kl_divergence(student: &[f64], teacher: &[f64], shape: LossShape, tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        bail!(Config, "temperature must be > 0, got {}", tau);
    }
    if student.len() != teacher.len() || student.len() != 2 * shape.batch * shape.pixels {
        bail!(Shape, "student {} / teacher {} logits for batch {}x{}", student.len(), teacher.len(), shape.batch, shape.pixels);
    }
    let n = shape.pixels;
    let total = (shape.batch * n) as f64;
    let mut grad = vec![0.0; student.len()];
    let mut value = 0.0;
    for b in 0..shape.batch {
        for i in 0..n {
            let i0 = 2 * b * n + i;
            let i1 = (2 * b + 1) * n + i;
            let (s0, s1) = (student[i0] / tau, student[i1] / tau);
            let (t0, t1) = (teacher[i0] / tau, teacher[i1] / tau);
            let ls = log_softmax2(s0, s1);
            let lt = log_softmax2(t0, t1);
            let qt = (libm::exp(lt.0), libm::exp(lt.1));
            let qs = (libm::exp(ls.0), libm::exp(ls.1));
            value += qt.0 * (lt.0 - ls.0) + qt.1 * (lt.1 - ls.1);
            grad[i0] = (qs.0 - qt.0) / tau / total;
            grad[i1] = (qs.1 - qt.1) / tau / total;
        }
    }
    Ok(LossOutput { value: value / total, grad })
}

fn log_softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let lse = m + libm::log(libm::exp(a - m) + libm::exp(b - m));
    (a - lse, b - lse)
}

/// `(1-α)·dice(softmax(student), y)` over the labeled samples plus
/// `α·KL(teacher ‖ student)` at temperature τ over every sample.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    student: &[f64],
    teacher: &[f64],
    target: &[u8],
    labeled: &[bool],
    shape: LossShape,
    alpha: f64,
    tau: f64,
    dice_eps: f64,
) -> Result<LossOutput> {
    if !(tau > 0.0) {
        bail!(Config, "temperature must be > 0, got {}", tau);
    }
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Config, "distill alpha must lie in [0, 1], got {}", alpha);
    }
    let mut out = LossOutput { value: 0.0, grad: vec![0.0; student.len()] };
    if alpha < 1.0 {
        let d = dice_from_logits(student, target, labeled, shape, dice_eps)?;
        out.value += (1.0 - alpha) * d.value;
        for (g, v) in out.grad.iter_mut().zip(&d.grad) {
            *g += (1.0 - alpha) * v;
        }
    }
    if alpha > 0.0 {
        let k = kl_divergence(student, teacher, shape, tau)?;
        out.value += alpha * k.value;
        for (g, v) in out.grad.iter_mut().zip(&k.grad) {
            *g += alpha * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_case(seed: u64, batch: usize, pixels: usize) -> (Vec<f64>, Vec<u8>) {
        let mut r = rng::stream(seed, &[]);
        let logits = (0..2 * batch * pixels).map(|_| 2.0 * rng::normal(&mut r)).collect();
        let target = (0..batch * pixels).map(|_| u8::from(rng::uniform(&mut r) < 0.4)).collect();
        (logits, target)
    }

    /// Central differences of `f` at `x`, compared with `grad`.
    fn check_grad(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3 || (numeric - grad[i]).abs() < 1e-9, "index {i}: {numeric} vs {}", grad[i]);
        }
    }

    #[test]
    fn dice_hand_cases() {
        let s = LossShape { batch: 1, pixels: 4 };
        // p1 = [[1,1],[0,0]], t = [[1,0],[0,0]], eps = 1 -> 1 - 3/4
        let probs = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert!((dice_loss(&probs, &[1, 0, 0, 0], s, 1.0).unwrap() - 0.25).abs() < 1e-15);
        // exact match
        assert_eq!(dice_loss(&probs, &[1, 1, 0, 0], s, 1.0).unwrap(), 0.0);
        // disjoint: 1 - eps/(2+2+eps)
        let d = dice_loss(&probs, &[0, 0, 1, 1], s, 1.0).unwrap();
        assert!((d - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn focal_hand_case() {
        // p_t = 0.6 for class 1: z1 - z0 = ln(0.6/0.4)
        let z = [0.0, libm::log(1.5)];
        let out = focal_loss(&z, &[1], LossShape { batch: 1, pixels: 1 }, 2.0, 0.25).unwrap();
        let expected = -0.25 * 0.4f64 * 0.4 * libm::log(0.6);
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.020433).abs() < 1e-6);
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy() {
        let s = LossShape { batch: 2, pixels: 16 };
        let (z, t) = random_case(1, 2, 16);
        let f = focal_loss(&z, &t, s, 0.0, 1.0).unwrap().value;
        let mut ce = 0.0;
        for b in 0..2 {
            for i in 0..16 {
                let (p0, p1) = softmax2(z[2 * b * 16 + i], z[(2 * b + 1) * 16 + i]);
                ce -= libm::log(if t[b * 16 + i] == 1 { p1 } else { p0 });
            }
        }
        assert!((f - ce / 32.0).abs() < 1e-7);
    }

    #[test]
    fn confident_focal_vanishes() {
        let z = [-30.0, 30.0, 30.0, -30.0];
        let out = focal_loss(&z, &[1, 0], LossShape { batch: 1, pixels: 2 }, 2.0, 0.25).unwrap();
        assert!(out.value < 1e-20);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = LossShape { batch: 2, pixels: 64 };
        let (z, t) = random_case(2, 2, 64);
        let cfg = LossConfig::default();
        let all = [true, true];
        let d = dice_from_logits(&z, &t, &all, s, 1.0).unwrap();
        check_grad(&z, &d.grad, |x| dice_from_logits(x, &t, &all, s, 1.0).unwrap().value);
        let f = focal_loss(&z, &t, s, 2.0, 0.25).unwrap();
        check_grad(&z, &f.grad, |x| focal_loss(x, &t, s, 2.0, 0.25).unwrap().value);
        let c = combined_loss(&z, &t, s, &cfg).unwrap();
        check_grad(&z, &c.grad, |x| combined_loss(x, &t, s, &cfg).unwrap().value);
        let (zt, _) = random_case(3, 2, 64);
        let labeled = [true, false];
        let k = distill_loss(&z, &zt, &t, &labeled, s, 0.3, 2.0, 1.0).unwrap();
        check_grad(&z, &k.grad, |x| distill_loss(x, &zt, &t, &labeled, s, 0.3, 2.0, 1.0).unwrap().value);
    }

    #[test]
    fn combined_weights_select_terms() {
        let s = LossShape { batch: 2, pixels: 8 };
        let (z, t) = random_case(4, 2, 8);
        let base = LossConfig::default();
        let dice = dice_from_logits(&z, &t, &[true, true], s, 1.0).unwrap().value;
        let focal = focal_loss(&z, &t, s, 2.0, 0.25).unwrap().value;
        let only_dice = LossConfig { focal_weight: 0.0, ..base };
        let only_focal = LossConfig { dice_weight: 0.0, ..base };
        assert_eq!(combined_loss(&z, &t, s, &only_dice).unwrap().value, dice);
        assert_eq!(combined_loss(&z, &t, s, &only_focal).unwrap().value, focal);
        assert!((combined_loss(&z, &t, s, &base).unwrap().value - (dice + focal)).abs() < 1e-15);
        let negative = LossConfig { dice_weight: -1.0, ..base };
        assert!(matches!(combined_loss(&z, &t, s, &negative), Err(crate::Error::Config(_))));
    }

    #[test]
    fn distill_reductions() {
        let s = LossShape { batch: 2, pixels: 8 };
        let (z, t) = random_case(5, 2, 8);
        let (zt, _) = random_case(6, 2, 8);
        let labeled = [true, true];
        let dice = dice_from_logits(&z, &t, &labeled, s, 1.0).unwrap().value;
        assert_eq!(distill_loss(&z, &zt, &t, &labeled, s, 0.0, 3.0, 1.0).unwrap().value, dice);
        assert!(distill_loss(&z, &z, &t, &labeled, s, 1.0, 2.0, 1.0).unwrap().value.abs() < 1e-7);
        assert!(distill_loss(&z, &zt, &t, &labeled, s, 0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn kl_hand_case() {
        // teacher (0.9, 0.1), student (0.5, 0.5)
        let teacher = [libm::log(0.9), libm::log(0.1)];
        let student = [0.0, 0.0];
        let k = kl_divergence(&student, &teacher, LossShape { batch: 1, pixels: 1 }, 1.0).unwrap();
        let expected = 0.9 * libm::log(0.9 / 0.5) + 0.1 * libm::log(0.1 / 0.5);
        assert!((k.value - expected).abs() < 1e-12);
        // 0.9·ln 1.8 + 0.1·ln 0.2 = 0.3680642072
        assert!((k.value - 0.368_064_207).abs() < 1e-8);
    }

    #[test]
    fn distill_is_shift_invariant() {
        let s = LossShape { batch: 1, pixels: 16 };
        let (z, t) = random_case(7, 1, 16);
        let (zt, _) = random_case(8, 1, 16);
        let base = distill_loss(&z, &zt, &t, &[true], s, 1.0, 2.0, 1.0).unwrap().value;
        let shifted: Vec<f64> = z.iter().map(|v| v + 3.7).collect();
        let tshift: Vec<f64> = zt.iter().map(|v| v - 1.3).collect();
        assert!((distill_loss(&shifted, &zt, &t, &[true], s, 1.0, 2.0, 1.0).unwrap().value - base).abs() < 1e-7);
        assert!((distill_loss(&z, &tshift, &t, &[true], s, 1.0, 2.0, 1.0).unwrap().value - base).abs() < 1e-7);
    }

    #[test]
    fn batch_permutation_invariance() {
        let s = LossShape { batch: 2, pixels: 8 };
        let (z, t) = random_case(9, 2, 8);
        let mut zp = z[16..].to_vec();
        zp.extend_from_slice(&z[..16]);
        let mut tp = t[8..].to_vec();
        tp.extend_from_slice(&t[..8]);
        let a = combined_loss(&z, &t, s, &LossConfig::default()).unwrap().value;
        let b = combined_loss(&zp, &tp, s, &LossConfig::default()).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative() {
        for seed in 0..20 {
            let s = LossShape { batch: 2, pixels: 8 };
            let (z, t) = random_case(100 + seed, 2, 8);
            let (zt, _) = random_case(200 + seed, 2, 8);
            assert!(combined_loss(&z, &t, s, &LossConfig::default()).unwrap().value >= 0.0);
            assert!(distill_loss(&z, &zt, &t, &[true, false], s, 0.5, 1.5, 1.0).unwrap().value >= 0.0);
        }
    }
}
