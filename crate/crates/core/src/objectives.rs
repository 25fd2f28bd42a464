//! Contrastive alignment, the two reconstruction losses, classification and
//! their weighted total.
//!
//! Every loss is recorded on a [`GradientTape`]. Reductions are means: the
//! contrastive loss averages each direction over the batch and sums the two
//! directions, and both reconstruction losses average over the masked
//! elements of the whole batch, so an empty mask set contributes exactly 0.

use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{GradientTape, Tensor, Var};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Weights of the four terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub cl: f64,
    pub res: f64,
    pub cls: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas { cl: 1.0, res: 1.0, cls: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cl: f64,
    pub l_res_image: f64,
    pub l_res_text: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub lambdas: Lambdas,
}

/// Scalar loss nodes to be combined.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cl: Var,
    pub res_image: Var,
    pub res_text: Var,
    pub cls: Var,
}

/// `1/τ` with `τ = exp(log_tau)` clamped to `[TAU_MIN, TAU_MAX]`.
pub fn inverse_temperature(tape: &mut GradientTape, log_tau: Var) -> Result<Var> {
    let lt = tape.clamp(log_tau, TAU_MIN.ln(), TAU_MAX.ln())?;
    let neg = tape.scale(lt, -1.0)?;
    tape.exp(neg)
}

pub fn temperature(log_tau: f64) -> f64 {
    log_tau.exp().clamp(TAU_MIN, TAU_MAX)
}

/// Symmetric InfoNCE over cosine similarities of matching rows.
pub fn itc_loss(tape: &mut GradientTape, z_image: Var, z_text: Var, log_tau: Var) -> Result<Var> {
    if tape.shape(z_image) != tape.shape(z_text) {
        return Err(Error::dim(format!("contrastive features {:?} vs {:?}", tape.shape(z_image), tape.shape(z_text))));
    }
    let b = tape.shape(z_image)[0];
    let ni = tape.l2_normalize_rows(z_image)?;
    let nt = tape.l2_normalize_rows(z_text)?;
    let sims = tape.matmul_nt(ni, nt)?;
    let inv_tau = inverse_temperature(tape, log_tau)?;
    let logits = tape.mul_scalar(sims, inv_tau)?;
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let i2t = tape.cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let t2i = tape.cross_entropy(logits_t, &diag)?;
    tape.add(i2t, t2i)
}

/// [`itc_loss`] on plain tensors with a fixed temperature.
pub fn itc_loss_value(z_image: &Tensor, z_text: &Tensor, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let mut tape = GradientTape::new();
    let zi = tape.constant(z_image.clone());
    let zt = tape.constant(z_text.clone());
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    let l = itc_loss(&mut tape, zi, zt, lt)?;
    tape.value(l).item()
}

fn zero(tape: &mut GradientTape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean squared error over the voxels of the listed patch rows.
pub fn image_recon_loss(tape: &mut GradientTape, pred: Var, target: &Tensor, rows: &[usize]) -> Result<Var> {
    image_recon_loss_batch(tape, &[pred], &[target], &[rows.to_vec()])
}

/// Pools the listed rows of every sample into one mean.
pub fn image_recon_loss_batch(
    tape: &mut GradientTape,
    preds: &[Var],
    targets: &[&Tensor],
    rows: &[Vec<usize>],
) -> Result<Var> {
    if preds.len() != targets.len() || preds.len() != rows.len() {
        return Err(Error::dim("image reconstruction: batch parts differ in length"));
    }
    for (p, t) in preds.iter().zip(targets) {
        if tape.shape(*p) != t.shape() {
            return Err(Error::dim(format!("reconstruction {:?} vs target {:?}", tape.shape(*p), t.shape())));
        }
    }
    if rows.iter().all(Vec::is_empty) {
        return Ok(zero(tape));
    }
    if preds.len() == 1 {
        return tape.mse_rows(preds[0], targets[0], &rows[0]);
    }
    let stacked = tape.concat_rows(preds)?;
    let cols = targets[0].shape()[1];
    let mut data = Vec::new();
    let mut all_rows = Vec::new();
    let mut offset = 0;
    for (t, r) in targets.iter().zip(rows) {
        data.extend_from_slice(t.data());
        all_rows.extend(r.iter().map(|i| offset + i));
        offset += t.shape()[0];
    }
    let target = Tensor::matrix(offset, cols, data)?;
    tape.mse_rows(stacked, &target, &all_rows)
}

fn text_targets(tokens: &TokenSequence, rows: &[usize], offset: usize, vocab: usize) -> Result<Vec<(usize, usize)>> {
    rows.iter()
        .map(|&r| {
            if r == 0 || r >= tokens.ids.len() || !tokens.pad_mask[r] {
                return Err(Error::Contract(format!("text position {r} is [CLS], padding or out of range")));
            }
            let id = tokens.ids[r];
            if id >= vocab {
                return Err(Error::Vocab { id, size: vocab });
            }
            Ok((offset + r, id))
        })
        .collect()
}

/// Mean cross-entropy of the true tokens at the listed positions.
pub fn text_recon_loss(tape: &mut GradientTape, logits: Var, tokens: &TokenSequence, rows: &[usize]) -> Result<Var> {
    text_recon_loss_batch(tape, &[logits], &[tokens], &[rows.to_vec()])
}

pub fn text_recon_loss_batch(
    tape: &mut GradientTape,
    logits: &[Var],
    tokens: &[&TokenSequence],
    rows: &[Vec<usize>],
) -> Result<Var> {
    if logits.len() != tokens.len() || logits.len() != rows.len() {
        return Err(Error::dim("text reconstruction: batch parts differ in length"));
    }
    let mut targets = Vec::new();
    let mut offset = 0;
    for ((l, t), r) in logits.iter().zip(tokens).zip(rows) {
        let (n, vocab) = (tape.shape(*l)[0], tape.shape(*l)[1]);
        if n != t.ids.len() {
            return Err(Error::dim(format!("{n} logit rows for {} tokens", t.ids.len())));
        }
        targets.extend(text_targets(t, r, offset, vocab)?);
        offset += n;
    }
    if targets.is_empty() {
        return Ok(zero(tape));
    }
    let stacked = if logits.len() == 1 { logits[0] } else { tape.concat_rows(logits)? };
    tape.cross_entropy(stacked, &targets)
}

/// Mean cross-entropy of `labels` under the rows of `logits`.
pub fn classification_loss(tape: &mut GradientTape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, n_classes) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if labels.len() != rows {
        return Err(Error::dim(format!("{} labels for {rows} logit rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Label { label, n_classes });
    }
    let targets: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
    tape.cross_entropy(logits, &targets)
}

/// `λ_cl·l_cl + λ_res·(l_res_image + l_res_text) + λ_cls·l_cls`.
pub fn total_loss(tape: &mut GradientTape, parts: LossParts, lambdas: Lambdas) -> Result<(Var, LossBreakdown)> {
    let value = |tape: &GradientTape, v: Var, name: &str| -> Result<f64> {
        let x = tape.value(v).item()?;
        if !x.is_finite() {
            return Err(Error::Numeric(name.to_string()));
        }
        Ok(x)
    };
    let l_cl = value(tape, parts.cl, "contrastive loss")?;
    let l_res_image = value(tape, parts.res_image, "image reconstruction loss")?;
    let l_res_text = value(tape, parts.res_text, "text reconstruction loss")?;
    let l_cls = value(tape, parts.cls, "classification loss")?;
    let a = tape.scale(parts.cl, lambdas.cl)?;
    let res = tape.add(parts.res_image, parts.res_text)?;
    let b = tape.scale(res, lambdas.res)?;
    let ab = tape.add(a, b)?;
    let c = tape.scale(parts.cls, lambdas.cls)?;
    let total = tape.add(ab, c)?;
    let l_total = value(tape, total, "total loss")?;
    Ok((total, LossBreakdown { l_cl, l_res_image, l_res_text, l_cls, l_total, lambdas }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, Vocab};
    use crate::tensor::RngStream;
    use proptest::prelude::*;

    fn on_tape<F: FnOnce(&mut GradientTape) -> Result<Var>>(f: F) -> Result<f64> {
        let mut tape = GradientTape::new();
        let l = f(&mut tape)?;
        tape.value(l).item()
    }

    /// Direct evaluation: for each i, -log(exp(s_ii/τ) / Σ_j exp(s_ij/τ)) in
    /// both directions, each averaged over the batch.
    fn itc_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let n = a.len();
        let unit = |v: &Vec<f64>| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let ua: Vec<_> = a.iter().map(unit).collect();
        let ub: Vec<_> = b.iter().map(unit).collect();
        let s = |i: usize, j: usize| ua[i].iter().zip(&ub[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..n {
            let den_r: f64 = (0..n).map(|j| s(i, j).exp()).sum();
            let den_c: f64 = (0..n).map(|j| s(j, i).exp()).sum();
            i2t -= (s(i, i).exp() / den_r).ln();
            t2i -= (s(i, i).exp() / den_c).ln();
        }
        (i2t + t2i) / n as f64
    }

    fn rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed);
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn itc_examples() {
        let one = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        assert_eq!(itc_loss_value(&one, &Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(), 0.07).unwrap(), 0.0);
        let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let l = itc_loss_value(&same, &same, 0.07).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12, "{l}");

        let a = rows(1, 3, 4);
        let b = rows(2, 3, 4);
        let l = itc_loss_value(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&b).unwrap(), 0.07).unwrap();
        assert!((l - itc_oracle(&a, &b, 0.07)).abs() < 1e-10);

        let zero = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(itc_loss_value(&zero, &same, 0.1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn temperature_is_clamped() {
        assert_eq!(temperature(10.0), 1.0);
        assert_eq!(temperature(-10.0), 0.01);
        assert!((temperature(0.07f64.ln()) - 0.07).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn itc_invariances(seed in 0u64..1000, n in 1usize..6, scale in 0.1f64..10.0) {
            let a = rows(seed, n, 3);
            let b = rows(seed + 7, n, 3);
            let ta = Tensor::from_rows(&a).unwrap();
            let tb = Tensor::from_rows(&b).unwrap();
            let base = itc_loss_value(&ta, &tb, 0.2).unwrap();
            prop_assert!(base >= 0.0);
            let swapped = itc_loss_value(&tb, &ta, 0.2).unwrap();
            prop_assert!((base - swapped).abs() < 1e-9);
            let scaled: Vec<Vec<f64>> = a.iter().enumerate()
                .map(|(i, r)| r.iter().map(|x| x * scale * (i + 1) as f64).collect()).collect();
            let s = itc_loss_value(&Tensor::from_rows(&scaled).unwrap(), &tb, 0.2).unwrap();
            prop_assert!((base - s).abs() < 1e-9);
            let mut perm: Vec<usize> = (0..n).collect();
            RngStream::new(seed).shuffle(&mut perm);
            let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
            let pb: Vec<Vec<f64>> = perm.iter().map(|&i| b[i].clone()).collect();
            let p = itc_loss_value(&Tensor::from_rows(&pa).unwrap(), &Tensor::from_rows(&pb).unwrap(), 0.2).unwrap();
            prop_assert!((base - p).abs() < 1e-9);
        }
    }

    #[test]
    fn image_reconstruction_examples() {
        let target = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, -1.0]]).unwrap();
        let same = on_tape(|t| {
            let p = t.constant(target.clone());
            image_recon_loss(t, p, &target, &[0, 2])
        })
        .unwrap();
        assert_eq!(same, 0.0);
        let off = target.map(|x| x + 0.5);
        let l = on_tape(|t| {
            let p = t.constant(off.clone());
            image_recon_loss(t, p, &target, &[1])
        })
        .unwrap();
        assert_eq!(l, 0.25);
        let empty = on_tape(|t| {
            let p = t.constant(off.clone());
            image_recon_loss(t, p, &target, &[])
        })
        .unwrap();
        assert_eq!(empty, 0.0);
        let wrong = on_tape(|t| {
            let p = t.constant(Tensor::zeros(&[2, 2]));
            image_recon_loss(t, p, &target, &[0])
        });
        assert!(matches!(wrong, Err(Error::Dimension(_))));
    }

    #[test]
    fn pooled_batch_reconstruction() {
        let t1 = Tensor::zeros(&[2, 2]);
        let t2 = Tensor::zeros(&[2, 2]);
        let l = on_tape(|t| {
            let a = t.constant(Tensor::full(&[2, 2], 1.0));
            let b = t.constant(Tensor::full(&[2, 2], 2.0));
            image_recon_loss_batch(t, &[a, b], &[&t1, &t2], &[vec![0], vec![0, 1]])
        })
        .unwrap();
        // (2·1 + 4·4) / 6
        assert!((l - 18.0 / 6.0).abs() < 1e-15);
    }

    fn vocab4() -> Vocab {
        Vocab::from_tokens(["[PAD]", "[CLS]", "[MASK]", "[UNK]"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn text_reconstruction_examples() {
        let v = vocab4();
        let seq = tokenize("a b c", &v, 5);
        assert_eq!(seq.ids, vec![1, 3, 3, 3, 0]);
        let uniform = on_tape(|t| {
            let l = t.constant(Tensor::zeros(&[5, 4]));
            text_recon_loss(t, l, &seq, &[1, 3])
        })
        .unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::zeros(&[5, 4]);
        for r in 0..5 {
            sharp.data_mut()[r * 4 + 3] = 20.0;
        }
        let l = on_tape(|t| {
            let x = t.constant(sharp.clone());
            text_recon_loss(t, x, &seq, &[1, 2])
        })
        .unwrap();
        assert!(l <= 1e-6 && l > 0.0);

        let hand = Tensor::from_rows(&[
            vec![0.0; 4],
            vec![1.0, 0.5, -1.0, 2.0],
            vec![0.0; 4],
            vec![0.3, 0.3, 0.9, -0.4],
            vec![0.0; 4],
        ])
        .unwrap();
        let oracle = |row: &[f64], y: usize| -> f64 {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            -(row[y].exp() / z).ln()
        };
        let want = (oracle(hand.row(1), 3) + oracle(hand.row(3), 3)) / 2.0;
        let got = on_tape(|t| {
            let x = t.constant(hand.clone());
            text_recon_loss(t, x, &seq, &[1, 3])
        })
        .unwrap();
        assert!((got - want).abs() < 1e-12);

        let empty = on_tape(|t| {
            let x = t.constant(hand.clone());
            text_recon_loss(t, x, &seq, &[])
        })
        .unwrap();
        assert_eq!(empty, 0.0);
        for bad in [0usize, 4] {
            let r = on_tape(|t| {
                let x = t.constant(hand.clone());
                text_recon_loss(t, x, &seq, &[bad])
            });
            assert!(matches!(r, Err(Error::Contract(_))));
        }
    }

    #[test]
    fn classification_examples() {
        let ce = |logits: Vec<f64>, y: usize| {
            on_tape(|t| {
                let n = logits.len();
                let l = t.constant(Tensor::matrix(1, n, logits).unwrap());
                classification_loss(t, l, &[y])
            })
        };
        assert!((ce(vec![0.0; 3], 2).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(ce(vec![20.0, 0.0, 0.0], 0).unwrap() < 1e-6);
        let oracle = -((2f64).exp() / (1f64.exp() + 2f64.exp() + 1.0)).ln();
        let got = ce(vec![1.0, 2.0, 0.0], 1).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.40760596).abs() < 1e-7);
        assert!(matches!(ce(vec![0.0; 3], 3), Err(Error::Label { label: 3, n_classes: 3 })));
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut tape = GradientTape::new();
        let vals = [0.3, 1.7, 2.1, 0.9];
        let v: Vec<Var> = vals.iter().map(|&x| tape.param(Tensor::scalar(x))).collect();
        let parts = LossParts { cl: v[0], res_image: v[1], res_text: v[2], cls: v[3] };
        let (total, b) = total_loss(&mut tape, parts, Lambdas::default()).unwrap();
        assert_eq!(b.l_total, vals[0] + (vals[1] + vals[2]) + vals[3]);
        assert_eq!(tape.value(total).item().unwrap(), b.l_total);

        let lam = Lambdas { cl: 0.0, res: 0.5, cls: 2.0 };
        let (total, b) = total_loss(&mut tape, parts, lam).unwrap();
        assert_eq!(b.l_total, 0.0 * vals[0] + 0.5 * (vals[1] + vals[2]) + 2.0 * vals[3]);
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(v[0]).unwrap().data(), &[0.0]);
        assert_eq!(g.get(v[3]).unwrap().data(), &[2.0]);
    }
}
