use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{AlifuseParams, Network};
use crate::tensor::{softmax, GradientTape, Tensor};

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over tie groups, ascending: positives beat every negative below
    // the group and tie with the negatives inside it
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice_wins += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Mean one-vs-rest AUC over classes that have both positives and
/// negatives; `None` when no class qualifies.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Option<f64>> {
    let mut aucs = Vec::new();
    for c in 0..n_classes {
        let is_c: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        match compute_auc(&scores, &is_c) {
            Ok(a) => aucs.push(a),
            Err(Error::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Ok(None);
    }
    Ok(Some(aucs.iter().sum::<f64>() / aucs.len() as f64))
}

/// Distance between the centroids of the unit-normalised rows.
pub fn modality_gap(z_image: &Tensor, z_text: &Tensor) -> Result<f64> {
    let (n, d) = z_image.dims2()?;
    if z_text.dims2()? != (n, d) {
        return Err(Error::dim(format!("gap between {:?} and {:?}", z_image.shape(), z_text.shape())));
    }
    let mut diff = vec![0.0; d];
    for r in 0..n {
        for (z, sign) in [(z_image, 1.0), (z_text, -1.0)] {
            let row = z.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate(format!("embedding row {r} has zero norm")));
            }
            for (acc, x) in diff.iter_mut().zip(row) {
                *acc += sign * x / norm;
            }
        }
    }
    Ok(diff.iter().map(|x| (x / n as f64).powi(2)).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub label: usize,
    pub count: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Macro one-vs-rest AUC; absent when only one class is present.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassCount>,
    pub modality_gap: f64,
}

/// Unmasked inference output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub image_cls: Vec<f64>,
    pub text_cls: Vec<f64>,
}

pub fn predict(params: &AlifuseParams, example: &Example) -> Result<Prediction> {
    let mut tape = GradientTape::new();
    let net = Network::bind_frozen(params, &mut tape);
    let (_, _, zi, zt) = net.encode_pair(&mut tape, &example.image, &example.text)?;
    let logits = net.fuse_classify(&mut tape, zi, zt)?;
    let probs = softmax(tape.value(logits), 1)?.into_data();
    let mut predicted = 0;
    for (c, p) in probs.iter().enumerate() {
        if *p > probs[predicted] {
            predicted = c;
        }
    }
    Ok(Prediction {
        probs,
        predicted,
        image_cls: tape.value(zi).data().to_vec(),
        text_cls: tape.value(zt).data().to_vec(),
    })
}

/// Embeddings of every example: `[n × d]` image and text `[CLS]` features.
pub fn embed_all(params: &AlifuseParams, data: &[Example]) -> Result<(Tensor, Tensor)> {
    let preds = data.iter().map(|e| predict(params, e)).collect::<Result<Vec<_>>>()?;
    stack_embeddings(&preds, params.config().d_model)
}

fn stack_embeddings(preds: &[Prediction], d: usize) -> Result<(Tensor, Tensor)> {
    let n = preds.len();
    let zi = Tensor::matrix(n, d, preds.iter().flat_map(|p| p.image_cls.iter().copied()).collect())?;
    let zt = Tensor::matrix(n, d, preds.iter().flat_map(|p| p.text_cls.iter().copied()).collect())?;
    Ok((zi, zt))
}

/// Accuracy, macro AUC, per-class counts and the modality gap, with no
/// masking.
pub fn evaluate(params: &AlifuseParams, data: &[Example]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation needs at least one example".into()));
    }
    let n_classes = params.config().n_classes;
    if let Some(e) = data.iter().find(|e| e.label >= n_classes) {
        return Err(Error::Label { label: e.label, n_classes });
    }
    let preds = data.iter().map(|e| predict(params, e)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let mut per_class: Vec<ClassCount> =
        (0..n_classes).map(|label| ClassCount { label, count: 0, correct: 0 }).collect();
    for (p, &y) in preds.iter().zip(&labels) {
        per_class[y].count += 1;
        if p.predicted == y {
            per_class[y].correct += 1;
        }
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let auc = macro_auc(&probs, &labels, n_classes)?;
    let (zi, zt) = stack_embeddings(&preds, params.config().d_model)?;
    Ok(EvalReport {
        n: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        auc,
        per_class,
        modality_gap: modality_gap(&zi, &zt)?,
    })
}
