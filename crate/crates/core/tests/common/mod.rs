//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use alifuse::data::{
    generate_synthetic_dataset, Example, Preprocess, SynthSpec, TemplateSet, TokenSequence, CLS_ID, PAD_ID,
};
use alifuse::model::{AlifuseParams, ModelConfig, Network};
use alifuse::objectives::{self, Lambdas};
use alifuse::tensor::{finite_diff_check, GradientTape, RngStream, Tensor, Var};
use alifuse::trainer::batch_loss;
use alifuse::Result;

pub const FD_STEP: f64 = 1e-4;

fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Normal draws pushed at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut RngStream, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + if *v >= k { gap } else { -gap };
            }
        }
    }
    t
}

/// Scalar probe `mean((y - target)²)` used to reduce tensor outputs.
fn probe(tape: &mut GradientTape, y: Var, target: &Tensor) -> Result<Var> {
    let rows: Vec<usize> = (0..target.shape()[0]).collect();
    tape.mse_rows(y, target, &rows)
}

/// Checks `f(x)` reduced through [`probe`] against a random target.
fn check_op<F>(rng: &mut RngStream, x: &Tensor, f: F) -> f64
where
    F: Fn(&mut GradientTape, Var) -> Result<Var>,
{
    let mut tape = GradientTape::new();
    let leaf = tape.constant(x.clone());
    let y = f(&mut tape, leaf).unwrap();
    let target = random(rng, tape.shape(y));
    finite_diff_check(
        |t, v| {
            let y = f(t, v)?;
            probe(t, y, &target)
        },
        x,
        FD_STEP,
    )
    .unwrap()
}

/// Checks a function that already returns a scalar.
fn check_scalar<F>(x: &Tensor, f: F) -> f64
where
    F: Fn(&mut GradientTape, Var) -> Result<Var>,
{
    finite_diff_check(f, x, FD_STEP).unwrap()
}

/// Maximum relative error of every differentiable op for one seed.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = RngStream::new(seed).derive(0x6f70);
    let r = &mut rng;
    let mut out = Vec::new();

    let a = random(r, &[3, 4]);
    let b = random(r, &[4, 5]);
    let bt = random(r, &[5, 4]);
    let bias = random(r, &[1, 5]);
    let same = random(r, &[3, 4]);
    let row = random(r, &[1, 4]);
    let s = random(r, &[1, 1]);

    {
        let b = b.clone();
        out.push((
            "matmul/a",
            check_op(r, &a, move |t, x| {
                let w = t.constant(b.clone());
                t.matmul(x, w)
            }),
        ));
    }
    {
        let a = a.clone();
        out.push((
            "matmul/b",
            check_op(r, &b, move |t, x| {
                let l = t.constant(a.clone());
                t.matmul(l, x)
            }),
        ));
    }
    {
        let bt = bt.clone();
        out.push((
            "matmul_nt/a",
            check_op(r, &a, move |t, x| {
                let w = t.constant(bt.clone());
                t.matmul_nt(x, w)
            }),
        ));
    }
    {
        let a = a.clone();
        out.push((
            "matmul_nt/b",
            check_op(r, &bt, move |t, x| {
                let l = t.constant(a.clone());
                t.matmul_nt(l, x)
            }),
        ));
    }
    {
        let (b, bias) = (b.clone(), bias.clone());
        out.push((
            "linear/x",
            check_op(r, &a, move |t, x| {
                let w = t.constant(b.clone());
                let c = t.constant(bias.clone());
                t.linear(x, w, Some(c))
            }),
        ));
    }
    {
        let (a, bias) = (a.clone(), bias.clone());
        out.push((
            "linear/w",
            check_op(r, &b, move |t, x| {
                let l = t.constant(a.clone());
                let c = t.constant(bias.clone());
                t.linear(l, x, Some(c))
            }),
        ));
    }
    {
        let (a, b) = (a.clone(), b.clone());
        out.push((
            "linear/b",
            check_op(r, &bias, move |t, x| {
                let l = t.constant(a.clone());
                let w = t.constant(b.clone());
                t.linear(l, w, Some(x))
            }),
        ));
    }
    {
        let same = same.clone();
        out.push((
            "add",
            check_op(r, &a, move |t, x| {
                let o = t.constant(same.clone());
                t.add(x, o)
            }),
        ));
    }
    {
        let a = a.clone();
        out.push((
            "sub",
            check_op(r, &same, move |t, x| {
                let o = t.constant(a.clone());
                t.sub(o, x)
            }),
        ));
    }
    {
        let row = row.clone();
        out.push((
            "add_row/x",
            check_op(r, &a, move |t, x| {
                let v = t.constant(row.clone());
                t.add_row(x, v)
            }),
        ));
    }
    {
        let a = a.clone();
        out.push((
            "add_row/row",
            check_op(r, &row, move |t, x| {
                let m = t.constant(a.clone());
                t.add_row(m, x)
            }),
        ));
    }
    out.push(("scale", check_op(r, &a, |t, x| t.scale(x, -1.7))));
    {
        let s = s.clone();
        out.push((
            "mul_scalar/x",
            check_op(r, &a, move |t, x| {
                let c = t.constant(s.clone());
                t.mul_scalar(x, c)
            }),
        ));
    }
    {
        let a = a.clone();
        out.push((
            "mul_scalar/s",
            check_op(r, &s, move |t, x| {
                let m = t.constant(a.clone());
                t.mul_scalar(m, x)
            }),
        ));
    }
    out.push(("exp", check_op(r, &a, |t, x| t.exp(x))));
    let kinked = away_from(r, &[3, 4], &[-0.5, 0.0, 0.5], 1e-2);
    out.push(("clamp", check_op(r, &kinked, |t, x| t.clamp(x, -0.5, 0.5))));
    out.push(("relu", check_op(r, &kinked, |t, x| t.relu(x))));
    out.push(("gelu", check_op(r, &a, |t, x| t.gelu(x))));
    out.push(("softmax/rows", check_op(r, &a, |t, x| t.softmax(x, 1))));
    out.push(("softmax/cols", check_op(r, &a, |t, x| t.softmax(x, 0))));
    out.push(("masked_softmax_rows", check_op(r, &a, |t, x| t.masked_softmax_rows(x, &[true, false, true, true]))));
    let gamma = random(r, &[1, 4]);
    let beta = random(r, &[1, 4]);
    {
        let (g, bb) = (gamma.clone(), beta.clone());
        out.push((
            "layer_norm/x",
            check_op(r, &a, move |t, x| {
                let g = t.constant(g.clone());
                let bb = t.constant(bb.clone());
                t.layer_norm(x, g, bb, 1e-5)
            }),
        ));
    }
    {
        let (a, bb) = (a.clone(), beta.clone());
        out.push((
            "layer_norm/gamma",
            check_op(r, &gamma, move |t, x| {
                let m = t.constant(a.clone());
                let bb = t.constant(bb.clone());
                t.layer_norm(m, x, bb, 1e-5)
            }),
        ));
    }
    {
        let (a, g) = (a.clone(), gamma.clone());
        out.push((
            "layer_norm/beta",
            check_op(r, &beta, move |t, x| {
                let m = t.constant(a.clone());
                let g = t.constant(g.clone());
                t.layer_norm(m, g, x, 1e-5)
            }),
        ));
    }
    out.push(("transpose", check_op(r, &a, |t, x| t.transpose(x))));
    out.push(("slice_cols", check_op(r, &a, |t, x| t.slice_cols(x, 1, 2))));
    {
        let same = same.clone();
        out.push((
            "concat_cols",
            check_op(r, &a, move |t, x| {
                let o = t.constant(same.clone());
                t.concat_cols(&[o, x, x])
            }),
        ));
    }
    {
        let same = same.clone();
        out.push((
            "concat_rows",
            check_op(r, &a, move |t, x| {
                let o = t.constant(same.clone());
                t.concat_rows(&[x, o, x])
            }),
        ));
    }
    out.push(("gather_rows", check_op(r, &a, |t, x| t.gather_rows(x, &[2, 0, 2, 1]))));
    out.push(("sum", check_scalar(&a, |t, x| t.sum(x))));
    out.push(("mean", check_scalar(&a, |t, x| t.mean(x))));
    out.push(("l2_normalize_rows", check_op(r, &a, |t, x| t.l2_normalize_rows(x))));
    out.push(("cross_entropy", check_scalar(&a, |t, x| t.cross_entropy(x, &[(0, 1), (1, 3), (2, 0), (0, 2)]))));
    {
        let target = random(r, &[3, 4]);
        out.push(("mse_rows", check_scalar(&a, move |t, x| t.mse_rows(x, &target, &[0, 2]))));
    }
    out.extend(loss_errors(r));
    out
}

fn tokens(ids: &[usize], max_len: usize) -> TokenSequence {
    let mut all = vec![CLS_ID];
    all.extend_from_slice(ids);
    let length = all.len();
    all.resize(max_len, PAD_ID);
    TokenSequence { pad_mask: (0..max_len).map(|i| i < length).collect(), ids: all, length }
}

fn loss_errors(r: &mut RngStream) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let zi = random(r, &[4, 6]);
    let zt = random(r, &[4, 6]);
    let log_tau = Tensor::scalar(0.07f64.ln() + 0.3 * r.normal());
    {
        let (zt, lt) = (zt.clone(), log_tau.clone());
        out.push((
            "itc/image",
            check_scalar(&zi, move |t, x| {
                let b = t.constant(zt.clone());
                let l = t.constant(lt.clone());
                objectives::itc_loss(t, x, b, l)
            }),
        ));
    }
    {
        let (zi, lt) = (zi.clone(), log_tau.clone());
        out.push((
            "itc/text",
            check_scalar(&zt, move |t, x| {
                let a = t.constant(zi.clone());
                let l = t.constant(lt.clone());
                objectives::itc_loss(t, a, x, l)
            }),
        ));
    }
    {
        let (zi, zt) = (zi.clone(), zt.clone());
        out.push((
            "itc/log_tau",
            check_scalar(&log_tau, move |t, x| {
                let a = t.constant(zi.clone());
                let b = t.constant(zt.clone());
                objectives::itc_loss(t, a, b, x)
            }),
        ));
    }
    let pred = random(r, &[5, 8]);
    let target = random(r, &[5, 8]);
    out.push(("image_recon", check_scalar(&pred, move |t, x| objectives::image_recon_loss(t, x, &target, &[0, 3, 4]))));
    let logits = random(r, &[6, 9]);
    let seq = tokens(&[4, 7, 5, 8], 6);
    out.push(("text_recon", check_scalar(&logits, move |t, x| objectives::text_recon_loss(t, x, &seq, &[1, 3, 4]))));
    let class_logits = random(r, &[3, 3]);
    out.push(("classification", check_scalar(&class_logits, |t, x| objectives::classification_loss(t, x, &[2, 0, 1]))));
    out
}

/// The small configuration used for the whole-model check: `d_model = 8`,
/// one encoder and one decoder block, 9 image rows and `L_max = 8`.
pub fn tiny_setup(seed: u64) -> (AlifuseParams, Vec<Example>) {
    let spec = SynthSpec { n: 2, classes: 3, side: 8, noise: 0.1, missing_rate: 0.0 };
    let records = generate_synthetic_dataset(&spec, seed).unwrap();
    let pre = Preprocess { side: 8, patch_size: 4, max_len: 8, templates: TemplateSet::default() };
    let vocab = pre.vocab(&records, 1);
    let data = pre.examples(&records, &vocab).unwrap();
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        patch_size: 4,
        volume_side: 8,
        vocab_size: vocab.len(),
        max_len: 8,
        fusion_hidden: 8,
        ..ModelConfig::desk()
    };
    let mut params = AlifuseParams::init(&config, seed).unwrap();
    // Move away from the near-symmetric initialisation so every path carries
    // a gradient well above rounding noise, without saturating the softmaxes
    // (saturated outputs leave entries too small for central differences).
    let mut rng = RngStream::new(seed).derive(0x7065);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.2 * rng.normal());
    }
    (params, data)
}

/// Finite-difference check of the weighted total loss over every parameter.
pub fn full_model_error(seed: u64) -> f64 {
    let (params, data) = tiny_setup(seed);
    let flat = params.flatten();
    let x = Tensor::matrix(1, flat.len(), flat).unwrap();
    let batch: Vec<&Example> = data.iter().collect();
    let rng = RngStream::new(seed).derive(0x6d61);
    finite_diff_check(
        |tape, leaf| {
            let bound = params.bind_flat(tape, leaf)?;
            let net = Network::with_bound(&params, bound);
            Ok(batch_loss(tape, &net, &batch, Lambdas::default(), &rng)?.0)
        },
        &x,
        FD_STEP,
    )
    .unwrap()
}
