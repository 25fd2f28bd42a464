use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use alifuse::data::{
    generate_synthetic_dataset, read_dataset, read_manifest, write_dataset, Example, Preprocess, SynthSpec,
    TemplateSet, Vocab,
};
use alifuse::model::{extract_attention_map, AlifuseParams, ModelConfig};
use alifuse::tensor::Tensor;
use alifuse::trainer::{evaluate, load_checkpoint, modality_gap, predict, save_checkpoint, EvalReport, Trainer};
use alifuse::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{sha256_dataset, sha256_file, RunManifest};

pub const VOCAB_NAME: &str = "vocab.json";
pub const METRICS_NAME: &str = "metrics.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

fn preprocess(model: &ModelConfig) -> Preprocess {
    Preprocess {
        side: model.volume_side,
        patch_size: model.patch_size,
        max_len: model.max_len,
        templates: TemplateSet::default(),
    }
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<()> {
    let records = generate_synthetic_dataset(spec, seed)?;
    write_dataset(out, &records)?;
    let mut counts = vec![0usize; spec.classes];
    for r in &records {
        counts[r.label] += 1;
    }
    println!("wrote {} records to {}", records.len(), out.display());
    for (label, n) in counts.iter().enumerate() {
        println!("class {label}: {n}");
    }
    Ok(())
}

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub val: Option<PathBuf>,
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(fs::canonicalize(p)?)
}

fn load_examples(dir: &Path, pre: &Preprocess, vocab: &Vocab) -> Result<Vec<Example>> {
    pre.examples(&read_dataset(dir)?, vocab)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let TrainArgs { dataset, val, mut config, seed, out } = args;
    config.train.seed = seed;
    config.train.validate()?;
    fs::create_dir_all(&out)?;

    let records = read_dataset(&dataset)?;
    let pre = preprocess(&config.model);
    let vocab = pre.vocab(&records, config.min_freq);
    if config.model.vocab_size != 0 && config.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "config vocab_size {} but the dataset yields {} tokens",
            config.model.vocab_size,
            vocab.len()
        )));
    }
    config.model.vocab_size = vocab.len();
    config.model.validate()?;
    let train_data = pre.examples(&records, &vocab)?;
    let val_data = match &val {
        Some(dir) => Some(load_examples(dir, &pre, &vocab)?),
        None => None,
    };

    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".to_string(), sha256_dataset(&dataset)?);
    if let Some(dir) = &val {
        inputs.insert("val_dataset".to_string(), sha256_dataset(dir)?);
    }
    let mut manifest = RunManifest {
        command: "train".into(),
        dataset: absolute(&dataset)?,
        val_dataset: val.as_deref().map(absolute).transpose()?,
        seed,
        output_dir: absolute(&out)?,
        config: config.clone(),
        inputs,
        artifacts: BTreeMap::new(),
    };
    manifest.write(&out)?;
    write_json(&out.join(VOCAB_NAME), &vocab)?;

    let params = AlifuseParams::init(&config.model, seed)?;
    let mut trainer = Trainer::new(params, config.train.clone())?;
    let select_on: &[Example] = val_data.as_deref().unwrap_or(&train_data);
    let mut metrics = BufWriter::new(File::create(out.join(METRICS_NAME))?);
    let mut best = evaluate(&trainer.params, select_on)?.accuracy;
    save_checkpoint(&out.join(BEST_CKPT), &trainer.params, &trainer.optim)?;
    let eval_every = config.train.eval_every;
    let total = config.train.steps;

    let result = trainer.train(&train_data, |t, log| {
        write_json_line(&mut metrics, log)?;
        let at_end = log.step == total;
        if at_end || (eval_every > 0 && log.step % eval_every == 0) {
            let acc = evaluate(&t.params, select_on)?.accuracy;
            println!("step {} loss {:.4} selection accuracy {:.4}", log.step, log.l_total, acc);
            if acc > best {
                best = acc;
                save_checkpoint(&out.join(BEST_CKPT), &t.params, &t.optim)?;
            }
        }
        Ok(())
    });
    metrics.flush()?;
    drop(metrics);
    save_checkpoint(&out.join(FINAL_CKPT), &trainer.params, &trainer.optim)?;
    result?;

    for name in [METRICS_NAME, FINAL_CKPT, BEST_CKPT, VOCAB_NAME] {
        manifest.artifacts.insert(name.to_string(), sha256_file(&out.join(name))?);
    }
    manifest.write(&out)?;
    println!("trained {} steps; best selection accuracy {best:.4}", trainer.step_count());
    Ok(())
}

/// Checkpoint, its vocabulary and the dataset converted with them.
pub struct Loaded {
    pub params: AlifuseParams,
    pub examples: Vec<Example>,
    pub ids: Vec<String>,
    pub vocab: Vocab,
}

pub fn load_for_inference(dataset: &Path, checkpoint: &Path, vocab: Option<&Path>) -> Result<Loaded> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_NAME),
    };
    let vocab: Vocab = serde_json::from_str(&fs::read_to_string(&vocab_path)?)?;
    if vocab.len() != params.config().vocab_size {
        return Err(Error::Compatibility(format!(
            "vocabulary {} has {} tokens, checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            params.config().vocab_size
        )));
    }
    let pre = preprocess(params.config());
    let examples = load_examples(dataset, &pre, &vocab)?;
    if let Some(e) = examples.iter().find(|e| e.label >= params.config().n_classes) {
        return Err(Error::Compatibility(format!(
            "dataset label {} but the checkpoint has {} classes",
            e.label,
            params.config().n_classes
        )));
    }
    let ids = read_manifest(dataset)?.into_iter().map(|e| e.id).collect();
    Ok(Loaded { params, examples, ids, vocab })
}

pub fn eval(loaded: &Loaded, out: &Path) -> Result<EvalReport> {
    let report = evaluate(&loaded.params, &loaded.examples)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    id: &'a str,
    label: usize,
    image: &'a [f64],
    text: &'a [f64],
}

#[derive(Serialize)]
struct GapFile {
    n: usize,
    modality_gap: f64,
}

#[derive(Serialize)]
struct AttentionRow<'a> {
    id: &'a str,
    label: usize,
    grid_side: usize,
    image_heat: &'a [f64],
    tokens: Vec<&'a str>,
    text_heat: &'a [f64],
}

pub const EMBEDDINGS_NAME: &str = "embeddings.jsonl";
pub const GAP_NAME: &str = "gap.json";
pub const ATTENTION_NAME: &str = "attention.jsonl";

pub fn export_embeddings(loaded: &Loaded, out: &Path) -> Result<f64> {
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join(EMBEDDINGS_NAME))?);
    let d = loaded.params.config().d_model;
    let (mut zi, mut zt) = (Vec::new(), Vec::new());
    for (e, id) in loaded.examples.iter().zip(&loaded.ids) {
        let p = predict(&loaded.params, e)?;
        write_json_line(&mut w, &EmbeddingRow { id, label: e.label, image: &p.image_cls, text: &p.text_cls })?;
        zi.extend(p.image_cls);
        zt.extend(p.text_cls);
    }
    w.flush()?;
    let n = loaded.examples.len();
    let gap = modality_gap(&Tensor::matrix(n, d, zi)?, &Tensor::matrix(n, d, zt)?)?;
    write_json(&out.join(GAP_NAME), &GapFile { n, modality_gap: gap })?;
    println!("exported {n} embeddings; modality gap {gap:.6}");
    Ok(gap)
}

pub fn export_attention(loaded: &Loaded, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join(ATTENTION_NAME))?);
    for (e, id) in loaded.examples.iter().zip(&loaded.ids) {
        let map = extract_attention_map(&loaded.params, &e.image, &e.text)?;
        let tokens = e.text.ids.iter().map(|&t| loaded.vocab.token(t).unwrap_or("[UNK]")).collect();
        write_json_line(
            &mut w,
            &AttentionRow {
                id,
                label: e.label,
                grid_side: map.grid_side,
                image_heat: &map.image_heat,
                tokens,
                text_heat: &map.text_heat,
            },
        )?;
    }
    w.flush()?;
    println!("exported attention for {} records", loaded.examples.len());
    Ok(())
}
