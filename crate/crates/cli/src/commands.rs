use std::fs;
use std::path::{Path, PathBuf};

use advflyp::data::{load_manifest, synth_generate, ClassDataset, ImageTextPair, SynthSpec};
use advflyp::encoders::{init_model, load_checkpoint, save_checkpoint, EncoderConfig, ModelState, Nonlinearity, Vocabulary};
use advflyp::eval::{evaluate, export_embeddings, parse_attack_list};
use advflyp::finetune::{run_training, write_log, AccuracyProxy, Method, TrainConfig, TrainData, TrainOutcome};
use advflyp::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::Command;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Pretrain {
            data,
            config,
            out,
            proxy,
            log,
        } => pretrain(&data, &config, &out, proxy.as_deref(), log.as_deref()),
        Command::Finetune {
            method,
            data,
            init,
            config,
            out,
            reg_logit,
            reg_feat,
            proxy,
            log,
        } => {
            let method: Method = method.parse()?;
            if method == Method::Pretrain {
                return Err(Error::Config("use the pretrain subcommand for clean pretraining".into()));
            }
            let flags = Flags { reg_logit, reg_feat };
            finetune(method, &data, &init, &config, &out, flags, proxy.as_deref(), log.as_deref())
        }
        Command::Eval {
            ckpt,
            data,
            attacks,
            report,
            csv,
        } => eval(&ckpt, &data, &attacks, &report, csv.as_deref()),
        Command::ExportEmbeddings { ckpt, data, out, attack } => export(&ckpt, &data, &out, &attack),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SynthSpec = match spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::benchmark(),
    };
    let data = synth_generate(&spec)?;
    data.train_dataset().write_dir(out.join("train"))?;
    data.eval.write_dir(out.join("eval"))?;
    log::info!(
        "wrote {} training pairs and {} held-out images to {}",
        data.train.len(),
        data.eval.len(),
        out.display()
    );
    Ok(())
}

/// Training examples: a labeled dataset directory (or a directory with a
/// `train/` split), or a `path<TAB>caption` manifest file.
enum Loaded {
    Labeled(ClassDataset),
    Pairs(Vec<ImageTextPair>),
}

impl Loaded {
    fn view(&self) -> TrainData<'_> {
        match self {
            Loaded::Labeled(d) => TrainData::Labeled(d),
            Loaded::Pairs(p) => TrainData::Pairs(p),
        }
    }

    fn texts(&self) -> Result<Vec<String>> {
        Ok(match self {
            Loaded::Labeled(d) => {
                let mut t = d.captions.clone();
                t.extend(d.class_prompts()?);
                t
            }
            Loaded::Pairs(p) => p.iter().map(|x| x.caption.clone()).collect(),
        })
    }
}

fn load_train(data: &Path) -> Result<Loaded> {
    if data.is_file() {
        return Ok(Loaded::Pairs(load_manifest(data)?));
    }
    let split = data.join("train");
    let dir = if split.is_dir() { split } else { data.to_path_buf() };
    Ok(Loaded::Labeled(ClassDataset::read_dir(dir)?))
}

fn split_dir(data: &Path, split: &str) -> PathBuf {
    let sub = data.join(split);
    if sub.is_dir() {
        sub
    } else {
        data.to_path_buf()
    }
}

fn load_proxy(data: &Path, proxy: Option<&Path>) -> Result<ClassDataset> {
    let dir = match proxy {
        Some(p) => p.to_path_buf(),
        None if data.join("eval").is_dir() => data.join("eval"),
        None => {
            return Err(Error::Config(
                "no labeled proxy split: pass --proxy or use a data directory with eval/".into(),
            ))
        }
    };
    ClassDataset::read_dir(dir)
}

/// Architecture section of the pretraining config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct ModelSpec {
    hidden_dims: Vec<usize>,
    embed_dim: usize,
    text_dim: usize,
    text_hidden_dims: Vec<usize>,
    tau: f64,
    nonlinearity: Nonlinearity,
    seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden_dims: vec![128],
            embed_dim: 32,
            text_dim: 32,
            text_hidden_dims: vec![32],
            tau: 0.07,
            nonlinearity: Nonlinearity::Relu,
            seed: 0,
        }
    }
}

/// Facts about a checkpoint that its binary format does not carry, stored
/// in `<ckpt>.meta.json` next to the vocabulary in `<ckpt>.vocab`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    vision_act: Nonlinearity,
    text_act: Nonlinearity,
    max_len: usize,
}

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn save_all(out: &Path, model: &ModelState<f64>, vocab: &Vocabulary, max_len: usize) -> Result<()> {
    save_checkpoint(model, out)?;
    write_text(&sidecar(out, ".vocab"), &vocab.to_text())?;
    let meta = CheckpointMeta {
        vision_act: model.vision_act,
        text_act: model.text_act,
        max_len,
    };
    write_text(&sidecar(out, ".meta.json"), &serde_json::to_string_pretty(&meta)?)
}

fn load_all(ckpt: &Path) -> Result<(ModelState<f64>, Vocabulary, usize)> {
    let mut model: ModelState<f64> = load_checkpoint(ckpt)?;
    let vpath = sidecar(ckpt, ".vocab");
    let vocab = Vocabulary::parse(&fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?)?;
    let mpath = sidecar(ckpt, ".meta.json");
    let max_len = if mpath.exists() {
        let meta: CheckpointMeta = read_json(&mpath)?;
        model.vision_act = meta.vision_act;
        model.text_act = meta.text_act;
        meta.max_len
    } else {
        16
    };
    if vocab.len() != model.vocab_size()? {
        return Err(Error::Format(format!(
            "vocabulary has {} tokens but the checkpoint embeds {}",
            vocab.len(),
            model.vocab_size()?
        )));
    }
    Ok((model, vocab, max_len))
}

/// Reads a training config, forcing the method chosen on the command line.
fn train_config(path: &Path, method: Method) -> Result<(TrainConfig, serde_json::Value)> {
    let mut raw: serde_json::Value = read_json(path)?;
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    let defaults = TrainConfig::new(method, 0);
    obj.insert("method".into(), serde_json::to_value(method)?);
    for (key, on) in [("reg_logit", defaults.reg_logit), ("reg_feat", defaults.reg_feat)] {
        obj.entry(key).or_insert(serde_json::Value::Bool(on));
    }
    let cfg: TrainConfig = serde_json::from_value(raw.clone())?;
    cfg.validate()?;
    Ok((cfg, raw))
}

fn finish(out: &Path, outcome: &TrainOutcome<f64>, vocab: &Vocabulary, max_len: usize, log: Option<&Path>) -> Result<()> {
    save_all(out, &outcome.model, vocab, max_len)?;
    if let Some(p) = log {
        write_log(p, &outcome.log)?;
    }
    log::info!(
        "ran {} epochs, kept epoch {} (score {:?}), saved {}",
        outcome.epochs_run,
        outcome.best_epoch,
        outcome.best_score,
        out.display()
    );
    Ok(())
}

fn pretrain(data: &Path, config: &Path, out: &Path, proxy: Option<&Path>, log: Option<&Path>) -> Result<()> {
    let (cfg, raw) = train_config(config, Method::Pretrain)?;
    let spec: ModelSpec = match raw.get("model") {
        Some(m) => serde_json::from_value(m.clone())?,
        None => ModelSpec::default(),
    };
    let train = load_train(data)?;
    let proxy = load_proxy(data, proxy)?;
    let texts = train.texts()?;
    let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
    let image_dim = match &train {
        Loaded::Labeled(d) => d.images.first().map(|i| i.numel()),
        Loaded::Pairs(p) => p.first().map(|x| x.image.numel()),
    }
    .ok_or_else(|| Error::Config("training data is empty".into()))?;
    let vision = EncoderConfig {
        input_dim: image_dim,
        hidden_dims: spec.hidden_dims.clone(),
        embed_dim: spec.embed_dim,
        nonlinearity: spec.nonlinearity,
        seed: 0,
        vocab_size: None,
    };
    let text = EncoderConfig {
        input_dim: spec.text_dim,
        hidden_dims: spec.text_hidden_dims.clone(),
        embed_dim: spec.embed_dim,
        nonlinearity: spec.nonlinearity,
        seed: 0,
        vocab_size: Some(vocab.len()),
    };
    let model = init_model(&vision, &text, spec.tau, spec.seed)?;
    let mut scorer = AccuracyProxy::for_config(&cfg, &proxy, &vocab)?;
    let outcome = run_training(&cfg, model, train.view(), &vocab, &mut scorer)?;
    finish(out, &outcome, &vocab, cfg.max_len, log)
}

struct Flags {
    reg_logit: bool,
    reg_feat: bool,
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    method: Method,
    data: &Path,
    init: &Path,
    config: &Path,
    out: &Path,
    flags: Flags,
    proxy: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let (mut cfg, _) = train_config(config, method)?;
    // Explicit flags select exactly the requested regularizers.
    if flags.reg_logit || flags.reg_feat {
        cfg.reg_logit = flags.reg_logit;
        cfg.reg_feat = flags.reg_feat;
        cfg.validate()?;
    }
    let (model, vocab, _) = load_all(init)?;
    let train = load_train(data)?;
    let proxy = load_proxy(data, proxy)?;
    let mut scorer = AccuracyProxy::for_config(&cfg, &proxy, &vocab)?;
    let outcome = run_training(&cfg, model, train.view(), &vocab, &mut scorer)?;
    finish(out, &outcome, &vocab, cfg.max_len, log)
}

fn dataset_name(dir: &Path) -> String {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
    match (dir.parent().and_then(name), name(dir)) {
        (Some(parent), Some(own)) if own == "eval" => format!("{parent}/{own}"),
        (_, Some(own)) => own,
        _ => dir.display().to_string(),
    }
}

fn eval(ckpt: &Path, data: &Path, attacks: &str, report: &Path, csv: Option<&Path>) -> Result<()> {
    let attacks = parse_attack_list(attacks)?;
    let (model, vocab, max_len) = load_all(ckpt)?;
    let dir = split_dir(data, "eval");
    let ds = ClassDataset::read_dir(&dir)?;
    let class_texts = advflyp::data::build_class_texts(&ds, &vocab, max_len)?;
    let r = evaluate(&model, &ds, &class_texts, &attacks, &dataset_name(&dir))?;
    write_text(report, &serde_json::to_string_pretty(&r)?)?;
    if let Some(csv) = csv {
        let row = r.csv_row(&ckpt.display().to_string());
        let mut text = if csv.exists() {
            fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?
        } else {
            format!("{}\n", r.csv_header())
        };
        text.push_str(&row);
        text.push('\n');
        write_text(csv, &text)?;
    }
    let attacks: Vec<String> = r
        .attacks
        .iter()
        .map(|a| format!("{}@{:.5}: {:.4}", a.name, a.eps, a.robust_acc))
        .collect();
    log::info!("clean {:.4}; {}", r.clean_acc, attacks.join(", "));
    Ok(())
}

fn export(ckpt: &Path, data: &Path, out: &Path, attack: &str) -> Result<()> {
    let mut attacks = parse_attack_list(attack)?;
    if attacks.len() != 1 {
        return Err(Error::Config("export-embeddings takes exactly one attack".into()));
    }
    let (model, vocab, max_len) = load_all(ckpt)?;
    let ds = ClassDataset::read_dir(split_dir(data, "eval"))?;
    let class_texts = advflyp::data::build_class_texts(&ds, &vocab, max_len)?;
    let tsv = export_embeddings(&model, &ds, &class_texts, &attacks.remove(0))?;
    write_text(out, &tsv)
}
