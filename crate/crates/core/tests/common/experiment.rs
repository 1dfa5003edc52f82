//! Directional experiment on the frozen synthetic benchmark: clean
//! pretraining, then AdvFLYP, AdvFLYP_full and AdvFLYP + feature
//! regularizer finetuning, each evaluated clean and under PGD-10.

use advflyp::attacks::{AttackConfig, AttackKind};
use advflyp::data::{build_class_texts, synth_generate, ClassDataset, SynthSpec};
use advflyp::encoders::{init_model, EncoderConfig, ModelState, Nonlinearity, TokenSeq, Vocabulary};
use advflyp::eval::{attacked_embeddings, clean_accuracy, cosine_deviation, predict_classes};
use advflyp::finetune::{run_training, AccuracyProxy, Method, TrainConfig, TrainData};

#[derive(Clone, Debug)]
pub struct ExpParams {
    pub amplitude: f64,
    pub eps_eval: f64,
    pub eps_train: f64,
    pub hidden: usize,
    pub embed: usize,
    pub text_dim: usize,
    pub tau: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub eval_steps: usize,
}

impl Default for ExpParams {
    fn default() -> Self {
        ExpParams {
            amplitude: advflyp::data::PATTERN_AMPLITUDE,
            eps_eval: 2.0 / 255.0,
            eps_train: 2.0 / 255.0,
            hidden: 128,
            embed: 32,
            text_dim: 32,
            tau: 0.07,
            pretrain_epochs: 20,
            pretrain_lr: 1e-3,
            finetune_epochs: 10,
            finetune_lr: 3e-4,
            batch_size: 64,
            eval_steps: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Scores {
    pub clean: f64,
    pub robust: f64,
    pub phi: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SeedResult {
    pub pretrained: Scores,
    pub advflyp: Scores,
    pub full: Scores,
    pub feat_only: Scores,
    /// φ and θ₀ of every finetuned model are bit-identical to the
    /// pretrained model's φ and θ.
    pub frozen_intact: bool,
}

pub struct Bench {
    pub train: ClassDataset,
    pub proxy: ClassDataset,
    pub test: ClassDataset,
    pub vocab: Vocabulary,
    pub class_texts: Vec<TokenSeq>,
}

pub fn bench(p: &ExpParams) -> Bench {
    let spec = SynthSpec {
        pattern_amplitude: p.amplitude,
        ..SynthSpec::benchmark()
    };
    let data = synth_generate(&spec).unwrap();
    let train = data.train_dataset();
    // Held-out images cycle through the concepts; every fourth cycle scores
    // epochs and the rest is the test split.
    let k = data.eval.num_classes();
    let (proxy_idx, test_idx): (Vec<usize>, Vec<usize>) = (0..data.eval.len()).partition(|i| (i / k) % 4 == 0);
    let proxy = data.eval.subset(&proxy_idx);
    let test = data.eval.subset(&test_idx);
    let prompts = train.class_prompts().unwrap();
    let vocab = Vocabulary::from_texts(train.captions.iter().chain(&prompts).map(String::as_str));
    let class_texts = build_class_texts(&test, &vocab, 16).unwrap();
    Bench {
        train,
        proxy,
        test,
        vocab,
        class_texts,
    }
}

pub fn eval_attack(p: &ExpParams) -> AttackConfig {
    AttackConfig::evaluation(AttackKind::Ce, p.eps_eval, p.eval_steps)
}

pub fn score(model: &ModelState<f64>, b: &Bench, p: &ExpParams) -> Scores {
    let class_emb = model.encode_texts(&b.class_texts).unwrap();
    let clean = clean_accuracy(model, &b.test, &class_emb).unwrap();
    let (c, a) = attacked_embeddings(model, &b.test, &class_emb, &eval_attack(p)).unwrap();
    let pred = predict_classes(&a, &class_emb).unwrap();
    let hits = pred.iter().zip(&b.test.labels).filter(|(x, y)| x == y).count();
    let (_, phi) = cosine_deviation(&c, &a).unwrap();
    Scores {
        clean,
        robust: hits as f64 / b.test.len() as f64,
        phi,
    }
}

pub fn pretrain(b: &Bench, p: &ExpParams, seed: u64) -> ModelState<f64> {
    let vision = EncoderConfig {
        input_dim: b.train.images[0].numel(),
        hidden_dims: vec![p.hidden],
        embed_dim: p.embed,
        nonlinearity: Nonlinearity::Relu,
        seed: 0,
        vocab_size: None,
    };
    let text = EncoderConfig {
        input_dim: p.text_dim,
        hidden_dims: vec![p.text_dim],
        embed_dim: p.embed,
        nonlinearity: Nonlinearity::Relu,
        seed: 0,
        vocab_size: Some(b.vocab.len()),
    };
    let model = init_model(&vision, &text, p.tau, seed).unwrap();
    let mut cfg = TrainConfig::new(Method::Pretrain, p.pretrain_epochs);
    cfg.batch_size = p.batch_size;
    cfg.lr0 = p.pretrain_lr;
    cfg.seed = seed;
    let mut proxy = AccuracyProxy::for_config(&cfg, &b.proxy, &b.vocab).unwrap();
    run_training(&cfg, model, TrainData::Labeled(&b.train), &b.vocab, &mut proxy)
        .unwrap()
        .model
}

pub fn finetune(b: &Bench, p: &ExpParams, init: &ModelState<f64>, method: Method, logit: bool, feat: bool, seed: u64) -> ModelState<f64> {
    let mut cfg = TrainConfig::new(method, p.finetune_epochs);
    cfg.batch_size = p.batch_size;
    cfg.lr0 = p.finetune_lr;
    cfg.seed = seed;
    cfg.reg_logit = logit;
    cfg.reg_feat = feat;
    cfg.attack.epsilon = p.eps_train;
    cfg.attack.step_size = p.eps_train;
    let mut proxy = AccuracyProxy::for_config(&cfg, &b.proxy, &b.vocab).unwrap();
    run_training(&cfg, init.clone(), TrainData::Labeled(&b.train), &b.vocab, &mut proxy)
        .unwrap()
        .model
}

pub fn run_seed(b: &Bench, p: &ExpParams, seed: u64) -> SeedResult {
    let pre = pretrain(b, p, seed);
    let adv = finetune(b, p, &pre, Method::Advflyp, false, false, seed);
    let full = finetune(b, p, &pre, Method::AdvflypFull, true, true, seed);
    let feat = finetune(b, p, &pre, Method::Advflyp, false, true, seed);
    let frozen_intact = [&adv, &full, &feat]
        .iter()
        .all(|m| m.phi.bit_eq(&pre.phi) && m.theta0().is_some_and(|t0| t0.bit_eq(&pre.theta)));
    SeedResult {
        pretrained: score(&pre, b, p),
        advflyp: score(&adv, b, p),
        full: score(&full, b, p),
        feat_only: score(&feat, b, p),
        frozen_intact,
    }
}
