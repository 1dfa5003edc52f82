//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use advflyp::attacks::{
    attack_objective, pgd, pgd_model, AttackConfig, AttackKind, AttackObjective, AttackTarget, Init, ModelObjective,
    ObjectiveValue,
};
use advflyp::data::{decode_shard, encode_shard, read_shard, write_shard, ClassDataset, ImageTextPair};
use advflyp::encoders::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ModelState, Nonlinearity,
    VisionPath,
};
use advflyp::finetune::{run_training, Method, TrainConfig, TrainData};
use advflyp::objectives::{self, FullInputs, LogitTriple, RegFlags};
use advflyp::tensor::{Graph, Tensor, Var};
use common::experiment::{self, Bench, ExpParams, SeedResult};
use common::{central_diff, rel_err, small_model, uniform, unit_rows};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id:>2} [{name}]: {} ({}; {:.1}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

#[derive(Clone, Copy, Debug)]
enum Loss {
    Contrastive,
    ZeroShotCe,
    FeatureReg,
    LogitReg,
    Full,
}

const LOSSES: [Loss; 5] = [Loss::Contrastive, Loss::ZeroShotCe, Loss::FeatureReg, Loss::LogitReg, Loss::Full];

struct Instance {
    model: ModelState<f64>,
    x: Tensor<f64>,
    delta: Tensor<f64>,
    txt: Tensor<f64>,
    cls: Tensor<f64>,
    labels: Vec<usize>,
}

impl Instance {
    fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut model = small_model(seed, Nonlinearity::Tanh, 8);
        model.snapshot_frozen().unwrap();
        // Move θ away from θ₀ so both frozen-path terms are nonzero.
        for (_, t) in model.theta.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.05..0.05));
        }
        Instance {
            model,
            x: uniform(&[4, 12], 0.1, 0.9, &mut r),
            delta: uniform(&[4, 12], -0.05, 0.05, &mut r),
            txt: unit_rows(4, 8, &mut r),
            cls: unit_rows(5, 8, &mut r),
            labels: (0..4).map(|_| r.gen_range(0..5)).collect(),
        }
    }

    fn with_theta(&self, flat: &[f64]) -> ModelState<f64> {
        let mut m = self.model.clone();
        let mut it = flat.iter();
        for (_, t) in m.theta.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
        m
    }

    fn theta_flat(&self) -> Vec<f64> {
        self.model.theta.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    /// Loss value and, when `grad`, its gradients wrt δ and flattened θ.
    fn eval(&self, loss: Loss, model: &ModelState<f64>, delta: &Tensor<f64>, grad: bool) -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let enc = model.bind_vision(&mut g, VisionPath::Target, grad).unwrap();
        let xv = g.constant(self.x.clone());
        let dv = g.leaf(delta.clone(), grad);
        let adv = g.add(xv, dv).unwrap();
        let x_adv = enc.forward(&mut g, adv).unwrap();
        let txt = g.constant(self.txt.clone());
        let value = match loss {
            Loss::Contrastive => objectives::contrastive_loss(&mut g, x_adv, txt, model.tau()).unwrap(),
            Loss::ZeroShotCe => {
                let cls = g.constant(self.cls.clone());
                let per = objectives::zero_shot_ce_per_sample(&mut g, x_adv, cls, &self.labels).unwrap();
                g.mean(per)
            }
            Loss::FeatureReg | Loss::LogitReg | Loss::Full => {
                let frozen = model.bind_vision(&mut g, VisionPath::Frozen, false).unwrap();
                let x_adv_frozen = frozen.forward(&mut g, adv).unwrap();
                let x_clean = enc.forward(&mut g, xv).unwrap();
                let inputs = FullInputs {
                    x_adv,
                    x_adv_frozen,
                    x_clean,
                    txt,
                };
                match loss {
                    Loss::FeatureReg => objectives::feature_reg(&mut g, x_adv, x_adv_frozen, x_clean).unwrap(),
                    Loss::LogitReg => {
                        let lt = objectives::logit_matrices(&mut g, x_adv, x_adv_frozen, x_clean, txt).unwrap();
                        objectives::logit_reg(&mut g, &lt).unwrap()
                    }
                    _ => objectives::full_objective(&mut g, &inputs, model.tau(), RegFlags::BOTH).unwrap().total,
                }
            }
        };
        let v = g.item(value);
        if !grad {
            return (v, Vec::new(), Vec::new());
        }
        let mut grads = g.backward(value).unwrap();
        let gd = grads.take(dv).unwrap().data().to_vec();
        let by_name: std::collections::HashMap<&str, Var> =
            enc.param_vars().iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let gt = model
            .theta
            .iter()
            .flat_map(|(name, t)| match grads.get(by_name[name.as_str()]) {
                Some(gr) => gr.data().to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect();
        (v, gd, gt)
    }
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    for seed in 0..20 {
        let inst = Instance::new(1000 + seed);
        for loss in LOSSES {
            let (_, gd, gt) = inst.eval(loss, &inst.model, &inst.delta, true);
            let nd = central_diff(
                |d| {
                    let t = Tensor::from_vec(vec![4, 12], d.to_vec()).unwrap();
                    inst.eval(loss, &inst.model, &t, false).0
                },
                inst.delta.data(),
            );
            let nt = central_diff(|th| inst.eval(loss, &inst.with_theta(th), &inst.delta, false).0, &inst.theta_flat());
            for (e, wrt) in [(rel_err(&gd, &nd), "pixels"), (rel_err(&gt, &nt), "theta")] {
                if e > worst {
                    worst = e;
                    where_ = format!("{loss:?} wrt {wrt}, instance {seed}");
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 120.0,
        format!("max rel err {worst:.2e} at {where_}; 5 losses x 20 instances; {secs:.1}s < 120s"),
    )
}

// ---------------------------------------------------------------- 2

fn closed_forms() -> Verdict {
    let rows = |r: &[&[f64]]| Tensor::from_vec(vec![r.len(), r[0].len()], r.concat()).unwrap();
    let mut g = Graph::new();

    let same = g.constant(rows(&[&[1.0, 0.0][..]; 4]));
    let l = objectives::contrastive_loss(&mut g, same, same, 0.07).unwrap();
    let e_uniform = (g.item(l) - 4f64.ln()).abs();

    let eye = g.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let l = objectives::contrastive_loss(&mut g, eye, eye, 1.0).unwrap();
    let e_identity = (g.item(l) - 0.3132617).abs();

    let p = g.constant(rows(&[&[0.5, 0.5]]));
    let q = g.constant(rows(&[&[0.9, 0.1]]));
    let l = objectives::logit_reg(&mut g, &LogitTriple { adv: p, adv_frozen: q, clean: q }).unwrap();
    let e_logit = (g.item(l) - 1.0216512).abs();

    let a = g.constant(rows(&[&[1.0, 0.0]]));
    let b = g.constant(rows(&[&[0.0, 1.0]]));
    let l = objectives::feature_reg(&mut g, a, b, a).unwrap();
    let e_feat = (g.item(l) - 2f64.sqrt()).abs();

    verdict(
        e_uniform < 1e-9 && e_identity < 1e-6 && e_logit < 1e-6 && e_feat < 1e-9,
        format!("|err| log N {e_uniform:.1e}, identity {e_identity:.1e}, logit_reg {e_logit:.1e}, feature_reg {e_feat:.1e}"),
    )
}

// ---------------------------------------------------------------- 3, 5

const KINDS: [AttackKind; 4] = [AttackKind::Ce, AttackKind::Contrastive, AttackKind::Cw, AttackKind::Fare];

struct AttackCase {
    model: usize,
    kind: AttackKind,
    images: Tensor<f64>,
    txt: Tensor<f64>,
    cls: Tensor<f64>,
    labels: Vec<usize>,
    cfg: AttackConfig,
}

impl AttackCase {
    fn random(r: &mut ChaCha8Rng, models: usize, track_best: Option<bool>) -> Self {
        let n = r.gen_range(2..=4);
        let kind = KINDS[r.gen_range(0..4)];
        // A quarter of the pixels sit on the box edges.
        let images = Tensor::from_fn(&[n, 3, 2, 2], |_| match r.gen_range(0..8) {
            0 => 0.0,
            1 => 1.0,
            _ => r.gen_range(0.0..=1.0),
        });
        let epsilon = if r.gen_bool(0.05) { 0.0 } else { r.gen_range(0.0..0.3) };
        let cfg = AttackConfig {
            epsilon,
            step_size: r.gen_range(0.0..0.5),
            steps: r.gen_range(1..=3),
            init: if track_best.is_some() || r.gen_bool(0.5) { Init::Zero } else { Init::Uniform },
            objective: kind,
            track_best: track_best.unwrap_or_else(|| r.gen_bool(0.5)),
            seed: r.gen(),
        };
        AttackCase {
            model: r.gen_range(0..models),
            kind,
            images,
            txt: unit_rows(n, 8, r),
            cls: unit_rows(5, 8, r),
            labels: (0..n).map(|_| r.gen_range(0..5)).collect(),
            cfg,
        }
    }

    fn target(&self) -> AttackTarget<'_, f64> {
        match self.kind {
            AttackKind::Contrastive => AttackTarget::Texts(&self.txt),
            AttackKind::Ce | AttackKind::Cw => AttackTarget::Labels {
                labels: &self.labels,
                class_txt: &self.cls,
            },
            AttackKind::Fare => AttackTarget::Unlabeled,
        }
    }
}

fn attack_models() -> Vec<ModelState<f64>> {
    // Tanh keeps every embedding nonzero; tiny ReLU stacks can map an input to
    // the zero vector, which the encoder rejects.
    (0..8).map(|s| small_model(s, Nonlinearity::Tanh, 8)).collect()
}

fn feasibility() -> Verdict {
    let models = attack_models();
    let mut r = rng(3);
    let mut violations = 0usize;
    let mut per_kind = [0usize; 4];
    for _ in 0..10_000 {
        let c = AttackCase::random(&mut r, models.len(), None);
        per_kind[KINDS.iter().position(|&k| k == c.kind).unwrap()] += 1;
        let mut arng = rng(c.cfg.seed);
        let out = pgd_model(&c.cfg, &models[c.model], &c.images, c.target(), &mut arng).unwrap();
        let bad = out.delta.data().iter().zip(c.images.data()).any(|(&d, &x)| {
            let p = x + d;
            d.abs() > c.cfg.epsilon + 1e-12 || !(0.0..=1.0).contains(&p)
        });
        violations += bad as usize;
    }
    verdict(
        violations == 0,
        format!("{violations} violations in 10000 attacks (ce/contrastive/cw/fare = {per_kind:?})"),
    )
}

fn best_iterate_dominance() -> Verdict {
    let models = attack_models();
    let mut r = rng(5);
    let mut violations = 0usize;
    let mut min_gain = f64::INFINITY;
    for _ in 0..1000 {
        let c = AttackCase::random(&mut r, models.len(), Some(true));
        let m = &models[c.model];
        let mut arng = rng(c.cfg.seed);
        let out = pgd_model(&c.cfg, m, &c.images, c.target(), &mut arng).unwrap();
        let clean = attack_objective(c.kind, m, &c.images, c.target(), &Tensor::zeros(c.images.shape())).unwrap();
        let gain = out.achieved_objective - clean;
        min_gain = min_gain.min(gain);
        violations += (gain < 0.0) as usize;
    }
    verdict(
        violations == 0,
        format!("{violations} violations in 1000 instances; min achieved - clean = {min_gain:.3e}"),
    )
}

// ---------------------------------------------------------------- 4

struct Linear(Tensor<f64>);

impl AttackObjective<f64> for Linear {
    fn evaluate(&self, g: &mut Graph<f64>, adv: Var) -> advflyp::Result<ObjectiveValue> {
        let w = g.constant(self.0.clone());
        let p = g.mul(adv, w)?;
        Ok(ObjectiveValue::PerSample(g.row_sum(p)?))
    }
}

fn linear_closed_form() -> Verdict {
    let mut r = rng(4);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let n = r.gen_range(1..=4);
        let w = Tensor::from_fn(&[n, 12], |_| match r.gen_range(0..6) {
            0 => 0.0,
            _ => r.gen_range(-1.0..1.0),
        });
        let x = uniform(&[n, 12], 0.3, 0.7, &mut r);
        let eps: f64 = r.gen_range(1e-4..0.2);
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: eps,
            steps: 1,
            init: Init::Zero,
            objective: AttackKind::Ce,
            track_best: false,
            seed: 0,
        };
        let out = pgd(&cfg, &Linear(w.clone()), &x, &mut r).unwrap();
        let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        mismatches += out
            .delta
            .data()
            .iter()
            .zip(w.data())
            .filter(|(&d, &wv)| d.to_bits() != (eps * sign(wv)).to_bits() && !(d == 0.0 && wv == 0.0))
            .count();
    }
    verdict(mismatches == 0, format!("{mismatches} elementwise mismatches over 200 surrogates"))
}

// ---------------------------------------------------------------- 6

fn delta_grad(obj: &dyn AttackObjective<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let dv = g.leaf(Tensor::zeros(x.shape()), true);
    let adv = g.add(xv, dv).unwrap();
    let scalar = match obj.evaluate(&mut g, adv).unwrap() {
        ObjectiveValue::PerSample(v) => g.mean(v),
        ObjectiveValue::Joint(v) => v,
    };
    g.backward(scalar).unwrap().take(dv).unwrap()
}

fn joint_vs_independent() -> Verdict {
    let mut r = rng(6);
    let model = small_model(6, Nonlinearity::Tanh, 8);
    let class_txt = unit_rows(2, 8, &mut r);
    let labels = [0usize, 1];
    let batch = |x2: &Tensor<f64>, x1: &Tensor<f64>| {
        let mut data = x1.data().to_vec();
        data.extend_from_slice(x2.data());
        Tensor::from_vec(vec![2, 12], data).unwrap()
    };
    let x1 = uniform(&[1, 12], 0.2, 0.8, &mut r);
    let x2 = uniform(&[1, 12], 0.2, 0.8, &mut r);
    let x2b = uniform(&[1, 12], 0.2, 0.8, &mut r);
    let grads = |x: &Tensor<f64>| {
        let joint = ModelObjective::new(&model, AttackKind::Contrastive, AttackTarget::Texts(&class_txt), x).unwrap();
        let ce_target = AttackTarget::Labels {
            labels: &labels,
            class_txt: &class_txt,
        };
        let ce = ModelObjective::new(&model, AttackKind::Ce, ce_target, x).unwrap();
        let row0 = |t: Tensor<f64>| t.data()[..12].to_vec();
        (row0(delta_grad(&joint, x)), row0(delta_grad(&ce, x)))
    };
    let (joint_a, ce_a) = grads(&batch(&x2, &x1));
    let (joint_b, ce_b) = grads(&batch(&x2b, &x1));
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let differs = max_diff(&joint_a, &ce_a);
    let coupled = max_diff(&joint_a, &joint_b);
    let ce_moved = max_diff(&ce_a, &ce_b);
    verdict(
        differs > 1e-6 && coupled > 1e-6 && ce_moved == 0.0,
        format!(
            "max |g_joint - g_ce| for δ1 = {differs:.3e}; changing x2 moves g_joint by {coupled:.3e} and g_ce by {ce_moved:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

struct Experiment {
    params: ExpParams,
    seeds: Vec<SeedResult>,
    elapsed: Duration,
}

fn run_experiment() -> Experiment {
    let params = ExpParams::default();
    let start = Instant::now();
    let b = experiment::bench(&params);
    let seeds = (0..3).map(|s| experiment::run_seed(&b, &params, s)).collect();
    Experiment {
        params,
        seeds,
        elapsed: start.elapsed(),
    }
}

fn mean(seeds: &[SeedResult], f: impl Fn(&SeedResult) -> f64) -> f64 {
    seeds.iter().map(f).sum::<f64>() / seeds.len() as f64
}

fn directional(exp: &Experiment) -> Verdict {
    let s = &exp.seeds;
    let pre_clean = mean(s, |r| r.pretrained.clean);
    let pre_rob = mean(s, |r| r.pretrained.robust);
    let adv_clean = mean(s, |r| r.advflyp.clean);
    let adv_rob = mean(s, |r| r.advflyp.robust);
    let full_clean = mean(s, |r| r.full.clean);
    let full_rob = mean(s, |r| r.full.robust);
    let feat_clean = mean(s, |r| r.feat_only.clean);
    let checks = [
        ("a", pre_clean - pre_rob >= 0.30, format!("pre clean {pre_clean:.4} - robust {pre_rob:.4} >= 0.30")),
        ("b", adv_rob - pre_rob >= 0.20, format!("advflyp robust {adv_rob:.4} - pre robust {pre_rob:.4} >= 0.20")),
        ("c", full_rob >= adv_rob, format!("full robust {full_rob:.4} >= advflyp robust {adv_rob:.4}")),
        ("d", full_clean >= adv_clean, format!("full clean {full_clean:.4} >= advflyp clean {adv_clean:.4}")),
        ("e", feat_clean > adv_clean, format!("feat-only clean {feat_clean:.4} > advflyp clean {adv_clean:.4}")),
    ];
    let secs = exp.elapsed.as_secs_f64();
    let mut detail: Vec<String> = checks
        .iter()
        .map(|(id, ok, msg)| format!("({id}) {} {msg}", if *ok { "ok" } else { "FAILED" }))
        .collect();
    detail.push(format!(
        "3 seeds, eps {:.5}, {secs:.0}s < 1200s",
        exp.params.eps_eval
    ));
    verdict(checks.iter().all(|c| c.1) && secs < 1200.0, detail.join("; "))
}

fn cosine_direction(exp: &Experiment) -> Verdict {
    let pre = mean(&exp.seeds, |r| r.pretrained.phi);
    let full = mean(&exp.seeds, |r| r.full.phi);
    verdict(full < pre, format!("mean phi advflyp-full {full:.4} < pretrained {pre:.4}"))
}

fn frozen_integrity(exp: &Experiment) -> Verdict {
    let experiment_ok = exp.seeds.iter().all(|r| r.frozen_intact);
    let params = ExpParams {
        pretrain_epochs: 0,
        ..ExpParams::default()
    };
    let b = experiment::bench(&params);
    let init = experiment::pretrain(&b, &params, 11);
    let small = subset(&b, 256);
    let mut bad = Vec::new();
    for method in [Method::Advflyp, Method::AdvflypFull, Method::Tecoa, Method::Fare, Method::NaiveFlyp] {
        let mut cfg = TrainConfig::new(method, 2);
        cfg.batch_size = 64;
        cfg.seed = 11;
        let out = run_training(&cfg, init.clone(), TrainData::Labeled(&small), &b.vocab, &mut constant_proxy).unwrap();
        let m = &out.model;
        let intact = m.phi.bit_eq(&init.phi) && m.theta0().is_some_and(|t0| t0.bit_eq(&init.theta));
        let moved = !m.theta.bit_eq(&init.theta);
        if !(intact && moved) {
            bad.push(format!("{method} (intact {intact}, theta moved {moved})"));
        }
    }
    verdict(
        experiment_ok && bad.is_empty(),
        format!(
            "experiment models intact: {experiment_ok}; all 5 finetune methods intact with theta moving: {}",
            if bad.is_empty() { "yes".to_string() } else { bad.join(", ") }
        ),
    )
}

fn constant_proxy(_: &ModelState<f64>, _: usize) -> advflyp::Result<f64> {
    Ok(0.5)
}

fn subset(b: &Bench, n: usize) -> ClassDataset {
    b.train.subset(&(0..n).collect::<Vec<_>>())
}

// ---------------------------------------------------------------- 10

fn round_trips() -> Verdict {
    let params = ExpParams {
        pretrain_epochs: 0,
        ..ExpParams::default()
    };
    let b = experiment::bench(&params);
    let mut model = experiment::pretrain(&b, &params, 2);
    model.snapshot_frozen().unwrap();
    for (_, t) in model.theta.iter_mut() {
        t.data_mut()[0] += 0.125;
    }
    let same = |a: &ModelState<f64>, c: &ModelState<f64>| {
        a.theta.bit_eq(&c.theta)
            && a.phi.bit_eq(&c.phi)
            && a.theta0().zip(c.theta0()).is_some_and(|(x, y)| x.bit_eq(y))
            && a.tau().to_bits() == c.tau().to_bits()
            && a.vision_act == c.vision_act
            && a.text_act == c.text_act
    };
    let dir = tempfile::tempdir().unwrap();

    let bytes = write_checkpoint(&model).unwrap();
    let back: ModelState<f64> = read_checkpoint(&bytes).unwrap();
    let ckpt_path = dir.path().join("m.ckpt");
    save_checkpoint(&back, &ckpt_path).unwrap();
    let from_file: ModelState<f64> = load_checkpoint(&ckpt_path).unwrap();
    let ckpt_ok = same(&model, &back)
        && same(&model, &from_file)
        && write_checkpoint(&back).unwrap() == bytes
        && std::fs::read(&ckpt_path).unwrap() == bytes;

    let m32: ModelState<f32> = read_checkpoint(&bytes).unwrap();
    let bytes32 = write_checkpoint(&m32).unwrap();
    let m32_back: ModelState<f32> = read_checkpoint(&bytes32).unwrap();
    let f32_ok = m32.theta.bit_eq(&m32_back.theta) && write_checkpoint(&m32_back).unwrap() == bytes32;

    let pairs: Vec<ImageTextPair> = b
        .train
        .images
        .iter()
        .zip(&b.train.captions)
        .map(|(image, caption)| ImageTextPair {
            image: image.clone(),
            caption: caption.clone(),
        })
        .collect();
    let shard = encode_shard(&pairs).unwrap();
    let decoded = decode_shard(&shard).unwrap();
    let shard_path = dir.path().join("train.shard");
    write_shard(&shard_path, &decoded).unwrap();
    let shard_ok = decoded == pairs
        && encode_shard(&decoded).unwrap() == shard
        && std::fs::read(&shard_path).unwrap() == shard
        && read_shard(&shard_path).unwrap() == pairs;

    let ds_dir = dir.path().join("test");
    b.test.write_dir(&ds_dir).unwrap();
    let dataset_ok = ClassDataset::read_dir(&ds_dir).unwrap() == b.test;

    verdict(
        ckpt_ok && f32_ok && shard_ok && dataset_ok,
        format!(
            "checkpoint f64 {ckpt_ok} ({} bytes), f32 {f32_ok}, shard {shard_ok} ({} pairs, {} bytes), dataset dir {dataset_ok}",
            bytes.len(),
            pairs.len(),
            shard.len()
        ),
    )
}

// ---------------------------------------------------------------- 11

fn early_stopping() -> Verdict {
    let params = ExpParams {
        pretrain_epochs: 0,
        ..ExpParams::default()
    };
    let b = experiment::bench(&params);
    let init = experiment::pretrain(&b, &params, 3);
    let data = subset(&b, 128);
    let mut cfg = TrainConfig::new(Method::Advflyp, 30);
    cfg.batch_size = 64;
    cfg.patience = 10;
    let mut first: Option<ModelState<f64>> = None;
    let mut proxy = |m: &ModelState<f64>, epoch: usize| -> advflyp::Result<f64> {
        if epoch == 1 {
            first = Some(m.clone());
        }
        Ok(0.5)
    };
    let out = run_training(&cfg, init, TrainData::Labeled(&data), &b.vocab, &mut proxy).unwrap();
    let first = first.unwrap();
    let is_first = out.model.theta.bit_eq(&first.theta);
    verdict(
        out.epochs_run == 11 && out.best_epoch == 1 && is_first,
        format!(
            "halted after {} epochs (want 11), best epoch {} (want 1), returned epoch-1 weights: {is_first}",
            out.epochs_run, out.best_epoch
        ),
    )
}

fn main() {
    let mut results = vec![
        run(1, "gradient oracle", gradient_oracle),
        run(2, "closed-form losses", closed_forms),
        run(3, "PGD feasibility", feasibility),
        run(4, "PGD closed form", linear_closed_form),
        run(5, "best-iterate dominance", best_iterate_dominance),
        run(6, "joint vs independent attack", joint_vs_independent),
    ];
    let exp = catch_unwind(run_experiment).ok();
    let missing = || verdict(false, "experiment did not complete");
    results.push(run(7, "directional reproduction", || exp.as_ref().map_or_else(missing, directional)));
    results.push(run(8, "cosine-deviation direction", || {
        exp.as_ref().map_or_else(missing, cosine_direction)
    }));
    results.push(run(9, "frozen-component integrity", || {
        exp.as_ref().map_or_else(missing, frozen_integrity)
    }));
    results.push(run(10, "round trips", round_trips));
    results.push(run(11, "early stopping", early_stopping));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
