//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Thresholds are fixed here and never tuned.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use mixsep_core::diffmath::{Tape, Tensor};
use mixsep_core::evalsuite::{average_precision, eval_retrieval, eval_simultaneous, pred_dis, EvalConfig, HeadMode, Recall};
use mixsep_core::model::{Model, ModelConfig};
use mixsep_core::objectives::{
    calibration_regularizer, correspondence_loss, disentanglement_loss, infonce_symmetric, total_loss, tv_regularizer,
    LossConfig, LossWeights, RegularizerInputs,
};
use mixsep_core::simvol::{heatmap, pooled_score, similarity_volume};
use mixsep_core::synthworld::{make_datasets, Dataset, KeyedRng, Split, Stream, WorldConfig};
use mixsep_core::trainer::{assemble_batch, batch_features, loss_grad_check, TrainConfig, Trainer};

const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const BRUTE_TRIALS: usize = 100;
const BRUTE_TOL: f64 = 1e-5;
/// "Exact" AP: agreement up to summation-order round-off.
const AP_TOL: f64 = 1e-12;
const INFONCE_TOL: f64 = 1e-6;
const SIMUL_MIOU: f64 = 0.35;
const CLEAN_R1: f64 = 0.6;
const GALLERY: usize = 64;
const LEAKAGE_R10: f64 = 0.31;
const PRED_DIS: f64 = 0.95;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_LEAKAGE_RATIO: f64 = 2.0;
const ABLATION_CLEAN_GAP: f64 = 0.15;
const DETERMINISM_STEPS: u64 = 50;

struct Outcome {
    failed: Vec<String>,
}

impl Outcome {
    fn report(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn random_tensor(rng: &mut KeyedRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

// ---------------------------------------------------------------- 1

fn gradient_oracle(out: &mut Outcome) {
    let start = Instant::now();
    let ds = Dataset::generate(&WorldConfig {
        sound_pairs: 2,
        speech_pairs: 2,
        extended_triplets: 2,
        ..WorldConfig::default()
    })
    .expect("world");
    let model = Model::new(ModelConfig::default(), 0).expect("model");
    let checks = loss_grad_check(&model, &ds, &LossConfig::default(), 0).expect("grad check");
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|c| format!("{}={:.2e}", c.loss, c.max_rel_error))
        .collect::<Vec<_>>()
        .join(" ");
    out.report(
        "1 gradient oracle",
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max rel error {detail} (< {GRAD_TOL:e}), {:.1}s (< {}s)", elapsed.as_secs_f64(), GRAD_BUDGET.as_secs()),
    );
}

// ---------------------------------------------------------------- 2

fn naive_volume(a: &Tensor, v: &Tensor) -> Vec<f64> {
    let (c, k, f, t) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let (h, w) = (v.shape()[2], v.shape()[3]);
    let mut out = Vec::new();
    for ki in 0..k {
        for fi in 0..f {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        let mut s = 0.0;
                        for ci in 0..c {
                            s += a.at(&[ci, ki, fi, ti]) as f64 * v.at(&[ci, ki, hi, wi]) as f64;
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    out
}

fn naive_pooled(s: &Tensor) -> f64 {
    let (f, t, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let mut total = 0.0;
    for fi in 0..f {
        for ti in 0..t {
            let mut m = f64::NEG_INFINITY;
            for hi in 0..h {
                for wi in 0..w {
                    m = m.max(s.at(&[fi, ti, hi, wi]) as f64);
                }
            }
            total += m;
        }
    }
    total / (f * t) as f64
}

fn naive_heatmap(s: &Tensor, t0: usize, t1: usize) -> Vec<f64> {
    let (f, h, w) = (s.shape()[0], s.shape()[2], s.shape()[3]);
    let mut out = Vec::new();
    for hi in 0..h {
        for wi in 0..w {
            let mut acc = 0.0;
            for fi in 0..f {
                for ti in t0..t1 {
                    acc += s.at(&[fi, ti, hi, wi]) as f64;
                }
            }
            out.push(acc / (f * (t1 - t0)) as f64);
        }
    }
    out
}

/// Precision at every positive, counting all pixels scored at least as
/// high, averaged over positives.
fn naive_ap(scores: &[f32], pos: &[bool]) -> f64 {
    let n_pos = pos.iter().filter(|&&p| p).count();
    let mut sum = 0.0;
    for i in 0..scores.len() {
        if pos[i] {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let tp = above.iter().filter(|&&j| pos[j]).count();
            sum += tp as f64 / above.len() as f64;
        }
    }
    sum / n_pos as f64
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn brute_force(out: &mut Outcome) {
    let mut rng = KeyedRng::new(2, Stream::Fixture, 0);
    let (mut vol, mut pool, mut heat, mut ap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..BRUTE_TRIALS {
        let (c, k) = (rng.gen_range(1..6), rng.gen_range(1..4));
        let (f, t, h, w) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..5));
        let a = random_tensor(&mut rng, &[c, k, f, t]);
        let v = random_tensor(&mut rng, &[c, k, h, w]);
        let s = similarity_volume(&a, &v).expect("volume");
        vol = vol.max(max_diff(s.data(), &naive_volume(&a, &v)));

        let agg = random_tensor(&mut rng, &[f, t, h, w]);
        pool = pool.max((pooled_score(&agg).expect("pooled") as f64 - naive_pooled(&agg)).abs());
        let t0 = rng.gen_range(0..t);
        let t1 = rng.gen_range(t0 + 1..=t);
        let hm = heatmap(&agg, Some((t0, t1))).expect("heatmap");
        heat = heat.max(max_diff(hm.data(), &naive_heatmap(&agg, t0, t1)));
        let full = heatmap(&agg, None).expect("heatmap");
        heat = heat.max(max_diff(full.data(), &naive_heatmap(&agg, 0, t)));

        let n = rng.gen_range(1..=16);
        // coarse levels force ties
        let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..5) as f32 / 4.0).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let forced = rng.gen_range(0..n);
        pos[forced] = true;
        ap = ap.max((average_precision(&scores, &pos) - naive_ap(&scores, &pos)).abs());
    }
    out.report(
        "2 brute-force equivalence",
        vol <= BRUTE_TOL && pool <= BRUTE_TOL && heat <= BRUTE_TOL && ap <= AP_TOL,
        format!(
            "{BRUTE_TRIALS} trials: volume {vol:.1e}, pooled {pool:.1e}, heatmap {heat:.1e} (<= {BRUTE_TOL:e}); AP {ap:.1e} (<= {AP_TOL:e})"
        ),
    );
}

// ---------------------------------------------------------------- 3

fn analytic_identities(out: &mut Outcome) {
    let mut rng = KeyedRng::new(3, Stream::Fixture, 0);
    let mut infonce_err = 0.0f64;
    for b in [2usize, 3, 8, 16, 64] {
        let c: f64 = rng.gen_range(-5.0..5.0);
        let tau: f64 = rng.gen_range(0.05..2.0);
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::full(&[b, b], c));
        let t = tape.constant(Tensor::scalar(tau));
        let l = infonce_symmetric(&mut tape, s, t).expect("infonce");
        infonce_err = infonce_err.max((tape.value(l).item() - (b as f64).ln()).abs());
    }

    let ds = Dataset::generate(&WorldConfig {
        sound_pairs: 4,
        speech_pairs: 4,
        extended_triplets: 2,
        ..WorldConfig::default()
    })
    .expect("world");
    let model = Model::new(ModelConfig::default(), 1).expect("model");
    let inputs = assemble_batch(&ds, 1, 0, 4, 0.5).expect("batch");
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, false);
    let batch = batch_features(&model, &mut tape, &bound, &inputs).expect("features");
    let zero = LossWeights::contrastive_only();
    let total = total_loss(&mut tape, &batch, bound.tau, &zero, &RegularizerInputs::default()).expect("total");
    let cor = correspondence_loss(&mut tape, &batch, bound.tau).expect("cor");
    let dis = disentanglement_loss(&mut tape, &batch, bound.tau).expect("dis");
    let sum = tape.add(cor, dis).expect("sum");
    let (lhs, rhs) = (tape.value(total.total).item(), tape.value(sum).item());
    let bitwise = lhs.to_bits() == rhs.to_bits();

    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::scalar(1.0));
    let cal = calibration_regularizer(&mut tape, one);
    let cal = tape.value(cal).item();

    let mut tv = 0.0f64;
    for _ in 0..10 {
        let (f, t, h, w) = (rng.gen_range(1..5), rng.gen_range(2..8), rng.gen_range(1..5), rng.gen_range(1..5));
        let base: Vec<f64> = (0..f * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let s = Tensor::from_fn(&[f, t, h, w], |i| {
            let (fi, rest) = (i / (t * h * w), i % (h * w));
            base[fi * h * w + rest]
        });
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(s);
        let r = tv_regularizer(&mut tape, v, 1).expect("tv");
        tv = tv.max(tape.value(r).item().abs());
    }
    out.report(
        "3 analytic loss identities",
        infonce_err <= INFONCE_TOL && bitwise && cal == 0.0 && tv == 0.0,
        format!(
            "|infonce - log B| {infonce_err:.1e} (<= {INFONCE_TOL:e}); zero-weight total {lhs} vs L_cor+L_dis {rhs} bitwise {bitwise}; \
             calibration(tau=1) {cal}; TV(time-constant) {tv}"
        ),
    );
}

// ---------------------------------------------------------------- 4, 5, 6

struct Arm {
    model: Model,
    train_time: Duration,
}

fn train_arm(ds: &Dataset, loss: LossConfig) -> Arm {
    let start = Instant::now();
    let train = TrainConfig::default();
    let model = Model::new(ModelConfig::default(), train.seed).expect("model");
    let mut trainer = Trainer::new(ds, model, train, loss).expect("trainer");
    trainer.run().expect("training");
    Arm {
        model: trainer.into_model(),
        train_time: start.elapsed(),
    }
}

fn recall(model: &Model, ds: &Dataset, split: Split, head: HeadMode, mixed: bool, k: usize) -> Recall {
    let cfg = EvalConfig {
        gallery: GALLERY,
        k,
        ..EvalConfig::default()
    };
    eval_retrieval(model, ds, split, head, mixed, &cfg)
        .expect("retrieval")
        .recall
        .expect("recall reported")
}

fn mean_dir(r: &Recall) -> f64 {
    (r.image_to_audio + r.audio_to_image) / 2.0
}

fn fmt_recall(r: &Recall) -> String {
    format!("I->A {:.3} A->I {:.3}", r.image_to_audio, r.audio_to_image)
}

/// Cross-head leakage: speech head on the sound split and sound head on
/// the speech split.
fn leakage(model: &Model, ds: &Dataset) -> [Recall; 2] {
    [
        recall(model, ds, Split::Sound, HeadMode::Speech, false, 10),
        recall(model, ds, Split::Speech, HeadMode::Sound, false, 10),
    ]
}

fn same_type(model: &Model, ds: &Dataset, k: usize) -> [Recall; 2] {
    [
        recall(model, ds, Split::Sound, HeadMode::Sound, false, k),
        recall(model, ds, Split::Speech, HeadMode::Speech, false, k),
    ]
}

fn mean_of(rs: &[Recall]) -> f64 {
    rs.iter().map(mean_dir).sum::<f64>() / rs.len() as f64
}

fn end_to_end(out: &mut Outcome, ds: &Dataset, full: &Arm) {
    let start = Instant::now();
    let model = &full.model;
    let [sound, speech] = eval_simultaneous(model, ds).expect("simultaneous");
    let (ms, mp) = (sound.miou.expect("miou"), speech.miou.expect("miou"));
    out.report(
        "4(a) simultaneous mIoU",
        ms >= SIMUL_MIOU && mp >= SIMUL_MIOU,
        format!("sound head {ms:.3}, speech head {mp:.3} on {} mixtures (>= {SIMUL_MIOU})", sound.samples),
    );

    let r1 = same_type(model, ds, 1);
    let pass = r1.iter().all(|r| r.image_to_audio >= CLEAN_R1 && r.audio_to_image >= CLEAN_R1);
    out.report(
        "4(b) clean retrieval R@1",
        pass,
        format!("sound/sound {}, speech/speech {} (>= {CLEAN_R1}, gallery {GALLERY})", fmt_recall(&r1[0]), fmt_recall(&r1[1])),
    );

    let leak = leakage(model, ds);
    let pass = leak.iter().all(|r| r.image_to_audio <= LEAKAGE_R10 && r.audio_to_image <= LEAKAGE_R10);
    out.report(
        "4(c) cross-head leakage R@10",
        pass,
        format!(
            "speech head on sound {}, sound head on speech {} (<= {LEAKAGE_R10})",
            fmt_recall(&leak[0]),
            fmt_recall(&leak[1])
        ),
    );

    let cfg = EvalConfig::default();
    let pd = pred_dis(model, ds, &cfg).expect("pred dis");
    out.report("4(d) Pred.Dis", pd >= PRED_DIS, format!("{pd:.3} (>= {PRED_DIS})"));

    let total = full.train_time + start.elapsed();
    out.report(
        "4(e) end-to-end runtime",
        total < E2E_BUDGET,
        format!(
            "train {:.0}s + eval {:.0}s (< {}s)",
            full.train_time.as_secs_f64(),
            start.elapsed().as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    );
}

fn ablations(out: &mut Outcome, ds: &Dataset, full: &Arm, cor: &Arm, dis: &Arm) {
    let (leak_full, leak_cor) = (mean_of(&leakage(&full.model, ds)), mean_of(&leakage(&cor.model, ds)));
    let (clean_full, clean_dis) = (mean_of(&same_type(&full.model, ds, 10)), mean_of(&same_type(&dis.model, ds, 10)));
    out.report(
        "5 ablation directions",
        leak_cor >= ABLATION_LEAKAGE_RATIO * leak_full && clean_dis <= clean_full - ABLATION_CLEAN_GAP,
        format!(
            "leakage R@10 cor-only {leak_cor:.3} vs full {leak_full:.3} (>= {ABLATION_LEAKAGE_RATIO}x); \
             clean R@10 dis-only {clean_dis:.3} vs full {clean_full:.3} (<= full - {ABLATION_CLEAN_GAP})"
        ),
    );
}

fn mixed_robustness(out: &mut Outcome, ds: &Dataset, full: &Arm, cor: &Arm) {
    let drop = |m: &Model| {
        let clean = recall(m, ds, Split::Sound, HeadMode::Sound, false, 10);
        let mixed = recall(m, ds, Split::Sound, HeadMode::Sound, true, 10);
        (mean_dir(&clean), mean_dir(&mixed))
    };
    let ((fc, fm), (cc, cm)) = (drop(&full.model), drop(&cor.model));
    out.report(
        "6 mixed-audio robustness",
        fc - fm < cc - cm,
        format!(
            "sound-head R@10 drop full {:.3} ({fc:.3} -> {fm:.3}) vs cor-only {:.3} ({cc:.3} -> {cm:.3}) (full smaller)",
            fc - fm,
            cc - cm
        ),
    );
}

// ---------------------------------------------------------------- 7

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).expect("prefix").to_path_buf(), fs::read(&p).expect("read")));
            }
        }
    }
    out.sort();
    out
}

fn determinism(out: &mut Outcome) {
    let tmp = tempfile::tempdir().expect("tempdir");
    let world = WorldConfig::default();
    let train = TrainConfig {
        warmup_steps: 10,
        total_steps: DETERMINISM_STEPS - 10,
        checkpoint_interval: 25,
        ..TrainConfig::default()
    };
    let mut trees = Vec::new();
    for run in 0..2 {
        let data = tmp.path().join(format!("data{run}"));
        let ds = make_datasets(&world, &data).expect("gen-data");
        let run_dir = tmp.path().join(format!("run{run}"));
        let model = Model::new(ModelConfig::default(), train.seed).expect("model");
        let mut trainer = Trainer::new(&ds, model, train.clone(), LossConfig::default())
            .expect("trainer")
            .with_output(&run_dir)
            .expect("output");
        trainer.run().expect("training");
        trees.push((files(&data), files(&run_dir)));
    }
    let data_same = trees[0].0 == trees[1].0;
    let run_same = trees[0].1 == trees[1].1;
    out.report(
        "7 determinism",
        data_same && run_same,
        format!(
            "dataset {} files identical {data_same}; {DETERMINISM_STEPS}-step run {} files (log + checkpoints) identical {run_same}",
            trees[0].0.len(),
            trees[0].1.len()
        ),
    );
}

fn main() -> ExitCode {
    let mut out = Outcome { failed: Vec::new() };
    gradient_oracle(&mut out);
    brute_force(&mut out);
    analytic_identities(&mut out);

    let ds = Dataset::generate(&WorldConfig::default()).expect("desk world");
    let full = train_arm(&ds, LossConfig::default());
    end_to_end(&mut out, &ds, &full);
    let cor = train_arm(
        &ds,
        LossConfig {
            cor_only: true,
            ..LossConfig::default()
        },
    );
    let dis = train_arm(
        &ds,
        LossConfig {
            dis_only: true,
            ..LossConfig::default()
        },
    );
    ablations(&mut out, &ds, &full, &cor, &dis);
    mixed_robustness(&mut out, &ds, &full, &cor);
    determinism(&mut out);

    if out.failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failed: {}", out.failed.len(), out.failed.join(", "));
        ExitCode::FAILURE
    }
}
