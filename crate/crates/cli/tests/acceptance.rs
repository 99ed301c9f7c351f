//! Acceptance criteria. Each test prints one `criterion N` line with its
//! verdict before asserting. The ablation criteria (5 to 8) train and
//! evaluate dozens of models and are ignored by default; run them with
//! `cargo test --release -p tokvla-cli --test acceptance -- --ignored --nocapture`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokvla_core::action_codec::{coefficient_alphabet, ActionChunk, ActionTokenizer};
use tokvla_core::codecs::{CodecConfig, Codecs};
use tokvla_core::env::{generate_dataset, DatasetStats, Episode, TaskSpec, MIN_FRAMES};
use tokvla_core::model::{eval_loss, forward, loss, loss_and_grad, ModelConfig, ModelParams, TargetSpec, TrainExample};
use tokvla_core::rollout::ablation::{ablation_suite, AblationConfig, AblationReport, Budget};
use tokvla_core::sequence::SequenceBuilder;
use tokvla_core::train::{pack_actions, pack_stage_one, tokenize_episode, PackConfig, Strategy};
use tokvla_core::vision_codec::{Image, VqCodebook, PATCH};
use tokvla_core::vocab::{Modality, Vocabulary, BOA, BOI, EOA, EOI};

const CORPUS_EPISODES: usize = 500;
const CORPUS_SEED: u64 = 0;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} {name}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn corpus() -> &'static (Vec<Episode>, DatasetStats) {
    static C: OnceLock<(Vec<Episode>, DatasetStats)> = OnceLock::new();
    C.get_or_init(|| generate_dataset(CORPUS_EPISODES, &[TaskSpec::Single], CORPUS_SEED).unwrap())
}

/// Straight-line reference of the tokenizer without BPE: normalize, dense
/// orthonormal DCT, round, dequantize, inverse DCT, denormalize.
fn oracle_round_trip(tok: &ActionTokenizer, x: &ActionChunk) -> Vec<f64> {
    let (h, d) = (x.horizon(), x.dim());
    let (lo, hi) = (&tok.stats.p1, &tok.stats.p99);
    let w = |k: usize, t: usize| {
        let s = if k == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
        s * (PI * (t as f64 + 0.5) * k as f64 / h as f64).cos()
    };
    let mut y = vec![0.0; h * d];
    for t in 0..h {
        for j in 0..d {
            y[t * d + j] = if hi[j] > lo[j] {
                (2.0 * (x.get(t, j) - lo[j]) / (hi[j] - lo[j]) - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    let alphabet = coefficient_alphabet(h, tok.scale);
    let mut q = vec![0.0; h * d];
    for k in 0..h {
        for j in 0..d {
            let mut c = 0.0;
            for t in 0..h {
                c += w(k, t) * y[t * d + j];
            }
            let r = ((tok.scale * c).round() as i32).clamp(*alphabet.start(), *alphabet.end());
            q[k * d + j] = r as f64 / tok.scale;
        }
    }
    let mut out = vec![0.0; h * d];
    for t in 0..h {
        for j in 0..d {
            let mut v = 0.0;
            for k in 0..h {
                v += w(k, t) * q[k * d + j];
            }
            out[t * d + j] = (v + 1.0) * 0.5 * (hi[j] - lo[j]) + lo[j];
        }
    }
    out
}

#[test]
fn criterion_1_codec_fidelity() {
    let (h, d, gamma) = (10, 3, 30.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let corpus: Vec<ActionChunk> = (0..1000)
        .map(|_| ActionChunk::new(h, d, (0..h * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let bpe_vocab = coefficient_alphabet(h, gamma).count() + 256;
    let tok = ActionTokenizer::fit(&corpus, gamma, bpe_vocab).unwrap();
    let vocab = Vocabulary::build(1, 1, bpe_vocab).unwrap();
    let mut mismatches = 0;
    let mut worst = vec![0.0f64; d];
    for c in &corpus {
        let inside = c.map_dims(|j, x| x.clamp(tok.stats.p1[j], tok.stats.p99[j]));
        let back = tok.decode(&tok.encode(&inside, &vocab).unwrap(), &vocab).unwrap();
        let want = oracle_round_trip(&tok, &inside);
        mismatches += back.values().iter().zip(&want).filter(|(a, b)| a != b).count();
        for t in 0..h {
            for (j, w) in worst.iter_mut().enumerate() {
                *w = w.max((back.get(t, j) - inside.get(t, j)).abs());
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let bound: Vec<f64> =
        (0..d).map(|j| (tok.stats.p99[j] - tok.stats.p1[j]) * (h as f64).sqrt() / (2.0 * gamma)).collect();
    let within = (0..d).all(|j| worst[j] <= bound[j]);
    let pass = mismatches == 0 && within && elapsed < 10.0;
    report(
        1,
        "codec fidelity",
        pass,
        &format!("oracle mismatches {mismatches}; max error {worst:.4?} vs bound {bound:.4?}; {elapsed:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_vision_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut image =
        |h: usize, w: usize| Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
    let train: Vec<Image> = (0..8).map(|_| image(32, 32)).collect();
    let cb = VqCodebook::fit(&train, 16, 0).unwrap();
    let vocab = Vocabulary::build(1, cb.len(), 1).unwrap();
    let big = cb.encode_image(&image(256, 256), &vocab).unwrap().ids.len();
    let small = cb.encode_image(&image(32, 32), &vocab).unwrap().ids.len();
    let mut disagreements = 0;
    for i in 0..100 {
        let img = if i % 10 == 0 { image(256, 256) } else { image(32, 32) };
        let grid = cb.encode_image(&img, &vocab).unwrap();
        for (n, &id) in grid.ids.iter().enumerate() {
            let (py, px) = (n / grid.cols, n % grid.cols);
            let mut best = (f64::INFINITY, 0);
            for c in 0..cb.len() {
                let mut dist = 0.0;
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let p = img.pixel(py * PATCH + y, px * PATCH + x);
                        for (ch, &v) in p.iter().enumerate() {
                            let diff = v as f64 - cb.centroid(c)[(y * PATCH + x) * 3 + ch] as f64;
                            dist += diff * diff;
                        }
                    }
                }
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            disagreements += usize::from(vocab.vision_index(id).unwrap() != best.1);
        }
    }
    let pass = big == 1024 && small == 16 && disagreements == 0;
    report(
        2,
        "vision shape",
        pass,
        &format!("256x256 -> {big}, 32x32 -> {small}, search disagreements {disagreements}"),
    );
    assert!(pass);
}

/// Expected mask from bracket structure alone.
fn scan(ids: &[u32], strategy: Strategy) -> Vec<bool> {
    let boa_total = ids.iter().filter(|&&t| t == BOA).count();
    let (mut images, mut actions) = (0, 0);
    let mut inside: Option<bool> = None;
    let mut out = Vec::with_capacity(ids.len());
    for &t in ids {
        match t {
            BOI => {
                images += 1;
                inside = Some(match strategy {
                    Strategy::WorldModel | Strategy::Video => images > 1,
                    Strategy::T2i => true,
                    _ => false,
                });
                out.push(false);
            }
            BOA => {
                actions += 1;
                inside = Some(match strategy {
                    Strategy::ActionPred => true,
                    Strategy::Policy => actions == boa_total,
                    _ => false,
                });
                out.push(false);
            }
            EOI | EOA => {
                inside = None;
                out.push(false);
            }
            _ => out.push(inside.unwrap_or(false)),
        }
    }
    out
}

#[test]
fn criterion_3_mask_exactness() {
    let (eps, _) = corpus();
    let cfg = CodecConfig { codebook_size: 32, ..CodecConfig::default() };
    let codecs = Codecs::fit(&eps[..50], &cfg).unwrap();
    let tokenized: Vec<_> = eps.iter().map(|e| tokenize_episode(e, &codecs).unwrap()).collect();
    let builder = SequenceBuilder::new(codecs.vocab.clone(), 1024);
    let pack = PackConfig::default();
    let mut lines = Vec::new();
    let mut total = 0;
    for strategy in [Strategy::WorldModel, Strategy::Video, Strategy::T2i, Strategy::ActionPred, Strategy::Policy] {
        let seqs = if strategy == Strategy::Policy {
            pack_actions(strategy, &tokenized, &builder, &pack).unwrap()
        } else {
            pack_stage_one(strategy, &tokenized, &builder, &pack).unwrap()
        };
        let bad: usize =
            seqs.iter().map(|s| s.mask.iter().zip(scan(&s.ids, strategy)).filter(|(a, b)| **a != *b).count()).sum();
        let supervised: usize = seqs.iter().map(|s| s.mask_count()).sum();
        total += bad;
        lines.push(format!("{strategy} {} seqs/{supervised} targets/{bad} diffs", seqs.len()));
        assert!(supervised > 0);
    }
    report(3, "mask exactness", total == 0, &format!("{} episodes: {}", eps.len(), lines.join("; ")));
    assert_eq!(total, 0);
}

fn tiny_model(vocab_size: usize, d_model: usize, n_layers: usize, seed: u64) -> ModelParams<f64> {
    let cfg =
        ModelConfig { vocab_size, d_model, n_layers, n_heads: 2, d_ff: 2 * d_model, max_seq_len: 64, dropout: 0.0 };
    ModelParams::init(cfg, seed).unwrap()
}

#[test]
fn criterion_4_model_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = 23;

    let params = tiny_model(v, 16, 2, 0);
    let ids: Vec<u32> = (0..48).map(|_| rng.random_range(0..v as u32)).collect();
    let base = forward(&params, &ids).unwrap();
    let mut leaks = 0;
    let mut inert = 0;
    for _ in 0..50 {
        let p = rng.random_range(0..ids.len());
        let mut changed = ids.clone();
        changed[p] = (changed[p] + 1 + rng.random_range(0..v as u32 - 1)) % v as u32;
        let out = forward(&params, &changed).unwrap();
        leaks += (0..p).filter(|&r| out.row(r) != base.row(r)).count();
        inert += usize::from(out.row(p) == base.row(p));
    }

    let params = tiny_model(v, 8, 2, 1);
    let example = TrainExample {
        inputs: (0..10).map(|_| rng.random_range(0..v as u32)).collect(),
        targets: (3..10)
            .map(|pos| TargetSpec {
                pos,
                target: rng.random_range(0..v as u32),
                weight: if pos % 2 == 0 { 0.5 } else { 1.0 },
                modality: if pos % 2 == 0 { Modality::Vision } else { Modality::Action },
            })
            .collect(),
    };
    let batch = [example];
    let (_, grad) = loss_and_grad(&params, &batch, None).unwrap();
    let eps = 1e-3;
    let numeric: Vec<f64> = (0..params.num_params())
        .map(|i| {
            let mut plus = params.clone();
            plus.data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.data_mut()[i] -= eps;
            (eval_loss(&plus, &batch).unwrap().loss - eval_loss(&minus, &batch).unwrap().loss) / (2.0 * eps)
        })
        .collect();
    // Relative error per parameter tensor: |analytic - numeric| / |analytic|.
    let mut worst = (0.0f64, String::new());
    for t in params.layout().tensors() {
        let range = t.offset..t.offset + t.numel();
        let diff: f64 = range.clone().map(|i| (grad[i] - numeric[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = range.map(|i| grad[i].powi(2)).sum::<f64>().sqrt();
        let rel = if norm > 0.0 { diff / norm } else { diff };
        if rel > worst.0 {
            worst = (rel, t.name.clone());
        }
    }

    let uniform = Array2::<f64>::zeros((12, v));
    let targets: Vec<u32> = (0..12).map(|_| rng.random_range(0..v as u32)).collect();
    let mask: Vec<bool> = (0..12).map(|p| p > 0).collect();
    let direct = loss(uniform.view(), &targets, &mask).unwrap();
    let mut flat = tiny_model(v, 8, 2, 2);
    let head = flat.layout().tensors().iter().find(|t| t.name == "head.w").unwrap().clone();
    flat.data_mut()[head.offset..head.offset + head.numel()].fill(0.0);
    let through_model = eval_loss(&flat, &batch).unwrap().loss;
    let ln_v = (v as f64).ln();
    let uniform_err = (direct - ln_v).abs().max((through_model - ln_v).abs());

    let pass = leaks == 0 && inert == 0 && worst.0 <= 1e-3 && uniform_err <= 1e-9;
    report(
        4,
        "model correctness",
        pass,
        &format!(
            "causal leaks {leaks}, unchanged rows {inert} over 50 positions; worst per-tensor grad rel err {:.2e} ({}); |uniform loss - ln V| {uniform_err:.1e}",
            worst.0, worst.1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_replay_soundness() {
    let (eps, stats) = corpus();
    let exact = eps.iter().filter(|e| e.replay().unwrap().0 == e.frames).count();
    let short = eps.iter().filter(|e| e.frames.len() < MIN_FRAMES).count();
    let pass = exact == eps.len() && short == 0;
    report(
        9,
        "replay soundness",
        pass,
        &format!(
            "{exact}/{} replay pixel-exactly; {short} below {MIN_FRAMES} frames; {} of {} attempts filtered as short",
            eps.len(),
            stats.filtered_short,
            stats.attempted
        ),
    );
    assert!(pass);
}

const TINY: &str = r#"
[data]
episodes = 6
[codecs]
codebook_size = 16
action_vocab = 160
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
[posttrain]
steps = 4
batch_size = 2
[finetune]
steps = 4
batch_size = 2
[eval]
episodes = 3
"#;

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![("report.tsv".to_string(), fs::read(dir.join("report.tsv")).unwrap())];
    let mut ckpts: Vec<_> = fs::read_dir(dir.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    ckpts.sort();
    for p in ckpts {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
    }
    files
}

#[test]
fn criterion_10_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let run = || {
        let out = Command::new(env!("CARGO_BIN_EXE_tokvla"))
            .current_dir(d)
            .env_remove("UNIVLA_RUN_DIR")
            .args(["--config", "tiny.toml", "ablate", "--arms", "none,world_model", "--seeds", "0,1", "--out", "ab"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let snap = snapshot(&d.join("ab"));
        fs::remove_dir_all(d.join("ab")).unwrap();
        snap
    };
    let (first, second) = (run(), run());
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let pass = first.len() == second.len() && differing.is_empty() && names.iter().any(|n| n.ends_with(".ckpt"));
    report(
        10,
        "determinism",
        pass,
        &format!(
            "{} files compared, {} checkpoints, differing {differing:?}",
            first.len(),
            names.iter().filter(|n| n.ends_with(".ckpt")).count()
        ),
    );
    assert!(pass);
}

/// Reduced-budget ablation shared by criteria 5 to 8.
fn ablation() -> &'static AblationReport {
    static R: OnceLock<AblationReport> = OnceLock::new();
    R.get_or_init(|| {
        let (eps, _) = corpus();
        let codecs = Codecs::fit(eps, &CodecConfig::default()).unwrap();
        let cfg = AblationConfig {
            strategies: vec![Strategy::None, Strategy::WorldModel],
            posttrain: Budget { steps: 1500, ..Budget::default() },
            finetune: Budget { steps: 2500, ..Budget::default() },
            data_steps: 1000,
            joint_weights: None,
            ..AblationConfig::default()
        };
        let start = Instant::now();
        let report = ablation_suite(eps, &codecs, &cfg, None, |line| {
            eprintln!("[{:>6.0}s] {line}", start.elapsed().as_secs_f64())
        })
        .unwrap();
        println!("{}", report.summary());
        println!("ablation wall time {:.0}s", start.elapsed().as_secs_f64());
        report
    })
}

fn gate(n: usize, label: &str, check: &str) {
    let checks = ablation().checks();
    let c = checks.iter().find(|c| c.name == check).unwrap_or_else(|| panic!("no {check} check in report"));
    report(n, label, c.pass, &c.detail);
    assert!(c.pass, "{}", c.detail);
}

#[test]
#[ignore = "trains and evaluates the full ablation, about an hour"]
fn criterion_5_headline_direction() {
    gate(5, "world model beats none", "headline");
}

#[test]
#[ignore = "trains and evaluates the full ablation, about an hour"]
fn criterion_6_data_efficiency() {
    gate(6, "data efficiency", "data_efficiency");
}

#[test]
#[ignore = "trains and evaluates the full ablation, about an hour"]
fn criterion_7_convergence() {
    gate(7, "convergence", "convergence");
}

#[test]
#[ignore = "trains and evaluates the full ablation, about an hour"]
fn criterion_8_history() {
    gate(8, "history", "history");
}
