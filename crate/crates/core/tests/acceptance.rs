//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use elf_core::audio::write_wav;
use elf_core::blending::{blend_fused_features, synthesize_blend, BlendSpec};
use elf_core::checkpoint::{Checkpoint, ModelKind};
use elf_core::codebook::{
    build_codebook, kmeanspp_init, lloyd, load_codebook, save_codebook, uniform_init,
    ClusterConfig, MuFrameSet, SpeakerCodebook,
};
use elf_core::data::Clip;
use elf_core::fts::fts_decompose;
use elf_core::latents::extract_mu_frames;
use elf_core::nn::{array_from_tensor, ParamStore};
use elf_core::sfen::{kl_unit_gaussian, LatentFrameDistribution, Sfen, SfenTrainer};
use elf_core::synthetic::SyntheticSpec;
use elf_core::training::{trailing_mean, TrainConfig};
use elf_core::tts::flow::Flow;
use elf_core::tts::train::{forward, generator_loss, TtsBatch};
use elf_core::tts::{
    init_decoder_from_sfen, monotonic_alignment_search, PriorInput, SynthesisOptions, Tts,
    TtsExample, TtsTrainer,
};
use elf_core::vocoder::Generator;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

/// Every monotonic, contiguous, column-surjective alignment of `l` text
/// positions onto `t` frames, as duration vectors.
fn all_alignments(l: usize, t: usize) -> Vec<Vec<usize>> {
    if l == 1 {
        return vec![vec![t]];
    }
    let mut out = Vec::new();
    for first in 1..=t - (l - 1) {
        for mut rest in all_alignments(l - 1, t - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn path_score(durations: &[usize], q: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    let mut t = 0;
    for (i, &d) in durations.iter().enumerate() {
        for _ in 0..d {
            s += q[[i, t]];
            t += 1;
        }
    }
    s
}

fn mas_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ties = 0;
    for trial in 0..1000 {
        let t = rng.random_range(1..=6);
        let l = rng.random_range(1..=t.min(4));
        let q = Array2::from_shape_fn((l, t), |_| {
            if trial % 10 == 0 {
                rng.random_range(-2..=0) as f64
            } else {
                rng.random_range(-5.0..0.0)
            }
        });
        let got = monotonic_alignment_search(&q).map_err(err)?;
        let got_score = path_score(&got.durations, &q);
        let candidates = all_alignments(l, t);
        let best = candidates
            .iter()
            .map(|d| path_score(d, &q))
            .fold(f64::NEG_INFINITY, f64::max);
        let argmax: Vec<&Vec<usize>> = candidates
            .iter()
            .filter(|d| path_score(d, &q) == best)
            .collect();
        if argmax.len() > 1 {
            ties += 1;
            check(got_score == best, || {
                format!("trial {trial}: score {got_score} below optimum {best}")
            })?;
        } else {
            check(&got.durations == argmax[0], || {
                format!(
                    "trial {trial}: {:?} vs exhaustive {:?}",
                    got.durations, argmax[0]
                )
            })?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "1000 matrices, {ties} with tied optima, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------- 2

fn kl_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zero = kl_unit_gaussian(
        &LatentFrameDistribution::new(Array2::zeros((3, 2)), Array2::ones((3, 2))).map_err(err)?,
    )
    .map_err(err)?;
    check(zero == 0.0, || format!("mu=0, sigma=1 gives {zero}"))?;
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let sigma: f64 = rng.random_range(0.2..2.5);
        let dist = LatentFrameDistribution::new(
            Array2::from_elem((1, 1), mu as f32),
            Array2::from_elem((1, 1), sigma as f32),
        )
        .map_err(err)?;
        let closed = kl_unit_gaussian(&dist).map_err(err)?;
        let (mu, sigma) = (mu as f32 as f64, sigma as f32 as f64);
        let q = Normal::new(mu, sigma).map_err(err)?;
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = q.sample(&mut rng);
            let log_q = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln();
            let log_p = -0.5 * z * z;
            let v = log_q - log_p;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let z = (closed - mean).abs() / se;
        worst = worst.max(z);
        check(z < 3.0, || {
            format!("instance {i}: closed {closed} vs MC {mean} +- {se} ({z:.2} SE)")
        })?;
    }
    Ok(format!(
        "20 instances, worst deviation {worst:.2} SE; zero case exact"
    ))
}

// ---------------------------------------------------------------- 3

fn copy_params(from: &ParamStore, to: &ParamStore) -> Result<(), String> {
    to.import(&from.export().map_err(err)?).map_err(err)
}

fn sfen_gradients() -> Result<(f64, f64, usize), String> {
    let cfg = micro_sfen();
    let mel_cfg = micro_mel();
    let dev = Device::Cpu;
    let m32 = Sfen::new(&cfg, &mel_cfg, 3, DType::F32, &dev).map_err(err)?;
    let m64 = Sfen::new(&cfg, &mel_cfg, 3, DType::F64, &dev).map_err(err)?;
    copy_params(&m32.store, &m64.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = 2;
    let hop = 4;
    let wave: Vec<f64> = (0..t * hop).map(|_| rng.random_range(-0.5..0.5)).collect();
    let noise: Vec<f64> = (0..cfg.latent_dim * t)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let inputs = |dtype: DType, model: &Sfen| -> elf_core::Result<(Tensor, Tensor, Tensor)> {
        let w = Tensor::from_vec(wave.clone(), (1, t * hop), &dev)?.to_dtype(dtype)?;
        let mel = model.mel_transform().forward(&w)?;
        let n = Tensor::from_vec(noise.clone(), (1, cfg.latent_dim, t), &dev)?.to_dtype(dtype)?;
        Ok((mel, w, n))
    };
    let (mel32, w32, n32) = inputs(DType::F32, &m32).map_err(err)?;
    let (mel64, w64, n64) = inputs(DType::F64, &m64).map_err(err)?;
    let g32 = m32
        .generator_objective(&mel32, &w32, &n32)
        .map_err(err)?
        .total
        .backward()
        .map_err(err)?;
    let g64 = m64
        .generator_objective(&mel64, &w64, &n64)
        .map_err(err)?
        .total
        .backward()
        .map_err(err)?;

    let (mut a32, mut a64, mut num) = (Vec::new(), Vec::new(), Vec::new());
    for (name, var) in m64.store.vars_with_prefix("enc.") {
        let n_el = var.as_tensor().elem_count();
        let grad64 = g64
            .get(var.as_tensor())
            .ok_or(format!("no gradient for {name}"))?;
        let var32 = m32.store.var(&name).unwrap();
        let grad32 = g32
            .get(var32.as_tensor())
            .ok_or(format!("no gradient for {name}"))?;
        for i in 0..n_el {
            let mut f = || scalar64(&m64.generator_objective(&mel64, &w64, &n64).unwrap().total);
            num.push(central_difference(&m64.store, &name, i, 1e-6, &mut f));
            a64.push(element(grad64, i));
            a32.push(element(grad32, i));
        }
    }
    Ok((
        relative_error(&a32, &num),
        relative_error(&a64, &num),
        num.len(),
    ))
}

fn scalar64(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn micro_tts_batch(model: &Tts, seed: u64) -> Result<TtsBatch, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<TtsExample> = (0..2)
        .map(|i| {
            let frames = 3 + i;
            TtsExample {
                clip_id: format!("c{i}"),
                speaker_id: format!("s{i}"),
                seq: model
                    .encode_text(if i == 0 { "ab" } else { "c a" })
                    .unwrap(),
                mel: Array2::from_shape_fn((frames, 4), |_| rng.random_range(-3.0f32..0.0)),
                wave: (0..frames * 4)
                    .map(|_| rng.random_range(-0.5f32..0.5))
                    .collect(),
            }
        })
        .collect();
    let codebooks: BTreeMap<String, SpeakerCodebook> = (0..2)
        .map(|i| {
            (
                format!("s{i}"),
                random_codebook(&format!("s{i}"), 3, 4, 10 + i),
            )
        })
        .collect();
    let refs: Vec<&TtsExample> = examples.iter().collect();
    TtsBatch::new(model, &refs, &codebooks, &mut rng).map_err(err)
}

fn tts_gradients() -> Result<(f64, f64, usize), String> {
    let cfg = micro_tts(PriorInput::Text);
    let mel = micro_mel();
    let dev = Device::Cpu;
    let m32 = Tts::new(&cfg, &mel, 4, DType::F32, &dev).map_err(err)?;
    let m64 = Tts::new(&cfg, &mel, 4, DType::F64, &dev).map_err(err)?;
    copy_params(&m32.store, &m64.store)?;
    let b32 = micro_tts_batch(&m32, 5)?;
    let b64 = micro_tts_batch(&m64, 5)?;
    // The duration terms see the text encoding through a detach, so only
    // duration-generator parameters are differenced through them.
    let loss = |m: &Tts, b: &TtsBatch, full: bool| {
        let l = generator_loss(m, &forward(m, b).unwrap()).unwrap();
        if full {
            l.total
        } else {
            l.main
        }
    };
    let g32 = loss(&m32, &b32, true).backward().map_err(err)?;
    let g64 = loss(&m64, &b64, true).backward().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vars: Vec<_> = m64
        .store
        .vars()
        .into_iter()
        .filter(|(name, _)| !name.starts_with("disc.") && !name.starts_with("dur_disc."))
        .collect();
    let (mut a32, mut a64, mut num) = (Vec::new(), Vec::new(), Vec::new());
    while num.len() < 10 {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let i = rng.random_range(0..var.as_tensor().elem_count());
        let Some(grad64) = g64.get(var.as_tensor()) else {
            continue;
        };
        let grad32 = g32
            .get(m32.store.var(name).unwrap().as_tensor())
            .ok_or(format!("no 32-bit gradient for {name}"))?;
        let full = name.starts_with("dur_gen.");
        let mut f = || scalar64(&loss(&m64, &b64, full));
        num.push(central_difference(&m64.store, name, i, 1e-6, &mut f));
        a64.push(element(grad64, i));
        a32.push(element(grad32, i));
    }
    Ok((
        relative_error(&a32, &num),
        relative_error(&a64, &num),
        num.len(),
    ))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let (s32, s64, sn) = sfen_gradients()?;
    let (t32, t64, tn) = tts_gradients()?;
    let secs = start.elapsed().as_secs_f64();
    check(s32 < 1e-2 && t32 < 1e-2, || {
        format!("32-bit relative errors sfen {s32:.2e}, tts {t32:.2e}")
    })?;
    check(s64 < 1e-4 && t64 < 1e-4, || {
        format!("64-bit relative errors sfen {s64:.2e}, tts {t64:.2e}")
    })?;
    check(secs < 120.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "sfen {sn} encoder elements: {s32:.1e} (32-bit), {s64:.1e} (64-bit); tts {tn} elements: {t32:.1e}, {t64:.1e}; {secs:.1} s"
    ))
}

// ---------------------------------------------------------------- 4

fn flow_integrity() -> Outcome {
    let dev = Device::Cpu;
    let cfg = elf_core::tts::flow::FlowConfig {
        channels: 2,
        blocks: 3,
        hidden: 8,
        kernel: 3,
        wn_layers: 2,
        heads: 2,
        transformer_dim: 8,
    };
    // Random (non-zero) output projections so the flow is not the identity.
    let randomize = |store: &ParamStore| -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, var) in store.vars() {
            let dims = var.as_tensor().dims().to_vec();
            let n = var.as_tensor().elem_count();
            let v: Vec<f32> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            let t = Tensor::from_vec(v, dims, &dev)
                .map_err(err)?
                .to_dtype(store.dtype())
                .map_err(err)?;
            store.set(&name, &t).map_err(err)?;
        }
        Ok(())
    };
    let s32 = ParamStore::new(0, DType::F32, &dev);
    let f32flow = Flow::new(&s32.root(), &cfg, 0).map_err(err)?;
    randomize(&s32)?;
    let x = Tensor::randn(0f32, 1.0, (3, 2, 7), &dev).map_err(err)?;
    let mask = Tensor::ones((3, 1, 7), DType::F32, &dev).map_err(err)?;
    let (y, _) = f32flow.forward(&x, &mask, None).map_err(err)?;
    let back = f32flow.inverse(&y, &mask, None).map_err(err)?;
    let round = (back - &x)
        .map_err(err)?
        .abs()
        .map_err(err)?
        .max_all()
        .map_err(err)?
        .to_scalar::<f32>()
        .map_err(err)?;
    check(round < 1e-4, || format!("round-trip error {round:e}"))?;

    let s64 = ParamStore::new(0, DType::F64, &dev);
    let flow = Flow::new(&s64.root(), &cfg, 0).map_err(err)?;
    randomize(&s64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z0: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask = Tensor::ones((1, 1, 4), DType::F64, &dev).map_err(err)?;
    let apply = |z: &[f64]| -> (Vec<f64>, f64) {
        let t = Tensor::from_vec(z.to_vec(), (1, 2, 4), &dev).unwrap();
        let (y, ld) = flow.forward(&t, &mask, None).unwrap();
        (
            y.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            ld.to_vec1::<f64>().unwrap()[0],
        )
    };
    let (_, logdet) = apply(&z0);
    let h = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(8, 8);
    for j in 0..8 {
        let mut zp = z0.clone();
        zp[j] += h;
        let mut zm = z0.clone();
        zm[j] -= h;
        let (yp, _) = apply(&zp);
        let (ym, _) = apply(&zm);
        for i in 0..8 {
            jac[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
        }
    }
    let numeric = jac.determinant().abs().ln();
    let rel = (numeric - logdet).abs() / logdet.abs().max(1e-12);
    check(logdet.abs() > 1e-3, || {
        format!("log-det {logdet} too close to zero to be informative")
    })?;
    check(rel < 1e-3, || {
        format!("log-det {logdet} vs numeric {numeric} (relative {rel:e})")
    })?;
    Ok(format!(
        "round-trip max error {round:.1e}; 2x4 log-det {logdet:.6} vs numeric {numeric:.6} (relative {rel:.1e})"
    ))
}

// ---------------------------------------------------------------- 5

fn sse_of(points: &Array2<f32>, centroids: &Array2<f32>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|p| {
            centroids
                .rows()
                .into_iter()
                .map(|c| {
                    p.iter()
                        .zip(c.iter())
                        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Minimum SSE over all partitions of the rows into exactly `k` non-empty
/// groups.
fn exhaustive_sse(points: &Array2<f32>, k: usize) -> f64 {
    let n = points.nrows();
    let h = points.ncols();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    fn rec(
        i: usize,
        used: usize,
        k: usize,
        labels: &mut [usize],
        points: &Array2<f32>,
        h: usize,
        best: &mut f64,
    ) {
        let n = labels.len();
        if n - i < k - used {
            return;
        }
        if i == n {
            let mut sum = vec![vec![0.0f64; h]; k];
            let mut sq = vec![0.0f64; k];
            let mut cnt = vec![0usize; k];
            for (r, &l) in labels.iter().enumerate() {
                cnt[l] += 1;
                for d in 0..h {
                    let v = points[[r, d]] as f64;
                    sum[l][d] += v;
                    sq[l] += v * v;
                }
            }
            let sse: f64 = (0..k)
                .map(|l| sq[l] - sum[l].iter().map(|s| s * s).sum::<f64>() / cnt[l] as f64)
                .sum();
            *best = best.min(sse);
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels[i] = l;
            rec(i + 1, used.max(l + 1), k, labels, points, h, best);
        }
    }
    rec(0, 0, k, &mut labels, points, h, &mut best);
    best
}

fn four_blobs(rng: &mut ChaCha8Rng) -> Array2<f32> {
    let centers = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)];
    let sizes = [60, 10, 10, 10];
    let mut rows = Vec::new();
    for (c, &n) in centers.iter().zip(&sizes) {
        for _ in 0..n {
            rows.push(c.0 + rng.random_range(-1.0..1.0));
            rows.push(c.1 + rng.random_range(-1.0..1.0));
        }
    }
    Array2::from_shape_vec((rows.len() / 2, 2), rows).unwrap()
}

fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut instances = 0;
    for n in 3..=12 {
        for k in 1..=3usize.min(n) {
            for rep in 0..2 {
                let h = 1 + (n + rep) % 3;
                let points = Array2::from_shape_fn((n, h), |_| rng.random_range(-3.0f32..3.0));
                let frames =
                    MuFrameSet::from_clips("s", vec![("c".into(), points.clone())]).map_err(err)?;
                let cfg = ClusterConfig {
                    k,
                    restarts: 50,
                    seed: (n * 10 + k + rep) as u64,
                    ..ClusterConfig::default()
                };
                let cb = build_codebook(&frames, &cfg).map_err(err)?;
                let got = sse_of(&points, &cb.vectors);
                let opt = exhaustive_sse(&points, k);
                check(got <= opt + 1e-6 * opt.max(1.0), || {
                    format!("n={n} k={k}: sse {got} above optimum {opt}")
                })?;
                let run = lloyd(
                    points.view(),
                    &kmeanspp_init(points.view(), k, &mut rng).map_err(err)?,
                    300,
                    0.0,
                )
                .map_err(err)?;
                let mono = run
                    .sse_history
                    .windows(2)
                    .all(|w| w[1] <= w[0] + 1e-9 * w[0].max(1.0));
                check(mono, || {
                    format!("n={n} k={k}: SSE history {:?} increases", run.sse_history)
                })?;
                instances += 1;
            }
        }
    }

    let (mut pp, mut uni) = (0.0, 0.0);
    for trial in 0..20u64 {
        let mut data_rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let points = four_blobs(&mut data_rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(trial);
        let mut r2 = ChaCha8Rng::seed_from_u64(trial);
        let a = lloyd(
            points.view(),
            &kmeanspp_init(points.view(), 4, &mut r1).map_err(err)?,
            300,
            1e-6,
        )
        .map_err(err)?;
        let b = lloyd(
            points.view(),
            &uniform_init(points.view(), 4, &mut r2).map_err(err)?,
            300,
            1e-6,
        )
        .map_err(err)?;
        for r in [&a, &b] {
            check(
                r.sse_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0]),
                || "Lloyd SSE increased on the blob set".to_string(),
            )?;
        }
        pp += a.sse / 20.0;
        uni += b.sse / 20.0;
    }
    check(pp <= uni, || {
        format!("k-means++ mean SSE {pp:.2} above uniform {uni:.2}")
    })?;
    Ok(format!(
        "{instances} exhaustive instances at the global optimum; blob mean SSE k-means++ {pp:.1} vs uniform {uni:.1}"
    ))
}

// ---------------------------------------------------------------- 6

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn blending_algebra() -> Outcome {
    let (cfg, mel) = small_tts(PriorInput::Text);
    let model = Tts::new(&cfg, &mel, 11, DType::F32, &Device::Cpu).map_err(err)?;
    let a = random_codebook("a", 5, cfg.latent_dim, 1);
    let b = random_codebook("b", 7, cfg.latent_dim, 2);
    let seq = model.encode_text("a blend test").map_err(err)?;
    let opts = SynthesisOptions {
        seed: 5,
        ..SynthesisOptions::default()
    };
    let single = model.synthesize(&seq, &a, &opts).map_err(err)?;
    let degenerate = synthesize_blend(&model, &seq, &BlendSpec::new(vec![(a.clone(), 1.0)]), &opts)
        .map_err(err)?;
    check(
        bits(&single.wave.samples) == bits(&degenerate.wave.samples),
        || "S=1 blend differs from the single-speaker path".into(),
    )?;

    let (h_prev, mask) = model.pre_fusion_single(&seq).map_err(err)?;
    let fused = |cb: &SpeakerCodebook| -> Result<Array2<f32>, String> {
        let mem = model.encode_codebook(cb).map_err(err)?;
        array_from_tensor(
            &model
                .fuse(&h_prev, &mem, &mask)
                .map_err(err)?
                .squeeze(0)
                .map_err(err)?,
        )
        .map_err(err)
    };
    let (ha, hb) = (fused(&a)?, fused(&b)?);
    let blended = blend_fused_features(
        &model,
        &h_prev,
        &mask,
        &BlendSpec::new(vec![(a.clone(), 0.8), (b.clone(), 0.2)]),
    )
    .map_err(err)?;
    let blended = array_from_tensor(&blended.squeeze(0).map_err(err)?).map_err(err)?;
    let mut worst: f64 = 0.0;
    let mut hull: f64 = 0.0;
    for ((x, ya), yb) in blended.iter().zip(ha.iter()).zip(hb.iter()) {
        let want = 0.8 * *ya as f64 + 0.2 * *yb as f64;
        worst = worst.max((*x as f64 - want).abs());
        let lo = ya.min(*yb) as f64;
        let hi = ya.max(*yb) as f64;
        hull = hull.max(lo - *x as f64).max(*x as f64 - hi);
    }
    check(worst < 1e-6, || {
        format!("blend differs from 0.8 h_A + 0.2 h_B by {worst:e}")
    })?;
    check(hull <= 1e-6, || {
        format!("blend leaves the convex hull by {hull:e}")
    })?;
    Ok(format!(
        "S=1 bitwise equal; convex combination error {worst:.1e}; hull violation {:.1e}",
        hull.max(0.0)
    ))
}

// ---------------------------------------------------------------- 7

fn fusion_invariances() -> Outcome {
    let (cfg, mel) = small_tts(PriorInput::Text);
    let model = Tts::new(&cfg, &mel, 12, DType::F32, &Device::Cpu).map_err(err)?;
    let seq = model.encode_text("permutation").map_err(err)?;
    let (h_prev, mask) = model.pre_fusion_single(&seq).map_err(err)?;
    let cb = random_codebook("p", 9, cfg.latent_dim, 3);
    let mut perm: Vec<usize> = (0..9).collect();
    perm.reverse();
    perm.swap(0, 4);
    let permuted = SpeakerCodebook {
        vectors: cb.vectors.select(Axis(0), &perm),
        ..cb.clone()
    };
    let run = |c: &SpeakerCodebook| -> Result<Array2<f32>, String> {
        let mem = model.encode_codebook(c).map_err(err)?;
        array_from_tensor(
            &model
                .fuse(&h_prev, &mem, &mask)
                .map_err(err)?
                .squeeze(0)
                .map_err(err)?,
        )
        .map_err(err)
    };
    let (x, y) = (run(&cb)?, run(&permuted)?);
    let perm_diff = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    check(perm_diff < 1e-5, || {
        format!("row permutation changed fused output by {perm_diff:e}")
    })?;

    let single = random_codebook("k1", 1, cfg.latent_dim, 4);
    let mem = model.encode_codebook(&single).map_err(err)?;
    let elf_core::tts::PriorPath::Fusion(block) = &model.prior_path else {
        return Err("expected a fusion block".into());
    };
    let combined = block
        .attn
        .attend(&h_prev, &mem, None)
        .map_err(err)?
        .combined;
    let value = block.attn.v.forward(&mem).map_err(err)?;
    let diff = combined
        .broadcast_sub(&value)
        .map_err(err)?
        .abs()
        .map_err(err)?
        .max_all()
        .map_err(err)?
        .to_scalar::<f32>()
        .map_err(err)?;
    check(diff < 1e-6, || {
        format!("K=1 attention output differs from the value vector by {diff:e}")
    })?;
    Ok(format!(
        "permutation change {perm_diff:.1e}; K=1 collapse error {diff:.1e}"
    ))
}

// ---------------------------------------------------------------- 8

fn sfen_training(clips: &[Clip]) -> Result<(String, Sfen), String> {
    let mel = toy_mel();
    let cfg = elf_core::sfen::SfenConfig::toy();
    let model = Sfen::new(&cfg, &mel, 0, DType::F32, &Device::Cpu).map_err(err)?;
    let train = TrainConfig {
        batch_size: 4,
        max_steps: 2000,
        ..TrainConfig::default()
    };
    let mut trainer = SfenTrainer::new(model, &train, clips.len()).map_err(err)?;
    let start = Instant::now();
    let mut recon = Vec::new();
    let mut result = None;
    while trainer.step() < train.max_steps {
        let rec = trainer.train_step(clips).map_err(err)?;
        recon.push(rec.get("recon").unwrap());
        let n = recon.len();
        if n >= 200 {
            let base = trailing_mean(&recon, 100, 100);
            let now = trailing_mean(&recon, n, 100);
            if now <= 0.5 * base {
                result = Some((base, now, n));
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let n = recon.len();
    let base = trailing_mean(&recon, 100, 100);
    let now = trailing_mean(&recon, n, 100);
    match result {
        Some(_) if secs < 3.0 * 3600.0 => Ok((
            format!(
                "SFEN recon {base:.3} -> {now:.3} ({:.0}% drop) at step {n}, {:.0} s",
                100.0 * (1.0 - now / base),
                secs
            ),
            trainer.model,
        )),
        _ => Err(format!(
            "SFEN recon {base:.3} -> {now:.3} ({:.0}% drop, need 50%) after {n} steps, {secs:.0} s",
            100.0 * (1.0 - now / base)
        )),
    }
}

fn overfit(
    prior: PriorInput,
    examples_from: &[Clip],
    codebooks: &BTreeMap<String, SpeakerCodebook>,
) -> Result<(String, Tts), String> {
    let mel = toy_mel();
    let cfg = match prior {
        PriorInput::Text => elf_core::tts::TtsConfig::toy(),
        PriorInput::Codebook => elf_core::tts::TtsConfig::fts_toy(),
    };
    let model = Tts::new(&cfg, &mel, 0, DType::F32, &Device::Cpu).map_err(err)?;
    let examples: Vec<TtsExample> = examples_from
        .iter()
        .map(|c| TtsExample::from_clip(c, &model.tokenizer))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let train = TrainConfig {
        batch_size: 4,
        max_steps: 5000,
        ..TrainConfig::default()
    };
    let mut trainer = TtsTrainer::new(model, &train, examples.len()).map_err(err)?;
    let start = Instant::now();
    let (mut mel_l1, mut dur) = (Vec::new(), Vec::new());
    let mut done = false;
    while trainer.step() < train.max_steps {
        let rec = trainer.train_step(&examples, codebooks).map_err(err)?;
        mel_l1.push(rec.get("mel").unwrap());
        dur.push(rec.get("dur_mse").unwrap());
        let n = mel_l1.len();
        if n >= 200
            && trailing_mean(&mel_l1, n, 100) <= 0.4 * trailing_mean(&mel_l1, 100, 100)
            && trailing_mean(&dur, n, 100) < trailing_mean(&dur, 100, 100)
        {
            done = true;
            break;
        }
    }
    let n = mel_l1.len();
    let (mb, me) = (
        trailing_mean(&mel_l1, 100, 100),
        trailing_mean(&mel_l1, n, 100),
    );
    let (db, de) = (trailing_mean(&dur, 100, 100), trailing_mean(&dur, n, 100));
    let line = format!(
        "{} mel-L1 {mb:.3} -> {me:.3} ({:.0}% drop), duration MSE {db:.3} -> {de:.3} at step {n}, {:.0} s",
        trainer.model.kind(),
        100.0 * (1.0 - me / mb),
        start.elapsed().as_secs_f64()
    );
    if done {
        Ok((line, trainer.model))
    } else {
        Err(line)
    }
}

fn training_oracles() -> Outcome {
    let mel = toy_mel();
    let clips = corpus(&SyntheticSpec::default(), &mel);
    let total: f64 = clips.iter().map(|c| c.wave.duration_secs()).sum();
    let (sfen_line, sfen) = sfen_training(&clips)?;
    let small = corpus(
        &SyntheticSpec {
            clips_per_speaker: 5,
            min_symbols: 6,
            max_symbols: 10,
            seed: 1,
            ..SyntheticSpec::default()
        },
        &mel,
    );
    let mut codebooks = BTreeMap::new();
    for spk in ["spk0", "spk1"] {
        let own: Vec<&Clip> = small.iter().filter(|c| c.speaker_id == spk).collect();
        let frames = extract_mu_frames(&own, &sfen).map_err(err)?;
        codebooks.insert(
            spk.to_string(),
            build_codebook(&frames, &ClusterConfig::default()).map_err(err)?,
        );
    }
    let (tts_line, _) = overfit(PriorInput::Text, &small, &codebooks)?;
    let (fts_line, fts) = overfit(PriorInput::Codebook, &small, &codebooks)?;
    let sfen_values: std::collections::HashSet<Vec<u32>> = sfen
        .store
        .export()
        .map_err(err)?
        .into_iter()
        .map(|t| bits(&t.data))
        .collect();
    let fresh = Tts::new(&fts.cfg, &mel, 0, DType::F32, &Device::Cpu).map_err(err)?;
    let shared = fresh
        .store
        .export()
        .map_err(err)?
        .iter()
        .filter(|t| {
            sfen_values.contains(&bits(&t.data)) && t.data.iter().any(|v| *v != 0.0 && *v != 1.0)
        })
        .count();
    check(shared == 0, || {
        format!("{shared} FTS tensors are bit-equal to SFEN tensors")
    })?;
    Ok(format!(
        "corpus {total:.0} s; {sfen_line}; {tts_line}; {fts_line}; FTS init shares no tensor with SFEN"
    ))
}

// ---------------------------------------------------------------- 9

fn parameter_reuse() -> Outcome {
    let mel = toy_mel();
    let dev = Device::Cpu;
    let sfen = Sfen::new(
        &elf_core::sfen::SfenConfig::toy(),
        &mel,
        21,
        DType::F32,
        &dev,
    )
    .map_err(err)?;
    let ck = SfenTrainer::new(sfen, &TrainConfig::default(), 1)
        .map_err(err)?
        .checkpoint()
        .map_err(err)?;
    let model =
        Tts::new(&elf_core::tts::TtsConfig::toy(), &mel, 22, DType::F32, &dev).map_err(err)?;
    let before = model.store.export().map_err(err)?;
    let copied = init_decoder_from_sfen(&model, &ck).map_err(err)?;
    let after: BTreeMap<String, Vec<f32>> = model
        .store
        .export()
        .map_err(err)?
        .into_iter()
        .map(|t| (t.name, t.data))
        .collect();
    for name in &copied {
        check(
            bits(&after[name]) == bits(&ck.tensor(name).unwrap().data),
            || format!("{name} not copied"),
        )?;
    }
    let stages = model.cfg.decoder.upsample_factors.len();
    for s in 1..stages {
        let [ups, res] = Generator::stage_prefixes(s);
        for p in [ups, res] {
            check(
                copied.iter().any(|n| n.starts_with(&format!("dec.{p}"))),
                || format!("stage dec.{p} not copied"),
            )?;
        }
    }
    check(copied.iter().any(|n| n.starts_with("disc.")), || {
        "discriminator not copied".into()
    })?;
    let [ups0, res0] = Generator::stage_prefixes(0);
    let (mut first_stage, mut distinct) = (0, 0);
    for t in &before {
        let untouched = bits(&after[&t.name]) == bits(&t.data);
        let in_first = t.name.starts_with(&format!("dec.{ups0}"))
            || t.name.starts_with(&format!("dec.{res0}"));
        if in_first {
            first_stage += 1;
            check(untouched && !copied.contains(&t.name), || {
                format!("{} was overwritten", t.name)
            })?;
            if bits(&ck.tensor(&t.name).unwrap().data) != bits(&t.data) {
                distinct += 1;
            }
        } else if !copied.contains(&t.name) {
            check(untouched, || {
                format!("{} changed but is not in the copy set", t.name)
            })?;
        }
    }
    // Zero-initialised biases match the checkpoint by construction; the
    // weights must not.
    check(distinct > 0, || {
        "every first-stage tensor already equals the checkpoint".into()
    })?;
    Ok(format!(
        "{} tensors bit-equal to the checkpoint; {first_stage} first-stage tensors keep their fresh values ({distinct} differ from the checkpoint)",
        copied.len()
    ))
}

// ---------------------------------------------------------------- 10

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cb = random_codebook("rt", 6, 16, 31);
    let cb_path = dir.path().join("rt.elfc");
    save_codebook(&cb, &cb_path).map_err(err)?;
    let back = load_codebook(&cb_path).map_err(err)?;
    check(
        back == cb
            && bits(back.vectors.as_slice().unwrap()) == bits(cb.vectors.as_slice().unwrap()),
        || "codebook round trip changed data".into(),
    )?;
    let mut bytes = std::fs::read(&cb_path).map_err(err)?;
    bytes[20] ^= 0x40;
    check(SpeakerCodebook::from_bytes(&bytes).is_err(), || {
        "codebook corruption not detected".into()
    })?;

    let (cfg, mel) = small_tts(PriorInput::Text);
    let model = Tts::new(&cfg, &mel, 32, DType::F32, &Device::Cpu).map_err(err)?;
    let ck = TtsTrainer::new(model, &TrainConfig::default(), 1)
        .map_err(err)?
        .checkpoint()
        .map_err(err)?;
    let ck_path = dir.path().join("tts.ckpt");
    ck.save(&ck_path).map_err(err)?;
    let loaded = Checkpoint::load(&ck_path).map_err(err)?;
    check(loaded.to_bytes() == ck.to_bytes(), || {
        "checkpoint round trip changed bytes".into()
    })?;
    check(
        loaded
            .tensors
            .iter()
            .zip(&ck.tensors)
            .all(|(a, b)| a.name == b.name && bits(&a.data) == bits(&b.data)),
        || "checkpoint tensors differ".into(),
    )?;
    let mut raw = std::fs::read(&ck_path).map_err(err)?;
    let mid = raw.len() / 2;
    raw[mid] ^= 0x01;
    check(Checkpoint::from_bytes(&raw).is_err(), || {
        "checkpoint corruption not detected".into()
    })?;
    check(
        Checkpoint::load_kind(&ck_path, ModelKind::Fts).is_err(),
        || "kind mismatch accepted".into(),
    )?;

    let mut wavs = Vec::new();
    for i in 0..2 {
        let m = Tts::load(&ck_path, ModelKind::Tts, &Device::Cpu).map_err(err)?;
        let cb = load_codebook(&cb_path).map_err(err)?;
        let seq = m.encode_text("same words").map_err(err)?;
        let out = m
            .synthesize(
                &seq,
                &cb,
                &SynthesisOptions {
                    seed: 9,
                    ..SynthesisOptions::default()
                },
            )
            .map_err(err)?;
        let p = dir.path().join(format!("out{i}.wav"));
        write_wav(&p, &out.wave).map_err(err)?;
        wavs.push(std::fs::read(&p).map_err(err)?);
    }
    check(wavs[0] == wavs[1], || {
        "repeated synthesis produced different WAV bytes".into()
    })?;
    Ok(format!(
        "codebook and checkpoint bit-exact, corruption detected; two syntheses give identical {}-byte WAVs",
        wavs[0].len()
    ))
}

// ---------------------------------------------------------------- 11

fn value_span() -> Outcome {
    let (cfg, mel) = small_tts(PriorInput::Codebook);
    let model = Tts::new(&cfg, &mel, 41, DType::F32, &Device::Cpu).map_err(err)?;
    let cb = random_codebook("v", 6, cfg.latent_dim, 42);
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for text in ["one text", "another!", "x"] {
        let seq = model.encode_text(text).map_err(err)?;
        let d = fts_decompose(&model, &seq, &cb).map_err(err)?;
        let k = d.values.nrows();
        let vt = DMatrix::from_fn(d.values.ncols(), k, |i, j| d.values[[j, i]] as f64);
        let svd = vt.clone().svd(true, true);
        for (r, row) in d.output.rows().into_iter().enumerate() {
            let o = DVector::from_iterator(row.len(), row.iter().map(|v| *v as f64));
            let w = svd.solve(&o, 1e-12).map_err(err)?;
            let residual = (&vt * &w - &o).norm();
            worst = worst.max(residual);
            let weights = d.weights.row(r);
            let sum: f32 = weights.sum();
            check(
                weights.iter().all(|w| *w >= 0.0) && (sum - 1.0).abs() < 1e-5,
                || format!("row {r} weights {weights:?} are not convex"),
            )?;
            rows += 1;
        }
    }
    check(worst < 1e-5, || format!("least-squares residual {worst:e}"))?;
    Ok(format!(
        "{rows} rows, worst least-squares residual {worst:.1e}, all weights convex"
    ))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("MAS equals exhaustive enumeration", mas_oracle),
        ("KL closed form vs Monte Carlo", kl_monte_carlo),
        ("gradient checks", gradient_checks),
        ("flow integrity", flow_integrity),
        ("clustering oracle", clustering_oracle),
        ("blending algebra", blending_algebra),
        ("fusion invariances", fusion_invariances),
        ("toy training oracles", training_oracles),
        ("decoder parameter reuse", parameter_reuse),
        ("format round trips", format_round_trips),
        ("FTS value span", value_span),
    ];
    let only: Option<Vec<usize>> = std::env::var("ELF_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
