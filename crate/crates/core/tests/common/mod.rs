#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use elf_core::audio::{mel_spectrogram, trim_silence, MelConfig};
use elf_core::codebook::{Provenance, SpeakerCodebook};
use elf_core::data::Clip;
use elf_core::nn::ParamStore;
use elf_core::sfen::SfenConfig;
use elf_core::synthetic::{generate, SyntheticSpec};
use elf_core::tts::flow::FlowConfig;
use elf_core::tts::{PriorInput, TtsConfig};
use elf_core::vocoder::{DiscriminatorConfig, GeneratorConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_mel() -> MelConfig {
    MelConfig {
        fft_size: 1024,
        window_size: 1024,
        hop_size: 256,
        ..MelConfig::default()
    }
}

/// Synthetic corpus, trimmed and analysed like the preprocessing step does.
pub fn corpus(spec: &SyntheticSpec, mel: &MelConfig) -> Vec<Clip> {
    generate(spec)
        .unwrap()
        .into_iter()
        .map(|(e, w)| {
            let w = trim_silence(&w, -40.0).unwrap();
            let m = mel_spectrogram(&w, mel).unwrap();
            Clip {
                id: e.clip_id,
                speaker_id: e.speaker_id,
                transcript: e.transcript,
                wave: w,
                mel: m,
            }
        })
        .collect()
}

/// Hop 4, two frames per window.
pub fn micro_mel() -> MelConfig {
    MelConfig {
        fft_size: 8,
        window_size: 8,
        hop_size: 4,
        n_mels: 4,
        ..MelConfig::default()
    }
}

pub fn micro_generator() -> GeneratorConfig {
    GeneratorConfig {
        initial_channel: 4,
        upsample_factors: vec![2, 2],
        upsample_kernels: vec![4, 4],
        resblock_kernels: vec![3],
        resblock_dilations: vec![vec![1]],
    }
}

pub fn micro_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig {
        periods: vec![2],
        period_channels: vec![4, 4],
        scales: 1,
        scale_channels: vec![4, 4],
    }
}

/// `H = 4`, hop 4.
pub fn micro_sfen() -> SfenConfig {
    SfenConfig {
        latent_dim: 4,
        encoder_hidden: 4,
        encoder_layers: 2,
        encoder_kernel: 3,
        generator: micro_generator(),
        discriminator: micro_discriminator(),
        lambda_sf: 45.0,
        segment_samples: 8,
    }
}

pub fn micro_tts(prior_input: PriorInput) -> TtsConfig {
    TtsConfig {
        text_vocab: "ab c".into(),
        prior_input,
        latent_dim: 4,
        d_model: 8,
        n_text_layers: 2,
        fusion_layer_index: 1,
        n_heads: 2,
        ffn_hidden: 8,
        codebook_layers: 1,
        latent_channels: 2,
        posterior_hidden: 4,
        posterior_layers: 1,
        posterior_kernel: 3,
        flow: FlowConfig {
            channels: 2,
            blocks: 1,
            hidden: 4,
            kernel: 3,
            wn_layers: 1,
            heads: 2,
            transformer_dim: 8,
        },
        duration_noise_dim: 2,
        duration_hidden: 4,
        lambda_dp: 1.0,
        lambda_mel: 45.0,
        decoder: micro_generator(),
        discriminator: micro_discriminator(),
        segment_frames: 2,
    }
}

/// Small but non-trivial model sizes for algebraic checks.
pub fn small_tts(prior_input: PriorInput) -> (TtsConfig, MelConfig) {
    let mut cfg = TtsConfig::toy();
    cfg.prior_input = prior_input;
    cfg.latent_dim = 16;
    cfg.d_model = 32;
    cfg.ffn_hidden = 64;
    cfg.decoder = GeneratorConfig {
        initial_channel: 16,
        upsample_factors: vec![4, 4, 4, 4],
        upsample_kernels: vec![8, 8, 8, 8],
        resblock_kernels: vec![3],
        resblock_dilations: vec![vec![1, 3]],
    };
    (cfg, toy_mel())
}

pub fn random_codebook(id: &str, k: usize, h: usize, seed: u64) -> SpeakerCodebook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpeakerCodebook {
        speaker_id: id.into(),
        vectors: Array2::from_shape_fn((k, h), |_| rng.random_range(-1.0f32..1.0)),
        clustered: true,
        provenance: Provenance {
            n_source_frames: k as u64,
            n_source_clips: 1,
            seed,
        },
    }
}

pub fn element(t: &Tensor, i: usize) -> f64 {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()[i]
}

/// Central difference of `f` with respect to element `i` of parameter `name`.
pub fn central_difference(
    store: &ParamStore,
    name: &str,
    i: usize,
    h: f64,
    f: &mut dyn FnMut() -> f64,
) -> f64 {
    let var = store.var(name).unwrap();
    let orig = var.as_tensor().copy().unwrap();
    let shape = orig.shape().clone();
    let base = orig
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let mut eval = |delta: f64| {
        let mut v = base.clone();
        v[i] += delta;
        let t = Tensor::from_vec(v, shape.clone(), &Device::Cpu)
            .unwrap()
            .to_dtype(store.dtype())
            .unwrap();
        store.set(name, &t).unwrap();
        f()
    };
    let plus = eval(h);
    let minus = eval(-h);
    store.set(name, &orig).unwrap();
    (plus - minus) / (2.0 * h)
}

/// `|a - n| / |n|` over vectors, with `n` the numeric reference.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}
