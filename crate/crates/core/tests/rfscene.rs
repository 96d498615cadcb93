use std::f64::consts::PI;

use proptest::prelude::*;
use specgen_core::numerics::RngState;
use specgen_core::rfscene::*;

fn scene(duration: f64, noise: f64) -> SceneConfig {
    SceneConfig { sample_rate: 1e6, duration, band_span: 1e6, noise_power: noise, rng: RngState::new(11) }
}

#[test]
fn noise_only_variance() {
    let x = synth_iq(&scene(0.1, 1.0), &[]).unwrap();
    assert_eq!(x.len(), 100_000);
    let var = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64;
    assert!((0.97..=1.03).contains(&var), "variance {var}");
    let mean_re = x.iter().map(|v| v.re).sum::<f64>() / x.len() as f64;
    assert!(mean_re.abs() < 5.0 * (0.5f64 / 1e5).sqrt());
}

#[test]
fn radar_duty_cycle() {
    let power = 1e4;
    let radar = EmitterSpec {
        center_offset: 0.0,
        bandwidth: 2e5,
        power,
        kind: EmitterKind::Radar { pulse_width: 20e-6, pri: 200e-6, start_offset: 7e-6 },
    };
    let x = synth_iq(&scene(0.02, 1.0), &[radar]).unwrap();
    let frac = x.iter().filter(|v| v.norm_sqr() > power / 2.0).count() as f64 / x.len() as f64;
    assert!((frac - 0.1).abs() <= 0.02, "on fraction {frac}");
}

#[test]
fn zero_noise_power_rejected() {
    assert!(synth_iq(&scene(0.01, 0.0), &[]).is_err());
    assert!(synth_iq(&scene(0.01, -1.0), &[]).is_err());
}

#[test]
fn stft_of_constant_is_dc() {
    let x = vec![Complex64::new(1.0, 0.0); 256];
    let p = stft(&x, 64, 64, Window::Rectangular).unwrap();
    assert_eq!((p.frames, p.bins), (4, 64));
    for f in 0..p.frames {
        assert!((p.get(f, 0) - 4096.0).abs() < 1e-9);
        assert!(p.frame(f)[1..].iter().all(|&v| v < 1e-18));
    }
}

fn tone(f: f64, fs: f64, n: usize) -> Vec<Complex64> {
    (0..n).map(|i| Complex64::from_polar(1.0, 2.0 * PI * f * i as f64 / fs)).collect()
}

#[test]
fn quarter_rate_tone_lands_in_quarter_bin() {
    let nfft = 64;
    let p = stft(&tone(0.25e6, 1e6, 1024), nfft, 32, Window::Rectangular).unwrap();
    for f in 0..p.frames {
        let frame = p.frame(f);
        let total: f64 = frame.iter().sum();
        assert!(frame[nfft / 4] >= 0.99 * total);
    }
}

#[test]
fn stft_rejects_short_input() {
    assert!(stft(&[Complex64::new(1.0, 0.0); 63], 64, 64, Window::Rectangular).is_err());
}

fn square(v: f64) -> PowerMatrix {
    PowerMatrix::new(64, 64, vec![v; 64 * 64]).unwrap()
}

#[test]
fn render_constant_is_white() {
    let img = render_image(&square(3.7), 40.0, 32).unwrap();
    assert_eq!(img.shape(), (32, 32));
    assert!(img.data().iter().all(|&v| v == 1.0));
}

#[test]
fn render_two_level_maps_to_extremes() {
    // Left half of the frames at p, right half at p/10; aligned with 2×2 output blocks.
    let p = 5.0;
    let data = (0..64).flat_map(|t| std::iter::repeat_n(if t < 32 { p } else { p / 10.0 }, 64)).collect();
    let img = render_image(&PowerMatrix::new(64, 64, data).unwrap(), 10.0, 32).unwrap();
    for r in 0..32 {
        for c in 0..32 {
            let want = if c < 16 { 1.0 } else { 0.0 };
            assert!((img.get(r, c) - want).abs() < 1e-12, "({r},{c}) = {}", img.get(r, c));
        }
    }
}

#[test]
fn render_rejects_bad_inputs() {
    assert!(render_image(&square(1.0), -3.0, 32).is_err());
    assert!(render_image(&square(1.0), 0.0, 32).is_err());
    assert!(render_image(&square(0.0), 30.0, 32).is_err());
}

#[test]
fn renders_at_64() {
    let mut cfg = DatasetConfig::new(Task::Source, 2);
    cfg.resolution = 64;
    let s = synthesize_sample(&cfg, ClassLabel::LtePlusRadar.code(), 0).unwrap();
    assert_eq!(s.image.shape(), (64, 64));
}

fn files_under(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn small_dataset_counts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::new(Task::Source, 7);
    let rows = generate_dataset(2, &cfg, dir.path(), 1).unwrap();
    assert_eq!(rows.len(), 10);
    let header = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    assert_eq!(header.lines().next().unwrap(), "file,label_code,label_name,seed,params_json");
    let back = read_manifest(&dir.path().join(MANIFEST)).unwrap();
    assert_eq!(back, rows);
    for code in 0..5 {
        assert_eq!(rows.iter().filter(|r| r.label_code == code).count(), 2);
    }
    assert_eq!(std::fs::read_dir(dir.path().join("images")).unwrap().count(), 10);
    let meta: SampleMeta = serde_json::from_str(&rows[7].params_json).unwrap();
    assert_eq!(meta.emitters.len(), 2);

    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 10);
    let fresh = synthesize_sample(&cfg, rows[3].label_code, 1).unwrap();
    assert_eq!(loaded[3].image, fresh.image.quantized());
}

#[test]
fn dataset_is_a_pure_function_of_seed_and_config() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = DatasetConfig::new(Task::Source, 7);
    generate_dataset(3, &cfg, a.path(), 1).unwrap();
    generate_dataset(3, &cfg, b.path(), 1).unwrap();
    generate_dataset(3, &cfg, c.path(), 4).unwrap();
    let fa = files_under(a.path());
    assert_eq!(fa.len(), 16);
    assert_eq!(fa, files_under(b.path()));
    assert_eq!(fa, files_under(c.path()));

    let other = DatasetConfig::new(Task::Source, 8);
    assert_ne!(synthesize_sample(&cfg, 1, 0).unwrap().image, synthesize_sample(&other, 1, 0).unwrap().image);
}

#[test]
fn unwritable_output_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let cfg = DatasetConfig::new(Task::Source, 1);
    assert!(generate_dataset(1, &cfg, &blocker.join("sub"), 1).is_err());
    assert!(generate_dataset(0, &cfg, dir.path(), 1).is_err());
}

#[test]
fn classes_have_distinct_texture() {
    let cfg = DatasetConfig::new(Task::Source, 5);
    let mean = |c: usize| (0..10).map(|i| synthesize_sample(&cfg, c, i).unwrap().image.mean()).sum::<f64>() / 10.0;
    // Noise-only images sit at the top of the dynamic range.
    let noise = mean(ClassLabel::Noise.code());
    for c in 1..5 {
        assert!(mean(c) < noise - 0.1, "class {c}");
    }
}

/// Bins whose centre frequency lies inside `[lo, hi]` Hz.
fn bins_in(lo: f64, hi: f64, nfft: usize, fs: f64) -> Vec<usize> {
    (0..nfft)
        .filter(|&k| {
            let f = if k < nfft / 2 { k as f64 } else { k as f64 - nfft as f64 } * fs / nfft as f64;
            f >= lo && f <= hi
        })
        .collect()
}

/// Per-frame energy inside the radar's band, the radar PRI, and the frames
/// holding a pulse start.
fn radar_band_energy(cfg: &DatasetConfig, class: usize, index: usize) -> (Vec<f64>, f64, Vec<usize>) {
    let (emitters, power) = simulate_scene(cfg, class, index).unwrap();
    let radar = emitters.iter().find(|e| e.is_radar()).expect("radar class");
    let EmitterKind::Radar { pri, start_offset, .. } = radar.kind else { unreachable!() };
    let (lo, hi) = radar.band();
    let bins = bins_in(lo, hi, cfg.nfft, cfg.sample_rate);
    let energy: Vec<f64> = (0..power.frames).map(|f| bins.iter().map(|&k| power.get(f, k)).sum()).collect();
    let hop = cfg.hop_time();
    let pulses = (0..)
        .map(|k| start_offset + k as f64 * pri)
        .take_while(|&t| t < cfg.duration)
        .map(|t| (t / hop + 1e-9).floor() as usize)
        .collect();
    (energy, pri, pulses)
}

fn hot_frames(energy: &[f64]) -> Vec<usize> {
    let mut sorted = energy.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    (0..energy.len()).filter(|&i| energy[i] > 3.0 * median).collect()
}

#[test]
fn radar_class_pulse_count_matches_pri() {
    let cfg = DatasetConfig::new(Task::Target, 21);
    for i in 0..60 {
        let (energy, pri, _) = radar_band_energy(&cfg, TargetLabel::Radar.code(), i);
        let hot = hot_frames(&energy).len() as i64;
        let expect = (cfg.duration / pri).floor() as i64;
        assert!((hot - expect).abs() <= 1, "#{i}: {hot} hot frames, expected {expect} ± 1");
    }
}

#[test]
fn composite_pulses_stand_out_of_the_commercial_block() {
    let src = DatasetConfig::new(Task::Source, 21);
    let tgt = DatasetConfig::new(Task::Target, 21);
    let cases = [
        (&src, ClassLabel::FiveGPlusRadar.code()),
        (&src, ClassLabel::LtePlusRadar.code()),
        (&tgt, TargetLabel::FiveGPlusRadar.code()),
    ];
    for (cfg, class) in cases {
        for i in 0..30 {
            let (energy, pri, pulses) = radar_band_energy(cfg, class, i);
            assert_eq!(pulses.len() as f64, (cfg.duration / pri).floor());
            let hot = hot_frames(&energy);
            for p in &pulses {
                assert!(hot.contains(p), "class {class} #{i}: pulse frame {p} not hot");
            }
            let stray = hot.len() - pulses.len();
            assert!(stray * 33 <= energy.len(), "class {class} #{i}: {stray} stray hot frames");
        }
    }
}

fn random_iq(seed: u64, n: usize) -> Vec<Complex64> {
    let mut rng = RngState::new(seed);
    (0..n).map(|_| Complex64::new(rng.normal() * 3.0, rng.normal() - 0.5)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval_with_rect_window(seed in 0u64..1000, log_n in 2u32..8, frames in 1usize..6, extra in 0usize..7) {
        let nfft = 1usize << log_n;
        let x = random_iq(seed, nfft * frames + extra % nfft);
        let p = stft(&x, nfft, nfft, Window::Rectangular).unwrap();
        prop_assert_eq!(p.frames, frames);
        let lhs = p.total() / nfft as f64;
        let rhs: f64 = x[..nfft * frames].iter().map(|v| v.norm_sqr()).sum();
        prop_assert!(((lhs - rhs) / rhs).abs() < 1e-9, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn tone_peaks_on_its_grid_bin(log_n in 3u32..9, k in -128i64..128, hop_div in 1usize..4) {
        let nfft = 1usize << log_n;
        let fs = 1e6;
        let k = k.rem_euclid(nfft as i64) - (nfft as i64) / 2;
        let f = k as f64 * fs / nfft as f64;
        let p = stft(&tone(f, fs, nfft * 3), nfft, (nfft / hop_div).max(1), Window::Rectangular).unwrap();
        let want = ((f / fs * nfft as f64).round() as i64).rem_euclid(nfft as i64) as usize;
        for t in 0..p.frames {
            let frame = p.frame(t);
            let peak = (0..nfft).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
            prop_assert_eq!(peak, want);
        }
    }

    #[test]
    fn rendered_images_are_in_unit_range(seed in 0u64..500, class in 0usize..5, res in prop::sample::select(vec![16usize, 32, 64])) {
        let mut cfg = DatasetConfig::new(Task::Source, seed);
        cfg.resolution = res;
        let s = synthesize_sample(&cfg, class, 0).unwrap();
        prop_assert_eq!(s.image.shape(), (res, res));
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.image.data().contains(&1.0));
    }
}
