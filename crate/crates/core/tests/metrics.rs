use proptest::prelude::*;
use specgen_core::image::Image;
use specgen_core::metrics::{batch_compare, match_gallery, psnr, ssim, Metric, NamedImage, SsimParams, Summary};
use specgen_core::numerics::RngState;

fn random_image(rng: &mut RngState, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
}

// Straight from the definitions: per-window loops, two-pass moments.
fn oracle_ssim(a: &Image, b: &Image, n: usize, k1: f64, k2: f64, l: f64) -> f64 {
    let (h, w) = a.shape();
    let c1 = (k1 * l) * (k1 * l);
    let c2 = (k2 * l) * (k2 * l);
    let mut acc = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - n {
        for c0 in 0..=w - n {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for r in r0..r0 + n {
                for c in c0..c0 + n {
                    xs.push(a.get(r, c));
                    ys.push(b.get(r, c));
                }
            }
            let m = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / m;
            let my = ys.iter().sum::<f64>() / m;
            let mut vx = 0.0;
            let mut vy = 0.0;
            let mut cxy = 0.0;
            for i in 0..xs.len() {
                vx += (xs[i] - mx) * (xs[i] - mx);
                vy += (ys[i] - my) * (ys[i] - my);
                cxy += (xs[i] - mx) * (ys[i] - my);
            }
            vx /= m - 1.0;
            vy /= m - 1.0;
            cxy /= m - 1.0;
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn oracle_psnr(a: &Image, b: &Image, max: f64) -> f64 {
    let mut se = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            se += (a.get(r, c) - b.get(r, c)).powi(2);
        }
    }
    10.0 * (max * max / (se / (a.height() * a.width()) as f64)).log10()
}

#[test]
fn matches_scalar_oracle_on_random_pairs() {
    let mut rng = RngState::new(11);
    for i in 0..100 {
        let a = random_image(&mut rng, 16, 16);
        // Half the pairs are correlated so SSIM spans a useful range.
        let b = if i % 2 == 0 {
            random_image(&mut rng, 16, 16)
        } else {
            let noise = random_image(&mut rng, 16, 16);
            Image::new(16, 16, a.data().iter().zip(noise.data()).map(|(x, n)| 0.8 * x + 0.2 * n).collect()).unwrap()
        };
        let s = ssim(&a, &b, SsimParams::default()).unwrap();
        let o = oracle_ssim(&a, &b, 7, 0.01, 0.03, 1.0);
        assert!((s - o).abs() < 1e-6, "pair {i}: ssim {s} vs oracle {o}");
        let p = psnr(&a, &b, 1.0).unwrap();
        let q = oracle_psnr(&a, &b, 1.0);
        assert!((p - q).abs() < 1e-6, "pair {i}: psnr {p} vs oracle {q}");
    }
}

#[test]
fn oracle_agreement_with_other_parameters() {
    let mut rng = RngState::new(12);
    let a = random_image(&mut rng, 12, 20);
    let b = random_image(&mut rng, 12, 20);
    let p = SsimParams { window: 5, k1: 0.05, k2: 0.1, l: 2.0 };
    let s = ssim(&a, &b, p).unwrap();
    assert!((s - oracle_ssim(&a, &b, 5, 0.05, 0.1, 2.0)).abs() < 1e-6);
    assert!((psnr(&a, &b, 2.0).unwrap() - oracle_psnr(&a, &b, 2.0)).abs() < 1e-6);
}

#[test]
fn constant_images_reduce_to_luminance_term() {
    let p = SsimParams::default();
    let c1 = (p.k1 * p.l).powi(2);
    for (u, v) in [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.3)] {
        let a = Image::filled(10, 9, u);
        let b = Image::filled(10, 9, v);
        let expect = (2.0 * u * v + c1) / (u * u + v * v + c1);
        let got = ssim(&a, &b, p).unwrap();
        assert!((got - expect).abs() < 1e-12, "{u},{v}: {got} vs {expect}");
    }
}

#[test]
fn psnr_closed_forms() {
    let a = Image::filled(4, 4, 0.0);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    // MSE = max² → 0 dB.
    assert!(psnr(&a, &Image::filled(4, 4, 1.0), 1.0).unwrap().abs() < 1e-12);
    // MSE = max²/100 → 20 dB.
    assert!((psnr(&a, &Image::filled(4, 4, 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((psnr(&a, &Image::filled(4, 4, 25.5), 255.0).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn shape_and_parameter_errors() {
    let a = Image::filled(8, 8, 0.5);
    let b = Image::filled(8, 9, 0.5);
    assert!(psnr(&a, &b, 1.0).is_err());
    assert!(psnr(&a, &a, 0.0).is_err());
    assert!(ssim(&a, &b, SsimParams::default()).is_err());
    let small = Image::filled(6, 6, 0.5);
    assert!(ssim(&small, &small, SsimParams::default()).is_err());
    assert!(ssim(&a, &a, SsimParams { k1: 0.0, ..SsimParams::default() }).is_err());
    assert!(ssim(&a, &a, SsimParams { k2: -1.0, ..SsimParams::default() }).is_err());
}

fn named(prefix: &str, ims: &[Image]) -> Vec<NamedImage> {
    ims.iter().enumerate().map(|(i, im)| NamedImage::new(format!("{prefix}{i:02}"), im.clone())).collect()
}

fn random_set(seed: u64, n: usize) -> Vec<Image> {
    let mut rng = RngState::new(seed);
    (0..n).map(|_| random_image(&mut rng, 12, 12)).collect()
}

#[test]
fn self_comparison_is_perfect() {
    let set = named("r", &random_set(3, 6));
    let report = batch_compare(&set, &set, SsimParams::default(), 2).unwrap();
    assert_eq!(report.records.len(), 6);
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!(r.reference, i);
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.psnr, f64::INFINITY);
    }
    assert_eq!(report.ssim.mean, 1.0);
    assert_eq!(report.ssim.ci95, 0.0);
    assert_eq!(report.psnr.mean, f64::INFINITY);
    assert!(report.to_csv().contains(",inf,"));
}

#[test]
fn singleton_has_zero_half_width() {
    let g = named("g", &random_set(4, 1));
    let r = named("r", &random_set(5, 1));
    let report = batch_compare(&g, &r, SsimParams::default(), 1).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.psnr.ci95, 0.0);
    assert_eq!(report.ssim.ci95, 0.0);
}

#[test]
fn aggregates_follow_the_records() {
    let g = named("g", &random_set(6, 9));
    let r = named("r", &random_set(7, 5));
    let report = batch_compare(&g, &r, SsimParams::default(), 3).unwrap();
    let ss: Vec<f64> = report.records.iter().map(|r| r.ssim).collect();
    let n = ss.len() as f64;
    let mean = ss.iter().sum::<f64>() / n;
    let sd = (ss.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((report.ssim.mean - mean).abs() < 1e-12);
    assert!((report.ssim.ci95 - 1.96 * sd / n.sqrt()).abs() < 1e-12);
    // Each record holds the SSIM-maximising reference, with PSNR for that pair.
    for rec in &report.records {
        let best = r.iter().map(|x| ssim(&g[rec.generated].image, &x.image, SsimParams::default()).unwrap());
        assert_eq!(rec.ssim, best.fold(f64::NEG_INFINITY, f64::max));
        assert_eq!(rec.psnr, psnr(&g[rec.generated].image, &r[rec.reference].image, 1.0).unwrap());
    }
    let ranked = report.ranked(Metric::Psnr);
    assert!(ranked.windows(2).all(|w| w[0].psnr >= w[1].psnr));
    assert_eq!(report.bottom(Metric::Ssim, 1)[0].ssim, ss.iter().cloned().fold(f64::INFINITY, f64::min));
}

#[test]
fn worker_count_does_not_change_report() {
    let g = named("g", &random_set(8, 7));
    let r = named("r", &random_set(9, 4));
    let one = batch_compare(&g, &r, SsimParams::default(), 1).unwrap();
    let many = batch_compare(&g, &r, SsimParams::default(), 4).unwrap();
    assert_eq!(one, many);
}

#[test]
fn rejects_empty_and_ragged_sets() {
    let g = named("g", &random_set(10, 2));
    assert!(batch_compare(&[], &g, SsimParams::default(), 1).is_err());
    assert!(batch_compare(&g, &[], SsimParams::default(), 1).is_err());
    let mut r = g.clone();
    r.push(NamedImage::new("odd", Image::filled(12, 13, 0.1)));
    assert!(batch_compare(&g, &r, SsimParams::default(), 1).is_err());
}

#[test]
fn summary_ci_conventions() {
    assert_eq!(Summary::of(&[3.0]).ci95, 0.0);
    assert_eq!(Summary::of(&[f64::INFINITY, f64::INFINITY]).ci95, 0.0);
    assert_eq!(Summary::of(&[f64::INFINITY, 2.0]).ci95, f64::INFINITY);
    let s = Summary::of(&[1.0, 3.0]);
    assert_eq!(s.mean, 2.0);
    assert!((s.ci95 - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn summary_text_carries_reference_context() {
    let g = named("g", &random_set(13, 3));
    let report = batch_compare(&g, &g, SsimParams::default(), 1).unwrap();
    let text = report.summary(2);
    assert!(text.contains("10.36 dB"));
    assert!(text.contains("0.29"));
    assert!(text.contains("best ssim"));
}

#[test]
fn gallery_writes_four_panels() {
    let g = named("g", &random_set(14, 5));
    let r = named("r", &random_set(15, 8));
    let report = batch_compare(&g, &r, SsimParams::default(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = match_gallery(&report, &g, &r, 3, dir.path()).unwrap();
    let mut names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    names.sort();
    assert_eq!(names, ["best_psnr.png", "best_ssim.png", "worst_psnr.png", "worst_ssim.png"]);
    for f in &files {
        let im = specgen_core::image::read_png(f).unwrap();
        // Three rows of 48-pixel tiles separated by 2-pixel gaps; two tiles per row.
        assert_eq!(im.shape(), (3 * 48 + 2 * 2, 2 * 48 + 2));
    }
    let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let again = match_gallery(&report, &g, &r, 3, dir.path()).unwrap();
    assert_eq!(files, again);
    assert_eq!(first, again.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());

    assert!(match_gallery(&report, &g, &r, 0, dir.path()).is_err());
    assert!(match_gallery(&report, &g, &r, 6, dir.path()).is_err());
}

#[test]
fn gallery_reports_io_failure() {
    let g = named("g", &random_set(16, 2));
    let report = batch_compare(&g, &g, SsimParams::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(match_gallery(&report, &g, &g, 1, &blocker.join("sub")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_strictly_decreasing_in_perturbation(seed in any::<u64>(), s1 in 0.01f64..1.0, grow in 1.01f64..4.0) {
        let mut rng = RngState::new(seed);
        let a = random_image(&mut rng, 10, 10);
        let d = random_image(&mut rng, 10, 10);
        let shift = |s: f64| Image::new(10, 10, a.data().iter().zip(d.data()).map(|(x, n)| x + s * (n - 0.5)).collect()).unwrap();
        let near = psnr(&a, &shift(s1), 1.0).unwrap();
        let far = psnr(&a, &shift(s1 * grow), 1.0).unwrap();
        prop_assert!(near > far);
    }

    #[test]
    fn ssim_bounded_symmetric_and_one_only_on_identity(seed in any::<u64>(), h in 7usize..14, w in 7usize..14) {
        let mut rng = RngState::new(seed);
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        let p = SsimParams::default();
        let ab = ssim(&a, &b, p).unwrap();
        let ba = ssim(&b, &a, p).unwrap();
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab < 1.0 - 1e-9);
        prop_assert!((ssim(&a, &a, p).unwrap() - 1.0).abs() < 1e-9);
        let neg = Image::new(h, w, a.data().iter().map(|x| 1.0 - x).collect()).unwrap();
        let an = ssim(&a, &neg, p).unwrap();
        prop_assert!((-1.0..=1.0).contains(&an));
    }

    #[test]
    fn reference_order_does_not_matter(seed in any::<u64>()) {
        let g = named("g", &random_set(seed, 4));
        let r = named("r", &random_set(seed ^ 0xABCD, 6));
        let mut shuffled = r.clone();
        RngState::new(seed).shuffle(&mut shuffled);
        let a = batch_compare(&g, &r, SsimParams::default(), 1).unwrap();
        let b = batch_compare(&g, &shuffled, SsimParams::default(), 1).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            prop_assert_eq!(&x.reference_id, &y.reference_id);
            prop_assert_eq!(x.ssim, y.ssim);
            prop_assert_eq!(x.psnr, y.psnr);
        }
        prop_assert_eq!(a.ssim, b.ssim);
    }
}
