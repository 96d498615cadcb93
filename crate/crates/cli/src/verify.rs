//! Built-in oracle suite: every check recomputes a known answer with code
//! that does not go through the routine under test.

use std::f64::consts::PI;

use anyhow::Result;
use specgen_core::diffusion::{gaussian_kl, q_sample, vlb_terms, Checkpoint, NoiseSchedule, VarianceMode};
use specgen_core::image::Image;
use specgen_core::metrics::{psnr, ssim, SsimParams};
use specgen_core::numerics::gradcheck::{gradcheck, project, store_from, GradcheckOptions};
use specgen_core::numerics::ops::shape::concat;
use specgen_core::numerics::{Bound, Conv2dSpec, ParamStore, RngState, Tape, Tensor, Var};
use specgen_core::rfscene::{stft, Complex64, Window};
use specgen_core::transfer::{improvement_percent, Convergence, CONTEXT_EPOCHS};
use specgen_core::unet::{blocks::init_params, AttnBlock, ResBlock, UNet, UNetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type Check = (&'static str, fn(u64) -> Result<Vec<Outcome>>);

pub const CHECKS: &[Check] = &[
    ("grad.ops", grad_ops),
    ("grad.blocks", grad_blocks),
    ("schedule.alpha_bar", schedule_alpha_bar),
    ("forward.q_sample", forward_q_sample),
    ("kl.exact_posterior", kl_exact_posterior),
    ("kl.closed_form", kl_closed_form),
    ("stft.tone", stft_tone),
    ("stft.parseval", stft_parseval),
    ("metrics.oracle", metrics_oracle),
    ("metrics.identities", metrics_identities),
    ("checkpoint.integrity", checkpoint_integrity),
    ("transfer.arithmetic", transfer_arithmetic),
];

/// Runs every check whose name contains `filter` (all when empty).
/// Returns `None` when nothing matches.
pub fn run(seed: u64, filter: &str) -> Option<Result<Vec<Outcome>>> {
    let selected: Vec<&Check> = CHECKS.iter().filter(|(n, _)| n.contains(filter)).collect();
    if selected.is_empty() {
        return None;
    }
    let mut all = Vec::new();
    for (name, f) in selected {
        let start = std::time::Instant::now();
        match f(seed) {
            Ok(v) => all.extend(v),
            Err(e) => all.push(Outcome { name: name.to_string(), passed: false, detail: format!("error: {e:#}") }),
        }
        log::info!("{name}: {:.1}s", start.elapsed().as_secs_f64());
    }
    Some(Ok(all))
}

/// One `PASS`/`FAIL` line per outcome plus a tally; `true` when all passed.
pub fn render(outcomes: &[Outcome]) -> (String, bool) {
    let mut text = String::new();
    for o in outcomes {
        text += &format!("{} {:<44} {}\n", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    text += &format!("{} passed, {failed} failed\n", outcomes.len() - failed);
    (text, failed == 0 && !outcomes.is_empty())
}

fn outcome(name: impl Into<String>, passed: bool, detail: String) -> Outcome {
    Outcome { name: name.into(), passed, detail }
}

fn grad<F>(name: &str, params: ParamStore<f64>, tol: f64, f: F) -> Result<Outcome>
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> specgen_core::Result<Var<'t, f64>>,
{
    let r = gradcheck(&params, GradcheckOptions::f64_default().with_tolerance(tol), f)?;
    Ok(outcome(name, r.passed(), format!("max rel err {:.2e} (tol {tol:.0e})", r.max_rel_err())))
}

fn grad_ops(seed: u64) -> Result<Vec<Outcome>> {
    const TOL: f64 = 1e-5;
    let mut rng = RngState::with_stream(seed, 0x0C);
    let mut n = |shape: &[usize]| -> Tensor<f64> { rng.normal_tensor(shape) };
    let mut out = Vec::new();

    let p = store_from(vec![("a", n(&[2, 3, 4])), ("b", n(&[1, 3, 1]))]);
    out.push(grad("grad.ops.broadcast_arith", p, TOL, |t, b| {
        let (a, c) = (b.get("a")?, b.get("b")?);
        project(t, a.add(c)?.mul(c)?.sub(a.mul(a)?)?, 1)
    })?);
    let p = store_from(vec![("x", n(&[3, 4]))]);
    out.push(grad("grad.ops.unary", p, TOL, |t, b| {
        let x = b.get("x")?;
        let y = x.scale(0.7)?.add_scalar(0.3)?.tanh()?.add(x.sigmoid()?)?.add(x.silu()?)?;
        let z = x.square()?.add_scalar(1.0)?.log()?.add(x.scale(0.3)?.exp()?)?.neg()?;
        project(t, y.add(z)?, 2)
    })?);
    let p = store_from(vec![("x", n(&[5]).map(|v| 0.5 + v.abs()))]);
    out.push(grad("grad.ops.clamp_min", p, TOL, |t, b| project(t, b.get("x")?.clamp_min(0.1)?, 3))?);
    let p = store_from(vec![("x", n(&[2, 3])), ("y", n(&[2, 3]))]);
    out.push(grad("grad.ops.reductions", p, TOL, |_, b| {
        let (x, y) = (b.get("x")?, b.get("y")?);
        x.mse(y)?.add(x.mean()?)?.add(y.square()?.sum()?)
    })?);
    let p = store_from(vec![("x", n(&[2, 5, 3]))]);
    out.push(grad("grad.ops.shape", p, TOL, |t, b| {
        let x = b.get("x")?;
        let y = concat(t, &[x.narrow(1, 3, 2)?.scale(2.0)?, x.narrow(1, 0, 2)?, x], 1)?.reshape(&[6, 9, 1])?;
        project(t, y, 4)
    })?);
    let p = store_from(vec![("x", n(&[3, 4])), ("w", n(&[4, 2])), ("b", n(&[2]))]);
    out.push(grad("grad.ops.linear", p, TOL, |t, b| project(t, b.get("x")?.linear(b.get("w")?, b.get("b")?)?, 5))?);
    for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let p = store_from(vec![("x", n(&[2, 3, 5, 6])), ("w", n(&[4, 3, k, k])), ("b", n(&[4]))]);
        out.push(grad(&format!("grad.ops.conv2d_s{stride}_p{padding}_k{k}"), p, TOL, move |t, b| {
            project(t, b.get("x")?.conv2d(b.get("w")?, Some(b.get("b")?), Conv2dSpec { stride, padding })?, 6)
        })?);
    }
    let p = store_from(vec![("x", n(&[2, 2, 4, 6]))]);
    out.push(grad("grad.ops.resample", p, TOL, |t, b| {
        let x = b.get("x")?;
        project(t, x.upsample_nearest2x()?.square()?.avgpool2x()?.add(x.avgpool2x()?.upsample_nearest2x()?)?, 7)
    })?);
    let p = store_from(vec![("x", n(&[2, 6, 3, 3])), ("g", n(&[6])), ("b", n(&[6]))]);
    out.push(grad("grad.ops.group_norm", p, TOL, |t, b| {
        project(t, b.get("x")?.group_norm(b.get("g")?, b.get("b")?, 3)?, 8)
    })?);
    let p = store_from(vec![("x", n(&[2, 3, 4]))]);
    out.push(grad("grad.ops.softmax", p, TOL, |t, b| project(t, b.get("x")?.softmax(2)?, 9))?);
    let p = store_from(vec![("q", n(&[2, 3, 5])), ("k", n(&[2, 3, 5])), ("v", n(&[2, 3, 5]))]);
    out.push(grad("grad.ops.attention", p, TOL, |t, b| {
        project(t, b.get("q")?.attention(b.get("k")?, b.get("v")?)?, 10)
    })?);
    let p = store_from(vec![("x", n(&[4, 5]))]);
    out.push(grad("grad.ops.cross_entropy", p, TOL, |_, b| b.get("x")?.cross_entropy(&[0, 3, 4, 1]))?);
    let x0 = Tensor::from_f64(vec![6], &[-1.0, -0.5, 0.0, 0.25, 0.6, 1.0])?;
    let p = store_from(vec![("m", n(&[6]).scale(0.3)), ("s", n(&[6]).map(|v| -1.0 + 0.2 * v))]);
    out.push(grad("grad.ops.discretized_gaussian_nll", p, TOL, move |t, b| {
        project(t, b.get("m")?.discretized_gaussian_nll(b.get("s")?, &x0)?, 11)
    })?);
    Ok(out)
}

// Zero-initialised tensors get small noise so every path carries gradient.
fn perturbed(params: &ParamStore<f64>, rng: &mut RngState) -> ParamStore<f64> {
    params
        .iter()
        .map(|(k, v)| {
            let noise: Tensor<f64> = rng.normal_tensor(v.shape());
            (k.clone(), v.zip_map(&noise, |a, n| a + 0.2 * n).expect("same shape"))
        })
        .collect()
}

fn grad_blocks(seed: u64) -> Result<Vec<Outcome>> {
    const TOL: f64 = 1e-4;
    let mut rng = RngState::with_stream(seed, 0x0B);
    let mut out = Vec::new();

    let res = ResBlock { prefix: "r".into(), in_ch: 4, out_ch: 8, temb_dim: 6 };
    let mut p = perturbed(&init_params(&res.param_specs(), &mut rng), &mut rng);
    p.insert("x", rng.normal_tensor(&[2, 4, 4, 4]));
    p.insert("temb", rng.normal_tensor(&[2, 6]));
    out.push(grad("grad.blocks.residual", p, TOL, |t, b| project(t, res.forward(b, b.get("x")?, b.get("temb")?)?, 4))?);

    let attn = AttnBlock { prefix: "a".into(), channels: 8, heads: 2 };
    let mut p = perturbed(&init_params(&attn.param_specs(), &mut rng), &mut rng);
    p.insert("x", rng.normal_tensor(&[2, 8, 4, 4]));
    out.push(grad("grad.blocks.attention", p, TOL, |t, b| project(t, attn.forward(b, b.get("x")?)?, 3))?);

    let net = UNet::new(UNetConfig {
        resolution: 8,
        base_channels: 4,
        channel_mult: vec![1, 1],
        res_blocks_per_level: 1,
        attention_resolutions: [4].into_iter().collect(),
        attention_heads: 2,
        time_embed_dim: 8,
        ..Default::default()
    })?;
    let p = perturbed(&net.init(&mut rng), &mut rng);
    let x: Tensor<f64> = rng.normal_tensor(&[2, 1, 8, 8]);
    let mut o = grad("grad.blocks.unet", p, TOL, |t, b| project(t, net.forward(t, b, t.constant(x.clone()), &[3, 700])?, 5))?;
    o.detail = format!("{} params, {}", net.param_count(), o.detail);
    o.passed &= net.param_count() <= 10_000;
    out.push(o);
    Ok(out)
}

fn schedule_alpha_bar(_: u64) -> Result<Vec<Outcome>> {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let prod: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    let got = s.alpha_bar(1000);
    let ok = (got - prod).abs() <= 0.1 * prod && (got - 4.0e-5).abs() <= 0.1 * 4.0e-5;
    Ok(vec![outcome("schedule.alpha_bar", ok, format!("alpha_bar_T {got:.4e}, brute-force product {prod:.4e}"))])
}

fn forward_q_sample(seed: u64) -> Result<Vec<Outcome>> {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let n = 100_000;
    let x0 = Tensor::full(&[n], 0.7);
    let mut out = Vec::new();
    for t in [1, 50, 400, 1000] {
        let eps: Tensor<f64> = RngState::with_stream(seed, 0x05).derive(t as u64).normal_tensor(&[n]);
        let x = q_sample(&x0, t, &eps, &s)?;
        let mean = x.mean();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let (mu, s2) = (s.alpha_bar(t).sqrt() * 0.7, 1.0 - s.alpha_bar(t));
        let zm = (mean - mu) / (s2 / n as f64).sqrt();
        let zv = (var - s2) / (2.0 * s2 * s2 / (n as f64 - 1.0)).sqrt();
        out.push(outcome(
            format!("forward.q_sample.t{t}"),
            zm.abs() < 5.0 && zv.abs() < 5.0,
            format!("mean {zm:+.2}σ, variance {zv:+.2}σ over {n} draws"),
        ));
    }
    Ok(out)
}

fn kl_exact_posterior(seed: u64) -> Result<Vec<Outcome>> {
    let s = NoiseSchedule::linear(200, 1e-4, 0.05)?;
    let x0 = RngState::with_stream(seed, 0x0E).normal_tensor::<f64>(&[2, 1, 3, 3]).map(|v| (v * 0.5).clamp(-1.0, 1.0));
    let (sr, xr) = (&s, &x0);
    // Returns exactly the noise that maps x0 to x_t, so p(x_{t-1}|x_t) = q(x_{t-1}|x_t, x0).
    let model = move |x_t: &Tensor<f64>, t: &[usize]| {
        let ab = sr.alpha_bar(t[0]);
        x_t.zip_map(xr, |x, a| (x - ab.sqrt() * a) / (1.0 - ab).sqrt())
    };
    let terms = vlb_terms(&model, &x0, &mut RngState::with_stream(seed, 0x0F), &s, VarianceMode::FixedSmall)?;
    let worst = terms[1..200].iter().fold(0.0f64, |m, k| m.max(k.abs()));
    Ok(vec![outcome("kl.exact_posterior", worst <= 1e-10, format!("max |KL| over t = 2..200: {worst:.2e}"))])
}

fn kl_closed_form(_: u64) -> Result<Vec<Outcome>> {
    let cases = [((1.0, 1.0, 0.0, 1.0), 0.5), ((0.0, 4.0, 0.0, 1.0), 0.5 * (4.0 - 1.0 - 4f64.ln())), ((2.0, 1.0, 2.0, 1.0), 0.0)];
    let mut worst = 0.0f64;
    for ((m1, v1, m2, v2), want) in cases {
        worst = worst.max((gaussian_kl(m1, v1, m2, v2)? - want).abs());
    }
    Ok(vec![outcome("kl.closed_form", worst <= 1e-12, format!("max deviation {worst:.1e}"))])
}

fn tone(k: i64, nfft: usize, len: usize) -> Vec<Complex64> {
    (0..len).map(|i| Complex64::from_polar(1.0, 2.0 * PI * k as f64 * i as f64 / nfft as f64)).collect()
}

fn stft_tone(_: u64) -> Result<Vec<Outcome>> {
    let nfft = 64;
    let mut worst_leak = 0.0f64;
    let mut misplaced = 0;
    for k in -32i64..32 {
        let p = stft(&tone(k, nfft, nfft * 4), nfft, nfft / 2, Window::Rectangular)?;
        let want = k.rem_euclid(nfft as i64) as usize;
        for f in 0..p.frames {
            let frame = p.frame(f);
            let peak = (0..nfft).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).expect("non-empty");
            misplaced += usize::from(peak != want);
            let total: f64 = frame.iter().sum();
            worst_leak = worst_leak.max((total - frame[want]) / total);
        }
    }
    Ok(vec![outcome(
        "stft.tone",
        misplaced == 0 && worst_leak < 1e-12,
        format!("{misplaced} misplaced peaks, worst off-bin energy share {worst_leak:.1e}"),
    )])
}

fn stft_parseval(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = RngState::with_stream(seed, 0x57);
    let mut worst = 0.0f64;
    for nfft in [8, 64, 256] {
        let x: Vec<Complex64> = (0..nfft * 5).map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
        let p = stft(&x, nfft, nfft, Window::Rectangular)?;
        let lhs = p.total() / nfft as f64;
        let rhs: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        worst = worst.max(((lhs - rhs) / rhs).abs());
    }
    Ok(vec![outcome("stft.parseval", worst < 1e-9, format!("max relative error {worst:.1e}"))])
}

fn brute_ssim(a: &Image, b: &Image, n: usize, k1: f64, k2: f64, l: f64) -> f64 {
    let (h, w) = a.shape();
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let mut acc = 0.0;
    let mut windows = 0;
    for r0 in 0..=h - n {
        for c0 in 0..=w - n {
            let (mut sx, mut sy) = (0.0, 0.0);
            for r in r0..r0 + n {
                for c in c0..c0 + n {
                    sx += a.get(r, c);
                    sy += b.get(r, c);
                }
            }
            let m = (n * n) as f64;
            let (mx, my) = (sx / m, sy / m);
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for r in r0..r0 + n {
                for c in c0..c0 + n {
                    let (dx, dy) = (a.get(r, c) - mx, b.get(r, c) - my);
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            let (vx, vy, cxy) = (vx / (m - 1.0), vy / (m - 1.0), cxy / (m - 1.0));
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    acc / windows as f64
}

fn brute_psnr(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            se += (a.get(r, c) - b.get(r, c)).powi(2);
        }
    }
    10.0 * (1.0 / (se / (a.height() * a.width()) as f64)).log10()
}

fn random_image(rng: &mut RngState, side: usize) -> Result<Image> {
    Ok(Image::new(side, side, (0..side * side).map(|_| rng.uniform()).collect())?)
}

fn metrics_oracle(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = RngState::with_stream(seed, 0x3E);
    let (mut ds, mut dp) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let a = random_image(&mut rng, 16)?;
        let mix = random_image(&mut rng, 16)?;
        let w = rng.uniform();
        let b = Image::new(16, 16, a.data().iter().zip(mix.data()).map(|(x, y)| w * x + (1.0 - w) * y).collect())?;
        ds = ds.max((ssim(&a, &b, SsimParams::default())? - brute_ssim(&a, &b, 7, 0.01, 0.03, 1.0)).abs());
        dp = dp.max((psnr(&a, &b, 1.0)? - brute_psnr(&a, &b)).abs());
    }
    Ok(vec![
        outcome("metrics.oracle.ssim", ds <= 1e-6, format!("max |Δ| {ds:.1e} over 100 random 16×16 pairs")),
        outcome("metrics.oracle.psnr", dp <= 1e-6, format!("max |Δ| {dp:.1e} over 100 random 16×16 pairs")),
    ])
}

fn metrics_identities(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = RngState::with_stream(seed, 0x3F);
    let x = random_image(&mut rng, 16)?;
    let s = ssim(&x, &x, SsimParams::default())?;
    // Unit error against a peak of 10: MSE = peak²/100, exactly representable.
    let p = psnr(&Image::filled(8, 8, 3.0), &Image::filled(8, 8, 4.0), 10.0)?;
    Ok(vec![
        outcome("metrics.identities.ssim_self", s == 1.0, format!("ssim(x, x) = {s}")),
        outcome("metrics.identities.psnr_20db", p == 20.0, format!("MSE = peak²/100 gives {p} dB")),
    ])
}

fn checkpoint_integrity(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = RngState::with_stream(seed, 0xC4);
    let w = store_from(vec![("a.w", rng.normal_tensor::<f32>(&[3, 4])), ("b", rng.normal_tensor(&[5]))]);
    let e = store_from(vec![("a.w", rng.normal_tensor::<f32>(&[3, 4])), ("b", rng.normal_tensor(&[5]))]);
    let ck = Checkpoint { config: "[run]\nseed = 1\n".into(), weights: w, ema: e };
    let bytes = ck.to_bytes();
    let back = Checkpoint::<f32>::from_bytes(&bytes)?;
    let exact = back == ck && back.to_bytes() == bytes;
    let mut missed = 0;
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 1 << (i % 8);
        missed += usize::from(Checkpoint::<f32>::from_bytes(&bad).is_ok());
    }
    Ok(vec![
        outcome("checkpoint.integrity.round_trip", exact, format!("{} bytes, bit-exact: {exact}", bytes.len())),
        outcome("checkpoint.integrity.corruption", missed == 0, format!("{missed} of {} single-byte flips accepted", bytes.len())),
    ])
}

fn transfer_arithmetic(_: u64) -> Result<Vec<Outcome>> {
    let (p, s) = CONTEXT_EPOCHS;
    let v = improvement_percent(Convergence::Epoch(p), Convergence::Epoch(s)).unwrap_or(f64::NAN);
    Ok(vec![outcome("transfer.arithmetic", format!("{v:.1}") == "51.5", format!("{p} vs {s} epochs → {v:.3}%"))])
}
