use proptest::prelude::*;
use specgen_core::numerics::gradcheck::{gradcheck, project, GradcheckOptions};
use specgen_core::numerics::ops::attention::attention_weights;
use specgen_core::numerics::{ParamStore, RngState, Tape, Tensor};
use specgen_core::unet::{blocks::init_params, AttnBlock, ResBlock, UNet, UNetConfig};

fn tiny() -> UNetConfig {
    UNetConfig {
        resolution: 8,
        base_channels: 4,
        channel_mult: vec![1, 1],
        res_blocks_per_level: 1,
        attention_resolutions: [4].into_iter().collect(),
        attention_heads: 2,
        time_embed_dim: 8,
        ..Default::default()
    }
}

/// Fills zero-initialised tensors with small noise so every path carries gradient.
fn perturbed(params: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut rng = RngState::new(seed);
    params
        .iter()
        .map(|(k, v)| {
            let noise: Tensor<f64> = rng.normal_tensor(v.shape());
            (k.clone(), v.zip_map(&noise, |a, n| a + 0.2 * n).unwrap())
        })
        .collect()
}

fn forward_random(cfg: UNetConfig, batch: usize, seed: u64) -> Vec<usize> {
    let net = UNet::new(cfg.clone()).unwrap();
    let params = perturbed(&net.init(&mut RngState::new(seed)), seed + 1);
    let tape = Tape::no_grad();
    let b = params.bind(&tape);
    let x = tape.constant(RngState::new(seed + 2).normal_tensor(&[batch, cfg.in_channels, cfg.resolution, cfg.resolution]));
    let ts: Vec<usize> = (0..batch).map(|i| 1 + 97 * i).collect();
    let y = net.forward(&tape, &b, x, &ts).unwrap();
    assert!(y.value().all_finite());
    y.shape()
}

#[test]
fn three_channel_learned_variance_gives_six_outputs() {
    let cfg = UNetConfig { in_channels: 3, ..tiny() };
    assert_eq!(forward_random(cfg, 1, 3), vec![1, 6, 8, 8]);
}

#[test]
fn default_config_shape_contract() {
    assert_eq!(forward_random(UNetConfig::default(), 2, 5), vec![2, 2, 32, 32]);
    let fixed = UNetConfig { learned_variance: false, ..UNetConfig::default() };
    assert_eq!(UNet::new(fixed).unwrap().config().out_channels(), 1);
}

#[test]
fn zero_levels_rejected() {
    assert!(UNet::new(UNetConfig { channel_mult: vec![], ..tiny() }).is_err());
}

#[test]
fn default_param_count_is_stable() {
    let a = UNet::new(UNetConfig::default()).unwrap().param_count();
    let b = UNet::new(UNetConfig::default()).unwrap().param_count();
    assert_eq!(a, b);
    let params = UNet::new(UNetConfig::default()).unwrap().init::<f32>(&mut RngState::new(0));
    assert_eq!(params.numel(), a);
}

fn conv_weight_count(cfg: &UNetConfig) -> usize {
    UNet::new(cfg.clone())
        .unwrap()
        .manifest()
        .iter()
        .filter(|(_, s)| s.len() == 4)
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

#[test]
fn doubling_width_quadruples_conv_params() {
    let base = UNetConfig::default();
    let wide = UNetConfig { base_channels: 64, ..base.clone() };
    let ratio = conv_weight_count(&wide) as f64 / conv_weight_count(&base) as f64;
    assert!((ratio / 4.0 - 1.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn residual_block_is_identity_at_init() {
    for (cin, cout) in [(8, 8), (16, 16)] {
        let block = ResBlock { prefix: "r".into(), in_ch: cin, out_ch: cout, temb_dim: 12 };
        let params = init_params::<f64>(&block.param_specs(), &mut RngState::new(4));
        let tape = Tape::no_grad();
        let b = params.bind(&tape);
        let mut rng = RngState::new(5);
        let x = tape.constant(rng.normal_tensor(&[2, cin, 4, 4]));
        let temb = tape.constant(rng.normal_tensor(&[2, 12]));
        let y = block.forward(&b, x, temb).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }
}

#[test]
fn attention_block_is_identity_at_init_and_rows_are_convex() {
    let block = AttnBlock { prefix: "a".into(), channels: 8, heads: 2 };
    let params = init_params::<f64>(&block.param_specs(), &mut RngState::new(6));
    let tape = Tape::no_grad();
    let b = params.bind(&tape);
    let x = tape.constant(RngState::new(7).normal_tensor(&[2, 8, 4, 4]));
    assert_eq!(block.forward(&b, x).unwrap().value().data(), x.value().data());

    let mut rng = RngState::new(8);
    let (d, n) = (4, 16);
    let q: Tensor<f64> = rng.normal_tensor(&[d * n]);
    let k: Tensor<f64> = rng.normal_tensor(&[d * n]);
    let w = attention_weights(q.data(), k.data(), d, n);
    for row in w.chunks(n) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn timestep_conditioning_flows() {
    let net = UNet::new(tiny()).unwrap();
    let params = perturbed(&net.init(&mut RngState::new(9)), 10);
    let tape = Tape::no_grad();
    let b = params.bind(&tape);
    let x = tape.constant(RngState::new(11).normal_tensor(&[1, 1, 8, 8]));
    let y1 = net.forward(&tape, &b, x, &[1]).unwrap().value();
    let yt = net.forward(&tape, &b, x, &[1000]).unwrap().value();
    let diff: f64 = y1.data().iter().zip(yt.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "outputs at t=1 and t=T coincide");
}

#[test]
fn attention_block_gradcheck() {
    let block = AttnBlock { prefix: "a".into(), channels: 8, heads: 2 };
    let mut params = perturbed(&init_params(&block.param_specs(), &mut RngState::new(12)), 13);
    params.insert("x", RngState::new(14).normal_tensor(&[2, 8, 4, 4]));
    let report = gradcheck(&params, GradcheckOptions::f64_default().with_tolerance(1e-4), |t, b| {
        project(t, block.forward(b, b.get("x")?)?, 3)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn residual_block_gradcheck() {
    let block = ResBlock { prefix: "r".into(), in_ch: 4, out_ch: 8, temb_dim: 6 };
    let mut params = perturbed(&init_params(&block.param_specs(), &mut RngState::new(15)), 16);
    let mut rng = RngState::new(17);
    params.insert("x", rng.normal_tensor(&[2, 4, 4, 4]));
    params.insert("temb", rng.normal_tensor(&[2, 6]));
    let report = gradcheck(&params, GradcheckOptions::f64_default().with_tolerance(1e-4), |t, b| {
        project(t, block.forward(b, b.get("x")?, b.get("temb")?)?, 4)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn reduced_unet_gradcheck() {
    let net = UNet::new(tiny()).unwrap();
    assert!(net.param_count() <= 10_000, "{} params", net.param_count());
    let params = perturbed(&net.init(&mut RngState::new(18)), 19);
    let x: Tensor<f64> = RngState::new(20).normal_tensor(&[2, 1, 8, 8]);
    let report = gradcheck(&params, GradcheckOptions::f64_default().with_tolerance(1e-4), |t, b| {
        let y = net.forward(t, b, t.constant(x.clone()), &[3, 700])?;
        project(t, y, 5)
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

fn config_strategy() -> impl Strategy<Value = (UNetConfig, usize)> {
    (1usize..=3, 1usize..=3, 1usize..=2, prop::sample::select(vec![4usize, 8, 16]), any::<bool>(), 0usize..4, 1usize..=2)
        .prop_map(|(in_ch, levels, nres, base, learned, attn_mask, batch)| {
            let res = 4 << (levels - 1);
            let mult: Vec<usize> = if base == 4 { vec![1; levels] } else { (0..levels).map(|l| 1 + l).collect() };
            let attention_resolutions =
                (0..levels).filter(|l| attn_mask & (1 << l) != 0).map(|l| res >> l).collect();
            let cfg = UNetConfig {
                in_channels: in_ch,
                resolution: res,
                base_channels: base,
                channel_mult: mult,
                res_blocks_per_level: nres,
                attention_resolutions,
                attention_heads: 2,
                time_embed_dim: 8,
                learned_variance: learned,
            };
            (cfg, batch)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

    #[test]
    fn output_shape_contract((cfg, batch) in config_strategy()) {
        prop_assume!(UNet::new(cfg.clone()).is_ok());
        let out = cfg.out_channels();
        prop_assert_eq!(out, if cfg.learned_variance { 2 * cfg.in_channels } else { cfg.in_channels });
        let r = cfg.resolution;
        prop_assert_eq!(forward_random(cfg, batch, 21), vec![batch, out, r, r]);
    }
}
