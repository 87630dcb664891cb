use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgraph::losses::*;
use splatgraph::tensor::{finite_diff_check, Tape, Var};
use splatgraph::{Real, Tensor};

fn rand_img(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![c, h, w], |_| rng.random_range(0.0..1.0))
}

fn eval2(a: &Tensor, b: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> splatgraph::Result<Var>) -> Real {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(b.clone());
    let v = f(&mut tape, x, y).unwrap();
    tape.value(v).item()
}

/// Straightforward per-window SSIM, written independently of the tape.
fn ssim_scalar(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = 11usize;
    let sigma = 1.5f64;
    let mut g = [0.0f64; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = g.iter().sum();
    let (c1, c2) = (1e-4f64, 9e-4f64);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let wt = g[dy] * g[dx] / (s * s);
                        let k = ch * h * w + (y0 + dy) * w + x0 + dx;
                        let (pa, pb) = (a.data()[k] as f64, b.data()[k] as f64);
                        ma += wt * pa;
                        mb += wt * pb;
                        saa += wt * pa * pa;
                        sbb += wt * pb * pb;
                        sab += wt * pa * pb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cv = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_scalar_oracle() {
    for seed in 0..3 {
        let a = rand_img(seed, 3, 16, 16);
        let b = rand_img(seed + 10, 3, 16, 16);
        let got = eval2(&a, &b, ssim);
        assert!((got as f64 - ssim_scalar(&a, &b)).abs() < 1e-9);
    }
    let a = rand_img(4, 1, 23, 17);
    let b = rand_img(5, 1, 23, 17);
    assert!((eval2(&a, &b, ssim) as f64 - ssim_scalar(&a, &b)).abs() < 1e-9);
}

#[test]
fn ssim_of_identical_and_inverted_checkerboard() {
    let a = rand_img(1, 3, 16, 16);
    assert_eq!(eval2(&a, &a, ssim), 1.0);
    assert_eq!(eval2(&a, &a, d_ssim), 0.0);
    let cb = Tensor::from_fn(vec![1, 16, 16], |i| ((i / 16 + i % 16) % 2) as Real);
    let inv = Tensor::from_fn(vec![1, 16, 16], |i| 1.0 - cb.data()[i]);
    assert!(eval2(&cb, &inv, ssim) < 0.0);
    let small = rand_img(1, 3, 10, 16);
    let mut tape = Tape::new();
    let x = tape.constant(small);
    assert!(ssim(&mut tape, x, x).is_err());
}

#[test]
fn proxy_properties() {
    let a = rand_img(2, 3, 16, 16);
    let b = rand_img(3, 3, 16, 16);
    assert_eq!(eval2(&a, &a, perceptual_proxy), 0.0);
    let ab = eval2(&a, &b, perceptual_proxy);
    let ba = eval2(&b, &a, perceptual_proxy);
    assert!(ab > 0.0);
    assert!((ab - ba).abs() < 1e-14);

    // a sharp vertical edge against a linearly blurred one
    let sharp = Tensor::from_fn(vec![1, 16, 16], |i| if i % 16 < 8 { 0.0 } else { 1.0 });
    let blur = Tensor::from_fn(vec![1, 16, 16], |i| ((i % 16) as Real - 4.5).clamp(0.0, 7.0) / 7.0);
    let proxy = eval2(&sharp, &blur, perceptual_proxy);
    let plain = eval2(&sharp, &blur, l1);
    assert!(proxy > plain, "proxy {proxy} vs plain L1 {plain}");
}

#[test]
fn final_and_coarse_losses() {
    let a = rand_img(6, 3, 16, 16);
    let b = rand_img(7, 3, 16, 16);
    let w = LossWeights::default();
    assert_eq!(eval2(&a, &a, |t, x, y| loss_final(t, x, y, &w)), 0.0);
    assert_eq!(eval2(&a, &a, loss_coarse), 0.0);
    assert!(eval2(&a, &b, loss_coarse) > 0.0);

    let w0 = LossWeights { lambda: 0.0, ..w };
    let lf = eval2(&a, &b, |t, x, y| loss_final(t, x, y, &w0));
    let want = eval2(&a, &b, l1) + 0.1 * eval2(&a, &b, perceptual_proxy);
    assert!((lf - want).abs() < 1e-14);

    let lf = eval2(&a, &b, |t, x, y| loss_final(t, x, y, &w));
    let want = 0.8 * eval2(&a, &b, l1) + 0.2 * eval2(&a, &b, d_ssim) + 0.1 * eval2(&a, &b, perceptual_proxy);
    assert!((lf - want).abs() < 1e-14);
}

#[test]
fn weight_loss_values_and_direction() {
    let mask = Tensor::from_fn(vec![8, 8], |i| ((i / 8) >= 4) as u8 as Real);
    assert!(eval2(&mask, &mask, loss_weight) <= 2e-6);
    let half = Tensor::full(vec![8, 8], 0.5);
    assert!((eval2(&half, &mask, loss_weight) - (2.0 as Real).ln()).abs() < 1e-12);

    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::full(vec![8, 8], 0.4), true);
    let m = tape.constant(mask.clone());
    let l = loss_weight(&mut tape, w, m).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.wrt(w).unwrap();
    // descending the gradient raises W under the mask and lowers it elsewhere
    for (gv, mv) in g.data().iter().zip(mask.data()) {
        if *mv == 1.0 {
            assert!(*gv < 0.0);
        } else {
            assert!(*gv > 0.0);
        }
    }
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let mut tape = Tape::new();
    let zero = tape.scalar(0.0);
    let parts = LossParts { fine: zero, coarse: zero, weight: zero };
    let w = LossWeights::default();
    let t = total_loss(&mut tape, &parts, &w);
    assert_eq!(tape.value(t).item(), 0.0);
    let (f, c, m) = (tape.scalar(0.7), tape.scalar(0.3), tape.scalar(1.9));
    let t = total_loss(&mut tape, &LossParts { fine: f, coarse: c, weight: m }, &w);
    assert_eq!(tape.value(t).item(), 1.0 * 0.7 + 0.1 * 0.3 + 0.1 * 1.9);
    // doubling one part adds exactly its weight times the part
    let f2 = tape.scalar(1.4);
    let t2 = total_loss(&mut tape, &LossParts { fine: f2, coarse: c, weight: m }, &w);
    assert!((tape.value(t2).item() - tape.value(t).item() - 0.7).abs() < 1e-15);
}

#[test]
fn metric_fixtures() {
    let a = rand_img(8, 3, 16, 16);
    let m = metrics(&a, &a).unwrap();
    assert_eq!((m.l2, m.psnr, m.proxy), (0.0, 99.0, 0.0));
    assert_eq!(m.ssim, 1.0);
    let gray = Tensor::full(vec![3, 16, 16], 0.5);
    let black = Tensor::zeros(vec![3, 16, 16]);
    let m = metrics(&gray, &black).unwrap();
    assert_eq!(m.l2, 0.25);
    assert!((m.psnr - 6.0206).abs() < 1e-4);
    for seed in 0..5 {
        let b = rand_img(20 + seed, 3, 16, 16);
        let m = metrics(&a, &b).unwrap();
        assert!((m.psnr + 10.0 * m.l2.log10()).abs() < 1e-10);
    }
}

#[test]
fn metrics_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<FrameMetrics> = (0..3)
        .map(|i| FrameMetrics {
            frame: i,
            metrics: Metrics { l2: 0.01 * (i + 1) as Real, psnr: 20.0, ssim: 0.9, proxy: 0.1 },
        })
        .collect();
    let csv = dir.path().join("m.csv");
    write_metrics_csv(&csv, &rows).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("1,"));
    let s = summarize(&rows).unwrap();
    assert!((s.mean.l2 - 0.02).abs() < 1e-15);
    let js = dir.path().join("s.json");
    write_summary_json(&js, &s).unwrap();
    let back: MetricsSummary = serde_json::from_str(&std::fs::read_to_string(&js).unwrap()).unwrap();
    assert_eq!(back, s);
    assert!(summarize(&[]).is_err());
}

fn fd_pair(f: impl Fn(&mut Tape, Var, Var) -> splatgraph::Result<Var> + Copy, a: &Tensor, b: &Tensor) {
    let rep = finite_diff_check(
        |tape: &mut Tape, x: Var| {
            let y = tape.constant(b.clone());
            f(tape, x, y).unwrap()
        },
        a,
        1e-6,
    );
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn losses_pass_gradient_checks() {
    let a = rand_img(30, 3, 16, 16);
    let b = rand_img(31, 3, 16, 16);
    let w = LossWeights::default();
    fd_pair(ssim, &a, &b);
    fd_pair(perceptual_proxy, &a, &b);
    fd_pair(loss_coarse, &a, &b);
    fd_pair(|t, x, y| loss_final(t, x, y, &w), &a, &b);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let wmap = Tensor::from_fn(vec![16, 16], |_| rng.random_range(0.05..0.95));
    let mask = Tensor::from_fn(vec![16, 16], |i| ((i * 7) % 3 == 0) as u8 as Real);
    fd_pair(loss_weight, &wmap, &mask);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000) {
        let a = rand_img(seed, 3, 12, 12);
        let b = rand_img(seed ^ 0xabc, 3, 12, 12);
        let w = LossWeights::default();
        prop_assert!(eval2(&a, &b, |t, x, y| loss_final(t, x, y, &w)) >= 0.0);
        prop_assert!(eval2(&a, &b, loss_coarse) >= 0.0);
        prop_assert!(eval2(&a, &b, perceptual_proxy) >= 0.0);
        let s = eval2(&a, &b, ssim);
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
