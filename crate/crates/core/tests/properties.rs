use std::collections::BTreeMap;

use proptest::prelude::*;
use resadapt::adapternet::{from_bytes, to_bytes, AdapterMode, DomainHead, FilterBank, NetworkConfig};
use resadapt::data::{dataset_from_bytes, dataset_to_bytes, normalize, resize_shorter_side, split, Image, NormStats, SplitFractions};
use resadapt::decathlon::{baselines_from_reference, decathlon_score, domain_score, DomainResult, EvalMode, EvalResult};
use resadapt::{AdapterNet, Dataset, Tape, Tensor};

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, s) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + c) * h + r as usize) * wd + s as usize]
                                    * w.data()[((o * cin + c) * k + u) * k + v];
                            }
                        }
                    }
                    out[((b * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.leaf(w.clone(), false);
    let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
    tape.value(y).clone()
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

/// `(input, weight, stride, pad)` with a valid output size.
fn conv_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, usize, usize)> {
    (1..=2usize, 1..=3usize, 1..=3usize, prop::sample::select(vec![1usize, 3]), 1..=2usize, 3..=6usize)
        .prop_flat_map(|(n, cin, cout, k, stride, hw)| {
            (tensor(vec![n, cin, hw, hw]), tensor(vec![cout, cin, k, k]), Just(stride), 0..=k / 2)
        })
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn dataset(channels: usize, size: usize, labels: Vec<u16>, seed: u8) -> Dataset {
    let n = labels.len() * channels * size * size;
    let pixels = (0..n).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect();
    Dataset::new(channels, size, size, pixels, labels).unwrap()
}

fn oracle(errors: &BTreeMap<String, f64>) -> EvalResult {
    EvalResult {
        mode: EvalMode::OracleDomain,
        domains: errors.iter().map(|(k, &e)| (k.clone(), DomainResult { error: e, accuracy: 1.0 - e, count: 100 })).collect(),
        domain_accuracy: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_loops((x, w, stride, pad) in conv_case()) {
        prop_assert!(max_diff(&conv(&x, &w, stride, pad), &naive_conv(&x, &w, stride, pad)) < 1e-12);
    }

    #[test]
    fn conv_is_linear_in_the_input((x, w, stride, pad) in conv_case(), a in -3.0..3.0f64, b in -3.0..3.0f64, seed in any::<u64>()) {
        let y: Vec<f64> = (0..x.numel()).map(|i| ((i as u64 ^ seed) % 17) as f64 / 8.0 - 1.0).collect();
        let y = Tensor::from_vec(x.shape(), y).unwrap();
        let mix = Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let (cx, cy) = (conv(&x, &w, stride, pad), conv(&y, &w, stride, pad));
        let expected = Tensor::from_vec(cx.shape(), cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        prop_assert!(max_diff(&conv(&mix, &w, stride, pad), &expected) < 1e-10);
    }

    #[test]
    fn composed_filter_bank_equals_explicit_sum(basis in tensor(vec![4, 2, 3, 3]), alpha in tensor(vec![3, 4, 1, 1])) {
        let g = FilterBank::new(basis.clone(), alpha.clone()).unwrap().compose().unwrap();
        prop_assert_eq!(g.shape(), &[3, 2, 3, 3][..]);
        for t in 0..3 {
            for l in 0..18 {
                let sum: f64 = (0..4).map(|k| alpha.data()[t * 4 + k] * basis.data()[k * 18 + l]).sum();
                prop_assert!((g.data()[t * 18 + l] - sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_is_bounded_and_non_increasing(e_max in 0.01..=1.0f64, a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (s_lo, s_hi) = (domain_score(lo, e_max, 2.0, 1000.0).unwrap(), domain_score(hi, e_max, 2.0, 1000.0).unwrap());
        prop_assert!((0.0..=1000.0).contains(&s_lo));
        prop_assert!(s_hi <= s_lo);
        if hi >= e_max {
            prop_assert_eq!(s_hi, 0.0);
        }
    }

    #[test]
    fn doubled_reference_errors_score_250_per_domain(errors in prop::collection::vec(0.001..=0.5f64, 1..12)) {
        let errors: BTreeMap<String, f64> = errors.into_iter().enumerate().map(|(i, e)| (format!("d{i}"), e)).collect();
        let baselines = baselines_from_reference(&errors, 2.0).unwrap();
        let report = decathlon_score(&oracle(&errors), &baselines).unwrap();
        prop_assert!(report.domains.values().all(|d| d.score == 250.0));
        prop_assert_eq!(report.total, 250.0 * errors.len() as f64);
    }

    #[test]
    fn split_partitions_every_class(per_class in prop::collection::vec(5..30usize, 1..6), seed in any::<u64>()) {
        let labels: Vec<u16> = per_class.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c as u16, n)).collect();
        let n = labels.len();
        // Each image carries its own index in the first two pixels.
        let mut ds = dataset(1, 2, labels, 0);
        for i in 0..n {
            ds.pixels[i * 4] = (i % 256) as u8;
            ds.pixels[i * 4 + 1] = (i / 256) as u8;
        }
        let parts = split(&ds, SplitFractions::default(), seed).unwrap();
        let mut seen = vec![0usize; n];
        let mut hist = vec![0usize; per_class.len()];
        for p in &parts {
            for i in 0..p.len() {
                let img = p.image(i);
                let id = img[0] as usize + 256 * img[1] as usize;
                seen[id] += 1;
                prop_assert_eq!(p.labels[i], ds.labels[id]);
                hist[p.labels[i] as usize] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        prop_assert_eq!(hist, per_class);
    }

    #[test]
    fn dataset_bytes_round_trip(labels in prop::collection::vec(0..50u16, 1..40), channels in 1..=3usize, size in 1..=8usize, seed in any::<u8>()) {
        let ds = dataset(channels, size, labels, seed);
        let back = dataset_from_bytes(&dataset_to_bytes(&ds)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn normalized_data_has_zero_mean(labels in prop::collection::vec(0..3u16, 2..20), seed in any::<u8>()) {
        let ds = dataset(3, 4, labels, seed);
        let stats = NormStats::compute(&ds).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let x = normalize::<f64>(&ds, &idx, Some(&stats)).unwrap();
        let plane = 16;
        for c in 0..3 {
            let mut sum = 0.0;
            for i in 0..ds.len() {
                sum += x.data()[(i * 3 + c) * plane..(i * 3 + c + 1) * plane].iter().sum::<f64>();
            }
            prop_assert!((sum / (ds.len() * plane) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn resize_hits_the_target_shorter_side(h in 1..40usize, w in 1..40usize, target in 1..24usize, channels in 1..=3usize) {
        let image = Image { channels, height: h, width: w, pixels: (0..channels * h * w).map(|i| (i % 251) as u8).collect() };
        let out = resize_shorter_side(&image, target);
        prop_assert_eq!(out.height.min(out.width), target);
        prop_assert_eq!(out.pixels.len(), channels * out.height * out.width);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), mode in prop::sample::select(vec![AdapterMode::None, AdapterMode::BnOnly, AdapterMode::SeriesAdapter])) {
        let heads = vec![DomainHead { name: "a".into(), classes: 3 }, DomainHead { name: "b".into(), classes: 5 }];
        let net = AdapterNet::<f32>::build(NetworkConfig::desk(heads).with_mode(mode).with_seed(seed)).unwrap();
        let bytes = to_bytes(&net);
        let back = from_bytes::<f32>(&bytes).unwrap();
        prop_assert_eq!(to_bytes(&back), bytes);
    }
}
