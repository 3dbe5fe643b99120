use power_attention::bench::generate_batch;
use power_attention::*;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ExpansionKind> {
    prop_oneof![Just(ExpansionKind::Tpow), Just(ExpansionKind::Spow), Just(ExpansionKind::Tspow)]
}

/// A spec with `d` in 2..=16 and a tile that divides it.
fn spec(max_p: u32) -> impl Strategy<Value = ExpansionSpec> {
    (kind(), 1..=max_p, 1usize..=8).prop_flat_map(|(kind, p, half)| {
        let d = 2 * half;
        let tiles: Vec<usize> = (1..=d).filter(|t| d % t == 0).collect();
        proptest::sample::select(tiles).prop_map(move |tile| ExpansionSpec::new(kind, p, d, tile).unwrap())
    })
}

fn vecs(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (proptest::collection::vec(-1.0f64..1.0, d), proptest::collection::vec(-1.0f64..1.0, d))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
struct Case {
    shape: BatchShape,
    p: u32,
    c: usize,
    gated: bool,
    normalize: bool,
    seed: u64,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=2, 1usize..=40, 1usize..=2, 1usize..=4, 1usize..=3, prop_oneof![Just(2u32), Just(4)], 1usize..=50, any::<bool>(), any::<bool>(), any::<u64>())
        .prop_map(|(b, t, h, d, v, p, c, gated, normalize, seed)| Case {
            shape: BatchShape::new(b, t, h, d, v),
            p,
            c,
            gated,
            normalize,
            seed,
        })
}

impl Case {
    fn batch(&self) -> SequenceBatch64 {
        generate_batch(self.shape, self.gated, self.seed).unwrap()
    }

    fn cfg(&self) -> AttentionConfig {
        AttentionConfig::power(ExpansionSpec::spow(self.p, self.shape.d)).normalized(self.normalize)
    }

    fn plan(&self) -> ChunkPlan {
        ChunkPlan::new(self.shape.t, self.c).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inner_product_identity(spec in spec(4), seed in any::<u64>()) {
        let (x, y) = {
            let b = generate_batch(BatchShape::new(1, 1, 1, spec.d, 1), false, seed).unwrap();
            (b.q, b.k)
        };
        let want = dot(&x, &y).powi(spec.p as i32);
        let got = dot(&expand(&x, &spec).unwrap().values, &expand(&y, &spec).unwrap().values);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn expansion_dim_matches_length(spec in spec(4), (x, _) in vecs(16)) {
        let phi = expand(&x[..spec.d], &spec).unwrap();
        prop_assert_eq!(phi.values.len() as u64, expansion_dim(&spec).unwrap());
    }

    #[test]
    fn expansion_is_homogeneous(spec in spec(4), (x, _) in vecs(16), a in -2.0f64..2.0) {
        let x = &x[..spec.d];
        let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
        let phi = expand(x, &spec).unwrap().values;
        let scaled: Vec<f64> = phi.iter().map(|v| a.powi(spec.p as i32) * v).collect();
        prop_assert!(max_abs_error(&expand(&ax, &spec).unwrap().values, &scaled) <= 1e-12);
    }

    #[test]
    fn chunked_matches_attention(case in case()) {
        let batch = case.batch();
        let a = attention(&batch, &case.cfg()).unwrap();
        let c = chunked_power_attention(&batch, &case.cfg(), &case.plan()).unwrap();
        prop_assert!(max_rel_error(&c.y, &a.y) <= 1e-8);
    }

    #[test]
    fn chunk_size_does_not_matter(case in case(), c2 in 1usize..=50) {
        let batch = case.batch();
        let one = chunked_power_attention(&batch, &case.cfg(), &case.plan()).unwrap();
        let two = chunked_power_attention(&batch, &case.cfg(), &ChunkPlan::new(case.shape.t, c2).unwrap()).unwrap();
        prop_assert!(max_rel_error(&two.y, &one.y) <= 2e-8);
    }

    #[test]
    fn outputs_are_causal(case in case(), cut in 0usize..40) {
        let batch = case.batch();
        let s = batch.shape;
        let cut = cut % s.t;
        // Perturb every position after `cut`; rows up to `cut` must not move.
        let mut other = batch.clone();
        for bi in 0..s.b {
            for ti in cut + 1..s.t {
                for hi in 0..s.h {
                    let row = (bi * s.t + ti) * s.h + hi;
                    other.k[row * s.d..(row + 1) * s.d].iter_mut().for_each(|x| *x = -*x * 0.5);
                    other.v[row * s.v..(row + 1) * s.v].iter_mut().for_each(|x| *x += 1.0);
                }
            }
        }
        let a = chunked_power_attention(&batch, &case.cfg(), &case.plan()).unwrap().y;
        let b = chunked_power_attention(&other, &case.cfg(), &case.plan()).unwrap().y;
        for bi in 0..s.b {
            let lo = bi * s.t * s.h * s.v;
            let hi = lo + (cut + 1) * s.h * s.v;
            prop_assert_eq!(&a[lo..hi], &b[lo..hi]);
        }
    }

    #[test]
    fn value_scaling_is_linear(case in case(), a in 0.1f64..3.0) {
        let batch = case.batch();
        let mut scaled = batch.clone();
        scaled.v.iter_mut().for_each(|x| *x *= a);
        let y = attention(&batch, &case.cfg()).unwrap().y;
        let ys = attention(&scaled, &case.cfg()).unwrap().y;
        let want: Vec<f64> = y.iter().map(|x| a * x).collect();
        prop_assert!(max_rel_error(&ys, &want) <= 1e-12);
    }

    #[test]
    fn query_scaling(case in case(), a in 0.5f64..2.0) {
        // Unnormalized output is homogeneous of degree p in Q; normalized
        // output is invariant for even p.
        let batch = case.batch();
        let mut scaled = batch.clone();
        scaled.q.iter_mut().for_each(|x| *x *= a);
        let y = attention(&batch, &case.cfg()).unwrap().y;
        let ys = attention(&scaled, &case.cfg()).unwrap().y;
        let factor = if case.normalize { 1.0 } else { a.powi(case.p as i32) };
        let want: Vec<f64> = y.iter().map(|x| factor * x).collect();
        prop_assert!(max_rel_error(&ys, &want) <= 1e-12);
    }

    #[test]
    fn unit_gates_equal_no_gates(case in case()) {
        let batch = Case { gated: false, ..case.clone() }.batch();
        let mut ones = batch.clone();
        ones.gates = Some(vec![1.0; s_rows(&batch)]);
        for (x, y) in [
            (attention(&ones, &case.cfg()).unwrap().y, attention(&batch, &case.cfg()).unwrap().y),
            (
                chunked_power_attention(&ones, &case.cfg(), &case.plan()).unwrap().y,
                chunked_power_attention(&batch, &case.cfg(), &case.plan()).unwrap().y,
            ),
        ] {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn log_space_matches_direct(case in case()) {
        let batch = case.batch();
        let direct = attention(&batch, &case.cfg()).unwrap().y;
        let logs = attention(&batch, &case.cfg().log_space(true)).unwrap().y;
        prop_assert!(max_rel_error(&logs, &direct) <= 1e-6);
    }

    #[test]
    fn f32_tracks_f64(case in case()) {
        let batch = case.batch();
        let b32: SequenceBatch32 = bench::cast_batch(&batch);
        let y64 = chunked_power_attention(&batch, &case.cfg(), &case.plan()).unwrap().y;
        let y32: Vec<f64> = chunked_power_attention(&b32, &case.cfg(), &case.plan()).unwrap().y.iter().map(|&x| x as f64).collect();
        prop_assert!(max_rel_error(&y32, &y64) <= 5e-3);
    }

    #[test]
    fn discumsum_prefix_property(seed in any::<u64>(), n in 1usize..8) {
        // Prefix k of the output only depends on prefix k of the inputs.
        let spec = ExpansionSpec::spow(2, 3);
        let b = generate_batch(BatchShape::new(1, n, 1, 12, 2), true, seed).unwrap();
        let states: Vec<ChunkState64> = (0..n)
            .map(|i| ChunkState { spec, v: 2, s: b.k[i * 12..(i + 1) * 12].to_vec(), gamma: b.v[i * 2..i * 2 + 2].iter().chain(&b.q[i * 12..i * 12 + 4]).copied().collect() })
            .collect();
        let carries = b.gates.clone().unwrap();
        let full = discumsum(&states, &carries[..n - 1]).unwrap();
        for k in 1..=n {
            prop_assert_eq!(&discumsum(&states[..k], &carries[..k - 1]).unwrap()[..], &full[..k]);
        }
    }
}

fn s_rows(b: &SequenceBatch64) -> usize {
    b.shape.b * b.shape.t * b.shape.h
}
