use proptest::prelude::*;
use rand::Rng;

use semalign::admm::{g_update, user_objective};
use semalign::channel::lift;
use semalign::linalg::{complex_gaussian, gram, kron_vec_solve, max_abs_diff, matmul, sylvester_solve, trace_ball_project, frobenius_sq};
use semalign::rng::substream;
use semalign::semantic::{pair_matrix, parse_latent_set, unpair_matrix, write_latent_set};
use semalign::{ComplexMatrix, RealLatentSet, RealMatrix};

fn real_gaussian(rows: usize, cols: usize, seed: u64) -> RealMatrix {
    let mut rng = substream(seed, "prop-real", 0);
    RealMatrix::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0))
}

fn psd(n: usize, seed: u64, tag: &str) -> ComplexMatrix {
    let mut rng = substream(seed, tag, 0);
    gram(&complex_gaussian(n, n + 1, 1.0, &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sylvester_solution_matches_kron(p in 1usize..=8, q in 1usize..=8, shift in 0.01f64..3.0, seed in any::<u64>()) {
        let a = psd(p, seed, "syl-a");
        let b = psd(q, seed, "syl-b");
        let mut rng = substream(seed, "syl-c", 0);
        let c = complex_gaussian(p, q, 1.0, &mut rng);
        let f = sylvester_solve(&a, &b, shift, &c).unwrap();
        let oracle = kron_vec_solve(&a, &b, shift, &c).unwrap();
        let scale = frobenius_sq(&oracle).sqrt().max(1.0);
        prop_assert!(max_abs_diff(&f, &oracle) < 1e-8 * scale);
        let resid = matmul(&matmul(&a, &f), &b) + f.map(|z| z * shift) - &c;
        prop_assert!(frobenius_sq(&resid).sqrt() < 1e-8 * frobenius_sq(&c).sqrt().max(1.0));
    }

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(rows in 1usize..8, cols in 1usize..8, var in 0.01f64..20.0, p_t in 0.01f64..10.0, seed in any::<u64>()) {
        let mut rng = substream(seed, "proj", 0);
        let z = complex_gaussian(rows, cols, var, &mut rng);
        let once = trace_ball_project(&z, p_t).unwrap();
        prop_assert!(frobenius_sq(&once) <= p_t * (1.0 + 1e-12));
        let twice = trace_ball_project(&once, p_t).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn pairing_round_trips(h in 1usize..10, n in 1usize..20, seed in any::<u64>()) {
        let s = real_gaussian(2 * h, n, seed);
        let c = pair_matrix(&s).unwrap();
        prop_assert_eq!(c.nrows(), h);
        prop_assert_eq!(unpair_matrix(&c), s);
    }

    #[test]
    fn lift_is_linear_and_blockwise(r in 1usize..4, c in 1usize..4, k in 1usize..5, alpha in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = substream(seed, "lift", 0);
        let a = complex_gaussian(r, c, 1.0, &mut rng);
        let b = complex_gaussian(r, c, 1.0, &mut rng);
        let x = complex_gaussian(k * c, 3, 1.0, &mut rng);
        let combo = lift(&(&a + b.map(|z| z * alpha)), k).unwrap();
        let sum = lift(&a, k).unwrap() + lift(&b, k).unwrap().map(|z| z * alpha);
        prop_assert!(max_abs_diff(&combo, &sum) < 1e-12);
        let y = matmul(&lift(&a, k).unwrap(), &x);
        for blk in 0..k {
            let xb = x.rows(blk * c, c).into_owned();
            let expect = matmul(&a, &xb);
            prop_assert!(max_abs_diff(&y.rows(blk * r, r).into_owned(), &expect) < 1e-12);
        }
    }

    #[test]
    fn latent_text_round_trips(dim in 1usize..8, n in 1usize..30, classes in 1usize..5, seed in any::<u64>()) {
        let features = real_gaussian(dim, n, seed).map(|v| v * 1e3_f64.powf(v / 3.0));
        let mut rng = substream(seed, "labels", 0);
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let set = RealLatentSet::new("user0", features, labels, classes).unwrap();
        let mut buf = Vec::new();
        write_latent_set(&set, &mut buf).unwrap();
        let back = parse_latent_set(std::str::from_utf8(&buf).unwrap(), "user0").unwrap();
        prop_assert_eq!(back, set.padded_to_even());
    }

    #[test]
    fn g_step_never_increases_user_objective(m_dim in 1usize..5, rx in 1usize..6, n in 1usize..12, noise in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = substream(seed, "gstep", 0);
        let y = complex_gaussian(m_dim, n, 1.0, &mut rng);
        let m = complex_gaussian(rx, n, 1.0, &mut rng);
        let g0 = complex_gaussian(m_dim, rx, 1.0, &mut rng);
        let sigma = ComplexMatrix::identity(rx, rx).map(|z| z * noise);
        let g = g_update(&y, &m, &sigma).unwrap();
        let before = user_objective(&y, &m, &g0, &sigma);
        let after = user_objective(&y, &m, &g, &sigma);
        prop_assert!(after <= before + 1e-10 * before.max(1.0), "{} -> {}", before, after);
    }
}
