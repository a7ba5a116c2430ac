//! Simulator checks: the empirical joint law of (x, y1, y2, z) against its
//! enumerated probabilities, and seed determinism.

use drpo_core::datagen::{augment_swapped, sample_dataset};
use drpo_core::testbeds::make_test_environments;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn joint_law_passes_a_chi_square_test() {
    let n = 100_000;
    for (k, bed) in make_test_environments(0).unwrap().iter().enumerate() {
        let env = &bed.env;
        let shape = env.shape();
        let mut expected = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (x, f) in env.prompt_weights().iter().enumerate() {
            let r = env.ref_policy().probs(x);
            for y1 in 0..r.len() {
                for y2 in 0..r.len() {
                    let p1 = env.preference().g(x, y1, y2);
                    for (z, pz) in [(1u8, p1), (0u8, 1.0 - p1)] {
                        index.insert((x, y1, y2, z), expected.len());
                        expected.push(n as f64 * f * r[y1] * r[y2] * pz);
                    }
                }
            }
        }
        let data = sample_dataset(env, n, 40 + k as u64).unwrap();
        let mut observed = vec![0.0; expected.len()];
        for t in data.tuples() {
            observed[index[&(t.prompt, t.y1, t.y2, t.z)]] += 1.0;
        }
        // Cells with small expectations are pooled into one bin.
        let (mut stat, mut cells) = (0.0, 0usize);
        let (mut pool_o, mut pool_e) = (0.0, 0.0);
        for (o, e) in observed.iter().zip(&expected) {
            if *e >= 5.0 {
                stat += (o - e).powi(2) / e;
                cells += 1;
            } else {
                pool_o += o;
                pool_e += e;
            }
        }
        if pool_e > 0.0 {
            stat += (pool_o - pool_e).powi(2) / pool_e.max(1e-300);
            cells += 1;
        }
        let critical = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(1.0 - 1e-3);
        assert!(stat < critical, "{}: chi-square {stat:.1} over {cells} cells, critical {critical:.1}", bed.name);
        assert!(shape.prompts() >= 1);
    }
}

#[test]
fn same_seed_same_data_and_different_seed_different_data() {
    let bed = &make_test_environments(0).unwrap()[2];
    let a = sample_dataset(&bed.env, 5000, 3).unwrap();
    let b = sample_dataset(&bed.env, 5000, 3).unwrap();
    let c = sample_dataset(&bed.env, 5000, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // A prefix of a larger draw is the smaller draw.
    let big = sample_dataset(&bed.env, 8000, 3).unwrap();
    assert_eq!(&big.tuples()[..5000], a.tuples());
}

#[test]
fn augmentation_interleaves_swapped_copies() {
    let bed = &make_test_environments(0).unwrap()[0];
    let data = sample_dataset(&bed.env, 300, 1).unwrap();
    let aug = augment_swapped(&data).unwrap();
    assert_eq!(aug.len(), 600);
    for (i, t) in data.tuples().iter().enumerate() {
        assert_eq!(aug.tuples()[2 * i], *t);
        let s = aug.tuples()[2 * i + 1];
        assert_eq!((s.prompt, s.y1, s.y2, s.z), (t.prompt, t.y2, t.y1, 1 - t.z));
    }
    assert_eq!(aug.originals().count(), 300);
    assert!(augment_swapped(&aug).is_err());
}
