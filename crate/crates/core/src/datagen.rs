//! Preference data simulation and swap-augmentation.

use std::io::Write;

use crate::error::{LabError, Result};
use crate::model::{Environment, PreferenceDataset, PreferenceTuple};
use crate::par;
use crate::rng::StreamRng;

/// Draws `n` i.i.d. tuples: X from the prompt weights, Y1 and Y2 independently
/// from the reference policy, Z ~ Bernoulli(g*(X, Y1, Y2)).
///
/// Tuple `i` uses stream `i` of `seed`, so the result is independent of how
/// the work is scheduled.
pub fn sample_dataset(env: &Environment, n: usize, seed: u64) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(LabError::usage("sample size must be at least 1"));
    }
    let tuples = par::map_indexed(n, |i| {
        let mut rng = StreamRng::new(seed, i as u64);
        let x = rng.categorical(env.prompt_weights());
        let probs = env.ref_policy().probs(x);
        let y1 = rng.categorical(probs);
        let y2 = rng.categorical(probs);
        let z = rng.bernoulli(env.preference().g(x, y1, y2)) as u8;
        PreferenceTuple { prompt: x, y1, y2, z }
    });
    PreferenceDataset::new(tuples, seed, false)
}

/// Appends `(x, y2, y1, 1 - z)` right after every `(x, y1, y2, z)`.
pub fn augment_swapped(data: &PreferenceDataset) -> Result<PreferenceDataset> {
    if data.is_augmented() {
        return Err(LabError::usage("dataset is already swap-augmented"));
    }
    let mut tuples = Vec::with_capacity(2 * data.len());
    for t in data.tuples() {
        tuples.push(*t);
        tuples.push(t.swapped());
    }
    PreferenceDataset::new(tuples, data.seed(), true)
}

/// Flat CSV export with header `prompt,y1,y2,z`.
pub fn write_csv<W: Write>(data: &PreferenceDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["prompt", "y1", "y2", "z"])?;
    for t in data.tuples() {
        w.write_record([t.prompt.to_string(), t.y1.to_string(), t.y2.to_string(), t.z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    fn canonical() -> Environment {
        let r = RewardTable::new(vec![vec![2f64.ln(), -(2f64.ln())]], 1.0).unwrap();
        Environment::unnamed(vec![1.0], Policy::uniform(&VocabShape(vec![2])), PreferenceModel::Bt(r)).unwrap()
    }

    #[test]
    fn degenerate_truth_gives_all_ones() {
        let env = canonical().with_preference(PreferenceModel::misspecified_constant(1.0).unwrap()).unwrap();
        let d = sample_dataset(&env, 500, 3).unwrap();
        assert!(d.tuples().iter().all(|t| t.z == 1));
    }

    #[test]
    fn single_response_env_gives_fair_coin_labels() {
        let env = Environment::unnamed(
            vec![1.0],
            Policy::uniform(&VocabShape(vec![1])),
            PreferenceModel::table(vec![vec![vec![0.5]]]).unwrap(),
        )
        .unwrap();
        let d = sample_dataset(&env, 4000, 11).unwrap();
        assert!(d.tuples().iter().all(|t| t.y1 == 0 && t.y2 == 0));
        let mean = d.tuples().iter().map(|t| t.label()).sum::<f64>() / 4000.0;
        assert!((mean - 0.5).abs() < 3.0 * (0.25f64 / 4000.0).sqrt(), "{mean}");
    }

    #[test]
    fn label_frequency_matches_preference() {
        let env = canonical();
        let d = sample_dataset(&env, 40_000, 5).unwrap();
        let ab: Vec<f64> = d.tuples().iter().filter(|t| t.y1 == 0 && t.y2 == 1).map(|t| t.label()).collect();
        let m = ab.len() as f64;
        let mean = ab.iter().sum::<f64>() / m;
        assert!((mean - 0.8).abs() < 3.0 * (0.16 / m).sqrt(), "mean {mean} over {m}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let env = canonical();
        assert_eq!(sample_dataset(&env, 300, 9).unwrap(), sample_dataset(&env, 300, 9).unwrap());
        assert_ne!(sample_dataset(&env, 300, 9).unwrap(), sample_dataset(&env, 300, 10).unwrap());
        assert!(sample_dataset(&env, 0, 9).is_err());
    }

    #[test]
    fn augmentation_examples() {
        let d = PreferenceDataset::new(vec![PreferenceTuple::new(0, 0, 1, 1).unwrap()], 0, false).unwrap();
        let a = augment_swapped(&d).unwrap();
        assert_eq!(
            a.tuples(),
            &[PreferenceTuple::new(0, 0, 1, 1).unwrap(), PreferenceTuple::new(0, 1, 0, 0).unwrap()]
        );
        assert!(a.is_augmented());
        assert!(matches!(augment_swapped(&a), Err(LabError::Usage(_))));

        let empty = PreferenceDataset::new(vec![], 0, false).unwrap();
        assert!(augment_swapped(&empty).unwrap().is_empty());

        let big = sample_dataset(&canonical(), 77, 1).unwrap();
        assert_eq!(augment_swapped(&big).unwrap().len(), 154);
    }

    #[test]
    fn csv_export() {
        let d = PreferenceDataset::new(vec![PreferenceTuple::new(0, 1, 0, 1).unwrap()], 0, false).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "prompt,y1,y2,z\n0,1,0,1\n");
    }
}
