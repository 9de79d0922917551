//! How much speaker identity a linear probe reads from different views of
//! the same synthetic units: raw, style-augmented, instance-normalized, and
//! label-independent noise for the chance level.
//!
//! ```text
//! cargo run --release --example leakage_probe
//! ```

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use savc::asa::{asa_forward, channel_stats, instance_normalize, PerturbMode, PerturbParams, Phase, EPS};
use savc::eval::{feature_matrix, leakage_probe, summary_features};
use savc::syndata::{make_corpus, SynthSpec};
use savc::train::Dataset;

fn main() -> savc::Result<()> {
    let dir = tempfile_dir();
    let spec = SynthSpec {
        utterances_per_pair: 10,
        ..SynthSpec::default()
    };
    let ds = Dataset::load(&make_corpus(&spec, &dir, 1)?)?;
    let probe = |rows: Vec<_>| leakage_probe(&feature_matrix(&rows), &ds.speaker_ids, 1).map(|p| p.accuracy);

    let raw = probe(ds.data.iter().map(|u| summary_features(&u.units)).collect())?;

    let params = PerturbParams::new(spec.unit_channels, PerturbMode::LearnedScale);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Batches must mix speakers, as training batches do; the corpus is
    // stored speaker by speaker.
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut augmented = vec![None; ds.len()];
    for chunk in order.chunks(8) {
        let batch: Vec<_> = chunk.iter().map(|&i| ds.data[i].units.clone()).collect();
        for (&i, y) in chunk.iter().zip(asa_forward(&batch, &params, Phase::Training, &mut rng)?) {
            augmented[i] = Some(summary_features(&y));
        }
    }
    let augmented = probe(augmented.into_iter().map(Option::unwrap).collect())?;

    let normalized: Vec<_> = ds
        .data
        .iter()
        .map(|u| Ok(summary_features(&instance_normalize(&u.units, &channel_stats(&u.units, EPS)?)?)))
        .collect::<savc::Result<_>>()?;
    // After normalization each std is sigma / sqrt(sigma^2 + EPS): one minus
    // a sigma-dependent residue the probe's feature scaling blows back up.
    let c = spec.unit_channels;
    let normalized_means = probe(normalized.iter().map(|f| f.slice(s![..c]).to_owned()).collect())?;
    let normalized = probe(normalized)?;

    let noise = Array2::from_shape_fn((ds.len(), 16), |_| rng.random_range(-1.0..1.0));
    let chance = leakage_probe(&noise, &ds.speaker_ids, 1)?.accuracy;

    println!("speaker probe accuracy over {} speakers:", ds.speakers.len());
    println!("  raw units           {raw:.3}");
    println!("  style-augmented     {augmented:.3}");
    println!("  instance-normalized {normalized:.3} (means only {normalized_means:.3})");
    println!("  noise (chance)      {chance:.3}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("savc-leakage-probe-{}", std::process::id()))
}
