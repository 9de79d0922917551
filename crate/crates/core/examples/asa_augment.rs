//! One pass of adversarial style augmentation over a batch of synthetic
//! utterances: per-channel statistics move, normalized content does not.
//!
//! ```text
//! cargo run --release --example asa_augment
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use savc::asa::{
    asa_forward, batch_stat_spread, channel_stats, instance_normalize, perturbed_spread, PerturbMode, PerturbParams,
    Phase, EPS,
};
use savc::syndata::{self, SynthSpec};

fn main() -> savc::Result<()> {
    let spec = SynthSpec::default();
    let batch: Vec<_> = (0..6)
        .map(|i| syndata::render_utterance(&syndata::sample_factors(&spec, i, i % spec.n_emotions, 0)).map(|r| r.units))
        .collect::<savc::Result<_>>()?;
    let stats: Vec<_> = batch.iter().map(|x| channel_stats(x, EPS)).collect::<savc::Result<_>>()?;
    let spread = batch_stat_spread(&stats)?;

    for mode in [PerturbMode::LearnedScale, PerturbMode::Fixed, PerturbMode::Literal] {
        let params = PerturbParams::new(spec.unit_channels, mode);
        let used = perturbed_spread(&params, &spread);
        println!(
            "{mode:>13}: spread of channel-0 mean {:.3} -> {:.3}, of channel-0 sigma {:.3} -> {:.3}",
            spread.sigma_mu[0], used.sigma_mu[0], spread.sigma_sigma[0], used.sigma_sigma[0]
        );
    }

    let params = PerturbParams::new(spec.unit_channels, PerturbMode::LearnedScale);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = asa_forward(&batch, &params, Phase::Training, &mut rng)?;
    for (i, (x, y)) in batch.iter().zip(&out).enumerate() {
        let (sx, sy) = (channel_stats(x, EPS)?, channel_stats(y, EPS)?);
        let content = instance_normalize(x, &sx)? - instance_normalize(y, &sy)?;
        let worst = content.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        println!(
            "utt {i}: channel-0 (mu, sigma) ({:+.2}, {:.2}) -> ({:+.2}, {:.2}); normalized content moved by {worst:.1e}",
            sx.mu[0], sx.sigma[0], sy.mu[0], sy.sigma[0]
        );
    }

    // Inference paths skip the module; calling it there is a bug.
    match asa_forward(&batch, &params, Phase::Inference, &mut rng) {
        Err(e) => println!("inference call rejected: {e}"),
        Ok(_) => unreachable!("augmentation ran at inference"),
    }
    Ok(())
}
