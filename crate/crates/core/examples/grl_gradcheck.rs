//! The gradient reversal node and a finite-difference check of the full
//! main objective on a tiny model.
//!
//! ```text
//! cargo run --release --example grl_gradcheck
//! ```

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use savc::asa::{PerturbMode, StyleNoise};
use savc::autograd::Graph;
use savc::nets::{self, EncoderConfig, PROSODY_INPUTS};
use savc::train::{evaluate_main, loss_total, main_objective, Batch, MainStep, TrainConfig};

fn normal(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn main() -> savc::Result<()> {
    // Identity forward, negated and scaled backward.
    let mut g = Graph::new();
    let x = g.param(array![[1.0, -2.0, 0.5]]);
    let r = g.grl(x, 0.5);
    let loss = g.sum_sq(r);
    let grads = g.backward(loss);
    println!("forward {:?}", g.value(r).row(0).to_vec());
    println!("d(sum r^2)/dx through GRL(0.5) = {:?} (plain gradient would be [2, -4, 1])", grads.get(x).expect("x feeds the loss").row(0).to_vec());

    let cfg = EncoderConfig {
        unit_channels: 4,
        mel_channels: 4,
        conv_blocks: 2,
        kernel: 3,
        dilations: vec![1, 2],
        conv_channels: 6,
        gru_hidden: 4,
        content_dim: 3,
        prosody_dim: 2,
        speaker_dim: 5,
        n_style_tokens: 3,
        token_dim: 4,
        n_emotions: 3,
    };
    let mut params = nets::init_main(&cfg, 3, PerturbMode::LearnedScale, 7);
    for (k, v) in nets::init_teacher(&cfg, 7).iter() {
        params.insert(k.clone(), v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, w) = (3, 9);
    let mut targets = Array2::zeros((b, cfg.n_emotions));
    for i in 0..b {
        targets[[i, i % cfg.n_emotions]] = 1.0;
    }
    let batch = Batch {
        frames: w,
        units: (0..b).map(|i| normal((w, cfg.unit_channels), &mut rng) * (1.0 + i as f64) + i as f64).collect(),
        mel: normal((b * w, cfg.mel_channels), &mut rng),
        prosody: normal((b * w, PROSODY_INPUTS), &mut rng),
        z_p: Some(normal((b * w, cfg.prosody_dim), &mut rng)),
        speakers: (0..b).collect(),
        targets,
    };
    let noise = StyleNoise::draw(&mut rng, b, cfg.unit_channels);
    let tcfg = TrainConfig::default();
    let step = MainStep {
        model: &cfg,
        cfg: &tcfg,
        batch: &batch,
        noise: Some(&noise),
        with_pred: true,
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g, |n| !n.starts_with("teacher."));
    let (loss, _) = main_objective(&mut g, &bound, &step)?;
    let grads = g.backward(loss);
    let h = 1e-3;
    println!("{:<24} {:>12} {:>12} {:>9}", "parameter[0,0]", "analytic", "numeric", "rel err");
    for name in ["enc.content.w", "enc.prosody.w", "dec.out.w", "student.emotion.w", "asa.i_mu", "asa.i_sigma"] {
        let analytic = grads.get(bound.var(name)).map_or(0.0, |m| m[[0, 0]]);
        let mut up = params.clone();
        up.get_mut(name).unwrap()[[0, 0]] += h;
        let mut dn = params.clone();
        dn.get_mut(name).unwrap()[[0, 0]] -= h;
        let f = |p| loss_total(&evaluate_main(p, &step).unwrap(), &tcfg);
        let mut numeric = (f(&up) - f(&dn)) / (2.0 * h);
        // The perturbation scale sits behind the reversal node.
        if name.starts_with("asa.") {
            numeric *= -tcfg.grl_lambda;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        println!("{name:<24} {analytic:>12.6} {numeric:>12.6} {rel:>9.1e}");
    }
    Ok(())
}
