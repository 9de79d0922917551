//! Converts one held-out utterance to every training speaker and to an
//! imported (zero-shot) embedding, and reports where each output's channel
//! statistics land relative to the speakers' corpus means.
//!
//! ```text
//! cargo run --release --example convert_voice -- [main_checkpoint_dir corpus_dir]
//! ```
//!
//! Without arguments a small model is trained first.

use ndarray::Array1;
use savc::convert::{self, ConversionRequest};
use savc::eval::{style_vector, SpeakerStyles};
use savc::nets::{Checkpoint, EncoderConfig, SpeakerRef};
use savc::syndata::{make_corpus, SynthSpec};
use savc::tensorio;
use savc::train::{self, Dataset, TrainConfig};

fn main() -> savc::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let (ckpt, ds) = match (args.get(1), args.get(2)) {
        (Some(c), Some(d)) => (
            Checkpoint::load(c)?,
            Dataset::load(&tensorio::load_manifest(std::path::Path::new(d).join("manifest.json"))?)?,
        ),
        _ => quick_model()?,
    };

    let styles = SpeakerStyles::compute(&ds)?;
    let src = ds.held_out_indices()[0];
    let rec = &ds.manifest.utterances[src];
    println!("source {} (speaker {})", rec.id, rec.speaker);
    for (t, name) in ds.speakers.iter().enumerate() {
        let req = ConversionRequest {
            source: rec.clone(),
            target: SpeakerRef::Name(name.clone()),
            output: None,
        };
        let mel = convert::convert(&ckpt, &ds.manifest, &req)?;
        let v = style_vector(&mel)?;
        let nearest = (0..ds.speakers.len())
            .min_by(|&a, &b| styles.distance(&v, a).total_cmp(&styles.distance(&v, b)))
            .unwrap();
        println!(
            "  -> {name}: distance to target style {:.3}, to source style {:.3}, nearest speaker {}",
            styles.distance(&v, t),
            styles.distance(&v, ds.speaker_ids[src]),
            ds.speakers[nearest]
        );
    }

    // A zero-shot target: the midpoint of two learned embeddings.
    let table = ckpt.params.get("speaker_table").expect("main checkpoints carry a speaker table");
    let mid: Array1<f64> = (&table.row(0) + &table.row(1)) / 2.0;
    let mel = convert::convert_units(&ckpt, &ds.data[src].units, &SpeakerRef::External(mid))?;
    let v = style_vector(&mel)?;
    println!(
        "  -> midpoint of {} and {}: distances {:.3} / {:.3}",
        ds.speakers[0],
        ds.speakers[1],
        styles.distance(&v, 0),
        styles.distance(&v, 1)
    );
    Ok(())
}

fn quick_model() -> savc::Result<(Checkpoint, Dataset)> {
    let spec = SynthSpec {
        n_speakers: 4,
        utterances_per_pair: 10,
        ..SynthSpec::default()
    };
    let dir = std::env::temp_dir().join("savc-convert-voice");
    let ds = Dataset::load(&make_corpus(&spec, &dir, 1)?)?;
    let model = EncoderConfig {
        unit_channels: spec.unit_channels,
        mel_channels: spec.mel_channels,
        content_dim: 4,
        ..EncoderConfig::default()
    };
    let cfg = TrainConfig {
        teacher_steps: 100,
        main_steps: 400,
        lr_main: 1e-3,
        ..TrainConfig::default()
    };
    let teacher = train::pretrain_teacher(&ds, &model, &cfg, None)?;
    Ok((train::train_main(&ds, &teacher, &cfg, None)?, ds))
}
