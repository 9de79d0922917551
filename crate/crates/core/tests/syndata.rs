use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use savc::eval::{feature_matrix, leakage_probe, summary_features};
use savc::syndata::{ground_truth, make_corpus, render_utterance, SynthSpec};
use savc::tensorio::{self, LoadOptions};
use savc::Error;

fn tiny() -> SynthSpec {
    SynthSpec {
        n_speakers: 2,
        n_emotions: 1,
        utterances_per_pair: 1,
        frames: 8,
        unit_channels: 4,
        mel_channels: 4,
        ..SynthSpec::default()
    }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn tiny_corpus_counts_and_strict_validation() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_corpus(&tiny(), dir.path(), 1).unwrap();
    assert_eq!(m.utterances.len(), 2);
    let strict = LoadOptions {
        strict: true,
        ..LoadOptions::default()
    };
    let back = tensorio::load_manifest_with(dir.path().join("manifest.json"), &strict).unwrap();
    assert_eq!(back.utterances, m.utterances);
}

#[test]
fn corpus_is_byte_identical_across_runs_and_job_counts() {
    let spec = SynthSpec {
        n_speakers: 3,
        n_emotions: 2,
        utterances_per_pair: 3,
        frames: 16,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    make_corpus(&spec, a.path(), 1).unwrap();
    make_corpus(&spec, b.path(), 1).unwrap();
    make_corpus(&spec, c.path(), 4).unwrap();
    let ta = tree(a.path());
    assert_eq!(ta.len(), 1 + 5 * spec.record_count());
    assert_eq!(ta, tree(b.path()));
    assert_eq!(ta, tree(c.path()));

    let d = tempfile::tempdir().unwrap();
    make_corpus(&SynthSpec { seed: 99, ..spec }, d.path(), 1).unwrap();
    assert_ne!(ta, tree(d.path()));
}

#[test]
fn ground_truth_re_renders_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        utterances_per_pair: 1,
        n_speakers: 2,
        ..SynthSpec::default()
    };
    let m = make_corpus(&spec, dir.path(), 1).unwrap();
    for rec in &m.utterances {
        let f = ground_truth(&m, rec).unwrap();
        assert_eq!((f.frames(), f.unit_channels()), (spec.frames, spec.unit_channels));
        let r = render_utterance(&f).unwrap();
        let on_disk = fs::read(m.resolve(&rec.units_path)).unwrap();
        let again = tensorio::Tensor::from_array2(&r.units).unwrap().to_bytes().unwrap();
        assert_eq!(on_disk, again, "{}", rec.id);
    }
    let mut bare = m.utterances[0].clone();
    bare.factors_path = None;
    assert!(matches!(ground_truth(&m, &bare), Err(Error::NoGroundTruth(_))));
}

#[test]
fn invalid_spec_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let err = make_corpus(&SynthSpec { n_speakers: 1, ..tiny() }, &out, 1).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert!(!out.exists());
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn contour_features(f0: &[f64], energy: &[f64]) -> Array1<f64> {
    let voiced: Vec<f64> = f0.iter().copied().filter(|v| *v != 0.0).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
    };
    Array1::from_vec(vec![
        mean(&voiced),
        std(&voiced),
        slope(&voiced),
        mean(energy),
        std(energy),
        slope(energy),
    ])
}

/// Default-size corpus: speaker identity is linearly readable from raw unit
/// statistics, emotion from the contours.
#[test]
fn default_corpus_probes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    let m = make_corpus(&spec, dir.path(), 2).unwrap();
    assert_eq!(m.utterances.len(), 2000);
    let speakers = m.speakers();
    let emotions = m.emotions();
    let mut raw = Vec::new();
    let mut contours = Vec::new();
    let mut spk = Vec::new();
    let mut emo = Vec::new();
    for rec in &m.utterances {
        let d = m.load_utterance(rec).unwrap();
        raw.push(summary_features(&d.units));
        contours.push(contour_features(d.f0.as_slice().unwrap(), d.energy.as_slice().unwrap()));
        spk.push(speakers.iter().position(|s| *s == rec.speaker).unwrap());
        emo.push(emotions.iter().position(|e| *e == rec.emotion).unwrap());
    }
    let speaker_acc = leakage_probe(&feature_matrix(&raw), &spk, 7).unwrap().accuracy;
    let emotion_acc = leakage_probe(&feature_matrix(&contours), &emo, 7).unwrap().accuracy;
    println!("speaker<-raw units {speaker_acc:.3}, emotion<-contours {emotion_acc:.3}");
    assert!(speaker_acc >= 0.9, "{speaker_acc}");
    assert!(emotion_acc >= 0.9, "{emotion_acc}");
}
