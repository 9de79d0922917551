mod common;

use std::collections::BTreeMap;

use ndarray::Array1;
use savc::convert::{self, batch_convert, convert_units, ConversionRequest};
use savc::nets::{self, SpeakerRef};
use savc::tensorio::{self, Tensor};
use savc::train::{self, evaluate_main, Batch, MainStep, TrainConfig};
use savc::Error;

struct Setup {
    c: common::Corpus,
    teacher: nets::Checkpoint,
    main: nets::Checkpoint,
}

fn setup() -> Setup {
    let spec = common::small_spec();
    let c = common::corpus(&spec);
    let cfg = common::quick_train();
    let teacher = train::pretrain_teacher(&c.ds, &common::model_for(&spec), &cfg, None).unwrap();
    let main = train::train_main(&c.ds, &teacher, &cfg, None).unwrap();
    Setup { c, teacher, main }
}

fn pairs(s: &Setup, n: usize) -> Vec<(String, String)> {
    let speakers = &s.c.ds.speakers;
    s.c.manifest
        .utterances
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, r)| (r.id.clone(), speakers[i % speakers.len()].clone()))
        .collect()
}

#[test]
fn self_conversion_is_clean_reconstruction() {
    let s = setup();
    let i = 3;
    let rec = &s.c.manifest.utterances[i];
    let data = &s.c.ds.data[i];
    let mel = convert_units(&s.main, &data.units, &SpeakerRef::Name(rec.speaker.clone())).unwrap();

    let w = data.frames();
    let mut targets = ndarray::Array2::zeros((1, s.main.model.n_emotions));
    targets[[0, s.c.ds.emotion_ids[i]]] = 1.0;
    let batch = Batch {
        frames: w,
        units: vec![data.units.clone()],
        mel: data.mel.clone(),
        prosody: ndarray::Array2::zeros((w, nets::PROSODY_INPUTS)),
        z_p: None,
        speakers: vec![s.c.ds.speaker_ids[i]],
        targets,
    };
    let cfg = TrainConfig::default();
    let step = MainStep {
        model: &s.main.model,
        cfg: &cfg,
        batch: &batch,
        noise: None,
        with_pred: false,
    };
    let l = evaluate_main(&s.main.params, &step).unwrap();
    // Same arithmetic, different summation order.
    let direct = train::loss_rec(&mel, &data.mel).unwrap();
    assert!((l.rec - direct).abs() <= 1e-12 * direct.abs(), "{} vs {direct}", l.rec);
}

#[test]
fn conversion_is_deterministic_and_target_blind_in_content() {
    let s = setup();
    let units = &s.c.ds.data[0].units;
    let a = convert_units(&s.main, units, &SpeakerRef::Name("spk01".into())).unwrap();
    let b = convert_units(&s.main, units, &SpeakerRef::Name("spk01".into())).unwrap();
    assert_eq!(a, b);
    let other = convert_units(&s.main, units, &SpeakerRef::Name("spk02".into())).unwrap();
    assert_ne!(a, other);
    // The content stream never depends on the target.
    let e1 = convert::encode(&s.main, units).unwrap();
    let e2 = convert::encode(&s.main, units).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn teacher_checkpoints_cannot_convert() {
    let s = setup();
    let err = convert_units(&s.teacher, &s.c.ds.data[0].units, &SpeakerRef::Name("spk00".into())).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }));
}

#[test]
fn single_request_writes_output() {
    let s = setup();
    let out = s.c.dir.path().join("one.savt");
    let req = ConversionRequest {
        source: s.c.manifest.utterances[1].clone(),
        target: SpeakerRef::Name("spk02".into()),
        output: Some(out.clone()),
    };
    let mel = convert::convert(&s.main, &s.c.manifest, &req).unwrap();
    let back = tensorio::read_tensor(&out).unwrap().to_array2().unwrap();
    assert_eq!(back, mel.mapv(|v| v as f32 as f64));
}

#[test]
fn batch_serial_and_parallel_are_byte_identical() {
    let s = setup();
    let p = pairs(&s, 10);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = batch_convert(&s.main, &s.c.manifest, &p, &BTreeMap::new(), a.path(), 1).unwrap();
    let mb = batch_convert(&s.main, &s.c.manifest, &p, &BTreeMap::new(), b.path(), 4).unwrap();
    assert_eq!(ma.utterances.len(), 10);
    assert_eq!(ma.utterances, mb.utterances);
    assert_eq!(common::tree(a.path()), common::tree(b.path()));
    for (rec, (src, _)) in ma.utterances.iter().zip(&p) {
        let t = tensorio::read_tensor(ma.resolve(&rec.mel_path)).unwrap();
        let srec = s.c.manifest.get(src).unwrap();
        let sm = tensorio::read_tensor(s.c.manifest.resolve(&srec.mel_path)).unwrap();
        assert_eq!(t.shape(), sm.shape());
    }
    // The results manifest loads on its own.
    let back = tensorio::load_manifest(a.path().join("manifest.json")).unwrap();
    assert_eq!(back.utterances, ma.utterances);
}

#[test]
fn empty_pair_list_gives_empty_manifest() {
    let s = setup();
    let d = tempfile::tempdir().unwrap();
    let m = batch_convert(&s.main, &s.c.manifest, &[], &BTreeMap::new(), d.path(), 1).unwrap();
    assert!(m.utterances.is_empty());
    assert!(d.path().join("manifest.json").is_file());
}

#[test]
fn one_bad_pair_aborts_before_writing() {
    let s = setup();
    let mut p = pairs(&s, 4);
    p.push((p[0].0.clone(), "nobody".into()));
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let err = batch_convert(&s.main, &s.c.manifest, &p, &BTreeMap::new(), &out, 1).unwrap_err();
    assert!(matches!(err, Error::UnknownSpeaker(_)));
    assert!(!out.exists());

    let bad_id = vec![("missing".to_string(), "spk00".to_string())];
    assert!(batch_convert(&s.main, &s.c.manifest, &bad_id, &BTreeMap::new(), &out, 1).is_err());
    assert!(!out.exists());
}

#[test]
fn imported_embedding_serves_unseen_target() {
    let s = setup();
    let d = tempfile::tempdir().unwrap();
    let v = Array1::linspace(-0.5, 0.5, s.main.model.speaker_dim);
    let vp = d.path().join("guest.savt");
    tensorio::write_tensor(&vp, &Tensor::from_array1(&v).unwrap()).unwrap();
    let imported = convert::load_embeddings(&[format!("guest={}", vp.display())]).unwrap();
    let v = imported["guest"].clone();
    let p = vec![(s.c.manifest.utterances[0].id.clone(), "guest".to_string())];
    let m = batch_convert(&s.main, &s.c.manifest, &p, &imported, d.path().join("out"), 1).unwrap();
    assert_eq!(m.utterances[0].speaker, "guest");
    let direct = convert_units(&s.main, &s.c.ds.data[0].units, &SpeakerRef::External(v)).unwrap();
    let written = tensorio::read_tensor(m.resolve(&m.utterances[0].mel_path)).unwrap().to_array2().unwrap();
    assert_eq!(written, direct.mapv(|x| x as f32 as f64));
    assert!(convert::load_embeddings(&["no-equals-sign".into()]).is_err());
}
