use std::path::Path;

use rollnet::dsp::{cqt, Spectrogram};
use rollnet::eval::{evaluate, EvalError, Predictor, DEFAULT_THRESHOLD};
use rollnet::midi::{CorpusConfig, CorpusManifest, Split};
use rollnet::model::{load_checkpoint, predict, predict_spectrogram, train, ModelConfig, ModelParams, TrainConfig, TrainingSet};
use rollnet::pipeline::build_corpus;
use rollnet::rolls::InstrumentVocab;
use rollnet::synth::{Waveform, SAMPLE_RATE};

fn trio() -> InstrumentVocab {
    InstrumentVocab::default8().subset("trio", &["piano", "cello", "flute"]).unwrap()
}

fn corpus(dir: &Path, clips: usize, seconds: f64, split: f64) -> CorpusManifest {
    let mut cfg = CorpusConfig::new(trio());
    cfg.n_clips = clips;
    cfg.clip_seconds = seconds;
    cfg.split_fraction = split;
    build_corpus(3, &cfg, dir).unwrap()
}

fn tiny_model(seed: u64) -> ModelParams<f32> {
    let mut cfg = ModelConfig::new(3, "trio");
    cfg.widths = vec![2, 2];
    ModelParams::init(cfg, seed).unwrap()
}

#[test]
fn one_clip_one_epoch_batch_one_logs_one_step_per_segment() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 2, 12.0, 0.5);
    let data = TrainingSet::load(&m, Split::Train, 3, 88).unwrap();
    assert_eq!(data.clips, 1);
    let frames = data.segments.iter().map(|s| s.valid_frames).sum::<usize>();
    let cfg = TrainConfig { epochs: 1, batch_size: 1, lr: 0.005, seed: 1, max_steps: None };
    let mut p = tiny_model(1);
    let log = train(&mut p, &data, &cfg, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(log.len(), frames.div_ceil(320));
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=log.len()).collect::<Vec<_>>());
    let ckpt = load_checkpoint::<f32>(&dir.path().join("checkpoint.unw")).unwrap();
    assert_eq!(ckpt.step, log.len() as u64);
    assert_eq!(ckpt.params, p);
}

#[test]
fn same_seed_same_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 4, 12.0, 0.5);
    let data = TrainingSet::load(&m, Split::Train, 3, 88).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, lr: 0.005, seed: 5, max_steps: Some(3) };
    let run = || {
        let mut p = tiny_model(2);
        let log = train(&mut p, &data, &cfg, None, |_| {}).unwrap();
        (log.iter().map(|r| r.to_line()).collect::<Vec<_>>(), p)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn silence_predicts_consistent_shapes() {
    let p = tiny_model(3);
    let pred = predict(&p, &Waveform::silence(SAMPLE_RATE as usize * 3, SAMPLE_RATE)).unwrap();
    let t = pred.roll.n_frames();
    assert_eq!(t, cqt(&Waveform::silence(SAMPLE_RATE as usize * 3, SAMPLE_RATE)).unwrap().n_frames());
    assert_eq!((pred.roll.n_pitch(), pred.roll.n_instruments()), (88, 3));
    assert_eq!((pred.pitch.n_pitch(), pred.pitch.n_frames()), (88, t));
    assert_eq!((pred.instrument.n_instruments(), pred.instrument.n_frames()), (3, t));
    assert!(pred.roll.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn long_clips_stitch_back_to_full_length() {
    let p = tiny_model(4);
    let spec = Spectrogram::new((0..650 * 88).map(|i| (i % 17) as f32 * 0.1).collect(), 650, 88, SAMPLE_RATE, 512);
    let pred = predict_spectrogram(&p, &spec).unwrap();
    assert_eq!(pred.roll.n_frames(), 650);
    // each segment is predicted independently of what follows it
    let head = predict_spectrogram(&p, &spec.slice_frames(0, 320)).unwrap();
    assert_eq!(head.roll, pred.roll.slice_frames(0, 320));
}

#[test]
fn ground_truth_scores_perfectly_and_empty_split_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 2, 6.0, 1.0);
    let r = evaluate::<f32>(Predictor::GroundTruth, &m, Split::Train, &trio(), DEFAULT_THRESHOLD).unwrap();
    assert_eq!((r.roll_acc, r.pitch_acc, r.micro_f1), (1.0, 1.0, 1.0));
    assert_eq!(r.macro_f1, Some(1.0));
    for inst in r.instruments.iter().filter(|i| i.active_in_truth) {
        assert_eq!(inst.f1, 1.0);
        assert!(inst.auc.is_none() || inst.auc == Some(1.0), "{}", inst.name);
    }
    assert!(matches!(
        evaluate::<f32>(Predictor::GroundTruth, &m, Split::Test, &trio(), DEFAULT_THRESHOLD),
        Err(EvalError::EmptySplit(Split::Test))
    ));
}
