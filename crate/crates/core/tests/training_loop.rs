mod common;

use std::path::Path;

use common::*;
use surdo_sep::audio::read_wav;
use surdo_sep::corpus::{Split, SplitCounts};
use surdo_sep::mixgen::{mixture_dir, DatasetManifest};
use surdo_sep::spectral::{stft, StftConfig};
use surdo_sep::tensor::Checkpoint;
use surdo_sep::training::{evaluate_loss, load_tracks, train, TrainConfig, TrainError, LAST_CHECKPOINT, LOSS_LOG};
use surdo_sep::unet::UNet;

fn config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr,
        patch_frames: tiny_arch().patch_frames,
        patches_per_track: Some(6),
        seed: 21,
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

fn dataset(dir: &Path) -> (DatasetManifest, std::path::PathBuf) {
    let (_, m, out) = desk_dataset(dir, SplitCounts::new(4, 2, 1), 8);
    (m, out)
}

fn weights(net: &UNet<f32>) -> Vec<Vec<f32>> {
    net.named_parameters().iter().map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (m, ds) = dataset(dir.path());
    let cfg = config(3, 0.0);
    let out = train(&m, &ds, &tiny_arch(), &cfg, &dir.path().join("run")).unwrap();
    let trained = UNet::<f32>::from_checkpoint(&Checkpoint::load(&out.last).unwrap(), None).unwrap();
    let fresh = UNet::<f32>::new(tiny_arch(), cfg.seed).unwrap();
    assert_eq!(weights(&trained), weights(&fresh));
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (m, ds) = dataset(dir.path());
    let cfg = config(3, 1e-3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&m, &ds, &tiny_arch(), &cfg, &a).unwrap();
    train(&m, &ds, &tiny_arch(), &cfg, &b).unwrap();
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let log = std::fs::read_to_string(a.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,valid_loss"));
    assert_eq!(log.lines().count(), 4);
    assert!(a.join("epoch-0002.ckpt").is_file() && a.join(LAST_CHECKPOINT).is_file());
}

#[test]
fn best_checkpoint_reproduces_its_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (m, ds) = dataset(dir.path());
    let cfg = config(4, 2e-3);
    let arch = tiny_arch();
    let out = train(&m, &ds, &arch, &cfg, &dir.path().join("run")).unwrap();

    // recorded best is the running minimum of the log
    let mut running = f64::INFINITY;
    for e in &out.log {
        assert!(e.train_loss >= 0.0 && e.valid_loss >= 0.0);
        running = running.min(e.valid_loss);
    }
    assert_eq!(out.best_valid_loss, running);
    assert_eq!(out.log[out.best_epoch - 1].valid_loss, running);

    let ck = Checkpoint::<f32>::load(&out.best).unwrap();
    assert_eq!(ck.meta["extra"]["valid_loss"].as_f64(), Some(running));
    let net = UNet::<f32>::from_checkpoint(&ck, Some(&arch)).unwrap();
    let tracks = load_tracks(&m, &ds, Split::Valid, cfg.stft, arch.patch_bins).unwrap();
    let pf = cfg.patch_frames;
    let tiles: Vec<_> = tracks
        .iter()
        .flat_map(|t| (0..t.frames.div_ceil(pf)).map(move |i| t.patch(i * pf, pf)))
        .collect();
    assert_eq!(evaluate_loss(&net, &tiles, cfg.batch_size).unwrap(), running);
}

#[test]
fn unreadable_entries_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (m, ds) = dataset(dir.path());
    let victim = &m.specs[1];
    std::fs::remove_file(mixture_dir(&ds, victim).join("mixture.wav")).unwrap();
    let run = dir.path().join("run");
    match train(&m, &ds, &tiny_arch(), &config(1, 1e-3), &run) {
        Err(TrainError::Unreadable(list)) => {
            assert_eq!(list.len(), 1);
            assert!(list[0].starts_with(&victim.mixture_id));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(!run.join(LOSS_LOG).exists());
}

#[test]
fn patch_magnitudes_match_a_recomputed_transform() {
    let dir = tempfile::tempdir().unwrap();
    let (c, m, ds) = desk_dataset(dir.path(), SplitCounts::new(3, 1, 1), 2);
    let cfg = StftConfig::default();
    let tracks = load_tracks(&m, &ds, Split::Train, cfg, 513).unwrap();
    for (t, spec) in tracks.iter().zip(m.split_specs(Split::Train)) {
        // sum the stems independently of the renderer
        let stems: Vec<_> = spec.stem_ids.iter().map(|id| read_wav(&c.record(id).unwrap().path).unwrap()).collect();
        let len = stems.iter().map(|s| s.len()).min().unwrap();
        let sum: Vec<f32> = (0..len).map(|i| stems.iter().map(|s| s.samples()[i]).sum()).collect();
        let direct = stft(&surdo_sep::audio::Waveform::new(sum, 44_100).unwrap(), cfg).unwrap();
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for (&p, &d) in t.mix.iter().zip(direct.magnitude()) {
            err += (p as f64 * t.scale - d).powi(2);
            norm += d * d;
        }
        assert!((err / norm).sqrt() <= 1e-6, "{}: {}", t.id, (err / norm).sqrt());
        assert_eq!(read_wav(mixture_dir(&ds, spec).join("mixture.wav")).unwrap().len(), len);
    }
}
