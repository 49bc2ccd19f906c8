mod common;

use std::collections::HashSet;
use std::path::PathBuf;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use surdo_sep::audio::{read_wav, write_wav, WavEncoding, Waveform};
use surdo_sep::corpus::{Corpus, Split, SplitCounts, StemRecord};
use surdo_sep::fixture::FixtureProfile;
use surdo_sep::mixgen::{
    generate_dataset, mixture_dir, plan_dataset, render_mixture, sample_mixture, MixgenError, MixtureSpec, MANIFEST_FILE,
};

#[test]
fn brid_plan_has_exact_counts_and_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let c = split_corpus(dir.path(), FixtureProfile::Brid, 1);
    let specs = plan_dataset(&c, SplitCounts::new(100, 10, 30), 17).unwrap();
    assert_eq!(specs.len(), 140);
    assert_eq!(count_split(&specs, Split::Train), 100);
    assert_eq!(count_split(&specs, Split::Valid), 10);
    assert_eq!(count_split(&specs, Split::Test), 30);
    assert_eq!(audit_specs(&c, &specs), Vec::<String>::new());
    assert_eq!(plan_dataset(&c, SplitCounts::new(100, 10, 30), 17).unwrap(), specs);
}

#[test]
fn validator_catches_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let c = split_corpus(dir.path(), FixtureProfile::Brid, 1);
    let specs = plan_dataset(&c, SplitCounts::new(5, 1, 1), 2).unwrap();
    let mut dup = specs.clone();
    dup[1].stem_ids = dup[0].stem_ids.clone();
    dup[1].style = dup[0].style.clone();
    assert!(!audit_specs(&c, &dup).is_empty());
    let mut crossing = specs.clone();
    crossing[0].split = Split::Test;
    assert!(!audit_specs(&c, &crossing).is_empty());
}

fn rec(id: &str, instrument: &str) -> StemRecord {
    StemRecord {
        id: id.into(),
        path: PathBuf::from(format!("{id}.wav")),
        instrument: instrument.into(),
        style: "samba".into(),
        tempo: 90.0,
        split: Split::Train,
        duration: 1.0,
    }
}

#[test]
fn exhausting_the_space_is_an_error() {
    // one target and two single-stem instruments: three distinct sets
    let c = Corpus {
        root: PathBuf::from("."),
        records: vec![rec("t", "surdo"), rec("a", "agogo"), rec("b", "caixa")],
        target_instrument: "surdo".into(),
        skipped: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = HashSet::new();
    for _ in 0..3 {
        let s = sample_mixture(&c, Split::Train, &mut rng, &seen).unwrap();
        assert!(seen.insert(s.stem_ids.iter().cloned().collect()));
    }
    assert!(matches!(
        sample_mixture(&c, Split::Train, &mut rng, &seen),
        Err(MixgenError::Exhausted(Split::Train))
    ));
    let err = plan_dataset(&c, SplitCounts::new(4, 0, 0), 0).unwrap_err();
    assert!(matches!(err, MixgenError::AtIndex { index: 3, .. }), "{err}");
    assert!(matches!(
        sample_mixture(&c, Split::Valid, &mut rng, &HashSet::new()),
        Err(MixgenError::NoCandidates(Split::Valid))
    ));
}

#[test]
fn rendering_is_an_exact_ordered_sum() {
    let dir = tempfile::tempdir().unwrap();
    let stems: Vec<(&str, &str, Vec<f32>)> = vec![
        ("t", "surdo", (0..900).map(|i| (i as f32 * 0.013).sin() * 0.3).collect()),
        ("a", "agogo", (0..700).map(|i| ((i * 7919) % 97) as f32 / 300.0 - 0.15).collect()),
        ("b", "caixa", (0..1000).map(|i| (i as f32 * 0.41).cos() * 0.2).collect()),
    ];
    let mut records = Vec::new();
    for (id, inst, samples) in &stems {
        let path = dir.path().join(format!("{id}.wav"));
        write_wav(&path, &Waveform::new(samples.clone(), 44_100).unwrap(), WavEncoding::Float32).unwrap();
        records.push(StemRecord {
            path,
            ..rec(id, inst)
        });
    }
    let c = Corpus {
        root: dir.path().to_path_buf(),
        records,
        target_instrument: "surdo".into(),
        skipped: vec![],
    };
    let spec = MixtureSpec {
        mixture_id: "m".into(),
        split: Split::Train,
        style: "samba".into(),
        stem_ids: vec!["t".into(), "a".into(), "b".into()],
        seed: 0,
    };
    let (mix, target) = render_mixture(&spec, &c).unwrap();
    assert_eq!(mix.len(), 700);
    assert_eq!(target.samples(), &stems[0].2[..700]);
    for i in 0..700 {
        let expected = stems[0].2[i] + stems[1].2[i] + stems[2].2[i];
        assert_eq!(mix.samples()[i], expected);
    }
    let single = MixtureSpec {
        stem_ids: vec!["t".into()],
        ..spec
    };
    let (m, t) = render_mixture(&single, &c).unwrap();
    assert_eq!(m, t);
}

#[test]
fn generated_dataset_is_linear_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let counts = SplitCounts::new(6, 2, 2);
    let (c, m, out) = desk_dataset(a.path(), counts, 4);
    let again = a.path().join("again");
    let m2 = generate_dataset(&c, counts, 4, &again, m.corpus.clone()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(tree_bytes(&out), tree_bytes(&again));
    assert!(out.join(MANIFEST_FILE).is_file());
    for spec in &m.specs {
        let d = mixture_dir(&out, spec);
        let mix = read_wav(d.join("mixture.wav")).unwrap();
        let target = read_wav(d.join("target.wav")).unwrap();
        let (want_mix, want_target) = render_mixture(spec, &c).unwrap();
        assert_eq!(mix, want_mix);
        assert_eq!(target, want_target);
    }
}
