use somnus_core::dataset::{build_event_vectors, build_subject, harmonize_labels, ClinicalStats, PreprocessConfig};
use somnus_core::ingest::{
    parse_annotation_xml, parse_edf, parse_metadata_table, ChannelAliases, ChannelRole, ConceptTable,
};
use somnus_core::synth::{write_cohort, SynthConfig};

#[test]
fn written_cohort_ingests_without_discrepancies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_subjects: 2,
        epochs_per_subject: 480,
        sample_rate_hz: 25.0,
        seed: 42,
        ..SynthConfig::default()
    };
    let manifest = write_cohort(dir.path(), &cfg).unwrap();
    let metas = parse_metadata_table(&std::fs::read_to_string(dir.path().join("metadata.csv")).unwrap()).unwrap();
    assert_eq!(metas.len(), 2);
    let stats = ClinicalStats::from_training(&metas.iter().collect::<Vec<_>>());
    let pre = PreprocessConfig::default();
    let mut total_epochs = 0;
    for (truth, meta) in manifest.subjects.iter().zip(&metas) {
        assert_eq!(truth.subject_id, meta.subject_id);
        let rec = parse_edf(&std::fs::read(dir.path().join(&truth.edf)).unwrap(), &truth.subject_id, &ChannelAliases::default())
            .unwrap();
        assert!(rec.missing_roles().is_empty());
        assert_eq!(rec.duration_s, 480.0 * 30.0);
        assert_eq!(rec.channel(ChannelRole::Eeg).unwrap().sample_rate_hz, 25.0);
        let ann = parse_annotation_xml(
            &std::fs::read(dir.path().join(&truth.annotations)).unwrap(),
            rec.duration_s,
            &ConceptTable::default(),
        )
        .unwrap();
        assert_eq!(ann.stages.stages, truth.stages);
        assert_eq!(ann.events, truth.events);
        // Only the recording-start marker.
        assert_eq!(ann.skipped_unknown, 1);

        let subject = build_subject(&rec, &ann, meta, Some(&stats), &pre).unwrap();
        assert_eq!(subject.n_epochs(), 480);
        assert_eq!(subject.labels, harmonize_labels(&ann.stages));
        assert_eq!(subject.events, build_event_vectors(&truth.events, 480, 0.0));
        for (t, &l) in subject.labels.iter().enumerate() {
            let expect = if truth.fragmented.contains(&t) {
                somnus_core::synth::fragmented_label(truth.physiological[t])
            } else {
                truth.physiological[t]
            };
            assert_eq!(l as usize, expect.index(), "epoch {t}");
        }
        assert!(subject.epochs.iter().all(|v| v.is_finite()));
        total_epochs += subject.n_epochs();
    }
    assert_eq!(total_epochs, 960);
}
