use proptest::prelude::*;

use ssl_influence::data::{read_dataset, write_dataset, Dataset};
use ssl_influence::encoder::{EncoderParams, EncoderSpec};
use ssl_influence::influence::InfluenceRecord;
use ssl_influence::pipeline::{ExperimentReport, SCHEMA_VERSION};
use ssl_influence::Error;

fn bits(d: &Dataset) -> Vec<u64> {
    d.vectors().iter().flatten().map(|v| v.to_bits()).collect()
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(any::<f64>(), d), n),
            prop::option::of(prop::collection::vec(-3i64..10, n)),
            prop::option::of(prop::collection::vec(-1i64..4, n)),
            prop::option::of(prop::collection::vec(any::<bool>(), n)),
        )
            .prop_map(|(vectors, labels, groups, flags)| {
                let mut ds = Dataset::new(vectors).unwrap();
                if let Some(l) = labels {
                    ds = ds.with_labels(l).unwrap();
                }
                if let Some(g) = groups {
                    ds = ds.with_duplicate_groups(g).unwrap();
                }
                if let Some(f) = flags {
                    ds = ds.with_outlier_flags(f).unwrap();
                }
                ds
            })
    })
}

proptest! {
    #[test]
    fn binary_round_trip_is_bit_exact(ds in dataset_strategy()) {
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        let back = Dataset::read_binary(buf.as_slice()).unwrap();
        prop_assert_eq!(bits(&back), bits(&ds));
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.duplicate_groups(), ds.duplicate_groups());
        prop_assert_eq!(back.outlier_flags(), ds.outlier_flags());
    }

    #[test]
    fn any_truncation_is_reported_as_corrupt(ds in dataset_strategy(), cut in any::<prop::sample::Index>()) {
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        // cut inside the payload, past magic and version
        let at = 6 + cut.index(buf.len() - 6);
        let err = Dataset::read_binary(&buf[..at]).unwrap_err();
        prop_assert!(matches!(err, Error::Corrupt(_)), "{err}");
    }
}

#[test]
fn header_layout() {
    let ds = Dataset::new(vec![vec![1.0, 2.0]])
        .unwrap()
        .with_labels(vec![7])
        .unwrap()
        .with_outlier_flags(vec![true])
        .unwrap();
    let mut buf = Vec::new();
    ds.write_binary(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"SSLI");
    assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
    assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(buf[14..22].try_into().unwrap()), 2);
    assert_eq!(u16::from_le_bytes([buf[22], buf[23]]), 1 | 4);
    assert_eq!(f64::from_le_bytes(buf[24..32].try_into().unwrap()), 1.0);
    assert_eq!(i64::from_le_bytes(buf[40..48].try_into().unwrap()), 7);
    assert_eq!(buf[48], 1);
    assert_eq!(buf.len(), 49);
}

#[test]
fn bad_magic_and_version_are_format_errors() {
    let ds = Dataset::new(vec![vec![0.5]]).unwrap();
    let mut buf = Vec::new();
    ds.write_binary(&mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(Dataset::read_binary(bad.as_slice()), Err(Error::Format(_))));
    let mut newer = buf.clone();
    newer[4] = 9;
    assert!(matches!(Dataset::read_binary(newer.as_slice()), Err(Error::Format(_))));
}

#[test]
fn csv_with_labels_column() {
    let text = "a,b,label\n1.5,2,0\n-3,4e-2,1\n0,0,1\n";
    let ds = Dataset::read_csv(text.as_bytes()).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), 2);
    assert_eq!(ds.get(1), &[-3.0, 0.04]);
    assert_eq!(ds.labels(), Some(&[0, 1, 1][..]));
    assert!(ds.duplicate_groups().is_none());
}

#[test]
fn csv_rejects_non_numeric_cells() {
    let err = Dataset::read_csv("a,b\n1,x\n".as_bytes()).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
}

#[test]
fn files_dispatch_on_extension() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::new(vec![vec![0.1, 0.2], vec![1.0 / 3.0, -0.0]])
        .unwrap()
        .with_duplicate_groups(vec![-1, 0])
        .unwrap();
    for name in ["d.ssli", "d.csv"] {
        let path = dir.path().join(name);
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(bits(&back), bits(&ds), "{name}");
        assert_eq!(back.duplicate_groups(), ds.duplicate_groups());
    }
    let head = std::fs::read(dir.path().join("d.csv")).unwrap();
    assert!(head.starts_with(b"x0,x1,duplicate_group\n"));
}

#[test]
fn checkpoint_round_trip_and_truncation() {
    let p = EncoderParams::init_seeded(&EncoderSpec::mlp(5, &[4, 3], 2).with_seed(1)).unwrap();
    let mut buf = Vec::new();
    p.write_checkpoint(&mut buf).unwrap();
    let back = EncoderParams::read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, p);
    let err = EncoderParams::read_checkpoint(&buf[..buf.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Corrupt(_)));
}

#[test]
fn report_json_is_lossless() {
    let records: Vec<InfluenceRecord> = (0..5)
        .map(|i| {
            let raw = -(0.1f64 + i as f64).powi(3) / 7.0;
            InfluenceRecord {
                example_index: i,
                raw_score: raw,
                magnitude: raw.abs(),
                grad_norm: 1.0 / (i as f64 + 3.0),
                eps_eff: 0.2 + 1e-17 * i as f64,
                seed: u64::MAX - i as u64,
            }
        })
        .collect();
    let mut report = ExperimentReport::new("score", serde_json::json!({"any": [1, 2]})).with_records(records);
    report.notices.push("note".into());
    let text = report.to_json().unwrap();
    let back = ExperimentReport::from_json(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json().unwrap(), text);
    assert_eq!(back.schema_version, SCHEMA_VERSION);

    let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    assert!(matches!(ExperimentReport::from_json(&bumped), Err(Error::Format(_))));
}
