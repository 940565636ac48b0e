mod common;

use segcascade::mvol::{read_labels, read_mvol, write_labels, Dtype, MvolError, MvolFile, Payload, HEADER_LEN};
use segcascade::volume::LabelVolume;

#[test]
fn hundred_random_volumes_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(common::mvol_round_trip_failures(9, 100, dir.path()).unwrap(), 0);
}

#[test]
fn label_volumes_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut l = LabelVolume::zeros([3, 1, 4]);
    l.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, x)| *x = (i % 4) as u8);
    let path = dir.path().join("l.mvol");
    write_labels(&path, &l).unwrap();
    assert_eq!(read_labels(&path).unwrap(), l);
    assert_eq!(read_mvol(&path).unwrap().dtype(), Dtype::U8);
}

fn sample() -> Vec<u8> {
    MvolFile {
        channels: 1,
        extents: [2, 1, 1],
        payload: Payload::F32(vec![1.0, -2.0]),
    }
    .encode()
}

#[test]
fn corrupt_files_are_rejected() {
    let good = sample();
    assert_eq!(good.len(), HEADER_LEN + 8);

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(MvolFile::decode(&bad), Err(MvolError::BadMagic(_))));

    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(MvolFile::decode(&bad), Err(MvolError::UnsupportedVersion(9))));

    let mut bad = good.clone();
    bad[6] = 7;
    assert!(matches!(MvolFile::decode(&bad), Err(MvolError::UnknownDtype(7))));

    assert!(matches!(
        MvolFile::decode(&good[..10]),
        Err(MvolError::TruncatedHeader(10))
    ));
    assert!(matches!(
        MvolFile::decode(&good[..good.len() - 1]),
        Err(MvolError::TruncatedPayload { .. })
    ));

    let mut bad = good.clone();
    bad.push(0);
    assert!(matches!(
        MvolFile::decode(&bad),
        Err(MvolError::TrailingBytes { extra: 1 })
    ));

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(MvolFile::decode(&bad), Err(MvolError::ZeroExtent { .. })));
}

#[test]
fn labels_read_as_images_are_widened_and_images_are_not_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.mvol");
    let mut l = LabelVolume::zeros([1, 1, 2]);
    l.data_mut()[1] = 3;
    write_labels(&path, &l).unwrap();
    let t = segcascade::mvol::read_tensor(&path).unwrap();
    assert_eq!(t.shape(), &[1, 1, 1, 2]);
    assert_eq!(t.data(), &[0.0, 3.0]);
    let img = dir.path().join("i.mvol");
    segcascade::mvol::write_tensor(&img, &t).unwrap();
    assert!(read_labels(&img).is_err());
}
