use dlic::codec::{read_checkpoint, write_checkpoint};
use dlic::eval::datasets::{natural_like, out_of_domain, pixel_art, vector_art};
use dlic::eval::{curves_from_records, evaluate, fixed_method, read_csv, write_csv, RdRecord, DYNAMIC_METHOD};
use dlic::{
    build_bank, end_to_end_encode, onestep_encode, unpack, AdaptationConfig, AdapterKind, ClusterBank, CodecConfig,
    CodecModel, CodecModel32, CodecModel64, CompressedBlob, Error, GateMode, Image32, Image64, OneStepConfig,
};

fn model32(seed: u64) -> CodecModel32 {
    let mut m = CodecModel::new(CodecConfig::default(), seed).unwrap();
    m.lambda = 0.01;
    m
}

fn quick(mode: GateMode) -> AdaptationConfig {
    AdaptationConfig {
        n1: 6,
        n2: 8,
        warmup: 3,
        gate_mode: mode,
        lr_delta: 1e-2,
        fallback: false,
        ..AdaptationConfig::default()
    }
}

fn same_bits(a: &Image32, b: &Image32) -> bool {
    a.height() == b.height()
        && a.width() == b.width()
        && a.pixels.data.iter().zip(&b.pixels.data).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn every_variant_decodes_to_the_server_reconstruction() {
    let model = model32(1);
    let x: Image32 = pixel_art(2, 24, 7);
    for kind in AdapterKind::ALL {
        let cfg = AdaptationConfig {
            variant: kind,
            ..quick(GateMode::Fixed(4))
        };
        let out = end_to_end_encode(&x, &model, &cfg).unwrap();
        assert_eq!(out.blob.header.variant, kind);
        let blob = CompressedBlob::from_bytes(&out.blob.to_bytes()).unwrap();
        let decoded = unpack(&blob, &model).unwrap();
        assert!(same_bits(&decoded, &out.reconstruction), "{kind:?}");
    }
}

#[test]
fn odd_sizes_round_trip_through_padding() {
    let model = model32(2);
    let x: Image32 = vector_art(1, 24, 3).crop(21, 19).unwrap();
    let out = end_to_end_encode(&x, &model, &quick(GateMode::Dynamic)).unwrap();
    assert_eq!((out.blob.header.height, out.blob.header.width), (21, 19));
    let decoded = unpack(&out.blob, &model).unwrap();
    assert_eq!((decoded.height(), decoded.width()), (21, 19));
    assert!(same_bits(&decoded, &out.reconstruction));
}

#[test]
fn double_precision_pipeline_is_self_consistent() {
    let model: CodecModel64 = model32(3).cast();
    let x: Image64 = natural_like(0, 16, 2);
    let out = end_to_end_encode(&x, &model, &quick(GateMode::Fixed(2))).unwrap();
    let decoded = unpack(&out.blob, &model).unwrap();
    assert_eq!(decoded.pixels.data, out.reconstruction.pixels.data);
}

#[test]
fn reloaded_checkpoint_decodes_identically() {
    let model = model32(4);
    let reloaded: CodecModel32 = read_checkpoint(&write_checkpoint(&model)).unwrap();
    let x: Image32 = pixel_art(0, 16, 1);
    let out = end_to_end_encode(&x, &model, &quick(GateMode::Fixed(3))).unwrap();
    assert!(same_bits(&unpack(&out.blob, &reloaded).unwrap(), &out.reconstruction));
}

#[test]
fn blob_from_another_codec_is_rejected() {
    let x: Image32 = pixel_art(1, 16, 1);
    let out = end_to_end_encode(&x, &model32(5), &AdaptationConfig::zero()).unwrap();
    assert!(matches!(unpack(&out.blob, &model32(6)), Err(Error::Incompatible(_))));
}

#[test]
fn truncated_blobs_fail_cleanly() {
    let model = model32(7);
    let x: Image32 = vector_art(0, 16, 4);
    let bytes = end_to_end_encode(&x, &model, &quick(GateMode::Fixed(1))).unwrap().blob.to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(CompressedBlob::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(CompressedBlob::from_bytes(&bad).is_err());
}

#[test]
fn curves_rebuild_identically_from_the_records_csv() {
    let models = [model32(8), {
        let mut m = model32(9);
        m.lambda = 0.03;
        m
    }];
    let images: Vec<Image32> = out_of_domain(2, 16, 5);
    let modes = [
        (fixed_method(0), GateMode::Fixed(0)),
        (DYNAMIC_METHOD.to_string(), GateMode::Dynamic),
    ];
    let records = evaluate(&images, &models, &quick(GateMode::Dynamic), &modes).unwrap();
    assert_eq!(records.len(), 2 * 2 * 2);
    let mut csv = Vec::new();
    write_csv(&records, &mut csv).unwrap();
    let back: Vec<RdRecord> = read_csv(csv.as_slice()).unwrap();
    assert_eq!(back, records);
    assert_eq!(curves_from_records(&back).unwrap(), curves_from_records(&records).unwrap());
}

#[test]
fn saved_bank_encodes_like_the_original() {
    let model = model32(10);
    let corpus: Vec<Image32> = out_of_domain(8, 16, 6);
    let cfg = OneStepConfig {
        n_clusters: 2,
        fit_steps: 5,
        ..OneStepConfig::default()
    };
    let bank = build_bank(&corpus, &model, &cfg).unwrap();
    let reloaded = ClusterBank::from_bytes(&bank.to_bytes()).unwrap();
    let x: Image32 = pixel_art(5, 16, 8);
    let a = onestep_encode(&x, &model, &bank).unwrap();
    let b = onestep_encode(&x, &model, &reloaded).unwrap();
    assert_eq!(a.blob.to_bytes(), b.blob.to_bytes());
    assert_eq!(a.blob.header.cluster, Some(a.cluster as u8));
    assert!(same_bits(&unpack(&a.blob, &model).unwrap(), &a.reconstruction));
}
