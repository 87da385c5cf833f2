mod common;

use sha2::{Digest, Sha256};
use uie_dal::datastore::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_samples, parse_manifest, read_depth16, read_manifest,
    read_rgb8, render_manifest, save_checkpoint, split_for_scene, write_dataset, write_depth16, write_rgb8, Split,
    MAGIC,
};
use uie_dal::formation::{synthesize_dataset, CoefficientTable, SynthesisRanges, BUNDLED_COEFFICIENTS};
use uie_dal::image::{DepthMap, Image};
use uie_dal::scenes::procedural_scenes;
use uie_dal::training::{TrainConfig, Trainer};
use uie_dal::Error;

fn dataset(dir: &std::path::Path, scenes: usize, draws: usize) -> Vec<uie_dal::datastore::ManifestEntry> {
    let scenes = procedural_scenes(scenes, 3, 16, 16).unwrap();
    let table = CoefficientTable::<f32>::parse(BUNDLED_COEFFICIENTS).unwrap();
    let samples = synthesize_dataset(&scenes, table.specs(), draws, 3, &SynthesisRanges::default()).unwrap();
    write_dataset(dir, &scenes, &samples).unwrap()
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let written = dataset(dir.path(), 1, 6);
    assert_eq!(written.len(), 36);
    let path = dir.path().join("manifest.jsonl");
    let read = read_manifest(&path).unwrap();
    assert_eq!(read, written);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 36);
    assert_eq!(parse_manifest(&render_manifest(&read).unwrap()).unwrap(), read);
    let set = load_samples(&path, &read, None).unwrap();
    assert_eq!(set.len(), 36);
    assert_eq!(set.samples[7].class_id, read[7].class_id);
}

#[test]
fn missing_image_is_a_dangling_reference() {
    let dir = tempfile::tempdir().unwrap();
    let entries = dataset(dir.path(), 1, 1);
    std::fs::remove_file(dir.path().join(&entries[2].degraded_path)).unwrap();
    match read_manifest(&dir.path().join("manifest.jsonl")) {
        Err(Error::DanglingReference(paths)) => {
            assert_eq!(paths.len(), 1);
            assert!(paths[0].ends_with(&entries[2].degraded_path));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let entries = dataset(dir.path(), 1, 1);
    let good = render_manifest(&entries[..2]).unwrap();
    let text = format!("{good}{{\"degraded_path\": 3}}\n");
    assert!(matches!(parse_manifest(&text), Err(Error::Parse { line: 3, .. })));

    // a record claiming the wrong split is rejected as well
    let mut lines: Vec<String> = good.lines().map(str::to_string).collect();
    let wrong = match entries[1].split {
        Split::Train => "\"val\"",
        _ => "\"train\"",
    };
    lines[1] = lines[1].replace(&format!("\"{}\"", entries[1].split), wrong);
    assert!(matches!(
        parse_manifest(&lines.join("\n")),
        Err(Error::Parse { line: 2, .. })
    ));

    let extra = good.lines().next().unwrap().replacen('{', "{\"surprise\":1,", 1);
    assert!(matches!(parse_manifest(&extra), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn split_is_a_pure_function_of_the_scene_id() {
    let mut counts = [0usize; 3];
    for i in 0..2000 {
        let id = format!("scene{i:04}");
        let h = Sha256::digest(id.as_bytes());
        let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) % 100;
        let want = if bucket < 80 {
            Split::Train
        } else if bucket < 90 {
            Split::Val
        } else {
            Split::Test
        };
        assert_eq!(split_for_scene(&id), want, "{id}");
        counts[want as usize] += 1;
    }
    assert!((1500..1700).contains(&counts[0]), "{counts:?}");
    assert!(
        (140..260).contains(&counts[1]) && (140..260).contains(&counts[2]),
        "{counts:?}"
    );
}

#[test]
fn png_round_trips_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0);
    write_rgb8(&dir.path().join("a.png"), &img).unwrap();
    let back = read_rgb8(&dir.path().join("a.png")).unwrap();
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);

    let depth = DepthMap::new(2, 2, vec![0.0f32, 1.2345, 10.0, 65.0]).unwrap();
    write_depth16(&dir.path().join("d.png"), &depth).unwrap();
    let d = read_depth16(&dir.path().join("d.png")).unwrap();
    for (a, b) in d.data().iter().zip(depth.data()) {
        assert!((a - b).abs() <= 0.0005 + 1e-6, "{a} vs {b}");
    }
}

fn trained(epochs: usize) -> Trainer<f32> {
    let data = common::toy_data(2, 1, 16, 5);
    let cfg = TrainConfig {
        threshold_g: 0.5,
        epochs,
        batch_size: 4,
        eval_batch_size: 8,
        max_warmup_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&common::small_arch(16), cfg).unwrap();
    t.run_training(&data, |_| Ok(())).unwrap();
    t
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let t = trained(3);
    let bytes = encode_checkpoint(&t).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let back = decode_checkpoint(&bytes).unwrap();
    for (a, b) in t.bundle.graphs().iter().zip(back.bundle.graphs()) {
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.shape(), pb.tensor.shape());
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
    }
    assert_eq!(t.state.optim, back.state.optim);
    assert_eq!(t.config, back.config);
    assert_eq!(t.bundle.config, back.bundle.config);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    save_checkpoint(&t, &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = encode_checkpoint(&trained(1)).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));

    for cut in [20, bytes.len() / 2, bytes.len() - 1] {
        let r = decode_checkpoint(&bytes[..cut]);
        assert!(matches!(r, Err(Error::Corruption(_))), "cut at {cut}: {r:?}");
    }

    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(Error::Corruption(_))));

    let key = b"\"format_version\":1";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
    let mut wrong = bytes.clone();
    wrong[at + key.len() - 1] = b'2';
    assert!(matches!(decode_checkpoint(&wrong), Err(Error::Format(_))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = common::toy_data(2, 1, 16, 5);
    let straight = trained(10);

    let mut first = trained(7);
    assert_eq!(first.state.epoch, 7);
    first.config.epochs = 10;
    let mut resumed = decode_checkpoint(&encode_checkpoint(&first).unwrap()).unwrap();
    resumed.run_training(&data, |_| Ok(())).unwrap();
    assert_eq!(resumed.state.epoch, 10);
    assert_eq!(
        encode_checkpoint(&resumed).unwrap(),
        encode_checkpoint(&straight).unwrap()
    );
}
