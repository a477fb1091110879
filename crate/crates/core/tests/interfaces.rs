//! On-disk formats shared with the exporter.

use rand::Rng;

use vitbind::io::{
    add_image, load_images, load_labels, mirror_pixels, read_archive, write_labels, ArchiveBuilder, Architecture,
    ImageRecord, LabelRaster, ModelBundle, NormPlacement, TensorArchive, IGNORE_ID,
};
use vitbind::rng;
use vitbind::tensor::DenseTensor;
use vitbind::vit::{forward, forward_with_trace, patch_embed, verify_golden, AttentionCapture, TraceOptions};

fn image(side: usize, seed: u64) -> DenseTensor {
    let mut g = rng::rng(seed);
    DenseTensor::from_fn(vec![3, side, side], |_| g.random_range(-2.0..2.0))
}

/// Golden dump in the exporter layout, produced by our own forward pass.
fn golden_for(bundle: &ModelBundle, seeds: &[u64]) -> TensorArchive {
    let mut b = ArchiveBuilder::new();
    let depth = bundle.arch.depth;
    for &s in seeds {
        let px = image(bundle.arch.image_side(), s);
        let seq = patch_embed(&px, bundle).unwrap();
        let opts = TraceOptions {
            attention: AttentionCapture::PerHead,
        };
        let trace = forward_with_trace(&seq, bundle, depth, &[], opts).unwrap();
        let p = format!("golden/img{s}");
        b.add(format!("{p}/pixels"), px).unwrap();
        b.add(format!("{p}/embed"), seq.tokens.clone()).unwrap();
        for l in 0..=depth {
            b.add(format!("{p}/h/{l}"), trace.hidden[l].clone()).unwrap();
        }
        for (l, block) in trace.blocks.iter().enumerate() {
            b.add(format!("{p}/s/{l}"), block.post_attn.clone()).unwrap();
            let attn = block.attention.as_ref().unwrap().per_head.clone().unwrap();
            b.add(format!("{p}/attn/{l}"), attn).unwrap();
        }
    }
    TensorArchive::from_bytes(b.to_bytes().unwrap()).unwrap()
}

#[test]
fn golden_dump_replays_within_tolerance() {
    for norm in [NormPlacement::Pre, NormPlacement::Post] {
        let bundle = ModelBundle::random_init(Architecture::tiny(3, 16, 4, 3, norm), 5).unwrap();
        let golden = golden_for(&bundle, &[1, 2, 3]);
        let report = verify_golden(&golden, &bundle, 1e-3).unwrap();
        assert!(report.passed());
        // pixels are inputs; everything else is checked: embed + 4 h + 3 s + 3 attn per image
        assert_eq!(report.checks.len(), 3 * 11);
        assert_eq!(report.worst().unwrap().max_abs_diff, 0.0);
    }
}

#[test]
fn golden_dump_detects_drift_and_wrong_placement() {
    let bundle = ModelBundle::random_init(Architecture::tiny(2, 16, 2, 3, NormPlacement::Pre), 9).unwrap();
    let golden = golden_for(&bundle, &[4]);
    let mut b = ArchiveBuilder::new();
    for name in golden.names() {
        let mut t = golden.get(name).unwrap();
        if name == "golden/img4/h/2" {
            t.data_mut()[7] += 5e-3;
        }
        b.add(name, t).unwrap();
    }
    let drifted = TensorArchive::from_bytes(b.to_bytes().unwrap()).unwrap();
    let report = verify_golden(&drifted, &bundle, 1e-3).unwrap();
    assert!(!report.passed());
    assert_eq!(report.worst().unwrap().name, "golden/img4/h/2");

    let mut post = bundle.clone();
    post.arch.norm = NormPlacement::Post;
    assert!(!verify_golden(&golden, &post, 1e-3).unwrap().passed());
}

#[test]
fn golden_without_pixels_is_rejected() {
    let bundle = ModelBundle::random_init(Architecture::tiny(1, 8, 2, 2, NormPlacement::Pre), 1).unwrap();
    let mut b = ArchiveBuilder::new();
    b.add("golden/x/embed", DenseTensor::zeros(vec![5, 8])).unwrap();
    let a = TensorArchive::from_bytes(b.to_bytes().unwrap()).unwrap();
    assert!(verify_golden(&a, &bundle, 1e-3).is_err());
}

#[test]
fn bundle_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut arch = Architecture::tiny(24, 8, 2, 2, NormPlacement::Pre);
    arch.layer_scale = true;
    let bundle = ModelBundle::random_init(arch, 3).unwrap();
    let path = dir.path().join("bundle.vbt");
    bundle.save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap();
    assert_eq!(loaded.arch.depth, 24);
    assert_eq!(loaded.layers.len(), 24);
    let seq = patch_embed(&image(loaded.arch.image_side(), 2), &loaded).unwrap();
    assert_eq!(forward(&seq, &bundle).unwrap(), forward(&seq, &loaded).unwrap());
}

#[test]
fn label_rasters_round_trip_at_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let side = 37;
    let mut g = rng::rng(4);
    let rasters: Vec<LabelRaster> = (0..3)
        .map(|i| {
            let inst: Vec<i32> = (0..side * side).map(|_| g.random_range(-1..6)).collect();
            let class: Vec<i32> = inst.iter().map(|&v| if v == IGNORE_ID { IGNORE_ID } else { v / 2 }).collect();
            LabelRaster::new(format!("ade_{i:05}"), side, inst, class).unwrap()
        })
        .collect();
    let path = dir.path().join("labels.vbt");
    write_labels(&path, &rasters).unwrap();
    let loaded = load_labels(&path).unwrap();
    assert_eq!(loaded, rasters);
    for r in &loaded {
        r.check_side(37).unwrap();
        assert!(r.check_side(16).is_err());
    }
}

#[test]
fn instances_must_map_to_one_class() {
    let inst = vec![0, 0, 1, 1];
    assert!(LabelRaster::new("bad", 2, inst.clone(), vec![3, 4, 5, 5]).is_err());
    assert!(LabelRaster::new("good", 2, inst, vec![3, 3, 5, 5]).is_ok());
}

#[test]
fn image_archives_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = ArchiveBuilder::new();
    let records: Vec<ImageRecord> = ["b", "a", "c"]
        .iter()
        .enumerate()
        .map(|(i, id)| ImageRecord {
            id: id.to_string(),
            pixels: image(28, i as u64),
        })
        .collect();
    for r in &records {
        add_image(&mut b, r).unwrap();
    }
    let path = dir.path().join("images.vbt");
    b.write(&path).unwrap();
    let loaded = load_images(&path).unwrap();
    let ids: Vec<&str> = loaded.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(loaded[0].pixels, records[1].pixels);
    let twice = mirror_pixels(&mirror_pixels(&loaded[2].pixels).unwrap()).unwrap();
    assert_eq!(twice, loaded[2].pixels);
    assert!(read_archive(&path).unwrap().contains("images/a/pixels"));
}

#[test]
fn flat_images_are_rejected() {
    let mut b = ArchiveBuilder::new();
    let r = ImageRecord {
        id: "x".into(),
        pixels: DenseTensor::zeros(vec![28, 28]),
    };
    assert!(add_image(&mut b, &r).is_err());
}
