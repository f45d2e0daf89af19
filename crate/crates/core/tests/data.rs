//! Scene synthesis against an independent reverse-painter rasterizer, plus
//! augmentation and batching properties.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mmbseg::data::{
    augment, batch_indices, generate_split, render_sample, AugmentConfig, AugmentDraw, Dataset, Sample,
    SceneObject, SceneSpec, ShapeKind,
};
use mmbseg::engine::kernels::IGNORE_INDEX;
use proptest::prelude::*;

/// Local frame of a pixel centre: the offset rotated by minus the angle.
fn local(o: &SceneObject, y: usize, x: usize) -> (f64, f64) {
    let (dx, dy) = (x as f64 + 0.5 - o.cx, y as f64 + 0.5 - o.cy);
    let (re, im) = (o.angle.cos(), -o.angle.sin());
    (dx * re - dy * im, dx * im + dy * re)
}

fn cross(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Shape membership from the geometric description of each class.
fn inside(kind: ShapeKind, p: (f64, f64), size: f64) -> bool {
    let r = size / 2.0;
    let (u, v) = p;
    let rho = u.hypot(v);
    let rect = |hu: f64, hv: f64| u.abs() <= hu && v.abs() <= hv;
    match kind {
        ShapeKind::Disk => rho <= r,
        ShapeKind::Ring => rho <= r && rho >= 0.55 * r,
        // Square inscribed in the circle of radius r.
        ShapeKind::Square => rect(r / 2f64.sqrt(), r / 2f64.sqrt()),
        // Equilateral triangle inscribed in the same circle, apex on +v.
        ShapeKind::Triangle => {
            let a = (0.0, r);
            let b = (-r * 3f64.sqrt() / 2.0, -r / 2.0);
            let c = (r * 3f64.sqrt() / 2.0, -r / 2.0);
            cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
        }
        ShapeKind::Bar => rect(r, r / 4.0),
        ShapeKind::Cross => rect(r, r / 5.0) || rect(r / 5.0, r),
    }
}

/// Label of each pixel: the last-painted object covering it, else background.
fn reverse_painter(spec: &SceneSpec, objects: &[SceneObject]) -> Vec<u16> {
    let mut out = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let top = objects
                .iter()
                .rev()
                .find(|o| inside(spec.classes[o.class as usize - 1], local(o, y, x), o.size));
            out.push(top.map_or(0, |o| o.class));
        }
    }
    out
}

fn small_spec() -> SceneSpec {
    SceneSpec {
        height: 64,
        width: 80,
        min_size: 4.0,
        ..SceneSpec::default()
    }
}

#[test]
fn label_maps_match_reverse_painter() {
    for (spec, n) in [(SceneSpec::default(), 12), (small_spec(), 5)] {
        for i in 0..n {
            let r = render_sample(&spec, 31, n, i).unwrap();
            let want = reverse_painter(&spec, &r.objects);
            // Pixel centres exactly on an edge may round either way.
            let diff = r.label.data().iter().zip(&want).filter(|(a, b)| a != b).count();
            assert!(diff <= 2, "sample {i}: {diff} pixels differ");
        }
    }
}

#[test]
fn objects_are_painted_largest_first_with_a_stable_background() {
    let spec = SceneSpec::default();
    let r = render_sample(&spec, 5, 3, 1).unwrap();
    assert!(r.objects.windows(2).all(|w| w[0].size >= w[1].size));
    let covered: BTreeSet<u16> = r.label.data().iter().copied().collect();
    assert!(covered.contains(&0));
    assert!(covered.iter().all(|&c| (c as usize) < spec.num_classes()));
}

#[test]
fn every_class_spans_an_eightfold_scale_range_and_stays_visible() {
    let spec = SceneSpec::default();
    let dir = tempfile::tempdir().unwrap();
    let index = generate_split(&spec, 10, 4, dir.path()).unwrap();
    for (c, range) in index.size_ranges().iter().enumerate() {
        let (lo, hi) = range.unwrap_or_else(|| panic!("class {} absent", c + 1));
        assert!(hi / lo >= 8.0, "class {}: {lo:.1}..{hi:.1}", c + 1);
    }
    let data = Dataset::load(dir.path()).unwrap();
    let seen: BTreeSet<u16> = data.samples.iter().flat_map(|s| s.label.data().iter().copied()).collect();
    assert_eq!(seen, (0..spec.num_classes() as u16).collect());
    for i in 0..10 {
        let r = render_sample(&spec, 4, 10, i).unwrap();
        for (j, o) in r.objects.iter().enumerate().filter(|(_, o)| o.forced) {
            let painted = (0..spec.height * spec.width)
                .filter(|p| inside(o_kind(&spec, o), local(o, p / spec.width, p % spec.width), o.size))
                .count();
            let visible = (0..spec.height * spec.width)
                .filter(|&p| {
                    let (y, x) = (p / spec.width, p % spec.width);
                    let on_top = r.objects[j + 1..]
                        .iter()
                        .all(|q| !inside(o_kind(&spec, q), local(q, y, x), q.size));
                    on_top && inside(o_kind(&spec, o), local(o, y, x), o.size)
                })
                .count();
            assert!(painted > 0 && visible as f64 >= spec.min_visible * painted as f64 - 2.0);
        }
    }
}

fn o_kind(spec: &SceneSpec, o: &SceneObject) -> ShapeKind {
    spec.classes[o.class as usize - 1]
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "imgs", "labels"] {
        let mut names: Vec<_> = fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names.into_iter().filter(|p| p.is_file()) {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn same_seed_gives_byte_identical_splits() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec();
    generate_split(&spec, 6, 77, a.path()).unwrap();
    generate_split(&spec, 6, 77, b.path()).unwrap();
    generate_split(&spec, 6, 78, c.path()).unwrap();
    let (ta, tb, tc) = (read_tree(a.path()), read_tree(b.path()), read_tree(c.path()));
    assert_eq!(ta.len(), 13);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn loaded_images_are_the_quantized_render() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    generate_split(&spec, 3, 2, dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    for (i, s) in data.samples.iter().enumerate() {
        let r = render_sample(&spec, 2, 3, i).unwrap();
        assert_eq!(s.label, r.label);
        let back: Vec<u8> = s.image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, r.image.data());
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn impossible_specs_fail_with_the_class_name() {
    let spec = SceneSpec {
        height: 8,
        width: 8,
        min_size: 40.0,
        size_ratio: 1.0,
        min_visible: 1.0,
        max_attempts: 3,
        ..SceneSpec::default()
    };
    let err = render_sample(&spec, 0, 1, 0).unwrap_err().to_string();
    assert!(ShapeKind::ALL.iter().any(|k| err.contains(k.name())), "{err}");
}

fn sample_from(seed: u64) -> Sample {
    render_sample(&small_spec(), seed, 4, (seed % 4) as usize).unwrap().sample()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_never_invents_labels(seed in 0u64..1000, lo in 0.3f64..1.0, span in 0.0f64..1.5, ch in 16usize..100) {
        let s = sample_from(seed);
        let cfg = AugmentConfig { crop: [ch, ch + 8], scale_range: [lo, lo + span], flip: true };
        let out = augment(&s, &mut common::rng(seed), &cfg).unwrap();
        prop_assert_eq!(out.label.shape(), &[ch, ch + 8][..]);
        prop_assert_eq!(out.image.shape(), &[3, ch, ch + 8][..]);
        let src: BTreeSet<u16> = s.label.data().iter().copied().collect();
        prop_assert!(out.label.data().iter().all(|v| *v == IGNORE_INDEX || src.contains(v)));
    }

    #[test]
    fn unit_scale_crop_is_an_exact_window(seed in 0u64..1000, top in 0usize..40, left in 0usize..40, flip in any::<bool>()) {
        let s = sample_from(seed);
        let (h, w) = s.extents();
        let (ch, cw) = (24, 32);
        let out = AugmentDraw { scale: 1.0, top, left, flip }.apply(&s, [ch, cw]).unwrap();
        for y in 0..ch {
            for x in 0..cw {
                let xs = if flip { cw - 1 - x } else { x };
                let (sy, sx) = (top + y, left + xs);
                let want = if sy < h && sx < w { s.label.data()[sy * w + sx] } else { IGNORE_INDEX };
                prop_assert_eq!(out.label.data()[y * cw + x], want);
            }
        }
    }

    #[test]
    fn batches_partition_the_dataset(len in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let batches = batch_indices(len, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), len.div_ceil(bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(batch_indices(len, bs, seed, epoch).unwrap(), batches);
    }
}
