//! Cross-checks sub-image extraction against a brute-force enumeration of
//! window positions, plus pixel-exact content and coverage properties.

use srdistill_core::data_prep::{axis_offsets, extract_subimages};
use srdistill_core::ImageTensor;

/// Every stride multiple whose window fits, plus one flush-to-edge window
/// whenever no stride multiple lands exactly on the edge. Built by
/// filtering the full position range rather than stepping a cursor.
fn enumerated_offsets(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let edge = dim - size;
    let mut offsets: Vec<usize> = (0..=edge).filter(|o| o % stride == 0).collect();
    if offsets.last() != Some(&edge) {
        offsets.push(edge);
    }
    offsets
}

fn checkerboard(h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        ((y * 31 + x * 17 + c * 101) % 256) as f64 / 255.0
    })
}

#[test]
fn pinned_offset_examples() {
    assert_eq!(enumerated_offsets(32, 16, 8), vec![0, 8, 16]);
    assert_eq!(axis_offsets(32, 16, 8), vec![0, 8, 16]);
    assert_eq!(enumerated_offsets(33, 16, 8), vec![0, 8, 16, 17]);
    assert_eq!(axis_offsets(33, 16, 8), vec![0, 8, 16, 17]);
    assert_eq!(axis_offsets(16, 16, 8), vec![0]);
    assert_eq!(axis_offsets(17, 16, 8), vec![0, 1]);
    assert_eq!(axis_offsets(20, 8, 4), vec![0, 4, 8, 12]);
}

#[test]
fn square_grid_matches_per_axis_product() {
    let img = checkerboard(33, 33);
    let windows = extract_subimages(&img, 16, 8).unwrap();
    assert_eq!(windows.len(), 16);
    let expect = enumerated_offsets(33, 16, 8);
    let mut want: Vec<(usize, usize)> = Vec::new();
    for &r in &expect {
        for &c in &expect {
            want.push((r, c));
        }
    }
    let got: Vec<(usize, usize)> = windows.iter().map(|(o, _)| *o).collect();
    assert_eq!(got, want);
}

#[test]
fn offsets_match_enumeration_across_shapes() {
    for dim in 8..=40 {
        for size in [5usize, 8, 13, 16] {
            if size > dim {
                continue;
            }
            for stride in [3usize, 5, 8, 16] {
                let got = axis_offsets(dim, size, stride);
                let want = enumerated_offsets(dim, size, stride);
                assert_eq!(
                    got, want,
                    "offsets diverge at dim={dim} size={size} stride={stride}"
                );
                if stride <= size {
                    let mut covered = vec![false; dim];
                    for &o in &got {
                        for slot in covered.iter_mut().skip(o).take(size) {
                            *slot = true;
                        }
                    }
                    assert!(
                        covered.iter().all(|&c| c),
                        "coverage gap at dim={dim} size={size} stride={stride}"
                    );
                }
            }
        }
    }
}

#[test]
fn window_content_equals_source_slices() {
    let img = checkerboard(29, 23);
    let windows = extract_subimages(&img, 8, 5).unwrap();
    assert_eq!(
        windows.len(),
        enumerated_offsets(29, 8, 5).len() * enumerated_offsets(23, 8, 5).len()
    );
    for ((r, c), sub) in &windows {
        assert_eq!((sub.height(), sub.width()), (8, 8));
        for y in 0..8 {
            for x in 0..8 {
                for ch in 0..3 {
                    assert_eq!(
                        sub.data()[[y, x, ch]],
                        img.data()[[r + y, c + x, ch]],
                        "pixel mismatch in window at ({r},{c})"
                    );
                }
            }
        }
    }
}

#[test]
fn full_sized_window_is_the_whole_image() {
    let img = checkerboard(14, 14);
    let windows = extract_subimages(&img, 14, 6).unwrap();
    assert_eq!(windows.len(), 1);
    assert_eq!(windows[0].0, (0, 0));
    assert_eq!(windows[0].1.data(), img.data());
}
