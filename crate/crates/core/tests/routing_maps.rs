//! Routing-map export: stride selection, gray levels and round trips.

use std::collections::BTreeSet;

use proptest::prelude::*;

use multiid::evaluation::maps::{decode_map_frame, emit_routing_maps, map_file_name, read_pgm, LayerMap};

fn maps(seed: u64, steps: usize, layers: usize, grid: (usize, usize, usize), n: usize) -> Vec<LayerMap> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let len = grid.0 * grid.1 * grid.2;
    (0..steps)
        .flat_map(|step| (0..layers).map(move |layer| (step, layer)))
        .map(|(step, layer)| LayerMap {
            step,
            layer,
            grid,
            indices: (0..len).map(|_| rng.random_range(0..n)).collect(),
        })
        .collect()
}

#[test]
fn strides_pick_frames_and_layers() {
    let dir = tempfile::tempdir().unwrap();
    let ms = maps(1, 2, 8, (8, 4, 4), 2);
    let files = emit_routing_maps(&ms, 2, dir.path(), 4, 8, (4, 4)).unwrap();
    let names: BTreeSet<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let want: BTreeSet<String> = [0, 1]
        .iter()
        .flat_map(|&s| [0, 4].map(|f| map_file_name(s, 0, f)))
        .collect();
    assert_eq!(names, want);
}

#[test]
fn two_identities_are_black_and_white_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ms = maps(2, 1, 8, (8, 4, 4), 2);
    for path in emit_routing_maps(&ms, 2, dir.path(), 4, 8, (4, 4)).unwrap() {
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (16, 16));
        assert!(px.iter().all(|&v| v == 0 || v == 255));
        let frame: usize = path
            .file_stem()
            .unwrap()
            .to_string_lossy()
            .rsplit("frame")
            .next()
            .unwrap()
            .parse()
            .unwrap();
        let want = &ms[0].indices[frame * 16..(frame + 1) * 16];
        assert_eq!(decode_map_frame(&px, w, 2, (4, 4)), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Every emitted frame decodes to the indices it was drawn from, for any
    /// identity count, grid, stride and upsampling factor.
    #[test]
    fn round_trip(
        seed in any::<u64>(),
        n in 1usize..9,
        (t, h, w) in (1usize..6, 1usize..5, 1usize..5),
        (fs, ls) in (1usize..4, 1usize..4),
        (sy, sx) in (1usize..4, 1usize..4),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let ms = maps(seed, 1, 4, (t, h, w), n);
        let files = emit_routing_maps(&ms, n, dir.path(), fs, ls, (sy, sx)).unwrap();
        prop_assert_eq!(files.len(), 4usize.div_ceil(ls) * t.div_ceil(fs));
        for m in ms.iter().filter(|m| m.layer % ls == 0) {
            for f in (0..t).step_by(fs) {
                let (pw, ph, px) = read_pgm(&dir.path().join(map_file_name(m.step, m.layer, f))).unwrap();
                prop_assert_eq!((pw, ph), (w * sx, h * sy));
                let got = decode_map_frame(&px, pw, n, (sy, sx));
                prop_assert_eq!(&got[..], &m.indices[f * h * w..(f + 1) * h * w]);
            }
        }
    }
}
