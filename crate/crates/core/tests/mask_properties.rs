use mum_core::grid::{generate_masks, invert_masks, validate_masks, MixingMaskSet};
use mum_core::rng::{derive_rng, rng_from_seed};
use proptest::prelude::*;

#[test]
fn every_draw_is_a_valid_permutation() {
    for seed in 0..1000u64 {
        let mut rng = rng_from_seed(seed);
        let ng = 1 + (seed % 6) as usize;
        let nt = 1 + (seed % 5) as usize;
        let m = generate_masks(&mut rng, ng, nt).unwrap();
        assert!(validate_masks(&m).is_ok(), "seed {seed}");
    }
}

#[test]
fn exhaustive_small_sizes_are_valid() {
    // For group size 2 and a 1x1 grid only two mask sets exist; both must appear.
    let mut seen = std::collections::BTreeSet::new();
    let mut rng = rng_from_seed(0);
    for _ in 0..200 {
        let m = generate_masks(&mut rng, 2, 1).unwrap();
        validate_masks(&m).unwrap();
        seen.insert(m.cells());
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn source_frequency_is_uniform_per_cell() {
    const DRAWS: usize = 10_000;
    let mut rng = rng_from_seed(42);
    let mut counts = [[[0usize; 3]; 4]; 3];
    for _ in 0..DRAWS {
        let m = generate_masks(&mut rng, 3, 2).unwrap();
        for (g, grid) in counts.iter_mut().enumerate() {
            for (pos, cell) in grid.iter_mut().enumerate() {
                cell[m.cell(g, pos / 2, pos % 2)] += 1;
            }
        }
    }
    for grid in &counts {
        for cell in grid {
            for &c in cell {
                let f = c as f64 / DRAWS as f64;
                assert!((f - 1.0 / 3.0).abs() <= 0.02, "frequency {f}");
            }
        }
    }
}

#[test]
fn serialization_is_byte_reproducible() {
    let a = generate_masks(&mut derive_rng(3, &[1]), 4, 4).unwrap().to_json();
    let b = generate_masks(&mut derive_rng(3, &[1]), 4, 4).unwrap().to_json();
    assert_eq!(a, b);
    assert_eq!(MixingMaskSet::from_json(&a).unwrap().to_json(), a);
}

proptest! {
    #[test]
    fn double_inversion_is_identity(seed in any::<u64>(), ng in 1usize..7, nt in 1usize..6) {
        let m = generate_masks(&mut rng_from_seed(seed), ng, nt).unwrap();
        let u = invert_masks(&m).unwrap();
        for g in 0..ng {
            for i in 0..nt {
                for j in 0..nt {
                    prop_assert_eq!(u.cell(m.cell(g, i, j), i, j), g);
                }
            }
        }
        prop_assert_eq!(u.invert(), m);
    }
}
